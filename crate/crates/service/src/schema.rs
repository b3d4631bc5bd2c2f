use serde_json::{json, Value};

fn number_array() -> Value {
    json!({ "type": "array", "items": { "type": "number" } })
}

fn error_response(description: &str) -> Value {
    json!({ "description": description, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } })
}

fn json_response(description: &str, schema: Value) -> Value {
    json!({ "description": description, "content": { "application/json": { "schema": schema } } })
}

/// OpenAPI 3.0 description of every endpoint.
pub fn schema() -> Value {
    let prediction = json!({
        "type": "object",
        "required": ["class", "class_probs", "concepts", "intervened", "used_entry"],
        "properties": {
            "class": { "type": "integer", "minimum": 0 },
            "class_probs": number_array(),
            "concepts": number_array(),
            "intervened": { "type": "boolean" },
            "used_entry": { "type": "integer", "nullable": true }
        }
    });
    let intervention = json!({
        "type": "array",
        "minItems": 1,
        "items": {
            "type": "object",
            "required": ["index", "value"],
            "properties": {
                "index": { "type": "integer", "minimum": 0 },
                "value": { "type": "number", "minimum": 0, "maximum": 1 }
            }
        }
    });
    let flagged = json!({
        "type": "object",
        "required": ["sample_id", "concepts", "concept_probs", "class", "class_probs", "detection_score", "nearest_distance"],
        "properties": {
            "sample_id": { "type": "integer" },
            "concepts": { "type": "array", "items": { "type": "integer", "enum": [0, 1] } },
            "concept_probs": number_array(),
            "class": { "type": "integer" },
            "class_probs": number_array(),
            "detection_score": { "type": "number", "description": "Negative distance to the k-th nearest memory entry" },
            "nearest_distance": { "type": "number" },
            "concepts_true": { "type": "array", "items": { "type": "integer" }, "description": "Only in oracle-reveal mode" }
        }
    });
    let memory_entry = json!({
        "type": "object",
        "required": ["entry_id", "kind", "source_sample_id", "intervention", "created_at"],
        "properties": {
            "entry_id": { "type": "integer" },
            "kind": { "type": "string", "enum": ["mistake", "intervention"] },
            "source_sample_id": { "type": "integer" },
            "intervention": { "allOf": [{ "$ref": "#/components/schemas/Intervention" }], "nullable": true },
            "created_at": { "type": "integer", "description": "Milliseconds since the Unix epoch or an insertion tick" }
        }
    });
    let id_param = |name: &str| json!([{ "name": name, "in": "path", "required": true, "schema": { "type": "integer", "minimum": 0 } }]);

    json!({
        "openapi": "3.0.3",
        "info": { "title": "cb2m intervention service", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/flagged": { "get": {
                "summary": "Stream samples the memory flags as likely mistakes, by descending detection score",
                "parameters": [{ "name": "limit", "in": "query", "schema": { "type": "integer", "minimum": 0, "default": crate::DEFAULT_FLAGGED_LIMIT } }],
                "responses": {
                    "200": json_response("Flagged samples", json!({ "type": "array", "items": { "$ref": "#/components/schemas/FlaggedItem" } })),
                    "503": error_response("No model loaded")
                }
            }},
            "/interventions": { "post": {
                "summary": "Store a concept correction for a stream sample",
                "requestBody": { "required": true, "content": { "application/json": { "schema": {
                    "type": "object",
                    "required": ["sample_id", "entries"],
                    "properties": { "sample_id": { "type": "integer" }, "entries": { "$ref": "#/components/schemas/Intervention" } }
                }}}},
                "responses": {
                    "201": json_response("Stored", json!({
                        "type": "object",
                        "required": ["entry_id", "new_prediction"],
                        "properties": { "entry_id": { "type": "integer" }, "new_prediction": { "$ref": "#/components/schemas/Prediction" } }
                    })),
                    "404": error_response("Unknown sample"),
                    "422": error_response("Empty intervention, duplicate or out-of-range index, or value outside [0, 1]"),
                    "503": error_response("No model loaded")
                }
            }},
            "/memory": { "get": {
                "summary": "List memory entries",
                "responses": { "200": json_response("Memory contents", json!({
                    "type": "object",
                    "required": ["width", "n_concepts", "size", "entries"],
                    "properties": {
                        "width": { "type": "integer" },
                        "n_concepts": { "type": "integer" },
                        "size": { "type": "integer" },
                        "entries": { "type": "array", "items": { "$ref": "#/components/schemas/MemoryEntry" } }
                    }
                }))}
            }},
            "/memory/{entry_id}": { "delete": {
                "summary": "Remove one memory entry",
                "parameters": id_param("entry_id"),
                "responses": { "204": { "description": "Removed" }, "404": error_response("Unknown entry") }
            }},
            "/predict/{sample_id}": { "get": {
                "summary": "Predict a stream sample, reusing the nearest memorized intervention within the generalization threshold",
                "parameters": id_param("sample_id"),
                "responses": {
                    "200": json_response("Prediction", json!({ "$ref": "#/components/schemas/Prediction" })),
                    "404": error_response("Unknown sample"),
                    "503": error_response("No model loaded")
                }
            }},
            "/schema": { "get": {
                "summary": "This document",
                "responses": { "200": { "description": "OpenAPI document" } }
            }}
        },
        "components": { "schemas": {
            "Error": { "type": "object", "required": ["error"], "properties": { "error": { "type": "string" } } },
            "Prediction": prediction,
            "Intervention": intervention,
            "FlaggedItem": flagged,
            "MemoryEntry": memory_entry
        }}
    })
}
