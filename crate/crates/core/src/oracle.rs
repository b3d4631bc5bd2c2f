//! Simulated human feedback.
//!
//! The oracle always answers with ground-truth concept values; policies only
//! decide which concepts get asked about.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Cb2mError, Result};
use crate::memory::{Cb2mConfig, TwofoldMemory};
use crate::metrics::accuracy;
use crate::model::CbmModel;
use crate::types::{apply_intervention, ConceptVector, Intervention, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    All,
    /// Concepts with predicted probability closest to 0.5 first.
    Uncertainty,
    /// Uniformly random subset; the stream is keyed by sample id.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPolicy {
    pub kind: PolicyKind,
    /// Ignored for [`PolicyKind::All`].
    pub budget: usize,
}

impl SubsetPolicy {
    pub fn all() -> Self {
        Self { kind: PolicyKind::All, budget: 0 }
    }

    pub fn new(kind: PolicyKind, budget: usize) -> Self {
        Self { kind, budget }
    }
}

/// Permutation of concept indices, ascending by `|p - 0.5|`, ties by index.
pub fn rank_concepts_uncertainty(predicted: &ConceptVector) -> Vec<usize> {
    let p = predicted.values();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (p[a] - 0.5).abs().total_cmp(&(p[b] - 0.5).abs()).then(a.cmp(&b)));
    order
}

pub fn simulate_intervention(sample: &Sample, predicted: &ConceptVector, policy: &SubsetPolicy) -> Result<Intervention> {
    let c = sample.n_concepts();
    crate::error::check_len("predicted concepts", c, predicted.len())?;
    let indices: Vec<usize> = match policy.kind {
        PolicyKind::All => (0..c).collect(),
        _ if policy.budget == 0 || policy.budget > c => {
            return Err(Cb2mError::InvalidConfig(format!(
                "budget {} outside [1, {c}]",
                policy.budget
            )))
        }
        PolicyKind::Uncertainty => {
            let mut order = rank_concepts_uncertainty(predicted);
            order.truncate(policy.budget);
            order
        }
        PolicyKind::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(sample.id.0);
            index::sample(&mut rng, c, policy.budget).into_vec()
        }
    };
    Intervention::new(indices.into_iter().map(|j| (j, f64::from(sample.concepts_true[j]))))
}

/// Class predictions after the oracle corrects every sample with `flags[i]`
/// set; unflagged samples keep the base prediction.
pub fn intervene_flagged(model: &CbmModel, data: &[Sample], flags: &[bool], policy: &SubsetPolicy) -> Result<Vec<usize>> {
    crate::error::check_len("flags", data.len(), flags.len())?;
    data.iter()
        .zip(flags)
        .map(|(x, &flag)| {
            let p = model.predict(x)?;
            if !flag {
                return Ok(p.label);
            }
            let i = simulate_intervention(x, &p.concepts, policy)?;
            Ok(model.predictor.predict_class(&apply_intervention(&p.concepts, &i)?)?.0)
        })
        .collect()
}

/// Class accuracy on `data` when the oracle corrects `budget` concepts of each
/// sample the memory flags. Budget 0 leaves every prediction untouched.
pub fn intervention_curve(
    model: &CbmModel,
    mem: &TwofoldMemory,
    cfg: &Cb2mConfig,
    data: &[Sample],
    kind: PolicyKind,
    budgets: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if budgets.is_empty() {
        return Err(Cb2mError::InvalidConfig("intervention curve needs at least one budget".into()));
    }
    let flags: Vec<bool> = data
        .iter()
        .map(|x| mem.detect_mistake(&model.bottleneck.encode(x)?, cfg))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = data.iter().map(|x| x.label_true).collect();
    let none = vec![false; data.len()];
    budgets
        .iter()
        .map(|&b| {
            let preds = if b == 0 {
                intervene_flagged(model, data, &none, &SubsetPolicy::all())?
            } else {
                intervene_flagged(model, data, &flags, &SubsetPolicy::new(kind, b))?
            };
            let acc = accuracy(&preds, &truth).ok_or(Cb2mError::Undefined("accuracy of an empty split"))?;
            Ok((b, acc))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SampleId;
    use proptest::prelude::*;

    fn sample(truth: Vec<u8>) -> Sample {
        Sample::new(SampleId(7), vec![0.0; 2], truth, 0).unwrap()
    }

    fn cv(p: &[f64]) -> ConceptVector {
        ConceptVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn uncertainty_ranking_examples() {
        assert_eq!(rank_concepts_uncertainty(&cv(&[0.1, 0.5, 0.9])), vec![1, 0, 2]);
        assert_eq!(rank_concepts_uncertainty(&cv(&[0.3; 5])), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn all_policy_is_ground_truth() {
        let x = sample(vec![1, 0, 1]);
        let i = simulate_intervention(&x, &cv(&[0.2, 0.9, 0.4]), &SubsetPolicy::all()).unwrap();
        assert_eq!(i, x.full_truth_intervention());
    }

    #[test]
    fn uncertainty_budget_one_picks_the_coin_flip() {
        let x = sample(vec![1, 1, 0]);
        let i = simulate_intervention(&x, &cv(&[0.5, 0.99, 0.01]), &SubsetPolicy::new(PolicyKind::Uncertainty, 1)).unwrap();
        assert_eq!(i.entries(), &[(0, 1.0)]);
    }

    #[test]
    fn budget_bounds() {
        let x = sample(vec![1, 0]);
        let p = cv(&[0.5, 0.5]);
        for kind in [PolicyKind::Uncertainty, PolicyKind::Random { seed: 1 }] {
            assert!(simulate_intervention(&x, &p, &SubsetPolicy::new(kind, 0)).is_err());
            assert!(simulate_intervention(&x, &p, &SubsetPolicy::new(kind, 3)).is_err());
        }
        assert!(simulate_intervention(&x, &cv(&[0.5]), &SubsetPolicy::all()).is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_a_permutation(p in prop::collection::vec(0.0f64..=1.0, 0..12)) {
            let mut order = rank_concepts_uncertainty(&cv(&p));
            order.sort_unstable();
            prop_assert_eq!(order, (0..p.len()).collect::<Vec<_>>());
        }

        #[test]
        fn full_budget_matches_all(
            truth in prop::collection::vec(0u8..=1, 1..10),
            seed in any::<u64>(),
            p in prop::collection::vec(0.0f64..=1.0, 10),
        ) {
            let c = truth.len();
            let x = sample(truth);
            let p = cv(&p[..c]);
            let all = simulate_intervention(&x, &p, &SubsetPolicy::all()).unwrap();
            for kind in [PolicyKind::Uncertainty, PolicyKind::Random { seed }] {
                let i = simulate_intervention(&x, &p, &SubsetPolicy::new(kind, c)).unwrap();
                prop_assert_eq!(&i, &all);
            }
        }

        #[test]
        fn values_are_ground_truth_and_random_is_seeded(
            truth in prop::collection::vec(0u8..=1, 1..10),
            seed in any::<u64>(),
            budget_frac in 0.0f64..1.0,
        ) {
            let c = truth.len();
            let budget = 1 + (budget_frac * c as f64) as usize % c;
            let x = sample(truth.clone());
            let p = cv(&vec![0.5; c]);
            let policy = SubsetPolicy::new(PolicyKind::Random { seed }, budget);
            let i = simulate_intervention(&x, &p, &policy).unwrap();
            prop_assert_eq!(i.len(), budget);
            for &(j, v) in i.entries() {
                prop_assert_eq!(v, f64::from(truth[j]));
            }
            prop_assert_eq!(i, simulate_intervention(&x, &p, &policy).unwrap());
        }
    }
}
