use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation participants per fold.
pub const VALIDATION_SIZE: usize = 2;

/// Class counts of one participant's EMAs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantLabels {
    pub participant_id: String,
    pub n0: usize,
    pub n1: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// `|r_val - r_train| / r_train <= tolerance`.
    Relative,
    /// `|r_val - r_train| <= tolerance`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub test_size: usize,
    pub ratio_tolerance: f64,
    pub ratio_mode: RatioMode,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            test_size: 5,
            ratio_tolerance: 0.10,
            ratio_mode: RatioMode::Relative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Lfocv,
    Loocv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_id: usize,
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
    /// No validation pair met the class-ratio constraint; the closest was used.
    pub flagged: bool,
    /// Class-1 to class-0 ratio of the validation and training pools.
    pub val_ratio: Option<f64>,
    pub train_ratio: Option<f64>,
}

impl Fold {
    pub fn role(&self, participant: &str) -> Option<&'static str> {
        let has = |v: &[String]| v.iter().any(|p| p == participant);
        if has(&self.test) {
            Some("test")
        } else if has(&self.val) {
            Some("val")
        } else if has(&self.train) {
            Some("train")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub kind: PlanKind,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn fold(&self, id: usize) -> Option<&Fold> {
        self.folds.iter().find(|f| f.fold_id == id)
    }
}

/// Class-1 to class-0 ratio; infinite when there are no class-0 EMAs.
pub fn class_ratio(n0: usize, n1: usize) -> f64 {
    if n0 == 0 {
        if n1 == 0 {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        n1 as f64 / n0 as f64
    }
}

/// Distance between two ratios under `mode`; infinite when undefined.
pub fn ratio_gap(val: f64, train: f64, mode: RatioMode) -> f64 {
    if val.is_nan() || train.is_nan() {
        return f64::INFINITY;
    }
    if val == train {
        return 0.0;
    }
    if !val.is_finite() || !train.is_finite() {
        return f64::INFINITY;
    }
    match mode {
        RatioMode::Relative if train > 0.0 => (val - train).abs() / train,
        RatioMode::Relative => f64::INFINITY,
        RatioMode::Absolute => (val - train).abs(),
    }
}

/// Outcome of the validation-pair search over a non-test pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairChoice {
    pub first: usize,
    pub second: usize,
    pub qualified: bool,
    pub val_ratio: f64,
    pub train_ratio: f64,
}

/// Walks `order` (pairs of indices into `pool`, whose entries are `(n0, n1)`) and
/// returns the first pair meeting the ratio tolerance, else the first pair with the
/// smallest gap.
pub fn pick_validation_pair(pool: &[(usize, usize)], order: &[(usize, usize)], config: &FoldConfig) -> PairChoice {
    let (all0, all1) = pool.iter().fold((0, 0), |(a, b), &(n0, n1)| (a + n0, b + n1));
    let mut best: Option<(PairChoice, f64)> = None;
    for &(i, j) in order {
        let (v0, v1) = (pool[i].0 + pool[j].0, pool[i].1 + pool[j].1);
        let (rv, rt) = (class_ratio(v0, v1), class_ratio(all0 - v0, all1 - v1));
        let gap = ratio_gap(rv, rt, config.ratio_mode);
        let choice = PairChoice {
            first: i,
            second: j,
            qualified: gap <= config.ratio_tolerance,
            val_ratio: rv,
            train_ratio: rt,
        };
        if choice.qualified {
            return choice;
        }
        if best.is_none_or(|b| gap < b.1) {
            best = Some((choice, gap));
        }
    }
    best.expect("at least one candidate pair").0
}

/// Leave-five-out plan: seeded shuffle, consecutive test groups, and per fold the
/// first validation pair (in seeded order) whose pooled class ratio lies within the
/// tolerance of the remaining training pool, else the closest pair (flagged).
pub fn plan_lfocv(participants: &[ParticipantLabels], seed: u64, config: &FoldConfig) -> Result<FoldPlan> {
    let unique: BTreeSet<&str> = participants.iter().map(|p| p.participant_id.as_str()).collect();
    if unique.len() != participants.len() {
        return Err(Error::InvalidInput("duplicate participant in fold planning".into()));
    }
    if config.test_size == 0 {
        return Err(Error::InvalidConfig("test group size must be positive".into()));
    }
    let lookup = |id: &str| {
        let p = participants.iter().find(|p| p.participant_id == id).expect("known participant");
        (p.n0, p.n1)
    };
    let mut order: Vec<String> = unique.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = Vec::new();
    for (fold_id, group) in order.chunks(config.test_size).enumerate() {
        let rest: Vec<&String> = order.iter().filter(|p| !group.contains(p)).collect();
        if rest.len() < VALIDATION_SIZE {
            return Err(Error::InvalidInput(format!(
                "fold {fold_id} leaves {} non-test participants; at least {VALIDATION_SIZE} are needed",
                rest.len()
            )));
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..rest.len() {
            for j in i + 1..rest.len() {
                pairs.push((i, j));
            }
        }
        pairs.shuffle(&mut rng);
        let pool: Vec<(usize, usize)> = rest.iter().map(|p| lookup(p)).collect();
        let pick = pick_validation_pair(&pool, &pairs, config);
        let (i, j, qualified, rv, rt) = (pick.first, pick.second, pick.qualified, pick.val_ratio, pick.train_ratio);
        let finite = |r: f64| r.is_finite().then_some(r);
        folds.push(Fold {
            fold_id,
            test: group.to_vec(),
            val: vec![rest[i].clone(), rest[j].clone()],
            train: rest
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i && *k != j)
                .map(|(_, p)| (*p).clone())
                .collect(),
            flagged: !qualified,
            val_ratio: finite(rv),
            train_ratio: finite(rt),
        });
    }
    Ok(FoldPlan {
        kind: PlanKind::Lfocv,
        seed,
        folds,
    })
}

/// One fold per participant (in sorted order), training on all others.
pub fn plan_loocv(participants: &[String]) -> Result<FoldPlan> {
    let ids: BTreeSet<&String> = participants.iter().collect();
    if ids.len() < 2 {
        return Err(Error::InvalidInput("leave-one-out needs at least two participants".into()));
    }
    let folds = ids
        .iter()
        .enumerate()
        .map(|(fold_id, &p)| Fold {
            fold_id,
            test: vec![p.clone()],
            val: Vec::new(),
            train: ids.iter().filter(|&&q| q != p).map(|q| (*q).clone()).collect(),
            flagged: false,
            val_ratio: None,
            train_ratio: None,
        })
        .collect();
    Ok(FoldPlan {
        kind: PlanKind::Loocv,
        seed: 0,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn people(n: usize) -> Vec<ParticipantLabels> {
        (0..n)
            .map(|i| ParticipantLabels {
                participant_id: format!("P{i:03}"),
                n0: 10,
                n1: 6,
            })
            .collect()
    }

    #[test]
    fn seventy_two_participants_give_fifteen_folds() {
        let plan = plan_lfocv(&people(72), 1, &FoldConfig::default()).unwrap();
        assert_eq!(plan.folds.len(), 15);
        assert!(plan.folds[..14].iter().all(|f| f.test.len() == 5));
        assert_eq!(plan.folds[14].test.len(), 2);
        assert!(plan.folds.iter().all(|f| !f.flagged));
    }

    #[test]
    fn only_qualifying_pair_is_chosen() {
        // Found by exhaustive search: {0, 3} is the only pair within 10%.
        let pool = [(5, 18), (3, 8), (4, 15), (15, 15), (13, 6), (4, 15)];
        let mut order = Vec::new();
        for i in 0..pool.len() {
            for j in i + 1..pool.len() {
                order.push((i, j));
            }
        }
        order.reverse();
        let c = pick_validation_pair(&pool, &order, &FoldConfig::default());
        assert!(c.qualified);
        assert_eq!((c.first, c.second), (0, 3));
    }

    #[test]
    fn closest_pair_is_flagged_when_none_qualifies() {
        let pool = [(10, 0), (10, 1), (10, 30)];
        let order = [(0, 1), (0, 2), (1, 2)];
        let c = pick_validation_pair(&pool, &order, &FoldConfig::default());
        assert!(!c.qualified);
    }

    #[test]
    fn loocv_has_one_fold_per_participant() {
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let plan = plan_loocv(&ids).unwrap();
        assert_eq!(plan.folds.len(), 3);
        assert_eq!(plan.folds[0].test, vec!["a".to_string()]);
        assert_eq!(plan.folds[0].train, vec!["b".to_string(), "c".to_string()]);
    }

    #[test]
    fn too_few_participants_rejected() {
        assert!(plan_lfocv(&people(6), 1, &FoldConfig::default()).is_err());
    }
}
