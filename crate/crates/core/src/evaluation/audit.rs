use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::PredictionRecord;

/// Which cross-validation stage a fit or record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStage {
    Tl,
    Meta,
}

/// Participants whose rows were read while fitting one fold's models
/// (training, early stopping, trait selection, normalisation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub stage: PlanStage,
    pub fold_id: usize,
    pub label: String,
    pub participants: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Test, validation and training sets of a fold intersect.
    FoldOverlap,
    /// A record's participant was not in the test set of its fold.
    RecordNotInTest,
    /// A meta-stage probability did not come from a fold that held the participant out.
    TlSourceNotTest,
    /// A meta-stage probability does not match any transfer-learning record.
    TlRecordMismatch,
    /// A fit read rows of a participant outside its fold's training data.
    FitReadHeldOut,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub stage: PlanStage,
    pub fold_id: usize,
    pub participant_id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records_checked: usize,
    pub fits_checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn overlaps(plan: &FoldPlan, stage: PlanStage, out: &mut Vec<Violation>) {
    for f in &plan.folds {
        let sets = [("test", &f.test), ("val", &f.val), ("train", &f.train)];
        for a in 0..3 {
            for b in a + 1..3 {
                let sa: BTreeSet<&String> = sets[a].1.iter().collect();
                for p in sets[b].1.iter().filter(|p| sa.contains(p)) {
                    out.push(Violation {
                        kind: ViolationKind::FoldOverlap,
                        stage,
                        fold_id: f.fold_id,
                        participant_id: p.clone(),
                        detail: format!("in both {} and {}", sets[a].0, sets[b].0),
                    });
                }
            }
        }
    }
}

fn in_test(plan: &FoldPlan, fold_id: usize, participant: &str) -> bool {
    plan.fold(fold_id).is_some_and(|f| f.test.iter().any(|p| p == participant))
}

/// Checks fold disjointness, that every record was produced by a fold holding its
/// participant out, that meta-stage probabilities trace back to matching
/// transfer-learning records, and that no fit read held-out participants.
pub fn audit_leakage(
    tl_plan: &FoldPlan,
    meta_plan: &FoldPlan,
    tl_records: &[PredictionRecord],
    meta_records: &[PredictionRecord],
    fits: &[FitProvenance],
) -> AuditReport {
    let mut v = Vec::new();
    overlaps(tl_plan, PlanStage::Tl, &mut v);
    overlaps(meta_plan, PlanStage::Meta, &mut v);

    let mut tl_index: BTreeMap<(&str, u64, usize), u64> = BTreeMap::new();
    for r in tl_records {
        if !in_test(tl_plan, r.fold_id, &r.participant_id) {
            v.push(Violation {
                kind: ViolationKind::RecordNotInTest,
                stage: PlanStage::Tl,
                fold_id: r.fold_id,
                participant_id: r.participant_id.clone(),
                detail: format!("record at {}", r.ema_timestamp),
            });
        }
        if let Some(p) = r.tl_probability {
            tl_index.insert((&r.participant_id, r.ema_timestamp.to_bits(), r.fold_id), p.to_bits());
        }
    }
    for r in meta_records {
        if !in_test(meta_plan, r.fold_id, &r.participant_id) {
            v.push(Violation {
                kind: ViolationKind::RecordNotInTest,
                stage: PlanStage::Meta,
                fold_id: r.fold_id,
                participant_id: r.participant_id.clone(),
                detail: format!("{} record at {}", r.condition, r.ema_timestamp),
            });
        }
        let Some(p) = r.tl_probability else { continue };
        let violation = |kind, detail: String| Violation {
            kind,
            stage: PlanStage::Meta,
            fold_id: r.fold_id,
            participant_id: r.participant_id.clone(),
            detail,
        };
        match r.tl_fold_id {
            Some(tf) if in_test(tl_plan, tf, &r.participant_id) => {
                let key = (r.participant_id.as_str(), r.ema_timestamp.to_bits(), tf);
                if tl_index.get(&key) != Some(&p.to_bits()) {
                    v.push(violation(
                        ViolationKind::TlRecordMismatch,
                        format!("probability at {} not produced by fold {tf}", r.ema_timestamp),
                    ));
                }
            }
            other => v.push(violation(
                ViolationKind::TlSourceNotTest,
                format!("probability at {} sourced from fold {other:?}", r.ema_timestamp),
            )),
        }
    }
    for fit in fits {
        let plan = match fit.stage {
            PlanStage::Tl => tl_plan,
            PlanStage::Meta => meta_plan,
        };
        let allowed: BTreeSet<&String> = match plan.fold(fit.fold_id) {
            Some(f) => match fit.stage {
                PlanStage::Tl => f.train.iter().chain(&f.val).collect(),
                PlanStage::Meta => f.train.iter().collect(),
            },
            None => BTreeSet::new(),
        };
        for p in fit.participants.iter().filter(|p| !allowed.contains(p)) {
            v.push(Violation {
                kind: ViolationKind::FitReadHeldOut,
                stage: fit.stage,
                fold_id: fit.fold_id,
                participant_id: p.clone(),
                detail: format!("{} read held-out rows", fit.label),
            });
        }
    }
    v.sort();
    AuditReport {
        records_checked: tl_records.len() + meta_records.len(),
        fits_checked: fits.len(),
        violations: v,
    }
}
