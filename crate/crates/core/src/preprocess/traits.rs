use std::collections::BTreeMap;

use crate::data::{ScaleDeclaration, TraitItemResponse, TraitProfile};
use crate::error::{Error, Result};

/// Scores one participant's baseline scales.
///
/// Reverse-keyed items are recoded first (`min + max - value`), then each missing item
/// is replaced by the mean of the participant's remaining recoded items on that scale,
/// and finally items are summed. Only `items` (this participant's rows) are read.
/// Declared items with no row at all count as missing.
pub fn impute_and_score_traits(
    participant_id: &str,
    items: &[TraitItemResponse],
    scales: &[ScaleDeclaration],
) -> Result<TraitProfile> {
    let mut scores = BTreeMap::new();
    for decl in scales {
        let mut coded: Vec<Option<f64>> = vec![None; decl.item_count];
        for item in items.iter().filter(|i| i.scale == decl.scale) {
            if item.participant_id != participant_id {
                return Err(Error::InvalidInput(format!(
                    "item row for `{}` passed while scoring `{participant_id}`",
                    item.participant_id
                )));
            }
            let Some(slot) = item.item_index.checked_sub(1).and_then(|i| coded.get_mut(i)) else {
                return Err(Error::InvalidInput(format!(
                    "{} item index {} outside 1..={}",
                    decl.scale, item.item_index, decl.item_count
                )));
            };
            *slot = item.value.map(|v| {
                let v = if item.reverse_scored {
                    decl.item_min + decl.item_max - v
                } else {
                    v
                };
                f64::from(v)
            });
        }
        let answered: Vec<f64> = coded.iter().flatten().copied().collect();
        if answered.is_empty() {
            return Err(Error::UnresolvableScale {
                participant: participant_id.to_string(),
                scale: decl.scale.to_string(),
            });
        }
        let mean = answered.iter().sum::<f64>() / answered.len() as f64;
        let score: f64 = coded.iter().map(|v| v.unwrap_or(mean)).sum();
        scores.insert(decl.scale, score);
    }
    Ok(TraitProfile {
        participant_id: participant_id.to_string(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScaleId;

    fn decl(count: usize) -> ScaleDeclaration {
        ScaleDeclaration {
            scale: ScaleId::Bfne,
            item_count: count,
            item_min: 1,
            item_max: 5,
        }
    }

    fn item(index: usize, value: Option<i32>, reverse: bool) -> TraitItemResponse {
        TraitItemResponse {
            participant_id: "p".into(),
            scale: ScaleId::Bfne,
            item_index: index,
            value,
            reverse_scored: reverse,
        }
    }

    #[test]
    fn missing_item_gets_participant_mean() {
        let items = [item(1, Some(2), false), item(2, None, false), item(3, Some(4), false)];
        let profile = impute_and_score_traits("p", &items, &[decl(3)]).unwrap();
        assert_eq!(profile.score(ScaleId::Bfne), 9.0);
    }

    #[test]
    fn reverse_coding_precedes_imputation() {
        // reversed 1 becomes 5; the missing item then imputes to mean(5, 3) = 4
        let items = [item(1, Some(1), true), item(2, Some(3), false), item(3, None, false)];
        let profile = impute_and_score_traits("p", &items, &[decl(3)]).unwrap();
        assert_eq!(profile.score(ScaleId::Bfne), 12.0);
    }

    #[test]
    fn all_missing_is_unresolvable() {
        let items = [item(1, None, false), item(2, None, false)];
        assert!(matches!(
            impute_and_score_traits("p", &items, &[decl(2)]),
            Err(Error::UnresolvableScale { .. })
        ));
    }

    #[test]
    fn absent_rows_count_as_missing() {
        let items = [item(2, Some(3), false)];
        let profile = impute_and_score_traits("p", &items, &[decl(4)]).unwrap();
        assert_eq!(profile.score(ScaleId::Bfne), 12.0);
    }
}
