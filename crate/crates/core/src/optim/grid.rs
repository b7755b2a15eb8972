//! Exhaustive grid search over a discretized space.

use std::collections::BTreeMap;

use super::{
    best_trial, Dim, DimKind, ParamValue, SearchSpace, SearchStage, TrialConfig, TrialRecord,
    TrialStatus,
};
use crate::error::{Error, Result};

/// Grid points per dimension. Log dimensions discretize at decade steps,
/// uniform dimensions at lo/mid/hi, categorical dimensions keep their
/// choices.
pub fn discretize_space(space: &SearchSpace) -> Vec<(String, Vec<ParamValue>)> {
    space
        .dims
        .iter()
        .map(|d| {
            let values = match &d.kind {
                DimKind::LogUniform { lo, hi } => {
                    let mut vs = Vec::new();
                    let mut v = *lo;
                    while v <= hi * (1.0 + 1e-12) {
                        vs.push(ParamValue::Float(v));
                        v *= 10.0;
                    }
                    vs
                }
                DimKind::Uniform { lo, hi } => {
                    if lo == hi {
                        vec![ParamValue::Float(*lo)]
                    } else {
                        vec![
                            ParamValue::Float(*lo),
                            ParamValue::Float(0.5 * (lo + hi)),
                            ParamValue::Float(*hi),
                        ]
                    }
                }
                DimKind::Categorical { choices } => choices.clone(),
            };
            (d.name.clone(), values)
        })
        .collect()
}

/// Wrap explicit per-dimension value lists as a categorical search space, the
/// form run configs use for their grids.
pub fn space_from_grid_values(grid: &BTreeMap<String, Vec<ParamValue>>) -> SearchSpace {
    SearchSpace {
        dims: grid
            .iter()
            .map(|(name, values)| Dim {
                name: name.clone(),
                kind: DimKind::Categorical { choices: values.clone() },
            })
            .collect(),
    }
}

/// Evaluate every configuration of the Cartesian product exactly once.
/// Failed trials are recorded and skipped for the best; an all-failed grid is
/// a search error.
pub fn grid_search<F>(
    space: &SearchSpace,
    mut objective: F,
    seed: u64,
) -> Result<(TrialRecord, Vec<TrialRecord>)>
where
    F: FnMut(&TrialConfig) -> Result<f64>,
{
    space.validate()?;
    let axes = discretize_space(space);
    let total: usize = axes.iter().map(|(_, vs)| vs.len()).product();
    let mut history = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        let config: TrialConfig = axes
            .iter()
            .zip(&idx)
            .map(|((name, values), &i)| (name.clone(), values[i].clone()))
            .collect();
        let record = match objective(&config) {
            Ok(v) if v.is_finite() => TrialRecord {
                config,
                objective: v,
                stage: SearchStage::Grid,
                seed,
                status: TrialStatus::Complete,
            },
            Ok(v) => {
                log::warn!("grid trial returned non-finite objective {v}; marked failed");
                TrialRecord {
                    config,
                    objective: f64::NEG_INFINITY,
                    stage: SearchStage::Grid,
                    seed,
                    status: TrialStatus::Failed,
                }
            }
            Err(e) => {
                log::warn!("grid trial failed: {e}");
                TrialRecord {
                    config,
                    objective: f64::NEG_INFINITY,
                    stage: SearchStage::Grid,
                    seed,
                    status: TrialStatus::Failed,
                }
            }
        };
        history.push(record);
        // odometer increment, last axis fastest
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].1.len() {
                break;
            }
            idx[d] = 0;
        }
    }
    let best = best_trial(&history)
        .cloned()
        .ok_or_else(|| Error::Search("every grid trial failed".into()))?;
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_dim(name: &str, lo: f64, hi: f64) -> Dim {
        Dim { name: name.into(), kind: DimKind::LogUniform { lo, hi } }
    }

    #[test]
    fn decade_discretization() {
        let space = SearchSpace { dims: vec![log_dim("lr", 1e-5, 1e-2)] };
        let axes = discretize_space(&space);
        let vals: Vec<f64> = axes[0].1.iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(vals.len(), 4);
        assert!((vals[0] - 1e-5).abs() < 1e-18);
        assert!((vals[3] - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn single_dim_three_points() {
        let space = SearchSpace { dims: vec![log_dim("lr", 1e-3, 1e-1)] };
        let (_, history) = grid_search(&space, |_| Ok(1.0), 0).unwrap();
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn product_enumeration_is_exact_and_unique() {
        let space = SearchSpace {
            dims: vec![
                Dim {
                    name: "a".into(),
                    kind: DimKind::Categorical {
                        choices: (0..4).map(|i| ParamValue::Float(i as f64)).collect(),
                    },
                },
                Dim {
                    name: "b".into(),
                    kind: DimKind::Categorical {
                        choices: (0..3).map(|i| ParamValue::Float(i as f64)).collect(),
                    },
                },
                Dim {
                    name: "c".into(),
                    kind: DimKind::Categorical {
                        choices: (0..2).map(|i| ParamValue::Float(i as f64)).collect(),
                    },
                },
            ],
        };
        let (_, history) = grid_search(&space, |_| Ok(0.5), 1).unwrap();
        assert_eq!(history.len(), 24);
        let mut seen: Vec<String> =
            history.iter().map(|t| serde_json::to_string(&t.config).unwrap()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 24, "every config must be unique");
    }

    #[test]
    fn quadratic_objective_picks_the_decade_optimum() {
        let space = SearchSpace { dims: vec![log_dim("lr", 1e-5, 1e-2)] };
        let (best, _) = grid_search(
            &space,
            |cfg| {
                let lr = cfg["lr"].as_f64().unwrap();
                Ok(-(lr - 1e-4) * (lr - 1e-4))
            },
            0,
        )
        .unwrap();
        assert!((best.config["lr"].as_f64().unwrap() - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn failures_skipped_and_all_failed_is_error() {
        let space = SearchSpace { dims: vec![log_dim("lr", 1e-3, 1e-1)] };
        let mut calls = 0;
        let (best, history) = grid_search(
            &space,
            |cfg| {
                calls += 1;
                let lr = cfg["lr"].as_f64().unwrap();
                if lr < 0.05 {
                    Err(Error::Search("boom".into()))
                } else {
                    Ok(lr)
                }
            },
            0,
        )
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(history.iter().filter(|t| !t.is_complete()).count(), 2);
        assert!((best.config["lr"].as_f64().unwrap() - 1e-1).abs() < 1e-12);

        let all_fail: Result<_> = grid_search(&space, |_| Err(Error::Search("x".into())), 0);
        assert!(matches!(all_fail, Err(Error::Search(_))));
    }
}
