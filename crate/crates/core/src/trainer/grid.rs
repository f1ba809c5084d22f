use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fit::{train_model, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::jdan::{CouplingMode, JdanArch};
use crate::nfn::{ForecastModel, NfnArch};
use crate::par;
use crate::pipeline::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpace {
    pub nfn_blocks: Vec<usize>,
    pub jdan_blocks: Vec<usize>,
    pub nfn_width: Vec<usize>,
    pub jdan_width: Vec<usize>,
    /// Window rows δ.
    pub lag_steps: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        GridSpace {
            nfn_blocks: vec![2, 4, 8, 16],
            jdan_blocks: vec![2, 4, 8, 16],
            nfn_width: vec![16, 32, 64, 128],
            jdan_width: vec![16, 32, 64, 128],
            lag_steps: vec![1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub nfn_blocks: usize,
    pub jdan_blocks: usize,
    pub nfn_width: usize,
    pub jdan_width: usize,
    pub lag_steps: usize,
}

impl GridPoint {
    /// Seed that depends only on the base seed and the point's content.
    pub fn seed(&self, base: u64) -> u64 {
        let mut h = splitmix(base);
        for v in [
            self.nfn_blocks,
            self.jdan_blocks,
            self.nfn_width,
            self.jdan_width,
            self.lag_steps,
        ] {
            h = splitmix(h ^ v as u64);
        }
        h
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl GridSpace {
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        let axes = [
            &self.nfn_blocks,
            &self.jdan_blocks,
            &self.nfn_width,
            &self.jdan_width,
            &self.lag_steps,
        ];
        if axes.iter().any(|a| a.is_empty()) {
            return Err(Error::invalid("every grid axis needs at least one value"));
        }
        let mut out = Vec::new();
        for &nb in &self.nfn_blocks {
            for &jb in &self.jdan_blocks {
                for &nw in &self.nfn_width {
                    for &jw in &self.jdan_width {
                        for &lag in &self.lag_steps {
                            out.push(GridPoint {
                                nfn_blocks: nb,
                                jdan_blocks: jb,
                                nfn_width: nw,
                                jdan_width: jw,
                                lag_steps: lag,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Settings shared by every grid run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBase {
    pub n_vars: usize,
    pub n_features: usize,
    pub n_components: usize,
    pub coupling: CouplingMode,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub seed: u64,
    /// Best validation mean log-likelihood; `None` when the run failed.
    pub val_ll: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stop_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    /// Sorted by validation log-likelihood, best first; failures last.
    pub rows: Vec<GridRow>,
    pub best: GridPoint,
}

pub struct GridOutcome {
    pub report: GridReport,
    pub best_model: ForecastModel,
    pub best_train_report: TrainReport,
}

/// Train one model per grid point (in parallel) and rank by validation
/// log-likelihood. `dataset_for_lag` builds the windows for each lag.
pub fn grid_search(
    space: &GridSpace,
    base: &GridBase,
    dataset_for_lag: impl Fn(usize) -> Result<Dataset>,
) -> Result<GridOutcome> {
    let points = space.points()?;
    let mut datasets = BTreeMap::new();
    for p in &points {
        if let std::collections::btree_map::Entry::Vacant(e) = datasets.entry(p.lag_steps) {
            e.insert(dataset_for_lag(p.lag_steps)?);
        }
    }
    let runs = par::map_slice(&points, |p| {
        let seed = p.seed(base.train.seed);
        let nfn = NfnArch {
            n_features: base.n_features,
            lag_steps: p.lag_steps,
            n_blocks: p.nfn_blocks,
            width: p.nfn_width,
        };
        let run = JdanArch::new(
            base.n_vars,
            base.n_components,
            p.jdan_blocks,
            p.jdan_width,
            base.coupling,
        )
        .and_then(|jdan| {
            let cfg = TrainConfig {
                seed,
                ..base.train.clone()
            };
            train_model(nfn, jdan, &datasets[&p.lag_steps], &cfg)
        });
        (*p, seed, run)
    });
    let mut rows = Vec::with_capacity(runs.len());
    let mut best: Option<(f64, usize)> = None;
    let mut results = Vec::with_capacity(runs.len());
    for (k, (point, seed, run)) in runs.into_iter().enumerate() {
        match run {
            Ok((model, report)) => {
                let v = report.best_val_ll;
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, k));
                }
                rows.push(GridRow {
                    point,
                    seed,
                    val_ll: Some(v),
                    best_epoch: Some(report.best_epoch),
                    stop_epoch: Some(report.stop_epoch),
                    error: None,
                });
                results.push(Some((model, report)));
            }
            Err(e) => {
                rows.push(GridRow {
                    point,
                    seed,
                    val_ll: None,
                    best_epoch: None,
                    stop_epoch: None,
                    error: Some(e.to_string()),
                });
                results.push(None);
            }
        }
    }
    let (_, k) = best.ok_or(Error::Diverged { epoch: 0 })?;
    let best_point = rows[k].point;
    let (best_model, best_train_report) = results.swap_remove(k).expect("successful run");
    // Stable sort keeps enumeration order among ties.
    rows.sort_by(|a, b| match (a.val_ll, b.val_ll) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(GridOutcome {
        report: GridReport {
            rows,
            best: best_point,
        },
        best_model,
        best_train_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_enumeration_and_seeds() {
        let s = GridSpace {
            nfn_blocks: vec![1],
            jdan_blocks: vec![1, 2],
            nfn_width: vec![4],
            jdan_width: vec![3, 5],
            lag_steps: vec![2],
        };
        let p = s.points().unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].seed(9), p[0].seed(9));
        assert_ne!(p[0].seed(9), p[1].seed(9));
        assert_ne!(p[0].seed(9), p[0].seed(10));
        let empty = GridSpace {
            lag_steps: vec![],
            ..s
        };
        assert!(empty.points().is_err());
    }

    #[test]
    fn default_space_matches_search_axes() {
        assert_eq!(GridSpace::default().points().unwrap().len(), 256);
    }
}
