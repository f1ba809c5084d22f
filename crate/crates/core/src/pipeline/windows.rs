use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.4;
pub const VAL_FRACTION: f64 = 0.2;
pub const MIN_WINDOWS: usize = 10;

/// A lag window of features and the margin vector `lead` steps after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    /// Row-major `δ × F`.
    pub features: Vec<f64>,
    pub target: Vec<f64>,
    /// Series row of the last window row.
    pub anchor: usize,
}

/// One window per admissible anchor; `len − δ − τ + 1` of them.
pub fn build_windows(
    features: &[Vec<f64>],
    margins: &[Vec<f64>],
    lag: usize,
    lead: usize,
) -> Result<Vec<SampleWindow>> {
    let len = features.len();
    if margins.len() != len {
        return Err(Error::invalid("features and margins differ in length"));
    }
    if lag == 0 || lead == 0 {
        return Err(Error::invalid("lag and lead must be at least one step"));
    }
    if len < lag + lead {
        return Err(Error::invalid(format!(
            "series of {len} rows is too short for lag {lag} and lead {lead}"
        )));
    }
    Ok((lag - 1..len - lead)
        .map(|t| SampleWindow {
            features: features[t + 1 - lag..=t].concat(),
            target: margins[t + lead].clone(),
            anchor: t,
        })
        .collect())
}

/// Chronological train/validation/test ranges plus train-only feature
/// z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl DatasetSplit {
    /// Floor the train and validation sizes; the remainder goes to test.
    pub fn ranges(n: usize) -> Result<(Range<usize>, Range<usize>, Range<usize>)> {
        if n < MIN_WINDOWS {
            return Err(Error::invalid(format!(
                "need at least {MIN_WINDOWS} windows, got {n}"
            )));
        }
        let a = (n as f64 * TRAIN_FRACTION).floor() as usize;
        let b = (n as f64 * VAL_FRACTION).floor() as usize;
        Ok((0..a, a..a + b, a + b..n))
    }

    pub fn normalize(&self, w: &mut SampleWindow) {
        let f = self.feature_mean.len();
        for row in w.features.chunks_mut(f) {
            for ((v, m), s) in row
                .iter_mut()
                .zip(&self.feature_mean)
                .zip(&self.feature_std)
            {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Split windows 40/20/40 and z-score every window with statistics taken
/// over all rows of the train windows. Zero-variance features get std 1.
pub fn split_and_normalize(
    windows: &mut [SampleWindow],
    n_features: usize,
) -> Result<DatasetSplit> {
    let (train, val, test) = DatasetSplit::ranges(windows.len())?;
    if n_features == 0 || windows.iter().any(|w| w.features.len() % n_features != 0) {
        return Err(Error::invalid(
            "window width is not a multiple of the feature count",
        ));
    }
    let mut mean = vec![0.0; n_features];
    let mut count = 0usize;
    for w in &windows[train.clone()] {
        for row in w.features.chunks(n_features) {
            count += 1;
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; n_features];
    for w in &windows[train.clone()] {
        for row in w.features.chunks(n_features) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let split = DatasetSplit {
        train,
        val,
        test,
        feature_mean: mean,
        feature_std: std,
    };
    windows.iter_mut().for_each(|w| split.normalize(w));
    Ok(split)
}

/// Normalized windows with their split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub windows: Vec<SampleWindow>,
    pub split: DatasetSplit,
    pub lag: usize,
    pub lead: usize,
    pub n_features: usize,
}

impl Dataset {
    pub fn new(
        features: &[Vec<f64>],
        margins: &[Vec<f64>],
        lag: usize,
        lead: usize,
    ) -> Result<Self> {
        let n_features = features.first().map_or(0, Vec::len);
        let mut windows = build_windows(features, margins, lag, lead)?;
        let split = split_and_normalize(&mut windows, n_features)?;
        Ok(Dataset {
            windows,
            split,
            lag,
            lead,
            n_features,
        })
    }

    pub fn train(&self) -> &[SampleWindow] {
        &self.windows[self.split.train.clone()]
    }

    pub fn val(&self) -> &[SampleWindow] {
        &self.windows[self.split.val.clone()]
    }

    pub fn test(&self) -> &[SampleWindow] {
        &self.windows[self.split.test.clone()]
    }

    pub fn n_vars(&self) -> usize {
        self.windows.first().map_or(0, |w| w.target.len())
    }
}

/// Borrow window features as slices for the forecast network.
pub fn feature_refs(windows: &[SampleWindow]) -> Vec<&[f64]> {
    windows.iter().map(|w| w.features.as_slice()).collect()
}

pub fn targets(windows: &[SampleWindow]) -> Vec<Vec<f64>> {
    windows.iter().map(|w| w.target.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(len: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let f = (0..len).map(|t| vec![t as f64, 5.0]).collect();
        let m = (0..len).map(|t| vec![t as f64 / 100.0]).collect();
        (f, m)
    }

    #[test]
    fn window_count_and_targets() {
        let (f, m) = series(10);
        let w = build_windows(&f, &m, 3, 2).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[0].features, vec![0.0, 5.0, 1.0, 5.0, 2.0, 5.0]);
        assert_eq!(w[0].target, vec![0.04]);
        let w = build_windows(&f, &m, 1, 1).unwrap();
        assert!(w.iter().all(|w| w.target[0] == m[w.anchor + 1][0]));
        assert!(build_windows(&f[..4], &m[..4], 3, 2).is_err());
    }

    #[test]
    fn split_sizes() {
        let (a, b, c) = DatasetSplit::ranges(15119).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6047, 3023, 6049));
        assert!(DatasetSplit::ranges(9).is_err());
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let (f, m) = series(40);
        let d = Dataset::new(&f, &m, 2, 1).unwrap();
        assert!(d
            .windows
            .iter()
            .all(|w| w.features[1] == 0.0 && w.features[3] == 0.0));
        assert_eq!(d.split.feature_std[1], 1.0);
    }
}
