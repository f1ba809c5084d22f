use std::io::{Read, Write};

use chrono::{Duration, NaiveDateTime};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Flowgate flows, capacities and feature channels on a uniform time grid.
/// Rows are time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowgateSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub interval_minutes: u32,
    /// `[T][N]` power flow, MW.
    pub flow: Vec<Vec<f64>>,
    /// `[T][N]` transfer capability, MW.
    pub capacity: Vec<Vec<f64>>,
    /// `[T][F]`.
    pub features: Vec<Vec<f64>>,
}

impl FlowgateSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.flow.first().map_or(0, Vec::len)
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.flow.len() != t || self.capacity.len() != t || self.features.len() != t {
            return Err(Error::invalid("series columns have different lengths"));
        }
        let (n, f) = (self.n_vars(), self.n_features());
        if self.flow.iter().chain(&self.capacity).any(|r| r.len() != n)
            || self.features.iter().any(|r| r.len() != f)
        {
            return Err(Error::invalid("ragged series rows"));
        }
        if self.interval_minutes == 0 {
            return Err(Error::invalid("interval must be positive"));
        }
        let step = Duration::minutes(self.interval_minutes as i64);
        if let Some(k) = self.timestamps.windows(2).position(|w| w[1] - w[0] != step) {
            return Err(Error::invalid(format!(
                "non-uniform time step at row {}",
                k + 1
            )));
        }
        Ok(())
    }

    /// Header `timestamp,P_1,Ptc_1,…,P_N,Ptc_N,feat_1,…,feat_F`.
    pub fn header(n: usize, f: usize) -> Vec<String> {
        let mut h = vec!["timestamp".to_string()];
        for i in 1..=n {
            h.push(format!("P_{i}"));
            h.push(format!("Ptc_{i}"));
        }
        h.extend((1..=f).map(|j| format!("feat_{j}")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::header(self.n_vars(), self.n_features()))?;
        for t in 0..self.len() {
            let mut rec = vec![self.timestamps[t].format(TIMESTAMP_FORMAT).to_string()];
            for i in 0..self.n_vars() {
                rec.push(self.flow[t][i].to_string());
                rec.push(self.capacity[t][i].to_string());
            }
            rec.extend(self.features[t].iter().map(f64::to_string));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parse a series CSV; the interval is inferred from the first two rows.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let n = header.iter().filter(|h| h.starts_with("Ptc_")).count();
        let f = header.len().saturating_sub(1 + 2 * n);
        if n == 0 || header != Self::header(n, f) {
            return Err(Error::invalid(format!("unexpected CSV header {header:?}")));
        }
        let mut s = FlowgateSeries {
            timestamps: Vec::new(),
            interval_minutes: 1,
            flow: Vec::new(),
            capacity: Vec::new(),
            features: Vec::new(),
        };
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let ts = NaiveDateTime::parse_from_str(&rec[0], TIMESTAMP_FORMAT)
                .map_err(|e| Error::invalid(format!("row {row}: bad timestamp: {e}")))?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("row {row}, column {}: {e}", header[k])))
            };
            s.timestamps.push(ts);
            s.flow
                .push((0..n).map(|i| num(1 + 2 * i)).collect::<Result<_>>()?);
            s.capacity
                .push((0..n).map(|i| num(2 + 2 * i)).collect::<Result<_>>()?);
            s.features
                .push((0..f).map(|j| num(1 + 2 * n + j)).collect::<Result<_>>()?);
        }
        if s.len() >= 2 {
            let mins = (s.timestamps[1] - s.timestamps[0]).num_minutes();
            if mins <= 0 {
                return Err(Error::invalid("timestamps must increase"));
            }
            s.interval_minutes = mins as u32;
        }
        s.validate()?;
        Ok(s)
    }
}

/// `SMᵢ = 1 − Pᵢ / Ptcᵢ` per row.
pub fn compute_margins(series: &FlowgateSeries) -> Result<Vec<Vec<f64>>> {
    series
        .flow
        .iter()
        .zip(&series.capacity)
        .enumerate()
        .map(|(t, (p, c))| {
            p.iter()
                .zip(c)
                .map(|(&p, &c)| {
                    if c > 0.0 {
                        Ok(1.0 - p / c)
                    } else {
                        Err(Error::invalid(format!(
                            "non-positive capacity {c} at row {t}"
                        )))
                    }
                })
                .collect()
        })
        .collect()
}

/// Window rows for a lag given in minutes: floor division by the sampling
/// interval, at least one row.
pub fn lag_steps_from_minutes(minutes: u32, interval_minutes: u32) -> usize {
    ((minutes / interval_minutes.max(1)) as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FlowgateSeries {
        let t0 = NaiveDateTime::parse_from_str("2021-03-01T00:00:00", TIMESTAMP_FORMAT).unwrap();
        FlowgateSeries {
            timestamps: (0..3).map(|k| t0 + Duration::minutes(15 * k)).collect(),
            interval_minutes: 15,
            flow: vec![vec![30.0], vec![100.0], vec![0.0]],
            capacity: vec![vec![100.0]; 3],
            features: vec![vec![0.1, 2.0], vec![0.2, 1.0], vec![-0.3, 0.5]],
        }
    }

    #[test]
    fn margins() {
        let m = compute_margins(&tiny()).unwrap();
        assert!((m[0][0] - 0.7).abs() < 1e-15);
        assert_eq!(m[1][0], 0.0);
        assert_eq!(m[2][0], 1.0);
        let mut s = tiny();
        s.capacity[1][0] = 0.0;
        assert!(compute_margins(&s).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = tiny();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,P_1,Ptc_1,feat_1,feat_2\n"));
        assert_eq!(FlowgateSeries::read_csv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_input() {
        let bad = "timestamp,P_1,Ptc_1\n2021-03-01T00:00:00,1,2\n2021-03-01T00:15:00,1,2\n2021-03-01T00:45:00,1,2\n";
        assert!(FlowgateSeries::read_csv(bad.as_bytes()).is_err());
        let bad = "time,P_1,Ptc_1\n2021-03-01T00:00:00,1,2\n";
        assert!(FlowgateSeries::read_csv(bad.as_bytes()).is_err());
        let bad = "timestamp,P_1,Ptc_1\n2021-03-01T00:00:00,x,2\n";
        assert!(FlowgateSeries::read_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn lag_mapping() {
        assert_eq!(lag_steps_from_minutes(20, 15), 1);
        assert_eq!(lag_steps_from_minutes(60, 15), 4);
        assert_eq!(lag_steps_from_minutes(5, 15), 1);
    }
}
