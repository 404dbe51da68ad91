//! Interquartile-range outlier removal, min-max scaling, and column summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, Dataset};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("column {0} is constant and cannot be min-max scaled")]
    ConstantColumn(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn checked_sorted(values: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    if values.len() < 2 {
        return Err(PreprocessError::TooFew(values.len()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite(i));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Quantile `p` of sorted data, interpolating linearly at index `p·(n−1)`.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64, PreprocessError> {
    Ok(sorted_quantile(&checked_sorted(values)?, p.clamp(0.0, 1.0)))
}

/// `(Q1, Q3)` with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64), PreprocessError> {
    let s = checked_sorted(values)?;
    Ok((sorted_quantile(&s, 0.25), sorted_quantile(&s, 0.75)))
}

/// Box-plot summary of one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub column: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub iqr: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    pub outlier_count: usize,
}

impl ColumnStats {
    pub fn compute(column: &str, values: &[f64]) -> Result<Self, PreprocessError> {
        let s = checked_sorted(values)?;
        let (q1, q3) = (sorted_quantile(&s, 0.25), sorted_quantile(&s, 0.75));
        let iqr = q3 - q1;
        let (lower_fence, upper_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Ok(ColumnStats {
            column: column.to_string(),
            min: s[0],
            q1,
            median: sorted_quantile(&s, 0.5),
            q3,
            max: s[s.len() - 1],
            iqr,
            lower_fence,
            upper_fence,
            outlier_count: values
                .iter()
                .filter(|&&v| v < lower_fence || v > upper_fence)
                .count(),
        })
    }

    pub fn is_outlier(&self, v: f64) -> bool {
        v < self.lower_fence || v > self.upper_fence
    }
}

pub fn write_stats_csv(stats: &[ColumnStats], path: &Path) -> Result<(), PreprocessError> {
    let io = |e: csv::Error| PreprocessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for s in stats {
        w.serialize(s).map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub dataset: Dataset,
    pub stats: Vec<ColumnStats>,
    /// Indices (into the input) of removed rows, ascending.
    pub removed: Vec<usize>,
}

/// Removes every row where any of `columns` lies outside its fences.
/// Fences are computed once, on the input.
pub fn iqr_filter(dataset: &Dataset, columns: &[Column]) -> Result<FilterReport, PreprocessError> {
    if dataset.is_empty() {
        return Err(PreprocessError::EmptyDataset);
    }
    let stats = columns
        .iter()
        .map(|&c| ColumnStats::compute(c.name(), &dataset.column(c)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut kept = Vec::with_capacity(dataset.len());
    let mut removed = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if columns.iter().zip(&stats).any(|(&c, s)| s.is_outlier(r.get(c))) {
            removed.push(i);
        } else {
            kept.push(*r);
        }
    }
    Ok(FilterReport {
        dataset: Dataset::new(kept, dataset.provenance.clone()),
        stats,
        removed,
    })
}

/// Summary statistics of every column without filtering.
pub fn describe(dataset: &Dataset) -> Result<Vec<ColumnStats>, PreprocessError> {
    Column::ALL
        .iter()
        .map(|&c| ColumnStats::compute(c.name(), &dataset.column(c)))
        .collect()
}

/// Affine map of a column onto [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<Self, PreprocessError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PreprocessError::NonFinite(i));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(PreprocessError::ConstantColumn(format!("[{min}, {max}]")));
        }
        Ok(MinMax { min, max })
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, s: f64) -> f64 {
        self.min + s * (self.max - self.min)
    }
}

/// Scaled values and the transform that produced them.
pub fn minmax_scale(values: &[f64]) -> Result<(Vec<f64>, MinMax), PreprocessError> {
    let m = MinMax::fit(values)?;
    Ok((values.iter().map(|&v| m.scale(v)).collect(), m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FlotationRecord, Provenance};
    use proptest::prelude::*;

    #[test]
    fn hand_quartiles() {
        let (q1, q3) = quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        assert!((q1 - 2.25).abs() < 1e-15);
        assert!((q3 - 4.75).abs() < 1e-15);
        assert_eq!(quartiles(&[5.0; 4]).unwrap(), (5.0, 5.0));
        assert_eq!(quartiles(&[1.0]), Err(PreprocessError::TooFew(1)));
        assert_eq!(quartiles(&[1.0, f64::NAN]), Err(PreprocessError::NonFinite(1)));
    }

    fn one_column(values: &[f64]) -> Dataset {
        let records = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut r = [1.0; 14];
                r[0] = i as f64;
                r[Column::Cf.index()] = v;
                FlotationRecord(r)
            })
            .collect();
        Dataset::new(records, Provenance::default())
    }

    #[test]
    fn filter_drops_the_far_value() {
        let d = one_column(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]);
        let rep = iqr_filter(&d, &[Column::Cf]).unwrap();
        assert_eq!(rep.removed, vec![5]);
        assert!((rep.stats[0].lower_fence + 1.5).abs() < 1e-12);
        assert!((rep.stats[0].upper_fence - 8.5).abs() < 1e-12);
        assert_eq!(rep.stats[0].outlier_count, 1);
        assert_eq!(rep.dataset.len(), 5);
    }

    #[test]
    fn collapsed_fences_remove_any_deviation() {
        let mut v = vec![7.0; 20];
        v[13] = 7.5;
        let rep = iqr_filter(&one_column(&v), &[Column::Cf]).unwrap();
        assert_eq!(rep.stats[0].iqr, 0.0);
        assert_eq!(rep.removed, vec![13]);
    }

    #[test]
    fn clean_data_passes_through() {
        let d = one_column(&[3.0, 1.0, 2.0, 4.0]);
        let rep = iqr_filter(&d, &Column::FILTERABLE).unwrap();
        assert!(rep.removed.is_empty());
        assert_eq!(rep.dataset, d);
        assert_eq!(iqr_filter(&Dataset::default(), &[Column::Cf]), Err(PreprocessError::EmptyDataset));
    }

    #[test]
    fn minmax_examples() {
        let (s, m) = minmax_scale(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(s, vec![0.0, 0.5, 1.0]);
        assert_eq!(m.inverse(0.5), 4.0);
        assert!(matches!(minmax_scale(&[1.0, 1.0]), Err(PreprocessError::ConstantColumn(_))));
    }

    #[test]
    fn stats_csv_has_one_row_per_column() {
        let d = one_column(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.csv");
        write_stats_csv(&describe(&d).unwrap(), &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 15);
        assert!(lines[0].starts_with("column,min,q1,median,q3,max,iqr,lower_fence,upper_fence,outlier_count"));
        assert!(lines[14].starts_with("C_f_conc,1.0,2.25,3.5,4.75,100.0,"), "{}", lines[14]);
    }

    proptest! {
        #[test]
        fn stats_are_ordered(v in prop::collection::vec(-1e3f64..1e3, 2..60)) {
            let s = ColumnStats::compute("x", &v).unwrap();
            prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
            prop_assert!(s.iqr >= 0.0);
        }

        #[test]
        fn rows_are_conserved(v in prop::collection::vec(-50f64..50.0, 1..80), spike in 0usize..80) {
            let mut v = v;
            let k = spike % v.len();
            v[k] *= 40.0;
            let d = one_column(&v);
            match iqr_filter(&d, &[Column::Cf]) {
                Ok(rep) => prop_assert_eq!(rep.dataset.len() + rep.removed.len(), d.len()),
                Err(e) => prop_assert_eq!(e, PreprocessError::TooFew(1)),
            }
        }

        #[test]
        fn minmax_round_trip(v in prop::collection::vec(-1e4f64..1e4, 2..50)) {
            if let Ok((s, m)) = minmax_scale(&v) {
                for (a, b) in s.iter().zip(&v) {
                    prop_assert!((0.0..=1.0).contains(a));
                    prop_assert!((m.inverse(*a) - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }
}
