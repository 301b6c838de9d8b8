//! Evaluation traces and the summary statistics computed from them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_LOW: f64 = 11.0;
pub const TARGET_HIGH: f64 = 12.0;
/// Month-to-month Hb change counted as abrupt.
pub const ABRUPT_CHANGE: f64 = 2.0;

/// One scored month of one patient under one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub patient_id: usize,
    /// 1-based month after the warmup.
    pub month: usize,
    /// Hb observed at the end of the month.
    pub hb: f64,
    /// Weekly dose given during the month.
    pub dose: f64,
    pub policy: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryFractions {
    pub below_10: f64,
    pub from_10_to_11: f64,
    pub from_11_to_12: f64,
    pub from_12_to_13: f64,
    pub above_13: f64,
}

impl CategoryFractions {
    pub fn total(&self) -> f64 {
        self.below_10 + self.from_10_to_11 + self.from_11_to_12 + self.from_12_to_13 + self.above_13
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub n_patients: usize,
    pub n_observations: usize,
    pub in_range_fraction: f64,
    pub category_fractions: CategoryFractions,
    pub mean_dose: f64,
    pub sd_dose: f64,
    pub abrupt_change_fraction: f64,
    pub per_month_hb_mean: Vec<f64>,
    pub per_month_hb_sd: Vec<f64>,
    /// In patient id order.
    pub per_patient_in_range: Vec<f64>,
    pub per_patient_mean_dose: Vec<f64>,
    pub patient_ids: Vec<usize>,
    /// File holding the per-patient traces.
    pub traces: String,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn category(hb: f64) -> usize {
    if hb < 10.0 {
        0
    } else if hb < TARGET_LOW {
        1
    } else if hb <= TARGET_HIGH {
        2
    } else if hb <= 13.0 {
        3
    } else {
        4
    }
}

/// Pools every observation of `rows`; the result does not depend on row order.
pub fn compute_metrics(policy: &str, rows: &[TraceRow], traces_file: &str) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Input(format!("no scored observations for policy {policy}")));
    }
    let mut patients: BTreeMap<usize, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in rows {
        patients.entry(r.patient_id).or_default().push((r.month, r.hb, r.dose));
    }
    let mut counts = [0usize; 5];
    let mut doses = Vec::with_capacity(rows.len());
    let mut steps = 0usize;
    let mut abrupt = 0usize;
    let mut by_month: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut per_patient_in_range = Vec::new();
    let mut per_patient_mean_dose = Vec::new();
    for trace in patients.values_mut() {
        trace.sort_by_key(|t| t.0);
        if trace.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Input("duplicate month in a patient trace".into()));
        }
        let mut in_range = 0;
        for &(month, hb, dose) in trace.iter() {
            let c = category(hb);
            counts[c] += 1;
            in_range += usize::from(c == 2);
            doses.push(dose);
            by_month.entry(month).or_default().push(hb);
        }
        for w in trace.windows(2) {
            steps += 1;
            abrupt += usize::from((w[1].1 - w[0].1).abs() >= ABRUPT_CHANGE);
        }
        per_patient_in_range.push(in_range as f64 / trace.len() as f64);
        per_patient_mean_dose.push(mean_sd(&trace.iter().map(|t| t.2).collect::<Vec<_>>()).0);
    }
    let n = rows.len() as f64;
    let frac = |c: usize| counts[c] as f64 / n;
    let (mean_dose, sd_dose) = mean_sd(&doses);
    let (per_month_hb_mean, per_month_hb_sd) = by_month.values().map(|v| mean_sd(v)).unzip();
    Ok(MetricsReport {
        policy: policy.to_string(),
        n_patients: patients.len(),
        n_observations: rows.len(),
        in_range_fraction: frac(2),
        category_fractions: CategoryFractions {
            below_10: frac(0),
            from_10_to_11: frac(1),
            from_11_to_12: frac(2),
            from_12_to_13: frac(3),
            above_13: frac(4),
        },
        mean_dose,
        sd_dose,
        abrupt_change_fraction: if steps == 0 { 0.0 } else { abrupt as f64 / steps as f64 },
        per_month_hb_mean,
        per_month_hb_sd,
        per_patient_in_range,
        per_patient_mean_dose,
        patient_ids: patients.keys().copied().collect(),
        traces: traces_file.to_string(),
    })
}

pub fn write_traces<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<traces csv>", e))?;
    Ok(())
}

pub fn read_traces<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Five-number summary (min, quartiles, max) by linear interpolation.
pub fn quantiles(values: &[f64]) -> [f64; 5] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(hbs: &[f64]) -> Vec<TraceRow> {
        hbs.iter()
            .enumerate()
            .map(|(m, &hb)| TraceRow {
                patient_id: 0,
                month: m + 1,
                hb,
                dose: 0.5,
                policy: "p".into(),
            })
            .collect()
    }

    #[test]
    fn all_in_range() {
        let m = compute_metrics("p", &rows(&[11.5; 10]), "t").unwrap();
        assert_eq!(m.in_range_fraction, 1.0);
        assert_eq!(m.abrupt_change_fraction, 0.0);
        assert_eq!((m.mean_dose, m.sd_dose), (0.5, 0.0));
    }

    #[test]
    fn categories_by_hand() {
        let m = compute_metrics("p", &rows(&[9.9, 10.0, 11.0, 12.0, 12.5, 13.1]), "t").unwrap();
        let c = &m.category_fractions;
        assert_eq!(c.below_10, 1.0 / 6.0);
        assert_eq!(c.from_10_to_11, 1.0 / 6.0);
        assert_eq!(c.from_11_to_12, 2.0 / 6.0);
        assert_eq!(c.from_12_to_13, 1.0 / 6.0);
        assert_eq!(c.above_13, 1.0 / 6.0);
    }

    #[test]
    fn one_jump_among_nine_steps() {
        let m = compute_metrics("p", &rows(&[11.0, 11.2, 11.1, 13.5, 13.4, 13.0, 12.5, 12.0, 11.8, 11.6]), "t").unwrap();
        assert!((m.abrupt_change_fraction - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn per_month_statistics() {
        let mut r = rows(&[10.0, 12.0]);
        r.extend(rows(&[12.0, 12.0]).into_iter().map(|mut t| {
            t.patient_id = 1;
            t
        }));
        let m = compute_metrics("p", &r, "t").unwrap();
        assert_eq!(m.per_month_hb_mean, vec![11.0, 12.0]);
        assert!((m.per_month_hb_sd[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.per_patient_in_range, vec![0.5, 1.0]);
        assert_eq!(m.n_patients, 2);
    }

    #[test]
    fn empty_rejected() {
        assert!(compute_metrics("p", &[], "t").is_err());
    }

    #[test]
    fn quantiles_by_hand() {
        assert_eq!(quantiles(&[4.0, 1.0, 3.0, 2.0, 5.0]), [1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(quantiles(&[0.0, 1.0])[2], 0.5);
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one_and_ignore_order(
            hbs in proptest::collection::vec(5.0..16.0f64, 12),
            rot in 0usize..12,
        ) {
            let mut r: Vec<TraceRow> = hbs.iter().enumerate().map(|(i, &hb)| TraceRow {
                patient_id: i % 3,
                month: i / 3 + 1,
                hb,
                dose: (i % 5) as f64 * 0.25,
                policy: "p".into(),
            }).collect();
            let a = compute_metrics("p", &r, "t").unwrap();
            prop_assert!((a.category_fractions.total() - 1.0).abs() < 1e-9);
            for f in [a.in_range_fraction, a.abrupt_change_fraction] {
                prop_assert!((0.0..=1.0).contains(&f));
            }
            r.rotate_left(rot);
            r.reverse();
            prop_assert_eq!(compute_metrics("p", &r, "t").unwrap(), a);
        }
    }
}
