//! Glycemic statistics, the optimality ratio and speedup.

use serde::{Deserialize, Serialize};

use crate::ap::{GLUCOSE, INSULIN, INTERSTITIAL};
use crate::error::{Result, SimError};
use crate::ltv::Trace;

pub const RANGE_LOW: f64 = 70.0;
pub const RANGE_HIGH: f64 = 180.0;

/// Percentages of samples in, above and below the 70–180 mg/dL range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlycemicReport {
    pub tir: f64,
    pub tar: f64,
    pub tbr: f64,
}

pub fn glycemic_of(glucose: &[f64]) -> Result<GlycemicReport> {
    if glucose.is_empty() {
        return Err(SimError::Metric("no glucose samples".into()));
    }
    let (mut above, mut below) = (0usize, 0usize);
    for &g in glucose {
        if g > RANGE_HIGH {
            above += 1;
        } else if g < RANGE_LOW {
            below += 1;
        }
    }
    let total = glucose.len() as f64;
    let tar = 100.0 * above as f64 / total;
    let tbr = 100.0 * below as f64 / total;
    Ok(GlycemicReport {
        tir: 100.0 - tar - tbr,
        tar,
        tbr,
    })
}

pub fn glycemic(trace: &Trace) -> Result<GlycemicReport> {
    if trace.is_empty() {
        return Err(SimError::Metric("empty trace".into()));
    }
    if trace.n() <= GLUCOSE {
        return Err(SimError::Metric(format!("trace has {} states, no glucose", trace.n())));
    }
    glycemic_of(&trace.component(GLUCOSE))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sum of the mean glucose, insulin and interstitial insulin of the
/// candidate over the same sum for the ORACLE.
pub fn optimality(candidate: &Trace, oracle: &Trace) -> Result<f64> {
    if candidate.len() != oracle.len() || candidate.is_empty() {
        return Err(SimError::Alignment(format!(
            "{} samples vs {} samples",
            candidate.len(),
            oracle.len()
        )));
    }
    let score = |t: &Trace| -> f64 {
        [GLUCOSE, INSULIN, INTERSTITIAL]
            .iter()
            .map(|&i| mean(&t.component(i)))
            .sum()
    };
    let denom = score(oracle);
    if denom == 0.0 || !denom.is_finite() {
        return Err(SimError::Metric(format!("optimality denominator is {denom}")));
    }
    Ok(score(candidate) / denom)
}

pub fn speedup(candidate: &Trace, oracle: &Trace) -> Result<f64> {
    match (candidate.wall_clock_seconds, oracle.wall_clock_seconds) {
        (Some(c), Some(o)) => speedup_of(c, o),
        _ => Err(SimError::Metric("trace carries no timing".into())),
    }
}

pub fn speedup_of(candidate_seconds: f64, oracle_seconds: f64) -> Result<f64> {
    if !(candidate_seconds > 0.0) || !(oracle_seconds > 0.0) {
        return Err(SimError::Metric(format!(
            "timings must be positive, got {candidate_seconds} and {oracle_seconds}"
        )));
    }
    Ok(oracle_seconds / candidate_seconds)
}

/// Median of a non-empty sample.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[k] } else { 0.5 * (s[k - 1] + s[k]) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub sd: f64,
}

pub fn mean_sd(v: &[f64]) -> Option<MeanSd> {
    if v.is_empty() {
        return None;
    }
    let m = mean(v);
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanSd { mean: m, sd })
}

/// Cohort mean ± sd of each glycemic percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortGlycemic {
    pub tir: MeanSd,
    pub tar: MeanSd,
    pub tbr: MeanSd,
}

pub fn cohort_glycemic(reports: &[GlycemicReport]) -> Option<CohortGlycemic> {
    let col = |f: fn(&GlycemicReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    Some(CohortGlycemic {
        tir: mean_sd(&col(|r| r.tir))?,
        tar: mean_sd(&col(|r| r.tar))?,
        tbr: mean_sd(&col(|r| r.tbr))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dvector, DVector};
    use proptest::prelude::*;

    fn trace_of(rows: &[[f64; 3]], seconds: Option<f64>) -> Trace {
        let mut t = Trace::new("test");
        for (k, r) in rows.iter().enumerate() {
            t.push(k as f64, DVector::from_row_slice(r), dvector![]);
        }
        t.wall_clock_seconds = seconds;
        t
    }

    fn glucose_trace(g: &[f64]) -> Trace {
        let rows: Vec<[f64; 3]> = g.iter().map(|&v| [0.1, 0.01, v]).collect();
        trace_of(&rows, None)
    }

    #[test]
    fn all_in_range() {
        let r = glycemic(&glucose_trace(&[120.0; 10])).unwrap();
        assert_eq!((r.tir, r.tar, r.tbr), (100.0, 0.0, 0.0));
    }

    #[test]
    fn direct_count() {
        let r = glycemic(&glucose_trace(&[60.0, 120.0, 200.0, 150.0])).unwrap();
        assert_eq!((r.tbr, r.tir, r.tar), (25.0, 50.0, 25.0));
    }

    #[test]
    fn boundaries_are_in_range() {
        let r = glycemic(&glucose_trace(&[180.0, 70.0])).unwrap();
        assert_eq!(r.tir, 100.0);
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(glycemic(&Trace::new("x")).is_err());
    }

    #[test]
    fn optimality_identity_and_scaling() {
        let o = trace_of(&[[0.1, 0.02, 110.0], [0.2, 0.03, 140.0]], None);
        assert_eq!(optimality(&o, &o).unwrap(), 1.0);
        let mut c = o.clone();
        for s in &mut c.states {
            *s *= 1.1;
        }
        assert!((optimality(&c, &o).unwrap() - 1.1).abs() < 1e-12);
        let zero = trace_of(&[[0.0; 3], [0.0; 3]], None);
        assert!(optimality(&o, &zero).is_err());
        assert!(optimality(&o, &trace_of(&[[1.0; 3]], None)).is_err());
    }

    #[test]
    fn speedup_arithmetic() {
        let c = trace_of(&[[1.0; 3]], Some(4.0));
        let o = trace_of(&[[1.0; 3]], Some(10.0));
        assert_eq!(speedup(&c, &o).unwrap(), 2.5);
        assert_eq!(speedup(&o, &o).unwrap(), 1.0);
        assert!(speedup(&trace_of(&[[1.0; 3]], None), &o).is_err());
    }

    #[test]
    fn median_and_spread() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let s = mean_sd(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!((s.sd - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[3.0]).unwrap().sd, 0.0);
    }

    proptest! {
        #[test]
        fn percentages_sum_to_100(g in proptest::collection::vec(0.0f64..400.0, 1..300)) {
            let r = glycemic_of(&g).unwrap();
            prop_assert!((r.tir + r.tar + r.tbr - 100.0).abs() <= 1e-9);
            prop_assert!(r.tir >= -1e-9 && r.tar >= 0.0 && r.tbr >= 0.0);
        }

        #[test]
        fn optimality_is_scale_covariant(c in 0.1f64..10.0, g in 50.0f64..300.0) {
            let o = trace_of(&[[0.1, 0.02, g], [0.3, 0.05, g + 10.0]], None);
            let mut s = o.clone();
            for x in &mut s.states {
                *x *= c;
            }
            prop_assert!((optimality(&s, &o).unwrap() - c).abs() <= 1e-12 * c);
        }
    }
}
