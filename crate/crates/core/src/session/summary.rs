//! Descriptive per-condition rating summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::trial::{Condition, TrialRecord};
use super::SessionError;

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatingStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl RatingStats {
    fn from_values(values: impl IntoIterator<Item = i8>) -> Self {
        let mut v: Vec<f64> = values.into_iter().map(f64::from).collect();
        v.sort_by(f64::total_cmp);
        Self { n: v.len(), min: v[0], q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75), max: v[v.len() - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub relative_motion: RatingStats,
    pub acceleration: RatingStats,
    pub comfort: RatingStats,
    pub mean_lean_peak_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub conditions: BTreeMap<Condition, ConditionSummary>,
    pub cancelled: usize,
}

/// Summarizes rated trials. Cancelled or unrated trials are left out.
pub fn summarize(records: &[TrialRecord]) -> Result<Summary, SessionError> {
    let mut by_cond: BTreeMap<Condition, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_rated()) {
        by_cond.entry(r.condition).or_default().push(r);
    }
    if by_cond.is_empty() {
        return Err(SessionError::EmptySummary);
    }
    let conditions = by_cond
        .into_iter()
        .map(|(c, recs)| {
            let dim = |f: fn(&TrialRecord) -> i8| RatingStats::from_values(recs.iter().map(|r| f(r)));
            let summary = ConditionSummary {
                relative_motion: dim(|r| r.ratings.map_or(0, |x| x.relative_motion)),
                acceleration: dim(|r| r.ratings.map_or(0, |x| x.acceleration)),
                comfort: dim(|r| r.ratings.map_or(0, |x| x.comfort)),
                mean_lean_peak_m: recs.iter().map(|r| r.lean_peak).sum::<f64>() / recs.len() as f64,
            };
            (c, summary)
        })
        .collect();
    let cancelled = records.iter().filter(|r| !r.is_rated()).count();
    Ok(Summary { conditions, cancelled })
}

impl Summary {
    fn rows(&self) -> impl Iterator<Item = (Condition, &'static str, &RatingStats)> {
        self.conditions.iter().flat_map(|(c, s)| {
            [("relative_motion", &s.relative_motion), ("acceleration", &s.acceleration), ("comfort", &s.comfort)]
                .into_iter()
                .map(move |(name, st)| (*c, name, st))
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, s) in &self.conditions {
            let _ = writeln!(out, "{c}  (n = {}, mean lean peak {:.1} mm)", s.relative_motion.n, s.mean_lean_peak_m * 1e3);
            for (name, st) in [("relative motion", &s.relative_motion), ("acceleration", &s.acceleration), ("comfort", &s.comfort)] {
                let _ = writeln!(
                    out,
                    "  {name:<16} median {:>5.2}  IQR [{:>5.2}, {:>5.2}]  range [{:>3}, {:>3}]",
                    st.median, st.q1, st.q3, st.min, st.max
                );
            }
        }
        if self.cancelled > 0 {
            let _ = writeln!(out, "{} cancelled or unrated trial(s) excluded", self.cancelled);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,dimension,n,min,q1,median,q3,max\n");
        for (c, name, st) in self.rows() {
            let _ = writeln!(out, "{c},{name},{},{},{},{},{},{}", st.n, st.min, st.q1, st.median, st.q3, st.max);
        }
        out
    }

    /// Writes `summary.txt` and `quartiles.csv` into `dir`.
    pub fn write_report(&self, dir: impl AsRef<Path>) -> Result<(), SessionError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.txt"), self.to_text())?;
        fs::write(dir.join("quartiles.csv"), self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::trial::{Ratings, TrialOutcome};

    fn rec(i: usize, c: Condition, r: Option<Ratings>, outcome: TrialOutcome) -> TrialRecord {
        TrialRecord {
            trial_index: i,
            condition: c,
            outcome,
            target_phase_duration: 1.5,
            stimulus_duration: 10.0,
            ratings: r,
            lean_peak: 0.01,
            launched_at: 0.0,
            stimulus_start: None,
            ended_at: 0.0,
        }
    }

    #[test]
    fn constant_ratings() {
        let r = Ratings::new(2, 2, 2).unwrap();
        let recs: Vec<_> = (0..5).map(|i| rec(i, Condition::HDirect, Some(r), TrialOutcome::Completed)).collect();
        let s = summarize(&recs).unwrap();
        let st = s.conditions[&Condition::HDirect].acceleration;
        assert_eq!((st.q1, st.median, st.q3), (2.0, 2.0, 2.0));
    }

    #[test]
    fn hand_computed_quartiles() {
        // acceleration ratings 0 1 1 2 3 3 3 4 5 5
        // type 7: h(0.25) = 2.25 -> 1 + 0.25*(2-1) = 1.25
        //         h(0.5)  = 4.5  -> 3
        //         h(0.75) = 6.75 -> 3 + 0.75*(4-3) = 3.75
        let acc = [3, 1, 5, 0, 3, 2, 4, 1, 5, 3];
        let recs: Vec<_> = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| rec(i, Condition::HIndirect, Some(Ratings::new(0, a, 0).unwrap()), TrialOutcome::Completed))
            .collect();
        let st = summarize(&recs).unwrap().conditions[&Condition::HIndirect].acceleration;
        assert_eq!(st.n, 10);
        assert_eq!(st.min, 0.0);
        assert_eq!(st.max, 5.0);
        assert!((st.q1 - 1.25).abs() < 1e-12);
        assert!((st.median - 3.0).abs() < 1e-12);
        assert!((st.q3 - 3.75).abs() < 1e-12);
    }

    #[test]
    fn cancelled_excluded() {
        let recs = vec![
            rec(0, Condition::HNone, Some(Ratings::new(1, 1, 1).unwrap()), TrialOutcome::Completed),
            rec(1, Condition::HNone, None, TrialOutcome::Cancelled),
            rec(2, Condition::HDirect, None, TrialOutcome::Cancelled),
        ];
        let s = summarize(&recs).unwrap();
        assert_eq!(s.conditions.len(), 1);
        assert_eq!(s.conditions[&Condition::HNone].comfort.n, 1);
        assert_eq!(s.cancelled, 2);
        assert!(matches!(summarize(&recs[1..]), Err(SessionError::EmptySummary)));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![rec(0, Condition::HNone, Some(Ratings::new(1, 1, 1).unwrap()), TrialOutcome::Completed)];
        summarize(&recs).unwrap().write_report(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("quartiles.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("H_NONE,comfort,1,1,1,1,1,1"));
        assert!(dir.path().join("summary.txt").exists());
    }
}
