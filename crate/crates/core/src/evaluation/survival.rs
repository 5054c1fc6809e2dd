//! Kaplan–Meier product-limit estimator.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Step function: `survival[k]` holds on `[times[k], times[k+1])`, and the
/// curve is 1 before the first event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl SurvivalCurve {
    pub fn at(&self, t: f64) -> f64 {
        match self.times.iter().rposition(|&x| x <= t) {
            Some(k) => self.survival[k],
            None => 1.0,
        }
    }
}

/// `cohort` holds `(time, event_observed)`. Subjects censored at an event
/// time count as at risk for that event.
pub fn km_estimate(cohort: &[(f64, bool)]) -> Result<SurvivalCurve, EvalError> {
    if cohort.is_empty() {
        return Err(EvalError::EmptyCohort("no subjects for survival".into()));
    }
    if cohort.iter().any(|&(t, _)| !(t >= 0.0) || !t.is_finite()) {
        return Err(EvalError::InvalidInput("survival times must be finite and non-negative".into()));
    }
    let mut sorted = cohort.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = SurvivalCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut deaths = 0;
        let mut leaving = 0;
        while i < sorted.len() && sorted[i].0 == t {
            deaths += usize::from(sorted[i].1);
            leaving += 1;
            i += 1;
        }
        if deaths > 0 {
            s *= (at_risk - deaths) as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(deaths);
        }
        at_risk -= leaving;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_patient_example() {
        let c = km_estimate(&[(1.0, true), (2.0, false), (3.0, true)]).unwrap();
        assert_eq!(c.times, vec![1.0, 3.0]);
        assert_eq!(c.survival, vec![2.0 / 3.0, 0.0]);
        assert_eq!(c.at_risk, vec![3, 1]);
        assert_eq!(c.at(0.5), 1.0);
        assert_eq!(c.at(2.5), 2.0 / 3.0);
    }

    #[test]
    fn all_censored_is_flat() {
        let c = km_estimate(&[(1.0, false), (5.0, false)]).unwrap();
        assert!(c.times.is_empty());
        assert_eq!(c.at(100.0), 1.0);
    }

    #[test]
    fn uncensored_is_empirical_survival() {
        let times = [4.0, 1.0, 3.0, 3.0, 7.0, 2.0];
        let c = km_estimate(&times.iter().map(|&t| (t, true)).collect::<Vec<_>>()).unwrap();
        for t in [0.0, 1.0, 2.5, 3.0, 6.9, 7.0] {
            let frac = times.iter().filter(|&&x| x > t).count() as f64 / times.len() as f64;
            assert!((c.at(t) - frac).abs() < 1e-12, "t={t}");
        }
        assert!(c.survival.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn censoring_at_event_time_counts_as_at_risk() {
        let c = km_estimate(&[(2.0, true), (2.0, false), (5.0, true)]).unwrap();
        assert_eq!(c.survival[0], 2.0 / 3.0);
        assert_eq!(c.at_risk, vec![3, 1]);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(km_estimate(&[]), Err(EvalError::EmptyCohort(_))));
    }
}
