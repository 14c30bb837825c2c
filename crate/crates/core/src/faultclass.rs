//! Fault-type classification over a window of voted readings.
//!
//! Faults are first checked for continuity (a long enough run of consecutive
//! faulty samples). Discrete faults split on frequency: more than `theta`
//! occurrences is a malfunction, otherwise random. Continuous faults split on
//! the shape of their residual: a flat residual is a bias, anything with a
//! trend is a drift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FaultClassError {
    #[error("window of {len} samples is shorter than the minimum run {min_run}")]
    WindowTooShort { len: usize, min_run: usize },
    #[error("malformed window: {0}")]
    MalformedWindow(String),
    #[error("invalid classifier parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultClass {
    Random,
    Malfunction,
    Bias,
    Drift,
    None,
}

impl FaultClass {
    pub const FAULTS: [FaultClass; 4] = [FaultClass::Random, FaultClass::Malfunction, FaultClass::Bias, FaultClass::Drift];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultClass::Random => "Random",
            FaultClass::Malfunction => "Malfunction",
            FaultClass::Bias => "Bias",
            FaultClass::Drift => "Drift",
            FaultClass::None => "None",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultWindow {
    pub readings: Vec<f64>,
    pub faulty: Vec<bool>,
    /// Present exactly where `faulty` is true.
    pub residuals: Vec<Option<f64>>,
}

impl FaultWindow {
    pub fn new(readings: Vec<f64>, faulty: Vec<bool>, residuals: Vec<Option<f64>>) -> Result<Self, FaultClassError> {
        if readings.len() != faulty.len() || faulty.len() != residuals.len() {
            return Err(FaultClassError::MalformedWindow(format!(
                "lengths differ: {} readings, {} flags, {} residuals",
                readings.len(),
                faulty.len(),
                residuals.len()
            )));
        }
        if let Some(i) = faulty.iter().zip(&residuals).position(|(f, r)| *f != r.is_some()) {
            return Err(FaultClassError::MalformedWindow(format!("residual/flag mismatch at {i}")));
        }
        Ok(FaultWindow { readings, faulty, residuals })
    }

    pub fn len(&self) -> usize {
        self.faulty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faulty.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    /// Frequency threshold separating random from malfunction.
    pub theta: usize,
    /// Minimum run length that counts as continuous.
    pub min_run: usize,
    /// Tolerance on the residual trend for a fault to count as constant.
    pub delta: f64,
    /// Window length in samples.
    pub window: usize,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams { theta: 5, min_run: 3, delta: 2.0, window: 60 }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<(), FaultClassError> {
        let bad = |m: &str| Err(FaultClassError::InvalidParams(m.to_string()));
        if self.theta < 1 {
            return bad("theta must be >= 1");
        }
        if self.min_run < 2 {
            return bad("min_run must be >= 2");
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad("delta must be finite and >= 0");
        }
        if self.min_run > self.window {
            return bad("min_run must not exceed window");
        }
        if self.theta >= self.window {
            return bad("theta must be below window");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub fault_count: usize,
    pub continuous: bool,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultReport {
    pub sensor_id: String,
    pub window_end: i64,
    pub class: FaultClass,
    pub evidence: Evidence,
}

/// Wire form of a [`FaultReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultRecord {
    pub t: i64,
    pub sensor: String,
    pub class: FaultClass,
    pub count: usize,
    pub continuous: bool,
    pub constant: bool,
}

impl From<&FaultReport> for FaultRecord {
    fn from(r: &FaultReport) -> Self {
        FaultRecord {
            t: r.window_end,
            sensor: r.sensor_id.clone(),
            class: r.class,
            count: r.evidence.fault_count,
            continuous: r.evidence.continuous,
            constant: r.evidence.constant,
        }
    }
}

/// Start and length of the first longest run of `true`.
pub fn longest_run(flags: &[bool]) -> (usize, usize) {
    let (mut best_start, mut best_len) = (0, 0);
    let mut start = 0;
    let mut len = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            if len == 0 {
                start = i;
            }
            len += 1;
            if len > best_len {
                best_start = start;
                best_len = len;
            }
        } else {
            len = 0;
        }
    }
    (best_start, best_len)
}

pub fn is_continuous(flags: &[bool], min_run: usize) -> bool {
    longest_run(flags).1 >= min_run
}

pub fn is_constant(values: &[f64], delta: f64) -> bool {
    if values.is_empty() {
        return false;
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= delta
}

/// Least-squares line through `values` against their index, evaluated at
/// every index. Sample noise on the residual averages out; only the trend
/// remains.
pub fn linear_trend(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return values.to_vec();
    }
    let nf = n as f64;
    let mean_x = (nf - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    (0..n).map(|i| mean_y + slope * (i as f64 - mean_x)).collect()
}

pub fn classify_fault(window: &FaultWindow, params: &ClassifierParams) -> Result<Classification, FaultClassError> {
    if window.len() < params.min_run {
        return Err(FaultClassError::WindowTooShort { len: window.len(), min_run: params.min_run });
    }
    let fault_count = window.faulty.iter().filter(|f| **f).count();
    if fault_count == 0 {
        return Ok(Classification {
            class: FaultClass::None,
            evidence: Evidence { fault_count, continuous: false, constant: false },
        });
    }
    let (run_start, run_len) = longest_run(&window.faulty);
    let continuous = run_len >= params.min_run;
    // the shape test looks at the persistent part when there is one
    let shaped: Vec<f64> = if continuous {
        window.residuals[run_start..run_start + run_len].iter().flatten().copied().collect()
    } else {
        window.residuals.iter().flatten().copied().collect()
    };
    let constant = is_constant(&linear_trend(&shaped), params.delta);
    let class = match (continuous, constant) {
        (true, true) => FaultClass::Bias,
        (true, false) => FaultClass::Drift,
        (false, _) if fault_count > params.theta => FaultClass::Malfunction,
        (false, _) => FaultClass::Random,
    };
    Ok(Classification { class, evidence: Evidence { fault_count, continuous, constant } })
}

/// Classification outcome for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub class: FaultClass,
    pub evidence: Evidence,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: bool = true;
    const F: bool = false;

    fn window_from(faults: &[(usize, f64)], len: usize) -> FaultWindow {
        let mut flags = vec![false; len];
        let mut res = vec![None; len];
        for &(i, r) in faults {
            flags[i] = true;
            res[i] = Some(r);
        }
        FaultWindow::new(vec![24.0; len], flags, res).unwrap()
    }

    fn params() -> ClassifierParams {
        ClassifierParams { theta: 5, min_run: 3, delta: 0.1, window: 60 }
    }

    #[test]
    fn continuity_examples() {
        assert!(!is_continuous(&[F, T, F, F, T, F], 3));
        assert!(is_continuous(&[F, T, T, T, F], 3));
        assert!(!is_continuous(&[F; 8], 1));
    }

    #[test]
    fn constancy_examples() {
        assert!(is_constant(&[7.0, 7.0, 7.0], 0.1));
        assert!(!is_constant(&[1.0, 2.0, 3.0], 0.1));
        assert!(is_constant(&[7.0, 7.05], 0.1));
    }

    #[test]
    fn random_two_isolated_faults() {
        let w = window_from(&[(3, 5.0), (47, 5.0)], 60);
        assert_eq!(classify_fault(&w, &params()).unwrap().class, FaultClass::Random);
    }

    #[test]
    fn malfunction_twelve_scattered() {
        let faults: Vec<_> = (0..12).map(|i| (i * 5, 4.0)).collect();
        let out = classify_fault(&window_from(&faults, 60), &params()).unwrap();
        assert_eq!(out.class, FaultClass::Malfunction);
        assert_eq!(out.evidence.fault_count, 12);
        assert!(!out.evidence.continuous);
    }

    #[test]
    fn bias_and_drift_runs() {
        let flat: Vec<_> = (10..=40).map(|i| (i, 7.0)).collect();
        let out = classify_fault(&window_from(&flat, 60), &params()).unwrap();
        assert_eq!(out.class, FaultClass::Bias);
        assert!(out.evidence.continuous && out.evidence.constant);

        let ramp: Vec<_> = (10..=40).map(|i| (i, 1.0 + 0.5 * (i - 10) as f64)).collect();
        let out = classify_fault(&window_from(&ramp, 60), &params()).unwrap();
        assert_eq!(out.class, FaultClass::Drift);
        assert!(!out.evidence.constant);
    }

    #[test]
    fn noisy_bias_stays_bias() {
        // zero-mean wiggle around a constant offset has no trend
        let noisy: Vec<_> = (0..60).map(|i| (i, 7.0 + if i % 2 == 0 { 0.8 } else { -0.8 })).collect();
        let out = classify_fault(&window_from(&noisy, 60), &ClassifierParams { delta: 0.5, ..params() }).unwrap();
        assert_eq!(out.class, FaultClass::Bias);
    }

    #[test]
    fn none_when_clean() {
        let out = classify_fault(&window_from(&[], 60), &params()).unwrap();
        assert_eq!(out.class, FaultClass::None);
        assert_eq!(out.evidence.fault_count, 0);
    }

    #[test]
    fn continuity_wins_over_scatter() {
        let mut faults: Vec<_> = (0..8).map(|i| (i * 4, 3.0)).collect();
        faults.extend((40..50).map(|i| (i, 7.0)));
        let out = classify_fault(&window_from(&faults, 60), &params()).unwrap();
        assert_eq!(out.class, FaultClass::Bias);
    }

    #[test]
    fn short_window_rejected() {
        let w = window_from(&[], 2);
        assert_eq!(
            classify_fault(&w, &params()),
            Err(FaultClassError::WindowTooShort { len: 2, min_run: 3 })
        );
    }

    #[test]
    fn malformed_window_rejected() {
        assert!(FaultWindow::new(vec![1.0], vec![true], vec![None]).is_err());
        assert!(FaultWindow::new(vec![1.0, 2.0], vec![true], vec![Some(1.0)]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ClassifierParams::default().validate().is_ok());
        assert!(ClassifierParams { min_run: 1, ..Default::default() }.validate().is_err());
        assert!(ClassifierParams { theta: 60, ..Default::default() }.validate().is_err());
        assert!(ClassifierParams { min_run: 61, ..Default::default() }.validate().is_err());
    }

    fn arb_window() -> impl Strategy<Value = FaultWindow> {
        (3usize..80).prop_flat_map(|n| {
            (
                prop::collection::vec(-30.0f64..30.0, n),
                prop::collection::vec((any::<bool>(), 0.0f64..20.0), n),
            )
                .prop_map(|(readings, cells)| {
                    let flags: Vec<bool> = cells.iter().map(|c| c.0).collect();
                    let res = cells.iter().map(|(f, r)| f.then_some(*r)).collect();
                    FaultWindow::new(readings, flags, res).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn exclusive_and_none_iff_clean(w in arb_window(), theta in 1usize..10) {
            let p = ClassifierParams { theta, min_run: 3, delta: 0.5, window: w.len() };
            let out = classify_fault(&w, &p).unwrap();
            prop_assert_eq!(out.class == FaultClass::None, out.evidence.fault_count == 0);
        }

        #[test]
        fn translation_invariant(w in arb_window(), shift in -100.0f64..100.0) {
            let p = ClassifierParams { theta: 5, min_run: 3, delta: 0.5, window: w.len() };
            let shifted = FaultWindow {
                readings: w.readings.iter().map(|r| r + shift).collect(),
                ..w.clone()
            };
            prop_assert_eq!(classify_fault(&w, &p).unwrap(), classify_fault(&shifted, &p).unwrap());
        }

        #[test]
        fn linear_drift_detected(t in 4usize..120, scale in 1.01f64..50.0, delta in 0.01f64..2.0) {
            // residuals k*i over a full-window run; the trend spans k*(t-1)
            let k = scale * delta / (t - 1) as f64;
            let faults: Vec<_> = (0..t).map(|i| (i, k * i as f64)).collect();
            let w = window_from(&faults, t);
            let p = ClassifierParams { theta: 1, min_run: 3, delta, window: t };
            prop_assert_eq!(classify_fault(&w, &p).unwrap().class, FaultClass::Drift);
        }

        #[test]
        fn raising_theta_only_demotes_malfunction(w in arb_window(), lo in 1usize..8, extra in 1usize..8) {
            let p_lo = ClassifierParams { theta: lo, min_run: 3, delta: 0.5, window: w.len() };
            let p_hi = ClassifierParams { theta: lo + extra, ..p_lo };
            let a = classify_fault(&w, &p_lo).unwrap().class;
            let b = classify_fault(&w, &p_hi).unwrap().class;
            if a != b {
                prop_assert_eq!((a, b), (FaultClass::Malfunction, FaultClass::Random));
            }
            prop_assert!(!(a == FaultClass::Random && b == FaultClass::Malfunction));
        }
    }
}
