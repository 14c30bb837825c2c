//! Streaming per-group anomaly scores.
//!
//! The default scorer predicts each sample with an autoregressive model on
//! deviations from an exponentially weighted level, fitted online by
//! recursive least squares with forgetting. The absolute prediction error,
//! normalised by a running error deviation, gives a raw score in [0, 1]. A
//! short-vs-long window comparison of raw scores, pushed through the normal
//! CDF, turns that into the reported score.
//!
//! Fusion only sees [`AnomalyScoreSeries`], so any [`AnomalyScorer`] can be
//! swapped in.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScorerError {
    #[error("series has {len} samples, fewer than the warm-up of {warmup}")]
    SeriesShorterThanWarmup { len: usize, warmup: usize },
    #[error("invalid scorer parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerParams {
    /// Autoregressive order.
    pub order: usize,
    /// Forgetting factor shared by the RLS fit, level and error variance.
    pub forgetting: f64,
    pub short_window: usize,
    pub long_window: usize,
    /// Floor for both the error deviation and the long-window deviation.
    pub sigma_min: f64,
    pub warmup: usize,
}

impl Default for ScorerParams {
    fn default() -> Self {
        ScorerParams {
            order: 4,
            forgetting: 0.995,
            short_window: 10,
            long_window: 200,
            sigma_min: 0.1,
            warmup: 50,
        }
    }
}

impl ScorerParams {
    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |m: &str| Err(ScorerError::InvalidParams(m.to_string()));
        if self.order < 1 {
            return bad("order must be >= 1");
        }
        if !(self.forgetting > 0.9 && self.forgetting < 1.0) {
            return bad("forgetting must lie in (0.9, 1.0)");
        }
        if self.short_window < 1 || self.short_window >= self.long_window {
            return bad("need 1 <= short_window < long_window");
        }
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return bad("sigma_min must be positive");
        }
        if self.warmup < self.order {
            return bad("warmup must be >= order");
        }
        Ok(())
    }
}

/// Prediction and raw score for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreStep {
    pub prediction: Option<f64>,
    pub raw: f64,
}

pub trait AnomalyScorer {
    /// Absorbs one aligned sample; `None` marks a missing cell.
    fn update(&mut self, x: Option<f64>) -> ScoreStep;
    /// Current anomaly likelihood in (0, 1).
    fn likelihood(&self) -> f64;
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

// Keeps Φ strictly inside (0, 1) in f64.
const Z_LIMIT: f64 = 8.0;
// Initial RLS covariance relative to the regressor's mean square.
const RLS_INIT_GAIN: f64 = 1e3;

#[derive(Debug, Clone)]
struct Rls {
    coef: Vec<f64>,
    /// Row-major p×p; empty until the first non-zero regressor.
    cov: Vec<f64>,
}

impl Rls {
    fn new(p: usize) -> Self {
        Rls { coef: vec![0.0; p], cov: Vec::new() }
    }

    fn predict(&self, phi: &[f64]) -> f64 {
        self.coef.iter().zip(phi).map(|(a, x)| a * x).sum()
    }

    fn update(&mut self, phi: &[f64], err: f64, lambda: f64) {
        let p = phi.len();
        let energy = phi.iter().map(|x| x * x).sum::<f64>() / p as f64;
        if energy == 0.0 {
            return;
        }
        if self.cov.is_empty() {
            // scaled by the first regressor so the fit does not depend on units
            self.cov = vec![0.0; p * p];
            for i in 0..p {
                self.cov[i * p + i] = RLS_INIT_GAIN / energy;
            }
        }
        let p_phi: Vec<f64> = (0..p)
            .map(|i| (0..p).map(|j| self.cov[i * p + j] * phi[j]).sum())
            .collect();
        let denom = lambda + phi.iter().zip(&p_phi).map(|(a, b)| a * b).sum::<f64>();
        let gain: Vec<f64> = p_phi.iter().map(|v| v / denom).collect();
        for (a, k) in self.coef.iter_mut().zip(&gain) {
            *a += k * err;
        }
        // P <- (P - k (P phi)^T) / lambda, kept symmetric
        for i in 0..p {
            for j in 0..p {
                self.cov[i * p + j] = (self.cov[i * p + j] - gain[i] * p_phi[j]) / lambda;
            }
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let m = 0.5 * (self.cov[i * p + j] + self.cov[j * p + i]);
                self.cov[i * p + j] = m;
                self.cov[j * p + i] = m;
            }
        }
        if self.coef.iter().chain(&self.cov).any(|v| !v.is_finite()) {
            *self = Rls::new(p);
        }
    }
}

/// Raw score saturates at this many error deviations.
pub const ERROR_CLAMP: f64 = 4.0;

/// AR(p) + RLS prediction-error scorer.
#[derive(Debug, Clone)]
pub struct ArRlsScorer {
    params: ScorerParams,
    rls: Rls,
    level: Option<f64>,
    /// Most recent sample first.
    lags: VecDeque<f64>,
    err_var: f64,
    err_count: u32,
    samples: usize,
    last_raw: f64,
    short: VecDeque<f64>,
    long: VecDeque<f64>,
}

impl ArRlsScorer {
    pub fn new(params: ScorerParams) -> Self {
        ArRlsScorer {
            rls: Rls::new(params.order),
            level: None,
            lags: VecDeque::with_capacity(params.order),
            err_var: 0.0,
            err_count: 0,
            samples: 0,
            last_raw: 0.0,
            short: VecDeque::with_capacity(params.short_window),
            long: VecDeque::with_capacity(params.long_window),
            params,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Bias-corrected forgetting-factor error deviation, floored.
    pub fn error_sigma(&self) -> f64 {
        if self.err_count == 0 {
            return self.params.sigma_min;
        }
        let correction = 1.0 - self.params.forgetting.powi(self.err_count.min(1 << 20) as i32);
        let sigma = (self.err_var / correction).sqrt();
        if sigma.is_finite() {
            sigma.max(self.params.sigma_min)
        } else {
            f64::MAX
        }
    }

    fn regressor(&self, level: f64) -> Vec<f64> {
        (0..self.params.order)
            .map(|j| self.lags.get(j).map_or(0.0, |x| x - level))
            .collect()
    }

    fn push_window(buf: &mut VecDeque<f64>, cap: usize, v: f64) {
        if buf.len() == cap {
            buf.pop_back();
        }
        buf.push_front(v);
    }
}

impl AnomalyScorer for ArRlsScorer {
    fn update(&mut self, x: Option<f64>) -> ScoreStep {
        let Some(x) = x.filter(|v| v.is_finite()) else {
            return ScoreStep { prediction: None, raw: self.last_raw };
        };
        let lambda = self.params.forgetting;
        let level = *self.level.get_or_insert(x);
        let phi = self.regressor(level);
        let prediction = level + self.rls.predict(&phi);
        let err = x - prediction;
        let in_warmup = self.samples < self.params.warmup;

        let bound = ERROR_CLAMP * self.error_sigma();
        let raw = if in_warmup {
            0.0
        } else {
            let r = err.abs() / bound;
            if r.is_finite() { r.min(1.0) } else { 1.0 }
        };

        // Errors past the saturation bound are learned only up to the bound,
        // so an excursion keeps scoring instead of being absorbed in a few steps.
        let learned = if in_warmup { err } else { err.clamp(-bound, bound) };
        self.rls.update(&phi, learned, lambda);
        // start-up transients of the filter stay out of the error scale
        if learned.is_finite() && self.samples >= self.params.warmup / 2 {
            self.err_var = lambda * self.err_var + (1.0 - lambda) * learned * learned;
            self.err_count = self.err_count.saturating_add(1);
        }
        let next_level = level + (1.0 - lambda) * (x - level);
        self.level = Some(if next_level.is_finite() { next_level } else { x });
        if self.lags.len() == self.params.order {
            self.lags.pop_back();
        }
        self.lags.push_front(x);

        self.samples += 1;
        self.last_raw = raw;
        if !in_warmup {
            Self::push_window(&mut self.short, self.params.short_window, raw);
            Self::push_window(&mut self.long, self.params.long_window, raw);
        }
        ScoreStep { prediction: Some(prediction), raw }
    }

    fn likelihood(&self) -> f64 {
        if self.short.is_empty() || self.long.is_empty() {
            return 0.5;
        }
        windowed_likelihood(
            self.short.iter().copied(),
            self.long.iter().copied(),
            self.params.sigma_min,
        )
    }
}

/// Φ((mean_short − mean_long) / max(std_long, sigma_min)).
pub fn windowed_likelihood(
    short: impl ExactSizeIterator<Item = f64>,
    long: impl ExactSizeIterator<Item = f64> + Clone,
    sigma_min: f64,
) -> f64 {
    let ns = short.len() as f64;
    let mu_s = short.sum::<f64>() / ns;
    let nl = long.len() as f64;
    let mu_l = long.clone().sum::<f64>() / nl;
    let var_l = long.map(|v| (v - mu_l).powi(2)).sum::<f64>() / nl;
    let sigma = var_l.sqrt().max(sigma_min);
    let z = ((mu_s - mu_l) / sigma).clamp(-Z_LIMIT, Z_LIMIT);
    normal_cdf(z)
}

/// Score trace for one group on the common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScoreSeries {
    pub group_id: String,
    pub timestamps: Vec<i64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub t: i64,
    pub group: String,
    #[serde(rename = "S")]
    pub score: f64,
}

pub fn score_stream(
    group_id: &str,
    timestamps: &[i64],
    series: &[Option<f64>],
    params: &ScorerParams,
) -> Result<AnomalyScoreSeries, ScorerError> {
    score_stream_with(group_id, timestamps, series, ArRlsScorer::new(*params), params.warmup)
}

pub fn score_stream_with<S: AnomalyScorer>(
    group_id: &str,
    timestamps: &[i64],
    series: &[Option<f64>],
    mut scorer: S,
    warmup: usize,
) -> Result<AnomalyScoreSeries, ScorerError> {
    if series.len() < warmup {
        return Err(ScorerError::SeriesShorterThanWarmup { len: series.len(), warmup });
    }
    let scores = series
        .iter()
        .map(|x| {
            scorer.update(*x);
            scorer.likelihood()
        })
        .collect();
    Ok(AnomalyScoreSeries {
        group_id: group_id.to_string(),
        timestamps: timestamps.to_vec(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raws(params: ScorerParams, xs: &[f64]) -> Vec<f64> {
        let mut s = ArRlsScorer::new(params);
        xs.iter().map(|x| s.update(Some(*x)).raw).collect()
    }

    #[test]
    fn constant_stream_scores_zero() {
        let r = raws(ScorerParams::default(), &[5.0; 300]);
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn warmup_is_zero() {
        let xs: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin() * 10.0).collect();
        let r = raws(ScorerParams::default(), &xs);
        assert!(r[..50].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_after_zeros_saturates() {
        let mut xs = vec![0.0; 200];
        xs.push(10.0);
        let r = raws(ScorerParams::default(), &xs);
        assert_eq!(r[200], 1.0);
    }

    #[test]
    fn likelihood_identities() {
        let l = windowed_likelihood([0.3; 10].into_iter(), [0.3; 200].into_iter(), 0.1);
        assert!((l - 0.5).abs() < 1e-12, "{l}");
        assert_eq!(windowed_likelihood([0.0; 10].into_iter(), [0.0; 200].into_iter(), 0.1), 0.5);
        // long: half 0, half 1 → mean 0.5, std 0.5
        let long: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        let l = windowed_likelihood([2.0; 10].into_iter(), long.into_iter(), 0.1);
        assert!((l - 0.998_650_101_968_369_9).abs() < 1e-12, "{l}");
    }

    #[test]
    fn empty_windows_give_half() {
        let s = ArRlsScorer::new(ScorerParams::default());
        assert_eq!(s.likelihood(), 0.5);
    }

    #[test]
    fn missing_freezes_state() {
        let mut a = ArRlsScorer::new(ScorerParams::default());
        let mut b = ArRlsScorer::new(ScorerParams::default());
        let xs: Vec<f64> = (0..120).map(|i| 20.0 + (i as f64 * 0.3).sin()).collect();
        let mut last = 0.0;
        for x in &xs {
            a.update(Some(*x));
            last = b.update(Some(*x)).raw;
        }
        let before = b.likelihood();
        let step = b.update(None);
        assert_eq!(step.raw, last);
        assert_eq!(step.prediction, None);
        assert_eq!(b.likelihood(), before);
        assert_eq!(b.samples(), 120);
        // the frozen scorer continues exactly like one that never saw the gap
        assert_eq!(a.update(Some(21.0)), b.update(Some(21.0)));
    }

    #[test]
    fn constant_series_scores_half() {
        let grid: Vec<i64> = (0..300).collect();
        let series = vec![Some(24.0); 300];
        let out = score_stream("g", &grid, &series, &ScorerParams::default()).unwrap();
        assert!(out.scores.iter().all(|s| *s == 0.5));
    }

    #[test]
    fn short_series_rejected() {
        let out = score_stream("g", &[0, 1], &[Some(1.0), Some(1.0)], &ScorerParams::default());
        assert_eq!(out, Err(ScorerError::SeriesShorterThanWarmup { len: 2, warmup: 50 }));
    }

    #[test]
    fn params_validation() {
        assert!(ScorerParams::default().validate().is_ok());
        assert!(ScorerParams { forgetting: 1.0, ..Default::default() }.validate().is_err());
        assert!(ScorerParams { short_window: 200, ..Default::default() }.validate().is_err());
        assert!(ScorerParams { warmup: 2, ..Default::default() }.validate().is_err());
        assert!(ScorerParams { sigma_min: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn scale_equivariance_on_step() {
        // pseudo-noise well above sigma_min, then a step
        let mut xs: Vec<f64> = (0..300).map(|i| 20.0 + ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        for x in &mut xs[150..] {
            *x += 10.0;
        }
        let base = raws(ScorerParams::default(), &xs);
        assert_eq!(base[150], 1.0);
        for c in [2.0, 7.5] {
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let r = raws(ScorerParams::default(), &scaled);
            for i in 0..300 {
                assert!((r[i] - base[i]).abs() < 1e-9, "c={c} i={i}: {} vs {}", r[i], base[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn outputs_in_range(xs in prop::collection::vec(prop_oneof![
            -1e6f64..1e6,
            Just(0.0),
            -1.0f64..1.0,
        ], 1..400)) {
            let mut s = ArRlsScorer::new(ScorerParams { warmup: 4, ..Default::default() });
            for x in xs {
                let step = s.update(Some(x));
                prop_assert!((0.0..=1.0).contains(&step.raw));
                let l = s.likelihood();
                prop_assert!(l > 0.0 && l < 1.0);
            }
        }

        #[test]
        fn deterministic(xs in prop::collection::vec(-50.0f64..50.0, 60..200)) {
            let grid: Vec<i64> = (0..xs.len() as i64).collect();
            let series: Vec<_> = xs.iter().map(|x| Some(*x)).collect();
            let a = score_stream("g", &grid, &series, &ScorerParams::default()).unwrap();
            let b = score_stream("g", &grid, &series, &ScorerParams::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
