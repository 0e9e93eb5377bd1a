//! Joint bilingual scaling law and effective capacity.
//!
//! For one language, loss as a function of non-embedding parameters `N` and
//! the language's weight `w` in the mix is modelled as
//!
//! ```text
//! L(N, w) = E + beta * (N * c_hat(w))^(-alpha),   c_hat(w) = w + c * (1 - w)
//! ```
//!
//! `c` is the share of capacity the other language transfers. A monolingual
//! model (`w = 1`) sees `c_hat = 1`, so the effective capacity ratio, the
//! fraction of parameters a monolingual model needs to match the multilingual
//! loss, is exactly `c_hat(w)`. The weight is a language's share of the
//! non-code part of the mix.
//!
//! `N` is divided by [`FitOptions::param_unit`] (millions by default) before
//! entering the law, so `beta` is expressed in those units.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WEIGHT_CONVENTION: &str = "share of the language in the non-code part of the mix";
pub const DEFAULT_PARAM_UNIT: f64 = 1e6;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;
const ALPHA_MIN: f64 = 1e-6;
const ALPHA_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("need at least 4 observations for {lang:?}, got {got}")]
    TooFewObservations { lang: String, got: usize },
    #[error("degenerate grid for {lang:?}: {reason}")]
    DegenerateGrid { lang: String, reason: String },
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("weight grid value {0} outside [0, 1]")]
    GridOutOfRange(f64),
    #[error("no fit for language {0:?}")]
    MissingLanguage(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossObservation {
    pub lang: String,
    /// Non-embedding parameter count.
    pub params: f64,
    pub weight: f64,
    pub loss: f64,
    /// Passed through untouched.
    #[serde(default)]
    pub unit: String,
}

impl LossObservation {
    pub fn new(lang: &str, params: f64, weight: f64, loss: f64) -> Self {
        Self { lang: lang.to_string(), params, weight, loss, unit: String::new() }
    }

    pub fn validate(&self) -> Result<(), ScalingError> {
        if !(self.params.is_finite() && self.params > 0.0) {
            return Err(ScalingError::InvalidObservation(format!("params {} must be > 0", self.params)));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(ScalingError::InvalidObservation(format!("weight {} outside [0, 1]", self.weight)));
        }
        if !(self.loss.is_finite() && self.loss > 0.0) {
            return Err(ScalingError::InvalidObservation(format!("loss {} must be > 0", self.loss)));
        }
        Ok(())
    }
}

pub fn read_observations_csv<R: Read>(reader: R) -> Result<Vec<LossObservation>, ScalingError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let obs: LossObservation = row?;
        obs.validate()?;
        out.push(obs);
    }
    Ok(out)
}

/// Law coefficients for one language.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub e: f64,
    pub beta: f64,
    pub alpha: f64,
    pub c: f64,
}

impl LawParams {
    pub fn effective_fraction(&self, w: f64) -> f64 {
        w + self.c * (1.0 - w)
    }

    /// Loss at `n_scaled` parameters (already divided by the unit).
    pub fn loss_scaled(&self, n_scaled: f64, w: f64) -> f64 {
        self.e + self.beta * (n_scaled * self.effective_fraction(w)).powf(-self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Root-mean-square of log-loss residuals.
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the winning start point.
    pub start: usize,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageFit {
    pub lang: String,
    pub params: LawParams,
    pub param_unit: f64,
    pub diagnostics: FitDiagnostics,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub loss_unit: String,
}

impl LanguageFit {
    pub fn predict_loss(&self, n: f64, w: f64) -> f64 {
        predict_loss(self, n, w)
    }

    pub fn effective_capacity(&self, w: f64) -> f64 {
        effective_capacity(self, w)
    }
}

/// Fits for several languages plus the conventions they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub weight_convention: String,
    pub languages: BTreeMap<String, LanguageFit>,
}

impl ScalingFit {
    pub fn get(&self, lang: &str) -> Result<&LanguageFit, ScalingError> {
        self.languages.get(lang).ok_or_else(|| ScalingError::MissingLanguage(lang.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub param_unit: f64,
    /// Holds the transfer coefficient fixed instead of fitting it; a single
    /// weight is then enough.
    pub fixed_c: Option<f64>,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { param_unit: DEFAULT_PARAM_UNIT, fixed_c: None, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

/// `E + beta * (N * c_hat(w))^(-alpha)`.
pub fn predict_loss(fit: &LanguageFit, n: f64, w: f64) -> f64 {
    fit.params.loss_scaled(n / fit.param_unit, w)
}

/// `w + c * (1 - w)`.
pub fn effective_capacity(fit: &LanguageFit, w: f64) -> f64 {
    fit.params.effective_fraction(w)
}

struct Problem<'a> {
    n: Vec<f64>,
    w: &'a [f64],
    log_loss: Vec<f64>,
    fixed_c: Option<f64>,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        if self.fixed_c.is_some() {
            3
        } else {
            4
        }
    }

    // theta = [E, ln beta, alpha, (c)]
    fn params(&self, theta: &[f64]) -> LawParams {
        LawParams { e: theta[0], beta: theta[1].exp(), alpha: theta[2], c: self.fixed_c.unwrap_or_else(|| theta[3]) }
    }

    fn project(&self, theta: &mut [f64]) {
        theta[0] = theta[0].max(0.0);
        theta[2] = theta[2].clamp(ALPHA_MIN, ALPHA_MAX);
        if self.fixed_c.is_none() {
            theta[3] = theta[3].clamp(0.0, 1.0);
        }
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.params(theta);
        self.n.iter().zip(self.w).zip(&self.log_loss).map(|((&n, &w), &ll)| p.loss_scaled(n, w).ln() - ll).collect()
    }

    fn cost(&self, theta: &[f64]) -> f64 {
        let c: f64 = self.residuals(theta).iter().map(|r| r * r).sum();
        if c.is_finite() {
            c
        } else {
            f64::INFINITY
        }
    }

    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = self.params(theta);
        let dim = self.dim();
        let mut j = DMatrix::zeros(self.n.len(), dim);
        for (i, (&n, &w)) in self.n.iter().zip(self.w).enumerate() {
            let frac = p.effective_fraction(w);
            let x = n * frac;
            let term = p.beta * x.powf(-p.alpha);
            let pred = p.e + term;
            j[(i, 0)] = 1.0 / pred;
            j[(i, 1)] = term / pred;
            j[(i, 2)] = -term * x.ln() / pred;
            if dim == 4 {
                j[(i, 3)] = -p.alpha * term * (1.0 - w) / frac / pred;
            }
        }
        j
    }
}

struct Outcome {
    theta: Vec<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

/// Box-projected Levenberg-Marquardt.
fn levenberg_marquardt(problem: &Problem<'_>, start: Vec<f64>, max_iterations: usize) -> Outcome {
    let dim = problem.dim();
    let mut theta = start;
    problem.project(&mut theta);
    let mut cost = problem.cost(&theta);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        if cost < 1e-28 {
            converged = true;
            break;
        }
        let r = DVector::from_vec(problem.residuals(&theta));
        let j = problem.jacobian(&theta);
        let jtj = j.transpose() * &j;
        let grad = j.transpose() * &r;

        // Variables held at a bound by a gradient pointing outward are frozen
        // for this step; the rest take a damped Gauss-Newton step.
        let at_lower = |k: usize| match k {
            0 => theta[0] <= 0.0,
            2 => theta[2] <= ALPHA_MIN,
            3 => theta[3] <= 0.0,
            _ => false,
        };
        let at_upper = |k: usize| match k {
            2 => theta[2] >= ALPHA_MAX,
            3 => theta[3] >= 1.0,
            _ => false,
        };
        let free: Vec<usize> =
            (0..dim).filter(|&k| !(at_lower(k) && grad[k] > 0.0 || at_upper(k) && grad[k] < 0.0)).collect();
        if free.iter().all(|&k| grad[k].abs() < 1e-15) {
            converged = true;
            break;
        }
        let m = free.len();
        let jtj_free = DMatrix::from_fn(m, m, |a, b| jtj[(free[a], free[b])]);
        let grad_free = DVector::from_fn(m, |a, _| grad[free[a]]);

        let mut improved = false;
        while lambda < 1e20 {
            let mut a = jtj_free.clone();
            for k in 0..m {
                a[(k, k)] += lambda * jtj_free[(k, k)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let reduced = chol.solve(&(-&grad_free));
            let mut step = vec![0.0; dim];
            for (a, &k) in free.iter().enumerate() {
                step[k] = reduced[a];
            }
            let mut candidate: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
            problem.project(&mut candidate);
            let new_cost = problem.cost(&candidate);
            if new_cost < cost {
                let step_norm =
                    candidate.iter().zip(&theta).map(|(a, b)| (a - b).abs() / (1.0 + b.abs())).fold(0.0, f64::max);
                let rel_drop = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                theta = candidate;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if step_norm < 1e-12 || rel_drop < 1e-14 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // No descent direction left at any damping: a (local) minimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Outcome { theta, cost, iterations, converged }
}

fn check_grid(lang: &str, obs: &[&LossObservation], need_weights: bool) -> Result<(), ScalingError> {
    if obs.len() < 4 {
        return Err(ScalingError::TooFewObservations { lang: lang.to_string(), got: obs.len() });
    }
    let distinct = |f: fn(&LossObservation) -> f64| {
        let mut v: Vec<f64> = obs.iter().map(|o| f(o)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(|o| o.params) < 2 {
        return Err(ScalingError::DegenerateGrid { lang: lang.to_string(), reason: "a single model size".into() });
    }
    if need_weights && distinct(|o| o.weight) < 2 {
        return Err(ScalingError::DegenerateGrid { lang: lang.to_string(), reason: "a single language weight".into() });
    }
    Ok(())
}

/// Fixed start points: every combination of two irreducible-loss guesses,
/// two exponents and two transfer coefficients, with `beta` matched to the
/// data in log space.
fn start_points(problem: &Problem<'_>, min_loss: f64) -> Vec<Vec<f64>> {
    let mut starts = Vec::with_capacity(8);
    for &e0 in &[0.0, 0.5 * min_loss] {
        for &alpha0 in &[0.1, 0.5] {
            for &c0 in &[0.25, 0.75] {
                let c = problem.fixed_c.unwrap_or(c0);
                let mut acc = 0.0;
                for ((&n, &w), &ll) in problem.n.iter().zip(problem.w).zip(&problem.log_loss) {
                    let excess = (ll.exp() - e0).max(1e-12 * ll.exp());
                    acc += excess.ln() + alpha0 * (n * (w + c * (1.0 - w))).ln();
                }
                let log_beta = acc / problem.n.len() as f64;
                let mut theta = vec![e0, log_beta, alpha0];
                if problem.fixed_c.is_none() {
                    theta.push(c0);
                }
                starts.push(theta);
            }
        }
    }
    starts
}

/// Fits the joint law for `lang` by least squares on log loss, keeping the
/// best of eight fixed starts (ties go to the earlier start). If no start
/// converges within the iteration cap the best point is still returned,
/// flagged in the diagnostics.
pub fn fit_joint_law(
    observations: &[LossObservation],
    lang: &str,
    options: &FitOptions,
) -> Result<LanguageFit, ScalingError> {
    let obs: Vec<&LossObservation> = observations.iter().filter(|o| o.lang == lang).collect();
    for o in &obs {
        o.validate()?;
    }
    if let Some(c) = options.fixed_c {
        if !(0.0..=1.0).contains(&c) {
            return Err(ScalingError::InvalidObservation(format!("fixed c {c} outside [0, 1]")));
        }
    }
    check_grid(lang, &obs, options.fixed_c.is_none())?;
    let weights: Vec<f64> = obs.iter().map(|o| o.weight).collect();
    let problem = Problem {
        n: obs.iter().map(|o| o.params / options.param_unit).collect(),
        w: &weights,
        log_loss: obs.iter().map(|o| o.loss.ln()).collect(),
        fixed_c: options.fixed_c,
    };
    let min_loss = obs.iter().map(|o| o.loss).fold(f64::INFINITY, f64::min);

    let mut best: Option<(usize, Outcome)> = None;
    for (i, start) in start_points(&problem, min_loss).into_iter().enumerate() {
        let outcome = levenberg_marquardt(&problem, start, options.max_iterations);
        let better = match &best {
            None => true,
            Some((_, b)) => outcome.cost < b.cost,
        };
        if better {
            best = Some((i, outcome));
        }
    }
    let (start, outcome) = best.expect("at least one start point");
    if !outcome.converged {
        log::warn!("scaling fit for {lang:?} hit the iteration cap; returning best point");
    }
    let loss_unit = obs.first().map(|o| o.unit.clone()).unwrap_or_default();
    Ok(LanguageFit {
        lang: lang.to_string(),
        params: problem.params(&outcome.theta),
        param_unit: options.param_unit,
        diagnostics: FitDiagnostics {
            rmse: (outcome.cost / obs.len() as f64).sqrt(),
            iterations: outcome.iterations,
            converged: outcome.converged,
            start,
            observations: obs.len(),
        },
        loss_unit,
    })
}

/// Fits every language present in `observations`, independently.
pub fn fit_all(observations: &[LossObservation], options: &FitOptions) -> Result<ScalingFit, ScalingError> {
    let mut langs: Vec<&str> = observations.iter().map(|o| o.lang.as_str()).collect();
    langs.sort_unstable();
    langs.dedup();
    let mut languages = BTreeMap::new();
    for lang in langs {
        languages.insert(lang.to_string(), fit_joint_law(observations, lang, options)?);
    }
    Ok(ScalingFit { weight_convention: WEIGHT_CONVENTION.to_string(), languages })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    /// Weight of the varied language; the other language gets `1 - weight`.
    pub weight: f64,
    pub loss_other: f64,
    pub loss_varied: f64,
    pub capacity_other: f64,
    pub capacity_varied: f64,
}

/// Losses and effective capacities of two languages as the weight of
/// `varied` sweeps `grid` at model size `n`.
pub fn tradeoff_curve(
    other: &LanguageFit,
    varied: &LanguageFit,
    grid: &[f64],
    n: f64,
) -> Result<Vec<TradeoffRow>, ScalingError> {
    grid.iter()
        .map(|&w| {
            if !(0.0..=1.0).contains(&w) {
                return Err(ScalingError::GridOutOfRange(w));
            }
            Ok(TradeoffRow {
                weight: w,
                loss_other: predict_loss(other, n, 1.0 - w),
                loss_varied: predict_loss(varied, n, w),
                capacity_other: effective_capacity(other, 1.0 - w),
                capacity_varied: effective_capacity(varied, w),
            })
        })
        .collect()
}

/// Evenly spaced grid over [0, 1] with `steps` intervals.
pub fn weight_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

pub fn write_tradeoff_csv<W: Write>(
    out: W,
    other: &str,
    varied: &str,
    rows: &[TradeoffRow],
) -> Result<(), ScalingError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        format!("weight_{varied}"),
        format!("loss_{other}"),
        format!("loss_{varied}"),
        format!("capacity_{other}"),
        format!("capacity_{varied}"),
    ])?;
    for r in rows {
        w.write_record([
            format!("{:.4}", r.weight),
            format!("{:.6}", r.loss_other),
            format!("{:.6}", r.loss_varied),
            format!("{:.6}", r.capacity_other),
            format!("{:.6}", r.capacity_varied),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit_with(params: LawParams) -> LanguageFit {
        LanguageFit {
            lang: "fr".into(),
            params,
            param_unit: DEFAULT_PARAM_UNIT,
            diagnostics: FitDiagnostics { rmse: 0.0, iterations: 0, converged: true, start: 0, observations: 0 },
            loss_unit: String::new(),
        }
    }

    const SIZES: [f64; 3] = [100.7e6, 341.5e6, 1214.3e6];

    fn grid_obs(p: LawParams, weights: &[f64]) -> Vec<LossObservation> {
        let truth = fit_with(p);
        let mut obs = Vec::new();
        for &n in &SIZES {
            for &w in weights {
                obs.push(LossObservation::new("fr", n, w, truth.predict_loss(n, w)));
            }
        }
        obs
    }

    #[test]
    fn capacity_examples() {
        let f = fit_with(LawParams { e: 1.7, beta: 400.0, alpha: 0.3, c: 0.64 });
        assert_eq!(f.effective_capacity(1.0), 1.0);
        assert!((f.effective_capacity(0.5) - 0.82).abs() < 1e-12);
        assert!((f.effective_capacity(0.0) - 0.64).abs() < 1e-12);
    }

    #[test]
    fn loss_ordering_and_asymptote() {
        let f = fit_with(LawParams { e: 1.7, beta: 400.0, alpha: 0.3, c: 0.6 });
        assert!(f.predict_loss(1e9, 1.0) <= f.predict_loss(1e9, 0.5));
        assert!((f.predict_loss(1e30, 0.5) - 1.7).abs() < 1e-3);
    }

    #[test]
    fn monolingual_fit_with_fixed_c() {
        let truth = LawParams { e: 2.0, beta: 50.0, alpha: 0.4, c: 1.0 };
        let truth_fit = fit_with(truth);
        let obs: Vec<_> = [50e6, 100e6, 200e6, 400e6, 800e6]
            .iter()
            .map(|&n| LossObservation::new("en", n, 1.0, truth_fit.predict_loss(n, 1.0)))
            .collect();
        assert!(matches!(fit_joint_law(&obs, "en", &FitOptions::default()), Err(ScalingError::DegenerateGrid { .. })));
        let options = FitOptions { fixed_c: Some(1.0), ..Default::default() };
        let fit = fit_joint_law(&obs, "en", &options).unwrap();
        assert!((fit.params.e - 2.0).abs() < 1e-6, "{:?}", fit.params);
        assert!((fit.params.alpha - 0.4).abs() < 1e-6);
        assert_eq!(fit.params.c, 1.0);
    }

    #[test]
    fn input_validation() {
        let p = LawParams { e: 1.7, beta: 400.0, alpha: 0.3, c: 0.6 };
        let few = grid_obs(p, &[0.5])[..3].to_vec();
        assert!(matches!(
            fit_joint_law(&few, "fr", &FitOptions::default()),
            Err(ScalingError::TooFewObservations { got: 3, .. })
        ));
        let single_size: Vec<_> = (0..4).map(|i| LossObservation::new("fr", 1e8, 0.2 * i as f64, 3.0)).collect();
        assert!(matches!(
            fit_joint_law(&single_size, "fr", &FitOptions::default()),
            Err(ScalingError::DegenerateGrid { .. })
        ));
        let mut bad = grid_obs(p, &[0.2, 0.4]);
        bad[0].weight = 1.5;
        assert!(fit_joint_law(&bad, "fr", &FitOptions::default()).is_err());
        assert!(matches!(
            tradeoff_curve(&fit_with(p), &fit_with(p), &[1.2], 1e9),
            Err(ScalingError::GridOutOfRange(_))
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let p = LawParams { e: 1.7, beta: 400.0, alpha: 0.3, c: 0.6 };
        let mut obs = grid_obs(p, &[0.2, 0.4, 0.6]);
        for (i, o) in obs.iter_mut().enumerate() {
            o.loss *= 1.0 + 0.003 * ((i * 7 % 5) as f64 - 2.0);
        }
        let a = fit_joint_law(&obs, "fr", &FitOptions::default()).unwrap();
        let b = fit_joint_law(&obs, "fr", &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.diagnostics.rmse.to_bits(), b.diagnostics.rmse.to_bits());
    }

    #[test]
    fn csv_observations() {
        let text = "lang,params,weight,loss,unit\nfr,100.7e6,0.5,3.1,nats\nen,341500000,0.5,2.9,nats\n";
        let obs = read_observations_csv(text.as_bytes()).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].params, 100.7e6);
        assert_eq!(obs[1].unit, "nats");
        let no_unit = "lang,params,weight,loss\nfr,1e8,0.5,3.0\n";
        assert_eq!(read_observations_csv(no_unit.as_bytes()).unwrap()[0].unit, "");
        assert!(read_observations_csv("lang,params,weight,loss\nfr,1e8,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn tradeoff_csv_header() {
        let f = fit_with(LawParams { e: 1.0, beta: 10.0, alpha: 0.3, c: 0.5 });
        let rows = tradeoff_curve(&f, &f, &[0.0, 1.0], 1e9).unwrap();
        let mut buf = Vec::new();
        write_tradeoff_csv(&mut buf, "en", "fr", &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("weight_fr,loss_en,loss_fr,capacity_en,capacity_fr\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
