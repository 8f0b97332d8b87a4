//! State-of-charge estimation from voltage and current readings.
//!
//! Everything here is in hours, amperes and ampere-hours. The simulator side converts to
//! the minute-based battery model at the boundary.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::battery_model::{evolve, BatteryParams, ModelError};
use crate::load_profiles::{seeded_rng, LoadProfile, ProfileError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SocError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("time must be positive, got {0}")]
    NonpositiveT(f64),
    #[error("need at least 3 records with distinct currents")]
    Underdetermined,
    #[error("capacity fit diverged (residual {residual})")]
    FitDiverged { residual: f64 },
    #[error("consumed fraction {x} at or beyond the voltage pole")]
    XAtPole { x: f64 },
    #[error("voltage {v_adj} V has no consistent consumed fraction")]
    NegativeDiscriminant { v_adj: f64 },
    #[error("nominal discharge time did not converge")]
    NoConvergence,
    #[error("{have} samples since first load, need {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("samples out of time order at t = {t}")]
    Unordered { t: f64 },
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Capacity model constants: C in Ah, k in 1/h, c the available fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityParams {
    capacity: f64,
    k: f64,
    c: f64,
}

impl CapacityParams {
    pub fn new(capacity: f64, k: f64, c: f64) -> Result<Self, SocError> {
        if !(capacity.is_finite() && capacity > 0.0 && k.is_finite() && k > 0.0 && c > 0.0 && c < 1.0) {
            return Err(SocError::InvalidParams(format!("C={capacity}, k={k}, c={c}")));
        }
        Ok(Self { capacity, k, c })
    }

    pub fn from_k_prime(capacity: f64, k_prime: f64, c: f64) -> Result<Self, SocError> {
        Self::new(capacity, k_prime * c * (1.0 - c), c)
    }

    /// The lead-acid cells of the reference hardware.
    pub fn lead_acid() -> Self {
        Self { capacity: 1.372, k: 0.1967, c: 0.387 }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn fraction_c(&self) -> f64 {
        self.c
    }

    pub fn k_prime(&self) -> f64 {
        self.k / (self.c * (1.0 - self.c))
    }

    /// The same cell in the minute-based simulation units.
    pub fn to_battery_params(&self) -> Result<BatteryParams, ModelError> {
        BatteryParams::new(self.capacity * 60.0, self.c, self.k_prime() / 60.0)
    }
}

/// V = V_EMF + A·X + B·X/(D − X), X the consumed fraction of q_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageParams {
    pub v_emf: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl VoltageParams {
    pub fn new(v_emf: f64, a: f64, b: f64, d: f64) -> Result<Self, SocError> {
        if !(v_emf.is_finite() && a.is_finite() && a != 0.0 && b.is_finite() && d.is_finite() && d > 1.0) {
            return Err(SocError::InvalidParams(format!("V_EMF={v_emf}, A={a}, B={b}, D={d}")));
        }
        Ok(Self { v_emf, a, b, d })
    }

    pub fn lead_acid() -> Self {
        Self { v_emf: 6.5, a: -0.194, b: -2.22e-3, d: 1.05 }
    }
}

/// One reading: time in hours, loaded terminal voltage, current drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSample {
    pub t: f64,
    pub e_obs: f64,
    pub i_obs: f64,
}

/// Charge deliverable by a constant-current discharge lasting `t` hours.
pub fn qmax(params: &CapacityParams, t: f64) -> Result<f64, SocError> {
    if !(t > 0.0) {
        return Err(SocError::NonpositiveT(t));
    }
    let (cap, c, kp) = (params.capacity, params.c, params.k_prime());
    // 1 − e^{−k′T} loses digits for tiny T; exp_m1 keeps them.
    let one_minus_e = -(-kp * t).exp_m1();
    Ok(cap * kp * c * t / (one_minus_e + c * (kp * t - one_minus_e)))
}

/// Hours until a fresh cell dies under constant `current` (solves q_max(T) = I·T).
pub fn constant_current_lifetime(params: &CapacityParams, current: f64) -> Result<f64, SocError> {
    if !(current > 0.0 && current.is_finite()) {
        return Err(SocError::InvalidParams(format!("current {current}")));
    }
    let (cap, c, kp) = (params.capacity, params.c, params.k_prime());
    // I·(1 − e^{−k′T} + c(k′T − 1 + e^{−k′T})) − C·k′·c is increasing in T.
    let g = |t: f64| {
        let ome = -(-kp * t).exp_m1();
        current * (ome + c * (kp * t - ome)) - cap * kp * c
    };
    let mut hi = cap / current;
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityFit {
    pub params: CapacityParams,
    /// Sum of squared charge residuals, Ah².
    pub residual: f64,
}

/// Search runs over (ln C, ln k′, logit c) so the bounds hold automatically.
fn decode(p: &[f64]) -> Option<CapacityParams> {
    let c = 1.0 / (1.0 + (-p[2]).exp());
    CapacityParams::from_k_prime(p[0].exp(), p[1].exp(), c).ok()
}

fn encode(cap: f64, k_prime: f64, c: f64) -> Vec<f64> {
    vec![cap.ln(), k_prime.ln(), (c / (1.0 - c)).ln()]
}

fn fit_cost(records: &[(f64, f64)], p: &[f64]) -> f64 {
    let Some(params) = decode(p) else { return f64::INFINITY };
    let sse: f64 = records.iter().map(|&(i, t)| qmax(&params, t).map_or(f64::INFINITY, |q| (i * t - q).powi(2))).sum();
    if sse.is_nan() {
        f64::INFINITY
    } else {
        sse
    }
}

/// Standard Nelder–Mead (reflect 1, expand 2, contract 0.5, shrink 0.5).
fn nelder_mead(f: impl Fn(&[f64]) -> f64, start: &[f64], step: f64, max_iters: usize) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), f(start)));
    for j in 0..n {
        let mut v = start.to_vec();
        v[j] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let towards = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= 1e-15 * best.abs().max(1e-300) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let reflected = towards(&centroid, &simplex[n].0, -1.0);
        let fr = f(&reflected);
        if fr < best {
            let expanded = towards(&centroid, &simplex[n].0, -2.0);
            let fe = f(&expanded);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = if fr < worst {
                towards(&centroid, &reflected, 0.5)
            } else {
                towards(&centroid, &simplex[n].0, 0.5)
            };
            let fc = f(&contracted);
            if fc < fr.min(worst) {
                simplex[n] = (contracted, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let v = towards(&anchor, &entry.0, 0.5);
                    *entry = (v.clone(), f(&v));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Least-squares fit of the capacity curve to (current A, lifetime h) records by
/// Nelder–Mead, started from C = 1.2·max(I·T), k′ = 1, c = 0.3 and restarted until stable.
pub fn fit_capacity(records: &[(f64, f64)]) -> Result<CapacityFit, SocError> {
    let mut currents: Vec<f64> = records.iter().map(|r| r.0).collect();
    currents.sort_by(f64::total_cmp);
    currents.dedup();
    if records.len() < 3 || currents.len() < 3 {
        return Err(SocError::Underdetermined);
    }
    if records.iter().any(|&(i, t)| !(i > 0.0 && t > 0.0 && i.is_finite() && t.is_finite())) {
        return Err(SocError::InvalidParams("records need positive current and time".into()));
    }
    let max_charge = records.iter().map(|&(i, t)| i * t).fold(0.0, f64::max);
    let cost = |p: &[f64]| fit_cost(records, p);
    let mut best = encode(1.2 * max_charge, 1.0, 0.3);
    let mut best_cost = cost(&best);
    for _ in 0..20 {
        let (p, c) = nelder_mead(cost, &best, 0.2, 5000);
        let improved = c < best_cost * (1.0 - 1e-9);
        if c < best_cost {
            best = p;
            best_cost = c;
        }
        if !improved {
            break;
        }
    }
    let params = decode(&best).ok_or(SocError::FitDiverged { residual: best_cost })?;
    // Rejected when the RMS charge error exceeds 5 % of the mean delivered charge.
    let mean_charge = records.iter().map(|&(i, t)| i * t).sum::<f64>() / records.len() as f64;
    let rms = (best_cost / records.len() as f64).sqrt();
    if !best_cost.is_finite() || rms > 0.05 * mean_charge {
        return Err(SocError::FitDiverged { residual: best_cost });
    }
    Ok(CapacityFit { params, residual: best_cost })
}

pub fn voltage_of(vp: &VoltageParams, x: f64) -> Result<f64, SocError> {
    if x >= vp.d {
        return Err(SocError::XAtPole { x });
    }
    Ok(vp.v_emf + vp.a * x + vp.b * x / (vp.d - x))
}

/// Smaller root X of A·X² − (A·D + B + V_adj)·X + D·V_adj = 0, V_adj = V − V_EMF.
pub fn invert_voltage(vp: &VoltageParams, v_adj: f64) -> Result<f64, SocError> {
    let f = (vp.b + vp.a * vp.d + v_adj) / (2.0 * vp.a);
    let prod = vp.d * v_adj / vp.a;
    let disc = f * f - prod;
    if !(disc >= 0.0) {
        return Err(SocError::NegativeDiscriminant { v_adj });
    }
    let root = disc.sqrt();
    // Product-of-roots form avoids cancellation when the small root is near zero.
    Ok(if f > 0.0 { prod / (f + root) } else { f - root })
}

/// Nominal full-discharge time T with q_max(T) = Q/X, i.e. the positive root of
/// (1 − c)(1 − e^{−k′T}) + c·k′·(1 − C·X/Q)·T = 0, by safeguarded Newton from 4 h.
pub fn solve_t_nom(cp: &CapacityParams, x: f64, q: f64) -> Result<f64, SocError> {
    if !(q > 0.0 && x > 0.0 && x <= 1.0) {
        return Err(SocError::InvalidParams(format!("X={x}, Q={q}")));
    }
    let (c, kp) = (cp.c, cp.k_prime());
    let slope = c * kp * (1.0 - cp.capacity * x / q);
    let g = |t: f64| (1.0 - c) * -(-kp * t).exp_m1() + slope * t;
    let dg = |t: f64| (1.0 - c) * kp * (-kp * t).exp() + slope;
    // g is concave with g(0) = 0, so a positive root needs g′(0) > 0 and slope < 0.
    if !(slope < 0.0 && dg(0.0) > 0.0) {
        return Err(SocError::NoConvergence);
    }
    let mut hi = 4.0;
    let mut tries = 0;
    while g(hi) > 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 200 {
            return Err(SocError::NoConvergence);
        }
    }
    // Left end of the bracket: just past the maximum of g.
    let peak = ((1.0 - c) * kp / -slope).ln() / kp;
    let mut lo = peak.max(0.0);
    if lo >= hi || g(lo) <= 0.0 {
        return Err(SocError::NoConvergence);
    }
    let mut t = 4.0f64.clamp(lo, hi);
    for _ in 0..100 {
        let v = g(t);
        if v > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let d = dg(t);
        let mut next = t - v / d;
        if !(next > lo && next < hi) || d == 0.0 {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-10 * t.max(1.0) {
            return Ok(next);
        }
        t = next;
    }
    Err(SocError::NoConvergence)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocConfig {
    /// Rolling-average length for the voltage readings.
    pub window: usize,
    /// Internal resistance, ohms.
    pub r_int: f64,
    /// Consumed fraction above which estimates are marked low-confidence.
    pub knee: f64,
    /// Fix V_EMF from the first full window instead of the voltage parameters.
    pub emf_from_first_window: bool,
}

impl Default for SocConfig {
    fn default() -> Self {
        Self { window: 65, r_int: 0.34, knee: 0.98, emf_from_first_window: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocEstimate {
    pub t: f64,
    /// Total remaining charge, Ah.
    pub gamma: f64,
    /// Height difference between the wells; NaN on fallback.
    pub delta: f64,
    /// Available charge, Ah; NaN on fallback.
    pub available: f64,
    /// Consumed fraction of q_max implied by the estimate.
    pub x: f64,
    pub fallback: bool,
    pub low_confidence: bool,
}

/// Per-battery rolling estimator fed one sample at a time.
#[derive(Debug, Clone)]
pub struct SocEstimator {
    cp: CapacityParams,
    vp: VoltageParams,
    cfg: SocConfig,
    /// (E_obs, Q) pairs since the battery was first loaded.
    window: VecDeque<(f64, f64)>,
    consumed: f64,
    last: Option<SensorSample>,
    loaded: bool,
    v_emf: Option<f64>,
}

impl SocEstimator {
    pub fn new(cp: CapacityParams, vp: VoltageParams, cfg: SocConfig) -> Result<Self, SocError> {
        if cfg.window == 0 || !(cfg.r_int >= 0.0) {
            return Err(SocError::InvalidParams(format!("{cfg:?}")));
        }
        let v_emf = (!cfg.emf_from_first_window).then_some(vp.v_emf);
        Ok(Self { cp, vp, cfg, window: VecDeque::new(), consumed: 0.0, last: None, loaded: false, v_emf })
    }

    /// Charge drawn so far (trapezoidal), Ah.
    pub fn consumed(&self) -> f64 {
        self.consumed
    }

    pub fn push(&mut self, s: SensorSample) -> Result<(), SocError> {
        if let Some(prev) = self.last {
            if s.t < prev.t {
                return Err(SocError::Unordered { t: s.t });
            }
            self.consumed += 0.5 * (prev.i_obs + s.i_obs) * (s.t - prev.t);
        }
        self.last = Some(s);
        self.loaded |= s.i_obs > 0.0;
        if self.loaded {
            self.window.push_back((s.e_obs, self.consumed));
            if self.window.len() > self.cfg.window {
                self.window.pop_front();
            }
        }
        Ok(())
    }

    /// Estimate at the latest sample. A battery that has not delivered charge reports the fresh state.
    pub fn estimate(&mut self) -> Result<SocEstimate, SocError> {
        let Some(now) = self.last else {
            return Err(SocError::InsufficientSamples { have: 0, need: self.cfg.window });
        };
        let (cap, c) = (self.cp.capacity, self.cp.c);
        if self.consumed <= 0.0 {
            return Ok(SocEstimate { t: now.t, gamma: cap, delta: 0.0, available: c * cap, x: 0.0, fallback: false, low_confidence: false });
        }
        if self.window.len() < self.cfg.window {
            return Err(SocError::InsufficientSamples { have: self.window.len(), need: self.cfg.window });
        }
        let n = self.window.len() as f64;
        let v_mean = self.window.iter().map(|w| w.0).sum::<f64>() / n;
        // The coulomb count averaged over the same window refers to the same instant as v_mean.
        let q_mean = self.window.iter().map(|w| w.1).sum::<f64>() / n;
        let v_obs = v_mean + self.cfg.r_int * now.i_obs;
        let v_emf = *self.v_emf.get_or_insert(v_obs);
        let gamma = cap - self.consumed;
        let fallback = |x: f64| SocEstimate {
            t: now.t,
            gamma,
            delta: f64::NAN,
            available: f64::NAN,
            x,
            fallback: true,
            low_confidence: true,
        };
        let x_win = match invert_voltage(&self.vp, v_obs - v_emf) {
            Ok(x) if x > 0.0 && x <= 1.0 && q_mean > 0.0 => x,
            Ok(x) => return Ok(fallback(x)),
            Err(_) => return Ok(fallback(f64::NAN)),
        };
        let q_max = q_mean / x_win;
        let Ok(t_nom) = solve_t_nom(&self.cp, x_win, q_mean) else {
            return Ok(fallback(x_win));
        };
        let i_nom = q_max / t_nom;
        let kp = self.cp.k_prime();
        let elapsed = self.consumed / i_nom;
        let delta = i_nom * -(-kp * elapsed).exp_m1() / (c * kp);
        let available = c * (gamma - (1.0 - c) * delta);
        let x = self.consumed / q_max;
        if !(available >= 0.0) {
            return Ok(fallback(x));
        }
        Ok(SocEstimate { t: now.t, gamma, delta, available, x, fallback: false, low_confidence: x > self.cfg.knee })
    }
}

/// Runs an estimator over `samples` and reports the state at the last one.
pub fn estimate_state(
    samples: &[SensorSample],
    cp: &CapacityParams,
    vp: &VoltageParams,
    cfg: &SocConfig,
) -> Result<SocEstimate, SocError> {
    let mut est = SocEstimator::new(*cp, *vp, *cfg)?;
    for s in samples {
        est.push(*s)?;
    }
    est.estimate()
}

/// Simulator ground truth alongside each generated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub sample: SensorSample,
    pub gamma: f64,
    pub delta: f64,
    pub available: f64,
    pub x: f64,
}

/// Drives the battery model over `profile` (minutes) and emits readings every
/// `sample_period` seconds while the cell is alive and X < 1. X is the consumed charge
/// over q_max at the average current so far, mapped through the voltage model.
pub fn simulate_with_truth(
    cp: &CapacityParams,
    vp: &VoltageParams,
    r_int: f64,
    profile: &LoadProfile,
    noise_sigma: f64,
    sample_period: f64,
    seed: u64,
) -> Result<Vec<TruthSample>, SocError> {
    if !(sample_period > 0.0 && sample_period.is_finite()) {
        return Err(SocError::InvalidParams(format!("sample period {sample_period}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SocError::InvalidParams(format!("noise {noise_sigma}")));
    }
    let bp = cp.to_battery_params()?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| SocError::InvalidParams(e.to_string()))?;
    let mut rng = seeded_rng(seed, 2);
    let end = profile.horizon().unwrap_or(f64::INFINITY);
    let step_min = sample_period / 60.0;
    let mut state = bp.fresh_state();
    let mut t_prev = 0.0;
    let mut out = Vec::new();
    for k in 0u64.. {
        let t = k as f64 * step_min;
        if t >= end {
            break;
        }
        for (a, b, load) in profile.pieces(t_prev, t)? {
            state = evolve(&state, &bp, load, b - a);
        }
        t_prev = t;
        if !state.is_alive(&bp) {
            break;
        }
        let current = profile.current_at(t)?;
        let consumed = (bp.capacity() - state.gamma) / 60.0;
        let hours = t / 60.0;
        let x = if consumed > 0.0 {
            let mean_current = consumed / hours;
            consumed / (mean_current * constant_current_lifetime(cp, mean_current)?)
        } else {
            0.0
        };
        if x >= 1.0 {
            break;
        }
        let mut e_obs = voltage_of(vp, x)? - r_int * current;
        if noise_sigma > 0.0 {
            e_obs += noise.sample(&mut rng);
        }
        out.push(TruthSample {
            sample: SensorSample { t: hours, e_obs, i_obs: current },
            gamma: state.gamma / 60.0,
            delta: state.delta / 60.0,
            available: state.available(&bp) / 60.0,
            x,
        });
    }
    Ok(out)
}

pub fn simulate_sensor_trace(
    cp: &CapacityParams,
    vp: &VoltageParams,
    r_int: f64,
    profile: &LoadProfile,
    noise_sigma: f64,
    sample_period: f64,
    seed: u64,
) -> Result<Vec<SensorSample>, SocError> {
    Ok(simulate_with_truth(cp, vp, r_int, profile, noise_sigma, sample_period, seed)?.into_iter().map(|s| s.sample).collect())
}

/// `t_seconds,E_obs_volts,I_obs_amperes`.
pub fn samples_to_csv(samples: &[SensorSample]) -> String {
    let mut out = String::from("t_seconds,E_obs_volts,I_obs_amperes\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{}", s.t * 3600.0, s.e_obs, s.i_obs);
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Vec<SensorSample>, SocError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("t_seconds") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(SocError::Csv { line: n + 1, msg: format!("expected 3 fields, got {}", fields.len()) });
        }
        let mut v = [0.0; 3];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| SocError::Csv { line: n + 1, msg: format!("bad number '{f}'") })?;
        }
        out.push(SensorSample { t: v[0] / 3600.0, e_obs: v[1], i_obs: v[2] });
    }
    Ok(out)
}

/// `t,gamma,delta,available,fallback` with t in hours.
pub fn estimates_to_csv(estimates: &[SocEstimate]) -> String {
    let mut out = String::from("t,gamma,delta,available,fallback\n");
    for e in estimates {
        let _ = writeln!(out, "{},{},{},{},{}", e.t, e.gamma, e.delta, e.available, e.fallback);
    }
    out
}
