//! Noise schedule, forward corruption and reverse sampling over vertex sets.
//!
//! Timesteps are 1-based: `t = 0` is the clean signal and `ᾱ_0 = 1`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 10;
/// Bound applied to predicted clean vertices inside the sampler.
pub const X0_CLIP: f64 = 1.5;

/// Per-timestep `β_t`, `α_t` and cumulative `ᾱ_t` tables.
#[derive(Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    // alpha_bars[0] = 1 for the clean state.
    alpha_bars: Vec<f64>,
    reads: AtomicU64,
}

impl Clone for NoiseSchedule {
    fn clone(&self) -> Self {
        Self {
            betas: self.betas.clone(),
            alphas: self.alphas.clone(),
            alpha_bars: self.alpha_bars.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

/// `ᾱ_t` of the cosine schedule before clipping.
pub fn cosine_alpha_bar(t: usize, timesteps: usize) -> f64 {
    let f = |t: f64| {
        let c = ((t / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
            * std::f64::consts::FRAC_PI_2)
            .cos();
        c * c
    };
    f(t as f64) / f(0.0)
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!(
                "cosine schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        let betas = (1..=timesteps)
            .map(|t| {
                let ratio = cosine_alpha_bar(t, timesteps) / cosine_alpha_bar(t - 1, timesteps);
                (1.0 - ratio).min(MAX_BETA)
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds tables from explicit `β_1..β_T`, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            alpha_bars.push(alpha_bars.last().unwrap() * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            reads: AtomicU64::new(0),
        })
    }

    /// Number of diffusion timesteps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.timesteps() {
            return Err(Error::Timestep {
                t,
                min,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    fn touch(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    /// Number of table lookups served so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.touch();
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.touch();
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.touch();
        self.alpha_bars[t]
    }
}

/// Vertex coordinates at a diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSet {
    pub coords: Vec<[f64; 3]>,
    pub t: usize,
}

impl VertexSet {
    pub fn clean(coords: Vec<[f64; 3]>) -> Self {
        Self { coords, t: 0 }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn combine(a: f64, x: &[[f64; 3]], b: f64, y: &[[f64; 3]]) -> Vec<[f64; 3]> {
    x.iter()
        .zip(y)
        .map(|(p, q)| [a * p[0] + b * q[0], a * p[1] + b * q[1], a * p[2] + b * q[2]])
        .collect()
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a, 3], &[b, 3]));
    }
    Ok(())
}

/// Samples `x_t ~ q(x_t | x_0)` given the Gaussian draw `eps`.
pub fn q_sample(
    x0: &VertexSet,
    t: usize,
    eps: &[[f64; 3]],
    sched: &NoiseSchedule,
) -> Result<VertexSet> {
    sched.check(t, 1)?;
    check_len("q_sample", x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    Ok(VertexSet {
        coords: combine(ab.sqrt(), &x0.coords, (1.0 - ab).sqrt(), eps),
        t,
    })
}

/// One Markov step `x_{t-1} → x_t` of the forward chain.
pub fn forward_chain_step(
    x_prev: &VertexSet,
    t: usize,
    eps: &[[f64; 3]],
    sched: &NoiseSchedule,
) -> Result<VertexSet> {
    sched.check(t, 1)?;
    if x_prev.t + 1 != t {
        return Err(Error::State(format!(
            "forward step to t={t} expects input at t={}, got t={}",
            t - 1,
            x_prev.t
        )));
    }
    check_len("forward_chain_step", x_prev.len(), eps.len())?;
    let beta = sched.beta(t);
    Ok(VertexSet {
        coords: combine((1.0 - beta).sqrt(), &x_prev.coords, beta.sqrt(), eps),
        t,
    })
}

/// Mean and variance of `q(x_{t-1} | x_t, x̂_0)`.
pub fn posterior(
    x_t: &VertexSet,
    x0_hat: &[[f64; 3]],
    sched: &NoiseSchedule,
) -> Result<(Vec<[f64; 3]>, f64)> {
    let t = x_t.t;
    if t == 0 {
        return Err(Error::State("cannot step below the clean state t=0".into()));
    }
    sched.check(t, 1)?;
    check_len("posterior", x_t.len(), x0_hat.len())?;
    let (beta, alpha) = (sched.beta(t), sched.alpha(t));
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    Ok((combine(c0, x0_hat, ct, &x_t.coords), var))
}

/// Ancestral DDPM step; no noise is added on the final step `t = 1`.
pub fn ddpm_posterior_step(
    x_t: &VertexSet,
    x0_hat: &[[f64; 3]],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<VertexSet> {
    let (mut mean, var) = posterior(x_t, x0_hat, sched)?;
    if x_t.t > 1 {
        let sd = var.sqrt();
        for p in &mut mean {
            for v in p.iter_mut() {
                *v += sd * rng.normal();
            }
        }
    }
    Ok(VertexSet {
        coords: mean,
        t: x_t.t - 1,
    })
}

/// Generalized DDIM step from `x_t.t` to `t_prev`; `eta = 0` is deterministic.
pub fn ddim_step(
    x_t: &VertexSet,
    x0_hat: &[[f64; 3]],
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<VertexSet> {
    let t = x_t.t;
    if t_prev >= t {
        return Err(Error::State(format!(
            "DDIM step must descend: t_prev={t_prev} >= t={t}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must be in [0, 1], got {eta}")));
    }
    sched.check(t, 1)?;
    check_len("ddim_step", x_t.len(), x0_hat.len())?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let eps_hat = eps_from_x0(&x_t.coords, x0_hat, ab);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut coords = combine(ab_prev.sqrt(), x0_hat, dir, &eps_hat);
    if eta > 0.0 && sigma > 0.0 {
        for p in &mut coords {
            for v in p.iter_mut() {
                *v += sigma * rng.normal();
            }
        }
    }
    Ok(VertexSet { coords, t: t_prev })
}

/// Noise implied by a clean prediction: `(x_t − √ᾱ·x̂_0) / √(1−ᾱ)`.
pub fn eps_from_x0(x_t: &[[f64; 3]], x0_hat: &[[f64; 3]], alpha_bar: f64) -> Vec<[f64; 3]> {
    let k = 1.0 / (1.0 - alpha_bar).sqrt();
    combine(k, x_t, -alpha_bar.sqrt() * k, x0_hat)
}

/// Clean signal implied by a noise prediction.
pub fn x0_from_eps(x_t: &[[f64; 3]], eps_hat: &[[f64; 3]], alpha_bar: f64) -> Vec<[f64; 3]> {
    let k = 1.0 / alpha_bar.sqrt();
    combine(k, x_t, -(1.0 - alpha_bar).sqrt() * k, eps_hat)
}

/// What the denoiser network outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    /// The clean vertices `x̂_0` (default).
    #[default]
    CleanSignal,
    /// The added noise `ε̂`.
    Noise,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CleanSignal => "x0",
            Self::Noise => "eps",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Self::CleanSignal),
            "eps" => Ok(Self::Noise),
            _ => Err(Error::Config(format!("unknown objective `{s}` (expected x0 or eps)"))),
        }
    }
}

/// Descending timesteps `T = τ_S > … > τ_0 = 0` with `τ_i = ⌊i·T/S⌋`.
pub fn timestep_subsequence(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Config(format!(
            "inference steps must be in 1..={timesteps}, got {steps}"
        )));
    }
    Ok((0..=steps).rev().map(|i| i * timesteps / steps).collect())
}

/// Anything that maps a noisy vertex set to a clean prediction.
pub trait Denoiser {
    fn predict_x0(&self, x_t: &VertexSet) -> Result<Vec<[f64; 3]>>;
}

impl<F> Denoiser for F
where
    F: Fn(&VertexSet) -> Result<Vec<[f64; 3]>>,
{
    fn predict_x0(&self, x_t: &VertexSet) -> Result<Vec<[f64; 3]>> {
        self(x_t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    /// Clamp for predicted `x̂_0`; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_INFERENCE_STEPS,
            eta: 0.0,
            clip: Some(X0_CLIP),
        }
    }
}

/// Runs the reverse process from `x_T ~ N(0, I)` and returns the final `x̂_0`.
pub fn sample_loop(
    model: &impl Denoiser,
    vertex_count: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<VertexSet> {
    let taus = timestep_subsequence(sched.timesteps(), cfg.steps)?;
    let mut x = VertexSet {
        coords: rng.normal_points(vertex_count),
        t: taus[0],
    };
    for pair in taus.windows(2) {
        let mut x0_hat = model.predict_x0(&x)?;
        check_len("sample_loop", x.len(), x0_hat.len())?;
        if let Some(c) = cfg.clip {
            for p in &mut x0_hat {
                for v in p.iter_mut() {
                    *v = v.clamp(-c, c);
                }
            }
        }
        x = ddim_step(&x, &x0_hat, pair[1], sched, cfg.eta, rng)?;
    }
    Ok(x)
}
