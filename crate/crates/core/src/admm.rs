//! Unrolled ADMM for one specular factor.
//!
//! Each step applies, in order,
//!
//! ```text
//! E ← soft(X − A − Y/μ, α)
//! A ← prox_β(X − E − Y/μ)
//! Y ← Y + μ (A + E − X)
//! ```
//!
//! and a solve always runs exactly `T` steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{leading_triplet, ChannelMatrix};
use crate::prox::{low_rank_prox, shrink, LowRankProx};
use crate::scalar::Scalar;

/// Smallest admissible dual step size.
pub const MU_FLOOR: f64 = 1e-6;

/// Learned scalars of one factor, one entry per unrolled step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
}

impl FactorParams {
    pub fn constant(t_iters: usize, alpha: f64, beta: f64, mu: f64) -> Self {
        FactorParams {
            alpha: vec![alpha; t_iters],
            beta: vec![beta; t_iters],
            mu: vec![mu; t_iters],
        }
    }

    pub fn t_iters(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.alpha.len();
        if self.beta.len() != t || self.mu.len() != t {
            return Err(Error::InvalidParameter(format!(
                "alpha/beta/mu lengths differ: {}/{}/{}",
                t,
                self.beta.len(),
                self.mu.len()
            )));
        }
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {x}"
                )));
            }
        }
        if let Some(x) = self.mu.iter().find(|x| !x.is_finite() || **x <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mu must be finite and > 0, got {x}"
            )));
        }
        Ok(())
    }

    /// Projects onto the valid set: α, β ≥ 0 and μ ≥ [`MU_FLOOR`].
    pub fn clamp(&mut self) {
        self.alpha.iter_mut().for_each(|a| *a = a.max(0.0));
        self.beta.iter_mut().for_each(|b| *b = b.max(0.0));
        self.mu.iter_mut().for_each(|m| *m = m.max(MU_FLOOR));
    }
}

/// Normalization of the initial dual variable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualInit {
    /// `Y₀ = X / ‖X‖₂` with the spectral norm.
    #[default]
    Spectral,
    /// `Y₀ = X / ‖X‖_F`.
    Frobenius,
}

/// Operator choices that are not learned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverOptions {
    #[serde(default)]
    pub dual_init: DualInit,
    #[serde(default)]
    pub low_rank: LowRankProx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState<T> {
    pub e: ChannelMatrix<T>,
    pub a: ChannelMatrix<T>,
    pub y: ChannelMatrix<T>,
    pub t: usize,
}

/// `E₀ = 0`, `A₀ = X`, `Y₀ = X/‖X‖₂` (zero for an all-zero `X`).
pub fn init_state<T: Scalar>(x: &ChannelMatrix<T>) -> SolverState<T> {
    init_state_with(x, DualInit::Spectral).expect("spectral norm of a finite matrix")
}

pub fn init_state_with<T: Scalar>(x: &ChannelMatrix<T>, dual: DualInit) -> Result<SolverState<T>> {
    let norm = dual_norm(x, dual)?;
    let y = if norm > 0.0 {
        x.scale(T::of(1.0 / norm))
    } else {
        ChannelMatrix::zeros(x.rows(), x.cols())
    };
    Ok(SolverState {
        e: ChannelMatrix::zeros(x.rows(), x.cols()),
        a: x.clone(),
        y,
        t: 0,
    })
}

pub(crate) fn dual_norm<T: Scalar>(x: &ChannelMatrix<T>, dual: DualInit) -> Result<f64> {
    if x.is_empty() {
        return Ok(0.0);
    }
    match dual {
        DualInit::Spectral => Ok(leading_triplet(x)?.sigma),
        DualInit::Frobenius => Ok(x.frobenius_norm()),
    }
}

fn ensure_finite<T: Scalar>(m: &ChannelMatrix<T>, what: &str, t: usize) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} update at step {}", t + 1)))
    }
}

/// `x − a − y/μ`
fn residual_arg<T: Scalar>(
    x: &ChannelMatrix<T>,
    a: &ChannelMatrix<T>,
    y: &ChannelMatrix<T>,
    inv_mu: T,
) -> ChannelMatrix<T> {
    let mut out = x.sub(a);
    for (o, &yv) in out.data_mut().iter_mut().zip(y.data()) {
        *o = *o - yv * inv_mu;
    }
    out
}

/// One ADMM iteration with the nuclear-norm prox.
pub fn admm_step<T: Scalar>(
    state: &SolverState<T>,
    x: &ChannelMatrix<T>,
    alpha: f64,
    beta: f64,
    mu: f64,
) -> Result<SolverState<T>> {
    admm_step_with(state, x, alpha, beta, mu, LowRankProx::Nuclear)
}

pub fn admm_step_with<T: Scalar>(
    state: &SolverState<T>,
    x: &ChannelMatrix<T>,
    alpha: f64,
    beta: f64,
    mu: f64,
    low_rank: LowRankProx,
) -> Result<SolverState<T>> {
    let e = e_update(state, x, alpha, mu)?;
    let a = a_update(state, x, &e, beta, mu, low_rank)?;
    let y = y_update(state, x, &e, &a, mu)?;
    Ok(SolverState {
        e,
        a,
        y,
        t: state.t + 1,
    })
}

fn check_step(
    state_shape: (usize, usize),
    x: &ChannelMatrix<impl Scalar>,
    alpha: f64,
    mu: f64,
) -> Result<()> {
    if state_shape != x.shape() {
        return Err(Error::ShapeMismatch {
            left: (state_shape.0, state_shape.1, 1),
            right: (x.rows(), x.cols(), 1),
        });
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!("mu must be > 0, got {mu}")));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::NegativeThreshold(alpha));
    }
    Ok(())
}

fn e_update<T: Scalar>(
    state: &SolverState<T>,
    x: &ChannelMatrix<T>,
    alpha: f64,
    mu: f64,
) -> Result<ChannelMatrix<T>> {
    check_step(state.a.shape(), x, alpha, mu)?;
    let mut p = residual_arg(x, &state.a, &state.y, T::of(1.0 / mu));
    let al = T::of(alpha);
    p.data_mut().iter_mut().for_each(|v| *v = shrink(*v, al));
    ensure_finite(&p, "E", state.t)?;
    Ok(p)
}

fn a_update<T: Scalar>(
    state: &SolverState<T>,
    x: &ChannelMatrix<T>,
    e: &ChannelMatrix<T>,
    beta: f64,
    mu: f64,
    low_rank: LowRankProx,
) -> Result<ChannelMatrix<T>> {
    let q = residual_arg(x, e, &state.y, T::of(1.0 / mu));
    ensure_finite(&q, "A", state.t)?;
    let a = low_rank_prox(&q, T::of(beta), low_rank).map_err(|err| match err {
        Error::NonFinite(_) => Error::NonFinite(format!("A update at step {}", state.t + 1)),
        other => other,
    })?;
    ensure_finite(&a, "A", state.t)?;
    Ok(a)
}

fn y_update<T: Scalar>(
    state: &SolverState<T>,
    x: &ChannelMatrix<T>,
    e: &ChannelMatrix<T>,
    a: &ChannelMatrix<T>,
    mu: f64,
) -> Result<ChannelMatrix<T>> {
    let m = T::of(mu);
    let mut y = state.y.clone();
    for (((yv, &av), &ev), &xv) in y
        .data_mut()
        .iter_mut()
        .zip(a.data())
        .zip(e.data())
        .zip(x.data())
    {
        *yv = *yv + m * (av + ev - xv);
    }
    ensure_finite(&y, "Y", state.t)?;
    Ok(y)
}

/// Runs `init_state` and then `T` steps; returns the final `(E, A)`.
pub fn solve_factor<T: Scalar>(
    x: &ChannelMatrix<T>,
    params: &FactorParams,
) -> Result<(ChannelMatrix<T>, ChannelMatrix<T>)> {
    solve_factor_with(x, params, SolverOptions::default())
}

pub fn solve_factor_with<T: Scalar>(
    x: &ChannelMatrix<T>,
    params: &FactorParams,
    opts: SolverOptions,
) -> Result<(ChannelMatrix<T>, ChannelMatrix<T>)> {
    params.validate()?;
    let mut state = init_state_with(x, opts.dual_init)?;
    for t in 0..params.t_iters() {
        state = admm_step_with(
            &state,
            x,
            params.alpha[t],
            params.beta[t],
            params.mu[t],
            opts.low_rank,
        )?;
    }
    Ok((state.e, state.a))
}

/// The specular output of [`solve_factor_with`] without the final low-rank
/// update, which cannot influence it.
pub(crate) fn solve_specular<T: Scalar>(
    x: &ChannelMatrix<T>,
    params: &FactorParams,
    opts: SolverOptions,
) -> Result<ChannelMatrix<T>> {
    params.validate()?;
    let t_iters = params.t_iters();
    let mut state = init_state_with(x, opts.dual_init)?;
    if t_iters == 0 {
        return Ok(state.e);
    }
    for t in 0..t_iters - 1 {
        state = admm_step_with(
            &state,
            x,
            params.alpha[t],
            params.beta[t],
            params.mu[t],
            opts.low_rank,
        )?;
    }
    let last = t_iters - 1;
    e_update(&state, x, params.alpha[last], params.mu[last])
}
