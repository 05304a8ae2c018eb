//! Reverse-mode gradient of the factorization loss with respect to θ.
//!
//! The forward pass repeats the solver arithmetic of
//! [`factorize`](crate::factorize::factorize) on `f64` and keeps every
//! iterate; the backward pass walks the unrolled steps in reverse.
//! Matrices are held as the transpose of each channel (the row-major samples
//! read column-major), which leaves every operation here unchanged.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::admm::DualInit;
use crate::error::{Error, Result};
use crate::factorize::{factor_differences, FactorStack, ParamVector, ThresholdUnits, MEAN_EPS};
use crate::image::{leading_triplet, ChannelMatrix, Image};
use crate::prox::{shrink, thin_svd, LowRankProx, ThinSvd};
use crate::scalar::sum_f64;

/// Loss, flat gradient (layout of [`ParamVector::to_flat`]) and the
/// per-factor, per-channel energy ratios seen in the forward pass.
#[derive(Clone, Debug)]
pub struct FactorizationGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub ratios: Vec<Vec<f64>>,
    /// Factors from the same forward pass, laid out as [`factorize`](crate::factorize::factorize) does.
    pub stack: FactorStack<f64>,
}

enum ProxTape {
    Nuclear(ThinSvd),
    Frobenius { norm: f64 },
}

struct StepTape {
    y: DMatrix<f64>,
    p: DMatrix<f64>,
    e: DMatrix<f64>,
    /// `(Q_t, prox record, A_{t+1})`, absent for the last step
    low_rank: Option<(DMatrix<f64>, ProxTape, DMatrix<f64>)>,
    alpha: f64,
    beta: f64,
    mu: f64,
}

struct FactorTape {
    x: DMatrix<f64>,
    mean: f64,
    dual_norm: f64,
    /// `∂‖x‖/∂x`
    dual_norm_grad: Option<DMatrix<f64>>,
    steps: Vec<StepTape>,
    alpha_pre: Vec<f64>,
    beta_pre: Vec<f64>,
}

fn mean_of(m: &DMatrix<f64>) -> f64 {
    sum_f64(m.as_slice()) / m.len() as f64
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn ensure_finite(m: &DMatrix<f64>, what: &str, t: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} update at step {}", t + 1)))
    }
}

/// `x − a − y/μ`, in the same operation order as the solver.
fn residual_arg(x: &DMatrix<f64>, a: &DMatrix<f64>, y: &DMatrix<f64>, inv_mu: f64) -> DMatrix<f64> {
    let mut out = x - a;
    for (o, yv) in out.iter_mut().zip(y.iter()) {
        *o -= yv * inv_mu;
    }
    out
}

fn forward_factor(
    x: DMatrix<f64>,
    k: usize,
    params: &ParamVector,
    rows: usize,
    cols: usize,
) -> Result<FactorTape> {
    let mean = mean_of(&x);
    let learned = &params.factors[k - 1];
    let nu = params.nu(k);
    let bl = params.blend;
    let bs = params.beta_scale(rows, cols);
    let alpha_pre: Vec<f64> = learned
        .alpha
        .iter()
        .map(|&a| bl * a + (1.0 - bl) * ((1.0 - nu) * mean))
        .collect();
    let beta_pre: Vec<f64> = learned
        .beta
        .iter()
        .map(|&b| bl * b + (1.0 - bl) * (nu * mean))
        .collect();

    let (dual_norm, dual_norm_grad) = match params.solver.dual_init {
        DualInit::Spectral => {
            // x is the transpose of the channel: σ(x) = σ(channel), ∂σ/∂x = v uᵀ
            let ch = ChannelMatrix::new(x.ncols(), x.nrows(), x.as_slice().to_vec())?;
            let tr = leading_triplet(&ch)?;
            let g = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| tr.v[i] * tr.u[j]);
            (tr.sigma, Some(g))
        }
        DualInit::Frobenius => {
            let n = x.norm();
            (n, (n > 0.0).then(|| &x / n))
        }
    };
    let mut y = if dual_norm > 0.0 {
        &x * (1.0 / dual_norm)
    } else {
        DMatrix::zeros(x.nrows(), x.ncols())
    };
    let mut a = x.clone();
    let t_iters = params.t_iters;
    let mut steps = Vec::with_capacity(t_iters);
    for t in 0..t_iters {
        let alpha = alpha_pre[t].max(0.0);
        let beta = beta_pre[t].max(0.0) * bs;
        let mu = learned.mu[t];
        let inv_mu = 1.0 / mu;
        let p = residual_arg(&x, &a, &y, inv_mu);
        let e = p.map(|v| shrink(v, alpha));
        ensure_finite(&e, "E", t)?;
        if t + 1 < t_iters {
            let q = residual_arg(&x, &e, &y, inv_mu);
            ensure_finite(&q, "A", t)?;
            let (a_next, tape) = match params.solver.low_rank {
                LowRankProx::Nuclear => {
                    let f = thin_svd(q.clone())?;
                    let shrunk: Vec<f64> = f.s.iter().map(|&s| (s - beta).max(0.0)).collect();
                    (f.compose(&shrunk), ProxTape::Nuclear(f))
                }
                LowRankProx::Frobenius => {
                    let n = q.norm();
                    let a = if n <= beta {
                        DMatrix::zeros(q.nrows(), q.ncols())
                    } else {
                        &q * (1.0 - beta / n)
                    };
                    (a, ProxTape::Frobenius { norm: n })
                }
            };
            ensure_finite(&a_next, "A", t)?;
            let mut y_next = y.clone();
            for (((yv, av), ev), xv) in y_next
                .iter_mut()
                .zip(a_next.iter())
                .zip(e.iter())
                .zip(x.iter())
            {
                *yv += mu * (av + ev - xv);
            }
            ensure_finite(&y_next, "Y", t)?;
            let y_prev = std::mem::replace(&mut y, y_next);
            a = a_next.clone();
            steps.push(StepTape {
                y: y_prev,
                p,
                e,
                low_rank: Some((q, tape, a_next)),
                alpha,
                beta,
                mu,
            });
        } else {
            steps.push(StepTape {
                y: y.clone(),
                p,
                e,
                low_rank: None,
                alpha,
                beta,
                mu,
            });
        }
    }
    Ok(FactorTape {
        x,
        mean,
        dual_norm,
        dual_norm_grad,
        steps,
        alpha_pre,
        beta_pre,
    })
}

/// Vector-Jacobian product of singular value thresholding.
fn svt_vjp(f: &ThinSvd, beta: f64, abar: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let s = &f.s;
    let r = s.len();
    let (m, n) = (f.u.nrows(), f.v.nrows());
    let fv: Vec<f64> = s.iter().map(|&x| (x - beta).max(0.0)).collect();
    let dv: Vec<f64> = s
        .iter()
        .map(|&x| if x > beta { 1.0 } else { 0.0 })
        .collect();
    let ut_a = f.u.transpose() * abar;
    let g = &ut_a * &f.v;
    let tie = 1e-12 * s.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let gamma = DMatrix::from_fn(r, r, |i, j| {
        if i == j {
            return dv[i] * g[(i, i)];
        }
        let sym = 0.5 * (g[(i, j)] + g[(j, i)]);
        let skew = 0.5 * (g[(i, j)] - g[(j, i)]);
        let ds = s[i] - s[j];
        let a = if ds.abs() > tie {
            (fv[i] - fv[j]) / ds
        } else {
            0.5 * (dv[i] + dv[j])
        };
        let ss = s[i] + s[j];
        let b = if ss > 0.0 { (fv[i] + fv[j]) / ss } else { 0.0 };
        a * sym + b * skew
    });
    let mut qbar = &f.u * gamma * f.v.transpose();
    let ratio: Vec<f64> = s
        .iter()
        .zip(&fv)
        .map(|(&sv, &fi)| if sv > 0.0 { fi / sv } else { 0.0 })
        .collect();
    if m > r {
        // component of Ā outside span(U)
        let outside = abar - &f.u * &ut_a;
        let mut vd = f.v.clone();
        for (k, &rk) in ratio.iter().enumerate() {
            vd.column_mut(k).scale_mut(rk);
        }
        qbar += outside * vd * f.v.transpose();
    }
    if n > r {
        let outside = &ut_a - &g * f.v.transpose();
        let mut ud = f.u.clone();
        for (k, &rk) in ratio.iter().enumerate() {
            ud.column_mut(k).scale_mut(rk);
        }
        qbar += ud * outside;
    }
    let bbar = -(0..r).map(|i| dv[i] * g[(i, i)]).sum::<f64>();
    (qbar, bbar)
}

fn frobenius_vjp(
    q: &DMatrix<f64>,
    norm: f64,
    beta: f64,
    abar: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    if norm <= beta {
        return (DMatrix::zeros(q.nrows(), q.ncols()), 0.0);
    }
    let inner = dot(q, abar);
    let qbar = abar * (1.0 - beta / norm) + q * (beta * inner / norm.powi(3));
    (qbar, -inner / norm)
}

/// Parameter adjoints of one factor.
struct FactorGrads {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    mu: Vec<f64>,
}

/// Back-propagates `ē` (adjoint of the factor output) through one solve.
/// Adds the input adjoint into `gx` and returns the parameter adjoints.
fn backward_factor(
    tape: &FactorTape,
    ebar: DMatrix<f64>,
    gx: &mut DMatrix<f64>,
    k: usize,
    params: &ParamVector,
    bs: f64,
) -> FactorGrads {
    let t_iters = tape.steps.len();
    let (nr, nc) = tape.x.shape();
    let zeros = || DMatrix::<f64>::zeros(nr, nc);
    let mut g_alpha_eff = vec![0.0; t_iters];
    let mut g_beta_eff = vec![0.0; t_iters];
    let mut g_mu = vec![0.0; t_iters];

    let mut g_e = ebar;
    let mut g_a = zeros();
    let mut g_y = zeros();
    for t in (0..t_iters).rev() {
        let st = &tape.steps[t];
        let mu = st.mu;
        let mut g_y_t = zeros();
        if let Some((q, prox, a_next)) = &st.low_rank {
            // Y_{t+1} = Y_t + μ (A_{t+1} + E_{t+1} − X)
            g_y_t.copy_from(&g_y);
            g_a += &g_y * mu;
            g_e += &g_y * mu;
            *gx -= &g_y * mu;
            let mut viol = a_next + &st.e;
            viol -= &tape.x;
            g_mu[t] += dot(&g_y, &viol);
            // A_{t+1} = prox(Q_t, β_t)
            let (gq, gb) = match prox {
                ProxTape::Nuclear(f) => svt_vjp(f, st.beta, &g_a),
                ProxTape::Frobenius { norm } => frobenius_vjp(q, *norm, st.beta, &g_a),
            };
            g_beta_eff[t] += gb;
            // Q_t = X − E_{t+1} − Y_t/μ
            *gx += &gq;
            g_e -= &gq;
            g_y_t -= &gq * (1.0 / mu);
            g_mu[t] += dot(&gq, &st.y) / (mu * mu);
        }
        // E_{t+1} = soft(P_t, α_t)
        let mut g_p = g_e.clone();
        let mut g_a_eff = 0.0;
        for (gp, &pv) in g_p.iter_mut().zip(st.p.iter()) {
            if pv.abs() > st.alpha {
                g_a_eff -= *gp * pv.signum();
            } else {
                *gp = 0.0;
            }
        }
        g_alpha_eff[t] += g_a_eff;
        // P_t = X − A_t − Y_t/μ
        *gx += &g_p;
        g_y_t -= &g_p * (1.0 / mu);
        g_mu[t] += dot(&g_p, &st.y) / (mu * mu);
        g_a = -g_p;
        g_y = g_y_t;
        g_e = zeros();
    }
    // A_0 = X, Y_0 = X/‖X‖
    *gx += &g_a;
    if tape.dual_norm > 0.0 {
        *gx += &g_y * (1.0 / tape.dual_norm);
        let gn = -dot(&g_y, &tape.x) / (tape.dual_norm * tape.dual_norm);
        if let Some(dn) = &tape.dual_norm_grad {
            *gx += dn * gn;
        }
    }

    let bl = params.blend;
    let nu = params.nu(k);
    let mut g_mean = 0.0;
    let mut alpha = vec![0.0; t_iters];
    let mut beta = vec![0.0; t_iters];
    for t in 0..t_iters {
        if tape.alpha_pre[t] > 0.0 {
            alpha[t] = bl * g_alpha_eff[t];
            g_mean += (1.0 - bl) * (1.0 - nu) * g_alpha_eff[t];
        }
        if tape.beta_pre[t] > 0.0 {
            beta[t] = bl * bs * g_beta_eff[t];
            g_mean += (1.0 - bl) * nu * bs * g_beta_eff[t];
        }
    }
    if g_mean != 0.0 {
        let share = g_mean / tape.x.len() as f64;
        gx.iter_mut().for_each(|v| *v += share);
    }
    FactorGrads {
        alpha,
        beta,
        mu: g_mu,
    }
}

/// Loss contribution, flat gradient and ratios for one channel.
struct ChannelResult {
    loss: f64,
    grad: Vec<f64>,
    ratios: Vec<f64>,
    e: Vec<ChannelMatrix<f64>>,
    residual: ChannelMatrix<f64>,
}

fn channel_gradient(ch: &ChannelMatrix<f64>, params: &ParamVector) -> Result<ChannelResult> {
    let (rows, cols) = ch.shape();
    let big_n = (rows * cols) as f64;
    let bs = params.beta_scale(rows, cols);
    let mut x = DMatrix::from_iterator(cols, rows, ch.data().iter().copied());
    let k_factors = params.k_factors;
    let mut tapes = Vec::with_capacity(k_factors);
    // (mean of Xᵏ, divisor sₖ)
    let mut scales = Vec::with_capacity(k_factors);
    let mut e_abs = Vec::with_capacity(k_factors);
    let mut residual = ChannelMatrix::zeros(rows, cols);
    let to_channel = |m: &DMatrix<f64>| ChannelMatrix::new(rows, cols, m.as_slice().to_vec());
    for k in 1..=k_factors {
        let m = mean_of(&x);
        let s = params.input_scale(m);
        let tape = forward_factor(&x * (1.0 / s), k, params, rows, cols)?;
        let abs = tape
            .steps
            .last()
            .map(|st| &st.e * s)
            .unwrap_or_else(|| DMatrix::zeros(cols, rows));
        if k < k_factors {
            x -= &abs;
            e_abs.push(to_channel(&abs)?);
        } else {
            residual = to_channel(&(&x - &abs))?;
            e_abs.push(to_channel(&x)?);
        }
        tapes.push(tape);
        scales.push((m, s));
    }

    let normalized = params.units == ThresholdUnits::Normalized;
    let mut loss = 0.0;
    let mut ratios = Vec::with_capacity(k_factors);
    let mut grad = vec![0.0; params.len()];
    let t_iters = params.t_iters;
    let mut gx_next = DMatrix::<f64>::zeros(cols, rows);
    for k in (1..=k_factors).rev() {
        let tape = &tapes[k - 1];
        let (m, s) = scales[k - 1];
        let e_out = tape
            .steps
            .last()
            .map(|st| st.e.clone())
            .unwrap_or_else(|| DMatrix::zeros(cols, rows));
        let nu = params.nu(k);
        let (r, gr) = if tape.mean.abs() > MEAN_EPS {
            let r = mean_of(&e_out) / tape.mean;
            let d = r - nu;
            (
                r,
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                },
            )
        } else {
            (0.0, 0.0)
        };
        loss += (r - nu).abs();
        ratios.push(r);

        // Xᵏ⁺¹ = Xᵏ − s·Ê with Ê the solver output on Z = Xᵏ/s
        let mut ebar = &gx_next * (-s);
        let mut g_s = -dot(&gx_next, &e_out);
        let mut gz = DMatrix::<f64>::zeros(cols, rows);
        if gr != 0.0 {
            let de = gr / (big_n * tape.mean);
            ebar.iter_mut().for_each(|v| *v += de);
            let dz = -gr * r / (big_n * tape.mean);
            gz.iter_mut().for_each(|v| *v += dz);
        }
        let g = backward_factor(tape, ebar, &mut gz, k, params, bs);
        let base = (k - 1) * 3 * t_iters;
        grad[base..base + t_iters].copy_from_slice(&g.alpha);
        grad[base + t_iters..base + 2 * t_iters].copy_from_slice(&g.beta);
        grad[base + 2 * t_iters..base + 3 * t_iters].copy_from_slice(&g.mu);

        g_s -= dot(&gz, &tape.x) / s;
        let mut gx = gx_next;
        gx += &gz * (1.0 / s);
        // s = |mean(Xᵏ)|
        if normalized && m.abs() > MEAN_EPS {
            let share = g_s * m.signum() / big_n;
            gx.iter_mut().for_each(|v| *v += share);
        }
        gx_next = gx;
    }
    ratios.reverse();
    Ok(ChannelResult {
        loss,
        grad,
        ratios,
        e: e_abs,
        residual,
    })
}

/// Factorization loss of one image and its gradient with respect to θ.
pub fn factorization_gradient(
    img: &Image<f64>,
    params: &ParamVector,
) -> Result<FactorizationGradient> {
    params.validate()?;
    if !img.all_finite() {
        return Err(Error::NonFinite("input image".into()));
    }
    let c = img.channels();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut ratios = vec![vec![0.0; c]; params.k_factors];
    let per_channel: Vec<ChannelResult> = (0..c)
        .into_par_iter()
        .map(|ch| channel_gradient(&img.channel(ch), params))
        .collect::<Result<_>>()?;
    for (ch, res) in per_channel.iter().enumerate() {
        loss += res.loss / c as f64;
        for (a, b) in grad.iter_mut().zip(&res.grad) {
            *a += b / c as f64;
        }
        for (k, &rk) in res.ratios.iter().enumerate() {
            ratios[k][ch] = rk;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("factorization gradient".into()));
    }
    let e = (0..params.k_factors)
        .map(|k| {
            Image::from_channels(
                &per_channel
                    .iter()
                    .map(|r| r.e[k].clone())
                    .collect::<Vec<_>>(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let residual = Image::from_channels(
        &per_channel
            .iter()
            .map(|r| r.residual.clone())
            .collect::<Vec<_>>(),
    )?;
    let stack = FactorStack {
        f: factor_differences(&e)?,
        e,
        residual,
        residual_absorbed: true,
        source_shape: img.shape(),
    };
    Ok(FactorizationGradient {
        loss,
        grad,
        ratios,
        stack,
    })
}
