//! Batch normalization: training-mode forward over mini-batch statistics,
//! the analytic backward pass, population-statistics estimation for
//! inference, folding into an affine map, and the per-feature-map variant
//! for convolutional activations.
//!
//! Training normalizes with the biased (divide-by-m) mini-batch variance.
//! The m/(m-1) correction enters only when mini-batch variances are averaged
//! into a population estimate, so inference uses an unbiased variance.
//!
//! The backward pass keeps the chain rule unfused: d_sigma2 and d_mu are
//! materialized so tests can inspect each intermediate gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learned per-dimension scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BnParams {
    pub fn new(gamma: Tensor, beta: Tensor) -> Result<Self> {
        if gamma.ndim() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::dim2("BnParams::new", gamma.shape(), beta.shape()));
        }
        Ok(BnParams { gamma, beta })
    }

    /// gamma = 1, beta = 0: the fresh-layer initialization.
    pub fn identity(d: usize) -> Self {
        BnParams {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Population statistics estimated from training mini-batches.
///
/// Two independent accumulators live here, and the caller picks one
/// explicitly: `mean`/`var` hold the exact running average over all batches
/// fed to [`bn_accumulate_stats`] (used when freezing a trained network),
/// while `ema_mean`/`ema_var` hold an exponential moving average (used to
/// track inference behavior while training is still in flight).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub batches_seen: usize,
    pub ema_mean: Tensor,
    pub ema_var: Tensor,
    pub ema_updates: usize,
    /// Batch size locked in by the first accumulated batch; averaging
    /// mini-batch variances is only meaningful at a fixed m.
    pub accum_m: Option<usize>,
}

impl BnStats {
    pub fn new(d: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[d]),
            var: Tensor::zeros(&[d]),
            batches_seen: 0,
            ema_mean: Tensor::zeros(&[d]),
            ema_var: Tensor::zeros(&[d]),
            ema_updates: 0,
            accum_m: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Repackages the moving-average track as stats usable for inference.
    ///
    /// The EMA starts at zero, so early snapshots are biased toward zero;
    /// that is the accepted cost of tracking accuracy mid-training.
    pub fn ema_snapshot(&self) -> Result<BnStats> {
        if self.ema_updates == 0 {
            return Err(Error::State(
                "ema_snapshot: no moving-average updates recorded".into(),
            ));
        }
        Ok(BnStats {
            mean: self.ema_mean.clone(),
            var: self.ema_var.clone(),
            batches_seen: self.ema_updates,
            ema_mean: Tensor::zeros(&[self.dim()]),
            ema_var: Tensor::zeros(&[self.dim()]),
            ema_updates: 0,
            accum_m: None,
        })
    }
}

/// Mini-batch moments lifted out of a forward cache, ready to feed the
/// population-statistics accumulators.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mu_b: Tensor,
    pub sigma2_b: Tensor,
    /// Effective batch size: m for dense activations, m*p*q per feature map
    /// for convolutional ones.
    pub m: usize,
}

/// Dimensions of a convolutional activation batch `[m, c, p, q]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub m: usize,
    pub c: usize,
    pub p: usize,
    pub q: usize,
}

/// Everything the backward pass needs from a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub input: Tensor,
    pub mu_b: Tensor,
    pub sigma2_b: Tensor,
    pub x_hat: Tensor,
    pub eps: f64,
    /// Effective batch size the statistics were computed over.
    pub m: usize,
    /// Present when the cache came from the convolutional forward.
    pub conv: Option<ConvShape>,
}

impl BnCache {
    pub fn moments(&self) -> BatchMoments {
        BatchMoments {
            mu_b: self.mu_b.clone(),
            sigma2_b: self.sigma2_b.clone(),
            m: self.m,
        }
    }
}

/// Inference BN collapsed to `y = scale * x + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedAffine {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl FoldedAffine {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.mul_row(&self.scale)?.add_row(&self.shift)
    }
}

fn check_train_eps(op: &'static str, eps: f64) -> Result<()> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "{op}: eps must be positive and finite, got {eps}"
        )));
    }
    Ok(())
}

fn check_inference_eps(op: &'static str, eps: f64) -> Result<()> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::Config(format!(
            "{op}: eps must be non-negative and finite, got {eps}"
        )));
    }
    Ok(())
}

/// Training-mode forward: normalize each column by its mini-batch mean and
/// biased variance, then scale and shift.
///
/// A constant column is legal: eps keeps the division finite and the output
/// is beta. A single-example batch is not, since its variance is identically
/// zero and the backward pass degenerates.
pub fn bn_forward_train(x: &Tensor, params: &BnParams, eps: f64) -> Result<(Tensor, BnCache)> {
    if x.ndim() != 2 {
        return Err(Error::dim(
            "bn_forward_train",
            format!("expected [m, d] input, got {:?}", x.shape()),
        ));
    }
    let (m, d) = (x.rows(), x.cols());
    if m < 2 {
        return Err(Error::BatchTooSmall {
            op: "bn_forward_train",
            need: 2,
            got: m,
        });
    }
    if params.dim() != d {
        return Err(Error::dim2("bn_forward_train", x.shape(), params.gamma.shape()));
    }
    check_train_eps("bn_forward_train", eps)?;
    x.ensure_finite("bn_forward_train input")?;

    let mf = m as f64;
    let mut mu = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (s, &v) in mu.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in &mut mu {
        *s /= mf;
    }

    let mut sigma2 = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for ((s, &v), &mean) in sigma2.iter_mut().zip(row).zip(&mu) {
            let c = v - mean;
            *s += c * c;
        }
    }
    for s in &mut sigma2 {
        *s /= mf;
    }

    let inv_std: Vec<f64> = sigma2.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();

    let mut x_hat = Vec::with_capacity(m * d);
    let mut y = Vec::with_capacity(m * d);
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    for row in x.data().chunks_exact(d) {
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mu[j]) * inv_std[j];
            x_hat.push(xh);
            y.push(gamma[j] * xh + beta[j]);
        }
    }

    let cache = BnCache {
        input: x.clone(),
        mu_b: Tensor::vector(mu),
        sigma2_b: Tensor::vector(sigma2),
        x_hat: Tensor::from_vec(&[m, d], x_hat)?,
        eps,
        m,
        conv: None,
    };
    Ok((Tensor::from_vec(&[m, d], y)?, cache))
}

/// The backward pass with its intermediate gradients exposed.
#[derive(Clone, Debug)]
pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
    /// Gradient w.r.t. the mini-batch variance, one value per column.
    pub d_sigma2: Tensor,
    /// Gradient w.r.t. the mini-batch mean, one value per column.
    pub d_mu: Tensor,
}

/// Analytic backward for [`bn_forward_train`], kept term-by-term:
///
/// ```text
/// d_xhat[i]  = dy[i] * gamma
/// d_sigma2   = sum_i d_xhat[i] * (x[i] - mu) * (-1/2) * (sigma2 + eps)^(-3/2)
/// d_mu       = sum_i d_xhat[i] * (-1/sqrt(sigma2 + eps))
///              + d_sigma2 * sum_i(-2 (x[i] - mu)) / m
/// dx[i]      = d_xhat[i] / sqrt(sigma2 + eps)
///              + d_sigma2 * 2 (x[i] - mu) / m + d_mu / m
/// dgamma     = sum_i dy[i] * x_hat[i]
/// dbeta      = sum_i dy[i]
/// ```
///
/// The d_mu term keeps its second summand even though `sum_i (x[i] - mu)`
/// vanishes analytically; tests rely on the terms being computed as written.
pub fn bn_backward_full(cache: &BnCache, dy: &Tensor, params: &BnParams) -> Result<BnGrads> {
    if cache.conv.is_some() {
        return Err(Error::State(
            "bn_backward: cache came from the convolutional forward".into(),
        ));
    }
    if dy.shape() != cache.input.shape() {
        return Err(Error::dim2("bn_backward", dy.shape(), cache.input.shape()));
    }
    let (m, d) = (cache.input.rows(), cache.input.cols());
    let mf = m as f64;
    let x = cache.input.data();
    let xh = cache.x_hat.data();
    let mu = cache.mu_b.data();
    let sigma2 = cache.sigma2_b.data();
    let gamma = params.gamma.data();
    let inv_std: Vec<f64> = sigma2
        .iter()
        .map(|&s| 1.0 / (s + cache.eps).sqrt())
        .collect();

    let mut sum_dxhat = vec![0.0; d];
    let mut sum_dxhat_xc = vec![0.0; d];
    let mut sum_xc = vec![0.0; d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            let g = dy.data()[i * d + j];
            let dxhat = g * gamma[j];
            let xc = x[i * d + j] - mu[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xc[j] += dxhat * xc;
            sum_xc[j] += xc;
            dgamma[j] += g * xh[i * d + j];
            dbeta[j] += g;
        }
    }

    let mut d_sigma2 = vec![0.0; d];
    let mut d_mu = vec![0.0; d];
    for j in 0..d {
        d_sigma2[j] = sum_dxhat_xc[j] * (-0.5) * inv_std[j].powi(3);
        d_mu[j] = sum_dxhat[j] * (-inv_std[j]) + d_sigma2[j] * (-2.0 * sum_xc[j]) / mf;
    }

    let mut dx = vec![0.0; m * d];
    for i in 0..m {
        for j in 0..d {
            let dxhat = dy.data()[i * d + j] * gamma[j];
            let xc = x[i * d + j] - mu[j];
            dx[i * d + j] = dxhat * inv_std[j] + d_sigma2[j] * 2.0 * xc / mf + d_mu[j] / mf;
        }
    }

    Ok(BnGrads {
        dx: Tensor::from_vec(&[m, d], dx)?,
        dgamma: Tensor::vector(dgamma),
        dbeta: Tensor::vector(dbeta),
        d_sigma2: Tensor::vector(d_sigma2),
        d_mu: Tensor::vector(d_mu),
    })
}

/// Backward pass returning only the gradients callers train with.
pub fn bn_backward(
    cache: &BnCache,
    dy: &Tensor,
    params: &BnParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = bn_backward_full(cache, dy, params)?;
    Ok((g.dx, g.dgamma, g.dbeta))
}

/// Folds one mini-batch's moments into the exact running averages.
///
/// `mean` tracks the arithmetic average of mini-batch means; `var` tracks the
/// average of mini-batch variances scaled by m/(m-1), which unbiases the
/// divide-by-m variance used during normalization. All batches must share the
/// same m for that correction to be meaningful.
pub fn bn_accumulate_stats(stats: &mut BnStats, moments: &BatchMoments) -> Result<()> {
    if moments.mu_b.shape() != stats.mean.shape() {
        return Err(Error::dim2(
            "bn_accumulate_stats",
            moments.mu_b.shape(),
            stats.mean.shape(),
        ));
    }
    if moments.m < 2 {
        return Err(Error::BatchTooSmall {
            op: "bn_accumulate_stats",
            need: 2,
            got: moments.m,
        });
    }
    match stats.accum_m {
        None => stats.accum_m = Some(moments.m),
        Some(m0) if m0 == moments.m => {}
        Some(m0) => {
            return Err(Error::Config(format!(
                "bn_accumulate_stats: batch size changed from {m0} to {} mid-accumulation",
                moments.m
            )))
        }
    }

    let n = (stats.batches_seen + 1) as f64;
    let correction = moments.m as f64 / (moments.m as f64 - 1.0);
    for (acc, &mu) in stats.mean.data_mut().iter_mut().zip(moments.mu_b.data()) {
        *acc += (mu - *acc) / n;
    }
    for (acc, &s2) in stats.var.data_mut().iter_mut().zip(moments.sigma2_b.data()) {
        *acc += (correction * s2 - *acc) / n;
    }
    stats.batches_seen += 1;
    Ok(())
}

/// Exponential-moving-average update of the tracking statistics:
/// `ema <- decay * ema + (1 - decay) * new`, variance unbiased by m/(m-1).
///
/// The EMA is zero-initialized; no bias correction is applied.
pub fn bn_update_ema(stats: &mut BnStats, moments: &BatchMoments, decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Config(format!(
            "bn_update_ema: decay must lie in (0, 1), got {decay}"
        )));
    }
    if moments.mu_b.shape() != stats.ema_mean.shape() {
        return Err(Error::dim2(
            "bn_update_ema",
            moments.mu_b.shape(),
            stats.ema_mean.shape(),
        ));
    }
    if moments.m < 2 {
        return Err(Error::BatchTooSmall {
            op: "bn_update_ema",
            need: 2,
            got: moments.m,
        });
    }
    let correction = moments.m as f64 / (moments.m as f64 - 1.0);
    let keep = decay;
    let take = 1.0 - decay;
    for (acc, &mu) in stats.ema_mean.data_mut().iter_mut().zip(moments.mu_b.data()) {
        *acc = keep * *acc + take * mu;
    }
    for (acc, &s2) in stats
        .ema_var
        .data_mut()
        .iter_mut()
        .zip(moments.sigma2_b.data())
    {
        *acc = keep * *acc + take * correction * s2;
    }
    stats.ema_updates += 1;
    Ok(())
}

/// Inference-mode forward using population statistics.
///
/// Each example is transformed independently, so the output for a given row
/// never depends on what else is in the batch, and m = 1 is fine.
pub fn bn_forward_inference(
    x: &Tensor,
    params: &BnParams,
    stats: &BnStats,
    eps: f64,
) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::dim(
            "bn_forward_inference",
            format!("expected [m, d] input, got {:?}", x.shape()),
        ));
    }
    let d = x.cols();
    if params.dim() != d || stats.dim() != d {
        return Err(Error::dim2(
            "bn_forward_inference",
            x.shape(),
            params.gamma.shape(),
        ));
    }
    if stats.batches_seen == 0 {
        return Err(Error::State(
            "bn_forward_inference: statistics have seen no batches".into(),
        ));
    }
    check_inference_eps("bn_forward_inference", eps)?;

    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mean = stats.mean.data();
    let var = stats.var.data();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(d) {
        for (j, &v) in row.iter().enumerate() {
            y.push(gamma[j] * (v - mean[j]) * inv_std[j] + beta[j]);
        }
    }
    Tensor::from_vec(x.shape(), y)
}

/// Collapses inference BN into a single elementwise affine map:
/// `scale = gamma / sqrt(var + eps)`, `shift = beta - gamma * mean / sqrt(var + eps)`.
pub fn bn_fold(params: &BnParams, stats: &BnStats, eps: f64) -> Result<FoldedAffine> {
    if stats.batches_seen == 0 {
        return Err(Error::State("bn_fold: statistics have seen no batches".into()));
    }
    if params.dim() != stats.dim() {
        return Err(Error::dim2("bn_fold", params.gamma.shape(), stats.mean.shape()));
    }
    check_inference_eps("bn_fold", eps)?;
    let d = params.dim();
    let mut scale = Vec::with_capacity(d);
    let mut shift = Vec::with_capacity(d);
    for j in 0..d {
        let inv_std = 1.0 / (stats.var.data()[j] + eps).sqrt();
        let s = params.gamma.data()[j] * inv_std;
        scale.push(s);
        shift.push(params.beta.data()[j] - s * stats.mean.data()[j]);
    }
    Ok(FoldedAffine {
        scale: Tensor::vector(scale),
        shift: Tensor::vector(shift),
    })
}

fn conv_shape(op: &'static str, x: &Tensor) -> Result<ConvShape> {
    if x.ndim() != 4 {
        return Err(Error::dim(
            op,
            format!("expected [m, c, p, q] input, got {:?}", x.shape()),
        ));
    }
    let s = x.shape();
    Ok(ConvShape {
        m: s[0],
        c: s[1],
        p: s[2],
        q: s[3],
    })
}

/// Training-mode forward for convolutional activations `[m, c, p, q]`.
///
/// Each feature map k is normalized jointly over the batch and all spatial
/// locations, an effective mini-batch of m*p*q values, with a single
/// (gamma, beta) pair applied at every location. Statistics are computed
/// directly on the 4-D layout; the reshape route exists only in tests, as an
/// independent oracle.
pub fn bn_conv_forward_train(
    x: &Tensor,
    params: &BnParams,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let cs = conv_shape("bn_conv_forward_train", x)?;
    let m_eff = cs.m * cs.p * cs.q;
    if m_eff < 2 {
        return Err(Error::BatchTooSmall {
            op: "bn_conv_forward_train",
            need: 2,
            got: m_eff,
        });
    }
    if params.dim() != cs.c {
        return Err(Error::dim2(
            "bn_conv_forward_train",
            x.shape(),
            params.gamma.shape(),
        ));
    }
    check_train_eps("bn_conv_forward_train", eps)?;
    x.ensure_finite("bn_conv_forward_train input")?;

    let plane = cs.p * cs.q;
    let mf = m_eff as f64;
    let xd = x.data();

    let mut mu = vec![0.0; cs.c];
    for i in 0..cs.m {
        for (k, mk) in mu.iter_mut().enumerate() {
            let base = (i * cs.c + k) * plane;
            *mk += xd[base..base + plane].iter().sum::<f64>();
        }
    }
    for s in &mut mu {
        *s /= mf;
    }

    let mut sigma2 = vec![0.0; cs.c];
    for i in 0..cs.m {
        for k in 0..cs.c {
            let base = (i * cs.c + k) * plane;
            sigma2[k] += xd[base..base + plane]
                .iter()
                .map(|&v| {
                    let c = v - mu[k];
                    c * c
                })
                .sum::<f64>();
        }
    }
    for s in &mut sigma2 {
        *s /= mf;
    }

    let inv_std: Vec<f64> = sigma2.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for i in 0..cs.m {
        for k in 0..cs.c {
            let base = (i * cs.c + k) * plane;
            for t in 0..plane {
                let xh = (xd[base + t] - mu[k]) * inv_std[k];
                x_hat[base + t] = xh;
                y[base + t] = gamma[k] * xh + beta[k];
            }
        }
    }

    let cache = BnCache {
        input: x.clone(),
        mu_b: Tensor::vector(mu),
        sigma2_b: Tensor::vector(sigma2),
        x_hat: Tensor::from_vec(x.shape(), x_hat)?,
        eps,
        m: m_eff,
        conv: Some(cs),
    };
    Ok((Tensor::from_vec(x.shape(), y)?, cache))
}

/// Backward for [`bn_conv_forward_train`]: the dense equations with every
/// per-column sum replaced by a per-feature-map sum over batch and space.
pub fn bn_conv_backward(
    cache: &BnCache,
    dy: &Tensor,
    params: &BnParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let cs = cache.conv.ok_or_else(|| {
        Error::State("bn_conv_backward: cache came from the dense forward".into())
    })?;
    if dy.shape() != cache.input.shape() {
        return Err(Error::dim2("bn_conv_backward", dy.shape(), cache.input.shape()));
    }
    let plane = cs.p * cs.q;
    let mf = cache.m as f64;
    let x = cache.input.data();
    let xh = cache.x_hat.data();
    let dyd = dy.data();
    let mu = cache.mu_b.data();
    let sigma2 = cache.sigma2_b.data();
    let gamma = params.gamma.data();
    let inv_std: Vec<f64> = sigma2
        .iter()
        .map(|&s| 1.0 / (s + cache.eps).sqrt())
        .collect();

    let mut sum_dxhat = vec![0.0; cs.c];
    let mut sum_dxhat_xc = vec![0.0; cs.c];
    let mut sum_xc = vec![0.0; cs.c];
    let mut dgamma = vec![0.0; cs.c];
    let mut dbeta = vec![0.0; cs.c];
    for i in 0..cs.m {
        for k in 0..cs.c {
            let base = (i * cs.c + k) * plane;
            for t in 0..plane {
                let g = dyd[base + t];
                let dxhat = g * gamma[k];
                let xc = x[base + t] - mu[k];
                sum_dxhat[k] += dxhat;
                sum_dxhat_xc[k] += dxhat * xc;
                sum_xc[k] += xc;
                dgamma[k] += g * xh[base + t];
                dbeta[k] += g;
            }
        }
    }

    let mut d_sigma2 = vec![0.0; cs.c];
    let mut d_mu = vec![0.0; cs.c];
    for k in 0..cs.c {
        d_sigma2[k] = sum_dxhat_xc[k] * (-0.5) * inv_std[k].powi(3);
        d_mu[k] = sum_dxhat[k] * (-inv_std[k]) + d_sigma2[k] * (-2.0 * sum_xc[k]) / mf;
    }

    let mut dx = vec![0.0; x.len()];
    for i in 0..cs.m {
        for k in 0..cs.c {
            let base = (i * cs.c + k) * plane;
            for t in 0..plane {
                let dxhat = dyd[base + t] * gamma[k];
                let xc = x[base + t] - mu[k];
                dx[base + t] = dxhat * inv_std[k] + d_sigma2[k] * 2.0 * xc / mf + d_mu[k] / mf;
            }
        }
    }

    Ok((
        Tensor::from_vec(cache.input.shape(), dx)?,
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    ))
}
