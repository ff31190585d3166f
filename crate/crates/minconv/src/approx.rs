//! The multiplication-free convolution kernel.
//!
//! A product `x * w` is replaced by `smin(x, w~)` where `w~` are the weights
//! rescaled into the input's magnitude scale and `smin` is the signed
//! minimum: magnitudes compared, signs multiplied. One scalar multiply per
//! output element (by the filter's mean absolute weight) survives; everything
//! inside the accumulation loop is comparisons and additions.
//!
//! Training clips inputs and weights to twice their mean absolute value to
//! keep the operands comparable, and the backward pass differentiates the
//! exact convolution of the clipped operands, not the smin forward.

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Shape2D, Tensor};
use rayon::prelude::*;

/// How a convolution layer computes its forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Exact,
    MinApprox,
}

impl ConvMode {
    pub fn name(&self) -> &'static str {
        match self {
            ConvMode::Exact => "exact",
            ConvMode::MinApprox => "approx",
        }
    }
}

/// Whether a forward pass is part of training or inference.
///
/// `Calibrate` runs train-style statistics (batch means feed the running
/// mean) without dropout, for re-estimating running means after a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
    Calibrate,
}

/// Signed minimum: `sign(a) * sign(b) * min(|a|, |b|)` with `sign(0) := +1`.
///
/// The sign combination is a comparison and a negation, so accumulation
/// loops built on `smin` are multiplication-free.
#[inline]
pub fn smin<T: Scalar>(a: T, b: T) -> T {
    let m = a.abs().min(b.abs());
    if (a < T::zero()) != (b < T::zero()) {
        -m
    } else {
        m
    }
}

/// Symmetric saturation to `[-alpha, alpha]`.
#[inline]
pub fn clip<T: Scalar>(x: T, alpha: T) -> T {
    debug_assert!(alpha >= T::zero());
    if x > alpha {
        alpha
    } else if x < -alpha {
        -alpha
    } else {
        x
    }
}

/// Pass-through gradient of [`clip`]: 1 on `[-alpha, alpha]` (boundary
/// included), 0 outside.
#[inline]
pub fn clip_grad<T: Scalar>(x: T, alpha: T) -> T {
    debug_assert!(alpha >= T::zero());
    if x > alpha || x < -alpha {
        T::zero()
    } else {
        T::one()
    }
}

/// Mean absolute values: one scalar per output filter, one running scalar
/// per layer for the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsMeanStats<T> {
    /// Mean |w| per output filter, from the current (unclipped) weights.
    pub mu_w: Vec<T>,
    /// Running mean |x| of the layer input, frozen at inference.
    pub mu_x_running: T,
    /// Momentum of the running mean.
    pub gamma: T,
}

impl<T: Scalar> AbsMeanStats<T> {
    /// Fresh statistics. The running input mean starts at 1, the neutral
    /// magnitude the rescaling drives operands toward.
    pub fn new(n_filters: usize, gamma: T) -> Result<Self> {
        if gamma < T::zero() || gamma > T::one() {
            return Err(Error::Usage(format!("gamma must be in [0,1], got {gamma}")));
        }
        Ok(AbsMeanStats { mu_w: vec![T::zero(); n_filters], mu_x_running: T::one(), gamma })
    }
}

/// Mean |w| for each output filter of a `[c_out, c_in, fh, fw]` weight tensor.
pub fn filter_abs_means<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    let cout = w.shape()[0];
    let per = w.numel() / cout;
    (0..cout)
        .map(|k| {
            let sum: f64 = w.data()[k * per..(k + 1) * per].iter().map(|v| v.as_f64().abs()).sum();
            T::from_f64(sum / per as f64)
        })
        .collect()
}

/// Clips every element to `[-alpha, alpha]`.
pub fn clip_tensor<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| clip(v, alpha))
}

/// Clips filter `k` of a weight tensor to `[-bounds[k], bounds[k]]`.
pub fn clip_weights_per_filter<T: Scalar>(w: &Tensor<T>, bounds: &[T]) -> Tensor<T> {
    let cout = w.shape()[0];
    debug_assert_eq!(bounds.len(), cout);
    let per = w.numel() / cout;
    let mut out = w.clone();
    for k in 0..cout {
        let alpha = bounds[k];
        for v in &mut out.data_mut()[k * per..(k + 1) * per] {
            *v = clip(*v, alpha);
        }
    }
    out
}

/// Rescales clipped weights into the input scale: filter `k` is multiplied
/// by `mu_x / mu_w[k]`.
pub fn rescale_weights<T: Scalar>(w_clipped: &Tensor<T>, mu_x: T, mu_w: &[T]) -> Result<Tensor<T>> {
    if mu_x == T::zero() {
        return Err(Error::ZeroInputStats);
    }
    let cout = w_clipped.shape()[0];
    if mu_w.len() != cout {
        return Err(Error::Dimension(format!(
            "{} filter means for {cout} filters",
            mu_w.len()
        )));
    }
    let per = w_clipped.numel() / cout;
    let mut out = w_clipped.clone();
    for k in 0..cout {
        if mu_w[k] == T::zero() {
            return Err(Error::ZeroFilter { filter: k });
        }
        let ratio = mu_x / mu_w[k];
        for v in &mut out.data_mut()[k * per..(k + 1) * per] {
            *v *= ratio;
        }
    }
    Ok(out)
}

/// Folds the batch mean of `|x|` into the running mean:
/// `mu_r <- gamma * mu_r + (1 - gamma) * mean|batch|`.
///
/// Returns the updated statistics and the fresh batch mean; the batch mean,
/// not the running mean, drives the current iteration's forward.
pub fn update_running_mu<T: Scalar>(
    stats: &AbsMeanStats<T>,
    batch_x: &Tensor<T>,
) -> Result<(AbsMeanStats<T>, T)> {
    if batch_x.numel() == 0 {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let batch_mu = batch_x.abs_mean();
    let mut out = stats.clone();
    out.mu_x_running = stats.gamma * stats.mu_x_running + (T::one() - stats.gamma) * batch_mu;
    Ok((out, batch_mu))
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    shape: Shape2D,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "conv expects x [N,C,H,W] and w [Cout,Cin,fh,fw], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, cin, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, fh, fw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if cin != wcin || fh != shape.fh || fw != shape.fw {
        return Err(Error::Dimension(format!(
            "filters {:?} do not match input {:?} with geometry {shape:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (oh, ow) = shape.out_dims(h, ww)?;
    Ok((n, cin, h, ww, cout, oh, ow))
}

/// Unfolds a whole batch into one `[n * oh * ow, cin * fh * fw]` matrix.
fn unfold_batch<T: Scalar>(
    x: &Tensor<T>,
    shape: Shape2D,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let rows_per = oh * ow;
    let cols = cin * shape.fh * shape.fw;
    let mut col = vec![T::zero(); n * rows_per * cols];
    let item = cin * h * w;
    col.par_chunks_mut(rows_per * cols).enumerate().for_each(|(i, chunk)| {
        tensor::unfold_into(&x.data()[i * item..(i + 1) * item], cin, h, w, shape, oh, ow, chunk);
    });
    col
}

/// Exact convolution forward (im2col + matrix product), NCHW, no bias.
pub fn exact_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    shape: Shape2D,
) -> Result<Tensor<T>> {
    let (n, cin, h, ww, cout, oh, ow) = check_conv_shapes(x, w, shape)?;
    let rows_per = oh * ow;
    let cols = cin * shape.fh * shape.fw;
    let col = unfold_batch(x, shape, n, cin, h, ww, oh, ow);

    // out_mat = col [n*rows, cols] @ w^T with w stored [cout, cols]
    let mut out_mat = vec![T::zero(); n * rows_per * cout];
    T::gemm(false, true, n * rows_per, cols, cout, T::one(), &col, w.data(), T::zero(), &mut out_mat);

    // [n*rows, cout] -> [n, cout, oh, ow]
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    out.data_mut().par_chunks_mut(cout * rows_per).enumerate().for_each(|(i, chunk)| {
        let base = i * rows_per * cout;
        for r in 0..rows_per {
            for k in 0..cout {
                chunk[k * rows_per + r] = out_mat[base + r * cout + k];
            }
        }
    });
    Ok(out)
}

/// Approximate convolution forward: per output element
/// `z = mu_w[k] * sum over the receptive field of smin(x, w_tilde)`.
///
/// `w_tilde` must already be the clipped, rescaled weights; in the training
/// phase `x` must already be clipped.
pub fn smin_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w_tilde: &Tensor<T>,
    mu_w: &[T],
    shape: Shape2D,
) -> Result<Tensor<T>> {
    let (n, cin, h, ww, cout, oh, ow) = check_conv_shapes(x, w_tilde, shape)?;
    if mu_w.len() != cout {
        return Err(Error::Dimension(format!("{} filter means for {cout} filters", mu_w.len())));
    }
    let rows_per = oh * ow;
    let cols = cin * shape.fh * shape.fw;
    let col = unfold_batch(x, shape, n, cin, h, ww, oh, ow);

    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    let wt = w_tilde.data();
    out.data_mut().par_chunks_mut(cout * rows_per).enumerate().for_each(|(i, chunk)| {
        for r in 0..rows_per {
            let row = &col[(i * rows_per + r) * cols..(i * rows_per + r + 1) * cols];
            for k in 0..cout {
                let wrow = &wt[k * cols..(k + 1) * cols];
                let acc = smin_dot(row, wrow);
                // the single surviving multiplication of the approximate form
                chunk[k * rows_per + r] = mu_w[k] * acc;
            }
        }
    });
    Ok(out)
}

/// Accumulates `smin` over two equal-length slices.
fn smin_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &w) in a.iter().zip(b) {
        acc += smin(x, w);
    }
    acc
}

/// Gradients of the exact convolution `y = conv(x, w)` with respect to `x`
/// and `w`, given the gradient with respect to `y`.
///
/// This is the backward of Eq.-1-style convolution regardless of how the
/// forward was approximated; mean-absolute-value scalings are treated as
/// constants.
pub fn exact_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    shape: Shape2D,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, cin, h, ww, cout, oh, ow) = check_conv_shapes(x, w, shape)?;
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::Dimension(format!(
            "grad_out {:?} does not match forward output [{n}, {cout}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let rows_per = oh * ow;
    let cols = cin * shape.fh * shape.fw;
    let col = unfold_batch(x, shape, n, cin, h, ww, oh, ow);

    // grad_x: per item, grad_col = grad_out[n]^T [rows, cout] x w [cout, cols],
    // then fold back into image coordinates. Items are independent.
    let mut grad_x = Tensor::zeros(vec![n, cin, h, ww]);
    grad_x.data_mut().par_chunks_mut(cin * h * ww).enumerate().for_each(|(i, gx)| {
        let go = &grad_out.data()[i * cout * rows_per..(i + 1) * cout * rows_per];
        let mut grad_col = vec![T::zero(); rows_per * cols];
        T::gemm(true, false, rows_per, cout, cols, T::one(), go, w.data(), T::zero(), &mut grad_col);
        tensor::fold_into(&grad_col, cin, h, ww, shape, oh, ow, gx);
    });

    // grad_w = sum over items of grad_out[n] [cout, rows] x col[n] [rows, cols],
    // accumulated in item order so the reduction order is fixed.
    let mut grad_w = Tensor::zeros(vec![cout, cin, shape.fh, shape.fw]);
    for i in 0..n {
        let go = &grad_out.data()[i * cout * rows_per..(i + 1) * cout * rows_per];
        let ci = &col[i * rows_per * cols..(i + 1) * rows_per * cols];
        T::gemm(false, false, cout, rows_per, cols, T::one(), go, ci, T::one(), grad_w.data_mut());
    }
    Ok((grad_x, grad_w))
}

/// Convolution layer state shared by the exact and approximate modes.
#[derive(Debug, Clone)]
pub struct ApproxConvLayer<T> {
    /// Trainable weights `[c_out, c_in, fh, fw]`.
    pub weights: Tensor<T>,
    pub shape: Shape2D,
    pub stats: AbsMeanStats<T>,
    pub mode: ConvMode,
}

impl<T: Scalar> ApproxConvLayer<T> {
    pub fn new(weights: Tensor<T>, shape: Shape2D, gamma: T, mode: ConvMode) -> Result<Self> {
        if weights.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "weights must be [Cout,Cin,fh,fw], got {:?}",
                weights.shape()
            )));
        }
        let stats = AbsMeanStats::new(weights.shape()[0], gamma)?;
        Ok(ApproxConvLayer { weights, shape, stats, mode })
    }

    /// Effective comparison weights for the approximate mode: current
    /// weights clipped to twice their per-filter mean magnitude and rescaled
    /// by `mu_x / mu_w[k]`. Returns `(w_clipped, w_tilde, mu_w)`.
    pub fn prepare_weights(&self, mu_x: T) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let mu_w = filter_abs_means(&self.weights);
        let two = T::from_f64(2.0);
        let bounds: Vec<T> = mu_w.iter().map(|&m| two * m).collect();
        let w_clipped = clip_weights_per_filter(&self.weights, &bounds);
        let w_tilde = rescale_weights(&w_clipped, mu_x, &mu_w)?;
        Ok((w_clipped, w_tilde, mu_w))
    }

    /// Forward pass dispatching on the layer mode.
    ///
    /// In `MinApprox` mode the input scale comes from `batch_mu_x` during
    /// training/calibration (the caller has already clipped `x` with it) and
    /// from the frozen running mean during inference (no input clipping).
    pub fn forward(&self, x: &Tensor<T>, phase: Phase, batch_mu_x: Option<T>) -> Result<Tensor<T>> {
        match self.mode {
            ConvMode::Exact => exact_conv_forward(x, &self.weights, self.shape),
            ConvMode::MinApprox => {
                let mu_x = match phase {
                    Phase::Train | Phase::Calibrate => batch_mu_x.ok_or_else(|| {
                        Error::DegenerateInput(
                            "training forward of an approximate conv needs the batch mean".into(),
                        )
                    })?,
                    Phase::Infer => self.stats.mu_x_running,
                };
                let (_, w_tilde, mu_w) = self.prepare_weights(mu_x)?;
                smin_conv_forward(x, &w_tilde, &mu_w, self.shape)
            }
        }
    }
}

/// Operation counts from an instrumented reference forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Elementwise multiplications inside convolution accumulation loops.
    pub inner_muls: u64,
    /// `smin` applications.
    pub smin_ops: u64,
    /// Residual scalar multiplications (one per output element in
    /// approximate mode).
    pub scalar_muls: u64,
}

/// Nested-loop exact convolution of one `[Cin, H, W]` image, counting every
/// multiplication inside the accumulation.
pub fn exact_conv_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    shape: Shape2D,
    counter: &mut OpCounter,
) -> Result<Tensor<T>> {
    let batched = x.clone().reshape(vec![1, x.shape()[0], x.shape()[1], x.shape()[2]])?;
    let (_, cin, h, ww, cout, oh, ow) = check_conv_shapes(&batched, w, shape)?;
    let mut out = Tensor::zeros(vec![cout, oh, ow]);
    let pad = shape.padding as isize;
    for k in 0..cout {
        for u in 0..oh {
            for v in 0..ow {
                let mut acc = T::zero();
                for c in 0..cin {
                    for i in 0..shape.fh {
                        for j in 0..shape.fw {
                            let ih = (u * shape.stride + i) as isize - pad;
                            let iw = (v * shape.stride + j) as isize - pad;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= ww as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + ih as usize) * ww + iw as usize];
                            let wv = w.data()[((k * cin + c) * shape.fh + i) * shape.fw + j];
                            counter.inner_muls += 1;
                            acc += xv * wv;
                        }
                    }
                }
                out.data_mut()[(k * oh + u) * ow + v] = acc;
            }
        }
    }
    Ok(out)
}

/// Nested-loop approximate convolution of one `[Cin, H, W]` image, counting
/// smin applications and the residual per-output scalar multiplications.
/// The accumulation itself performs no multiplications.
pub fn smin_conv_reference<T: Scalar>(
    x: &Tensor<T>,
    w_tilde: &Tensor<T>,
    mu_w: &[T],
    shape: Shape2D,
    counter: &mut OpCounter,
) -> Result<Tensor<T>> {
    let batched = x.clone().reshape(vec![1, x.shape()[0], x.shape()[1], x.shape()[2]])?;
    let (_, cin, h, ww, cout, oh, ow) = check_conv_shapes(&batched, w_tilde, shape)?;
    if mu_w.len() != cout {
        return Err(Error::Dimension(format!("{} filter means for {cout} filters", mu_w.len())));
    }
    let mut out = Tensor::zeros(vec![cout, oh, ow]);
    let pad = shape.padding as isize;
    for k in 0..cout {
        for u in 0..oh {
            for v in 0..ow {
                let mut acc = T::zero();
                for c in 0..cin {
                    for i in 0..shape.fh {
                        for j in 0..shape.fw {
                            let ih = (u * shape.stride + i) as isize - pad;
                            let iw = (v * shape.stride + j) as isize - pad;
                            let xv = if ih < 0 || iw < 0 || ih >= h as isize || iw >= ww as isize {
                                T::zero()
                            } else {
                                x.data()[(c * h + ih as usize) * ww + iw as usize]
                            };
                            let wv =
                                w_tilde.data()[((k * cin + c) * shape.fh + i) * shape.fw + j];
                            counter.smin_ops += 1;
                            acc += smin(xv, wv);
                        }
                    }
                }
                counter.scalar_muls += 1;
                out.data_mut()[(k * oh + u) * ow + v] = mu_w[k] * acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn smin_truth_table() {
        assert_eq!(smin(0.5, 2.0), 0.5);
        assert_eq!(smin(-3.0, 2.0), -2.0);
        assert_eq!(smin(3.0, -2.0), -2.0);
        assert_eq!(smin(-0.5, -2.0), 0.5);
        for x in [-7.0, -0.1, 0.0, 0.1, 7.0] {
            assert_eq!(smin(x, 0.0), 0.0);
            assert_eq!(smin(0.0, x), 0.0);
        }
    }

    #[test]
    fn smin_matches_sign_product_form_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(-10.0..10.0);
            let b: f64 = rng.gen_range(-10.0..10.0);
            let sign = if (a < 0.0) != (b < 0.0) { -1.0 } else { 1.0 };
            assert_eq!(smin(a, b), sign * a.abs().min(b.abs()));
            assert_eq!(smin(a, b), smin(b, a));
            assert_eq!(smin(-a, b), -smin(a, b));
        }
    }

    #[test]
    fn clip_branches() {
        assert_eq!(clip(5.0, 2.0), 2.0);
        assert_eq!(clip(-5.0, 2.0), -2.0);
        assert_eq!(clip(1.0, 2.0), 1.0);
        assert_eq!(clip_grad(5.0, 2.0), 0.0);
        assert_eq!(clip_grad(-5.0, 2.0), 0.0);
        assert_eq!(clip_grad(1.0, 2.0), 1.0);
        // boundary belongs to the pass-through region
        assert_eq!(clip_grad(2.0, 2.0), 1.0);
        assert_eq!(clip_grad(-2.0, 2.0), 1.0);
    }

    #[test]
    fn rescale_ratio_one_is_identity() {
        let w = Tensor::new(vec![1, 1, 1, 2], vec![0.5, -0.25]).unwrap();
        let mu_w = filter_abs_means(&w);
        let out = rescale_weights(&w, mu_w[0], &mu_w).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn rescale_hand_case() {
        let w = Tensor::new(vec![1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let out = rescale_weights(&w, 2.0, &[1.0]).unwrap();
        assert_eq!(out.data(), [2.0, -2.0]);
    }

    #[test]
    fn rescale_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_tensor(vec![3, 2, 2, 2], &mut rng);
        let mu_w = filter_abs_means(&w);
        let mu_x = 0.7;
        let out = rescale_weights(&w, mu_x, &mu_w).unwrap();
        let per = 8;
        for k in 0..3 {
            for t in 0..per {
                let want = w.data()[k * per + t] * (mu_x / mu_w[k]);
                assert!((out.data()[k * per + t] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rescale_surfaces_zero_filter_and_zero_input() {
        let w = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
        match rescale_weights(&w, 1.0, &filter_abs_means(&w)) {
            Err(Error::ZeroFilter { filter: 0 }) => {}
            other => panic!("expected zero-filter error, got {other:?}"),
        }
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        match rescale_weights(&w, 0.0, &filter_abs_means(&w)) {
            Err(Error::ZeroInputStats) => {}
            other => panic!("expected zero-input-stats error, got {other:?}"),
        }
    }

    #[test]
    fn running_mu_update_rule() {
        let batch = Tensor::new(vec![1, 1, 1, 2], vec![2.0, -2.0]).unwrap();
        let mut stats = AbsMeanStats::<f64>::new(1, 0.0).unwrap();
        stats.mu_x_running = 1.0;
        let (s, mu) = update_running_mu(&stats, &batch).unwrap();
        assert_eq!(mu, 2.0);
        assert_eq!(s.mu_x_running, 2.0); // gamma = 0: running == batch

        stats.gamma = 1.0;
        let (s, _) = update_running_mu(&stats, &batch).unwrap();
        assert_eq!(s.mu_x_running, 1.0); // gamma = 1: unchanged

        stats.gamma = 0.9;
        let (s, _) = update_running_mu(&stats, &batch).unwrap();
        assert!((s.mu_x_running - 1.1).abs() < 1e-12);
    }

    #[test]
    fn exact_forward_matches_unfold_matmul_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = random_tensor(vec![2, 2, 5, 5], &mut rng);
        let w = random_tensor(vec![3, 2, 3, 3], &mut rng);
        let out = exact_conv_forward(&x, &w, shape).unwrap();
        for nidx in 0..2 {
            let img = Tensor::new(
                vec![2, 5, 5],
                x.data()[nidx * 50..(nidx + 1) * 50].to_vec(),
            )
            .unwrap();
            let rows = tensor::unfold(&img, shape).unwrap();
            let wmat = w.clone().reshape(vec![3, 18]).unwrap();
            for k in 0..3 {
                for r in 0..25 {
                    let mut acc = 0.0;
                    for t in 0..18 {
                        acc += rows.at2(r, t) * wmat.at2(k, t);
                    }
                    assert!((out.at4(nidx, k, r / 5, r % 5) - acc).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn approx_forward_zero_input_gives_zero_output() {
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_tensor(vec![2, 1, 3, 3], &mut rng);
        let mu_w = filter_abs_means(&w);
        let out = smin_conv_forward(&x, &w, &mu_w, shape).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn approx_forward_hand_case_equals_exact() {
        // x = [2], w = [0.5], mu_x = 2, mu_w = 0.5:
        // w~ = 2, smin(2, 2) = 2, z = 0.5 * 2 = 1.0 = exact 2 * 0.5.
        let shape = Shape2D::new(1, 1, 1, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let w_tilde = rescale_weights(&w, 2.0, &[0.5]).unwrap();
        assert_eq!(w_tilde.data(), [2.0]);
        let out = smin_conv_forward(&x, &w_tilde, &[0.5], shape).unwrap();
        assert_eq!(out.data(), [1.0]);
    }

    #[test]
    fn approx_forward_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = random_tensor(vec![1, 2, 5, 5], &mut rng);
        let w_tilde = random_tensor(vec![3, 2, 3, 3], &mut rng);
        let mu_w = vec![0.3, 1.1, 0.9];
        let fast = smin_conv_forward(&x, &w_tilde, &mu_w, shape).unwrap();
        let img = Tensor::new(vec![2, 5, 5], x.data().to_vec()).unwrap();
        let mut counter = OpCounter::default();
        let slow = smin_conv_reference(&img, &w_tilde, &mu_w, shape, &mut counter).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(counter.inner_muls, 0);
        assert_eq!(counter.scalar_muls, 3 * 25);
    }

    #[test]
    fn exactness_at_normalized_coincidence() {
        // |x| == mu_x and |w| == mu_w everywhere: the approximation is exact.
        let shape = Shape2D::new(2, 2, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu_x = 1.7;
        let mu_w = 0.4;
        let xdata: Vec<f64> =
            (0..16).map(|_| if rng.gen_bool(0.5) { mu_x } else { -mu_x }).collect();
        let wdata: Vec<f64> =
            (0..8).map(|_| if rng.gen_bool(0.5) { mu_w } else { -mu_w }).collect();
        let x = Tensor::new(vec![1, 1, 4, 4], xdata).unwrap();
        let w = Tensor::new(vec![2, 1, 2, 2], wdata).unwrap();
        let w_tilde = rescale_weights(&w, mu_x, &[mu_w, mu_w]).unwrap();
        let approx = smin_conv_forward(&x, &w_tilde, &[mu_w, mu_w], shape).unwrap();
        let exact = exact_conv_forward(&x, &w, shape).unwrap();
        for (a, b) in approx.data().iter().zip(exact.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_entry_point_dispatches_on_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = random_tensor(vec![1, 2, 6, 6], &mut rng);
        let w = random_tensor(vec![4, 2, 3, 3], &mut rng);
        let exact_layer = ApproxConvLayer::new(w.clone(), shape, 0.99, ConvMode::Exact).unwrap();
        let out = exact_layer.forward(&x, Phase::Infer, None).unwrap();
        let want = exact_conv_forward(&x, &w, shape).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let approx_layer = ApproxConvLayer::new(w.clone(), shape, 0.99, ConvMode::MinApprox).unwrap();
        let mu_x = x.abs_mean();
        let out = approx_layer.forward(&x, Phase::Train, Some(mu_x)).unwrap();
        let (_, w_tilde, mu_w) = approx_layer.prepare_weights(mu_x).unwrap();
        let want = smin_conv_forward(&x, &w_tilde, &mu_w, shape).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = random_tensor(vec![1, 2, 4, 4], &mut rng);
        let w = random_tensor(vec![2, 2, 3, 3], &mut rng);
        let grad_out = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let (gx, gw) = exact_conv_backward(&grad_out, &x, &w, shape).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_pixel_chain_rule() {
        // z = x * w, so grad_x = g * w and grad_w = g * x.
        let shape = Shape2D::new(1, 1, 1, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![-0.5]).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let (gx, gw) = exact_conv_backward(&g, &x, &w, shape).unwrap();
        assert_eq!(gx.data(), [2.0 * -0.5]);
        assert_eq!(gw.data(), [2.0 * 3.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = random_tensor(vec![1, 2, 4, 4], &mut rng);
        let w = random_tensor(vec![2, 2, 3, 3], &mut rng);
        let gout = random_tensor(vec![1, 2, 4, 4], &mut rng);
        let (gx, gw) = exact_conv_backward(&gout, &x, &w, shape).unwrap();

        // scalar objective: <grad_out, conv(x, w)>
        let objective = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let y = exact_conv_forward(x, w, shape).unwrap();
            y.data().iter().zip(gout.data()).map(|(&a, &b)| a * b).sum()
        };
        let step = 1e-5;
        for idx in [0usize, 7, 13, 31] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += step;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= step;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * step);
            let rel = (gx.data()[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "grad_x[{idx}]: analytic {} vs fd {fd}", gx.data()[idx]);
        }
        for idx in [0usize, 5, 17, 35] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += step;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= step;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * step);
            let rel = (gw.data()[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "grad_w[{idx}]: analytic {} vs fd {fd}", gw.data()[idx]);
        }
    }

    #[test]
    fn exact_reference_counts_multiplies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape2D::new(3, 3, 1, 1).unwrap();
        let img = random_tensor(vec![2, 5, 5], &mut rng);
        let w = random_tensor(vec![4, 2, 3, 3], &mut rng);
        let mut counter = OpCounter::default();
        let out = exact_conv_reference(&img, &w, shape, &mut counter).unwrap();
        assert_eq!(out.shape(), [4, 5, 5]);
        // padding positions are skipped, so the count is <= the dense bound
        // and > 0; dense interior pixels contribute the full fh*fw*cin.
        assert!(counter.inner_muls > 0);
        assert!(counter.inner_muls <= 5 * 5 * 4 * 3 * 3 * 2);
        assert_eq!(counter.smin_ops, 0);
    }

    proptest! {
        // |a|<=|a'| and |b|<=|b'| implies |smin(a,b)| <= |smin(a',b')|:
        // the same magnitude monotonicity multiplication has.
        #[test]
        fn smin_is_monotone_in_magnitude(
            a in -5.0f64..5.0, b in -5.0f64..5.0,
            ea in 0.0f64..3.0, eb in 0.0f64..3.0,
            sa in proptest::bool::ANY, sb in proptest::bool::ANY,
        ) {
            let a2 = if sa { a + ea * a.signum() } else { a };
            let b2 = if sb { b + eb * b.signum() } else { b };
            prop_assert!(smin(a, b).abs() <= smin(a2, b2).abs() + 1e-15);
        }

        #[test]
        fn clip_is_idempotent(x in -100.0f64..100.0, alpha in 0.0f64..10.0) {
            prop_assert_eq!(clip(clip(x, alpha), alpha), clip(x, alpha));
        }

        // the running mean moves toward the batch mean without overshooting
        #[test]
        fn running_mu_is_a_contraction(
            gamma in 0.0f64..=1.0,
            running in 0.0f64..5.0,
            val in 0.1f64..5.0,
        ) {
            let mut stats = AbsMeanStats::<f64>::new(1, gamma).unwrap();
            stats.mu_x_running = running;
            let batch = Tensor::filled(vec![1, 1, 2, 2], val);
            let (s, mu) = update_running_mu(&stats, &batch).unwrap();
            let lo = running.min(mu) - 1e-12;
            let hi = running.max(mu) + 1e-12;
            prop_assert!(s.mu_x_running >= lo && s.mu_x_running <= hi);
        }
    }
}
