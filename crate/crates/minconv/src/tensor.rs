//! Minimal dense tensor type and the shape algebra the other modules build on.
//!
//! Feature maps are NCHW, filters are `[c_out, c_in, fh, fw]`. Everything is
//! stored contiguously in row-major order. Element type is generic over
//! [`Scalar`]: `f64` for oracle-grade tests, `f32` for training runs.

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors.
///
/// `gemm` is the only operation with a specialized backend (matrixmultiply's
/// packed SIMD kernels); everything else goes through `num_traits::Float`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) @ op(b) + beta * c` where `op` is a transpose when
    /// the corresponding flag is set. Logical extents after `op` are
    /// `a: [m, k]`, `b: [k, n]`, `c: [m, n]`; storage is row-major of the
    /// untransposed operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(trans: bool, cols: usize) -> (isize, isize) {
    // row-major storage with `cols` columns; a transposed view swaps the
    // roles of the two strides
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn from_f64(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                let (rsa, csa) = gemm_strides(trans_a, if trans_a { m } else { k });
                let (rsb, csb) = gemm_strides(trans_b, if trans_b { k } else { n });
                unsafe {
                    $gemm(
                        m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense N-dimensional array, row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the shape matches the data length
    /// and that every extent is at least 1.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Element at a 2D index; panics on out-of-range (test/debug helper).
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Element at a 4D index; panics on out-of-range (test/debug helper).
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        debug_assert_eq!(self.shape.len(), 4);
        let (sc, sh, sw) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * sc + c) * sh + h) * sw + w]
    }

    /// Mean of |v| over all elements, accumulated in f64.
    pub fn abs_mean(&self) -> T {
        let sum: f64 = self.data.iter().map(|v| v.as_f64().abs()).sum();
        T::from_f64(sum / self.data.len() as f64)
    }
}

/// Spatial geometry of a convolution: filter extents, stride, symmetric
/// zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape2D {
    pub fh: usize,
    pub fw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Shape2D {
    pub fn new(fh: usize, fw: usize, stride: usize, padding: usize) -> Result<Self> {
        if fh == 0 || fw == 0 {
            return Err(Error::Dimension("filter extents must be >= 1".into()));
        }
        if stride == 0 {
            return Err(Error::Dimension("stride must be >= 1".into()));
        }
        Ok(Shape2D { fh, fw, stride, padding })
    }

    /// Filter with "same" padding for stride 1 and odd extents.
    pub fn same(fh: usize, fw: usize) -> Result<Self> {
        Shape2D::new(fh, fw, 1, (fh - 1) / 2)
    }

    /// Output extents for an input of `h x w`; errors if the padded input is
    /// smaller than the filter.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.fh || pw < self.fw {
            return Err(Error::Dimension(format!(
                "padded input {ph}x{pw} smaller than filter {}x{}",
                self.fh, self.fw
            )));
        }
        Ok(((ph - self.fh) / self.stride + 1, (pw - self.fw) / self.stride + 1))
    }
}

/// Unfolds a `[C, H, W]` image into receptive-field rows.
///
/// Row `r` holds the receptive field of output pixel `r` (row-major over the
/// output grid) with columns ordered channel-major then row-major:
/// `t = c * fh * fw + i * fw + j`. Out-of-bounds positions read as zero.
pub fn unfold<T: Scalar>(x: &Tensor<T>, s: Shape2D) -> Result<Tensor<T>> {
    if x.shape().len() != 3 {
        return Err(Error::Dimension(format!("unfold expects [C,H,W], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_h, out_w) = s.out_dims(h, w)?;
    let cols = s.fh * s.fw * c;
    let mut out = vec![T::zero(); out_h * out_w * cols];
    unfold_into(x.data(), c, h, w, s, out_h, out_w, &mut out);
    Tensor::new(vec![out_h * out_w, cols], out)
}

/// Writes the unfold of one `[C, H, W]` image into a preallocated row block.
/// `out` must hold `out_h * out_w * (fh * fw * c)` elements.
pub(crate) fn unfold_into<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    s: Shape2D,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
) {
    let cols = s.fh * s.fw * c;
    let pad = s.padding as isize;
    for oh in 0..out_h {
        for ow in 0..out_w {
            let row = oh * out_w + ow;
            let base = row * cols;
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for i in 0..s.fh {
                    let ih = (oh * s.stride + i) as isize - pad;
                    let dst = base + ch * s.fh * s.fw + i * s.fw;
                    if ih < 0 || ih >= h as isize {
                        out[dst..dst + s.fw].fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for j in 0..s.fw {
                        let iw = (ow * s.stride + j) as isize - pad;
                        out[dst + j] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unfold`]: scatter-adds receptive-field rows back into a
/// `[C, H, W]` image. Padding positions are dropped.
pub fn fold<T: Scalar>(
    rows: &Tensor<T>,
    s: Shape2D,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (out_h, out_w) = s.out_dims(h, w)?;
    let cols = s.fh * s.fw * c;
    if rows.shape() != [out_h * out_w, cols] {
        return Err(Error::Dimension(format!(
            "fold expects [{}, {cols}], got {:?}",
            out_h * out_w,
            rows.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![c, h, w]);
    fold_into(rows.data(), c, h, w, s, out_h, out_w, out.data_mut());
    Ok(out)
}

pub(crate) fn fold_into<T: Scalar>(
    rows: &[T],
    c: usize,
    h: usize,
    w: usize,
    s: Shape2D,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
) {
    let cols = s.fh * s.fw * c;
    let pad = s.padding as isize;
    for oh in 0..out_h {
        for ow in 0..out_w {
            let base = (oh * out_w + ow) * cols;
            for ch in 0..c {
                for i in 0..s.fh {
                    let ih = (oh * s.stride + i) as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..s.fw {
                        let iw = (ow * s.stride + j) as isize - pad;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out[(ch * h + ih as usize) * w + iw as usize] +=
                            rows[base + ch * s.fh * s.fw + i * s.fw + j];
                    }
                }
            }
        }
    }
}

/// Row-major matrix product `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects matrices, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = Tensor::zeros(vec![m, n]);
    T::gemm(false, false, m, k, n, T::one(), a.data(), b.data(), T::zero(), c.data_mut());
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Direct gather of the receptive field of each output pixel.
    fn unfold_oracle(x: &Tensor<f64>, s: Shape2D) -> Tensor<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = s.out_dims(h, w).unwrap();
        let cols = s.fh * s.fw * c;
        let mut out = vec![0.0; oh * ow * cols];
        for r in 0..oh * ow {
            let (u, v) = (r / ow, r % ow);
            for ch in 0..c {
                for i in 0..s.fh {
                    for j in 0..s.fw {
                        let ih = (u * s.stride + i) as isize - s.padding as isize;
                        let iw = (v * s.stride + j) as isize - s.padding as isize;
                        let val = if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                            x.data()[(ch * h + ih as usize) * w + iw as usize]
                        } else {
                            0.0
                        };
                        out[r * cols + ch * s.fh * s.fw + i * s.fw + j] = val;
                    }
                }
            }
        }
        Tensor::new(vec![oh * ow, cols], out).unwrap()
    }

    /// Nested-loop direct convolution of one image by one filter bank.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, s: Shape2D) -> Tensor<f64> {
        let (c, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin, fh, fw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(c, cin);
        let (oh, ow) = s.out_dims(h, ww).unwrap();
        let mut out = vec![0.0; cout * oh * ow];
        for k in 0..cout {
            for u in 0..oh {
                for v in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..cin {
                        for i in 0..fh {
                            for j in 0..fw {
                                let ih = (u * s.stride + i) as isize - s.padding as isize;
                                let iw = (v * s.stride + j) as isize - s.padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < ww {
                                    acc += x.data()[(ch * h + ih as usize) * ww + iw as usize]
                                        * w.data()[((k * cin + ch) * fh + i) * fw + j];
                                }
                            }
                        }
                    }
                    out[(k * oh + u) * ow + v] = acc;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn unfold_identity_case() {
        // 1x1 image, 1x1 filter: a single row with the pixel value.
        let x = Tensor::new(vec![1, 1, 1], vec![3.5]).unwrap();
        let s = Shape2D::new(1, 1, 1, 0).unwrap();
        let u = unfold(&x, s).unwrap();
        assert_eq!(u.shape(), [1, 1]);
        assert_eq!(u.data(), [3.5]);
    }

    #[test]
    fn unfold_constant_input() {
        // 1x3x3 ones, 2x2 filter: 4 rows, each [1,1,1,1].
        let x = Tensor::filled(vec![1, 3, 3], 1.0f64);
        let s = Shape2D::new(2, 2, 1, 0).unwrap();
        let u = unfold(&x, s).unwrap();
        assert_eq!(u.shape(), [4, 4]);
        assert!(u.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unfold_matches_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(vec![2, 4, 4], &mut rng);
        let s = Shape2D::new(3, 3, 1, 1).unwrap();
        let got = unfold(&x, s).unwrap();
        let want = unfold_oracle(&x, s);
        assert_eq!(got, want);
    }

    #[test]
    fn unfold_rejects_too_small_input() {
        let x = Tensor::filled(vec![1, 2, 2], 1.0f64);
        let s = Shape2D::new(3, 3, 1, 0).unwrap();
        assert!(unfold(&x, s).is_err());
    }

    #[test]
    fn unfold_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(vec![2, 5, 5], &mut rng);
        let y = random_tensor(vec![2, 5, 5], &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let s = Shape2D::new(3, 3, 1, 1).unwrap();
        let combined = Tensor::new(
            vec![2, 5, 5],
            x.data().iter().zip(y.data()).map(|(&a, &b)| alpha * a + beta * b).collect(),
        )
        .unwrap();
        let lhs = unfold(&combined, s).unwrap();
        let ux = unfold(&x, s).unwrap();
        let uy = unfold(&y, s).unwrap();
        for ((l, &a), &b) in lhs.data().iter().zip(ux.data()).zip(uy.data()) {
            assert!((l - (alpha * a + beta * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 1]);
        assert_eq!(c.data(), [3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(vec![5, 7], &mut rng);
        let b = random_tensor(vec![7, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..7 {
                    acc += a.at2(i, t) * b.at2(t, j);
                }
                assert!((c.at2(i, j) - acc).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn unfold_matmul_equals_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let c = rng.gen_range(1..=4);
            let h = rng.gen_range(3..=8);
            let w = rng.gen_range(3..=8);
            let f = rng.gen_range(1..=3).min(h).min(w);
            let cout = rng.gen_range(1..=3);
            let pad = rng.gen_range(0..=1);
            let x = random_tensor(vec![c, h, w], &mut rng);
            let wt = random_tensor(vec![cout, c, f, f], &mut rng);
            let s = Shape2D::new(f, f, 1, pad).unwrap();

            let rows = unfold(&x, s).unwrap();
            let wmat = wt.clone().reshape(vec![cout, c * f * f]).unwrap();
            // out[r, k] = rows[r, :] . wmat[k, :]
            let (oh, ow) = s.out_dims(h, w).unwrap();
            let want = conv_oracle(&x, &wt, s);
            for k in 0..cout {
                for r in 0..oh * ow {
                    let mut acc = 0.0;
                    for t in 0..c * f * f {
                        acc += rows.at2(r, t) * wmat.at2(k, t);
                    }
                    let direct = want.data()[k * oh * ow + r];
                    assert!((acc - direct).abs() < 1e-9, "k={k} r={r}");
                }
            }
        }
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        // <unfold(x), R> == <x, fold(R)> for random R: the defining property
        // of the adjoint, which is what the convolution backward relies on.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape2D::new(3, 3, 1, 1).unwrap();
        let x = random_tensor(vec![2, 4, 4], &mut rng);
        let (oh, ow) = s.out_dims(4, 4).unwrap();
        let r = random_tensor(vec![oh * ow, 2 * 9], &mut rng);
        let ux = unfold(&x, s).unwrap();
        let fr = fold(&r, s, 2, 4, 4).unwrap();
        let lhs: f64 = ux.data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(fr.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
