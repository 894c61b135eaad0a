//! Dense row-major tensors, im2col lowering and the reference convolution.
//!
//! Every partitioned path in the crate is checked against [`conv_reference`],
//! so it is written as a direct nested loop with no shared code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", n, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zero tensor with empty dimension")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor::new(shape.to_vec(), data).expect("tensor with empty dimension")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Shape as `[rows, cols]`, failing for anything but a matrix.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, "rank-2 tensor", format!("{:?}", self.shape))),
        }
    }

    /// Transpose a `[rows, cols]` matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Geometry of a 2-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub k1: usize,
    pub k2: usize,
    pub c_out: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(c_in: usize, k1: usize, k2: usize, c_out: usize) -> Self {
        ConvSpec {
            c_in,
            k1,
            k2,
            c_out,
            stride: 1,
            padding: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.k1 == 0 || self.k2 == 0 || self.c_out == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv dimensions and stride must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Unrolled input dimension `c_in * k1 * k2`.
    pub fn unrolled_dim(&self) -> usize {
        self.c_in * self.k1 * self.k2
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.k1 || pw < self.k2 {
            return Err(Error::shape(
                "conv output size",
                format!("padded input >= {}x{}", self.k1, self.k2),
                format!("{ph}x{pw}"),
            ));
        }
        Ok(((ph - self.k1) / self.stride + 1, (pw - self.k2) / self.stride + 1))
    }

    fn check_input(&self, input: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        match input.shape()[..] {
            [c, h, w] if c == self.c_in => Ok((h, w)),
            _ => Err(Error::shape(
                op,
                format!("[{}, H, W]", self.c_in),
                format!("{:?}", input.shape()),
            )),
        }
    }
}

/// Kernel unrolled into a `D x c_out` matrix, row `((c * k1 + r) * k2 + q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledKernel {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl UnrolledKernel {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::shape(
                "UnrolledKernel::new",
                format!("{rows}x{cols} = {} values", rows * cols),
                data.len(),
            ));
        }
        Ok(UnrolledKernel { rows, cols, data })
    }

    /// Unroll a `[c_in, k1, k2, c_out]` kernel. The row-major layout already
    /// matches the canonical `(c, r, q)` row order, so this is a reshape.
    pub fn from_kernel(kernel: &Tensor, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let expected = [spec.c_in, spec.k1, spec.k2, spec.c_out];
        if kernel.shape() != expected {
            return Err(Error::shape(
                "UnrolledKernel::from_kernel",
                format!("{expected:?}"),
                format!("{:?}", kernel.shape()),
            ));
        }
        UnrolledKernel::new(spec.unrolled_dim(), spec.c_out, kernel.data().to_vec())
    }

    pub fn to_kernel(&self, spec: &ConvSpec) -> Result<Tensor> {
        if self.rows != spec.unrolled_dim() || self.cols != spec.c_out {
            return Err(Error::shape(
                "UnrolledKernel::to_kernel",
                format!("{}x{}", spec.unrolled_dim(), spec.c_out),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Tensor::new(vec![spec.c_in, spec.k1, spec.k2, spec.c_out], self.data.clone())
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("validated dims")
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Lower `[c_in, H, W]` input into a `[P, D]` patch matrix.
///
/// Output positions are row-major over `(oy, ox)`; columns follow the
/// canonical `(c, r, q)` kernel-row order. Out-of-bounds taps read zero.
pub fn im2col(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, w) = spec.check_input(input, "im2col")?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let d = spec.unrolled_dim();
    let p = oh * ow;
    let src = input.data();
    let pad = spec.padding as isize;
    let mut out = vec![0.0; p * d];
    par::for_each_chunk_mut(&mut out, d, |pos, row| {
        let oy = (pos / ow) as isize;
        let ox = (pos % ow) as isize;
        let mut col = 0;
        for c in 0..spec.c_in {
            for r in 0..spec.k1 {
                let iy = oy * spec.stride as isize + r as isize - pad;
                for q in 0..spec.k2 {
                    let ix = ox * spec.stride as isize + q as isize - pad;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        row[col] = src[(c * h + iy as usize) * w + ix as usize];
                    }
                    col += 1;
                }
            }
        }
    });
    Tensor::new(vec![p, d], out)
}

/// Scatter-add a `[P, D]` patch-gradient matrix back onto a `[c_in, H, W]` input.
///
/// Accumulation runs over positions in ascending order, so the result is
/// deterministic.
pub fn col2im(cols: &Tensor, spec: &ConvSpec, h: usize, w: usize) -> Result<Tensor> {
    let (oh, ow) = spec.output_hw(h, w)?;
    let (p, d) = cols.matrix_dims("col2im")?;
    if p != oh * ow || d != spec.unrolled_dim() {
        return Err(Error::shape(
            "col2im",
            format!("[{}, {}]", oh * ow, spec.unrolled_dim()),
            format!("[{p}, {d}]"),
        ));
    }
    let pad = spec.padding as isize;
    let src = cols.data();
    let mut out = vec![0.0; spec.c_in * h * w];
    for pos in 0..p {
        let oy = (pos / ow) as isize;
        let ox = (pos % ow) as isize;
        let row = &src[pos * d..(pos + 1) * d];
        let mut col = 0;
        for c in 0..spec.c_in {
            for r in 0..spec.k1 {
                let iy = oy * spec.stride as isize + r as isize - pad;
                for q in 0..spec.k2 {
                    let ix = ox * spec.stride as isize + q as isize - pad;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        out[(c * h + iy as usize) * w + ix as usize] += row[col];
                    }
                    col += 1;
                }
            }
        }
    }
    Tensor::new(vec![spec.c_in, h, w], out)
}

/// Direct nested-loop convolution, returning `[c_out, OH, OW]`.
pub fn conv_reference(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, w) = spec.check_input(input, "conv_reference")?;
    let expected = [spec.c_in, spec.k1, spec.k2, spec.c_out];
    if kernel.shape() != expected {
        return Err(Error::shape(
            "conv_reference kernel",
            format!("{expected:?}"),
            format!("{:?}", kernel.shape()),
        ));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; spec.c_out * oh * ow];
    for co in 0..spec.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..spec.c_in {
                    for r in 0..spec.k1 {
                        for q in 0..spec.k2 {
                            let iy = (oy * spec.stride + r) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + q) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let xv = x[(c * h + iy as usize) * w + ix as usize];
                            let kv = k[((c * spec.k1 + r) * spec.k2 + q) * spec.c_out + co];
                            acc += xv * kv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![spec.c_out, oh, ow], out)
}

/// `[P, C]` position-major output to `[C, OH, OW]` channel-major layout.
pub fn positions_to_chw(pc: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (p, c) = pc.matrix_dims("positions_to_chw")?;
    if p != oh * ow {
        return Err(Error::shape("positions_to_chw", oh * ow, p));
    }
    let t = pc.transpose()?;
    t.reshape(vec![c, oh, ow])
}

/// `[C, OH, OW]` channel-major to `[P, C]` position-major.
pub fn chw_to_positions(chw: &Tensor) -> Result<Tensor> {
    match chw.shape()[..] {
        [c, h, w] => Tensor::new(vec![c, h * w], chw.data().to_vec())?.transpose(),
        _ => Err(Error::shape("chw_to_positions", "[C, H, W]", format!("{:?}", chw.shape()))),
    }
}

/// Matrix product with summation over the inner dimension in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, d) = a.matrix_dims("matmul lhs")?;
    let (d2, c) = b.matrix_dims("matmul rhs")?;
    if d != d2 {
        return Err(Error::shape("matmul inner dim", d, d2));
    }
    let av = a.data();
    let bv = b.data();
    let mut out = vec![0.0; p * c];
    par::for_each_chunk_mut(&mut out, c, |row, acc| {
        let arow = &av[row * d..(row + 1) * d];
        for (i, &x) in arow.iter().enumerate() {
            let brow = &bv[i * c..(i + 1) * c];
            for (o, &wv) in acc.iter_mut().zip(brow) {
                *o += x * wv;
            }
        }
    });
    Tensor::new(vec![p, c], out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, at: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = at.clone();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe);
        probe.data[i] = orig - eps;
        let lo = f(&probe);
        probe.data[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at element {i}: f(x+eps)={hi}, f(x-eps)={lo}"
            )));
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::new(at.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    // Independent patch extractor: walks the receptive field per output
    // position without sharing loop structure with im2col.
    fn patches_oracle(x: &Tensor, spec: &ConvSpec) -> Vec<Vec<f64>> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = spec.output_hw(h, w).unwrap();
        let mut rows = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = Vec::new();
                for ci in 0..c {
                    for r in 0..spec.k1 {
                        for q in 0..spec.k2 {
                            let y = (oy * spec.stride + r) as i64 - spec.padding as i64;
                            let xx = (ox * spec.stride + q) as i64 - spec.padding as i64;
                            let inside = (0..h as i64).contains(&y) && (0..w as i64).contains(&xx);
                            row.push(if inside {
                                x.data()[ci * h * w + y as usize * w + xx as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
                rows.push(row);
            }
        }
        rows
    }

    #[test]
    fn im2col_identity_case() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let cols = im2col(&x, &ConvSpec::new(1, 1, 1, 1)).unwrap();
        assert_eq!(cols.shape(), &[1, 1]);
        assert_eq!(cols.data(), &[5.0]);
    }

    #[test]
    fn im2col_single_position() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, &ConvSpec::new(1, 2, 2, 1)).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_matches_patch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 4, 4], &mut rng);
        let spec = ConvSpec::new(2, 3, 3, 1);
        let cols = im2col(&x, &spec).unwrap();
        assert_eq!(cols.shape(), &[4, 18]);
        let oracle: Vec<f64> = patches_oracle(&x, &spec).into_iter().flatten().collect();
        assert_eq!(cols.data(), &oracle[..]);

        let strided = ConvSpec::new(2, 3, 3, 1).with_stride(2).with_padding(1);
        let cols = im2col(&x, &strided).unwrap();
        let oracle: Vec<f64> = patches_oracle(&x, &strided).into_iter().flatten().collect();
        assert_eq!(cols.data(), &oracle[..]);
    }

    #[test]
    fn im2col_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let err = im2col(&x, &ConvSpec::new(2, 3, 3, 1)).unwrap_err();
        assert!(err.to_string().contains("[3, 4, 4]"), "{err}");
    }

    #[test]
    fn conv_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 5], &mut rng);
        let spec = ConvSpec::new(2, 3, 3, 2);
        let y = conv_reference(&x, &Tensor::zeros(&[2, 3, 3, 2]), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x1 = random(&[1, 4, 3], &mut rng);
        let id = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv_reference(&x1, &id, &ConvSpec::new(1, 1, 1, 1)).unwrap();
        assert_eq!(y, x1);
    }

    #[test]
    fn conv_matches_im2col_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            ConvSpec::new(2, 3, 3, 2),
            ConvSpec::new(2, 3, 3, 2).with_padding(1),
            ConvSpec::new(2, 2, 3, 3).with_stride(2).with_padding(1),
        ] {
            let x = random(&[2, 5, 5], &mut rng);
            let k = random(&[spec.c_in, spec.k1, spec.k2, spec.c_out], &mut rng);
            let y = conv_reference(&x, &k, &spec).unwrap();
            let uk = UnrolledKernel::from_kernel(&k, &spec).unwrap();
            let pc = matmul(&im2col(&x, &spec).unwrap(), &uk.as_tensor()).unwrap();
            let (oh, ow) = spec.output_hw(5, 5).unwrap();
            let via = positions_to_chw(&pc, oh, ow).unwrap();
            for (a, b) in y.data().iter().zip(via.data()) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn matmul_small_cases() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(&[3, 2], &mut rng);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert_eq!(got.data()[i * 2 + j], s);
            }
        }
        assert_eq!(matmul(&a, &b).unwrap(), got);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)> for any x, g.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(3, 3, 2, 1).with_stride(2).with_padding(1);
        let x = random(&[3, 6, 5], &mut rng);
        let cols = im2col(&x, &spec).unwrap();
        let g = random(cols.shape(), &mut rng);
        let back = col2im(&g, &spec, 6, 5).unwrap();
        let lhs: f64 = cols.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_basics() {
        let at = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &at, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 3.0, &at, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        assert!(finite_diff_grad(|_| f64::NAN, &at, 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &at, 0.0).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
