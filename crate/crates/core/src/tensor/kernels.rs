//! Tape-free numeric kernels shared by the differentiable ops and by
//! forward-only callers such as the contrast augmentation.

use super::Tensor;
use crate::error::{CarError, Result};

/// `C (m×n) = op(A) (m×k) · op(B) (k×n)`, all row-major; `accumulate` adds into `C`.
///
/// With `trans_a` the buffer `a` holds a `k×m` matrix, with `trans_b` the
/// buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(CarError::invalid("conv2d stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CarError::shape(
                "conv2d",
                format!("kernel extents must be odd, got {}x{}", kh, kw),
            ));
        }
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        if ph < kh || pw < kw {
            return Err(CarError::shape(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    kh, kw, ph, pw
                ),
            ));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `Cin×H×W` image into a `(Cin·kh·kw) × (Ho·Wo)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * out_len;
                let dst = &mut col[row..row + out_len];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image, adding into `dx`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * out_len;
                let src = &col[row..row + out_len];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvPlan {
    pub n: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

pub(crate) fn conv_plan(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    bias: Option<&Tensor>,
) -> Result<ConvPlan> {
    let [n, cin, h, w] = match input.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        s => {
            return Err(CarError::shape(
                "conv2d",
                format!("input must be N×C×H×W, got {:?}", s),
            ))
        }
    };
    let [cout, kcin, kh, kw] = match kernel.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => {
            return Err(CarError::shape(
                "conv2d",
                format!("kernel must be Cout×Cin×kh×kw, got {:?}", s),
            ))
        }
    };
    if kcin != cin {
        return Err(CarError::shape(
            "conv2d",
            format!("input channels {} but kernel expects Cin={}", cin, kcin),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(CarError::shape(
                "conv2d",
                format!("bias shape {:?} but Cout={}", b.shape(), cout),
            ));
        }
    }
    let geom = ConvGeom::new(cin, h, w, kh, kw, stride, pad)?;
    Ok(ConvPlan { n, cout, geom })
}

/// Cross-correlation of `input` (N×Cin×H×W) with `kernel` (Cout×Cin×kh×kw).
///
/// Returns the output and, when `keep_cols` is set, the unfolded input
/// columns for every sample (reused by the kernel gradient).
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    bias: Option<&Tensor>,
    keep_cols: bool,
) -> Result<(Tensor, Vec<f64>)> {
    let plan = conv_plan(input, kernel, stride, pad, bias)?;
    let g = plan.geom;
    let (k, ol) = (g.patch_len(), g.out_len());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; plan.n * plan.cout * ol];
    let mut kept = if keep_cols && !g.is_pointwise() {
        vec![0.0; plan.n * k * ol]
    } else {
        Vec::new()
    };
    let mut scratch = if !keep_cols && !g.is_pointwise() {
        vec![0.0; k * ol]
    } else {
        Vec::new()
    };
    for s in 0..plan.n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let col: &[f64] = if g.is_pointwise() {
            x
        } else if keep_cols {
            let c = &mut kept[s * k * ol..(s + 1) * k * ol];
            im2col(x, &g, c);
            c
        } else {
            im2col(x, &g, &mut scratch);
            &scratch
        };
        let y = &mut out[s * plan.cout * ol..(s + 1) * plan.cout * ol];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(ol).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        gemm(
            plan.cout,
            k,
            ol,
            kernel.data(),
            false,
            col,
            false,
            y,
            bias.is_some(),
        );
    }
    let out = Tensor::new(vec![plan.n, plan.cout, g.ho, g.wo], out)?;
    Ok((out, kept))
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = four(x, "upsample_nearest2")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

/// Adjoint of nearest ×2 upsampling: sums each 2×2 block.
pub(crate) fn sum_pool2(g: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    out
}

pub(crate) fn four(x: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match x.shape() {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        s => Err(CarError::shape(
            op,
            format!("expected N×C×H×W, got {:?}", s),
        )),
    }
}
