use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{CarError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value was computed outside the tape and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, in the order the inputs were recorded.
    /// `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Upsample2 {
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Square {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable operations for one forward/backward pass.
///
/// A tape belongs to one logical thread. Independent tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `value`. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Shorthand for a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient of `v`, avoiding a copy.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        bias: Option<Var>,
    ) -> Result<Var> {
        let keep = self.requires_grad(kernel);
        let (out, cols) = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            stride,
            padding,
            bias.map(|b| self.value(b)),
            keep,
        )?;
        let geom = kernels::conv_plan(
            self.value(input),
            self.value(kernel),
            stride,
            padding,
            None,
        )?
        .geom;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Stride-2 convolution (3×3 kernels use padding 1) that halves both spatial extents.
    pub fn downsample_stride2(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let [_, _, h, w] = kernels::four(self.value(x), "downsample_stride2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CarError::shape(
                "downsample_stride2",
                format!("spatial extents must be even, got {}x{}", h, w),
            ));
        }
        let kh = self.shape(kernel).get(2).copied().unwrap_or(0);
        self.conv2d(x, kernel, 2, kh / 2, bias)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(CarError::invalid(format!(
                "leaky_relu slope must lie in (0,1), got {}",
                slope
            )));
        }
        let v = self.value(x);
        let data = v.data().iter().map(|&a| kernels::leaky_relu(a, slope)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::LeakyRelu { x, slope }))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Upsample2 { x }))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = kernels::four(self.value(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CarError::shape(
                "avg_pool2",
                format!("spatial extents must be even, got {}x{}", h, w),
            ));
        }
        let mut data = kernels::sum_pool2(self.value(x).data(), n, c, h / 2, w / 2);
        data.iter_mut().for_each(|v| *v *= 0.25);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::AvgPool2 { x }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = kernels::four(self.value(a), "concat_channels")?;
        let [nb, cb, hb, wb] = kernels::four(self.value(b), "concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return Err(CarError::shape(
                "concat_channels",
                format!(
                    "N,H,W must agree: ({},{},{}) vs ({},{},{})",
                    na, ha, wa, nb, hb, wb
                ),
            ));
        }
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut data = Vec::with_capacity(na * (pa + pb));
        for s in 0..na {
            data.extend_from_slice(&self.value(a).data()[s * pa..(s + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[s * pb..(s + 1) * pb]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b }))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tb.rank() == 0 {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if ta.rank() == 0 {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            return Tensor::new(tb.shape().to_vec(), data);
        }
        Err(CarError::shape(
            op,
            format!(
                "operands {:?} and {:?} differ; only scalar broadcasting is supported",
                ta.shape(),
                tb.shape()
            ),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * factor).collect();
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Scale { x, factor })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * a).collect();
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Square { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), rg, Op::Mean { x })
    }

    /// Records a node whose value was computed by the caller and whose
    /// backward rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a rank-0 `loss`, seeding its gradient with 1.
    ///
    /// Gradients from several consumers of one node add up. Previous
    /// gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).rank() != 0 {
            return Err(CarError::shape(
                "backward",
                format!("loss must be rank-0, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(g);
                continue;
            }
            let contributions = self.node_backward(idx, g.data());
            for (var, grad) in contributions {
                self.accumulate(var, grad);
            }
            // interior nodes keep their gradient so callers may inspect it
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, grad: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, g) in existing.data.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor { shape, data: grad });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let n = x.shape()[0];
                let cout = w.shape()[0];
                let (k, ol) = (geom.patch_len(), geom.out_len());
                let in_len = geom.cin * geom.h * geom.w;
                if self.wants(*kernel) {
                    let mut dw = vec![0.0; cout * k];
                    for s in 0..n {
                        let col: &[f64] = if geom.is_pointwise() {
                            &x.data()[s * in_len..(s + 1) * in_len]
                        } else {
                            &cols[s * k * ol..(s + 1) * k * ol]
                        };
                        let gs = &g[s * cout * ol..(s + 1) * cout * ol];
                        kernels::gemm(cout, ol, k, gs, false, col, true, &mut dw, true);
                    }
                    out.push((*kernel, dw));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; cout];
                        for s in 0..n {
                            for (co, d) in db.iter_mut().enumerate() {
                                let off = (s * cout + co) * ol;
                                *d += g[off..off + ol].iter().sum::<f64>();
                            }
                        }
                        out.push((*b, db));
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * in_len];
                    let mut dcol = vec![0.0; k * ol];
                    for s in 0..n {
                        let gs = &g[s * cout * ol..(s + 1) * cout * ol];
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if geom.is_pointwise() {
                            kernels::gemm(k, cout, ol, w.data(), true, gs, false, dxs, false);
                        } else {
                            kernels::gemm(k, cout, ol, w.data(), true, gs, false, &mut dcol, false);
                            kernels::col2im(&dcol, geom, dxs);
                        }
                    }
                    out.push((*input, dx));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&a, &gi)| if a >= 0.0 { gi } else { slope * gi })
                    .collect();
                out.push((*x, d));
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = dims(self.value(*x));
                out.push((*x, kernels::sum_pool2(g, n, c, h, w)));
            }
            Op::AvgPool2 { x } => {
                let [n, c, h, w] = dims(self.value(*x));
                let (h2, w2) = (h / 2, w / 2);
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = 0.25 * g[(p * h2 + y / 2) * w2 + xx / 2];
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = dims(self.value(*a));
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let base = s * (pa + pb);
                    da.extend_from_slice(&g[base..base + pa]);
                    db.extend_from_slice(&g[base + pa..base + pa + pb]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Add { a, b } => {
                out.push((*a, self.reduce_to(*a, g.to_vec())));
                out.push((*b, self.reduce_to(*b, g.to_vec())));
            }
            Op::Sub { a, b } => {
                out.push((*a, self.reduce_to(*a, g.to_vec())));
                out.push((*b, self.reduce_to(*b, g.iter().map(|v| -v).collect())));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let pick = |t: &Tensor, i: usize| {
                    if t.rank() == 0 {
                        t.item()
                    } else {
                        t.data()[i]
                    }
                };
                let da = (0..g.len()).map(|i| g[i] * pick(bv, i)).collect();
                let db = (0..g.len()).map(|i| g[i] * pick(av, i)).collect();
                out.push((*a, self.reduce_to(*a, da)));
                out.push((*b, self.reduce_to(*b, db)));
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.iter().map(|v| v * factor).collect()));
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                out.push((*x, xv.iter().zip(g).map(|(a, gi)| 2.0 * a * gi).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }

    /// Sums a broadcast gradient back down to a rank-0 operand.
    fn reduce_to(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.value(v).rank() == 0 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }
}

fn dims(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_one_by_one_conv() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[1, 1, 3, 4], &data));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0, None).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn all_ones_kernel_sums_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0, None).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 45.0);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, k, 1, 1, None).unwrap_err().to_string();
        assert!(err.contains("Cin=3"), "{}", err);
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 3.0, 0.0]), true);
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 3.0, 0.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // derivative at exactly 0 takes the positive branch
        assert_eq!(tape.grad(x).unwrap().data(), &[0.2, 1.0, 1.0]);
        assert!(tape.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn down_and_up_sampling_shapes() {
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 0.1));
        x = tape.downsample_stride2(x, k, None).unwrap();
        assert_eq!(tape.shape(x), &[1, 1, 32, 32]);
        for _ in 0..3 {
            x = tape.downsample_stride2(x, k, None).unwrap();
        }
        assert_eq!(tape.shape(x), &[1, 1, 4, 4]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(tape.downsample_stride2(odd, k, None).is_err());

        let seven = tape.constant(t(&[1, 1, 1, 1], &[7.0]));
        let up = tape.upsample_nearest2(seven).unwrap();
        assert_eq!(tape.value(up).data(), &[7.0; 4]);
    }

    #[test]
    fn upsample_then_avg_pool_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..18).map(|i| (i as f64).sqrt()).collect();
        let x = tape.constant(t(&[1, 2, 3, 3], &data));
        let up = tape.upsample_nearest2(x).unwrap();
        let back = tape.avg_pool2(up).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn concat_preserves_order() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 2, 4, 4], 1.0));
        let b = tape.constant(Tensor::full(&[1, 3, 4, 4], 2.0));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        assert!(tape.value(c).data()[..32].iter().all(|&v| v == 1.0));
        assert!(tape.value(c).data()[32..].iter().all(|&v| v == 2.0));
        let bad = tape.constant(Tensor::zeros(&[1, 1, 4, 5]));
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1., 2., 3., 4.]), true);
        let m = tape.reduce_mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        let z = tape.sub(x, x).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let other = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(x, other).is_err());
        let two = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, two).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn backward_simple_graphs() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 5.]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.constant(t(&[2], &[3., 4.]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3., 4.]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn fan_out_gradients_add() {
        let data = [0.3, -1.2, 2.0];
        // two consumers of one leaf
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &data), true);
        let a = tape.square(x);
        let b = tape.scale(x, 5.0);
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let l = tape.add(sa, sb).unwrap();
        tape.backward(l).unwrap();
        let both = tape.grad(x).unwrap().clone();

        let mut single = vec![0.0; 3];
        for branch in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[3], &data), true);
            let y = if branch == 0 { tape.square(x) } else { tape.scale(x, 5.0) };
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            for (acc, g) in single.iter_mut().zip(tape.grad(x).unwrap().data()) {
                *acc += g;
            }
        }
        for (a, b) in both.data().iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
