//! Training objective: negative LNCC similarity, squared-gradient smoothness
//! of the displacement, and the latent contrast-invariance penalty.

use crate::error::{CarError, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::warp::warp_var;

/// Default LNCC window side.
pub const LNCC_WINDOW: usize = 9;
/// Stabilizer added to the LNCC denominator.
pub const LNCC_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// smoothness weight
    pub lambda1: f64,
    /// contrast-invariance weight
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(CarError::invalid(format!(
                "loss weights must be non-negative, got {} and {}",
                lambda1, lambda2
            )));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

/// Scalar values of each term; `total = sim + lambda1·reg + lambda2·contrast`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub sim: f64,
    pub reg: f64,
    pub contrast: f64,
    pub total: f64,
}

fn spatial(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(CarError::shape(op, format!("need at least 2 dims, got {:?}", s)));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Separable box sum with clamped (replicated) borders; every window holds
/// exactly `(2r+1)²` samples.
fn box_sum(x: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let ri = r as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for k in -ri..=ri {
            let src = (i as isize + k).clamp(0, h as isize - 1) as usize;
            let (dst, row) = (&mut tmp[i * w..(i + 1) * w], &x[src * w..(src + 1) * w]);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let row = &tmp[i * w..(i + 1) * w];
        for j in 0..w {
            let mut acc = 0.0;
            for k in -ri..=ri {
                acc += row[(j as isize + k).clamp(0, w as isize - 1) as usize];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Adjoint of [`box_sum`].
fn box_sum_adjoint(g: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let ri = r as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let gv = g[i * w + j];
            for k in -ri..=ri {
                tmp[i * w + (j as isize + k).clamp(0, w as isize - 1) as usize] += gv;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for k in -ri..=ri {
            let dst = (i as isize + k).clamp(0, h as isize - 1) as usize;
            for j in 0..w {
                out[dst * w + j] += tmp[i * w + j];
            }
        }
    }
    out
}

struct LnccStats {
    sa: Vec<f64>,
    sb: Vec<f64>,
    cross: Vec<f64>,
    va: Vec<f64>,
    vb: Vec<f64>,
    value: f64,
}

fn lncc_stats(a: &[f64], b: &[f64], h: usize, w: usize, window: usize) -> LnccStats {
    let r = window / 2;
    let n = (window * window) as f64;
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let sa = box_sum(a, h, w, r);
    let sb = box_sum(b, h, w, r);
    let saa = box_sum(&prod(&|i| a[i] * a[i]), h, w, r);
    let sbb = box_sum(&prod(&|i| b[i] * b[i]), h, w, r);
    let sab = box_sum(&prod(&|i| a[i] * b[i]), h, w, r);
    let mut cross = vec![0.0; h * w];
    let mut va = vec![0.0; h * w];
    let mut vb = vec![0.0; h * w];
    let mut total = 0.0;
    for i in 0..h * w {
        cross[i] = sab[i] - sa[i] * sb[i] / n;
        va[i] = saa[i] - sa[i] * sa[i] / n;
        vb[i] = sbb[i] - sb[i] * sb[i] / n;
        total += cross[i] * cross[i] / (va[i] * vb[i] + LNCC_EPS);
    }
    LnccStats {
        sa,
        sb,
        cross,
        va,
        vb,
        value: total / (h * w) as f64,
    }
}

fn check_lncc_args(a: &Tensor, b: &Tensor, window: usize) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(CarError::shape(
            "lncc",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (h, w) = spatial(a, "lncc")?;
    if a.numel() != h * w {
        return Err(CarError::shape("lncc", "inputs must be single-plane images"));
    }
    if window % 2 == 0 || window == 0 {
        return Err(CarError::invalid(format!("lncc window must be odd, got {}", window)));
    }
    if window > h.min(w) {
        return Err(CarError::invalid(format!(
            "lncc window {} exceeds image extent {}x{}",
            window, h, w
        )));
    }
    Ok((h, w))
}

/// Mean squared local correlation of two single-plane images, in `[0, 1]`.
pub fn lncc_value(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    let (h, w) = check_lncc_args(a, b, window)?;
    Ok(lncc_stats(a.data(), b.data(), h, w, window).value)
}

struct LnccOp {
    h: usize,
    w: usize,
    window: usize,
    stats: LnccStats,
}

impl CustomOp for LnccOp {
    fn name(&self) -> &'static str {
        "lncc"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (h, w, r) = (self.h, self.w, self.window / 2);
        let n = (self.window * self.window) as f64;
        let p = (h * w) as f64;
        let st = &self.stats;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut gc = vec![0.0; h * w];
        let mut gva = vec![0.0; h * w];
        let mut gvb = vec![0.0; h * w];
        for i in 0..h * w {
            let d = st.va[i] * st.vb[i] + LNCC_EPS;
            let c2 = st.cross[i] * st.cross[i];
            gc[i] = g[0] * 2.0 * st.cross[i] / d / p;
            gva[i] = -g[0] * c2 * st.vb[i] / (d * d) / p;
            gvb[i] = -g[0] * c2 * st.va[i] / (d * d) / p;
        }
        let adj = |v: &[f64]| box_sum_adjoint(v, h, w, r);
        let scaled = |v: &[f64], s: &[f64]| -> Vec<f64> {
            v.iter().zip(s).map(|(x, y)| x * y / n).collect()
        };
        let t_gc = adj(&gc);
        let t_gva = adj(&gva);
        let t_gvb = adj(&gvb);
        let t_gc_sb = adj(&scaled(&gc, &st.sb));
        let t_gc_sa = adj(&scaled(&gc, &st.sa));
        let t_gva_sa = adj(&scaled(&gva, &st.sa));
        let t_gvb_sb = adj(&scaled(&gvb, &st.sb));
        let mut da = vec![0.0; h * w];
        let mut db = vec![0.0; h * w];
        for q in 0..h * w {
            da[q] = b[q] * t_gc[q] - t_gc_sb[q] + 2.0 * (a[q] * t_gva[q] - t_gva_sa[q]);
            db[q] = a[q] * t_gc[q] - t_gc_sa[q] + 2.0 * (b[q] * t_gvb[q] - t_gvb_sb[q]);
        }
        vec![Some(da), Some(db)]
    }
}

/// Differentiable LNCC (positive; the training objective negates it).
pub fn lncc(tape: &mut Tape, a: Var, b: Var, window: usize) -> Result<Var> {
    let (h, w) = check_lncc_args(tape.value(a), tape.value(b), window)?;
    let stats = lncc_stats(tape.value(a).data(), tape.value(b).data(), h, w, window);
    let out = Tensor::scalar(stats.value);
    Ok(tape.custom(
        &[a, b],
        out,
        Box::new(LnccOp {
            h,
            w,
            window,
            stats,
        }),
    ))
}

struct SmoothnessOp {
    h: usize,
    w: usize,
}

fn smoothness_value(u: &[f64], h: usize, w: usize) -> f64 {
    let planes = u.len() / (h * w);
    let mut acc = 0.0;
    for p in 0..planes {
        let pl = &u[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let v = pl[r * w + c];
                if r + 1 < h {
                    acc += (pl[(r + 1) * w + c] - v).powi(2);
                }
                if c + 1 < w {
                    acc += (pl[r * w + c + 1] - v).powi(2);
                }
            }
        }
    }
    acc / u.len() as f64
}

impl CustomOp for SmoothnessOp {
    fn name(&self) -> &'static str {
        "smoothness"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (self.h, self.w);
        let u = inputs[0].data();
        let k = 2.0 * g[0] / u.len() as f64;
        let mut d = vec![0.0; u.len()];
        for p in 0..u.len() / (h * w) {
            let off = p * h * w;
            for r in 0..h {
                for c in 0..w {
                    let i = off + r * w + c;
                    if r + 1 < h {
                        let diff = u[i + w] - u[i];
                        d[i + w] += k * diff;
                        d[i] -= k * diff;
                    }
                    if c + 1 < w {
                        let diff = u[i + 1] - u[i];
                        d[i + 1] += k * diff;
                        d[i] -= k * diff;
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

/// Mean over pixels and channels of squared forward differences of the
/// displacement in both directions.
pub fn smoothness(tape: &mut Tape, field: Var) -> Result<Var> {
    let (h, w) = spatial(tape.value(field), "smoothness")?;
    let v = smoothness_value(tape.value(field).data(), h, w);
    Ok(tape.custom(&[field], Tensor::scalar(v), Box::new(SmoothnessOp { h, w })))
}

/// Squared distance between projections of the two contrast renderings,
/// summed over channels and averaged over latent positions, for both the
/// moving and the fixed branch.
pub fn contrast_invariance(
    tape: &mut Tape,
    p_m1: Var,
    p_m2: Var,
    p_f1: Var,
    p_f2: Var,
) -> Result<Var> {
    let shape = tape.shape(p_m1).to_vec();
    for v in [p_m2, p_f1, p_f2] {
        if tape.shape(v) != shape.as_slice() {
            return Err(CarError::shape(
                "contrast_invariance",
                format!("{:?} vs {:?}", shape, tape.shape(v)),
            ));
        }
    }
    let (nx, ny) = spatial(tape.value(p_m1), "contrast_invariance")?;
    let dm = tape.sub(p_m1, p_m2)?;
    let df = tape.sub(p_f1, p_f2)?;
    let sm = tape.square(dm);
    let sf = tape.square(df);
    let sm = tape.sum(sm);
    let sf = tape.sum(sf);
    let s = tape.add(sm, sf)?;
    Ok(tape.scale(s, 1.0 / (nx * ny) as f64))
}

/// Similarity and regularization of one registration pass: `-LNCC(M∘φ, F)`
/// and the field smoothness.
pub fn pass_terms(
    tape: &mut Tape,
    moving: Var,
    fixed: Var,
    field: Var,
    window: usize,
) -> Result<(Var, Var)> {
    let warped = warp_var(tape, moving, field)?;
    let cc = lncc(tape, warped, fixed, window)?;
    let sim = tape.scale(cc, -1.0);
    let reg = smoothness(tape, field)?;
    Ok((sim, reg))
}

/// Averages the per-pass terms and adds the weighted contrast term.
pub fn combine(
    tape: &mut Tape,
    passes: &[(Var, Var)],
    contrast: Option<Var>,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if passes.is_empty() {
        return Err(CarError::invalid("at least one registration pass is required"));
    }
    let k = 1.0 / passes.len() as f64;
    let mut sim = passes[0].0;
    let mut reg = passes[0].1;
    for &(s, r) in &passes[1..] {
        sim = tape.add(sim, s)?;
        reg = tape.add(reg, r)?;
    }
    let sim = tape.scale(sim, k);
    let reg = tape.scale(reg, k);
    let wreg = tape.scale(reg, weights.lambda1);
    let mut total = tape.add(sim, wreg)?;
    let mut contrast_v = 0.0;
    if let Some(c) = contrast {
        contrast_v = tape.value(c).item();
        let wc = tape.scale(c, weights.lambda2);
        total = tape.add(total, wc)?;
    }
    let breakdown = LossBreakdown {
        sim: tape.value(sim).item(),
        reg: tape.value(reg).item(),
        contrast: contrast_v,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Full objective for one pass: `-LNCC(M∘φ, F) + λ₁·smooth(φ) + λ₂·contrast`.
///
/// `moving` and `fixed` are the original, un-augmented images; the projected
/// latents are `[p_m1, p_m2, p_f1, p_f2]`.
pub fn total_loss(
    tape: &mut Tape,
    moving: Var,
    fixed: Var,
    field: Var,
    projections: Option<[Var; 4]>,
    weights: LossWeights,
    window: usize,
) -> Result<(Var, LossBreakdown)> {
    let pass = pass_terms(tape, moving, fixed, field, window)?;
    let contrast = match projections {
        Some([a, b, c, d]) => Some(contrast_invariance(tape, a, b, c, d)?),
        None => None,
    };
    combine(tape, &[pass], contrast, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    /// Direct per-pixel evaluation with explicit window means.
    fn lncc_reference(a: &Tensor, b: &Tensor, window: usize) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let r = (window / 2) as isize;
        let at = |t: &Tensor, y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            t.data()[y * w + x]
        };
        let mut total = 0.0;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut ma = 0.0;
                let mut mb = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        ma += at(a, y + dy, x + dx);
                        mb += at(b, y + dy, x + dx);
                    }
                }
                let n = (window * window) as f64;
                ma /= n;
                mb /= n;
                let (mut cab, mut caa, mut cbb) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let da = at(a, y + dy, x + dx) - ma;
                        let db = at(b, y + dy, x + dx) - mb;
                        cab += da * db;
                        caa += da * da;
                        cbb += db * db;
                    }
                }
                total += cab * cab / (caa * cbb + LNCC_EPS);
            }
        }
        total / (h * w) as f64
    }

    #[test]
    fn lncc_matches_double_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, &[5, 5]);
            let b = rand_tensor(&mut rng, &[5, 5]);
            let fast = lncc_value(&a, &b, 3).unwrap();
            let slow = lncc_reference(&a, &b, 3);
            assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn lncc_self_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[16, 16]);
        assert!((lncc_value(&a, &a, 9).unwrap() - 1.0).abs() < 1e-6);
        let b = Tensor::new(vec![16, 16], a.data().iter().map(|v| 2.0 * v + 0.3).collect()).unwrap();
        assert!((lncc_value(&a, &b, 9).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lncc_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[12, 10]);
        let b = rand_tensor(&mut rng, &[12, 10]);
        let ab = lncc_value(&a, &b, 5).unwrap();
        let ba = lncc_value(&b, &a, 5).unwrap();
        assert!((ab - ba).abs() < 1e-10);
        assert!((0.0..=1.0 + 1e-6).contains(&ab));
    }

    #[test]
    fn lncc_argument_errors() {
        let a = Tensor::zeros(&[6, 6]);
        assert!(lncc_value(&a, &a, 4).is_err());
        assert!(lncc_value(&a, &a, 7).is_err());
        assert!(lncc_value(&a, &Tensor::zeros(&[6, 5]), 3).is_err());
    }

    #[test]
    fn smoothness_closed_forms() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 4, 4], 1.7));
        let s = smoothness(&mut tape, c).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);

        // u_row = r on 4x4: 12 unit row-differences over 2*16 entries
        let mut data = vec![0.0; 32];
        for r in 0..4 {
            for c in 0..4 {
                data[r * 4 + c] = r as f64;
            }
        }
        let u = tape.constant(Tensor::new(vec![2, 4, 4], data).unwrap());
        let s = smoothness(&mut tape, u).unwrap();
        assert!((tape.value(s).item() - 12.0 / 32.0).abs() < 1e-15);
    }

    fn ci_reference(p: [&Tensor; 4]) -> f64 {
        let (c, nx, ny) = (p[0].shape()[0], p[0].shape()[1], p[0].shape()[2]);
        let mut total = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                let (mut m, mut f) = (0.0, 0.0);
                for k in 0..c {
                    let idx = (k * nx + i) * ny + j;
                    m += (p[0].data()[idx] - p[1].data()[idx]).powi(2);
                    f += (p[2].data()[idx] - p[3].data()[idx]).powi(2);
                }
                total += m + f;
            }
        }
        total / (nx * ny) as f64
    }

    #[test]
    fn contrast_invariance_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ps: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[32, 2, 2])).collect();
        let mut tape = Tape::new();
        let v: Vec<Var> = ps.iter().map(|t| tape.constant(t.clone())).collect();
        let ci = contrast_invariance(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        let want = ci_reference([&ps[0], &ps[1], &ps[2], &ps[3]]);
        assert!((tape.value(ci).item() - want).abs() < 1e-12);

        let same = contrast_invariance(&mut tape, v[0], v[0], v[2], v[2]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        // constant unit difference on 32 channels, fixed terms zero
        for (nx, ny) in [(1, 1), (3, 5)] {
            let a = tape.constant(Tensor::full(&[32, nx, ny], 1.5));
            let b = tape.constant(Tensor::full(&[32, nx, ny], 0.5));
            let z = tape.constant(Tensor::zeros(&[32, nx, ny]));
            let ci = contrast_invariance(&mut tape, a, b, z, z).unwrap();
            assert!((tape.value(ci).item() - 32.0).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[32, 2, 3]));
        assert!(contrast_invariance(&mut tape, v[0], bad, v[2], v[3]).is_err());
    }

    #[test]
    fn total_loss_identity_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_tensor(&mut rng, &[1, 1, 12, 12]);
        let p = rand_tensor(&mut rng, &[1, 32, 2, 2]);
        let mut tape = Tape::new();
        let m = tape.constant(img.clone());
        let f = tape.constant(img);
        let phi = tape.leaf(Tensor::zeros(&[1, 2, 12, 12]), true);
        let pv = tape.constant(p);
        let (total, bd) = total_loss(
            &mut tape,
            m,
            f,
            phi,
            Some([pv, pv, pv, pv]),
            LossWeights::default(),
            9,
        )
        .unwrap();
        assert!((tape.value(total).item() + 1.0).abs() < 1e-6);
        assert_eq!(bd.reg, 0.0);
        assert_eq!(bd.contrast, 0.0);
        let w = LossWeights::default();
        assert!((bd.total - (bd.sim + w.lambda1 * bd.reg + w.lambda2 * bd.contrast)).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_reduce_to_negative_lncc() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, &[1, 1, 10, 10]);
        let b = rand_tensor(&mut rng, &[1, 1, 10, 10]);
        let u: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.3..1.3)).collect();
        let mut tape = Tape::new();
        let m = tape.constant(a.clone());
        let f = tape.constant(b.clone());
        let phi = tape.constant(Tensor::new(vec![1, 2, 10, 10], u.clone()).unwrap());
        let (_, bd) = total_loss(&mut tape, m, f, phi, None, LossWeights::new(0.0, 0.0).unwrap(), 5)
            .unwrap();
        let warped = crate::warp::warp_tensor(&a, &Tensor::new(vec![2, 10, 10], u).unwrap()).unwrap();
        let want = -lncc_value(
            &warped.reshape(vec![10, 10]).unwrap(),
            &b.reshape(vec![10, 10]).unwrap(),
            5,
        )
        .unwrap();
        assert!((bd.total - want).abs() < 1e-12);
        assert_eq!(bd.total, bd.sim);
        assert!(LossWeights::new(-0.1, 0.0).is_err());
    }
}
