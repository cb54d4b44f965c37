//! Registration quality: overlap (Dice), boundary distance (HD95), folding
//! ratio and Jacobian-determinant roughness.

use crate::error::{CarError, Result};
use crate::image::LabelMask;
use crate::warp::{warp_mask, DeformationField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub dice: f64,
    /// `None` when no label is present in both masks.
    pub hd95: Option<f64>,
    pub folding_pct: f64,
    pub grad_jac: f64,
}

/// Determinant of the Jacobian of `x -> x + u(x)` on interior pixels,
/// row-major over `(H-2)×(W-2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl JacobianMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(CarError::shape("JacobianMap", "length does not match extents"));
        }
        Ok(JacobianMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_same(a: &[bool], b: &[bool], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(CarError::shape(op, format!("{} vs {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    check_same(a, b, "dice")?;
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean Dice over every foreground label present in either mask.
pub fn dice_labels(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    let labels = union_labels(a, b, "dice_labels")?;
    if labels.is_empty() {
        return Ok(1.0);
    }
    let mut acc = 0.0;
    for &l in &labels {
        acc += dice(&a.select(l), &b.select(l))?;
    }
    Ok(acc / labels.len() as f64)
}

fn union_labels(a: &LabelMask, b: &LabelMask, op: &'static str) -> Result<Vec<u32>> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CarError::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    let mut ls = a.foreground_labels();
    ls.extend(b.foreground_labels());
    ls.sort_unstable();
    ls.dedup();
    Ok(ls)
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn boundary_pixels(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let at = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < height
            && (c as usize) < width
            && mask[r as usize * width + c as usize]
    };
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !(at(ri - 1, ci) && at(ri + 1, ci) && at(ri, ci - 1) && at(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed_p95(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = r as f64 - r2 as f64;
                    let dc = c as f64 - c2 as f64;
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(|a, b| a.total_cmp(b));
    let rank = (0.95 * d.len() as f64).ceil() as usize;
    d[rank.max(1) - 1]
}

/// Symmetric 95th-percentile boundary distance, in pixels.
pub fn hd95(a: &[bool], b: &[bool], height: usize, width: usize) -> Result<f64> {
    check_same(a, b, "hd95")?;
    if a.len() != height * width {
        return Err(CarError::shape("hd95", "mask length does not match extents"));
    }
    let ba = boundary_pixels(a, height, width);
    let bb = boundary_pixels(b, height, width);
    if ba.is_empty() || bb.is_empty() {
        return Err(CarError::invalid("hd95 needs two non-empty masks"));
    }
    Ok(directed_p95(&ba, &bb).max(directed_p95(&bb, &ba)))
}

/// Mean HD95 over labels present in both masks.
pub fn hd95_labels(a: &LabelMask, b: &LabelMask) -> Result<Option<f64>> {
    let labels = union_labels(a, b, "hd95_labels")?;
    let (h, w) = (a.height(), a.width());
    let mut acc = 0.0;
    let mut n = 0;
    for l in labels {
        let (ma, mb) = (a.select(l), b.select(l));
        if ma.iter().any(|&x| x) && mb.iter().any(|&x| x) {
            acc += hd95(&ma, &mb, h, w)?;
            n += 1;
        }
    }
    Ok(if n == 0 { None } else { Some(acc / n as f64) })
}

pub fn jacobian_det(field: &DeformationField) -> Result<JacobianMap> {
    let (h, w) = (field.height(), field.width());
    if h < 3 || w < 3 {
        return Err(CarError::invalid(format!(
            "Jacobian needs at least 3x3 pixels, got {}x{}",
            h, w
        )));
    }
    let mut values = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let drr = 0.5 * (field.row_disp(r + 1, c) - field.row_disp(r - 1, c));
            let drc = 0.5 * (field.row_disp(r, c + 1) - field.row_disp(r, c - 1));
            let dcr = 0.5 * (field.col_disp(r + 1, c) - field.col_disp(r - 1, c));
            let dcc = 0.5 * (field.col_disp(r, c + 1) - field.col_disp(r, c - 1));
            values.push((1.0 + drr) * (1.0 + dcc) - drc * dcr);
        }
    }
    JacobianMap::from_values(h - 2, w - 2, values)
}

/// Percentage of Jacobian samples with a negative determinant.
pub fn folding_pct(j: &JacobianMap) -> f64 {
    if j.values.is_empty() {
        return 0.0;
    }
    let neg = j.values.iter().filter(|&&v| v < 0.0).count();
    100.0 * neg as f64 / j.values.len() as f64
}

/// Mean magnitude of the central-difference gradient of the determinant map
/// over its own interior.
pub fn grad_jac_mag(j: &JacobianMap) -> f64 {
    let (h, w) = (j.height, j.width);
    if h < 3 || w < 3 {
        return 0.0;
    }
    let v = |r: usize, c: usize| j.values[r * w + c];
    let mut acc = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let gr = 0.5 * (v(r + 1, c) - v(r - 1, c));
            let gc = 0.5 * (v(r, c + 1) - v(r, c - 1));
            acc += (gr * gr + gc * gc).sqrt();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

/// Warps `mask_moving` through `field` and scores it against `mask_fixed`.
pub fn evaluate_pair(
    mask_moving: &LabelMask,
    mask_fixed: &LabelMask,
    field: &DeformationField,
) -> Result<MetricsRecord> {
    let warped = warp_mask(mask_moving, field)?;
    let j = jacobian_det(field)?;
    Ok(MetricsRecord {
        dice: dice_labels(&warped, mask_fixed)?,
        hd95: hd95_labels(&warped, mask_fixed)?,
        folding_pct: folding_pct(&j),
        grad_jac: grad_jac_mag(&j),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| (r0..r1).contains(&(i / w)) && (c0..c1).contains(&(i % w)))
            .collect()
    }

    #[test]
    fn dice_cases() {
        let a = rect(8, 8, 0, 4, 0, 8);
        let b = rect(8, 8, 2, 6, 0, 8);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &rect(8, 8, 4, 8, 0, 8)).unwrap(), 0.0);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dice(&a, &b[..10]).is_err());
    }

    /// Nearest-boundary distances by exhaustive search.
    fn brute_hd95(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
        let ba = boundary_pixels(a, h, w);
        let bb = boundary_pixels(b, h, w);
        let directed = |x: &[(usize, usize)], y: &[(usize, usize)]| {
            let mut d = Vec::new();
            for p in x {
                let mut best = f64::MAX;
                for q in y {
                    let dd = ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt();
                    best = best.min(dd);
                }
                d.push(best);
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (0.95 * d.len() as f64).ceil() as usize - 1;
            d[k]
        };
        directed(&ba, &bb).max(directed(&bb, &ba))
    }

    #[test]
    fn hd95_translation_and_identity() {
        let a = rect(32, 32, 8, 20, 8, 20);
        let b = rect(32, 32, 8, 20, 11, 23);
        assert_eq!(hd95(&a, &a, 32, 32).unwrap(), 0.0);
        let v = hd95(&a, &b, 32, 32).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(v, brute_hd95(&a, &b, 32, 32));
        assert_eq!(hd95(&b, &a, 32, 32).unwrap(), v);
        assert!(hd95(&a, &[false; 1024], 32, 32).is_err());
    }

    #[test]
    fn hd95_is_robust_to_one_outlier() {
        let a = rect(40, 40, 10, 25, 10, 25);
        let mut b = a.clone();
        b[38 * 40 + 38] = true;
        let robust = hd95(&a, &b, 40, 40).unwrap();
        // full Hausdorff is the outlier distance to the square's corner
        let full = ((38.0f64 - 24.0).powi(2) * 2.0).sqrt();
        assert!(robust < full);
        assert_eq!(robust, 0.0);
    }

    #[test]
    fn jacobian_analytic_fields() {
        let id = jacobian_det(&DeformationField::zeros(6, 7)).unwrap();
        assert_eq!((id.height(), id.width()), (4, 5));
        assert!(id.values().iter().all(|&v| v == 1.0));
        assert_eq!(folding_pct(&id), 0.0);
        assert_eq!(grad_jac_mag(&id), 0.0);

        let double = DeformationField::from_fn(6, 6, |r, _| (r as f64, 0.0));
        assert!(jacobian_det(&double).unwrap().values().iter().all(|&v| (v - 2.0).abs() < 1e-12));

        let flip = DeformationField::from_fn(6, 6, |r, _| (-2.0 * r as f64, 0.0));
        let j = jacobian_det(&flip).unwrap();
        assert!(j.values().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        assert_eq!(folding_pct(&j), 100.0);

        assert!(jacobian_det(&DeformationField::zeros(2, 5)).is_err());
    }

    #[test]
    fn half_flipped_field_folding_count() {
        // rows below 4 are flipped; interior rows 1..=6 of an 8x8 field
        let f = DeformationField::from_fn(8, 8, |r, _| {
            let r = r as f64;
            if r < 4.0 {
                (-2.0 * r, 0.0)
            } else {
                (0.0, 0.0)
            }
        });
        let j = jacobian_det(&f).unwrap();
        let mut neg = 0;
        for v in j.values() {
            if *v < 0.0 {
                neg += 1;
            }
        }
        // d(u_r)/dr by central differences: row 1 -> -2, row 2 -> -2,
        // row 3 -> (0 - (-4))/2 = 2, row 4 -> 3, rows 5, 6 -> 0
        assert_eq!(neg, 2 * 6);
        assert!((folding_pct(&j) - 100.0 * 12.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn grad_jac_of_ramp() {
        let vals: Vec<f64> = (0..5 * 6).map(|i| (i / 6) as f64).collect();
        let j = JacobianMap::from_values(5, 6, vals).unwrap();
        assert!((grad_jac_mag(&j) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identity_on_equal_masks() {
        let m = LabelMask::from_fn(10, 10, |r, c| if (2..8).contains(&r) && (3..7).contains(&c) { 1 } else { 0 });
        let rec = evaluate_pair(&m, &m, &DeformationField::zeros(10, 10)).unwrap();
        assert_eq!(rec, MetricsRecord { dice: 1.0, hd95: Some(0.0), folding_pct: 0.0, grad_jac: 0.0 });
        let shifted = LabelMask::from_fn(10, 10, |r, c| if (3..9).contains(&r) && (3..7).contains(&c) { 1 } else { 0 });
        assert!(evaluate_pair(&m, &shifted, &DeformationField::zeros(10, 10)).unwrap().dice < 1.0);
    }
}
