//! Spatial transformer: resampling an image or label map through a
//! displacement field.
//!
//! Convention shared with the Jacobian metrics: output pixel `x` reads the
//! source at `x + u(x)` (pixel units, channel 0 = rows, channel 1 = columns).
//! Coordinates outside the image are clamped to the border.

use crate::error::{CarError, Result};
use crate::image::{Image2D, LabelMask};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Dense 2D displacement field `u`, stored as a `2×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    u: Tensor,
}

impl DeformationField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let u = Tensor::new(vec![2, height, width], data)?;
        Self::from_tensor(u)
    }

    /// Accepts `2×H×W` or `1×2×H×W`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [2, h, w] | [1, 2, h, w] => (h, w),
            _ => {
                return Err(CarError::shape(
                    "DeformationField",
                    format!("expected 2×H×W, got {:?}", t.shape()),
                ))
            }
        };
        if !t.is_finite() {
            return Err(CarError::NonFinite("deformation field".into()));
        }
        Ok(DeformationField {
            u: t.reshape(vec![2, h, w])?,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DeformationField {
            u: Tensor::zeros(&[2, height, width]),
        }
    }

    /// Builds a field from `f(r, c) = (row displacement, column displacement)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut data = vec![0.0; 2 * height * width];
        for r in 0..height {
            for c in 0..width {
                let (dr, dc) = f(r, c);
                data[r * width + c] = dr;
                data[height * width + r * width + c] = dc;
            }
        }
        DeformationField {
            u: Tensor::new(vec![2, height, width], data).expect("length matches"),
        }
    }

    pub fn height(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[2]
    }

    pub fn row_disp(&self, r: usize, c: usize) -> f64 {
        self.u.data()[r * self.width() + c]
    }

    pub fn col_disp(&self, r: usize, c: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.u.data()[h * w + r * w + c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.u
    }

    pub fn max_abs(&self) -> f64 {
        self.u.max_abs()
    }
}

#[derive(Clone, Copy)]
struct Sample {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
    // derivative of the clamped coordinate w.r.t. the displacement
    dy: f64,
    dx: f64,
}

fn clamp_coord(raw: f64, extent: usize) -> (f64, f64) {
    let hi = (extent - 1) as f64;
    if raw < 0.0 {
        (0.0, 0.0)
    } else if raw > hi {
        (hi, 0.0)
    } else {
        (raw, 1.0)
    }
}

fn sample_point(r: usize, c: usize, ur: f64, uc: f64, h: usize, w: usize) -> Sample {
    let (y, dy) = clamp_coord(r as f64 + ur, h);
    let (x, dx) = clamp_coord(c as f64 + uc, w);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    Sample {
        y0,
        y1: (y0 + 1).min(h - 1),
        x0,
        x1: (x0 + 1).min(w - 1),
        fy: y - y0 as f64,
        fx: x - x0 as f64,
        dy,
        dx,
    }
}

fn interpolate(plane: &[f64], w: usize, s: &Sample) -> f64 {
    let a = plane[s.y0 * w + s.x0];
    let b = plane[s.y0 * w + s.x1];
    let c = plane[s.y1 * w + s.x0];
    let d = plane[s.y1 * w + s.x1];
    (1.0 - s.fy) * ((1.0 - s.fx) * a + s.fx * b) + s.fy * ((1.0 - s.fx) * c + s.fx * d)
}

fn field_planes(field: &Tensor) -> Result<(usize, usize)> {
    match *field.shape() {
        [2, h, w] | [1, 2, h, w] => Ok((h, w)),
        _ => Err(CarError::shape(
            "warp",
            format!("field must be 2×H×W, got {:?}", field.shape()),
        )),
    }
}

/// Bilinear warp of every `H×W` plane of `img` (shape `…×H×W`).
pub fn warp_tensor(img: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (h, w) = field_planes(field)?;
    let planes = check_image_planes(img, h, w)?;
    let (ur, uc) = field.data().split_at(h * w);
    let mut out = vec![0.0; img.numel()];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let s = sample_point(r, c, ur[i], uc[i], h, w);
            for p in 0..planes {
                out[p * h * w + i] = interpolate(&img.data()[p * h * w..(p + 1) * h * w], w, &s);
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

fn check_image_planes(img: &Tensor, h: usize, w: usize) -> Result<usize> {
    let s = img.shape();
    if s.len() < 2 || s[s.len() - 2] != h || s[s.len() - 1] != w {
        return Err(CarError::shape(
            "warp",
            format!("image {:?} does not match field extents {}x{}", s, h, w),
        ));
    }
    Ok(img.numel() / (h * w))
}

/// `M ∘ φ` for an image. The identity field reproduces the input bit for bit.
pub fn warp_image(img: &Image2D, field: &DeformationField) -> Result<Image2D> {
    let out = warp_tensor(&img.to_tensor(), field.tensor())?;
    // bilinear weights are convex, so values stay within the input range
    let px = out.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Image2D::new(img.height(), img.width(), px)
}

/// Nearest-neighbour warp of a label map; labels are never blended.
pub fn warp_mask(mask: &LabelMask, field: &DeformationField) -> Result<LabelMask> {
    let (h, w) = (mask.height(), mask.width());
    if field.height() != h || field.width() != w {
        return Err(CarError::shape(
            "warp_mask",
            format!(
                "mask {}x{} vs field {}x{}",
                h,
                w,
                field.height(),
                field.width()
            ),
        ));
    }
    let nearest = |raw: f64, extent: usize| -> usize {
        let v = clamp_coord(raw, extent).0;
        ((v + 0.5).floor() as usize).min(extent - 1)
    };
    Ok(LabelMask::from_fn(h, w, |r, c| {
        let y = nearest(r as f64 + field.row_disp(r, c), h);
        let x = nearest(c as f64 + field.col_disp(r, c), w);
        mask.get(y, x)
    }))
}

struct WarpOp {
    h: usize,
    w: usize,
}

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (img, field) = (inputs[0], inputs[1]);
        let (h, w) = (self.h, self.w);
        let planes = img.numel() / (h * w);
        let (ur, uc) = field.data().split_at(h * w);
        let mut dimg = vec![0.0; img.numel()];
        let mut dfield = vec![0.0; 2 * h * w];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let s = sample_point(r, c, ur[i], uc[i], h, w);
                let (wy0, wy1) = (1.0 - s.fy, s.fy);
                let (wx0, wx1) = (1.0 - s.fx, s.fx);
                for p in 0..planes {
                    let gi = g[p * h * w + i];
                    if gi == 0.0 {
                        continue;
                    }
                    let base = p * h * w;
                    let plane = &img.data()[base..base + h * w];
                    let a = plane[s.y0 * w + s.x0];
                    let b = plane[s.y0 * w + s.x1];
                    let cc = plane[s.y1 * w + s.x0];
                    let d = plane[s.y1 * w + s.x1];
                    let dv = &mut dimg[base..base + h * w];
                    dv[s.y0 * w + s.x0] += gi * wy0 * wx0;
                    dv[s.y0 * w + s.x1] += gi * wy0 * wx1;
                    dv[s.y1 * w + s.x0] += gi * wy1 * wx0;
                    dv[s.y1 * w + s.x1] += gi * wy1 * wx1;
                    let d_dy = wx0 * (cc - a) + wx1 * (d - b);
                    let d_dx = wy0 * (b - a) + wy1 * (d - cc);
                    dfield[i] += gi * d_dy * s.dy;
                    dfield[h * w + i] += gi * d_dx * s.dx;
                }
            }
        }
        vec![Some(dimg), Some(dfield)]
    }
}

/// Differentiable warp of `img` (`…×H×W`) through `field` (`2×H×W` or `1×2×H×W`).
pub fn warp_var(tape: &mut Tape, img: Var, field: Var) -> Result<Var> {
    let out = warp_tensor(tape.value(img), tape.value(field))?;
    let (h, w) = field_planes(tape.value(field))?;
    Ok(tape.custom(&[img, field], out, Box::new(WarpOp { h, w })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_image() -> Image2D {
        Image2D::from_fn(3, 2, |r, c| 0.1 * r as f64 + 0.05 * c as f64 + 0.2).unwrap()
    }

    #[test]
    fn zero_field_is_bit_identical() {
        let img = Image2D::from_fn(5, 4, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0).unwrap();
        let out = warp_image(&img, &DeformationField::zeros(5, 4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_row_shift_clamps_at_border() {
        let img = rows_image();
        let f = DeformationField::from_fn(3, 2, |_, _| (1.0, 0.0));
        let out = warp_image(&img, &f).unwrap();
        for c in 0..2 {
            assert_eq!(out.get(0, c), img.get(1, c));
            assert_eq!(out.get(1, c), img.get(2, c));
            assert_eq!(out.get(2, c), img.get(2, c));
        }
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let img = rows_image();
        let f = DeformationField::from_fn(3, 2, |_, _| (0.5, 0.0));
        let out = warp_image(&img, &f).unwrap();
        assert!((out.get(0, 0) - 0.5 * (img.get(0, 0) + img.get(1, 0))).abs() < 1e-15);
    }

    #[test]
    fn mask_shift_and_identity() {
        let m = LabelMask::from_fn(4, 4, |r, _| r as u32);
        assert_eq!(warp_mask(&m, &DeformationField::zeros(4, 4)).unwrap(), m);
        let f = DeformationField::from_fn(4, 4, |_, _| (1.0, 0.0));
        let s = warp_mask(&m, &f).unwrap();
        let rows: Vec<u32> = (0..4).map(|r| s.get(r, 0)).collect();
        assert_eq!(rows, vec![1, 2, 3, 3]);
        // labels of the output are a subset of the input labels
        assert!(s.labels().iter().all(|l| m.labels().contains(l)));
    }

    #[test]
    fn output_within_input_range() {
        let img = Image2D::from_fn(6, 6, |r, c| ((r * 5 + c * 3) % 7) as f64 / 7.0 + 0.05).unwrap();
        let f = DeformationField::from_fn(6, 6, |r, c| ((r as f64).sin() * 2.3, (c as f64).cos() * 1.7));
        let out = warp_image(&img, &f).unwrap();
        let (lo, hi) = crate::image::finite_range(img.pixels()).unwrap();
        assert!(out.pixels().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn shape_mismatch() {
        let img = rows_image();
        assert!(warp_image(&img, &DeformationField::zeros(3, 3)).is_err());
        let m = LabelMask::from_fn(3, 2, |_, _| 0);
        assert!(warp_mask(&m, &DeformationField::zeros(2, 2)).is_err());
    }
}
