//! Synthetic ground truth: cubic B-spline free-form deformations and
//! nested-blob phantoms with label maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CarError, Result};
use crate::image::{Image2D, LabelMask};
use crate::seed;
use crate::warp::{warp_image, warp_mask, DeformationField};

/// Largest control displacement allowed, as a fraction of the mesh spacing.
pub const FOLD_GUARD: f64 = 0.4;
/// Mesh spacings cycled across generated pairs.
pub const DEFAULT_SPACINGS: [f64; 3] = [8.0, 16.0, 32.0];
pub const PIXEL_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfdSpec {
    pub mesh_spacing: f64,
    pub max_disp: f64,
    pub seed: u64,
}

impl FfdSpec {
    /// Spec with the largest displacement the fold guard permits.
    pub fn guarded(mesh_spacing: f64, seed: u64) -> Self {
        FfdSpec {
            mesh_spacing,
            max_disp: FOLD_GUARD * mesh_spacing,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mesh_spacing >= 4.0) {
            return Err(CarError::invalid(format!(
                "mesh spacing must be at least 4 px, got {}",
                self.mesh_spacing
            )));
        }
        // small tolerance so that `guarded` specs pass exactly
        if !(self.max_disp >= 0.0 && self.max_disp <= FOLD_GUARD * self.mesh_spacing * (1.0 + 1e-12)) {
            return Err(CarError::invalid(format!(
                "max displacement {} exceeds {}·spacing = {}",
                self.max_disp,
                FOLD_GUARD,
                FOLD_GUARD * self.mesh_spacing
            )));
        }
        Ok(())
    }
}

/// Control-point displacements on a uniform grid with one extra cell of
/// margin on every side. Point `(i, j)` sits at pixel `((i-1)·s, (j-1)·s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub spacing: f64,
    pub rows: usize,
    pub cols: usize,
    pub disp_row: Vec<f64>,
    pub disp_col: Vec<f64>,
}

impl ControlGrid {
    /// Grid large enough to cover an `height×width` image.
    pub fn zeros(spacing: f64, height: usize, width: usize) -> Self {
        let rows = ((height - 1) as f64 / spacing).floor() as usize + 4;
        let cols = ((width - 1) as f64 / spacing).floor() as usize + 4;
        ControlGrid {
            spacing,
            rows,
            cols,
            disp_row: vec![0.0; rows * cols],
            disp_col: vec![0.0; rows * cols],
        }
    }

    pub fn filled(spacing: f64, height: usize, width: usize, dr: f64, dc: f64) -> Self {
        let mut g = Self::zeros(spacing, height, width);
        g.disp_row.iter_mut().for_each(|v| *v = dr);
        g.disp_col.iter_mut().for_each(|v| *v = dc);
        g
    }

    /// Dense displacement by separable cubic B-spline interpolation.
    pub fn dense_field(&self, height: usize, width: usize) -> Result<DeformationField> {
        let need = Self::zeros(self.spacing, height, width);
        if self.rows < need.rows || self.cols < need.cols {
            return Err(CarError::shape(
                "ControlGrid::dense_field",
                format!(
                    "{}x{} control points cannot cover a {}x{} image at spacing {}",
                    self.rows, self.cols, height, width, self.spacing
                ),
            ));
        }
        let basis = |x: usize| -> (usize, [f64; 4]) {
            let t = x as f64 / self.spacing;
            let i = t.floor();
            (i as usize, cubic_bspline_weights(t - i))
        };
        let rows: Vec<_> = (0..height).map(basis).collect();
        let cols: Vec<_> = (0..width).map(basis).collect();
        let mut data = vec![0.0; 2 * height * width];
        for (r, (ri, bw)) in rows.iter().enumerate() {
            for (c, (ci, cw)) in cols.iter().enumerate() {
                let (mut ur, mut uc) = (0.0, 0.0);
                for (a, wa) in bw.iter().enumerate() {
                    for (b, wb) in cw.iter().enumerate() {
                        let idx = (ri + a) * self.cols + ci + b;
                        ur += wa * wb * self.disp_row[idx];
                        uc += wa * wb * self.disp_col[idx];
                    }
                }
                data[r * width + c] = ur;
                data[height * width + r * width + c] = uc;
            }
        }
        DeformationField::new(height, width, data)
    }
}

/// Uniform cubic B-spline basis at local coordinate `u ∈ [0, 1)`.
pub fn cubic_bspline_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

pub fn sample_controls(spec: &FfdSpec, height: usize, width: usize) -> Result<ControlGrid> {
    spec.validate()?;
    let mut g = ControlGrid::zeros(spec.mesh_spacing, height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.max_disp > 0.0 {
        for i in 0..g.disp_row.len() {
            g.disp_row[i] = rng.gen_range(-spec.max_disp..=spec.max_disp);
            g.disp_col[i] = rng.gen_range(-spec.max_disp..=spec.max_disp);
        }
    }
    Ok(g)
}

pub fn sample_ffd(spec: &FfdSpec, height: usize, width: usize) -> Result<DeformationField> {
    sample_controls(spec, height, width)?.dense_field(height, width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Image2D,
    pub labels: LabelMask,
}

/// Base intensity of a label: background 0, tissue classes equally spaced
/// in `[0.2, 0.9]`.
pub fn class_intensity(label: u32, classes: usize) -> f64 {
    if label == 0 {
        return 0.0;
    }
    if classes == 1 {
        return 0.9;
    }
    0.2 + 0.7 * (label - 1) as f64 / (classes - 1) as f64
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, count: usize, amp: f64) -> Vec<Wave> {
    (0..count)
        .map(|k| Wave {
            fy: rng.gen_range(-1.2..1.2),
            fx: rng.gen_range(-1.2..1.2),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: amp / (1.0 + k as f64 * 0.5),
        })
        .collect()
}

fn eval_waves(ws: &[Wave], y: f64, x: f64) -> f64 {
    ws.iter()
        .map(|w| w.amp * (std::f64::consts::PI * (w.fy * y + w.fx * x) + w.phase).cos())
        .sum()
}

/// Nested smooth blobs: class `k+1` lies inside class `k`. Intensities are
/// ordered by class, with Gaussian pixel noise clamped to `[0, 1]`.
pub fn generate_phantom(seed: u64, height: usize, width: usize, classes: usize) -> Result<Phantom> {
    if classes < 2 {
        return Err(CarError::invalid(format!("need at least 2 classes, got {}", classes)));
    }
    if height < 8 || width < 8 {
        return Err(CarError::invalid("phantom extents must be at least 8x8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hh, hw) = (height as f64 / 2.0, width as f64 / 2.0);
    let cy = hh + rng.gen_range(-0.08..0.08) * height as f64;
    let cx = hw + rng.gen_range(-0.08..0.08) * width as f64;
    let shared = waves(&mut rng, 4, 0.10);
    let per_level: Vec<Vec<Wave>> = (0..classes).map(|_| waves(&mut rng, 3, 0.05)).collect();
    let level = |k: usize| 0.85 * (classes - k) as f64 / classes as f64;

    let labels = LabelMask::from_fn(height, width, |r, c| {
        let y = (r as f64 + 0.5 - cy) / hh;
        let x = (c as f64 + 0.5 - cx) / hw;
        let base = (y * y + x * x).sqrt() + eval_waves(&shared, y, x);
        let mut label = 0;
        for (k, ws) in per_level.iter().enumerate() {
            if base + eval_waves(ws, y, x) < level(k) {
                label = k as u32 + 1;
            } else {
                break;
            }
        }
        label
    });
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let px: Vec<f64> = labels
        .labels()
        .iter()
        .map(|&l| (class_intensity(l, classes) + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Phantom {
        image: Image2D::new(height, width, px)?,
        labels,
    })
}

/// One registration sample: `moving = fixed ∘ φ_gt`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub moving: Image2D,
    pub fixed: Image2D,
    pub mask_moving: LabelMask,
    pub mask_fixed: LabelMask,
    pub field_gt: DeformationField,
}

pub fn make_pair_with_field(phantom: &Phantom, field: DeformationField) -> Result<PairSample> {
    Ok(PairSample {
        moving: warp_image(&phantom.image, &field)?,
        fixed: phantom.image.clone(),
        mask_moving: warp_mask(&phantom.labels, &field)?,
        mask_fixed: phantom.labels.clone(),
        field_gt: field,
    })
}

pub fn make_pair(phantom: &Phantom, ffd: &FfdSpec) -> Result<PairSample> {
    let (h, w) = (phantom.image.height(), phantom.image.width());
    make_pair_with_field(phantom, sample_ffd(ffd, h, w)?)
}

/// The `index`-th pair of a dataset seeded by `seed`; mesh spacings cycle
/// through [`DEFAULT_SPACINGS`] at the fold-guard magnitude.
pub fn synth_pair(
    seed: u64,
    index: u64,
    height: usize,
    width: usize,
    classes: usize,
) -> Result<PairSample> {
    let phantom = generate_phantom(seed::derive(seed, &[index, 0]), height, width, classes)?;
    let spacing = DEFAULT_SPACINGS[(index % DEFAULT_SPACINGS.len() as u64) as usize];
    let ffd = FfdSpec::guarded(spacing, seed::derive(seed, &[index, 1]));
    make_pair(&phantom, &ffd)
}
