use crate::error::{CarError, Result};
use crate::tensor::Tensor;

/// Single-channel grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CarError::invalid("image extents must be positive"));
        }
        if pixels.len() != height * width {
            return Err(CarError::shape(
                "Image2D::new",
                format!(
                    "{}x{} image needs {} pixels, got {}",
                    height,
                    width,
                    height * width,
                    pixels.len()
                ),
            ));
        }
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(CarError::invalid(format!(
                "pixel {} has value {} outside [0,1]",
                i, v
            )));
        }
        Ok(Image2D {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut px = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                px.push(f(r, c));
            }
        }
        Self::new(height, width, px)
    }

    /// Linearly rescales arbitrary finite values onto `[0, 1]`.
    /// A constant input maps to all zeros.
    pub fn min_max_normalized(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let (lo, hi) = finite_range(values)?;
        Self::new(height, width, rescale(values, lo, hi))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn is_constant(&self) -> bool {
        self.pixels.iter().all(|&v| v == self.pixels[0])
    }

    /// `1×1×H×W` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.clone())
            .expect("image buffer matches its extents")
    }

    /// Intensity inversion `v -> 1 - v`.
    pub fn inverted(&self) -> Self {
        Image2D {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| 1.0 - v).collect(),
        }
    }
}

pub(crate) fn finite_range(values: &[f64]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(CarError::NonFinite("image intensity".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

pub(crate) fn rescale(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Integer label map; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CarError::shape(
                "LabelMask::new",
                format!(
                    "{}x{} mask needs {} labels, got {}",
                    height,
                    width,
                    height * width,
                    labels.len()
                ),
            ));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(f(r, c));
            }
        }
        LabelMask {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    /// Binary mask of one label.
    pub fn select(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    /// Sorted distinct non-zero labels.
    pub fn foreground_labels(&self) -> Vec<u32> {
        let mut ls: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }
}
