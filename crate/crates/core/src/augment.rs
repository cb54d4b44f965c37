//! Random-convolution contrast augmentation.
//!
//! A stack of randomly weighted convolutions with LeakyReLU between layers
//! re-renders an image in a new contrast. With 1×1 kernels the stack is a
//! pointwise intensity map, so every structure (level set) of the input
//! survives. Kernel weights are drawn from U(0, 10) and each layer's weight
//! tensor is shifted to zero mean.
//!
//! Images are centered to `[-1, 1]` before the stack. Without this, a
//! bias-free stack acting on non-negative intensities is linear and could
//! only ever produce the identity or an inversion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CarError, Result};
use crate::image::{finite_range, rescale, Image2D};
use crate::seed;
use crate::tensor::kernels::{conv2d_forward, leaky_relu};
use crate::tensor::Tensor;

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_SLOPE: f64 = 0.2;
pub const WEIGHT_HIGH: f64 = 10.0;
/// Attempts made by [`augment_pair`] before giving up on degenerate stacks.
pub const PAIR_ATTEMPTS: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RcConfig {
    pub channel_plan: Vec<usize>,
    /// Spatial kernel side; 1 is the production mode, 3 the blur ablation.
    pub kernel_size: usize,
    pub slope: f64,
    /// Apply the leaky ReLU after the final layer as well.
    pub activate_last: bool,
}

impl Default for RcConfig {
    fn default() -> Self {
        Self::with_depth(DEFAULT_DEPTH)
    }
}

impl RcConfig {
    /// Channel plan `[1, 2, …, 2, 1]` with `depth` layers.
    pub fn with_depth(depth: usize) -> Self {
        let mut plan = vec![1];
        plan.extend(std::iter::repeat(2).take(depth.saturating_sub(1)));
        plan.push(1);
        RcConfig {
            channel_plan: plan,
            kernel_size: 1,
            slope: DEFAULT_SLOPE,
            activate_last: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_plan.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let plan = &self.channel_plan;
        if plan.len() < 2 {
            return Err(CarError::invalid("RC stack depth must be at least 1"));
        }
        if plan[0] != 1 || plan[plan.len() - 1] != 1 {
            return Err(CarError::invalid(format!(
                "channel plan must start and end with 1, got {:?}",
                plan
            )));
        }
        if plan.iter().any(|&c| c == 0) {
            return Err(CarError::invalid("channel plan entries must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CarError::invalid(format!(
                "RC kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        for pair in plan.windows(2) {
            if pair[0] * pair[1] * self.kernel_size * self.kernel_size < 2 {
                return Err(CarError::invalid(
                    "an RC layer with a single weight is identically zero after centering",
                ));
            }
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(CarError::invalid("RC slope must lie in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcLayer {
    /// `Cout×Cin×k×k`, zero mean.
    pub weights: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcStack {
    pub layers: Vec<RcLayer>,
    pub slope: f64,
    pub activate_last: bool,
    pub seed: u64,
}

pub fn sample_rc_stack(rng_seed: u64, cfg: &RcConfig) -> Result<RcStack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let k = cfg.kernel_size;
    let layers = cfg
        .channel_plan
        .windows(2)
        .map(|pair| {
            let (cin, cout) = (pair[0], pair[1]);
            let n = cout * cin * k * k;
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..WEIGHT_HIGH)).collect();
            let mean = w.iter().sum::<f64>() / n as f64;
            w.iter_mut().for_each(|v| *v -= mean);
            RcLayer {
                weights: Tensor::new(vec![cout, cin, k, k], w).expect("sized above"),
            }
        })
        .collect();
    Ok(RcStack {
        layers,
        slope: cfg.slope,
        activate_last: cfg.activate_last,
        seed: rng_seed,
    })
}

impl RcStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_pointwise(&self) -> bool {
        self.layers.iter().all(|l| l.weights.shape()[2] == 1)
    }

    /// Unnormalized stack output for an image.
    pub fn render_raw(&self, img: &Image2D) -> Result<Vec<f64>> {
        let (h, w) = (img.height(), img.width());
        let centered: Vec<f64> = img.pixels().iter().map(|v| 2.0 * v - 1.0).collect();
        let mut x = Tensor::new(vec![1, 1, h, w], centered)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pad = layer.weights.shape()[2] / 2;
            let (mut y, _) = conv2d_forward(&x, &layer.weights, 1, pad, None, false)?;
            if i != last || self.activate_last {
                y.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v, self.slope));
            }
            if !y.is_finite() {
                return Err(CarError::NonFinite(format!(
                    "RC layer {} of stack seeded {}",
                    i, self.seed
                )));
            }
            x = y;
        }
        Ok(x.into_data())
    }
}

/// Re-renders `img` through the stack and min–max rescales the result to
/// `[0, 1]`; a constant result becomes all zeros.
pub fn apply_rc(stack: &RcStack, img: &Image2D) -> Result<Image2D> {
    let raw = stack.render_raw(img)?;
    Image2D::min_max_normalized(img.height(), img.width(), &raw)
}

/// Renders a moving/fixed pair in one shared random contrast.
///
/// Both images go through the same stack and share one rescaling range, so
/// equal intensities in `moving` and `fixed` stay equal. Stacks whose output
/// is constant on either image are resampled.
pub fn augment_pair(
    rng_seed: u64,
    cfg: &RcConfig,
    moving: &Image2D,
    fixed: &Image2D,
) -> Result<(Image2D, Image2D)> {
    if moving.height() != fixed.height() || moving.width() != fixed.width() {
        return Err(CarError::shape(
            "augment_pair",
            format!(
                "moving {}x{} vs fixed {}x{}",
                moving.height(),
                moving.width(),
                fixed.height(),
                fixed.width()
            ),
        ));
    }
    let mut last_err = None;
    for attempt in 0..PAIR_ATTEMPTS {
        let s = if attempt == 0 {
            rng_seed
        } else {
            seed::derive(rng_seed, &[attempt])
        };
        let stack = sample_rc_stack(s, cfg)?;
        match render_pair(&stack, moving, fixed) {
            Ok(Some(pair)) => return Ok(pair),
            Ok(None) => {
                last_err = Some(CarError::NonFinite(format!(
                    "RC stack seeded {} produced a constant image",
                    s
                )))
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn render_pair(
    stack: &RcStack,
    moving: &Image2D,
    fixed: &Image2D,
) -> Result<Option<(Image2D, Image2D)>> {
    let rm = stack.render_raw(moving)?;
    let rf = stack.render_raw(fixed)?;
    let (lm, hm) = finite_range(&rm)?;
    let (lf, hf) = finite_range(&rf)?;
    // a constant fixed image is a legitimate (if useless) input; only a
    // stack that flattens a non-constant image counts as degenerate
    let flattened = |lo: f64, hi: f64, src: &Image2D| hi <= lo && !src.is_constant();
    if flattened(lm, hm, moving) || flattened(lf, hf, fixed) {
        return Ok(None);
    }
    let (lo, hi) = (lm.min(lf), hm.max(hf));
    let (h, w) = (moving.height(), moving.width());
    Ok(Some((
        Image2D::new(h, w, rescale(&rm, lo, hi))?,
        Image2D::new(h, w, rescale(&rf, lo, hi))?,
    )))
}

/// `count` independent renderings of one image, seeded from `rng_seed`.
pub fn augment_demo(rng_seed: u64, cfg: &RcConfig, img: &Image2D, count: u64) -> Result<Vec<Image2D>> {
    (0..count)
        .map(|i| augment_pair(seed::derive(rng_seed, &[i]), cfg, img, img).map(|(a, _)| a))
        .collect()
}
