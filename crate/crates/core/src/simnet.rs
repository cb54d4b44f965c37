//! Two-branch encoder–decoder that maps a moving/fixed pair to a dense
//! displacement field, plus the 1×1 projection head applied to latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CarError, Result};
use crate::image::Image2D;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};
use crate::warp::DeformationField;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchSpec {
    pub levels: usize,
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub proj_channels: usize,
    pub slope: f64,
    /// One set of encoder weights for both branches.
    pub share_encoders: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            levels: 4,
            enc_channels: 32,
            dec_channels: 64,
            proj_channels: 32,
            slope: 0.2,
            share_encoders: false,
        }
    }
}

impl ArchSpec {
    /// Widths used by the full-size reference model.
    pub fn full_width() -> Self {
        ArchSpec {
            enc_channels: 128,
            dec_channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 16 {
            return Err(CarError::invalid(format!("levels must be in 1..=16, got {}", self.levels)));
        }
        if self.enc_channels == 0 || self.dec_channels == 0 || self.proj_channels == 0 {
            return Err(CarError::invalid("channel widths must be positive"));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(CarError::invalid(format!("slope must lie in (0,1), got {}", self.slope)));
        }
        Ok(())
    }

    /// Checks that an `height×width` input can pass through every level.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.levels;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(CarError::shape(
                "simnet",
                format!(
                    "image extents {}x{} must be positive multiples of 2^{} = {}",
                    height, width, self.levels, m
                ),
            ));
        }
        Ok(())
    }

    fn skip_channels(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.enc_channels
        }
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let e = self.enc_channels;
        let branches: &[&str] = if self.share_encoders {
            &["enc"]
        } else {
            &["enc_m", "enc_f"]
        };
        for b in branches {
            for i in 0..self.levels {
                out.push((format!("{}.{}.w", b, i), vec![e, self.skip_channels(i), 3, 3]));
                out.push((format!("{}.{}.b", b, i), vec![e]));
            }
        }
        let mut cin = 2 * e;
        for j in (0..self.levels).rev() {
            cin += 2 * self.skip_channels(j);
            out.push((format!("dec.{}.w", j), vec![self.dec_channels, cin, 3, 3]));
            out.push((format!("dec.{}.b", j), vec![self.dec_channels]));
            cin = self.dec_channels;
        }
        out.push(("head.w".into(), vec![2, self.dec_channels, 3, 3]));
        out.push(("head.b".into(), vec![2]));
        out.push(("proj.w".into(), vec![self.proj_channels, e, 1, 1]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Moving,
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarModel {
    arch: ArchSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl CarModel {
    /// Fan-in scaled uniform weights, zero biases and a zero flow head.
    pub fn init(arch: ArchSpec, rng_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (idx, (name, shape)) in arch.layout().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") || name.starts_with("head.") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("proj.") {
                    1.0
                } else {
                    (2.0 / (1.0 + arch.slope * arch.slope)).sqrt()
                };
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rng_seed, &[idx as u64]));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(CarModel { arch, names, params })
    }

    /// Rebuilds a model from a named parameter table, checking it against
    /// the layout of `arch`.
    pub fn from_params(arch: ArchSpec, table: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != table.len() {
            return Err(CarError::invalid(format!(
                "expected {} parameters, found {}",
                layout.len(),
                table.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, shape), (got_name, t)) in layout.into_iter().zip(table) {
            if name != got_name || shape != t.shape() {
                return Err(CarError::invalid(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    name,
                    shape,
                    got_name,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(CarError::NonFinite(format!("parameter {}", name)));
            }
            names.push(name);
            params.push(t);
        }
        Ok(CarModel { arch, names, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect();
        BoundModel {
            arch: self.arch,
            names: self.names.clone(),
            vars,
        }
    }

    /// Inference on raw images; nothing is kept for backpropagation.
    pub fn predict(&self, moving: &Image2D, fixed: &Image2D) -> Result<DeformationField> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let m = tape.constant(moving.to_tensor());
        let f = tape.constant(fixed.to_tensor());
        let out = forward(&mut tape, &bound, m, f)?;
        DeformationField::from_tensor(tape.value(out.field).clone())
    }
}

/// Parameters of a model as tape variables.
#[derive(Clone, Debug)]
pub struct BoundModel {
    arch: ArchSpec,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundModel {
    /// Binds existing tape variables, given in [`ArchSpec::layout`] order.
    pub fn from_vars(tape: &Tape, arch: ArchSpec, vars: Vec<Var>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != vars.len() {
            return Err(CarError::invalid(format!(
                "expected {} parameter variables, got {}",
                layout.len(),
                vars.len()
            )));
        }
        for ((name, shape), &v) in layout.iter().zip(&vars) {
            if tape.shape(v) != shape.as_slice() {
                return Err(CarError::shape(
                    "BoundModel::from_vars",
                    format!("{} expects {:?}, got {:?}", name, shape, tape.shape(v)),
                ));
            }
        }
        Ok(BoundModel {
            arch,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            vars,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {} missing from layout", name));
        self.vars[i]
    }
}

pub struct Encoded {
    pub latent: Var,
    /// Input of each level, finest first.
    pub skips: Vec<Var>,
}

pub struct ForwardOut {
    /// Displacement `[1, 2, H, W]`.
    pub field: Var,
    pub latent_m: Var,
    pub latent_f: Var,
}

pub fn encode(tape: &mut Tape, model: &BoundModel, branch: Branch, img: Var) -> Result<Encoded> {
    let arch = model.arch;
    let shape = tape.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(CarError::shape("encode", format!("expected [N,1,H,W], got {:?}", shape)));
    }
    arch.check_extent(shape[2], shape[3])?;
    let prefix = match (arch.share_encoders, branch) {
        (true, _) => "enc",
        (false, Branch::Moving) => "enc_m",
        (false, Branch::Fixed) => "enc_f",
    };
    let mut x = img;
    let mut skips = Vec::with_capacity(arch.levels);
    for i in 0..arch.levels {
        skips.push(x);
        let w = model.var(&format!("{}.{}.w", prefix, i));
        let b = model.var(&format!("{}.{}.b", prefix, i));
        let y = tape.downsample_stride2(x, w, Some(b))?;
        x = tape.leaky_relu(y, arch.slope)?;
    }
    Ok(Encoded { latent: x, skips })
}

pub fn decode(
    tape: &mut Tape,
    model: &BoundModel,
    latent_m: Var,
    latent_f: Var,
    skips_m: &[Var],
    skips_f: &[Var],
) -> Result<Var> {
    let arch = model.arch;
    if tape.shape(latent_m) != tape.shape(latent_f) {
        return Err(CarError::shape(
            "decode",
            format!(
                "latent shapes differ: {:?} vs {:?}",
                tape.shape(latent_m),
                tape.shape(latent_f)
            ),
        ));
    }
    if skips_m.len() != arch.levels || skips_f.len() != arch.levels {
        return Err(CarError::shape(
            "decode",
            format!(
                "expected {} skips per branch, got {} and {}",
                arch.levels,
                skips_m.len(),
                skips_f.len()
            ),
        ));
    }
    let mut x = tape.concat_channels(latent_m, latent_f)?;
    for j in (0..arch.levels).rev() {
        let up = tape.upsample_nearest2(x)?;
        let cat = tape.concat_channels(up, skips_m[j])?;
        let cat = tape.concat_channels(cat, skips_f[j])?;
        let w = model.var(&format!("dec.{}.w", j));
        let b = model.var(&format!("dec.{}.b", j));
        let y = tape.conv2d(cat, w, 1, 1, Some(b))?;
        x = tape.leaky_relu(y, arch.slope)?;
    }
    let (hw, hb) = (model.var("head.w"), model.var("head.b"));
    tape.conv2d(x, hw, 1, 1, Some(hb))
}

/// 1×1 convolution without bias or activation.
pub fn project(tape: &mut Tape, model: &BoundModel, latent: Var) -> Result<Var> {
    let w = model.var("proj.w");
    tape.conv2d(latent, w, 1, 0, None)
}

pub fn forward(tape: &mut Tape, model: &BoundModel, moving: Var, fixed: Var) -> Result<ForwardOut> {
    if tape.shape(moving) != tape.shape(fixed) {
        return Err(CarError::shape(
            "forward",
            format!(
                "moving {:?} and fixed {:?} differ",
                tape.shape(moving),
                tape.shape(fixed)
            ),
        ));
    }
    let em = encode(tape, model, Branch::Moving, moving)?;
    let ef = encode(tape, model, Branch::Fixed, fixed)?;
    let field = decode(tape, model, em.latent, ef.latent, &em.skips, &ef.skips)?;
    Ok(ForwardOut {
        field,
        latent_m: em.latent,
        latent_f: ef.latent,
    })
}
