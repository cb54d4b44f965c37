//! Training loop: two random-contrast passes per pair, Adam, the stepped
//! linear learning-rate decay, and inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment_pair, RcConfig};
use crate::error::{CarError, Result};
use crate::image::{Image2D, LabelMask};
use crate::losses::{combine, contrast_invariance, pass_terms, LossBreakdown, LossWeights, LNCC_WINDOW};
use crate::metrics::{dice_labels, evaluate_pair, MetricsRecord};
use crate::seed;
use crate::simnet::{forward, project, ArchSpec, CarModel};
use crate::tensor::{Tape, Tensor};
use crate::warp::{warp_image, DeformationField};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// 1-based epoch at which the decay starts.
    pub decay_start_epoch: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// Single pass per sample and no contrast term.
    pub no_clr: bool,
    /// Random contrast augmentation; off means the network sees the raw pair.
    pub augment: bool,
    pub rc_kernel_size: usize,
    pub rc_depth: usize,
    /// Apply similarity and smoothness to both passes (else pass 1 only).
    pub sim_both_passes: bool,
    pub lncc_window: usize,
    pub arch: ArchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr_init: 1e-4,
            lr_final: 1e-5,
            decay_start_epoch: 5,
            lambda1: 0.1,
            lambda2: 0.1,
            seed: 1,
            no_clr: false,
            augment: true,
            rc_kernel_size: 1,
            rc_depth: crate::augment::DEFAULT_DEPTH,
            sim_both_passes: true,
            lncc_window: LNCC_WINDOW,
            arch: ArchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CarError::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.lr_final > 0.0 && self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return Err(CarError::invalid(format!(
                "need lr_init >= lr_final > 0, got {} and {}",
                self.lr_init, self.lr_final
            )));
        }
        if self.decay_start_epoch == 0 {
            return Err(CarError::invalid("decay_start_epoch is 1-based"));
        }
        LossWeights::new(self.lambda1, self.lambda2)?;
        self.rc_config().validate()?;
        if self.lncc_window % 2 == 0 {
            return Err(CarError::invalid("lncc_window must be odd"));
        }
        self.arch.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn rc_config(&self) -> RcConfig {
        RcConfig {
            kernel_size: self.rc_kernel_size,
            ..RcConfig::with_depth(self.rc_depth)
        }
    }
}

/// Learning rate for a 0-indexed epoch.
///
/// Constant before `decay_start_epoch`, then linear so that the first decayed
/// epoch is already below `lr_init` and the last epoch lands on `lr_final`.
/// A run too short to reach the decay stays at `lr_init`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let first = cfg.decay_start_epoch - 1;
    let last = cfg.epochs.saturating_sub(1);
    if epoch < first || last < first {
        return cfg.lr_init;
    }
    if epoch >= last {
        return cfg.lr_final;
    }
    // first decayed epoch sits one step into the ramp
    let t = (epoch + 1 - first) as f64 / (last + 1 - first) as f64;
    cfg.lr_init + (cfg.lr_final - cfg.lr_init) * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CarError::shape(
            "adam_update",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(CarError::shape(
                "adam_update",
                format!("parameter {} has {} entries, gradient {}", i, p.numel(), g.len()),
            ));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// A training or validation pair; masks are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub moving: Image2D,
    pub fixed: Image2D,
    pub masks: Option<(LabelMask, LabelMask)>,
}

impl From<crate::synthdeform::PairSample> for TrainPair {
    fn from(s: crate::synthdeform::PairSample) -> Self {
        TrainPair {
            moving: s.moving,
            fixed: s.fixed,
            masks: Some((s.mask_moving, s.mask_fixed)),
        }
    }
}

/// Loss and parameter gradients for one sample given its rendered views.
///
/// `views` holds one `(M_c, F_c)` rendering per pass. With two views the
/// contrast term compares their projected latents; the similarity term always
/// scores the warped original `moving` against the original `fixed`.
pub fn sample_gradients(
    model: &CarModel,
    moving: &Image2D,
    fixed: &Image2D,
    views: &[(Image2D, Image2D)],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if views.is_empty() || views.len() > 2 {
        return Err(CarError::invalid(format!("expected 1 or 2 views, got {}", views.len())));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let m = tape.constant(moving.to_tensor());
    let f = tape.constant(fixed.to_tensor());
    let mut passes = Vec::new();
    let mut latents = Vec::new();
    for (k, (vm, vf)) in views.iter().enumerate() {
        let xm = tape.constant(vm.to_tensor());
        let xf = tape.constant(vf.to_tensor());
        let out = forward(&mut tape, &bound, xm, xf)?;
        if k == 0 || cfg.sim_both_passes {
            passes.push(pass_terms(&mut tape, m, f, out.field, cfg.lncc_window)?);
        }
        latents.push((out.latent_m, out.latent_f));
    }
    let contrast = if latents.len() == 2 {
        let pm1 = project(&mut tape, &bound, latents[0].0)?;
        let pm2 = project(&mut tape, &bound, latents[1].0)?;
        let pf1 = project(&mut tape, &bound, latents[0].1)?;
        let pf2 = project(&mut tape, &bound, latents[1].1)?;
        Some(contrast_invariance(&mut tape, pm1, pm2, pf1, pf2)?)
    } else {
        None
    };
    let (loss, breakdown) = combine(&mut tape, &passes, contrast, cfg.weights())?;
    if !breakdown.total.is_finite() {
        return Err(CarError::NonFinite(format!("loss {:?}", breakdown)));
    }
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    Ok((breakdown, grads))
}

/// Renders the views one sample is trained on.
pub fn sample_views(
    cfg: &TrainConfig,
    sample_seed: u64,
    moving: &Image2D,
    fixed: &Image2D,
) -> Result<Vec<(Image2D, Image2D)>> {
    let passes = if cfg.no_clr { 1 } else { 2 };
    let rc = cfg.rc_config();
    (0..passes)
        .map(|k| {
            if cfg.augment {
                augment_pair(seed::derive(sample_seed, &[k as u64]), &rc, moving, fixed)
            } else {
                Ok((moving.clone(), fixed.clone()))
            }
        })
        .collect()
}

/// Worker count from `CAR_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("CAR_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CarError::invalid(format!("thread pool: {}", e)))
}

/// Position of a sample in the run, used to derive its augmentation seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleId {
    pub epoch: usize,
    pub index: usize,
}

/// Averages per-sample gradients over the batch and applies one Adam step.
/// Samples are reduced in batch order, so the worker count never changes
/// the result.
pub fn train_step(
    model: &mut CarModel,
    batch: &[(SampleId, &TrainPair)],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
    pool: &rayon::ThreadPool,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(CarError::invalid("empty batch"));
    }
    let shared: &CarModel = model;
    let results: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> = pool.install(|| {
        batch
            .par_iter()
            .map(|(id, pair)| {
                let s = seed::derive(cfg.seed, &[STREAM_AUGMENT, id.epoch as u64, id.index as u64]);
                let views = sample_views(cfg, s, &pair.moving, &pair.fixed)?;
                sample_gradients(shared, &pair.moving, &pair.fixed, &views, cfg).map_err(|e| match e {
                    CarError::NonFinite(d) => CarError::NonFinite(format!(
                        "epoch {} sample {} (augment seed {}): {}",
                        id.epoch, id.index, s, d
                    )),
                    other => other,
                })
            })
            .collect()
    });
    let k = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut mean = LossBreakdown::default();
    for r in results {
        let (b, g) = r?;
        mean.sim += k * b.sim;
        mean.reg += k * b.reg;
        mean.contrast += k * b.contrast;
        mean.total += k * b.total;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a += k * x;
            }
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(CarError::NonFinite(format!(
            "non-finite gradient in epoch {} batch starting at sample {}",
            batch[0].0.epoch, batch[0].0.index
        )));
    }
    adam_update(model.params_mut(), &grads, adam, lr)?;
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CarModel,
    pub log: Vec<LogRow>,
    /// Mean registered Dice on the validation pairs after each epoch.
    pub val_dice: Vec<f64>,
}

/// Hooks invoked while training.
pub trait TrainObserver {
    fn on_step(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _epoch: usize, _model: &CarModel, _val_dice: Option<f64>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn initial_model(cfg: &TrainConfig) -> Result<CarModel> {
    CarModel::init(cfg.arch, seed::derive(cfg.seed, &[STREAM_INIT]))
}

/// Trains on in-memory pairs with a worker pool of `threads`.
pub fn train_pairs(
    cfg: &TrainConfig,
    pairs: &[TrainPair],
    val: &[TrainPair],
    threads: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(CarError::invalid("training set is empty"));
    }
    for p in pairs {
        cfg.arch.check_extent(p.moving.height(), p.moving.width())?;
    }
    let pool = thread_pool(threads)?;
    let mut model = initial_model(cfg)?;
    let mut adam = AdamState::new(model.params());
    let mut log = Vec::new();
    let mut val_dice = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (SampleId { epoch, index: i }, &pairs[i]))
                .collect();
            let loss = train_step(&mut model, &batch, cfg, &mut adam, lr, &pool)?;
            let row = LogRow { step, epoch, lr, loss };
            observer.on_step(&row)?;
            log.push(row);
            step += 1;
        }
        let vd = if val.iter().any(|p| p.masks.is_some()) {
            let d = mean_dice(&model, val, &pool)?;
            val_dice.push(d);
            Some(d)
        } else {
            None
        };
        observer.on_epoch(epoch, &model, vd)?;
    }
    Ok(TrainOutcome { model, log, val_dice })
}

/// Mean registered Dice over the pairs that carry masks.
pub fn mean_dice(model: &CarModel, pairs: &[TrainPair], pool: &rayon::ThreadPool) -> Result<f64> {
    let scores: Vec<Result<Option<f64>>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|p| match &p.masks {
                Some((mm, mf)) => {
                    let field = model.predict(&p.moving, &p.fixed)?;
                    Ok(Some(dice_labels(&crate::warp::warp_mask(mm, &field)?, mf)?))
                }
                None => Ok(None),
            })
            .collect()
    });
    let mut sum = 0.0;
    let mut n = 0;
    for s in scores {
        if let Some(d) = s? {
            sum += d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CarError::invalid("no pair carries masks"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub field: DeformationField,
    pub warped: Image2D,
    pub metrics: Option<MetricsRecord>,
}

/// Inference on the raw pair; no augmentation.
pub fn register(
    model: &CarModel,
    moving: &Image2D,
    fixed: &Image2D,
    masks: Option<(&LabelMask, &LabelMask)>,
) -> Result<Registration> {
    let field = model.predict(moving, fixed)?;
    let warped = warp_image(moving, &field)?;
    let metrics = match masks {
        Some((mm, mf)) => Some(evaluate_pair(mm, mf, &field)?),
        None => None,
    };
    Ok(Registration { field, warped, metrics })
}

/// Files written by [`train`].
pub const LOG_FILE: &str = "train_log.csv";
pub const VAL_FILE: &str = "val_dice.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.carc";

pub const LOG_HEADER: &str = "step,epoch,lr,sim,reg,contrast,total";

pub fn log_line(row: &LogRow) -> String {
    format!(
        "{},{},{:e},{},{},{},{}",
        row.step, row.epoch, row.lr, row.loss.sim, row.loss.reg, row.loss.contrast, row.loss.total
    )
}

struct DiskObserver {
    out: std::path::PathBuf,
    log: std::io::BufWriter<std::fs::File>,
    val: Option<std::io::BufWriter<std::fs::File>>,
    digest: [u8; 32],
    seed: u64,
}

impl DiskObserver {
    fn path(&self, name: &str) -> std::path::PathBuf {
        self.out.join(name)
    }
}

impl TrainObserver for DiskObserver {
    fn on_step(&mut self, row: &LogRow) -> Result<()> {
        use std::io::Write;
        let p = self.path(LOG_FILE);
        writeln!(self.log, "{}", log_line(row)).map_err(|e| CarError::io(p, e))
    }

    fn on_epoch(&mut self, epoch: usize, model: &CarModel, val_dice: Option<f64>) -> Result<()> {
        use std::io::Write;
        let ckpt = crate::io::checkpoint::Checkpoint {
            model: model.clone(),
            config_digest: self.digest,
            rng_seed: self.seed,
            epoch: (epoch + 1) as u32,
        };
        crate::io::checkpoint::save(&self.path(CHECKPOINT_FILE), &ckpt)?;
        let lp = self.path(LOG_FILE);
        self.log.flush().map_err(|e| CarError::io(lp, e))?;
        if let (Some(w), Some(d)) = (self.val.as_mut(), val_dice) {
            let p = self.out.join(VAL_FILE);
            writeln!(w, "{},{}", epoch, d)
                .and_then(|_| w.flush())
                .map_err(|e| CarError::io(p, e))?;
        }
        Ok(())
    }
}

/// Trains on a dataset directory and writes the log, the per-epoch
/// validation Dice (when `val_dir` has masks) and the checkpoint to `out`.
pub fn train(
    cfg: &TrainConfig,
    data_dir: &std::path::Path,
    val_dir: Option<&std::path::Path>,
    out: &std::path::Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = crate::io::dataset::load_dataset(data_dir)?;
    let val = match val_dir {
        Some(d) => crate::io::dataset::load_dataset(d)?,
        None => Vec::new(),
    };
    crate::io::create_dir(out)?;
    let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        let p = out.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| CarError::io(p, e))
    };
    let mut log = create(LOG_FILE)?;
    {
        use std::io::Write;
        writeln!(log, "{}", LOG_HEADER).map_err(|e| CarError::io(out.join(LOG_FILE), e))?;
    }
    let val_w = if val.iter().any(|p| p.masks.is_some()) {
        use std::io::Write;
        let mut w = create(VAL_FILE)?;
        writeln!(w, "epoch,dice").map_err(|e| CarError::io(out.join(VAL_FILE), e))?;
        Some(w)
    } else {
        None
    };
    let mut obs = DiskObserver {
        out: out.to_path_buf(),
        log,
        val: val_w,
        digest: crate::io::config::digest(cfg),
        seed: cfg.seed,
    };
    train_pairs(cfg, &pairs, &val, worker_threads(), &mut obs)
}
