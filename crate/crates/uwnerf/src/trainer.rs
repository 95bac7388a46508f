//! The optimization loop.
//!
//! A training step draws one target view and a pool of nearby source views,
//! samples a set of stride-aligned patches in the target image, renders each
//! patch from the source features, composes the predicted components with
//! the estimated background light, and minimises the self-supervised
//! objective with Adam under two learning-rate groups (feature backbone vs.
//! everything else), both decayed exponentially.
//!
//! Every piece of randomness — batch construction, stratified depth jitter,
//! latent noise — flows through one owned generator whose state is captured
//! in checkpoints, so a resumed run continues the exact trajectory of an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{extract_features_on_tape, init_backbone, BackboneConfig};
use crate::dataset::{Pose, SceneDataset};
use crate::error::UwError;
use crate::formation::{compose_on_tape, crop_map, map_raw_on_tape};
use crate::geometry::select_source_views;
use crate::lightnet::{estimate_on_tape, init_lightnet, LightMode, VaeConfig};
use crate::losses::{
    color_constancy_loss, contrast_loss, kl_loss, light_smoothness_loss, reconstruction_loss,
    total_on_tape, transmission_consistency_loss, LossReport, LossTermVars, LossWeights,
};
use crate::nn::{hwc_to_chw, ParamStore};
use crate::renderer::{init_renderer, render_patch_on_tape, SourceTokens, TransformerConfig};
use crate::Result;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fraction of the initial learning rate left when the step budget is
/// exhausted, used when no explicit per-step decay factor is configured.
const DECAY_ENDPOINT: f64 = 0.1;

/// Everything a training or finetuning run needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimization steps for this run.
    pub steps: usize,
    /// Rays (equivalently pixels) per batch; must be a positive multiple of
    /// the patch area, and divides into whole patches.
    pub rays_per_batch: usize,
    /// Initial learning rate of the `backbone.*` parameter group.
    pub lr_backbone: f64,
    /// Initial learning rate of every other parameter group.
    pub lr_model: f64,
    /// Per-step exponential decay factor; `None` derives the factor so the
    /// rate after `steps` steps is [`DECAY_ENDPOINT`] times the initial one.
    pub decay: Option<f64>,
    /// Inclusive bounds for the source-pool multiplier k.
    pub k_range: [usize; 2],
    /// Inclusive bounds for the source-view count N.
    pub n_range: [usize; 2],
    /// Stratified (jittered) depth sampling along rays.
    pub stratified: bool,
    pub seed: u64,
    pub transformer: TransformerConfig,
    pub backbone: BackboneConfig,
    pub vae: VaeConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 250_000,
            rays_per_batch: 512,
            lr_backbone: 1e-3,
            lr_model: 5e-4,
            decay: None,
            k_range: [1, 3],
            n_range: [8, 12],
            stratified: true,
            seed: 0,
            transformer: TransformerConfig::default(),
            backbone: BackboneConfig::default(),
            vae: VaeConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// The standard finetuning variant of a pretraining config: shorter
    /// run, smaller batches, halved learning rates.
    pub fn finetune_of(base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            steps: 50_000,
            rays_per_batch: 256,
            lr_backbone: 5e-4,
            lr_model: 2e-4,
            ..base.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(UwError::InvalidConfig("steps must be >= 1".into()));
        }
        let area = self.transformer.patch_size * self.transformer.patch_size;
        if self.rays_per_batch == 0 || self.rays_per_batch % area != 0 {
            return Err(UwError::InvalidConfig(format!(
                "rays_per_batch = {} must be a positive multiple of the patch area {area}",
                self.rays_per_batch
            )));
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_model", self.lr_model)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(UwError::InvalidConfig(format!(
                    "{name} = {lr} must be finite and >= 0"
                )));
            }
        }
        if let Some(d) = self.decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(UwError::InvalidConfig(format!(
                    "decay factor {d} must lie in (0, 1]"
                )));
            }
        }
        for (name, [lo, hi]) in [("k_range", self.k_range), ("n_range", self.n_range)] {
            if lo == 0 || lo > hi {
                return Err(UwError::InvalidConfig(format!(
                    "{name} = [{lo}, {hi}] must satisfy 1 <= lo <= hi"
                )));
            }
        }
        self.transformer.validate()?;
        self.backbone.validate()?;
        self.vae.validate()?;
        self.weights.validate()
    }

    /// Patches rendered per batch.
    pub fn patches_per_batch(&self) -> usize {
        let p = self.transformer.patch_size;
        self.rays_per_batch / (p * p)
    }

    /// Learning-rate multiplier at `step`: `factor(0) = 1` and, with the
    /// derived default decay, `factor(steps) = DECAY_ENDPOINT`.
    pub fn lr_factor(&self, step: usize) -> f64 {
        let gamma = self
            .decay
            .unwrap_or_else(|| DECAY_ENDPOINT.powf(1.0 / self.steps as f64));
        gamma.powi(step as i32)
    }
}

/// One training batch: a target view, its source pool, and the patch set.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Index of the target view in the dataset.
    pub target: usize,
    /// Indices of the selected source views (never contains `target`).
    pub sources: Vec<usize>,
    /// Index of the source passed to the background-light estimator.
    pub nearest: usize,
    /// Patch coordinates on the stride-p grid of the target image.
    pub patches: Vec<(usize, usize)>,
    /// Observed (degraded) target patches, each `p x p x 3`.
    pub target_patches: Vec<Array3<f64>>,
}

/// Draws one batch: a uniform target view, `N` source views from the
/// `k * N` nearest candidates, and `rays_per_batch / p^2` distinct patch
/// positions on the target's stride-p grid.
pub fn build_batch(
    dataset: &SceneDataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    config.validate()?;
    let views = dataset.images.len();
    let need = config.n_range[1] + 1;
    if views < need {
        return Err(UwError::InvalidConfig(format!(
            "dataset has {views} views; need at least {need} (max source count + target)"
        )));
    }

    let target = rng.random_range(0..views);
    let k = rng.random_range(config.k_range[0]..=config.k_range[1]);
    let n = rng.random_range(config.n_range[0]..=config.n_range[1]);
    let poses: Vec<Pose> = dataset.cameras.iter().map(|c| c.pose.clone()).collect();
    let sources = select_source_views(&poses[target], &poses, Some(target), k, n, rng)?;

    let nearest = *crate::lightnet::select_nearest_source(
        &poses[target],
        &sources
            .iter()
            .map(|&si| (poses[si].clone(), si))
            .collect::<Vec<_>>(),
    )?;

    let p = config.transformer.patch_size;
    let (h, w) = {
        let d = dataset.images[target].dim();
        (d.0, d.1)
    };
    let (gh, gw) = (h / p, w / p);
    let wanted = config.patches_per_batch();
    if gh * gw < wanted {
        return Err(UwError::InvalidConfig(format!(
            "batch wants {wanted} patches but the {gh}x{gw} patch grid has only {}",
            gh * gw
        )));
    }
    // Partial Fisher-Yates over the flat grid: distinct patches, uniform.
    let mut cells: Vec<usize> = (0..gh * gw).collect();
    for i in 0..wanted {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    cells.truncate(wanted);

    let mut patches = Vec::with_capacity(wanted);
    let mut target_patches = Vec::with_capacity(wanted);
    for cell in cells {
        let (py, px) = (cell / gw, cell % gw);
        patches.push((py, px));
        target_patches.push(crop_map(&dataset.images[target], py * p, px * p, p)?);
    }

    Ok(Batch {
        target,
        sources,
        nearest,
        patches,
        target_patches,
    })
}

/// Per-step log line: the step index, the six unweighted loss terms with
/// their weighted total, and the learning rates that produced the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub lr_backbone: f64,
    pub lr_model: f64,
}

/// Checkpoint metadata block (stored as JSON in the container header).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    format: u32,
    step: usize,
    config: TrainConfig,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// u128 word position, kept as a decimal string for JSON safety.
    rng_word_pos: String,
}

const CHECKPOINT_KIND: &str = "uwnerf-checkpoint";
const CHECKPOINT_FORMAT: u32 = 1;

/// Owns the parameters, optimizer state and generator of one training run.
pub struct Trainer {
    config: TrainConfig,
    store: ParamStore,
    /// First and second Adam moments per parameter.
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh run: parameters initialized from the config seed, moments at
    /// zero, step counter at zero.
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &mut rng, &config.backbone);
        init_renderer(
            &mut store,
            &mut rng,
            &config.transformer,
            config.backbone.d_feat(),
        )?;
        init_lightnet(&mut store, &mut rng, &config.vae)?;
        let moments = store
            .iter()
            .map(|(name, value)| {
                let z = ArrayD::zeros(value.raw_dim());
                (name.clone(), (z.clone(), z))
            })
            .collect();
        Ok(Trainer {
            config,
            store,
            moments,
            step: 0,
            rng,
        })
    }

    /// Finetuning entry: adopts the parameter values of a saved checkpoint
    /// but runs under `config` with fresh optimizer state, step counter and
    /// generator.  Every parameter the config defines must exist in the
    /// checkpoint with the same shape; all offenders are listed.
    pub fn with_params_from(path: &Path, config: TrainConfig) -> Result<Trainer> {
        let (_, params, _) = read_checkpoint(path)?;
        let mut trainer = Trainer::new(config)?;
        let mut issues = Vec::new();
        for (name, value) in trainer.store.iter_mut() {
            match params.get(name) {
                None => issues.push(format!("{name} missing from checkpoint")),
                Some(loaded) if loaded.shape() != value.shape() => issues.push(format!(
                    "{name}: checkpoint shape {:?} != expected {:?}",
                    loaded.shape(),
                    value.shape()
                )),
                Some(loaded) => *value = loaded.clone(),
            }
        }
        for name in params.keys() {
            if !trainer.store.contains(name) {
                issues.push(format!("{name} not used by this configuration"));
            }
        }
        if !issues.is_empty() {
            return Err(UwError::InvalidCheckpoint(format!(
                "incompatible parameters: {}",
                issues.join("; ")
            )));
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Learning rates the next step will use.
    pub fn current_lrs(&self) -> (f64, f64) {
        let f = self.config.lr_factor(self.step);
        (self.config.lr_backbone * f, self.config.lr_model * f)
    }

    /// Convenience wrapper building the log line for a completed step.
    pub fn log_record(&self, step: usize, loss: LossReport) -> LogRecord {
        let f = self.config.lr_factor(step);
        LogRecord {
            step,
            loss,
            lr_backbone: self.config.lr_backbone * f,
            lr_model: self.config.lr_model * f,
        }
    }

    /// Draws the next batch from the trainer's generator.
    pub fn next_batch(&mut self, dataset: &SceneDataset) -> Result<Batch> {
        build_batch(dataset, &self.config, &mut self.rng)
    }

    /// One optimization step on a prepared batch: render, compose, measure,
    /// backpropagate, update.  Returns the unweighted loss terms.
    pub fn train_step(&mut self, dataset: &SceneDataset, batch: &Batch) -> Result<LossReport> {
        let p = self.config.transformer.patch_size;
        let mut tape = Tape::new(true);
        let bound = self.store.bind(&mut tape);

        // Source features once per view, shared by all patches.
        let mut sources = Vec::with_capacity(batch.sources.len());
        for &si in &batch.sources {
            let img = tape.leaf(hwc_to_chw(&dataset.images[si]));
            let features = extract_features_on_tape(&mut tape, img, &bound, &self.config.backbone)?;
            sources.push(SourceTokens {
                camera: dataset.cameras[si].clone(),
                features,
            });
        }

        let light = estimate_on_tape(
            &mut tape,
            &bound,
            &self.config.vae,
            &dataset.images[batch.nearest],
            LightMode::Train,
            &mut self.rng,
        )?;

        let mut preds = Vec::with_capacity(batch.patches.len());
        let mut targets = Vec::with_capacity(batch.patches.len());
        let mut radiances = Vec::with_capacity(batch.patches.len());
        let mut backscatters = Vec::with_capacity(batch.patches.len());
        for (&(py, px), observed) in batch.patches.iter().zip(&batch.target_patches) {
            let raw = render_patch_on_tape(
                &mut tape,
                &bound,
                &self.config.transformer,
                &dataset.cameras[batch.target],
                (py, px),
                &sources,
                dataset.near,
                dataset.far,
                self.config.stratified,
                &mut self.rng,
            )?;
            let (j, t_d, t_b) =
                map_raw_on_tape(&mut tape, raw.raw_radiance, raw.raw_direct, raw.raw_backscatter);
            let a_patch = tape.crop(light.a, py * p, px * p, p, p);
            let composed = compose_on_tape(&mut tape, j, t_d, t_b, a_patch);
            preds.push(composed);
            targets.push(tape.leaf(hwc_to_chw(observed)));
            radiances.push(j);
            backscatters.push(t_b);
        }

        let terms = LossTermVars {
            rec: reconstruction_loss(&mut tape, &preds, &targets)?,
            con: contrast_loss(&mut tape, &radiances)?,
            col: color_constancy_loss(&mut tape, &radiances)?,
            kl: kl_loss(&mut tape, light.mu, light.log_var)?,
            trans: transmission_consistency_loss(&mut tape, &backscatters)?,
            glob: light_smoothness_loss(&mut tape, light.a)?,
        };
        let (total, report) = total_on_tape(&mut tape, &terms, &self.config.weights)?;

        let mut grads = tape.backward(total);
        let (lr_backbone, lr_model) = self.current_lrs();
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, value) in self.store.iter_mut() {
            let grad = bound
                .try_var(name)
                .and_then(|v| grads.take(v))
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(UwError::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let lr = if name.starts_with("backbone.") {
                lr_backbone
            } else {
                lr_model
            };
            let (m, v) = self
                .moments
                .get_mut(name)
                .expect("moments track every parameter");
            ndarray::Zip::from(&mut *m)
                .and(&grad)
                .for_each(|m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            ndarray::Zip::from(&mut *v)
                .and(&grad)
                .for_each(|v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let mut bad = false;
            ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|x, &m, &v| {
                let update = lr * (m / bias1) / ((v / bias2).sqrt() + ADAM_EPS);
                *x -= update;
                bad |= !x.is_finite();
            });
            if bad {
                return Err(UwError::Numeric(format!(
                    "parameter {name} became non-finite after the update"
                )));
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Draws a batch and applies one step.
    pub fn step_once(&mut self, dataset: &SceneDataset) -> Result<LossReport> {
        let batch = self.next_batch(dataset)?;
        self.train_step(dataset, &batch)
    }

    /// Writes parameters, optimizer moments, step counter, config and
    /// generator state into one container file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            format: CHECKPOINT_FORMAT,
            step: self.step,
            config: self.config.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let meta_json = serde_json::to_string(&meta)
            .map_err(|e| UwError::InvalidCheckpoint(format!("meta serialization: {e}")))?;
        let mut container = crate::container::Container::new(meta_json);
        for (name, value) in self.store.iter() {
            container
                .entries
                .insert(format!("param.{name}"), value.clone());
        }
        for (name, (m, v)) in &self.moments {
            container.entries.insert(format!("adam.m.{name}"), m.clone());
            container.entries.insert(format!("adam.v.{name}"), v.clone());
        }
        container.write(path)
    }

    /// Exact resume: restores parameters, moments, step counter, config and
    /// generator state; continuing from here reproduces the trajectory an
    /// uninterrupted run would have taken.
    pub fn load(path: &Path) -> Result<Trainer> {
        let (meta, params, moments) = read_checkpoint(path)?;
        meta.config.validate()?;
        let mut store = ParamStore::new();
        for (name, value) in &params {
            store.insert(name.clone(), value.clone());
        }
        let mut full_moments = BTreeMap::new();
        for name in params.keys() {
            let pair = moments.get(name).ok_or_else(|| {
                UwError::InvalidCheckpoint(format!("missing optimizer moments for {name}"))
            })?;
            if pair.0.shape() != params[name].shape() || pair.1.shape() != params[name].shape() {
                return Err(UwError::InvalidCheckpoint(format!(
                    "optimizer moment shape mismatch for {name}"
                )));
            }
            full_moments.insert(name.clone(), pair.clone());
        }
        let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| {
            UwError::InvalidCheckpoint(format!("bad rng word position '{}'", meta.rng_word_pos))
        })?;
        let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(word_pos);
        Ok(Trainer {
            config: meta.config,
            store,
            moments: full_moments,
            step: meta.step,
            rng,
        })
    }
}

/// Reads just the config out of a checkpoint, e.g. to derive a
/// finetuning schedule from a pretraining run.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let (meta, _, _) = read_checkpoint(path)?;
    Ok(meta.config)
}

type MomentMap = BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>;

/// Reads and validates a checkpoint container, splitting the entries into
/// parameters and optimizer moments.
fn read_checkpoint(
    path: &Path,
) -> Result<(CheckpointMeta, BTreeMap<String, ArrayD<f64>>, MomentMap)> {
    let container = crate::container::Container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&container.meta)
        .map_err(|e| UwError::InvalidCheckpoint(format!("meta parse: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(UwError::InvalidCheckpoint(format!(
            "not a checkpoint (kind '{}')",
            meta.kind
        )));
    }
    if meta.format != CHECKPOINT_FORMAT {
        return Err(UwError::InvalidCheckpoint(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            meta.format
        )));
    }
    let mut params = BTreeMap::new();
    let mut m_half: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut v_half: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for (key, value) in container.entries {
        if let Some(name) = key.strip_prefix("param.") {
            params.insert(name.to_owned(), value);
        } else if let Some(name) = key.strip_prefix("adam.m.") {
            m_half.insert(name.to_owned(), value);
        } else if let Some(name) = key.strip_prefix("adam.v.") {
            v_half.insert(name.to_owned(), value);
        } else {
            return Err(UwError::InvalidCheckpoint(format!(
                "unrecognized entry '{key}'"
            )));
        }
    }
    let mut moments = BTreeMap::new();
    for (name, m) in m_half {
        let v = v_half.remove(&name).ok_or_else(|| {
            UwError::InvalidCheckpoint(format!("first moment without second for {name}"))
        })?;
        moments.insert(name, (m, v));
    }
    if let Some(name) = v_half.keys().next() {
        return Err(UwError::InvalidCheckpoint(format!(
            "second moment without first for {name}"
        )));
    }
    Ok((meta, params, moments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderDepth;
    use crate::dataset::{make_toy_scene, ToySceneConfig};
    use crate::renderer::TransformerConfig;
    use tempfile::tempdir;

    /// Desk-scale configuration: every dimension cut to the bone.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 64,
            rays_per_batch: 16, // 4 patches of 2x2
            lr_backbone: 2e-3,
            lr_model: 1e-3,
            decay: None,
            k_range: [1, 2],
            n_range: [2, 3],
            stratified: true,
            seed: 42,
            transformer: TransformerConfig {
                dim: 8,
                view_heads: 1,
                ray_heads: 2,
                ff_hidden: 16,
                depth: 1,
                samples_per_ray: 4,
                patch_size: 2,
                position_encoding: true,
            },
            backbone: BackboneConfig {
                encoder_depth: EncoderDepth::Tiny,
                feature_width: 5,
            },
            vae: VaeConfig {
                encoder_widths: [2, 3, 4, 5],
                latent_dim: 6,
                decoder_widths: [5, 4, 3],
            },
            weights: LossWeights::default(),
        }
    }

    fn tiny_scene() -> SceneDataset {
        let cfg = ToySceneConfig {
            views: 6,
            size: 32,
            seed: 3,
            ..Default::default()
        };
        make_toy_scene(&cfg).unwrap().0
    }

    #[test]
    fn lr_schedule_hits_endpoint() {
        let config = tiny_config();
        assert_eq!(config.lr_factor(0), 1.0);
        let end = config.lr_factor(config.steps);
        assert!(
            (end - DECAY_ENDPOINT).abs() < 1e-9,
            "factor at the end of the run is {end}"
        );
        let fixed = TrainConfig {
            decay: Some(0.5),
            ..config
        };
        assert!((fixed.lr_factor(3) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = tiny_config();
        assert!(good.validate().is_ok());
        let mut c = tiny_config();
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.rays_per_batch = 15; // not a multiple of 4
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.lr_model = f64::NAN;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.k_range = [2, 1];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_range = [0, 3];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.decay = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_counts_and_exclusion() {
        let scene = tiny_scene();
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let batch = build_batch(&scene, &config, &mut rng).unwrap();
            assert_eq!(batch.patches.len(), 4);
            assert_eq!(batch.target_patches.len(), 4);
            assert!(!batch.sources.contains(&batch.target));
            assert!(batch.sources.contains(&batch.nearest));
            let n = batch.sources.len();
            assert!((config.n_range[0]..=config.n_range[1]).contains(&n));
            // Patches are distinct grid cells.
            let mut cells = batch.patches.clone();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), batch.patches.len());
            // Crops match the image content at the patch location.
            let p = config.transformer.patch_size;
            let (py, px) = batch.patches[0];
            let img = &scene.images[batch.target];
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        assert_eq!(
                            batch.target_patches[0][[dy, dx, c]],
                            img[[py * p + dy, px * p + dx, c]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn paper_scale_batch_has_32_patches() {
        let mut config = TrainConfig::default();
        config.n_range = [2, 3];
        config.k_range = [1, 2];
        let scene = tiny_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = build_batch(&scene, &config, &mut rng).unwrap();
        assert_eq!(batch.patches.len(), 32, "512 rays / 4x4 patches");
    }

    #[test]
    fn batch_is_deterministic_under_seed() {
        let scene = tiny_scene();
        let config = tiny_config();
        let a = build_batch(&scene, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_batch(&scene, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rejects_small_datasets() {
        let scene = tiny_scene();
        let mut config = tiny_config();
        config.n_range = [6, 6]; // needs 7 views, scene has 6
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_batch(&scene, &config, &mut rng).is_err());
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let scene = tiny_scene();
        let mut config = tiny_config();
        config.lr_backbone = 0.0;
        config.lr_model = 0.0;
        let mut trainer = Trainer::new(config).unwrap();
        let before: Vec<(String, ArrayD<f64>)> = trainer
            .store()
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        let report = trainer.step_once(&scene).unwrap();
        assert!(report.total.is_finite());
        for (name, old) in before {
            assert_eq!(
                trainer.store().get(&name).unwrap(),
                &old,
                "{name} moved under zero learning rate"
            );
        }
    }

    #[test]
    fn repeated_steps_on_one_batch_reduce_loss() {
        let scene = tiny_scene();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let batch = trainer.next_batch(&scene).unwrap();
        let first = trainer.train_step(&scene, &batch).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = trainer.train_step(&scene, &batch).unwrap();
        }
        assert!(
            last.total < first.total,
            "50 steps on one batch: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn identical_seeds_replay_identical_trajectories() {
        let scene = tiny_scene();
        let mut a = Trainer::new(tiny_config()).unwrap();
        let mut b = Trainer::new(tiny_config()).unwrap();
        for _ in 0..5 {
            let ra = a.step_once(&scene).unwrap();
            let rb = b.step_once(&scene).unwrap();
            assert_eq!(ra, rb, "trajectories diverged");
        }
        for (name, va) in a.store().iter() {
            assert_eq!(va, b.store().get(name).unwrap(), "{name} diverged");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let scene = tiny_scene();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        trainer.step_once(&scene).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        trainer.save(&p1).unwrap();
        let restored = Trainer::load(&p1).unwrap();
        restored.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save -> load -> save changed bytes"
        );
    }

    #[test]
    fn truncated_checkpoint_fails_checksum() {
        let dir = tempdir().unwrap();
        let trainer = Trainer::new(tiny_config()).unwrap();
        let path = dir.path().join("t.ckpt");
        trainer.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(Trainer::load(&path).is_err());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempdir().unwrap();
        let scene = tiny_scene();

        let mut straight = Trainer::new(tiny_config()).unwrap();
        let mut reports_straight = Vec::new();
        for _ in 0..10 {
            reports_straight.push(straight.step_once(&scene).unwrap());
        }

        let mut first_half = Trainer::new(tiny_config()).unwrap();
        let mut reports_split = Vec::new();
        for _ in 0..5 {
            reports_split.push(first_half.step_once(&scene).unwrap());
        }
        let path = dir.path().join("half.ckpt");
        first_half.save(&path).unwrap();
        drop(first_half);
        let mut second_half = Trainer::load(&path).unwrap();
        assert_eq!(second_half.step(), 5);
        for _ in 0..5 {
            reports_split.push(second_half.step_once(&scene).unwrap());
        }

        assert_eq!(reports_straight, reports_split, "resume diverged");
        for (name, v) in straight.store().iter() {
            assert_eq!(v, second_half.store().get(name).unwrap(), "{name} diverged");
        }
    }

    #[test]
    fn finetune_adopts_parameters_and_checks_shapes() {
        let dir = tempdir().unwrap();
        let scene = tiny_scene();
        let mut pretrain = Trainer::new(tiny_config()).unwrap();
        pretrain.step_once(&scene).unwrap();
        let path = dir.path().join("pre.ckpt");
        pretrain.save(&path).unwrap();

        // Compatible finetune: same model dims, new schedule.
        let mut ft_config = TrainConfig::finetune_of(pretrain.config());
        ft_config.steps = 8;
        ft_config.rays_per_batch = 16;
        ft_config.seed = 99;
        let mut ft = Trainer::with_params_from(&path, ft_config).unwrap();
        assert_eq!(ft.step(), 0);
        for (name, v) in pretrain.store().iter() {
            assert_eq!(v, ft.store().get(name).unwrap(), "{name} not adopted");
        }
        ft.step_once(&scene).unwrap();

        // Incompatible dims must be rejected with the offender named.
        let mut bad = tiny_config();
        bad.transformer.dim = 12;
        bad.transformer.ray_heads = 3;
        let err = match Trainer::with_params_from(&path, bad) {
            Ok(_) => panic!("dimension mismatch went undetected"),
            Err(e) => e,
        };
        let msg = err.to_string();
        assert!(msg.contains("gnt."), "unhelpful error: {msg}");
    }

    #[test]
    fn poisoned_light_parameters_surface_as_term_errors() {
        let scene = tiny_scene();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let batch = trainer.next_batch(&scene).unwrap();
        trainer
            .store
            .get_mut("lightnet.mu.weight")
            .unwrap()
            .fill(f64::NAN);
        let err = trainer.train_step(&scene, &batch).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("loss term"), "unexpected error: {msg}");
    }

    #[test]
    fn poisoned_render_parameters_trip_the_update_guard() {
        // A NaN in the pooled-feature projection is laundered back to a
        // finite loss by the downstream transmission clamps, so it must be
        // caught on the way back: the gradient/update guard, not the loss
        // check, is the last line of defence here.
        let scene = tiny_scene();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let batch = trainer.next_batch(&scene).unwrap();
        trainer
            .store
            .get_mut("gnt.pool.weight")
            .unwrap()
            .fill(f64::NAN);
        let err = trainer.train_step(&scene, &batch).unwrap_err();
        assert!(
            matches!(err, UwError::Numeric(_)),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn log_record_serializes_flat() {
        let trainer = Trainer::new(tiny_config()).unwrap();
        let report = LossReport {
            rec: 0.5,
            con: 0.0,
            col: 0.1,
            kl: 0.2,
            trans: 0.0,
            glob: 0.0,
            total: 0.9,
        };
        let record = trainer.log_record(0, report);
        let line = serde_json::to_string(&record).unwrap();
        assert!(line.contains("\"step\":0"));
        assert!(line.contains("\"rec\":0.5"));
        assert!(line.contains("\"lr_model\""));
        let parsed: LogRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed, record);
    }
}
