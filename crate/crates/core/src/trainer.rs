//! Training and evaluation loops.
//!
//! A training step corrupts each sample's normalized vertices to a random
//! timestep, denoises them conditioned on the image, maps the prediction
//! back to camera coordinates and minimizes the weighted total loss with
//! AdamW. Evaluation runs the DDIM sampler and reports root-relative errors
//! in milli-units.

use std::fmt::Write as _;

use crate::data::{Dataset, Sample};
use crate::diffusion::{q_sample, sample_loop, x0_from_eps, NoiseSchedule, Objective, SamplerConfig, VertexSet};
use crate::error::{Error, Result};
use crate::geometry::{face_normals, metrics, root_relative, Metrics, Point};
use crate::kv::KeyValues;
use crate::losses::{total_loss, LossComponents, LossContext, LossTarget, LossWeights};
use crate::model::{Conditioning, Model, ModelConfig};
use crate::numcore::{adamw_step, AdamW, Graph, Rng, Tensor};

/// Metric values are reported in dataset units times this factor.
pub const METRIC_SCALE: f64 = 1000.0;
pub const MAX_GRAD_NORM: f64 = 1.0;
/// Parameter-name prefix of the depth branch.
pub const DEPTH_PREFIX: &str = "depth.";

// Independent random streams under one seed.
const STREAM_INIT: u64 = 0x1000_0000;
const STREAM_SHUFFLE: u64 = 0x2000_0000;
const STREAM_STEP: u64 = 0x3000_0000;
const STREAM_DEPTH_INIT: u64 = 0x4000_0000;
const STREAM_EVAL: u64 = 0x5000_0000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub timesteps: usize,
    pub inference_steps: usize,
    pub weights: LossWeights,
    pub use_diffusion: bool,
    pub cross_modality: bool,
    pub seed: u64,
    /// Run the depth finetuning phase after base training.
    pub depth_condition: bool,
    pub depth_epochs: usize,
    pub objective: Objective,
    pub width: usize,
    pub heads: usize,
    pub num_blocks: usize,
    /// Train on only the first `n` training samples.
    pub train_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            timesteps: crate::diffusion::DEFAULT_TIMESTEPS,
            inference_steps: crate::diffusion::DEFAULT_INFERENCE_STEPS,
            weights: LossWeights::default(),
            use_diffusion: true,
            cross_modality: true,
            seed: 0,
            depth_condition: false,
            depth_epochs: 5,
            objective: Objective::CleanSignal,
            width: 64,
            heads: 4,
            num_blocks: 3,
            train_limit: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 18] = [
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "timesteps",
        "inference_steps",
        "lambda_joint",
        "lambda_smooth",
        "use_diffusion",
        "cross_modality",
        "seed",
        "depth_condition",
        "depth_epochs",
        "objective",
        "width",
        "heads",
        "num_blocks",
        "train_limit",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if self.inference_steps == 0 || self.inference_steps > self.timesteps {
            return fail("inference_steps must be in 1..=timesteps");
        }
        if self.depth_condition && self.depth_epochs == 0 {
            return fail("depth_epochs must be positive with depth_condition");
        }
        if self.train_limit == Some(0) {
            return fail("train_limit must be positive");
        }
        if self.objective == Objective::Noise && !self.use_diffusion {
            return fail("the eps objective needs diffusion");
        }
        LossWeights::new(self.weights.lambda_joint, self.weights.lambda_smooth)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", format!("{:?}", self.learning_rate));
        kv.set("weight_decay", format!("{:?}", self.weight_decay));
        kv.set("timesteps", self.timesteps);
        kv.set("inference_steps", self.inference_steps);
        kv.set("lambda_joint", format!("{:?}", self.weights.lambda_joint));
        kv.set("lambda_smooth", format!("{:?}", self.weights.lambda_smooth));
        kv.set("use_diffusion", self.use_diffusion);
        kv.set("cross_modality", self.cross_modality);
        kv.set("seed", self.seed);
        kv.set("depth_condition", self.depth_condition);
        kv.set("depth_epochs", self.depth_epochs);
        kv.set("objective", self.objective);
        kv.set("width", self.width);
        kv.set("heads", self.heads);
        kv.set("num_blocks", self.num_blocks);
        kv.set("train_limit", self.train_limit.map_or("all".to_string(), |n| n.to_string()));
        kv
    }

    /// Reads known keys over the defaults; unknown keys are ignored here
    /// (callers that own a whole file check them).
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let train_limit = match kv.raw("train_limit") {
            None | Some("all") => None,
            Some(_) => Some(kv.require("train_limit")?),
        };
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            timesteps: kv.get_or("timesteps", d.timesteps)?,
            inference_steps: kv.get_or("inference_steps", d.inference_steps)?,
            weights: LossWeights::from_kv(kv)?,
            use_diffusion: kv.get_or("use_diffusion", d.use_diffusion)?,
            cross_modality: kv.get_or("cross_modality", d.cross_modality)?,
            seed: kv.get_or("seed", d.seed)?,
            depth_condition: kv.get_or("depth_condition", d.depth_condition)?,
            depth_epochs: kv.get_or("depth_epochs", d.depth_epochs)?,
            objective: kv.get_or("objective", d.objective)?,
            width: kv.get_or("width", d.width)?,
            heads: kv.get_or("heads", d.heads)?,
            num_blocks: kv.get_or("num_blocks", d.num_blocks)?,
            train_limit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            vertex_count: ds.spec.vertex_count,
            width: self.width,
            heads: self.heads,
            image_size: ds.spec.image_size,
            num_blocks: self.num_blocks,
            timesteps: self.timesteps,
            use_diffusion: self.use_diffusion,
            cross_modality: self.cross_modality,
            image_pos_embed: false,
            vertex_embed: true,
            objective: self.objective,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.inference_steps,
            ..SamplerConfig::default()
        }
    }
}

/// Per-dataset quantities used by every step.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    /// Ground-truth face normals, one vector per sample.
    pub normals: Vec<Vec<Point>>,
    pub weights: LossWeights,
}

impl<'a> TrainContext<'a> {
    pub fn new(dataset: &'a Dataset, weights: LossWeights) -> Self {
        let normals = dataset
            .samples
            .iter()
            .map(|s| face_normals(&s.verts, &dataset.template.topology).normals)
            .collect();
        Self {
            dataset,
            normals,
            weights,
        }
    }

    fn loss_context(&self) -> LossContext<'_> {
        LossContext {
            regressor: &self.dataset.template.regressor,
            topology: &self.dataset.template.topology,
            image_side: self.dataset.spec.image_size as f64,
            weights: self.weights,
        }
    }
}

/// Loss components of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossComponents,
    pub grad_norm: f64,
}

pub fn conditioning(model: &Model, s: &Sample) -> Conditioning {
    Conditioning {
        image: s.image_tensor(),
        depth: model.has_depth_branch().then(|| s.depth_tensor()),
    }
}

/// One optimizer step over `batch` (indices into the dataset).
pub fn train_step(
    model: &mut Model,
    ctx: &TrainContext<'_>,
    batch: &[usize],
    sched: &NoiseSchedule,
    opt: &AdamW,
    rng: &mut Rng,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let step = model.trained_steps() + 1;
    let cfg = model.config().clone();
    let ds = ctx.dataset;
    let lctx = ctx.loss_context();
    let mut sum = LossComponents::default();
    model.params_mut().zero_grad();
    for &i in batch {
        let s = &ds.samples[i];
        let g = Graph::new();
        let cond = conditioning(model, s);
        let (loss, parts) = if cfg.use_diffusion {
            let t = 1 + rng.below(cfg.timesteps);
            let eps = rng.normal_points(cfg.vertex_count);
            let x0 = VertexSet::clean(s.normalized(ds.scale));
            let xt = q_sample(&x0, t, &eps, sched)?;
            let out = model.forward(&g, &cond, Some(&xt.coords), t)?;
            match cfg.objective {
                Objective::CleanSignal => sample_loss(out, s, ds.scale, &ctx.normals[i], &lctx)?,
                Objective::Noise => {
                    let l = out.sub(g.constant(Tensor::from_points(&eps)))?;
                    let l = l.mul(l)?.sum();
                    let v = l.value().item();
                    let parts = LossComponents {
                        vertex: v,
                        total: v,
                        ..LossComponents::default()
                    };
                    (l, parts)
                }
            }
        } else {
            let out = model.forward(&g, &cond, None, model.pinned_timestep())?;
            sample_loss(out, s, ds.scale, &ctx.normals[i], &lctx)?
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                index: s.index as usize,
                step,
            });
        }
        let grads = g.backward(loss)?;
        model.params_mut().accumulate_grads(&g, &grads)?;
        sum.vertex += parts.vertex;
        sum.joint += parts.joint;
        sum.smooth += parts.smooth;
        sum.total += parts.total;
        sum.skipped_joints += parts.skipped_joints;
        sum.degenerate_edges += parts.degenerate_edges;
    }
    let k = 1.0 / batch.len() as f64;
    let params = model.params_mut();
    params.scale_grads(k);
    let grad_norm = params.clip_grad_norm(MAX_GRAD_NORM);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            index: ds.samples[batch[0]].index as usize,
            step,
        });
    }
    adamw_step(params, opt)?;
    params.zero_grad();
    model.record_steps(1);
    Ok(StepRecord {
        step,
        loss: LossComponents {
            vertex: sum.vertex * k,
            joint: sum.joint * k,
            smooth: sum.smooth * k,
            total: sum.total * k,
            ..sum
        },
        grad_norm,
    })
}

fn sample_loss<'g>(
    out: crate::numcore::Var<'g>,
    s: &Sample,
    scale: f64,
    normals: &[Point],
    lctx: &LossContext<'_>,
) -> Result<(crate::numcore::Var<'g>, LossComponents)> {
    let g = out.graph();
    let root = g.constant(Tensor::new(&[3], s.root().to_vec())?);
    let pred = out.scale(scale).add(root)?;
    let target = LossTarget {
        verts: &s.verts,
        joints3d: &s.joints3d,
        joints2d: &s.joints2d,
        normals,
        camera: s.camera,
    };
    total_loss(pred, &target, lctx)
}

/// Deterministic batch order for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::with_stream(seed, STREAM_SHUFFLE + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Trains for `epochs` epochs over `indices`, continuing from the model's
/// step counter. `observe` sees every step record.
pub fn train_epochs(
    model: &mut Model,
    ctx: &TrainContext<'_>,
    indices: &[usize],
    epochs: usize,
    batch_size: usize,
    opt: &AdamW,
    seed: u64,
    observe: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let sched = NoiseSchedule::cosine(model.config().timesteps)?;
    let per_epoch = steps_per_epoch(indices.len(), batch_size);
    let mut records = Vec::new();
    let first_epoch = model.trained_steps() / per_epoch;
    for e in first_epoch..first_epoch + epochs as u64 {
        for b in epoch_batches(indices.len(), batch_size, seed, e) {
            let batch: Vec<usize> = b.iter().map(|&j| indices[j]).collect();
            let mut rng = Rng::with_stream(seed, STREAM_STEP + model.trained_steps());
            let rec = train_step(model, ctx, &batch, &sched, opt, &mut rng)?;
            observe(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

/// Builds a fresh model for `cfg` and `ds`. A clean-signal model starts its
/// output bias at the mean normalized shape of the training samples.
pub fn init_model(cfg: &TrainConfig, ds: &Dataset) -> Result<Model> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model_config(ds), &mut Rng::with_stream(cfg.seed, STREAM_INIT))?;
    let mc = model.config();
    if mc.vertex_embed && mc.objective == Objective::CleanSignal {
        model.set_output_bias(&mean_shape(ds, &train_indices(cfg, ds)))?;
    }
    Ok(model)
}

/// Mean of the normalized vertices over `indices`.
pub fn mean_shape(ds: &Dataset, indices: &[usize]) -> Vec<Point> {
    let mut acc = vec![[0.0; 3]; ds.spec.vertex_count];
    for &i in indices {
        for (a, v) in acc.iter_mut().zip(ds.samples[i].normalized(ds.scale)) {
            (0..3).for_each(|k| a[k] += v[k]);
        }
    }
    let n = indices.len().max(1) as f64;
    acc.into_iter().map(|a| a.map(|v| v / n)).collect()
}

/// Training-split indices, truncated to `train_limit`.
pub fn train_indices(cfg: &TrainConfig, ds: &Dataset) -> Vec<usize> {
    let n = ds.train().len();
    (0..cfg.train_limit.map_or(n, |l| l.min(n))).collect()
}

/// Base training; with `depth_condition`, then attaches the depth branch,
/// freezes everything else and finetunes the branch.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if model.config().vertex_count != ds.spec.vertex_count || model.config().image_size != ds.spec.image_size {
        return Err(Error::shape(
            "train",
            &[model.config().vertex_count, model.config().image_size],
            &[ds.spec.vertex_count, ds.spec.image_size],
        ));
    }
    let ctx = TrainContext::new(ds, cfg.weights);
    let idx = train_indices(cfg, ds);
    let mut records = Vec::new();
    if !model.has_depth_branch() {
        records = train_epochs(model, &ctx, &idx, cfg.epochs, cfg.batch_size, &cfg.optimizer(), cfg.seed, observe)?;
    }
    if cfg.depth_condition {
        records.extend(finetune_depth(model, &ctx, &idx, cfg, observe)?);
    }
    Ok(records)
}

/// Second phase: attaches the zero-initialized depth branch if missing and
/// trains only its parameters.
pub fn finetune_depth(
    model: &mut Model,
    ctx: &TrainContext<'_>,
    indices: &[usize],
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if !model.has_depth_branch() {
        model.attach_depth_branch(&mut Rng::with_stream(cfg.seed, STREAM_DEPTH_INIT))?;
    }
    let p = model.params_mut();
    p.freeze_all();
    p.set_trainable(DEPTH_PREFIX, true);
    let r = train_epochs(model, ctx, indices, cfg.depth_epochs, cfg.batch_size, &cfg.optimizer(), cfg.seed, observe);
    model.params_mut().set_trainable("", true);
    r
}

/// `x̂_0` predictor for one sample, converting `ε̂` outputs when needed.
pub fn predict(
    model: &Model,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<Point>> {
    let cfg = model.config();
    let den = model.denoiser(cond)?;
    if !cfg.use_diffusion {
        return den.predict_direct();
    }
    let x = match cfg.objective {
        Objective::CleanSignal => sample_loop(&den, cfg.vertex_count, sched, sampler, rng)?,
        Objective::Noise => {
            let eps_model = |x: &VertexSet| -> Result<Vec<Point>> {
                let eps = crate::diffusion::Denoiser::predict_x0(&den, x)?;
                Ok(x0_from_eps(&x.coords, &eps, sched.alpha_bar(x.t)))
            };
            sample_loop(&eps_model, cfg.vertex_count, sched, sampler, rng)?
        }
    };
    Ok(x.coords)
}

/// Reconstructs one sample in camera coordinates, placed at its
/// ground-truth root joint.
pub fn reconstruct(
    model: &Model,
    ds: &Dataset,
    index: usize,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Point>> {
    let s = ds
        .samples
        .get(index)
        .ok_or_else(|| Error::Config(format!("sample index {index} out of range")))?;
    if model.config().vertex_count != ds.spec.vertex_count {
        return Err(Error::shape("reconstruct", &[model.config().vertex_count], &[ds.spec.vertex_count]));
    }
    let mut rng = Rng::with_stream(seed, STREAM_EVAL + s.index);
    let coords = predict(model, &conditioning(model, s), sched, sampler, &mut rng)?;
    Ok(s.denormalize(&coords, ds.scale))
}

/// Mean root-relative metrics, milli-units, over the given samples.
pub fn evaluate_with(
    ds: &Dataset,
    indices: &[usize],
    mut predict_verts: impl FnMut(usize) -> Result<Vec<Point>>,
) -> Result<Metrics> {
    let w = &ds.template.regressor;
    let mut all = Vec::with_capacity(indices.len());
    for &i in indices {
        let pred = predict_verts(i)?;
        let gt = &ds.samples[i].verts;
        all.push(metrics(&root_relative(&pred, w)?, &root_relative(gt, w)?, w)?);
    }
    Ok(Metrics::mean(&all).scaled(METRIC_SCALE))
}

pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize], steps: usize, seed: u64) -> Result<Metrics> {
    let sched = NoiseSchedule::cosine(model.config().timesteps)?;
    let sampler = SamplerConfig {
        steps,
        ..SamplerConfig::default()
    };
    evaluate_with(ds, indices, |i| reconstruct(model, ds, i, &sched, &sampler, seed))
}

pub fn test_indices(ds: &Dataset) -> Vec<usize> {
    (ds.spec.train_end()..ds.spec.sample_count).collect()
}

/// One ablation cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub use_diffusion: bool,
    pub cross_modality: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { use_diffusion: false, cross_modality: false },
        Variant { use_diffusion: false, cross_modality: true },
        Variant { use_diffusion: true, cross_modality: false },
        Variant { use_diffusion: true, cross_modality: true },
    ];

    pub fn name(&self) -> String {
        let sign = |b: bool| if b { '+' } else { '-' };
        format!("{}diffusion{}cross_modality", sign(self.use_diffusion), sign(self.cross_modality))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Metrics,
}

/// Trains and evaluates every variant with the same seed and data.
pub fn ablation_run(
    ds: &Dataset,
    base: &TrainConfig,
    eval_indices: &[usize],
    observe: &mut dyn FnMut(Variant, &StepRecord),
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                use_diffusion: v.use_diffusion,
                cross_modality: v.cross_modality,
                depth_condition: false,
                ..base.clone()
            };
            let mut model = init_model(&cfg, ds)?;
            train(&mut model, ds, &cfg, &mut |r| observe(v, r))?;
            let metrics = evaluate(&model, ds, eval_indices, cfg.inference_steps, cfg.seed)?;
            Ok(AblationRow { variant: v, metrics })
        })
        .collect()
}

/// Formats a value for tables: up to 9 significant digits.
fn num(v: f64) -> String {
    crate::geometry::fmt_sig9(v)
}

pub fn loss_csv_header() -> &'static str {
    "step,L_vertex,L_joint,L_smooth,total\n"
}

pub fn loss_csv_row(r: &StepRecord) -> String {
    let l = &r.loss;
    format!("{},{},{},{},{}\n", r.step, num(l.vertex), num(l.joint), num(l.smooth), num(l.total))
}

pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("variant,E_J,E_PJ,E_V,E_PV\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{},{},{},{}", num(m.e_j), num(m.e_pj), num(m.e_v), num(m.e_pv));
    }
    out
}

pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let mut out = format!("{:<28}{:>12}{:>12}{:>12}{:>12}\n", "variant", "E_J", "E_PJ", "E_V", "E_PV");
    for (name, m) in rows {
        let _ = writeln!(out, "{name:<28}{:>12.4}{:>12.4}{:>12.4}{:>12.4}", m.e_j, m.e_pj, m.e_v, m.e_pv);
    }
    out
}

/// Exponential moving average with smoothing `2 / (window + 1)`.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(prev) => a * v + (1.0 - a) * prev,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}
