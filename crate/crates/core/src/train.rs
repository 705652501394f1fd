//! Loss, IoU, the training loop, checkpoints and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lara_tensor::checkpoint::{load_tensors, save_tensors};
use lara_tensor::{AdamW, AdamWConfig, Gradients, Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainConfig};
use crate::error::{LaraError, Result};
use crate::model::{binarize, LaRa, SampleInputs};
use crate::synthdata::RenderedSample;

/// Mean binary cross-entropy of `sigmoid(logits)` against a 0/1 mask.
pub fn bce_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, gt: &[u8]) -> Result<Var> {
    let targets: Vec<S> = gt.iter().map(|v| if *v != 0 { S::one() } else { S::zero() }).collect();
    Ok(g.bce_with_logits(logits, &targets)?)
}

/// Intersection and union counts accumulated over any number of masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    pub intersection: u64,
    pub union: u64,
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &[bool], gt: &[bool]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(LaraError::Argument(format!(
                "IoU of masks with {} and {} cells",
                pred.len(),
                gt.len()
            )));
        }
        for (p, g) in pred.iter().zip(gt) {
            self.intersection += (*p && *g) as u64;
            self.union += (*p || *g) as u64;
        }
        Ok(())
    }

    /// `|pred ∧ gt| / |pred ∨ gt|`, or 1 when both are empty.
    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let mut acc = IouAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.value())
}

pub fn mask_from_u8(mask: &[u8]) -> Vec<bool> {
    mask.iter().map(|v| *v != 0).collect()
}

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub iou: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,loss,iou,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3}", self.step, self.loss, self.iou, self.seconds)
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        let rec = MetricsRecord {
            step: it.next()?.parse().ok()?,
            loss: it.next()?.parse().ok()?,
            iou: it.next()?.parse().ok()?,
            seconds: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

/// A dataset sample converted to model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub inputs: SampleInputs<f32>,
    pub gt: Vec<u8>,
}

pub fn prepare_samples(model: &LaRa, samples: &[RenderedSample]) -> Result<Vec<PreparedSample>> {
    let cells = model.config().bev_cells();
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            if s.bev_gt.len() != cells {
                return Err(LaraError::Sample {
                    index,
                    detail: format!("ground truth has {} cells, model predicts {cells}", s.bev_gt.len()),
                });
            }
            let inputs = model
                .prepare(&s.rig, &s.images)
                .map_err(|e| LaraError::Sample { index, detail: e.to_string() })?;
            Ok(PreparedSample { inputs, gt: s.bev_gt.clone() })
        })
        .collect()
}

/// Parameters plus optimizer state; the step count lives in the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
}

impl TrainState {
    pub fn new(model: &LaRa, cfg: &TrainConfig) -> Result<Self> {
        let store = model.init_params(cfg.seed)?;
        let opt = AdamW::new(adamw_config(cfg), &store)?;
        Ok(Self { store, opt })
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }
}

pub fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }
}

/// Per-sample forward pass: loss node, logits node.
fn sample_loss(model: &LaRa, store: &ParamStore<f32>, s: &PreparedSample) -> Result<(Graph<f32>, Var, Var)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &s.inputs)?;
    let loss = bce_loss(&mut g, out.logits, &s.gt)?;
    Ok((g, loss, out.logits))
}

/// Forward, backward and one AdamW update on a batch. The batch loss is
/// the mean of the per-sample losses. Gradients are cleared afterwards.
///
/// `batch` holds dataset indices into `data`; they are reported if the
/// loss turns non-finite.
pub fn train_step(
    model: &LaRa,
    state: &mut TrainState,
    data: &[PreparedSample],
    batch: &[usize],
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let step = state.step() + 1;
    let abort = || LaraError::NonFiniteLoss { step, batch: batch.to_vec() };
    let scale = 1.0 / batch.len() as f64;
    let store = &state.store;
    let results: Vec<Result<(f64, IouAccumulator, Gradients<f32>)>> = batch
        .par_iter()
        .map(|&i| {
            let s = &data[i];
            let (mut g, loss, logits) = sample_loss(model, store, s).map_err(|e| match e {
                LaraError::Tensor(TensorError::NonFinite { .. }) => abort(),
                e => e,
            })?;
            let value = g.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(abort());
            }
            let mut acc = IouAccumulator::default();
            acc.add(&binarize(g.value(logits)), &mask_from_u8(&s.gt))?;
            let scaled = g.scale(loss, scale)?;
            Ok((value, acc, g.backward(scaled)?))
        })
        .collect();
    let mut loss = 0.0;
    let mut acc = IouAccumulator::default();
    for r in results {
        let (l, a, grads) = r.inspect_err(|e| {
            if let LaraError::NonFiniteLoss { step, batch } = e {
                log::error!("non-finite loss at step {step}; offending batch indices {batch:?}");
            }
        })?;
        loss += l * scale;
        acc.intersection += a.intersection;
        acc.union += a.union;
        grads.accumulate_into(&mut state.store)?;
    }
    state.opt.step(&mut state.store)?;
    state.store.zero_grad();
    Ok(MetricsRecord { step, loss, iou: acc.value(), seconds: start.elapsed().as_secs_f64() })
}

/// Mean loss and dataset-level IoU. Reads parameters only.
pub fn evaluate(model: &LaRa, store: &ParamStore<f32>, data: &[PreparedSample]) -> Result<MetricsRecord> {
    let start = Instant::now();
    let per_sample: Vec<Result<(f64, Vec<bool>)>> = data
        .par_iter()
        .map(|s| {
            let (g, loss, logits) = sample_loss(model, store, s)?;
            Ok((g.value(loss)[0] as f64, binarize(g.value(logits))))
        })
        .collect();
    let mut loss = 0.0;
    let mut acc = IouAccumulator::default();
    for (r, s) in per_sample.into_iter().zip(data) {
        let (l, pred) = r?;
        loss += l;
        acc.add(&pred, &mask_from_u8(&s.gt))?;
    }
    Ok(MetricsRecord {
        step: 0,
        loss: loss / data.len().max(1) as f64,
        iou: acc.value(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Dataset-level IoU of fixed predictions.
pub fn evaluate_masks(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(LaraError::Argument(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let mut acc = IouAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.value())
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Dataset indices of the batch consumed by zero-based step `step`. The
/// last batch of an epoch may be short.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let (epoch, b) = (step / per_epoch, (step % per_epoch) as usize);
    let perm = epoch_permutation(seed, epoch, n);
    perm[b * batch_size..((b + 1) * batch_size).min(n)].to_vec()
}

/// Writes parameters and optimizer state.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let opt = state.opt.state_tensors();
    let mut tensors: Vec<(&str, &Tensor<f32>)> = state.store.iter().collect();
    tensors.extend(opt.iter().map(|(n, t)| (n.as_str(), t)));
    Ok(save_tensors(path, &tensors)?)
}

fn params_from_tensors(model: &LaRa, tensors: &[(String, Tensor<f32>)], seed: u64) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new(seed);
    for spec in model.param_specs() {
        let t = tensors
            .iter()
            .find(|(n, _)| *n == spec.name)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter `{}`", spec.name)))?;
        if t.dims() != spec.dims.as_slice() {
            return Err(TensorError::ShapeMismatch {
                name: spec.name.clone(),
                found: t.dims().to_vec(),
                expected: spec.dims.clone(),
            }
            .into());
        }
        store.insert(spec.name.clone(), t.clone())?;
    }
    let known = |n: &str| n.starts_with("adamw.") || store.contains(n);
    if let Some((extra, _)) = tensors.iter().find(|(n, _)| !known(n)) {
        return Err(TensorError::Checkpoint(format!("unexpected tensor `{extra}` for this model")).into());
    }
    Ok(store)
}

/// Parameters only, for inference.
pub fn load_params(path: &Path, model: &LaRa) -> Result<ParamStore<f32>> {
    params_from_tensors(model, &load_tensors(path)?, 0)
}

/// Parameters and optimizer state, for resuming.
pub fn load_checkpoint(path: &Path, model: &LaRa, cfg: &TrainConfig) -> Result<TrainState> {
    let tensors = load_tensors(path)?;
    let store = params_from_tensors(model, &tensors, cfg.seed)?;
    let mut opt = AdamW::new(adamw_config(cfg), &store)?;
    opt.load_state(&tensors)?;
    Ok(TrainState { store, opt })
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// One record per step run in this call.
    pub steps: Vec<MetricsRecord>,
    /// Final evaluation on the training set.
    pub train_eval: MetricsRecord,
    /// Final evaluation on the held-out set, if any.
    pub val_eval: Option<MetricsRecord>,
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.lara")
}

/// Keeps rows up to `step` in an existing metrics file.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut out = String::from(MetricsRecord::CSV_HEADER);
    out.push('\n');
    for rec in text.lines().skip(1).filter_map(MetricsRecord::parse_csv_row) {
        if rec.step <= step {
            out.push_str(&rec.csv_row());
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(LaraError::file(path))
}

/// Options for [`train`] beyond the config.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps instead of the configured budget.
    pub stop_at: Option<u64>,
}

/// Trains on `train_set`, writing `config.toml`, `metrics.csv`,
/// `eval.csv` and checkpoints under `out_dir`.
pub fn train(
    cfg: &Config,
    train_set: &[RenderedSample],
    val_set: Option<&[RenderedSample]>,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(LaraError::Dataset("training set is empty".into()));
    }
    let tc = &cfg.train;
    let model = LaRa::new(&cfg.model)?;
    let data = prepare_samples(&model, train_set)?;
    let val = val_set.map(|v| prepare_samples(&model, v)).transpose()?;
    cfg.echo_into(out_dir)?;
    let mut state = match &opts.resume {
        Some(p) => load_checkpoint(p, &model, tc)?,
        None => TrainState::new(&model, tc)?,
    };
    let metrics_path = out_dir.join("metrics.csv");
    let eval_path = out_dir.join("eval.csv");
    if opts.resume.is_some() {
        truncate_metrics(&metrics_path, state.step())?;
    } else {
        fs::write(&metrics_path, format!("{}\n", MetricsRecord::CSV_HEADER)).map_err(LaraError::file(&metrics_path))?;
        fs::write(&eval_path, "step,split,loss,iou,seconds\n").map_err(LaraError::file(&eval_path))?;
    }
    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(LaraError::file(&metrics_path))?;
    let mut evals = fs::OpenOptions::new().create(true).append(true).open(&eval_path).map_err(LaraError::file(&eval_path))?;
    let total = opts.stop_at.unwrap_or_else(|| tc.total_steps(data.len()));
    log::info!(
        "training {} parameters on {} samples for {} steps (from step {})",
        model.num_params(),
        data.len(),
        total,
        state.step()
    );
    let start = Instant::now();
    let mut steps = Vec::new();
    let log_eval = |state: &TrainState, evals: &mut fs::File| -> Result<()> {
        let mut splits = vec![("train", evaluate(&model, &state.store, &data)?)];
        if let Some(v) = &val {
            splits.push(("val", evaluate(&model, &state.store, v)?));
        }
        for (name, r) in splits {
            writeln!(evals, "{},{name},{},{},{:.3}", state.step(), r.loss, r.iou, start.elapsed().as_secs_f64())?;
            log::info!("step {} {name}: loss {:.4} IoU {:.4}", state.step(), r.loss, r.iou);
        }
        Ok(())
    };
    while state.step() < total {
        let batch = batch_indices(tc.seed, state.step(), data.len(), tc.batch_size);
        let mut rec = train_step(&model, &mut state, &data, &batch)?;
        rec.seconds = start.elapsed().as_secs_f64();
        writeln!(metrics, "{}", rec.csv_row())?;
        steps.push(rec);
        let s = state.step();
        if tc.checkpoint_interval > 0 && s % tc.checkpoint_interval == 0 && s < total {
            save_checkpoint(&out_dir.join(checkpoint_name(s)), &state)?;
        }
        if tc.eval_interval > 0 && s % tc.eval_interval == 0 && s < total {
            log_eval(&state, &mut evals)?;
        }
    }
    let final_checkpoint = out_dir.join("final.lara");
    save_checkpoint(&final_checkpoint, &state)?;
    let train_eval = MetricsRecord { step: state.step(), ..evaluate(&model, &state.store, &data)? };
    let val_eval = val
        .as_ref()
        .map(|v| evaluate(&model, &state.store, v).map(|r| MetricsRecord { step: state.step(), ..r }))
        .transpose()?;
    for (name, r) in std::iter::once(("train", &train_eval)).chain(val_eval.as_ref().map(|r| ("val", r))) {
        writeln!(evals, "{},{name},{},{},{:.3}", r.step, r.loss, r.iou, start.elapsed().as_secs_f64())?;
    }
    log::info!("finished at step {}: train IoU {:.4}", state.step(), train_eval.iou);
    Ok(TrainSummary { steps, train_eval, val_eval, final_checkpoint, state })
}

/// Hyperparameter swept by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    N,
    M,
    L,
}

impl std::str::FromStr for SweepAxis {
    type Err = LaraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(SweepAxis::N),
            "M" => Ok(SweepAxis::M),
            "L" => Ok(SweepAxis::L),
            other => Err(LaraError::Argument(format!("sweep axis must be N, M or L, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::N => "N",
            SweepAxis::M => "M",
            SweepAxis::L => "L",
        })
    }
}

impl SweepAxis {
    pub fn apply(&self, cfg: &mut Config, value: usize) {
        match self {
            SweepAxis::N => cfg.model.n_latents = value,
            SweepAxis::M => cfg.model.latent_dim = value,
            SweepAxis::L => cfg.model.self_layers = value,
        }
    }
}

/// One row of `sweep.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    /// Final IoU on the held-out set, or the training set without one.
    pub iou: f64,
    pub loss: f64,
}

/// Trains one variant per value with the shared seed, sequentially, each
/// under `out_dir/{axis}_{value}`, and writes `out_dir/sweep.csv`.
pub fn sweep(
    cfg: &Config,
    axis: SweepAxis,
    values: &[usize],
    train_set: &[RenderedSample],
    val_set: Option<&[RenderedSample]>,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(LaraError::Argument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut variant = cfg.clone();
        axis.apply(&mut variant, value);
        variant.validate()?;
        log::info!("sweep {axis}={value}");
        let dir = out_dir.join(format!("{axis}_{value}"));
        let s = train(&variant, train_set, val_set, &dir, &TrainOptions::default())?;
        let r = s.val_eval.unwrap_or(s.train_eval);
        rows.push(SweepRow { value, iou: r.iou, loss: r.loss });
    }
    let mut csv = String::from("axis,value,iou,loss\n");
    for r in &rows {
        csv.push_str(&format!("{axis},{},{},{}\n", r.value, r.iou, r.loss));
    }
    let path = out_dir.join("sweep.csv");
    fs::write(&path, csv).map_err(LaraError::file(path))?;
    Ok(rows)
}
