//! Two-stage training: the backbone learns from mined triplets, then a
//! normalizing head and an angular-margin classifier learn on top of the
//! (by default frozen) backbone.

pub mod checkpoint;
pub mod sampler;
pub mod source;
pub mod state;

use std::fs::OpenOptions;
use std::path::PathBuf;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::losses::{mine_triplets, triplet_batch_loss, ArcFaceLayer, TripletConfig};
use crate::model::params::Grads;
use crate::model::{Backbone, EmbeddingVector, Head, ParamSet};
use crate::optim::{Adam, OptimizerSpec};
use crate::par;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use sampler::{batch_seed, sample_batch, sample_indexed, Batch, BatchSpec};
pub use source::{CubeFiles, CubeSource};
pub use state::{Stage, TrainState};

/// Samples grouped by class plus the input source they index into.
pub struct TrainingSet<'a> {
    pub groups: Vec<Vec<usize>>,
    pub source: &'a dyn CubeSource,
}

impl<'a> TrainingSet<'a> {
    pub fn new(groups: Vec<Vec<usize>>, source: &'a dyn CubeSource) -> Result<Self> {
        if let Some(bad) = groups.iter().flatten().find(|&&i| i >= source.len()) {
            return Err(Error::MissingEmbedding(format!("sample {bad} has no input")));
        }
        Ok(TrainingSet { groups, source })
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    /// Class of every sample index that appears in a group.
    pub fn label_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.source.len()];
        for (c, g) in self.groups.iter().enumerate() {
            for &i in g {
                out[i] = Some(c);
            }
        }
        out
    }
}

/// Where a stage writes per-epoch checkpoints and metrics.
#[derive(Debug, Clone, Default)]
pub struct StageOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    pub config_hash: String,
    pub preset: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub triplets: usize,
    pub updated: bool,
}

/// One stage-1 optimizer step on a sampled batch.
pub fn backbone_step(
    set: &TrainingSet,
    backbone: &mut Backbone,
    adam: &mut Adam,
    triplet: &TripletConfig,
    margin: f64,
    batch: &Batch,
) -> Result<StepOutcome> {
    let net = &*backbone;
    let forward: Vec<Result<_>> = par::map(&batch.items, |&i| net.forward_train(&set.source.volume(i)?));
    let mut tapes = Vec::with_capacity(forward.len());
    let mut embeddings = Vec::with_capacity(forward.len());
    for f in forward {
        let (e, tape) = f?;
        embeddings.push(e.values);
        tapes.push(tape);
    }
    let cfg = TripletConfig { margin, ..triplet.clone() };
    let triplets = mine_triplets(&embeddings, &batch.labels, &cfg)?;
    if triplets.is_empty() {
        return Ok(StepOutcome { loss: 0.0, triplets: 0, updated: false });
    }
    let (loss, grads) = triplet_batch_loss(&embeddings, &triplets, margin, triplet.simultaneous_triplets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("triplet loss".into()));
    }
    let work: Vec<usize> = (0..tapes.len()).filter(|&k| grads[k].iter().any(|g| *g != 0.0)).collect();
    let partial: Vec<Result<Grads>> = par::map(&work, |&k| net.backward(&tapes[k], &grads[k]));
    let mut total = backbone.params.zeros_like();
    for g in partial {
        total.add_assign(&g?);
    }
    if !total.all_finite() {
        return Err(Error::NonFinite("backbone gradient".into()));
    }
    adam.step(&mut backbone.params, &total);
    Ok(StepOutcome { loss, triplets: triplets.len(), updated: true })
}

fn append_metrics(path: &PathBuf, epoch: usize, mean_loss: f64, wall: f64) -> Result<()> {
    let new = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    if new {
        w.write_record(["epoch", "mean_loss", "wall_time"]).map_err(fmt)?;
    }
    w.write_record([epoch.to_string(), mean_loss.to_string(), format!("{wall:.3}")])
        .map_err(fmt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn finish_epoch(
    state: &mut TrainState,
    losses: &[f64],
    started: Instant,
    outputs: &StageOutputs,
    params: &ParamSet,
) -> Result<()> {
    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    state.epoch += 1;
    state.epoch_losses.push(mean);
    log::info!("{} epoch {}: mean loss {mean:.6}", state.stage.tag(), state.epoch);
    if let Some(path) = &outputs.metrics_log {
        append_metrics(path, state.epoch, mean, started.elapsed().as_secs_f64())?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        let meta = CheckpointMeta {
            config_hash: outputs.config_hash.clone(),
            preset: outputs.preset.clone(),
            stage: state.stage.tag().to_string(),
            epoch: state.epoch,
            state: state.clone(),
        };
        let tag = state.stage.tag();
        save_checkpoint(&dir.join(format!("{tag}-epoch{:04}.ckpt", state.epoch)), &meta, params)?;
        save_checkpoint(&dir.join(format!("{tag}.ckpt")), &meta, params)?;
    }
    Ok(())
}

/// Stage 1: `epochs` further epochs of triplet training.
#[allow(clippy::too_many_arguments)]
pub fn train_backbone(
    set: &TrainingSet,
    backbone: &mut Backbone,
    triplet: &TripletConfig,
    opt: &OptimizerSpec,
    batch_spec: &BatchSpec,
    mut state: TrainState,
    epochs: usize,
    outputs: &StageOutputs,
) -> Result<TrainState> {
    if state.stage != Stage::Backbone {
        return Err(Error::InvalidConfig("train_backbone needs a backbone-stage state".into()));
    }
    triplet.validate()?;
    opt.validate()?;
    batch_spec.validate()?;
    let mut adam = Adam::new(opt.clone(), &backbone.params);
    let total_epochs = state.epoch + epochs;
    let started = Instant::now();
    for _ in 0..epochs {
        let margin = triplet.margin_at(state.epoch, total_epochs);
        let mut losses = Vec::with_capacity(batch_spec.batches_per_epoch);
        for b in 0..batch_spec.batches_per_epoch {
            let batch = sample_indexed(&set.groups, batch_spec, batch_seed(state.rng_seed, state.epoch, b))?;
            let outcome = backbone_step(set, backbone, &mut adam, triplet, margin, &batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {}, batch {b})", state.epoch + 1)),
                other => other,
            })?;
            state.step += 1;
            state.loss_history.push(outcome.loss);
            losses.push(outcome.loss);
        }
        finish_epoch(&mut state, &losses, started, outputs, &backbone.params)?;
    }
    Ok(state)
}

/// Head, classifier and their optimizer-facing parameter views.
#[derive(Debug, Clone)]
pub struct HeadModel {
    pub head: Head,
    pub arc: ArcFaceLayer,
}

impl HeadModel {
    /// Head and classifier parameters in one named set (for checkpoints).
    pub fn merged_params(&self) -> ParamSet {
        let mut all = self.head.params.clone();
        all.params.extend(self.arc.params.params.iter().cloned());
        all
    }

    pub fn load_merged(&mut self, merged: &ParamSet) -> Result<()> {
        let n = self.head.params.len();
        if merged.len() != n + self.arc.params.len() {
            return Err(Error::shape(n + self.arc.params.len(), merged.len()));
        }
        self.head.params.assign(&ParamSet {
            params: merged.params[..n].to_vec(),
        })?;
        self.arc.params.assign(&ParamSet {
            params: merged.params[n..].to_vec(),
        })
    }
}

/// How stage 2 treats the backbone.
pub enum BackboneMode<'a> {
    /// Embeddings are computed once; the backbone is never written.
    Frozen(&'a Backbone),
    /// Gradients also flow into the backbone.
    Finetune(&'a mut Backbone),
}

struct ItemResult {
    loss: f64,
    correct: bool,
    head: Grads,
    arc: Grads,
    backbone: Option<Grads>,
}

/// Stage 2: `epochs` further epochs of margin-classifier training.
#[allow(clippy::too_many_arguments)]
pub fn train_head(
    set: &TrainingSet,
    mut backbone: BackboneMode,
    model: &mut HeadModel,
    opt: &OptimizerSpec,
    batch_spec: &BatchSpec,
    mut state: TrainState,
    epochs: usize,
    outputs: &StageOutputs,
) -> Result<TrainState> {
    if state.stage != Stage::Head {
        return Err(Error::InvalidConfig("train_head needs a head-stage state".into()));
    }
    if model.arc.config.num_classes != set.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "classifier has {} classes, training set {}",
            model.arc.config.num_classes,
            set.num_classes()
        )));
    }
    opt.validate()?;
    batch_spec.validate()?;
    let mut head_adam = Adam::new(opt.clone(), &model.head.params);
    let mut arc_adam = Adam::new(opt.clone(), &model.arc.params);
    let mut backbone_adam = match &backbone {
        BackboneMode::Finetune(b) => Some(Adam::new(opt.clone(), &b.params)),
        BackboneMode::Frozen(_) => None,
    };
    let cached: Option<Vec<Vec<f64>>> = match &backbone {
        BackboneMode::Frozen(b) => {
            let ids: Vec<usize> = (0..set.source.len()).collect();
            let embs: Vec<Result<Vec<f64>>> =
                par::map(&ids, |&i| Ok(b.forward(&set.source.volume(i)?)?.embedding.values));
            Some(embs.into_iter().collect::<Result<_>>()?)
        }
        BackboneMode::Finetune(_) => None,
    };
    let started = Instant::now();
    for _ in 0..epochs {
        let mut losses = Vec::with_capacity(batch_spec.batches_per_epoch);
        let (mut correct, mut seen) = (0usize, 0usize);
        for b in 0..batch_spec.batches_per_epoch {
            let batch = sample_indexed(&set.groups, batch_spec, batch_seed(state.rng_seed, state.epoch, b))?;
            let pairs: Vec<(usize, usize)> = batch.items.iter().copied().zip(batch.labels.iter().copied()).collect();
            let bb: Option<&Backbone> = match &backbone {
                BackboneMode::Finetune(b) => Some(&**b),
                BackboneMode::Frozen(_) => None,
            };
            let m = &*model;
            let results: Vec<Result<ItemResult>> = par::map(&pairs, |&(item, label)| {
                let (emb, tape) = match (&cached, bb) {
                    (Some(c), _) => (c[item].clone(), None),
                    (None, Some(net)) => {
                        let (e, t) = net.forward_train(&set.source.volume(item)?)?;
                        (e.values, Some(t))
                    }
                    (None, None) => unreachable!("either cached or trainable"),
                };
                let (out, head_tape) = m.head.forward_train(&emb)?;
                let mut arc_g = m.arc.params.zeros_like();
                let step = m.arc.step(&out.values, label, &mut arc_g)?;
                let correct = m.arc.predict(&out.values)? == label;
                let mut head_g = m.head.params.zeros_like();
                let d_emb = m.head.backward(&head_tape, &step.d_input, &mut head_g);
                let backbone_g = match (tape, bb) {
                    (Some(t), Some(net)) => Some(net.backward(&t, &d_emb)?),
                    _ => None,
                };
                Ok(ItemResult { loss: step.loss, correct, head: head_g, arc: arc_g, backbone: backbone_g })
            });
            let mut head_total = model.head.params.zeros_like();
            let mut arc_total = model.arc.params.zeros_like();
            let mut bb_total: Option<Grads> = bb.map(|n| n.params.zeros_like());
            let mut loss = 0.0;
            for r in results {
                let r = r?;
                loss += r.loss;
                correct += r.correct as usize;
                head_total.add_assign(&r.head);
                arc_total.add_assign(&r.arc);
                if let (Some(t), Some(g)) = (bb_total.as_mut(), r.backbone.as_ref()) {
                    t.add_assign(g);
                }
            }
            let n = pairs.len() as f64;
            seen += pairs.len();
            loss /= n;
            if !loss.is_finite() || !head_total.all_finite() || !arc_total.all_finite() {
                return Err(Error::NonFinite(format!("head loss (epoch {}, batch {b})", state.epoch + 1)));
            }
            head_total.scale(1.0 / n);
            arc_total.scale(1.0 / n);
            head_adam.step(&mut model.head.params, &head_total);
            arc_adam.step(&mut model.arc.params, &arc_total);
            if let (BackboneMode::Finetune(net), Some(mut g), Some(adam)) =
                (&mut backbone, bb_total, backbone_adam.as_mut())
            {
                g.scale(1.0 / n);
                adam.step(&mut net.params, &g);
            }
            state.step += 1;
            state.loss_history.push(loss);
            losses.push(loss);
        }
        state.epoch_accuracy.push(correct as f64 / seen.max(1) as f64);
        finish_epoch(&mut state, &losses, started, outputs, &model.merged_params())?;
    }
    Ok(state)
}

/// Final embeddings for the given samples: backbone, then the head when
/// one is supplied (otherwise the raw backbone vector).
pub fn embed_samples(
    backbone: &Backbone,
    head: Option<&Head>,
    source: &dyn CubeSource,
    samples: &[usize],
) -> Result<Vec<EmbeddingVector>> {
    let out: Vec<Result<EmbeddingVector>> = par::map(samples, |&i| {
        let e = backbone.forward(&source.volume(i)?)?.embedding;
        match head {
            Some(h) => h.forward(&e),
            None => Ok(e),
        }
    });
    out.into_iter().collect()
}
