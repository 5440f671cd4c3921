//! Command-level stages over an output directory.
//!
//! ```text
//! <out>/run.json                 run manifest: config hash and one stamp per stage
//! <out>/config.toml              resolved configuration of the last command
//! <out>/synth/                   generated image tree (when no data root is set)
//! <out>/cubes/                   montage cubes mirroring the image tree, plus manifest.json
//! <out>/backbone/                stage-1 checkpoints and metrics.csv
//! <out>/head/                    stage-2 checkpoints and metrics.csv
//! <out>/embeddings.csv           sample_id,subject_id,e0,e1,...
//! <out>/eval/                    split.json, scores.csv, det.csv, metrics.toml
//! ```
//!
//! A stage is skipped when its stamp key (a digest of the settings and
//! input contents it depends on) is unchanged and every output it recorded
//! still hashes to the recorded value.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::{generate_synthetic, load_manifest, DatasetManifest, SessionRecord, SubjectRecord, INDEX_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{
    make_split, read_score_csv, score_protocol, write_det_csv, DetCurve, MetricsReport, ProtocolScores, SplitConfig,
    SplitPlan,
};
use crate::losses::ArcFaceLayer;
use crate::model::{Backbone, Head, ParamSet};
use crate::montage::{image_to_cube, sidecar_path, RoiImage};
use crate::par;
use crate::training::{
    embed_samples, load_checkpoint, train_backbone, train_head, BackboneMode, CubeFiles, HeadModel, Stage,
    StageOutputs, TrainState, TrainingSet,
};

pub use config::{Architecture, RunConfig, CONFIG_ENV};
use config::digest_json;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    /// Output path relative to the run directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(RUN_MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Digest over the contents of many files, in the given order.
fn files_digest(paths: &[PathBuf]) -> Result<String> {
    let digests: Vec<Result<String>> = par::map(paths, |p| file_digest(p));
    let mut h = Sha256::new();
    for d in digests {
        h.update(d?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().into_owned()
}

/// The run directory plus the configuration every stage reads.
pub struct Run {
    pub out: PathBuf,
    pub config: RunConfig,
}

impl Run {
    pub fn new(out: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let path = out.join("config.toml");
        fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let mut manifest = RunManifest::load(&out)?;
        manifest.run_id = config.run_id.clone();
        manifest.config_hash = config.hash();
        manifest.save(&out)?;
        Ok(Run { out, config })
    }

    fn stage(&self, name: &str, key: String, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<Outcome> {
        let mut manifest = RunManifest::load(&self.out)?;
        if let Some(rec) = manifest.stages.get(name) {
            if rec.key == key && self.outputs_intact(rec) {
                log::info!("{name}: up to date, skipping");
                return Ok(Outcome::Skipped);
            }
        }
        let outputs = body()?;
        let hashes: Vec<Result<String>> = par::map(&outputs, |p| file_digest(p));
        let mut rec = StageRecord { key, outputs: BTreeMap::new() };
        for (p, h) in outputs.iter().zip(hashes) {
            rec.outputs.insert(rel(&self.out, p), h?);
        }
        manifest = RunManifest::load(&self.out)?;
        manifest.stages.insert(name.to_string(), rec);
        manifest.save(&self.out)?;
        Ok(Outcome::Ran)
    }

    fn outputs_intact(&self, rec: &StageRecord) -> bool {
        let entries: Vec<(&String, &String)> = rec.outputs.iter().collect();
        par::map(&entries, |(p, h)| file_digest(&self.out.join(p)).map(|d| &d == *h).unwrap_or(false))
            .into_iter()
            .all(|ok| ok)
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.out.join("synth")
    }

    pub fn data_root(&self) -> PathBuf {
        if self.config.data.root.as_os_str().is_empty() {
            self.synth_dir()
        } else {
            self.config.data.root.clone()
        }
    }

    pub fn cube_dir(&self) -> PathBuf {
        self.out.join("cubes")
    }

    pub fn backbone_dir(&self) -> PathBuf {
        self.out.join("backbone")
    }

    pub fn head_dir(&self) -> PathBuf {
        self.out.join("head")
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.out.join("embeddings.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn synth(&self) -> Result<Outcome> {
        let dir = self.synth_dir();
        let spec = &self.config.synth;
        self.stage("synth", digest_json(spec), || {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            let m = generate_synthetic(spec, &dir)?;
            log::info!("synth: {} subjects, {} images", m.num_subjects(), m.num_records());
            let mut outs: Vec<PathBuf> = m.samples().into_iter().map(|s| s.path).collect();
            outs.push(dir.join(INDEX_FILE));
            Ok(outs)
        })
    }

    /// Montage every image of the data tree into `<out>/cubes`.
    pub fn preprocess(&self) -> Result<Outcome> {
        let root = self.data_root();
        let source = load_manifest(&root)?;
        let montage = self.config.montage()?;
        let images: Vec<PathBuf> = source.samples().into_iter().map(|s| s.path).collect();
        let key = digest_json(&(&montage, files_digest(&images)?));
        let dir = self.cube_dir();
        self.stage("preprocess", key, || {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            let subjects: Vec<SubjectRecord> = source
                .subjects
                .iter()
                .map(|s| SubjectRecord {
                    subject_id: s.subject_id.clone(),
                    sessions: s
                        .sessions
                        .iter()
                        .map(|t| SessionRecord {
                            session_id: t.session_id.clone(),
                            images: t.images.iter().map(|p| p.with_extension("cube")).collect(),
                        })
                        .collect(),
                })
                .collect();
            let mut cubes = DatasetManifest::new(&dir, subjects);
            cubes.preset = Some(montage.preset_name.clone());
            let jobs: Vec<(PathBuf, PathBuf, String)> = source
                .samples()
                .into_iter()
                .zip(cubes.samples())
                .map(|(src, dst)| (src.path, dst.path, src.sample_id))
                .collect();
            let done: Vec<Result<()>> = par::map(&jobs, |(src, dst, id)| {
                let mut img = RoiImage::load(src)?;
                img.source_id = id.clone();
                let parent = dst.parent().expect("cube has a parent");
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                image_to_cube(&img, &montage)?.save(dst)
            });
            done.into_iter().collect::<Result<()>>()?;
            cubes.save_index(&dir.join(INDEX_FILE))?;
            log::info!("preprocess: {} cubes of shape {:?}", jobs.len(), montage.cube_dims());
            let mut outs = Vec::with_capacity(2 * jobs.len() + 1);
            for (_, dst, _) in &jobs {
                outs.push(dst.clone());
                outs.push(sidecar_path(dst));
            }
            outs.push(dir.join(INDEX_FILE));
            Ok(outs)
        })
    }

    /// Montage a single image into `<out>/cubes/<stem>.cube`.
    pub fn preprocess_image(&self, image: &Path) -> Result<PathBuf> {
        let montage = self.config.montage()?;
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let dst = self.cube_dir().join(format!("{stem}.cube"));
        let key = digest_json(&(&montage, file_digest(image)?));
        self.stage(&format!("preprocess:{stem}"), key, || {
            fs::create_dir_all(self.cube_dir()).map_err(|e| Error::io(self.cube_dir(), e))?;
            let img = RoiImage::load(image)?;
            image_to_cube(&img, &montage)?.save(&dst)?;
            Ok(vec![dst.clone(), sidecar_path(&dst)])
        })?;
        Ok(dst)
    }

    pub fn cube_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load_index(&self.cube_dir().join(INDEX_FILE))
    }

    fn cube_source(&self) -> Result<(DatasetManifest, CubeFiles, String)> {
        let manifest = self.cube_manifest()?;
        let paths: Vec<PathBuf> = manifest.samples().into_iter().map(|s| s.path).collect();
        let digest = files_digest(&paths)?;
        Ok((manifest, CubeFiles { paths }, digest))
    }

    /// Identity of stage-1 training: everything except the epoch count.
    fn backbone_identity(&self, cube_digest: &str) -> Result<String> {
        let c = &self.config;
        let mut opt = c.backbone_training.optimizer.clone();
        opt.max_epochs = 0;
        Ok(digest_json(&(
            self.config.backbone()?.fingerprint(),
            &c.triplet,
            &c.backbone_training.batch,
            opt,
            c.seed,
            cube_digest,
        )))
    }

    pub fn train_backbone(&self) -> Result<Outcome> {
        let (manifest, source, cube_digest) = self.cube_source()?;
        let identity = self.backbone_identity(&cube_digest)?;
        let epochs = self.config.backbone_training.optimizer.max_epochs;
        let key = digest_json(&(&identity, epochs));
        let dir = self.backbone_dir();
        self.stage("train-backbone", key, || {
            let ckpt = dir.join("backbone.ckpt");
            let mut backbone = Backbone::new(self.config.backbone()?, self.config.seed)?;
            let mut state = TrainState::new(Stage::Backbone, self.config.seed);
            match load_checkpoint(&ckpt, Some(&identity)) {
                Ok(c) if c.meta.epoch <= epochs => {
                    backbone.params.assign(&c.params)?;
                    state = c.meta.state;
                    log::info!("train-backbone: resuming after epoch {}", state.epoch);
                }
                _ => {
                    if dir.exists() {
                        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    }
                }
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let set = TrainingSet::new(manifest.samples_by_subject(), &source)?;
            let outputs = StageOutputs {
                checkpoint_dir: Some(dir.clone()),
                metrics_log: Some(dir.join("metrics.csv")),
                config_hash: identity.clone(),
                preset: self.config.montage.preset.clone(),
            };
            let remaining = epochs - state.epoch;
            let state = train_backbone(
                &set,
                &mut backbone,
                &self.config.triplet,
                &self.config.backbone_training.optimizer,
                &self.config.backbone_training.batch,
                state,
                remaining,
                &outputs,
            )?;
            if remaining == 0 || !ckpt.exists() {
                let meta = crate::training::CheckpointMeta {
                    config_hash: identity.clone(),
                    preset: self.config.montage.preset.clone(),
                    stage: Stage::Backbone.tag().into(),
                    epoch: state.epoch,
                    state,
                };
                crate::training::save_checkpoint(&ckpt, &meta, &backbone.params)?;
            }
            Ok(vec![ckpt])
        })
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let (_, _, cube_digest) = self.cube_source()?;
        let identity = self.backbone_identity(&cube_digest)?;
        let ckpt = load_checkpoint(&self.backbone_dir().join("backbone.ckpt"), Some(&identity))?;
        let mut b = Backbone::zeroed(self.config.backbone()?)?;
        b.params.assign(&ckpt.params)?;
        Ok(b)
    }

    fn head_identity(&self, cube_digest: &str, num_classes: usize) -> Result<String> {
        let c = &self.config;
        let mut opt = c.head_training.optimizer.clone();
        opt.max_epochs = 0;
        Ok(digest_json(&(
            file_digest(&self.backbone_dir().join("backbone.ckpt"))?,
            &c.model.head,
            c.arc(num_classes),
            &c.head_training.batch,
            opt,
            c.head_training.finetune_backbone,
            c.seed,
            cube_digest,
        )))
    }

    pub fn new_head_model(&self, num_classes: usize) -> Result<HeadModel> {
        let c = &self.config;
        Ok(HeadModel {
            head: Head::new(c.model.head.clone(), c.seed.wrapping_add(1)),
            arc: ArcFaceLayer::new(c.model.head.fc2_units, c.arc(num_classes), c.seed.wrapping_add(2))?,
        })
    }

    pub fn train_head(&self) -> Result<Outcome> {
        let (manifest, source, cube_digest) = self.cube_source()?;
        let num_classes = manifest.num_subjects();
        let identity = self.head_identity(&cube_digest, num_classes)?;
        let epochs = self.config.head_training.optimizer.max_epochs;
        let key = digest_json(&(&identity, epochs));
        let dir = self.head_dir();
        self.stage("train-head", key, || {
            let mut backbone = self.load_backbone()?;
            let mut model = self.new_head_model(num_classes)?;
            let mut state = TrainState::new(Stage::Head, self.config.seed);
            let ckpt = dir.join("head.ckpt");
            let finetune = self.config.head_training.finetune_backbone;
            let tuned = dir.join("backbone-finetuned.ckpt");
            match load_checkpoint(&ckpt, Some(&identity)) {
                Ok(c) if c.meta.epoch <= epochs && (!finetune || tuned.exists()) => {
                    model.load_merged(&c.params)?;
                    if finetune {
                        backbone.params.assign(&load_checkpoint(&tuned, Some(&identity))?.params)?;
                    }
                    state = c.meta.state;
                    log::info!("train-head: resuming after epoch {}", state.epoch);
                }
                _ => {
                    if dir.exists() {
                        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    }
                }
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let set = TrainingSet::new(manifest.samples_by_subject(), &source)?;
            let outputs = StageOutputs {
                checkpoint_dir: Some(dir.clone()),
                metrics_log: Some(dir.join("metrics.csv")),
                config_hash: identity.clone(),
                preset: self.config.montage.preset.clone(),
            };
            let mode = if finetune {
                BackboneMode::Finetune(&mut backbone)
            } else {
                BackboneMode::Frozen(&backbone)
            };
            let remaining = epochs - state.epoch;
            let state = train_head(
                &set,
                mode,
                &mut model,
                &self.config.head_training.optimizer,
                &self.config.head_training.batch,
                state,
                remaining,
                &outputs,
            )?;
            let meta = crate::training::CheckpointMeta {
                config_hash: identity.clone(),
                preset: self.config.montage.preset.clone(),
                stage: Stage::Head.tag().into(),
                epoch: state.epoch,
                state,
            };
            if remaining == 0 || !ckpt.exists() {
                crate::training::save_checkpoint(&ckpt, &meta, &model.merged_params())?;
            }
            let mut outs = vec![ckpt];
            if finetune {
                crate::training::save_checkpoint(&tuned, &meta, &backbone.params)?;
                outs.push(tuned);
            }
            Ok(outs)
        })
    }

    /// The trained backbone (fine-tuned when configured) and head.
    pub fn load_models(&self) -> Result<(Backbone, HeadModel)> {
        let (manifest, _, cube_digest) = self.cube_source()?;
        let identity = self.head_identity(&cube_digest, manifest.num_subjects())?;
        let mut backbone = self.load_backbone()?;
        let head_ckpt = load_checkpoint(&self.head_dir().join("head.ckpt"), Some(&identity))?;
        let mut model = self.new_head_model(manifest.num_subjects())?;
        model.load_merged(&head_ckpt.params)?;
        if self.config.head_training.finetune_backbone {
            let tuned = load_checkpoint(&self.head_dir().join("backbone-finetuned.ckpt"), Some(&identity))?;
            backbone.params.assign(&tuned.params)?;
        }
        Ok((backbone, model))
    }

    pub fn embed(&self) -> Result<Outcome> {
        let (_, _, cube_digest) = self.cube_source()?;
        let mut ckpts = vec![self.backbone_dir().join("backbone.ckpt"), self.head_dir().join("head.ckpt")];
        if self.config.head_training.finetune_backbone {
            ckpts.push(self.head_dir().join("backbone-finetuned.ckpt"));
        }
        let key = digest_json(&(files_digest(&ckpts)?, &cube_digest));
        let path = self.embeddings_path();
        self.stage("embed", key, || {
            let (backbone, model) = self.load_models()?;
            let manifest = self.cube_manifest()?;
            let rows = embed_manifest(&backbone, Some(&model.head), &manifest)?;
            write_embeddings(&path, &rows)?;
            Ok(vec![path.clone()])
        })
    }

    pub fn evaluate(&self) -> Result<(Outcome, MetricsReport)> {
        let emb_path = self.embeddings_path();
        let key = digest_json(&(
            file_digest(&emb_path)?,
            file_digest(&self.cube_dir().join(INDEX_FILE))?,
            &self.config.evaluation,
        ));
        let dir = self.eval_dir();
        let outcome = self.stage("evaluate", key, || {
            let manifest = self.cube_manifest()?;
            let embeddings = read_embeddings(&emb_path)?;
            let ev = evaluate_embeddings(&embeddings, &manifest, &self.config.evaluation)?;
            write_evaluation(&dir, &ev)
        })?;
        Ok((outcome, MetricsReport::load(&dir.join("metrics.toml"))?))
    }

    /// Metrics for an existing `pair_type,gallery_id,probe_id,score` file.
    pub fn evaluate_scores(&self, scores: &Path) -> Result<MetricsReport> {
        let set = read_score_csv(scores)?;
        let (report, curve) = MetricsReport::from_scores(&set)?;
        let dir = self.eval_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_det_csv(&curve, &dir.join("det.csv"))?;
        report.save(&dir.join("metrics.toml"))?;
        Ok(report)
    }
}

/// One `(sample_id, embedding)` row per manifest sample, in manifest order.
pub fn embed_manifest(
    backbone: &Backbone,
    head: Option<&Head>,
    manifest: &DatasetManifest,
) -> Result<Vec<(String, String, Vec<f64>)>> {
    let samples = manifest.samples();
    let source = CubeFiles { paths: samples.iter().map(|s| s.path.clone()).collect() };
    let ids: Vec<usize> = (0..samples.len()).collect();
    let vecs = embed_samples(backbone, head, &source, &ids)?;
    Ok(samples
        .into_iter()
        .zip(vecs)
        .map(|(s, v)| (s.sample_id, manifest.subjects[s.subject].subject_id.clone(), v.values))
        .collect())
}

pub fn write_embeddings(path: &Path, rows: &[(String, String, Vec<f64>)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let dim = rows.first().map(|r| r.2.len()).unwrap_or(0);
    let header: Vec<String> = ["sample_id".to_string(), "subject_id".to_string()]
        .into_iter()
        .chain((0..dim).map(|i| format!("e{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (id, subject, v) in rows {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{id},{subject},{}", vals.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let bad = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(bad)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(bad)?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let v = rec
            .iter()
            .skip(2)
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.insert(id, v);
    }
    Ok(out)
}

pub struct Evaluation {
    pub plan: SplitPlan,
    pub scores: ProtocolScores,
    pub curve: DetCurve,
    pub report: MetricsReport,
}

pub fn evaluate_embeddings(
    embeddings: &HashMap<String, Vec<f64>>,
    manifest: &DatasetManifest,
    split: &SplitConfig,
) -> Result<Evaluation> {
    let plan = make_split(manifest, split)?;
    let scores = score_protocol(embeddings, &plan)?;
    let (report, curve) = MetricsReport::from_scores(&scores.score_set())?;
    Ok(Evaluation { plan, scores, curve, report })
}

fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split = dir.join("split.json");
    let text = serde_json::to_string_pretty(&ev.plan).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&split, text).map_err(|e| Error::io(&split, e))?;
    let scores = dir.join("scores.csv");
    ev.scores.write_csv(&scores)?;
    let det = dir.join("det.csv");
    write_det_csv(&ev.curve, &det)?;
    let metrics = dir.join("metrics.toml");
    ev.report.save(&metrics)?;
    Ok(vec![split, scores, det, metrics])
}

/// Checkpoint parameters without the surrounding model, for inspection.
pub fn checkpoint_params(path: &Path) -> Result<ParamSet> {
    Ok(load_checkpoint(path, None)?.params)
}
