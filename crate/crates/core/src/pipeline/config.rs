use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::SynthSpec;
use crate::error::{Error, Result};
use crate::evaluation::SplitConfig;
use crate::losses::{ArcConfig, TripletConfig};
use crate::model::{BackboneConfig, HeadConfig};
use crate::montage::MontageConfig;
use crate::optim::OptimizerSpec;
use crate::training::BatchSpec;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CREASENET_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset tree `root/subject/session/image`; empty means `<out>/synth`.
    pub root: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { root: PathBuf::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MontageSection {
    /// `paper-stated`, `shape-consistent` or `reduced`.
    pub preset: String,
}

impl Default for MontageSection {
    fn default() -> Self {
        MontageSection { preset: "shape-consistent".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Reference,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    /// Channel width of the reduced backbone; its embedding is `2 * width`.
    pub reduced_width: usize,
    /// Block count of the reduced backbone.
    pub reduced_depth: usize,
    pub head: HeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::Reference,
            reduced_width: 8,
            reduced_depth: 3,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcSection {
    pub margin: f64,
    pub scale: f64,
}

impl Default for ArcSection {
    fn default() -> Self {
        let d = ArcConfig::default();
        ArcSection { margin: d.margin, scale: d.scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneStage {
    pub batch: BatchSpec,
    /// `max_epochs` is the number of epochs the stage runs.
    pub optimizer: OptimizerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HeadStage {
    pub batch: BatchSpec,
    pub optimizer: OptimizerSpec,
    /// Also update the backbone during head training.
    pub finetune_backbone: bool,
}

/// Every setting a command can read, merged from defaults, a config file
/// and `key=value` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSpec,
    pub montage: MontageSection,
    pub model: ModelSection,
    pub triplet: TripletConfig,
    pub arcface: ArcSection,
    pub backbone_training: BackboneStage,
    pub head_training: HeadStage,
    pub evaluation: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            seed: 7,
            data: DataSection::default(),
            synth: SynthSpec::default(),
            montage: MontageSection::default(),
            model: ModelSection::default(),
            triplet: TripletConfig::default(),
            arcface: ArcSection::default(),
            backbone_training: BackboneStage::default(),
            head_training: HeadStage::default(),
            evaluation: SplitConfig::default(),
        }
    }
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

fn leaf_keys(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(fmt_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(fmt_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file` (or the file named by [`CONFIG_ENV`]), then
    /// the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_file = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut cfg = match file.map(Path::to_path_buf).or(env_file) {
            Some(p) => Self::load(&p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `dotted.key=value` assignment; the key must already exist.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{assignment}' is not key=value")))?;
        let mut root = toml::Value::try_from(self).map_err(fmt_err)?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("'{key}' is not a config key")))?;
            let slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::InvalidConfig(format!("'{key}' is not a config key")))?;
            if i + 1 == parts.len() {
                if slot.is_table() {
                    return Err(Error::InvalidConfig(format!("'{key}' is a section, not a key")));
                }
                let mut value = parse_value(raw.trim());
                if slot.is_float() {
                    if let toml::Value::Integer(n) = value {
                        value = toml::Value::Float(n as f64);
                    }
                }
                *slot = value;
                break;
            }
            node = slot;
        }
        root.try_into().map_err(|e| Error::InvalidConfig(format!("{key}: {e}")))
    }

    /// Every leaf key with its built-in default, in file order.
    pub fn documented_keys() -> Vec<(String, String)> {
        let v = toml::Value::try_from(Self::default()).expect("defaults serialize");
        let mut out = Vec::new();
        leaf_keys("", &v, &mut out);
        out
    }

    pub fn montage(&self) -> Result<MontageConfig> {
        let m = MontageConfig::preset(&self.montage.preset)?;
        m.validate()?;
        Ok(m)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let input = self.montage()?.cube_dims();
        let cfg = match self.model.architecture {
            Architecture::Reference => BackboneConfig::reference_with_input(input),
            Architecture::Reduced => {
                BackboneConfig::reduced(input, self.model.reduced_width, self.model.reduced_depth)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arc(&self, num_classes: usize) -> ArcConfig {
        ArcConfig {
            margin: self.arcface.margin,
            scale: self.arcface.scale,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.triplet.validate()?;
        self.backbone_training.batch.validate()?;
        self.backbone_training.optimizer.validate()?;
        self.head_training.batch.validate()?;
        self.head_training.optimizer.validate()?;
        self.evaluation.validate()?;
        self.arc(1).validate()?;
        let backbone = self.backbone()?;
        if self.model.head.input_dim != backbone.embedding_dim() {
            return Err(Error::InvalidConfig(format!(
                "model.head.input_dim is {} but the backbone embeds to {}",
                self.model.head.input_dim,
                backbone.embedding_dim()
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        digest_json(self)
    }
}

pub(crate) fn digest_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.triplet.margin, 0.5);
        assert_eq!(c.arcface.scale, 30.0);
        assert_eq!(c.arcface.margin, 0.5);
        assert_eq!(c.backbone_training.optimizer.learning_rate, 1e-5);
        assert_eq!(c.backbone_training.batch.persons_per_batch, 100);
        assert_eq!(c.backbone_training.batch.images_per_person, 5);
        c.validate().unwrap();
    }

    #[test]
    fn dump_then_load_is_identity() {
        let c = RunConfig::default()
            .with_override("model.architecture=reduced")
            .unwrap()
            .with_override("model.head.input_dim=16")
            .unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default();
        let d = c.with_override("triplet.margin=1").unwrap();
        assert_eq!(d.triplet.margin, 1.0);
        let d = c.with_override("montage.preset=reduced").unwrap();
        assert_eq!(d.montage.preset, "reduced");
        let d = c.with_override("evaluation.mode=random").unwrap();
        assert_eq!(d.evaluation.mode, crate::evaluation::SplitMode::Random);
        assert!(c.with_override("triplet.nope=1").is_err());
        assert!(c.with_override("triplet=1").is_err());
        assert!(c.with_override("seed").is_err());
        assert!(c.with_override("seed=abc").is_err());
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(RunConfig::from_toml("[triplet]\nmargn = 0.3\n").is_err());
        let c = RunConfig::from_toml("seed = 3\n[triplet]\nmargin = 0.3\n").unwrap();
        assert_eq!((c.seed, c.triplet.margin, c.triplet.margin_max), (3, 0.3, 1.5));
    }

    #[test]
    fn keys_cover_every_section() {
        let keys: Vec<String> = RunConfig::documented_keys().into_iter().map(|(k, _)| k).collect();
        for k in [
            "seed",
            "synth.noise_sigma",
            "montage.preset",
            "model.head.fc2_units",
            "triplet.simultaneous_triplets",
            "arcface.scale",
            "backbone_training.optimizer.learning_rate",
            "head_training.finetune_backbone",
            "evaluation.gallery_per_subject",
        ] {
            assert!(keys.iter().any(|x| x == k), "{k} missing");
        }
    }

    #[test]
    fn head_must_match_backbone() {
        let c = RunConfig::default().with_override("model.architecture=reduced").unwrap();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
}
