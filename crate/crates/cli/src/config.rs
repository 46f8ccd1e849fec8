//! Run configuration: one TOML document, overridable from the command line.

use std::path::{Path, PathBuf};

use cda_core::config::{ArchConfig, TrainConfig};
use cda_core::data::DataShape;
use cda_core::dsn::CurriculumSchedule;
use cda_core::par::ExecMode;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Starting point for `[train]` before file overrides are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale learning rates (1e-4 / 1e-6 / 1e-5).
    Paper,
    /// Rates tuned for the desk-scale synthetic benchmark.
    #[default]
    Desk,
}

/// Per-stage epoch counts; unset entries use `train.epochs`, then the
/// preset's per-stage counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub source: Option<usize>,
    pub adapt: Option<usize>,
    pub dsn: Option<usize>,
    pub curriculum: Option<usize>,
}

fn default_start_fraction() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_start_fraction")]
    pub start_fraction: f64,
    /// Epochs to reach the full set; half of the stage's epochs when unset.
    pub ramp_epochs: Option<usize>,
    /// Target-network rate during stage D; the preset's choice when unset.
    pub lr: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            start_fraction: default_start_fraction(),
            ramp_epochs: None,
            lr: None,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// One or more labelled source manifests, merged into one source domain.
    pub source_manifests: Vec<PathBuf>,
    pub target_manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub memory_enabled: bool,
    #[serde(default = "yes")]
    pub curriculum_enabled: bool,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub arch: toml::Table,
    #[serde(default)]
    pub epochs: StageEpochs,
    #[serde(default)]
    pub curriculum: ScheduleConfig,
}

/// The stages that train something.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Source,
    Adapt,
    Dsn,
    Curriculum,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Source => "source",
            TrainStage::Adapt => "adapt",
            TrainStage::Dsn => "dsn",
            TrainStage::Curriculum => "curriculum",
        }
    }
}

fn merged<T: Serialize + DeserializeOwned>(base: &T, overrides: &toml::Table, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Config(format!("[{section}]: {e}")))?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(format!("[{section}]: {e}")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.source_manifests {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.target_manifest.is_relative() {
            cfg.target_manifest = base.join(&cfg.target_manifest);
        }
        if let Some(w) = &mut cfg.workdir {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_manifests.is_empty() {
            return Err(CliError::Config("source_manifests: at least one manifest is required".into()));
        }
        for reserved in ["seed", "memory_enabled"] {
            if self.train.contains_key(reserved) {
                return Err(CliError::Config(format!("[train].{reserved}: set this at the top level")));
            }
        }
        if self.arch.contains_key("input") {
            return Err(CliError::Config("[arch].input: the input shape comes from the data".into()));
        }
        for stage in [TrainStage::Source, TrainStage::Curriculum] {
            let t = self.train_config(stage)?;
            t.validate().map_err(|e| CliError::Config(format!("[train]: {e}")))?;
        }
        self.schedule(1)?;
        Ok(())
    }

    fn base_train(&self) -> TrainConfig {
        match self.preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }

    pub fn stage_epochs(&self, stage: TrainStage) -> usize {
        let e = &self.epochs;
        let explicit = match stage {
            TrainStage::Source => e.source,
            TrainStage::Adapt => e.adapt,
            TrainStage::Dsn => e.dsn,
            TrainStage::Curriculum => e.curriculum,
        };
        let shared = self.train.get("epochs").and_then(|v| v.as_integer()).map(|v| v as usize);
        // stage B stops short so stage D still has room to move
        let preset = match (self.preset, stage) {
            (Preset::Desk, TrainStage::Adapt) => 6,
            (Preset::Desk, _) => 8,
            (Preset::Paper, _) => self.base_train().epochs,
        };
        explicit.or(shared).unwrap_or(preset)
    }

    fn curriculum_lr(&self) -> Option<f64> {
        self.curriculum.lr.or(match self.preset {
            Preset::Desk => Some(2e-5),
            Preset::Paper => None,
        })
    }

    /// Effective optimisation settings of one stage. Each stage draws its
    /// randomness from its own stream of the run seed.
    pub fn train_config(&self, stage: TrainStage) -> Result<TrainConfig> {
        let mut t = merged(&self.base_train(), &self.train, "train")?;
        t.seed = cda_core::seed::mix(self.seed, cda_core::seed::stream_id(stage.name()));
        t.epochs = self.stage_epochs(stage);
        t.memory_enabled = self.memory_enabled;
        if let (TrainStage::Curriculum, Some(lr)) = (stage, self.curriculum_lr()) {
            t.lr_target = lr;
        }
        Ok(t)
    }

    pub fn arch_config(&self, input: DataShape) -> Result<ArchConfig> {
        let a = merged(&ArchConfig::for_input(input), &self.arch, "arch")?;
        a.validate().map_err(|e| CliError::Config(format!("[arch]: {e}")))?;
        Ok(a)
    }

    pub fn schedule(&self, total_epochs: usize) -> Result<CurriculumSchedule> {
        let mut s = CurriculumSchedule::standard(total_epochs);
        s.start_fraction = self.curriculum.start_fraction;
        if let Some(r) = self.curriculum.ramp_epochs {
            s.ramp_epochs = r;
        }
        s.validate().map_err(|e| CliError::Config(format!("[curriculum]: {e}")))?;
        Ok(s)
    }

    pub fn exec_mode(&self) -> ExecMode {
        self.train_config(TrainStage::Source).map(|t| t.exec).unwrap_or_default()
    }

    /// Digest of every setting that influences results. Data locations,
    /// the workdir and the execution mode are excluded.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        let obj = v.as_object_mut().expect("object");
        for k in ["source_manifests", "target_manifest", "workdir"] {
            obj.remove(k);
        }
        if let Some(t) = obj.get_mut("train").and_then(|t| t.as_object_mut()) {
            t.remove("exec");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "source_manifests = [\"s.csv\"]\ntarget_manifest = \"t.csv\"\n";

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::from_toml(&format!("{MIN}seed = 3\n[train]\nlr_target = 2e-5\nepochs = 4\n[epochs]\ndsn = 2\n")).unwrap();
        let t = c.train_config(TrainStage::Adapt).unwrap();
        assert_eq!(t.lr_target, 2e-5);
        assert_eq!(t.epochs, 4);
        assert_eq!(c.train_config(TrainStage::Dsn).unwrap().epochs, 2);
        assert_ne!(t.seed, c.train_config(TrainStage::Source).unwrap().seed);
    }

    #[test]
    fn preset_stage_defaults() {
        let desk = RunConfig::from_toml(MIN).unwrap();
        assert_eq!(desk.stage_epochs(TrainStage::Adapt), 6);
        assert_eq!(desk.stage_epochs(TrainStage::Curriculum), 8);
        assert_eq!(desk.train_config(TrainStage::Curriculum).unwrap().lr_target, 2e-5);
        assert_eq!(desk.train_config(TrainStage::Adapt).unwrap().lr_target, 3e-5);
        let paper = RunConfig::from_toml(&format!("{MIN}preset = \"paper\"\n")).unwrap();
        assert_eq!(paper.stage_epochs(TrainStage::Adapt), 10);
        let t = paper.train_config(TrainStage::Curriculum).unwrap();
        assert_eq!(t.lr_target, 1e-6);
        assert!(t.fresh_discriminator);
    }

    #[test]
    fn shipped_config_parses() {
        let cfg = RunConfig::from_toml(include_str!("../../../configs/synthetic.toml")).unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.stage_epochs(TrainStage::Adapt), 6);
    }

    #[test]
    fn unknown_field_is_named() {
        let e = RunConfig::from_toml(&format!("{MIN}[train]\nlr_tagret = 1.0\n")).unwrap_err();
        assert!(e.to_string().contains("lr_tagret"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn bad_rate_is_config_error() {
        let e = RunConfig::from_toml(&format!("{MIN}[train]\nlr_source = -1.0\n")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::from_toml(MIN).unwrap();
        let mut b = a.clone();
        b.target_manifest = "elsewhere.csv".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.memory_enabled = false;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = RunConfig::from_toml(&format!("{MIN}[train]\nlr_dsn = 0.002\n[arch]\nfeature_dim = 16\n")).unwrap();
        assert_eq!(RunConfig::from_toml(&a.to_toml()).unwrap(), a);
    }
}
