//! Stage orchestration over a workdir. Each stage checks the lineage of its
//! inputs, skips itself when its outputs are already current, and seals
//! what it writes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cda_core::adapt::{adapt_target, train_source, TrainLog};
use cda_core::data::{load_manifest, ManifestRole, SampleManifest, Split};
use cda_core::dsn::{curriculum_adapt, pseudo_label, rank_by_domain_distance, train_dsn, CurriculumRanking, DsnBundle, PseudoLabelSet};
use cda_core::memory::{build_memory, MemoryModule};
use cda_core::metrics::{export_embeddings, roc_points, score_model, write_roc_csv, write_subdomain_csv, EvalReport, ScoringNet};
use cda_core::networks::{atomic_write, init_target_from_source, ModelBundle};
use cda_core::par::ExecMode;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainStage};
use crate::error::{CliError, Result};
use crate::workdir::{Artifact, Lineage, LockGuard, Workdir};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// `eval/report.json`: the source network, the stage-B network and the
/// final network scored on the target test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub source_only: EvalReport,
    pub adapted: EvalReport,
    #[serde(rename = "final")]
    pub final_model: EvalReport,
    pub metadata: BTreeMap<String, String>,
}

impl PipelineReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>9} {:>9} {:>8}\n", "model", "HTER@EER", "HTER@0.5", "AUC");
        for (name, r) in [("source-only", &self.source_only), ("adapted", &self.adapted), ("final", &self.final_model)] {
            out += &format!(
                "{:<12} {:>8.2}% {:>8.2}% {:>7.2}%\n",
                name,
                100.0 * r.at_eer.hter,
                100.0 * r.at_half.hter,
                100.0 * r.auc
            );
        }
        out += "\nper sub-domain (final, at EER threshold)\n";
        for (tag, s) in &self.final_model.per_subdomain {
            out += &format!("{:<20} {:>5} samples {:>5} errors {:>7.2}%\n", tag, s.count, s.errors, s.error_pct);
        }
        out
    }
}

pub struct Pipeline {
    cfg: RunConfig,
    wd: Workdir,
    hash: String,
    force: bool,
    mode: ExecMode,
    _lock: LockGuard,
}

fn say(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

impl Pipeline {
    /// Takes the workdir lock and records the effective configuration.
    pub fn open(cfg: RunConfig, workdir: PathBuf, force: bool) -> Result<Self> {
        cfg.validate()?;
        let wd = Workdir::new(workdir)?;
        let lock = wd.lock()?;
        atomic_write(&wd.file("config.toml"), cfg.to_toml().as_bytes())?;
        Ok(Self {
            hash: cfg.config_hash(),
            mode: cfg.exec_mode(),
            cfg,
            wd,
            force,
            _lock: lock,
        })
    }

    pub fn workdir(&self) -> &Workdir {
        &self.wd
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn load_source(&self) -> Result<SampleManifest> {
        let parts = self
            .cfg
            .source_manifests
            .iter()
            .map(|p| load_manifest(p, ManifestRole::Source))
            .collect::<cda_core::Result<Vec<_>>>()?;
        Ok(SampleManifest::merge(parts)?)
    }

    fn load_target(&self) -> Result<SampleManifest> {
        Ok(load_manifest(&self.cfg.target_manifest, ManifestRole::CompoundTarget)?)
    }

    fn lineage(&self, a: Artifact, upstream: &[Artifact], data: &[(&str, String)]) -> Result<Lineage> {
        let mut up = BTreeMap::new();
        for &u in upstream {
            up.insert(u.key().to_string(), self.wd.verified_digest(u, &self.hash)?);
        }
        for (k, v) in data {
            up.insert((*k).to_string(), v.clone());
        }
        Ok(Lineage {
            stage: a.stage().into(),
            config_hash: self.hash.clone(),
            upstream: up,
            digest: String::new(),
        })
    }

    fn skip(&self, outputs: &[(Artifact, &Lineage)]) -> bool {
        let current = !self.force && outputs.iter().all(|(a, l)| self.wd.is_current(*a, l));
        if current {
            let names: Vec<_> = outputs.iter().map(|(a, _)| a.file_name()).collect();
            say(format!("{} up to date, skipping (use --force to re-run)", names.join(", ")));
        }
        current
    }

    fn write_log(&self, stage: &str, log: &TrainLog) -> Result<()> {
        Ok(log.write(&self.wd.log_path(stage))?)
    }

    fn load_bundle(&self, a: Artifact) -> Result<ModelBundle> {
        self.wd.verified_digest(a, &self.hash)?;
        let (b, header) = ModelBundle::load(&self.wd.path(a))?;
        if header.stage != a.stage() {
            return Err(CliError::Lineage(format!(
                "{} holds a `{}` checkpoint, expected `{}`",
                a.file_name(),
                header.stage,
                a.stage()
            )));
        }
        Ok(b)
    }

    fn load_memory(&self) -> Result<Option<MemoryModule>> {
        if !self.cfg.memory_enabled {
            return Ok(None);
        }
        self.wd.verified_digest(Artifact::Memory, &self.hash)?;
        Ok(Some(MemoryModule::load(&self.wd.path(Artifact::Memory))?))
    }

    fn memory_upstream(&self) -> Vec<Artifact> {
        if self.cfg.memory_enabled {
            vec![Artifact::Memory]
        } else {
            Vec::new()
        }
    }

    /// The checkpoint evaluated as the pipeline's result.
    pub fn final_artifact(&self) -> Artifact {
        if self.cfg.curriculum_enabled {
            Artifact::FinalCheckpoint
        } else {
            Artifact::AdaptCheckpoint
        }
    }

    /// Stage A.
    pub fn train_source(&self) -> Result<Outcome> {
        let source = self.load_source()?;
        let a = Artifact::SourceCheckpoint;
        let lineage = self.lineage(a, &[], &[("source_data", source.content_hash())])?;
        if self.skip(&[(a, &lineage)]) {
            return Ok(Outcome::UpToDate);
        }
        let t = self.cfg.train_config(TrainStage::Source)?;
        say(format!("train-source: {} samples, {} epochs", source.len(), t.epochs));
        let arch = self.cfg.arch_config(source.shape())?;
        let (bundle, log) = train_source(ModelBundle::new(arch, t.seed)?, &source, &t)?;
        if let Some(acc) = log.epoch_metric("val_accuracy").last() {
            say(format!("train-source: validation accuracy {:.2}%", 100.0 * acc));
        }
        self.write_log("source", &log)?;
        bundle.save(&self.wd.path(a), a.stage(), t.epochs, lineage.to_map())?;
        self.wd.seal(a, lineage)?;
        Ok(Outcome::Ran)
    }

    /// Stage B, including the memory module when enabled.
    pub fn adapt(&self) -> Result<Outcome> {
        let target = self.load_target()?;
        let t = self.cfg.train_config(TrainStage::Adapt)?;
        let mut ran = Outcome::UpToDate;
        if self.cfg.memory_enabled {
            let m = Artifact::Memory;
            let lineage = self.lineage(m, &[Artifact::SourceCheckpoint], &[])?;
            if !self.skip(&[(m, &lineage)]) {
                let source = self.load_source()?;
                let bundle = self.load_bundle(Artifact::SourceCheckpoint)?;
                build_memory(&bundle.source_encoder, &source, self.mode)?.save(&self.wd.path(m))?;
                self.wd.seal(m, lineage)?;
                ran = Outcome::Ran;
            }
        }
        let a = Artifact::AdaptCheckpoint;
        let mut ups = vec![Artifact::SourceCheckpoint];
        ups.extend(self.memory_upstream());
        let lineage = self.lineage(a, &ups, &[("target_data", target.content_hash())])?;
        if self.skip(&[(a, &lineage)]) {
            return Ok(ran);
        }
        let source = self.load_source()?;
        let memory = self.load_memory()?;
        let bundle = init_target_from_source(self.load_bundle(Artifact::SourceCheckpoint)?)?;
        say(format!("adapt: {} epochs, memory {}", t.epochs, if memory.is_some() { "on" } else { "off" }));
        let (bundle, log) = adapt_target(bundle, memory.as_ref(), &source, &target, &t, None)?;
        self.write_log("adapt", &log)?;
        bundle.save(&self.wd.path(a), a.stage(), t.epochs, lineage.to_map())?;
        self.wd.seal(a, lineage)?;
        Ok(Outcome::Ran)
    }

    /// Stage C: pseudo labels from the source network, then the DSN.
    pub fn train_dsn(&self) -> Result<Outcome> {
        let target = self.load_target()?;
        let (p, d) = (Artifact::PseudoLabels, Artifact::DsnCheckpoint);
        let pl_lineage = self.lineage(p, &[Artifact::SourceCheckpoint], &[("target_data", target.content_hash())])?;
        let mut ran = Outcome::UpToDate;
        if !self.skip(&[(p, &pl_lineage)]) {
            let source_net = self.load_bundle(Artifact::SourceCheckpoint)?;
            pseudo_label(&source_net, &target, self.mode)?.write_csv(&self.wd.path(p))?;
            self.wd.seal(p, pl_lineage)?;
            ran = Outcome::Ran;
        }
        let lineage = self.lineage(d, &[Artifact::AdaptCheckpoint, p], &[])?;
        if self.skip(&[(d, &lineage)]) {
            return Ok(ran);
        }
        let t = self.cfg.train_config(TrainStage::Dsn)?;
        let source = self.load_source()?;
        let pseudo = PseudoLabelSet::read_csv(&self.wd.path(p))?;
        let adapted = self.load_bundle(Artifact::AdaptCheckpoint)?;
        say(format!("train-dsn: {} epochs", t.epochs));
        let dsn = DsnBundle::from_target(&adapted, t.seed)?;
        let (dsn, log) = train_dsn(dsn, &source, &target, &pseudo, &t)?;
        self.write_log("dsn", &log)?;
        dsn.save(&self.wd.path(d), t.seed, t.epochs, lineage.to_map())?;
        self.wd.seal(d, lineage)?;
        Ok(Outcome::Ran)
    }

    pub fn rank(&self) -> Result<Outcome> {
        let a = Artifact::Ranking;
        let source = self.load_source()?;
        let lineage = self.lineage(a, &[Artifact::DsnCheckpoint], &[("source_data", source.content_hash())])?;
        if self.skip(&[(a, &lineage)]) {
            return Ok(Outcome::UpToDate);
        }
        let target = self.load_target()?;
        let (dsn, header) = DsnBundle::load(&self.wd.path(Artifact::DsnCheckpoint))?;
        if header.stage != "dsn" {
            return Err(CliError::Lineage(format!("dsn.ckpt.json holds a `{}` checkpoint", header.stage)));
        }
        let t = self.cfg.train_config(TrainStage::Curriculum)?;
        let ranking = rank_by_domain_distance(&dsn, &source, &target, &t)?;
        say(format!("rank: {} targets against {} source images", ranking.len(), ranking.source_used));
        ranking.write_csv(&self.wd.path(a))?;
        self.wd.seal(a, lineage)?;
        Ok(Outcome::Ran)
    }

    /// Stage D.
    pub fn adapt_curriculum(&self) -> Result<Outcome> {
        if !self.cfg.curriculum_enabled {
            say("adapt-curriculum: curriculum disabled, the stage-B network is final");
            return Ok(Outcome::UpToDate);
        }
        let a = Artifact::FinalCheckpoint;
        let mut ups = vec![Artifact::AdaptCheckpoint, Artifact::Ranking];
        ups.extend(self.memory_upstream());
        let lineage = self.lineage(a, &ups, &[])?;
        if self.skip(&[(a, &lineage)]) {
            return Ok(Outcome::UpToDate);
        }
        let t = self.cfg.train_config(TrainStage::Curriculum)?;
        let schedule = self.cfg.schedule(t.epochs)?;
        let source = self.load_source()?;
        let target = self.load_target()?;
        let memory = self.load_memory()?;
        let ranking = CurriculumRanking::read_csv(&self.wd.path(Artifact::Ranking))?;
        let bundle = self.load_bundle(Artifact::AdaptCheckpoint)?;
        say(format!(
            "adapt-curriculum: {} epochs, start fraction {}, ramp {} epochs",
            t.epochs, schedule.start_fraction, schedule.ramp_epochs
        ));
        let (bundle, log) = curriculum_adapt(bundle, memory.as_ref(), &source, &target, &ranking, &schedule, &t)?;
        self.write_log("curriculum", &log)?;
        bundle.save(&self.wd.path(a), a.stage(), t.epochs, lineage.to_map())?;
        self.wd.seal(a, lineage)?;
        Ok(Outcome::Ran)
    }

    pub fn eval(&self) -> Result<PipelineReport> {
        let a = Artifact::Report;
        let fin = self.final_artifact();
        let mut ups = vec![Artifact::SourceCheckpoint, Artifact::AdaptCheckpoint];
        if fin != Artifact::AdaptCheckpoint {
            ups.push(fin);
        }
        ups.extend(self.memory_upstream());
        let target = self.load_target()?;
        let lineage = self.lineage(a, &ups, &[("target_data", target.content_hash())])?;
        if self.skip(&[(a, &lineage)]) {
            let text = std::fs::read_to_string(self.wd.path(a)).map_err(|e| CliError::Core(cda_core::CdaError::Io { path: self.wd.path(a), source: e }))?;
            let report: PipelineReport = serde_json::from_str(&text).map_err(|e| CliError::Lineage(format!("eval/report.json: {e}")))?;
            print!("{}", report.table());
            return Ok(report);
        }
        let batch = self.cfg.train_config(TrainStage::Adapt)?.batch_eval;
        let memory = self.load_memory()?;
        let score = |b: &ModelBundle, which: ScoringNet, m: Option<&MemoryModule>| {
            score_model(b, m, which, &target, Split::Test, batch, self.mode)
        };
        let source_net = self.load_bundle(Artifact::SourceCheckpoint)?;
        let adapted_net = self.load_bundle(Artifact::AdaptCheckpoint)?;
        let final_net = self.load_bundle(fin)?;
        let none = BTreeMap::new();
        let source_only = EvalReport::from_scores(&score(&source_net, ScoringNet::Source, None)?, none.clone())?;
        let adapted = EvalReport::from_scores(&score(&adapted_net, ScoringNet::Target, memory.as_ref())?, none.clone())?;
        let final_scores = score(&final_net, ScoringNet::Target, memory.as_ref())?;
        let final_model = EvalReport::from_scores(&final_scores, none)?;

        let mut metadata = BTreeMap::from([
            ("config_hash".to_string(), self.hash.clone()),
            ("seed".to_string(), self.cfg.seed.to_string()),
            ("memory_enabled".to_string(), self.cfg.memory_enabled.to_string()),
            ("curriculum_enabled".to_string(), self.cfg.curriculum_enabled.to_string()),
            ("final_checkpoint".to_string(), fin.file_name().to_string()),
            ("test_samples".to_string(), final_scores.len().to_string()),
        ]);
        for (k, v) in &lineage.upstream {
            metadata.insert(format!("upstream.{k}"), v.clone());
        }
        let report = PipelineReport {
            source_only,
            adapted,
            final_model,
            metadata,
        };
        write_roc_csv(&roc_points(&final_scores)?, &self.wd.file("eval/roc.csv"))?;
        write_subdomain_csv(&report.final_model.per_subdomain, &self.wd.file("eval/subdomains.csv"))?;
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        atomic_write(&self.wd.path(a), json.as_bytes())?;
        self.wd.seal(a, lineage)?;
        print!("{}", report.table());
        Ok(report)
    }

    /// 2-D projection of the final target encoder's features over all
    /// target samples.
    pub fn export_embed(&self) -> Result<Outcome> {
        let a = Artifact::Embeddings;
        let fin = self.final_artifact();
        let target = self.load_target()?;
        let lineage = self.lineage(a, &[fin], &[("target_data", target.content_hash())])?;
        if self.skip(&[(a, &lineage)]) {
            return Ok(Outcome::UpToDate);
        }
        let bundle = self.load_bundle(fin)?;
        let n = export_embeddings(&bundle.target_encoder, &target, None, &self.wd.path(a), self.mode)?;
        say(format!("export-embed: {n} rows"));
        self.wd.seal(a, lineage)?;
        Ok(Outcome::Ran)
    }

    /// A → B → (C → rank → D) → eval.
    pub fn run_all(&self) -> Result<PipelineReport> {
        self.train_source()?;
        self.adapt()?;
        if self.cfg.curriculum_enabled {
            self.train_dsn()?;
            self.rank()?;
            self.adapt_curriculum()?;
        }
        self.eval()
    }
}
