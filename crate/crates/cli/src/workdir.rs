//! Workdir layout, lineage sidecars and the single-run lock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cda_core::networks::atomic_write;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Artifact {
    SourceCheckpoint,
    Memory,
    AdaptCheckpoint,
    PseudoLabels,
    DsnCheckpoint,
    Ranking,
    FinalCheckpoint,
    Report,
    Embeddings,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::SourceCheckpoint => "source.ckpt.json",
            Artifact::Memory => "memory.json",
            Artifact::AdaptCheckpoint => "adapt.ckpt.json",
            Artifact::PseudoLabels => "pseudo_labels.csv",
            Artifact::DsnCheckpoint => "dsn.ckpt.json",
            Artifact::Ranking => "ranking.csv",
            Artifact::FinalCheckpoint => "final.ckpt.json",
            Artifact::Report => "eval/report.json",
            Artifact::Embeddings => "embed.csv",
        }
    }

    /// Stage tag recorded in the lineage sidecar.
    pub fn stage(self) -> &'static str {
        match self {
            Artifact::SourceCheckpoint => "source",
            Artifact::Memory | Artifact::AdaptCheckpoint => "adapt",
            Artifact::PseudoLabels | Artifact::DsnCheckpoint => "dsn",
            Artifact::Ranking => "rank",
            Artifact::FinalCheckpoint => "curriculum",
            Artifact::Report => "eval",
            Artifact::Embeddings => "export-embed",
        }
    }

    /// Command that produces the artifact.
    pub fn producer(self) -> &'static str {
        match self {
            Artifact::SourceCheckpoint => "train-source",
            Artifact::Memory | Artifact::AdaptCheckpoint => "adapt",
            Artifact::PseudoLabels | Artifact::DsnCheckpoint => "train-dsn",
            Artifact::Ranking => "rank",
            Artifact::FinalCheckpoint => "adapt-curriculum",
            Artifact::Report => "eval",
            Artifact::Embeddings => "export-embed",
        }
    }

    pub fn key(self) -> &'static str {
        self.file_name().trim_end_matches(".json").trim_end_matches(".csv")
    }
}

/// Provenance of one artifact: the stage that wrote it, the config it was
/// written under and the digests of everything it was derived from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub stage: String,
    pub config_hash: String,
    pub upstream: BTreeMap<String, String>,
    /// SHA-256 of the artifact's primary file.
    #[serde(default)]
    pub digest: String,
}

impl Lineage {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::from([
            ("stage".to_string(), self.stage.clone()),
            ("config_hash".to_string(), self.config_hash.clone()),
        ]);
        for (k, v) in &self.upstream {
            m.insert(format!("upstream.{k}"), v.clone());
        }
        m
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Core(cda_core::CdaError::Io { path: path.into(), source: e }))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("logs"))
            .and_then(|_| fs::create_dir_all(root.join("eval")))
            .map_err(|e| CliError::Config(format!("workdir {} is not writable: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.root.join(a.file_name())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn log_path(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.jsonl"))
    }

    fn sidecar(&self, a: Artifact) -> PathBuf {
        self.root.join(format!("{}.lineage.json", a.file_name()))
    }

    pub fn read_lineage(&self, a: Artifact) -> Result<Option<Lineage>> {
        let p = self.sidecar(a);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::Core(cda_core::CdaError::Io { path: p.clone(), source: e }))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Lineage(format!("{}: unreadable lineage record: {e}", p.display())))
    }

    /// Records the lineage of a freshly written artifact.
    pub fn seal(&self, a: Artifact, mut lineage: Lineage) -> Result<Lineage> {
        lineage.digest = file_digest(&self.path(a))?;
        let text = serde_json::to_string_pretty(&lineage).expect("lineage serialises");
        atomic_write(&self.sidecar(a), text.as_bytes())?;
        Ok(lineage)
    }

    /// Digest of an upstream artifact after checking it exists, carries the
    /// expected stage tag, was produced under `config_hash` and still
    /// matches the upstream files it was derived from.
    pub fn verified_digest(&self, a: Artifact, config_hash: &str) -> Result<String> {
        let path = self.path(a);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                path,
                hint: format!("run `{}` first", a.producer()),
            });
        }
        let lineage = self.read_lineage(a)?.ok_or_else(|| {
            CliError::Lineage(format!("{} has no lineage record; re-run `{}`", path.display(), a.producer()))
        })?;
        if lineage.stage != a.stage() {
            return Err(CliError::Lineage(format!(
                "{} carries stage tag `{}`, expected `{}`",
                path.display(),
                lineage.stage,
                a.stage()
            )));
        }
        if lineage.config_hash != config_hash {
            return Err(CliError::Lineage(format!(
                "{} was produced under a different configuration; re-run `{}` (or the whole pipeline)",
                path.display(),
                a.producer()
            )));
        }
        let digest = file_digest(&path)?;
        if digest != lineage.digest {
            return Err(CliError::Lineage(format!("{} was modified after it was written", path.display())));
        }
        for (name, recorded) in &lineage.upstream {
            if let Some(up) = ALL.iter().find(|u| u.key() == name) {
                let current = file_digest(&self.path(*up)).unwrap_or_default();
                if &current != recorded {
                    return Err(CliError::Lineage(format!(
                        "{} was derived from a different {}; re-run `{}`",
                        path.display(),
                        up.file_name(),
                        a.producer()
                    )));
                }
            }
        }
        Ok(digest)
    }

    /// Whether `a` exists and was produced from exactly `expected`.
    pub fn is_current(&self, a: Artifact, expected: &Lineage) -> bool {
        let Ok(Some(l)) = self.read_lineage(a) else {
            return false;
        };
        l.stage == expected.stage
            && l.config_hash == expected.config_hash
            && l.upstream == expected.upstream
            && file_digest(&self.path(a)).map(|d| d == l.digest).unwrap_or(false)
    }

    pub fn lock(&self) -> Result<LockGuard> {
        let path = self.root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::Core(cda_core::CdaError::Io { path, source: e })),
        }
    }
}

const ALL: [Artifact; 9] = [
    Artifact::SourceCheckpoint,
    Artifact::Memory,
    Artifact::AdaptCheckpoint,
    Artifact::PseudoLabels,
    Artifact::DsnCheckpoint,
    Artifact::Ranking,
    Artifact::FinalCheckpoint,
    Artifact::Report,
    Artifact::Embeddings,
];

/// Removes the lock file when dropped.
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
