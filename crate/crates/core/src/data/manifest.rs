//! Sample manifests: a CSV of `id,path,label,split` rows plus a JSON sidecar.
//!
//! The sidecar carries dataset metadata and a sealed section of labels and
//! sub-domain tags. For a compound target manifest every label lives in the
//! sealed section only, and [`SampleManifest::label`] refuses to return one.
//! Evaluation code reaches the sealed section through
//! [`SampleManifest::evaluation_labels`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pack;
use super::sample::{DataShape, Label, Sample, Split};
use crate::error::{CdaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestRole {
    Source,
    CompoundTarget,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SealedEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdomain: Option<String>,
}

/// JSON sidecar next to the manifest CSV (`foo.csv` -> `foo.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub role: ManifestRole,
    #[serde(default)]
    pub num_subdomains: Option<usize>,
    #[serde(default)]
    pub shape: Option<DataShape>,
    #[serde(default)]
    pub domain_tag: Option<String>,
    #[serde(default)]
    pub sealed: BTreeMap<String, SealedEntry>,
}

#[derive(Clone, Debug)]
pub struct SampleManifest {
    role: ManifestRole,
    shape: DataShape,
    samples: Vec<Sample>,
    /// Labels visible to training code; always `None` for compound targets.
    visible: Vec<Option<Label>>,
    sealed: BTreeMap<String, SealedEntry>,
    num_subdomains_hint: Option<usize>,
}

/// Read-only view of ground truth for scoring and reporting.
#[derive(Clone, Copy, Debug)]
pub struct EvaluationLabels<'a> {
    manifest: &'a SampleManifest,
}

impl EvaluationLabels<'_> {
    pub fn label(&self, index: usize) -> Option<Label> {
        let m = self.manifest;
        m.sealed
            .get(&m.samples[index].id)
            .and_then(|e| e.label)
            .or(m.visible[index])
    }

    pub fn subdomain(&self, index: usize) -> Option<&str> {
        let m = self.manifest;
        m.sealed
            .get(&m.samples[index].id)
            .and_then(|e| e.subdomain.as_deref())
    }
}

impl SampleManifest {
    /// Assembles a manifest from in-memory parts. `labels[i]` and
    /// `subdomains[i]` describe `samples[i]`; for a compound target they are
    /// moved to the sealed section.
    pub fn from_parts(
        role: ManifestRole,
        shape: DataShape,
        samples: Vec<Sample>,
        labels: Vec<Option<Label>>,
        subdomains: Vec<Option<String>>,
        num_subdomains_hint: Option<usize>,
    ) -> Result<Self> {
        if labels.len() != samples.len() || subdomains.len() != samples.len() {
            return Err(CdaError::Validation(
                "labels and subdomains must align with samples".into(),
            ));
        }
        let mut sealed = BTreeMap::new();
        for ((s, l), sub) in samples.iter().zip(&labels).zip(subdomains) {
            if l.is_some() || sub.is_some() {
                sealed.insert(
                    s.id.clone(),
                    SealedEntry {
                        label: *l,
                        subdomain: sub,
                    },
                );
            }
        }
        let visible = match role {
            ManifestRole::Source => labels,
            ManifestRole::CompoundTarget => vec![None; samples.len()],
        };
        let m = Self {
            role,
            shape,
            samples,
            visible,
            sealed,
            num_subdomains_hint,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            if !seen.insert(s.id.as_str()) {
                return Err(CdaError::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            if s.data.len() != self.shape.len() {
                return Err(CdaError::Validation(format!(
                    "sample `{}` has {} values, manifest shape needs {}",
                    s.id,
                    s.data.len(),
                    self.shape.len()
                )));
            }
            if s.data.iter().any(|v| !v.is_finite()) {
                return Err(CdaError::Validation(format!("sample `{}` has non-finite data", s.id)));
            }
            if self.role == ManifestRole::Source && s.split == Split::Train && self.visible[i].is_none() {
                return Err(CdaError::Validation(format!(
                    "source training sample `{}` has no label",
                    s.id
                )));
            }
        }
        if self.num_subdomains_hint == Some(0) {
            return Err(CdaError::Validation("num_subdomains must be >= 1".into()));
        }
        Ok(())
    }

    pub fn role(&self) -> ManifestRole {
        self.role
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_subdomains_hint(&self) -> Option<usize> {
        self.num_subdomains_hint
    }

    /// Training-side label access. Always fails on a compound target manifest.
    pub fn label(&self, index: usize) -> Result<Option<Label>> {
        match self.role {
            ManifestRole::CompoundTarget => Err(CdaError::LabelGuard(self.samples[index].id.clone())),
            ManifestRole::Source => Ok(self.visible[index]),
        }
    }

    /// Like [`label`](Self::label) but a missing label is an error.
    pub fn require_label(&self, index: usize) -> Result<Label> {
        self.label(index)?.ok_or_else(|| {
            CdaError::Validation(format!("sample `{}` has no label", self.samples[index].id))
        })
    }

    /// Ground truth for evaluation and reporting only.
    pub fn evaluation_labels(&self) -> EvaluationLabels<'_> {
        EvaluationLabels { manifest: self }
    }

    pub fn indices_for(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Concatenates manifests of the same role and shape; ids must stay unique.
    pub fn merge(parts: Vec<SampleManifest>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| CdaError::Validation("no manifests to merge".into()))?;
        for m in iter {
            if m.role != acc.role || m.shape != acc.shape {
                return Err(CdaError::Validation(
                    "merged manifests must share role and data shape".into(),
                ));
            }
            acc.samples.extend(m.samples);
            acc.visible.extend(m.visible);
            acc.sealed.extend(m.sealed);
            acc.num_subdomains_hint = match (acc.num_subdomains_hint, m.num_subdomains_hint) {
                (Some(a), Some(b)) => Some(a + b),
                (a, b) => a.or(b),
            };
        }
        acc.validate()?;
        Ok(acc)
    }

    /// Content digest over ids, splits, data and labels (visible and sealed).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.shape).unwrap_or_default());
        for (s, l) in self.samples.iter().zip(&self.visible) {
            h.update(s.id.as_bytes());
            h.update([0, s.split as u8, l.map_or(9, |l| l.index() as u8)]);
            for v in &s.data {
                h.update(v.to_le_bytes());
            }
        }
        h.update(serde_json::to_vec(&self.sealed).unwrap_or_default());
        hex::encode(h.finalize())
    }
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    id: String,
    path: String,
    #[serde(default)]
    label: String,
    split: String,
}

/// Loads a manifest CSV and its optional sidecar.
pub fn load_manifest(path: &Path, role: ManifestRole) -> Result<SampleManifest> {
    let load_err = |reason: String| CdaError::Load {
        path: path.to_path_buf(),
        reason,
    };
    if !path.is_file() {
        return Err(load_err("file not found".into()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let side = sidecar_path(path);
    let sidecar: Option<Sidecar> = if side.is_file() {
        let text = fs::read_to_string(&side).map_err(|e| CdaError::io(&side, e))?;
        Some(serde_json::from_str(&text).map_err(|e| CdaError::Load {
            path: side.clone(),
            reason: e.to_string(),
        })?)
    } else {
        None
    };

    let mut reader = csv::Reader::from_path(path).map_err(|e| load_err(e.to_string()))?;
    let mut rows = Vec::new();
    for r in reader.deserialize::<Row>() {
        rows.push(r.map_err(|e| load_err(e.to_string()))?);
    }

    let missing: Vec<PathBuf> = {
        let mut seen = HashSet::new();
        rows.iter()
            .map(|r| base.join(pack::strip_index(&r.path)))
            .filter(|p| seen.insert(p.clone()) && !p.is_file())
            .collect()
    };
    if !missing.is_empty() {
        return Err(CdaError::MissingData(missing));
    }

    let mut packs: HashMap<PathBuf, pack::TensorPack> = HashMap::new();
    let mut shape = sidecar.as_ref().and_then(|s| s.shape);
    let mut samples = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let domain_tag = sidecar.as_ref().and_then(|s| s.domain_tag.clone());
    for row in &rows {
        let (data, row_shape) = match pack::split_index(&row.path) {
            Some((file, idx)) => {
                let file = base.join(file);
                if !packs.contains_key(&file) {
                    packs.insert(file.clone(), pack::read_pack(&file)?);
                }
                let p = &packs[&file];
                (p.item(idx)?.to_vec(), p.item_shape())
            }
            None => super::image_io::read_png(&base.join(&row.path))?,
        };
        match shape {
            None => shape = Some(row_shape),
            Some(s) if s != row_shape => {
                return Err(CdaError::Validation(format!(
                    "sample `{}` has shape {row_shape:?}, manifest uses {s:?}",
                    row.id
                )))
            }
            _ => {}
        }
        let label = if row.label.trim().is_empty() {
            None
        } else {
            Some(row.label.parse::<Label>()?)
        };
        labels.push(label);
        samples.push(Sample {
            id: row.id.clone(),
            data,
            split: row.split.parse()?,
            domain_tag: domain_tag.clone(),
        });
    }
    let shape = shape.ok_or_else(|| load_err("manifest has no rows".into()))?;

    let sealed = sidecar.as_ref().map(|s| &s.sealed);
    let subdomains = samples
        .iter()
        .map(|s| sealed.and_then(|m| m.get(&s.id)).and_then(|e| e.subdomain.clone()))
        .collect();
    // Sealed labels fill gaps for evaluation but never become visible labels.
    let mut m = SampleManifest::from_parts(
        role,
        shape,
        samples,
        labels,
        subdomains,
        sidecar.as_ref().and_then(|s| s.num_subdomains),
    )
    .map_err(|e| match e {
        CdaError::Validation(reason) => load_err(reason),
        other => other,
    })?;
    if let Some(sealed) = sealed {
        for (id, entry) in sealed {
            let slot = m.sealed.entry(id.clone()).or_default();
            if slot.label.is_none() {
                slot.label = entry.label;
            }
        }
    }
    Ok(m)
}

/// Writes `csv_path` and its sidecar. Sample data is written by the caller
/// (PNG files or a tensor pack); `paths[i]` is the reference for sample `i`.
pub fn write_manifest(manifest: &SampleManifest, csv_path: &Path, paths: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| CdaError::Load {
        path: csv_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for (i, s) in manifest.samples.iter().enumerate() {
        let label = match manifest.role {
            ManifestRole::Source => manifest.visible[i].map(|l| l.to_string()).unwrap_or_default(),
            ManifestRole::CompoundTarget => String::new(),
        };
        w.serialize(Row {
            id: s.id.clone(),
            path: paths[i].clone(),
            label,
            split: s.split.as_str().into(),
        })
        .map_err(|e| CdaError::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| CdaError::io(csv_path, e))?;
    let sidecar = Sidecar {
        role: manifest.role,
        num_subdomains: manifest.num_subdomains_hint,
        shape: Some(manifest.shape),
        domain_tag: manifest.samples.first().and_then(|s| s.domain_tag.clone()),
        sealed: manifest.sealed.clone(),
    };
    let side = sidecar_path(csv_path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| CdaError::Validation(e.to_string()))?;
    fs::write(&side, text).map_err(|e| CdaError::io(&side, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(role: ManifestRole) -> SampleManifest {
        let samples = (0..4)
            .map(|i| Sample {
                id: format!("s{i}"),
                data: vec![i as f32, 1.0],
                split: Split::Train,
                domain_tag: None,
            })
            .collect();
        let labels = vec![Some(Label::Live), Some(Label::Spoof), Some(Label::Live), Some(Label::Spoof)];
        SampleManifest::from_parts(role, DataShape::Flat { dim: 2 }, samples, labels, vec![None; 4], None).unwrap()
    }

    #[test]
    fn source_labels_are_readable() {
        let m = toy(ManifestRole::Source);
        assert_eq!(m.label(1).unwrap(), Some(Label::Spoof));
    }

    #[test]
    fn target_labels_are_guarded_but_sealed_for_eval() {
        let m = toy(ManifestRole::CompoundTarget);
        for i in 0..4 {
            assert!(matches!(m.label(i), Err(CdaError::LabelGuard(_))));
        }
        assert_eq!(m.evaluation_labels().label(1), Some(Label::Spoof));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Sample { id: "a".into(), data: vec![0.0], split: Split::Train, domain_tag: None };
        let r = SampleManifest::from_parts(
            ManifestRole::Source,
            DataShape::Flat { dim: 1 },
            vec![s.clone(), s],
            vec![Some(Label::Live); 2],
            vec![None; 2],
            None,
        );
        assert!(matches!(r, Err(CdaError::Validation(_))));
    }

    #[test]
    fn unlabeled_source_train_rejected() {
        let s = Sample { id: "a".into(), data: vec![0.0], split: Split::Train, domain_tag: None };
        let r = SampleManifest::from_parts(ManifestRole::Source, DataShape::Flat { dim: 1 }, vec![s], vec![None], vec![None], None);
        assert!(r.is_err());
    }
}
