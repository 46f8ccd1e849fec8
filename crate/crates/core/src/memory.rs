//! Source memory and memory-based knowledge transfer.
//!
//! The memory holds the mean source feature of each class (row 0 live,
//! row 1 spoof). During the target forward pass the direct prediction's
//! softmax blends the two rows into `z_m`, the domain indicator turns the
//! target feature into a gate `z_d`, and their element-wise product `z_e`
//! is fused with the direct feature before the final classifier pass.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::FusionMode;
use crate::data::{Label, SampleManifest, Split};
use crate::error::{CdaError, Result};
use crate::networks::{atomic_write, EncoderNet, ModelBundle};
use crate::nn::{dot, loss::softmax2, param_hash, Trace};
use crate::par::{map_indexed, ExecMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProvenance {
    pub source_checkpoint_hash: String,
    /// Sample counts per row (live, spoof).
    pub counts: [usize; 2],
}

/// Immutable 2 x D matrix of source class centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryModule {
    rows: [Vec<f64>; 2],
    provenance: MemoryProvenance,
}

impl MemoryModule {
    pub fn new(live: Vec<f64>, spoof: Vec<f64>, provenance: MemoryProvenance) -> Result<Self> {
        if live.len() != spoof.len() || live.is_empty() {
            return Err(CdaError::Contract("memory rows must be non-empty and of equal length".into()));
        }
        if live.iter().chain(&spoof).any(|v| !v.is_finite()) {
            return Err(CdaError::Contract("memory rows must be finite".into()));
        }
        Ok(Self {
            rows: [live, spoof],
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, label: Label) -> &[f64] {
        &self.rows[label.index()]
    }

    pub fn live(&self) -> &[f64] {
        &self.rows[0]
    }

    pub fn spoof(&self) -> &[f64] {
        &self.rows[1]
    }

    pub fn provenance(&self) -> &MemoryProvenance {
        &self.provenance
    }

    pub fn hash(&self) -> String {
        let mut all = self.rows[0].clone();
        all.extend_from_slice(&self.rows[1]);
        param_hash(&all)
    }
}

/// Class means of labelled features.
pub fn build_memory_from_features(
    features: &[(Vec<f64>, Label)],
    source_checkpoint_hash: &str,
) -> Result<MemoryModule> {
    let dim = features
        .first()
        .map(|(f, _)| f.len())
        .ok_or_else(|| CdaError::Validation("no source features".into()))?;
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (f, label) in features {
        if f.len() != dim {
            return Err(CdaError::Contract("features of unequal dimension".into()));
        }
        let k = label.index();
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(f) {
            *s += v;
        }
    }
    for label in Label::ALL {
        if counts[label.index()] == 0 {
            return Err(CdaError::Validation(format!(
                "no {label} samples in the source training split; centroid undefined"
            )));
        }
    }
    let [live, spoof] = sums;
    let mean = |v: Vec<f64>, n: usize| v.into_iter().map(|s| s / n as f64).collect::<Vec<_>>();
    MemoryModule::new(
        mean(live, counts[0]),
        mean(spoof, counts[1]),
        MemoryProvenance {
            source_checkpoint_hash: source_checkpoint_hash.into(),
            counts,
        },
    )
}

/// Centroids of the frozen source encoder's features over the source
/// training split.
pub fn build_memory(
    source_encoder: &EncoderNet,
    source_manifest: &SampleManifest,
    mode: ExecMode,
) -> Result<MemoryModule> {
    let idx = source_manifest.indices_for(Split::Train);
    let labels = idx
        .iter()
        .map(|&i| source_manifest.require_label(i))
        .collect::<Result<Vec<_>>>()?;
    let feats = map_indexed(mode, idx.len(), |k| {
        source_encoder.encode(&source_manifest.sample(idx[k]).input())
    });
    let features = feats
        .into_iter()
        .zip(labels)
        .map(|(f, l)| f.map(|f| (f, l)))
        .collect::<Result<Vec<_>>>()?;
    build_memory_from_features(&features, &param_hash(source_encoder.params()))
}

/// `softmax(y)^T M`.
pub fn fuse_memory(y_direct: &[f64; 2], memory: &MemoryModule) -> Vec<f64> {
    let p = softmax2(y_direct);
    memory
        .live()
        .iter()
        .zip(memory.spoof())
        .map(|(r, f)| p[0] * r + p[1] * f)
        .collect()
}

/// Element-wise product of the gate and the memory-augmented feature.
pub fn enhance(z_d: &[f64], z_m: &[f64]) -> Result<Vec<f64>> {
    if z_d.len() != z_m.len() {
        return Err(CdaError::Contract(format!(
            "gate has {} dims, memory feature has {}",
            z_d.len(),
            z_m.len()
        )));
    }
    Ok(z_d.iter().zip(z_m).map(|(a, b)| a * b).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedForwardResult {
    pub z_t: Vec<f64>,
    pub y_direct: [f64; 2],
    pub z_m: Vec<f64>,
    pub z_d: Vec<f64>,
    pub z_e: Vec<f64>,
    pub y_final: [f64; 2],
}

/// Memory-augmented target forward pass.
pub fn enhanced_forward(bundle: &ModelBundle, memory: &MemoryModule, x: &[f64]) -> Result<EnhancedForwardResult> {
    if memory.dim() != bundle.arch.feature_dim {
        return Err(CdaError::Contract(format!(
            "memory has {} dims, networks use {}",
            memory.dim(),
            bundle.arch.feature_dim
        )));
    }
    bundle.target_encoder.net().check_input(x)?;
    let t = target_forward(bundle, Some(memory), x);
    let mem = t.memory.expect("memory path requested");
    Ok(EnhancedForwardResult {
        z_t: t.enc.output().to_vec(),
        y_direct: t.y_direct,
        z_m: mem.z_m,
        z_d: mem.ind.output().to_vec(),
        z_e: mem.z_e,
        y_final: t.y_final,
    })
}

pub(crate) struct MemoryTrace {
    p: [f64; 2],
    z_m: Vec<f64>,
    ind: Trace,
    z_e: Vec<f64>,
    cls_final: Trace,
}

/// Recorded target pass; `memory: None` is the plain target network.
pub(crate) struct TargetTrace {
    enc: Trace,
    cls_direct: Trace,
    pub y_direct: [f64; 2],
    memory: Option<MemoryTrace>,
    pub y_final: [f64; 2],
}

/// Gradient buffers for the trainable target sub-networks.
#[derive(Clone, Debug)]
pub(crate) struct TargetGrads {
    pub encoder: Vec<f64>,
    pub classifier: Vec<f64>,
    pub indicator: Vec<f64>,
}

impl TargetGrads {
    pub fn zeros(bundle: &ModelBundle) -> Self {
        Self {
            encoder: vec![0.0; bundle.target_encoder.net().num_params()],
            classifier: vec![0.0; bundle.target_classifier.net().num_params()],
            indicator: vec![0.0; bundle.indicator.net().num_params()],
        }
    }
}

pub(crate) fn target_forward(bundle: &ModelBundle, memory: Option<&MemoryModule>, x: &[f64]) -> TargetTrace {
    let enc = bundle.target_encoder.net().forward_trace(x);
    let cls = bundle.target_classifier.net();
    let cls_direct = cls.forward_trace(enc.output());
    let y_direct = [cls_direct.output()[0], cls_direct.output()[1]];
    let Some(memory) = memory else {
        return TargetTrace {
            enc,
            cls_direct,
            y_direct,
            memory: None,
            y_final: y_direct,
        };
    };
    let p = softmax2(&y_direct);
    let z_m = fuse_memory(&y_direct, memory);
    let ind = bundle.indicator.net().forward_trace(enc.output());
    let z_e: Vec<f64> = ind.output().iter().zip(&z_m).map(|(a, b)| a * b).collect();
    let fused: Vec<f64> = match bundle.arch.fusion {
        FusionMode::Residual => enc.output().iter().zip(&z_e).map(|(a, b)| a + b).collect(),
        FusionMode::EnhancedOnly => z_e.clone(),
    };
    let cls_final = cls.forward_trace(&fused);
    let y_final = [cls_final.output()[0], cls_final.output()[1]];
    TargetTrace {
        enc,
        cls_direct,
        y_direct,
        memory: Some(MemoryTrace {
            p,
            z_m,
            ind,
            z_e,
            cls_final,
        }),
        y_final,
    }
}

/// Back-propagates `d loss / d y_final` into `grads`. The memory rows are
/// constants of the pass and receive no gradient.
pub(crate) fn target_backward(
    bundle: &ModelBundle,
    memory: Option<&MemoryModule>,
    trace: &TargetTrace,
    g_final: &[f64; 2],
    grads: &mut TargetGrads,
) {
    let cls = bundle.target_classifier.net();
    let g_direct: [f64; 2];
    let mut g_zt;
    match (&trace.memory, memory) {
        (Some(mt), Some(memory)) => {
            let g_fused = cls.backward(&mt.cls_final, g_final, &mut grads.classifier);
            g_zt = match bundle.arch.fusion {
                FusionMode::Residual => g_fused.clone(),
                FusionMode::EnhancedOnly => vec![0.0; g_fused.len()],
            };
            let z_d = mt.ind.output();
            let g_zd: Vec<f64> = g_fused.iter().zip(&mt.z_m).map(|(g, m)| g * m).collect();
            let g_zm: Vec<f64> = g_fused.iter().zip(z_d).map(|(g, d)| g * d).collect();
            let g_from_ind = bundle.indicator.net().backward(&mt.ind, &g_zd, &mut grads.indicator);
            crate::nn::add_into(&mut g_zt, &g_from_ind);
            let g_p = [dot(memory.live(), &g_zm), dot(memory.spoof(), &g_zm)];
            let inner = mt.p[0] * g_p[0] + mt.p[1] * g_p[1];
            g_direct = [mt.p[0] * (g_p[0] - inner), mt.p[1] * (g_p[1] - inner)];
        }
        _ => {
            g_zt = vec![0.0; bundle.arch.feature_dim];
            g_direct = *g_final;
        }
    }
    let g_from_direct = cls.backward(&trace.cls_direct, &g_direct, &mut grads.classifier);
    crate::nn::add_into(&mut g_zt, &g_from_direct);
    bundle.target_encoder.net().backward(&trace.enc, &g_zt, &mut grads.encoder);
}

#[derive(Serialize, Deserialize)]
struct MemoryHeader {
    dim: usize,
    counts: [usize; 2],
    source_checkpoint_hash: String,
    row_order: [String; 2],
    hash: String,
}

impl MemoryModule {
    /// Writes `<stem>.json` (header) and `<stem>.bin` (2 x D float64 LE).
    pub fn save(&self, json_path: &Path) -> Result<()> {
        let header = MemoryHeader {
            dim: self.dim(),
            counts: self.provenance.counts,
            source_checkpoint_hash: self.provenance.source_checkpoint_hash.clone(),
            row_order: ["live".into(), "spoof".into()],
            hash: self.hash(),
        };
        let bytes: Vec<u8> = self.rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        atomic_write(&json_path.with_extension("bin"), &bytes)?;
        let text = serde_json::to_vec_pretty(&header).map_err(|e| CdaError::Validation(e.to_string()))?;
        atomic_write(json_path, &text)
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let load_err = |reason: String| CdaError::Load {
            path: json_path.to_path_buf(),
            reason,
        };
        let text = fs::read(json_path).map_err(|e| CdaError::io(json_path, e))?;
        let h: MemoryHeader = serde_json::from_slice(&text).map_err(|e| load_err(e.to_string()))?;
        let bin = json_path.with_extension("bin");
        let bytes = fs::read(&bin).map_err(|e| CdaError::io(&bin, e))?;
        if bytes.len() != 16 * h.dim {
            return Err(load_err("payload size does not match dim".into()));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let m = MemoryModule::new(
            vals[..h.dim].to_vec(),
            vals[h.dim..].to_vec(),
            MemoryProvenance {
                source_checkpoint_hash: h.source_checkpoint_hash,
                counts: h.counts,
            },
        )?;
        if m.hash() != h.hash {
            return Err(load_err("memory hash mismatch".into()));
        }
        Ok(m)
    }
}
