//! Stage C (domain-specific network) and stage D (curriculum re-adaptation).
//!
//! The domain encoder is trained so that its features carry no class
//! information while, together with the frozen class encoder, they still
//! reconstruct the input. Distances in that feature space rank target
//! samples from "close to source" to "far from source".

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{mean_of, reset_discriminator, Adapter, LogRecord, TrainLog};
use crate::config::{ArchConfig, TrainConfig};
use crate::data::{BatchIterator, Label, SampleManifest, Split};
use crate::error::{CdaError, Result};
use crate::memory::MemoryModule;
use crate::networks::{read_param_pack, write_param_pack, CheckpointHeader, DecoderNet, EncoderNet, LabelClassifierNet, ModelBundle, PartRecord};
use crate::nn::{add_into, loss, param_hash, scale, Adam};
use crate::par::{map_indexed, ExecMode};
use crate::seed::{mix, stream_id};

/// Networks of the domain-specific branch. `class_encoder` is a frozen copy
/// of the adapted target encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DsnBundle {
    pub arch: ArchConfig,
    pub domain_encoder: EncoderNet,
    pub class_encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub label_head: LabelClassifierNet,
}

impl DsnBundle {
    pub fn from_target(bundle: &ModelBundle, seed: u64) -> Result<Self> {
        let arch = bundle.arch.clone();
        Ok(Self {
            domain_encoder: EncoderNet::new(&arch, mix(seed, stream_id("dsn/domain_encoder")))?,
            class_encoder: bundle.target_encoder.clone(),
            decoder: DecoderNet::new(&arch, mix(seed, stream_id("dsn/decoder")))?,
            label_head: LabelClassifierNet::new(&arch, mix(seed, stream_id("dsn/label_head")))?,
            arch,
        })
    }

    pub fn class_encoder_hash(&self) -> String {
        self.class_encoder.hash()
    }

    fn parts(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("domain_encoder", self.domain_encoder.params()),
            ("class_encoder", self.class_encoder.params()),
            ("decoder", self.decoder.params()),
            ("label_head", self.label_head.params()),
        ]
    }

    pub fn save(&self, json_path: &Path, seed: u64, epoch: usize, lineage: BTreeMap<String, String>) -> Result<CheckpointHeader> {
        let parts = self.parts();
        let header = CheckpointHeader {
            stage: "dsn".into(),
            arch: self.arch.clone(),
            feature_dim: self.arch.feature_dim,
            seed,
            epoch,
            parts: parts
                .iter()
                .map(|(name, p)| PartRecord {
                    name: name.to_string(),
                    len: p.len(),
                    hash: param_hash(p),
                    frozen: *name == "class_encoder",
                })
                .collect(),
            lineage,
        };
        let slices: Vec<&[f64]> = parts.iter().map(|(_, p)| *p).collect();
        write_param_pack(json_path, &header, &slices)?;
        Ok(header)
    }

    pub fn load(json_path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, mut vecs) = read_param_pack(json_path)?;
        if header.stage != "dsn" || vecs.len() != 4 {
            return Err(CdaError::Load {
                path: json_path.into(),
                reason: format!("expected a dsn checkpoint, found stage `{}`", header.stage),
            });
        }
        let mut dsn = Self::from_target(&ModelBundle::new(header.arch.clone(), 0)?, 0)?;
        let fill = |net: &mut crate::nn::Net, params: Vec<f64>| {
            if net.num_params() != params.len() {
                return Err(CdaError::Load {
                    path: json_path.into(),
                    reason: "parameter count does not match architecture".into(),
                });
            }
            net.params_mut().copy_from_slice(&params);
            Ok(())
        };
        let label_head = vecs.pop().expect("four parts");
        let decoder = vecs.pop().expect("four parts");
        let class_encoder = vecs.pop().expect("four parts");
        let domain_encoder = vecs.pop().expect("four parts");
        fill(dsn.domain_encoder.net_mut(), domain_encoder)?;
        fill(dsn.class_encoder.net_mut(), class_encoder)?;
        fill(dsn.decoder.net_mut(), decoder)?;
        fill(dsn.label_head.net_mut(), label_head)?;
        Ok((dsn, header))
    }
}

/// Source-network prediction for one target sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub pseudo_label: Label,
    pub confidence: f64,
    /// Set when both logits are equal; the label then defaults to live.
    #[serde(default)]
    pub low_confidence: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    entries: BTreeMap<String, PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn get(&self, id: &str) -> Option<&PseudoLabel> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.values()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "pseudo_label", "confidence"]).map_err(csv_err(path))?;
        for p in self.entries.values() {
            w.write_record([p.id.as_str(), p.pseudo_label.as_str(), &format!("{:.6}", p.confidence)])
                .map_err(csv_err(path))?;
        }
        let bytes = w.into_inner().map_err(|e| CdaError::Validation(e.to_string()))?;
        crate::networks::atomic_write(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let mut entries = BTreeMap::new();
        for row in r.records() {
            let row = row.map_err(csv_err(path))?;
            let bad = || CdaError::Load {
                path: path.into(),
                reason: "malformed pseudo-label row".into(),
            };
            let id = row.get(0).ok_or_else(bad)?.to_string();
            let pseudo_label: Label = row.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let confidence: f64 = row.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            entries.insert(
                id.clone(),
                PseudoLabel {
                    id,
                    pseudo_label,
                    confidence,
                    low_confidence: confidence <= 0.5,
                },
            );
        }
        Ok(Self { entries })
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CdaError + '_ {
    move |e| CdaError::Load {
        path: path.into(),
        reason: e.to_string(),
    }
}

/// Argmax of the frozen source network over the target training split.
pub fn pseudo_label(bundle: &ModelBundle, target: &SampleManifest, mode: ExecMode) -> Result<PseudoLabelSet> {
    let idx = target.indices_for(Split::Train);
    let logits = map_indexed(mode, idx.len(), |k| bundle.source_logits(&target.sample(idx[k]).input()));
    let mut entries = BTreeMap::new();
    for (k, y) in logits.into_iter().enumerate() {
        let y = y?;
        let p = loss::softmax2(&y);
        let (label, confidence) = if y[1] > y[0] { (Label::Spoof, p[1]) } else { (Label::Live, p[0]) };
        let id = target.sample(idx[k]).id.clone();
        entries.insert(
            id.clone(),
            PseudoLabel {
                id,
                pseudo_label: label,
                confidence,
                low_confidence: y[0] == y[1],
            },
        );
    }
    Ok(PseudoLabelSet { entries })
}

/// Per-sample DSN objectives with analytic gradients.
pub mod grad {
    use super::*;

    /// Cross-entropy of the label head on domain features.
    pub fn label_head(dsn: &DsnBundle, x: &[f64], label: Label) -> (f64, Vec<f64>) {
        let z = dsn.domain_encoder.net().forward(x);
        let head = dsn.label_head.net();
        let t = head.forward_trace(&z);
        let (l, g) = loss::cross_entropy(t.output(), label.index());
        let mut gp = vec![0.0; head.num_params()];
        head.backward(&t, &g, &mut gp);
        (l, gp)
    }

    /// `lambda_conf * confusion + lambda_rec * L1` for one sample. Returns
    /// the total and its components plus the gradients for the domain
    /// encoder and the decoder; the label head and class encoder are
    /// constants here.
    pub fn encoder_decoder(dsn: &DsnBundle, x: &[f64], lambda_conf: f64, lambda_rec: f64) -> EncoderDecoderGrad {
        let enc = dsn.domain_encoder.net();
        let head = dsn.label_head.net();
        let dec = dsn.decoder.net();
        let te = enc.forward_trace(x);
        let z_d = te.output();
        let th = head.forward_trace(z_d);
        let (conf, g_logits) = loss::uniform_confusion(th.output());
        let mut unused = vec![0.0; head.num_params()];
        let g_conf = head.backward(&th, &g_logits, &mut unused);

        let z_c = dsn.class_encoder.net().forward(x);
        let mut joint = z_d.to_vec();
        joint.extend_from_slice(&z_c);
        let td = dec.forward_trace(&joint);
        let (rec, g_rec) = loss::l1(td.output(), x);
        let mut decoder = vec![0.0; dec.num_params()];
        let g_rec_out: Vec<f64> = g_rec.iter().map(|g| g * lambda_rec).collect();
        let g_joint = dec.backward(&td, &g_rec_out, &mut decoder);

        let d = z_d.len();
        let g_zd: Vec<f64> = (0..d).map(|i| lambda_conf * g_conf[i] + g_joint[i]).collect();
        let mut encoder = vec![0.0; enc.num_params()];
        enc.backward(&te, &g_zd, &mut encoder);
        EncoderDecoderGrad {
            loss: lambda_conf * conf + lambda_rec * rec,
            confusion: conf,
            reconstruction: rec,
            encoder,
            decoder,
        }
    }

    #[derive(Clone, Debug)]
    pub struct EncoderDecoderGrad {
        pub loss: f64,
        pub confusion: f64,
        pub reconstruction: f64,
        pub encoder: Vec<f64>,
        pub decoder: Vec<f64>,
    }
}

/// Stage C. Each step first fits the label head on domain features, then
/// updates the domain encoder and decoder to confuse it while
/// reconstructing the input. The class encoder never changes.
pub fn train_dsn(
    mut dsn: DsnBundle,
    source: &SampleManifest,
    target: &SampleManifest,
    pseudo: &PseudoLabelSet,
    config: &TrainConfig,
) -> Result<(DsnBundle, TrainLog)> {
    config.validate()?;
    let mode = config.exec;
    let frozen_hash = dsn.class_encoder_hash();
    let src_idx = source.indices_for(Split::Train);
    let tgt_idx = target.indices_for(Split::Train);
    let src_labels = src_idx.iter().map(|&i| source.require_label(i)).collect::<Result<Vec<_>>>()?;
    let tgt_labels = tgt_idx
        .iter()
        .map(|&i| {
            let id = &target.sample(i).id;
            pseudo
                .get(id)
                .map(|p| p.pseudo_label)
                .ok_or_else(|| CdaError::Validation(format!("no pseudo label for target sample `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let src_label: BTreeMap<usize, Label> = src_idx.iter().copied().zip(src_labels).collect();
    let tgt_label: BTreeMap<usize, Label> = tgt_idx.iter().copied().zip(tgt_labels).collect();
    let src_batches = BatchIterator::new(src_idx, config.batch_train, mix(config.seed, stream_id("dsn/source")), false)?;
    let tgt_batches = BatchIterator::new(tgt_idx, config.batch_train, mix(config.seed, stream_id("dsn/target")), false)?;

    let mut opt_head = Adam::new(dsn.label_head.net().num_params(), config.lr_dsn, config.weight_decay);
    let mut opt_enc = Adam::new(dsn.domain_encoder.net().num_params(), config.lr_dsn, config.weight_decay);
    let mut opt_dec = Adam::new(dsn.decoder.net().num_params(), config.lr_dsn, config.weight_decay);
    let mut log = TrainLog::new();
    log.push(LogRecord::Header {
        stage: "dsn".into(),
        info: BTreeMap::from([("class_encoder".into(), frozen_hash.clone())]),
    });
    let mut step = 0;
    for epoch in 0..config.epochs {
        let e = epoch as u64;
        let tb = tgt_batches.epoch(e);
        let sb = src_batches.epoch(e);
        let (mut rec_sum, mut conf_sum) = (0.0, 0.0);
        for (k, t) in tb.iter().enumerate() {
            let mut rows: Vec<(Vec<f64>, Label)> = sb[k % sb.len()].iter().map(|&i| (source.sample(i).input(), src_label[&i])).collect();
            rows.extend(t.iter().map(|&i| (target.sample(i).input(), tgt_label[&i])));

            let d = &dsn;
            let (l_head, g_head) = mean_of(
                mode,
                rows.len(),
                |r| grad::label_head(d, &rows[r].0, rows[r].1),
                |a, b| add_into(a, b),
                |a, k| scale(a, k),
            );
            check(l_head, "dsn_label", step)?;
            opt_head.step(dsn.label_head.net_mut().params_mut(), &g_head);

            let d = &dsn;
            let (total, g) = mean_of(
                mode,
                rows.len(),
                |r| {
                    let g = grad::encoder_decoder(d, &rows[r].0, config.lambda_conf, config.lambda_rec);
                    (g.loss, g)
                },
                |a, b| {
                    add_into(&mut a.encoder, &b.encoder);
                    add_into(&mut a.decoder, &b.decoder);
                    a.confusion += b.confusion;
                    a.reconstruction += b.reconstruction;
                },
                |a, k| {
                    scale(&mut a.encoder, k);
                    scale(&mut a.decoder, k);
                    a.confusion *= k;
                    a.reconstruction *= k;
                },
            );
            check(total, "dsn_total", step)?;
            opt_enc.step(dsn.domain_encoder.net_mut().params_mut(), &g.encoder);
            opt_dec.step(dsn.decoder.net_mut().params_mut(), &g.decoder);
            rec_sum += g.reconstruction;
            conf_sum += g.confusion;
            for (name, value) in [("dsn_label", l_head), ("dsn_confusion", g.confusion), ("dsn_reconstruction", g.reconstruction)] {
                log.push(LogRecord::Step {
                    stage: "dsn".into(),
                    epoch,
                    step,
                    loss: name.into(),
                    value,
                    hashes: BTreeMap::new(),
                });
            }
            step += 1;
        }
        let n = tb.len() as f64;
        log.push(LogRecord::Epoch {
            stage: "dsn".into(),
            epoch,
            metrics: BTreeMap::from([
                ("mean_reconstruction".to_string(), rec_sum / n),
                ("mean_confusion".to_string(), conf_sum / n),
            ]),
        });
    }
    if dsn.class_encoder_hash() != frozen_hash {
        return Err(CdaError::FrozenViolation("class_encoder".into()));
    }
    Ok((dsn, log))
}

fn check(value: f64, name: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CdaError::NonFinite {
            loss: name.into(),
            step,
            hint: "lower the DSN learning rate".into(),
        })
    }
}

/// Mean Euclidean distance from each target feature to every source
/// feature.
pub fn domain_distances(targets: &[Vec<f64>], sources: &[Vec<f64>], mode: ExecMode) -> Vec<f64> {
    let m = sources.len() as f64;
    map_indexed(mode, targets.len(), |i| {
        let t = &targets[i];
        let sum: f64 = sources
            .iter()
            .map(|s| t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum();
        sum / m
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub id: String,
    pub distance: f64,
    pub rank: usize,
}

/// Target training samples ordered from closest to farthest from the
/// source domain; ties broken by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurriculumRanking {
    pub entries: Vec<RankedSample>,
    pub source_used: usize,
}

impl CurriculumRanking {
    pub fn from_distances(mut rows: Vec<(String, f64)>, source_used: usize) -> Self {
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let entries = rows
            .into_iter()
            .enumerate()
            .map(|(rank, (id, distance))| RankedSample { id, distance, rank })
            .collect();
        Self { entries, source_used }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "distance", "rank"]).map_err(csv_err(path))?;
        for e in &self.entries {
            w.write_record([e.id.as_str(), &format!("{:.17e}", e.distance), &e.rank.to_string()])
                .map_err(csv_err(path))?;
        }
        let bytes = w.into_inner().map_err(|e| CdaError::Validation(e.to_string()))?;
        crate::networks::atomic_write(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let e: RankedSample = row.map_err(csv_err(path))?;
            entries.push(e);
        }
        if entries.iter().enumerate().any(|(i, e)| e.rank != i) {
            return Err(CdaError::Load {
                path: path.into(),
                reason: "ranks must be 0..n in file order".into(),
            });
        }
        Ok(Self { entries, source_used: 0 })
    }
}

/// Ranks the target training split by mean domain-feature distance to a
/// seeded subset (at most `config.source_sample_cap`) of source training
/// images.
pub fn rank_by_domain_distance(dsn: &DsnBundle, source: &SampleManifest, target: &SampleManifest, config: &TrainConfig) -> Result<CurriculumRanking> {
    let mode = config.exec;
    let mut src = source.indices_for(Split::Train);
    src.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, stream_id("rank/source"))));
    src.truncate(config.source_sample_cap);
    src.sort_unstable();
    let tgt = target.indices_for(Split::Train);
    if src.is_empty() || tgt.is_empty() {
        return Err(CdaError::EmptyActiveSet);
    }
    let enc = dsn.domain_encoder.net();
    let fs = map_indexed(mode, src.len(), |k| enc.forward(&source.sample(src[k]).input()));
    let ft = map_indexed(mode, tgt.len(), |k| enc.forward(&target.sample(tgt[k]).input()));
    let dist = domain_distances(&ft, &fs, mode);
    let rows = tgt.iter().zip(dist).map(|(&i, d)| (target.sample(i).id.clone(), d)).collect();
    Ok(CurriculumRanking::from_distances(rows, src.len()))
}

/// Fraction of the ranked targets in play at each epoch:
/// `min(1, f0 + e (1 - f0) / ramp)`, with the final epoch always complete.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub start_fraction: f64,
    pub ramp_epochs: usize,
    pub total_epochs: usize,
}

impl CurriculumSchedule {
    pub fn new(start_fraction: f64, ramp_epochs: usize, total_epochs: usize) -> Result<Self> {
        let s = Self {
            start_fraction,
            ramp_epochs,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    /// `f0 = 0.3`, ramp over the first half of training.
    pub fn standard(total_epochs: usize) -> Self {
        Self {
            start_fraction: 0.3,
            ramp_epochs: (total_epochs / 2).max(1),
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_fraction > 0.0 && self.start_fraction <= 1.0) {
            return Err(CdaError::Validation("curriculum start fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn fraction(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 || epoch + 1 >= self.total_epochs {
            return 1.0;
        }
        let f0 = self.start_fraction;
        (f0 + epoch as f64 * (1.0 - f0) / self.ramp_epochs as f64).min(1.0)
    }

    /// Number of ranked samples active at `epoch` (at least one).
    pub fn active_count(&self, epoch: usize, n: usize) -> usize {
        let k = (self.fraction(epoch) * n as f64 - 1e-9).ceil() as usize;
        k.clamp(1.min(n), n)
    }
}

/// Stage D: re-adaptation where epoch `e` only sees the closest
/// `active_count(e)` ranked targets.
pub fn curriculum_adapt(
    mut bundle: ModelBundle,
    memory: Option<&MemoryModule>,
    source: &SampleManifest,
    target: &SampleManifest,
    ranking: &CurriculumRanking,
    schedule: &CurriculumSchedule,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    schedule.validate()?;
    if ranking.is_empty() {
        return Err(CdaError::EmptyActiveSet);
    }
    let ordered = ranking
        .ids()
        .map(|id| target.index_of(id).ok_or_else(|| CdaError::Validation(format!("ranked id `{id}` not in target manifest"))))
        .collect::<Result<Vec<_>>>()?;
    if config.fresh_discriminator {
        reset_discriminator(&mut bundle, config.seed)?;
    }
    let mut adapter = Adapter::new(bundle, memory, source, target, config, "curriculum")?;
    for e in 0..schedule.total_epochs {
        let k = schedule.active_count(e, ordered.len());
        adapter.run_epoch(&ordered[..k])?;
    }
    adapter.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_ramps_and_completes() {
        let s = CurriculumSchedule::standard(10);
        assert_eq!(s.ramp_epochs, 5);
        assert!((s.fraction(0) - 0.3).abs() < 1e-12);
        assert!((s.fraction(5) - 1.0).abs() < 1e-12);
        assert_eq!(s.fraction(9), 1.0);
        assert_eq!(s.active_count(0, 100), 30);
        let mut prev = 0;
        for e in 0..10 {
            let k = s.active_count(e, 100);
            assert!(k >= prev);
            prev = k;
        }
        assert_eq!(prev, 100);
    }

    #[test]
    fn last_epoch_is_full_even_with_long_ramp() {
        let s = CurriculumSchedule::new(0.3, 100, 4).unwrap();
        assert!(s.fraction(2) < 1.0);
        assert_eq!(s.active_count(3, 50), 50);
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(CurriculumSchedule::new(0.0, 2, 4).is_err());
        assert!(CurriculumSchedule::new(1.5, 2, 4).is_err());
    }

    #[test]
    fn distances_match_hand_computation() {
        let t = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let s = vec![vec![0.0, 0.0], vec![0.0, 2.0]];
        let d = domain_distances(&t, &s, ExecMode::Sequential);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - (5.0 + 13f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_orders_by_distance_then_id() {
        let r = CurriculumRanking::from_distances(vec![("c".into(), 2.0), ("b".into(), 1.0), ("a".into(), 2.0)], 3);
        let ids: Vec<&str> = r.ids().collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(r.entries[2].rank, 2);
    }
}
