//! Stage A (supervised source training) and stage B (adversarial alignment
//! of the memory-augmented target network).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{BatchIterator, Label, SampleManifest, Split};
use crate::error::{CdaError, Result};
use crate::memory::{target_backward, target_forward, MemoryModule, TargetGrads};
use crate::networks::{DiscriminatorNet, ModelBundle, Part};
use crate::nn::{add_into, loss, param_hash, scale, Adam};
use crate::par::{map_indexed, ExecMode};
use crate::seed::{mix, stream_id};

/// Domain of a discriminator row; also the discriminator's class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// One alternating-optimisation batch: source rows and target rows.
#[derive(Clone, Debug, Default)]
pub struct DomainBatch {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

impl DomainBatch {
    /// Ground-truth domain labels, source rows first.
    pub fn domain_labels(&self) -> Vec<Domain> {
        let mut d = vec![Domain::Source; self.source.len()];
        d.extend(std::iter::repeat_n(Domain::Target, self.target.len()));
        d
    }

    /// Fake labels for the target rows: all "source".
    pub fn fake_labels(&self) -> Vec<Domain> {
        vec![Domain::Source; self.target.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Header {
        stage: String,
        #[serde(default)]
        info: BTreeMap<String, String>,
    },
    Step {
        stage: String,
        epoch: usize,
        step: usize,
        loss: String,
        value: f64,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        hashes: BTreeMap<String, String>,
    },
    Epoch {
        stage: String,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    },
}

/// Append-only training record, written as JSON lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    /// Step losses named `name`, in order.
    pub fn losses(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, value, .. } if loss == name => Some(*value),
                _ => None,
            })
            .collect()
    }

    pub fn epoch_metric(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { metrics, .. } => metrics.get(name).copied(),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CdaError::Validation(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| CdaError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| CdaError::io(path, e))
    }
}

/// Per-sample objectives and their analytic gradients. Training steps
/// average these over a batch; tests compare them with finite differences.
pub mod grad {
    use super::*;

    /// Cross-entropy of the source network on one labelled sample.
    /// Returns `(loss, d/d encoder, d/d classifier)`.
    pub fn source_ce(bundle: &ModelBundle, x: &[f64], label: Label) -> (f64, Vec<f64>, Vec<f64>) {
        let enc = bundle.source_encoder.net();
        let cls = bundle.source_classifier.net();
        let te = enc.forward_trace(x);
        let tc = cls.forward_trace(te.output());
        let (l, g) = loss::cross_entropy(tc.output(), label.index());
        let mut gc = vec![0.0; cls.num_params()];
        let mut ge = vec![0.0; enc.num_params()];
        let gz = cls.backward(&tc, &g, &mut gc);
        enc.backward(&te, &gz, &mut ge);
        (l, ge, gc)
    }

    /// Cross-entropy of the final (memory-enhanced when `memory` is given)
    /// target logits against `label`.
    pub fn target_ce(bundle: &ModelBundle, memory: Option<&MemoryModule>, x: &[f64], label: Label) -> (f64, TargetGradients) {
        let t = target_forward(bundle, memory, x);
        let (l, g) = loss::cross_entropy(&t.y_final, label.index());
        let mut grads = TargetGrads::zeros(bundle);
        target_backward(bundle, memory, &t, &g, &mut grads);
        (l, grads.into())
    }

    /// Confusion objective on one target sample: cross-entropy of the
    /// discriminator's verdict on `y_final` against the fake label "source".
    /// The discriminator is a constant of this objective.
    pub fn confusion(bundle: &ModelBundle, memory: Option<&MemoryModule>, x: &[f64]) -> (f64, TargetGradients) {
        let t = target_forward(bundle, memory, x);
        let disc = bundle.discriminator.net();
        let td = disc.forward_trace(&t.y_final);
        let (l, g) = loss::cross_entropy(td.output(), Domain::Source.index());
        let mut unused = vec![0.0; disc.num_params()];
        let gy = disc.backward(&td, &g, &mut unused);
        let mut grads = TargetGrads::zeros(bundle);
        target_backward(bundle, memory, &t, &[gy[0], gy[1]], &mut grads);
        (l, grads.into())
    }

    /// Discriminator cross-entropy on one row of logits.
    pub fn discriminator(disc: &DiscriminatorNet, logits: &[f64; 2], domain: Domain) -> (f64, Vec<f64>) {
        let net = disc.net();
        let t = net.forward_trace(logits);
        let (l, g) = loss::cross_entropy(t.output(), domain.index());
        let mut gp = vec![0.0; net.num_params()];
        net.backward(&t, &g, &mut gp);
        (l, gp)
    }

    /// Gradients of the trainable target sub-networks.
    #[derive(Clone, Debug)]
    pub struct TargetGradients {
        pub encoder: Vec<f64>,
        pub classifier: Vec<f64>,
        pub indicator: Vec<f64>,
    }

    impl From<TargetGrads> for TargetGradients {
        fn from(g: TargetGrads) -> Self {
            Self {
                encoder: g.encoder,
                classifier: g.classifier,
                indicator: g.indicator,
            }
        }
    }
}

/// Ordered mean over per-sample results; the reduction is sequential so the
/// sum is independent of the execution mode.
pub(crate) fn mean_of<T, F>(mode: ExecMode, n: usize, per_sample: F, mut add: impl FnMut(&mut T, &T), finish: impl FnOnce(&mut T, f64)) -> (f64, T)
where
    T: Send,
    F: Fn(usize) -> (f64, T) + Sync + Send,
{
    let mut results = map_indexed(mode, n, per_sample).into_iter();
    let (mut loss, mut acc) = results.next().expect("non-empty batch");
    for (l, g) in results {
        loss += l;
        add(&mut acc, &g);
    }
    let k = 1.0 / n as f64;
    finish(&mut acc, k);
    (loss * k, acc)
}

fn check_finite(loss_name: &str, step: usize, value: f64, hint: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CdaError::NonFinite {
            loss: loss_name.into(),
            step,
            hint: hint.into(),
        })
    }
}

fn stage_hashes(bundle: &ModelBundle, parts: &[Part], enabled: bool) -> BTreeMap<String, String> {
    if !enabled {
        return BTreeMap::new();
    }
    parts.iter().map(|&p| (p.name().to_string(), bundle.hash(p))).collect()
}

/// Classification accuracy of the source network over `indices` (labels
/// read through the training-side guard).
pub fn source_accuracy(bundle: &ModelBundle, manifest: &SampleManifest, indices: &[usize], mode: ExecMode) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let labels = indices.iter().map(|&i| manifest.require_label(i)).collect::<Result<Vec<_>>>()?;
    let logits = map_indexed(mode, indices.len(), |k| bundle.source_logits(&manifest.sample(indices[k]).input()));
    let mut correct = 0usize;
    for (y, l) in logits.into_iter().zip(labels) {
        let y = y?;
        let pred = if y[1] > y[0] { Label::Spoof } else { Label::Live };
        correct += usize::from(pred == l);
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Stage A: minimise the batch-mean cross-entropy of the source network.
pub fn train_source(mut bundle: ModelBundle, source: &SampleManifest, config: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    let train = source.indices_for(Split::Train);
    let labels: BTreeMap<usize, Label> = train
        .iter()
        .map(|&i| source.require_label(i).map(|l| (i, l)))
        .collect::<Result<_>>()?;
    let batches = BatchIterator::new(train.clone(), config.batch_train, mix(config.seed, stream_id("source")), false)?;
    let mut opt_e = Adam::new(bundle.source_encoder.net().num_params(), config.lr_source, config.weight_decay);
    let mut opt_c = Adam::new(bundle.source_classifier.net().num_params(), config.lr_source, config.weight_decay);
    let mut log = TrainLog::new();
    log.push(LogRecord::Header {
        stage: "source".into(),
        info: BTreeMap::from([("samples".into(), train.len().to_string())]),
    });
    let mode = config.exec;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let epoch_batches = batches.epoch(epoch as u64);
        for batch in &epoch_batches {
            let b = &bundle;
            let (l, (ge, gc)) = mean_of(
                mode,
                batch.len(),
                |k| {
                    let i = batch[k];
                    let (l, ge, gc) = grad::source_ce(b, &source.sample(i).input(), labels[&i]);
                    (l, (ge, gc))
                },
                |acc, g| {
                    add_into(&mut acc.0, &g.0);
                    add_into(&mut acc.1, &g.1);
                },
                |acc, k| {
                    scale(&mut acc.0, k);
                    scale(&mut acc.1, k);
                },
            );
            check_finite("source_ce", step, l, "learning rate too high or corrupt input data")?;
            opt_e.step(bundle.params_mut(Part::SourceEncoder)?, &ge);
            opt_c.step(bundle.params_mut(Part::SourceClassifier)?, &gc);
            epoch_loss += l;
            log.push(LogRecord::Step {
                stage: "source".into(),
                epoch,
                step,
                loss: "source_ce".into(),
                value: l,
                hashes: stage_hashes(&bundle, &[Part::SourceEncoder, Part::SourceClassifier], config.log_hashes),
            });
            step += 1;
        }
        let mut metrics = BTreeMap::from([("mean_loss".to_string(), epoch_loss / epoch_batches.len() as f64)]);
        let val = source.indices_for(Split::Val);
        if !val.is_empty() {
            metrics.insert("val_accuracy".into(), source_accuracy(&bundle, source, &val, mode)?);
        }
        log.push(LogRecord::Epoch {
            stage: "source".into(),
            epoch,
            metrics,
        });
    }
    Ok((bundle, log))
}

/// Optimiser state of stage B/D. Created fresh at the start of each stage.
#[derive(Clone, Debug)]
pub struct AdaptOptimizers {
    pub encoder: Adam,
    pub classifier: Adam,
    pub indicator: Adam,
    pub discriminator: Adam,
}

impl AdaptOptimizers {
    pub fn new(bundle: &ModelBundle, config: &TrainConfig) -> Self {
        let mk = |p: Part| Adam::new(bundle.net(p).num_params(), config.lr_target, config.weight_decay);
        Self {
            encoder: mk(Part::TargetEncoder),
            classifier: mk(Part::TargetClassifier),
            indicator: mk(Part::Indicator),
            discriminator: Adam::new(bundle.net(Part::Discriminator).num_params(), config.lr_disc(), config.weight_decay),
        }
    }
}

/// Cross-entropy step of the discriminator on fixed rows of logits.
pub fn discriminator_step_on_logits(
    disc: &mut DiscriminatorNet,
    opt: &mut Adam,
    rows: &[([f64; 2], Domain)],
    mode: ExecMode,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(CdaError::EmptyActiveSet);
    }
    let d = &*disc;
    let (l, g) = mean_of(
        mode,
        rows.len(),
        |k| grad::discriminator(d, &rows[k].0, rows[k].1),
        |a, b| add_into(a, b),
        |a, k| scale(a, k),
    );
    check_finite("disc", 0, l, "discriminator diverged")?;
    opt.step(disc.net_mut().params_mut(), &g);
    Ok(l)
}

/// Logits fed to the discriminator: the frozen source network on source
/// rows, the (memory-enhanced) target network on target rows.
pub fn domain_logits(bundle: &ModelBundle, memory: Option<&MemoryModule>, batch: &DomainBatch, mode: ExecMode) -> Result<Vec<([f64; 2], Domain)>> {
    let ns = batch.source.len();
    let labels = batch.domain_labels();
    let logits = map_indexed(mode, labels.len(), |k| {
        if k < ns {
            bundle.source_logits(&batch.source[k])
        } else {
            Ok(target_forward(bundle, memory, &batch.target[k - ns]).y_final)
        }
    });
    logits.into_iter().zip(labels).map(|(l, d)| l.map(|l| (l, d))).collect()
}

/// One discriminator update on a domain batch; touches only the
/// discriminator parameters.
pub fn discriminator_step(
    bundle: &mut ModelBundle,
    memory: Option<&MemoryModule>,
    batch: &DomainBatch,
    opt: &mut Adam,
    mode: ExecMode,
) -> Result<f64> {
    if bundle.is_frozen(Part::Discriminator) {
        return Err(CdaError::FrozenViolation(Part::Discriminator.name().into()));
    }
    let rows = domain_logits(bundle, memory, batch, mode)?;
    discriminator_step_on_logits(&mut bundle.discriminator, opt, &rows, mode)
}

/// One target-network update that pushes the discriminator to call target
/// rows "source". Updates the target encoder, classifier and (when the
/// memory path is active and it is not frozen) the domain indicator; never
/// the discriminator or the memory.
pub fn confusion_step(
    bundle: &mut ModelBundle,
    memory: Option<&MemoryModule>,
    batch: &DomainBatch,
    opts: &mut AdaptOptimizers,
    mode: ExecMode,
) -> Result<f64> {
    if batch.target.is_empty() {
        return Err(CdaError::EmptyActiveSet);
    }
    let b = &*bundle;
    let (l, g) = mean_of(
        mode,
        batch.target.len(),
        |k| {
            let (l, g) = grad::confusion(b, memory, &batch.target[k]);
            (l, g)
        },
        |a, b| {
            add_into(&mut a.encoder, &b.encoder);
            add_into(&mut a.classifier, &b.classifier);
            add_into(&mut a.indicator, &b.indicator);
        },
        |a, k| {
            scale(&mut a.encoder, k);
            scale(&mut a.classifier, k);
            scale(&mut a.indicator, k);
        },
    );
    check_finite("confusion", 0, l, "target learning rate too high")?;
    opts.encoder.step(bundle.params_mut(Part::TargetEncoder)?, &g.encoder);
    opts.classifier.step(bundle.params_mut(Part::TargetClassifier)?, &g.classifier);
    if memory.is_some() && !bundle.is_frozen(Part::Indicator) {
        opts.indicator.step(bundle.params_mut(Part::Indicator)?, &g.indicator);
    }
    Ok(l)
}

/// Epoch-by-epoch driver shared by stage B and the curriculum stage.
pub struct Adapter<'a> {
    bundle: ModelBundle,
    memory: Option<&'a MemoryModule>,
    source: &'a SampleManifest,
    target: &'a SampleManifest,
    config: &'a TrainConfig,
    opts: AdaptOptimizers,
    source_batches: BatchIterator,
    source_hash: String,
    memory_hash: Option<String>,
    stage: String,
    epoch: usize,
    step: usize,
    log: TrainLog,
}

impl<'a> Adapter<'a> {
    pub fn new(
        bundle: ModelBundle,
        memory: Option<&'a MemoryModule>,
        source: &'a SampleManifest,
        target: &'a SampleManifest,
        config: &'a TrainConfig,
        stage: &str,
    ) -> Result<Self> {
        config.validate()?;
        if !(bundle.is_frozen(Part::SourceEncoder) && bundle.is_frozen(Part::SourceClassifier)) {
            return Err(CdaError::Contract(
                "target network must be initialised from a frozen source network".into(),
            ));
        }
        let memory = if config.memory_enabled {
            Some(memory.ok_or_else(|| CdaError::Contract("memory path enabled but no memory module given".into()))?)
        } else {
            None
        };
        let source_batches = BatchIterator::new(
            source.indices_for(Split::Train),
            config.batch_train,
            mix(config.seed, stream_id("adapt/source")),
            false,
        )?;
        let mut log = TrainLog::new();
        log.push(LogRecord::Header {
            stage: stage.into(),
            info: BTreeMap::from([
                ("memory_enabled".into(), config.memory_enabled.to_string()),
                ("alt_ratio".into(), config.alt_ratio.to_string()),
            ]),
        });
        Ok(Self {
            opts: AdaptOptimizers::new(&bundle, config),
            source_hash: bundle.source_hash(),
            memory_hash: memory.map(MemoryModule::hash),
            bundle,
            memory,
            source,
            target,
            config,
            source_batches,
            stage: stage.into(),
            epoch: 0,
            step: 0,
            log,
        })
    }

    pub fn log_mut(&mut self) -> &mut TrainLog {
        &mut self.log
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    /// One pass over `active` target indices, each target batch paired with
    /// a source batch.
    pub fn run_epoch(&mut self, active: &[usize]) -> Result<()> {
        let mode = self.config.exec;
        if let Some(&bad) = active.iter().find(|&&i| i >= self.target.len()) {
            return Err(CdaError::Validation(format!("active index {bad} outside target manifest")));
        }
        let targets = BatchIterator::new(
            active.to_vec(),
            self.config.batch_train,
            mix(self.config.seed, stream_id("adapt/target")),
            false,
        )?;
        let e = self.epoch as u64;
        let target_batches = targets.epoch(e);
        let source_batches = self.source_batches.epoch(e);
        let (mut disc_sum, mut conf_sum) = (0.0, 0.0);
        let parts = [Part::TargetEncoder, Part::TargetClassifier, Part::Indicator, Part::Discriminator];
        for (k, tb) in target_batches.iter().enumerate() {
            let sb = &source_batches[k % source_batches.len()];
            let batch = DomainBatch {
                source: sb.iter().map(|&i| self.source.sample(i).input()).collect(),
                target: tb.iter().map(|&i| self.target.sample(i).input()).collect(),
            };
            let mut d_loss = 0.0;
            for _ in 0..self.config.alt_ratio {
                d_loss = discriminator_step(&mut self.bundle, self.memory, &batch, &mut self.opts.discriminator, mode)
                    .map_err(|e| self.annotate(e))?;
            }
            let c_loss = confusion_step(&mut self.bundle, self.memory, &batch, &mut self.opts, mode).map_err(|e| self.annotate(e))?;
            disc_sum += d_loss;
            conf_sum += c_loss;
            let hashes = stage_hashes(&self.bundle, &parts, self.config.log_hashes);
            for (name, value) in [("disc", d_loss), ("confusion", c_loss)] {
                self.log.push(LogRecord::Step {
                    stage: self.stage.clone(),
                    epoch: self.epoch,
                    step: self.step,
                    loss: name.into(),
                    value,
                    hashes: hashes.clone(),
                });
            }
            self.step += 1;
        }
        let n = target_batches.len() as f64;
        self.log.push(LogRecord::Epoch {
            stage: self.stage.clone(),
            epoch: self.epoch,
            metrics: BTreeMap::from([
                ("mean_disc".to_string(), disc_sum / n),
                ("mean_confusion".to_string(), conf_sum / n),
                ("active".to_string(), active.len() as f64),
            ]),
        });
        self.epoch += 1;
        Ok(())
    }

    fn annotate(&self, e: CdaError) -> CdaError {
        match e {
            CdaError::NonFinite { loss, hint, .. } => CdaError::NonFinite { loss, step: self.step, hint },
            other => other,
        }
    }

    /// Verifies the source network and memory are untouched and returns the
    /// adapted bundle.
    pub fn finish(self) -> Result<(ModelBundle, TrainLog)> {
        if self.bundle.source_hash() != self.source_hash {
            return Err(CdaError::FrozenViolation("source network".into()));
        }
        if let (Some(m), Some(h)) = (self.memory, &self.memory_hash) {
            if &m.hash() != h {
                return Err(CdaError::FrozenViolation("memory module".into()));
            }
        }
        Ok((self.bundle, self.log))
    }
}

/// Stage B: alternating discriminator / confusion updates for
/// `config.epochs` epochs over the target training split (or the given
/// subset of it).
pub fn adapt_target(
    bundle: ModelBundle,
    memory: Option<&MemoryModule>,
    source: &SampleManifest,
    target: &SampleManifest,
    config: &TrainConfig,
    active_indices: Option<&[usize]>,
) -> Result<(ModelBundle, TrainLog)> {
    let active = match active_indices {
        Some(a) => a.to_vec(),
        None => target.indices_for(Split::Train),
    };
    if active.is_empty() {
        return Err(CdaError::EmptyActiveSet);
    }
    let mut adapter = Adapter::new(bundle, memory, source, target, config, "adapt")?;
    for _ in 0..config.epochs {
        adapter.run_epoch(&active)?;
    }
    adapter.finish()
}

/// Replaces the discriminator with freshly initialised parameters.
pub fn reset_discriminator(bundle: &mut ModelBundle, seed: u64) -> Result<()> {
    let fresh = DiscriminatorNet::new(&bundle.arch, mix(seed, stream_id("discriminator/fresh")))?;
    bundle.replace_net(Part::Discriminator, fresh.net().clone())
}

/// Digest of a parameter slice, re-exported for callers that audit updates.
pub fn digest(params: &[f64]) -> String {
    param_hash(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchConfig, EncoderArch};
    use crate::data::{DataShape, Sample};
    use crate::data::ManifestRole;
    use crate::networks::init_target_from_source;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            feature_dim: 4,
            indicator_hidden: 4,
            discriminator_hidden: 8,
            decoder_hidden: 4,
            encoder: EncoderArch::Mlp { hidden: Some(8) },
            ..ArchConfig::for_input(DataShape::Flat { dim: 2 })
        }
    }

    /// Linearly separable 2-D blobs: live iff x0 + x1 > 0.
    fn blobs(n: usize, seed: u64, role: ManifestRole) -> SampleManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let live = i % 2 == 0;
            let c = if live { 1.0 } else { -1.0 };
            let x = [c + rng.gen_range(-0.6..0.6), c + rng.gen_range(-0.6..0.6)];
            samples.push(Sample { id: format!("b{i:03}"), data: vec![x[0] as f32, x[1] as f32], split: Split::Train, domain_tag: None });
            labels.push(Some(if live { Label::Live } else { Label::Spoof }));
        }
        SampleManifest::from_parts(role, DataShape::Flat { dim: 2 }, samples, labels, vec![None; n], None).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { lr_source: 1e-2, lr_target: 1e-3, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let b = ModelBundle::new(toy_arch(), 1).unwrap();
        let src = blobs(32, 1, ManifestRole::Source);
        let (out, _) = train_source(b.clone(), &src, &TrainConfig { epochs: 0, ..cfg() }).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn separable_toy_is_learned() {
        // Closed-form separator sign(x0 + x1) classifies every blob sample.
        let src = blobs(64, 2, ManifestRole::Source);
        for i in 0..src.len() {
            let d = &src.sample(i).data;
            let pred = if d[0] + d[1] > 0.0 { Label::Live } else { Label::Spoof };
            assert_eq!(pred, src.require_label(i).unwrap());
        }
        let (b, log) = train_source(ModelBundle::new(toy_arch(), 2).unwrap(), &src, &cfg()).unwrap();
        let acc = source_accuracy(&b, &src, &src.indices_for(Split::Train), ExecMode::Sequential).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
        let epoch_loss = log.epoch_metric("mean_loss");
        assert!(epoch_loss.last().unwrap() < &epoch_loss[0]);
    }

    #[test]
    fn source_training_refuses_target_manifest() {
        let tgt = blobs(8, 3, ManifestRole::CompoundTarget);
        let r = train_source(ModelBundle::new(toy_arch(), 2).unwrap(), &tgt, &cfg());
        assert!(matches!(r, Err(CdaError::LabelGuard(_))));
    }

    #[test]
    fn nan_loss_aborts() {
        let src = blobs(16, 4, ManifestRole::Source);
        let mut b = ModelBundle::new(toy_arch(), 2).unwrap();
        b.source_classifier.net_mut().params_mut()[0] = f64::NAN;
        assert!(matches!(train_source(b, &src, &cfg()), Err(CdaError::NonFinite { .. })));
    }

    #[test]
    fn discriminator_learns_separable_logits() {
        let arch = ArchConfig { discriminator_hidden: 32, ..toy_arch() };
        let mut disc = DiscriminatorNet::new(&arch, 4).unwrap();
        let mut opt = Adam::new(disc.net().num_params(), 1e-2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<([f64; 2], Domain)> = (0..32)
            .map(|i| {
                let (c, d) = if i % 2 == 0 { (3.0, Domain::Source) } else { (-3.0, Domain::Target) };
                ([c + rng.gen_range(-0.5..0.5), -c + rng.gen_range(-0.5..0.5)], d)
            })
            .collect();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = discriminator_step_on_logits(&mut disc, &mut opt, &rows, ExecMode::Sequential).unwrap();
        }
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn uniform_discriminator_gives_ln2_for_both_objectives() {
        let src = blobs(8, 5, ManifestRole::Source);
        let tgt = blobs(8, 6, ManifestRole::CompoundTarget);
        let mut b = init_target_from_source(ModelBundle::new(toy_arch(), 5).unwrap()).unwrap();
        b.discriminator.net_mut().params_mut().fill(0.0);
        let batch = DomainBatch {
            source: (0..4).map(|i| src.sample(i).input()).collect(),
            target: (0..4).map(|i| tgt.sample(i).input()).collect(),
        };
        let rows = domain_logits(&b, None, &batch, ExecMode::Sequential).unwrap();
        for (l, d) in &rows {
            assert_eq!(grad::discriminator(&b.discriminator, l, *d).0, std::f64::consts::LN_2);
        }
        let (l, g) = grad::confusion(&b, None, &batch.target[0]);
        assert_eq!(l, std::f64::consts::LN_2);
        assert!(g.encoder.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn update_scopes() {
        let src = blobs(16, 7, ManifestRole::Source);
        let tgt = blobs(16, 8, ManifestRole::CompoundTarget);
        let mut b = init_target_from_source(ModelBundle::new(toy_arch(), 6).unwrap()).unwrap();
        let batch = DomainBatch {
            source: (0..8).map(|i| src.sample(i).input()).collect(),
            target: (0..8).map(|i| tgt.sample(i).input()).collect(),
        };
        let mut opts = AdaptOptimizers::new(&b, &cfg());
        let before = b.hashes();
        discriminator_step(&mut b, None, &batch, &mut opts.discriminator, ExecMode::Sequential).unwrap();
        let after = b.hashes();
        for (k, v) in &before {
            assert_eq!(v != &after[k], k == "discriminator", "part {k}");
        }
        confusion_step(&mut b, None, &batch, &mut opts, ExecMode::Sequential).unwrap();
        let after2 = b.hashes();
        assert_eq!(after["discriminator"], after2["discriminator"]);
        assert_eq!(after["source_encoder"], after2["source_encoder"]);
        assert_ne!(after["target_encoder"], after2["target_encoder"]);
        // memory path disabled: indicator untouched
        assert_eq!(after["indicator"], after2["indicator"]);
    }

    #[test]
    fn adapt_requires_initialised_target() {
        let src = blobs(8, 9, ManifestRole::Source);
        let tgt = blobs(8, 10, ManifestRole::CompoundTarget);
        let c = TrainConfig { memory_enabled: false, ..cfg() };
        let r = adapt_target(ModelBundle::new(toy_arch(), 1).unwrap(), None, &src, &tgt, &c, None);
        assert!(matches!(r, Err(CdaError::Contract(_))));
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let src = blobs(32, 11, ManifestRole::Source);
        let (_, log) = train_source(ModelBundle::new(toy_arch(), 2).unwrap(), &src, &TrainConfig { epochs: 1, ..cfg() }).unwrap();
        assert_eq!(TrainLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
