//! Sub-networks of the source/target pipeline and their checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, EncoderArch, GateKind};
use crate::data::DataShape;
use crate::error::{CdaError, Result};
use crate::nn::{param_hash, Layer, Net};
use crate::seed::{mix, stream_id};

fn encoder_layers(arch: &ArchConfig) -> Vec<Layer> {
    let d = arch.feature_dim;
    match (&arch.encoder, arch.input) {
        (EncoderArch::Conv { channels }, DataShape::Image { height, width, channels: c0 }) => {
            let mut layers = Vec::new();
            let (mut h, mut w, mut c) = (height, width, c0);
            for &oc in channels {
                layers.push(Layer::Conv2d {
                    height: h,
                    width: w,
                    in_channels: c,
                    out_channels: oc,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                });
                layers.push(Layer::Relu);
                h = (h + 2 - 3) / 2 + 1;
                w = (w + 2 - 3) / 2 + 1;
                c = oc;
            }
            layers.push(Layer::GlobalAvgPool { height: h, width: w, channels: c });
            layers.push(Layer::Linear { inputs: c, outputs: d });
            layers
        }
        (EncoderArch::Mlp { hidden: Some(hdim) }, shape) => vec![
            Layer::Linear { inputs: shape.len(), outputs: *hdim },
            Layer::Relu,
            Layer::Linear { inputs: *hdim, outputs: d },
        ],
        (EncoderArch::Mlp { hidden: None }, shape) => vec![Layer::Linear { inputs: shape.len(), outputs: d }],
        (EncoderArch::Conv { .. }, DataShape::Flat { .. }) => {
            unreachable!("ArchConfig::validate rejects conv encoders on flat input")
        }
    }
}

fn classifier_layers(d: usize, hidden: Option<usize>) -> Vec<Layer> {
    match hidden {
        Some(h) => vec![
            Layer::Linear { inputs: d, outputs: h },
            Layer::Relu,
            Layer::Linear { inputs: h, outputs: 2 },
        ],
        None => vec![Layer::Linear { inputs: d, outputs: 2 }],
    }
}

macro_rules! net_wrapper {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            net: Net,
        }

        impl $name {
            pub fn from_net(net: Net) -> Self {
                Self { net }
            }

            pub fn net(&self) -> &Net {
                &self.net
            }

            pub fn net_mut(&mut self) -> &mut Net {
                &mut self.net
            }

            pub fn params(&self) -> &[f64] {
                self.net.params()
            }

            pub fn hash(&self) -> String {
                param_hash(self.net.params())
            }

            #[allow(dead_code)]
            fn run(&self, x: &[f64]) -> Result<Vec<f64>> {
                self.net.check_input(x)?;
                Ok(self.net.forward(x))
            }
        }
    };
}

net_wrapper!(
    /// Backbone encoder: data tensor to a `D`-dimensional feature.
    EncoderNet
);
net_wrapper!(
    /// Label head: feature to two logits (live, spoof).
    LabelClassifierNet
);
net_wrapper!(
    /// Domain indicator `F`: feature to a `D`-dimensional gate.
    DomainIndicatorNet
);
net_wrapper!(
    /// Domain discriminator on 2-way logits; output logits are (source, target).
    DiscriminatorNet
);
net_wrapper!(
    /// Decoder from concatenated domain and class features back to data space.
    DecoderNet
);

impl EncoderNet {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_net(Net::new(arch.input.len(), encoder_layers(arch), &mut rng)?))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.run(x)
    }
}

/// Feature of `x` under `net`.
pub fn forward_encode(net: &EncoderNet, x: &[f64]) -> Result<Vec<f64>> {
    net.encode(x)
}

impl LabelClassifierNet {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_net(Net::new(
            arch.feature_dim,
            classifier_layers(arch.feature_dim, arch.classifier_hidden),
            &mut rng,
        )?))
    }

    pub fn classify(&self, z: &[f64]) -> Result<[f64; 2]> {
        let y = self.run(z)?;
        Ok([y[0], y[1]])
    }
}

pub fn forward_classify(net: &LabelClassifierNet, z: &[f64]) -> Result<[f64; 2]> {
    net.classify(z)
}

impl DomainIndicatorNet {
    fn layers(d: usize, hidden: usize, gate: GateKind) -> Vec<Layer> {
        let mut layers = vec![
            Layer::Linear { inputs: d, outputs: hidden },
            Layer::Relu,
            Layer::Linear { inputs: hidden, outputs: d },
        ];
        if gate == GateKind::Sigmoid {
            layers.push(Layer::Sigmoid);
        }
        layers
    }

    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::layers(arch.feature_dim, arch.indicator_hidden, arch.gate);
        Ok(Self::from_net(Net::new(arch.feature_dim, layers, &mut rng)?))
    }

    /// An indicator whose output is exactly zero for every input.
    pub fn zero_gate(arch: &ArchConfig) -> Result<Self> {
        let layers = Self::layers(arch.feature_dim, arch.indicator_hidden, GateKind::Linear);
        Ok(Self::from_net(Net::zeros(arch.feature_dim, layers)?))
    }

    pub fn gate(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.run(z)
    }
}

impl DiscriminatorNet {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.discriminator_hidden;
        let layers = vec![
            Layer::Linear { inputs: 2, outputs: h },
            Layer::Relu,
            Layer::Linear { inputs: h, outputs: h },
            Layer::Relu,
            Layer::Linear { inputs: h, outputs: 2 },
        ];
        Ok(Self::from_net(Net::new(2, layers, &mut rng)?))
    }

    /// Domain logits (source, target) for a pair of class logits.
    pub fn discriminate(&self, logits: &[f64; 2]) -> [f64; 2] {
        let y = self.net.forward(logits);
        [y[0], y[1]]
    }
}

impl DecoderNet {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.decoder_hidden;
        let layers = vec![
            Layer::Linear { inputs: 2 * arch.feature_dim, outputs: h },
            Layer::Relu,
            Layer::Linear { inputs: h, outputs: arch.input.len() },
        ];
        Ok(Self::from_net(Net::new(2 * arch.feature_dim, layers, &mut rng)?))
    }

    pub fn decode(&self, domain_feature: &[f64], class_feature: &[f64]) -> Result<Vec<f64>> {
        let mut z = domain_feature.to_vec();
        z.extend_from_slice(class_feature);
        self.run(&z)
    }
}

/// Names of the sub-networks in a [`ModelBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    SourceEncoder,
    SourceClassifier,
    TargetEncoder,
    TargetClassifier,
    Indicator,
    Discriminator,
}

impl Part {
    pub const ALL: [Part; 6] = [
        Part::SourceEncoder,
        Part::SourceClassifier,
        Part::TargetEncoder,
        Part::TargetClassifier,
        Part::Indicator,
        Part::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Part::SourceEncoder => "source_encoder",
            Part::SourceClassifier => "source_classifier",
            Part::TargetEncoder => "target_encoder",
            Part::TargetClassifier => "target_classifier",
            Part::Indicator => "indicator",
            Part::Discriminator => "discriminator",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub seed: u64,
    pub source_encoder: EncoderNet,
    pub source_classifier: LabelClassifierNet,
    pub target_encoder: EncoderNet,
    pub target_classifier: LabelClassifierNet,
    pub indicator: DomainIndicatorNet,
    pub discriminator: DiscriminatorNet,
    frozen: BTreeMap<Part, bool>,
}

impl ModelBundle {
    /// Fresh, seeded parameters for every sub-network; nothing frozen.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let s = |name: &str| mix(seed, stream_id(name));
        let source_encoder = EncoderNet::new(&arch, s("source_encoder"))?;
        let source_classifier = LabelClassifierNet::new(&arch, s("source_classifier"))?;
        Ok(Self {
            target_encoder: source_encoder.clone(),
            target_classifier: source_classifier.clone(),
            indicator: DomainIndicatorNet::new(&arch, s("indicator"))?,
            discriminator: DiscriminatorNet::new(&arch, s("discriminator"))?,
            source_encoder,
            source_classifier,
            frozen: Part::ALL.iter().map(|&p| (p, false)).collect(),
            arch,
            seed,
        })
    }

    pub fn net(&self, part: Part) -> &Net {
        match part {
            Part::SourceEncoder => self.source_encoder.net(),
            Part::SourceClassifier => self.source_classifier.net(),
            Part::TargetEncoder => self.target_encoder.net(),
            Part::TargetClassifier => self.target_classifier.net(),
            Part::Indicator => self.indicator.net(),
            Part::Discriminator => self.discriminator.net(),
        }
    }

    fn net_mut(&mut self, part: Part) -> &mut Net {
        match part {
            Part::SourceEncoder => self.source_encoder.net_mut(),
            Part::SourceClassifier => self.source_classifier.net_mut(),
            Part::TargetEncoder => self.target_encoder.net_mut(),
            Part::TargetClassifier => self.target_classifier.net_mut(),
            Part::Indicator => self.indicator.net_mut(),
            Part::Discriminator => self.discriminator.net_mut(),
        }
    }

    /// Mutable parameters of a trainable part; frozen parts are refused.
    pub fn params_mut(&mut self, part: Part) -> Result<&mut [f64]> {
        if self.is_frozen(part) {
            return Err(CdaError::FrozenViolation(part.name().into()));
        }
        Ok(self.net_mut(part).params_mut())
    }

    /// Replaces a sub-network (e.g. a zero gate); frozen parts are refused.
    pub fn replace_net(&mut self, part: Part, net: Net) -> Result<()> {
        if self.is_frozen(part) {
            return Err(CdaError::FrozenViolation(part.name().into()));
        }
        if !self.net(part).same_architecture(&net) {
            return Err(CdaError::Contract(format!("replacement for {} has a different architecture", part.name())));
        }
        *self.net_mut(part) = net;
        Ok(())
    }

    pub fn is_frozen(&self, part: Part) -> bool {
        self.frozen.get(&part).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, part: Part, frozen: bool) {
        self.frozen.insert(part, frozen);
    }

    pub fn hash(&self, part: Part) -> String {
        param_hash(self.net(part).params())
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        Part::ALL.iter().map(|&p| (p.name().to_string(), self.hash(p))).collect()
    }

    /// Digest of the frozen source network (encoder and classifier).
    pub fn source_hash(&self) -> String {
        let mut all = self.source_encoder.params().to_vec();
        all.extend_from_slice(self.source_classifier.params());
        param_hash(&all)
    }

    /// Source-network logits for a data tensor.
    pub fn source_logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.source_classifier.classify(&self.source_encoder.encode(x)?)
    }

    /// Plain target-network logits `L_t(E_t(x))`, no memory path.
    pub fn target_logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.target_classifier.classify(&self.target_encoder.encode(x)?)
    }
}

/// Copies the trained source encoder and classifier into the target network,
/// re-initialises the domain indicator and freezes the source network.
pub fn init_target_from_source(mut bundle: ModelBundle) -> Result<ModelBundle> {
    if !bundle.source_encoder.net().same_architecture(bundle.target_encoder.net())
        || !bundle.source_classifier.net().same_architecture(bundle.target_classifier.net())
    {
        return Err(CdaError::Contract("source and target architectures differ".into()));
    }
    bundle.target_encoder = bundle.source_encoder.clone();
    bundle.target_classifier = bundle.source_classifier.clone();
    bundle.indicator = DomainIndicatorNet::new(&bundle.arch, mix(bundle.seed, stream_id("indicator/init")))?;
    bundle.set_frozen(Part::SourceEncoder, true);
    bundle.set_frozen(Part::SourceClassifier, true);
    for p in [Part::TargetEncoder, Part::TargetClassifier, Part::Indicator, Part::Discriminator] {
        bundle.set_frozen(p, false);
    }
    Ok(bundle)
}

/// JSON header of a parameter pack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: String,
    pub arch: ArchConfig,
    pub feature_dim: usize,
    pub seed: u64,
    pub epoch: usize,
    pub parts: Vec<PartRecord>,
    /// Config hash and upstream artifact digests.
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub name: String,
    pub len: usize,
    pub hash: String,
    pub frozen: bool,
}

impl CheckpointHeader {
    /// Digest of all part hashes; identifies the checkpoint contents.
    pub fn digest(&self) -> String {
        let joined: Vec<&str> = self.parts.iter().map(|p| p.hash.as_str()).collect();
        let mut bytes = Vec::new();
        for h in joined {
            bytes.extend_from_slice(h.as_bytes());
        }
        let mut acc = sha2::Sha256::default();
        sha2::Digest::update(&mut acc, &bytes);
        hex::encode(sha2::Digest::finalize(acc))
    }
}

fn bin_path(json: &Path) -> PathBuf {
    json.with_extension("bin")
}

/// Writes `<stem>.json` and `<stem>.bin` (parameters as f64 little-endian,
/// parts concatenated in header order). Both files go through a temporary
/// name and a rename.
pub fn write_param_pack(json_path: &Path, header: &CheckpointHeader, parts: &[&[f64]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(parts.iter().map(|p| p.len() * 8).sum());
    for p in parts {
        for v in *p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = bin_path(json_path);
    atomic_write(&bin, &bytes)?;
    let text = serde_json::to_vec_pretty(header).map_err(|e| CdaError::Validation(e.to_string()))?;
    atomic_write(json_path, &text)
}

pub fn read_param_pack(json_path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let text = fs::read(json_path).map_err(|e| CdaError::io(json_path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&text).map_err(|e| CdaError::Load {
        path: json_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bin = bin_path(json_path);
    let bytes = fs::read(&bin).map_err(|e| CdaError::io(&bin, e))?;
    let total: usize = header.parts.iter().map(|p| p.len).sum();
    if bytes.len() != total * 8 {
        return Err(CdaError::Load {
            path: bin,
            reason: format!("expected {} bytes, found {}", total * 8, bytes.len()),
        });
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(header.parts.len());
    for part in &header.parts {
        let v: Vec<f64> = values.by_ref().take(part.len).collect();
        if param_hash(&v) != part.hash {
            return Err(CdaError::Load {
                path: json_path.to_path_buf(),
                reason: format!("hash mismatch for part `{}`", part.name),
            });
        }
        out.push(v);
    }
    Ok((header, out))
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| CdaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CdaError::io(path, e))
}

impl ModelBundle {
    pub fn save(&self, json_path: &Path, stage: &str, epoch: usize, lineage: BTreeMap<String, String>) -> Result<CheckpointHeader> {
        let header = CheckpointHeader {
            stage: stage.into(),
            arch: self.arch.clone(),
            feature_dim: self.arch.feature_dim,
            seed: self.seed,
            epoch,
            parts: Part::ALL
                .iter()
                .map(|&p| PartRecord {
                    name: p.name().into(),
                    len: self.net(p).num_params(),
                    hash: self.hash(p),
                    frozen: self.is_frozen(p),
                })
                .collect(),
            lineage,
        };
        let parts: Vec<&[f64]> = Part::ALL.iter().map(|&p| self.net(p).params()).collect();
        write_param_pack(json_path, &header, &parts)?;
        Ok(header)
    }

    pub fn load(json_path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, values) = read_param_pack(json_path)?;
        let mut bundle = ModelBundle::new(header.arch.clone(), header.seed)?;
        for (record, v) in header.parts.iter().zip(values) {
            let part = Part::ALL
                .iter()
                .copied()
                .find(|p| p.name() == record.name)
                .ok_or_else(|| CdaError::Load {
                    path: json_path.to_path_buf(),
                    reason: format!("unknown part `{}`", record.name),
                })?;
            let net = bundle.net_mut(part);
            if net.num_params() != v.len() {
                return Err(CdaError::Load {
                    path: json_path.to_path_buf(),
                    reason: format!("part `{}` has {} parameters, architecture needs {}", record.name, v.len(), net.num_params()),
                });
            }
            net.params_mut().copy_from_slice(&v);
            bundle.set_frozen(part, record.frozen);
        }
        Ok((bundle, header))
    }
}
