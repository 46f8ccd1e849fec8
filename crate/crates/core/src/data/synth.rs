//! Parametric synthetic live/spoof benchmark with a compound target domain.
//!
//! Every sample starts from a [`BaseLatent`] drawn by one shared rule: a face
//! ellipse on a graded background with fine texture. Spoof samples add a
//! moiré grating and a contrast loss whose size scales with
//! `spoof_signature_strength`. The source domain renders latents unchanged;
//! each target sub-domain composes the rendering with its own
//! [`TransformSpec`] (rotation, channel tint, brightness, sensor noise,
//! occlusion). The live/spoof rule is therefore identical in every domain and
//! a domain-invariant classifier exists by construction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::write_png;
use super::manifest::{write_manifest, ManifestRole, SampleManifest};
use super::pack::{write_pack, TensorPack};
use super::sample::{DataShape, Label, Sample, Split};
use crate::error::{CdaError, Result};
use crate::par::{map_indexed, ExecMode};
use crate::seed::{mix, mix3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub name: String,
    #[serde(default)]
    pub rotation_deg: f64,
    /// Per-channel multiplicative gain.
    #[serde(default = "unit_tint")]
    pub tint: [f64; 3],
    /// Additive offset applied after the tint.
    #[serde(default)]
    pub brightness: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Area fraction of a square occluding patch.
    #[serde(default)]
    pub occlusion_fraction: f64,
}

fn unit_tint() -> [f64; 3] {
    [1.0; 3]
}

impl TransformSpec {
    pub fn identity(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            rotation_deg: 0.0,
            tint: unit_tint(),
            brightness: 0.0,
            noise_sigma: 0.0,
            occlusion_fraction: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.tint == unit_tint()
            && self.brightness == 0.0
            && self.noise_sigma == 0.0
            && self.occlusion_fraction == 0.0
    }

    fn same_effect(&self, other: &Self) -> bool {
        self.rotation_deg == other.rotation_deg
            && self.tint == other.tint
            && self.brightness == other.brightness
            && self.noise_sigma == other.noise_sigma
            && self.occlusion_fraction == other.occlusion_fraction
    }
}

fn default_image_size() -> usize {
    32
}
fn default_strength() -> f64 {
    1.0
}
fn default_ratio() -> f64 {
    1.0
}
fn default_source_train() -> usize {
    800
}
fn default_source_val() -> usize {
    200
}
fn default_test_fraction() -> f64 {
    1.0 / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_subdomains: usize,
    pub samples_per_subdomain: usize,
    pub base_seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub transform_menu: Vec<TransformSpec>,
    #[serde(default = "default_strength")]
    pub spoof_signature_strength: f64,
    /// Expected live:spoof ratio.
    #[serde(default = "default_ratio")]
    pub live_spoof_ratio: f64,
    #[serde(default = "default_source_train")]
    pub source_train: usize,
    #[serde(default = "default_source_val")]
    pub source_val: usize,
    /// Fraction of each sub-domain held out as target test data.
    #[serde(default = "default_test_fraction")]
    pub target_test_fraction: f64,
    /// When set, generate `flat_dim`-dimensional vectors instead of images.
    #[serde(default)]
    pub flat_dim: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_subdomains: 4,
            samples_per_subdomain: 300,
            base_seed: 7,
            image_size: default_image_size(),
            transform_menu: default_transform_menu(),
            spoof_signature_strength: 1.0,
            live_spoof_ratio: 1.0,
            source_train: default_source_train(),
            source_val: default_source_val(),
            target_test_fraction: default_test_fraction(),
            flat_dim: None,
        }
    }
}

/// Four photometric and geometric shifts: warm light, a dim noisy sensor,
/// a rotated cool scene and an overexposed capture.
pub fn default_transform_menu() -> Vec<TransformSpec> {
    vec![
        TransformSpec {
            name: "warm".into(),
            tint: [1.4, 1.0, 0.55],
            brightness: 0.05,
            ..TransformSpec::identity("")
        },
        TransformSpec {
            name: "dim".into(),
            tint: [0.45, 0.45, 0.45],
            noise_sigma: 0.02,
            ..TransformSpec::identity("")
        },
        TransformSpec {
            name: "cool-rotated".into(),
            rotation_deg: 30.0,
            tint: [0.75, 0.95, 1.4],
            ..TransformSpec::identity("")
        },
        TransformSpec {
            name: "bright".into(),
            tint: [1.3, 1.3, 1.3],
            brightness: 0.25,
            ..TransformSpec::identity("")
        },
    ]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CdaError::Spec(m));
        if self.num_subdomains < 1 {
            return err("num_subdomains must be >= 1".into());
        }
        if self.transform_menu.is_empty() {
            return err("transform_menu must not be empty".into());
        }
        if self.transform_menu.len() < self.num_subdomains {
            return err(format!(
                "transform_menu has {} entries but num_subdomains is {}",
                self.transform_menu.len(),
                self.num_subdomains
            ));
        }
        let menu = &self.transform_menu[..self.num_subdomains];
        for (i, a) in menu.iter().enumerate() {
            for b in &menu[i + 1..] {
                if a.same_effect(b) {
                    return err(format!("sub-domain transforms `{}` and `{}` are identical", a.name, b.name));
                }
                if a.name == b.name {
                    return err(format!("duplicate sub-domain name `{}`", a.name));
                }
            }
            if !(0.0..1.0).contains(&a.occlusion_fraction) || a.noise_sigma < 0.0 {
                return err(format!("transform `{}` has out-of-range parameters", a.name));
            }
        }
        if !(self.spoof_signature_strength > 0.0 && self.spoof_signature_strength <= 1.0) {
            return err("spoof_signature_strength must lie in (0, 1]".into());
        }
        if !(self.live_spoof_ratio > 0.0 && self.live_spoof_ratio.is_finite()) {
            return err("live_spoof_ratio must be positive".into());
        }
        if self.samples_per_subdomain == 0 || self.source_train == 0 {
            return err("sample counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.target_test_fraction) {
            return err("target_test_fraction must lie in [0, 1)".into());
        }
        if self.flat_dim.is_none() && self.image_size < 8 {
            return err("image_size must be at least 8".into());
        }
        if self.flat_dim == Some(0) {
            return err("flat_dim must be positive".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> DataShape {
        match self.flat_dim {
            Some(dim) => DataShape::Flat { dim },
            None => DataShape::Image {
                height: self.image_size,
                width: self.image_size,
                channels: 3,
            },
        }
    }

    fn p_live(&self) -> f64 {
        self.live_spoof_ratio / (1.0 + self.live_spoof_ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grating {
    pub amplitude: f64,
    /// Cycles per pixel.
    pub frequency: f64,
    pub angle: f64,
    pub phase: f64,
}

/// Generative parameters of one sample before any domain transform.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLatent {
    pub label: Label,
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub gradient: (f64, f64),
    /// Spoof-only print/replay artefacts.
    pub grating: Option<Grating>,
    pub contrast: f64,
    pub texture_seed: u64,
}

/// Draws a latent; the same rule serves every domain.
pub fn sample_latent<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> BaseLatent {
    let label = if rng.gen::<f64>() < spec.p_live() {
        Label::Live
    } else {
        Label::Spoof
    };
    let s = spec.spoof_signature_strength;
    let rx = rng.gen_range(0.2..0.3);
    let center = (rng.gen_range(0.38..0.62), rng.gen_range(0.38..0.62));
    let radii = (rx, rx * rng.gen_range(1.1..1.3));
    let skin = [
        0.75 + rng.gen_range(-0.1..0.1),
        0.55 + rng.gen_range(-0.1..0.1),
        0.45 + rng.gen_range(-0.1..0.1),
    ];
    let bg = rng.gen_range(0.15..0.45);
    let background = [
        bg + rng.gen_range(-0.05..0.05),
        bg + rng.gen_range(-0.05..0.05),
        bg + rng.gen_range(-0.05..0.05),
    ];
    let gradient = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let grating_draw = Grating {
        amplitude: 0.10 * s * rng.gen_range(0.8..1.2),
        frequency: rng.gen_range(0.3..0.45),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let texture_seed = rng.gen();
    let (grating, contrast) = match label {
        Label::Live => (None, 1.0),
        Label::Spoof => (Some(grating_draw), 1.0 - 0.2 * s),
    };
    BaseLatent {
        label,
        center,
        radii,
        skin,
        background,
        gradient,
        grating,
        contrast,
        texture_seed,
    }
}

/// Renders a latent to a `size x size x 3` HWC image (unclamped).
pub fn render_base(latent: &BaseLatent, size: usize) -> Vec<f64> {
    let mut tex = ChaCha8Rng::seed_from_u64(latent.texture_seed);
    let n = size as f64;
    let mut img = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let du = (u - latent.center.0) / latent.radii.0;
            let dv = (v - latent.center.1) / latent.radii.1;
            let r2 = du * du + dv * dv;
            // Soft face edge over roughly one pixel.
            let face = ((1.0 - r2.sqrt()) * n * latent.radii.0 + 0.5).clamp(0.0, 1.0);
            let shade = latent.gradient.0 * (u - 0.5) + latent.gradient.1 * (v - 0.5);
            for c in 0..3 {
                let base = face * latent.skin[c] * (1.0 - 0.25 * r2.min(1.0)) + (1.0 - face) * latent.background[c];
                img[(y * size + x) * 3 + c] = base + shade + tex.gen_range(-0.03..0.03);
            }
        }
    }
    if latent.contrast != 1.0 {
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        img.iter_mut().for_each(|v| *v = mean + (*v - mean) * latent.contrast);
    }
    if let Some(g) = latent.grating {
        let (ca, sa) = (g.angle.cos(), g.angle.sin());
        for y in 0..size {
            for x in 0..size {
                let t = std::f64::consts::TAU * g.frequency * (x as f64 * ca + y as f64 * sa) + g.phase;
                let a = g.amplitude * t.sin();
                for c in 0..3 {
                    img[(y * size + x) * 3 + c] += a;
                }
            }
        }
    }
    img
}

/// Applies a sub-domain transform to an HWC image.
pub fn apply_transform<R: Rng>(img: &[f64], size: usize, t: &TransformSpec, rng: &mut R) -> Vec<f64> {
    let mut out = if t.rotation_deg != 0.0 {
        rotate(img, size, t.rotation_deg)
    } else {
        img.to_vec()
    };
    for px in out.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * t.tint[c] + t.brightness;
        }
    }
    if t.occlusion_fraction > 0.0 {
        let side = ((t.occlusion_fraction.sqrt() * size as f64).round() as usize).clamp(1, size);
        let x0 = rng.gen_range(0..=size - side);
        let y0 = rng.gen_range(0..=size - side);
        let fill = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                out[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&fill);
            }
        }
    }
    if t.noise_sigma > 0.0 {
        for v in &mut out {
            *v += t.noise_sigma * gaussian(rng);
        }
    }
    out
}

/// Inverts the tint and brightness of a transform (exact for transforms with
/// no rotation, occlusion or noise).
pub fn invert_tint(img: &[f64], t: &TransformSpec) -> Vec<f64> {
    let mut out = img.to_vec();
    for px in out.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - t.brightness) / t.tint[c];
        }
    }
    out
}

fn rotate(img: &[f64], size: usize, deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    let mid = (size as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize, ch: usize| {
        let xi = x.clamp(0, size as isize - 1) as usize;
        let yi = y.clamp(0, size as isize - 1) as usize;
        img[(yi * size + xi) * 3 + ch]
    };
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - mid, y as f64 - mid);
            let sx = c * dx + s * dy + mid;
            let sy = -s * dx + c * dy + mid;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            let (ix, iy) = (fx as isize, fy as isize);
            for ch in 0..3 {
                out[(y * size + x) * 3 + ch] = (1.0 - ay) * ((1.0 - ax) * at(ix, iy, ch) + ax * at(ix + 1, iy, ch))
                    + ay * ((1.0 - ax) * at(ix, iy + 1, ch) + ax * at(ix + 1, iy + 1, ch));
            }
        }
    }
    out
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps streams simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Flat-vector analogue: the class shifts the mean along a fixed direction,
/// and transforms act as per-dimension gain/offset, a rotation in the first
/// two coordinates, extra noise and zeroed (occluded) coordinates.
fn flat_direction(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xF1A7));
    let v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn render_flat(latent: &BaseLatent, direction: &[f64], strength: f64) -> Vec<f64> {
    let mut tex = ChaCha8Rng::seed_from_u64(latent.texture_seed);
    let sign = if latent.label == Label::Live { 1.0 } else { -1.0 };
    direction
        .iter()
        .map(|d| 2.0 * strength * sign * d + 0.5 * gaussian(&mut tex))
        .collect()
}

fn transform_flat<R: Rng>(v: &[f64], t: &TransformSpec, rng: &mut R) -> Vec<f64> {
    let mut out = v.to_vec();
    if t.rotation_deg != 0.0 && out.len() >= 2 {
        let (s, c) = t.rotation_deg.to_radians().sin_cos();
        let (a, b) = (out[0], out[1]);
        out[0] = c * a - s * b;
        out[1] = s * a + c * b;
    }
    for (i, x) in out.iter_mut().enumerate() {
        *x = *x * t.tint[i % 3] + t.brightness;
    }
    if t.occlusion_fraction > 0.0 {
        let k = ((t.occlusion_fraction * out.len() as f64).round() as usize).min(out.len());
        let mut idx: Vec<usize> = (0..out.len()).collect();
        idx.shuffle(rng);
        for &i in &idx[..k] {
            out[i] = 0.0;
        }
    }
    if t.noise_sigma > 0.0 {
        for x in &mut out {
            *x += t.noise_sigma * gaussian(rng);
        }
    }
    out
}

struct Generated {
    data: Vec<f32>,
    label: Label,
}

fn generate_one(spec: &SyntheticSpec, domain: u64, index: u64, transform: Option<&TransformSpec>) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(mix3(spec.base_seed, domain, index));
    let latent = sample_latent(spec, &mut rng);
    let data = match spec.flat_dim {
        Some(dim) => {
            let dir = flat_direction(spec.base_seed, dim);
            let base = render_flat(&latent, &dir, spec.spoof_signature_strength);
            let v = match transform {
                Some(t) if !t.is_identity() => transform_flat(&base, t, &mut rng),
                _ => base,
            };
            v.into_iter().map(|x| x as f32).collect()
        }
        None => {
            let base = render_base(&latent, spec.image_size);
            let img = match transform {
                Some(t) if !t.is_identity() => apply_transform(&base, spec.image_size, t, &mut rng),
                _ => base,
            };
            // Quantised to 8 bits so a PNG round trip is lossless.
            img.into_iter()
                .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
                .collect()
        }
    };
    Generated {
        data,
        label: latent.label,
    }
}

/// Builds the labelled source manifest and the compound target manifest.
/// Target labels and sub-domain tags end up in the sealed section only.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(SampleManifest, SampleManifest)> {
    generate_synthetic_with(spec, ExecMode::default())
}

pub fn generate_synthetic_with(spec: &SyntheticSpec, mode: ExecMode) -> Result<(SampleManifest, SampleManifest)> {
    spec.validate()?;
    let shape = spec.shape();

    let n_src = spec.source_train + spec.source_val;
    let src = map_indexed(mode, n_src, |i| generate_one(spec, 0, i as u64, None));
    let mut samples = Vec::with_capacity(n_src);
    let mut labels = Vec::with_capacity(n_src);
    for (i, g) in src.into_iter().enumerate() {
        samples.push(Sample {
            id: format!("src-{i:05}"),
            data: g.data,
            split: if i < spec.source_train { Split::Train } else { Split::Val },
            domain_tag: Some("source".into()),
        });
        labels.push(Some(g.label));
    }
    let source = SampleManifest::from_parts(
        ManifestRole::Source,
        shape,
        samples,
        labels,
        vec![None; n_src],
        Some(1),
    )?;

    let per = spec.samples_per_subdomain;
    let n_test = (per as f64 * spec.target_test_fraction).round() as usize;
    let n_train = per - n_test;
    let menu = &spec.transform_menu[..spec.num_subdomains];
    let total = per * spec.num_subdomains;
    let tgt = map_indexed(mode, total, |k| {
        let (u, i) = (k / per, k % per);
        generate_one(spec, 1 + u as u64, i as u64, Some(&menu[u]))
    });
    // Shuffle so that file position carries no sub-domain information.
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(spec.base_seed, 0x5EA1)));
    let mut tgt: Vec<Option<Generated>> = tgt.into_iter().map(Some).collect();
    let mut samples = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut subdomains = Vec::with_capacity(total);
    for (pos, &k) in order.iter().enumerate() {
        let g = tgt[k].take().expect("each index used once");
        let (u, i) = (k / per, k % per);
        samples.push(Sample {
            id: format!("tgt-{pos:05}"),
            data: g.data,
            split: if i < n_train { Split::Train } else { Split::Test },
            domain_tag: Some("target".into()),
        });
        labels.push(Some(g.label));
        subdomains.push(Some(menu[u].name.clone()));
    }
    let target = SampleManifest::from_parts(
        ManifestRole::CompoundTarget,
        shape,
        samples,
        labels,
        subdomains,
        Some(spec.num_subdomains),
    )?;
    Ok((source, target))
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub source_samples: usize,
    pub target_samples: usize,
    pub num_subdomains: usize,
    pub shape: DataShape,
}

/// Writes both manifests plus their data (PNG files, or one tensor pack per
/// manifest in flat-vector mode) under `out_dir`.
pub fn write_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthSummary> {
    let (source, target) = generate_synthetic(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| crate::error::CdaError::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (name, m) in [("source", &source), ("target", &target)] {
        let refs = match m.shape() {
            DataShape::Flat { dim } => {
                let file = format!("{name}.cdav");
                let pack = TensorPack {
                    dims: vec![m.len(), dim],
                    data: m.samples().iter().flat_map(|s| s.data.iter().copied()).collect(),
                };
                write_pack(&out_dir.join(&file), &pack)?;
                (0..m.len()).map(|i| format!("{file}#{i}")).collect::<Vec<_>>()
            }
            shape @ DataShape::Image { .. } => {
                let dir = out_dir.join(name);
                fs::create_dir_all(&dir).map_err(|e| CdaError::io(&dir, e))?;
                let mut refs = Vec::with_capacity(m.len());
                for s in m.samples() {
                    let rel = format!("{name}/{}.png", s.id);
                    write_png(&out_dir.join(&rel), &s.data, shape)?;
                    refs.push(rel);
                }
                refs
            }
        };
        let csv = out_dir.join(format!("{name}.csv"));
        write_manifest(m, &csv, &refs)?;
        paths.push(csv);
    }
    Ok(SynthSummary {
        source_manifest: paths[0].clone(),
        target_manifest: paths[1].clone(),
        source_samples: source.len(),
        target_samples: target.len(),
        num_subdomains: spec.num_subdomains,
        shape: source.shape(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(u: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_subdomains: u,
            samples_per_subdomain: 12,
            source_train: 20,
            source_val: 4,
            image_size: 12,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small(0);
        assert!(matches!(s.validate(), Err(CdaError::Spec(_))));
        s = small(2);
        s.transform_menu.clear();
        assert!(s.validate().is_err());
        s = small(2);
        s.transform_menu[1] = TransformSpec { name: "other".into(), ..s.transform_menu[0].clone() };
        assert!(s.validate().is_err());
        s = small(2);
        s.spoof_signature_strength = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic_and_order_independent_of_exec_mode() {
        let spec = small(3);
        let (s1, t1) = generate_synthetic_with(&spec, ExecMode::Sequential).unwrap();
        let (s2, t2) = generate_synthetic_with(&spec, ExecMode::Parallel).unwrap();
        assert_eq!(s1.content_hash(), s2.content_hash());
        assert_eq!(t1.content_hash(), t2.content_hash());
    }

    #[test]
    fn splits_and_sealing() {
        let spec = small(3);
        let (s, t) = generate_synthetic(&spec).unwrap();
        assert_eq!(s.indices_for(Split::Train).len(), 20);
        assert_eq!(t.indices_for(Split::Test).len(), 3 * 4);
        assert_eq!(t.indices_for(Split::Train).len(), 3 * 8);
        let ev = t.evaluation_labels();
        for i in 0..t.len() {
            assert!(t.label(i).is_err());
            assert!(ev.label(i).is_some());
            assert!(ev.subdomain(i).is_some());
        }
    }

    #[test]
    fn identity_target_matches_source_rule() {
        let mut spec = small(1);
        spec.transform_menu = vec![TransformSpec::identity("same")];
        // Same latent stream index and identity transform: the renderer is
        // shared, so only the domain-keyed seed differs.
        let g_src = generate_one(&spec, 0, 3, None);
        let g_tgt = generate_one(&spec, 0, 3, Some(&spec.transform_menu[0]));
        assert_eq!(g_src.data, g_tgt.data);
    }

    #[test]
    fn tint_is_invertible() {
        let spec = small(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latent = sample_latent(&spec, &mut rng);
        let base = render_base(&latent, 12);
        let t = TransformSpec { name: "t".into(), tint: [1.3, 0.7, 0.9], brightness: 0.1, ..TransformSpec::identity("") };
        let back = invert_tint(&apply_transform(&base, 12, &t, &mut rng), &t);
        for (a, b) in base.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spoof_rule_is_domain_independent() {
        // The latent (and hence the label rule) depends only on the stream
        // seed, never on which transform is applied afterwards.
        let spec = small(4);
        for i in 0..50u64 {
            let mut a = ChaCha8Rng::seed_from_u64(mix3(spec.base_seed, 2, i));
            let mut b = ChaCha8Rng::seed_from_u64(mix3(spec.base_seed, 2, i));
            let la = sample_latent(&spec, &mut a);
            let lb = sample_latent(&spec, &mut b);
            assert_eq!(la, lb);
            assert_eq!(la.grating.is_some(), la.label == Label::Spoof);
            assert_eq!(la.contrast < 1.0, la.label == Label::Spoof);
        }
    }

    #[test]
    fn flat_mode_shapes() {
        let spec = SyntheticSpec { flat_dim: Some(6), ..small(2) };
        let (s, t) = generate_synthetic(&spec).unwrap();
        assert_eq!(s.shape(), DataShape::Flat { dim: 6 });
        assert_eq!(t.sample(0).data.len(), 6);
    }
}
