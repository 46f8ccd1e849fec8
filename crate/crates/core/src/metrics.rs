//! Scoring and the anti-spoofing error metrics.
//!
//! Live is the positive class. A sample is accepted as live iff its score
//! is at least the threshold; FAR is the fraction of spoofs accepted and
//! FRR the fraction of lives rejected.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Label, SampleManifest, Split};
use crate::error::{CdaError, Result};
use crate::memory::{target_forward, MemoryModule};
use crate::networks::{atomic_write, EncoderNet, ModelBundle};
use crate::nn::loss::softmax2;
use crate::par::{map_indexed, ExecMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: Option<Label>,
    pub subdomain: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub samples: Vec<ScoredSample>,
}

impl ScoreSet {
    pub fn from_parts(scores: &[f64], labels: &[Label]) -> Self {
        Self {
            samples: scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoredSample {
                    id: format!("s{i:05}"),
                    score,
                    label: Some(label),
                    subdomain: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(score, label)` pairs; fails if any label is unknown or a score is
    /// not finite.
    pub fn labelled(&self) -> Result<Vec<(f64, Label)>> {
        self.samples
            .iter()
            .map(|s| match s.label {
                Some(l) if s.score.is_finite() => Ok((s.score, l)),
                Some(_) => Err(CdaError::Metric(format!("non-finite score for `{}`", s.id))),
                None => Err(CdaError::Metric(format!("no evaluation label for `{}`", s.id))),
            })
            .collect()
    }
}

/// Which network produces the score when no memory module is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringNet {
    Source,
    Target,
}

/// Live-probability of every sample of `split`. With a memory module the
/// score comes from the memory-enhanced target logits; otherwise from the
/// plain `which` network. Labels come from the evaluation-side accessor.
pub fn score_model(
    bundle: &ModelBundle,
    memory: Option<&MemoryModule>,
    which: ScoringNet,
    manifest: &SampleManifest,
    split: Split,
    batch_size: usize,
    mode: ExecMode,
) -> Result<ScoreSet> {
    if batch_size == 0 {
        return Err(CdaError::Validation("evaluation batch size must be positive".into()));
    }
    if memory.is_some() && which == ScoringNet::Source {
        return Err(CdaError::Contract("the memory path belongs to the target network".into()));
    }
    let idx = manifest.indices_for(split);
    let eval = manifest.evaluation_labels();
    let mut samples = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size) {
        let logits = map_indexed(mode, chunk.len(), |k| {
            let x = manifest.sample(chunk[k]).input();
            match (memory, which) {
                (Some(m), _) => Ok(target_forward(bundle, Some(m), &x).y_final),
                (None, ScoringNet::Source) => bundle.source_logits(&x),
                (None, ScoringNet::Target) => bundle.target_logits(&x),
            }
        });
        for (&i, y) in chunk.iter().zip(logits) {
            let y = y?;
            samples.push(ScoredSample {
                id: manifest.sample(i).id.clone(),
                score: softmax2(&y)[Label::Live.index()],
                label: eval.label(i),
                subdomain: eval.subdomain(i).map(str::to_string),
            });
        }
    }
    Ok(ScoreSet { samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub false_accepts: usize,
    pub false_rejects: usize,
    pub spoofs: usize,
    pub lives: usize,
}

fn counts(pairs: &[(f64, Label)]) -> (usize, usize) {
    let lives = pairs.iter().filter(|p| p.1 == Label::Live).count();
    (lives, pairs.len() - lives)
}

/// FAR, FRR and their mean at `threshold`.
pub fn compute_hter(scores: &ScoreSet, threshold: f64) -> Result<ErrorRates> {
    rates(&scores.labelled()?, threshold)
}

fn rates(pairs: &[(f64, Label)], threshold: f64) -> Result<ErrorRates> {
    let (lives, spoofs) = counts(pairs);
    if lives == 0 || spoofs == 0 {
        return Err(CdaError::Metric(format!(
            "error rates need both classes (live {lives}, spoof {spoofs})"
        )));
    }
    let false_accepts = pairs.iter().filter(|(s, l)| *l == Label::Spoof && *s >= threshold).count();
    let false_rejects = pairs.iter().filter(|(s, l)| *l == Label::Live && *s < threshold).count();
    let far = false_accepts as f64 / spoofs as f64;
    let frr = false_rejects as f64 / lives as f64;
    Ok(ErrorRates {
        threshold,
        far,
        frr,
        hter: (far + frr) / 2.0,
        false_accepts,
        false_rejects,
        spoofs,
        lives,
    })
}

fn unique_sorted(pairs: &[(f64, Label)]) -> Vec<f64> {
    let mut s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

/// Threshold minimising `|FAR - FRR|` over the midpoints between adjacent
/// distinct scores; ties go to the smallest threshold. With a single
/// distinct score that score is the only candidate.
pub fn find_eer_threshold(scores: &ScoreSet) -> Result<f64> {
    let pairs = scores.labelled()?;
    let uniq = unique_sorted(&pairs);
    let candidates: Vec<f64> = if uniq.len() < 2 {
        uniq.clone()
    } else {
        uniq.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
    };
    let mut best: Option<(f64, f64)> = None;
    for t in candidates {
        let r = rates(&pairs, t)?;
        let gap = (r.far - r.frr).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    best.map(|b| b.1).ok_or_else(|| CdaError::Metric("no scores".into()))
}

/// Probability that a random live sample outscores a random spoof, ties
/// counting one half. Returned as a fraction in [0, 1].
pub fn compute_auc(scores: &ScoreSet) -> Result<f64> {
    let pairs = scores.labelled()?;
    let (lives, spoofs) = counts(&pairs);
    if lives == 0 || spoofs == 0 {
        return Err(CdaError::Metric("AUC needs both classes".into()));
    }
    // Mid-ranks over the pooled scores.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));
    let mut ranks = vec![0.0; pairs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let live_rank_sum: f64 = pairs.iter().zip(&ranks).filter(|(p, _)| p.1 == Label::Live).map(|(_, r)| r).sum();
    let (nl, ns) = (lives as f64, spoofs as f64);
    Ok((live_rank_sum - nl * (nl + 1.0) / 2.0) / (nl * ns))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// One point per distinct score, used as threshold, in descending order.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    let pairs = scores.labelled()?;
    let mut uniq = unique_sorted(&pairs);
    uniq.reverse();
    uniq.into_iter()
        .map(|t| {
            let r = rates(&pairs, t)?;
            Ok(RocPoint {
                far: r.far,
                tpr: 1.0 - r.frr,
                threshold: t,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdomainErrors {
    pub count: usize,
    pub errors: usize,
    pub error_pct: f64,
}

/// Misclassification counts per hidden subdomain at `threshold`. The
/// per-tag error counts sum to `false_accepts + false_rejects` of the
/// whole set.
pub fn per_subdomain_errors(scores: &ScoreSet, threshold: f64) -> Result<BTreeMap<String, SubdomainErrors>> {
    let mut out: BTreeMap<String, SubdomainErrors> = BTreeMap::new();
    for s in &scores.samples {
        let label = s.label.ok_or_else(|| CdaError::Metric(format!("no evaluation label for `{}`", s.id)))?;
        let tag = s.subdomain.clone().unwrap_or_else(|| "unknown".into());
        let wrong = match label {
            Label::Live => s.score < threshold,
            Label::Spoof => s.score >= threshold,
        };
        let e = out.entry(tag).or_insert(SubdomainErrors {
            count: 0,
            errors: 0,
            error_pct: 0.0,
        });
        e.count += 1;
        e.errors += usize::from(wrong);
    }
    for e in out.values_mut() {
        e.error_pct = 100.0 * e.errors as f64 / e.count as f64;
    }
    Ok(out)
}

/// Metrics of one scored model. Rates are fractions; the printed table and
/// CSV files show percentages with two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer_threshold: f64,
    pub at_eer: ErrorRates,
    pub at_half: ErrorRates,
    pub auc: f64,
    pub per_subdomain: BTreeMap<String, SubdomainErrors>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_scores(scores: &ScoreSet, metadata: BTreeMap<String, String>) -> Result<Self> {
        let eer_threshold = find_eer_threshold(scores)?;
        Ok(Self {
            eer_threshold,
            at_eer: compute_hter(scores, eer_threshold)?,
            at_half: compute_hter(scores, 0.5)?,
            auc: compute_auc(scores)?,
            per_subdomain: per_subdomain_errors(scores, eer_threshold)?,
            metadata,
        })
    }

    /// `HTER | AUC` row with two-decimal percentages.
    pub fn summary_line(&self) -> String {
        format!(
            "HTER@EER {:6.2}%  HTER@0.5 {:6.2}%  AUC {:6.2}%",
            100.0 * self.at_eer.hter,
            100.0 * self.at_half.hter,
            100.0 * self.auc
        )
    }
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>, path: &Path) -> Result<Vec<u8>> {
    let err = |e: csv::Error| CdaError::Load {
        path: path.into(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CdaError::Validation(e.to_string()))
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    let rows = points.iter().map(|p| vec![format!("{:.6}", p.far), format!("{:.6}", p.tpr), format!("{:.9}", p.threshold)]);
    atomic_write(path, &csv_bytes(&["far", "tpr", "threshold"], rows, path)?)
}

pub fn write_subdomain_csv(rows: &BTreeMap<String, SubdomainErrors>, path: &Path) -> Result<()> {
    let rows = rows.iter().map(|(tag, e)| vec![tag.clone(), e.count.to_string(), format!("{:.2}", e.error_pct)]);
    atomic_write(path, &csv_bytes(&["tag", "count", "error_pct"], rows, path)?)
}

/// Projection onto the two leading principal components. Each component's
/// sign is fixed so that its largest-magnitude loading is positive.
pub fn pca_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 3 {
        return Err(CdaError::Validation(format!("embedding export needs at least 3 samples, got {n}")));
    }
    let d = features[0].len();
    if d < 2 || features.iter().any(|f| f.len() != d) {
        return Err(CdaError::Validation("features must share a dimension of at least 2".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for &k in &order[..2] {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            [row.dot(&axes[0].transpose()), row.dot(&axes[1].transpose())]
        })
        .collect())
}

/// Encodes `split` with `encoder`, projects to 2-D and writes
/// `id,x,y,label,domain`. Label and domain come from the evaluation side
/// and may be empty.
pub fn export_embeddings(encoder: &EncoderNet, manifest: &SampleManifest, split: Option<Split>, path: &Path, mode: ExecMode) -> Result<usize> {
    let idx: Vec<usize> = match split {
        Some(s) => manifest.indices_for(s),
        None => (0..manifest.len()).collect(),
    };
    let feats = map_indexed(mode, idx.len(), |k| encoder.net().forward(&manifest.sample(idx[k]).input()));
    let xy = pca_2d(&feats)?;
    let eval = manifest.evaluation_labels();
    let rows = idx.iter().zip(&xy).map(|(&i, p)| {
        let s = manifest.sample(i);
        let domain = eval.subdomain(i).map(str::to_string).or_else(|| s.domain_tag.clone()).unwrap_or_default();
        vec![
            s.id.clone(),
            format!("{:.6}", p[0]),
            format!("{:.6}", p[1]),
            eval.label(i).map(|l| l.as_str().to_string()).unwrap_or_default(),
            domain,
        ]
    });
    atomic_write(path, &csv_bytes(&["id", "x", "y", "label", "domain"], rows, path)?)?;
    Ok(idx.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Live, Spoof};

    #[test]
    fn hter_example() {
        let s = ScoreSet::from_parts(&[0.9, 0.8, 0.3, 0.6], &[Live, Live, Spoof, Spoof]);
        let r = compute_hter(&s, 0.5).unwrap();
        assert_eq!((r.far, r.frr, r.hter), (0.5, 0.0, 0.25));
    }

    #[test]
    fn perfect_separation() {
        let s = ScoreSet::from_parts(&[0.9, 0.8, 0.2, 0.1], &[Live, Live, Spoof, Spoof]);
        let t = find_eer_threshold(&s).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(compute_hter(&s, t).unwrap().hter, 0.0);
        assert_eq!(compute_auc(&s).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half_auc() {
        let s = ScoreSet::from_parts(&[0.4; 6], &[Live, Spoof, Live, Spoof, Live, Spoof]);
        assert_eq!(compute_auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = ScoreSet::from_parts(&[0.4, 0.6], &[Live, Live]);
        assert!(matches!(compute_hter(&s, 0.5), Err(CdaError::Metric(_))));
        assert!(compute_auc(&s).is_err());
    }

    #[test]
    fn roc_has_one_point_per_unique_score() {
        let s = ScoreSet::from_parts(&[0.9, 0.9, 0.3, 0.6], &[Live, Live, Spoof, Spoof]);
        let roc = roc_points(&s).unwrap();
        assert_eq!(roc.len(), 3);
        assert_eq!((roc[0].far, roc[0].tpr), (0.0, 1.0));
        assert_eq!((roc[2].far, roc[2].tpr), (1.0, 1.0));
    }

    #[test]
    fn subdomain_errors_sum_to_total() {
        let mut s = ScoreSet::from_parts(&[0.9, 0.2, 0.7, 0.6, 0.1], &[Live, Live, Spoof, Spoof, Spoof]);
        for (i, smp) in s.samples.iter_mut().enumerate() {
            smp.subdomain = Some(format!("d{}", i % 2));
        }
        let per = per_subdomain_errors(&s, 0.5).unwrap();
        let r = compute_hter(&s, 0.5).unwrap();
        assert_eq!(per.values().map(|e| e.errors).sum::<usize>(), r.false_accepts + r.false_rejects);
    }

    #[test]
    fn pca_of_planar_data_preserves_distances() {
        let pts = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, -1.0], vec![2.0, 2.0]];
        let y = pca_2d(&pts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                let d1 = ((y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        assert!(pca_2d(&pts[..2]).is_err());
    }
}
