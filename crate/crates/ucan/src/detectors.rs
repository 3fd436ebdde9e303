//! Feature-space adversarial detectors and their shared plumbing.
//!
//! All detectors consume per-layer feature vectors from one of three
//! sources so raw-tap and refined-embedding variants are directly
//! comparable. Scores are calibrated so that higher means more adversarial.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arcface::{aux_forward, cosine_scores, AuxBlock};
use crate::backbone::BackboneModel;
use crate::error::{Result, UcanError};
use crate::svm::{OneVsRestSvm, SvmConfig};
use crate::tensor::Tensor;

/// Where per-layer features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Flattened backbone taps, untouched.
    RawTaps,
    /// Unit-norm refined embeddings from the aux blocks.
    UcanEmbedding,
    /// Cosine scores against the aux class centers.
    UcanLogits,
}

impl FeatureSource {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureSource::RawTaps => "raw",
            FeatureSource::UcanEmbedding => "ucan_embedding",
            FeatureSource::UcanLogits => "ucan_logits",
        }
    }
}

/// Per-layer feature vectors for one input, restricted to the selected
/// 1-based tap indices.
pub fn extract_features(
    model: &BackboneModel,
    blocks: Option<&[AuxBlock]>,
    selected: &[usize],
    source: FeatureSource,
    x: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    if selected.is_empty() {
        return Err(UcanError::Contract("no layers selected".into()));
    }
    let (_, taps) = model.forward_with_taps(x)?;
    selected
        .iter()
        .map(|&k| {
            let tap = taps
                .get(k.wrapping_sub(1))
                .ok_or_else(|| UcanError::Index(format!("tap {k} out of range")))?;
            match source {
                FeatureSource::RawTaps => Ok(tap.data.clone()),
                FeatureSource::UcanEmbedding | FeatureSource::UcanLogits => {
                    let blocks = blocks
                        .ok_or_else(|| UcanError::Contract("refined features need aux blocks".into()))?;
                    let block = blocks
                        .iter()
                        .find(|b| b.layer_index == k)
                        .ok_or_else(|| UcanError::Index(format!("no aux block for tap {k}")))?;
                    let p = aux_forward(block, tap)?;
                    if source == FeatureSource::UcanEmbedding {
                        Ok(p.data)
                    } else {
                        Ok(cosine_scores(block, &p)?.data)
                    }
                }
            }
        })
        .collect()
}

/// Extracts features for a whole dataset (sample-major, then layer-major).
pub fn extract_dataset(
    model: &BackboneModel,
    blocks: Option<&[AuxBlock]>,
    selected: &[usize],
    source: FeatureSource,
    samples: &[Tensor],
) -> Result<Vec<Vec<Vec<f64>>>> {
    samples
        .iter()
        .map(|x| extract_features(model, blocks, selected, source, x))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// --- deep k-nearest-neighbor detector ---------------------------------------

/// Conformal deep k-NN detector. Nonconformity of (x, j) is the total count,
/// over layers, of the k nearest training neighbors whose label differs
/// from j. P-values come from a calibration set scored with true labels.
#[derive(Debug, Clone)]
pub struct DknnDetector {
    /// layer-major training features
    pub train: Vec<Vec<Vec<f64>>>,
    pub train_labels: Vec<usize>,
    pub calib_scores: Vec<usize>,
    pub class_count: usize,
    pub k: usize,
}

pub fn dknn_build(
    train_feats: &[Vec<Vec<f64>>],
    train_labels: &[usize],
    calib_feats: &[Vec<Vec<f64>>],
    calib_labels: &[usize],
    class_count: usize,
    k: usize,
) -> Result<DknnDetector> {
    if k == 0 {
        return Err(UcanError::Config("k must be >= 1".into()));
    }
    if train_feats.is_empty() || train_feats.len() != train_labels.len() {
        return Err(UcanError::Data("dknn needs matching train features/labels".into()));
    }
    if calib_feats.is_empty() || calib_feats.len() != calib_labels.len() {
        return Err(UcanError::Data("dknn needs matching calib features/labels".into()));
    }
    if k > train_feats.len() {
        return Err(UcanError::Config(format!("k={k} exceeds {} train points", train_feats.len())));
    }
    let layers = train_feats[0].len();
    // transpose to layer-major for the linear scans
    let train: Vec<Vec<Vec<f64>>> = (0..layers)
        .map(|l| train_feats.iter().map(|s| s[l].clone()).collect())
        .collect();
    let mut det = DknnDetector {
        train,
        train_labels: train_labels.to_vec(),
        calib_scores: Vec::new(),
        class_count,
        k,
    };
    det.calib_scores = calib_feats
        .iter()
        .zip(calib_labels)
        .map(|(f, &y)| det.nonconformity(f, y))
        .collect::<Result<_>>()?;
    Ok(det)
}

impl DknnDetector {
    /// Count of disagreeing neighbors across layers for candidate label j.
    /// Exact linear scan; distance ties break toward the lower train index.
    pub fn nonconformity(&self, feats: &[Vec<f64>], j: usize) -> Result<usize> {
        if j >= self.class_count {
            return Err(UcanError::Index(format!("label {j} out of range")));
        }
        if feats.len() != self.train.len() {
            return Err(UcanError::Dimension(format!(
                "{} feature layers, detector has {}",
                feats.len(),
                self.train.len()
            )));
        }
        let mut total = 0usize;
        for (l, f) in feats.iter().enumerate() {
            let mut order: Vec<usize> = (0..self.train[l].len()).collect();
            order.sort_by(|&a, &b| {
                sq_dist(&self.train[l][a], f)
                    .partial_cmp(&sq_dist(&self.train[l][b], f))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            total += order[..self.k]
                .iter()
                .filter(|&&i| self.train_labels[i] != j)
                .count();
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DknnOutput {
    /// Label with the smallest nonconformity (ties to the lower label).
    pub predicted: usize,
    pub nonconformity: usize,
    /// Counting p-value: fraction of calibration scores >= this score.
    pub p_value: f64,
    /// Tie-smoothed conformal p-value in (0, 1]; deterministic per input.
    pub p_smoothed: f64,
}

impl DknnOutput {
    /// Detection score, higher = more adversarial.
    pub fn adversarial_score(&self) -> f64 {
        1.0 - self.p_value
    }
}

pub fn dknn_score(det: &DknnDetector, feats: &[Vec<f64>]) -> Result<DknnOutput> {
    let mut predicted = 0usize;
    let mut best = usize::MAX;
    for j in 0..det.class_count {
        let a = det.nonconformity(feats, j)?;
        if a < best {
            best = a;
            predicted = j;
        }
    }
    let n = det.calib_scores.len();
    let ge = det.calib_scores.iter().filter(|&&s| s >= best).count();
    let gt = det.calib_scores.iter().filter(|&&s| s > best).count();
    let eq = ge - gt;
    // tie-break noise seeded from the features so reruns agree
    let mut hash_bytes = Vec::with_capacity(64);
    for layer in feats {
        for v in layer {
            hash_bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let seed = crate::weights::crc32(&hash_bytes) as u64;
    let u: f64 = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..1.0);
    Ok(DknnOutput {
        predicted,
        nonconformity: best,
        p_value: ge as f64 / n as f64,
        p_smoothed: (gt as f64 + u * (eq as f64 + 1.0)) / (n as f64 + 1.0),
    })
}

// --- deep neural rejection detector -----------------------------------------

/// Layer-wise one-vs-rest RBF-SVMs trained on benign features, combined by
/// a one-class rule: the diagonally-normalized distance d from the stacked
/// decision vector to its nearest benign decision vector maps to
/// d / (d0 + d), where d0 is the median leave-one-out benign distance. An
/// input whose layer-wise decisions match no benign pattern scores high.
#[derive(Debug, Clone)]
pub struct DnrDetector {
    pub per_layer: Vec<OneVsRestSvm>,
    /// stacked benign decision vectors defining the benign region
    pub benign: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
    pub d0: f64,
    pub class_count: usize,
}

fn stacked_decisions(per_layer: &[OneVsRestSvm], feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    if feats.len() != per_layer.len() {
        return Err(UcanError::Dimension(format!(
            "{} feature layers, detector has {}",
            feats.len(),
            per_layer.len()
        )));
    }
    Ok(per_layer
        .iter()
        .zip(feats)
        .flat_map(|(svm, f)| svm.decisions(f))
        .collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn dnr_train(
    benign_feats: &[Vec<Vec<f64>>],
    labels: &[usize],
    class_count: usize,
    svm_cfg: &SvmConfig,
) -> Result<DnrDetector> {
    if benign_feats.is_empty() || benign_feats.len() != labels.len() {
        return Err(UcanError::Data("dnr needs matching benign features/labels".into()));
    }
    let layers = benign_feats[0].len();
    let per_layer: Vec<OneVsRestSvm> = (0..layers)
        .map(|l| {
            let rows: Vec<Vec<f64>> = benign_feats.iter().map(|s| s[l].clone()).collect();
            OneVsRestSvm::train(&rows, labels, class_count, svm_cfg)
        })
        .collect::<Result<_>>()?;

    let stacked: Vec<Vec<f64>> = benign_feats
        .iter()
        .map(|f| stacked_decisions(&per_layer, f))
        .collect::<Result<_>>()?;
    let dim = stacked[0].len();
    let n = stacked.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|i| stacked.iter().map(|v| v[i]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|i| {
            let var = stacked.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-9)
        })
        .collect();
    let nearest = |v: &[f64], skip: Option<usize>| -> f64 {
        stacked
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, b)| {
                v.iter()
                    .zip(b)
                    .zip(&scale)
                    .map(|((x, y), s)| ((x - y) / s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    // leave-one-out distances calibrate what "near the benign region" means
    let mut benign_dists: Vec<f64> =
        (0..stacked.len()).map(|i| nearest(&stacked[i], Some(i))).collect();
    let d0 = median(&mut benign_dists).max(1e-9);
    Ok(DnrDetector { per_layer, benign: stacked, scale, d0, class_count })
}

impl DnrDetector {
    fn distance(&self, feats: &[Vec<f64>]) -> Result<f64> {
        let v = stacked_decisions(&self.per_layer, feats)?;
        Ok(self
            .benign
            .iter()
            .map(|b| {
                v.iter()
                    .zip(b)
                    .zip(&self.scale)
                    .map(|((x, y), s)| ((x - y) / s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min))
    }
}

/// Adversarial score in [0, 1); the median benign input maps to 0.5.
pub fn dnr_score(det: &DnrDetector, feats: &[Vec<f64>]) -> Result<f64> {
    let d = det.distance(feats)?;
    Ok(d / (det.d0 + d))
}

// --- softmax baseline and calibration ----------------------------------------

/// Max-softmax baseline: 1 - max_j softmax(logits)_j.
pub fn sad_score(model: &BackboneModel, x: &Tensor) -> Result<f64> {
    let logits = model.forward_logits(x)?;
    let zmax = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|z| (z - zmax).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(1.0 - exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / sum)
}

/// Detection verdict for one input; the two fields sum to 1.
#[derive(Debug, Clone, Copy)]
pub struct Verdict {
    pub adversarial_score: f64,
    pub benign_score: f64,
}

impl Verdict {
    pub fn from_score(adversarial_score: f64) -> Self {
        Self { adversarial_score, benign_score: 1.0 - adversarial_score }
    }
}

/// Exhaustive F1-optimal threshold: every distinct score is a candidate cut
/// plus an infinite sentinel (predict nothing). An input is flagged
/// adversarial iff score >= threshold; positives are the `true` labels.
/// Ties on F1 go to the lowest threshold.
pub fn calibrate_threshold(scores: &[f64], is_adversarial: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != is_adversarial.len() {
        return Err(UcanError::Data("calibration needs matching non-empty scores/labels".into()));
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    candidates.dedup();
    candidates.push(f64::INFINITY);
    // candidates ascend, so keeping only strict improvements breaks F1 ties
    // toward the lowest threshold
    let mut best = (f64::INFINITY, -1.0f64);
    for &t in &candidates {
        let f1 = f1_at_threshold(scores, is_adversarial, t);
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// F1 with `score >= threshold` predicting adversarial. No predicted and no
/// actual positives counts as F1 = 0 unless there are no positives at all.
pub fn f1_at_threshold(scores: &[f64], is_adversarial: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &a) in scores.iter().zip(is_adversarial) {
        let pred = s >= threshold;
        match (pred, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fneg == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

// --- persistence ----------------------------------------------------------------

use crate::weights::{self, Section};
use std::path::Path;

pub fn save_dknn(det: &DknnDetector, path: &Path) -> Result<()> {
    let mut sections = vec![
        Section::new(
            "dknn_meta",
            vec![Tensor::new(
                vec![5],
                vec![
                    det.class_count as f64,
                    det.k as f64,
                    det.train.len() as f64,
                    det.train_labels.len() as f64,
                    det.calib_scores.len() as f64,
                ],
            )?],
        ),
        Section::new(
            "dknn_labels",
            vec![Tensor::new(
                vec![det.train_labels.len()],
                det.train_labels.iter().map(|&l| l as f64).collect(),
            )?],
        ),
        Section::new(
            "dknn_calib",
            vec![Tensor::new(
                vec![det.calib_scores.len()],
                det.calib_scores.iter().map(|&s| s as f64).collect(),
            )?],
        ),
    ];
    for (l, layer) in det.train.iter().enumerate() {
        let d = layer.first().map_or(0, Vec::len);
        let flat: Vec<f64> = layer.iter().flatten().copied().collect();
        sections.push(Section::new(
            format!("dknn_l{l}"),
            vec![Tensor::new(vec![layer.len(), d], flat)?],
        ));
    }
    weights::write_container(path, &sections)
}

pub fn load_dknn(path: &Path) -> Result<DknnDetector> {
    let sections = weights::read_container(path)?;
    let meta = &weights::section(&sections, "dknn_meta")?.tensors[0].data;
    if meta.len() != 5 {
        return Err(UcanError::Format("dknn_meta must hold 5 values".into()));
    }
    let (class_count, k, layers) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
    let train_labels: Vec<usize> = weights::section(&sections, "dknn_labels")?.tensors[0]
        .data
        .iter()
        .map(|&v| v as usize)
        .collect();
    let calib_scores: Vec<usize> = weights::section(&sections, "dknn_calib")?.tensors[0]
        .data
        .iter()
        .map(|&v| v as usize)
        .collect();
    let mut train = Vec::with_capacity(layers);
    for l in 0..layers {
        let t = &weights::section(&sections, &format!("dknn_l{l}"))?.tensors[0];
        let [n, d] = t.shape[..] else {
            return Err(UcanError::Format("dknn layer tensor must be rank 2".into()));
        };
        train.push((0..n).map(|i| t.data[i * d..(i + 1) * d].to_vec()).collect());
    }
    Ok(DknnDetector { train, train_labels, calib_scores, class_count, k })
}

pub fn save_dnr(det: &DnrDetector, path: &Path) -> Result<()> {
    let benign_dim = det.benign.first().map_or(0, Vec::len);
    let mut sections = vec![
        Section::new(
            "dnr_meta",
            vec![Tensor::new(
                vec![4],
                vec![det.class_count as f64, det.d0, det.per_layer.len() as f64, det.benign.len() as f64],
            )?],
        ),
        Section::new("dnr_scale", vec![Tensor::new(vec![det.scale.len()], det.scale.clone())?]),
        Section::new(
            "dnr_benign",
            vec![Tensor::new(
                vec![det.benign.len(), benign_dim],
                det.benign.iter().flatten().copied().collect(),
            )?],
        ),
    ];
    for (l, ovr) in det.per_layer.iter().enumerate() {
        for (c, svm) in ovr.machines.iter().enumerate() {
            let d = svm.support.first().map_or(0, Vec::len);
            sections.push(Section::new(
                format!("dnr_l{l}_m{c}"),
                vec![
                    Tensor::new(vec![4], vec![svm.bias, svm.gamma, svm.support.len() as f64, d as f64])?,
                    Tensor::new(
                        vec![svm.support.len(), d],
                        svm.support.iter().flatten().copied().collect(),
                    )?,
                    Tensor::new(vec![svm.coef.len()], svm.coef.clone())?,
                ],
            ));
        }
    }
    weights::write_container(path, &sections)
}

pub fn load_dnr(path: &Path) -> Result<DnrDetector> {
    use crate::svm::RbfSvm;
    let sections = weights::read_container(path)?;
    let meta = &weights::section(&sections, "dnr_meta")?.tensors[0].data;
    if meta.len() != 4 {
        return Err(UcanError::Format("dnr_meta must hold 4 values".into()));
    }
    let (class_count, d0, layers) = (meta[0] as usize, meta[1], meta[2] as usize);
    let scale = weights::section(&sections, "dnr_scale")?.tensors[0].data.clone();
    let bt = &weights::section(&sections, "dnr_benign")?.tensors[0];
    let [bn, bd] = bt.shape[..] else {
        return Err(UcanError::Format("dnr_benign must be rank 2".into()));
    };
    let benign: Vec<Vec<f64>> = (0..bn).map(|i| bt.data[i * bd..(i + 1) * bd].to_vec()).collect();
    let mut per_layer = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut machines = Vec::with_capacity(class_count);
        for c in 0..class_count {
            let s = weights::section(&sections, &format!("dnr_l{l}_m{c}"))?;
            let [head, sup, coef] = s.tensors.as_slice() else {
                return Err(UcanError::Format("dnr machine section must hold 3 tensors".into()));
            };
            let (bias, gamma, n_sv, d) =
                (head.data[0], head.data[1], head.data[2] as usize, head.data[3] as usize);
            let support: Vec<Vec<f64>> =
                (0..n_sv).map(|i| sup.data[i * d..(i + 1) * d].to_vec()).collect();
            machines.push(RbfSvm { support, coef: coef.data.clone(), bias, gamma });
        }
        per_layer.push(OneVsRestSvm { machines });
    }
    Ok(DnrDetector { per_layer, benign, scale, d0, class_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arcface::{init_aux_blocks, ArcFaceConfig};
    use crate::backbone::BackboneSpec;
    use crate::data::gen_synthetic;

    fn feats_1layer(points: &[[f64; 2]]) -> Vec<Vec<Vec<f64>>> {
        points.iter().map(|p| vec![p.to_vec()]).collect()
    }

    #[test]
    fn dknn_nonconformity_matches_hand_count() {
        // train: two tight clusters on a line; k = 3
        let train = feats_1layer(&[[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [1.0, 0.0], [1.1, 0.0], [1.2, 0.0]]);
        let labels = vec![0, 0, 0, 1, 1, 1];
        let calib = feats_1layer(&[[0.05, 0.0], [1.05, 0.0]]);
        let det = dknn_build(&train, &labels, &calib, &[0, 1], 2, 3).unwrap();
        // query at 0.05: neighbors are the three class-0 points
        let q = vec![vec![0.05, 0.0]];
        assert_eq!(det.nonconformity(&q, 0).unwrap(), 0);
        assert_eq!(det.nonconformity(&q, 1).unwrap(), 3);
        // midpoint 0.6: nearest three are {0.2, 1.0, 0.1} -> 2 of class 0
        let mid = vec![vec![0.6, 0.0]];
        assert_eq!(det.nonconformity(&mid, 0).unwrap(), 1);
        assert_eq!(det.nonconformity(&mid, 1).unwrap(), 2);
    }

    #[test]
    fn dknn_pvalue_counting_fraction() {
        let train = feats_1layer(&[[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.1, 0.0]]);
        let labels = vec![0, 0, 1, 1];
        // calibration points with known scores: in-cluster -> 0 disagreements
        let calib = feats_1layer(&[[0.05, 0.0], [1.05, 0.0], [0.15, 0.0], [0.95, 0.0]]);
        let det = dknn_build(&train, &labels, &calib, &[0, 1, 0, 1], 2, 2).unwrap();
        assert_eq!(det.calib_scores, vec![0, 0, 0, 0]);
        let out = dknn_score(&det, &[vec![0.05, 0.0]]).unwrap();
        assert_eq!(out.predicted, 0);
        assert_eq!(out.nonconformity, 0);
        assert_eq!(out.p_value, 1.0); // all 4 calib scores >= 0
        // a point between clusters has score 1 at best -> no calib score >= 1
        let far = dknn_score(&det, &[vec![0.55, 0.0]]).unwrap();
        assert!(far.nonconformity >= 1);
        assert_eq!(far.p_value, 0.0);
        assert!(far.adversarial_score() > out.adversarial_score());
    }

    #[test]
    fn dknn_smoothed_pvalue_deterministic_and_valid() {
        let train = feats_1layer(&[[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.1, 0.0]]);
        let labels = vec![0, 0, 1, 1];
        let calib = feats_1layer(&[[0.05, 0.0], [1.05, 0.0]]);
        let det = dknn_build(&train, &labels, &calib, &[0, 1], 2, 2).unwrap();
        let a = dknn_score(&det, &[vec![0.07, 0.0]]).unwrap();
        let b = dknn_score(&det, &[vec![0.07, 0.0]]).unwrap();
        assert_eq!(a.p_smoothed, b.p_smoothed);
        assert!(a.p_smoothed > 0.0 && a.p_smoothed <= 1.0);
        let c = dknn_score(&det, &[vec![0.08, 0.0]]).unwrap();
        assert_ne!(a.p_smoothed, c.p_smoothed); // different inputs, different noise
    }

    #[test]
    fn dknn_input_validation() {
        let train = feats_1layer(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(dknn_build(&train, &[0, 1], &train, &[0, 1], 2, 0).is_err());
        assert!(dknn_build(&train, &[0, 1], &train, &[0, 1], 2, 5).is_err());
        assert!(dknn_build(&train, &[0], &train, &[0, 1], 2, 1).is_err());
        let det = dknn_build(&train, &[0, 1], &train, &[0, 1], 2, 1).unwrap();
        assert!(det.nonconformity(&[vec![0.0, 0.0]], 7).is_err());
        assert!(det.nonconformity(&[vec![0.0, 0.0], vec![1.0]], 0).is_err());
    }

    #[test]
    fn dnr_median_benign_scores_half() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let t = i as f64 * 0.02;
            pts.push([t, 0.0]);
            labels.push(0usize);
            pts.push([1.0 - t, 1.0]);
            labels.push(1usize);
        }
        let feats = feats_1layer(&pts);
        let cfg = SvmConfig { gamma: Some(2.0), ..Default::default() };
        let det = dnr_train(&feats, &labels, 2, &cfg).unwrap();
        // held-out benign points near the training clusters stay low
        let held_out = feats_1layer(&[[0.05, 0.0], [0.95, 1.0], [0.11, 0.0], [0.89, 1.0]]);
        let mut scores: Vec<f64> =
            held_out.iter().map(|f| dnr_score(&det, f).unwrap()).collect();
        let med = median(&mut scores);
        // a point with a decision pattern unlike any benign one scores higher
        let far = dnr_score(&det, &[vec![0.5, 0.5]]).unwrap();
        assert!(far > med, "off-manifold score {far} <= benign median {med}");
        assert!((0.0..1.0).contains(&far));
        // training points themselves sit at distance zero
        assert_eq!(dnr_score(&det, &feats[0]).unwrap(), 0.0);
    }

    #[test]
    fn sad_uniform_logits() {
        use crate::backbone::LayerSpec;
        // zero weights make every logit 0 -> uniform softmax over 4 classes
        let spec = BackboneSpec {
            input_shape: vec![3],
            class_count: 4,
            layers: vec![LayerSpec::Dense { out: 4 }],
        };
        let model = BackboneModel {
            spec,
            params: vec![Some((Tensor::zeros(vec![4, 3]), Tensor::zeros(vec![4])))],
            frozen: true,
        };
        let x = Tensor::new(vec![3], vec![0.2, 0.4, 0.6]).unwrap();
        let s = sad_score(&model, &x).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn verdict_sums_to_one() {
        let v = Verdict::from_score(0.3);
        assert!((v.adversarial_score + v.benign_score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn calibrate_threshold_simple_case() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, true, false, true];
        let (t, f1) = calibrate_threshold(&scores, &labels).unwrap();
        assert_eq!(t, 0.4);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn calibrate_threshold_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(2..20);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let (t, f1) = calibrate_threshold(&scores, &labels).unwrap();
            // brute force over a fine grid plus the sentinel
            let mut best = -1.0f64;
            for i in 0..=100 {
                let cand = i as f64 / 100.0;
                best = best.max(f1_at_threshold(&scores, &labels, cand));
            }
            best = best.max(f1_at_threshold(&scores, &labels, f64::INFINITY));
            assert!((f1 - best).abs() < 1e-12, "f1 {f1} vs brute {best}");
            assert_eq!(f1, f1_at_threshold(&scores, &labels, t));
        }
    }

    #[test]
    fn calibrate_threshold_tie_prefers_lowest() {
        // both 0.2 and 0.7 give the same F1; the lower must win
        let scores = [0.2, 0.7];
        let labels = [true, true];
        let (t, f1) = calibrate_threshold(&scores, &labels).unwrap();
        assert_eq!(t, 0.2);
        assert_eq!(f1, 1.0);
        assert!(calibrate_threshold(&[], &[]).is_err());
    }

    #[test]
    fn detector_persistence_roundtrips() {
        let train = feats_1layer(&[[0.0, 0.0], [0.125, 0.0], [1.0, 0.0], [1.125, 0.0]]);
        let labels = vec![0usize, 0, 1, 1];
        let calib = feats_1layer(&[[0.0625, 0.0], [1.0625, 0.0]]);
        let det = dknn_build(&train, &labels, &calib, &[0, 1], 2, 2).unwrap();
        let dir = std::env::temp_dir().join("ucan_detector_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("dknn.ucan");
        save_dknn(&det, &p).unwrap();
        let loaded = load_dknn(&p).unwrap();
        assert_eq!(loaded.k, 2);
        assert_eq!(loaded.train_labels, labels);
        assert_eq!(loaded.calib_scores, det.calib_scores);
        // exactly-representable f32 values survive the roundtrip
        assert_eq!(loaded.train, det.train);
        let q = vec![vec![0.0625, 0.0]];
        assert_eq!(
            dknn_score(&loaded, &q).unwrap().nonconformity,
            dknn_score(&det, &q).unwrap().nonconformity
        );

        let cfg = SvmConfig { gamma: Some(2.0), ..Default::default() };
        let dnr = dnr_train(&train, &labels, 2, &cfg).unwrap();
        let p2 = dir.join("dnr.ucan");
        save_dnr(&dnr, &p2).unwrap();
        let loaded2 = load_dnr(&p2).unwrap();
        assert_eq!(loaded2.class_count, 2);
        assert_eq!(loaded2.per_layer.len(), dnr.per_layer.len());
        let probe = vec![vec![0.5, 0.25]];
        let a = dnr_score(&dnr, &probe).unwrap();
        let b = dnr_score(&loaded2, &probe).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn feature_sources_have_expected_dims() {
        let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 8, 8], 2), 3).unwrap();
        model.freeze();
        let blocks = init_aux_blocks(
            &model,
            ArcFaceConfig { class_count: 2, embed_dim: 4, ..Default::default() },
            1,
        )
        .unwrap();
        let ds = gen_synthetic(2, 1, 8, 0.8, 0).unwrap();
        let x = &ds.samples[0];
        let selected = vec![1, 2, 3, 4];
        let raw = extract_features(&model, None, &selected, FeatureSource::RawTaps, x).unwrap();
        assert_eq!(raw[0].len(), 8 * 8 * 8); // first conv tap, 8ch at 8x8
        assert_eq!(raw[3].len(), 32); // pooled vector
        let emb =
            extract_features(&model, Some(&blocks), &selected, FeatureSource::UcanEmbedding, x)
                .unwrap();
        assert!(emb.iter().all(|e| e.len() == 4));
        for e in &emb {
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let logits =
            extract_features(&model, Some(&blocks), &selected, FeatureSource::UcanLogits, x)
                .unwrap();
        assert!(logits.iter().all(|l| l.len() == 2));
        // refined sources require blocks
        assert!(extract_features(&model, None, &selected, FeatureSource::UcanLogits, x).is_err());
        // subset selection works
        let sub = extract_features(&model, None, &[2, 4], FeatureSource::RawTaps, x).unwrap();
        assert_eq!(sub.len(), 2);
    }
}
