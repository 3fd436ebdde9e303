//! Evaluation harness: PR curves, max-F1 reporting, the detector x attack
//! x epsilon grid, overhead accounting, and latency benchmarks.
//!
//! The grid shares one adversarial batch per (attack, epsilon, seed) cell
//! group so every detector is scored on identical inputs. Reports carry the
//! raw scores so any F1 can be recomputed from the persisted artifact, and
//! all emitted CSV is formatted deterministically (timing lives in a
//! separate file so reruns stay byte-identical).

use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

use crate::arcface::AuxBlock;
use crate::attacks::{ada_dknn, attack_success_rate, cw_linf, pgd, AttackConfig};
use crate::backbone::BackboneModel;
use crate::data::Splits;
use crate::detectors::{
    calibrate_threshold, dknn_build, dknn_score, dnr_score, dnr_train, extract_dataset,
    extract_features, sad_score, DknnDetector, DnrDetector, FeatureSource,
};
use crate::error::{Result, UcanError};
use crate::svm::SvmConfig;

// --- precision-recall machinery ----------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Points ordered by ascending threshold; positive class = adversarial,
/// predicted positive iff score >= threshold.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

pub fn pr_curve(scores: &[f64], is_adversarial: &[bool]) -> Result<PrCurve> {
    if scores.is_empty() || scores.len() != is_adversarial.len() {
        return Err(UcanError::Data("pr curve needs matching non-empty scores/labels".into()));
    }
    let pos = is_adversarial.iter().filter(|&&a| a).count();
    if pos == 0 || pos == is_adversarial.len() {
        return Err(UcanError::Data("pr curve needs both classes present".into()));
    }
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    cuts.dedup();
    let points = cuts
        .into_iter()
        .map(|t| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&s, &a) in scores.iter().zip(is_adversarial) {
                match (s >= t, a) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / (tp + fneg) as f64;
            let f1 = if 2 * tp + fp + fneg == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            };
            PrPoint { threshold: t, precision, recall, f1 }
        })
        .collect();
    Ok(PrCurve { points })
}

/// Max-F1 point of a curve; ties go to the lowest threshold. Agrees exactly
/// with `detectors::calibrate_threshold` on the same data.
pub fn best_f1(curve: &PrCurve) -> Result<(f64, f64)> {
    if curve.points.is_empty() {
        return Err(UcanError::Contract("best_f1 on an empty curve".into()));
    }
    let mut best = (f64::INFINITY, -1.0f64);
    for p in &curve.points {
        if p.f1 > best.1 {
            best = (p.threshold, p.f1);
        }
    }
    Ok(best)
}

/// Precision at each of `n` evenly spaced recall levels, using the standard
/// interpolation precision(r) = max precision among points with recall >= r.
pub fn interpolate_precision(curve: &PrCurve, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let r = i as f64 / (n - 1).max(1) as f64;
            curve
                .points
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .collect()
}

pub const RECALL_GRID: usize = 101;

// --- the evaluation grid ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum AttackKind {
    Pgd,
    Cw,
    AdaDknn,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw_linf",
            AttackKind::AdaDknn => "ada_dknn",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pgd" => Ok(AttackKind::Pgd),
            "cw_linf" => Ok(AttackKind::Cw),
            "ada_dknn" => Ok(AttackKind::AdaDknn),
            _ => Err(UcanError::Config(format!("unknown attack '{name}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum DetectorKind {
    Dknn,
    Dnr,
    Sad,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Dknn => "dknn",
            DetectorKind::Dnr => "dnr",
            DetectorKind::Sad => "sad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    /// Ignored for SAD, which reads the backbone softmax directly.
    pub source: FeatureSource,
}

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub attacks: Vec<AttackKind>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub detectors: Vec<DetectorSpec>,
    /// Count only successfully-attacked samples as adversarial positives.
    pub successful_only: bool,
    /// Template for per-cell attacks; epsilon and seed are overridden.
    pub attack: AttackConfig,
    pub dknn_k: usize,
    pub svm: SvmConfig,
    /// Cap on test samples attacked per cell (0 = all).
    pub max_test: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            attacks: vec![AttackKind::Pgd, AttackKind::Cw],
            epsilons: vec![8.0 / 255.0, 16.0 / 255.0],
            seeds: vec![0],
            detectors: vec![
                DetectorSpec { kind: DetectorKind::Dknn, source: FeatureSource::RawTaps },
                DetectorSpec { kind: DetectorKind::Dknn, source: FeatureSource::UcanEmbedding },
                DetectorSpec { kind: DetectorKind::Dnr, source: FeatureSource::RawTaps },
                DetectorSpec { kind: DetectorKind::Dnr, source: FeatureSource::UcanLogits },
                DetectorSpec { kind: DetectorKind::Sad, source: FeatureSource::RawTaps },
            ],
            successful_only: true,
            attack: AttackConfig::default(),
            dknn_k: 5,
            svm: SvmConfig::default(),
            max_test: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct GridCell {
    pub detector: String,
    pub source: String,
    pub attack: String,
    pub epsilon: f64,
    pub seed: u64,
    pub best_f1: f64,
    /// May be infinite (the "predict nothing" sentinel); persisted as null.
    #[serde(with = "inf_as_null")]
    pub threshold: f64,
    pub success_rate: f64,
    /// Raw detection scores (benign then adversarial) for integrity checks.
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub recall_grid: usize,
    pub successful_only: bool,
    pub cells: Vec<GridCell>,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

enum BuiltDetector {
    Dknn(DknnDetector),
    Dnr(DnrDetector),
    Sad,
}

/// Generates the shared adversarial batch for one (attack, epsilon, seed)
/// cell group, attacking at most `max_test` test samples (0 = all).
pub fn generate_batch(
    model: &BackboneModel,
    blocks: &[AuxBlock],
    splits: &Splits,
    attack: AttackKind,
    acfg: &AttackConfig,
    max_test: usize,
) -> Result<crate::attacks::AdvBatch> {
    let n = if max_test == 0 { splits.test.len() } else { max_test.min(splits.test.len()) };
    if n == 0 {
        return Err(UcanError::Data("empty test split".into()));
    }
    let samples = &splits.test.samples[..n];
    let labels = &splits.test.labels[..n];
    match attack {
        AttackKind::Pgd => pgd(model, samples, labels, acfg),
        AttackKind::Cw => cw_linf(model, samples, labels, acfg),
        AttackKind::AdaDknn => ada_dknn(model, blocks, &splits.calib, samples, labels, acfg),
    }
}

/// Runs the full detector x attack x epsilon x seed grid on the test split.
/// Detectors are built once from the train/calib splits; each (attack,
/// epsilon, seed) group shares a single adversarial batch.
pub fn evaluate_grid(
    model: &BackboneModel,
    blocks: &[AuxBlock],
    selected: &[usize],
    splits: &Splits,
    cfg: &GridConfig,
) -> Result<EvalReport> {
    if cfg.attacks.is_empty() || cfg.epsilons.is_empty() || cfg.seeds.is_empty() {
        return Err(UcanError::Config("grid needs attacks, epsilons, seeds".into()));
    }
    let mut batches = Vec::new();
    for &attack in &cfg.attacks {
        for &epsilon in &cfg.epsilons {
            for &seed in &cfg.seeds {
                let acfg = AttackConfig { epsilon, seed, ..cfg.attack };
                batches.push((attack, seed, generate_batch(model, blocks, splits, attack, &acfg, cfg.max_test)?));
            }
        }
    }
    evaluate_batches(model, blocks, selected, splits, cfg, &batches)
}

/// Scores every configured detector against precomputed adversarial batches.
pub fn evaluate_batches(
    model: &BackboneModel,
    blocks: &[AuxBlock],
    selected: &[usize],
    splits: &Splits,
    cfg: &GridConfig,
    batches: &[(AttackKind, u64, crate::attacks::AdvBatch)],
) -> Result<EvalReport> {
    if cfg.detectors.is_empty() || batches.is_empty() {
        return Err(UcanError::Config("grid needs detectors and batches".into()));
    }
    if !model.frozen {
        return Err(UcanError::Contract("grid evaluation needs a frozen backbone".into()));
    }
    let blocks_opt = if blocks.is_empty() { None } else { Some(blocks) };

    // build every requested detector once
    let mut built: Vec<(DetectorSpec, BuiltDetector)> = Vec::new();
    for spec in &cfg.detectors {
        let det = match spec.kind {
            DetectorKind::Sad => BuiltDetector::Sad,
            DetectorKind::Dknn => {
                let train =
                    extract_dataset(model, blocks_opt, selected, spec.source, &splits.train.samples)?;
                let calib =
                    extract_dataset(model, blocks_opt, selected, spec.source, &splits.calib.samples)?;
                BuiltDetector::Dknn(dknn_build(
                    &train,
                    &splits.train.labels,
                    &calib,
                    &splits.calib.labels,
                    splits.train.class_count,
                    cfg.dknn_k,
                )?)
            }
            DetectorKind::Dnr => {
                let train =
                    extract_dataset(model, blocks_opt, selected, spec.source, &splits.train.samples)?;
                BuiltDetector::Dnr(dnr_train(
                    &train,
                    &splits.train.labels,
                    splits.train.class_count,
                    &cfg.svm,
                )?)
            }
        };
        built.push((*spec, det));
    }

    let score_one = |det: &BuiltDetector, x: &crate::tensor::Tensor, spec: &DetectorSpec| -> Result<f64> {
        match det {
            BuiltDetector::Sad => sad_score(model, x),
            BuiltDetector::Dknn(d) => {
                let f = extract_features(model, blocks_opt, selected, spec.source, x)?;
                Ok(1.0 - dknn_score(d, &f)?.p_smoothed)
            }
            BuiltDetector::Dnr(d) => {
                let f = extract_features(model, blocks_opt, selected, spec.source, x)?;
                dnr_score(d, &f)
            }
        }
    };

    // benign scores are attack-independent; compute once per detector on the
    // shared originals (every batch attacks the same capped test prefix)
    let benign_pool = &batches[0].2.originals;
    let benign_scores: Vec<Vec<f64>> = built
        .iter()
        .map(|(spec, det)| benign_pool.iter().map(|x| score_one(det, x, spec)).collect())
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (attack, seed, batch) in batches {
        if batch.originals.len() != benign_pool.len() {
            return Err(UcanError::Contract("batches attack different test pools".into()));
        }
        let success = batch.success_mask(model)?;
        let success_rate = attack_success_rate(batch, model)?;
        let adv_index: Vec<usize> = (0..batch.len())
            .filter(|&i| !cfg.successful_only || success[i])
            .collect();
        for ((spec, det), benign) in built.iter().zip(&benign_scores) {
            let mut scores = benign.clone();
            let mut labels = vec![false; benign.len()];
            for &i in &adv_index {
                scores.push(score_one(det, &batch.adversarial[i], spec)?);
                labels.push(true);
            }
            let (threshold, f1) = if labels.iter().any(|&l| l) {
                calibrate_threshold(&scores, &labels)?
            } else {
                (f64::INFINITY, 0.0)
            };
            cells.push(GridCell {
                detector: spec.kind.name().into(),
                source: spec.source.name().into(),
                attack: attack.name().into(),
                epsilon: batch.epsilon,
                seed: *seed,
                best_f1: f1,
                threshold,
                success_rate,
                scores,
                labels,
            });
        }
    }
    Ok(EvalReport { recall_grid: RECALL_GRID, successful_only: cfg.successful_only, cells })
}

impl EvalReport {
    /// Mean best-F1 over all cells matching detector and source.
    pub fn mean_f1(&self, detector: &str, source: &str) -> Option<f64> {
        let rows: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.detector == detector && c.source == source)
            .map(|c| c.best_f1)
            .collect();
        if rows.is_empty() {
            None
        } else {
            Some(rows.iter().sum::<f64>() / rows.len() as f64)
        }
    }

    /// Mean best-F1 over cells matching detector, source, and attack.
    pub fn mean_f1_for_attack(&self, detector: &str, source: &str, attack: &str) -> Option<f64> {
        let rows: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.detector == detector && c.source == source && c.attack == attack)
            .map(|c| c.best_f1)
            .collect();
        if rows.is_empty() {
            None
        } else {
            Some(rows.iter().sum::<f64>() / rows.len() as f64)
        }
    }
}

// --- overhead and latency ------------------------------------------------------

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct OverheadReport {
    pub backbone_params: usize,
    pub aux_params: usize,
    pub per_block: Vec<usize>,
    /// aux / (aux + backbone) * 100
    pub percentage: f64,
}

/// Closed-form auxiliary parameter count: sum over blocks of
/// C_k * d' + d' + CL * d'.
pub fn overhead_report(model: &BackboneModel, blocks: &[AuxBlock]) -> Result<OverheadReport> {
    if blocks.is_empty() {
        return Err(UcanError::Config("overhead report needs aux blocks".into()));
    }
    for b in blocks {
        if b.config.embed_dim == 0 || b.config.class_count == 0 {
            return Err(UcanError::Config("embed_dim and class_count must be positive".into()));
        }
    }
    let per_block: Vec<usize> = blocks
        .iter()
        .map(|b| {
            let d = b.config.embed_dim;
            b.in_channels() * d + d + b.config.class_count * d
        })
        .collect();
    let aux_params: usize = per_block.iter().sum();
    let backbone_params = model.parameter_count();
    Ok(OverheadReport {
        backbone_params,
        aux_params,
        per_block,
        percentage: aux_params as f64 / (aux_params + backbone_params) as f64 * 100.0,
    })
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct LatencyStats {
    pub label: String,
    pub batch: usize,
    pub iterations: usize,
    pub mean_s: f64,
    pub stddev_s: f64,
    /// Environment descriptor recorded with the measurement.
    pub environment: String,
}

/// Times `job` over `iterations` runs after one excluded warm-up run.
pub fn latency_bench(
    label: &str,
    batch: usize,
    iterations: usize,
    mut job: impl FnMut() -> Result<()>,
) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(UcanError::Config("latency bench needs iterations >= 1".into()));
    }
    job()?; // warm-up, excluded
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = std::time::Instant::now();
        job()?;
        times.push(start.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
    Ok(LatencyStats {
        label: label.into(),
        batch,
        iterations,
        mean_s: mean,
        stddev_s: var.sqrt(),
        environment: format!("{} single-thread", std::env::consts::ARCH),
    })
}

// --- report emission ------------------------------------------------------------

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// One row per grid cell plus per-(detector, source, attack) mean rows.
/// Timing never appears here, so reruns with equal seeds are byte-identical.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("detector,source,attack,epsilon,seed,best_f1,threshold,success_rate\n");
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.detector,
            c.source,
            c.attack,
            fmt(c.epsilon),
            c.seed,
            fmt(c.best_f1),
            fmt(c.threshold),
            fmt(c.success_rate)
        ));
    }
    // aggregate means in first-seen order
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for c in &report.cells {
        let k = (c.detector.clone(), c.source.clone(), c.attack.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (det, src, att) in keys {
        let rows: Vec<&GridCell> = report
            .cells
            .iter()
            .filter(|c| c.detector == det && c.source == src && c.attack == att)
            .collect();
        let mean_f1 = rows.iter().map(|c| c.best_f1).sum::<f64>() / rows.len() as f64;
        let mean_sr = rows.iter().map(|c| c.success_rate).sum::<f64>() / rows.len() as f64;
        out.push_str(&format!("{det},{src},{att},mean,mean,{},,{}\n", fmt(mean_f1), fmt(mean_sr)));
    }
    out
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    write_atomic(path, report_csv(report).as_bytes())
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(report)?.as_bytes())
}

/// Averaged PR curve per (detector, source) via recall-grid interpolation,
/// rendered as one SVG polyline plot per detector pair.
pub fn write_pr_svg(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in &report.cells {
        let k = (c.detector.clone(), c.source.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (det, src) in keys {
        let curves: Vec<Vec<f64>> = report
            .cells
            .iter()
            .filter(|c| c.detector == det && c.source == src)
            .filter_map(|c| pr_curve(&c.scores, &c.labels).ok())
            .map(|c| interpolate_precision(&c, report.recall_grid))
            .collect();
        if curves.is_empty() {
            continue;
        }
        let n = report.recall_grid;
        let avg: Vec<f64> =
            (0..n).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect();
        let (w, h, pad) = (400.0, 300.0, 40.0);
        let pts: Vec<String> = avg
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let x = pad + (i as f64 / (n - 1) as f64) * (w - 2.0 * pad);
                let y = h - pad - p * (h - 2.0 * pad);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let svg = format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
                "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
                "<line x1=\"{pad}\" y1=\"{yax}\" x2=\"{xmax}\" y2=\"{yax}\" stroke=\"black\"/>\n",
                "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yax}\" stroke=\"black\"/>\n",
                "<text x=\"{xmid}\" y=\"{h}\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n",
                "<text x=\"12\" y=\"{ymid}\" font-size=\"12\" transform=\"rotate(-90 12 {ymid})\" ",
                "text-anchor=\"middle\">precision</text>\n",
                "<text x=\"{xmid}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
                "<polyline points=\"{pts}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
                "</svg>\n"
            ),
            w = w,
            h = h,
            pad = pad,
            yax = h - pad,
            xmax = w - pad,
            xmid = w / 2.0,
            ymid = h / 2.0,
            title = format!("{det} ({src}) averaged PR"),
            pts = pts.join(" ")
        );
        write_atomic(&dir.join(format!("pr_{det}_{src}.svg")), svg.as_bytes())?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::f1_at_threshold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pr_curve_separable_contains_perfect_point() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [false, false, true, true];
        let curve = pr_curve(&scores, &labels).unwrap();
        assert!(curve
            .points
            .iter()
            .any(|p| (p.precision - 1.0).abs() < 1e-12 && (p.recall - 1.0).abs() < 1e-12));
        let (_, f1) = best_f1(&curve).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn pr_curve_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.gen_range(4..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let curve = pr_curve(&scores, &labels).unwrap();
            for p in &curve.points {
                let tp = scores
                    .iter()
                    .zip(&labels)
                    .filter(|(&s, &l)| s >= p.threshold && l)
                    .count();
                let fp = scores
                    .iter()
                    .zip(&labels)
                    .filter(|(&s, &l)| s >= p.threshold && !l)
                    .count();
                let pos = labels.iter().filter(|&&l| l).count();
                let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
                assert!((p.precision - precision).abs() < 1e-12);
                assert!((p.recall - tp as f64 / pos as f64).abs() < 1e-12);
            }
            // recall nonincreasing in threshold (points ascend by threshold)
            for w in curve.points.windows(2) {
                assert!(w[1].recall <= w[0].recall + 1e-12);
            }
        }
    }

    #[test]
    fn pr_curve_rejects_single_class() {
        assert!(pr_curve(&[0.5, 0.7], &[true, true]).is_err());
        assert!(pr_curve(&[], &[]).is_err());
    }

    #[test]
    fn best_f1_agrees_with_calibrate_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 12.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let curve = pr_curve(&scores, &labels).unwrap();
            let (t1, f1a) = best_f1(&curve).unwrap();
            let (t2, f1b) = calibrate_threshold(&scores, &labels).unwrap();
            assert_eq!(f1a, f1b);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn best_f1_singleton_curve() {
        let curve = PrCurve {
            points: vec![PrPoint { threshold: 0.3, precision: 0.5, recall: 1.0, f1: 2.0 / 3.0 }],
        };
        let (t, f1) = best_f1(&curve).unwrap();
        assert_eq!(t, 0.3);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(best_f1(&PrCurve { points: vec![] }).is_err());
    }

    #[test]
    fn overhead_reference_config_is_1728() {
        use crate::arcface::{init_aux_blocks, ArcFaceConfig};
        use crate::backbone::BackboneSpec;
        let model = BackboneModel::init(BackboneSpec::small_cnn([1, 16, 16], 4), 0).unwrap();
        let blocks = init_aux_blocks(
            &model,
            ArcFaceConfig { embed_dim: 16, class_count: 4, ..Default::default() },
            0,
        )
        .unwrap();
        let report = overhead_report(&model, &blocks).unwrap();
        assert_eq!(report.per_block, vec![208, 336, 592, 592]);
        assert_eq!(report.aux_params, 1728);
        assert!(report.percentage > 0.0 && report.percentage < 100.0);

        // doubling d' doubles the ArcFace term CL * d' exactly
        let blocks2 = init_aux_blocks(
            &model,
            ArcFaceConfig { embed_dim: 32, class_count: 4, ..Default::default() },
            0,
        )
        .unwrap();
        let r2 = overhead_report(&model, &blocks2).unwrap();
        assert_eq!(r2.aux_params, 2 * report.aux_params);
    }

    #[test]
    fn latency_single_iteration_zero_stddev() {
        let stats = latency_bench("noop", 8, 1, || Ok(())).unwrap();
        assert_eq!(stats.stddev_s, 0.0);
        assert_eq!(stats.iterations, 1);
        assert!(!stats.environment.is_empty());
        assert!(latency_bench("bad", 8, 0, || Ok(())).is_err());
    }

    #[test]
    fn interpolated_precision_monotone_grid() {
        let scores = [0.1, 0.4, 0.6, 0.9];
        let labels = [false, true, false, true];
        let curve = pr_curve(&scores, &labels).unwrap();
        let interp = interpolate_precision(&curve, 11);
        assert_eq!(interp.len(), 11);
        // interpolated precision is nonincreasing in recall
        for w in interp.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!((interp[0] - 1.0).abs() < 1e-12); // recall 0 -> max precision
    }

    fn tiny_grid_fixture() -> (BackboneModel, Vec<crate::arcface::AuxBlock>, crate::data::Splits) {
        use crate::arcface::{init_aux_blocks, ArcFaceConfig};
        use crate::backbone::{train_backbone, BackboneSpec, TrainConfig};
        use crate::data::{gen_synthetic, split_dataset};
        let ds = gen_synthetic(2, 20, 8, 0.95, 3).unwrap();
        let splits = split_dataset(&ds, [0.5, 0.2, 0.15, 0.15], 1).unwrap();
        let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 8, 8], 2), 4).unwrap();
        let tc = TrainConfig { epochs: 5, seed: 2, ..Default::default() };
        train_backbone(&mut model, &splits.train, &splits.val, &tc).unwrap();
        model.freeze();
        let blocks = init_aux_blocks(
            &model,
            ArcFaceConfig { class_count: 2, embed_dim: 4, ..Default::default() },
            9,
        )
        .unwrap();
        (model, blocks, splits)
    }

    #[test]
    fn grid_cardinality_and_determinism() {
        let (model, blocks, splits) = tiny_grid_fixture();
        let cfg = GridConfig {
            attacks: vec![AttackKind::Pgd, AttackKind::Cw],
            epsilons: vec![8.0 / 255.0, 16.0 / 255.0],
            seeds: vec![0],
            detectors: vec![
                DetectorSpec { kind: DetectorKind::Dknn, source: FeatureSource::UcanEmbedding },
                DetectorSpec { kind: DetectorKind::Sad, source: FeatureSource::RawTaps },
            ],
            attack: AttackConfig { steps: 3, ..Default::default() },
            dknn_k: 2,
            max_test: 4,
            ..Default::default()
        };
        let report = evaluate_grid(&model, &blocks, &[1, 2, 3, 4], &splits, &cfg).unwrap();
        assert_eq!(report.cells.len(), 8); // 2 detectors x 2 attacks x 2 eps
        let again = evaluate_grid(&model, &blocks, &[1, 2, 3, 4], &splits, &cfg).unwrap();
        assert_eq!(report_csv(&report), report_csv(&again));

        // report integrity: stored F1 reproducible from persisted raw scores
        for c in &report.cells {
            if c.labels.iter().any(|&l| l) {
                let (_, f1) = calibrate_threshold(&c.scores, &c.labels).unwrap();
                assert_eq!(f1, c.best_f1);
                assert_eq!(f1, f1_at_threshold(&c.scores, &c.labels, c.threshold));
            }
        }

        // aggregate rows equal the arithmetic means of their cells
        let csv = report_csv(&report);
        for line in csv.lines().filter(|l| l.contains(",mean,")) {
            let cols: Vec<&str> = line.split(',').collect();
            let mean_in_csv: f64 = cols[5].parse().unwrap();
            let expected = report
                .mean_f1_for_attack(cols[0], cols[1], cols[2])
                .unwrap();
            assert!((mean_in_csv - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn report_files_are_written() {
        let (model, blocks, splits) = tiny_grid_fixture();
        let cfg = GridConfig {
            attacks: vec![AttackKind::Pgd],
            epsilons: vec![16.0 / 255.0],
            seeds: vec![0],
            detectors: vec![DetectorSpec {
                kind: DetectorKind::Dknn,
                source: FeatureSource::UcanEmbedding,
            }],
            attack: AttackConfig { steps: 3, ..Default::default() },
            dknn_k: 2,
            max_test: 4,
            ..Default::default()
        };
        let report = evaluate_grid(&model, &blocks, &[1, 2, 3, 4], &splits, &cfg).unwrap();
        let dir = std::env::temp_dir().join("ucan_eval_test");
        std::fs::create_dir_all(&dir).unwrap();
        write_report_csv(&report, &dir.join("report.csv")).unwrap();
        write_report_json(&report, &dir.join("report.json")).unwrap();
        write_pr_svg(&report, &dir).unwrap();
        assert!(dir.join("report.csv").exists());
        let json = std::fs::read_to_string(dir.join("report.json")).unwrap();
        assert!(json.contains("recall_grid"));
        assert!(dir.join("pr_dknn_ucan_embedding.svg").exists());
    }
}
