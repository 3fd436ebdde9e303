//! Staged pipeline behind the CLI: each stage is a pure function of the run
//! configuration plus previously persisted artifacts, writing only its own
//! declared outputs under the artifact directory.
//!
//! Artifact layout:
//!
//! ```text
//! out/dataset.ucan            four splits of samples + labels
//! out/backbone.ucan           trained, frozen backbone
//! out/backbone_log.json       per-epoch loss / val accuracy
//! out/aux.ucan                trained aux blocks
//! out/aux_log.json            per-epoch global loss / TCS
//! out/selection.json          per-layer scores + selected tap indices
//! out/attacks/{name}_e{i}_s{seed}.ucan(.json)   adversarial batches
//! out/detectors/{kind}_{source}.ucan            persisted detectors
//! out/report.json, out/report.csv               evaluation grid
//! out/pr_{detector}_{source}.svg                averaged PR curves
//! out/overhead.json, out/bench.json             accounting
//! ```

use std::path::{Path, PathBuf};

use crate::arcface::{
    init_aux_blocks, layer_scores, load_aux_blocks, save_aux_blocks, select_layers, ArcFaceConfig,
    SelectionPolicy, TrainAuxConfig,
};
use crate::attacks::{load_batch, save_batch, AdvBatch};
use crate::backbone::{self, BackboneModel, BackboneSpec, TrainConfig};
use crate::config::RunConfig;
use crate::data::{gen_synthetic, load_cifar10_binary, split_dataset, LabeledDataset, Splits};
use crate::detectors::{
    dknn_build, dnr_train, extract_dataset, save_dknn, save_dnr, FeatureSource,
};
use crate::error::{Result, UcanError};
use crate::eval::{
    evaluate_batches, latency_bench, overhead_report, write_pr_svg, write_report_csv,
    write_report_json, AttackKind, DetectorKind, DetectorSpec, EvalReport, GridConfig,
};
use crate::tensor::Tensor;
use crate::weights::{self, Section};

const SPLIT_NAMES: [&str; 4] = ["train", "val", "calib", "test"];

fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.ucan")
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(UcanError::Data(format!("missing artifact: {}", path.display())));
    }
    Ok(())
}

/// Stage 1: generate (or ingest) the dataset and persist the four splits.
pub fn stage_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = match &cfg.cifar_path {
        Some(p) => load_cifar10_binary(Path::new(p), None)?,
        None => gen_synthetic(cfg.classes, cfg.per_class, cfg.image_size, cfg.separation, cfg.data_seed)?,
    };
    let splits = split_dataset(&ds, cfg.split_fractions, cfg.data_seed)?;
    let mut sections = vec![Section::new(
        "meta",
        vec![Tensor::new(vec![1], vec![ds.class_count as f64])?],
    )];
    for (name, split) in SPLIT_NAMES.iter().zip([&splits.train, &splits.val, &splits.calib, &splits.test]) {
        sections.push(Section::new(format!("{name}_samples"), split.samples.clone()));
        sections.push(Section::new(
            format!("{name}_labels"),
            vec![Tensor::new(
                vec![split.labels.len()],
                split.labels.iter().map(|&l| l as f64).collect(),
            )?],
        ));
    }
    weights::write_container(&dataset_path(out), &sections)
}

pub fn load_splits(out: &Path) -> Result<Splits> {
    let path = dataset_path(out);
    require(&path)?;
    let sections = weights::read_container(&path)?;
    let class_count = weights::section(&sections, "meta")?.tensors[0].data[0] as usize;
    let mut parts = Vec::with_capacity(4);
    for name in SPLIT_NAMES {
        let samples = weights::section(&sections, &format!("{name}_samples"))?.tensors.clone();
        let labels: Vec<usize> = weights::section(&sections, &format!("{name}_labels"))?.tensors[0]
            .data
            .iter()
            .map(|&v| v as usize)
            .collect();
        parts.push(LabeledDataset::new(samples, labels, class_count)?);
    }
    let [train, val, calib, test]: [LabeledDataset; 4] =
        parts.try_into().map_err(|_| UcanError::Format("split count".into()))?;
    Ok(Splits { train, val, calib, test })
}

/// Stage 2: train the backbone on the train split, freeze it, persist it.
pub fn stage_train_backbone(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(out)?;
    let shape = splits.train.samples[0].shape.clone();
    let spec = match shape.as_slice() {
        [c, h, w] => BackboneSpec::small_cnn([*c, *h, *w], splits.train.class_count),
        [d] => BackboneSpec::mlp(*d, &[32, 16], splits.train.class_count),
        s => return Err(UcanError::Dimension(format!("unsupported sample shape {s:?}"))),
    };
    let mut model = BackboneModel::init(spec, cfg.backbone_seed)?;
    let tc = TrainConfig {
        epochs: cfg.backbone_epochs,
        learning_rate: cfg.backbone_lr,
        momentum: cfg.backbone_momentum,
        batch_size: cfg.backbone_batch,
        seed: cfg.backbone_seed,
        noise_aug: (cfg.noise_aug > 0.0).then_some(cfg.noise_aug),
    };
    let log = backbone::train_backbone(&mut model, &splits.train, &splits.val, &tc)?;
    model.freeze();
    backbone::serialize_model(&model, &out.join("backbone.ucan"))?;
    write_json(&out.join("backbone_log.json"), &serde_json::json!({
        "epochs": log.epochs.iter().map(|e| serde_json::json!({
            "loss": e.loss, "val_accuracy": e.val_metric,
        })).collect::<Vec<_>>(),
    }))
}

pub fn load_backbone(out: &Path) -> Result<BackboneModel> {
    let path = out.join("backbone.ucan");
    require(&path)?;
    backbone::load_model(&path)
}

fn arcface_config(cfg: &RunConfig, class_count: usize) -> ArcFaceConfig {
    ArcFaceConfig {
        scale: cfg.scale,
        margin: cfg.margin,
        embed_dim: cfg.embed_dim,
        class_count,
    }
}

/// Stage 3: train one aux block per tap against the frozen backbone.
pub fn stage_train_aux(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(out)?;
    let model = load_backbone(out)?;
    let mut blocks = init_aux_blocks(&model, arcface_config(cfg, splits.train.class_count), cfg.aux_seed)?;
    let tc = TrainAuxConfig {
        epochs: cfg.aux_epochs,
        learning_rate: cfg.aux_lr,
        momentum: cfg.aux_momentum,
        batch_size: cfg.aux_batch,
        seed: cfg.aux_seed,
    };
    let log = crate::arcface::train_aux(&model, &mut blocks, &splits.train, &splits.val, &tc)?;
    save_aux_blocks(&blocks, &out.join("aux.ucan"))?;
    write_json(&out.join("aux_log.json"), &serde_json::json!({
        "epochs": log.epochs.iter().map(|e| serde_json::json!({
            "global_loss": e.loss, "val_tcs": e.val_metric,
        })).collect::<Vec<_>>(),
    }))
}

pub fn load_aux(out: &Path) -> Result<Vec<crate::arcface::AuxBlock>> {
    let path = out.join("aux.ucan");
    require(&path)?;
    load_aux_blocks(&path)
}

/// Stage 4: score layers on the validation split and persist the selection.
pub fn stage_select_layers(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(out)?;
    let model = load_backbone(out)?;
    let blocks = load_aux(out)?;
    let (scores, tcs) = layer_scores(&model, &blocks, &splits.val)?;
    let policy = match cfg.select_policy.as_str() {
        "top" => SelectionPolicy::TopS(cfg.select_count),
        "offset" => SelectionPolicy::Offset(cfg.select_count),
        p => return Err(UcanError::Config(format!("unknown selection policy '{p}'"))),
    };
    let selected = select_layers(&scores, policy)?;
    write_json(&out.join("selection.json"), &serde_json::json!({
        "policy": cfg.select_policy,
        "count": cfg.select_count,
        "tcs": tcs,
        "selected": selected,
        "layers": scores.iter().map(|s| serde_json::json!({
            "k": s.k, "cs_plus": s.cs_plus, "cs_minus": s.cs_minus, "cs_avg": s.cs_avg,
        })).collect::<Vec<_>>(),
    }))
}

pub fn load_selection(out: &Path) -> Result<Vec<usize>> {
    let path = out.join("selection.json");
    require(&path)?;
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    v.get("selected")
        .and_then(|s| s.as_array())
        .map(|a| a.iter().filter_map(|x| x.as_u64().map(|u| u as usize)).collect())
        .ok_or_else(|| UcanError::Format("selection.json missing 'selected'".into()))
}

fn batch_path(out: &Path, attack: &str, eps_index: usize, seed: u64) -> PathBuf {
    out.join("attacks").join(format!("{attack}_e{eps_index}_s{seed}.ucan"))
}

/// Stage 5: generate one adversarial batch per (attack, epsilon, seed).
pub fn stage_attack(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(out)?;
    let model = load_backbone(out)?;
    let blocks = load_aux(out)?;
    let mut summary = Vec::new();
    for name in &cfg.eval_attacks {
        let kind = AttackKind::from_name(name)?;
        for (ei, &eps) in cfg.eval_epsilons.iter().enumerate() {
            for &seed in &cfg.eval_seeds {
                let mut acfg = cfg.attack_config(eps, seed)?;
                if kind == AttackKind::AdaDknn {
                    acfg.steps = cfg.ada_steps;
                }
                let batch =
                    crate::eval::generate_batch(&model, &blocks, &splits, kind, &acfg, cfg.max_test)?;
                let rate = crate::attacks::attack_success_rate(&batch, &model)?;
                save_batch(&batch, &batch_path(out, name, ei, seed))?;
                summary.push(serde_json::json!({
                    "attack": name, "epsilon": eps, "seed": seed, "success_rate": rate,
                }));
            }
        }
    }
    write_json(&out.join("attacks").join("summary.json"), &serde_json::json!(summary))
}

fn detector_specs() -> Vec<DetectorSpec> {
    vec![
        DetectorSpec { kind: DetectorKind::Dknn, source: FeatureSource::RawTaps },
        DetectorSpec { kind: DetectorKind::Dknn, source: FeatureSource::UcanEmbedding },
        DetectorSpec { kind: DetectorKind::Dnr, source: FeatureSource::RawTaps },
        DetectorSpec { kind: DetectorKind::Dnr, source: FeatureSource::UcanLogits },
        DetectorSpec { kind: DetectorKind::Sad, source: FeatureSource::RawTaps },
    ]
}

/// Stage 6: build and persist every detector from the train/calib splits.
pub fn stage_build_detector(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(out)?;
    let model = load_backbone(out)?;
    let blocks = load_aux(out)?;
    let selected = load_selection(out)?;
    let dir = out.join("detectors");
    for spec in detector_specs() {
        let blocks_opt = Some(blocks.as_slice());
        match spec.kind {
            DetectorKind::Sad => {}
            DetectorKind::Dknn => {
                let train = extract_dataset(&model, blocks_opt, &selected, spec.source, &splits.train.samples)?;
                let calib = extract_dataset(&model, blocks_opt, &selected, spec.source, &splits.calib.samples)?;
                let det = dknn_build(
                    &train,
                    &splits.train.labels,
                    &calib,
                    &splits.calib.labels,
                    splits.train.class_count,
                    cfg.dknn_k,
                )?;
                save_dknn(&det, &dir.join(format!("dknn_{}.ucan", spec.source.name())))?;
            }
            DetectorKind::Dnr => {
                let train = extract_dataset(&model, blocks_opt, &selected, spec.source, &splits.train.samples)?;
                let det = dnr_train(&train, &splits.train.labels, splits.train.class_count, &cfg.svm_config())?;
                save_dnr(&det, &dir.join(format!("dnr_{}.ucan", spec.source.name())))?;
            }
        }
    }
    Ok(())
}

fn grid_config(cfg: &RunConfig) -> Result<GridConfig> {
    Ok(GridConfig {
        attacks: cfg
            .eval_attacks
            .iter()
            .map(|a| AttackKind::from_name(a))
            .collect::<Result<_>>()?,
        epsilons: cfg.eval_epsilons.clone(),
        seeds: cfg.eval_seeds.clone(),
        detectors: detector_specs(),
        successful_only: cfg.successful_only,
        attack: cfg.attack_config(cfg.epsilon, cfg.attack_seed)?,
        dknn_k: cfg.dknn_k,
        svm: cfg.svm_config(),
        max_test: cfg.max_test,
    })
}

/// Stage 7: score every detector on the persisted attack batches.
pub fn stage_evaluate(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let splits = load_splits(out)?;
    let model = load_backbone(out)?;
    let blocks = load_aux(out)?;
    let selected = load_selection(out)?;
    let gcfg = grid_config(cfg)?;
    let mut batches: Vec<(AttackKind, u64, AdvBatch)> = Vec::new();
    for name in &cfg.eval_attacks {
        let kind = AttackKind::from_name(name)?;
        for (ei, _) in cfg.eval_epsilons.iter().enumerate() {
            for &seed in &cfg.eval_seeds {
                let path = batch_path(out, name, ei, seed);
                require(&path)?;
                batches.push((kind, seed, load_batch(&path)?));
            }
        }
    }
    let report = evaluate_batches(&model, &blocks, &selected, &splits, &gcfg, &batches)?;
    write_report_json(&report, &out.join("report.json"))?;
    write_report_csv(&report, &out.join("report.csv"))?;
    Ok(report)
}

pub fn load_report(out: &Path) -> Result<EvalReport> {
    let path = out.join("report.json");
    require(&path)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
}

/// Stage 8: re-emit the CSV, averaged PR plots, and overhead accounting
/// from the persisted report.
pub fn stage_report(_cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = load_report(out)?;
    write_report_csv(&report, &out.join("report.csv"))?;
    write_pr_svg(&report, out)?;
    let model = load_backbone(out)?;
    let blocks = load_aux(out)?;
    let overhead = overhead_report(&model, &blocks)?;
    write_json(&out.join("overhead.json"), &serde_json::to_value(&overhead)?)
}

/// Stage 9: per-batch latency of raw-DKNN vs U-CAN+DKNN scoring.
/// Timing lands in its own file so the evaluation reports stay reproducible.
pub fn stage_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(out)?;
    let model = load_backbone(out)?;
    let blocks = load_aux(out)?;
    let selected = load_selection(out)?;
    let batch: Vec<_> = splits
        .test
        .samples
        .iter()
        .cycle()
        .take(cfg.bench_batch)
        .cloned()
        .collect();
    let mut stats = Vec::new();
    for source in [FeatureSource::RawTaps, FeatureSource::UcanEmbedding] {
        let train = extract_dataset(&model, Some(&blocks), &selected, source, &splits.train.samples)?;
        let calib = extract_dataset(&model, Some(&blocks), &selected, source, &splits.calib.samples)?;
        let det = dknn_build(
            &train,
            &splits.train.labels,
            &calib,
            &splits.calib.labels,
            splits.train.class_count,
            cfg.dknn_k,
        )?;
        let label = format!("dknn_{}", source.name());
        let s = latency_bench(&label, cfg.bench_batch, cfg.bench_iterations, || {
            for x in &batch {
                let f = crate::detectors::extract_features(&model, Some(&blocks), &selected, source, x)?;
                crate::detectors::dknn_score(&det, &f)?;
            }
            Ok(())
        })?;
        stats.push(s);
    }
    write_json(&out.join("bench.json"), &serde_json::to_value(&stats)?)
}

/// Runs all stages in order (Algorithm-1 order: refine, select, detect).
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<()> {
    stage_gen_data(cfg, out)?;
    stage_train_backbone(cfg, out)?;
    stage_train_aux(cfg, out)?;
    stage_select_layers(cfg, out)?;
    stage_attack(cfg, out)?;
    stage_build_detector(cfg, out)?;
    stage_evaluate(cfg, out)?;
    stage_report(cfg, out)?;
    stage_bench(cfg, out)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            classes: 2,
            per_class: 16,
            image_size: 8,
            separation: 0.95,
            backbone_epochs: 4,
            aux_epochs: 3,
            steps: 3,
            ada_steps: 3,
            select_count: 2,
            eval_attacks: vec!["pgd".into()],
            eval_epsilons: vec![16.0 / 255.0],
            eval_seeds: vec![0],
            bench_iterations: 1,
            ..Default::default()
        }
    }

    #[test]
    fn full_pipeline_and_rerun_determinism() {
        let cfg = tiny_config();
        let dir = std::env::temp_dir().join("ucan_pipeline_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        run_all(&cfg, &dir).unwrap();
        for artifact in [
            "dataset.ucan",
            "backbone.ucan",
            "aux.ucan",
            "selection.json",
            "report.csv",
            "report.json",
            "overhead.json",
            "bench.json",
        ] {
            assert!(dir.join(artifact).exists(), "missing {artifact}");
        }
        let csv1 = std::fs::read(dir.join("report.csv")).unwrap();

        let dir2 = std::env::temp_dir().join("ucan_pipeline_test_rerun");
        let _ = std::fs::remove_dir_all(&dir2);
        std::fs::create_dir_all(&dir2).unwrap();
        run_all(&cfg, &dir2).unwrap();
        let csv2 = std::fs::read(dir2.join("report.csv")).unwrap();
        assert_eq!(csv1, csv2, "pipeline rerun must be byte-identical");
    }

    #[test]
    fn evaluate_without_attack_artifacts_names_the_missing_file() {
        let cfg = tiny_config();
        let dir = std::env::temp_dir().join("ucan_pipeline_missing");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        stage_gen_data(&cfg, &dir).unwrap();
        stage_train_backbone(&cfg, &dir).unwrap();
        stage_train_aux(&cfg, &dir).unwrap();
        stage_select_layers(&cfg, &dir).unwrap();
        match stage_evaluate(&cfg, &dir) {
            Err(UcanError::Data(msg)) => assert!(msg.contains("missing artifact")),
            other => panic!("expected missing-artifact error, got {other:?}"),
        }
    }
}
