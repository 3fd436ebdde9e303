//! Runs the full detection grid: every detector scores benign test inputs
//! and the adversarial batches of each (attack, epsilon, seed) cell, and the
//! per-cell best F1 plus the per-detector means are printed as CSV.
//!
//! ```sh
//! cargo run --release --example evaluate_grid
//! ```

use ucan::arcface::{init_aux_blocks, layer_scores, select_layers, train_aux, ArcFaceConfig, SelectionPolicy, TrainAuxConfig};
use ucan::backbone::{train_backbone, BackboneModel, BackboneSpec, TrainConfig};
use ucan::data::{gen_synthetic, split_dataset};
use ucan::eval::{evaluate_grid, report_csv, GridConfig};

fn main() -> ucan::Result<()> {
    let sep: f64 = std::env::var("SEP").map(|v| v.parse().unwrap()).unwrap_or(0.14);
    let dseed: u64 = std::env::var("DSEED").map(|v| v.parse().unwrap()).unwrap_or(7);
    let ds = gen_synthetic(4, 90, 16, sep, dseed)?;
    let splits = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], dseed)?;
    let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 16, 16], 4), 11)?;
    train_backbone(&mut model, &splits.train, &splits.val, &TrainConfig { seed: 11, ..Default::default() })?;
    model.freeze();

    let acfg = ArcFaceConfig { embed_dim: 16, scale: 64.0, margin: 0.5, class_count: 4 };
    let mut blocks = init_aux_blocks(&model, acfg, 13)?;
    train_aux(&model, &mut blocks, &splits.train, &splits.val, &TrainAuxConfig { seed: 13, ..Default::default() })?;
    let (scores, tcs) = layer_scores(&model, &blocks, &splits.val)?;
    let selected = select_layers(&scores, SelectionPolicy::TopS(4))?;
    eprintln!("tcs {tcs:.4}, selected {selected:?}");

    let cfg = GridConfig { seeds: vec![0, 1, 2], ..Default::default() };
    let report = evaluate_grid(&model, &blocks, &selected, &splits, &cfg)?;
    print!("{}", report_csv(&report));

    let acc = model.accuracy(&splits.test)?;
    let succ = |attack: &str, eps: f64| -> f64 {
        let rows: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.attack == attack && (c.epsilon - eps).abs() < 1e-6)
            .map(|c| c.success_rate)
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let dknn_gap = report.mean_f1("dknn", "ucan_embedding").unwrap() - report.mean_f1("dknn", "raw").unwrap();
    let dnr_gap = report.mean_f1("dnr", "ucan_logits").unwrap() - report.mean_f1("dnr", "raw").unwrap();
    eprintln!(
        "SUMMARY acc {acc:.3} tcs {tcs:.3} | pgd8 {:.2} pgd16 {:.2} cw8 {:.2} cw16 {:.2} | dknn {:.3} vs {:.3} gap {:+.1} | dnr {:.3} vs {:.3} gap {:+.1}",
        succ("pgd", 8.0 / 255.0),
        succ("pgd", 16.0 / 255.0),
        succ("cw_linf", 8.0 / 255.0),
        succ("cw_linf", 16.0 / 255.0),
        report.mean_f1("dknn", "ucan_embedding").unwrap(),
        report.mean_f1("dknn", "raw").unwrap(),
        100.0 * dknn_gap,
        report.mean_f1("dnr", "ucan_logits").unwrap(),
        report.mean_f1("dnr", "raw").unwrap(),
        100.0 * dnr_gap,
    );
    Ok(())
}
