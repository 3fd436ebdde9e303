//! Generates adversarial batches with PGD, L-inf C&W, and the adaptive
//! ADA-DKNN attack against a trained backbone, reporting accuracy before and
//! after plus per-attack success rates.
//!
//! ```sh
//! cargo run --release --example run_attacks
//! ```

use ucan::arcface::{init_aux_blocks, train_aux, ArcFaceConfig, TrainAuxConfig};
use ucan::attacks::{ada_dknn, attack_success_rate, cw_linf, pgd, AttackConfig};
use ucan::backbone::{train_backbone, BackboneModel, BackboneSpec, TrainConfig};
use ucan::data::{gen_synthetic, split_dataset};

fn main() -> ucan::Result<()> {
    let sep: f64 = std::env::var("SEP").map(|v| v.parse().unwrap()).unwrap_or(0.14);
    let ds = gen_synthetic(4, 90, 16, sep, 7)?;
    println!("separation {sep}");
    let splits = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 7)?;
    let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 16, 16], 4), 11)?;
    let blr: f64 = std::env::var("BLR").map(|v| v.parse().unwrap()).unwrap_or(0.02);
    let bep: usize = std::env::var("BEP").map(|v| v.parse().unwrap()).unwrap_or(60);
    train_backbone(&mut model, &splits.train, &splits.val, &TrainConfig { seed: 11, epochs: bep, learning_rate: blr, ..Default::default() })?;
    model.freeze();
    println!("clean test accuracy: {:.3}", model.accuracy(&splits.test)?);

    let test = &splits.test;
    for eps in [8.0 / 255.0, 16.0 / 255.0] {
        let steps: usize = std::env::var("STEPS").map(|v| v.parse().unwrap()).unwrap_or(200);
        let cfg = AttackConfig { epsilon: eps, steps, seed: 0, ..Default::default() };
        let batch = pgd(&model, &test.samples, &test.labels, &cfg)?;
        let correct = batch
            .adversarial
            .iter()
            .zip(&batch.labels)
            .filter(|(x, &y)| model.predict(x).unwrap() == y)
            .count();
        println!(
            "pgd     eps {:.4}: success rate {:.3}, adversarial accuracy {:.3}",
            eps,
            attack_success_rate(&batch, &model)?,
            correct as f64 / batch.len() as f64
        );

        let batch = cw_linf(&model, &test.samples, &test.labels, &cfg)?;
        println!(
            "cw_linf eps {:.4}: success rate {:.3}",
            eps,
            attack_success_rate(&batch, &model)?
        );
    }

    // the adaptive attack also needs the refined embeddings and calib set
    let acfg = ArcFaceConfig { embed_dim: 16, scale: 64.0, margin: 0.5, class_count: 4 };
    let mut blocks = init_aux_blocks(&model, acfg, 13)?;
    train_aux(&model, &mut blocks, &splits.train, &splits.val, &TrainAuxConfig { seed: 13, ..Default::default() })?;
    let cfg = AttackConfig { epsilon: 16.0 / 255.0, steps: 400, seed: 0, ..Default::default() };
    let batch = ada_dknn(&model, &blocks, &splits.calib, &test.samples, &test.labels, &cfg)?;
    println!(
        "ada_dknn eps {:.4}: success rate {:.3}",
        cfg.epsilon,
        attack_success_rate(&batch, &model)?
    );
    Ok(())
}
