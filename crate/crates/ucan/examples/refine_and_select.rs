//! Attaches auxiliary ArcFace blocks to a frozen backbone, trains them,
//! and scores each tap layer: per-layer CS+/CS-/CS_avg plus the total
//! contrastive separability (TCS) before and after refinement, ending with
//! the layer selection used by the detectors.
//!
//! ```sh
//! cargo run --example refine_and_select
//! ```

use ucan::arcface::{
    init_aux_blocks, layer_scores, select_layers, train_aux, ArcFaceConfig, SelectionPolicy,
    TrainAuxConfig,
};
use ucan::backbone::{train_backbone, BackboneModel, BackboneSpec, TrainConfig};
use ucan::data::{gen_synthetic, split_dataset};

fn main() -> ucan::Result<()> {
    let ds = gen_synthetic(4, 90, 16, 0.85, 7)?;
    let splits = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 7)?;
    let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 16, 16], 4), 11)?;
    train_backbone(&mut model, &splits.train, &splits.val, &TrainConfig { seed: 11, ..Default::default() })?;
    model.freeze();
    println!("backbone val accuracy: {:.3}", model.accuracy(&splits.val)?);

    let acfg = ArcFaceConfig { embed_dim: 16, scale: 64.0, margin: 0.5, class_count: 4 };
    let mut blocks = init_aux_blocks(&model, acfg, 13)?;
    let (_, tcs_before) = layer_scores(&model, &blocks, &splits.val)?;
    println!("TCS before refinement: {tcs_before:.4}");

    let tcfg = TrainAuxConfig { seed: 13, ..Default::default() };
    let log = train_aux(&model, &mut blocks, &splits.train, &splits.val, &tcfg)?;
    for (i, e) in log.epochs.iter().enumerate() {
        println!("epoch {:2}: global loss {:.4}  val TCS {:.4}", i + 1, e.loss, e.val_metric);
    }

    let (scores, tcs) = layer_scores(&model, &blocks, &splits.val)?;
    println!("TCS after refinement:  {tcs:.4}");
    for s in &scores {
        println!(
            "layer {:2}: CS+ {:+.4}  CS- {:+.4}  CS_avg {:+.4}",
            s.k, s.cs_plus, s.cs_minus, s.cs_avg
        );
    }
    let selected = select_layers(&scores, SelectionPolicy::TopS(4))?;
    println!("selected layers (top-4 by CS_avg): {selected:?}");
    Ok(())
}
