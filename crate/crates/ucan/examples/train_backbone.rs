//! Trains the small CNN backbone on the reference synthetic dataset and
//! reports per-epoch loss plus validation accuracy.
//!
//! ```sh
//! cargo run --example train_backbone
//! ```

use ucan::backbone::{train_backbone, BackboneModel, BackboneSpec, TrainConfig};
use ucan::data::{gen_synthetic, split_dataset};

fn main() -> ucan::Result<()> {
    let ds = gen_synthetic(4, 90, 16, 0.85, 7)?;
    let splits = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 7)?;
    println!(
        "dataset: {} train / {} val / {} calib / {} test",
        splits.train.len(),
        splits.val.len(),
        splits.calib.len(),
        splits.test.len()
    );

    let spec = BackboneSpec::small_cnn([1, 16, 16], 4);
    let mut model = BackboneModel::init(spec, 11)?;
    let cfg = TrainConfig { epochs: 30, seed: 11, ..Default::default() };
    let log = train_backbone(&mut model, &splits.train, &splits.val, &cfg)?;
    for (i, e) in log.epochs.iter().enumerate() {
        println!("epoch {:2}: loss {:.4}  val acc {:.3}", i + 1, e.loss, e.val_metric);
    }
    model.freeze();
    println!("test accuracy: {:.3}", model.accuracy(&splits.test)?);
    Ok(())
}
