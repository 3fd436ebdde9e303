//! Diagnostic: per-layer kNN vote behavior for raw taps vs refined
//! embeddings on benign and adversarial inputs.

use ucan::arcface::{init_aux_blocks, layer_scores, select_layers, train_aux, ArcFaceConfig, SelectionPolicy, TrainAuxConfig};
use ucan::attacks::{pgd, cw_linf, AttackConfig};
use ucan::backbone::{train_backbone, BackboneModel, BackboneSpec, TrainConfig};
use ucan::data::{gen_synthetic, split_dataset};
use ucan::detectors::{dknn_build, dknn_score, extract_dataset, FeatureSource};

fn main() -> ucan::Result<()> {
    let ds = gen_synthetic(4, 90, 16, 0.14, 7)?;
    let splits = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 7)?;
    let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 16, 16], 4), 11)?;
    train_backbone(&mut model, &splits.train, &splits.val, &TrainConfig { seed: 11, ..Default::default() })?;
    model.freeze();
    let acfg = ArcFaceConfig { embed_dim: 16, scale: 64.0, margin: 0.5, class_count: 4 };
    let mut blocks = init_aux_blocks(&model, acfg, 13)?;
    let aep: usize = std::env::var("AEP").map(|v| v.parse().unwrap()).unwrap_or(10);
    let alr: f64 = std::env::var("ALR").map(|v| v.parse().unwrap()).unwrap_or(0.002);
    train_aux(&model, &mut blocks, &splits.train, &splits.val, &TrainAuxConfig { seed: 13, epochs: aep, learning_rate: alr, ..Default::default() })?;
    let (scores, tcs) = layer_scores(&model, &blocks, &splits.val)?;
    let selected = select_layers(&scores, SelectionPolicy::TopS(4))?;
    println!("tcs {tcs:.4} selected {selected:?}");

    let cfg = AttackConfig { epsilon: 16.0 / 255.0, seed: 0, ..Default::default() };
    let batch_pgd = pgd(&model, &splits.test.samples, &splits.test.labels, &cfg)?;
    let batch_cw = cw_linf(&model, &splits.test.samples, &splits.test.labels, &cfg)?;

    // per-layer purity: single-layer detectors
    for source in [FeatureSource::RawTaps, FeatureSource::UcanEmbedding] {
        for &layer in &selected {
            let b = Some(blocks.as_slice());
            let sel = [layer];
            let train_f = extract_dataset(&model, b, &sel, source, &splits.train.samples)?;
            let calib_f = extract_dataset(&model, b, &sel, source, &splits.calib.samples)?;
            let det = dknn_build(&train_f, &splits.train.labels, &calib_f, &splits.calib.labels, 4, 5)?;
            let cmean = det.calib_scores.iter().sum::<usize>() as f64 / det.calib_scores.len() as f64;
            let stats = |samples: &[ucan::tensor::Tensor], labels: &[usize]| -> ucan::Result<(f64, f64)> {
                let feats = extract_dataset(&model, b, &sel, source, samples)?;
                let mut nsum = 0.0;
                let mut vote_true = 0.0;
                for (f, &y) in feats.iter().zip(labels) {
                    let o = dknn_score(&det, f)?;
                    nsum += o.nonconformity as f64;
                    if o.predicted == y { vote_true += 1.0; }
                }
                Ok((nsum / feats.len() as f64, vote_true / feats.len() as f64))
            };
            let (bn, bt) = stats(&splits.test.samples, &splits.test.labels)?;
            let (pn, pt) = stats(&batch_pgd.adversarial, &batch_pgd.labels)?;
            let (cn, ct) = stats(&batch_cw.adversarial, &batch_cw.labels)?;
            println!(
                "{:>14} layer {layer}: calib {cmean:.2} | benign {bn:.2}/{bt:.2} | pgd {pn:.2}/{pt:.2} | cw {cn:.2}/{ct:.2}",
                source.name()
            );
        }
    }

    for source in [FeatureSource::RawTaps, FeatureSource::UcanEmbedding] {
        let b = Some(blocks.as_slice());
        let train_f = extract_dataset(&model, b, &selected, source, &splits.train.samples)?;
        let calib_f = extract_dataset(&model, b, &selected, source, &splits.calib.samples)?;
        let det = dknn_build(&train_f, &splits.train.labels, &calib_f, &splits.calib.labels, 4, 5)?;
        let cmean = det.calib_scores.iter().sum::<usize>() as f64 / det.calib_scores.len() as f64;
        let cmax = *det.calib_scores.iter().max().unwrap();
        println!("\n== {} == calib nonconf mean {cmean:.2} max {cmax}", source.name());

        for (name, samples, labels) in [
            ("benign", &splits.test.samples, &splits.test.labels),
            ("pgd   ", &batch_pgd.adversarial, &batch_pgd.labels),
            ("cw    ", &batch_cw.adversarial, &batch_cw.labels),
        ] {
            let feats = extract_dataset(&model, b, &selected, source, samples)?;
            let mut nsum = 0.0;
            let mut score_sum = 0.0;
            let mut pred_true = 0;
            let mut pred_model = 0;
            let mut n_evaded = 0; // fooled model but nonconf <= calib max
            let mut fooled = 0;
            for ((f, &y), x) in feats.iter().zip(labels).zip(samples) {
                let o = dknn_score(&det, f)?;
                nsum += o.nonconformity as f64;
                score_sum += o.adversarial_score();
                let yhat = model.predict(x)?;
                if o.predicted == y { pred_true += 1; }
                if o.predicted == yhat { pred_model += 1; }
                if yhat != y {
                    fooled += 1;
                    if o.nonconformity <= cmax { n_evaded += 1; }
                }
            }
            let n = feats.len() as f64;
            println!(
                "{name}: mean nonconf {:.2}, mean score {:.3}, knn-pred=true {:.2}, knn-pred=model {:.2}, fooled {fooled}, evaded {n_evaded}",
                nsum / n, score_sum / n, pred_true as f64 / n, pred_model as f64 / n
            );
        }
    }
    Ok(())
}
