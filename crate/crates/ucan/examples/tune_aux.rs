//! Scratch probe: sweep aux-training hyperparameters (temporary).

use ucan::arcface::{init_aux_blocks, layer_scores, train_aux, ArcFaceConfig, TrainAuxConfig};
use ucan::backbone::{train_backbone, BackboneModel, BackboneSpec, TrainConfig};
use ucan::data::{gen_synthetic, split_dataset};

fn main() -> ucan::Result<()> {
    let sep: f64 = std::env::var("SEP").map(|v| v.parse().unwrap()).unwrap_or(0.85);
    let ds = gen_synthetic(4, 90, 16, sep, 7)?;
    let splits = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 7)?;
    let mut model = BackboneModel::init(BackboneSpec::small_cnn([1, 16, 16], 4), 11)?;
    train_backbone(&mut model, &splits.train, &splits.val, &TrainConfig { seed: 11, ..Default::default() })?;
    model.freeze();

    let lr: f64 = std::env::var("LR").map(|v| v.parse().unwrap()).unwrap_or(0.001);
    let epochs: usize = std::env::var("EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(20);
    let scale: f64 = std::env::var("SCALE").map(|v| v.parse().unwrap()).unwrap_or(64.0);
    let momentum: f64 = std::env::var("MOM").map(|v| v.parse().unwrap()).unwrap_or(0.9);

    let acfg = ArcFaceConfig { embed_dim: 16, scale, margin: 0.5, class_count: 4 };
    let mut blocks = init_aux_blocks(&model, acfg, 13)?;

    if std::env::var("PROBE").is_ok() {
        // nearest-class-centroid accuracy in channel-mean space, per layer
        let gap = |tap: &ucan::Tensor, c: usize| -> Vec<f64> {
            let spatial = tap.numel() / c;
            (0..c)
                .map(|ch| tap.data[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>() / spatial as f64)
                .collect()
        };
        let nlayers = blocks.len();
        for b in 0..nlayers {
            let c = blocks[b].in_channels();
            let feats: Vec<Vec<f64>> = splits
                .train
                .samples
                .iter()
                .map(|x| gap(&model.forward_with_taps(x).unwrap().1[b], c))
                .collect();
            let mut centroids = vec![vec![0.0; c]; 4];
            let mut counts = [0usize; 4];
            for (f, &y) in feats.iter().zip(&splits.train.labels) {
                counts[y] += 1;
                for (a, v) in centroids[y].iter_mut().zip(f) {
                    *a += v;
                }
            }
            for (cent, &n) in centroids.iter_mut().zip(&counts) {
                cent.iter_mut().for_each(|v| *v /= n as f64);
            }
            let vfeats: Vec<Vec<f64>> = splits
                .val
                .samples
                .iter()
                .map(|x| gap(&model.forward_with_taps(x).unwrap().1[b], c))
                .collect();
            let mut correct = 0;
            for (f, &y) in vfeats.iter().zip(&splits.val.labels) {
                let pred = (0..4)
                    .min_by(|&i, &j| {
                        let di: f64 = centroids[i].iter().zip(f).map(|(a, v)| (a - v).powi(2)).sum();
                        let dj: f64 = centroids[j].iter().zip(f).map(|(a, v)| (a - v).powi(2)).sum();
                        di.partial_cmp(&dj).unwrap()
                    })
                    .unwrap();
                if pred == y {
                    correct += 1;
                }
            }
            println!("layer {}: centroid val acc {:.3}", b + 1, correct as f64 / splits.val.len() as f64);
        }
        return Ok(());
    }

    if std::env::var("CENTER").is_ok() {
        // data-dependent bias init: b = -W * mean(channel means) per block
        let mut mean_taps: Vec<Vec<f64>> = blocks
            .iter()
            .map(|b| vec![0.0; b.in_channels()])
            .collect();
        for x in &splits.train.samples {
            let (_, taps) = model.forward_with_taps(x)?;
            for (acc, tap) in mean_taps.iter_mut().zip(&taps) {
                let c = acc.len();
                let spatial = tap.numel() / c;
                for (ch, a) in acc.iter_mut().enumerate() {
                    let s: f64 = tap.data[ch * spatial..(ch + 1) * spatial].iter().sum();
                    *a += s / spatial as f64 / splits.train.len() as f64;
                }
            }
        }
        for (block, mu) in blocks.iter_mut().zip(&mean_taps) {
            let (d, c) = (block.w_proj.shape[0], block.w_proj.shape[1]);
            for i in 0..d {
                let dot: f64 = (0..c).map(|j| block.w_proj.data[i * c + j] * mu[j]).sum();
                block.b_proj.data[i] = -dot;
            }
        }
        if std::env::var("NORM").is_ok() {
            // rescale so pooled pre-normalization vectors start near unit norm
            for (b, block) in blocks.iter_mut().enumerate() {
                let mut norms: Vec<f64> = splits
                    .train
                    .samples
                    .iter()
                    .map(|x| {
                        let tap = &model.forward_with_taps(x).unwrap().1[b];
                        let c = block.in_channels();
                        let spatial = tap.numel() / c;
                        let (d, cc) = (block.w_proj.shape[0], block.w_proj.shape[1]);
                        let mu: Vec<f64> = (0..c)
                            .map(|ch| tap.data[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>() / spatial as f64)
                            .collect();
                        (0..d)
                            .map(|i| {
                                let v: f64 = (0..cc).map(|j| block.w_proj.data[i * cc + j] * mu[j]).sum::<f64>()
                                    + block.b_proj.data[i];
                                v * v
                            })
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = norms[norms.len() / 2].max(1e-9);
                block.w_proj.data.iter_mut().for_each(|v| *v /= med);
                block.b_proj.data.iter_mut().for_each(|v| *v /= med);
                println!("  layer {}: init pooled norm median {med:.3e}", b + 1);
            }
        }
    }
    if std::env::var("GEOM").is_ok() {
        for (b, block) in blocks.iter().enumerate() {
            let embs: Vec<Vec<f64>> = splits
                .train
                .samples
                .iter()
                .map(|x| {
                    let tap = &model.forward_with_taps(x).unwrap().1[b];
                    ucan::arcface::aux_forward(block, tap).unwrap().data
                })
                .collect();
            let (mut win, mut bet, mut nw, mut nb) = (0.0, 0.0, 0usize, 0usize);
            for i in 0..embs.len() {
                for j in (i + 1)..embs.len() {
                    let cos: f64 = embs[i].iter().zip(&embs[j]).map(|(a, v)| a * v).sum();
                    if splits.train.labels[i] == splits.train.labels[j] {
                        win += cos;
                        nw += 1;
                    } else {
                        bet += cos;
                        nb += 1;
                    }
                }
            }
            println!(
                "layer {}: init within-cos {:.4}  between-cos {:.4}",
                b + 1,
                win / nw as f64,
                bet / nb as f64
            );
        }
        return Ok(());
    }

    let (_, tcs0) = layer_scores(&model, &blocks, &splits.val)?;
    let tcfg = TrainAuxConfig { epochs, learning_rate: lr, momentum, batch_size: 16, seed: 13 };
    let log = train_aux(&model, &mut blocks, &splits.train, &splits.val, &tcfg)?;
    let (scores, tcs) = layer_scores(&model, &blocks, &splits.val)?;
    println!(
        "lr={lr} mom={momentum} s={scale} epochs={epochs}: tcs {tcs0:.4} -> {tcs:.4}  final loss {:.4}",
        log.epochs.last().unwrap().loss
    );
    for s in &scores {
        println!("  layer {}: CS+ {:+.4} CS- {:+.4} avg {:+.4}", s.k, s.cs_plus, s.cs_minus, s.cs_avg);
    }
    Ok(())
}
