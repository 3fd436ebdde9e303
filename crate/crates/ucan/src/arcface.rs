//! Auxiliary refinement blocks and their angular-margin training.
//!
//! Each block projects one tapped feature map (1x1 conv, global average
//! pool, l2-normalize) onto a unit hypersphere anchored by learnable class
//! centers. Cosine scores against the normalized centers feed a margin
//! softmax loss; the per-layer losses are averaged into the global training
//! objective. Separation quality is tracked with the total cosine similarity
//! (TCS) statistic, which also drives layer-subset selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::backbone::{balanced_order, BackboneModel, EpochLog, TrainLog};
use crate::data::LabeledDataset;
use crate::error::{Result, UcanError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Tensor, EPS_NORM};
use crate::weights::{self, Section};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcFaceConfig {
    /// Hypersphere scale factor applied to every cosine logit.
    pub scale: f64,
    /// Additive angular margin (radians) on the true-class angle only.
    pub margin: f64,
    pub embed_dim: usize,
    pub class_count: usize,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self { scale: 64.0, margin: 0.5, embed_dim: 16, class_count: 2 }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(UcanError::Config("scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(UcanError::Config("margin must lie in [0, pi/2)".into()));
        }
        if self.embed_dim < 2 || self.class_count < 2 {
            return Err(UcanError::Config("embed_dim and class_count must be >= 2".into()));
        }
        Ok(())
    }
}

/// One refinement head. Class-center rows are stored unnormalized and
/// normalized on use.
#[derive(Debug, Clone)]
pub struct AuxBlock {
    /// 1-based tap index into the backbone.
    pub layer_index: usize,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub w_arc: Tensor,
    pub config: ArcFaceConfig,
}

impl AuxBlock {
    pub fn init(layer_index: usize, in_channels: usize, config: ArcFaceConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let bound = 1.0 / (in_channels as f64).sqrt();
        let w_proj = Tensor::new(
            vec![d, in_channels],
            (0..d * in_channels).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        let b_proj = Tensor::zeros(vec![d]);
        // Random unit rows as initial class centers.
        let mut arc = Vec::with_capacity(config.class_count * d);
        for _ in 0..config.class_count {
            let row: Vec<f64> = (0..d)
                .map(|_| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            arc.extend(row.iter().map(|v| v / norm));
        }
        let w_arc = Tensor::new(vec![config.class_count, d], arc)?;
        Ok(Self { layer_index, w_proj, b_proj, w_arc, config })
    }

    pub fn in_channels(&self) -> usize {
        self.w_proj.shape[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.w_proj.numel() + self.b_proj.numel() + self.w_arc.numel()
    }
}

/// Parameter node ids for one block inside a graph episode.
pub struct AuxNodeIds {
    pub w_proj: NodeId,
    pub b_proj: NodeId,
    pub w_arc: NodeId,
}

pub fn insert_aux_params(g: &mut Graph, block: &AuxBlock) -> AuxNodeIds {
    AuxNodeIds {
        w_proj: g.leaf(&block.w_proj),
        b_proj: g.leaf(&block.b_proj),
        w_arc: g.leaf(&block.w_arc),
    }
}

/// Projection chain on the graph: 1x1 conv, global average pool, l2-norm.
/// Vector taps are treated as C x 1 x 1 maps.
pub fn aux_forward_graph(g: &mut Graph, ids: &AuxNodeIds, z: NodeId) -> Result<NodeId> {
    let z3 = match g.shape(z).len() {
        3 => z,
        1 => {
            let c = g.shape(z)[0];
            g.reshape(z, vec![c, 1, 1])?
        }
        r => return Err(UcanError::Dimension(format!("aux input rank {r}, expected 1 or 3"))),
    };
    let projected = g.conv1x1(z3, ids.w_proj, ids.b_proj)?;
    let pooled = g.global_avg_pool(projected)?;
    g.l2_normalize(pooled)
}

/// Unit-norm refined embedding for one tapped feature map.
pub fn aux_forward(block: &AuxBlock, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = insert_aux_params(&mut g, block);
    let zid = g.leaf(z);
    let p = aux_forward_graph(&mut g, &ids, zid)?;
    Ok(g.value(p))
}

/// Cosine scores of a unit embedding against the normalized class centers.
pub fn cosine_scores(block: &AuxBlock, p: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.leaf(&block.w_arc);
    let pid = g.leaf(p);
    let cs = g.cosine_scores(w, pid)?;
    Ok(g.value(cs))
}

/// Margin softmax loss over cosine scores (scalar convenience path).
pub fn arcface_loss(cs: &Tensor, y: usize, cfg: &ArcFaceConfig) -> Result<f64> {
    let mut g = Graph::new();
    let csid = g.leaf(cs);
    let logits = g.arcface_logits(csid, y, cfg.scale, cfg.margin)?;
    let loss = g.softmax_xent(logits, y)?;
    Ok(g.data(loss)[0])
}

/// Mean of the per-layer losses.
pub fn global_loss(per_layer: &[f64]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(UcanError::Contract("global loss over empty layer list".into()));
    }
    Ok(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerScore {
    /// 1-based tap index.
    pub k: usize,
    pub cs_plus: f64,
    pub cs_minus: f64,
    pub cs_avg: f64,
}

/// Builds one aux block per backbone tap.
pub fn init_aux_blocks(model: &BackboneModel, cfg: ArcFaceConfig, seed: u64) -> Result<Vec<AuxBlock>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .spec
        .tap_channels()?
        .iter()
        .enumerate()
        .map(|(i, &c)| AuxBlock::init(i + 1, c, cfg, &mut rng))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TrainAuxConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainAuxConfig {
    fn default() -> Self {
        Self { epochs: 10, learning_rate: 0.002, momentum: 0.9, batch_size: 16, seed: 0 }
    }
}

fn cache_taps(model: &BackboneModel, ds: &LabeledDataset) -> Result<Vec<Vec<Tensor>>> {
    ds.samples
        .iter()
        .map(|x| model.forward_with_taps(x).map(|(_, taps)| taps))
        .collect()
}

/// Channel means of one tap (the part of the tap an aux block can see after
/// its global average pool).
fn channel_means(tap: &Tensor, channels: usize) -> Vec<f64> {
    let spatial = tap.numel() / channels;
    (0..channels)
        .map(|c| tap.data[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64)
        .collect()
}

/// Centers each block's projection bias on the training features:
/// b = -W_proj * mean(channel means). Removes the common-mode component so
/// initial embeddings spread over the sphere instead of clustering.
fn center_projection(blocks: &mut [AuxBlock], mu_bar: &[Vec<f64>]) {
    for (block, mu) in blocks.iter_mut().zip(mu_bar) {
        let (d, c) = (block.w_proj.shape[0], block.w_proj.shape[1]);
        for i in 0..d {
            let dot: f64 = (0..c).map(|j| block.w_proj.data[i * c + j] * mu[j]).sum();
            block.b_proj.data[i] = -dot;
        }
    }
}

/// Seeds each class-center row with the normalized mean embedding of its
/// class under the current projection. Training then starts next to the
/// aligned optimum instead of near the anti-aligned saddle, where the margin
/// softmax saturates and weakly separated layers get stuck. Classes absent
/// from the training set keep their random init.
fn seed_centers(blocks: &mut [AuxBlock], taps: &[Vec<Tensor>], labels: &[usize]) -> Result<()> {
    for (b, block) in blocks.iter_mut().enumerate() {
        let d = block.config.embed_dim;
        let mut sums = vec![vec![0.0; d]; block.config.class_count];
        let mut counts = vec![0usize; block.config.class_count];
        for (sample_taps, &y) in taps.iter().zip(labels) {
            let p = aux_forward(block, &sample_taps[b])?;
            counts[y] += 1;
            for (a, v) in sums[y].iter_mut().zip(&p.data) {
                *a += v;
            }
        }
        for (y, sum) in sums.iter().enumerate() {
            if counts[y] == 0 {
                continue;
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > EPS_NORM {
                for (w, v) in block.w_arc.data[y * d..(y + 1) * d].iter_mut().zip(sum) {
                    *w = v / norm;
                }
            }
        }
    }
    Ok(())
}

/// Rescales (W_proj, b_proj) so the median pre-normalization pooled vector
/// has unit norm, and renormalizes the class-center rows. Both are exact
/// no-ops for the forward pass (the l2-normalize and the row normalization
/// in cosine_scores absorb any positive scaling); they only keep gradient
/// magnitudes well conditioned, since the normalize backward scales by the
/// reciprocal of the pre-normalization norm.
fn recondition(blocks: &mut [AuxBlock], mus: &[Vec<Vec<f64>>]) {
    for (b, block) in blocks.iter_mut().enumerate() {
        let (d, c) = (block.w_proj.shape[0], block.w_proj.shape[1]);
        let mut norms: Vec<f64> = mus[b]
            .iter()
            .map(|mu| {
                (0..d)
                    .map(|i| {
                        let v: f64 = (0..c).map(|j| block.w_proj.data[i * c + j] * mu[j]).sum::<f64>()
                            + block.b_proj.data[i];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        norms.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let med = norms[norms.len() / 2];
        if med > EPS_NORM {
            block.w_proj.data.iter_mut().for_each(|v| *v /= med);
            block.b_proj.data.iter_mut().for_each(|v| *v /= med);
        }
        let dim = block.config.embed_dim;
        for row in 0..block.config.class_count {
            let r = &mut block.w_arc.data[row * dim..(row + 1) * dim];
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > EPS_NORM {
                r.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

/// Trains every aux block simultaneously on the frozen backbone's taps,
/// driven by the mean of the per-layer margin losses. The backbone never
/// changes; its taps are cached once up front.
pub fn train_aux(
    model: &BackboneModel,
    blocks: &mut [AuxBlock],
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainAuxConfig,
) -> Result<TrainLog> {
    if !model.frozen {
        return Err(UcanError::Contract("backbone must be frozen before aux training".into()));
    }
    if blocks.len() != model.spec.tap_shapes()?.len() {
        return Err(UcanError::Contract(format!(
            "{} blocks for {} taps",
            blocks.len(),
            model.spec.tap_shapes()?.len()
        )));
    }
    if train.is_empty() {
        return Err(UcanError::Data("empty aux training set".into()));
    }
    let backbone_checksum = model.checksum();
    if cfg.epochs == 0 {
        return Ok(TrainLog::default());
    }
    let taps = cache_taps(model, train)?;
    let val_taps = cache_taps(model, val)?;

    // Per-block channel means of every training tap, reused by the
    // conditioning steps below.
    let mus: Vec<Vec<Vec<f64>>> = (0..blocks.len())
        .map(|b| taps.iter().map(|t| channel_means(&t[b], blocks[b].in_channels())).collect())
        .collect();
    let mu_bar: Vec<Vec<f64>> = mus
        .iter()
        .map(|per_sample| {
            let c = per_sample[0].len();
            let mut acc = vec![0.0; c];
            for mu in per_sample {
                for (a, v) in acc.iter_mut().zip(mu) {
                    *a += v / per_sample.len() as f64;
                }
            }
            acc
        })
        .collect();
    center_projection(blocks, &mu_bar);
    recondition(blocks, &mus);
    seed_centers(blocks, &taps, &train.labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<[Vec<f64>; 3]> = blocks
        .iter()
        .map(|b| {
            [
                vec![0.0; b.w_proj.numel()],
                vec![0.0; b.b_proj.numel()],
                vec![0.0; b.w_arc.numel()],
            ]
        })
        .collect();

    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let order = balanced_order(&train.labels, train.class_count, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads: Vec<[Vec<f64>; 3]> = blocks
                .iter()
                .map(|b| {
                    [
                        vec![0.0; b.w_proj.numel()],
                        vec![0.0; b.b_proj.numel()],
                        vec![0.0; b.w_arc.numel()],
                    ]
                })
                .collect();
            for &i in batch {
                let y = train.labels[i];
                let mut g = Graph::new();
                let mut losses = Vec::with_capacity(blocks.len());
                let mut ids = Vec::with_capacity(blocks.len());
                for (b, block) in blocks.iter().enumerate() {
                    let nid = insert_aux_params(&mut g, block);
                    let z = g.leaf(&taps[i][b]);
                    let p = aux_forward_graph(&mut g, &nid, z)?;
                    let cs = g.cosine_scores(nid.w_arc, p)?;
                    let logits = g.arcface_logits(cs, y, block.config.scale, block.config.margin)?;
                    losses.push(g.softmax_xent(logits, y)?);
                    ids.push(nid);
                }
                let total = g.sum_scalars(&losses)?;
                let loss = g.scale(total, 1.0 / blocks.len() as f64);
                let loss_val = g.data(loss)[0];
                if !loss_val.is_finite() {
                    return Err(UcanError::Data("non-finite aux training loss".into()));
                }
                epoch_loss += loss_val;
                g.backward(loss)?;
                for (b, nid) in ids.iter().enumerate() {
                    for (acc, v) in grads[b][0].iter_mut().zip(g.grad(nid.w_proj)) {
                        *acc += v;
                    }
                    for (acc, v) in grads[b][1].iter_mut().zip(g.grad(nid.b_proj)) {
                        *acc += v;
                    }
                    for (acc, v) in grads[b][2].iter_mut().zip(g.grad(nid.w_arc)) {
                        *acc += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (b, block) in blocks.iter_mut().enumerate() {
                let tensors = [&mut block.w_proj, &mut block.b_proj, &mut block.w_arc];
                for (slot, t) in tensors.into_iter().enumerate() {
                    // Clip each tensor's batch gradient to unit norm: the
                    // margin softmax emits gradients of magnitude ~scale s,
                    // and unclipped steps knock weakly separated layers into
                    // the anti-aligned basin they cannot leave.
                    let gnorm = grads[b][slot].iter().map(|g| (g * scale).powi(2)).sum::<f64>().sqrt();
                    let clip = 1.0 / gnorm.max(1.0);
                    for ((vel, p), gv) in velocity[b][slot]
                        .iter_mut()
                        .zip(t.data.iter_mut())
                        .zip(&grads[b][slot])
                    {
                        *vel = cfg.momentum * *vel - cfg.learning_rate * gv * scale * clip;
                        *p += *vel;
                    }
                }
            }
        }
        let tcs = if val.is_empty() {
            0.0
        } else {
            layer_scores_from_taps(blocks, &val_taps, &val.labels)?.1
        };
        log.epochs.push(EpochLog { loss: epoch_loss / train.len() as f64, val_metric: tcs });
    }
    debug_assert_eq!(model.checksum(), backbone_checksum);
    Ok(log)
}

/// Per-layer separation statistics over a labeled set, plus their mean (TCS).
pub fn layer_scores(
    model: &BackboneModel,
    blocks: &[AuxBlock],
    valset: &LabeledDataset,
) -> Result<(Vec<LayerScore>, f64)> {
    if valset.is_empty() {
        return Err(UcanError::Data("layer scores need a non-empty set".into()));
    }
    let taps = cache_taps(model, valset)?;
    layer_scores_from_taps(blocks, &taps, &valset.labels)
}

fn layer_scores_from_taps(
    blocks: &[AuxBlock],
    taps: &[Vec<Tensor>],
    labels: &[usize],
) -> Result<(Vec<LayerScore>, f64)> {
    let n = taps.len();
    let mut scores = Vec::with_capacity(blocks.len());
    let mut tcs_acc = 0.0;
    for (b, block) in blocks.iter().enumerate() {
        let cl = block.config.class_count;
        let (mut plus, mut minus) = (0.0, 0.0);
        for (sample_taps, &y) in taps.iter().zip(labels) {
            if y >= cl {
                return Err(UcanError::Data(format!("label {y} out of range")));
            }
            let p = aux_forward(block, &sample_taps[b])?;
            let cs = cosine_scores(block, &p)?;
            plus += cs.data[y];
            minus += cs
                .data
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y)
                .map(|(_, v)| v)
                .sum::<f64>()
                / (cl - 1) as f64;
        }
        let cs_plus = plus / n as f64;
        let cs_minus = minus / n as f64;
        let cs_avg = (cs_plus - cs_minus) / 2.0;
        tcs_acc += cs_avg;
        scores.push(LayerScore { k: block.layer_index, cs_plus, cs_minus, cs_avg });
    }
    Ok((scores, tcs_acc / blocks.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// The S layers with the highest cs_avg; ties go to the lower index.
    TopS(usize),
    /// The contiguous suffix {s..N} (1-based offset).
    Offset(usize),
}

/// Returns the selected 1-based tap indices in ascending order.
pub fn select_layers(scores: &[LayerScore], policy: SelectionPolicy) -> Result<Vec<usize>> {
    let n = scores.len();
    match policy {
        SelectionPolicy::TopS(s) => {
            if s == 0 || s > n {
                return Err(UcanError::Contract(format!("top-S with S={s} over {n} layers")));
            }
            let mut ranked: Vec<&LayerScore> = scores.iter().collect();
            ranked.sort_by(|a, b| {
                b.cs_avg
                    .partial_cmp(&a.cs_avg)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.k.cmp(&b.k))
            });
            let mut picked: Vec<usize> = ranked[..s].iter().map(|ls| ls.k).collect();
            picked.sort_unstable();
            Ok(picked)
        }
        SelectionPolicy::Offset(s) => {
            if s == 0 || s > n {
                return Err(UcanError::Contract(format!("offset {s} out of 1..={n}")));
            }
            Ok((s..=n).collect())
        }
    }
}

// --- persistence ------------------------------------------------------------

pub fn save_aux_blocks(blocks: &[AuxBlock], path: &Path) -> Result<()> {
    if blocks.is_empty() {
        return Err(UcanError::Contract("no aux blocks to save".into()));
    }
    let cfg = blocks[0].config;
    let mut meta = vec![
        cfg.embed_dim as f64,
        cfg.scale,
        cfg.margin,
        cfg.class_count as f64,
        blocks.len() as f64,
    ];
    meta.extend(blocks.iter().map(|b| b.layer_index as f64));
    let n = meta.len();
    let mut sections = vec![Section::new("aux_meta", vec![Tensor::new(vec![n], meta)?])];
    for (i, b) in blocks.iter().enumerate() {
        sections.push(Section::new(
            format!("aux_{i}"),
            vec![b.w_proj.clone(), b.b_proj.clone(), b.w_arc.clone()],
        ));
    }
    weights::write_container(path, &sections)
}

pub fn load_aux_blocks(path: &Path) -> Result<Vec<AuxBlock>> {
    let sections = weights::read_container(path)?;
    let meta = &weights::section(&sections, "aux_meta")?
        .tensors
        .first()
        .ok_or_else(|| UcanError::Format("empty aux_meta".into()))?
        .data;
    if meta.len() < 5 {
        return Err(UcanError::Format("aux_meta too short".into()));
    }
    let config = ArcFaceConfig {
        embed_dim: meta[0] as usize,
        scale: meta[1],
        margin: meta[2],
        class_count: meta[3] as usize,
    };
    config.validate()?;
    let count = meta[4] as usize;
    if meta.len() != 5 + count {
        return Err(UcanError::Format("aux_meta layer list length mismatch".into()));
    }
    let mut blocks = Vec::with_capacity(count);
    for i in 0..count {
        let s = weights::section(&sections, &format!("aux_{i}"))?;
        let [w_proj, b_proj, w_arc] = match s.tensors.as_slice() {
            [a, b, c] => [a.clone(), b.clone(), c.clone()],
            _ => return Err(UcanError::Format(format!("aux_{i} must hold 3 tensors"))),
        };
        blocks.push(AuxBlock {
            layer_index: meta[5 + i] as usize,
            w_proj,
            b_proj,
            w_arc,
            config,
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;

    fn block(d: usize, cl: usize, c_in: usize) -> AuxBlock {
        let cfg = ArcFaceConfig { embed_dim: d, class_count: cl, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        AuxBlock::init(1, c_in, cfg, &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ArcFaceConfig::default().validate().err().is_none());
        assert!(ArcFaceConfig { margin: 1.6, ..Default::default() }.validate().is_err());
        assert!(ArcFaceConfig { scale: 0.0, ..Default::default() }.validate().is_err());
        assert!(ArcFaceConfig { embed_dim: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn aux_forward_unit_norm() {
        let b = block(4, 3, 2);
        let z = Tensor::new(vec![2, 3, 3], (0..18).map(|i| 0.1 + i as f64 * 0.05).collect()).unwrap();
        let p = aux_forward(&b, &z).unwrap();
        assert!((p.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn aux_forward_identity_projection() {
        // identity projection of a constant map normalizes the constant vector
        let cfg = ArcFaceConfig { embed_dim: 2, class_count: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = AuxBlock::init(1, 2, cfg, &mut rng).unwrap();
        b.w_proj = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        b.b_proj = Tensor::zeros(vec![2]);
        let z = Tensor::new(vec![2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0, 4.0]).unwrap();
        let p = aux_forward(&b, &z).unwrap();
        assert!((p.data[0] - 0.6).abs() < 1e-12);
        assert!((p.data[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_score_self_similarity() {
        let mut b = block(3, 2, 2);
        b.w_arc = Tensor::new(vec![2, 3], vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        let p = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let cs = cosine_scores(&b, &p).unwrap();
        assert!((cs.data[0] - 1.0).abs() < 1e-12);
        assert!(cs.data[1].abs() < 1e-12);
    }

    #[test]
    fn arcface_zero_margin_reduces_to_softmax() {
        let cfg = ArcFaceConfig { scale: 7.0, margin: 0.0, embed_dim: 4, class_count: 3 };
        let cs = Tensor::new(vec![3], vec![0.3, -0.2, 0.7]).unwrap();
        let loss = arcface_loss(&cs, 2, &cfg).unwrap();
        let mut g = Graph::new();
        let csid = g.leaf(&cs);
        let scaled = g.scale(csid, 7.0);
        let plain = g.softmax_xent(scaled, 2).unwrap();
        assert!((loss - g.data(plain)[0]).abs() < 1e-12);
    }

    #[test]
    fn arcface_two_class_closed_form() {
        // CL=2, CS=(cos 0, -1), s=64, m=0.5: loss = log(1 + e^{64 (-1 - cos 0.5)})
        let cfg = ArcFaceConfig { scale: 64.0, margin: 0.5, embed_dim: 2, class_count: 2 };
        let lim = 1.0 - Graph::ARCCOS_CLAMP;
        let cs = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let loss = arcface_loss(&cs, 0, &cfg).unwrap();
        // the true-class cosine is clamped before arccos
        let theta = lim.acos();
        let expected = (1.0 + (64.0 * (-1.0 - (theta + 0.5).cos())).exp()).ln();
        assert!((loss - expected).abs() < 1e-10);
        assert!(loss.abs() < 1e-10);
    }

    #[test]
    fn arcface_uniform_scores_zero_margin() {
        let cfg = ArcFaceConfig { scale: 64.0, margin: 0.0, embed_dim: 4, class_count: 5 };
        let cs = Tensor::new(vec![5], vec![0.4; 5]).unwrap();
        let loss = arcface_loss(&cs, 1, &cfg).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn margin_never_decreases_true_class_loss() {
        let cfg0 = ArcFaceConfig { scale: 8.0, margin: 0.0, embed_dim: 4, class_count: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let cs = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-0.95..0.95)).collect()).unwrap();
            let y = rng.gen_range(0..4);
            let m = rng.gen_range(0.01..1.5);
            if cs.data[y].acos() + m > std::f64::consts::PI {
                continue;
            }
            let base = arcface_loss(&cs, y, &cfg0).unwrap();
            let with_margin =
                arcface_loss(&cs, y, &ArcFaceConfig { margin: m, ..cfg0 }).unwrap();
            assert!(with_margin >= base - 1e-12, "margin {m} lowered loss");
        }
    }

    #[test]
    fn printed_scale_placement_is_a_noop() {
        // A scale factor multiplying every exponential cancels out of the
        // softmax ratio, so that form is algebraically identical to s = 1.
        // The implemented form therefore scales inside the exponent instead.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let cl = 4;
            let cs: Vec<f64> = (0..cl).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let y = rng.gen_range(0..cl);
            let m = 0.3;
            let s = rng.gen_range(1.0..100.0);
            let theta_y = cs[y].clamp(-1.0, 1.0).acos();
            let num = |scale: f64| scale * (theta_y + m).cos().exp();
            let den = |scale: f64| {
                num(scale)
                    + cs.iter()
                        .enumerate()
                        .filter(|(j, _)| *j != y)
                        .map(|(_, &c)| scale * c.clamp(-1.0, 1.0).acos().cos().exp())
                        .sum::<f64>()
            };
            let loss_s = -(num(s) / den(s)).ln();
            let loss_1 = -(num(1.0) / den(1.0)).ln();
            assert!((loss_s - loss_1).abs() <= 1e-12);
        }
    }

    #[test]
    fn global_loss_mean() {
        assert!((global_loss(&[2.0, 2.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((global_loss(&[3.5]).unwrap() - 3.5).abs() < 1e-15);
        assert!(global_loss(&[]).is_err());
        let vals = [0.25, 1.5, -0.75, 2.0];
        let oracle: f64 = vals.iter().sum::<f64>() / 4.0;
        assert!((global_loss(&vals).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn select_layers_policies() {
        let mk = |k, avg| LayerScore { k, cs_plus: 0.0, cs_minus: 0.0, cs_avg: avg };
        let scores = vec![mk(1, 0.1), mk(2, 0.5), mk(3, 0.9)];
        assert_eq!(select_layers(&scores, SelectionPolicy::TopS(2)).unwrap(), vec![2, 3]);
        assert_eq!(select_layers(&scores, SelectionPolicy::Offset(2)).unwrap(), vec![2, 3]);
        let tie = vec![mk(1, 0.5), mk(2, 0.5), mk(3, 0.1)];
        assert_eq!(select_layers(&tie, SelectionPolicy::TopS(1)).unwrap(), vec![1]);
        assert!(select_layers(&scores, SelectionPolicy::TopS(4)).is_err());
        assert!(select_layers(&scores, SelectionPolicy::Offset(0)).is_err());
        // top-N returns every layer
        assert_eq!(select_layers(&scores, SelectionPolicy::TopS(3)).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn offset_and_top_agree_for_nondecreasing_scores() {
        let mk = |k, avg| LayerScore { k, cs_plus: 0.0, cs_minus: 0.0, cs_avg: avg };
        let scores = vec![mk(1, 0.1), mk(2, 0.2), mk(3, 0.8), mk(4, 0.9)];
        for s in 1..=4usize {
            let top = select_layers(&scores, SelectionPolicy::TopS(4 - s + 1)).unwrap();
            let off = select_layers(&scores, SelectionPolicy::Offset(s)).unwrap();
            assert_eq!(top, off);
        }
    }

    #[test]
    fn tcs_invariant_under_joint_relabeling() {
        use crate::data::gen_synthetic;
        let mut model =
            crate::backbone::BackboneModel::init(BackboneSpec::small_cnn([1, 8, 8], 3), 2).unwrap();
        model.freeze();
        let ds = gen_synthetic(3, 4, 8, 0.9, 5).unwrap();
        let blocks = init_aux_blocks(&model, ArcFaceConfig { class_count: 3, embed_dim: 4, ..Default::default() }, 1).unwrap();
        let (_, tcs) = layer_scores(&model, &blocks, &ds).unwrap();

        // permute classes 0<->1 together with the matching center rows
        let perm = [1usize, 0, 2];
        let relabeled = LabeledDataset::new(
            ds.samples.clone(),
            ds.labels.iter().map(|&l| perm[l]).collect(),
            3,
        )
        .unwrap();
        let mut permuted = blocks.clone();
        for b in permuted.iter_mut() {
            let d = b.config.embed_dim;
            let old = b.w_arc.data.clone();
            for (from, &to) in perm.iter().enumerate() {
                b.w_arc.data[to * d..(to + 1) * d].copy_from_slice(&old[from * d..(from + 1) * d]);
            }
        }
        let (_, tcs2) = layer_scores(&model, &permuted, &relabeled).unwrap();
        assert!((tcs - tcs2).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join("ucan_aux_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("aux.ucan");
        let blocks = vec![block(4, 3, 2), block(4, 3, 5)];
        save_aux_blocks(&blocks, &path).unwrap();
        let loaded = load_aux_blocks(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].in_channels(), 5);
        for (a, b) in loaded.iter().zip(&blocks) {
            assert_eq!(a.layer_index, b.layer_index);
            for (x, y) in a.w_arc.data.iter().zip(&b.w_arc.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
