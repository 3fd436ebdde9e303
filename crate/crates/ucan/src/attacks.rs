//! White-box evasion attacks under an l-infinity pixel budget.
//!
//! Three attacks share one budget contract: every adversarial sample stays
//! inside the epsilon-ball around its original and inside the [0, 1] pixel
//! box. PGD takes signed gradient steps from a random start; the budgeted
//! C&W variant optimizes a tanh-reparameterized perturbation with Adam and
//! re-projects each iteration; the adaptive attack additionally pulls the
//! refined embeddings toward calibration neighbors of a wrong class to fool
//! nearest-neighbor detectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::arcface::{aux_forward_graph, insert_aux_params, AuxBlock};
use crate::backbone::BackboneModel;
use crate::data::LabeledDataset;
use crate::error::{Result, UcanError};
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::weights::{self, Section};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// l-infinity budget in pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size for signed-gradient attacks; defaults to epsilon / 8.
    pub alpha: Option<f64>,
    pub random_start: bool,
    /// C&W trade-off constant between perturbation size and margin.
    pub cw_c: f64,
    pub cw_kappa: f64,
    pub cw_lr: f64,
    /// Neighbor count per layer for the adaptive attack.
    pub ada_m: usize,
    /// Weight of the neighbor-distance term.
    pub ada_lambda: f64,
    /// Iterations between neighbor refreshes.
    pub ada_refresh: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            steps: 200,
            alpha: None,
            random_start: true,
            cw_c: 0.5,
            cw_kappa: 0.0,
            cw_lr: 1e-3,
            ada_m: 100,
            ada_lambda: 1.0,
            ada_refresh: 50,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(UcanError::Config("epsilon must lie in [0, 1]".into()));
        }
        if let Some(a) = self.alpha {
            if a < 0.0 {
                return Err(UcanError::Config("alpha must be non-negative".into()));
            }
        }
        if self.cw_c <= 0.0 || self.cw_lr <= 0.0 {
            return Err(UcanError::Config("cw_c and cw_lr must be positive".into()));
        }
        if self.cw_kappa < 0.0 {
            return Err(UcanError::Config("kappa must be non-negative".into()));
        }
        if self.ada_m == 0 || self.ada_refresh == 0 {
            return Err(UcanError::Config("ada_m and ada_refresh must be >= 1".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 8.0)
    }
}

/// Attack output: originals, perturbed samples, and their true labels.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub attack: String,
    pub epsilon: f64,
    pub originals: Vec<Tensor>,
    pub adversarial: Vec<Tensor>,
    pub labels: Vec<usize>,
}

pub const BUDGET_SLACK: f64 = 1e-9;

impl AdvBatch {
    /// Checks the budget and box invariants that every attack guarantees.
    pub fn validate(&self) -> Result<()> {
        if self.originals.len() != self.adversarial.len()
            || self.originals.len() != self.labels.len()
        {
            return Err(UcanError::Contract("adv batch length mismatch".into()));
        }
        for (o, a) in self.originals.iter().zip(&self.adversarial) {
            if o.shape != a.shape {
                return Err(UcanError::Contract("adv sample shape drift".into()));
            }
            for (&ov, &av) in o.data.iter().zip(&a.data) {
                if (av - ov).abs() > self.epsilon + BUDGET_SLACK {
                    return Err(UcanError::Contract(format!(
                        "budget violated: |{av} - {ov}| > {}",
                        self.epsilon
                    )));
                }
                if !(-BUDGET_SLACK..=1.0 + BUDGET_SLACK).contains(&av) {
                    return Err(UcanError::Contract(format!("pixel {av} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.adversarial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adversarial.is_empty()
    }

    /// Indicator per sample: does the model now predict a wrong class?
    pub fn success_mask(&self, model: &BackboneModel) -> Result<Vec<bool>> {
        self.adversarial
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| Ok(model.predict(x)? != y))
            .collect()
    }
}

/// Fraction of adversarial samples the model misclassifies.
pub fn attack_success_rate(batch: &AdvBatch, model: &BackboneModel) -> Result<f64> {
    if batch.is_empty() {
        return Err(UcanError::Data("empty adversarial batch".into()));
    }
    let mask = batch.success_mask(model)?;
    Ok(mask.iter().filter(|&&s| s).count() as f64 / mask.len() as f64)
}

fn project(adv: &mut [f64], orig: &[f64], epsilon: f64) {
    for (a, &o) in adv.iter_mut().zip(orig) {
        *a = a.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

/// Loss value and input gradient of cross-entropy at (x, y).
fn ce_input_grad(model: &BackboneModel, x: &Tensor, y: usize) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xid = g.leaf(&x.clone().with_grad());
    let (logits, _) = model.forward_graph(&mut g, xid)?;
    let loss = g.softmax_xent(logits, y)?;
    g.backward(loss)?;
    Ok((g.data(loss)[0], g.grad(xid).to_vec()))
}

fn per_sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Projected gradient descent with signed steps and a random start.
pub fn pgd(
    model: &BackboneModel,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(UcanError::Contract("inputs/labels length mismatch".into()));
    }
    let alpha = cfg.step_size();
    let mut adversarial = Vec::with_capacity(inputs.len());
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        if cfg.epsilon == 0.0 {
            adversarial.push(x.clone());
            continue;
        }
        let mut rng = per_sample_rng(cfg.seed, i);
        let mut adv = x.data.clone();
        if cfg.random_start {
            for v in adv.iter_mut() {
                *v += rng.gen_range(-cfg.epsilon..cfg.epsilon);
            }
            project(&mut adv, &x.data, cfg.epsilon);
        }
        // track the highest-loss iterate: the final iterate may have stepped
        // back inside the decision region it already escaped
        let mut best = adv.clone();
        let mut best_loss = f64::NEG_INFINITY;
        for _ in 0..cfg.steps {
            let t = Tensor::new(x.shape.clone(), adv.clone())?;
            let (loss, grad) = ce_input_grad(model, &t, y)?;
            if loss > best_loss {
                best_loss = loss;
                best = adv.clone();
            }
            for (a, g) in adv.iter_mut().zip(&grad) {
                *a += alpha * g.signum();
            }
            project(&mut adv, &x.data, cfg.epsilon);
        }
        let t = Tensor::new(x.shape.clone(), adv.clone())?;
        let (loss, _) = ce_input_grad(model, &t, y)?;
        if loss > best_loss {
            best = adv;
        }
        adversarial.push(Tensor::new(x.shape.clone(), best)?);
    }
    let batch = AdvBatch {
        attack: "pgd".into(),
        epsilon: cfg.epsilon,
        originals: inputs.to_vec(),
        adversarial,
        labels: labels.to_vec(),
    };
    batch.validate()?;
    Ok(batch)
}

const TANH_CLAMP: f64 = 1e-6;

fn to_logit_space(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| (2.0 * v.clamp(TANH_CLAMP, 1.0 - TANH_CLAMP) - 1.0).atanh())
        .collect()
}

/// Budgeted Carlini-Wagner attack: Adam on a tanh-reparameterized image,
/// minimizing ||delta||^2 + c * margin, re-projected to the epsilon-ball
/// (and back into tanh space) every iteration.
pub fn cw_linf(
    model: &BackboneModel,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(UcanError::Contract("inputs/labels length mismatch".into()));
    }
    let (b1, b2, eps_adam) = (0.9, 0.999, 1e-8);
    let mut adversarial = Vec::with_capacity(inputs.len());
    for (x, &y) in inputs.iter().zip(labels) {
        if cfg.steps == 0 || cfg.epsilon == 0.0 {
            adversarial.push(x.clone());
            continue;
        }
        let n = x.numel();
        let mut w = to_logit_space(&x.data);
        let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
        let mut best = x.data.clone();
        let mut best_obj = f64::INFINITY;
        let mut best_dist = f64::INFINITY;
        let mut succeeded = false;
        for t in 1..=cfg.steps {
            let adv: Vec<f64> = w.iter().map(|&v| 0.5 * (v.tanh() + 1.0)).collect();
            // loss and gradient w.r.t. the adversarial image
            let mut g = Graph::new();
            let xt = Tensor::new(x.shape.clone(), adv.clone())?.with_grad();
            let xid = g.leaf(&xt);
            let (logits, _) = model.forward_graph(&mut g, xid)?;
            let margin = g.cw_margin(logits, y, cfg.cw_kappa)?;
            let dist_node = g.sq_dist_to_const(xid, &x.data)?;
            let weighted = g.scale(margin, cfg.cw_c);
            let total = g.add(dist_node, weighted)?;
            let obj = g.data(total)[0];
            // raw logit gap: negative exactly when the label has flipped
            let ld = g.data(logits);
            let gap = ld[y]
                - ld.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != y)
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
            g.backward(total)?;
            let gx = g.grad(xid);
            // keep the successful candidate with the smallest perturbation;
            // before any success, fall back to the lowest joint objective
            let dist = g.data(dist_node)[0];
            if gap < 0.0 {
                if !succeeded || dist < best_dist {
                    best = adv.clone();
                    best_dist = dist;
                }
                succeeded = true;
            } else if !succeeded && obj < best_obj {
                best_obj = obj;
                best = adv.clone();
            }
            // chain rule through x = (tanh(w) + 1) / 2 and one Adam step
            for i in 0..n {
                let gw = gx[i] * 0.5 * (1.0 - w[i].tanh().powi(2));
                m1[i] = b1 * m1[i] + (1.0 - b1) * gw;
                m2[i] = b2 * m2[i] + (1.0 - b2) * gw * gw;
                let mh = m1[i] / (1.0 - b1.powi(t as i32));
                let vh = m2[i] / (1.0 - b2.powi(t as i32));
                w[i] -= cfg.cw_lr * mh / (vh.sqrt() + eps_adam);
            }
            // pull back inside the budget, then return to tanh space
            let mut proj: Vec<f64> = w.iter().map(|&v| 0.5 * (v.tanh() + 1.0)).collect();
            project(&mut proj, &x.data, cfg.epsilon);
            w = to_logit_space(&proj);
        }
        project(&mut best, &x.data, cfg.epsilon);
        adversarial.push(Tensor::new(x.shape.clone(), best)?);
    }
    let batch = AdvBatch {
        attack: "cw_linf".into(),
        epsilon: cfg.epsilon,
        originals: inputs.to_vec(),
        adversarial,
        labels: labels.to_vec(),
    };
    batch.validate()?;
    Ok(batch)
}

/// Per-layer refined embeddings of one sample, flattened per layer.
fn embed_all(model: &BackboneModel, blocks: &[AuxBlock], x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (_, taps) = model.forward_with_taps(x)?;
    blocks
        .iter()
        .map(|b| crate::arcface::aux_forward(b, &taps[b.layer_index - 1]).map(|t| t.data))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Adaptive attack against nearest-neighbor detectors in the refined
/// embedding space. Picks the wrong class whose calibration embeddings are
/// closest, then alternates signed-gradient steps on a joint objective:
/// cross-entropy toward that class plus lambda times the mean squared
/// distance to the current m nearest calibration embeddings of that class
/// at every selected layer. Neighbor sets refresh every `ada_refresh` steps.
pub fn ada_dknn(
    model: &BackboneModel,
    blocks: &[AuxBlock],
    calib: &LabeledDataset,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(UcanError::Contract("inputs/labels length mismatch".into()));
    }
    if calib.is_empty() {
        return Err(UcanError::Data("adaptive attack needs calibration data".into()));
    }
    // precompute calibration embeddings once; the backbone and blocks are fixed
    let calib_embed: Vec<Vec<Vec<f64>>> = calib
        .samples
        .iter()
        .map(|x| embed_all(model, blocks, x))
        .collect::<Result<_>>()?;
    let alpha = cfg.step_size();
    let mut adversarial = Vec::with_capacity(inputs.len());
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        if cfg.epsilon == 0.0 {
            adversarial.push(x.clone());
            continue;
        }
        let mut rng = per_sample_rng(cfg.seed, i);
        let mut adv = x.data.clone();
        if cfg.random_start {
            for v in adv.iter_mut() {
                *v += rng.gen_range(-cfg.epsilon..cfg.epsilon);
            }
            project(&mut adv, &x.data, cfg.epsilon);
        }
        // target: wrong class of the closest calibration embedding overall
        let own = embed_all(model, blocks, x)?;
        let target = calib_embed
            .iter()
            .zip(&calib.labels)
            .filter(|(_, &cy)| cy != y)
            .min_by(|(ea, _), (eb, _)| {
                let da: f64 = ea.iter().zip(&own).map(|(a, b)| sq_dist(a, b)).sum();
                let db: f64 = eb.iter().zip(&own).map(|(a, b)| sq_dist(a, b)).sum();
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(_, &cy)| cy)
            .ok_or_else(|| UcanError::Data("calibration set has a single class".into()))?;
        let target_idx: Vec<usize> = (0..calib.len()).filter(|&j| calib.labels[j] == target).collect();

        let mut neighbors: Vec<Vec<usize>> = Vec::new();
        for step in 0..cfg.steps {
            let t = Tensor::new(x.shape.clone(), adv.clone())?.with_grad();
            if step % cfg.ada_refresh == 0 {
                // m nearest target-class calibration embeddings per layer
                let cur = embed_all(model, blocks, &t)?;
                neighbors = (0..blocks.len())
                    .map(|l| {
                        let mut order: Vec<usize> = target_idx.clone();
                        order.sort_by(|&a, &b| {
                            sq_dist(&calib_embed[a][l], &cur[l])
                                .partial_cmp(&sq_dist(&calib_embed[b][l], &cur[l]))
                                .unwrap_or(std::cmp::Ordering::Equal)
                                .then(a.cmp(&b))
                        });
                        order.truncate(cfg.ada_m.min(order.len()));
                        order
                    })
                    .collect();
            }
            let mut g = Graph::new();
            let xid = g.leaf(&t);
            let (logits, taps) = model.forward_graph(&mut g, xid)?;
            let ce = g.softmax_xent(logits, target)?;
            let mut terms = vec![ce];
            let mut dist_count = 0usize;
            let mut dists = Vec::new();
            for (l, block) in blocks.iter().enumerate() {
                let ids = insert_aux_params(&mut g, block);
                let p = aux_forward_graph(&mut g, &ids, taps[block.layer_index - 1])?;
                for &j in &neighbors[l] {
                    dists.push(g.sq_dist_to_const(p, &calib_embed[j][l])?);
                    dist_count += 1;
                }
            }
            if dist_count > 0 {
                let sum = g.sum_scalars(&dists)?;
                terms.push(g.scale(sum, cfg.ada_lambda / dist_count as f64));
            }
            let total = g.sum_scalars(&terms)?;
            g.backward(total)?;
            let grad = g.grad(xid);
            // descend: both terms are minimized
            for (a, gv) in adv.iter_mut().zip(grad) {
                *a -= alpha * gv.signum();
            }
            project(&mut adv, &x.data, cfg.epsilon);
        }
        adversarial.push(Tensor::new(x.shape.clone(), adv)?);
    }
    let batch = AdvBatch {
        attack: "ada_dknn".into(),
        epsilon: cfg.epsilon,
        originals: inputs.to_vec(),
        adversarial,
        labels: labels.to_vec(),
    };
    batch.validate()?;
    Ok(batch)
}

// --- persistence ------------------------------------------------------------

/// Saves a batch to the weight container plus a JSON sidecar with the attack
/// name and budget. Samples are stored at f32 precision; on load they are
/// re-projected onto the budget so the batch invariants survive rounding.
pub fn save_batch(batch: &AdvBatch, path: &Path) -> Result<()> {
    let labels = Tensor::new(
        vec![batch.labels.len()],
        batch.labels.iter().map(|&l| l as f64).collect(),
    )?;
    let sections = vec![
        Section::new("adv_meta", vec![Tensor::new(vec![1], vec![batch.epsilon])?]),
        Section::new("labels", vec![labels]),
        Section::new("originals", batch.originals.clone()),
        Section::new("adversarial", batch.adversarial.clone()),
    ];
    weights::write_container(path, &sections)?;
    let sidecar = serde_json::json!({
        "attack": batch.attack,
        "epsilon": batch.epsilon,
        "count": batch.len(),
    });
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<AdvBatch> {
    let sections = weights::read_container(path)?;
    let epsilon = weights::section(&sections, "adv_meta")?
        .tensors
        .first()
        .and_then(|t| t.data.first().copied())
        .ok_or_else(|| UcanError::Format("missing epsilon in adv_meta".into()))?;
    let labels: Vec<usize> = weights::section(&sections, "labels")?
        .tensors
        .first()
        .ok_or_else(|| UcanError::Format("missing labels tensor".into()))?
        .data
        .iter()
        .map(|&v| v as usize)
        .collect();
    let originals = weights::section(&sections, "originals")?.tensors.clone();
    let mut adversarial = weights::section(&sections, "adversarial")?.tensors.clone();
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let attack = sidecar
        .get("attack")
        .and_then(|v| v.as_str())
        .ok_or_else(|| UcanError::Format("sidecar missing attack name".into()))?
        .to_string();
    if originals.len() != adversarial.len() || originals.len() != labels.len() {
        return Err(UcanError::Format("batch section lengths disagree".into()));
    }
    for (a, o) in adversarial.iter_mut().zip(&originals) {
        if a.shape != o.shape {
            return Err(UcanError::Format("sample shape mismatch across sections".into()));
        }
        project(&mut a.data, &o.data, epsilon);
    }
    let batch = AdvBatch { attack, epsilon, originals, adversarial, labels };
    batch.validate()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{train_backbone, BackboneSpec, TrainConfig};
    use crate::data::gen_synthetic;

    fn linear_model() -> BackboneModel {
        // single dense layer: logits = W x + b, so attack oracles are closed-form
        use crate::backbone::LayerSpec;
        let spec = BackboneSpec {
            input_shape: vec![4],
            class_count: 2,
            layers: vec![LayerSpec::Dense { out: 2 }],
        };
        let w = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 0.0, -1.0, 2.0, -0.5, 0.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        BackboneModel { spec, params: vec![Some((w, b))], frozen: true }
    }

    fn trained_small_model() -> (BackboneModel, LabeledDataset) {
        let ds = gen_synthetic(2, 12, 8, 0.95, 3).unwrap();
        let mut m = BackboneModel::init(BackboneSpec::small_cnn([1, 8, 8], 2), 11).unwrap();
        let cfg = TrainConfig { epochs: 6, seed: 1, ..Default::default() };
        train_backbone(&mut m, &ds, &ds, &cfg).unwrap();
        m.freeze();
        (m, ds)
    }

    #[test]
    fn zero_epsilon_returns_bit_equal_originals() {
        let m = linear_model();
        let x = Tensor::new(vec![4], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let cfg = AttackConfig { epsilon: 0.0, steps: 5, ..Default::default() };
        for batch in [
            pgd(&m, &[x.clone()], &[0], &cfg).unwrap(),
            cw_linf(&m, &[x.clone()], &[0], &cfg).unwrap(),
        ] {
            assert_eq!(batch.adversarial[0].data, x.data);
        }
    }

    #[test]
    fn fgsm_matches_closed_form_on_linear_model() {
        // one unprojected-start step of size alpha is exactly
        // x + alpha * sign(W^T (softmax(Wx + b) - e_y))
        let m = linear_model();
        let x = Tensor::new(vec![4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = 0usize;
        let eps = 0.1;
        let cfg = AttackConfig {
            epsilon: eps,
            steps: 1,
            alpha: Some(eps),
            random_start: false,
            ..Default::default()
        };
        let batch = pgd(&m, &[x.clone()], &[y], &cfg).unwrap();

        let w = [[1.0, -2.0, 0.5, 0.0], [-1.0, 2.0, -0.5, 0.0]];
        let z: Vec<f64> = w.iter().map(|row| row.iter().zip(&x.data).map(|(a, b)| a * b).sum()).collect();
        let zmax = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let resid = [p[0] - 1.0, p[1]];
        for i in 0..4 {
            let g: f64 = resid[0] * w[0][i] + resid[1] * w[1][i];
            let expect = (x.data[i] + eps * g.signum()).clamp(0.0, 1.0);
            assert!((batch.adversarial[0].data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pgd_respects_budget_and_box() {
        let (m, ds) = trained_small_model();
        let cfg = AttackConfig { epsilon: 16.0 / 255.0, steps: 10, ..Default::default() };
        let batch = pgd(&m, &ds.samples[..6], &ds.labels[..6], &cfg).unwrap();
        batch.validate().unwrap();
        for (o, a) in batch.originals.iter().zip(&batch.adversarial) {
            let linf = o.data.iter().zip(&a.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(linf <= cfg.epsilon + BUDGET_SLACK);
        }
    }

    #[test]
    fn pgd_is_deterministic_per_seed() {
        let (m, ds) = trained_small_model();
        let cfg = AttackConfig { epsilon: 8.0 / 255.0, steps: 5, seed: 42, ..Default::default() };
        let a = pgd(&m, &ds.samples[..3], &ds.labels[..3], &cfg).unwrap();
        let b = pgd(&m, &ds.samples[..3], &ds.labels[..3], &cfg).unwrap();
        for (x, y) in a.adversarial.iter().zip(&b.adversarial) {
            assert_eq!(x.data, y.data);
        }
        let cfg2 = AttackConfig { seed: 43, ..cfg };
        let c = pgd(&m, &ds.samples[..3], &ds.labels[..3], &cfg2).unwrap();
        assert_ne!(a.adversarial[0].data, c.adversarial[0].data);
    }

    #[test]
    fn pgd_drops_accuracy_on_linear_model() {
        // a generous budget must flip a confidently-correct linear prediction
        let m = linear_model();
        let x = Tensor::new(vec![4], vec![0.9, 0.1, 0.9, 0.5]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), 0);
        let cfg = AttackConfig { epsilon: 0.5, steps: 20, ..Default::default() };
        let batch = pgd(&m, &[x], &[0], &cfg).unwrap();
        assert_eq!(attack_success_rate(&batch, &m).unwrap(), 1.0);
    }

    #[test]
    fn cw_zero_steps_returns_originals() {
        let m = linear_model();
        let x = Tensor::new(vec![4], vec![0.3, 0.6, 0.2, 0.9]).unwrap();
        let cfg = AttackConfig { steps: 0, ..Default::default() };
        let batch = cw_linf(&m, &[x.clone()], &[1], &cfg).unwrap();
        assert_eq!(batch.adversarial[0].data, x.data);
    }

    #[test]
    fn cw_succeeds_on_linear_model_within_budget() {
        let m = linear_model();
        let xs: Vec<Tensor> = (0..5)
            .map(|i| {
                Tensor::new(vec![4], vec![0.6 + 0.02 * i as f64, 0.4, 0.7, 0.5]).unwrap()
            })
            .collect();
        let ys = vec![0usize; 5];
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(m.predict(x).unwrap(), y);
        }
        let cfg = AttackConfig { epsilon: 0.4, steps: 600, cw_lr: 5e-3, ..Default::default() };
        let batch = cw_linf(&m, &xs, &ys, &cfg).unwrap();
        batch.validate().unwrap();
        assert!(attack_success_rate(&batch, &m).unwrap() >= 0.8);
    }

    #[test]
    fn ada_dknn_budget_and_determinism() {
        let (m, ds) = trained_small_model();
        let blocks = crate::arcface::init_aux_blocks(
            &m,
            crate::arcface::ArcFaceConfig { class_count: 2, embed_dim: 4, ..Default::default() },
            5,
        )
        .unwrap();
        let cfg = AttackConfig {
            epsilon: 16.0 / 255.0,
            steps: 8,
            ada_m: 3,
            ada_refresh: 4,
            seed: 9,
            ..Default::default()
        };
        let a = ada_dknn(&m, &blocks, &ds, &ds.samples[..4], &ds.labels[..4], &cfg).unwrap();
        a.validate().unwrap();
        let b = ada_dknn(&m, &blocks, &ds, &ds.samples[..4], &ds.labels[..4], &cfg).unwrap();
        for (x, y) in a.adversarial.iter().zip(&b.adversarial) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn ada_dknn_moves_embeddings_toward_target_class() {
        let (m, ds) = trained_small_model();
        let blocks = crate::arcface::init_aux_blocks(
            &m,
            crate::arcface::ArcFaceConfig { class_count: 2, embed_dim: 4, ..Default::default() },
            5,
        )
        .unwrap();
        let cfg = AttackConfig {
            epsilon: 32.0 / 255.0,
            steps: 20,
            ada_m: 5,
            ada_lambda: 2.0,
            random_start: false,
            ..Default::default()
        };
        let x = &ds.samples[0];
        let y = ds.labels[0];
        let other: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != y).collect();
        let mean_dist = |s: &Tensor| -> f64 {
            let e = embed_all(&m, &blocks, s).unwrap();
            other
                .iter()
                .map(|&j| {
                    let ej = embed_all(&m, &blocks, &ds.samples[j]).unwrap();
                    e.iter().zip(&ej).map(|(a, b)| sq_dist(a, b)).sum::<f64>()
                })
                .sum::<f64>()
                / other.len() as f64
        };
        let before = mean_dist(x);
        let batch = ada_dknn(&m, &blocks, &ds, &[x.clone()], &[y], &cfg).unwrap();
        let after = mean_dist(&batch.adversarial[0]);
        assert!(after < before, "distance to wrong class did not shrink: {before} -> {after}");
    }

    #[test]
    fn batch_roundtrip_through_container() {
        let m = linear_model();
        let xs = vec![Tensor::new(vec![4], vec![0.25, 0.5, 0.75, 1.0]).unwrap()];
        let cfg = AttackConfig { epsilon: 0.125, steps: 3, ..Default::default() };
        let batch = pgd(&m, &xs, &[1], &cfg).unwrap();
        let dir = std::env::temp_dir().join("ucan_attack_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.ucan");
        save_batch(&batch, &path).unwrap();
        let loaded = load_batch(&path).unwrap();
        assert_eq!(loaded.attack, "pgd");
        assert_eq!(loaded.labels, batch.labels);
        loaded.validate().unwrap();
        for (a, b) in loaded.adversarial[0].data.iter().zip(&batch.adversarial[0].data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttackConfig { epsilon: 1.5, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { cw_c: 0.0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { ada_m: 0, ..Default::default() }.validate().is_err());
        let d = AttackConfig::default();
        assert!((d.epsilon - 16.0 / 255.0).abs() < 1e-15);
        assert_eq!(d.steps, 200);
        assert!((d.step_size() - d.epsilon / 8.0).abs() < 1e-15);
        assert!((d.cw_c - 0.5).abs() < 1e-15);
        assert_eq!(d.ada_m, 100);
    }
}
