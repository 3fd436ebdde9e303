//! Small trainable classifiers exposing per-layer feature taps.
//!
//! The reference "SmallCNN" is conv3x3->relu, 2x2 avg downsample, conv3x3->
//! relu, downsample, conv3x3->relu, global average pool, dense. Taps sit
//! after each activation plus the pooled vector. An MLP variant taps its
//! hidden activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Result, UcanError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::weights::{self, Section};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 3x3 convolution (pad 1, stride 1) followed by ReLU; emits a tap.
    Conv3x3 { out_channels: usize },
    /// 2x2 average downsample.
    Downsample,
    /// Global average pool to a vector; emits a tap.
    GlobalAvgPool,
    /// Dense layer. Hidden dense layers get ReLU and a tap; the final dense
    /// produces the logits.
    Dense { out: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    /// The reference CNN: taps after each conv activation and the pooled
    /// vector, so N = 4.
    pub fn small_cnn(input_shape: [usize; 3], class_count: usize) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            class_count,
            layers: vec![
                LayerSpec::Conv3x3 { out_channels: 8 },
                LayerSpec::Downsample,
                LayerSpec::Conv3x3 { out_channels: 16 },
                LayerSpec::Downsample,
                LayerSpec::Conv3x3 { out_channels: 32 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: class_count },
            ],
        }
    }

    /// Pure-MLP backbone for flat inputs; taps are the hidden activations.
    pub fn mlp(input_dim: usize, hidden: &[usize], class_count: usize) -> Self {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&h| LayerSpec::Dense { out: h }).collect();
        layers.push(LayerSpec::Dense { out: class_count });
        Self { input_shape: vec![input_dim], class_count, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(UcanError::Config("class_count must be >= 2".into()));
        }
        if self.tap_shapes()?.len() < 2 {
            return Err(UcanError::Config("backbone must expose at least 2 taps".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) if *out == self.class_count => Ok(()),
            _ => Err(UcanError::Config("last layer must be Dense with class_count outputs".into())),
        }
    }

    /// Shapes of the tapped feature maps, in tap order.
    pub fn tap_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut taps = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv3x3 { out_channels } => {
                    let [_, h, w] = shape3(&shape)?;
                    shape = vec![*out_channels, h, w];
                    taps.push(shape.clone());
                }
                LayerSpec::Downsample => {
                    let [c, h, w] = shape3(&shape)?;
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(UcanError::Config(format!(
                            "downsample needs even spatial dims, got {h}x{w}"
                        )));
                    }
                    shape = vec![c, h / 2, w / 2];
                }
                LayerSpec::GlobalAvgPool => {
                    let [c, _, _] = shape3(&shape)?;
                    shape = vec![c];
                    taps.push(shape.clone());
                }
                LayerSpec::Dense { out } => {
                    shape = vec![*out];
                    if i != last {
                        taps.push(shape.clone());
                    }
                }
            }
        }
        Ok(taps)
    }

    /// Channel count seen by an aux block at each tap (vector taps count as
    /// C x 1 x 1 maps).
    pub fn tap_channels(&self) -> Result<Vec<usize>> {
        Ok(self.tap_shapes()?.iter().map(|s| s[0]).collect())
    }
}

fn shape3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(UcanError::Dimension(format!("expected C x H x W input, got {s:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub spec: BackboneSpec,
    /// One (weight, bias) pair per parameterized layer, in layer order.
    pub params: Vec<Option<(Tensor, Tensor)>>,
    pub frozen: bool,
}

impl BackboneModel {
    pub fn init(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = spec.input_shape.clone();
        let mut params = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            match layer {
                LayerSpec::Conv3x3 { out_channels } => {
                    let [c, h, w] = shape3(&shape)?;
                    let fan_in = (c * 9) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let wt = rand_tensor(&mut rng, vec![*out_channels, c, 3, 3], bound)?;
                    let b = Tensor::zeros(vec![*out_channels]);
                    params.push(Some((wt, b)));
                    shape = vec![*out_channels, h, w];
                }
                LayerSpec::Downsample => {
                    let [c, h, w] = shape3(&shape)?;
                    shape = vec![c, h / 2, w / 2];
                    params.push(None);
                }
                LayerSpec::GlobalAvgPool => {
                    let [c, _, _] = shape3(&shape)?;
                    shape = vec![c];
                    params.push(None);
                }
                LayerSpec::Dense { out } => {
                    let fan_in: usize = shape.iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let wt = rand_tensor(&mut rng, vec![*out, fan_in], bound)?;
                    let b = Tensor::zeros(vec![*out]);
                    params.push(Some((wt, b)));
                    shape = vec![*out];
                }
            }
        }
        Ok(Self { spec, params, frozen: false })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// CRC over all weight bytes; used by frozen-contract tests.
    pub fn checksum(&self) -> u32 {
        let mut bytes = Vec::new();
        for p in self.params.iter().flatten() {
            for v in p.0.data.iter().chain(&p.1.data) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        weights::crc32(&bytes)
    }

    /// Builds the forward pass on `g` starting from an existing input node.
    /// Returns the logits node and one node per tap.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        if g.shape(x) != self.spec.input_shape.as_slice() {
            return Err(UcanError::Dimension(format!(
                "input shape {:?}, expected {:?}",
                g.shape(x),
                self.spec.input_shape
            )));
        }
        let mut cur = x;
        let mut taps = Vec::new();
        let last = self.spec.layers.len() - 1;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv3x3 { .. } => {
                    let (wt, b) = self.params[i].as_ref().expect("conv params");
                    let (wid, bid) = (g.leaf(wt), g.leaf(b));
                    let conv = g.conv3x3(cur, wid, bid)?;
                    cur = g.relu(conv);
                    taps.push(cur);
                }
                LayerSpec::Downsample => {
                    cur = g.avg_pool2(cur)?;
                }
                LayerSpec::GlobalAvgPool => {
                    cur = g.global_avg_pool(cur)?;
                    taps.push(cur);
                }
                LayerSpec::Dense { .. } => {
                    if g.shape(cur).len() != 1 {
                        let numel: usize = g.shape(cur).iter().product();
                        cur = g.reshape(cur, vec![numel])?;
                    }
                    let (wt, b) = self.params[i].as_ref().expect("dense params");
                    let (wid, bid) = (g.leaf(wt), g.leaf(b));
                    cur = g.affine(cur, wid, bid)?;
                    if i != last {
                        cur = g.relu(cur);
                        taps.push(cur);
                    }
                }
            }
        }
        Ok((cur, taps))
    }

    /// Forward pass returning logits and every tapped feature map.
    pub fn forward_with_taps(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let (logits, taps) = self.forward_graph(&mut g, xid)?;
        Ok((g.value(logits), taps.iter().map(|&t| g.value(t)).collect()))
    }

    /// Tap-free forward pass; same computation path as `forward_with_taps`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let (logits, _) = self.forward_graph(&mut g, xid)?;
        Ok(g.value(logits))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let logits = self.forward_logits(x)?;
        Ok(argmax(&logits.data))
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(UcanError::Data("accuracy on empty dataset".into()));
        }
        let mut correct = 0usize;
        for (x, &y) in ds.samples.iter().zip(&ds.labels) {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|(w, b)| w.numel() + b.numel())
            .sum()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional Gaussian input noise (stddev) as light augmentation.
    pub noise_aug: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            noise_aug: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub loss: f64,
    pub val_metric: f64,
}

/// Class-balanced epoch order: seeded shuffles within each class, then
/// round-robin interleave.
pub(crate) fn balanced_order(labels: &[usize], class_count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for bucket in per_class.iter_mut() {
        for i in (1..bucket.len()).rev() {
            let j = rng.gen_range(0..=i);
            bucket.swap(i, j);
        }
    }
    let mut order = Vec::with_capacity(labels.len());
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    for round in 0..longest {
        for bucket in &per_class {
            if round < bucket.len() {
                order.push(bucket[round]);
            }
        }
    }
    order
}

/// SGD with momentum over cross-entropy on the plain logits.
pub fn train_backbone(
    model: &mut BackboneModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if model.frozen {
        return Err(UcanError::Contract("cannot train a frozen backbone".into()));
    }
    if train.is_empty() {
        return Err(UcanError::Data("empty training set".into()));
    }
    if train.class_count != model.spec.class_count {
        return Err(UcanError::Data(format!(
            "dataset has {} classes, model expects {}",
            train.class_count, model.spec.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .params
        .iter()
        .map(|p| p.as_ref().map(|(w, b)| (vec![0.0; w.numel()], vec![0.0; b.numel()])))
        .collect();

    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let order = balanced_order(&train.labels, train.class_count, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
                .params
                .iter()
                .map(|p| p.as_ref().map(|(w, b)| (vec![0.0; w.numel()], vec![0.0; b.numel()])))
                .collect();
            for &i in batch {
                let x = augment(&train.samples[i], cfg.noise_aug, &mut rng)?;
                let mut g = Graph::new();
                let xid = g.leaf(&x);
                // Re-leaf parameters per episode and read their grads back.
                let mut param_ids = Vec::with_capacity(model.params.len());
                let mut cur = xid;
                let last = model.spec.layers.len() - 1;
                for (li, layer) in model.spec.layers.iter().enumerate() {
                    match layer {
                        LayerSpec::Conv3x3 { .. } => {
                            let (wt, b) = model.params[li].as_ref().unwrap();
                            let (wid, bid) = (g.leaf(wt), g.leaf(b));
                            param_ids.push(Some((wid, bid)));
                            let conv = g.conv3x3(cur, wid, bid)?;
                            cur = g.relu(conv);
                        }
                        LayerSpec::Downsample => {
                            param_ids.push(None);
                            cur = g.avg_pool2(cur)?;
                        }
                        LayerSpec::GlobalAvgPool => {
                            param_ids.push(None);
                            cur = g.global_avg_pool(cur)?;
                        }
                        LayerSpec::Dense { .. } => {
                            if g.shape(cur).len() != 1 {
                                let numel: usize = g.shape(cur).iter().product();
                                cur = g.reshape(cur, vec![numel])?;
                            }
                            let (wt, b) = model.params[li].as_ref().unwrap();
                            let (wid, bid) = (g.leaf(wt), g.leaf(b));
                            param_ids.push(Some((wid, bid)));
                            cur = g.affine(cur, wid, bid)?;
                            if li != last {
                                cur = g.relu(cur);
                            }
                        }
                    }
                }
                let loss = g.softmax_xent(cur, train.labels[i])?;
                let loss_val = g.data(loss)[0];
                if !loss_val.is_finite() {
                    return Err(UcanError::Data("non-finite training loss".into()));
                }
                epoch_loss += loss_val;
                g.backward(loss)?;
                for (li, ids) in param_ids.iter().enumerate() {
                    if let (Some((wid, bid)), Some((gw, gb))) = (ids, grads[li].as_mut()) {
                        for (acc, v) in gw.iter_mut().zip(g.grad(*wid)) {
                            *acc += v;
                        }
                        for (acc, v) in gb.iter_mut().zip(g.grad(*bid)) {
                            *acc += v;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (li, grad) in grads.iter().enumerate() {
                if let (Some((gw, gb)), Some((vw, vb)), Some((w, b))) =
                    (grad, velocity[li].as_mut(), model.params[li].as_mut())
                {
                    for ((vel, p), gv) in vw.iter_mut().zip(w.data.iter_mut()).zip(gw) {
                        *vel = cfg.momentum * *vel - cfg.learning_rate * gv * scale;
                        *p += *vel;
                    }
                    for ((vel, p), gv) in vb.iter_mut().zip(b.data.iter_mut()).zip(gb) {
                        *vel = cfg.momentum * *vel - cfg.learning_rate * gv * scale;
                        *p += *vel;
                    }
                }
            }
        }
        let val_metric = if val.is_empty() { 0.0 } else { model.accuracy(val)? };
        log.epochs.push(EpochLog { loss: epoch_loss / train.len() as f64, val_metric });
    }
    Ok(log)
}

fn augment(x: &Tensor, noise: Option<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match noise {
        None => Ok(x.clone()),
        Some(sigma) => {
            let data: Vec<f64> = x
                .data
                .iter()
                .map(|&v| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let n = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    (v + sigma * n).clamp(0.0, 1.0)
                })
                .collect();
            Tensor::new(x.shape.clone(), data)
        }
    }
}

// --- persistence ------------------------------------------------------------

const KIND_CONV3: f64 = 1.0;
const KIND_DOWN: f64 = 2.0;
const KIND_GAP: f64 = 3.0;
const KIND_DENSE: f64 = 4.0;

fn encode_spec(spec: &BackboneSpec, frozen: bool) -> Result<Tensor> {
    let mut meta = vec![
        spec.class_count as f64,
        if frozen { 1.0 } else { 0.0 },
        spec.input_shape.len() as f64,
    ];
    meta.extend(spec.input_shape.iter().map(|&d| d as f64));
    meta.push(spec.layers.len() as f64);
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv3x3 { out_channels } => {
                meta.push(KIND_CONV3);
                meta.push(*out_channels as f64);
            }
            LayerSpec::Downsample => {
                meta.push(KIND_DOWN);
                meta.push(0.0);
            }
            LayerSpec::GlobalAvgPool => {
                meta.push(KIND_GAP);
                meta.push(0.0);
            }
            LayerSpec::Dense { out } => {
                meta.push(KIND_DENSE);
                meta.push(*out as f64);
            }
        }
    }
    let n = meta.len();
    Tensor::new(vec![n], meta)
}

fn decode_spec(meta: &Tensor) -> Result<(BackboneSpec, bool)> {
    let v = &meta.data;
    let get = |i: usize| -> Result<f64> {
        v.get(i).copied().ok_or_else(|| UcanError::Format("spec metadata too short".into()))
    };
    let class_count = get(0)? as usize;
    let frozen = get(1)? != 0.0;
    let rank = get(2)? as usize;
    let mut pos = 3;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(get(pos)? as usize);
        pos += 1;
    }
    let n_layers = get(pos)? as usize;
    pos += 1;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = get(pos)?;
        let arg = get(pos + 1)? as usize;
        pos += 2;
        layers.push(match kind as u8 {
            1 => LayerSpec::Conv3x3 { out_channels: arg },
            2 => LayerSpec::Downsample,
            3 => LayerSpec::GlobalAvgPool,
            4 => LayerSpec::Dense { out: arg },
            k => return Err(UcanError::Format(format!("unknown layer kind {k}"))),
        });
    }
    Ok((BackboneSpec { input_shape, class_count, layers }, frozen))
}

pub fn serialize_model(model: &BackboneModel, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for p in model.params.iter().flatten() {
        tensors.push(p.0.clone());
        tensors.push(p.1.clone());
    }
    let sections = vec![
        Section::new("backbone_spec", vec![encode_spec(&model.spec, model.frozen)?]),
        Section::new("backbone_params", tensors),
    ];
    weights::write_container(path, &sections)
}

pub fn load_model(path: &Path) -> Result<BackboneModel> {
    let sections = weights::read_container(path)?;
    let spec_section = weights::section(&sections, "backbone_spec")?;
    let (spec, frozen) = decode_spec(
        spec_section
            .tensors
            .first()
            .ok_or_else(|| UcanError::Format("empty backbone_spec section".into()))?,
    )?;
    spec.validate()?;
    let stored = &weights::section(&sections, "backbone_params")?.tensors;
    let mut model = BackboneModel::init(spec, 0)?;
    let mut cursor = stored.iter();
    for p in model.params.iter_mut().flatten() {
        let w = cursor.next().ok_or(UcanError::Truncated)?;
        let b = cursor.next().ok_or(UcanError::Truncated)?;
        if w.shape != p.0.shape || b.shape != p.1.shape {
            return Err(UcanError::Format("stored tensor shape mismatch".into()));
        }
        p.0 = w.clone();
        p.1 = b.clone();
    }
    if cursor.next().is_some() {
        return Err(UcanError::Format("extra tensors in backbone_params".into()));
    }
    model.frozen = frozen;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn tiny_model() -> BackboneModel {
        BackboneModel::init(BackboneSpec::small_cnn([1, 8, 8], 3), 7).unwrap()
    }

    #[test]
    fn taps_match_declared_shapes() {
        let model = tiny_model();
        let shapes = model.spec.tap_shapes().unwrap();
        assert_eq!(shapes.len(), 4);
        let x = Tensor::zeros(vec![1, 8, 8]);
        let (logits, taps) = model.forward_with_taps(&x).unwrap();
        assert_eq!(logits.shape, vec![3]);
        assert_eq!(taps.len(), shapes.len());
        for (tap, shape) in taps.iter().zip(&shapes) {
            assert_eq!(&tap.shape, shape);
        }
    }

    #[test]
    fn logits_unaffected_by_tap_collection() {
        let model = tiny_model();
        let ds = gen_synthetic(3, 1, 8, 0.9, 3).unwrap();
        let (with_taps, _) = model.forward_with_taps(&ds.samples[0]).unwrap();
        let plain = model.forward_logits(&ds.samples[0]).unwrap();
        assert_eq!(with_taps.data, plain.data);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let model = tiny_model();
        let x = Tensor::zeros(vec![1, 4, 4]);
        assert!(matches!(
            model.forward_with_taps(&x),
            Err(UcanError::Dimension(_))
        ));
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let mut model = tiny_model();
        let before = model.checksum();
        let ds = gen_synthetic(3, 4, 8, 0.9, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let log = train_backbone(&mut model, &ds, &ds, &cfg).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = gen_synthetic(3, 6, 8, 0.9, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 5, ..Default::default() };
        let mut m1 = tiny_model();
        let mut m2 = tiny_model();
        train_backbone(&mut m1, &ds, &ds, &cfg).unwrap();
        train_backbone(&mut m2, &ds, &ds, &cfg).unwrap();
        assert_eq!(m1.checksum(), m2.checksum());
    }

    #[test]
    fn frozen_model_rejects_training() {
        let mut model = tiny_model();
        model.freeze();
        let before = model.checksum();
        let ds = gen_synthetic(3, 4, 8, 0.9, 1).unwrap();
        let err = train_backbone(&mut model, &ds, &ds, &TrainConfig::default());
        assert!(matches!(err, Err(UcanError::Contract(_))));
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn empty_dataset_is_data_error() {
        let mut model = tiny_model();
        let ds = LabeledDataset::new(vec![], vec![], 3).unwrap();
        assert!(matches!(
            train_backbone(&mut model, &ds, &ds, &TrainConfig::default()),
            Err(UcanError::Data(_))
        ));
    }

    #[test]
    fn serialization_roundtrip_at_stored_precision() {
        let dir = std::env::temp_dir().join("ucan_backbone_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ucan");
        let mut model = tiny_model();
        model.freeze();
        serialize_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(loaded.frozen);
        assert_eq!(loaded.spec, model.spec);
        for (a, b) in loaded.params.iter().flatten().zip(model.params.iter().flatten()) {
            for (x, y) in a.0.data.iter().zip(&b.0.data) {
                assert_eq!(*x, *y as f32 as f64); // bit-exact at f32 precision
            }
        }
        // loading twice gives identical bytes
        let again = load_model(&path).unwrap();
        assert_eq!(again.checksum(), loaded.checksum());
    }

    #[test]
    fn forward_is_pure() {
        let model = tiny_model();
        let ds = gen_synthetic(3, 1, 8, 0.9, 11).unwrap();
        let a = model.forward_logits(&ds.samples[0]).unwrap();
        let b = model.forward_logits(&ds.samples[0]).unwrap();
        assert_eq!(a.data, b.data);
    }
}
