//! Dataset generation, ingestion, and the four-way split protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UcanError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(UcanError::Data(format!(
                "{} samples vs {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(UcanError::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self { samples, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// The train/validation/calibration/test partition.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub calib: LabeledDataset,
    pub test: LabeledDataset,
}

/// Class-conditional synthetic images: a Gaussian bump at a class-specific
/// location plus a class-specific sinusoidal grating and a class-specific
/// brightness offset, over background noise. `separation` in (0, 1] scales
/// signal up and noise down. The brightness offset makes even spatially
/// pooled statistics class-informative, so every tap depth carries signal.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    image_size: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(UcanError::Config("need at least 2 classes".into()));
    }
    if per_class < 1 || image_size < 4 {
        return Err(UcanError::Config("per_class >= 1 and image_size >= 4 required".into()));
    }
    if !(0.0..=1.0).contains(&separation) {
        return Err(UcanError::Config("separation must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = image_size as f64;
    let sigma = n / 6.0;
    
    let glo: f64 = std::env::var("GLO").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let ghi: f64 = std::env::var("GHI").ok().and_then(|v| v.parse().ok()).unwrap_or(1.05);
    let nuisance_amp: f64 = std::env::var("NUIS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.03);
    let salt_p: f64 = std::env::var("SALT").ok().and_then(|v| v.parse().ok()).unwrap_or(0.2);
    let noise_amp = std::env::var("NOISE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.12 * (1.2 - separation));
    let bump_amp = 0.1 + 0.8 * separation;
    let grating_amp = 0.24 * separation;

    let mut samples = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let phase = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let cx = n / 2.0 + 0.28 * n * phase.cos();
        let cy = n / 2.0 + 0.28 * n * phase.sin();
        let freq = 1.0 + c as f64;
        let freq2 = 1.5 + 0.8 * c as f64;
        let angle = std::f64::consts::PI * c as f64 / classes as f64;
        let angle2 = angle + std::f64::consts::PI / 3.0;
        let dc = 1.1 * separation * (c as f64 / (classes - 1) as f64 - 0.5);
        for _ in 0..per_class {
            // heavy-tailed speckle density: most images are nearly clean,
            // a small fraction carry dense clutter
            let u: f64 = rng.gen_range(0.0..1.0);
            let salt_pi = salt_p * u * u * u;
            let jx: f64 = rng.gen_range(-0.05 * n..0.05 * n);
            let jy: f64 = rng.gen_range(-0.05 * n..0.05 * n);
            // per-sample signal strength: spreads classification margins so
            // sample difficulty varies while class identity stays fixed
            let gain: f64 = rng.gen_range(glo..ghi);
            // class-independent nuisance grating: benign variation that is
            // uninformative for the label but excites raw feature taps
            let n_amp: f64 = rng.gen_range(0.0..nuisance_amp);
            let n_freq: f64 = rng.gen_range(5.0..7.0);
            let n_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let n_phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let mut data = Vec::with_capacity(image_size * image_size);
            for y in 0..image_size {
                for x in 0..image_size {
                    let (xf, yf) = (x as f64, y as f64);
                    let d2 = (xf - cx - jx).powi(2) + (yf - cy - jy).powi(2);
                    let bump = bump_amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    let u = (xf * angle.cos() + yf * angle.sin()) / n;
                    let u2 = (xf * angle2.cos() + yf * angle2.sin()) / n;
                    // two zero-mean gratings with class-specific frequency and
                    // orientation: a multi-dimensional texture signature that
                    // survives spatial pooling after rectification
                    let grating = grating_amp
                        * ((2.0 * std::f64::consts::PI * freq * u).sin()
                            + (2.0 * std::f64::consts::PI * freq2 * u2).sin());
                    let un = (xf * n_angle.cos() + yf * n_angle.sin()) / n;
                    let nuisance = n_amp
                        * (2.0 * std::f64::consts::PI * n_freq * un + n_phase).sin();
                    let noise: f64 = rng.gen_range(-1.0..1.0) * noise_amp;
                    let v = (0.25 + dc + gain * (bump + grating) + nuisance + noise).clamp(0.0, 1.0);
                    // sparse bright speckle: localized benign clutter that
                    // dominates pixel-space distances but pools to almost
                    // nothing under spatial averaging
                    let v = if rng.gen_range(0.0..1.0) < salt_pi { rng.gen_range(0.55..0.8) } else { v };
                    data.push(v);
                }
            }
            samples.push(Tensor::new(vec![1, image_size, image_size], data)?);
            labels.push(c);
        }
    }
    LabeledDataset::new(samples, labels, classes)
}

/// CIFAR-10 binary records: 1 label byte followed by 3072 pixel bytes.
pub fn load_cifar10_binary(path: &std::path::Path, class_subset: Option<&[usize]>) -> Result<LabeledDataset> {
    const RECORD: usize = 3073;
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(UcanError::Format(format!(
            "file size {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let keep: Vec<usize> = match class_subset {
        Some(s) => s.to_vec(),
        None => (0..10).collect(),
    };
    // Labels are remapped onto a dense 0..keep.len() range.
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(UcanError::Format(format!("corrupt record: label byte {label}")));
        }
        if let Some(pos) = keep.iter().position(|&k| k == label) {
            let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            samples.push(Tensor::new(vec![3, 32, 32], data)?);
            labels.push(pos);
        }
    }
    LabeledDataset::new(samples, labels, keep.len())
}

/// Stratified four-way split, deterministic in `seed`. Per-class counts use
/// largest-remainder rounding so the union is exactly the input set.
pub fn split_dataset(ds: &LabeledDataset, fractions: [f64; 4], seed: u64) -> Result<Splits> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(UcanError::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(UcanError::Config("all split fractions must be positive".into()));
    }
    if ds.is_empty() {
        return Err(UcanError::Data("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: [Vec<usize>; 4] = [vec![], vec![], vec![], vec![]];
    for c in 0..ds.class_count {
        let mut idx: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        // Fisher-Yates with the shared stream keeps assignment seed-stable.
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        let mut counts = [0usize; 4];
        let mut rems: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0;
        for (s, &f) in fractions.iter().enumerate() {
            let exact = f * n as f64;
            counts[s] = exact.floor() as usize;
            assigned += counts[s];
            rems.push((s, exact - exact.floor()));
        }
        // Rotate remainder tie-breaks across classes so equal remainders do
        // not always land in the same splits (keeps totals balanced).
        rems.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(((a.0 + 4 - c % 4) % 4).cmp(&((b.0 + 4 - c % 4) % 4)))
        });
        for (s, _) in rems.iter().take(n - assigned) {
            counts[*s] += 1;
        }
        let mut cursor = 0;
        for (s, &cnt) in counts.iter().enumerate() {
            buckets[s].extend_from_slice(&idx[cursor..cursor + cnt]);
            cursor += cnt;
        }
    }
    for b in buckets.iter_mut() {
        b.sort_unstable();
    }
    Ok(Splits {
        train: ds.subset(&buckets[0]),
        val: ds.subset(&buckets[1]),
        calib: ds.subset(&buckets[2]),
        test: ds.subset(&buckets[3]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_deterministic_and_counted() {
        let a = gen_synthetic(4, 5, 8, 0.9, 42).unwrap();
        let b = gen_synthetic(4, 5, 8, 0.9, 42).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.data, y.data);
        }
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 5);
        }
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        assert!(gen_synthetic(1, 5, 8, 0.9, 0).is_err());
        assert!(gen_synthetic(4, 0, 8, 0.9, 0).is_err());
        assert!(gen_synthetic(4, 5, 2, 0.9, 0).is_err());
    }

    #[test]
    fn split_exact_division() {
        let ds = gen_synthetic(4, 10, 8, 0.9, 1).unwrap();
        let s = split_dataset(&ds, [0.25, 0.25, 0.25, 0.25], 3).unwrap();
        for part in [&s.train, &s.val, &s.calib, &s.test] {
            assert_eq!(part.len(), 10);
            for c in 0..4 {
                let count = part.labels.iter().filter(|&&l| l == c).count();
                assert!((2..=3).contains(&count));
            }
        }
    }

    #[test]
    fn split_partition_contract() {
        let ds = gen_synthetic(3, 11, 8, 0.8, 5).unwrap();
        let s = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 9).unwrap();
        let total = s.train.len() + s.val.len() + s.calib.len() + s.test.len();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn split_deterministic() {
        let ds = gen_synthetic(4, 9, 8, 0.8, 5).unwrap();
        let a = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 11).unwrap();
        let b = split_dataset(&ds, [0.6, 0.15, 0.1, 0.15], 11).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        for (x, y) in a.train.samples.iter().zip(&b.train.samples) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = gen_synthetic(2, 4, 8, 0.8, 5).unwrap();
        assert!(split_dataset(&ds, [0.5, 0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn cifar_record_counting_and_scaling() {
        let dir = std::env::temp_dir().join("ucan_cifar_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        let mut bytes = Vec::new();
        for label in [0u8, 3, 9] {
            bytes.push(label);
            bytes.extend(std::iter::repeat(255u8).take(3072));
        }
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_binary(&path, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[0].data[0], 1.0);

        // truncated file
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(load_cifar10_binary(&path, None), Err(UcanError::Format(_))));

        // corrupt label byte
        bytes[0] = 11;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_cifar10_binary(&path, None), Err(UcanError::Format(_))));
    }
}
