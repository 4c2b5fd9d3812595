//! Labeled samples, the procedural toy dataset, stratified splitting, label
//! smoothing and ratio-controlled mixed batches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::augment::{Image, OpSet};
use crate::error::{Error, Result};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Real,
    Transformed,
    Gan,
}

impl Origin {
    pub fn code(self) -> u8 {
        match self {
            Origin::Real => 0,
            Origin::Transformed => 1,
            Origin::Gan => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Origin::Real),
            1 => Some(Origin::Transformed),
            2 => Some(Origin::Gan),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub origin: Origin,
}

impl LabeledImage {
    pub fn new(image: Image, label: usize, origin: Origin) -> Self {
        Self { image, label, origin }
    }
}

/// A probability vector over the `k` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::MalformedTarget { row: 0, sum });
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, k: usize) -> Result<Self> {
        lsr_label(class, k, 0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_one_hot(&self) -> bool {
        self.probs.iter().filter(|&&p| p == 1.0).count() == 1 && self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }
}

/// Label smoothing: `(1−ε)·onehot(class) + ε/k`.
pub fn lsr_label(class: usize, k: usize, epsilon: f64) -> Result<SoftLabel> {
    if class >= k {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: k,
        });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("LSR epsilon {epsilon} outside [0, 1]")));
    }
    let off = epsilon / k as f64;
    let mut probs = vec![off; k];
    probs[class] += 1.0 - epsilon;
    Ok(SoftLabel { probs })
}

pub const MAX_TOY_CLASSES: usize = 8;

/// Procedurally generated classes with class-specific spatial structure.
///
/// Classes 0–3 (the default `k = 4`) are invariant, as classes, under the
/// eight flips and rotations, so geometric augmentation never produces an
/// image that belongs to a different class. Classes 4–7 are oriented and
/// are not.
pub fn gen_toy_dataset(num_per_class: usize, k: usize, shape: [usize; 3], seed: u64) -> Result<Vec<LabeledImage>> {
    if k == 0 || k > MAX_TOY_CLASSES {
        return Err(Error::UnsupportedClassCount(k));
    }
    let [c, h, w] = shape;
    if c == 0 || h < 4 || w < 4 {
        return Err(Error::Config(format!(
            "toy images need at least 1x4x4, got {c}x{h}x{w}"
        )));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut out = Vec::with_capacity(num_per_class * k);
    for class in 0..k {
        for _ in 0..num_per_class {
            out.push(LabeledImage::new(
                toy_image(class, shape, &mut rng)?,
                class,
                Origin::Real,
            ));
        }
    }
    Ok(out)
}

fn toy_image(class: usize, [c, h, w]: [usize; 3], rng: &mut Rng) -> Result<Image> {
    let (hf, wf) = (h as f64, w as f64);
    let cy = (hf - 1.0) / 2.0 + rng.random_range(-1.5..1.5);
    let cx = (wf - 1.0) / 2.0 + rng.random_range(-1.5..1.5);
    let phase = rng.random_range(0.0..2.0 * PI);
    let blobs: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.15 * hf..0.85 * hf),
                rng.random_range(0.15 * wf..0.85 * wf),
            )
        })
        .collect();
    let period = rng.random_range(3.6..4.4);
    let cell = rng.random_range(2.6..3.4);
    let (oy, ox) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
    let grid_off = (rng.random_range(0..5), rng.random_range(0..5));
    let pattern = |y: f64, x: f64| -> f64 {
        let (yi, xi) = (y as usize, x as usize);
        match class {
            // concentric rings
            0 => {
                let r = libm::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
                0.5 + 0.5 * libm::cos(2.0 * PI * r / period + phase)
            }
            // checkerboard
            1 => {
                let a = libm::floor((y + oy) / cell) as i64 + libm::floor((x + ox) / cell) as i64;
                if a.rem_euclid(2) == 0 {
                    0.9
                } else {
                    0.1
                }
            }
            // gaussian blobs
            2 => blobs
                .iter()
                .map(|(by, bx)| libm::exp(-((y - by) * (y - by) + (x - bx) * (x - bx)) / (2.0 * 1.5 * 1.5)))
                .sum::<f64>()
                .min(1.0),
            // grid lines
            3 => {
                if (yi + grid_off.0) % 5 == 0 || (xi + grid_off.1) % 5 == 0 {
                    0.9
                } else {
                    0.1
                }
            }
            // horizontal, vertical and diagonal stripes
            4 => 0.5 + 0.5 * libm::sin(2.0 * PI * y / period + phase),
            5 => 0.5 + 0.5 * libm::sin(2.0 * PI * x / period + phase),
            6 => 0.5 + 0.5 * libm::sin(2.0 * PI * (x + y) / (period * core::f64::consts::SQRT_2) + phase),
            // radial gradient
            _ => {
                let r = libm::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
                (1.0 - r / (0.6 * hf.max(wf))).max(0.0)
            }
        }
    };
    let contrast = rng.random_range(0.75..1.0);
    let brightness = rng.random_range(-0.1..0.1);
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let mut values = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + contrast * (pattern(y as f64, x as f64) - 0.5) + brightness + noise.sample(rng);
                values.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(c, h, w, values)
}

/// Stratified 50/50 split: each class is shuffled and halved.
pub fn split_half(dataset: &[LabeledImage], seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let k = dataset.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in dataset.iter().enumerate() {
        by_class[s.label].push(i);
    }
    if let Some((class, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() % 2 == 1) {
        return Err(Error::OddClassCount {
            class,
            count: idx.len(),
        });
    }
    let mut rng = crate::seeded_rng(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        train.extend(idx[..half].iter().map(|&i| dataset[i].clone()));
        test.extend(idx[half..].iter().map(|&i| dataset[i].clone()));
    }
    Ok((train, test))
}

/// Composition of every classifier training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedBatchSpec {
    pub batch_size: usize,
    pub ratio_orig: usize,
    pub ratio_aug: usize,
    pub lsr_epsilon: f64,
    n_orig: usize,
    n_aug: usize,
}

/// Logged when a ratio does not divide the batch and the original part is
/// rounded down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositionNote {
    pub batch_size: usize,
    pub ratio_orig: usize,
    pub ratio_aug: usize,
    pub n_orig: usize,
    pub n_aug: usize,
}

impl core::fmt::Display for CompositionNote {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "ratio {}:{} does not divide batch {}; using {} original + {} augmented",
            self.ratio_orig, self.ratio_aug, self.batch_size, self.n_orig, self.n_aug
        )
    }
}

impl MixedBatchSpec {
    /// Exact composition; indivisible ratios are a config error.
    pub fn new(batch_size: usize, ratio_orig: usize, ratio_aug: usize, lsr_epsilon: f64) -> Result<Self> {
        let (spec, note) = Self::nearest(batch_size, ratio_orig, ratio_aug, lsr_epsilon)?;
        match note {
            None => Ok(spec),
            Some(n) => Err(Error::Config(format!("{n}"))),
        }
    }

    /// Like [`MixedBatchSpec::new`], but an indivisible ratio rounds the
    /// original part down, gives the remainder to the augmented part, and
    /// reports the composition actually used.
    pub fn nearest(
        batch_size: usize,
        ratio_orig: usize,
        ratio_aug: usize,
        lsr_epsilon: f64,
    ) -> Result<(Self, Option<CompositionNote>)> {
        if batch_size == 0 || ratio_orig == 0 {
            return Err(Error::Config(format!(
                "batch size and original ratio part must be positive (batch {batch_size}, ratio {ratio_orig}:{ratio_aug})"
            )));
        }
        if !(0.0..=1.0).contains(&lsr_epsilon) {
            return Err(Error::Config(format!("LSR epsilon {lsr_epsilon} outside [0, 1]")));
        }
        let parts = ratio_orig + ratio_aug;
        let n_orig = batch_size * ratio_orig / parts;
        if n_orig == 0 {
            return Err(Error::Config(format!(
                "batch {batch_size} too small for ratio {ratio_orig}:{ratio_aug}"
            )));
        }
        let n_aug = batch_size - n_orig;
        let spec = Self {
            batch_size,
            ratio_orig,
            ratio_aug,
            lsr_epsilon,
            n_orig,
            n_aug,
        };
        let note = (!(batch_size * ratio_orig).is_multiple_of(parts)).then_some(CompositionNote {
            batch_size,
            ratio_orig,
            ratio_aug,
            n_orig,
            n_aug,
        });
        Ok((spec, note))
    }

    /// Original samples only (ratio 1:0).
    pub fn baseline(batch_size: usize) -> Result<Self> {
        Self::new(batch_size, 1, 0, 0.0)
    }

    /// `(original, augmented)` sample counts per batch.
    pub fn composition(&self) -> (usize, usize) {
        (self.n_orig, self.n_aug)
    }
}

/// One assembled classifier batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<Image>,
    pub targets: Vec<SoftLabel>,
    pub origins: Vec<Origin>,
    pub n_orig: usize,
    pub n_aug: usize,
    /// The augmented pool was smaller than its share of the batch.
    pub aug_with_replacement: bool,
}

impl MixedBatch {
    /// Flattens images into `N×C×H×W` values and targets into `N×k`.
    pub fn flatten(&self) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let [c, h, w] = self.images[0].shape();
        let mut x = Vec::with_capacity(self.images.len() * c * h * w);
        self.images.iter().for_each(|im| x.extend_from_slice(im.values()));
        let t = self.targets.iter().flat_map(|s| s.probs().iter().copied()).collect();
        (vec![self.images.len(), c, h, w], x, t)
    }
}

/// Draws `n_orig` samples from `train_pool` (one-hot targets) and `n_aug`
/// from `aug_pool`, without replacement within the batch. Augmented samples
/// of GAN origin get LSR targets; transformed ones keep one-hot targets.
pub fn make_mixed_batch(
    train_pool: &[LabeledImage],
    aug_pool: &[LabeledImage],
    spec: &MixedBatchSpec,
    k: usize,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    let (n_orig, n_aug) = spec.composition();
    if train_pool.is_empty() {
        return Err(Error::EmptyPool("original"));
    }
    if n_aug > 0 && aug_pool.is_empty() {
        return Err(Error::EmptyPool("augmented"));
    }
    let mut batch = MixedBatch {
        images: Vec::with_capacity(n_orig + n_aug),
        targets: Vec::with_capacity(n_orig + n_aug),
        origins: Vec::with_capacity(n_orig + n_aug),
        n_orig,
        n_aug,
        aug_with_replacement: false,
    };
    let (orig_idx, _) = draw(train_pool.len(), n_orig, rng);
    for i in orig_idx {
        let s = &train_pool[i];
        batch.images.push(s.image.clone());
        batch.targets.push(SoftLabel::one_hot(s.label, k)?);
        batch.origins.push(s.origin);
    }
    if n_aug > 0 {
        let (aug_idx, replaced) = draw(aug_pool.len(), n_aug, rng);
        batch.aug_with_replacement = replaced;
        for i in aug_idx {
            let s = &aug_pool[i];
            let target = match s.origin {
                Origin::Gan => lsr_label(s.label, k, spec.lsr_epsilon)?,
                Origin::Real | Origin::Transformed => SoftLabel::one_hot(s.label, k)?,
            };
            batch.images.push(s.image.clone());
            batch.targets.push(target);
            batch.origins.push(s.origin);
        }
    }
    Ok(batch)
}

/// `amount` distinct indices when the pool allows it, otherwise uniform
/// draws with replacement (flagged by the second value).
fn draw(len: usize, amount: usize, rng: &mut Rng) -> (Vec<usize>, bool) {
    if amount <= len {
        (index::sample(rng, len, amount).into_vec(), false)
    } else {
        ((0..amount).map(|_| rng.random_range(0..len)).collect(), true)
    }
}

/// Every image of `train` under every operation of `op_set`, in sample
/// order then operation order, tagged as transformed.
pub fn transform_pool(train: &[LabeledImage], op_set: OpSet, rng: &mut Rng) -> Result<Vec<LabeledImage>> {
    let ops = op_set.ops();
    let mut pool = Vec::with_capacity(train.len() * ops.len());
    for s in train {
        for op in &ops {
            pool.push(LabeledImage::new(
                op.apply(&s.image, rng)?,
                s.label,
                Origin::Transformed,
            ));
        }
    }
    Ok(pool)
}

/// A transform pool holds `expansion` images per original, so an
/// augmented share above that would repeat images within an epoch.
pub fn check_transf_ratio(op_set: OpSet, ratio_orig: usize, ratio_aug: usize) -> Result<()> {
    if ratio_aug > op_set.expansion() * ratio_orig {
        return Err(Error::Config(format!(
            "ratio {ratio_orig}:{ratio_aug} exceeds the {} pool capacity of 1:{}",
            op_set.name(),
            op_set.expansion()
        )));
    }
    Ok(())
}

/// Per-class sample counts over `k` classes.
pub fn class_counts(samples: &[LabeledImage], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for s in samples {
        if s.label < k {
            counts[s.label] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn lsr_spot_values() {
        let l = lsr_label(0, 4, 0.8).unwrap();
        for (a, b) in l.probs().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(lsr_label(2, 4, 0.0).unwrap().probs(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(lsr_label(2, 4, 1.0).unwrap().probs(), &[0.25; 4]);
        assert_eq!(
            lsr_label(4, 4, 0.5).unwrap_err(),
            Error::LabelOutOfRange { label: 4, classes: 4 }
        );
        assert!(lsr_label(0, 4, 1.2).is_err());
    }

    #[test]
    fn toy_dataset_is_deterministic_and_balanced() {
        let a = gen_toy_dataset(6, 4, [1, 16, 16], 11).unwrap();
        let b = gen_toy_dataset(6, 4, [1, 16, 16], 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(class_counts(&a, 4), vec![6; 4]);
        assert!(a
            .iter()
            .all(|s| s.image.values().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a, gen_toy_dataset(6, 4, [1, 16, 16], 12).unwrap());
        assert_eq!(
            gen_toy_dataset(2, 9, [1, 16, 16], 0).unwrap_err(),
            Error::UnsupportedClassCount(9)
        );
        assert_eq!(gen_toy_dataset(2, 8, [1, 16, 16], 0).unwrap().len(), 16);
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let data = gen_toy_dataset(100, 4, [1, 8, 8], 1).unwrap();
        let (train, test) = split_half(&data, 5).unwrap();
        assert_eq!(class_counts(&train, 4), vec![50; 4]);
        assert_eq!(class_counts(&test, 4), vec![50; 4]);
        for t in &train {
            assert!(!test.contains(t));
        }
        assert_eq!(split_half(&data, 5).unwrap(), (train, test));
        let odd = gen_toy_dataset(3, 2, [1, 8, 8], 1).unwrap();
        assert_eq!(
            split_half(&odd, 0).unwrap_err(),
            Error::OddClassCount { class: 0, count: 3 }
        );
    }

    #[test]
    fn batch_compositions() {
        assert_eq!(MixedBatchSpec::new(64, 1, 3, 0.8).unwrap().composition(), (16, 48));
        assert_eq!(MixedBatchSpec::new(64, 1, 1, 0.8).unwrap().composition(), (32, 32));
        assert!(MixedBatchSpec::new(64, 1, 2, 0.8).is_err());
        let (spec, note) = MixedBatchSpec::nearest(64, 1, 2, 0.8).unwrap();
        assert_eq!(spec.composition(), (21, 43));
        assert_eq!(note.unwrap().n_aug, 43);
        assert_eq!(MixedBatchSpec::baseline(64).unwrap().composition(), (64, 0));
        assert!(MixedBatchSpec::new(64, 0, 1, 0.8).is_err());
    }

    fn pool(origin: Origin, n: usize, seed: u64) -> Vec<LabeledImage> {
        gen_toy_dataset(n, 4, [1, 4, 4], seed)
            .unwrap()
            .into_iter()
            .map(|mut s| {
                s.origin = origin;
                s
            })
            .collect()
    }

    #[test]
    fn gan_samples_get_smoothed_targets() {
        let train = pool(Origin::Real, 10, 1);
        let aug = pool(Origin::Gan, 30, 2);
        let spec = MixedBatchSpec::new(64, 1, 3, 0.8).unwrap();
        let b = make_mixed_batch(&train, &aug, &spec, 4, &mut seeded_rng(0)).unwrap();
        assert_eq!((b.n_orig, b.n_aug, b.images.len()), (16, 48, 64));
        for (t, o) in b.targets.iter().zip(&b.origins) {
            let sum: f64 = t.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            match o {
                Origin::Gan => assert!((t.probs().iter().copied().fold(0.0, f64::max) - 0.4).abs() < 1e-12),
                _ => assert!(t.is_one_hot()),
            }
        }
        assert!(!b.aug_with_replacement);
    }

    #[test]
    fn transformed_samples_stay_one_hot_and_small_pool_is_flagged() {
        let train = pool(Origin::Real, 10, 1);
        let aug = pool(Origin::Transformed, 1, 2);
        let spec = MixedBatchSpec::new(16, 1, 1, 0.8).unwrap();
        let b = make_mixed_batch(&train, &aug, &spec, 4, &mut seeded_rng(0)).unwrap();
        assert!(b.targets.iter().all(SoftLabel::is_one_hot));
        assert!(b.aug_with_replacement);
        assert_eq!(
            make_mixed_batch(&train, &[], &spec, 4, &mut seeded_rng(0)).unwrap_err(),
            Error::EmptyPool("augmented")
        );
    }

    #[test]
    fn transform_pool_expands_each_sample_by_the_op_count() {
        let train = gen_toy_dataset(3, 2, [1, 8, 8], 4).unwrap();
        let mut rng = crate::seeded_rng(0);
        let pool = transform_pool(&train, OpSet::FlipRotation, &mut rng).unwrap();
        assert_eq!(pool.len(), 7 * train.len());
        assert!(pool.iter().all(|s| s.origin == Origin::Transformed));
        assert_eq!(class_counts(&pool, 2), [21, 21]);
        assert!(check_transf_ratio(OpSet::FlipRotation, 1, 7).is_ok());
        assert!(matches!(
            check_transf_ratio(OpSet::FlipRotation, 1, 8),
            Err(Error::Config(_))
        ));
        assert!(check_transf_ratio(OpSet::Rotation, 1, 4).is_err());
        assert!(check_transf_ratio(OpSet::Rotation, 2, 6).is_ok());
    }

    #[test]
    fn within_batch_sampling_has_no_repeats() {
        let train: Vec<LabeledImage> = pool(Origin::Real, 16, 3);
        let spec = MixedBatchSpec::baseline(64).unwrap();
        let b = make_mixed_batch(&train, &[], &spec, 4, &mut seeded_rng(4)).unwrap();
        for (i, a) in b.images.iter().enumerate() {
            assert!(!b.images[i + 1..].contains(a));
        }
    }

    proptest! {
        #[test]
        fn lsr_rows_are_distributions(k in 1usize..12, eps in 0.0f64..=1.0, class_seed in any::<usize>()) {
            let l = lsr_label(class_seed % k, k, eps).unwrap();
            prop_assert!(l.probs().iter().all(|&p| p >= 0.0));
            prop_assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compositions_are_exact(ro in 1usize..4, ra in 0usize..9, batch in 8usize..128) {
            if let Ok((spec, note)) = MixedBatchSpec::nearest(batch, ro, ra, 0.8) {
                let (o, a) = spec.composition();
                prop_assert_eq!(o + a, batch);
                prop_assert_eq!(note.is_none(), o * (ro + ra) == batch * ro);
            }
        }
    }
}
