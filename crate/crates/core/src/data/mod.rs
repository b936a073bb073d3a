//! Deterministic synthetic part-texture images.
//!
//! Every image shows `parts_per_image` non-overlapping discs on a grey
//! background. Each disc is filled with an oriented sinusoidal grating from a
//! bank of textures. A class is an unordered combination of distinct texture
//! ids, so the label is carried by which textures co-occur, never by where
//! the discs sit.

mod container;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use container::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Attempts per disc before giving up on a layout.
pub const PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    #[serde(default = "two")]
    pub parts_per_image: usize,
    #[serde(default = "five")]
    pub texture_bank_size: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

fn five() -> usize {
    5
}

fn default_noise() -> f64 {
    0.05
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            samples_per_class: 100,
            image_size: 64,
            parts_per_image: 2,
            texture_bank_size: 5,
            noise_std: default_noise(),
            seed: 0,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.image_size != 32 && self.image_size != 64 {
            return bad(format!("image_size must be 32 or 64, got {}", self.image_size));
        }
        if self.parts_per_image < 2 {
            return bad(format!("need at least 2 parts per image, got {}", self.parts_per_image));
        }
        let combos = binomial(self.texture_bank_size, self.parts_per_image);
        if combos < self.classes {
            return bad(format!(
                "{} textures in groups of {} give only {combos} classes, {} requested",
                self.texture_bank_size, self.parts_per_image, self.classes
            ));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One placed disc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    /// `(row, column)` in pixels.
    pub center: (f64, f64),
    pub radius: f64,
    pub texture: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Ground-truth layout; empty for samples read back from a container.
    pub parts: Vec<Part>,
}

/// Grating parameters of texture `id`: orientation, period in pixels at 64×64
/// and RGB tint.
fn texture(id: usize, bank: usize) -> (f64, f64, [f64; 3]) {
    let angle = PI * id as f64 / bank as f64;
    let period = if id.is_multiple_of(2) { 4.0 } else { 6.5 };
    let hue = 2.0 * PI * id as f64 / bank as f64;
    let tint = [0.0, 2.0, 4.0].map(|o: f64| 0.75 + 0.25 * (hue + o * PI / 3.0).cos());
    (angle, period, tint)
}

/// The texture combination defining each class, drawn from all
/// `C(bank, parts)` subsets by `seed`.
pub fn class_combinations(spec: &DatasetSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let mut all = Vec::new();
    let mut current = Vec::new();
    fn walk(start: usize, n: usize, k: usize, current: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            all.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            walk(i + 1, n, k, current, all);
            current.pop();
        }
    }
    walk(0, spec.texture_bank_size, spec.parts_per_image, &mut current, &mut all);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    all.shuffle(&mut rng);
    all.truncate(spec.classes);
    Ok(all)
}

fn place_parts(spec: &DatasetSpec, textures: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Part>> {
    let size = spec.image_size as f64;
    let mut parts: Vec<Part> = Vec::with_capacity(textures.len());
    for &tex in textures {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let radius = size * rng.random_range(0.14..0.2);
            let center = (rng.random_range(radius..size - radius), rng.random_range(radius..size - radius));
            let clear = parts.iter().all(|p| {
                let (dr, dc) = (p.center.0 - center.0, p.center.1 - center.1);
                (dr * dr + dc * dc).sqrt() >= p.radius + radius + 1.0
            });
            if clear {
                parts.push(Part {
                    center,
                    radius,
                    texture: tex,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Dataset(format!(
                "could not place {} non-overlapping parts in {}x{} after {PLACEMENT_RETRIES} tries",
                textures.len(),
                spec.image_size,
                spec.image_size
            )));
        }
    }
    Ok(parts)
}

fn render(spec: &DatasetSpec, parts: &[Part], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = spec.image_size;
    let scale = s as f64 / 64.0;
    let mut img = vec![0.5f64; 3 * s * s];
    for part in parts {
        let (angle, period, tint) = texture(part.texture, spec.texture_bank_size);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (dir_r, dir_c) = (angle.sin(), angle.cos());
        let k = 2.0 * PI / (period * scale);
        for r in 0..s {
            for c in 0..s {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let (dr, dc) = (y - part.center.0, x - part.center.1);
                if dr * dr + dc * dc > part.radius * part.radius {
                    continue;
                }
                let wave = (k * (dr * dir_r + dc * dir_c) + phase).sin();
                for (ch, t) in tint.iter().enumerate() {
                    img[ch * s * s + r * s + c] = 0.5 + 0.45 * t * wave;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("finite std");
        for v in &mut img {
            *v += noise.sample(rng);
        }
    }
    let data = img.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec([3, s, s], data).expect("consistent shape")
}

/// Sample `index` alone; its randomness comes from stream `index + 1` of
/// the seed, so samples can be generated in any order.
pub fn generate_sample(spec: &DatasetSpec, combos: &[Vec<usize>], index: usize) -> Result<Sample> {
    let label = index % spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let mut textures = combos[label].clone();
    textures.shuffle(&mut rng);
    let parts = place_parts(spec, &textures, &mut rng)?;
    let image = render(spec, &parts, &mut rng);
    Ok(Sample { image, label, parts })
}

/// `classes · samples_per_class` samples, labels cycling `0, 1, …`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let combos = class_combinations(spec)?;
    (0..spec.len()).map(|i| generate_sample(spec, &combos, i)).collect()
}

/// Stratified split: in every class, `round(fraction · n)` samples (at least
/// one, at most `n - 1`) go to train. Both halves keep dataset order.
pub fn split(data: &[Sample], train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let classes = data.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut is_train = vec![false; data.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Dataset(format!("class {class} has {} sample; need 2 to split", idx.len())));
        }
        idx.shuffle(&mut rng);
        let take = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..take] {
            is_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in data.iter().zip(is_train) {
        if t {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}

/// Stacks the selected samples into `[B, 3, S, S]` with their labels.
pub fn batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::Dataset("empty batch".into()))?)
        .ok_or_else(|| Error::Dataset("batch index out of range".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * first.image.numel());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples.get(i).ok_or_else(|| Error::Dataset(format!("batch index {i} out of range")))?;
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Dataset(format!("sample {i} has shape {:?}, expected {shape:?}", s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let mut full = vec![indices.len()];
    full.extend(shape);
    Ok((Tensor::from_vec(full, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            samples_per_class: 10,
            image_size: 32,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_per_label() {
        let spec = DatasetSpec {
            samples_per_class: 100,
            image_size: 32,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        assert_eq!(data.len(), 800);
        for c in 0..8 {
            assert_eq!(data.iter().filter(|s| s.label == c).count(), 100);
        }
        assert!(data.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(&small(4)).unwrap();
        let b = generate_dataset(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(&small(5)).unwrap());
    }

    #[test]
    fn class_is_a_texture_multiset() {
        let spec = DatasetSpec {
            noise_std: 0.0,
            ..small(1)
        };
        let data = generate_dataset(&spec).unwrap();
        let ids = |s: &Sample| {
            let mut t: Vec<usize> = s.parts.iter().map(|p| p.texture).collect();
            t.sort();
            t
        };
        let same: Vec<&Sample> = data.iter().filter(|s| s.label == 3).collect();
        assert_eq!(ids(same[0]), ids(same[1]));
        assert_ne!(same[0].parts[0].center, same[1].parts[0].center);
        let combos = class_combinations(&spec).unwrap();
        let mut sorted = combos.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), combos.len());
    }

    #[test]
    fn parts_do_not_overlap() {
        for s in generate_dataset(&small(2)).unwrap() {
            let (a, b) = (&s.parts[0], &s.parts[1]);
            let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
            assert!(d >= a.radius + b.radius);
        }
    }

    #[test]
    fn dense_layouts_fail() {
        // Twelve discs of diameter ≥ 9 px cannot fit in 32×32 without overlap.
        let spec = DatasetSpec {
            parts_per_image: 12,
            texture_bank_size: 13,
            classes: 2,
            ..small(0)
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Dataset(_))));
    }

    #[test]
    fn invalid_specs() {
        assert!(DatasetSpec { classes: 1, ..small(0) }.validate().is_err());
        assert!(DatasetSpec { image_size: 48, ..small(0) }.validate().is_err());
        assert!(DatasetSpec { classes: 11, ..small(0) }.validate().is_err());
        assert!(DatasetSpec { parts_per_image: 1, ..small(0) }.validate().is_err());
    }

    #[test]
    fn stratified_split() {
        let data = generate_dataset(&small(0)).unwrap();
        let (train, test) = split(&data, 0.5, 7).unwrap();
        for c in 0..8 {
            assert_eq!(train.iter().filter(|s| s.label == c).count(), 5);
            assert_eq!(test.iter().filter(|s| s.label == c).count(), 5);
        }
        let mut union: Vec<_> = train.iter().chain(&test).map(|s| s.image.data().to_vec()).collect();
        let mut orig: Vec<_> = data.iter().map(|s| s.image.data().to_vec()).collect();
        let key = |v: &Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        union.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(union, orig);
        let (train2, _) = split(&data, 0.5, 8).unwrap();
        assert_ne!(train, train2);
        assert_eq!(train2.len(), train.len());
        assert!(split(&data, 1.0, 0).is_err());
        assert!(split(&data[..8], 0.5, 0).is_err());
    }

    #[test]
    fn batches_stack_images() {
        let data = generate_dataset(&small(0)).unwrap();
        let (x, y) = batch(&data, &[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y, vec![3, 0]);
        assert_eq!(&x.data()[..3 * 32 * 32], data[3].image.data());
        assert!(batch(&data, &[]).is_err());
    }
}
