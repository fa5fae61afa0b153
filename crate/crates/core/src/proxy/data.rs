use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Example, ProxyTask, Target, TaskKind, TrainerConfig};
use crate::error::{Error, Result};
use crate::metrics::BoxF;

/// Fraction of examples used for training; the rest form the eval split.
pub const TRAIN_FRACTION: f64 = 0.8;

const SEG_EXTRA_CHANNELS: usize = 2;
const SEG_NOISE: f64 = 0.6;
const SEG_SEEDS_PER_CLASS: usize = 2;

const BOX_FEATURES: usize = 32;
const DET_FEATURES: usize = 48;
const VECTOR_NOISE: f64 = 0.05;
/// Target box sides as fractions of the unit canvas.
const BOX_MIN_SIDE: f64 = 0.25;
const BOX_MAX_SIDE: f64 = 0.625;

fn split(mut examples: Vec<Example>) -> (Vec<Example>, Vec<Example>) {
    let n_train = (examples.len() as f64 * TRAIN_FRACTION).round() as usize;
    let eval = examples.split_off(n_train);
    (examples, eval)
}

/// Voronoi partition of an `hw × hw` image with `SEG_SEEDS_PER_CLASS` seeds
/// per class, so every class is present.
fn voronoi_labels(c: usize, hw: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut seeds: Vec<(f64, f64, usize)> = (0..c * SEG_SEEDS_PER_CLASS)
        .map(|k| (rng.random_range(0.0..hw as f64), rng.random_range(0.0..hw as f64), k % c))
        .collect();
    seeds.shuffle(rng);
    let mut labels = vec![0; hw * hw];
    for i in 0..hw {
        for j in 0..hw {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            labels[i * hw + j] = nearest.2;
        }
    }
    labels
}

/// 3×3 box blur with shrinking windows at the border.
fn blur(field: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for i in 0..hw {
        for j in 0..hw {
            let (mut sum, mut count) = (0.0, 0.0);
            for r in i.saturating_sub(1)..=(i + 1).min(hw - 1) {
                for c in j.saturating_sub(1)..=(j + 1).min(hw - 1) {
                    sum += field[r * hw + c];
                    count += 1.0;
                }
            }
            out[i * hw + j] = sum / count;
        }
    }
    out
}

/// Synthetic segmentation: Voronoi label maps, features are blurred class
/// indicators plus Gaussian noise (and a couple of pure-noise channels).
pub fn generate_segmentation_task(c: usize, n: usize, hw: usize, seed: u64) -> Result<ProxyTask> {
    if c < 2 || n < 20 || hw < 8 {
        return Err(Error::Config(format!(
            "segmentation task needs c ≥ 2, n ≥ 20, hw ≥ 8 (got c={c}, n={n}, hw={hw})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SEG_NOISE).unwrap();
    let k = c + SEG_EXTRA_CHANNELS;
    let examples = (0..n)
        .map(|_| {
            let labels = voronoi_labels(c, hw, &mut rng);
            let mut features = vec![0.0; hw * hw * k];
            for class in 0..c {
                let ind: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == class))).collect();
                for (p, v) in blur(&ind, hw).into_iter().enumerate() {
                    features[p * k + class] = 2.0 * v - 1.0;
                }
            }
            for f in features.iter_mut() {
                *f += noise.sample(&mut rng);
            }
            Example { features, target: Target::Labels(labels) }
        })
        .collect();
    let (train, eval) = split(examples);
    Ok(ProxyTask {
        kind: TaskKind::Seg,
        metric: TaskKind::Seg.default_metric(),
        classes: c,
        side: hw,
        feature_dim: k,
        hidden: 16,
        train,
        eval,
        trainer: TrainerConfig { iterations: 300, batch_size: 8, lr: 0.05, momentum: 0.9 },
        seed,
    })
}

fn random_target(rng: &mut impl Rng) -> BoxF {
    let w = rng.random_range(BOX_MIN_SIDE..BOX_MAX_SIDE);
    let h = rng.random_range(BOX_MIN_SIDE..BOX_MAX_SIDE);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    BoxF::new(x1, y1, x1 + w, y1 + h)
}

/// Normalized box code `(cx, cy, w, h)` roughly in `[-1, 1]`.
fn box_code(b: &BoxF) -> [f64; 4] {
    [
        b.x1 + b.x2 - 1.0,
        b.y1 + b.y2 - 1.0,
        2.0 * b.width() - 0.5,
        2.0 * b.height() - 0.5,
    ]
}

/// Random linear mixing `dim × code` plus noise.
struct Encoder {
    dim: usize,
    code: usize,
    mix: Vec<f64>,
}

impl Encoder {
    fn new(dim: usize, code: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (code as f64).sqrt();
        let mix = (0..dim * code).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Encoder { dim, code, mix }
    }

    fn encode(&self, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let noise = Normal::new(0.0, VECTOR_NOISE).unwrap();
        (0..self.dim)
            .map(|r| {
                let row = &self.mix[r * self.code..(r + 1) * self.code];
                row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + noise.sample(rng)
            })
            .collect()
    }
}

/// Synthetic box regression: features are a noisy random linear encoding of
/// the target box.
pub fn generate_box_task(n: usize, seed: u64) -> Result<ProxyTask> {
    if n < 20 {
        return Err(Error::Config(format!("box task needs n ≥ 20 (got {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(BOX_FEATURES, 4, &mut rng);
    let examples = (0..n)
        .map(|_| {
            let b = random_target(&mut rng);
            Example { features: enc.encode(&box_code(&b), &mut rng), target: Target::Box(b) }
        })
        .collect();
    let (train, eval) = split(examples);
    Ok(ProxyTask {
        kind: TaskKind::Box,
        metric: TaskKind::Box.default_metric(),
        classes: 1,
        side: 1,
        feature_dim: BOX_FEATURES,
        hidden: 32,
        train,
        eval,
        trainer: TrainerConfig { iterations: 600, batch_size: 16, lr: 0.002, momentum: 0.9 },
        seed,
    })
}

/// Synthetic single-object detection: features encode both the class and
/// the box; the predictor has a classification and a regression head.
pub fn generate_detection_task(c: usize, n: usize, seed: u64) -> Result<ProxyTask> {
    if c < 2 || n < 20 {
        return Err(Error::Config(format!("detection task needs c ≥ 2, n ≥ 20 (got c={c}, n={n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(DET_FEATURES, 4 + c, &mut rng);
    let examples = (0..n)
        .map(|_| {
            let bbox = random_target(&mut rng);
            let class = rng.random_range(0..c);
            let mut z = box_code(&bbox).to_vec();
            z.extend((0..c).map(|k| if k == class { 1.5 } else { -0.5 }));
            Example { features: enc.encode(&z, &mut rng), target: Target::Det { class, bbox } }
        })
        .collect();
    let (train, eval) = split(examples);
    Ok(ProxyTask {
        kind: TaskKind::Det,
        metric: TaskKind::Det.default_metric(),
        classes: c,
        side: 1,
        feature_dim: DET_FEATURES,
        hidden: 128,
        train,
        eval,
        trainer: TrainerConfig { iterations: 600, batch_size: 32, lr: 0.0005, momentum: 0.9 },
        seed,
    })
}
