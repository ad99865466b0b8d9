use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NoduleAnnotation, Volume};
use crate::error::{Error, Result};
use crate::eval::Candidate;

pub const BACKGROUND_HU: f32 = -900.0;
const BACKGROUND_STD: f64 = 50.0;
const BACKGROUND_SIGMA: f64 = 1.5;
/// Mean nodule intensity; individual nodules vary by ±50.
pub const NODULE_HU: f32 = -100.0;
const TUBE_HU: (f64, f64) = (-200.0, -100.0);
const TUBE_RADIUS: (f64, f64) = (0.8, 1.6);
const TUBE_LENGTH: (f64, f64) = (15.0, 45.0);
/// Width of the logistic edge profile, voxels.
const EDGE: f64 = 0.6;
const MIN_GAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `[X, Y, Z]` in voxels.
    pub dims: [usize; 3],
    pub n_volumes: usize,
    pub nodules_min: usize,
    pub nodules_max: usize,
    pub diameter_min: f64,
    pub diameter_max: f64,
    /// Expected vessel-like tube segments per 10⁵ voxels.
    pub distractor_density: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [96, 96, 96],
            n_volumes: 20,
            nodules_min: 1,
            nodules_max: 4,
            diameter_min: 4.0,
            diameter_max: 20.0,
            distractor_density: 1.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodules_min > self.nodules_max {
            return Err(Error::Config(format!("nodules_min {} > nodules_max {}", self.nodules_min, self.nodules_max)));
        }
        if !(self.diameter_min > 0.0 && self.diameter_min <= self.diameter_max) {
            return Err(Error::Config(format!(
                "diameter range [{}, {}] must be positive and ordered",
                self.diameter_min, self.diameter_max
            )));
        }
        if !(self.distractor_density >= 0.0 && self.distractor_density.is_finite()) {
            return Err(Error::Config("distractor_density must be non-negative".into()));
        }
        if self.dims.iter().any(|&d| d < super::MIN_DIM || (d as f64) < self.diameter_max + 2.0) {
            return Err(Error::Config(format!("dims {:?} too small for diameter {}", self.dims, self.diameter_max)));
        }
        Ok(())
    }

    /// Seed of the `index`-th volume.
    pub fn volume_seed(&self, index: usize) -> u64 {
        crate::rng::derive_seed(self.seed, &[index as u64])
    }
}

fn smooth_noise(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * BACKGROUND_SIGMA).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * BACKGROUND_SIGMA.powi(2))).exp()).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut tmp = vec![0.0; n];
    for axis in 0..3 {
        let (len, stride) = (dims[axis] as isize, strides[axis]);
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                // reflect at the borders
                let mut q = pos + k as isize - radius;
                if q < 0 {
                    q = -q;
                }
                if q >= len {
                    q = 2 * (len - 1) - q;
                }
                let q = q.clamp(0, len - 1);
                acc += w * v[(i as isize + (q - pos) * stride as isize) as usize];
            }
            *out = acc;
        }
        std::mem::swap(&mut v, &mut tmp);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    v.iter().map(|x| (x - mean) / std).collect()
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Raises `field` to `contrast · edge(distance)` inside the box around an object.
fn paint(field: &mut [f64], dims: [usize; 3], lo: [f64; 3], hi: [f64; 3], contrast: f64, dist: impl Fn([f64; 3]) -> f64, radius: f64) {
    let reach = radius + 5.0 * EDGE;
    let range = |a: usize| {
        let s = (lo[a] - reach).floor().max(0.0) as usize;
        let e = ((hi[a] + reach).ceil() as usize).min(dims[a] - 1);
        s..=e
    };
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let d = dist([x as f64, y as f64, z as f64]);
                if d > reach {
                    continue;
                }
                let c = contrast * logistic((radius - d) / EDGE);
                let f = &mut field[(z * dims[1] + y) * dims[0] + x];
                *f = f.max(c);
            }
        }
    }
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 { (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Synthetic scan: smooth lung-range background, soft spherical nodules and
/// vessel-like tube distractors. Pure in `(seed, config)`.
pub fn generate_phantom(seed: u64, config: &PhantomConfig, scan_id: &str) -> Result<(Volume, Vec<NoduleAnnotation>)> {
    config.validate()?;
    let dims = config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = smooth_noise(dims, &mut rng);
    let mut field = vec![0.0f64; background.len()];

    let count = rng.random_range(config.nodules_min..=config.nodules_max);
    let mut nodules: Vec<NoduleAnnotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..1000 {
            let d = if config.diameter_min == config.diameter_max {
                config.diameter_min
            } else {
                rng.random_range(config.diameter_min..=config.diameter_max)
            };
            let r = d / 2.0;
            let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(r + 1.0..=dims[a] as f64 - r - 2.0));
            if nodules.iter().any(|n| dist(n.center(), c) < n.diameter / 2.0 + r + MIN_GAP) {
                continue;
            }
            let hu = NODULE_HU as f64 + rng.random_range(-50.0..=50.0);
            paint(&mut field, dims, c, c, hu - BACKGROUND_HU as f64, |p| dist(p, c), r);
            nodules.push(NoduleAnnotation { scan_id: scan_id.to_string(), x: c[0], y: c[1], z: c[2], diameter: d });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!("cannot place {count} non-overlapping nodules in {dims:?}")));
        }
    }

    let expected = config.distractor_density * dims.iter().product::<usize>() as f64 / 1e5;
    let tubes = expected.floor() as usize + rng.random_bool(expected.fract()) as usize;
    for _ in 0..tubes {
        let a: [f64; 3] = std::array::from_fn(|i| rng.random_range(0.0..dims[i] as f64));
        let mut dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let len = rng.random_range(TUBE_LENGTH.0..TUBE_LENGTH.1);
        dir.iter_mut().for_each(|v| *v *= len / norm);
        let b: [f64; 3] = std::array::from_fn(|i| (a[i] + dir[i]).clamp(0.0, dims[i] as f64 - 1.0));
        let radius = rng.random_range(TUBE_RADIUS.0..TUBE_RADIUS.1);
        let hu = rng.random_range(TUBE_HU.0..TUBE_HU.1);
        let lo = std::array::from_fn(|i| a[i].min(b[i]));
        let hi = std::array::from_fn(|i| a[i].max(b[i]));
        paint(&mut field, dims, lo, hi, hu - BACKGROUND_HU as f64, |p| segment_distance(p, a, b), radius);
    }

    let data = background
        .iter()
        .zip(&field)
        .map(|(n, f)| (BACKGROUND_HU as f64 + BACKGROUND_STD * n + f) as f32)
        .collect();
    Ok((Volume::new(scan_id, dims, data)?, nodules))
}

/// Intensity-threshold detector: 6-connected components above `threshold_hu`,
/// one candidate per component at its centroid, scored by the ratio of the
/// shortest to the longest bounding-box side (round blobs score high).
pub fn threshold_baseline(volume: &Volume, threshold_hu: f32) -> Vec<Candidate> {
    let dims = volume.dims();
    let n = volume.data().len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] || volume.data()[start] <= threshold_hu {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut count, mut sum) = (0usize, [0.0f64; 3]);
        let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
        while let Some(i) = queue.pop_front() {
            let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            count += 1;
            for a in 0..3 {
                sum[a] += p[a] as f64;
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            let strides = [1, dims[0], dims[0] * dims[1]];
            for a in 0..3 {
                let mut visit = |j: usize| {
                    if !seen[j] && volume.data()[j] > threshold_hu {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if p[a] > 0 {
                    visit(i - strides[a]);
                }
                if p[a] + 1 < dims[a] {
                    visit(i + strides[a]);
                }
            }
        }
        let extent = [0, 1, 2].map(|a| (hi[a] - lo[a] + 1) as f64);
        let isotropy = extent.iter().fold(f64::MAX, |m, &e| m.min(e)) / extent.iter().fold(0.0f64, |m, &e| m.max(e));
        out.push(Candidate {
            scan_id: volume.scan_id.clone(),
            x: sum[0] / count as f64,
            y: sum[1] / count as f64,
            z: sum[2] / count as f64,
            probability: isotropy.clamp(1e-6, 1.0 - 1e-6),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { dims: [48, 48, 48], ..Default::default() }
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = generate_phantom(5, &small(), "p").unwrap();
        let b = generate_phantom(5, &small(), "p").unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(6, &small(), "p").unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn inverted_ranges_are_rejected() {
        let cfg = PhantomConfig { nodules_min: 3, nodules_max: 2, ..small() };
        assert!(matches!(generate_phantom(0, &cfg, "p"), Err(Error::Config(_))));
        let cfg = PhantomConfig { diameter_min: 9.0, diameter_max: 5.0, ..small() };
        assert!(matches!(generate_phantom(0, &cfg, "p"), Err(Error::Config(_))));
    }

    #[test]
    fn nodules_stay_in_range_and_apart() {
        for seed in 0..10 {
            let (v, anns) = generate_phantom(seed, &small(), "p").unwrap();
            assert!((1..=4).contains(&anns.len()));
            for (i, a) in anns.iter().enumerate() {
                a.validate(v.dims()).unwrap();
                assert!((4.0..=20.0).contains(&a.diameter));
                for b in &anns[..i] {
                    assert!(dist(a.center(), b.center()) >= (a.diameter + b.diameter) / 2.0);
                }
            }
        }
    }

    #[test]
    fn baseline_finds_isolated_blob() {
        let cfg = PhantomConfig { nodules_min: 1, nodules_max: 1, diameter_min: 10.0, diameter_max: 10.0, distractor_density: 0.0, ..small() };
        let (v, anns) = generate_phantom(1, &cfg, "p").unwrap();
        let cands = threshold_baseline(&v, -500.0);
        assert_eq!(cands.len(), 1);
        assert!(dist([cands[0].x, cands[0].y, cands[0].z], anns[0].center()) < 1.0);
    }
}
