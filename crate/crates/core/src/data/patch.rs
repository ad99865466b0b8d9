use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NoduleAnnotation, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HU_MIN: f32 = -1200.0;
pub const HU_MAX: f32 = 600.0;

const FLIP_PROB: f64 = 0.5;
const SCALE_RANGE: (f64, f64) = (0.75, 1.25);

/// Clips to `[HU_MIN, HU_MAX]`, maps onto `[0, 1]` and zeroes voxels outside
/// the lung mask when one is attached.
pub fn preprocess(volume: &Volume) -> Volume {
    let mask = volume.mask();
    volume.map_values(|i, v| match mask {
        Some(m) if m[i] == 0 => 0.0,
        _ => (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN),
    })
}

/// Flips and isotropic scale applied to a patch, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Mirrored axes, `[x, y, z]`.
    pub flips: [bool; 3],
    pub scale: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flips: [false; 3], scale: 1.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for Augmentation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// A normalized sub-volume in `[X, Y, Z]` layout like [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub data: Vec<f32>,
    pub size: [usize; 3],
    /// Position of voxel (0, 0, 0) in volume coordinates.
    pub origin: [i64; 3],
    /// Nodules in patch coordinates.
    pub annotations: Vec<NoduleAnnotation>,
    pub augmentation: Augmentation,
}

impl PatchSample {
    /// Single-channel network input `[1, 1, Z, Y, X]`.
    pub fn to_tensor(&self) -> Tensor {
        let [x, y, z] = self.size;
        Tensor::new(&[1, 1, z, y, x], self.data.iter().map(|&v| v as f64).collect()).unwrap()
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.size[1] + y) * self.size[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

/// Copies `size` voxels starting at `origin`; outside the volume reads 0.
pub fn crop(volume: &Volume, origin: [i64; 3], size: [usize; 3]) -> Vec<f32> {
    let dims = volume.dims();
    let mut out = vec![0.0f32; size.iter().product()];
    let (x0, x1) = (origin[0].max(0), (origin[0] + size[0] as i64).min(dims[0] as i64));
    if x0 >= x1 {
        return out;
    }
    for z in 0..size[2] {
        let vz = origin[2] + z as i64;
        if vz < 0 || vz >= dims[2] as i64 {
            continue;
        }
        for y in 0..size[1] {
            let vy = origin[1] + y as i64;
            if vy < 0 || vy >= dims[1] as i64 {
                continue;
            }
            let src = volume.index(x0 as usize, vy as usize, vz as usize);
            let dst = (z * size[1] + y) * size[0] + (x0 - origin[0]) as usize;
            let n = (x1 - x0) as usize;
            out[dst..dst + n].copy_from_slice(&volume.data()[src..src + n]);
        }
    }
    out
}

fn remap(annotations: &[NoduleAnnotation], origin: [i64; 3], size: [usize; 3]) -> Vec<NoduleAnnotation> {
    annotations
        .iter()
        .filter_map(|a| {
            let c = [a.x - origin[0] as f64, a.y - origin[1] as f64, a.z - origin[2] as f64];
            let inside = c.iter().zip(size).all(|(&v, s)| v >= 0.0 && v < s as f64);
            inside.then(|| NoduleAnnotation { scan_id: a.scan_id.clone(), x: c[0], y: c[1], z: c[2], ..a.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub patch: usize,
    /// Probability of centering the crop near a random nodule.
    pub nodule_prob: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { patch: 128, nodule_prob: 0.7 }
    }
}

/// Random training crop. Nodule-centered crops place the chosen center
/// within the middle half of the patch; nodules whose centers leave the
/// crop are dropped.
pub fn extract_train_patch<R: Rng + ?Sized>(
    volume: &Volume,
    annotations: &[NoduleAnnotation],
    rng: &mut R,
    cfg: &CropConfig,
) -> PatchSample {
    let p = cfg.patch;
    let dims = volume.dims();
    let centered = !annotations.is_empty() && rng.random_bool(cfg.nodule_prob);
    let mut origin = [0i64; 3];
    if centered {
        let a = &annotations[rng.random_range(0..annotations.len())];
        let quarter = (p / 4) as i64;
        for (axis, c) in a.center().into_iter().enumerate() {
            let jitter = rng.random_range(-quarter..=quarter);
            let o = c.floor() as i64 - (p / 2) as i64 + jitter;
            origin[axis] = o.clamp(0, dims[axis].saturating_sub(p) as i64);
        }
    } else {
        for (axis, o) in origin.iter_mut().enumerate() {
            *o = rng.random_range(0..=dims[axis].saturating_sub(p)) as i64;
        }
    }
    let size = [p; 3];
    PatchSample {
        data: crop(volume, origin, size),
        size,
        origin,
        annotations: remap(annotations, origin, size),
        augmentation: Augmentation::IDENTITY,
    }
}

fn trilinear(data: &[f32], size: [usize; 3], s: [f64; 3]) -> f32 {
    let base = s.map(|v| v.floor());
    let frac = [s[0] - base[0], s[1] - base[1], s[2] - base[2]];
    let base = base.map(|v| v as i64);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let c = base[a] + off[a] as i64;
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            inside &= c >= 0 && c < size[a] as i64;
            idx[a] = c.max(0) as usize;
        }
        if inside && w != 0.0 {
            acc += w * data[(idx[2] * size[1] + idx[1]) * size[0] + idx[0]] as f64;
        }
    }
    acc as f32
}

/// Applies `aug` on top of `sample`: mirror the flagged axes, then rescale
/// about the patch center with trilinear interpolation (outside reads 0).
pub fn apply_augmentation(sample: &PatchSample, aug: Augmentation) -> PatchSample {
    if aug.is_identity() {
        return sample.clone();
    }
    let size = sample.size;
    let center = size.map(|s| (s as f64 - 1.0) / 2.0);
    let f = aug.scale;
    let mut data = vec![0.0f32; sample.data.len()];
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let mut s = [x, y, z].map(|v| v as f64);
                for a in 0..3 {
                    if f != 1.0 {
                        s[a] = center[a] + (s[a] - center[a]) / f;
                    }
                    if aug.flips[a] {
                        s[a] = (size[a] - 1) as f64 - s[a];
                    }
                }
                data[(z * size[1] + y) * size[0] + x] = if f == 1.0 {
                    sample.get(s[0] as usize, s[1] as usize, s[2] as usize)
                } else {
                    trilinear(&sample.data, size, s)
                };
            }
        }
    }
    let annotations = sample
        .annotations
        .iter()
        .filter_map(|a| {
            let mut c = a.center();
            for i in 0..3 {
                if aug.flips[i] {
                    c[i] = (size[i] - 1) as f64 - c[i];
                }
                c[i] = center[i] + f * (c[i] - center[i]);
            }
            let inside = c.iter().zip(size).all(|(&v, s)| v >= 0.0 && v < s as f64);
            inside.then(|| NoduleAnnotation { x: c[0], y: c[1], z: c[2], diameter: a.diameter * f, ..a.clone() })
        })
        .collect();
    PatchSample { data, size, origin: sample.origin, annotations, augmentation: aug }
}

/// Draws independent per-axis flips (p = 0.5) and a scale in `[0.75, 1.25)`.
pub fn augment<R: Rng + ?Sized>(sample: &PatchSample, rng: &mut R) -> PatchSample {
    let flips = [rng.random_bool(FLIP_PROB), rng.random_bool(FLIP_PROB), rng.random_bool(FLIP_PROB)];
    let scale = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
    apply_augmentation(sample, Augmentation { flips, scale })
}

/// Patch origins along one axis: stride `patch − overlap`, the last origin
/// clamped so the final patch ends at `max(dim, patch)`.
pub fn tile_origins(dim: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 || overlap >= patch {
        return Err(Error::Config(format!("overlap {overlap} must be below patch {patch}")));
    }
    let padded = dim.max(patch);
    let mut origins = vec![0];
    loop {
        let last = *origins.last().unwrap();
        if last + patch >= padded {
            return Ok(origins);
        }
        origins.push((last + patch - overlap).min(padded - patch));
    }
}

/// Overlapping test patches covering the (zero-padded) volume, in z, y, x
/// order. The volume should already be normalized.
pub fn tile_test_patches(volume: &Volume, patch: usize, overlap: usize) -> Result<Vec<PatchSample>> {
    let dims = volume.dims();
    let axes: Vec<Vec<usize>> = dims.iter().map(|&d| tile_origins(d, patch, overlap)).collect::<Result<_>>()?;
    let size = [patch; 3];
    let mut out = Vec::new();
    for &oz in &axes[2] {
        for &oy in &axes[1] {
            for &ox in &axes[0] {
                let origin = [ox as i64, oy as i64, oz as i64];
                out.push(PatchSample {
                    data: crop(volume, origin, size),
                    size,
                    origin,
                    annotations: Vec::new(),
                    augmentation: Augmentation::IDENTITY,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ann(x: f64, y: f64, z: f64, d: f64) -> NoduleAnnotation {
        NoduleAnnotation { scan_id: "s".into(), x, y, z, diameter: d }
    }

    #[test]
    fn preprocess_endpoints() {
        let v = Volume::new("s", [8, 8, 8], {
            let mut d = vec![0.0f32; 512];
            d[..5].copy_from_slice(&[-1200.0, 600.0, -1500.0, -300.0, 900.0]);
            d
        })
        .unwrap();
        let n = preprocess(&v);
        assert_eq!(&n.data()[..5], &[0.0, 1.0, 0.0, 0.5, 1.0]);
        let clamped = v.map_values(|_, x| x.clamp(HU_MIN, HU_MAX));
        assert_eq!(preprocess(&clamped), n);
    }

    #[test]
    fn mask_zeroes_outside() {
        let v = Volume::new("s", [8, 8, 8], vec![0.0; 512]).unwrap();
        let mask: Vec<u8> = (0..512).map(|i| (i >= 256) as u8).collect();
        let n = preprocess(&v.with_mask(mask).unwrap());
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[300], 1200.0 / 1800.0);
    }

    #[test]
    fn tile_origin_examples() {
        assert_eq!(tile_origins(384, 208, 32).unwrap(), vec![0, 176]);
        assert_eq!(tile_origins(208, 208, 32).unwrap(), vec![0]);
        assert_eq!(tile_origins(400, 208, 32).unwrap(), vec![0, 176, 192]);
        assert_eq!(tile_origins(100, 208, 32).unwrap(), vec![0]);
        assert!(tile_origins(100, 32, 32).is_err());
        let v = Volume::new("s", [384, 8, 8], vec![0.0; 384 * 64]).unwrap();
        assert_eq!(tile_test_patches(&v, 208, 32).unwrap().len(), 2);
    }

    #[test]
    fn crop_pads_with_zero() {
        let v = Volume::new("s", [8, 8, 8], vec![1.0; 512]).unwrap();
        let c = crop(&v, [-2, 0, 5], [4, 2, 4]);
        // x = 0, 1 fall before the volume, z ≥ 8 after it
        assert_eq!(c[0], 0.0);
        assert_eq!(c[2], 1.0);
        assert_eq!(c[(3 * 2) * 4 + 2], 0.0);
    }

    #[test]
    fn centered_crop_contains_nodule() {
        let v = Volume::new("s", [40, 40, 40], vec![0.0; 64000]).unwrap();
        let anns = [ann(3.0, 37.5, 20.0, 6.0)];
        let cfg = CropConfig { patch: 16, nodule_prob: 1.0 };
        for seed in 0..50 {
            let s = extract_train_patch(&v, &anns, &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            assert_eq!(s.annotations.len(), 1);
            let a = &s.annotations[0];
            assert_eq!(a.x + s.origin[0] as f64, 3.0);
            assert_eq!(a.y + s.origin[1] as f64, 37.5);
            let again = extract_train_patch(&v, &anns, &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            assert_eq!(again.origin, s.origin);
        }
    }

    #[test]
    fn identity_augmentation_is_bit_identical() {
        let data: Vec<f32> = (0..512).map(|i| (i as f32 * 0.123).sin()).collect();
        let s = PatchSample { data, size: [8; 3], origin: [0; 3], annotations: vec![ann(1.0, 2.0, 3.0, 4.0)], augmentation: Augmentation::IDENTITY };
        assert_eq!(apply_augmentation(&s, Augmentation::IDENTITY), s);
    }

    #[test]
    fn flip_and_scale_move_annotations() {
        let s = PatchSample { data: vec![0.0; 512], size: [8; 3], origin: [0; 3], annotations: vec![ann(1.0, 2.0, 3.5, 8.0)], augmentation: Augmentation::IDENTITY };
        let f = apply_augmentation(&s, Augmentation { flips: [true, false, false], scale: 1.0 });
        assert_eq!(f.annotations[0].x, 6.0);
        assert_eq!(f.annotations[0].y, 2.0);
        let g = apply_augmentation(&s, Augmentation { flips: [false; 3], scale: 1.25 });
        assert_eq!(g.annotations[0].diameter, 10.0);
        assert_eq!(g.annotations[0].z, 3.5);
    }
}
