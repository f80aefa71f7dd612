//! Balancing augmentation: random crop, horizontal flip, and rotation at an
//! arbitrary angle, applied to minority-class instances until every class
//! matches the majority count.
//!
//! All randomness flows through per-copy rng streams derived as
//! `hash(seed, source instance id, copy index)`, so results do not depend on
//! iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledInstance, Provenance, SaO2Class};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn d_crop() -> [f64; 2] {
    [0.875, 1.0]
}
fn d_hflip() -> f64 {
    0.5
}
fn d_rotation() -> [f64; 2] {
    [0.0, 360.0]
}

/// Augmentation transform ranges. Interpolation is bilinear; out-of-frame
/// pixels after rotation take `fill`, which defaults to black to match dark
/// scan backgrounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// fraction of each side kept by the random crop, [lo, hi] in (0, 1]
    #[serde(default = "d_crop")]
    pub crop_scale_range: [f64; 2],
    #[serde(default = "d_hflip")]
    pub hflip_prob: f64,
    /// degrees, [lo, hi] within [0, 360]
    #[serde(default = "d_rotation")]
    pub rotation_range: [f64; 2],
    #[serde(default)]
    pub fill: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_scale_range: d_crop(),
            hflip_prob: d_hflip(),
            rotation_range: d_rotation(),
            fill: 0.0,
        }
    }
}

impl AugmentPolicy {
    /// A policy whose draw is always the identity transform.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            rotation_range: [0.0, 0.0],
            fill: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [clo, chi] = self.crop_scale_range;
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return Err(Error::Policy(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got {:?}",
                self.crop_scale_range
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Policy(format!(
                "hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        let [rlo, rhi] = self.rotation_range;
        if !(0.0 <= rlo && rlo <= rhi && rhi <= 360.0) {
            return Err(Error::Policy(format!(
                "rotation_range must satisfy 0 <= lo <= hi <= 360, got {:?}",
                self.rotation_range
            )));
        }
        Ok(())
    }
}

/// One concrete transform, drawn once per augmented instance and applied to
/// every slice so a volume stays spatially coherent.
#[derive(Debug, Clone, Copy)]
struct AugmentSample {
    scale: f64,
    crop_y: f64,
    crop_x: f64,
    hflip: bool,
    angle_deg: f64,
}

impl AugmentSample {
    /// Draw order is fixed: scale, crop y, crop x, flip coin, angle.
    fn draw(policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> AugmentSample {
        let u = |rng: &mut ChaCha8Rng| rng.random::<f64>();
        let [clo, chi] = policy.crop_scale_range;
        let scale = clo + u(rng) * (chi - clo);
        let crop_y = u(rng);
        let crop_x = u(rng);
        let hflip = u(rng) < policy.hflip_prob;
        let [rlo, rhi] = policy.rotation_range;
        let angle_deg = (rlo + u(rng) * (rhi - rlo)) % 360.0;
        AugmentSample {
            scale,
            crop_y,
            crop_x,
            hflip,
            angle_deg,
        }
    }
}

/// Stable stream derivation: FNV-1a over (seed, tag, k), expanded to a
/// 32-byte ChaCha key with per-word salts.
pub fn derive_rng(seed: u64, tag: &str, k: u64) -> ChaCha8Rng {
    fn fnv1a(init: u64, bytes: &[u8]) -> u64 {
        let mut h = init;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
    let mut key = [0u8; 32];
    for (w, chunk) in key.chunks_mut(8).enumerate() {
        let mut h = 0xcbf2_9ce4_8422_2325 ^ (w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h = fnv1a(h, &seed.to_le_bytes());
        h = fnv1a(h, tag.as_bytes());
        h = fnv1a(h, &k.to_le_bytes());
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Bilinear resize of an `[H, W, C]` image; pixel centers aligned via the
/// half-pixel convention.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("resize expects [H,W,C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(vec![out_h, out_w, c]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v = image.at3(y0, x0, ch) * (1.0 - wy) * (1.0 - wx)
                    + image.at3(y0, x1, ch) * (1.0 - wy) * wx
                    + image.at3(y1, x0, ch) * wy * (1.0 - wx)
                    + image.at3(y1, x1, ch) * wy * wx;
                out.set3(i, j, ch, v);
            }
        }
    }
    Ok(out)
}

fn hflip(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(vec![h, w, c]);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out.set3(i, j, ch, image.at3(i, w - 1 - j, ch));
            }
        }
    }
    out
}

/// Snaps trig values within 1e-12 of {-1, 0, 1} so quarter-turn rotations map
/// pixel centers exactly onto pixel centers.
fn snapped_trig(angle_deg: f64) -> (f64, f64) {
    let rad = angle_deg.to_radians();
    let snap = |v: f64| {
        for target in [-1.0, 0.0, 1.0] {
            if (v - target).abs() < 1e-12 {
                return target;
            }
        }
        v
    };
    (snap(rad.cos()), snap(rad.sin()))
}

/// Rotates counter-clockwise about the image center, bilinear sampling with
/// `fill` outside the frame.
fn rotate_bilinear(image: &Tensor, angle_deg: f64, fill: f64) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (cos_t, sin_t) = snapped_trig(angle_deg);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Tensor::zeros(vec![h, w, c]);
    let sample = |fy: f64, fx: f64, ch: usize| -> f64 {
        let y0 = fy.floor();
        let x0 = fx.floor();
        let wy = fy - y0;
        let wx = fx - x0;
        let mut acc = 0.0;
        for (dy, wyv) in [(0.0, 1.0 - wy), (1.0, wy)] {
            for (dx, wxv) in [(0.0, 1.0 - wx), (1.0, wx)] {
                let yy = y0 + dy;
                let xx = x0 + dx;
                let v = if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                    image.at3(yy as usize, xx as usize, ch)
                } else {
                    fill
                };
                acc += v * wyv * wxv;
            }
        }
        acc
    };
    // inverse mapping: source = R(-theta) * (dest - center) + center
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = cos_t * dy + sin_t * dx + cy;
            let sx = -sin_t * dy + cos_t * dx + cx;
            for ch in 0..c {
                out.set3(i, j, ch, sample(sy, sx, ch));
            }
        }
    }
    out
}

fn apply_sample(image: &Tensor, sample: &AugmentSample, policy: &AugmentPolicy) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("augment expects [H,W,C], got {s:?}")));
    }
    let (h, w, _c) = (s[0], s[1], s[2]);
    if h < 8 || w < 8 {
        return Err(Error::contract(format!(
            "augmentation requires images of at least 8x8, got {h}x{w}"
        )));
    }
    let ch = (sample.scale * h as f64).round() as usize;
    let cw = (sample.scale * w as f64).round() as usize;
    if ch == 0 || cw == 0 {
        return Err(Error::Policy(format!(
            "crop scale {} yields a window below one pixel on {h}x{w}",
            sample.scale
        )));
    }
    let mut img = if ch == h && cw == w {
        image.clone()
    } else {
        let y0 = (sample.crop_y * (h - ch + 1) as f64).floor() as usize;
        let x0 = (sample.crop_x * (w - cw + 1) as f64).floor() as usize;
        let y0 = y0.min(h - ch);
        let x0 = x0.min(w - cw);
        let mut window = Tensor::zeros(vec![ch, cw, s[2]]);
        for i in 0..ch {
            for j in 0..cw {
                for k in 0..s[2] {
                    window.set3(i, j, k, image.at3(y0 + i, x0 + j, k));
                }
            }
        }
        resize_bilinear(&window, h, w)?
    };
    if sample.hflip {
        img = hflip(&img);
    }
    if sample.angle_deg != 0.0 {
        img = rotate_bilinear(&img, sample.angle_deg, policy.fill);
    }
    Ok(img)
}

/// Applies one random crop -> resize -> flip -> rotate pass; the output keeps
/// the input shape. Deterministic in (image, policy, rng state).
pub fn augment_once(image: &Tensor, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    policy.validate()?;
    let sample = AugmentSample::draw(policy, rng);
    apply_sample(image, &sample, policy)
}

/// Upsamples minority classes with augmented copies until every class count
/// equals the pre-balance majority count. Originals pass through untouched;
/// sources cycle round-robin in dataset order, each copy on its own derived
/// rng stream.
pub fn balance_augment(dataset: &Dataset, policy: &AugmentPolicy, seed: u64) -> Result<Dataset> {
    policy.validate()?;
    dataset.validate()?;
    let majority = *dataset.class_counts.iter().max().unwrap_or(&0);
    for class in SaO2Class::ALL {
        if dataset.class_counts[class.index()] == 0 {
            return Err(Error::Balance(format!(
                "class {class} has no instances to augment from"
            )));
        }
    }
    let mut instances = dataset.instances.clone();
    for class in SaO2Class::ALL {
        let originals: Vec<&LabeledInstance> = dataset
            .instances
            .iter()
            .filter(|i| i.sao2_class == class)
            .collect();
        let need = majority - originals.len();
        for n in 0..need {
            let source = originals[n % originals.len()];
            let copy_index = (n / originals.len()) as u64;
            let mut rng = derive_rng(seed, &source.instance_id, copy_index);
            let sample = AugmentSample::draw(policy, &mut rng);
            let slices = source
                .slices
                .iter()
                .map(|s| apply_sample(s, &sample, policy))
                .collect::<Result<Vec<_>>>()?;
            instances.push(LabeledInstance {
                instance_id: format!("{}.aug{}", source.instance_id, copy_index),
                slices,
                sao2_percent: source.sao2_percent,
                sao2_class: source.sao2_class,
                is_augmented: true,
                source_id: source.instance_id.clone(),
            });
        }
    }
    Dataset::new(instances, Provenance::Augmented)
}
