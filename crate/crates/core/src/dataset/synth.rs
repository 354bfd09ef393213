//! Procedural face-like images with per-method attack signatures.
//!
//! Identity texture lives at 1–2 cycles per image. Physical attacks shift
//! global statistics (tint, contrast, saturation) and add 3–4 cycle banding.
//! Digital attacks add fixed 5–12 cycle patterns confined to local windows.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{AttackMethod, AttackType, Ethnicity, Image, Label, SampleDescriptor, SampleRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_ids: u32,
    pub frames_per_video: u32,
    pub image_size: usize,
    pub signal_strength: f64,
    pub seed: u64,
    /// Methods every identity is rendered with (live included).
    #[serde(default = "all_methods")]
    pub methods: Vec<AttackMethod>,
}

fn all_methods() -> Vec<AttackMethod> {
    AttackMethod::ALL.to_vec()
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_ids: 60, frames_per_video: 5, image_size: 32, signal_strength: 1.0, seed: 0, methods: all_methods() }
    }
}

impl SynthConfig {
    /// The dataset size the full-size protocol counts were taken from.
    pub fn full_size() -> Self {
        Self { num_ids: 1800, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 1 {
            return Err(Error::Config("num_ids must be at least 1".into()));
        }
        if self.frames_per_video < 1 {
            return Err(Error::Config("frames_per_video must be at least 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is below the minimum of 16", self.image_size)));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::Config("signal_strength must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method set is empty".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser folded over `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// One method's fixed signature. All amplitudes are multiplied by the
/// configured signal strength.
#[derive(Clone, Copy, Debug)]
enum Signature {
    None,
    Physical { tint: [f64; 3], contrast: f64, desaturate: f64, band_dir: (f64, f64), band_amp: f64 },
    Local { window: (f64, f64, f64, f64), freq: (f64, f64), phase: f64, amp: f64, channels: [f64; 3] },
}

/// Overall scale of every attack signature at `signal_strength = 1`.
const SIGNATURE_GAIN: f64 = 3.0;

fn signature(method: AttackMethod) -> Signature {
    use AttackMethod::*;
    let local = |window, freq, phase, amp, channels| Signature::Local { window, freq, phase, amp, channels };
    match method {
        None => Signature::None,
        PrintIndoor => Signature::Physical {
            tint: [0.07, 0.03, -0.05],
            contrast: 0.15,
            desaturate: 0.0,
            band_dir: (0.0, 3.0),
            band_amp: 0.04,
        },
        PrintOutdoor => Signature::Physical {
            tint: [0.06, 0.06, 0.06],
            contrast: 0.0,
            desaturate: 0.35,
            band_dir: (4.0, 0.0),
            band_amp: 0.035,
        },
        Replay => Signature::Physical {
            tint: [-0.03, 0.0, 0.08],
            contrast: -0.10,
            desaturate: 0.0,
            band_dir: (3.0, 3.0),
            band_amp: 0.04,
        },
        // Adversarial perturbations spread over the central face area.
        Advdrop => local((0.2, 0.2, 0.8, 0.8), (9.0, 0.0), 0.3, 0.05, [1.0, 1.0, 1.0]),
        Alma => local((0.2, 0.2, 0.8, 0.8), (0.0, 9.0), 1.1, 0.05, [1.0, -1.0, 1.0]),
        Demiguise => local((0.2, 0.2, 0.8, 0.8), (7.0, 7.0), 0.7, 0.05, [1.0, 0.5, -0.5]),
        Fgtm => local((0.2, 0.2, 0.8, 0.8), (11.0, 5.0), 2.0, 0.05, [-1.0, 1.0, 1.0]),
        IlaDa => local((0.2, 0.2, 0.8, 0.8), (5.0, 11.0), 0.2, 0.05, [1.0, 1.0, -1.0]),
        Ssah => local((0.2, 0.2, 0.8, 0.8), (10.0, -6.0), 1.6, 0.05, [0.5, -1.0, 1.0]),
        // Face swaps and reenactment leave artefacts around eyes, nose and mouth.
        Facedancer => local((0.25, 0.25, 0.75, 0.50), (6.0, 0.0), 0.9, 0.07, [1.0, 0.8, 0.6]),
        Insightface => local((0.30, 0.55, 0.70, 0.80), (0.0, 6.0), 0.4, 0.07, [0.6, 1.0, 0.8]),
        Simswap => local((0.20, 0.30, 0.80, 0.75), (6.0, 6.0), 1.3, 0.07, [-0.8, 0.6, 1.0]),
        Safa => local((0.35, 0.20, 0.65, 0.85), (8.0, -4.0), 0.1, 0.07, [1.0, -0.6, 0.6]),
        Dagan => local((0.20, 0.40, 0.80, 0.65), (12.0, 0.0), 2.4, 0.07, [0.7, 0.7, -1.0]),
        Oneshotth => local((0.25, 0.35, 0.75, 0.90), (4.0, 8.0), 0.6, 0.07, [1.0, 1.0, 1.0]),
    }
}

fn skin_tone(e: Ethnicity) -> [f64; 3] {
    match e {
        Ethnicity::African => [0.42, 0.30, 0.24],
        Ethnicity::EastAsian => [0.78, 0.63, 0.52],
        Ethnicity::CentralAsian => [0.68, 0.53, 0.44],
    }
}

struct IdentityTexture {
    background: [f64; 3],
    center: (f64, f64),
    radii: (f64, f64),
    waves: Vec<(f64, f64, f64, [f64; 3])>,
    features: Vec<(f64, f64, f64, f64)>,
}

impl IdentityTexture {
    fn new(identity_id: u32, ethnicity: Ethnicity) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0x1D, identity_id as u64, ethnicity.index() as u64]));
        let background = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let center = (0.5 + rng.random_range(-0.05..0.05), 0.5 + rng.random_range(-0.05..0.05));
        let radii = (rng.random_range(0.26..0.34), rng.random_range(0.34..0.42));
        let waves = (0..4)
            .map(|_| {
                let (fx, fy) = loop {
                    let fx = rng.random_range(-2i32..=2) as f64;
                    let fy = rng.random_range(0i32..=2) as f64;
                    if fx != 0.0 || fy != 0.0 {
                        break (fx, fy);
                    }
                };
                let phase = rng.random_range(0.0..TAU);
                let w = [rng.random_range(0.02..0.07), rng.random_range(0.02..0.07), rng.random_range(0.02..0.07)];
                (fx, fy, phase, w)
            })
            .collect();
        // eyes, mouth: (cx, cy, sigma, darkness)
        let ex = rng.random_range(0.12..0.16);
        let ey = center.1 - rng.random_range(0.06..0.12);
        let features = vec![
            (center.0 - ex, ey, 0.05, rng.random_range(0.15..0.3)),
            (center.0 + ex, ey, 0.05, rng.random_range(0.15..0.3)),
            (center.0, center.1 + rng.random_range(0.14..0.2), 0.06, rng.random_range(0.1..0.25)),
        ];
        Self { background, center, radii, waves, features }
    }
}

/// Deterministic image for one `(identity, ethnicity, attack, seed)` tuple.
pub fn render_image(
    identity_id: u32,
    ethnicity: Ethnicity,
    attack: AttackType,
    config: &SynthConfig,
    seed: u64,
) -> Result<Image> {
    if identity_id >= config.num_ids {
        return Err(Error::Domain(format!("identity {identity_id} outside [0, {})", config.num_ids)));
    }
    let size = config.image_size;
    let tex = IdentityTexture::new(identity_id, ethnicity);
    let skin = skin_tone(ethnicity);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0x5A, seed]));
    let noise = Normal::new(0.0, 0.025).expect("valid std");
    let brightness = rng.random_range(-0.03..0.03);
    let s = SIGNATURE_GAIN * config.signal_strength;
    let sig = signature(attack.method());

    let mut img = Image::zeros(size);
    let inv = 1.0 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) * inv;
            let v = (y as f64 + 0.5) * inv;
            let dx = (u - tex.center.0) / tex.radii.0;
            let dy = (v - tex.center.1) / tex.radii.1;
            let face = 1.0 / (1.0 + (-(1.0 - dx * dx - dy * dy) * 8.0).exp());
            let shade: f64 = tex
                .features
                .iter()
                .map(|&(cx, cy, sd, dark)| {
                    let r2 = (u - cx).powi(2) + (v - cy).powi(2);
                    dark * (-r2 / (2.0 * sd * sd)).exp()
                })
                .sum();
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let base = face * skin[c] * (1.0 - shade) + (1.0 - face) * tex.background[c];
                let texture: f64 =
                    tex.waves.iter().map(|&(fx, fy, ph, w)| w[c] * (TAU * (fx * u + fy * v) + ph).sin()).sum();
                *p = base + texture + brightness;
            }
            apply_signature(&mut px, sig, u, v, s);
            for (c, p) in px.iter().enumerate() {
                img.set(c, y, x, (p + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

fn apply_signature(px: &mut [f64; 3], sig: Signature, u: f64, v: f64, s: f64) {
    match sig {
        Signature::None => {}
        Signature::Physical { tint, contrast, desaturate, band_dir, band_amp } => {
            let gray = (px[0] + px[1] + px[2]) / 3.0;
            let band = band_amp * (TAU * (band_dir.0 * u + band_dir.1 * v)).sin();
            for c in 0..3 {
                let mut p = px[c];
                p += s * desaturate * (gray - p);
                p = 0.5 + (p - 0.5) * (1.0 - s * contrast);
                px[c] = p + s * (tint[c] + band);
            }
        }
        Signature::Local { window: (x0, y0, x1, y1), freq, phase, amp, channels } => {
            if u < x0 || u > x1 || v < y0 || v > y1 {
                return;
            }
            let wave = (TAU * (freq.0 * u + freq.1 * v) + phase).cos();
            for c in 0..3 {
                px[c] += s * amp * channels[c] * wave;
            }
        }
    }
}

/// Canonical sample id for a rendered frame.
pub fn sample_id(identity_id: u32, method: AttackMethod, frame: u32) -> String {
    format!("id{identity_id:05}-{method}-f{frame}")
}

pub fn video_id(identity_id: u32, method: AttackMethod) -> String {
    format!("id{identity_id:05}-{method}")
}

/// Renders one standalone sample. The returned descriptor belongs to frame 0
/// of its video.
pub fn synthesize_sample(
    identity_id: u32,
    ethnicity: Ethnicity,
    attack: AttackType,
    config: &SynthConfig,
    seed: u64,
) -> Result<SampleRecord> {
    let image = render_image(identity_id, ethnicity, attack, config, seed)?;
    let descriptor = SampleDescriptor {
        sample_id: format!("{}-s{seed:016x}", video_id(identity_id, attack.method())),
        video_id: video_id(identity_id, attack.method()),
        frame: 0,
        identity_id,
        ethnicity,
        attack,
        label: Label::of(attack),
        seed,
    };
    Ok(SampleRecord { descriptor, image })
}

/// Regenerates the pixels of a manifest entry.
pub fn render(descriptor: &SampleDescriptor, config: &SynthConfig) -> Result<Image> {
    render_image(descriptor.identity_id, descriptor.ethnicity, descriptor.attack, config, descriptor.seed)
}
