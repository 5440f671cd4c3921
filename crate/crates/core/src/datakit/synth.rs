//! Seeded synthetic forehead-crease identities.
//!
//! Each subject owns a set of oriented dark bands (mostly horizontal, some
//! vertical and diagonal) over a skin tone. Every sample re-renders that
//! pattern through a smooth elastic warp, a brightness scale and additive
//! Gaussian noise. Subjects draw from their own seed stream, so output does
//! not depend on generation order.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::seeded_rng;
use crate::par;

use super::manifest::{DatasetManifest, SessionRecord, SubjectRecord, INDEX_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub sessions: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    /// Peak elastic displacement in pixels.
    pub warp_amplitude: f64,
    /// Brightness is scaled by a factor in `1 +/- brightness_range`.
    pub brightness_range: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_subjects: 20,
            samples_per_subject: 10,
            sessions: 2,
            image_height: 96,
            image_width: 128,
            seed: 7,
            warp_amplitude: 4.0,
            brightness_range: 0.15,
            noise_sigma: 0.03,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 || self.samples_per_subject == 0 || self.sessions == 0 {
            return Err(Error::InvalidConfig("synthetic counts must be >= 1".into()));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return Err(Error::InvalidConfig("synthetic images must be at least 8x8".into()));
        }
        if self.warp_amplitude < 0.0 || self.brightness_range < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("jitter amplitudes must be >= 0".into()));
        }
        if self.brightness_range >= 1.0 {
            return Err(Error::InvalidConfig("brightness_range must be < 1".into()));
        }
        Ok(())
    }

    pub fn subject_id(i: usize) -> String {
        format!("s{i:04}")
    }

    pub fn session_of(&self, sample: usize) -> usize {
        sample * self.sessions / self.samples_per_subject
    }
}

#[derive(Debug, Clone)]
struct Crease {
    cx: f64,
    cy: f64,
    dir: (f64, f64),
    half_length: f64,
    curvature: f64,
    width: f64,
    depth: f64,
}

#[derive(Debug, Clone)]
struct Identity {
    skin: [f64; 3],
    creases: Vec<Crease>,
}

impl Identity {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        // Tone differs only slightly between identities; the creases carry identity.
        let tint = rng.random_range(-0.02..0.02);
        let skin = [0.80 + tint, 0.63 + tint, 0.53 + tint];
        let count = rng.random_range(5..=9);
        let creases = (0..count)
            .map(|_| {
                let kind: f64 = rng.random();
                let angle = if kind < 0.6 {
                    rng.random_range(-0.25..0.25)
                } else if kind < 0.8 {
                    FRAC_PI_2 + rng.random_range(-0.3..0.3)
                } else {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * FRAC_PI_4 + rng.random_range(-0.2..0.2)
                };
                Crease {
                    cx: rng.random_range(0.1..0.9),
                    cy: rng.random_range(0.1..0.9),
                    dir: (angle.cos(), angle.sin()),
                    half_length: rng.random_range(0.15..0.45),
                    curvature: rng.random_range(-1.5..1.5),
                    width: rng.random_range(0.012..0.035),
                    depth: rng.random_range(0.25..0.55),
                }
            })
            .collect();
        Identity { skin, creases }
    }

    /// Darkening in `[0, 1)` at normalized coordinates.
    fn shade(&self, u: f64, v: f64) -> f64 {
        let mut keep = 1.0;
        for c in &self.creases {
            let (dx, dy) = (u - c.cx, v - c.cy);
            let along = dx * c.dir.0 + dy * c.dir.1;
            let across = -dx * c.dir.1 + dy * c.dir.0 - c.curvature * along * along;
            let overshoot = (along.abs() - c.half_length).max(0.0);
            let profile = (-(across * across) / (2.0 * c.width * c.width)).exp()
                * (-(overshoot * overshoot) / (2.0 * 0.03 * 0.03)).exp();
            keep *= 1.0 - c.depth * profile;
        }
        1.0 - keep
    }
}

struct Jitter {
    warp: [(f64, f64, f64); 4],
    /// Rigid part of the displacement (ROI crop misalignment), in units of the amplitude.
    shift: (f64, f64),
    brightness: f64,
}

impl Jitter {
    fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut warp = [(0.0, 0.0, 0.0); 4];
        for w in &mut warp {
            *w = (
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(-1.0..1.0),
            );
        }
        let shift = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let b = spec.brightness_range;
        let brightness = if b > 0.0 { rng.random_range(1.0 - b..=1.0 + b) } else { 1.0 };
        Jitter { warp, shift, brightness }
    }

    /// Smooth displacement in pixels at normalized coordinates.
    fn displacement(&self, u: f64, v: f64, amplitude: f64) -> (f64, f64) {
        if amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let term = |(f, phase, a): (f64, f64, f64), s: f64| a * (2.0 * PI * f * s + phase).sin();
        let dx = self.shift.0 + term(self.warp[0], v) + 0.5 * term(self.warp[1], u);
        let dy = self.shift.1 + term(self.warp[2], u) + 0.5 * term(self.warp[3], v);
        (amplitude * dx / 2.5, amplitude * dy / 2.5)
    }
}

/// Render one sample as 8-bit RGB.
fn render(identity: &Identity, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.image_height, spec.image_width);
    let jitter = Jitter::draw(spec, rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let (ddx, ddy) = jitter.displacement(u, v, spec.warp_amplitude);
            let shade = identity.shade(u + ddx / w as f64, v + ddy / h as f64);
            for c in 0..3 {
                let mut value = identity.skin[c] * (1.0 - shade) * jitter.brightness;
                if spec.noise_sigma > 0.0 {
                    value += noise.sample(rng);
                }
                out.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Render every sample of one subject, in sample order.
pub fn render_subject(spec: &SynthSpec, subject: usize) -> Vec<Vec<u8>> {
    let mut rng = seeded_rng(spec.seed, &SynthSpec::subject_id(subject));
    let identity = Identity::draw(&mut rng);
    (0..spec.samples_per_subject)
        .map(|_| render(&identity, spec, &mut rng))
        .collect()
}

/// Write the synthetic tree under `out` and return its manifest (also
/// cached as `manifest.json` at the root).
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let subjects: Vec<Result<SubjectRecord>> = par::map_range(spec.num_subjects, |s| {
        let id = SynthSpec::subject_id(s);
        let mut sessions: Vec<SessionRecord> = (0..spec.sessions)
            .map(|t| SessionRecord {
                session_id: format!("session{}", t + 1),
                images: Vec::new(),
            })
            .collect();
        for (i, pixels) in render_subject(spec, s).into_iter().enumerate() {
            let t = spec.session_of(i);
            let rel = Path::new(&id).join(&sessions[t].session_id).join(format!("img{i:03}.png"));
            let path = out.join(&rel);
            let dir = path.parent().expect("image has a parent");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            image::save_buffer(&path, &pixels, spec.image_width as u32, spec.image_height as u32, image::ColorType::Rgb8)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            sessions[t].images.push(rel);
        }
        sessions.retain(|s| !s.images.is_empty());
        Ok(SubjectRecord { subject_id: id, sessions })
    });
    let subjects = subjects.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(out, subjects);
    manifest.save_index(&out.join(INDEX_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_subjects: 3,
            samples_per_subject: 4,
            image_height: 24,
            image_width: 32,
            ..Default::default()
        }
    }

    #[test]
    fn zero_jitter_repeats_samples() {
        let spec = SynthSpec {
            warp_amplitude: 0.0,
            brightness_range: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let imgs = render_subject(&spec, 1);
        assert!(imgs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn subjects_differ_and_are_seed_stable() {
        let spec = small();
        assert_ne!(render_subject(&spec, 0), render_subject(&spec, 1));
        assert_eq!(render_subject(&spec, 2), render_subject(&spec, 2));
    }

    #[test]
    fn sessions_split_evenly() {
        let spec = SynthSpec { samples_per_subject: 10, sessions: 2, ..small() };
        let per: Vec<usize> = (0..10).map(|i| spec.session_of(i)).collect();
        assert_eq!(per, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn writes_tree_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small(), dir.path()).unwrap();
        assert_eq!(m.num_records(), 12);
        let rescanned = super::super::manifest::load_manifest(dir.path()).unwrap();
        assert_eq!(rescanned, m);
    }
}
