//! Session-structured gesture corpus and its synthetic generator.
//!
//! Generation, for a [`GeneratorConfig`]:
//!
//! 1. All classes share one anatomy (oriented sinusoidal bands and Gaussian
//!    landmarks); each class adds marker blobs displaced from shared anchors in
//!    a class-specific direction, so the gesture is encoded in where the
//!    markers sit relative to the anatomy (see [`ClassPattern::draw`]).
//!    Patterns are continuous functions of the image plane, so shifts are
//!    sub-pixel exact.
//! 2. Session `s` draws from `Prng::from_seed(seed ^ s)`: translation `dx`, `dy`
//!    uniform in `[-shift, shift]`, then a gain uniform in the gain interval.
//!    Every round `r` of that session then draws jitter `jx`, `jy` uniform in
//!    `[-jitter, jitter]` from the same stream, followed by the speckle of its
//!    images (class-major, then index; two raw outputs per pixel, skipped
//!    entirely when `speckle_sigma == 0`).
//! 3. Pixel `(x, y)` samples the class pattern at `(x − dx − jx, y − dy − jy)`;
//!    points outside the frame read as 0. The value is scaled by the gain,
//!    clamped to `[0, 1]`, multiplied by `1 + σ·n` (n standard normal),
//!    clamped again and quantized to `round_half_up(p·255)/255`.
//!
//! Quantizing at generation time makes the on-disk PGM corpus load back
//! bitwise identical to the in-memory one.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 5;
const CLASS_STREAM_TAG: u64 = 0x5EED_C1A5_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureClass {
    Open,
    Index,
    Middle,
    Ring,
    Pinky,
}

impl GestureClass {
    pub const ALL: [GestureClass; CLASS_COUNT] = [
        GestureClass::Open,
        GestureClass::Index,
        GestureClass::Middle,
        GestureClass::Ring,
        GestureClass::Pinky,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        GestureClass::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class id {id} outside 0..{CLASS_COUNT}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureClass::Open => "open",
            GestureClass::Index => "index",
            GestureClass::Middle => "middle",
            GestureClass::Ring => "ring",
            GestureClass::Pinky => "pinky",
        }
    }
}

/// Position of an image inside a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageId {
    pub session: u32,
    pub round: u32,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: GestureClass,
    pub session_id: u32,
    pub round_id: u32,
    /// Position within the round (class-major order).
    pub index: u32,
}

impl LabeledImage {
    pub fn id(&self) -> ImageId {
        ImageId {
            session: self.session_id,
            round: self.round_id,
            index: self.index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub id: u32,
    pub images: Vec<LabeledImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: u32,
    pub rounds: Vec<Round>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionCorpus {
    resolution: (usize, usize),
    images_per_class: usize,
    sessions: Vec<Session>,
}

impl SessionCorpus {
    /// Checks contiguous ids, per-round class balance, resolution and pixel range.
    pub fn new(resolution: (usize, usize), sessions: Vec<Session>) -> Result<Self> {
        let bad = |m: String| Err(Error::Corpus(m));
        if sessions.is_empty() {
            return bad("corpus has no sessions".into());
        }
        let mut per_class = None;
        for (si, session) in sessions.iter().enumerate() {
            if session.id as usize != si + 1 {
                return bad(format!("session ids not contiguous at position {si}: {}", session.id));
            }
            if session.rounds.is_empty() {
                return bad(format!("session {} has no rounds", session.id));
            }
            for (ri, round) in session.rounds.iter().enumerate() {
                if round.id as usize != ri + 1 {
                    return bad(format!("session {}: round ids not contiguous", session.id));
                }
                let mut counts = [0usize; CLASS_COUNT];
                for (i, img) in round.images.iter().enumerate() {
                    if img.pixels.shape() != [1, resolution.0, resolution.1] {
                        return bad(format!(
                            "session {} round {}: image {i} has shape {:?}",
                            session.id,
                            round.id,
                            img.pixels.shape()
                        ));
                    }
                    if img.session_id != session.id || img.round_id != round.id || img.index as usize != i {
                        return bad(format!("session {} round {}: image {i} mislabeled position", session.id, round.id));
                    }
                    if img.pixels.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return bad(format!("session {} round {}: image {i} outside [0, 1]", session.id, round.id));
                    }
                    counts[img.label.id()] += 1;
                }
                if counts.iter().any(|&c| c != counts[0]) || counts[0] == 0 {
                    return bad(format!(
                        "session {} round {}: unbalanced class counts {counts:?}",
                        session.id, round.id
                    ));
                }
                match per_class {
                    None => per_class = Some(counts[0]),
                    Some(n) if n != counts[0] => {
                        return bad(format!(
                            "session {} round {}: {} images per class, corpus uses {n}",
                            session.id, round.id, counts[0]
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(SessionCorpus {
            resolution,
            images_per_class: per_class.expect("at least one round"),
            sessions,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn images_per_class(&self) -> usize {
        self.images_per_class
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn session(&self, id: u32) -> Option<&Session> {
        id.checked_sub(1).and_then(|i| self.sessions.get(i as usize))
    }

    pub fn round(&self, session: u32, round: u32) -> Option<&Round> {
        self.session(session)
            .and_then(|s| round.checked_sub(1).and_then(|r| s.rounds.get(r as usize)))
    }

    pub fn rounds_per_session(&self) -> usize {
        self.sessions[0].rounds.len()
    }

    pub fn total_images(&self) -> usize {
        self.images().count()
    }

    pub fn images(&self) -> impl Iterator<Item = &LabeledImage> {
        self.sessions
            .iter()
            .flat_map(|s| s.rounds.iter())
            .flat_map(|r| r.images.iter())
    }

    /// SHA-256 (hex) over `"SFCORPUS1"`, height and width as u32 LE, then for
    /// every image in order: session u32 LE, round u32 LE, label u8 and the
    /// quantized pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"SFCORPUS1");
        h.update((self.resolution.0 as u32).to_le_bytes());
        h.update((self.resolution.1 as u32).to_le_bytes());
        for img in self.images() {
            h.update(img.session_id.to_le_bytes());
            h.update(img.round_id.to_le_bytes());
            h.update([img.label.id() as u8]);
            let bytes: Vec<u8> = img.pixels.data().iter().map(|&p| quantize(p)).collect();
            h.update(&bytes);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `round_half_up(p · 255)` clamped to a byte.
pub fn quantize(p: f32) -> u8 {
    (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn default_seed() -> u64 {
    7
}
fn default_resolution() -> [usize; 2] {
    [64, 64]
}
fn default_sessions() -> usize {
    7
}
fn default_rounds() -> usize {
    5
}
fn default_per_class() -> usize {
    200
}
fn default_shift() -> f64 {
    6.0
}
fn default_gain() -> [f64; 2] {
    [0.85, 1.15]
}
fn default_jitter() -> f64 {
    1.0
}
fn default_speckle() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// `[height, width]`
    #[serde(default = "default_resolution")]
    pub resolution: [usize; 2],
    #[serde(default = "default_sessions")]
    pub sessions_count: usize,
    #[serde(default = "default_rounds")]
    pub rounds_per_session: usize,
    #[serde(default = "default_per_class")]
    pub images_per_class_per_round: usize,
    #[serde(default = "default_shift")]
    pub session_shift_px: f64,
    #[serde(default = "default_gain")]
    pub session_gain_range: [f64; 2],
    #[serde(default = "default_jitter")]
    pub round_jitter_px: f64,
    #[serde(default = "default_speckle")]
    pub speckle_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: default_seed(),
            resolution: default_resolution(),
            sessions_count: default_sessions(),
            rounds_per_session: default_rounds(),
            images_per_class_per_round: default_per_class(),
            session_shift_px: default_shift(),
            session_gain_range: default_gain(),
            round_jitter_px: default_jitter(),
            speckle_sigma: default_speckle(),
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale profile: 64×64, 40 images per class per round.
    pub fn fast_profile() -> Self {
        GeneratorConfig {
            images_per_class_per_round: 40,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.resolution;
        if h == 0 || w == 0 {
            return bad(format!("resolution {h}×{w} has a zero extent"));
        }
        if self.sessions_count == 0 || self.rounds_per_session == 0 || self.images_per_class_per_round == 0 {
            return bad("sessions_count, rounds_per_session and images_per_class_per_round must be ≥ 1".into());
        }
        if !(self.session_shift_px >= 0.0 && self.session_shift_px < h.min(w) as f64 / 4.0) {
            return bad(format!(
                "session_shift_px {} must lie in [0, {})",
                self.session_shift_px,
                h.min(w) as f64 / 4.0
            ));
        }
        if !(self.round_jitter_px >= 0.0 && self.round_jitter_px.is_finite()) {
            return bad(format!("round_jitter_px {} must be ≥ 0", self.round_jitter_px));
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return bad(format!("speckle_sigma {} must be ≥ 0", self.speckle_sigma));
        }
        let [lo, hi] = self.session_gain_range;
        if !(lo > 0.0 && lo <= hi && hi <= 2.0) {
            return bad(format!("session_gain_range [{lo}, {hi}] must be an interval inside (0, 2]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Band {
    theta: f64,
    freq: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

impl Blob {
    fn at(&self, u: f64, v: f64) -> f64 {
        let d2 = (u - self.cx).powi(2) + (v - self.cy).powi(2);
        self.amp * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Continuous intensity pattern over normalized coordinates `[0, 1)²`: an
/// anatomy shared by every class plus class-specific marker blobs whose
/// positions encode the gesture.
#[derive(Debug, Clone)]
pub struct ClassPattern {
    bands: Vec<Band>,
    landmarks: Vec<Blob>,
    markers: Vec<Blob>,
}

impl ClassPattern {
    /// The shared anatomy comes from `Prng::from_seed(seed ^ CLASS_STREAM_TAG)`:
    /// two bands (orientation in `[0, π)`, frequency in `[1.5, 4)` cycles per
    /// frame, phase in `[0, 2π)`, amplitude in `[0.1, 0.2)`), then three
    /// landmarks (centre x, y in `[0.2, 0.8)`, sigma in `[0.06, 0.12)`,
    /// amplitude in `[0.3, 0.5)`), then [`MARKERS`] marker anchors (x, y in
    /// `[0.3, 0.7)`) and a rotation in `[0, 2π)`. Class `c` places marker `k`
    /// at its anchor offset by [`MARKER_RADIUS`] in direction
    /// `rotation + 2π(c + k·2)/5`, with [`MARKER_SIGMA`] and [`MARKER_AMPLITUDE`].
    /// Everything sits on a constant level of 0.1.
    pub fn draw(seed: u64, class: GestureClass) -> Self {
        use std::f64::consts::{PI, TAU};
        let mut rng = Prng::from_seed(seed ^ CLASS_STREAM_TAG);
        let bands = (0..2)
            .map(|_| Band {
                theta: rng.uniform_f64(0.0, PI),
                freq: rng.uniform_f64(1.5, 4.0),
                phase: rng.uniform_f64(0.0, TAU),
                amp: rng.uniform_f64(0.1, 0.2),
            })
            .collect();
        let landmarks = (0..3)
            .map(|_| Blob {
                cx: rng.uniform_f64(0.2, 0.8),
                cy: rng.uniform_f64(0.2, 0.8),
                sigma: rng.uniform_f64(0.06, 0.12),
                amp: rng.uniform_f64(0.3, 0.5),
            })
            .collect();
        let anchors: Vec<(f64, f64)> = (0..MARKERS)
            .map(|_| (rng.uniform_f64(0.3, 0.7), rng.uniform_f64(0.3, 0.7)))
            .collect();
        let rotation = rng.uniform_f64(0.0, TAU);
        let markers = anchors
            .iter()
            .enumerate()
            .map(|(k, &(ax, ay))| {
                let angle = rotation + TAU * ((class.id() + 2 * k) % CLASS_COUNT) as f64 / CLASS_COUNT as f64;
                Blob {
                    cx: ax + MARKER_RADIUS * angle.cos(),
                    cy: ay + MARKER_RADIUS * angle.sin(),
                    sigma: MARKER_SIGMA,
                    amp: MARKER_AMPLITUDE,
                }
            })
            .collect();
        ClassPattern {
            bands,
            landmarks,
            markers,
        }
    }

    /// Intensity at normalized `(u, v)`, clamped to `[0, 1]`.
    pub fn at(&self, u: f64, v: f64) -> f64 {
        let mut p = 0.1;
        for b in &self.bands {
            let t = u * b.theta.cos() + v * b.theta.sin();
            p += b.amp * 0.5 * (1.0 + (std::f64::consts::TAU * b.freq * t + b.phase).cos());
        }
        for b in self.landmarks.iter().chain(&self.markers) {
            p += b.at(u, v);
        }
        p.clamp(0.0, 1.0)
    }

    /// Renders the pattern translated by `(dx, dy)` pixels with zero fill.
    fn render(&self, h: usize, w: usize, dx: f64, dy: f64, gain: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 - dx;
                let sy = y as f64 - dy;
                let v = if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                    0.0
                } else {
                    self.at((sx + 0.5) / w as f64, (sy + 0.5) / h as f64)
                };
                out.push((v * gain).clamp(0.0, 1.0));
            }
        }
        out
    }
}

/// Marker blobs per class.
pub const MARKERS: usize = 2;
/// Marker displacement from its anchor, as a fraction of the frame; about the
/// default session shift at 64×64.
pub const MARKER_RADIUS: f64 = 0.08;
/// Marker blob sigma, as a fraction of the frame.
pub const MARKER_SIGMA: f64 = 0.05;
/// Marker peak intensity, faint next to the landmarks.
pub const MARKER_AMPLITUDE: f64 = 0.15;

pub fn generate_corpus(config: &GeneratorConfig) -> Result<SessionCorpus> {
    config.validate()?;
    let [h, w] = config.resolution;
    let patterns: Vec<ClassPattern> = GestureClass::ALL
        .iter()
        .map(|&c| ClassPattern::draw(config.seed, c))
        .collect();
    let sigma = config.speckle_sigma;
    let mut sessions = Vec::with_capacity(config.sessions_count);
    for s in 1..=config.sessions_count as u32 {
        let mut rng = Prng::child(config.seed, s as u64);
        let shift = config.session_shift_px;
        let dx = rng.uniform_f64(-shift, shift);
        let dy = rng.uniform_f64(-shift, shift);
        let [glo, ghi] = config.session_gain_range;
        let gain = rng.uniform_f64(glo, ghi);
        let mut rounds = Vec::with_capacity(config.rounds_per_session);
        for r in 1..=config.rounds_per_session as u32 {
            let j = config.round_jitter_px;
            let jx = rng.uniform_f64(-j, j);
            let jy = rng.uniform_f64(-j, j);
            let mut images = Vec::with_capacity(CLASS_COUNT * config.images_per_class_per_round);
            for &class in &GestureClass::ALL {
                let clean = patterns[class.id()].render(h, w, dx + jx, dy + jy, gain);
                for _ in 0..config.images_per_class_per_round {
                    let pixels: Vec<f32> = clean
                        .iter()
                        .map(|&p| {
                            let noisy = if sigma > 0.0 {
                                (p * (1.0 + sigma * rng.standard_normal())).clamp(0.0, 1.0)
                            } else {
                                p
                            };
                            dequantize(quantize(noisy as f32))
                        })
                        .collect();
                    images.push(LabeledImage {
                        pixels: Tensor::new(vec![1, h, w], pixels)?,
                        label: class,
                        session_id: s,
                        round_id: r,
                        index: images.len() as u32,
                    });
                }
            }
            rounds.push(Round { id: r, images });
        }
        sessions.push(Session { id: s, rounds });
    }
    SessionCorpus::new((h, w), sessions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(per_class: usize) -> GeneratorConfig {
        GeneratorConfig {
            resolution: [16, 16],
            sessions_count: 2,
            rounds_per_session: 3,
            images_per_class_per_round: per_class,
            session_shift_px: 3.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn class_ids_and_names_are_fixed() {
        let names: Vec<&str> = GestureClass::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(names, ["open", "index", "middle", "ring", "pinky"]);
        for (i, c) in GestureClass::ALL.iter().enumerate() {
            assert_eq!(c.id(), i);
            assert_eq!(GestureClass::from_id(i).unwrap(), *c);
        }
        assert!(GestureClass::from_id(5).is_err());
    }

    #[test]
    fn default_counts_add_up() {
        // Count arithmetic only; a small frame keeps this cheap.
        let cfg = GeneratorConfig {
            resolution: [8, 8],
            session_shift_px: 1.0,
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.total_images(), 35_000);
        for s in corpus.sessions() {
            let n: usize = s.rounds.iter().map(|r| r.images.len()).sum();
            assert_eq!(n, 5_000);
        }
    }

    #[test]
    fn every_round_is_class_balanced() {
        let corpus = generate_corpus(&tiny(3)).unwrap();
        for s in corpus.sessions() {
            for r in &s.rounds {
                let mut counts = [0; CLASS_COUNT];
                for img in &r.images {
                    counts[img.label.id()] += 1;
                }
                assert_eq!(counts, [3; CLASS_COUNT]);
            }
        }
    }

    #[test]
    fn noise_free_images_are_identical_across_sessions() {
        let cfg = GeneratorConfig {
            session_shift_px: 0.0,
            session_gain_range: [1.0, 1.0],
            round_jitter_px: 0.0,
            speckle_sigma: 0.0,
            ..tiny(2)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for class in GestureClass::ALL {
            let mut imgs = corpus.images().filter(|i| i.label == class);
            let first = imgs.next().unwrap();
            assert!(imgs.all(|i| i.pixels == first.pixels));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&tiny(2)).unwrap();
        let b = generate_corpus(&tiny(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = generate_corpus(&GeneratorConfig { seed: 8, ..tiny(2) }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn sessions_differ_when_shift_enabled() {
        let corpus = generate_corpus(&GeneratorConfig {
            speckle_sigma: 0.0,
            ..tiny(1)
        })
        .unwrap();
        let a = &corpus.round(1, 1).unwrap().images[0];
        let b = &corpus.round(2, 1).unwrap().images[0];
        assert_eq!(a.label, b.label);
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn pixels_are_quantized() {
        let corpus = generate_corpus(&tiny(1)).unwrap();
        for img in corpus.images() {
            for &p in img.pixels.data() {
                assert_eq!(dequantize(quantize(p)), p);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let cases = [
            GeneratorConfig { session_shift_px: 4.0, ..tiny(1) },
            GeneratorConfig { speckle_sigma: -0.1, ..tiny(1) },
            GeneratorConfig { session_gain_range: [0.0, 1.0], ..tiny(1) },
            GeneratorConfig { session_gain_range: [1.2, 1.1], ..tiny(1) },
            GeneratorConfig { session_gain_range: [1.0, 2.5], ..tiny(1) },
            GeneratorConfig { rounds_per_session: 0, ..tiny(1) },
        ];
        for cfg in cases {
            assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn corpus_rejects_unbalanced_rounds() {
        let mut corpus = generate_corpus(&tiny(2)).unwrap();
        let mut sessions = corpus.sessions.clone();
        sessions[0].rounds[0].images.pop();
        assert!(SessionCorpus::new(corpus.resolution(), sessions).is_err());
        corpus.sessions[1].id = 5;
        assert!(SessionCorpus::new(corpus.resolution(), corpus.sessions).is_err());
    }
}
