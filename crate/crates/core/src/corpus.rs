//! Procedural paired text/motion corpus for the toy skeleton.
//!
//! Each sample draws one of eight motion families, samples its parameters, renders the
//! root trajectory and limb poses, and describes the result with a small grammar whose
//! words are tied to those parameters.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmgError, Result};
use crate::motion::{
    decode_motion_file, encode_motion_file, MotionSequence, Skeleton, DEFAULT_FPS,
};
use crate::text::{TextPrompt, Vocabulary};

const WORDS: &[&str] = &[
    "a", "person", "someone", "walks", "forward", "backward", "slowly", "quickly", "in",
    "circle", "to", "the", "left", "right", "turns", "around", "kicks", "twice", "with", "foot",
    "waves", "hand", "sits", "down", "jumps", "place", "and",
];

pub fn corpus_vocabulary() -> Vocabulary {
    Vocabulary::new(WORDS.iter().map(|w| w.to_string()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pace {
    Slow,
    Normal,
    Quick,
}

impl Pace {
    fn speed(self) -> f64 {
        match self {
            Pace::Slow => 0.7,
            Pace::Normal => 1.1,
            Pace::Quick => 1.6,
        }
    }

    fn adverb(self) -> Option<&'static str> {
        match self {
            Pace::Slow => Some("slowly"),
            Pace::Normal => None,
            Pace::Quick => Some("quickly"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Template {
    WalkStraight { backward: bool, pace: Pace },
    WalkCircle { side: Side, pace: Pace },
    Turn { side: Side, around: bool },
    Kick { side: Side, twice: bool },
    Wave { side: Side, pace: Pace },
    Sit { pace: Pace },
    Jump { forward: bool },
    WalkThenTurn { side: Side },
}

impl Template {
    pub const FAMILIES: usize = 8;

    pub fn family(&self) -> &'static str {
        match self {
            Template::WalkStraight { .. } => "walk_straight",
            Template::WalkCircle { .. } => "walk_circle",
            Template::Turn { .. } => "turn",
            Template::Kick { .. } => "kick",
            Template::Wave { .. } => "wave",
            Template::Sit { .. } => "sit",
            Template::Jump { .. } => "jump",
            Template::WalkThenTurn { .. } => "walk_then_turn",
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        let pace = match rng.random_range(0..3) {
            0 => Pace::Slow,
            1 => Pace::Normal,
            _ => Pace::Quick,
        };
        match rng.random_range(0..Self::FAMILIES) {
            0 => Template::WalkStraight {
                backward: rng.random_bool(0.25),
                pace,
            },
            1 => Template::WalkCircle { side, pace },
            2 => Template::Turn {
                side,
                around: rng.random_bool(0.5),
            },
            3 => Template::Kick {
                side,
                twice: rng.random_bool(0.5),
            },
            4 => Template::Wave { side, pace },
            5 => Template::Sit { pace },
            6 => Template::Jump {
                forward: rng.random_bool(0.5),
            },
            _ => Template::WalkThenTurn { side },
        }
    }

    fn describe(&self, subject: &str) -> String {
        let mut words: Vec<&str> = subject.split(' ').collect();
        match *self {
            Template::WalkStraight { backward, pace } => {
                words.push("walks");
                words.push(if backward { "backward" } else { "forward" });
                words.extend(pace.adverb());
            }
            Template::WalkCircle { side, pace } => {
                words.extend(["walks", "in", "a", "circle", "to", "the", side.word()]);
                words.extend(pace.adverb());
            }
            Template::Turn { side, around } => {
                words.push("turns");
                if around {
                    words.push("around");
                }
                words.extend(["to", "the", side.word()]);
            }
            Template::Kick { side, twice } => {
                words.push("kicks");
                if twice {
                    words.push("twice");
                }
                words.extend(["with", "the", side.word(), "foot"]);
            }
            Template::Wave { side, pace } => {
                words.extend(["waves", "the", side.word(), "hand"]);
                words.extend(pace.adverb());
            }
            Template::Sit { pace } => {
                words.extend(["sits", "down"]);
                words.extend(pace.adverb());
            }
            Template::Jump { forward } => {
                words.push("jumps");
                if forward {
                    words.push("forward");
                } else {
                    words.extend(["in", "place"]);
                }
            }
            Template::WalkThenTurn { side } => {
                words.extend(["walks", "forward", "and", "turns", "to", "the", side.word()]);
            }
        }
        words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub fps: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_len: 40,
            max_len: 64,
            fps: DEFAULT_FPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    pub text: TextPrompt,
    pub template: Template,
    pub motion: MotionSequence,
}

pub fn make_corpus(seed: u64, n_samples: usize) -> Vec<CorpusSample> {
    make_corpus_with(seed, n_samples, &CorpusConfig::default())
}

/// Sample `i` depends only on `(seed, i)`, so corpora of different sizes share prefixes.
pub fn make_corpus_with(seed: u64, n_samples: usize, cfg: &CorpusConfig) -> Vec<CorpusSample> {
    let vocab = corpus_vocabulary();
    (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let template = Template::sample(&mut rng);
            let subject = if rng.random_bool(0.5) { "a person" } else { "someone" };
            let raw = template.describe(subject);
            let text = vocab
                .tokenize(&raw)
                .expect("grammar only emits vocabulary words");
            let motion = render(&template, cfg, &mut rng);
            CorpusSample {
                id: format!("{i:06}"),
                text,
                template,
                motion,
            }
        })
        .collect()
}

/// Rotation about the lateral axis; positive angles swing a limb toward +z (forward).
fn swing(v: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [v[0], v[1] * c + v[2] * s, -v[1] * s + v[2] * c]
}

/// Rotation about the forward axis; positive angles lift a limb away from the body.
fn lift(v: [f64; 3], angle: f64) -> [f64; 3] {
    let a = angle * v[0].signum();
    let (s, c) = a.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn bump(u: f64, center: f64, width: f64) -> f64 {
    (-((u - center) / width).powi(2)).exp()
}

struct Pose {
    yaw: f64,
    root: [f64; 3],
    /// head, left hand, right hand, left foot, right foot
    limbs: [[f64; 3]; 5],
}

fn render(template: &Template, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> MotionSequence {
    let skeleton = Skeleton::toy();
    let rest = skeleton.rest_positions();
    let rest: [[f64; 3]; 5] = [rest[1], rest[2], rest[3], rest[4], rest[5]];
    let n = rng.random_range(cfg.min_len..=cfg.max_len);
    let dt = 1.0 / cfg.fps as f64;
    let yaw0 = rng.random_range(-PI..PI);
    let start = [rng.random_range(-1.0..1.0), 0.9, rng.random_range(-1.0..1.0)];
    let jitter = rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let radius = rng.random_range(1.0..2.0);
    let height = rng.random_range(0.25..0.4);

    let mut poses: Vec<Pose> = Vec::with_capacity(n);
    let mut yaw = yaw0;
    let mut pos = start;
    for i in 0..n {
        let s = i as f64 * dt;
        let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let u_next = if n > 1 { (i + 1) as f64 / (n - 1) as f64 } else { 0.0 };
        let mut limbs = rest;
        // planar speed along the heading (negative = backward) and yaw rate, applied after this frame
        let mut speed = 0.0;
        let mut yaw_rate = 0.0;
        let gait = |speed: f64, limbs: &mut [[f64; 3]; 5]| {
            let freq = 0.9 + 0.5 * speed.abs();
            let amp = 0.25 + 0.15 * speed.abs();
            let th = amp * (2.0 * PI * freq * s + phase).sin();
            limbs[3] = swing(rest[3], th);
            limbs[4] = swing(rest[4], -th);
            limbs[1] = swing(rest[1], -0.6 * th);
            limbs[2] = swing(rest[2], 0.6 * th);
            0.9 - 0.03 * (2.0 * PI * freq * s + phase).cos().abs()
        };
        match *template {
            Template::WalkStraight { backward, pace } => {
                speed = pace.speed() * jitter * if backward { -0.6 } else { 1.0 };
                pos[1] = gait(speed, &mut limbs);
            }
            Template::WalkCircle { side, pace } => {
                speed = pace.speed() * jitter;
                yaw_rate = side.sign() * speed / radius;
                pos[1] = gait(speed, &mut limbs);
            }
            Template::Turn { side, around } => {
                let total = if around { PI } else { FRAC_PI_2 };
                yaw = yaw0 + side.sign() * total * smoothstep((u - 0.15) / 0.7);
                let th = 0.12 * bump(u, 0.5, 0.3) * (2.0 * PI * 1.5 * s).sin();
                limbs[3] = swing(rest[3], th);
                limbs[4] = swing(rest[4], -th);
                pos[1] = 0.9;
            }
            Template::Kick { side, twice } => {
                let centers: &[f64] = if twice { &[0.3, 0.7] } else { &[0.5] };
                let k: f64 = centers.iter().map(|&c| bump(u, c, 0.08)).sum();
                let (foot, hand) = match side {
                    Side::Left => (3, 2),
                    Side::Right => (4, 1),
                };
                limbs[foot] = swing(rest[foot], 1.2 * jitter * k);
                limbs[hand] = swing(rest[hand], 0.5 * k);
                pos[1] = 0.9 - 0.04 * k;
            }
            Template::Wave { side, pace } => {
                let hand = if side == Side::Left { 1 } else { 2 };
                let freq = match pace {
                    Pace::Slow => 1.0,
                    Pace::Normal => 1.7,
                    Pace::Quick => 2.5,
                };
                let raise = 2.0 * smoothstep(u / 0.2);
                let osc = 0.35 * smoothstep((u - 0.1) / 0.15) * (2.0 * PI * freq * s).sin();
                limbs[hand] = lift(rest[hand], raise + osc);
                pos[1] = 0.9;
            }
            Template::Sit { pace } => {
                let span = match pace {
                    Pace::Slow => 0.7,
                    Pace::Normal => 0.45,
                    Pace::Quick => 0.25,
                };
                let d = smoothstep((u - 0.15) / span);
                pos[1] = 0.9 - 0.4 * d;
                limbs[3] = swing(rest[3], 1.2 * d);
                limbs[4] = swing(rest[4], 1.2 * d);
                limbs[1] = swing(rest[1], 0.5 * d);
                limbs[2] = swing(rest[2], 0.5 * d);
                speed = -0.15 * (smoothstep((u_next - 0.15) / span) - d) / dt;
            }
            Template::Jump { forward } => {
                let crouch = bump(u, 0.27, 0.06);
                let v = (u - 0.35) / 0.3;
                let air = if (0.0..=1.0).contains(&v) { 4.0 * v * (1.0 - v) } else { 0.0 };
                pos[1] = 0.9 - 0.12 * crouch + height * air;
                limbs[3] = swing(rest[3], -0.4 * air + 0.3 * crouch);
                limbs[4] = swing(rest[4], -0.4 * air + 0.3 * crouch);
                limbs[1] = lift(rest[1], 1.0 * air);
                limbs[2] = lift(rest[2], 1.0 * air);
                if forward && (0.0..1.0).contains(&v) {
                    speed = 0.8 / (0.3 * (n - 1) as f64 * dt);
                }
            }
            Template::WalkThenTurn { side } => {
                let walking = 1.0 - smoothstep((u - 0.45) / 0.15);
                speed = 1.1 * jitter * walking;
                let turn = smoothstep((u - 0.55) / 0.35);
                let next = smoothstep((u_next - 0.55) / 0.35);
                yaw_rate = side.sign() * FRAC_PI_2 * (next - turn) / dt;
                let h = gait(speed.max(0.2), &mut limbs);
                pos[1] = 0.9 + (h - 0.9) * walking;
                for (l, r) in limbs.iter_mut().zip(rest.iter()) {
                    for c in 0..3 {
                        l[c] = r[c] + (l[c] - r[c]) * walking.max(0.15);
                    }
                }
                // keep the blended limbs on their rest radius
                for (l, r) in limbs.iter_mut().zip(rest.iter()) {
                    let scale = crate::motion::norm3(*r) / crate::motion::norm3(*l);
                    for c in l.iter_mut() {
                        *c *= scale;
                    }
                }
            }
        }
        poses.push(Pose {
            yaw,
            root: pos,
            limbs,
        });
        // advance the root to the next frame
        let (dx, dz) = crate::motion::rotate_planar(yaw, 0.0, speed * dt);
        pos[0] += dx;
        pos[2] += dz;
        yaw += yaw_rate * dt;
    }

    let root_yaw: Vec<f64> = poses.iter().map(|p| p.yaw).collect();
    let root_pos: Vec<[f64; 3]> = poses.iter().map(|p| p.root).collect();
    let local: Vec<Vec<[f64; 3]>> = poses.iter().map(|p| p.limbs.to_vec()).collect();
    MotionSequence::from_positions(&root_yaw, &root_pos, &local, cfg.fps, skeleton)
        .expect("rendered corpus motions are valid")
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: Option<u64>,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    text: String,
    file: String,
}

/// Writes one motion file per sample plus `manifest.json` mapping ids to text.
pub fn write_corpus(dir: &Path, samples: &[CorpusSample], seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("{}.json", s.id);
        fs::write(dir.join(&file), encode_motion_file(&s.motion)?)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            text: s.text.raw.clone(),
            file,
        });
    }
    let manifest = Manifest {
        seed,
        samples: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loaded samples carry a placeholder template: only text and motion are persisted.
pub fn read_corpus(dir: &Path, vocab: &Vocabulary) -> Result<Vec<(String, TextPrompt, MotionSequence)>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| PmgError::schema("manifest.json", e.to_string()))?;
    manifest
        .samples
        .into_iter()
        .map(|e| {
            let motion = decode_motion_file(&fs::read(dir.join(&e.file))?)?;
            let text = vocab.tokenize(&e.text)?;
            Ok((e.id, text, motion))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::ROOT_TOLERANCE;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = make_corpus(7, 10);
        let b = make_corpus(7, 10);
        assert_eq!(a, b);
        let bytes_a: Vec<Vec<u8>> = a.iter().map(|s| encode_motion_file(&s.motion).unwrap()).collect();
        let bytes_b: Vec<Vec<u8>> = b.iter().map(|s| encode_motion_file(&s.motion).unwrap()).collect();
        assert_eq!(bytes_a, bytes_b);
        assert_ne!(make_corpus(8, 10), a);
    }

    #[test]
    fn covers_every_family() {
        let corpus = make_corpus(1, 200);
        let mut families: Vec<&str> = corpus.iter().map(|s| s.template.family()).collect();
        families.sort();
        families.dedup();
        assert_eq!(families.len(), Template::FAMILIES);
    }

    #[test]
    fn samples_satisfy_motion_invariants() {
        let reach = Skeleton::toy().reach();
        for s in make_corpus(3, 120) {
            s.motion.validate(crate::motion::DEFAULT_MAX_LEN).unwrap();
            assert!(s.motion.root_integration_error() < ROOT_TOLERANCE, "{}", s.text.raw);
            let layout = s.motion.layout();
            for row in s.motion.features.rows() {
                for joint in crate::motion::local_joints(row, &layout) {
                    assert!(crate::motion::norm3(joint) <= reach + 1e-9);
                }
            }
        }
    }

    #[test]
    fn circle_direction_sets_yaw_sign() {
        for s in make_corpus(11, 300) {
            if let Template::WalkCircle { side, .. } = s.template {
                let n = s.motion.len();
                let turn = s.motion.root_yaw(n - 1) - s.motion.root_yaw(0);
                match side {
                    Side::Left => assert!(turn > 0.0),
                    Side::Right => assert!(turn < 0.0),
                }
                assert!(s.text.raw.contains(side.word()));
            }
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_corpus(5, 4);
        write_corpus(dir.path(), &corpus, Some(5)).unwrap();
        let loaded = read_corpus(dir.path(), &corpus_vocabulary()).unwrap();
        assert_eq!(loaded.len(), 4);
        for (s, (id, text, motion)) in corpus.iter().zip(&loaded) {
            assert_eq!(&s.id, id);
            assert_eq!(&s.text, text);
            assert_eq!(&s.motion, motion);
        }
    }
}
