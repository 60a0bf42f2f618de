//! Synthetic two-person body/hand action generator.
//!
//! Each class owns a body motion pattern, a finger motion pattern, or both.
//! The acting person also sways as a whole (class independent, removed by
//! centering) so it is always the most active person; the second person
//! stands still apart from sensor noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, PersonTrack, SkeletonSample, BODY_NODES, HAND_NODES};
use crate::error::{ensure, Result};
use crate::exec;
use crate::graph::topology::{body, hand};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassProfile {
    BodyDominant,
    HandDominant,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    /// One entry per class; empty means thirds of body, hand, mixed.
    pub class_profile: Vec<ClassProfile>,
    pub body_amplitude: f64,
    pub finger_amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 12,
            per_class_train: 50,
            per_class_test: 25,
            frames: 48,
            noise_sigma: 0.005,
            class_profile: Vec::new(),
            body_amplitude: 0.25,
            finger_amplitude: 0.04,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "num_classes must be at least 2, got {}", self.num_classes);
        ensure!(self.frames >= 2, "frames must be at least 2, got {}", self.frames);
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be finite and non-negative, got {}",
            self.noise_sigma
        );
        ensure!(
            self.body_amplitude.is_finite() && self.finger_amplitude.is_finite(),
            "amplitudes must be finite"
        );
        ensure!(
            self.class_profile.is_empty() || self.class_profile.len() == self.num_classes,
            "class_profile has {} entries but there are {} classes",
            self.class_profile.len(),
            self.num_classes
        );
        Ok(())
    }

    pub fn profiles(&self) -> Vec<ClassProfile> {
        if !self.class_profile.is_empty() {
            return self.class_profile.clone();
        }
        let k = self.num_classes;
        (0..k)
            .map(|c| match 3 * c / k {
                0 => ClassProfile::BodyDominant,
                1 => ClassProfile::HandDominant,
                _ => ClassProfile::Mixed,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: Dataset,
    pub test: Dataset,
}

const REST_BODY: [[f64; 3]; BODY_NODES] = [
    [0.0, 1.0, 0.0],
    [0.0, 1.25, 0.0],
    [0.0, 1.45, 0.0],
    [0.0, 1.55, 0.0],
    [0.0, 1.7, 0.0],
    [0.2, 1.45, 0.0],
    [0.25, 1.2, 0.0],
    [0.28, 0.97, 0.0],
    [0.29, 0.9, 0.0],
    [0.3, 0.82, 0.0],
    [-0.2, 1.45, 0.0],
    [-0.25, 1.2, 0.0],
    [-0.28, 0.97, 0.0],
    [-0.29, 0.9, 0.0],
    [-0.3, 0.82, 0.0],
    [0.1, 0.95, 0.0],
    [0.11, 0.5, 0.0],
    [0.12, 0.08, 0.0],
    [0.12, 0.03, 0.1],
    [-0.1, 0.95, 0.0],
    [-0.11, 0.5, 0.0],
    [-0.12, 0.08, 0.0],
    [-0.12, 0.03, 0.1],
    [0.26, 0.88, 0.03],
    [-0.26, 0.88, 0.03],
];

fn rest_hand(mirror: bool) -> Vec<[f64; 3]> {
    const ANGLES: [f64; 5] = [-0.9, -0.3, 0.0, 0.25, 0.5];
    let sx = if mirror { -1.0 } else { 1.0 };
    let mut out = vec![[0.0; 3]; HAND_NODES];
    for (f, &a) in ANGLES.iter().enumerate() {
        let (base, seg) = if f == 0 { (0.02, 0.02) } else { (0.03, 0.025) };
        for j in 0..4 {
            let r = base + seg * j as f64;
            out[hand::finger(f, j)] = [sx * r * a.sin(), -r * a.cos(), 0.0];
        }
    }
    out
}

/// Displacement direction per joint (already weighted) and cycle count.
struct Pattern {
    moves: Vec<(usize, [f64; 3])>,
    right_hand: bool,
    cycles: f64,
}

fn scaled(dir: [f64; 3], w: f64) -> [f64; 3] {
    [dir[0] * w, dir[1] * w, dir[2] * w]
}

fn arm(left: bool, dir: [f64; 3]) -> Vec<(usize, [f64; 3])> {
    let j = if left {
        [body::L_ELBOW, body::L_WRIST, body::L_HAND, body::L_HANDTIP, body::L_THUMB]
    } else {
        [body::R_ELBOW, body::R_WRIST, body::R_HAND, body::R_HANDTIP, body::R_THUMB]
    };
    let w = [0.5, 0.85, 0.9, 1.0, 0.9];
    j.iter().zip(w).map(|(&n, w)| (n, scaled(dir, w))).collect()
}

fn leg(left: bool, dir: [f64; 3]) -> Vec<(usize, [f64; 3])> {
    let j = if left {
        [body::L_KNEE, body::L_ANKLE, body::L_FOOT]
    } else {
        [body::R_KNEE, body::R_ANKLE, body::R_FOOT]
    };
    j.iter().zip([0.5, 0.9, 1.0]).map(|(&n, w)| (n, scaled(dir, w))).collect()
}

fn body_pattern(index: usize) -> Pattern {
    const UP: [f64; 3] = [0.0, 1.0, 0.0];
    const FWD: [f64; 3] = [0.0, 0.0, 1.0];
    let (moves, cycles) = match index % 8 {
        0 => (arm(false, UP), 1.0),
        1 => (arm(true, UP), 1.0),
        2 => (arm(false, FWD), 2.0),
        3 => (arm(true, FWD), 2.0),
        4 => {
            let mut m = arm(true, [1.0, 0.0, 0.0]);
            m.extend(arm(false, [-1.0, 0.0, 0.0]));
            (m, 1.0)
        }
        5 => (leg(false, FWD), 1.0),
        6 => (leg(true, FWD), 2.0),
        _ => {
            let m = (0..BODY_NODES)
                .filter(|&n| REST_BODY[n][1] > 1.05)
                .map(|n| (n, [(REST_BODY[n][1] - 1.0) / 0.7, 0.0, 0.0]))
                .collect();
            (m, 1.0)
        }
    };
    Pattern { moves, right_hand: false, cycles: cycles * (1 + index / 8) as f64 }
}

fn hand_pattern(index: usize) -> Pattern {
    let curl = {
        let n = (0.25f64 + 1.0).sqrt();
        [0.0, 0.5 / n, 1.0 / n]
    };
    let (fingers, right, cycles): (&[usize], bool, f64) = match index % 8 {
        0 => (&[1], true, 1.0),
        1 => (&[0], true, 2.0),
        2 => (&[2, 3], false, 1.0),
        3 => (&[4], true, 2.0),
        4 => (&[0, 1, 2, 3, 4], true, 1.0),
        5 => (&[1, 2], false, 2.0),
        6 => (&[0, 1], true, 1.0),
        _ => (&[3, 4], false, 2.0),
    };
    let moves = fingers
        .iter()
        .flat_map(|&f| (0..4).map(move |j| (hand::finger(f, j), scaled(curl, (j + 1) as f64 / 4.0))))
        .collect();
    Pattern { moves, right_hand: right, cycles: cycles * (1 + index / 8) as f64 }
}

struct ClassPlan {
    body: Option<Pattern>,
    hand: Option<Pattern>,
}

fn class_plans(spec: &SynthSpec) -> Vec<ClassPlan> {
    let (mut nb, mut nh) = (0, 0);
    let next = |counter: &mut usize| {
        *counter += 1;
        *counter - 1
    };
    spec.profiles()
        .into_iter()
        .map(|p| match p {
            ClassProfile::BodyDominant => ClassPlan { body: Some(body_pattern(next(&mut nb))), hand: None },
            ClassProfile::HandDominant => ClassPlan { body: None, hand: Some(hand_pattern(next(&mut nh))) },
            ClassProfile::Mixed => ClassPlan {
                body: Some(body_pattern(next(&mut nb))),
                hand: Some(hand_pattern(next(&mut nh))),
            },
        })
        .collect()
}

struct Jitter {
    amplitude: f64,
    speed: f64,
    phase: f64,
}

impl Jitter {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Jitter {
            amplitude: rng.random_range(0.8..1.2),
            speed: rng.random_range(0.9..1.1),
            phase: rng.random_range(-0.3..0.3),
        }
    }

    fn at(&self, cycles: f64, u: f64) -> f64 {
        self.amplitude * (2.0 * PI * cycles * self.speed * u + self.phase).sin()
    }
}

fn apply(frames: &mut [Vec<[f64; 3]>], pattern: &Pattern, jitter: &Jitter, amplitude: f64) {
    let t_max = (frames.len() - 1).max(1) as f64;
    for (t, frame) in frames.iter_mut().enumerate() {
        let s = amplitude * jitter.at(pattern.cycles, t as f64 / t_max);
        for &(node, dir) in &pattern.moves {
            for c in 0..3 {
                frame[node][c] += s * dir[c];
            }
        }
    }
}

fn to_tensor(frames: Vec<Vec<[f64; 3]>>, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Tensor {
    let (t, v) = (frames.len(), frames[0].len());
    let data = frames.into_iter().flatten().flatten().map(|x| x + noise.sample(rng)).collect();
    Tensor::new(&[t, v, 3], data).expect("generated track is well formed")
}

fn make_person(
    spec: &SynthSpec,
    plan: Option<&ClassPlan>,
    origin: [f64; 3],
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> PersonTrack {
    let t = spec.frames;
    let scale = rng.random_range(0.92..1.08);
    let hand_scale = rng.random_range(0.9..1.1);
    let pose: Vec<[f64; 3]> = REST_BODY
        .iter()
        .map(|p| [origin[0] + scale * p[0], origin[1] + scale * (p[1] - 1.0) + 1.0, origin[2] + scale * p[2]])
        .collect();
    let mut bodies = vec![pose.clone(); t];
    let hand_at = |wrist: usize, mirror: bool| -> Vec<[f64; 3]> {
        rest_hand(mirror)
            .into_iter()
            .map(|h| [pose[wrist][0] + hand_scale * h[0], pose[wrist][1] + hand_scale * h[1], pose[wrist][2] + hand_scale * h[2]])
            .collect()
    };
    let mut lefts = vec![hand_at(body::L_WRIST, false); t];
    let mut rights = vec![hand_at(body::R_WRIST, true); t];

    if let Some(plan) = plan {
        if let Some(p) = &plan.body {
            apply(&mut bodies, p, &Jitter::draw(rng), spec.body_amplitude);
        }
        if let Some(p) = &plan.hand {
            let target = if p.right_hand { &mut rights } else { &mut lefts };
            apply(target, p, &Jitter::draw(rng), spec.finger_amplitude);
        }
        let phase = rng.random_range(0.0..2.0 * PI);
        let sway = Pattern { moves: (0..BODY_NODES).map(|n| (n, [1.0, 0.0, 0.0])).collect(), right_hand: false, cycles: 1.0 };
        let hand_sway = Pattern { moves: (0..HAND_NODES).map(|n| (n, [1.0, 0.0, 0.0])).collect(), right_hand: false, cycles: 1.0 };
        let j = Jitter { amplitude: 1.0, speed: 1.0, phase };
        apply(&mut bodies, &sway, &j, 0.1);
        apply(&mut lefts, &hand_sway, &j, 0.1);
        apply(&mut rights, &hand_sway, &j, 0.1);
    }

    PersonTrack {
        body: to_tensor(bodies, noise, rng),
        left_hand: to_tensor(lefts, noise, rng),
        right_hand: to_tensor(rights, noise, rng),
    }
}

fn make_sample(spec: &SynthSpec, plans: &[ClassPlan], label: usize, seed: u64, index: u64) -> SkeletonSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let origin = [rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.3..0.3)];
    let other = [origin[0] + rng.random_range(1.0..1.4), 0.0, origin[2] + 0.3];
    let actor_first = rng.random_bool(0.5);
    let actor = make_person(spec, Some(&plans[label]), origin, &mut rng, &noise);
    let idle = make_person(spec, None, other, &mut rng, &noise);
    let persons = if actor_first { vec![actor, idle] } else { vec![idle, actor] };
    SkeletonSample { label, persons }
}

/// Deterministic train/test split for `(spec, seed)`. Samples are ordered by
/// class; each draws from its own random stream.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SyntheticSplit> {
    spec.validate()?;
    let plans = class_plans(spec);
    let k = spec.num_classes;
    let split = |per_class: usize, offset: usize| -> Result<Dataset> {
        let samples = exec::map_indexed(k * per_class, |i| {
            make_sample(spec, &plans, i / per_class, seed, (offset + i) as u64)
        });
        Dataset::new(k, samples)
    };
    Ok(SyntheticSplit {
        train: split(spec.per_class_train, 0)?,
        test: split(spec.per_class_test, k * spec.per_class_train)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::select_active_hands;

    fn small() -> SynthSpec {
        SynthSpec { per_class_train: 3, per_class_test: 1, ..SynthSpec::default() }
    }

    #[test]
    fn deterministic_and_counted() {
        let a = synth_generate(&small(), 7).unwrap();
        let b = synth_generate(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 36);
        assert_eq!(a.test.len(), 12);
        assert!(a.train.class_histogram().iter().all(|&h| h == 3));
        assert_ne!(a.train, synth_generate(&small(), 8).unwrap().train);
    }

    #[test]
    fn actor_is_selected() {
        let d = synth_generate(&small(), 1).unwrap().train;
        for s in &d.samples {
            let sel = select_active_hands(s).unwrap();
            let energies: Vec<f64> = s.persons.iter().map(|p| crate::data::transform::motion_energy(&p.body)).collect();
            assert!(energies[sel.person] > energies[1 - sel.person]);
        }
    }

    #[test]
    fn profile_must_cover_classes() {
        let spec = SynthSpec { class_profile: vec![ClassProfile::Mixed; 3], ..small() };
        assert!(synth_generate(&spec, 0).is_err());
        let spec = SynthSpec { noise_sigma: -1.0, ..small() };
        assert!(synth_generate(&spec, 0).is_err());
        assert_eq!(small().profiles().iter().filter(|&&p| p == ClassProfile::Mixed).count(), 4);
    }
}
