//! Synthetic sequences: a rigid point shape moving along a smooth path with
//! sensor noise and background clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{add3, rotate_z, Box3D, Point3, PointCloud};

/// Shapes are sampled inside the box at this fraction of its extents.
pub const SHAPE_FILL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// All six faces of a box.
    BoxSurface,
    /// The rear and one side wall, as a range sensor sees a car.
    LShape,
    /// A vertical elliptic cylinder shell.
    CylinderShell,
}

/// Per-frame motion in the object's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    /// Displacement along the local (heading, lateral, up) axes per frame.
    pub translation: Point3,
    /// Heading change per frame, radians.
    pub yaw_rate: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Self {
            translation: [0.3, 0.0, 0.0],
            yaw_rate: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: ShapeKind,
    /// `[w, h, l]` of the ground-truth box.
    pub size: [f64; 3],
    pub frames: usize,
    pub target_points: usize,
    pub motion: Motion,
    /// Standard deviation of the Gaussian jitter on every point, meters.
    pub noise: f64,
    /// Clutter points per frame, drawn outside the target box.
    pub clutter: usize,
    /// Horizontal half-width of the square clutter region around the target.
    pub clutter_extent: f64,
    pub category: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: ShapeKind::BoxSurface,
            size: [1.8, 1.5, 4.0],
            frames: 20,
            target_points: 256,
            motion: Motion::default(),
            noise: 0.02,
            clutter: 50,
            clutter_extent: 5.0,
            category: "car".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("{} frames; at least 2 needed", self.frames)));
        }
        if self.target_points == 0 {
            return Err(Error::Config("target_points must be positive".into()));
        }
        if self.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("box size {:?}", self.size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {}", self.noise)));
        }
        let [_, _, l] = self.size;
        if self.clutter > 0 && !(self.clutter_extent > l / 2.0 && self.clutter_extent.is_finite()) {
            return Err(Error::Config(format!(
                "clutter_extent {} must exceed half the box length",
                self.clutter_extent
            )));
        }
        let m = &self.motion;
        if m.translation.iter().chain([&m.yaw_rate]).any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite motion".into()));
        }
        Ok(())
    }
}

/// A generated sequence plus generation-time statistics.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub sequence: Sequence,
    /// Target points come first in each frame; this many of them.
    pub target_points: usize,
    /// Fraction of target points inside the ground-truth box, per frame.
    pub containment: Vec<f64>,
}

fn sample_shape(kind: ShapeKind, size: [f64; 3], count: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let [w, h, l] = size;
    let (a, b, c) = (SHAPE_FILL * l / 2.0, SHAPE_FILL * w / 2.0, SHAPE_FILL * h / 2.0);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    match kind {
        ShapeKind::BoxSurface | ShapeKind::LShape => {
            // faces as (area, sampler) pairs; the L shape keeps rear and left walls
            let faces: Vec<(f64, u8)> = match kind {
                ShapeKind::BoxSurface => vec![
                    (4.0 * b * c, 0),
                    (4.0 * b * c, 1),
                    (4.0 * a * c, 2),
                    (4.0 * a * c, 3),
                    (4.0 * a * b, 4),
                    (4.0 * a * b, 5),
                ],
                _ => vec![(4.0 * b * c, 1), (4.0 * a * c, 3)],
            };
            let total: f64 = faces.iter().map(|f| f.0).sum();
            (0..count)
                .map(|_| {
                    let mut pick = u(0.0, total);
                    let mut face = faces[faces.len() - 1].1;
                    for &(area, id) in &faces {
                        if pick <= area {
                            face = id;
                            break;
                        }
                        pick -= area;
                    }
                    let (x, y, z) = (u(-a, a), u(-b, b), u(-c, c));
                    match face {
                        0 => [a, y, z],
                        1 => [-a, y, z],
                        2 => [x, b, z],
                        3 => [x, -b, z],
                        4 => [x, y, c],
                        _ => [x, y, -c],
                    }
                })
                .collect()
        }
        ShapeKind::CylinderShell => (0..count)
            .map(|_| {
                let t = u(-std::f64::consts::PI, std::f64::consts::PI);
                [a * t.cos(), b * t.sin(), u(-c, c)]
            })
            .collect(),
    }
}

/// Ground-truth boxes: a random start pose followed by the rigid motion.
fn trajectory(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let [_, h, _] = spec.size;
    let mut center = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), h / 2.0];
    let mut yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut boxes = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        boxes.push(Box3D::new(center, spec.size, yaw)?);
        center = add3(center, rotate_z(spec.motion.translation, yaw));
        yaw += spec.motion.yaw_rate;
    }
    Ok(boxes)
}

pub fn generate_detailed(spec: &SyntheticSpec, seed: u64) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = sample_shape(spec.shape, spec.size, spec.target_points, &mut rng);
    let boxes = trajectory(spec, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let [_, h, _] = spec.size;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut containment = Vec::with_capacity(spec.frames);
    for gt in &boxes {
        let mut coords = Vec::with_capacity(spec.target_points + spec.clutter);
        for &p in &shape {
            let mut q = gt.to_world(p);
            if spec.noise > 0.0 {
                for v in &mut q {
                    *v += noise.sample(&mut rng);
                }
            }
            coords.push(q);
        }
        let inside = coords.iter().filter(|&&p| gt.contains(p)).count();
        containment.push(inside as f64 / spec.target_points as f64);

        let e = spec.clutter_extent;
        let mut placed = 0;
        while placed < spec.clutter {
            let p = [
                gt.center[0] + rng.random_range(-e..e),
                gt.center[1] + rng.random_range(-e..e),
                rng.random_range(0.0..h * 1.5),
            ];
            if !gt.contains(p) {
                coords.push(p);
                placed += 1;
            }
        }
        frames.push(Frame {
            cloud: PointCloud::new(coords)?,
            gt_box: Some(*gt),
        });
    }
    let worst = containment.iter().copied().fold(1.0, f64::min);
    if worst < 0.95 {
        log::warn!("synthetic seed {seed}: only {:.1}% of target points inside the box", 100.0 * worst);
    }
    Ok(Synthetic {
        sequence: Sequence {
            name: format!("synthetic_{seed}"),
            category: spec.category.clone(),
            frames,
        },
        target_points: spec.target_points,
        containment,
    })
}

pub fn generate_synthetic_sequence(spec: &SyntheticSpec, seed: u64) -> Result<Sequence> {
    Ok(generate_detailed(spec, seed)?.sequence)
}

/// A family of sequences sharing one generator spec; each gets its own seed
/// and a perturbed motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSet {
    pub sequences: usize,
    pub seed: u64,
    pub generator: SyntheticSpec,
    /// Forward speed of each sequence is scaled by a factor drawn from
    /// `1 ± speed_jitter`.
    pub speed_jitter: f64,
    /// Added to each sequence's yaw rate, drawn from `± yaw_rate_jitter`.
    pub yaw_rate_jitter: f64,
}

impl Default for SyntheticSet {
    fn default() -> Self {
        Self {
            sequences: 8,
            seed: 1,
            generator: SyntheticSpec::default(),
            speed_jitter: 0.5,
            yaw_rate_jitter: 0.03,
        }
    }
}

impl SyntheticSet {
    pub fn generate(&self) -> Result<Vec<Sequence>> {
        if self.sequences == 0 {
            return Err(Error::Config("a synthetic set needs at least one sequence".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.sequences)
            .map(|i| {
                let seed: u64 = rng.random();
                let mut spec = self.generator.clone();
                let scale = 1.0 + self.speed_jitter * rng.random_range(-1.0..=1.0);
                spec.motion.translation = spec.motion.translation.map(|v| v * scale);
                spec.motion.yaw_rate += self.yaw_rate_jitter * rng.random_range(-1.0..=1.0);
                let mut seq = generate_synthetic_sequence(&spec, seed)?;
                seq.name = format!("seq_{i:03}");
                Ok(seq)
            })
            .collect()
    }
}
