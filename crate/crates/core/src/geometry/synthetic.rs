//! Synthetic LiDAR-like sequences: a flat ground scatter plus box surfaces,
//! some boxes moving, observed from a moving ego platform.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Point, PointFrame, Pose};
use crate::error::{Error, Result};

/// Label of ground points; box `k` (static boxes first) is labelled `k + 1`.
pub const GROUND_LABEL: u32 = 0;

/// Oriented box resting in the world; points are sampled on its top and
/// four side faces.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSpec {
    /// World position of the box center.
    pub center: [f64; 3],
    /// Length (local x), width (local y), height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovingBox {
    pub shape: BoxSpec,
    /// Meters per frame.
    pub velocity: [f64; 3],
}

/// Fully resolved description of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub ground_points: usize,
    /// Ground height at the world origin.
    pub ground_z: f64,
    /// Ground plane gradient `(dz/dx, dz/dy)` in world coordinates.
    pub ground_slope: [f64; 2],
    /// World-space rectangle the ground scatter covers.
    pub ground_min: [f64; 2],
    pub ground_max: [f64; 2],
    pub static_boxes: Vec<BoxSpec>,
    pub moving_boxes: Vec<MovingBox>,
    /// Ego-to-world pose per frame.
    pub ego_poses: Vec<Pose>,
    pub frames: usize,
    /// Gaussian sensor noise, meters.
    pub sigma: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.ground_z + self.ground_slope[0] * x + self.ground_slope[1] * y
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 6 {
            return Err(Error::Config(format!(
                "a sequence needs at least 6 frames, got {}",
                self.frames
            )));
        }
        if self.ego_poses.len() != self.frames {
            return Err(Error::Config(format!(
                "{} ego poses for {} frames",
                self.ego_poses.len(),
                self.frames
            )));
        }
        for p in &self.ego_poses {
            p.validate()?;
        }
        let box_points: usize = self
            .static_boxes
            .iter()
            .map(|b| b.points)
            .chain(self.moving_boxes.iter().map(|b| b.shape.points))
            .sum();
        if self.ground_points + box_points == 0 {
            return Err(Error::InvalidArgument("empty scene".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Generated frames plus per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<PointFrame>,
    pub labels: Vec<Vec<u32>>,
    pub config: SceneConfig,
}

impl SyntheticSequence {
    pub fn moving_label(&self, i: usize) -> u32 {
        (1 + self.config.static_boxes.len() + i) as u32
    }

    /// Indices of points in `frame` carrying `label`.
    pub fn points_with_label(&self, frame: usize, label: u32) -> Vec<usize> {
        self.labels[frame]
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sample_box_surface(rng: &mut ChaCha8Rng, b: &BoxSpec) -> Vec<Point> {
    let [l, w, h] = b.size;
    // top, +x, -x, +y, -y; density proportional to face area
    let areas = [l * w, w * h, w * h, l * h, l * h];
    let total: f64 = areas.iter().sum();
    let (s, c) = b.yaw.sin_cos();
    (0..b.points)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let u = rng.gen_range(-0.5..0.5);
            let v = rng.gen_range(-0.5..0.5);
            let local = match face {
                0 => [u * l, v * w, 0.5 * h],
                1 => [0.5 * l, u * w, v * h],
                2 => [-0.5 * l, u * w, v * h],
                3 => [u * l, 0.5 * w, v * h],
                _ => [u * l, -0.5 * w, v * h],
            };
            [
                c * local[0] - s * local[1],
                s * local[0] + c * local[1],
                local[2],
            ]
        })
        .collect()
}

/// Render every frame of `cfg`. Bit-identical for identical configs.
///
/// World samples are drawn once; per frame, moving boxes are advanced by
/// `velocity · t`, everything is mapped into ego coordinates with the inverse
/// frame pose, and noise with standard deviation `sigma` is added.
pub fn gen_synthetic_sequence(cfg: &SceneConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut world: Vec<Point> = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..cfg.ground_points {
        let x = rng.gen_range(cfg.ground_min[0]..cfg.ground_max[0]);
        let y = rng.gen_range(cfg.ground_min[1]..cfg.ground_max[1]);
        world.push([x, y, cfg.ground_height(x, y)]);
        intensity.push(rng.gen_range(0.05..0.35));
        labels.push(GROUND_LABEL);
    }
    // (label, center, local offsets from center, moving velocity)
    type PlacedBox = (u32, [f64; 3], Vec<Point>, [f64; 3]);
    let mut boxes: Vec<PlacedBox> = Vec::new();
    let all = cfg
        .static_boxes
        .iter()
        .map(|b| (b, [0.0; 3]))
        .chain(cfg.moving_boxes.iter().map(|m| (&m.shape, m.velocity)));
    for (k, (b, vel)) in all.enumerate() {
        let pts = sample_box_surface(&mut rng, b);
        for _ in &pts {
            intensity.push(rng.gen_range(0.4..0.9));
            labels.push(k as u32 + 1);
        }
        boxes.push((k as u32 + 1, b.center, pts, vel));
    }

    let noise = if cfg.sigma > 0.0 {
        Some(Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut frame_labels = Vec::with_capacity(cfg.frames);
    for (t, pose) in cfg.ego_poses.iter().enumerate() {
        let to_ego = pose.inverse();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(t as u64 + 1);
        let mut pts = Vec::with_capacity(world.len() + boxes.iter().map(|b| b.2.len()).sum::<usize>());
        pts.extend(world.iter().map(|p| to_ego.apply(p)));
        for (_, center, local, vel) in &boxes {
            let c = [
                center[0] + vel[0] * t as f64,
                center[1] + vel[1] * t as f64,
                center[2] + vel[2] * t as f64,
            ];
            pts.extend(
                local
                    .iter()
                    .map(|p| to_ego.apply(&[p[0] + c[0], p[1] + c[1], p[2] + c[2]])),
            );
        }
        if let Some(n) = &noise {
            for p in &mut pts {
                for v in p.iter_mut() {
                    *v += n.sample(&mut noise_rng);
                }
            }
        }
        frames.push(PointFrame::new(t as u32, pts, intensity.clone(), *pose)?);
        frame_labels.push(labels.clone());
    }
    Ok(SyntheticSequence {
        frames,
        labels: frame_labels,
        config: cfg.clone(),
    })
}

/// Randomized recipe for a family of sequences (the `[scene]` config
/// section). Ranges are `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneTemplate {
    pub sequences: usize,
    pub frames: usize,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Ground extends this far beyond the ego path, meters.
    pub ground_margin: f64,
    pub ground_z: [f64; 2],
    /// Ground slope magnitude (rise over run); the direction is uniform.
    pub ground_slope: [f64; 2],
    pub static_boxes: usize,
    pub moving_boxes: usize,
    pub box_length: [f64; 2],
    pub box_width: [f64; 2],
    pub box_height: [f64; 2],
    pub box_points: usize,
    /// Boxes are placed within this distance of the ego path.
    pub box_spread: f64,
    /// Moving-box speed, meters per frame.
    pub moving_speed: [f64; 2],
    /// Ego speed, meters per frame.
    pub ego_speed: [f64; 2],
    /// Ego yaw rate, radians per frame.
    pub ego_yaw_rate: [f64; 2],
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        SceneTemplate {
            sequences: 6,
            frames: 20,
            ground_density: 100.0,
            ground_margin: 12.0,
            ground_z: [-1.2, -0.8],
            ground_slope: [0.0, 0.08],
            static_boxes: 3,
            moving_boxes: 1,
            box_length: [3.5, 5.0],
            box_width: [1.6, 2.2],
            box_height: [1.4, 2.0],
            box_points: 150,
            box_spread: 6.0,
            moving_speed: [0.2, 0.5],
            ego_speed: [0.0, 0.4],
            ego_yaw_rate: [-0.02, 0.02],
            sigma: 0.02,
            seed: 7,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 6 {
            return Err(Error::Config(format!(
                "scene.frames must be >= 6, got {}",
                self.frames
            )));
        }
        for (name, r) in [
            ("ground_z", self.ground_z),
            ("ground_slope", self.ground_slope),
            ("box_length", self.box_length),
            ("box_width", self.box_width),
            ("box_height", self.box_height),
            ("moving_speed", self.moving_speed),
            ("ego_speed", self.ego_speed),
            ("ego_yaw_rate", self.ego_yaw_rate),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("scene.{name} range {r:?} is inverted")));
            }
        }
        if !(self.ground_density >= 0.0) || !(self.sigma >= 0.0) || !(self.ground_margin > 0.0) {
            return Err(Error::Config(
                "scene.ground_density, sigma must be >= 0 and ground_margin > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Resolve sequence `index` of a template into a concrete scene.
pub fn build_scene(t: &SceneTemplate, index: usize) -> Result<SceneConfig> {
    t.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(index as u64);

    let speed = uniform(&mut rng, t.ego_speed);
    let yaw_rate = uniform(&mut rng, t.ego_yaw_rate);
    let yaw0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut ego_poses = Vec::with_capacity(t.frames);
    let mut pos = [0.0, 0.0];
    for f in 0..t.frames {
        let yaw = yaw0 + yaw_rate * f as f64;
        ego_poses.push(Pose::from_yaw_translation(yaw, [pos[0], pos[1], 0.0]));
        pos[0] += speed * yaw.cos();
        pos[1] += speed * yaw.sin();
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &ego_poses {
        let tr = p.translation();
        for k in 0..2 {
            lo[k] = lo[k].min(tr[k]);
            hi[k] = hi[k].max(tr[k]);
        }
    }
    let ground_min = [lo[0] - t.ground_margin, lo[1] - t.ground_margin];
    let ground_max = [hi[0] + t.ground_margin, hi[1] + t.ground_margin];
    let area = (ground_max[0] - ground_min[0]) * (ground_max[1] - ground_min[1]);
    let ground_z = uniform(&mut rng, t.ground_z);
    let slope = uniform(&mut rng, t.ground_slope);
    let slope_dir = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let ground_slope = [slope * slope_dir.cos(), slope * slope_dir.sin()];
    let height = |x: f64, y: f64| ground_z + ground_slope[0] * x + ground_slope[1] * y;

    let make_box = |rng: &mut ChaCha8Rng, anchor: [f64; 3], yaw: f64| {
        let size = [
            uniform(rng, t.box_length),
            uniform(rng, t.box_width),
            uniform(rng, t.box_height),
        ];
        let off = [
            rng.gen_range(-t.box_spread..=t.box_spread),
            rng.gen_range(-t.box_spread..=t.box_spread),
        ];
        let (x, y) = (anchor[0] + off[0], anchor[1] + off[1]);
        BoxSpec {
            center: [x, y, height(x, y) + 0.5 * size[2]],
            size,
            yaw,
            points: t.box_points,
        }
    };
    let mut static_boxes = Vec::with_capacity(t.static_boxes);
    for _ in 0..t.static_boxes {
        let anchor = ego_poses[rng.gen_range(0..t.frames)].translation();
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        static_boxes.push(make_box(&mut rng, anchor, yaw));
    }
    let mut moving_boxes = Vec::with_capacity(t.moving_boxes);
    for _ in 0..t.moving_boxes {
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let v = uniform(&mut rng, t.moving_speed);
        let shape = make_box(&mut rng, ego_poses[0].translation(), heading);
        moving_boxes.push(MovingBox {
            shape,
            // boxes slide along the ground plane
            velocity: [
                v * heading.cos(),
                v * heading.sin(),
                v * (ground_slope[0] * heading.cos() + ground_slope[1] * heading.sin()),
            ],
        });
    }
    Ok(SceneConfig {
        ground_points: (t.ground_density * area).round() as usize,
        ground_z,
        ground_slope,
        ground_min,
        ground_max,
        static_boxes,
        moving_boxes,
        ego_poses,
        frames: t.frames,
        sigma: t.sigma,
        seed: t.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    })
}

/// Every sequence of a template, in index order.
pub fn synthetic_dataset(t: &SceneTemplate) -> Result<Vec<SyntheticSequence>> {
    (0..t.sequences)
        .map(|i| gen_synthetic_sequence(&build_scene(t, i)?))
        .collect()
}
