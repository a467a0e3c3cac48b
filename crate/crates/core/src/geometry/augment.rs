use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PointFrame;

/// One draw of the paired flip / scale / yaw augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    pub flip_x: bool,
    pub flip_y: bool,
    pub scale: f64,
    /// Radians, about +z through the origin.
    pub yaw: f64,
}

impl AugParams {
    pub const NEUTRAL: AugParams = AugParams {
        flip_x: false,
        flip_y: false,
        scale: 1.0,
        yaw: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugRanges {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Yaw is drawn from `[-yaw_max, yaw_max]`.
    pub yaw_max: f64,
}

impl Default for AugRanges {
    fn default() -> Self {
        AugRanges {
            flip_prob: 0.5,
            scale_min: 0.95,
            scale_max: 1.05,
            yaw_max: std::f64::consts::FRAC_PI_4,
        }
    }
}

pub fn sample_aug<R: Rng + ?Sized>(rng: &mut R, ranges: &AugRanges) -> AugParams {
    let flip_x = rng.gen_bool(ranges.flip_prob);
    let flip_y = rng.gen_bool(ranges.flip_prob);
    let scale = if ranges.scale_max > ranges.scale_min {
        rng.gen_range(ranges.scale_min..=ranges.scale_max)
    } else {
        ranges.scale_min
    };
    let yaw = if ranges.yaw_max > 0.0 {
        rng.gen_range(-ranges.yaw_max..=ranges.yaw_max)
    } else {
        0.0
    };
    AugParams {
        flip_x,
        flip_y,
        scale,
        yaw,
    }
}

/// Flip, then scale, then rotate about z. Intensities and pose are untouched.
pub fn apply_aug(frame: &PointFrame, aug: &AugParams) -> PointFrame {
    let (s, c) = aug.yaw.sin_cos();
    let mut out = frame.clone();
    for p in &mut out.points {
        let mut x = if aug.flip_x { -p[0] } else { p[0] };
        let mut y = if aug.flip_y { -p[1] } else { p[1] };
        x *= aug.scale;
        y *= aug.scale;
        let z = p[2] * aug.scale;
        *p = [c * x - s * y, s * x + c * y, z];
    }
    out
}

/// The same draw applied to both frames of a pair.
pub fn apply_aug_pair(pair: (&PointFrame, &PointFrame), aug: &AugParams) -> (PointFrame, PointFrame) {
    (apply_aug(pair.0, aug), apply_aug(pair.1, aug))
}

/// Undo [`apply_aug`]: rotate by `-yaw`, scale by `1/scale`, flip again.
pub fn invert_aug(frame: &PointFrame, aug: &AugParams) -> PointFrame {
    let (s, c) = (-aug.yaw).sin_cos();
    let mut out = frame.clone();
    for p in &mut out.points {
        let x = (c * p[0] - s * p[1]) / aug.scale;
        let y = (s * p[0] + c * p[1]) / aug.scale;
        let z = p[2] / aug.scale;
        *p = [
            if aug.flip_x { -x } else { x },
            if aug.flip_y { -y } else { y },
            z,
        ];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{concat_frames, Pose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(points: Vec<[f64; 3]>) -> PointFrame {
        let n = points.len();
        PointFrame::new(0, points, vec![0.2; n], Pose::identity()).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> PointFrame {
        frame(
            (0..n)
                .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..4.0)])
                .collect(),
        )
    }

    #[test]
    fn neutral_params_are_identity() {
        let f = frame(vec![[1.0, 2.0, 3.0], [-0.5, 7.0, 0.0]]);
        let (a, b) = apply_aug_pair((&f, &f), &AugParams::NEUTRAL);
        assert_eq!(a, f);
        assert_eq!(b, f);
    }

    #[test]
    fn flip_x_reflects() {
        let f = frame(vec![[1.0, 2.0, 3.0]]);
        let aug = AugParams { flip_x: true, ..AugParams::NEUTRAL };
        assert_eq!(apply_aug(&f, &aug).points[0], [-1.0, 2.0, 3.0]);
    }

    #[test]
    fn inverse_restores_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f = random_frame(&mut rng, 30);
            let aug = sample_aug(&mut rng, &AugRanges::default());
            let back = invert_aug(&apply_aug(&f, &aug), &aug);
            for (p, q) in f.points.iter().zip(&back.points) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-12, "{p:?} vs {q:?}");
                }
            }
        }
    }

    #[test]
    fn samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = AugRanges::default();
        let mut flips = 0;
        for _ in 0..4000 {
            let a = sample_aug(&mut rng, &r);
            assert!((0.95..=1.05).contains(&a.scale));
            assert!(a.yaw.abs() <= std::f64::consts::FRAC_PI_4);
            flips += a.flip_x as usize;
        }
        assert!((flips as f64 / 4000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn aug_commutes_with_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_frame(&mut rng, 10);
        let b = random_frame(&mut rng, 7);
        let aug = sample_aug(&mut rng, &AugRanges::default());
        let lhs = apply_aug(&concat_frames(&a, &b), &aug);
        let (aa, bb) = apply_aug_pair((&a, &b), &aug);
        assert_eq!(lhs, concat_frames(&aa, &bb));
    }
}
