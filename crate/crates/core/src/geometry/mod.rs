//! Point frames, rigid ego poses and frame alignment.

mod augment;
mod synthetic;

pub use augment::{apply_aug, apply_aug_pair, invert_aug, sample_aug, AugParams, AugRanges};
pub use synthetic::{
    build_scene, gen_synthetic_sequence, synthetic_dataset, BoxSpec, MovingBox, SceneConfig, SceneTemplate,
    SyntheticSequence, GROUND_LABEL,
};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Homogeneous 4×4 rigid transform (ego to world), row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub matrix: [f64; 16],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        matrix: [
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self::from_yaw_translation(0.0, t)
    }

    /// Rotation about +z by `yaw` followed by translation `t`.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            matrix: [
                c, -s, 0.0, t[0], //
                s, c, 0.0, t[1], //
                0.0, 0.0, 1.0, t[2], //
                0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    /// Rotation from a row-major 3×3 block plus translation, unchecked.
    pub fn from_parts(r: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = Self::IDENTITY.matrix;
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[i][j];
            }
            m[i * 4 + 3] = t[i];
        }
        Pose { matrix: m }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[3], self.matrix[7], self.matrix[11]]
    }

    /// Checks the rigid-motion invariants: orthonormal rotation with unit
    /// determinant and a `(0, 0, 0, 1)` bottom row.
    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Pose("non-finite entry".into()));
        }
        if m[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Pose(format!("bottom row {:?}", &m[12..16])));
        }
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if worst >= 1e-9 || (det - 1.0).abs() >= 1e-9 {
            return Err(Error::Pose(format!(
                "rotation not orthonormal (|RᵀR - I|∞ = {worst:.3e}, det = {det})"
            )));
        }
        Ok(())
    }

    /// Rigid inverse `[Rᵀ | -Rᵀt]`.
    pub fn inverse(&self) -> Pose {
        let r = self.rotation();
        let t = self.translation();
        let mut rt = [[0.0; 3]; 3];
        let mut ti = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
            ti[i] = -(0..3).map(|k| r[k][i] * t[k]).sum::<f64>();
        }
        Pose::from_parts(rt, ti)
    }

    /// `self · other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let (a, b) = (&self.matrix, &other.matrix);
        let mut m = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                m[i * 4 + j] = (0..4).map(|k| a[i * 4 + k] * b[k * 4 + j]).sum();
            }
        }
        Pose { matrix: m }
    }

    pub fn apply(&self, p: &Point) -> Point {
        let m = &self.matrix;
        [
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
            m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
            m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
        ]
    }
}

/// One timestamped scan in its ego coordinate system.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointFrame {
    pub timestamp_index: u32,
    /// Meters, ego coordinates.
    pub points: Vec<Point>,
    /// Unitless reflectance in `[0, 1]`, one per point.
    pub intensity: Vec<f64>,
    /// Ego to world.
    pub pose: Pose,
}

impl PointFrame {
    pub fn new(timestamp_index: u32, points: Vec<Point>, intensity: Vec<f64>, pose: Pose) -> Result<Self> {
        let f = PointFrame {
            timestamp_index,
            points,
            intensity,
            pose,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.intensity.len() {
            return Err(Error::InvalidArgument(format!(
                "{} points but {} intensities",
                self.points.len(),
                self.intensity.len()
            )));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point coordinate".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keep the points for which `keep` is true.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &Point) -> bool) -> PointFrame {
        let mut out = PointFrame {
            timestamp_index: self.timestamp_index,
            pose: self.pose,
            ..Default::default()
        };
        for (i, p) in self.points.iter().enumerate() {
            if keep(i, p) {
                out.points.push(*p);
                out.intensity.push(self.intensity[i]);
            }
        }
        out
    }
}

/// Re-express `src` in the ego coordinates of `dst_pose`:
/// `p' = dst_pose⁻¹ · src.pose · p`.
pub fn transform_to_frame(src: &PointFrame, dst_pose: &Pose) -> Result<PointFrame> {
    src.pose.validate()?;
    dst_pose.validate()?;
    let m = dst_pose.inverse().compose(&src.pose);
    Ok(PointFrame {
        timestamp_index: src.timestamp_index,
        points: src.points.iter().map(|p| m.apply(p)).collect(),
        intensity: src.intensity.clone(),
        pose: *dst_pose,
    })
}

/// Union of two frames that already share `cur`'s coordinate system.
///
/// Nothing here can detect a coordinate-system mismatch; aligning `prev`
/// with [`transform_to_frame`] first is the caller's job.
pub fn concat_frames(prev: &PointFrame, cur: &PointFrame) -> PointFrame {
    let mut points = Vec::with_capacity(prev.len() + cur.len());
    points.extend_from_slice(&prev.points);
    points.extend_from_slice(&cur.points);
    let mut intensity = Vec::with_capacity(points.len());
    intensity.extend_from_slice(&prev.intensity);
    intensity.extend_from_slice(&cur.intensity);
    PointFrame {
        timestamp_index: cur.timestamp_index,
        points,
        intensity,
        pose: cur.pose,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rotation_from(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    fn frame(points: Vec<Point>, pose: Pose) -> PointFrame {
        let n = points.len();
        PointFrame::new(0, points, vec![0.5; n], pose).unwrap()
    }

    #[test]
    fn same_pose_leaves_points_unchanged() {
        let pose = Pose::from_yaw_translation(0.3, [1.0, -2.0, 0.5]);
        let f = frame(vec![[1.0, 2.0, 3.0], [-4.0, 0.0, 1.0]], pose);
        let g = transform_to_frame(&f, &pose).unwrap();
        for (a, b) in f.points.iter().zip(&g.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_translation() {
        let f = frame(vec![[0.0, 0.0, 0.0]], Pose::from_translation([1.0, 0.0, 0.0]));
        let g = transform_to_frame(&f, &Pose::identity()).unwrap();
        assert_eq!(g.points[0], [1.0, 0.0, 0.0]);
        assert_eq!(g.pose, Pose::identity());
        assert_eq!(g.intensity, f.intensity);
    }

    #[test]
    fn singular_pose_is_rejected() {
        let mut bad = Pose::identity();
        bad.matrix[0] = 0.0;
        let f = frame(vec![[0.0; 3]], bad);
        assert!(matches!(transform_to_frame(&f, &Pose::identity()), Err(Error::Pose(_))));
        let mut skew = Pose::identity();
        skew.matrix[12] = 1.0;
        assert!(skew.validate().is_err());
    }

    #[test]
    fn concat_cardinality_and_empty_union() {
        let a = frame(vec![[1.0, 0.0, 0.0]; 3], Pose::identity());
        let b = frame(vec![[0.0, 1.0, 0.0]; 2], Pose::from_translation([0.0, 0.0, 1.0]));
        let c = concat_frames(&a, &b);
        assert_eq!(c.len(), 5);
        assert_eq!(c.pose, b.pose);
        let empty = frame(vec![], Pose::identity());
        assert_eq!(concat_frames(&empty, &b), b);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.0f64..3.0,
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_filter_map("degenerate axis", |(axis, angle, t)| {
                let n = axis.iter().map(|v| v * v).sum::<f64>();
                (n > 1e-3).then(|| Pose::from_parts(rotation_from(axis, angle), t))
            })
    }

    proptest! {
        #[test]
        fn round_trip_restores_points(a in arb_pose(), b in arb_pose(),
                                      pts in prop::collection::vec(prop::array::uniform3(-80.0f64..80.0), 1..20)) {
            let f = frame(pts, a);
            let there = transform_to_frame(&f, &b).unwrap();
            let back = transform_to_frame(&there, &a).unwrap();
            for (p, q) in f.points.iter().zip(&back.points) {
                for k in 0..3 {
                    prop_assert!((p[k] - q[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn transform_preserves_pairwise_distances(a in arb_pose(), b in arb_pose(),
                                                  pts in prop::collection::vec(prop::array::uniform3(-80.0f64..80.0), 2..12)) {
            let f = frame(pts, a);
            let g = transform_to_frame(&f, &b).unwrap();
            let dist = |p: &Point, q: &Point| ((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2)).sqrt();
            for i in 0..f.len() {
                for j in i + 1..f.len() {
                    prop_assert!((dist(&f.points[i], &f.points[j]) - dist(&g.points[i], &g.points[j])).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn random_rotations_are_valid_poses(p in arb_pose()) {
            prop_assert!(p.validate().is_ok());
            prop_assert!(p.inverse().validate().is_ok());
        }
    }
}
