//! Cameras, rays, rigid transforms, strided pixel patches, and pose sampling.
//!
//! Conventions used throughout the crate:
//! - Poses are camera-to-world with the camera looking down its local `-z`
//!   axis, `x` right, `y` up (synthetic-renderer convention; loaders convert).
//! - Pixel `(u, v)` has `u` growing rightwards and `v` downwards; rays pass
//!   through the pixel center `(u + 0.5, v + 0.5)`.
//! - Depth is the distance along the optical axis (`-z` in the camera frame).

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Validation(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Camera-frame point for pixel `(u, v)` at axial depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let x = (u + 0.5 - self.cx) * depth / self.fx;
        let y = -(v + 0.5 - self.cy) * depth / self.fy;
        Vector3::new(x, y, -depth)
    }

    /// Continuous pixel coordinates and axial depth of a camera-frame point.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let depth = -p.z;
        if depth <= 0.0 {
            return None;
        }
        let u = p.x * self.fx / depth + self.cx - 0.5;
        let v = -p.y * self.fy / depth + self.cy - 0.5;
        Some((u, v, depth))
    }
}

/// Camera-to-world rigid pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let gram = r.transpose() * r;
    let dev = (gram - Matrix3::identity()).abs().max();
    if dev > ORTHONORMAL_TOL {
        return Err(Error::Validation(format!(
            "rotation is not orthonormal (max deviation {dev:.3e})"
        )));
    }
    if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::Validation(format!(
            "rotation determinant {} is not +1",
            r.determinant()
        )));
    }
    Ok(())
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(CameraPose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn camera_to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    pub fn world_to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// Pose rotated by `offset` expressed in this camera's local axes; the
    /// camera center is unchanged.
    pub fn rotated_local(&self, offset: &Matrix3<f64>) -> Result<Self> {
        CameraPose::new(self.rotation * offset, self.translation)
    }

    /// Pose transformed by a rotation about the world origin.
    pub fn rotated_world(&self, rotation: &Matrix3<f64>) -> Result<Self> {
        CameraPose::new(rotation * self.rotation, rotation * self.translation)
    }
}

/// Maps points expressed in one camera frame into another camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, inner: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }
}

/// Transform taking points in `src`'s camera frame to `dst`'s camera frame.
pub fn relative_transform(src: &CameraPose, dst: &CameraPose) -> RigidTransform {
    let rotation = dst.rotation.transpose() * src.rotation;
    let translation = dst.rotation.transpose() * (src.translation - dst.translation);
    RigidTransform {
        rotation,
        translation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "ray direction must be unit length, |d| = {}",
                direction.norm()
            )));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::Domain(format!(
                "require 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// World-space ray through the center of pixel `(u, v)`.
pub fn generate_ray(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    pixel: (f64, f64),
    bounds: (f64, f64),
) -> Result<Ray> {
    let (u, v) = pixel;
    if !intr.contains(u, v) {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let d_cam = Vector3::new(
        (u + 0.5 - intr.cx) / intr.fx,
        -(v + 0.5 - intr.cy) / intr.fy,
        -1.0,
    );
    let d_world = (pose.rotation * d_cam).normalize();
    Ray::new(pose.translation, d_world, bounds.0, bounds.1)
}

/// A strided grid of pixel coordinates: `(u + s*x, v + s*y)` for
/// `x in 0..cols`, `y in 0..rows`, listed row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPatch {
    pub u: u32,
    pub v: u32,
    pub stride: u32,
    pub rows: u32,
    pub cols: u32,
}

impl PixelPatch {
    pub fn new(
        u: u32,
        v: u32,
        stride: u32,
        rows: u32,
        cols: u32,
        image_size: (u32, u32),
    ) -> Result<Self> {
        if stride < 1 || rows < 1 || cols < 1 {
            return Err(Error::Domain(format!(
                "stride and patch extents must be >= 1, got s={stride}, {rows}x{cols}"
            )));
        }
        let (width, height) = image_size;
        let max_u = u as u64 + stride as u64 * (cols as u64 - 1);
        let max_v = v as u64 + stride as u64 * (rows as u64 - 1);
        if max_u >= width as u64 || max_v >= height as u64 {
            return Err(Error::Domain(format!(
                "patch footprint {}x{} anchored at ({u}, {v}) exceeds {width}x{height} image",
                max_u - u as u64 + 1,
                max_v - v as u64 + 1,
            )));
        }
        Ok(PixelPatch {
            u,
            v,
            stride,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major pixel coordinates of the patch.
    pub fn coords(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let (u0, v0, s) = (self.u, self.v, self.stride);
        let cols = self.cols;
        (0..self.rows).flat_map(move |y| (0..cols).map(move |x| (u0 + s * x, v0 + s * y)))
    }
}

/// Square `k x k` patch of stride `s` anchored at `(u, v)`.
pub fn strided_patch(u: u32, v: u32, s: u32, k: u32, image_size: (u32, u32)) -> Result<PixelPatch> {
    PixelPatch::new(u, v, s, k, k, image_size)
}

/// Signed rotation offsets (radians) about a reference camera's local axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerOffset {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

impl EulerOffset {
    pub fn new(alpha: f64, beta: f64, phi: f64) -> Result<Self> {
        for (name, a) in [("alpha", alpha), ("beta", beta), ("phi", phi)] {
            if !a.is_finite() || a.abs() > std::f64::consts::PI {
                return Err(Error::Validation(format!(
                    "angle {name}={a} must be finite with |angle| <= pi"
                )));
            }
        }
        Ok(EulerOffset { alpha, beta, phi })
    }

    /// Composition order is fixed: rotate about x first, then y, then z.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rot_z(self.phi) * rot_y(self.beta) * rot_x(self.alpha)
    }
}

/// Draws Euler offsets from `N(0, omega^2)` per axis and applies them in the
/// reference camera's local frame. The camera center is unchanged.
pub fn sample_unseen_pose<R: Rng + ?Sized>(
    reference: &CameraPose,
    omega: f64,
    rng: &mut R,
) -> Result<CameraPose> {
    if omega < 0.0 {
        return Err(Error::Domain(format!("omega must be >= 0, got {omega}")));
    }
    if omega == 0.0 {
        return Ok(reference.clone());
    }
    let normal = Normal::new(0.0, omega)
        .map_err(|e| Error::Domain(format!("invalid gaussian width {omega}: {e}")))?;
    let alpha = normal.sample(rng);
    let beta = normal.sample(rng);
    let phi = normal.sample(rng);
    let offset = EulerOffset { alpha, beta, phi };
    reference.rotated_local(&offset.rotation_matrix())
}

/// How unseen training views are drawn.
#[derive(Debug, Clone)]
pub enum PoseStrategy {
    /// Gaussian Euler offsets around the reference with the given width.
    Gaussian { omega: f64 },
    /// Uniform draw from a fixed camera pool.
    Pool(Vec<CameraPose>),
}

pub fn sample_dataset_pose<R: Rng + ?Sized>(
    strategy: &PoseStrategy,
    reference: &CameraPose,
    rng: &mut R,
) -> Result<CameraPose> {
    match strategy {
        PoseStrategy::Gaussian { omega } => sample_unseen_pose(reference, *omega, rng),
        PoseStrategy::Pool(pool) => {
            if pool.is_empty() {
                return Err(Error::Config("camera pool is empty".into()));
            }
            Ok(pool[rng.gen_range(0..pool.len())].clone())
        }
    }
}

/// Geodesic angle between two rotations.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn intr100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let ray = generate_ray(&intr100(), &CameraPose::identity(), (49.5, 49.5), (0.1, 10.0))
            .unwrap();
        assert_eq!(ray.origin, Vector3::zeros());
        assert!((ray.direction - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn pinhole_ray_matches_hand_model() {
        // u + 0.5 - cx = 50 => x-slope 0.5, expected direction (0.5, 0, -1) normalized.
        let ray = generate_ray(&intr100(), &CameraPose::identity(), (99.5, 49.5), (0.1, 10.0))
            .unwrap();
        let expected = Vector3::new(0.5, 0.0, -1.0).normalize();
        assert!((ray.direction - expected).norm() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_domain_error() {
        let err = generate_ray(&intr100(), &CameraPose::identity(), (-1.0, 0.0), (0.1, 10.0))
            .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let err = CameraPose::new(Matrix3::identity() * 2.0, Vector3::zeros()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let reflected = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(reflected, Vector3::zeros()).is_err());
    }

    #[test]
    fn relative_transform_of_identical_poses_is_identity() {
        let pose = CameraPose::new(rot_y(0.3) * rot_x(-0.2), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let rel = relative_transform(&pose, &pose);
        assert!((rel.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(rel.translation.norm() < 1e-12);
    }

    #[test]
    fn relative_translation_along_source_axis() {
        // dst is src shifted +0.5 along src's local x axis; src-frame points
        // land 0.5 lower on x in the dst frame.
        let src = CameraPose::new(rot_z(0.7), Vector3::new(0.3, -0.1, 2.0)).unwrap();
        let axis_x = src.rotation() * Vector3::new(0.5, 0.0, 0.0);
        let dst = CameraPose::new(*src.rotation(), src.center() + axis_x).unwrap();
        let rel = relative_transform(&src, &dst);
        assert!((rel.translation - Vector3::new(-0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((rel.rotation - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn relative_transform_round_trip_is_identity() {
        let a = CameraPose::new(rot_x(0.4) * rot_z(-1.1), Vector3::new(1.0, -2.0, 0.5)).unwrap();
        let b = CameraPose::new(rot_y(2.0), Vector3::new(-3.0, 0.0, 1.5)).unwrap();
        let ab = relative_transform(&a, &b);
        let ba = relative_transform(&b, &a);
        let round = ab.compose(&ba);
        assert!((round.rotation - Matrix3::identity()).abs().max() < 1e-6);
        assert!(round.translation.norm() < 1e-6);
        let p = Vector3::new(0.2, 0.4, -1.0);
        assert!((ba.apply(&ab.apply(&p)) - p).norm() < 1e-9);
    }

    #[test]
    fn strided_patch_expands_row_major() {
        let patch = strided_patch(2, 3, 2, 3, (20, 20)).unwrap();
        let coords: Vec<_> = patch.coords().collect();
        assert_eq!(
            coords,
            vec![
                (2, 3),
                (4, 3),
                (6, 3),
                (2, 5),
                (4, 5),
                (6, 5),
                (2, 7),
                (4, 7),
                (6, 7)
            ]
        );
    }

    #[test]
    fn unit_stride_patch_is_contiguous() {
        let patch = strided_patch(5, 6, 1, 4, (64, 64)).unwrap();
        let coords: Vec<_> = patch.coords().collect();
        assert_eq!(coords.len(), 16);
        assert_eq!(coords[0], (5, 6));
        assert_eq!(coords[15], (8, 9));
    }

    #[test]
    fn patch_footprint_overflow_is_domain_error() {
        // stride 6, k 64 needs a 6*63+1 = 379 pixel footprint.
        let err = strided_patch(0, 0, 6, 64, (378, 504)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(strided_patch(0, 0, 6, 64, (379, 504)).is_ok());
    }

    #[test]
    fn zero_width_pose_sampling_returns_reference() {
        let reference = CameraPose::new(rot_y(0.5), Vector3::new(0.0, 1.0, 4.0)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let pose = sample_unseen_pose(&reference, 0.0, &mut rng).unwrap();
        assert_eq!(pose, reference);
        assert!(sample_unseen_pose(&reference, -0.1, &mut rng).is_err());
    }

    #[test]
    fn fixed_euler_draw_matches_rotation_oracle() {
        let reference = CameraPose::new(rot_z(0.4), Vector3::new(1.0, 0.0, -1.0)).unwrap();
        let offset = EulerOffset::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0).unwrap();
        let pose = reference.rotated_local(&offset.rotation_matrix()).unwrap();
        let expected = reference.rotation() * rot_x(std::f64::consts::FRAC_PI_2);
        assert!((pose.rotation() - expected).abs().max() < 1e-12);
        assert_eq!(pose.center(), reference.center());
    }

    #[test]
    fn pose_sampling_is_deterministic_per_seed() {
        let reference = CameraPose::identity();
        let a = sample_unseen_pose(&reference, 0.2, &mut ChaCha20Rng::seed_from_u64(99)).unwrap();
        let b = sample_unseen_pose(&reference, 0.2, &mut ChaCha20Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        let c = sample_unseen_pose(&reference, 0.2, &mut ChaCha20Rng::seed_from_u64(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pool_sampling_is_reproducible_and_validates() {
        let reference = CameraPose::identity();
        let pool = vec![
            CameraPose::new(rot_x(0.1), Vector3::zeros()).unwrap(),
            CameraPose::new(rot_x(0.2), Vector3::zeros()).unwrap(),
            CameraPose::new(rot_x(0.3), Vector3::zeros()).unwrap(),
        ];
        let strategy = PoseStrategy::Pool(pool.clone());
        let seq_a: Vec<_> = {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            (0..10)
                .map(|_| sample_dataset_pose(&strategy, &reference, &mut rng).unwrap())
                .collect()
        };
        let seq_b: Vec<_> = {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            (0..10)
                .map(|_| sample_dataset_pose(&strategy, &reference, &mut rng).unwrap())
                .collect()
        };
        assert_eq!(seq_a, seq_b);

        let single = PoseStrategy::Pool(vec![pool[1].clone()]);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..5 {
            assert_eq!(
                sample_dataset_pose(&single, &reference, &mut rng).unwrap(),
                pool[1]
            );
        }

        let empty = PoseStrategy::Pool(vec![]);
        assert!(matches!(
            sample_dataset_pose(&empty, &reference, &mut rng),
            Err(Error::Config(_))
        ));

        let gaussian = PoseStrategy::Gaussian { omega: 0.0 };
        assert_eq!(
            sample_dataset_pose(&gaussian, &reference, &mut rng).unwrap(),
            reference
        );
    }

    #[test]
    fn rotations_stay_orthonormal_under_composition() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut pose = CameraPose::identity();
        for _ in 0..500 {
            pose = sample_unseen_pose(&pose, 0.3, &mut rng).unwrap();
        }
        let gram = pose.rotation().transpose() * pose.rotation();
        assert!((gram - Matrix3::identity()).abs().max() < 1e-6);
    }

    #[test]
    fn ray_directions_are_unit_norm_everywhere() {
        let intr = CameraIntrinsics::new(320.0, 300.0, 200.5, 150.2, 400, 300).unwrap();
        let pose = CameraPose::new(rot_y(1.0) * rot_x(0.3), Vector3::new(2.0, -1.0, 5.0)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let u = rng.gen_range(0.0..400.0);
            let v = rng.gen_range(0.0..300.0);
            let ray = generate_ray(&intr, &pose, (u, v), (0.5, 6.0)).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn project_unproject_recovers_pixel_center() {
        let intr = CameraIntrinsics::new(310.0, 290.0, 199.5, 149.5, 400, 300).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let u = rng.gen_range(0..400) as f64;
            let v = rng.gen_range(0..300) as f64;
            let depth = rng.gen_range(0.2..50.0);
            let p = intr.unproject(u, v, depth);
            let (u2, v2, d2) = intr.project(&p).unwrap();
            assert!((u2 - u).abs() < 1e-4, "u {u} vs {u2}");
            assert!((v2 - v).abs() < 1e-4, "v {v} vs {v2}");
            assert!((d2 - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn small_omega_stays_near_reference() {
        let reference = CameraPose::identity();
        let omega = 1e-3;
        let mut total = 0.0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let pose = sample_unseen_pose(&reference, omega, &mut rng).unwrap();
            total += rotation_distance(reference.rotation(), pose.rotation());
        }
        let mean = total / 1000.0;
        // E[angle] ~ 1.6 * omega for three independent N(0, omega^2) draws.
        assert!(mean < omega * 4.0, "mean rotation distance {mean}");
    }

    proptest! {
        #[test]
        fn patch_cardinality_and_uniqueness(
            u in 0u32..40,
            v in 0u32..40,
            s in 1u32..5,
            rows in 1u32..8,
            cols in 1u32..8,
        ) {
            let patch = PixelPatch::new(u, v, s, rows, cols, (128, 128)).unwrap();
            let coords: Vec<_> = patch.coords().collect();
            prop_assert_eq!(coords.len(), (rows * cols) as usize);
            let mut dedup = coords.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), coords.len());
            for &(cu, cv) in &coords {
                prop_assert!(cu < 128 && cv < 128);
                prop_assert_eq!((cu - u) % s, 0);
                prop_assert_eq!((cv - v) % s, 0);
            }
        }
    }
}
