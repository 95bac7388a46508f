//! Camera and ray math: pixel-to-ray casting, depth sampling along rays,
//! projection of sample points into source views, and nearest-view
//! selection.
//!
//! Conventions (fixed crate-wide): integer pixel coordinates address pixel
//! centers; the camera frame is x-right, y-down, z-forward; poses map world
//! to camera as `x_cam = R x + t`.

use nalgebra::{Vector2, Vector3};
use rand::Rng;

use crate::dataset::{Camera, Pose};
use crate::{Result, UwError};

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing the direction.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(UwError::Render(format!(
                "degenerate ray direction {direction:?}"
            )));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
        })
    }

    /// Point at parameter `t` along the ray.
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Depths and world positions of the sample points of one ray.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Pixel coordinates (meaningful only when `in_front` is true).
    pub pixel: Vector2<f64>,
    /// Camera-frame depth along the optical axis.
    pub depth: f64,
    /// False when the point lies at or behind the camera plane.
    pub in_front: bool,
}

impl Projection {
    /// True when the projection is in front and lands inside the image
    /// rectangle spanned by the outermost pixel centers.
    pub fn in_image(&self, camera: &Camera) -> bool {
        self.in_front
            && self.pixel.x >= 0.0
            && self.pixel.x <= (camera.intrinsics.width - 1) as f64
            && self.pixel.y >= 0.0
            && self.pixel.y <= (camera.intrinsics.height - 1) as f64
    }
}

/// Casts the ray through a pixel (center convention) of a posed camera.
/// The pixel is undistorted first, so `project` composed with this is the
/// identity on pixels.
pub fn pixel_to_ray(camera: &Camera, pixel: Vector2<f64>) -> Result<Ray> {
    let intr = &camera.intrinsics;
    let ideal = intr.undistort_pixel(pixel)?;
    let xn = (ideal.x - intr.cx) / intr.fx;
    let yn = (ideal.y - intr.cy) / intr.fy;
    let dir_cam = Vector3::new(xn, yn, 1.0);
    let dir_world = camera.pose.rotation.transpose() * dir_cam;
    Ray::new(camera.pose.center(), dir_world)
}

/// Projects a world point into a camera: world-to-camera transform,
/// perspective divide, radial distortion, intrinsics.  Points at or behind
/// the camera plane (depth <= 1e-8) return `in_front = false` with a zero
/// pixel; callers must gate on the flag.
pub fn project(camera: &Camera, point: Vector3<f64>) -> Projection {
    let p_cam = camera.pose.world_to_camera(point);
    let depth = p_cam.z;
    if depth <= 1e-8 {
        return Projection {
            pixel: Vector2::zeros(),
            depth,
            in_front: false,
        };
    }
    let intr = &camera.intrinsics;
    let (xd, yd) = intr.distort_normalized(p_cam.x / depth, p_cam.y / depth);
    Projection {
        pixel: Vector2::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy),
        depth,
        in_front: true,
    }
}

/// Samples `m` depths in `[t_near, t_far]` along a ray.
///
/// Deterministic mode places an inclusive arithmetic progression
/// `t_j = t_near + j/(m-1) * (t_far - t_near)` (the single sample of
/// `m = 1` sits at the interval midpoint).  Stratified mode draws one
/// uniform sample per equal-width bin, which is strictly increasing by
/// construction.
pub fn sample_along_ray(
    ray: &Ray,
    t_near: f64,
    t_far: f64,
    m: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    if m == 0 {
        return Err(UwError::Render("sample_along_ray: M = 0".into()));
    }
    if !(0.0 < t_near && t_near < t_far) {
        return Err(UwError::Render(format!(
            "sample_along_ray: bad depth range [{t_near}, {t_far}]"
        )));
    }
    let span = t_far - t_near;
    let depths: Vec<f64> = if stratified {
        let w = span / m as f64;
        (0..m)
            .map(|j| t_near + (j as f64 + rng.random_range(0.0..1.0)) * w)
            .collect()
    } else if m == 1 {
        vec![t_near + 0.5 * span]
    } else {
        (0..m)
            .map(|j| t_near + span * j as f64 / (m - 1) as f64)
            .collect()
    };
    let positions = depths.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples { depths, positions })
}

/// Nearness score of a candidate view relative to the target: primary key
/// is the angle between optical axes, tie-broken by camera-center distance.
pub(crate) fn nearness(target: &Pose, candidate: &Pose) -> (f64, f64) {
    let cos = target
        .optical_axis()
        .dot(&candidate.optical_axis())
        .clamp(-1.0, 1.0);
    let angle = cos.acos();
    let dist = (target.center() - candidate.center()).norm();
    (angle, dist)
}

/// Picks `n` source views for a target pose: the `k * n` nearest candidates
/// form a pool (all candidates when fewer), from which `n` are drawn
/// uniformly without replacement.  `exclude` removes the target's own index
/// from the candidate list.
pub fn select_source_views(
    target: &Pose,
    views: &[Pose],
    exclude: Option<usize>,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(UwError::InvalidConfig("select_source_views: N = 0".into()));
    }
    let mut candidates: Vec<usize> = (0..views.len())
        .filter(|&i| Some(i) != exclude)
        .collect();
    if n > candidates.len() {
        return Err(UwError::InvalidConfig(format!(
            "requested {n} source views, only {} available",
            candidates.len()
        )));
    }
    // Deterministic ranking: score, then index as the final tie-break.
    candidates.sort_by(|&a, &b| {
        let (sa, sb) = (nearness(target, &views[a]), nearness(target, &views[b]));
        sa.partial_cmp(&sb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let pool_size = (k.max(1) * n).min(candidates.len());
    let mut pool: Vec<usize> = candidates[..pool_size].to_vec();
    // Partial Fisher-Yates: the first n slots become the draw.
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CameraIntrinsics;
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basic_camera() -> Camera {
        Camera {
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                k1: 0.0,
                width: 640,
                height: 480,
            },
            pose: Pose::identity(),
        }
    }

    /// Rotation about the y-axis by `a` radians, as a world-to-camera map.
    fn rot_y(a: f64) -> Matrix3<f64> {
        Matrix3::new(
            a.cos(),
            0.0,
            a.sin(),
            0.0,
            1.0,
            0.0,
            -a.sin(),
            0.0,
            a.cos(),
        )
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = basic_camera();
        let ray = pixel_to_ray(&cam, Vector2::new(320.0, 240.0)).unwrap();
        assert!((ray.direction - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!(ray.origin.norm() < 1e-12);
    }

    #[test]
    fn off_axis_ray_direction_matches_hand_computation() {
        // (u - cx)/fx = 100/500 = 0.2, so direction ~ (0.2, 0, 1) normalized.
        let cam = basic_camera();
        let ray = pixel_to_ray(&cam, Vector2::new(420.0, 240.0)).unwrap();
        let want = Vector3::new(0.2, 0.0, 1.0).normalize();
        assert!((ray.direction - want).norm() < 1e-12, "{:?}", ray.direction);
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let cam = basic_camera();
        let p = project(&cam, Vector3::new(0.0, 0.0, 2.0));
        assert!(p.in_front);
        assert!((p.depth - 2.0).abs() < 1e-12);
        assert!((p.pixel - Vector2::new(320.0, 240.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = basic_camera();
        let p = project(&cam, Vector3::new(0.3, -0.2, -1.0));
        assert!(!p.in_front);
    }

    #[test]
    fn ray_projects_back_to_pixel_at_several_depths() {
        let mut cam = basic_camera();
        cam.intrinsics.k1 = 0.03;
        cam.pose = Pose {
            rotation: rot_y(0.3),
            translation: Vector3::new(0.2, -0.1, 0.5),
        };
        let pixel = Vector2::new(123.0, 321.0);
        let ray = pixel_to_ray(&cam, pixel).unwrap();
        for t in [0.8, 2.4, 4.0] {
            let p = project(&cam, ray.at(t));
            assert!(p.in_front);
            assert!(
                (p.pixel - pixel).norm() < 1e-6,
                "t={t}: {:?} vs {pixel:?}",
                p.pixel
            );
        }
    }

    #[test]
    fn projected_point_lies_on_recovered_ray() {
        // Independent check: distance from the original point to the ray
        // recovered from its projection, via the cross-product formula.
        let mut cam = basic_camera();
        cam.intrinsics.k1 = -0.02;
        cam.pose = Pose {
            rotation: rot_y(-0.2),
            translation: Vector3::new(-0.4, 0.3, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(2.0..5.0),
            );
            let p = project(&cam, x);
            if !p.in_image(&cam) {
                continue;
            }
            let ray = pixel_to_ray(&cam, p.pixel).unwrap();
            let dist = (x - ray.origin).cross(&ray.direction).norm();
            assert!(dist < 1e-6, "point-to-ray distance {dist}");
        }
    }

    #[test]
    fn deterministic_sampling_is_an_inclusive_progression() {
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_along_ray(&ray, 1.0, 3.0, 5, false, &mut rng).unwrap();
        assert_eq!(s.depths, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        let two = sample_along_ray(&ray, 1.0, 3.0, 2, false, &mut rng).unwrap();
        assert_eq!(two.depths, vec![1.0, 3.0]);
        let one = sample_along_ray(&ray, 1.0, 3.0, 1, false, &mut rng).unwrap();
        assert_eq!(one.depths, vec![2.0]);
    }

    #[test]
    fn stratified_sampling_stays_sorted_and_bounded() {
        let ray = Ray::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.3, -0.2, 0.9)).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_along_ray(&ray, 0.5, 6.5, 192, true, &mut rng).unwrap();
            assert_eq!(s.len(), 192);
            for j in 0..s.len() {
                assert!(s.depths[j] >= 0.5 && s.depths[j] <= 6.5);
                if j > 0 {
                    assert!(s.depths[j] > s.depths[j - 1], "not strictly increasing");
                }
                let err = (s.positions[j] - ray.at(s.depths[j])).norm();
                assert!(err < 1e-9);
            }
        }
    }

    #[test]
    fn zero_samples_is_an_error() {
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_along_ray(&ray, 1.0, 2.0, 0, false, &mut rng).is_err());
    }

    /// Poses looking inward from a circle, used by the selection tests.
    fn circle_poses(count: usize) -> Vec<Pose> {
        (0..count)
            .map(|i| {
                let a = i as f64 / count as f64 * std::f64::consts::TAU * 0.25;
                Pose {
                    rotation: rot_y(a),
                    translation: Vector3::new(0.1 * i as f64, 0.0, 1.0),
                }
            })
            .collect()
    }

    #[test]
    fn degenerate_pool_returns_exactly_the_nearest() {
        let poses = circle_poses(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let picked =
            select_source_views(&poses[0], &poses, Some(0), 1, 3, &mut rng).unwrap();
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        // Smallest angular distance to pose 0 is poses 1, 2, 3.
        assert_eq!(sorted, vec![1, 2, 3]);
    }

    #[test]
    fn sampled_views_come_from_the_nearest_pool() {
        let poses = circle_poses(10);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked =
                select_source_views(&poses[0], &poses, Some(0), 2, 3, &mut rng).unwrap();
            assert_eq!(picked.len(), 3);
            for &i in &picked {
                // Pool of 2*3 nearest excluding the target: indices 1..=6.
                assert!((1..=6).contains(&i), "index {i} outside pool");
                assert_ne!(i, 0, "target view returned");
            }
            let mut dedup = picked.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), 3, "repeated index in {picked:?}");
        }
    }

    #[test]
    fn all_views_returned_when_pool_is_everything() {
        let poses = circle_poses(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut picked =
            select_source_views(&poses[1], &poses, Some(1), 5, 3, &mut rng).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 2, 3]);
    }

    #[test]
    fn too_many_requested_views_is_an_error() {
        let poses = circle_poses(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(select_source_views(&poses[0], &poses, Some(0), 1, 3, &mut rng).is_err());
    }

    #[test]
    fn undistort_roundtrip_at_moderate_k1() {
        let mut intr = basic_camera().intrinsics;
        intr.k1 = 0.05;
        let ideal = Vector2::new(400.0, 300.0);
        // Forward-distort the ideal pixel, then invert.
        let xn = (ideal.x - intr.cx) / intr.fx;
        let yn = (ideal.y - intr.cy) / intr.fy;
        let (xd, yd) = intr.distort_normalized(xn, yn);
        let observed = Vector2::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy);
        let recovered = intr.undistort_pixel(observed).unwrap();
        assert!((recovered - ideal).norm() < 1e-6, "{recovered:?}");
    }

    #[test]
    fn undistort_identity_cases() {
        let intr = basic_camera().intrinsics;
        let px = Vector2::new(17.0, 451.0);
        assert_eq!(intr.undistort_pixel(px).unwrap(), px);
        let mut k = intr;
        k.k1 = 0.04;
        let pp = Vector2::new(intr.cx, intr.cy);
        assert!((k.undistort_pixel(pp).unwrap() - pp).norm() < 1e-12);
    }
}
