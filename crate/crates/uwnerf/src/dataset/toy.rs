//! Procedural toy scene: a band-limited textured plane photographed from a
//! small camera arc, with exact per-pixel depth and exponential water
//! degradation applied on top.  Because every quantity is analytic, tests
//! get a dataset with reachable, exactly-known ground truth components.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container::Container;
use crate::dataset::{
    synthesize_underwater, Camera, CameraIntrinsics, DegradationParams, Pose, SceneDataset,
    SceneSplit,
};
use crate::geometry::pixel_to_ray;
use crate::{Result, UwError};

/// Configuration of the generated scene.
#[derive(Debug, Clone)]
pub struct ToySceneConfig {
    pub views: usize,
    /// Square image side in pixels; must be a multiple of 16 (backbone
    /// stride).
    pub size: usize,
    /// Texture and camera-wobble seed.
    pub seed: u64,
    pub degradation: DegradationParams,
    pub near: f64,
    pub far: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig {
            views: 8,
            size: 64,
            seed: 7,
            degradation: DegradationParams {
                beta_d: [0.08, 0.12, 0.16],
                beta_b: [0.08, 0.12, 0.16],
                ambient: [0.18, 0.38, 0.45],
            },
            near: 2.8,
            far: 6.5,
        }
    }
}

/// Exact per-view ground truth retained alongside the degraded dataset.
#[derive(Debug, Clone)]
pub struct ToySceneTruth {
    /// Clean (restored) images, `[H, W, 3]`.
    pub clean: Vec<Array3<f64>>,
    /// Ray-travel distance to the plane per pixel, `[H, W]`.
    pub depth: Vec<Array2<f64>>,
    /// Exact direct transmission maps, `[H, W, 3]`.
    pub t_d: Vec<Array3<f64>>,
    /// Exact backscatter transmission maps, `[H, W, 3]`.
    pub t_b: Vec<Array3<f64>>,
    pub params: DegradationParams,
}

/// Distance of the textured plane from the camera arc.
const PLANE_Z: f64 = 4.0;

/// Band-limited plane texture: per channel a constant 0.5 plus four
/// sinusoids whose amplitudes sum to 0.45, keeping values in [0.05, 0.95].
struct PlaneTexture {
    // (amplitude, wave vector x, wave vector y, phase) per channel.
    waves: [[(f64, f64, f64, f64); 4]; 3],
}

impl PlaneTexture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 4]; 3];
        for channel in &mut waves {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (k, slot) in channel.iter_mut().enumerate() {
                let amplitude = 0.45 * raw[k] / total;
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.8..3.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                *slot = (amplitude, freq * angle.cos(), freq * angle.sin(), phase);
            }
        }
        PlaneTexture { waves }
    }

    fn sample(&self, x: f64, y: f64, channel: usize) -> f64 {
        let mut v = 0.5;
        for &(a, wx, wy, phase) in &self.waves[channel] {
            v += a * (wx * x + wy * y + phase).sin();
        }
        v
    }
}

/// World-to-camera rotation looking from `center` toward `target`, with
/// world +y as the "down" reference (camera frame: x right, y down,
/// z forward).
fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Matrix3<f64> {
    let forward = (target - center).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let right = down.cross(&forward).normalize();
    let down_cam = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down_cam.transpose(), forward.transpose()])
}

/// Generates the degraded dataset plus its exact ground truth.
pub fn make_toy_scene(config: &ToySceneConfig) -> Result<(SceneDataset, ToySceneTruth)> {
    if config.views < 2 {
        return Err(UwError::InvalidConfig(format!(
            "toy scene needs at least 2 views, got {}",
            config.views
        )));
    }
    if config.size < 16 || config.size % 16 != 0 {
        return Err(UwError::InvalidConfig(format!(
            "toy image size must be a positive multiple of 16, got {}",
            config.size
        )));
    }
    if !(0.0 < config.near && config.near < config.far) {
        return Err(UwError::InvalidConfig(format!(
            "bad toy depth range [{}, {}]",
            config.near, config.far
        )));
    }
    config.degradation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let texture = PlaneTexture::new(&mut rng);
    let s = config.size;
    let intrinsics = CameraIntrinsics {
        fx: 0.75 * s as f64,
        fy: 0.75 * s as f64,
        cx: (s as f64 - 1.0) / 2.0,
        cy: (s as f64 - 1.0) / 2.0,
        k1: 0.0,
        width: s,
        height: s,
    };
    let target = Vector3::new(0.0, 0.0, PLANE_Z);

    let mut images = Vec::with_capacity(config.views);
    let mut cameras = Vec::with_capacity(config.views);
    let mut view_ids = Vec::with_capacity(config.views);
    let mut clean_all = Vec::with_capacity(config.views);
    let mut depth_all = Vec::with_capacity(config.views);
    let mut td_all = Vec::with_capacity(config.views);
    let mut tb_all = Vec::with_capacity(config.views);

    for vi in 0..config.views {
        // Cameras along a short arc in x with a small vertical wobble.
        let frac = vi as f64 / (config.views - 1) as f64;
        let center = Vector3::new(
            0.5 * (frac - 0.5),
            0.08 * (std::f64::consts::TAU * 1.7 * frac).sin(),
            0.0,
        );
        let rotation = look_at(center, target);
        let pose = Pose {
            rotation,
            translation: -(rotation * center),
        };
        let camera = Camera { intrinsics, pose };

        let mut clean = Array3::<f64>::zeros((s, s, 3));
        let mut depth = Array2::<f64>::zeros((s, s));
        let mut t_d = Array3::<f64>::zeros((s, s, 3));
        let mut t_b = Array3::<f64>::zeros((s, s, 3));
        for py in 0..s {
            for px in 0..s {
                let ray = pixel_to_ray(&camera, Vector2::new(px as f64, py as f64))?;
                // Ray-plane intersection with z = PLANE_Z; all rays look
                // forward (dz > 0) by construction.
                let t = (PLANE_Z - ray.origin.z) / ray.direction.z;
                let hit = ray.at(t);
                depth[[py, px]] = t;
                for c in 0..3 {
                    clean[[py, px, c]] = texture.sample(hit.x, hit.y, c);
                    t_d[[py, px, c]] = (-config.degradation.beta_d[c] * t).exp();
                    t_b[[py, px, c]] = (-config.degradation.beta_b[c] * t).exp();
                }
            }
        }
        let degraded = synthesize_underwater(&clean, &depth, &config.degradation)?;
        images.push(degraded);
        cameras.push(camera);
        view_ids.push(format!("view_{vi:03}.png"));
        clean_all.push(clean);
        depth_all.push(depth);
        td_all.push(t_d);
        tb_all.push(t_b);
    }

    let dataset = SceneDataset {
        images,
        cameras,
        view_ids,
        near: config.near,
        far: config.far,
        split: SceneSplit::Synthetic,
    };
    dataset.validate()?;
    let truth = ToySceneTruth {
        clean: clean_all,
        depth: depth_all,
        t_d: td_all,
        t_b: tb_all,
        params: config.degradation,
    };
    Ok((dataset, truth))
}

#[derive(Serialize, Deserialize)]
struct TruthMeta {
    kind: String,
    views: usize,
    beta_d: [f64; 3],
    beta_b: [f64; 3],
    ambient: [f64; 3],
}

impl ToySceneTruth {
    /// Writes the ground truth to a container archive (exact f64 values).
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TruthMeta {
            kind: "toy-scene-truth".into(),
            views: self.clean.len(),
            beta_d: self.params.beta_d,
            beta_b: self.params.beta_b,
            ambient: self.params.ambient,
        };
        let mut c = Container::new(serde_json::to_string(&meta).expect("meta serializes"));
        for (i, arr) in self.clean.iter().enumerate() {
            c.entries.insert(format!("clean/{i:03}"), arr.clone().into_dyn());
        }
        for (i, arr) in self.depth.iter().enumerate() {
            c.entries.insert(format!("depth/{i:03}"), arr.clone().into_dyn());
        }
        for (i, arr) in self.t_d.iter().enumerate() {
            c.entries.insert(format!("t_d/{i:03}"), arr.clone().into_dyn());
        }
        for (i, arr) in self.t_b.iter().enumerate() {
            c.entries.insert(format!("t_b/{i:03}"), arr.clone().into_dyn());
        }
        c.write(path)
    }

    /// Reads a ground-truth archive written by [`ToySceneTruth::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let meta: TruthMeta = serde_json::from_str(&c.meta).map_err(|e| {
            UwError::InvalidCheckpoint(format!("bad truth metadata: {e}"))
        })?;
        if meta.kind != "toy-scene-truth" {
            return Err(UwError::InvalidCheckpoint(format!(
                "expected a toy-scene-truth archive, got '{}'",
                meta.kind
            )));
        }
        let mut clean = Vec::with_capacity(meta.views);
        let mut depth = Vec::with_capacity(meta.views);
        let mut t_d = Vec::with_capacity(meta.views);
        let mut t_b = Vec::with_capacity(meta.views);
        for i in 0..meta.views {
            let fetch3 = |prefix: &str| -> Result<Array3<f64>> {
                c.require(&format!("{prefix}/{i:03}"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| {
                        UwError::InvalidCheckpoint(format!("{prefix}/{i:03} is not 3-d"))
                    })
            };
            clean.push(fetch3("clean")?);
            t_d.push(fetch3("t_d")?);
            t_b.push(fetch3("t_b")?);
            depth.push(
                c.require(&format!("depth/{i:03}"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| {
                        UwError::InvalidCheckpoint(format!("depth/{i:03} is not 2-d"))
                    })?,
            );
        }
        Ok(ToySceneTruth {
            clean,
            depth,
            t_d,
            t_b,
            params: DegradationParams {
                beta_d: meta.beta_d,
                beta_b: meta.beta_b,
                ambient: meta.ambient,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_passes_dataset_invariants() {
        let (dataset, truth) = make_toy_scene(&ToySceneConfig::default()).unwrap();
        dataset.validate().unwrap();
        assert_eq!(dataset.view_count(), 8);
        assert_eq!(truth.clean.len(), 8);
        assert_eq!(dataset.images[0].shape(), &[64, 64, 3]);
    }

    #[test]
    fn zero_degradation_reproduces_clean_renders() {
        let config = ToySceneConfig {
            degradation: DegradationParams {
                beta_d: [0.0; 3],
                beta_b: [0.0; 3],
                ambient: [0.5; 3],
            },
            views: 3,
            size: 16,
            ..Default::default()
        };
        let (dataset, truth) = make_toy_scene(&config).unwrap();
        for (img, clean) in dataset.images.iter().zip(truth.clean.iter()) {
            assert_eq!(img, clean);
        }
    }

    #[test]
    fn center_pixel_depth_matches_ray_plane_intersection() {
        let (dataset, truth) = make_toy_scene(&ToySceneConfig::default()).unwrap();
        for (cam, depth) in dataset.cameras.iter().zip(truth.depth.iter()) {
            // Independent verification of the intersection property: the
            // point at the stored ray distance must land exactly on the
            // plane (directions are unit, so the distance is Euclidean).
            for (px, py) in [(31, 31), (20, 11), (0, 63)] {
                let ray = pixel_to_ray(cam, Vector2::new(px as f64, py as f64)).unwrap();
                let hit = ray.at(depth[[py, px]]);
                assert!(
                    (hit.z - PLANE_Z).abs() < 1e-9,
                    "pixel ({px},{py}): hit z {} off the plane",
                    hit.z
                );
                assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            }
            // Near the principal point the depth approximates the straight
            // camera-to-anchor distance.  The nearest integer pixel sits
            // half a pixel off-axis and the plane is tilted relative to
            // the view direction, so the gap is first-order:
            // ~ t * tan(tilt) * (0.5 px / f) ~ 3e-3.
            let center = cam.pose.center();
            let analytic = (Vector3::new(0.0, 0.0, PLANE_Z) - center).norm();
            assert!(
                (depth[[31, 31]] - analytic).abs() < 6e-3,
                "depth {} vs axis distance {analytic}",
                depth[[31, 31]]
            );
        }
    }

    #[test]
    fn texture_values_stay_in_safe_range() {
        let (_, truth) = make_toy_scene(&ToySceneConfig::default()).unwrap();
        for clean in &truth.clean {
            for &v in clean.iter() {
                assert!((0.05..=0.95).contains(&v), "texture value {v}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let (a, _) = make_toy_scene(&ToySceneConfig::default()).unwrap();
        let (b, _) = make_toy_scene(&ToySceneConfig::default()).unwrap();
        for (ia, ib) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(ia, ib);
        }
        let mut other = ToySceneConfig::default();
        other.seed += 1;
        let (c, _) = make_toy_scene(&other).unwrap();
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn too_few_views_or_bad_size_rejected() {
        let mut cfg = ToySceneConfig {
            views: 1,
            ..Default::default()
        };
        assert!(make_toy_scene(&cfg).is_err());
        cfg.views = 4;
        cfg.size = 40;
        assert!(make_toy_scene(&cfg).is_err());
    }

    #[test]
    fn truth_archive_roundtrips_exactly() {
        let (_, truth) = make_toy_scene(&ToySceneConfig {
            views: 2,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.uwnc");
        truth.save(&path).unwrap();
        let back = ToySceneTruth::load(&path).unwrap();
        assert_eq!(back.clean.len(), truth.clean.len());
        for i in 0..truth.clean.len() {
            assert_eq!(back.clean[i], truth.clean[i]);
            assert_eq!(back.depth[i], truth.depth[i]);
            assert_eq!(back.t_d[i], truth.t_d[i]);
            assert_eq!(back.t_b[i], truth.t_b[i]);
        }
    }
}
