//! Posed multi-view datasets: camera types, COLMAP text I/O, scene
//! loading, the synthetic water degradation model and the procedural toy
//! scene used by the desk-scale tests.

mod colmap;
mod scene;
mod synth;
mod toy;

pub use colmap::{parse_colmap, pose_distance, serialize_colmap, ColmapEntry};
pub use scene::{load_scene, save_scene, SceneConfig};
pub(crate) use scene::png_name;
pub use synth::synthesize_underwater;
pub use toy::{make_toy_scene, ToySceneConfig, ToySceneTruth};

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array3;

use crate::{Result, UwError};

/// Pinhole intrinsics with a single radial distortion coefficient
/// (COLMAP's SIMPLE_RADIAL model, which uses one shared focal length; we
/// keep fx/fy separate for generality and write fx = fy = f on ingest).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Checks the structural invariants (positive focals, principal point
    /// inside the image).
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(UwError::InvalidCamera(format!(
                "nonpositive focal length ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(UwError::InvalidCamera("empty image".into()));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(UwError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !self.k1.is_finite() {
            return Err(UwError::InvalidCamera("non-finite distortion".into()));
        }
        Ok(())
    }

    /// Applies radial distortion to normalized camera coordinates.
    pub fn distort_normalized(&self, xn: f64, yn: f64) -> (f64, f64) {
        let r2 = xn * xn + yn * yn;
        let f = 1.0 + self.k1 * r2;
        (xn * f, yn * f)
    }

    /// Inverts [`Self::distort_normalized`] by fixed-point iteration, to a
    /// reprojection residual below 1e-8 pixels.
    pub fn undistort_normalized(&self, xd: f64, yd: f64) -> Result<(f64, f64)> {
        if self.k1 == 0.0 {
            return Ok((xd, yd));
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..50 {
            let r2 = x * x + y * y;
            let f = 1.0 + self.k1 * r2;
            // Residual of the forward model, in pixel units.
            let rx = (x * f - xd) * self.fx;
            let ry = (y * f - yd) * self.fy;
            if rx.abs() < 1e-8 && ry.abs() < 1e-8 {
                return Ok((x, y));
            }
            x = xd / f;
            y = yd / f;
        }
        Err(UwError::InvalidCamera(format!(
            "undistortion did not converge (k1 = {})",
            self.k1
        )))
    }

    /// Maps an observed (distorted) pixel to the ideal pinhole pixel.
    /// With `k1 = 0` this is the identity.
    pub fn undistort_pixel(&self, observed: Vector2<f64>) -> Result<Vector2<f64>> {
        let xd = (observed.x - self.cx) / self.fx;
        let yd = (observed.y - self.cy) / self.fy;
        let (xn, yn) = self.undistort_normalized(xd, yd)?;
        Ok(Vector2::new(self.fx * xn + self.cx, self.fy * yn + self.cy))
    }
}

/// Rigid world-to-camera transform: `x_cam = R x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Identity pose (camera at the origin, looking down +z).
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks orthonormality and determinant +1 to 1e-6.
    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(UwError::InvalidCamera(format!(
                "rotation not orthonormal (max deviation {err:.2e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(UwError::InvalidCamera(format!(
                "rotation determinant {det} != 1"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(UwError::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `C = -R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// The camera's forward (optical-axis) direction in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// World point to camera frame.
    pub fn world_to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera-frame point to world.
    pub fn camera_to_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// A posed camera: intrinsics plus world-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()
    }
}

/// Exponential degradation parameters for the synthetic water model:
/// direct transmission `exp(-beta_D z)`, backscatter `1 - exp(-beta_B z)`
/// toward the ambient color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationParams {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub ambient: [f64; 3],
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !(self.beta_d[c] >= 0.0 && self.beta_d[c].is_finite()) {
                return Err(UwError::InvalidConfig(format!(
                    "beta_d[{c}] = {} out of range",
                    self.beta_d[c]
                )));
            }
            if !(self.beta_b[c] >= 0.0 && self.beta_b[c].is_finite()) {
                return Err(UwError::InvalidConfig(format!(
                    "beta_b[{c}] = {} out of range",
                    self.beta_b[c]
                )));
            }
            if !(0.0..=1.0).contains(&self.ambient[c]) {
                return Err(UwError::InvalidConfig(format!(
                    "ambient[{c}] = {} outside [0,1]",
                    self.ambient[c]
                )));
            }
        }
        Ok(())
    }
}

/// A loaded multi-view scene.  Images are `[H, W, 3]` arrays in `[0,1]`;
/// `view_ids` are the stable (filename-derived) identifiers.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub images: Vec<Array3<f64>>,
    pub cameras: Vec<Camera>,
    pub view_ids: Vec<String>,
    pub near: f64,
    pub far: f64,
    pub split: SceneSplit,
}

/// Difficulty/provenance label of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneSplit {
    Easy,
    Medium,
    Hard,
    Synthetic,
}

impl SceneSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(SceneSplit::Easy),
            "medium" => Ok(SceneSplit::Medium),
            "hard" => Ok(SceneSplit::Hard),
            "synthetic" => Ok(SceneSplit::Synthetic),
            other => Err(UwError::InvalidScene(format!("unknown split '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SceneSplit::Easy => "easy",
            SceneSplit::Medium => "medium",
            SceneSplit::Hard => "hard",
            SceneSplit::Synthetic => "synthetic",
        }
    }
}

impl SceneDataset {
    /// Checks the container invariants: matching lengths, at least two
    /// views, sane depth range, pixel values in `[0,1]`.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.cameras.len() || self.images.len() != self.view_ids.len() {
            return Err(UwError::InvalidScene(format!(
                "length mismatch: {} images, {} cameras, {} ids",
                self.images.len(),
                self.cameras.len(),
                self.view_ids.len()
            )));
        }
        if self.images.len() < 2 {
            return Err(UwError::InvalidScene(format!(
                "need at least 2 views, got {}",
                self.images.len()
            )));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(UwError::InvalidScene(format!(
                "bad depth range [{}, {}]",
                self.near, self.far
            )));
        }
        for (i, (img, cam)) in self.images.iter().zip(self.cameras.iter()).enumerate() {
            cam.validate()?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            if img.shape()[2] != 3 {
                return Err(UwError::InvalidScene(format!(
                    "view {i}: expected 3 channels, got {}",
                    img.shape()[2]
                )));
            }
            if h != cam.intrinsics.height || w != cam.intrinsics.width {
                return Err(UwError::InvalidScene(format!(
                    "view {i}: image {h}x{w} vs intrinsics {}x{}",
                    cam.intrinsics.height, cam.intrinsics.width
                )));
            }
            if !img.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return Err(UwError::InvalidScene(format!(
                    "view {i}: pixel values outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    pub fn view_count(&self) -> usize {
        self.images.len()
    }
}
