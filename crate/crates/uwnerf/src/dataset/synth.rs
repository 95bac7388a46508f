//! Forward water degradation: turns a clean image plus a depth map into an
//! underwater observation with exponential direct and backscatter
//! transmission.  This is the exact generative counterpart of the model the
//! renderer disentangles, which gives tests a reachable ground truth.

use ndarray::{Array2, Array3};

use crate::dataset::DegradationParams;
use crate::{Result, UwError};

/// Applies `I = J exp(-beta_D z) + (1 - exp(-beta_B z)) A` per pixel and
/// channel, clamping the result to `[0, 1]`.
pub fn synthesize_underwater(
    clean: &Array3<f64>,
    depth: &Array2<f64>,
    params: &DegradationParams,
) -> Result<Array3<f64>> {
    params.validate()?;
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    if clean.shape()[2] != 3 {
        return Err(UwError::Shape(format!(
            "clean image must be [H, W, 3], got {:?}",
            clean.shape()
        )));
    }
    if depth.shape() != [h, w] {
        return Err(UwError::Shape(format!(
            "depth {:?} does not match image {h}x{w}",
            depth.shape()
        )));
    }
    if !clean.iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(UwError::InvalidScene(
            "clean image values outside [0,1]".into(),
        ));
    }
    if !depth.iter().all(|&z| z >= 0.0 && z.is_finite()) {
        return Err(UwError::InvalidScene("negative or non-finite depth".into()));
    }
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let z = depth[[i, j]];
            for c in 0..3 {
                let t_d = (-params.beta_d[c] * z).exp();
                let t_b = (-params.beta_b[c] * z).exp();
                let v = clean[[i, j, c]] * t_d + (1.0 - t_b) * params.ambient[c];
                out[[i, j, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
