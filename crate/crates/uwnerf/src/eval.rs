//! Rendering front end and image-quality metrics.
//!
//! One half of this module turns a trained parameter store into full
//! images: [`render_view`] tiles a target view with stride-p patches,
//! renders each patch, and assembles the restored image together with the
//! component maps that explain it.  The other half scores images:
//! reference metrics (PSNR, SSIM) against ground truth where it exists,
//! and the two standard no-reference underwater quality measures (UIQM,
//! UCIQE).  Every constant in the no-reference metrics is named here
//! because the literature fixes the published coefficients but leaves
//! block sizes and guards to the implementation.
//!
//! All metric inputs are `H x W x 3` arrays in `[0,1]`, interpreted as
//! gamma-encoded sRGB (the convention of the 8-bit files they come from).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::backbone::extract_features_on_tape;
use crate::dataset::{Camera, Pose, SceneDataset};
use crate::error::UwError;
use crate::formation::compose_on_tape;
use crate::geometry::select_source_views;
use crate::lightnet::{estimate_on_tape, select_nearest_source, LightMode};
use crate::nn::{chw_to_hwc, hwc_to_chw, ParamStore};
use crate::renderer::{render_patch_on_tape, SourceTokens};
use crate::trainer::TrainConfig;
use crate::Result;

/// Sentinel PSNR for a zero-error reconstruction, and the ceiling for
/// near-zero errors so the metric stays bounded.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Rec.601 luma weights, used for SSIM, sharpness weighting and the
/// contrast measure.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// SSIM stabilizers for unit dynamic range: `C1 = (K1 L)^2`, `C2 = (K2 L)^2`
/// with `K1 = 0.01`, `K2 = 0.03`, `L = 1`.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;
/// SSIM window: 11 x 11 Gaussian, sigma 1.5, evaluated on valid positions.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Published combination weights: UIQM over (colorfulness, sharpness,
/// contrast) and UCIQE over (chroma spread, luma contrast, mean saturation).
pub const UIQM_COEFFS: [f64; 3] = [0.0282, 0.2953, 3.5753];
pub const UCIQE_COEFFS: [f64; 3] = [0.4680, 0.2745, 0.2576];

/// Colorfulness combination weights over the trimmed means and the spreads
/// of the two opponent-color planes.
const UICM_MEAN_WEIGHT: f64 = -0.0268;
const UICM_SPREAD_WEIGHT: f64 = 0.1586;
/// Fraction trimmed from EACH end when computing the robust opponent-plane
/// means.
const ALPHA_TRIM: f64 = 0.1;
/// Block edge for the blockwise sharpness / contrast statistics; partial
/// trailing blocks are ignored.
const METRIC_BLOCK: usize = 8;
/// A block whose minimum falls at or below this floor contributes nothing
/// to a logarithmic block statistic (the log ratio is unbounded there).
const BLOCK_FLOOR: f64 = 1e-12;
/// The no-reference metrics are defined on the 8-bit scale in the
/// literature; `[0,1]` inputs are multiplied by this before measuring.
const EIGHT_BIT_SCALE: f64 = 255.0;
/// Luma percentile (each tail) for the UCIQE luminance-contrast term.
const LUMA_TAIL: f64 = 0.01;

/// Reference white for the CIELab conversion: the matrix image of pure
/// white, so constant grays land exactly on the neutral axis.  (The
/// canonical 4-decimal matrix rows do not sum exactly to the tabulated
/// D65 white; using the row sums keeps the conversion self-consistent.)
const LAB_WHITE: [f64; 3] = [0.95047, 1.0000001, 1.08883];
/// Row-major sRGB(linear) -> XYZ matrix, D65.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// ---------------------------------------------------------------------
// Reference metrics
// ---------------------------------------------------------------------

fn check_rgb(name: &str, img: &Array3<f64>) -> Result<()> {
    if img.dim().2 != 3 {
        return Err(UwError::Shape(format!(
            "{name}: expected an H x W x 3 image, got {:?}",
            img.dim()
        )));
    }
    Ok(())
}

/// PSNR in dB from a mean-squared error over `[0,1]` images: zero error
/// yields the cap, and the result never exceeds it.
pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (10.0 * (1.0 / mse).log10()).min(cap)
    }
}

/// Peak signal-to-noise ratio between two `[0,1]` images.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, cap: f64) -> Result<f64> {
    check_rgb("psnr", a)?;
    if a.dim() != b.dim() {
        return Err(UwError::Shape(format!(
            "psnr: image shapes disagree: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse, cap))
}

/// Rec.601 luma plane of a gamma-encoded image.
fn luma_plane(img: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        LUMA[0] * img[[i, j, 0]] + LUMA[1] * img[[i, j, 1]] + LUMA[2] * img[[i, j, 2]]
    })
}

/// Normalized 11 x 11 Gaussian window.
fn ssim_window() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let di = i as f64 - half;
        let dj = j as f64 - half;
        (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = w.sum();
    w.mapv_inplace(|v| v / total);
    w
}

/// Single-scale structural similarity on luma: Gaussian-weighted local
/// statistics over every valid window position, averaged.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_rgb("ssim", a)?;
    if a.dim() != b.dim() {
        return Err(UwError::Shape(format!(
            "ssim: image shapes disagree: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(UwError::Shape(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (la, lb) = (luma_plane(a), luma_plane(b));
    let win = ssim_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let mut mx = 0.0;
            let mut my = 0.0;
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    mx += win[[u, v]] * la[[i + u, j + v]];
                    my += win[[u, v]] * lb[[i + u, j + v]];
                }
            }
            let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let dx = la[[i + u, j + v]] - mx;
                    let dy = lb[[i + u, j + v]] - my;
                    sx += win[[u, v]] * dx * dx;
                    sy += win[[u, v]] * dy * dy;
                    sxy += win[[u, v]] * dx * dy;
                }
            }
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------
// No-reference underwater metrics
// ---------------------------------------------------------------------

/// 8-bit-scale channel plane.
fn channel_plane(img: &Array3<f64>, c: usize) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| img[[i, j, c]] * EIGHT_BIT_SCALE)
}

/// Mean after dropping the `ALPHA_TRIM` fraction from each end, plus the
/// population variance about that robust mean.
fn trimmed_stats(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    let k = (ALPHA_TRIM * n as f64) as usize;
    let core = &sorted[k..n - k];
    let mu = core.iter().sum::<f64>() / core.len() as f64;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    (mu, var)
}

/// Colorfulness: robust means and spreads of the red-green and
/// yellow-blue opponent planes.  Exactly zero on any gray image.
pub fn uicm(img: &Array3<f64>) -> Result<f64> {
    check_rgb("uicm", img)?;
    let (r, g, b) = (
        channel_plane(img, 0),
        channel_plane(img, 1),
        channel_plane(img, 2),
    );
    let rg: Vec<f64> = r.iter().zip(g.iter()).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r
        .iter()
        .zip(g.iter())
        .zip(b.iter())
        .map(|((r, g), b)| (r + g) / 2.0 - b)
        .collect();
    let (mu_rg, var_rg) = trimmed_stats(&rg);
    let (mu_yb, var_yb) = trimmed_stats(&yb);
    Ok(UICM_MEAN_WEIGHT * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + UICM_SPREAD_WEIGHT * (var_rg + var_yb).sqrt())
}

/// Sobel gradient magnitude; border pixels (where the 3 x 3 stencil does
/// not fit) are zero.
fn sobel_magnitude(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = p.dim();
    let mut out = Array2::zeros((h, w));
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let gx = (p[[i - 1, j + 1]] + 2.0 * p[[i, j + 1]] + p[[i + 1, j + 1]])
                - (p[[i - 1, j - 1]] + 2.0 * p[[i, j - 1]] + p[[i + 1, j - 1]]);
            let gy = (p[[i + 1, j - 1]] + 2.0 * p[[i + 1, j]] + p[[i + 1, j + 1]])
                - (p[[i - 1, j - 1]] + 2.0 * p[[i - 1, j]] + p[[i - 1, j + 1]]);
            out[[i, j]] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Blockwise log-ratio enhancement measure `2/(k1 k2) * sum ln(max/min)`
/// over full `METRIC_BLOCK` blocks; blocks whose minimum is at the floor
/// contribute nothing.
fn eme(p: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let (k1, k2) = (h / METRIC_BLOCK, w / METRIC_BLOCK);
    let mut acc = 0.0;
    for bi in 0..k1 {
        for bj in 0..k2 {
            let block = p.slice(ndarray::s![
                bi * METRIC_BLOCK..(bi + 1) * METRIC_BLOCK,
                bj * METRIC_BLOCK..(bj + 1) * METRIC_BLOCK
            ]);
            let mx = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mn = block.iter().cloned().fold(f64::INFINITY, f64::min);
            if mn > BLOCK_FLOOR {
                acc += (mx / mn).ln();
            }
        }
    }
    acc * 2.0 / (k1 * k2) as f64
}

/// Sharpness: luma-weighted blockwise enhancement of the Sobel-weighted
/// channel planes.
pub fn uism(img: &Array3<f64>) -> Result<f64> {
    check_rgb("uism", img)?;
    let (h, w, _) = img.dim();
    if h < METRIC_BLOCK || w < METRIC_BLOCK {
        return Err(UwError::Shape(format!(
            "uism: image {h}x{w} smaller than one {METRIC_BLOCK}x{METRIC_BLOCK} block"
        )));
    }
    let mut total = 0.0;
    for (c, weight) in LUMA.iter().enumerate() {
        let plane = channel_plane(img, c);
        let mag = sobel_magnitude(&plane);
        let edged = &mag * &plane;
        total += weight * eme(&edged);
    }
    Ok(total)
}

/// Contrast: blockwise Michelson-ratio entropy of the luma plane.  The
/// logarithmic-image-processing operators of the original construction
/// are taken at their large-gamma limit (plain arithmetic), a common
/// simplification.
pub fn uiconm(img: &Array3<f64>) -> Result<f64> {
    check_rgb("uiconm", img)?;
    let (h, w, _) = img.dim();
    if h < METRIC_BLOCK || w < METRIC_BLOCK {
        return Err(UwError::Shape(format!(
            "uiconm: image {h}x{w} smaller than one {METRIC_BLOCK}x{METRIC_BLOCK} block"
        )));
    }
    let luma = luma_plane(img).mapv(|v| v * EIGHT_BIT_SCALE);
    let (k1, k2) = (h / METRIC_BLOCK, w / METRIC_BLOCK);
    let mut acc = 0.0;
    for bi in 0..k1 {
        for bj in 0..k2 {
            let block = luma.slice(ndarray::s![
                bi * METRIC_BLOCK..(bi + 1) * METRIC_BLOCK,
                bj * METRIC_BLOCK..(bj + 1) * METRIC_BLOCK
            ]);
            let mx = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mn = block.iter().cloned().fold(f64::INFINITY, f64::min);
            let (top, bot) = (mx - mn, mx + mn);
            if top > BLOCK_FLOOR && bot > BLOCK_FLOOR {
                acc += top / bot * (top / bot).ln();
            }
        }
    }
    Ok(-acc / (k1 * k2) as f64)
}

/// Underwater image quality measure: the published linear combination of
/// colorfulness, sharpness and contrast.
pub fn uiqm(img: &Array3<f64>) -> Result<f64> {
    Ok(UIQM_COEFFS[0] * uicm(img)?
        + UIQM_COEFFS[1] * uism(img)?
        + UIQM_COEFFS[2] * uiconm(img)?)
}

/// sRGB electro-optical transfer (gamma decode).
fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// CIELab companding function.
fn f_lab(t: f64) -> f64 {
    const DELTA3: f64 = 216.0 / 24389.0; // (6/29)^3
    if t > DELTA3 {
        t.cbrt()
    } else {
        t * 841.0 / 108.0 + 4.0 / 29.0 // t / (3 (6/29)^2) + 4/29
    }
}

/// Per-pixel normalized CIELab: `L/100`, `a/255`, `b/255` — the scale of
/// the common 8-bit implementations, which the published UCIQE weights
/// assume.
fn lab_normalized(p: [f64; 3]) -> (f64, f64, f64) {
    let lin = [
        srgb_to_linear(p[0]),
        srgb_to_linear(p[1]),
        srgb_to_linear(p[2]),
    ];
    let mut xyz = [0.0; 3];
    for (row, x) in SRGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *x = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = f_lab(xyz[0] / LAB_WHITE[0]);
    let fy = f_lab(xyz[1] / LAB_WHITE[1]);
    let fz = f_lab(xyz[2] / LAB_WHITE[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let b = 200.0 * (fy - fz);
    (l / 100.0, a / 255.0, b / 255.0)
}

/// The three UCIQE components: population spread of Lab chroma, the
/// spread between the top and bottom luma percentile means, and the mean
/// chroma-to-luma saturation (dark pixels saturate to zero).
pub fn uciqe_components(img: &Array3<f64>) -> Result<(f64, f64, f64)> {
    check_rgb("uciqe", img)?;
    let (h, w, _) = img.dim();
    let n = h * w;
    let mut lumas = Vec::with_capacity(n);
    let mut chromas = Vec::with_capacity(n);
    for i in 0..h {
        for j in 0..w {
            let (l, a, b) = lab_normalized([img[[i, j, 0]], img[[i, j, 1]], img[[i, j, 2]]]);
            lumas.push(l);
            chromas.push((a * a + b * b).sqrt());
        }
    }
    let mu_c = chromas.iter().sum::<f64>() / n as f64;
    let sigma_c = (chromas.iter().map(|c| (c - mu_c) * (c - mu_c)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = lumas.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite luma"));
    let m = ((LUMA_TAIL * n as f64) as usize).max(1);
    let con_l = sorted[n - m..].iter().sum::<f64>() / m as f64
        - sorted[..m].iter().sum::<f64>() / m as f64;
    let mu_s = lumas
        .iter()
        .zip(chromas.iter())
        .map(|(&l, &c)| if l > 1e-6 { c / l } else { 0.0 })
        .sum::<f64>()
        / n as f64;
    Ok((sigma_c, con_l, mu_s))
}

/// Underwater color image quality: the published linear combination of
/// the three [`uciqe_components`].
pub fn uciqe(img: &Array3<f64>) -> Result<f64> {
    let (sigma_c, con_l, mu_s) = uciqe_components(img)?;
    Ok(UCIQE_COEFFS[0] * sigma_c + UCIQE_COEFFS[1] * con_l + UCIQE_COEFFS[2] * mu_s)
}

// ---------------------------------------------------------------------
// Full-view rendering
// ---------------------------------------------------------------------

/// A fully assembled novel view: the restoration `J`, the
/// self-reconstruction `I`, and the maps that tie them together through
/// `I = J * T_D + (1 - T_B) * A`.  All `H x W x 3` in row-major HWC.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub restored: Array3<f64>,
    pub composed: Array3<f64>,
    pub direct: Array3<f64>,
    pub backscatter: Array3<f64>,
    pub light: Array3<f64>,
}

/// Renders a full image at an arbitrary camera.  Deterministic: sources
/// are the nearest views in a fixed order, depth samples sit at bin
/// midpoints, and the light latent is taken at its mean.
pub fn render_at(
    store: &ParamStore,
    config: &TrainConfig,
    dataset: &SceneDataset,
    target: &Camera,
    exclude: Option<usize>,
) -> Result<RenderedView> {
    config.validate()?;
    let p = config.transformer.patch_size;
    let (h, w, _) = dataset.images[0].dim();
    if h % p != 0 || w % p != 0 {
        return Err(UwError::Shape(format!(
            "image {h}x{w} is not tileable by {p}x{p} patches"
        )));
    }
    let poses: Vec<Pose> = dataset.cameras.iter().map(|c| c.pose.clone()).collect();
    let available = poses.len() - exclude.map_or(0, |_| 1);
    let n = config.n_range[1].min(available);
    if n == 0 {
        return Err(UwError::Render("no source views available".into()));
    }
    // k = 1 makes the pool exactly the n nearest; the draw order is then
    // normalized away by sorting.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut source_ids = select_source_views(&target.pose, &poses, exclude, 1, n, &mut rng)?;
    source_ids.sort_unstable();

    let mut tape = Tape::new(false);
    let bound = store.bind(&mut tape);
    let mut sources = Vec::with_capacity(source_ids.len());
    for &si in &source_ids {
        let img = tape.leaf(hwc_to_chw(&dataset.images[si]));
        let features = extract_features_on_tape(&mut tape, img, &bound, &config.backbone)?;
        sources.push(SourceTokens {
            camera: dataset.cameras[si].clone(),
            features,
        });
    }
    let nearest = *select_nearest_source(
        &target.pose,
        &source_ids
            .iter()
            .map(|&si| (poses[si].clone(), si))
            .collect::<Vec<_>>(),
    )?;
    let light = estimate_on_tape(
        &mut tape,
        &bound,
        &config.vae,
        &dataset.images[nearest],
        LightMode::Eval,
        &mut rng,
    )?;
    let light_map = chw_to_hwc(tape.value(light.a));

    let mut restored = Array3::zeros((h, w, 3));
    let mut composed = Array3::zeros((h, w, 3));
    let mut direct = Array3::zeros((h, w, 3));
    let mut backscatter = Array3::zeros((h, w, 3));
    for py in 0..h / p {
        for px in 0..w / p {
            let raw = render_patch_on_tape(
                &mut tape,
                &bound,
                &config.transformer,
                target,
                (py, px),
                &sources,
                dataset.near,
                dataset.far,
                false,
                &mut rng,
            )?;
            let (j, t_d, t_b) =
                crate::formation::map_raw_on_tape(&mut tape, raw.raw_radiance, raw.raw_direct, raw.raw_backscatter);
            let a_patch = tape.crop(light.a, py * p, px * p, p, p);
            let i_patch = compose_on_tape(&mut tape, j, t_d, t_b, a_patch);
            for (var, map) in [
                (j, &mut restored),
                (t_d, &mut direct),
                (t_b, &mut backscatter),
                (i_patch, &mut composed),
            ] {
                let patch = chw_to_hwc(tape.value(var));
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            map[[py * p + dy, px * p + dx, c]] = patch[[dy, dx, c]];
                        }
                    }
                }
            }
        }
    }
    Ok(RenderedView {
        restored,
        composed,
        direct,
        backscatter,
        light: light_map,
    })
}

/// Renders the dataset view `target` from its neighbors (the view itself
/// is never used as a source).
pub fn render_view(
    store: &ParamStore,
    config: &TrainConfig,
    dataset: &SceneDataset,
    target: usize,
) -> Result<RenderedView> {
    if target >= dataset.images.len() {
        return Err(UwError::InvalidConfig(format!(
            "view index {target} out of range ({} views)",
            dataset.images.len()
        )));
    }
    render_at(store, config, dataset, &dataset.cameras[target], Some(target))
}

// ---------------------------------------------------------------------
// Scene evaluation and reports
// ---------------------------------------------------------------------

/// Scores for one rendered view.  Reference metrics are present only when
/// ground truth was available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uciqe: f64,
}

/// Per-view scores plus their means for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene: String,
    pub config_hash: String,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_uiqm: f64,
    pub mean_uciqe: f64,
}

impl MetricsReport {
    /// Builds the summary from per-view rows.  Reference means appear only
    /// when every row has the reference scores.
    pub fn from_views(scene: &str, config_hash: &str, views: Vec<ViewMetrics>) -> MetricsReport {
        let n = views.len().max(1) as f64;
        let mean = |get: fn(&ViewMetrics) -> Option<f64>| -> Option<f64> {
            views
                .iter()
                .map(get)
                .collect::<Option<Vec<f64>>>()
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mean_psnr = mean(|v| v.psnr);
        let mean_ssim = mean(|v| v.ssim);
        let mean_uiqm = views.iter().map(|v| v.uiqm).sum::<f64>() / n;
        let mean_uciqe = views.iter().map(|v| v.uciqe).sum::<f64>() / n;
        MetricsReport {
            scene: scene.into(),
            config_hash: config_hash.into(),
            views,
            mean_psnr,
            mean_ssim,
            mean_uiqm,
            mean_uciqe,
        }
    }

    /// One JSON line per view followed by one summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for view in &self.views {
            let line = serde_json::to_string(view)
                .map_err(|e| UwError::InvalidConfig(format!("report serialization: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            scene: &'a str,
            config_hash: &'a str,
            views: usize,
            mean_psnr: Option<f64>,
            mean_ssim: Option<f64>,
            mean_uiqm: f64,
            mean_uciqe: f64,
        }
        let line = serde_json::to_string(&Summary {
            scene: &self.scene,
            config_hash: &self.config_hash,
            views: self.views.len(),
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
            mean_uiqm: self.mean_uiqm,
            mean_uciqe: self.mean_uciqe,
        })
        .map_err(|e| UwError::InvalidConfig(format!("report serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
        Ok(out)
    }

    /// Plain-text summary table for terminals.
    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("      -".into(), |x| format!("{x:7.3}"));
        let mut out = format!(
            "{:<12} {:>7} {:>7} {:>7} {:>7}\n",
            "view", "psnr", "ssim", "uiqm", "uciqe"
        );
        for v in &self.views {
            out.push_str(&format!(
                "{:<12} {} {} {:7.3} {:7.3}\n",
                v.view,
                fmt(v.psnr),
                fmt(v.ssim),
                v.uiqm,
                v.uciqe
            ));
        }
        out.push_str(&format!(
            "{:<12} {} {} {:7.3} {:7.3}\n",
            "mean",
            fmt(self.mean_psnr),
            fmt(self.mean_ssim),
            self.mean_uiqm,
            self.mean_uciqe
        ));
        out
    }
}

/// Short content hash of a config, stamped into reports so scores are
/// traceable to the exact model settings.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(config)
        .map_err(|e| UwError::InvalidConfig(format!("config serialization: {e}")))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(hex_prefix(&digest, 16))
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

/// Scores one view: no-reference metrics always, reference metrics when a
/// clean ground-truth image is supplied.
pub fn view_metrics(
    id: &str,
    restored: &Array3<f64>,
    clean: Option<&Array3<f64>>,
) -> Result<ViewMetrics> {
    let (psnr_v, ssim_v) = match clean {
        Some(reference) => (
            Some(psnr(restored, reference, PSNR_CAP_DB)?),
            Some(ssim(restored, reference)?),
        ),
        None => (None, None),
    };
    Ok(ViewMetrics {
        view: id.into(),
        psnr: psnr_v,
        ssim: ssim_v,
        uiqm: uiqm(restored)?,
        uciqe: uciqe(restored)?,
    })
}

/// Renders every held-out view and assembles the scene report.  `clean`
/// maps view indices to ground-truth images where they exist.
pub fn evaluate_scene(
    store: &ParamStore,
    config: &TrainConfig,
    dataset: &SceneDataset,
    held_out: &[usize],
    clean: &BTreeMap<usize, Array3<f64>>,
    scene_id: &str,
) -> Result<MetricsReport> {
    let mut views = Vec::with_capacity(held_out.len());
    for &idx in held_out {
        let rendered = render_view(store, config, dataset, idx)?;
        views.push(view_metrics(
            &dataset.view_ids[idx],
            &rendered.restored,
            clean.get(&idx),
        )?);
    }
    Ok(MetricsReport::from_views(
        scene_id,
        &config_hash(config)?,
        views,
    ))
}

// ---------------------------------------------------------------------
// Camera paths and image output
// ---------------------------------------------------------------------

/// Cameras for a fly-through: piecewise interpolation along the ordered
/// dataset views — centers linearly, orientations by quaternion slerp.
/// Intrinsics are taken from the first camera.
pub fn sequence_cameras(cameras: &[Camera], frames: usize) -> Result<Vec<Camera>> {
    if cameras.is_empty() {
        return Err(UwError::InvalidConfig("no cameras to interpolate".into()));
    }
    if frames == 0 {
        return Ok(Vec::new());
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.pose.center()).collect();
    let quats: Vec<UnitQuaternion<f64>> = cameras
        .iter()
        .map(|c| {
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                c.pose.rotation.transpose(),
            ))
        })
        .collect();
    let mut out = Vec::with_capacity(frames);
    let segments = cameras.len() - 1;
    for f in 0..frames {
        let (pose, intrinsics) = if segments == 0 || frames == 1 {
            (cameras[0].pose.clone(), cameras[0].intrinsics)
        } else {
            let s = f as f64 / (frames - 1) as f64 * segments as f64;
            let i = (s as usize).min(segments - 1);
            let u = s - i as f64;
            let center = centers[i] * (1.0 - u) + centers[i + 1] * u;
            // Nearly antipodal orientations have no unique midpoint; hold
            // the earlier orientation there instead of failing.
            let q = quats[i]
                .try_slerp(&quats[i + 1], u, 1e-9)
                .unwrap_or(quats[i]);
            let rotation = q.to_rotation_matrix().into_inner().transpose();
            let translation = -rotation * center;
            (
                Pose {
                    rotation,
                    translation,
                },
                cameras[0].intrinsics,
            )
        };
        out.push(Camera { intrinsics, pose });
    }
    Ok(out)
}

/// Writes an `[0,1]` HWC image as an 8-bit PNG.
pub fn save_png8(path: &Path, img: &Array3<f64>) -> Result<()> {
    check_rgb("save_png8", img)?;
    let (h, w, _) = img.dim();
    let mut buffer = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [0, 1, 2].map(|c| (img[[i, j, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            buffer.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buffer
        .save(path)
        .map_err(|e| UwError::image(path.display().to_string(), e))
}

/// Writes an `[0,1]` HWC image as a 16-bit PNG, for component maps whose
/// dynamics an 8-bit quantization would crush.
pub fn save_png16(path: &Path, img: &Array3<f64>) -> Result<()> {
    check_rgb("save_png16", img)?;
    let (h, w, _) = img.dim();
    let mut buffer = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [0, 1, 2].map(|c| (img[[i, j, c]].clamp(0.0, 1.0) * 65535.0).round() as u16);
            buffer.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buffer
        .save(path)
        .map_err(|e| UwError::image(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_toy_scene, synthesize_underwater, DegradationParams, ToySceneConfig};
    use crate::formation::{compose, ComponentPatch};
    use crate::trainer::Trainer;
    use ndarray::Array2;

    /// Deterministic colorful fixtures shared with the frozen-value
    /// oracle script.
    fn fixture_a() -> Array3<f64> {
        Array3::from_shape_fn((16, 16, 3), |(i, j, c)| {
            ((i * 7 + j * 13 + c * 29) % 31) as f64 / 31.0
        })
    }

    fn fixture_b() -> Array3<f64> {
        Array3::from_shape_fn((16, 16, 3), |(i, j, c)| {
            ((i * 5 + j * 11 + c * 17) % 29) as f64 / 29.0
        })
    }

    fn ramp24() -> Array3<f64> {
        Array3::from_shape_fn((24, 24, 3), |(i, j, c)| (i + 2 * j + c) as f64 / 80.0)
    }

    #[test]
    fn psnr_anchors() {
        assert_eq!(psnr_from_mse(0.01, PSNR_CAP_DB), 20.0);
        assert_eq!(
            psnr_from_mse(0.0025, PSNR_CAP_DB),
            26.020599913279625
        );
        assert_eq!(psnr_from_mse(0.0, PSNR_CAP_DB), PSNR_CAP_DB);
        let a = fixture_a();
        assert_eq!(psnr(&a, &a, PSNR_CAP_DB).unwrap(), PSNR_CAP_DB);
        let b = fixture_b();
        let forward = psnr(&a, &b, PSNR_CAP_DB).unwrap();
        assert!((forward - 7.9295326269959565).abs() < 1e-12);
        assert_eq!(forward, psnr(&b, &a, PSNR_CAP_DB).unwrap(), "not symmetric");
    }

    #[test]
    fn ssim_identity_and_frozen_pair() {
        let a = fixture_a();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = fixture_b();
        let value = ssim(&a, &b).unwrap();
        assert!(
            (value - 0.3520681734412132).abs() < 1e-12,
            "ssim(A,B) = {value}"
        );
        assert!((-1.0..=1.0).contains(&value));
    }

    #[test]
    fn ssim_constant_pair_matches_closed_form() {
        let a = Array3::from_elem((16, 16, 3), 0.25);
        let b = Array3::from_elem((16, 16, 3), 0.5);
        let value = ssim(&a, &b).unwrap();
        assert!(
            (value - 0.8000639795265515).abs() < 1e-12,
            "constant-pair ssim = {value}"
        );
    }

    #[test]
    fn ssim_of_negative_texture_is_low() {
        let a = Array3::from_shape_fn((20, 20, 3), |(i, j, _)| {
            ((i + j) % 2) as f64 * 0.8 + 0.1
        });
        let b = a.mapv(|v| 1.0 - v);
        let value = ssim(&a, &b).unwrap();
        assert!(value < 0.2, "anticorrelated texture scored {value}");
    }

    #[test]
    fn uiqm_matches_frozen_oracle() {
        let a = fixture_a();
        let cm = uicm(&a).unwrap();
        assert!((cm - 14.8093078061362).abs() < 1e-10, "uicm = {cm}");
        // Every 8x8 block of the Sobel-weighted fixture touches a zero
        // border pixel, so the sharpness term collapses to the guard.
        assert_eq!(uism(&a).unwrap(), 0.0);
        let conm = uiconm(&a).unwrap();
        assert!(
            (conm - 0.14164519200758496).abs() < 1e-12,
            "uiconm = {conm}"
        );
        let total = uiqm(&a).unwrap();
        assert!(
            (total - 0.9240465351177594).abs() < 1e-10,
            "uiqm = {total}"
        );
    }

    #[test]
    fn sharpness_and_contrast_on_interior_blocks() {
        let r = ramp24();
        let sm = uism(&r).unwrap();
        assert!((sm - 0.13630671132650057).abs() < 1e-12, "uism = {sm}");
        let cm = uiconm(&r).unwrap();
        assert!((cm - 0.3127311240466233).abs() < 1e-12, "uiconm = {cm}");
    }

    #[test]
    fn gray_images_have_zero_colorfulness_and_saturation() {
        let gray = Array3::from_elem((16, 16, 3), 0.42);
        assert_eq!(uicm(&gray).unwrap(), 0.0);
        assert_eq!(uiconm(&gray).unwrap(), 0.0);
        let (sigma_c, con_l, mu_s) = uciqe_components(&gray).unwrap();
        assert!(sigma_c.abs() < 1e-12);
        assert!(con_l.abs() < 1e-12);
        assert!(mu_s.abs() < 1e-12);
    }

    #[test]
    fn uciqe_matches_frozen_oracle() {
        let a = fixture_a();
        let (sigma_c, con_l, mu_s) = uciqe_components(&a).unwrap();
        assert!(
            (sigma_c - 0.11413221952749351).abs() < 1e-12,
            "sigma_c = {sigma_c}"
        );
        assert!((con_l - 0.859133822204819).abs() < 1e-12, "con_l = {con_l}");
        assert!((mu_s - 0.2513328802706098).abs() < 1e-12, "mu_s = {mu_s}");
        let total = uciqe(&a).unwrap();
        assert!(
            (total - 0.3539894628917989).abs() < 1e-12,
            "uciqe = {total}"
        );
    }

    #[test]
    fn pixel_statistics_are_permutation_invariant() {
        let a = fixture_a();
        let (h, w, _) = a.dim();
        // Deterministic shuffle: multiply flat index by a unit coprime to n.
        let n = h * w;
        let shuffled = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            let flat = (i * w + j) * 97 % n;
            a[[flat / w, flat % w, c]]
        });
        let (s1, c1, m1) = uciqe_components(&a).unwrap();
        let (s2, c2, m2) = uciqe_components(&shuffled).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((c1 - c2).abs() < 1e-12);
        assert!((m1 - m2).abs() < 1e-12);
    }

    #[test]
    fn spread_is_homogeneous_under_chroma_scaling() {
        // The chroma-spread term is a population standard deviation, so
        // doubling every chroma doubles it exactly; verified on the
        // statistic itself since chroma is not freely steerable in RGB.
        let chromas: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let std = |xs: &[f64]| {
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let doubled: Vec<f64> = chromas.iter().map(|c| 2.0 * c).collect();
        assert!((std(&doubled) - 2.0 * std(&chromas)).abs() < 1e-12);
    }

    #[test]
    fn haze_lowers_uciqe_and_depth_raises_error() {
        let params = DegradationParams {
            beta_d: [0.4, 0.5, 0.6],
            beta_b: [1.2, 1.5, 1.8],
            ambient: [0.35, 0.55, 0.65],
        };
        let mut drops = 0;
        for seed in 0..10u64 {
            let toy = ToySceneConfig {
                views: 2,
                size: 32,
                seed,
                ..Default::default()
            };
            let (_, truth) = make_toy_scene(&toy).unwrap();
            let clean = truth.clean[0].clone();
            let depth = Array2::from_elem((32, 32), 5.0);
            let hazy = synthesize_underwater(&clean, &depth, &params).unwrap();
            if uciqe(&hazy).unwrap() < uciqe(&clean).unwrap() {
                drops += 1;
            }
            // Deeper water, monotonically larger deviation from clean.
            // With matched attenuation coefficients the pixel error
            // factorizes as (1 - exp(-beta d)) (A - J), so its magnitude
            // grows with depth everywhere; unequal coefficients allow
            // non-monotone stretches and are deliberately avoided here.
            let matched = DegradationParams {
                beta_d: [0.8, 0.8, 0.8],
                beta_b: [0.8, 0.8, 0.8],
                ambient: [0.95, 0.95, 0.95],
            };
            let mut last = -1.0;
            for d in [2.0, 4.0, 6.0] {
                let far = synthesize_underwater(&clean, &Array2::from_elem((32, 32), d), &matched)
                    .unwrap();
                let mse = (&far - &clean).mapv(|v| v * v).mean().unwrap();
                assert!(mse > last, "mse not increasing in depth");
                last = mse;
            }
        }
        assert!(drops >= 8, "haze lowered UCIQE on only {drops}/10 images");
    }

    /// Tiny model shared by the rendering tests.
    fn tiny_setup() -> (Trainer, SceneDataset) {
        let config = TrainConfig {
            steps: 8,
            rays_per_batch: 16,
            n_range: [2, 3],
            k_range: [1, 2],
            transformer: crate::renderer::TransformerConfig {
                dim: 8,
                view_heads: 1,
                ray_heads: 2,
                ff_hidden: 16,
                depth: 1,
                samples_per_ray: 4,
                patch_size: 4,
                position_encoding: true,
            },
            backbone: crate::backbone::BackboneConfig {
                encoder_depth: crate::backbone::EncoderDepth::Tiny,
                feature_width: 5,
            },
            vae: crate::lightnet::VaeConfig {
                encoder_widths: [2, 3, 4, 5],
                latent_dim: 6,
                decoder_widths: [5, 4, 3],
            },
            ..Default::default()
        };
        let scene = make_toy_scene(&ToySceneConfig {
            views: 5,
            size: 32,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
        .0;
        (Trainer::new(config).unwrap(), scene)
    }

    #[test]
    fn rendered_view_is_consistent_and_deterministic() {
        let (trainer, scene) = tiny_setup();
        let view = render_view(trainer.store(), trainer.config(), &scene, 0).unwrap();
        let (h, w, _) = scene.images[0].dim();
        for map in [
            &view.restored,
            &view.composed,
            &view.direct,
            &view.backscatter,
            &view.light,
        ] {
            assert_eq!(map.dim(), (h, w, 3));
            assert!(map.iter().all(|v| v.is_finite()));
        }
        // Composing the returned maps reproduces the returned image.
        let patch = ComponentPatch {
            j: view.restored.clone(),
            t_d: view.direct.clone(),
            t_b: view.backscatter.clone(),
        };
        let recomposed = compose(&patch, &view.light).unwrap();
        let worst = (&recomposed - &view.composed)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-6, "compose drift {worst}");

        let again = render_view(trainer.store(), trainer.config(), &scene, 0).unwrap();
        assert_eq!(view.restored, again.restored, "render is not deterministic");
        assert_eq!(view.composed, again.composed);
    }

    #[test]
    fn perfect_restoration_scores_the_cap() {
        let (_, truth) = make_toy_scene(&ToySceneConfig {
            views: 2,
            size: 32,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let clean = &truth.clean[0];
        let m = view_metrics("oracle", clean, Some(clean)).unwrap();
        assert_eq!(m.psnr, Some(PSNR_CAP_DB));
        assert_eq!(m.ssim, Some(1.0));
        assert!(m.uiqm.is_finite() && m.uciqe.is_finite());
    }

    #[test]
    fn scene_report_aggregates_views() {
        let (trainer, scene) = tiny_setup();
        let (_, truth) = make_toy_scene(&ToySceneConfig {
            views: 5,
            size: 32,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let clean: BTreeMap<usize, Array3<f64>> =
            [(0, truth.clean[0].clone()), (1, truth.clean[1].clone())]
                .into_iter()
                .collect();
        let report = evaluate_scene(
            trainer.store(),
            trainer.config(),
            &scene,
            &[0, 1],
            &clean,
            "toy",
        )
        .unwrap();
        assert_eq!(report.views.len(), 2);
        assert_eq!(report.config_hash.len(), 16);
        assert!(report.mean_psnr.is_some());
        assert!(report.mean_uiqm.is_finite());
        let jsonl = report.to_jsonl().unwrap();
        assert_eq!(jsonl.lines().count(), 3, "2 view lines + summary");
        assert!(report.summary_table().contains("mean"));

        // Without full ground-truth coverage the reference means vanish.
        let partial = evaluate_scene(
            trainer.store(),
            trainer.config(),
            &scene,
            &[0, 2],
            &clean,
            "toy",
        )
        .unwrap();
        assert!(partial.mean_psnr.is_none());
        assert!(partial.mean_uiqm.is_finite());
    }

    #[test]
    fn sequence_interpolates_between_cameras() {
        let (_, scene) = tiny_setup();
        let frames = sequence_cameras(&scene.cameras, 9).unwrap();
        assert_eq!(frames.len(), 9);
        let first = &scene.cameras[0].pose;
        let last = &scene.cameras[scene.cameras.len() - 1].pose;
        assert!((frames[0].pose.center() - first.center()).norm() < 1e-9);
        assert!((frames[8].pose.center() - last.center()).norm() < 1e-9);
        // Every interpolated rotation stays orthonormal.
        for cam in &frames {
            let r = cam.pose.rotation;
            let drift = (r.transpose() * r - nalgebra::Matrix3::identity()).norm();
            assert!(drift < 1e-9, "rotation drifted by {drift}");
        }
        assert_eq!(sequence_cameras(&scene.cameras, 1).unwrap().len(), 1);
        assert!(sequence_cameras(&[], 3).is_err());
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = fixture_a();
        let p8 = dir.path().join("a8.png");
        save_png8(&p8, &img).unwrap();
        let loaded = image::open(&p8).unwrap().to_rgb8();
        assert_eq!(loaded.dimensions(), (16, 16));
        let px = loaded.get_pixel(3, 2); // (x=j, y=i)
        for c in 0..3 {
            let expected = (img[[2, 3, c]] * 255.0).round() as u8;
            assert_eq!(px[c], expected);
        }
        let p16 = dir.path().join("a16.png");
        save_png16(&p16, &img).unwrap();
        let loaded16 = image::open(&p16).unwrap().to_rgb16();
        let px = loaded16.get_pixel(3, 2);
        for c in 0..3 {
            let expected = (img[[2, 3, c]] * 65535.0).round() as u16;
            assert_eq!(px[c], expected);
        }
    }
}
