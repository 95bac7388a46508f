//! Scene directory I/O.
//!
//! A scene on disk is a directory holding a flat key-value `scene.cfg`, a
//! COLMAP text model (`cameras.txt` / `images.txt`) and 8-bit image files.
//! Loading produces a [`SceneDataset`] with pixel values in `[0,1]`
//! (`v / 255`, colors taken as-is); saving quantizes back to 8-bit PNG.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;
use std::collections::BTreeSet;
use std::path::Path;

use crate::dataset::{parse_colmap, serialize_colmap, Camera, ColmapEntry, SceneDataset, SceneSplit};
use crate::{Result, UwError};

/// Contents of `scene.cfg`: depth bounds, difficulty label, and the
/// directories (relative to the scene root) holding images and the COLMAP
/// model.  Absent depth bounds are inferred from camera geometry at load.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub split: SceneSplit,
    pub image_dir: String,
    pub colmap_dir: String,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            near: None,
            far: None,
            split: SceneSplit::Medium,
            image_dir: "images".into(),
            colmap_dir: "colmap".into(),
        }
    }
}

impl SceneConfig {
    /// Parses `key = value` lines; `#` comments and blank lines are
    /// ignored, unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = SceneConfig::default();
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UwError::InvalidConfig(format!("scene.cfg line {}: expected key = value", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(UwError::InvalidConfig(format!(
                    "scene.cfg line {}: repeated key '{key}'",
                    ln + 1
                )));
            }
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse::<f64>().map_err(|_| {
                    UwError::InvalidConfig(format!(
                        "scene.cfg line {}: '{v}' is not a number",
                        ln + 1
                    ))
                })
            };
            match key {
                "near" => config.near = Some(parse_f64(value)?),
                "far" => config.far = Some(parse_f64(value)?),
                "split" => config.split = SceneSplit::parse(value)?,
                "image_dir" => config.image_dir = value.to_string(),
                "colmap_dir" => config.colmap_dir = value.to_string(),
                other => {
                    return Err(UwError::InvalidConfig(format!(
                        "scene.cfg line {}: unknown key '{other}'",
                        ln + 1
                    )));
                }
            }
        }
        if let (Some(near), Some(far)) = (config.near, config.far) {
            if !(0.0 < near && near < far) {
                return Err(UwError::InvalidConfig(format!(
                    "scene.cfg: need 0 < near < far, got near={near} far={far}"
                )));
            }
        }
        Ok(config)
    }

    /// Renders the config back to the text format accepted by
    /// [`SceneConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(near) = self.near {
            out.push_str(&format!("near = {near}\n"));
        }
        if let Some(far) = self.far {
            out.push_str(&format!("far = {far}\n"));
        }
        out.push_str(&format!("split = {}\n", self.split.as_str()));
        out.push_str(&format!("image_dir = {}\n", self.image_dir));
        out.push_str(&format!("colmap_dir = {}\n", self.colmap_dir));
        out
    }
}

/// Least-squares intersection of the cameras' optical axes — the point the
/// rig is collectively looking at, used as the scene centroid when no
/// depth bounds are configured.  `None` when the axes are (near-)parallel
/// and no finite intersection exists.
fn focus_point(cameras: &[Camera]) -> Option<Vector3<f64>> {
    // Minimize sum_i | (I - d_i d_i^T)(p - c_i) |^2 over p.
    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    for cam in cameras {
        let d = cam.pose.optical_axis();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * cam.pose.center();
    }
    let scaled = a / cameras.len() as f64;
    if scaled.determinant().abs() < 1e-9 {
        return None;
    }
    a.lu().solve(&b).map(|p| Vector3::new(p[0], p[1], p[2]))
}

/// Depth bounds inferred from camera geometry: (0.05x, 5x) the median
/// camera distance to the estimated scene centroid.
fn fallback_depth_bounds(cameras: &[Camera]) -> Result<(f64, f64)> {
    let centroid = focus_point(cameras).ok_or_else(|| {
        UwError::InvalidScene(
            "cannot infer depth bounds: camera optical axes are parallel; \
             set near/far in scene.cfg"
                .into(),
        )
    })?;
    let mut dists: Vec<f64> = cameras
        .iter()
        .map(|c| (c.pose.center() - centroid).norm())
        .collect();
    dists.sort_by(|x, y| x.partial_cmp(y).expect("camera distances are finite"));
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median <= 0.0 {
        return Err(UwError::InvalidScene(
            "cannot infer depth bounds: cameras coincide with the scene \
             centroid; set near/far in scene.cfg"
                .into(),
        ));
    }
    Ok((0.05 * median, 5.0 * median))
}

fn is_supported_image_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
}

/// Decodes one 8-bit image file into an `[H, W, 3]` array in `[0,1]`.
fn load_image(path: &Path) -> Result<Array3<f64>> {
    let dynamic = image::open(path).map_err(|e| UwError::image(path.display().to_string(), e))?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Quantizes an `[H, W, 3]` array in `[0,1]` to 8-bit and writes a PNG.
fn save_image(path: &Path, img: &ndarray::ArrayView3<f64>) -> Result<()> {
    let (h, w, _) = img.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in rgb.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = (img[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0);
            pixel.0[c] = v as u8;
        }
    }
    rgb.save(path)
        .map_err(|e| UwError::image(path.display().to_string(), e))
}

/// Loads a scene directory (`scene.cfg` + COLMAP text + images) into a
/// validated [`SceneDataset`].  A missing `scene.cfg` means all defaults;
/// missing depth bounds fall back to [`fallback_depth_bounds`].
pub fn load_scene(root: &Path) -> Result<SceneDataset> {
    let cfg_path = root.join("scene.cfg");
    let config = if cfg_path.exists() {
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| UwError::io(cfg_path.display().to_string(), e))?;
        SceneConfig::parse(&text)?
    } else {
        SceneConfig::default()
    };
    let colmap_dir = root.join(&config.colmap_dir);
    let entries = parse_colmap(&colmap_dir.join("cameras.txt"), &colmap_dir.join("images.txt"))?;
    if entries.is_empty() {
        return Err(UwError::InvalidScene(format!(
            "no calibrated images in {}",
            colmap_dir.display()
        )));
    }

    let image_dir = root.join(&config.image_dir);
    let mut images = Vec::with_capacity(entries.len());
    let mut cameras = Vec::with_capacity(entries.len());
    let mut view_ids = Vec::with_capacity(entries.len());
    for entry in &entries {
        if !is_supported_image_name(&entry.name) {
            return Err(UwError::InvalidScene(format!(
                "unsupported image format for '{}': only PNG and JPEG are readable",
                entry.name
            )));
        }
        let img = load_image(&image_dir.join(&entry.name))?;
        let (h, w, _) = img.dim();
        if w != entry.intrinsics.width || h != entry.intrinsics.height {
            return Err(UwError::InvalidScene(format!(
                "image '{}' is {w}x{h} but its camera says {}x{}",
                entry.name, entry.intrinsics.width, entry.intrinsics.height
            )));
        }
        images.push(img);
        cameras.push(Camera {
            intrinsics: entry.intrinsics,
            pose: entry.pose.clone(),
        });
        view_ids.push(entry.name.clone());
    }

    let (near, far) = match (config.near, config.far) {
        (Some(near), Some(far)) => (near, far),
        (near, far) => {
            let (fallback_near, fallback_far) = fallback_depth_bounds(&cameras)?;
            (near.unwrap_or(fallback_near), far.unwrap_or(fallback_far))
        }
    };
    let dataset = SceneDataset {
        images,
        cameras,
        view_ids,
        near,
        far,
        split: config.split,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset as a loadable scene directory: 8-bit PNGs under
/// `images/`, a COLMAP text model under `colmap/`, and a `scene.cfg`
/// pinning the depth bounds and split.  View ids keep their names but the
/// extension becomes `.png` (images are always re-encoded as PNG).
pub fn save_scene(root: &Path, dataset: &SceneDataset) -> Result<()> {
    dataset.validate()?;
    let config = SceneConfig {
        near: Some(dataset.near),
        far: Some(dataset.far),
        split: dataset.split,
        ..Default::default()
    };
    let image_dir = root.join(&config.image_dir);
    let colmap_dir = root.join(&config.colmap_dir);
    for dir in [&image_dir, &colmap_dir] {
        std::fs::create_dir_all(dir).map_err(|e| UwError::io(dir.display().to_string(), e))?;
    }

    let mut entries = Vec::with_capacity(dataset.view_count());
    for i in 0..dataset.view_count() {
        let name = png_name(&dataset.view_ids[i]);
        save_image(&image_dir.join(&name), &dataset.images[i].view())?;
        entries.push(ColmapEntry {
            intrinsics: dataset.cameras[i].intrinsics,
            pose: dataset.cameras[i].pose.clone(),
            name,
        });
    }
    serialize_colmap(
        &entries,
        &colmap_dir.join("cameras.txt"),
        &colmap_dir.join("images.txt"),
    )?;
    let cfg_path = root.join("scene.cfg");
    std::fs::write(&cfg_path, config.to_text())
        .map_err(|e| UwError::io(cfg_path.display().to_string(), e))
}

/// Swaps the file extension for `.png` (appends it when there is none).
pub(crate) fn png_name(id: &str) -> String {
    match id.rsplit_once('.') {
        Some((stem, _)) if !stem.is_empty() => format!("{stem}.png"),
        _ => format!("{id}.png"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_toy_scene, ToySceneConfig};

    #[test]
    fn config_text_roundtrips() {
        let config = SceneConfig {
            near: Some(0.25),
            far: Some(12.5),
            split: SceneSplit::Hard,
            image_dir: "frames".into(),
            colmap_dir: "sparse".into(),
        };
        let back = SceneConfig::parse(&config.to_text()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn config_parse_handles_comments_defaults_and_errors() {
        let config = SceneConfig::parse("# note\n\nnear = 1.5\n").unwrap();
        assert_eq!(config.near, Some(1.5));
        assert_eq!(config.far, None);
        assert_eq!(config.split, SceneSplit::Medium);
        assert_eq!(config.image_dir, "images");

        assert!(SceneConfig::parse("banana = 3\n").is_err());
        assert!(SceneConfig::parse("near = 1\nnear = 2\n").is_err());
        assert!(SceneConfig::parse("near = soon\n").is_err());
        assert!(SceneConfig::parse("near = 5\nfar = 1\n").is_err());
        assert!(SceneConfig::parse("split = impossible\n").is_err());
    }

    #[test]
    fn toy_scene_roundtrips_through_disk() {
        let (dataset, _) = make_toy_scene(&ToySceneConfig {
            views: 3,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &dataset).unwrap();
        let back = load_scene(dir.path()).unwrap();

        assert_eq!(back.view_count(), 3);
        assert_eq!(back.near, dataset.near);
        assert_eq!(back.far, dataset.far);
        assert_eq!(back.split, dataset.split);
        assert_eq!(back.view_ids, dataset.view_ids);
        for i in 0..3 {
            // Pixels survive up to 8-bit quantization...
            let orig = &dataset.images[i];
            let loaded = &back.images[i];
            for (a, b) in orig.iter().zip(loaded.iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "pixel {a} vs {b}");
            }
            // ...and a second save/load is lossless.
            let dir2 = tempfile::tempdir().unwrap();
            save_scene(dir2.path(), &back).unwrap();
            let again = load_scene(dir2.path()).unwrap();
            assert_eq!(again.images[i], back.images[i]);
            // Poses survive the text roundtrip.
            let dc = (back.cameras[i].pose.center() - dataset.cameras[i].pose.center()).norm();
            assert!(dc < 1e-9, "camera center drift {dc}");
        }
    }

    #[test]
    fn missing_depth_bounds_fall_back_to_median_focus_distance() {
        let (dataset, _) = make_toy_scene(&ToySceneConfig {
            views: 5,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &dataset).unwrap();
        // Rewrite the config without depth bounds.
        std::fs::write(dir.path().join("scene.cfg"), "split = synthetic\n").unwrap();
        let back = load_scene(dir.path()).unwrap();

        // Every toy camera looks at the plane anchor (0, 0, 4), so the
        // focus point is exactly that anchor; recompute the expected
        // median distance independently.
        let mut dists: Vec<f64> = dataset
            .cameras
            .iter()
            .map(|c| (c.pose.center() - Vector3::new(0.0, 0.0, 4.0)).norm())
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = dists[2];
        assert!((back.near - 0.05 * median).abs() < 1e-6, "near {}", back.near);
        assert!((back.far - 5.0 * median).abs() < 1e-6, "far {}", back.far);
    }

    #[test]
    fn parallel_axes_cannot_infer_bounds() {
        let (mut dataset, _) = make_toy_scene(&ToySceneConfig {
            views: 3,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        // Make every camera share one orientation: axes never intersect.
        let pose = dataset.cameras[0].pose.clone();
        for (i, cam) in dataset.cameras.iter_mut().enumerate() {
            cam.pose.rotation = pose.rotation;
            cam.pose.translation = pose.translation + Vector3::new(i as f64, 0.0, 0.0);
        }
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &dataset).unwrap();
        std::fs::write(dir.path().join("scene.cfg"), "split = synthetic\n").unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(err.to_string().contains("parallel"), "{err}");
    }

    #[test]
    fn unsupported_extension_and_size_mismatch_are_rejected() {
        let (dataset, _) = make_toy_scene(&ToySceneConfig {
            views: 2,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &dataset).unwrap();

        // Point images.txt at a name with a format we refuse to read.
        let images_txt = dir.path().join("colmap/images.txt");
        let patched = std::fs::read_to_string(&images_txt)
            .unwrap()
            .replace("view_000.png", "view_000.bmp");
        std::fs::write(&images_txt, patched).unwrap();
        std::fs::rename(
            dir.path().join("images/view_000.png"),
            dir.path().join("images/view_000.bmp"),
        )
        .unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(err.to_string().contains("PNG and JPEG"), "{err}");

        // Shrink one image so it no longer matches its camera.
        let dir2 = tempfile::tempdir().unwrap();
        save_scene(dir2.path(), &dataset).unwrap();
        let small = image::RgbImage::new(8, 8);
        small.save(dir2.path().join("images/view_001.png")).unwrap();
        let err = load_scene(dir2.path()).unwrap_err();
        assert!(err.to_string().contains("8x8"), "{err}");
    }

    #[test]
    fn jpeg_images_load() {
        let (dataset, _) = make_toy_scene(&ToySceneConfig {
            views: 2,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &dataset).unwrap();
        // Re-encode one view as JPEG and rename it in the COLMAP model.
        let png = image::open(dir.path().join("images/view_000.png")).unwrap();
        png.to_rgb8()
            .save(dir.path().join("images/view_000.jpg"))
            .unwrap();
        std::fs::remove_file(dir.path().join("images/view_000.png")).unwrap();
        let images_txt = dir.path().join("colmap/images.txt");
        let patched = std::fs::read_to_string(&images_txt)
            .unwrap()
            .replace("view_000.png", "view_000.jpg");
        std::fs::write(&images_txt, patched).unwrap();

        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.view_count(), 2);
        // JPEG is lossy; just require the decode to be plausibly close.
        let mut max_err: f64 = 0.0;
        for (a, b) in back.images[0].iter().zip(dataset.images[0].iter()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err < 0.25, "jpeg decode far off: {max_err}");
    }

    #[test]
    fn png_name_swaps_extensions() {
        assert_eq!(png_name("a.jpg"), "a.png");
        assert_eq!(png_name("a.b.jpeg"), "a.b.png");
        assert_eq!(png_name("plain"), "plain.png");
        assert_eq!(png_name(".hidden"), ".hidden.png");
    }
}
