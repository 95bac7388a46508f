//! COLMAP text format ingest and export (`cameras.txt` / `images.txt`).
//!
//! Only the SIMPLE_RADIAL camera model is accepted — it is what underwater
//! structure-from-motion calibrations produce here — and it maps to
//! `fx = fy = f` plus one radial coefficient.  `images.txt` carries a
//! world-to-camera quaternion `qw qx qy qz`, a translation, a camera id and
//! the image name, with the 2-d point observations on the following line
//! (which we skip on read and leave empty on write).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::dataset::{CameraIntrinsics, Pose};
use crate::{Result, UwError};

/// One calibrated image: intrinsics, pose, and the image filename.
#[derive(Debug, Clone, PartialEq)]
pub struct ColmapEntry {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub name: String,
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> UwError {
    UwError::ColmapParse {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UwError::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn parse_field<T: std::str::FromStr>(
    tok: &str,
    what: &str,
    file: &Path,
    line: usize,
) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| parse_err(file, line, format!("cannot parse {what} from '{tok}'")))
}

/// Reads a COLMAP text calibration, returning entries sorted by image name.
pub fn parse_colmap(cameras_path: &Path, images_path: &Path) -> Result<Vec<ColmapEntry>> {
    // cameras.txt: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]
    let mut cameras: BTreeMap<u64, CameraIntrinsics> = BTreeMap::new();
    for (ln, raw) in read_lines(cameras_path)?.iter().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(parse_err(cameras_path, line_no, "truncated camera line"));
        }
        let id: u64 = parse_field(tok[0], "camera id", cameras_path, line_no)?;
        let model = tok[1];
        if model != "SIMPLE_RADIAL" {
            return Err(parse_err(
                cameras_path,
                line_no,
                format!("unsupported camera model '{model}' (expected SIMPLE_RADIAL)"),
            ));
        }
        if tok.len() != 8 {
            return Err(parse_err(
                cameras_path,
                line_no,
                format!("SIMPLE_RADIAL needs 4 params (f cx cy k1), got {}", tok.len() - 4),
            ));
        }
        let width: usize = parse_field(tok[2], "width", cameras_path, line_no)?;
        let height: usize = parse_field(tok[3], "height", cameras_path, line_no)?;
        let f: f64 = parse_field(tok[4], "focal length", cameras_path, line_no)?;
        let cx: f64 = parse_field(tok[5], "cx", cameras_path, line_no)?;
        let cy: f64 = parse_field(tok[6], "cy", cameras_path, line_no)?;
        let k1: f64 = parse_field(tok[7], "k1", cameras_path, line_no)?;
        let intr = CameraIntrinsics {
            fx: f,
            fy: f,
            cx,
            cy,
            k1,
            width,
            height,
        };
        intr.validate()?;
        if cameras.insert(id, intr).is_some() {
            return Err(parse_err(cameras_path, line_no, format!("duplicate camera id {id}")));
        }
    }
    if cameras.is_empty() {
        return Err(parse_err(cameras_path, 0, "no cameras defined"));
    }

    // images.txt: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME, then one
    // line of point observations we do not use.
    let mut entries: Vec<ColmapEntry> = Vec::new();
    let mut expect_points = false;
    for (ln, raw) in read_lines(images_path)?.iter().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if expect_points {
            // Observation line (possibly empty) — alternation only.
            expect_points = false;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 10 {
            return Err(parse_err(
                images_path,
                line_no,
                format!("image line needs 10 fields, got {}", tok.len()),
            ));
        }
        let qw: f64 = parse_field(tok[1], "qw", images_path, line_no)?;
        let qx: f64 = parse_field(tok[2], "qx", images_path, line_no)?;
        let qy: f64 = parse_field(tok[3], "qy", images_path, line_no)?;
        let qz: f64 = parse_field(tok[4], "qz", images_path, line_no)?;
        let tx: f64 = parse_field(tok[5], "tx", images_path, line_no)?;
        let ty: f64 = parse_field(tok[6], "ty", images_path, line_no)?;
        let tz: f64 = parse_field(tok[7], "tz", images_path, line_no)?;
        let cam_id: u64 = parse_field(tok[8], "camera id", images_path, line_no)?;
        let name = tok[9].to_owned();

        let q = Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(parse_err(
                images_path,
                line_no,
                format!("quaternion norm {norm} deviates from 1 by more than 1e-3"),
            ));
        }
        let rotation = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        let pose = Pose {
            rotation,
            translation: Vector3::new(tx, ty, tz),
        };
        pose.validate()?;
        let intrinsics = *cameras.get(&cam_id).ok_or_else(|| {
            parse_err(images_path, line_no, format!("unknown camera id {cam_id}"))
        })?;
        entries.push(ColmapEntry {
            intrinsics,
            pose,
            name,
        });
        expect_points = true;
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    for pair in entries.windows(2) {
        if pair[0].name == pair[1].name {
            return Err(parse_err(
                images_path,
                0,
                format!("duplicate image name '{}'", pair[0].name),
            ));
        }
    }
    Ok(entries)
}

/// Writes entries back out as `cameras.txt` / `images.txt`.  Identical
/// intrinsics are deduplicated into one camera record.  Numbers use Rust's
/// shortest-roundtrip float formatting, so parse -> serialize -> parse is
/// exact on intrinsics and translations.
pub fn serialize_colmap(
    entries: &[ColmapEntry],
    cameras_path: &Path,
    images_path: &Path,
) -> Result<()> {
    let mut cam_ids: Vec<(CameraIntrinsics, u64)> = Vec::new();
    let mut cameras_txt = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    let mut images_txt =
        String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[]\n");
    for (i, e) in entries.iter().enumerate() {
        if e.name.chars().any(char::is_whitespace) {
            return Err(UwError::InvalidScene(format!(
                "image name '{}' contains whitespace",
                e.name
            )));
        }
        let cam_id = match cam_ids.iter().find(|(c, _)| c == &e.intrinsics) {
            Some((_, id)) => *id,
            None => {
                let id = cam_ids.len() as u64 + 1;
                cam_ids.push((e.intrinsics, id));
                let c = &e.intrinsics;
                if (c.fx - c.fy).abs() > 1e-12 {
                    return Err(UwError::InvalidScene(format!(
                        "SIMPLE_RADIAL requires fx = fy, got {} vs {}",
                        c.fx, c.fy
                    )));
                }
                writeln!(
                    cameras_txt,
                    "{id} SIMPLE_RADIAL {} {} {} {} {} {}",
                    c.width, c.height, c.fx, c.cx, c.cy, c.k1
                )
                .expect("string write");
                id
            }
        };
        let mut q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            e.pose.rotation,
        ))
        .into_inner();
        if q.w < 0.0 {
            q = -q;
        }
        let t = e.pose.translation;
        writeln!(
            images_txt,
            "{} {} {} {} {} {} {} {} {cam_id} {}\n",
            i + 1,
            q.w,
            q.i,
            q.j,
            q.k,
            t.x,
            t.y,
            t.z,
            e.name
        )
        .expect("string write");
    }
    std::fs::write(cameras_path, cameras_txt)
        .map_err(|e| UwError::io(cameras_path.display().to_string(), e))?;
    std::fs::write(images_path, images_txt)
        .map_err(|e| UwError::io(images_path.display().to_string(), e))?;
    Ok(())
}

/// Largest absolute difference between two poses over rotation entries and
/// translation components.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let dr = (a.rotation - b.rotation).abs().max();
    let dt = (a.translation - b.translation).abs().max();
    dr.max(dt)
}
