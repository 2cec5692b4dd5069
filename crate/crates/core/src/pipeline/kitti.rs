//! KITTI-style files: `velodyne/*.bin` point records and `label_2/*.txt`
//! object lines.
//!
//! Label lines hold `type truncated occluded alpha x1 y1 x2 y2 h w l x y z
//! rotation_y [score]`. How `(x, y, z, rotation_y)` relate to LiDAR boxes
//! depends on [`Calibration`].

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Box3D, Detection, GroundTruth, LabeledScene, PointCloud};
use crate::scalar::wrap_angle;

pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_id(name: &str) -> Option<u32> {
    CLASS_NAMES.iter().position(|&n| n == name).map(|i| i as u32)
}

pub fn class_name(id: u32) -> &'static str {
    CLASS_NAMES.get(id as usize).copied().unwrap_or("Unknown")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Label location is the LiDAR-frame box center, `rotation_y` is the
    /// LiDAR yaw. Used for synthetic scenes.
    Identity,
    /// Fixed camera-to-LiDAR axis change without translation: LiDAR
    /// `(x, y, z) = (z_c, -x_c, -y_c)`, location at the box bottom, yaw
    /// `= -rotation_y - pi/2`.
    KittiAxes,
}

impl Calibration {
    fn to_box(self, hwl: [f64; 3], loc: [f64; 3], ry: f64) -> Result<Box3D<f64>> {
        let [h, w, l] = hwl;
        match self {
            Calibration::Identity => Box3D::new(loc, [l, w, h], ry),
            Calibration::KittiAxes => Box3D::new([loc[2], -loc[0], -loc[1] + h / 2.0], [l, w, h], -ry - FRAC_PI_2),
        }
    }

    fn from_box(self, b: &Box3D<f64>) -> ([f64; 3], [f64; 3], f64) {
        let [l, w, h] = b.size();
        let c = b.center();
        match self {
            Calibration::Identity => ([h, w, l], c, b.yaw()),
            Calibration::KittiAxes => ([h, w, l], [-c[1], -(c[2] - h / 2.0), c[0]], wrap_angle(-b.yaw() - FRAC_PI_2)),
        }
    }
}

/// Little-endian f32 records `(x, y, z, intensity)`.
pub fn read_points(path: &Path) -> Result<PointCloud<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of 16-byte point records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut pos = Vec::with_capacity(n);
    let mut feat = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let v: Vec<f64> = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        pos.push([v[0], v[1], v[2]]);
        feat.push(v[3]);
    }
    PointCloud::new(pos, feat, 1)
}

/// Writes the first feature channel as intensity, everything as f32.
pub fn write_points(path: &Path, cloud: &PointCloud<f64>) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.positions().iter().enumerate() {
        for v in [p[0], p[1], p[2], cloud.feature(i)[0]] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelLine {
    pub class_id: u32,
    pub bbox: Box3D<f64>,
    pub score: Option<f64>,
}

/// Parses label text. Lines whose type is not a known class are skipped.
pub fn parse_labels(text: &str, calib: Calibration, origin: &str) -> Result<Vec<LabelLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.into(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(err(format!("expected 15 or 16 fields, found {}", fields.len())));
        }
        let nums = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: '{s}'"))))
            .collect::<Result<Vec<f64>>>()?;
        let Some(cid) = class_id(fields[0]) else {
            continue;
        };
        let bbox = calib
            .to_box([nums[7], nums[8], nums[9]], [nums[10], nums[11], nums[12]], nums[13])
            .map_err(|e| err(e.to_string()))?;
        out.push(LabelLine {
            class_id: cid,
            bbox,
            score: nums.get(14).copied(),
        });
    }
    Ok(out)
}

pub fn format_label(class_id: u32, b: &Box3D<f64>, score: Option<f64>, calib: Calibration) -> String {
    let (hwl, loc, ry) = calib.from_box(b);
    let mut s = format!(
        "{} 0 0 0 0 0 0 0 {} {} {} {} {} {} {}",
        class_name(class_id),
        hwl[0],
        hwl[1],
        hwl[2],
        loc[0],
        loc[1],
        loc[2],
        ry
    );
    if let Some(sc) = score {
        let _ = write!(s, " {sc}");
    }
    s
}

pub fn load_kitti(bin: &Path, label: &Path, calib: Calibration) -> Result<LabeledScene<f64>> {
    let cloud = read_points(bin)?;
    let text = fs::read_to_string(label)?;
    let ground_truths = parse_labels(&text, calib, &label.display().to_string())?
        .into_iter()
        .map(|l| GroundTruth {
            bbox: l.bbox,
            class_id: l.class_id,
        })
        .collect();
    Ok(LabeledScene { cloud, ground_truths })
}

pub fn write_labels(path: &Path, gts: &[GroundTruth<f64>], calib: Calibration) -> Result<()> {
    let mut text = String::new();
    for g in gts {
        text.push_str(&format_label(g.class_id, &g.bbox, None, calib));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_detections(path: &Path, dets: &[Detection<f64>], calib: Calibration) -> Result<()> {
    let mut text = String::new();
    for d in dets {
        text.push_str(&format_label(d.class_id, &d.bbox, Some(d.score), calib));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_detections(path: &Path, calib: Calibration) -> Result<Vec<Detection<f64>>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path)?;
    parse_labels(&text, calib, &origin)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let score = l.score.ok_or_else(|| Error::Parse {
                path: origin.clone(),
                line: i + 1,
                msg: "detection line lacks a score".into(),
            })?;
            Detection::new(l.bbox, score, l.class_id)
        })
        .collect()
}

/// Directory with `velodyne/`, `label_2/` and optionally `pred/`
/// subdirectories holding `NNNNNN.bin` / `NNNNNN.txt` files.
#[derive(Debug, Clone)]
pub struct SceneDir {
    pub root: PathBuf,
}

impl SceneDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn bin_path(&self, i: usize) -> PathBuf {
        self.root.join("velodyne").join(format!("{i:06}.bin"))
    }

    pub fn label_path(&self, i: usize) -> PathBuf {
        self.root.join("label_2").join(format!("{i:06}.txt"))
    }

    pub fn pred_path(&self, i: usize) -> PathBuf {
        self.root.join("pred").join(format!("{i:06}.txt"))
    }

    pub fn write_scene(&self, i: usize, scene: &LabeledScene<f64>, calib: Calibration) -> Result<()> {
        fs::create_dir_all(self.root.join("velodyne"))?;
        fs::create_dir_all(self.root.join("label_2"))?;
        write_points(&self.bin_path(i), &scene.cloud)?;
        write_labels(&self.label_path(i), &scene.ground_truths, calib)
    }

    pub fn load_scene(&self, i: usize, calib: Calibration) -> Result<LabeledScene<f64>> {
        load_kitti(&self.bin_path(i), &self.label_path(i), calib)
    }

    /// Scene indices present under `velodyne/`, sorted.
    pub fn indices(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("velodyne"))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "bin") {
                if let Some(i) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -1.0, 0.25, 8.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let c = read_points(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.positions()[1], [-1.0, 0.25, 8.0]);
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(read_points(&p), Err(Error::Format(_))));
    }

    #[test]
    fn label_errors_carry_line_numbers() {
        let text = "Car 0 0 0 0 0 0 0 1.5 1.6 4 10 2 -1 0.1\nCar 0 0 zero 0 0 0 0 1.5 1.6 4 10 2 -1 0.1\n";
        match parse_labels(text, Calibration::Identity, "x.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_labels("", Calibration::Identity, "e").unwrap().is_empty());
        let skipped = parse_labels("DontCare -1 -1 0 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n", Calibration::Identity, "d").unwrap();
        assert!(skipped.is_empty());
    }

    #[test]
    fn axis_calibration_round_trip() {
        let b = Box3D::new([20.0, -3.0, -0.8], [4.0, 1.7, 1.5], 0.4).unwrap();
        let line = format_label(0, &b, Some(0.75), Calibration::KittiAxes);
        let back = parse_labels(&line, Calibration::KittiAxes, "l").unwrap();
        let r = &back[0].bbox;
        for a in 0..3 {
            assert!((r.center()[a] - b.center()[a]).abs() < 1e-12);
        }
        assert!(wrap_angle(r.yaw() - b.yaw()).abs() < 1e-12);
        assert_eq!(back[0].score, Some(0.75));
    }
}
