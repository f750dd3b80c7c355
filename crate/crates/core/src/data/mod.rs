//! Pose records, input normalization and dataset files.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"pose2d":[x0,y0,x1,y1,...],"pose3d":[x0,y0,z0,...],"subject":"S1","action":"walk","camera":"c0"}
//! ```
//!
//! `pose2d` holds normalized image coordinates, `pose3d` root-relative
//! millimetres. The three tag fields are optional. Prediction inputs may
//! omit `pose3d`.

mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::Skeleton;

pub use synth::{synth_dataset, synth_with_camera, SynthCamera, SynthConfig};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// `[J, 2]` normalized image coordinates.
    pub pose2d: Tensor,
    /// `[J, 3]` root-relative millimetres.
    pub pose3d: Tensor,
    pub meta: PoseMeta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub samples: Vec<PoseSample>,
    pub split: Split,
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub pose2d: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose3d: Option<Vec<f64>>,
    #[serde(flatten)]
    pub meta: PoseMeta,
}

/// Pixel coordinates to `2p/w − (1, h/w)`: x spans `[−1, 1]` across the
/// image width and the aspect ratio is kept.
pub fn normalize_2d(pixels: &Tensor, width: f64, height: f64) -> Result<Tensor> {
    check_image(width, height)?;
    check_cols(pixels, 2, "normalize_2d")?;
    let offset = [1.0, height / width];
    Ok(map_pairs(pixels, |c, v| 2.0 * v / width - offset[c]))
}

/// Inverse of [`normalize_2d`].
pub fn denormalize_2d(normalized: &Tensor, width: f64, height: f64) -> Result<Tensor> {
    check_image(width, height)?;
    check_cols(normalized, 2, "denormalize_2d")?;
    let offset = [1.0, height / width];
    Ok(map_pairs(normalized, |c, v| (v + offset[c]) * width / 2.0))
}

fn map_pairs(t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(i % 2, *v);
    }
    out
}

fn check_image(width: f64, height: f64) -> Result<()> {
    if width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "image size must be positive, got {width} x {height}"
        )))
    }
}

fn check_cols(t: &Tensor, cols: usize, op: &'static str) -> Result<()> {
    if t.shape().len() == 2 && t.cols() == cols {
        Ok(())
    } else {
        Err(Error::shape(op, t.shape(), &[t.rows(), cols]))
    }
}

/// Subtract the root joint from every joint.
pub fn root_relative_3d(pose: &Tensor, root: usize) -> Result<Tensor> {
    check_cols(pose, 3, "root_relative_3d")?;
    if root >= pose.rows() {
        return Err(Error::Contract(format!(
            "root index {root} out of range for {} joints",
            pose.rows()
        )));
    }
    let origin = pose.row(root).to_vec();
    let mut out = pose.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= origin[i % 3];
    }
    Ok(out)
}

impl PoseSample {
    fn validate(&self, skeleton: &Skeleton) -> std::result::Result<(), String> {
        let j = skeleton.num_joints();
        if self.pose2d.shape() != [j, 2] {
            return Err(format!(
                "pose2d has shape {:?}, expected [{j}, 2]",
                self.pose2d.shape()
            ));
        }
        if self.pose3d.shape() != [j, 3] {
            return Err(format!(
                "pose3d has shape {:?}, expected [{j}, 3]",
                self.pose3d.shape()
            ));
        }
        if !self.pose2d.is_finite() || !self.pose3d.is_finite() {
            return Err("non-finite coordinate".into());
        }
        if self.pose3d.row(skeleton.root()).iter().any(|&v| v != 0.0) {
            return Err("pose3d is not root-relative (root joint is not at the origin)".into());
        }
        Ok(())
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            pose2d: self.pose2d.data().to_vec(),
            pose3d: Some(self.pose3d.data().to_vec()),
            meta: self.meta.clone(),
        }
    }
}

impl PoseRecord {
    /// Parse one line; `index` is the zero-based record number used in errors.
    pub fn parse(line: &str, index: usize) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Record {
            record: index,
            message: e.to_string(),
        })
    }

    /// `[J, 2]` input tensor, checked against the joint count.
    pub fn input(&self, joints: usize, index: usize) -> Result<Tensor> {
        flat_to_tensor(&self.pose2d, joints, 2, "pose2d", index)
    }

    pub fn target(&self, joints: usize, index: usize) -> Result<Option<Tensor>> {
        self.pose3d
            .as_ref()
            .map(|p| flat_to_tensor(p, joints, 3, "pose3d", index))
            .transpose()
    }
}

fn flat_to_tensor(
    flat: &[f64],
    joints: usize,
    width: usize,
    field: &str,
    index: usize,
) -> Result<Tensor> {
    if flat.len() != joints * width {
        return Err(Error::Record {
            record: index,
            message: format!(
                "{field} has {} values ({} joints), skeleton has {joints} joints",
                flat.len(),
                flat.len() as f64 / width as f64
            ),
        });
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Record {
            record: index,
            message: format!("{field} contains a non-finite value"),
        });
    }
    Tensor::new(&[joints, width], flat.to_vec())
}

/// Read every non-blank line of a JSONL file as a [`PoseRecord`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = records.len();
        records.push(PoseRecord::parse(&line, index)?);
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[PoseRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a labelled dataset; records keep file order.
pub fn load_dataset(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<Dataset> {
    let records = read_records(path)?;
    Dataset::from_records(&records, skeleton, Split::Train)
}

impl Dataset {
    pub fn new(skeleton: Skeleton, samples: Vec<PoseSample>, split: Split) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            s.validate(&skeleton)
                .map_err(|message| Error::Record { record: i, message })?;
        }
        Ok(Dataset {
            skeleton,
            samples,
            split,
        })
    }

    pub fn from_records(records: &[PoseRecord], skeleton: &Skeleton, split: Split) -> Result<Self> {
        let j = skeleton.num_joints();
        let mut samples = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let pose3d = r.target(j, i)?.ok_or_else(|| Error::Record {
                record: i,
                message: "missing pose3d".into(),
            })?;
            samples.push(PoseSample {
                pose2d: r.input(j, i)?,
                pose3d,
                meta: r.meta.clone(),
            });
        }
        Dataset::new(skeleton.clone(), samples, split)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    pub fn to_records(&self) -> Vec<PoseRecord> {
        self.samples.iter().map(PoseSample::to_record).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, &self.to_records())
    }
}

/// Externally prepared record in pixel / world-millimetre units, as read by
/// [`convert_raw_record`].
///
/// ```text
/// {"keypoints_2d":[[u,v],...],"joints_3d":[[x,y,z],...],"width":1000,"height":1002,"subject":"S9"}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub keypoints_2d: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints_3d: Option<Vec<[f64; 3]>>,
    pub width: f64,
    pub height: f64,
    #[serde(flatten)]
    pub meta: PoseMeta,
}

/// Normalize pixels and root-centre the world pose of a [`RawRecord`].
pub fn convert_raw_record(
    raw: &RawRecord,
    skeleton: &Skeleton,
    index: usize,
) -> Result<PoseRecord> {
    let j = skeleton.num_joints();
    let with_index = |e: Error| match e {
        Error::Record { .. } => e,
        other => Error::Record {
            record: index,
            message: other.to_string(),
        },
    };
    let flat2: Vec<f64> = raw.keypoints_2d.iter().flatten().copied().collect();
    let pixels = flat_to_tensor(&flat2, j, 2, "keypoints_2d", index)?;
    let pose2d = normalize_2d(&pixels, raw.width, raw.height).map_err(with_index)?;
    let pose3d = match &raw.joints_3d {
        Some(world) => {
            let flat3: Vec<f64> = world.iter().flatten().copied().collect();
            let world = flat_to_tensor(&flat3, j, 3, "joints_3d", index)?;
            Some(
                root_relative_3d(&world, skeleton.root())
                    .map_err(with_index)?
                    .into_data(),
            )
        }
        None => None,
    };
    Ok(PoseRecord {
        pose2d: pose2d.into_data(),
        pose3d,
        meta: raw.meta.clone(),
    })
}
