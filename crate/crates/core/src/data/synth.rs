//! Seeded synthetic poses: forward kinematics over the skeleton's BFS tree
//! with fixed bone lengths, a random global yaw, and a pinhole projection.
//!
//! Camera frame: +x right, +y up, +z away from the camera. A point `(x, y, z)`
//! lands on pixel `(cx + f·x/z, cy − f·y/z)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize_2d, root_relative_3d, Dataset, PoseMeta, PoseSample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::Skeleton;

/// Bone length used for edges whose skeleton entry has none.
const DEFAULT_BONE_MM: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCamera {
    pub focal: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for SynthCamera {
    fn default() -> Self {
        SynthCamera {
            focal: 1000.0,
            width: 1000.0,
            height: 1000.0,
        }
    }
}

impl SynthCamera {
    /// Project camera-frame millimetres `[J, 3]` to pixels `[J, 2]`.
    pub fn project(&self, points: &Tensor) -> Tensor {
        let (cx, cy) = (self.width / 2.0, self.height / 2.0);
        let mut out = Tensor::zeros(&[points.rows(), 2]);
        for i in 0..points.rows() {
            let p = points.row(i);
            out.set(i, 0, cx + self.focal * p[0] / p[2]);
            out.set(i, 1, cy - self.focal * p[1] / p[2]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub camera: SynthCamera,
    /// Root depth range in millimetres.
    pub depth_mm: (f64, f64),
    /// Lateral root offset bound in millimetres (x and y).
    pub lateral_mm: f64,
    /// Standard deviation of the Gaussian perturbation added to each bone's
    /// unit rest direction before renormalizing.
    pub angle_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            camera: SynthCamera::default(),
            depth_mm: (4000.0, 6000.0),
            lateral_mm: 500.0,
            angle_noise: 0.5,
        }
    }
}

/// Synthetic dataset with default camera and pose ranges.
pub fn synth_dataset(seed: u64, n: usize, skeleton: &Skeleton) -> Result<Dataset> {
    synth_with_camera(seed, n, skeleton, &SynthConfig::default()).map(|(d, _)| d)
}

/// Synthetic dataset plus each sample's camera-frame pose before root
/// centring, so projections can be checked.
pub fn synth_with_camera(
    seed: u64,
    n: usize,
    skeleton: &Skeleton,
    cfg: &SynthConfig,
) -> Result<(Dataset, Vec<Tensor>)> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    let (lo, hi) = cfg.depth_mm;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("invalid depth range {lo}..{hi}")));
    }
    let bones = tree_bones(skeleton);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut camera_poses = Vec::with_capacity(n);
    for _ in 0..n {
        let posed = sample_pose(skeleton, &bones, cfg, &mut rng);
        let pixels = cfg.camera.project(&posed);
        samples.push(PoseSample {
            pose2d: normalize_2d(&pixels, cfg.camera.width, cfg.camera.height)?,
            pose3d: root_relative_3d(&posed, skeleton.root())?,
            meta: PoseMeta {
                subject: Some("synthetic".into()),
                ..PoseMeta::default()
            },
        });
        camera_poses.push(posed);
    }
    Ok((
        Dataset::new(skeleton.clone(), samples, Split::Train)?,
        camera_poses,
    ))
}

struct Bone {
    parent: usize,
    child: usize,
    length: f64,
    rest: [f64; 3],
}

/// Bones in BFS order, each oriented parent to child.
fn tree_bones(skeleton: &Skeleton) -> Vec<Bone> {
    let (parent, order) = skeleton.bfs_tree();
    order
        .iter()
        .filter_map(|&c| parent[c].map(|p| (p, c)))
        .map(|(p, c)| {
            let edge = skeleton
                .find_edge(p, c)
                .expect("tree edges come from the skeleton");
            let sign = if edge.a == p { 1.0 } else { -1.0 };
            let rest = edge
                .rest_dir
                .map_or([0.0, sign, 0.0], |d| d.map(|v| sign * v));
            Bone {
                parent: p,
                child: c,
                length: edge.length_mm.unwrap_or(DEFAULT_BONE_MM),
                rest: unit(rest),
            }
        })
        .collect()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [0.0, 1.0, 0.0]
    } else {
        v.map(|c| c / n)
    }
}

fn sample_pose(
    skeleton: &Skeleton,
    bones: &[Bone],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = yaw.sin_cos();
    let root = [
        rng.random_range(-cfg.lateral_mm..=cfg.lateral_mm),
        rng.random_range(-cfg.lateral_mm..=cfg.lateral_mm),
        rng.random_range(cfg.depth_mm.0..=cfg.depth_mm.1),
    ];
    let mut pose = Tensor::zeros(&[skeleton.num_joints(), 3]);
    for (k, v) in root.iter().enumerate() {
        pose.set(skeleton.root(), k, *v);
    }
    for bone in bones {
        let mut d = bone.rest;
        for v in &mut d {
            let noise: f64 = StandardNormal.sample(rng);
            *v += cfg.angle_noise * noise;
        }
        let d = unit(d);
        // Yaw about the vertical axis.
        let d = [c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]];
        for k in 0..3 {
            let v = pose.get(bone.parent, k) + bone.length * d[k];
            pose.set(bone.child, k, v);
        }
    }
    pose
}
