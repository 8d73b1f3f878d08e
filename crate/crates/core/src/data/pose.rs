use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weak-perspective camera: `p2d = scale * (x, y) + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    /// Pixels per mm.
    pub scale: f64,
    pub offset: [f64; 2],
}

impl Camera {
    pub fn project(&self, p: &[f64; 3]) -> [f64; 2] {
        [self.scale * p[0] + self.offset[0], self.scale * p[1] + self.offset[1]]
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSample {
    /// `J x 2`, pixels.
    pub pose2d: Vec<[f64; 2]>,
    /// `J x 3`, mm, root-relative.
    #[serde(rename = "pose3d")]
    pub pose3d_gt: Vec<[f64; 3]>,
    /// `V x 3`, mm, root-relative.
    #[serde(rename = "mesh", default, skip_serializing_if = "Option::is_none")]
    pub mesh_gt: Option<Vec<[f64; 3]>>,
    pub camera: Camera,
}

impl PoseSample {
    pub fn num_joints(&self) -> usize {
        self.pose2d.len()
    }
}

/// Knobs for corrupting groundtruth 2D poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorSynthConfig {
    /// Jitter std as a fraction of the 2D bounding-box diagonal.
    pub jitter_sigma_frac: f64,
    pub p_swap: f64,
    pub p_miss: f64,
    pub seed: u64,
}

impl Default for ErrorSynthConfig {
    fn default() -> Self {
        Self {
            jitter_sigma_frac: 0.02,
            p_swap: 0.03,
            p_miss: 0.02,
            seed: 0,
        }
    }
}

impl ErrorSynthConfig {
    /// No corruption at all.
    pub fn off() -> Self {
        Self {
            jitter_sigma_frac: 0.0,
            p_swap: 0.0,
            p_miss: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_swap", self.p_swap), ("p_miss", self.p_miss)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if !(self.jitter_sigma_frac >= 0.0) || !self.jitter_sigma_frac.is_finite() {
            return Err(Error::Config(format!(
                "jitter_sigma_frac = {} must be finite and non-negative",
                self.jitter_sigma_frac
            )));
        }
        Ok(())
    }
}

/// Statistics removed by [`normalize_2d_pose`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseNormalization {
    pub mean: [f64; 2],
    pub std: f64,
}

impl PoseNormalization {
    pub fn denormalize(&self, p: &[[f64; 2]]) -> Vec<[f64; 2]> {
        p.iter()
            .map(|q| [q[0] * self.std + self.mean[0], q[1] * self.std + self.mean[1]])
            .collect()
    }
}

/// Subtracts the per-axis mean and divides by the scalar std of all centered coordinates.
pub fn normalize_2d_pose(p2d: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, PoseNormalization)> {
    let j = p2d.len();
    if j < 2 {
        return Err(Error::Degenerate(format!("need at least 2 joints, got {j}")));
    }
    let n = j as f64;
    let mut mean = [0.0; 2];
    for p in p2d {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let var = p2d
        .iter()
        .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
        .sum::<f64>()
        / (2.0 * n);
    let std = var.sqrt();
    if !(std > 1e-8) {
        return Err(Error::Degenerate(format!("2D pose has std {std}")));
    }
    let out = p2d
        .iter()
        .map(|p| [(p[0] - mean[0]) / std, (p[1] - mean[1]) / std])
        .collect();
    Ok((out, PoseNormalization { mean, std }))
}

fn bbox(p: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for q in p {
        for k in 0..2 {
            lo[k] = lo[k].min(q[k]);
            hi[k] = hi[k].max(q[k]);
        }
    }
    (lo, hi)
}

/// Corrupts a groundtruth 2D pose with swaps, misses and jitter.
///
/// Every call consumes the same number of random draws regardless of the
/// knob values, so streams stay aligned across configurations.
pub fn synthesize_pose_errors<R: Rng + ?Sized>(
    p2d_gt: &[[f64; 2]],
    symmetry_pairs: &[(usize, usize)],
    cfg: &ErrorSynthConfig,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let mut out = p2d_gt.to_vec();
    let (lo, hi) = bbox(p2d_gt);
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = [0.6 * (hi[0] - lo[0]), 0.6 * (hi[1] - lo[1])];

    for &(a, b) in symmetry_pairs {
        if a >= out.len() || b >= out.len() {
            return Err(Error::IndexOutOfRange {
                what: "symmetry joint",
                index: a.max(b),
                len: out.len(),
            });
        }
        if rng.gen::<f64>() < cfg.p_swap {
            out.swap(a, b);
        }
    }
    for q in out.iter_mut() {
        let miss = rng.gen::<f64>() < cfg.p_miss;
        let u: [f64; 2] = [rng.gen(), rng.gen()];
        if miss {
            for k in 0..2 {
                q[k] = center[k] + (2.0 * u[k] - 1.0) * half[k];
            }
        }
    }
    let normal = Normal::new(0.0, cfg.jitter_sigma_frac * diag).map_err(|e| Error::Config(format!("jitter: {e}")))?;
    for q in out.iter_mut() {
        for v in q.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}
