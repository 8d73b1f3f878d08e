//! Evaluation metrics on plain `f64` point sets in mm.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points
            .iter()
            .map(|p| {
                let q = self.rotation * Vector3::from(*p) * self.scale + self.translation;
                [q.x, q.y, q.z]
            })
            .collect()
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a, 3], &[b, 3]));
    }
    if a == 0 {
        return Err(Error::Degenerate(format!("{op}: empty point set")));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_distance(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    same_len("mean_distance", p.len(), q.len())?;
    Ok(p.iter().zip(q).map(|(a, b)| dist(a, b)).sum::<f64>() / p.len() as f64)
}

fn subtract(p: &[[f64; 3]], r: [f64; 3]) -> Vec<[f64; 3]> {
    p.iter().map(|a| [a[0] - r[0], a[1] - r[1], a[2] - r[2]]).collect()
}

/// Mean per-joint position error after aligning the root joints.
pub fn mpjpe(p: &[[f64; 3]], gt: &[[f64; 3]], root_index: usize) -> Result<f64> {
    same_len("mpjpe", p.len(), gt.len())?;
    if root_index >= p.len() {
        return Err(Error::IndexOutOfRange {
            what: "root joint",
            index: root_index,
            len: p.len(),
        });
    }
    mean_distance(&subtract(p, p[root_index]), &subtract(gt, gt[root_index]))
}

fn centroid(p: &[[f64; 3]]) -> Vector3<f64> {
    p.iter().map(|a| Vector3::from(*a)).sum::<Vector3<f64>>() / p.len() as f64
}

/// Least-squares similarity transform taking `p` onto `gt`, without reflection.
pub fn procrustes_align(p: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<SimilarityTransform> {
    same_len("procrustes_align", p.len(), gt.len())?;
    if p.len() < 3 {
        return Err(Error::Degenerate(format!(
            "procrustes needs >= 3 points, got {}",
            p.len()
        )));
    }
    let mu_p = centroid(p);
    let mu_g = centroid(gt);
    let mut var_p = 0.0;
    let mut cov = Matrix3::zeros();
    for (a, b) in p.iter().zip(gt) {
        let x = Vector3::from(*a) - mu_p;
        let y = Vector3::from(*b) - mu_g;
        var_p += x.norm_squared();
        cov += y * x.transpose();
    }
    if var_p < 1e-18 {
        return Err(Error::Degenerate("procrustes source has zero variance".into()));
    }
    // cov = sum y x^T = U S V^T; the optimal rotation is U D V^T.
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let s = svd.singular_values;
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d[s.imin()] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = s.dot(&d) / var_p;
    let translation = mu_g - rotation * mu_p * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// MPJPE after Procrustes alignment of `p` onto `gt`.
pub fn pa_mpjpe(p: &[[f64; 3]], gt: &[[f64; 3]], root_index: usize) -> Result<f64> {
    if root_index >= p.len() {
        return Err(Error::IndexOutOfRange {
            what: "root joint",
            index: root_index,
            len: p.len(),
        });
    }
    let t = procrustes_align(p, gt)?;
    mean_distance(&t.apply(p), gt)
}

fn regress_root(m: &[[f64; 3]], row: &[f64]) -> [f64; 3] {
    let mut r = [0.0; 3];
    for (w, v) in row.iter().zip(m) {
        for k in 0..3 {
            r[k] += w * v[k];
        }
    }
    r
}

/// Mean per-vertex error after aligning the regressed root joints.
pub fn mpvpe(m: &[[f64; 3]], gt: &[[f64; 3]], root_regressor_row: &[f64]) -> Result<f64> {
    same_len("mpvpe", m.len(), gt.len())?;
    if root_regressor_row.len() != m.len() {
        return Err(Error::shape("mpvpe", &[m.len()], &[root_regressor_row.len()]));
    }
    mean_distance(
        &subtract(m, regress_root(m, root_regressor_row)),
        &subtract(gt, regress_root(gt, root_regressor_row)),
    )
}

fn fraction_within(from: &[[f64; 3]], to: &[[f64; 3]], tau: f64) -> f64 {
    let hits = from.iter().filter(|a| to.iter().any(|b| dist(a, b) <= tau)).count();
    hits as f64 / from.len() as f64
}

/// Harmonic mean of vertex precision and recall at threshold `tau` mm.
pub fn f_score(m: &[[f64; 3]], gt: &[[f64; 3]], tau: f64, align: bool) -> Result<f64> {
    if m.is_empty() || gt.is_empty() {
        return Err(Error::Degenerate("f_score on an empty mesh".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("f_score threshold {tau} must be > 0")));
    }
    let aligned;
    let m = if align {
        aligned = procrustes_align(m, gt)?.apply(m);
        &aligned[..]
    } else {
        m
    };
    let precision = fraction_within(m, gt, tau);
    let recall = fraction_within(gt, m, tau);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Dataset-level metric means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mpvpe_mm: Option<f64>,
    /// Keyed by threshold in mm.
    pub f_at: BTreeMap<String, f64>,
    pub samples: usize,
}

/// Threshold key used in [`MetricsReport::f_at`].
pub fn tau_key(tau: f64) -> String {
    format!("{tau}")
}

impl MetricsReport {
    /// One `key: value` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s, "mpjpe_mm: {:.4}", self.mpjpe_mm);
        let _ = writeln!(s, "pa_mpjpe_mm: {:.4}", self.pa_mpjpe_mm);
        if let Some(v) = self.mpvpe_mm {
            let _ = writeln!(s, "mpvpe_mm: {v:.4}");
        }
        for (tau, v) in &self.f_at {
            let _ = writeln!(s, "f_at_{tau}: {v:.4}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-500.0..500.0),
                    rng.gen_range(-500.0..500.0),
                    rng.gen_range(-500.0..500.0),
                ]
            })
            .collect()
    }

    fn transform(p: &[[f64; 3]], s: f64, r: &Rotation3<f64>, t: [f64; 3]) -> Vec<[f64; 3]> {
        p.iter()
            .map(|a| {
                let q = r * Vector3::from(*a) * s + Vector3::from(t);
                [q.x, q.y, q.z]
            })
            .collect()
    }

    #[test]
    fn mpjpe_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_points(&mut rng, 12);
        let shifted: Vec<_> = gt.iter().map(|p| [p[0] + 7.0, p[1] - 3.0, p[2] + 1.0]).collect();
        assert!(mpjpe(&shifted, &gt, 0).unwrap() < 1e-12);
        let mut off = gt.clone();
        off[5][1] += 6.0;
        assert!((mpjpe(&off, &gt, 0).unwrap() - 0.5).abs() < 1e-12);
        assert!(mpjpe(&off, &gt, 12).is_err());

        let p = random_points(&mut rng, 12);
        let mut want = 0.0;
        for j in 0..12 {
            let mut d = 0.0;
            for k in 0..3 {
                d += ((p[j][k] - p[3][k]) - (gt[j][k] - gt[3][k])).powi(2);
            }
            want += d.sqrt();
        }
        assert!((mpjpe(&p, &gt, 3).unwrap() - want / 12.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_exact_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_points(&mut rng, 10);
        let r0 = Rotation3::from_euler_angles(0.4, -0.7, 1.9);
        let gt = transform(&p, 2.0, &r0, [10.0, -20.0, 5.0]);
        let t = procrustes_align(&p, &gt).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-9);
        assert!((t.rotation - r0.matrix()).abs().max() < 1e-9);
        assert!((t.translation - Vector3::new(10.0, -20.0, 5.0)).abs().max() < 1e-9);
        let id = procrustes_align(&p, &p).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-9);
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation.abs().max() < 1e-9);
    }

    #[test]
    fn procrustes_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_points(&mut rng, 8);
        let mirrored: Vec<_> = p.iter().map(|a| [-a[0], a[1], a[2]]).collect();
        let t = procrustes_align(&p, &mirrored).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn procrustes_rejects_degenerate() {
        let p = vec![[1.0, 2.0, 3.0]; 4];
        let gt = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(procrustes_align(&p, &gt).is_err());
        assert!(procrustes_align(&gt[..2], &gt[..2]).is_err());
    }

    #[test]
    fn pa_mpjpe_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let gt = random_points(&mut rng, 12);
            let p = random_points(&mut rng, 12);
            let pa = pa_mpjpe(&p, &gt, 0).unwrap();
            // Direct evaluation of the fitted transform.
            let t = procrustes_align(&p, &gt).unwrap();
            let direct: f64 = t.apply(&p).iter().zip(&gt).map(|(a, b)| dist(a, b)).sum::<f64>() / 12.0;
            assert!((pa - direct).abs() < 1e-9);
            assert!(pa <= mpjpe(&p, &gt, 0).unwrap() + 1e-9);
        }
        let gt = random_points(&mut rng, 12);
        let r = Rotation3::from_euler_angles(1.0, 0.2, -0.4);
        let p = transform(&gt, 0.5, &r, [3.0, 4.0, 5.0]);
        assert!(pa_mpjpe(&p, &gt, 0).unwrap() < 1e-9);
    }

    #[test]
    fn mpvpe_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_points(&mut rng, 6);
        let row = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(mpvpe(&gt, &gt, &row).unwrap(), 0.0);
        let shifted: Vec<_> = gt.iter().map(|p| [p[0] + 1.0, p[1] + 2.0, p[2] + 3.0]).collect();
        assert!(mpvpe(&shifted, &gt, &row).unwrap() < 1e-12);
        let m = random_points(&mut rng, 6);
        let rm: Vec<f64> = (0..3).map(|k| 0.5 * (m[0][k] + m[1][k])).collect();
        let rg: Vec<f64> = (0..3).map(|k| 0.5 * (gt[0][k] + gt[1][k])).collect();
        let mut want = 0.0;
        for v in 0..6 {
            want += (0..3)
                .map(|k| ((m[v][k] - rm[k]) - (gt[v][k] - rg[k])).powi(2))
                .sum::<f64>()
                .sqrt();
        }
        assert!((mpvpe(&m, &gt, &row).unwrap() - want / 6.0).abs() < 1e-9);
    }

    #[test]
    fn f_score_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_points(&mut rng, 20);
        for tau in [0.1, 5.0, 15.0] {
            assert_eq!(f_score(&gt, &gt, tau, false).unwrap(), 1.0);
            assert!((f_score(&gt, &gt, tau, true).unwrap() - 1.0).abs() < 1e-12);
        }
        let far: Vec<_> = gt.iter().map(|p| [p[0] + 5000.0, p[1], p[2]]).collect();
        assert_eq!(f_score(&far, &gt, 5.0, false).unwrap(), 0.0);

        // Each GT vertex appears in the prediction; the other half is far away.
        let gt: Vec<[f64; 3]> = (0..4).map(|i| [100.0 * i as f64, 0.0, 0.0]).collect();
        let mut m = gt.clone();
        m.extend((0..4).map(|i| [100.0 * i as f64, 1000.0, 0.0]));
        let f = f_score(&m, &gt, 5.0, false).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert!(f_score(&[], &gt, 5.0, false).is_err());
    }

    #[test]
    fn report_serializes_required_keys() {
        let mut r = MetricsReport {
            mpjpe_mm: 1.0,
            pa_mpjpe_mm: 0.5,
            mpvpe_mm: Some(2.0),
            samples: 3,
            ..Default::default()
        };
        r.f_at.insert(tau_key(5.0), 0.25);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for k in ["mpjpe_mm", "pa_mpjpe_mm", "mpvpe_mm", "f_at"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["f_at"]["5"], 0.25);
        assert!(r.to_text().contains("f_at_5: 0.2500"));
    }

    proptest! {
        #[test]
        fn mpjpe_translation_invariant(seed in any::<u64>(), t in prop::array::uniform3(-1e3f64..1e3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_points(&mut rng, 8);
            let p = random_points(&mut rng, 8);
            let moved: Vec<_> = p.iter().map(|a| [a[0] + t[0], a[1] + t[1], a[2] + t[2]]).collect();
            prop_assert!((mpjpe(&p, &gt, 0).unwrap() - mpjpe(&moved, &gt, 0).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn pa_mpjpe_similarity_invariant(seed in any::<u64>(), s in 0.2f64..5.0, angles in prop::array::uniform3(-3.0f64..3.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_points(&mut rng, 8);
            let p = random_points(&mut rng, 8);
            let r = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            let moved = transform(&p, s, &r, [5.0, -9.0, 2.0]);
            let a = pa_mpjpe(&p, &gt, 0).unwrap();
            let b = pa_mpjpe(&moved, &gt, 0).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn procrustes_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_points(&mut rng, 8);
            let p = random_points(&mut rng, 8);
            let once = procrustes_align(&p, &gt).unwrap().apply(&p);
            let t = procrustes_align(&once, &gt).unwrap();
            prop_assert!((t.scale - 1.0).abs() < 1e-7);
            prop_assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-7);
            prop_assert!(t.translation.abs().max() < 1e-7 * 500.0);
        }

        #[test]
        fn f_score_monotone_in_tau(seed in any::<u64>(), a in 1.0f64..200.0, b in 1.0f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_points(&mut rng, 15);
            let m: Vec<_> = gt.iter().map(|p| [p[0] + rng.gen_range(-100.0..100.0), p[1], p[2]]).collect();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(f_score(&m, &gt, lo, false).unwrap() <= f_score(&m, &gt, hi, false).unwrap());
        }
    }
}
