//! Procedural "tube-man" bodies: one triangulated tube per bone, rigidly
//! skinned to the bone's parent joint, posed by forward kinematics.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pose::{Camera, PoseSample};
use super::template::MeshTemplate;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest offset from the parent joint in mm (absolute position for the root).
    pub offset_mm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    /// Joints in topological order: every parent precedes its children.
    pub joints: Vec<JointSpec>,
    pub symmetry_pairs: Vec<(usize, usize)>,
    pub tube_radius_mm: f64,
    pub ring_vertices: usize,
    pub rings_per_bone: usize,
    /// Per-axis joint rotation limit around the rest pose.
    pub max_rotation_deg: f64,
    /// Keep the twist about the bone of joints with a single child. Such a twist
    /// moves tube vertices without moving any joint, so the mesh stops being a
    /// function of the pose.
    #[serde(default)]
    pub twist: bool,
    /// Seeds a random choice of diagonal for every quad of the tubes; `None`
    /// splits all quads the same way. A perfectly regular mesh gives the
    /// vertices of a ring identical neighborhoods, which graph filters cannot
    /// tell apart.
    #[serde(default)]
    pub diagonal_seed: Option<u64>,
    /// Camera scale range, px/mm.
    pub camera_scale: [f64; 2],
    /// Camera offset range, px, used for both axes.
    pub camera_offset: [f64; 2],
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self::tube_man()
    }
}

impl TemplateSpec {
    /// 12 joints, 11 bones, 6-vertex rings, 3 rings per bone: 198 vertices.
    pub fn tube_man() -> Self {
        let j = |name: &str, parent: Option<usize>, offset_mm: [f64; 3]| JointSpec {
            name: name.to_string(),
            parent,
            offset_mm,
        };
        Self {
            joints: vec![
                j("pelvis", None, [0.0, 0.0, 0.0]),
                j("neck", Some(0), [0.0, 500.0, 0.0]),
                j("l_elbow", Some(1), [280.0, -120.0, 0.0]),
                j("l_wrist", Some(2), [250.0, -60.0, 0.0]),
                j("r_elbow", Some(1), [-280.0, -120.0, 0.0]),
                j("r_wrist", Some(4), [-250.0, -60.0, 0.0]),
                j("l_hip", Some(0), [100.0, -60.0, 0.0]),
                j("l_knee", Some(6), [0.0, -420.0, 30.0]),
                j("l_ankle", Some(7), [0.0, -400.0, -30.0]),
                j("r_hip", Some(0), [-100.0, -60.0, 0.0]),
                j("r_knee", Some(9), [0.0, -420.0, 30.0]),
                j("r_ankle", Some(10), [0.0, -400.0, -30.0]),
            ],
            symmetry_pairs: vec![(2, 4), (3, 5), (6, 9), (7, 10), (8, 11)],
            tube_radius_mm: 40.0,
            ring_vertices: 6,
            rings_per_bone: 3,
            max_rotation_deg: 45.0,
            twist: false,
            diagonal_seed: None,
            camera_scale: [0.2, 0.35],
            camera_offset: [150.0, 350.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tube_radius_mm > 0.0) {
            return Err(Error::Config(format!(
                "tube radius {} must be > 0",
                self.tube_radius_mm
            )));
        }
        if self.rings_per_bone < 2 {
            return Err(Error::Config(format!(
                "rings_per_bone {} must be >= 2",
                self.rings_per_bone
            )));
        }
        if self.ring_vertices < 3 {
            return Err(Error::Config(format!(
                "ring_vertices {} must be >= 3",
                self.ring_vertices
            )));
        }
        if self.joints.len() < 2 {
            return Err(Error::Config("need at least two joints".into()));
        }
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || self.joints[0].parent.is_some() {
            return Err(Error::Config("joint 0 must be the only root".into()));
        }
        for (i, jt) in self.joints.iter().enumerate().skip(1) {
            match jt.parent {
                Some(p) if p < i => {}
                _ => {
                    return Err(Error::Config(format!(
                        "joint {i} must have a parent with a smaller index"
                    )))
                }
            }
            if norm(jt.offset_mm) < 1e-6 {
                return Err(Error::Config(format!("bone into joint {i} has zero length")));
            }
        }
        for &(a, b) in &self.symmetry_pairs {
            if a >= self.joints.len() || b >= self.joints.len() || a == b {
                return Err(Error::Config(format!("bad symmetry pair ({a}, {b})")));
            }
        }
        if !(self.camera_scale[0] > 0.0 && self.camera_scale[0] <= self.camera_scale[1]) {
            return Err(Error::Config(
                "camera_scale must be an increasing positive range".into(),
            ));
        }
        if self.camera_offset[0] > self.camera_offset[1] {
            return Err(Error::Config("camera_offset must be an increasing range".into()));
        }
        Ok(())
    }

    fn rest_joints(&self) -> Vec<[f64; 3]> {
        let mut pos: Vec<[f64; 3]> = Vec::with_capacity(self.joints.len());
        for jt in &self.joints {
            let p = match jt.parent {
                None => jt.offset_mm,
                Some(p) => add(pos[p], jt.offset_mm),
            };
            pos.push(p);
        }
        pos
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Triangles joining two rings of equal size vertex-by-vertex; `flip` picks
/// the diagonal of each quad.
fn band(a: usize, b: usize, n: usize, faces: &mut Vec<[usize; 3]>, flip: &mut impl FnMut() -> bool) {
    for i in 0..n {
        let i1 = (i + 1) % n;
        if flip() {
            faces.push([a + i, a + i1, b + i1]);
            faces.push([a + i, b + i1, b + i]);
        } else {
            faces.push([a + i, a + i1, b + i]);
            faces.push([a + i1, b + i1, b + i]);
        }
    }
}

/// Builds the rest-pose tube-man template.
pub fn generate_template(spec: &TemplateSpec) -> Result<MeshTemplate> {
    spec.validate()?;
    let nj = spec.joints.len();
    let n = spec.ring_vertices;
    let rings = spec.rings_per_bone;
    let rest = spec.rest_joints();
    let root = 0;

    let mut diag_rng = spec.diagonal_seed.map(ChaCha8Rng::seed_from_u64);
    let mut flip = || diag_rng.as_mut().is_some_and(|r| r.gen_bool(0.5));
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut skinning = Vec::new();
    // First vertex of every bone's tube, indexed by child joint.
    let mut tube_start = vec![usize::MAX; nj];
    for (j, jt) in spec.joints.iter().enumerate().skip(1) {
        let p = jt.parent.expect("validated");
        let len = norm(jt.offset_mm);
        let d = Vector3::from(jt.offset_mm) / len;
        let reference = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
        let u = (reference - d * reference.dot(&d)).normalize();
        let v = d.cross(&u);
        tube_start[j] = vertices.len();
        for r in 0..rings {
            let t = if p == root {
                r as f64 / (rings - 1) as f64
            } else {
                (r + 1) as f64 / rings as f64
            };
            let center = Vector3::from(rest[p]) + d * (t * len);
            for i in 0..n {
                let theta = std::f64::consts::TAU * i as f64 / n as f64;
                let x = center + (u * theta.cos() + v * theta.sin()) * spec.tube_radius_mm;
                vertices.push([x.x, x.y, x.z]);
                let mut w = vec![0.0; nj];
                w[p] = 1.0;
                skinning.push(w);
            }
        }
        for r in 0..rings - 1 {
            band(
                tube_start[j] + r * n,
                tube_start[j] + (r + 1) * n,
                n,
                &mut faces,
                &mut flip,
            );
        }
    }

    let last_ring = (rings - 1) * n;
    let root_children: Vec<usize> = (1..nj).filter(|&j| spec.joints[j].parent == Some(root)).collect();
    let anchor = root_children[0];
    for (j, jt) in spec.joints.iter().enumerate().skip(1) {
        let p = jt.parent.expect("validated");
        if p == root {
            if j != anchor {
                band(tube_start[anchor], tube_start[j], n, &mut faces, &mut flip);
            }
        } else {
            band(tube_start[p] + last_ring, tube_start[j], n, &mut faces, &mut flip);
        }
    }

    let nv = vertices.len();
    let mut regressor = vec![vec![0.0; nv]; nj];
    for (j, row) in regressor.iter_mut().enumerate() {
        let start = if j == root {
            tube_start[anchor]
        } else {
            tube_start[j] + last_ring
        };
        for w in &mut row[start..start + n] {
            *w = 1.0 / n as f64;
        }
    }

    let template = MeshTemplate {
        vertices,
        faces,
        joint_regressor: regressor,
        skeleton_edges: (1..nj).map(|j| (spec.joints[j].parent.unwrap(), j)).collect(),
        symmetry_pairs: spec.symmetry_pairs.clone(),
        joint_names: spec.joints.iter().map(|j| j.name.clone()).collect(),
        root_index: root,
        skinning_weights: Some(skinning),
    };
    template.validate()?;
    Ok(template)
}

/// Global joint rotations and positions from local rotations.
///
/// `G_j = G_parent * R_j` and `pos_j = pos_parent + G_parent * (rest_j - rest_parent)`;
/// the root keeps its rest position.
pub fn forward_kinematics(
    parents: &[Option<usize>],
    rest_joints: &[[f64; 3]],
    local: &[Matrix3<f64>],
) -> Result<(Vec<Matrix3<f64>>, Vec<[f64; 3]>)> {
    let nj = parents.len();
    if rest_joints.len() != nj || local.len() != nj {
        return Err(Error::Mismatch(format!(
            "forward kinematics: {nj} parents, {} rest joints, {} rotations",
            rest_joints.len(),
            local.len()
        )));
    }
    let mut global = vec![Matrix3::identity(); nj];
    let mut pos = vec![[0.0; 3]; nj];
    let mut done = vec![false; nj];
    let mut order: Vec<usize> = (0..nj).filter(|&j| parents[j].is_none()).collect();
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        match parents[u] {
            None => {
                global[u] = local[u];
                pos[u] = rest_joints[u];
            }
            Some(p) => {
                global[u] = global[p] * local[u];
                let off = Vector3::from(rest_joints[u]) - Vector3::from(rest_joints[p]);
                let x = Vector3::from(pos[p]) + global[p] * off;
                pos[u] = [x.x, x.y, x.z];
            }
        }
        done[u] = true;
        for c in 0..nj {
            if parents[c] == Some(u) && !done[c] {
                order.push(c);
            }
        }
    }
    if order.len() != nj {
        return Err(Error::Degenerate("joint parents do not form a tree".into()));
    }
    Ok((global, pos))
}

/// `x' = sum_k w_vk (G_k (x - rest_k) + pos_k)`.
pub fn linear_blend_skinning(
    vertices: &[[f64; 3]],
    weights: &[Vec<f64>],
    rest_joints: &[[f64; 3]],
    global: &[Matrix3<f64>],
    pos: &[[f64; 3]],
) -> Vec<[f64; 3]> {
    vertices
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let mut out = Vector3::zeros();
            for (k, &wk) in w.iter().enumerate() {
                if wk != 0.0 {
                    let local = Vector3::from(*x) - Vector3::from(rest_joints[k]);
                    out += (global[k] * local + Vector3::from(pos[k])) * wk;
                }
            }
            [out.x, out.y, out.z]
        })
        .collect()
}

/// Poses a skinned template and returns root-relative `(mesh, joints)`.
pub fn pose_template(template: &MeshTemplate, local: &[Matrix3<f64>]) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let weights = template
        .skinning_weights
        .as_ref()
        .ok_or_else(|| Error::Config("template has no skinning weights".into()))?;
    let parents = template.parents()?;
    let rest = template.regress_joints(&template.vertices);
    let (global, pos) = forward_kinematics(&parents, &rest, local)?;
    let mut mesh = linear_blend_skinning(&template.vertices, weights, &rest, &global, &pos);
    let root = template.regress_joints(&mesh)[template.root_index];
    for v in mesh.iter_mut() {
        for k in 0..3 {
            v[k] -= root[k];
        }
    }
    let mut joints = template.regress_joints(&mesh);
    joints[template.root_index] = [0.0; 3];
    Ok((mesh, joints))
}

/// The rotation taking `axis` to `r * axis` along the shortest arc.
fn swing(r: &Matrix3<f64>, axis: Vector3<f64>) -> Matrix3<f64> {
    let to = r * axis;
    match Rotation3::rotation_between(&axis, &to) {
        Some(s) => *s.matrix(),
        None => *r,
    }
}

fn random_rotation<R: Rng>(max_rad: f64, rng: &mut R) -> Matrix3<f64> {
    let mut a = [0.0; 3];
    for v in a.iter_mut() {
        *v = if max_rad > 0.0 {
            rng.gen_range(-max_rad..=max_rad)
        } else {
            0.0
        };
    }
    *Rotation3::from_euler_angles(a[0], a[1], a[2]).matrix()
}

/// Draws one posed, projected sample from a skinned template.
pub fn sample_pose<R: Rng>(template: &MeshTemplate, spec: &TemplateSpec, rng: &mut R) -> Result<PoseSample> {
    let max = spec.max_rotation_deg.to_radians();
    let mut local: Vec<Matrix3<f64>> = (0..template.num_joints()).map(|_| random_rotation(max, rng)).collect();
    if !spec.twist {
        let parents = template.parents()?;
        let rest = template.regress_joints(&template.vertices);
        for (j, r) in local.iter_mut().enumerate() {
            let mut children = (0..parents.len()).filter(|&c| parents[c] == Some(j));
            if let (Some(c), None) = (children.next(), children.next()) {
                *r = swing(r, Vector3::from(rest[c]) - Vector3::from(rest[j]));
            }
        }
    }
    let (mesh, joints) = pose_template(template, &local)?;
    let scale = rng.gen_range(spec.camera_scale[0]..=spec.camera_scale[1]);
    let offset = [
        rng.gen_range(spec.camera_offset[0]..=spec.camera_offset[1]),
        rng.gen_range(spec.camera_offset[0]..=spec.camera_offset[1]),
    ];
    let camera = Camera { scale, offset };
    Ok(PoseSample {
        pose2d: joints.iter().map(|p| camera.project(p)).collect(),
        pose3d_gt: joints,
        mesh_gt: Some(mesh),
        camera,
    })
}

/// Template plus `n_samples` posed samples; sample `i` uses seed `seed + i`.
pub fn generate_synthetic_dataset(
    spec: &TemplateSpec,
    n_samples: usize,
    seed: u64,
) -> Result<(MeshTemplate, Vec<PoseSample>)> {
    let template = generate_template(spec)?;
    let samples = (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            sample_pose(&template, spec, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((template, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn tube_man_sizes() {
        let t = generate_template(&TemplateSpec::tube_man()).unwrap();
        assert_eq!(t.num_vertices(), 198);
        assert_eq!(t.num_joints(), 12);
        // 11 tubes x 2 bands + 10 seams, 12 triangles per band.
        assert_eq!(t.faces.len(), (11 * 2 + 10) * 12);
        let g = t.mesh_graph().unwrap();
        assert_eq!(g.hop_distances(0).iter().filter(|d| d.is_none()).count(), 0);
        let rest = t.regress_joints(&t.vertices);
        let spec = TemplateSpec::tube_man();
        assert!(max_abs(&rest, &spec.rest_joints()) < 1e-9);
    }

    #[test]
    fn identity_rotations_give_rest_mesh() {
        let t = generate_template(&TemplateSpec::tube_man()).unwrap();
        let (mesh, joints) = pose_template(&t, &vec![Matrix3::identity(); 12]).unwrap();
        assert!(max_abs(&mesh, &t.vertices) < 1e-9);
        assert_eq!(joints[0], [0.0; 3]);
    }

    #[test]
    fn samples_are_consistent() {
        let (t, samples) = generate_synthetic_dataset(&TemplateSpec::tube_man(), 5, 3).unwrap();
        for s in &samples {
            let mesh = s.mesh_gt.as_ref().unwrap();
            assert_eq!(s.pose3d_gt[t.root_index], [0.0; 3]);
            assert!(max_abs(&t.regress_joints(mesh), &s.pose3d_gt) < 1e-6);
            for (p2, p3) in s.pose2d.iter().zip(&s.pose3d_gt) {
                assert_eq!(*p2, s.camera.project(p3));
            }
        }
        for w in t.skinning_weights.as_ref().unwrap() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (_, again) = generate_synthetic_dataset(&TemplateSpec::tube_man(), 5, 3).unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = TemplateSpec::tube_man();
        s.tube_radius_mm = 0.0;
        assert!(generate_template(&s).is_err());
        let mut s = TemplateSpec::tube_man();
        s.rings_per_bone = 1;
        assert!(generate_template(&s).is_err());
    }

    // Root -> a -> b chain along x; rotate joint a by 90 degrees about z.
    #[test]
    fn child_rotation_moves_only_its_tube() {
        let spec = TemplateSpec {
            joints: vec![
                JointSpec {
                    name: "root".into(),
                    parent: None,
                    offset_mm: [0.0; 3],
                },
                JointSpec {
                    name: "a".into(),
                    parent: Some(0),
                    offset_mm: [100.0, 0.0, 0.0],
                },
                JointSpec {
                    name: "b".into(),
                    parent: Some(1),
                    offset_mm: [100.0, 0.0, 0.0],
                },
            ],
            symmetry_pairs: vec![],
            tube_radius_mm: 10.0,
            ring_vertices: 4,
            rings_per_bone: 2,
            ..TemplateSpec::tube_man()
        };
        let t = generate_template(&spec).unwrap();
        let mut local = vec![Matrix3::identity(); 3];
        local[1] = *Rotation3::from_euler_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2).matrix();
        let (mesh, joints) = pose_template(&t, &local).unwrap();
        // Scalar FK: b = a + Rz(90)(100, 0, 0) = (100, 100, 0).
        assert!(max_abs(&joints, &[[0.0; 3], [100.0, 0.0, 0.0], [100.0, 100.0, 0.0]]) < 1e-9);
        for (i, (p, q)) in mesh.iter().zip(&t.vertices).enumerate() {
            if i < 8 {
                assert!(max_abs(&[*p], &[*q]) < 1e-9, "root tube vertex {i} moved");
            } else {
                // (x, y, z) about a = (100, 0, 0) by 90 deg: (100 - y, x - 100, z).
                let want = [100.0 - q[1], q[0] - 100.0, q[2]];
                assert!(max_abs(&[*p], &[want]) < 1e-9, "vertex {i}: {p:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn swing_keeps_bone_direction_and_drops_twist() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let axis = Vector3::new(0.3, -1.0, 0.2);
        for _ in 0..20 {
            let r = random_rotation(0.8, &mut rng);
            let s = swing(&r, axis);
            assert!((s * axis - r * axis).norm() < 1e-9);
            let (rot_axis, _) = Rotation3::from_matrix_unchecked(s).axis_angle().unwrap();
            assert!(rot_axis.dot(&axis.normalize()).abs() < 1e-9);
        }
    }
}
