use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_mesh_graph, build_pose_graph, Graph};

/// Mesh topology, rest pose and skeleton description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshTemplate {
    /// Rest-pose vertices in mm.
    pub vertices: Vec<[f64; 3]>,
    /// Triangles, 0-based.
    pub faces: Vec<[usize; 3]>,
    /// `J x V`, each row a convex combination of vertices.
    pub joint_regressor: Vec<Vec<f64>>,
    /// Parent-child joint pairs forming a tree rooted at `root_index`.
    pub skeleton_edges: Vec<(usize, usize)>,
    pub symmetry_pairs: Vec<(usize, usize)>,
    pub joint_names: Vec<String>,
    pub root_index: usize,
    /// `V x J`, present for generated templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skinning_weights: Option<Vec<Vec<f64>>>,
}

const ROW_SUM_TOL: f64 = 1e-6;

impl MeshTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let j = self.num_joints();
        if v == 0 || j == 0 {
            return Err(Error::Degenerate("template needs vertices and joints".into()));
        }
        if self.root_index >= j {
            return Err(Error::IndexOutOfRange {
                what: "root joint",
                index: self.root_index,
                len: j,
            });
        }
        build_mesh_graph(v, &self.faces)?;
        if self.joint_regressor.len() != j {
            return Err(Error::shape("joint_regressor", &[j, v], &[self.joint_regressor.len()]));
        }
        for (r, row) in self.joint_regressor.iter().enumerate() {
            if row.len() != v {
                return Err(Error::shape("joint_regressor", &[j, v], &[r, row.len()]));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Degenerate(format!("regressor row {r} sums to {s}")));
            }
        }
        if let Some(w) = &self.skinning_weights {
            if w.len() != v {
                return Err(Error::shape("skinning_weights", &[v, j], &[w.len()]));
            }
            for (r, row) in w.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if row.len() != j || (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Degenerate(format!(
                        "skinning row {r} is not a convex combination"
                    )));
                }
            }
        }
        for &(a, b) in self.symmetry_pairs.iter() {
            if a >= j || b >= j {
                return Err(Error::IndexOutOfRange {
                    what: "symmetry joint",
                    index: a.max(b),
                    len: j,
                });
            }
        }
        self.parents().map(|_| ())
    }

    /// Parent of every joint (`None` for the root); errors unless the skeleton is a spanning tree.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        let j = self.num_joints();
        if self.skeleton_edges.len() + 1 != j {
            return Err(Error::Degenerate(format!(
                "skeleton has {} edges for {j} joints; not a tree",
                self.skeleton_edges.len()
            )));
        }
        let mut adj = vec![Vec::new(); j];
        for &(a, b) in &self.skeleton_edges {
            if a >= j || b >= j {
                return Err(Error::IndexOutOfRange {
                    what: "skeleton joint",
                    index: a.max(b),
                    len: j,
                });
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut parent = vec![None; j];
        let mut seen = vec![false; j];
        seen[self.root_index] = true;
        let mut stack = vec![self.root_index];
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(u);
                    stack.push(w);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Degenerate("skeleton is not connected".into()));
        }
        Ok(parent)
    }

    pub fn mesh_graph(&self) -> Result<Graph> {
        build_mesh_graph(self.num_vertices(), &self.faces)
    }

    pub fn pose_graph(&self) -> Result<Graph> {
        build_pose_graph(self.num_joints(), &self.skeleton_edges, &self.symmetry_pairs)
    }

    /// Row-major `J x V` regressor.
    pub fn regressor_dense(&self) -> Vec<f64> {
        self.joint_regressor.iter().flatten().copied().collect()
    }

    /// `regressor * mesh` for a `V x 3` mesh.
    pub fn regress_joints(&self, mesh: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.joint_regressor
            .iter()
            .map(|row| {
                let mut p = [0.0; 3];
                for (w, m) in row.iter().zip(mesh) {
                    if *w != 0.0 {
                        for k in 0..3 {
                            p[k] += w * m[k];
                        }
                    }
                }
                p
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn triangle_template() -> MeshTemplate {
        MeshTemplate {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            joint_regressor: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.5]],
            skeleton_edges: vec![(0, 1)],
            symmetry_pairs: vec![],
            joint_names: vec!["root".into(), "tip".into()],
            root_index: 0,
            skinning_weights: None,
        }
    }

    #[test]
    fn valid_template_passes() {
        let t = triangle_template();
        t.validate().unwrap();
        assert_eq!(t.parents().unwrap(), vec![None, Some(0)]);
        let j = t.regress_joints(&t.vertices);
        assert_eq!(j[1], [0.5, 0.5, 0.0]);
    }

    #[test]
    fn regressor_rows_must_sum_to_one() {
        let mut t = triangle_template();
        t.joint_regressor[1] = vec![0.0, 0.5, 0.4];
        assert!(t.validate().is_err());
    }

    #[test]
    fn skeleton_must_be_a_tree() {
        let mut t = triangle_template();
        t.skeleton_edges.push((1, 0));
        assert!(t.validate().is_err());
        let mut t = triangle_template();
        t.faces[0] = [0, 1, 5];
        assert!(t.validate().is_err());
    }
}
