//! Multilevel greedy (Graclus-style) mesh coarsening into a balanced binary
//! tree of graphs, plus the parent-to-children feature upsampling and the
//! tree-order to mesh-order permutation used by the mesh decoder.
//!
//! At level `c` the tree slot `p` (0-based) has parent `p / 2` at level
//! `c + 1`, which is the 1-based "children `2i-1`, `2i`" rule. Slots without a
//! real vertex are fake: they have no edges, not even a self-loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ScaledLaplacian};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Weighted graph used during matching. Self weights accumulate intra-cluster mass.
#[derive(Clone, Debug)]
struct WeightedGraph {
    /// Sorted `(neighbor, weight)` lists, self excluded.
    adj: Vec<Vec<(usize, f64)>>,
    self_weight: Vec<f64>,
}

impl WeightedGraph {
    fn from_graph(g: &Graph) -> Self {
        let n = g.num_vertices();
        let adj = (0..n).map(|i| g.neighbors(i).map(|j| (j, 1.0)).collect()).collect();
        Self {
            adj,
            self_weight: vec![0.0; n],
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|&(_, w)| w).sum::<f64>() + self.self_weight[i]
    }

    /// One round of greedy matching. Returns the cluster id of every vertex.
    fn match_once(&self, order: &[usize]) -> (Vec<usize>, usize) {
        let n = self.len();
        let degree: Vec<f64> = (0..n).map(|i| self.degree(i)).collect();
        let mut marked = vec![false; n];
        let mut cluster = vec![usize::MAX; n];
        let mut count = 0;
        for &v in order {
            if marked[v] {
                continue;
            }
            marked[v] = true;
            let mut best: Option<usize> = None;
            let mut best_score = 0.0;
            for &(u, w) in &self.adj[v] {
                if marked[u] {
                    continue;
                }
                let score = w * (inv(degree[v]) + inv(degree[u]));
                if score > best_score {
                    best_score = score;
                    best = Some(u);
                }
            }
            cluster[v] = count;
            if let Some(u) = best {
                cluster[u] = count;
                marked[u] = true;
            }
            count += 1;
        }
        (cluster, count)
    }

    fn contract(&self, cluster: &[usize], count: usize) -> Self {
        let mut dense: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        let mut self_weight = vec![0.0; count];
        for (i, nbrs) in self.adj.iter().enumerate() {
            let ci = cluster[i];
            self_weight[ci] += self.self_weight[i];
            for &(j, w) in nbrs {
                let cj = cluster[j];
                if ci == cj {
                    self_weight[ci] += w;
                } else {
                    *dense[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Self {
            adj: dense.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_weight,
        }
    }

    fn to_graph(&self) -> Result<Graph> {
        let edges = self
            .adj
            .iter()
            .enumerate()
            .flat_map(|(i, nbrs)| nbrs.iter().map(move |&(j, _)| (i, j)));
        Graph::from_edges(self.len(), edges)
    }
}

fn inv(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d
    } else {
        0.0
    }
}

/// Balanced binary tree of mesh graphs, finest first.
#[derive(Clone, Debug)]
pub struct CoarseningHierarchy {
    levels: Vec<Graph>,
    laplacians: Vec<ScaledLaplacian>,
    /// `perm[v]` = level-0 tree slot of original vertex `v`.
    perm: Vec<usize>,
    /// Level-0 tree slot -> original vertex, `None` for fake slots.
    slot_to_vertex: Vec<Option<usize>>,
    num_fake: Vec<usize>,
    seed: u64,
}

/// Coarsens `g` `levels` times by greedy matching with a seeded visit order.
pub fn graclus_coarsen(g: &Graph, levels: usize, seed: u64) -> Result<CoarseningHierarchy> {
    if levels == 0 {
        return Err(Error::Config("coarsening needs at least one level".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weighted = vec![WeightedGraph::from_graph(g)];
    let mut parents: Vec<Vec<usize>> = Vec::with_capacity(levels);
    for lvl in 0..levels {
        let current = &weighted[lvl];
        if current.len() < 2 {
            return Err(Error::Config(format!(
                "cannot coarsen {levels} levels: level {lvl} already has a single vertex"
            )));
        }
        let mut order: Vec<usize> = (0..current.len()).collect();
        order.shuffle(&mut rng);
        let (cluster, count) = current.match_once(&order);
        let next = current.contract(&cluster, count);
        parents.push(cluster);
        weighted.push(next);
    }

    let slots = tree_indices(&parents, weighted[levels].len());
    let real_graphs: Vec<Graph> = std::iter::once(Ok(g.clone()))
        .chain(weighted[1..].iter().map(WeightedGraph::to_graph))
        .collect::<Result<_>>()?;

    let mut tree_levels = Vec::with_capacity(levels + 1);
    let mut num_fake = Vec::with_capacity(levels + 1);
    for (c, idx) in slots.iter().enumerate() {
        let real = &real_graphs[c];
        let n_real = real.num_vertices();
        let m = idx.len();
        let mut adj = vec![false; m * m];
        for p in 0..m {
            if idx[p] >= n_real {
                continue;
            }
            for q in 0..m {
                if idx[q] < n_real && (p == q || real.adjacent(idx[p], idx[q])) {
                    adj[p * m + q] = true;
                }
            }
        }
        num_fake.push(m - n_real);
        tree_levels.push(Graph::from_adjacency(m, adj)?);
    }

    let n0 = g.num_vertices();
    let mut perm = vec![usize::MAX; n0];
    let mut slot_to_vertex = vec![None; slots[0].len()];
    for (p, &v) in slots[0].iter().enumerate() {
        if v < n0 {
            perm[v] = p;
            slot_to_vertex[p] = Some(v);
        }
    }
    let laplacians = tree_levels.iter().map(ScaledLaplacian::new).collect();
    Ok(CoarseningHierarchy {
        levels: tree_levels,
        laplacians,
        perm,
        slot_to_vertex,
        num_fake,
        seed,
    })
}

/// For every level, the tree-ordered list of level-local vertex ids; ids at or
/// above the level's real vertex count denote fake slots.
fn tree_indices(parents: &[Vec<usize>], coarsest: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![(0..coarsest).collect()];
    for parent in parents.iter().rev() {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); parent.iter().max().map_or(0, |m| m + 1)];
        for (v, &p) in parent.iter().enumerate() {
            children[p].push(v);
        }
        let mut next_fake = parent.len();
        let above = out.last().expect("at least the coarsest level");
        let mut layer = Vec::with_capacity(above.len() * 2);
        for &i in above {
            let mut kids = children.get(i).cloned().unwrap_or_default();
            debug_assert!(kids.len() <= 2);
            while kids.len() < 2 {
                kids.push(next_fake);
                next_fake += 1;
            }
            layer.extend(kids);
        }
        out.push(layer);
    }
    out.reverse();
    out
}

impl CoarseningHierarchy {
    /// Number of coarsening steps `C`; there are `C + 1` graphs.
    pub fn num_coarsenings(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, c: usize) -> &Graph {
        &self.levels[c]
    }

    pub fn levels(&self) -> &[Graph] {
        &self.levels
    }

    pub fn laplacian(&self, c: usize) -> &ScaledLaplacian {
        &self.laplacians[c]
    }

    pub fn level_size(&self, c: usize) -> usize {
        self.levels[c].num_vertices()
    }

    pub fn num_fake(&self, c: usize) -> usize {
        self.num_fake[c]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn num_original(&self) -> usize {
        self.perm.len()
    }

    pub fn slot_to_vertex(&self) -> &[Option<usize>] {
        &self.slot_to_vertex
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_level(&self, c: usize) -> Result<()> {
        if c >= self.num_coarsenings() {
            return Err(Error::IndexOutOfRange {
                what: "upsampling target level",
                index: c,
                len: self.num_coarsenings(),
            });
        }
        Ok(())
    }

    /// Copies each parent row at level `c + 1` to its two children at level `c`.
    pub fn upsample<T: Real>(&self, tape: &mut Tape<T>, x: Var, c: usize) -> Result<Var> {
        self.check_level(c)?;
        let shape = tape.shape(x).to_vec();
        let axis = shape
            .len()
            .checked_sub(2)
            .ok_or_else(|| Error::shape("upsample", &shape, &[]))?;
        if shape[axis] != self.level_size(c + 1) {
            return Err(Error::shape("upsample", &shape, &[self.level_size(c + 1)]));
        }
        let idx: Vec<usize> = (0..self.level_size(c)).map(|p| p / 2).collect();
        tape.gather(x, axis, &idx)
    }

    /// Reorders level-0 tree rows into original mesh order, dropping fake rows.
    pub fn apply_perm<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let axis = shape
            .len()
            .checked_sub(2)
            .ok_or_else(|| Error::shape("apply_perm", &shape, &[]))?;
        if shape[axis] != self.level_size(0) {
            return Err(Error::shape("apply_perm", &shape, &[self.level_size(0)]));
        }
        tape.gather(x, axis, &self.perm)
    }

    /// Value-level [`Self::upsample`].
    pub fn upsample_features<T: Real>(&self, f: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(f);
        let out = self.upsample(&mut tape, x, c)?;
        Ok(tape.tensor(out))
    }

    /// Value-level [`Self::apply_perm`] for a `[V0, f]` matrix.
    pub fn apply_perm_values<T: Real>(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(f);
        let out = self.apply_perm(&mut tape, x)?;
        Ok(tape.tensor(out))
    }

    /// Inverse of [`Self::apply_perm_values`]: original rows into tree order, fake rows zero.
    pub fn inverse_perm_values<T: Real>(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = f.shape();
        if shape.len() != 2 || shape[0] != self.num_original() {
            return Err(Error::shape("inverse_perm", shape, &[self.num_original()]));
        }
        let w = shape[1];
        let mut out = Tensor::zeros([self.level_size(0), w]);
        for (v, &p) in self.perm.iter().enumerate() {
            out.data_mut()[p * w..(p + 1) * w].copy_from_slice(&f.data()[v * w..(v + 1) * w]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_mesh_graph;

    #[test]
    fn path_pair_single_level() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let h = graclus_coarsen(&g, 1, 0).unwrap();
        assert_eq!(h.level_size(1), 1);
        assert_eq!(h.level_size(0), 2);
        assert_eq!(h.num_fake(0), 0);
    }

    #[test]
    fn triangle_pads_one_fake() {
        let g = build_mesh_graph(3, &[[0, 1, 2]]).unwrap();
        for seed in 0..8 {
            let h = graclus_coarsen(&g, 1, seed).unwrap();
            assert_eq!(h.level_size(1), 2);
            assert_eq!(h.level_size(0), 4);
            assert_eq!(h.num_fake(0), 1);
            assert_eq!(h.num_fake(1), 0);
            let fake: Vec<usize> = (0..4).filter(|&p| h.level(0).is_fake(p)).collect();
            assert_eq!(fake.len(), 1);
            // the fake slot sits next to the singleton
            let singleton_parent = fake[0] / 2;
            let sibling = fake[0] ^ 1;
            assert!(!h.level(0).is_fake(sibling));
            assert_eq!(sibling / 2, singleton_parent);
            assert!(!h.perm().contains(&fake[0]));

            let f = Tensor::new([4, 1], vec![10.0f64, 11.0, 12.0, 13.0]).unwrap();
            let out = h.apply_perm_values(&f).unwrap();
            assert_eq!(out.shape(), &[3, 1]);
            assert!(!out.data().contains(&(10.0 + fake[0] as f64)));
        }
    }

    #[test]
    fn paper_hand_hierarchy_arithmetic() {
        // 68 coarsest vertices, 1088 finest slots: four doublings
        let mut size = 68usize;
        let mut steps = 0;
        while size < 1088 {
            size *= 2;
            steps += 1;
        }
        assert_eq!((size, steps), (1088, 4));
    }

    #[test]
    fn upsample_copies_parents() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let h = graclus_coarsen(&g, 1, 3).unwrap();
        let n1 = h.level_size(1);
        let f = Tensor::new([n1, 1], (0..n1).map(|i| i as f64 + 1.0).collect()).unwrap();
        let up = h.upsample_features(&f, 0).unwrap();
        for p in 0..h.level_size(0) {
            assert_eq!(up.data()[p], f.data()[p / 2]);
        }
        // averaging child pairs recovers the parent rows
        for i in 0..n1 {
            assert_eq!((up.data()[2 * i] + up.data()[2 * i + 1]) / 2.0, f.data()[i]);
        }
        assert!(h.upsample_features(&f, 1).is_err());
    }

    #[test]
    fn upsample_backward_sums_children() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let h = graclus_coarsen(&g, 1, 3).unwrap();
        let n1 = h.level_size(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::zeros([n1, 2]));
        let up = h.upsample(&mut tape, x, 0).unwrap();
        let s = tape.sum(up);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn perm_round_trip() {
        let faces: Vec<[usize; 3]> = (0..10).map(|i| [i, i + 1, i + 2]).collect();
        let g = build_mesh_graph(12, &faces).unwrap();
        let h = graclus_coarsen(&g, 2, 9).unwrap();
        let f = Tensor::new([12, 2], (0..24).map(|i| i as f32).collect()).unwrap();
        let tree = h.inverse_perm_values(&f).unwrap();
        assert_eq!(h.apply_perm_values(&tree).unwrap(), f);
    }

    #[test]
    fn identity_hierarchy_keeps_rows() {
        // two vertices always match each other; no fakes and a fixed order
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let h = graclus_coarsen(&g, 1, 0).unwrap();
        let f = Tensor::new([2, 1], vec![1.0f64, 2.0]).unwrap();
        let tree = h.inverse_perm_values(&f).unwrap();
        assert_eq!(h.apply_perm_values(&tree).unwrap(), f);
    }

    #[test]
    fn single_vertex_cannot_be_coarsened() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        assert!(graclus_coarsen(&g, 2, 0).is_err());
        assert!(graclus_coarsen(&g, 0, 0).is_err());
    }

    #[test]
    fn same_seed_same_hierarchy() {
        let faces: Vec<[usize; 3]> = (0..30).map(|i| [i, i + 1, i + 2]).collect();
        let g = build_mesh_graph(32, &faces).unwrap();
        let a = graclus_coarsen(&g, 3, 42).unwrap();
        let b = graclus_coarsen(&g, 3, 42).unwrap();
        assert_eq!(a.perm(), b.perm());
        assert_eq!(a.levels(), b.levels());
    }
}
