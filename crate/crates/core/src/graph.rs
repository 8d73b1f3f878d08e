//! Pose and mesh graphs, normalized and scaled Laplacians, and Chebyshev
//! spectral convolution.

use std::collections::VecDeque;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, SparseMatrix, Tape, Tensor, Var};

/// Undirected graph with a dense 0/1 adjacency.
///
/// Real vertices carry a self-loop. Fake (padding) vertices have an all-zero
/// row and therefore degree 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<bool>,
    degree: Vec<usize>,
}

impl Graph {
    /// Builds a graph from a dense row-major adjacency. Must be symmetric.
    pub fn from_adjacency(n: usize, adjacency: Vec<bool>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Degenerate("graph needs at least one vertex".into()));
        }
        if adjacency.len() != n * n {
            return Err(Error::shape("graph", &[n, n], &[adjacency.len()]));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if adjacency[i * n + j] != adjacency[j * n + i] {
                    return Err(Error::Degenerate(format!("adjacency not symmetric at ({i}, {j})")));
                }
            }
        }
        let degree = (0..n)
            .map(|i| adjacency[i * n..(i + 1) * n].iter().filter(|&&a| a).count())
            .collect();
        Ok(Self { n, adjacency, degree })
    }

    /// Graph over `n` vertices with self-loops everywhere plus the given edges.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = vec![false; n * n];
        for i in 0..n {
            adj[i * n + i] = true;
        }
        for (a, b) in edges {
            for v in [a, b] {
                if v >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "graph vertex",
                        index: v,
                        len: n,
                    });
                }
            }
            adj[a * n + b] = true;
            adj[b * n + a] = true;
        }
        Self::from_adjacency(n, adj)
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degree[i]
    }

    pub fn is_fake(&self, i: usize) -> bool {
        self.degree[i] == 0
    }

    pub fn num_fake(&self) -> usize {
        self.degree.iter().filter(|&&d| d == 0).count()
    }

    /// Neighbors of `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j != i && self.adjacent(i, j))
    }

    pub fn adjacency_f64(&self) -> Vec<f64> {
        self.adjacency.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    /// Breadth-first hop distances from `src`; `None` for unreachable vertices.
    pub fn hop_distances(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Joint graph: self-loops, skeleton edges and left/right symmetry pairs.
pub fn build_pose_graph(
    num_joints: usize,
    skeleton_edges: &[(usize, usize)],
    symmetry_pairs: &[(usize, usize)],
) -> Result<Graph> {
    Graph::from_edges(num_joints, skeleton_edges.iter().chain(symmetry_pairs).copied())
}

/// Mesh graph: vertices are adjacent iff they share a triangle edge.
pub fn build_mesh_graph(num_vertices: usize, faces: &[[usize; 3]]) -> Result<Graph> {
    let mut edges = Vec::with_capacity(faces.len() * 3);
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v >= num_vertices {
                return Err(Error::IndexOutOfRange {
                    what: "face vertex",
                    index: v,
                    len: num_vertices,
                });
            }
        }
        if f[0] == f[1] || f[0] == f[2] {
            return Err(Error::DegenerateFace { face: fi, vertex: f[0] });
        }
        if f[1] == f[2] {
            return Err(Error::DegenerateFace { face: fi, vertex: f[1] });
        }
        edges.extend([(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]);
    }
    Graph::from_edges(num_vertices, edges)
}

/// `L = I - D^{-1/2} A D^{-1/2}`, with `(D^{-1/2})_ii = 0` for fake vertices.
pub fn normalized_laplacian(g: &Graph) -> DMatrix<f64> {
    let n = g.num_vertices();
    let dinv: Vec<f64> = (0..n)
        .map(|i| match g.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let a = if g.adjacent(i, j) { dinv[i] * dinv[j] } else { 0.0 };
        let id = if i == j { 1.0 } else { 0.0 };
        id - a
    })
}

/// Largest eigenvalue estimate from power iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration did not settle and `value` fell back to 2.
    pub converged: bool,
}

const POWER_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const POWER_MAX_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-9;

/// Power iteration on a symmetric matrix from a fixed seed.
pub fn estimate_lambda_max(l: &DMatrix<f64>) -> LambdaEstimate {
    let n = l.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(0.5..1.5));
    v /= v.norm();
    let mut prev: Option<f64> = None;
    for it in 1..=POWER_MAX_ITERS {
        let w = l * &v;
        let rayleigh = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        if let Some(p) = prev {
            if (rayleigh - p).abs() < POWER_TOL {
                return LambdaEstimate {
                    value: rayleigh,
                    iterations: it,
                    converged: true,
                };
            }
        }
        prev = Some(rayleigh);
        v = w / norm;
    }
    log::warn!("power iteration did not converge; using lambda_max = 2");
    LambdaEstimate {
        value: 2.0,
        iterations: POWER_MAX_ITERS,
        converged: false,
    }
}

/// `L~ = 2 L / lambda_max - I`, cached with its sparse form.
#[derive(Clone, Debug)]
pub struct ScaledLaplacian {
    matrix: DMatrix<f64>,
    lambda: LambdaEstimate,
    sparse: SparseMatrix<f64>,
}

impl ScaledLaplacian {
    pub fn new(g: &Graph) -> Self {
        let l = normalized_laplacian(g);
        let lambda = estimate_lambda_max(&l);
        Self::from_laplacian(&l, lambda)
    }

    pub fn from_laplacian(l: &DMatrix<f64>, lambda: LambdaEstimate) -> Self {
        let n = l.nrows();
        let matrix = l * (2.0 / lambda.value) - DMatrix::<f64>::identity(n, n);
        // nalgebra is column-major; the sparse form wants row-major.
        let dense: Vec<f64> = matrix.transpose().as_slice().to_vec();
        let sparse = SparseMatrix::from_dense(n, n, &dense).expect("square matrix");
        Self { matrix, lambda, sparse }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.value
    }

    pub fn lambda(&self) -> LambdaEstimate {
        self.lambda
    }

    pub fn num_vertices(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn sparse(&self) -> &SparseMatrix<f64> {
        &self.sparse
    }
}

/// Chebyshev filter coefficients `Theta_0..Theta_{K-1}`, stored as `[K, f_in, f_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebFilter<T = f32> {
    coeffs: Tensor<T>,
}

impl<T: Real> ChebFilter<T> {
    pub fn new(coeffs: Tensor<T>) -> Result<Self> {
        match coeffs.shape() {
            [k, _, _] if *k >= 1 => Ok(Self { coeffs }),
            s => Err(Error::shape("cheb_filter", s, &[])),
        }
    }

    pub fn order(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn f_in(&self) -> usize {
        self.coeffs.shape()[1]
    }

    pub fn f_out(&self) -> usize {
        self.coeffs.shape()[2]
    }

    pub fn coeffs(&self) -> &Tensor<T> {
        &self.coeffs
    }
}

/// Records `sum_k T_k(L~) x Theta_k` on the tape.
///
/// `x` is `[V, f_in]` or `[B, V, f_in]`; `theta` is `[K, f_in, f_out]`.
pub fn chebyshev_conv<T: Real>(tape: &mut Tape<T>, x: Var, lap: &Rc<SparseMatrix<T>>, theta: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ts = tape.shape(theta).to_vec();
    let (batch, v, f_in) = match xs.as_slice() {
        [v, f] => (None, *v, *f),
        [b, v, f] => (Some(*b), *v, *f),
        _ => return Err(Error::shape("chebyshev_conv", &xs, &ts)),
    };
    if ts.len() != 3 || ts[1] != f_in || ts[0] == 0 || lap.cols() != v {
        return Err(Error::shape("chebyshev_conv", &xs, &ts));
    }
    let (k, f_out) = (ts[0], ts[2]);
    let mut terms = vec![x];
    if k > 1 {
        terms.push(tape.const_matmul(lap, x)?);
    }
    for i in 2..k {
        let lt = tape.const_matmul(lap, terms[i - 1])?;
        let twice = tape.scale(lt, T::lit(2.0));
        terms.push(tape.sub(twice, terms[i - 2])?);
    }
    let stacked = tape.concat(&terms, xs.len() - 1)?;
    let rows = batch.unwrap_or(1) * v;
    let flat = tape.reshape(stacked, [rows, k * f_in])?;
    let w = tape.reshape(theta, [k * f_in, f_out])?;
    let out = tape.matmul(flat, w)?;
    match batch {
        Some(b) => tape.reshape(out, [b, v, f_out]),
        None => Ok(out),
    }
}

/// Value-level convenience around [`chebyshev_conv`].
pub fn chebyshev_conv_values<T: Real>(
    f_in: &Tensor<T>,
    lap: &ScaledLaplacian,
    filter: &ChebFilter<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(f_in);
    let theta = tape.leaf(filter.coeffs());
    let sparse = Rc::new(lap.sparse().cast::<T>());
    let out = chebyshev_conv(&mut tape, x, &sparse, theta)?;
    Ok(tape.tensor(out))
}

/// Spectral-domain evaluation `U diag(sum_k theta_k T_k(Lambda)) U^T x`.
pub fn dense_spectral_oracle(x: &[f64], lap: &ScaledLaplacian, theta: &[f64]) -> Result<Vec<f64>> {
    let n = lap.num_vertices();
    if x.len() != n {
        return Err(Error::shape("dense_spectral_oracle", &[n], &[x.len()]));
    }
    let (values, vectors) = jacobi_eigen(lap.matrix())?;
    let xv = nalgebra::DVector::from_column_slice(x);
    let coeffs = vectors.transpose() * xv;
    let scaled = nalgebra::DVector::from_fn(n, |i, _| coeffs[i] * chebyshev_series(theta, values[i]));
    Ok((&vectors * scaled).as_slice().to_vec())
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Used instead of nalgebra's implicit QR, which lost up to 1e-2 on some
/// 13-vertex scaled Laplacians.
fn jacobi_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm().max(f64::MIN_POSITIVE);
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            return Ok(((0..n).map(|i| a[(i, i)]).collect(), v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle that zeroes a[p][q].
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * kp - s * kq;
                    a[(k, q)] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * pk - s * qk;
                    a[(q, k)] = s * pk + c * qk;
                }
                for k in 0..n {
                    let (kp, kq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * kp - s * kq;
                    v[(k, q)] = s * kp + c * kq;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }
    Err(Error::Eigen("Jacobi sweeps did not converge".into()))
}

/// `sum_k theta_k T_k(x)` by the scalar three-term recurrence.
pub fn chebyshev_series(theta: &[f64], x: f64) -> f64 {
    let (mut t_prev, mut t_cur) = (1.0, x);
    let mut acc = 0.0;
    for (k, &th) in theta.iter().enumerate() {
        let t = match k {
            0 => 1.0,
            1 => x,
            _ => {
                let next = 2.0 * x * t_cur - t_prev;
                t_prev = t_cur;
                t_cur = next;
                next
            }
        };
        acc += th * t;
    }
    acc
}
