//! Dense numerical kernels: cosine similarity, min-max scaling, nearest
//! upsampling and the symmetric eigensolvers behind the normalized cut.

use crate::error::{Error, Result};
use crate::types::{GridMap, Heatmap};

/// Sweep cap for the cyclic Jacobi iteration.
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// Cosine similarity accumulated in f64. A zero vector on either side gives 0.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different lengths");
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    // sqrt(nu * nv) rather than sqrt(nu) * sqrt(nv): identical inputs give exactly 1.
    (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0)
}

/// `(x - min) / (max - min)`; a constant input maps to all zeros.
pub fn minmax_normalize(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || hi <= lo {
        return vec![0.0; values.len()];
    }
    let (lo, range) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    values
        .iter()
        .map(|&v| ((f64::from(v) - lo) / range) as f32)
        .collect()
}

pub fn minmax_grid(map: &GridMap) -> GridMap {
    GridMap {
        grid_h: map.grid_h,
        grid_w: map.grid_w,
        data: minmax_normalize(&map.data),
    }
}

/// Replicates every grid cell into a `factor x factor` pixel block.
pub fn upsample_nearest(grid: &GridMap, factor: usize) -> Heatmap {
    assert!(factor >= 1, "upsampling factor must be >= 1");
    let (h, w) = (grid.grid_h * factor, grid.grid_w * factor);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(grid.get(r / factor, c / factor));
        }
    }
    Heatmap {
        height: h,
        width: w,
        data,
    }
}

/// Dense symmetric matrix in f64. Writes go through [`SymMatrix::set`], which
/// mirrors the entry, so symmetry holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from the upper triangle of a row-major `n x n` slice; the lower
    /// triangle of the input is ignored.
    pub fn from_upper(n: usize, rows: &[f64]) -> Self {
        assert_eq!(rows.len(), n * n);
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, rows[i * n + j]);
            }
        }
        m
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Eigendecomposition of a symmetric matrix: ascending eigenvalues and the
/// matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column-major: eigenvector `j` occupies `vectors[j*n..(j+1)*n]`.
    vectors: Vec<f64>,
    n: usize,
}

impl SymEigen {
    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.n..(j + 1) * self.n]
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// `max_j ||m z_j - λ_j z_j||∞`.
    pub fn max_residual(&self, m: &SymMatrix) -> f64 {
        (0..self.n)
            .map(|j| {
                let z = self.vector(j);
                let mz = m.mul_vec(z);
                mz.iter()
                    .zip(z)
                    .map(|(a, b)| (a - self.values[j] * b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// `max |Zᵀ Z - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.n {
            for b in a..self.n {
                let dot: f64 = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Cyclic Jacobi eigensolver.
pub fn sym_eig(m: &SymMatrix) -> Result<SymEigen> {
    let n = m.n;
    if let Some(v) = m.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("matrix entry {v} is not finite")));
    }
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob_sq: f64 = a.iter().map(|x| x * x).sum();
    let tol = f64::EPSILON * f64::EPSILON * frob_sq;

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        s
    };

    let mut converged = n < 2;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        if converged || off(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off(&a) <= tol {
        converged = true;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &col in &order {
        vectors.extend((0..n).map(|k| v[k * n + col]));
    }
    let eig = SymEigen { values, vectors, n };

    if !converged {
        let residual = eig.max_residual(m);
        if residual > 1e-6 * m.norm_inf().max(1.0) {
            return Err(Error::Numerical(format!(
                "Jacobi did not converge in {MAX_JACOBI_SWEEPS} sweeps (residual {residual:e})"
            )));
        }
    }
    Ok(eig)
}

/// Solution of `(K - e) y = λ K y` via the normalized operator
/// `K^{-1/2} (K - e) K^{-1/2}`.
#[derive(Debug, Clone)]
pub struct GeneralizedEigen {
    pub values: Vec<f64>,
    /// `y_j = K^{-1/2} Z_j`, one per eigenvalue, ascending.
    pub vectors: Vec<Vec<f64>>,
}

fn normalized_laplacian(degrees: &[f64], adjacency: &SymMatrix) -> Result<(SymMatrix, Vec<f64>)> {
    let n = degrees.len();
    if adjacency.order() != n {
        return Err(Error::Shape(format!(
            "degree vector has {n} entries but adjacency is {0}x{0}",
            adjacency.order()
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateGraph(format!("graph has {n} node(s), need at least 2")));
    }
    if let Some(i) = degrees.iter().position(|&k| !(k > 0.0) || !k.is_finite()) {
        return Err(Error::DegenerateGraph(format!("node {i} has degree {}", degrees[i])));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|k| 1.0 / k.sqrt()).collect();
    let mut norm = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let lap = if i == j {
                degrees[i] - adjacency.get(i, i)
            } else {
                -adjacency.get(i, j)
            };
            norm.set(i, j, inv_sqrt[i] * lap * inv_sqrt[j]);
        }
    }
    Ok((norm, inv_sqrt))
}

/// Full generalized spectrum, ascending.
pub fn generalized_spectrum(degrees: &[f64], adjacency: &SymMatrix) -> Result<GeneralizedEigen> {
    let (norm, inv_sqrt) = normalized_laplacian(degrees, adjacency)?;
    let eig = sym_eig(&norm)?;
    let vectors = (0..eig.order())
        .map(|j| eig.vector(j).iter().zip(&inv_sqrt).map(|(z, s)| z * s).collect())
        .collect();
    Ok(GeneralizedEigen {
        values: eig.values,
        vectors,
    })
}

/// Second-smallest generalized eigenpair `(λ₁, y₁)` of `(K - e) y = λ K y`.
///
/// The trivial eigenvector `Z₀ = K^{1/2} 1` of the normalized operator is
/// deflated (shifted above the spectrum) before the solve, so `y₁` is
/// K-orthogonal to the constant vector even when `λ = 0` is repeated on a
/// disconnected graph.
pub fn generalized_second_eigvec(degrees: &[f64], adjacency: &SymMatrix) -> Result<(f64, Vec<f64>)> {
    let (mut norm, inv_sqrt) = normalized_laplacian(degrees, adjacency)?;
    let n = degrees.len();
    let total: f64 = degrees.iter().sum();
    let z0: Vec<f64> = degrees.iter().map(|k| (k / total).sqrt()).collect();
    // Normalized-Laplacian eigenvalues lie in [0, 2]; 4 puts Z₀ strictly last.
    const SHIFT: f64 = 4.0;
    for i in 0..n {
        for j in i..n {
            let v = norm.get(i, j) + SHIFT * z0[i] * z0[j];
            norm.set(i, j, v);
        }
    }
    let eig = sym_eig(&norm)?;
    let lambda = eig.values[0];
    let mut z = eig.vector(0).to_vec();
    let proj: f64 = z.iter().zip(&z0).map(|(a, b)| a * b).sum();
    for (zi, z0i) in z.iter_mut().zip(&z0) {
        *zi -= proj * z0i;
    }
    let len = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(len > 0.5) {
        return Err(Error::Numerical(format!(
            "second eigenvector collapsed onto the trivial direction (norm {len:e})"
        )));
    }
    let y = z.iter().zip(&inv_sqrt).map(|(zi, s)| zi / len * s).collect();
    Ok((lambda, y))
}

/// `‖(K - e) y - λ K y‖∞`.
pub fn generalized_residual(degrees: &[f64], adjacency: &SymMatrix, lambda: f64, y: &[f64]) -> f64 {
    let ey = adjacency.mul_vec(y);
    (0..degrees.len())
        .map(|i| (degrees[i] * y[i] - ey[i] - lambda * degrees[i] * y[i]).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn degrees_of(e: &SymMatrix) -> Vec<f64> {
        (0..e.order()).map(|i| e.row(i).iter().sum()).collect()
    }

    fn adjacency(n: usize, edges: &[(usize, usize)], self_edges: bool) -> SymMatrix {
        let mut e = SymMatrix::zeros(n);
        for &(i, j) in edges {
            e.set(i, j, 1.0);
        }
        if self_edges {
            for i in 0..n {
                e.set(i, i, 1.0);
            }
        }
        e
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[0.6f32, 0.4], &[0.6f32, 0.4]), 1.0);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0f32, 1.0]), 0.0);
        let c = cosine(&[0.8f64, 0.2], &[0.2f64, 0.8]);
        assert!((c - 0.32 / 0.68).abs() < 1e-12);
        assert!((c - 0.470588).abs() < 1e-6);
        assert_eq!(cosine(&[0.0f32, 0.0], &[1.0f32, 2.0]), 0.0);
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax_normalize(&[-1.0, 0.0, 3.0]), vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn upsample_cases() {
        let one = GridMap::filled(1, 1, 0.5);
        let up = upsample_nearest(&one, 16);
        assert_eq!((up.height, up.width), (16, 16));
        assert!(up.data.iter().all(|&v| v == 0.5));

        let g = GridMap::new(2, 1, vec![0.0, 1.0]).unwrap();
        let up = upsample_nearest(&g, 2);
        assert_eq!(up.data, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);

        let g = GridMap::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(upsample_nearest(&g, 1).data, g.data);
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);

        let e = sym_eig(&SymMatrix::diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        for (j, axis) in [1usize, 2, 0].into_iter().enumerate() {
            let v = e.vector(j);
            assert_eq!(v[axis].abs(), 1.0);
        }
    }

    #[test]
    fn eig_two_by_two_closed_form() {
        let m = SymMatrix::from_upper(2, &[2.0, 1.0, 0.0, 2.0]);
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] - 3.0).abs() < 1e-12);
        let v0 = e.vector(0);
        assert!((v0[0] + v0[1]).abs() < 1e-12, "{v0:?} not ∝ (1,-1)");
        let v1 = e.vector(1);
        assert!((v1[0] - v1[1]).abs() < 1e-12, "{v1:?} not ∝ (1,1)");
    }

    #[test]
    fn eig_rejects_nan() {
        let mut m = SymMatrix::zeros(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(sym_eig(&m), Err(Error::Numerical(_))));
    }

    #[test]
    fn eig_residuals_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let mut m = SymMatrix::zeros(n);
            for i in 0..n {
                for j in i..n {
                    m.set(i, j, rng.random_range(-10.0..10.0));
                }
            }
            let e = sym_eig(&m).unwrap();
            let scale = m.norm_inf().max(1.0);
            assert!(e.max_residual(&m) <= 1e-6 * scale);
            assert!(e.orthonormality_error() <= 1e-6);
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn two_disjoint_cliques() {
        let e = adjacency(4, &[(0, 1), (2, 3)], true);
        let k = degrees_of(&e);
        let (lambda, y) = generalized_second_eigvec(&k, &e).unwrap();
        assert!(lambda.abs() < 1e-12);
        assert!((y[0] - y[1]).abs() < 1e-12 && (y[2] - y[3]).abs() < 1e-12);
        assert!(y[0] * y[2] < 0.0);
        let mean = y.iter().sum::<f64>() / 4.0;
        let fg: Vec<bool> = y.iter().map(|&v| v >= mean).collect();
        assert_eq!(fg[0], fg[1]);
        assert_eq!(fg[2], fg[3]);
        assert_ne!(fg[0], fg[2]);
    }

    #[test]
    fn complete_graph_k4() {
        // K4 with self-edges: degrees 4; normalized operator I - J/4 has
        // eigenvalues {0, 1, 1, 1}. Without self-edges: {0, 4/3, 4/3, 4/3}.
        let all: Vec<(usize, usize)> = (0..4).flat_map(|i| ((i + 1)..4).map(move |j| (i, j))).collect();
        for (self_edges, expected) in [(false, 4.0 / 3.0), (true, 1.0)] {
            let e = adjacency(4, &all, self_edges);
            let k = degrees_of(&e);
            let (lambda, y) = generalized_second_eigvec(&k, &e).unwrap();
            assert!((lambda - expected).abs() < 1e-12, "{lambda}");
            assert!(generalized_residual(&k, &e, lambda, &y) <= 1e-6);
            let kdot: f64 = y.iter().zip(&k).map(|(a, b)| a * b).sum();
            assert!(kdot.abs() <= 1e-6 * k.iter().sum::<f64>());
        }
    }

    #[test]
    fn path_graph_matches_brute_force() {
        // 0-1-2 without self-edges: K = diag(1,2,1). Brute-force the
        // generalized system det(K - e - λK) = 0 by scanning λ and
        // compare the λ₁ eigenvector sign pattern.
        let e = adjacency(3, &[(0, 1), (1, 2)], false);
        let k = degrees_of(&e);
        let (lambda, y) = generalized_second_eigvec(&k, &e).unwrap();
        // generalized eigenvalues of the 3-path are 0, 1, 2
        let det = |l: f64| {
            let m = [
                [1.0 - l, -1.0, 0.0],
                [-1.0, 2.0 - 2.0 * l, -1.0],
                [0.0, -1.0, 1.0 - l],
            ];
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let roots: Vec<f64> = (0..=2000)
            .map(|i| i as f64 / 1000.0)
            .filter(|&l| det(l).abs() < 1e-9)
            .collect();
        assert_eq!(roots, vec![0.0, 1.0, 2.0]);
        assert!((lambda - 1.0).abs() < 1e-12);
        // eigenvector for λ=1 is (1, 0, -1): endpoints on opposite sides
        assert!(y[1].abs() < 1e-12);
        assert!(y[0] * y[2] < 0.0);
        let mean = y.iter().sum::<f64>() / 3.0;
        let fg: Vec<bool> = y.iter().map(|&v| v >= mean).collect();
        // one endpoint is separated from the other two
        let fg_count = fg.iter().filter(|&&f| f).count();
        assert!(fg_count == 1 || fg_count == 2);
        assert_ne!(fg[0], fg[2]);
    }

    #[test]
    fn degenerate_inputs() {
        let e = adjacency(1, &[], true);
        assert!(matches!(
            generalized_second_eigvec(&[1.0], &e),
            Err(Error::DegenerateGraph(_))
        ));
        let e = adjacency(2, &[], false);
        assert!(matches!(
            generalized_second_eigvec(&[0.0, 0.0], &e),
            Err(Error::DegenerateGraph(_))
        ));
    }

    fn random_connected(rng: &mut ChaCha8Rng, n: usize, p: f64) -> SymMatrix {
        let mut e = SymMatrix::zeros(n);
        // random spanning tree keeps it connected
        for i in 1..n {
            let j = rng.random_range(0..i);
            e.set(i, j, 1.0);
        }
        for i in 0..n {
            e.set(i, i, 1.0);
            for j in (i + 1)..n {
                if rng.random_bool(p) {
                    e.set(i, j, 1.0);
                }
            }
        }
        e
    }

    #[test]
    fn generalized_properties_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(2..=30);
            let density = rng.random_range(0.05..0.6);
            let e = random_connected(&mut rng, n, density);
            let k = degrees_of(&e);
            let spec = generalized_spectrum(&k, &e).unwrap();
            assert!(spec.values[0].abs() < 1e-9);
            let y0 = &spec.vectors[0];
            let spread = y0.iter().fold(0.0f64, |m, v| m.max((v - y0[0]).abs()));
            assert!(spread < 1e-9 * y0[0].abs().max(1.0), "y0 not constant");
            let (lambda, y) = generalized_second_eigvec(&k, &e).unwrap();
            assert!(lambda >= -1e-12);
            assert!((lambda - spec.values[1]).abs() < 1e-9);
            assert!(generalized_residual(&k, &e, lambda, &y) <= 1e-6);
            let kdot: f64 = y.iter().zip(&k).map(|(a, b)| a * b).sum();
            assert!(kdot.abs() <= 1e-6 * k.iter().sum::<f64>());
        }
    }

    #[test]
    fn planted_blocks_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(4..=30);
            let in_a: Vec<bool> = {
                let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
                v[0] = true;
                v[1] = false;
                v
            };
            let mut e = SymMatrix::zeros(n);
            for i in 0..n {
                for j in i..n {
                    if in_a[i] == in_a[j] {
                        e.set(i, j, 1.0);
                    }
                }
            }
            let k = degrees_of(&e);
            let (_, y) = generalized_second_eigvec(&k, &e).unwrap();
            let mean = y.iter().sum::<f64>() / n as f64;
            let fg: Vec<bool> = y.iter().map(|&v| v >= mean).collect();
            let matches_a = fg == in_a;
            let matches_b = fg.iter().zip(&in_a).all(|(f, a)| f != a);
            assert!(matches_a || matches_b);
        }
    }
}
