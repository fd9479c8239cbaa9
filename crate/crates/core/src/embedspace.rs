//! Similarity logits in a shared embedding space and the low-rank adapter
//! applied to image features before they are compared with class embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// One embedding per row.
pub type EmbeddingMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix values",
                expected: rows * cols,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix values"));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count; the embedding dimension when rows are embeddings.
    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self * x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                what: "matrix-vector product",
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok(self.iter_rows().map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ * y`.
    pub fn tmul_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                what: "transposed matrix-vector product",
                expected: self.rows,
                got: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.iter_rows().zip(y) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += yi * v;
            }
        }
        Ok(out)
    }

    /// Copy with every row scaled to unit norm.
    pub fn normalized_rows(&self) -> Result<Matrix> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm("class embedding"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity between `image_vec` and every row of `class_embeds`.
pub fn cosine_logits(image_vec: &[f64], class_embeds: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if image_vec.len() != class_embeds.dim() {
        return Err(Error::DimensionMismatch {
            what: "cosine logits",
            expected: class_embeds.dim(),
            got: image_vec.len(),
        });
    }
    let v_norm = norm(image_vec);
    if v_norm == 0.0 {
        return Err(Error::ZeroNorm("image vector"));
    }
    class_embeds
        .iter_rows()
        .map(|t| {
            let t_norm = norm(t);
            if t_norm == 0.0 {
                Err(Error::ZeroNorm("class embedding"))
            } else {
                Ok((dot(image_vec, t) / (v_norm * t_norm)).clamp(-1.0, 1.0))
            }
        })
        .collect()
}

/// Class embeddings for every level with rows pre-normalized, so that the
/// forward and backward passes need only the image-side norm.
#[derive(Debug, Clone)]
pub struct ClassEmbeddings {
    unit: Vec<Matrix>,
}

impl ClassEmbeddings {
    pub fn new(per_level: &[EmbeddingMatrix]) -> Result<Self> {
        let dim = per_level.first().map_or(0, Matrix::dim);
        let unit = per_level
            .iter()
            .map(|m| {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "class embedding dim",
                        expected: dim,
                        got: m.dim(),
                    });
                }
                m.normalized_rows()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassEmbeddings { unit })
    }

    pub fn num_levels(&self) -> usize {
        self.unit.len()
    }

    pub fn dim(&self) -> usize {
        self.unit.first().map_or(0, Matrix::dim)
    }

    pub fn level(&self, l: usize) -> &Matrix {
        &self.unit[l]
    }

    /// Per-level cosine logits for one embedded image.
    pub fn logits(&self, v: &[f64]) -> Result<Vec<Vec<f64>>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "cosine logits",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let v_norm = norm(v);
        if v_norm == 0.0 {
            return Err(Error::ZeroNorm("image vector"));
        }
        Ok(self
            .unit
            .iter()
            .map(|m| m.iter_rows().map(|t| dot(v, t) / v_norm).collect())
            .collect())
    }

    /// Gradient with respect to `v` given upstream gradients on the logits.
    ///
    /// `dz_c/dv = t̂_c / |v| - z_c v / |v|²`.
    pub fn logits_backward(&self, v: &[f64], logits: &[Vec<f64>], upstream: &[Vec<f64>]) -> Vec<f64> {
        let v_norm = norm(v);
        let mut out = vec![0.0; v.len()];
        let mut radial = 0.0;
        for ((m, z), g) in self.unit.iter().zip(logits).zip(upstream) {
            for ((t, &zc), &gc) in m.iter_rows().zip(z).zip(g) {
                if gc == 0.0 {
                    continue;
                }
                for (o, &tv) in out.iter_mut().zip(t) {
                    *o += gc * tv / v_norm;
                }
                radial += gc * zc;
            }
        }
        let scale = radial / (v_norm * v_norm);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o -= scale * vi;
        }
        out
    }
}

/// Frozen base projection plus a trainable low-rank update.
///
/// The effective weight is `W0 + (alpha / rank) · B · A` with `W0: d×k`,
/// `A: r×k` and `B: d×r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub w0: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

/// Gradients for the trainable factors only; `W0` is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterGrad {
    pub fn zeros_like(state: &AdapterState) -> Self {
        AdapterGrad {
            a: Matrix::zeros(state.a.rows(), state.a.dim()),
            b: Matrix::zeros(state.b.rows(), state.b.dim()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.a.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.b.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    }
}

impl AdapterState {
    /// Zero `B` and uniform `A` in `±1/sqrt(k)`, so the adapter starts out
    /// computing exactly `W0 · x`.
    pub fn init(w0: Matrix, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("rank", "must be at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
        }
        let (d, k) = (w0.rows(), w0.dim());
        let bound = 1.0 / (k.max(1) as f64).sqrt();
        let a_vals = (0..rank * k).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(AdapterState {
            a: Matrix::from_vec(rank, k, a_vals)?,
            b: Matrix::zeros(d, rank),
            w0,
            rank,
            alpha,
        })
    }

    pub fn from_parts(w0: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.rows();
        if a.dim() != w0.dim() {
            return Err(Error::DimensionMismatch {
                what: "adapter A columns",
                expected: w0.dim(),
                got: a.dim(),
            });
        }
        if b.rows() != w0.rows() || b.dim() != rank {
            return Err(Error::DimensionMismatch {
                what: "adapter B shape",
                expected: w0.rows() * rank,
                got: b.rows() * b.dim(),
            });
        }
        if rank == 0 {
            return Err(Error::invalid("rank", "must be at least 1"));
        }
        Ok(AdapterState { w0, a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn input_dim(&self) -> usize {
        self.w0.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn trainable_params(&self) -> usize {
        self.rank * (self.output_dim() + self.input_dim())
    }

    /// `W0 + (alpha/r) · B · A`, materialized.
    pub fn effective_weight(&self) -> Matrix {
        let s = self.scaling();
        let mut w = self.w0.clone();
        for i in 0..w.rows() {
            for j in 0..w.dim() {
                let delta: f64 = (0..self.rank).map(|p| self.b.get(i, p) * self.a.get(p, j)).sum();
                w.row_mut(i)[j] += s * delta;
            }
        }
        w
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.w0.mul_vec(x)?;
        let ax = self.a.mul_vec(x)?;
        let bax = self.b.mul_vec(&ax)?;
        let s = self.scaling();
        for (o, v) in out.iter_mut().zip(bax) {
            *o += s * v;
        }
        Ok(out)
    }

    pub fn grad(&self, x: &[f64], upstream: &[f64]) -> Result<AdapterGrad> {
        let mut g = AdapterGrad::zeros_like(self);
        self.accumulate_grad(x, upstream, &mut g)?;
        Ok(g)
    }

    /// Adds `∂/∂A = s·Bᵀ·u·xᵀ` and `∂/∂B = s·u·(A·x)ᵀ` into `acc`.
    pub fn accumulate_grad(&self, x: &[f64], upstream: &[f64], acc: &mut AdapterGrad) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "adapter upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let s = self.scaling();
        let ax = self.a.mul_vec(x)?;
        let btu = self.b.tmul_vec(upstream)?;
        for (p, &bu) in btu.iter().enumerate() {
            let row = acc.a.row_mut(p);
            for (g, &xj) in row.iter_mut().zip(x) {
                *g += s * bu * xj;
            }
        }
        for (i, &u) in upstream.iter().enumerate() {
            let row = acc.b.row_mut(i);
            for (g, &axp) in row.iter_mut().zip(&ax) {
                *g += s * u * axp;
            }
        }
        Ok(())
    }
}

/// Per-level raw scores for one sample, coarse to fine, with the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct HierLogits {
    pub levels: Vec<Vec<f64>>,
    pub tau: f64,
}

impl HierLogits {
    pub fn new(levels: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
        }
        if levels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(HierLogits { levels, tau })
    }

    /// Per-level argmax; ties go to the lowest id.
    pub fn argmax(&self) -> Vec<usize> {
        self.levels.iter().map(|z| argmax(z)).collect()
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn cosine_closed_forms() {
        let v = [0.3, -1.2, 4.0];
        assert_relative_eq!(cosine_logits(&v, &row(&v)).unwrap()[0], 1.0, epsilon = 1e-15);
        assert_eq!(cosine_logits(&[1.0, 0.0], &row(&[0.0, 2.0])).unwrap()[0], 0.0);
        assert_relative_eq!(
            cosine_logits(&[1.0, 0.0], &row(&[1.0, 1.0])).unwrap()[0],
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_logits(&[0.0, 0.0], &row(&[1.0, 1.0])),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            cosine_logits(&[1.0, 0.0], &row(&[0.0, 0.0])),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            cosine_logits(&[1.0], &row(&[1.0, 1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn class_embeddings_agree_with_cosine_logits() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]).unwrap();
        let ce = ClassEmbeddings::new(std::slice::from_ref(&m)).unwrap();
        let v = [0.2, -0.7, 1.1];
        let a = ce.logits(&v).unwrap();
        let b = cosine_logits(&v, &m).unwrap();
        for (x, y) in a[0].iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let m1 = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]).unwrap();
        let m2 = Matrix::from_rows(&[vec![0.3, 0.1, -0.4]]).unwrap();
        let ce = ClassEmbeddings::new(&[m1, m2]).unwrap();
        let v = vec![0.2, -0.7, 1.1];
        let up = vec![vec![0.5, -1.5], vec![2.0]];
        let f = |v: &[f64]| -> f64 {
            let z = ce.logits(v).unwrap();
            z.iter().flatten().zip(up.iter().flatten()).map(|(a, b)| a * b).sum()
        };
        let z = ce.logits(&v).unwrap();
        let g = ce.logits_backward(&v, &z, &up);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = v.clone();
            p[i] += h;
            let mut q = v.clone();
            q[i] -= h;
            assert_relative_eq!(g[i], (f(&p) - f(&q)) / (2.0 * h), epsilon = 1e-8);
        }
    }

    fn small_state(d: usize, k: usize, r: usize, alpha: f64, seed: u64) -> AdapterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Matrix::from_vec(d, k, (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut s = AdapterState::init(w0, r, alpha, &mut rng).unwrap();
        s.b.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        s
    }

    #[test]
    fn zero_b_is_the_base_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 0.5]]).unwrap();
        let s = AdapterState::init(w0.clone(), 4, 32.0, &mut rng).unwrap();
        let x = [0.5, -0.25, 2.0];
        assert_eq!(s.forward(&x).unwrap(), w0.mul_vec(&x).unwrap());
    }

    #[test]
    fn pure_low_rank_path() {
        let mut s = small_state(3, 2, 2, 2.0, 11);
        s.w0 = Matrix::zeros(3, 2);
        let x = [0.7, -1.3];
        let expected = s.b.mul_vec(&s.a.mul_vec(&x).unwrap()).unwrap();
        let got = s.forward(&x).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn parameter_count() {
        let s = small_state(4, 3, 2, 1.0, 0);
        assert_eq!(s.trainable_params(), 14);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let s = small_state(4, 3, 2, 1.0, 1);
        let g = s.grad(&[1.0, 2.0, 3.0], &[0.0; 4]).unwrap();
        assert!(g.a.as_slice().iter().chain(g.b.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn grads_double_with_alpha() {
        let s = small_state(4, 3, 2, 1.5, 2);
        let mut s2 = s.clone();
        s2.alpha = 3.0;
        let x = [0.3, -0.1, 0.9];
        let u = [1.0, -2.0, 0.5, 0.25];
        let g1 = s.grad(&x, &u).unwrap();
        let g2 = s2.grad(&x, &u).unwrap();
        for (a, b) in
            g1.a.as_slice()
                .iter()
                .chain(g1.b.as_slice())
                .zip(g2.a.as_slice().iter().chain(g2.b.as_slice()))
        {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn forward_matches_effective_weight() {
        let s = small_state(5, 4, 3, 6.0, 9);
        let x = [0.1, 0.2, -0.3, 0.4];
        let direct = s.effective_weight().mul_vec(&x).unwrap();
        for (a, b) in s.forward(&x).unwrap().iter().zip(&direct) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn adapter_dimension_errors() {
        let s = small_state(4, 3, 2, 1.0, 0);
        assert!(s.forward(&[1.0, 2.0]).is_err());
        assert!(s.grad(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
