//! Dense numerical primitives shared by the rest of the crate.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Mat64`].
//! Random numbers come from [`RandomStream`], a ChaCha8 generator keyed by a
//! `(seed, purpose-label)` pair so that independent consumers (data, init,
//! shuffling) never perturb each other's sequences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_same_len, Error, Result};

/// A feature vector, prototype or mean. Elements are finite.
pub type Vec64 = Vec<f64>;

/// Denominator guard for cosine similarity on zero-norm inputs.
pub const COSINE_EPS: f64 = 1e-8;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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
        ensure_same_len("matrix payload", values.len(), rows * cols)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix payload"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ensure_same_len("matrix row", row.len(), cols)?;
            values.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, values)
    }

    /// Entries drawn from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f64, stream: &mut RandomStream) -> Self {
        let values = (0..rows * cols).map(|_| std * stream.normal()).collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec64> {
        ensure_same_len("matrix-vector product", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn transpose_mul_vec(&self, y: &[f64]) -> Result<Vec64> {
        ensure_same_len("transposed matrix-vector product", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += s * vc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += scale · x`.
pub fn axpy(y: &mut [f64], x: &[f64], scale: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += scale * xi;
    }
}

/// `dot(a,b) / max(‖a‖‖b‖, ε)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_same_len("cosine similarity", a.len(), b.len())?;
    let denom = (norm(a) * norm(b)).max(COSINE_EPS);
    let c = dot(a, b) / denom;
    if !c.is_finite() {
        return Err(Error::NonFinite("cosine similarity"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// Partial derivatives of the unclamped cosine with respect to `a` and `b`.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> (Vec64, Vec64) {
    let (na, nb) = (norm(a), norm(b));
    let guarded = na * nb < COSINE_EPS;
    let denom = (na * nb).max(COSINE_EPS);
    // Below the guard the denominator is constant and the map is bilinear.
    let k = if guarded {
        0.0
    } else {
        dot(a, b) / (denom * denom)
    };
    let da = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| {
            let radial = if na > 0.0 { k * nb * ai / na } else { 0.0 };
            bi / denom - radial
        })
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| {
            let radial = if nb > 0.0 { k * na * bi / nb } else { 0.0 };
            ai / denom - radial
        })
        .collect();
    (da, db)
}

/// Softmax with max-subtraction; never overflows for finite input.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec64> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec64 = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `weights · x + bias`.
pub fn linear_forward(weights: &Mat64, bias: &[f64], x: &[f64]) -> Result<Vec64> {
    ensure_same_len("linear bias", bias.len(), weights.rows())?;
    let mut out = weights.mul_vec(x)?;
    axpy(&mut out, bias, 1.0);
    Ok(out)
}

/// Deterministic random source keyed by `(seed, purpose-label)`.
///
/// The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64(seed)`
/// with the stream id set to the 64-bit FNV-1a hash of the label. Uniforms use
/// the 53-bit mantissa construction from `rand`; normals use the Box–Muller
/// cosine branch (one normal per pair of uniforms).
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(label.as_bytes()));
        Self {
            seed,
            label: label.to_owned(),
            rng,
        }
    }

    /// A fresh stream with the same seed and a label nested under this one.
    pub fn child(&self, sub: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.label, sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn draw_normal(&mut self, n: usize) -> Result<Vec64> {
        if n == 0 {
            return Err(Error::InvalidArgument("draw_normal requires n >= 1".into()));
        }
        Ok((0..n).map(|_| self.normal()).collect())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn cosine_rejects_mismatch() {
        let err = cosine_similarity(&[1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("2 vs 3"), "{err}");
    }

    #[test]
    fn cosine_zero_vector_is_guarded() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = stable_softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = stable_softmax(&[1.0, 0.0]).unwrap();
        let e = 1f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731_058_58).abs() < 1e-8);
        assert!((p[1] - 0.268_941_42).abs() < 1e-8);
        assert!(stable_softmax(&[]).is_err());
        assert!(stable_softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn linear_examples() {
        let id = Mat64::identity(2);
        assert_eq!(
            linear_forward(&id, &[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        let z = Mat64::zeros(2, 3);
        assert_eq!(
            linear_forward(&z, &[5.0, -1.0], &[1.0, 2.0, 3.0]).unwrap(),
            vec![5.0, -1.0]
        );
        let w = Mat64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(
            linear_forward(&w, &[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            vec![3.0, 7.0]
        );
        assert!(linear_forward(&w, &[0.0], &[1.0, 1.0]).is_err());
        assert!(linear_forward(&w, &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn transpose_product_matches_explicit_transpose() {
        let w = Mat64::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let y = [0.5, -2.0];
        let expected: Vec<f64> = (0..3)
            .map(|c| w.get(0, c) * y[0] + w.get(1, c) * y[1])
            .collect();
        assert_eq!(w.transpose_mul_vec(&y).unwrap(), expected);
    }

    #[test]
    fn streams_are_reproducible_and_label_separated() {
        let a = RandomStream::new(7, "data").draw_normal(64).unwrap();
        let b = RandomStream::new(7, "data").draw_normal(64).unwrap();
        let c = RandomStream::new(7, "init").draw_normal(64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(RandomStream::new(7, "data").draw_normal(0).is_err());
    }

    #[test]
    fn normal_moments() {
        let n = 1_000_000;
        let xs = RandomStream::new(2024, "moments").draw_normal(n).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0..10.0f64, n)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(x in vec_strategy(6), c in -1e3..1e3f64) {
            let p = stable_softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = stable_softmax(&shifted).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_and_symmetry(a in vec_strategy(5), b in vec_strategy(5), lambda in 0.01..100.0f64) {
            prop_assume!(norm(&a) > 1e-3);
            let scaled: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);
            prop_assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
        }

        #[test]
        fn linear_is_affine(seed in 0u64..1000, alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
            let mut s = RandomStream::new(seed, "affine");
            let w = Mat64::random_normal(4, 3, 1.0, &mut s);
            let bias = s.draw_normal(4).unwrap();
            let x = s.draw_normal(3).unwrap();
            let y = s.draw_normal(3).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = linear_forward(&w, &bias, &mix).unwrap();
            let fx = linear_forward(&w, &bias, &x).unwrap();
            let fy = linear_forward(&w, &bias, &y).unwrap();
            for i in 0..4 {
                let rhs = alpha * fx[i] + beta * fy[i] - (alpha + beta - 1.0) * bias[i];
                prop_assert!((lhs[i] - rhs).abs() < 1e-10);
            }
        }
    }
}
