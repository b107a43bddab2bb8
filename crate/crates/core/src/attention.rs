//! Single-head scaled dot-product attention and the cross-frame variant in
//! which every frame reads keys and values from the first frame.

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidClip(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidClip("ragged matrix rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Softmax weights of `q kᵀ / sqrt(d)`, one row per query.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::shape("attention q/k", &[q.rows, q.cols], &[k.rows, k.cols]));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut weights = Vec::with_capacity(q.rows * k.rows);
    let mut logits = vec![0.0; k.rows];
    for i in 0..q.rows {
        let qi = q.row(i);
        for (j, logit) in logits.iter_mut().enumerate() {
            *logit = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        weights.extend(exps.into_iter().map(|e| e / total));
    }
    Matrix::new(q.rows, k.rows, weights)
}

/// `softmax(q kᵀ / sqrt(d)) v` with row-wise max subtraction.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows != v.rows {
        return Err(Error::shape("attention k/v", &[k.rows, k.cols], &[v.rows, v.cols]));
    }
    let w = attention_weights(q, k)?;
    let mut out = vec![0.0; q.rows * v.cols];
    for i in 0..q.rows {
        let wi = w.row(i);
        let oi = &mut out[i * v.cols..(i + 1) * v.cols];
        for (j, &wij) in wi.iter().enumerate() {
            for (o, &vj) in oi.iter_mut().zip(v.row(j)) {
                *o += wij * vj;
            }
        }
    }
    Matrix::new(q.rows, v.cols, out)
}

/// Per-frame query, key and value matrices.
#[derive(Debug, Clone)]
pub struct AttentionBatch {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AttentionBatch {
    pub fn new(q: Vec<Matrix>, k: Vec<Matrix>, v: Vec<Matrix>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidClip("empty attention batch".into()));
        }
        if q.len() != k.len() || q.len() != v.len() {
            return Err(Error::shape("attention batch", &[q.len(), k.len()], &[v.len()]));
        }
        let d = q[0].cols;
        for ((qi, ki), vi) in q.iter().zip(&k).zip(&v) {
            if qi.cols != d || ki.cols != d {
                return Err(Error::shape("attention batch width", &[d], &[qi.cols, ki.cols]));
            }
            if ki.rows != vi.rows {
                return Err(Error::shape("attention batch k/v", &[ki.rows], &[vi.rows]));
            }
        }
        Ok(Self { q, k, v })
    }

    pub fn frames(&self) -> usize {
        self.q.len()
    }
}

/// Ordinary per-frame self-attention.
pub fn self_attention(batch: &AttentionBatch) -> Result<Vec<Matrix>> {
    (0..batch.frames())
        .map(|i| attention(&batch.q[i], &batch.k[i], &batch.v[i]))
        .collect()
}

/// Every frame attends to the first frame's keys and values.
pub fn cross_frame_attention(batch: &AttentionBatch) -> Result<Vec<Matrix>> {
    let (k1, v1) = (&batch.k[0], &batch.v[0]);
    batch.q.iter().map(|qi| attention(qi, k1, v1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_matrix(&mut rng, 5, 3);
        let k = random_matrix(&mut rng, 1, 3);
        let v = Matrix::from_rows(&[vec![0.25, -1.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn orthogonal_queries_average_values() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0], vec![0.0, 0.5]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 3.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out.row(i)[0] - 1.0).abs() < 1e-12);
            assert!((out.row(i)[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_computation() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        let a = (1.0f64 / 2.0f64.sqrt()).exp();
        let (w0, w1) = (a / (a + 1.0), 1.0 / (a + 1.0));
        assert!((out.row(0)[0] - w0).abs() < 1e-9);
        assert!((out.row(0)[1] - w1).abs() < 1e-9);
    }

    #[test]
    fn dimension_errors() {
        let a = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        let b = Matrix::new(2, 2, vec![0.0; 4]).unwrap();
        let c = Matrix::new(3, 3, vec![0.0; 9]).unwrap();
        assert!(attention(&a, &b, &b).is_err());
        assert!(attention(&a, &a, &c).is_err());
        assert!(AttentionBatch::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn single_frame_cross_equals_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = AttentionBatch::new(
            vec![random_matrix(&mut rng, 4, 3)],
            vec![random_matrix(&mut rng, 6, 3)],
            vec![random_matrix(&mut rng, 6, 2)],
        )
        .unwrap();
        assert_eq!(cross_frame_attention(&batch).unwrap(), self_attention(&batch).unwrap());
    }

    #[test]
    fn identical_frames_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            random_matrix(&mut rng, 4, 3),
            random_matrix(&mut rng, 4, 3),
            random_matrix(&mut rng, 4, 3),
        );
        let batch = AttentionBatch::new(vec![q; 3], vec![k; 3], vec![v; 3]).unwrap();
        let cf = cross_frame_attention(&batch).unwrap();
        let sa = self_attention(&batch).unwrap();
        for (a, b) in cf.iter().zip(&sa) {
            assert!(a.max_abs_diff(b) <= 1e-9);
        }
    }

    #[test]
    fn later_frames_ignore_their_own_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| {
            AttentionBatch::new(
                (0..3).map(|_| random_matrix(rng, 5, 3)).collect(),
                (0..3).map(|_| random_matrix(rng, 5, 3)).collect(),
                (0..3).map(|_| random_matrix(rng, 5, 3)).collect(),
            )
            .unwrap()
        };
        let batch = mk(&mut rng);
        let before = cross_frame_attention(&batch).unwrap();
        let mut mutated = batch.clone();
        for i in 1..3 {
            mutated.k[i] = random_matrix(&mut rng, 7, 3);
            mutated.v[i] = random_matrix(&mut rng, 7, 3);
        }
        assert_eq!(cross_frame_attention(&mutated).unwrap(), before);
    }

    proptest! {
        #[test]
        fn weight_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 24)) {
            let q = Matrix::new(4, 3, vals[..12].to_vec()).unwrap();
            let k = Matrix::new(4, 3, vals[12..].to_vec()).unwrap();
            let w = attention_weights(&q, &k).unwrap();
            for i in 0..4 {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn row_logit_shift_invariance(vals in proptest::collection::vec(-3.0f64..3.0, 12), shift in -500.0f64..500.0) {
            // Rescale keys for the wider d, then append a feature that adds
            // the same constant to every logit of a row.
            let q = Matrix::new(2, 3, vals[..6].to_vec()).unwrap();
            let k = Matrix::new(2, 3, vals[6..].to_vec()).unwrap();
            let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
            let q_ext = Matrix::from_rows(&(0..2).map(|i| { let mut r = q.row(i).to_vec(); r.push(1.0); r }).collect::<Vec<_>>()).unwrap();
            let k_ext = Matrix::from_rows(&(0..2).map(|j| { let mut r: Vec<f64> = k.row(j).iter().map(|x| x * 2.0 / 3.0f64.sqrt()).collect(); r.push(shift); r }).collect::<Vec<_>>()).unwrap();
            let base = attention(&q, &k, &v).unwrap();
            let shifted = attention(&q_ext, &k_ext, &v).unwrap();
            prop_assert!(base.max_abs_diff(&shifted) <= 1e-9);
        }
    }
}
