//! Dense f64 tensors, a reverse-mode autodiff graph, and a finite-difference
//! gradient checker.
//!
//! Tensors are row-major with rank at most 3. Every operation treats its
//! operands as matrices: rank 0 is `1×1`, rank 1 is `1×n`, and rank 3
//! folds its leading two axes into rows.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{check_graph_fn, finite_diff_check, relative_error};
pub use graph::{Gradients, Graph, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Input(format!("tensor rank {} exceeds {MAX_RANK}", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(shape, data).expect("valid shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new(shape, data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Matrix view `(rows, cols)`.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [a, b, c] => (a * b, *c),
            _ => unreachable!("rank is bounded"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2();
        let (d2, m) = other.dims2();
        if d != d2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, d, m, &self.data, false, &other.data, false, &mut out, false);
        Tensor::new(&[n, m], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out).expect("valid shape")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.ensure_finite("softmax_rows")?;
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            kernels::softmax_in_place(&mut out[i * c..(i + 1) * c], None);
        }
        Tensor::new(&self.shape, out)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        self.ensure_finite("log_softmax_rows")?;
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c).take(r) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Tensor::new(&self.shape, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{op}: non-finite input {bad}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        assert_eq!(a.matmul(&Tensor::eye(5)).unwrap(), a);
        let z = a.matmul(&Tensor::zeros(&[5, 2])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]])
            .unwrap()
            .softmax_rows()
            .unwrap();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap().softmax_rows().unwrap();
        assert!((s.data()[0] - 0.26894).abs() < 1e-5);
        assert!((s.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let z = Tensor::randn(&[3, 7], 3.0, &mut rng);
            let c = rng.gen_range(-50.0..50.0);
            let a = z.softmax_rows().unwrap();
            let b = z.map(|x| x + c).softmax_rows().unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
            for r in 0..3 {
                let row = a.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(Error::Numeric(_))));
        let t = Tensor::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(Error::Numeric(_))));
    }
}
