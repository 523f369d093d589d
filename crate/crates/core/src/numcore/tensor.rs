use crate::error::{argument, Error, Result};
use crate::exec::Exec;

/// Row-major dense tensor of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                context: "shape product vs data length",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                context: "expected a 2-D tensor",
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_same_shape(other, "elementwise operands")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                context,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element in each row of a 2-D tensor (first on ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, _) = self.dims2()?;
        Ok((0..rows)
            .map(|i| {
                let mut best = 0;
                let row = self.row(i);
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(argument(format!("row index {i} out of range {rows}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), cols], data)
    }

    /// `self · other` for `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let work = self.len() * other.shape.last().copied().unwrap_or(0);
        self.matmul_with(other, Exec::auto(work))
    }

    pub fn matmul_with(&self, other: &Tensor, exec: Exec) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                context: "matmul inner dimensions",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0f32; m * n];
        exec.for_each_chunk(&mut out, n, |i, row| {
            let mut acc = vec![0f64; n];
            for p in 0..k {
                let av = f64::from(a[i * k + p]);
                for (j, s) in acc.iter_mut().enumerate() {
                    *s += av * f64::from(b[p * n + j]);
                }
            }
            for (o, s) in row.iter_mut().zip(acc) {
                *o = s as f32;
            }
        });
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ` for `[m×k]·[n×k]ᵀ`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                context: "matmul (b transposed) inner dimensions",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0f32; m * n];
        Exec::auto(m * n * k).for_each_chunk(&mut out, n, |i, row| {
            let ar = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let br = &b[j * k..(j + 1) * k];
                let s: f64 = ar
                    .iter()
                    .zip(br)
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum();
                *o = s as f32;
            }
        });
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · other` for `[k×m]ᵀ·[k×n]`.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                context: "matmul (a transposed) inner dimensions",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0f32; m * n];
        Exec::auto(m * n * k).for_each_chunk(&mut out, n, |i, row| {
            let mut acc = vec![0f64; n];
            for p in 0..k {
                let av = f64::from(a[p * m + i]);
                for (j, s) in acc.iter_mut().enumerate() {
                    *s += av * f64::from(b[p * n + j]);
                }
            }
            for (o, s) in row.iter_mut().zip(acc) {
                *o = s as f32;
            }
        });
        Tensor::new(vec![m, n], out)
    }
}

/// Standard matrix product with f64 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Elementwise `min(max(v, lo), hi)`.
pub fn clamp(t: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(argument(format!("clamp bounds lo={lo} > hi={hi}")));
    }
    Ok(t.map(|v| v.max(lo).min(hi)))
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(t: &Tensor) -> Tensor {
    t.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Frobenius norm of the concatenation of several tensors.
pub fn frobenius_norm_concat<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    tensors
        .into_iter()
        .map(Tensor::sum_squares)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngState;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] +=
                        f64::from(a.data()[i * k + p]) * f64::from(b.data()[p * n + j]);
                }
            }
        }
        out
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = t.dims2().unwrap();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = t.data()[i * c + j];
            }
        }
        Tensor::new(vec![c, r], d).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&i, &b).unwrap(), b);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngState::new(11);
        let a = rng.gaussian(&[5, 7]);
        let b = rng.gaussian(&[7, 3]);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((f64::from(*g) - e).abs() < 1e-6);
        }
        // transposed variants agree with the plain product
        let bt = transpose(&b);
        assert!(a.matmul_bt(&bt).unwrap().bit_eq(&got));
        let at = transpose(&a);
        assert!(at.matmul_at(&b).unwrap().bit_eq(&got));
        assert!(a.matmul_with(&b, Exec::Parallel).unwrap().bit_eq(&got));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn clamp_cases() {
        let t = Tensor::vector(vec![-0.5, 0.3, 1.7]);
        assert_eq!(clamp(&t, 0.0, 1.0).unwrap().data(), &[0.0, 0.3, 1.0]);
        assert_eq!(clamp(&t, f32::MIN, f32::MAX).unwrap(), t);
        assert!(clamp(&t, 1.0, 0.0).is_err());

        let mut rng = RngState::new(3);
        let r = rng.gaussian(&[1000]);
        let c = clamp(&r, -0.5, 0.7).unwrap();
        for (&o, &i) in c.data().iter().zip(r.data()) {
            assert!((-0.5..=0.7).contains(&o));
            if (-0.5..=0.7).contains(&i) {
                assert_eq!(o, i);
            }
        }
    }

    #[test]
    fn sign_cases() {
        let t = Tensor::vector(vec![-2.5, 0.0, 0.1]);
        assert_eq!(sign(&t).data(), &[-1.0, 0.0, 1.0]);
        let mut rng = RngState::new(5);
        let r = rng.gaussian(&[500]);
        let s = sign(&r);
        assert_eq!(sign(&s), s);
        for (&sv, &v) in s.data().iter().zip(r.data()) {
            assert!(sv == -1.0 || sv == 0.0 || sv == 1.0);
            assert!((sv * v.abs() - v).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_norm_matches_flat_loop() {
        let mut rng = RngState::new(8);
        let ts: Vec<Tensor> = (1..5).map(|k| rng.gaussian(&[k, 3])).collect();
        let flat: f64 = ts
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| f64::from(v).powi(2))
            .sum::<f64>()
            .sqrt();
        let got = frobenius_norm_concat(&ts);
        assert!((got - flat).abs() <= 1e-6 * flat);
        let via_parts = ts
            .iter()
            .map(|t| t.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((got - via_parts).abs() <= 1e-6 * flat);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).unwrap().is_empty());
    }
}
