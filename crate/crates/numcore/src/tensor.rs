use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};

/// Dense row-major f64 tensor. Rank 1 and 2 cover everything the model
/// needs; shape is kept as a Vec so reshapes stay cheap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(NumError::InvalidShape {
                op: "Tensor::new",
                shape,
                detail: format!("{} values provided", values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; numel],
        }
    }

    /// Rank-0-like scalar, stored as shape [1].
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    /// Rank-1 tensor from a plain vector.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// Rank-2 tensor from rows*cols values in row-major order.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(NumError::InvalidShape {
                op: "Tensor::item",
                shape: self.shape.clone(),
                detail: "expected exactly one element".into(),
            });
        }
        Ok(self.values[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [r, _] => *r,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, c] => *c,
            [n] => *n,
            _ => self.numel(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// C[m,n] = A[m,k] * B[k,n], all row-major flat slices.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T (B given row-major, used untransposed in memory).
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for p in 0..n {
                acc += arow[p] * brow[p];
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.5).item().unwrap(), 4.5);
        assert!(Tensor::vector(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn raw_matmul_helpers_agree_with_hand_values() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(mm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        // A * B^T
        assert_eq!(mm_nt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
        // A^T * B
        assert_eq!(mm_tn(&a, &b, 2, 2, 2), vec![26.0, 30.0, 38.0, 44.0]);
    }
}
