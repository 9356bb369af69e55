use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;

/// Dense row-major tensor. Cloning is cheap (the buffer is shared).
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn scalar(x: F) -> Self {
        Self::new(vec![1], vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], x: F) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![x; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    /// i.i.d. normal with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn from_rows(rows: &[&[F]]) -> Self {
        let c = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            assert_eq!(r.len(), c, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "cannot reshape {:?} ({} elements) to {:?}",
            self.shape,
            self.numel(),
            shape
        );
        Self { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank-0 tensor")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.last_dim()
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// Errors with the flat index of the first non-finite value.
    pub fn check_finite(&self, what: &str) -> Result<(), String> {
        // Fast path: a single reduction. Inf/NaN poison the sum.
        let s: F = self.data.iter().copied().sum();
        if s.is_finite() {
            return Ok(());
        }
        let at = self.data.iter().position(|x| !x.is_finite());
        match at {
            Some(i) => Err(format!("non-finite value in {what} at flat index {i}")),
            None => Ok(()), // summation overflow of finite values; accept
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_buffer() {
        let t: Tensor<f32> = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let r = t.reshaped(&[3, 2]);
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn bad_length_panics() {
        let _: Tensor<f32> = Tensor::new(vec![2, 2], vec![1.0; 3]);
    }

    #[test]
    fn finite_check_locates_nan() {
        let t: Tensor<f64> = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]);
        let err = t.check_finite("x").unwrap_err();
        assert!(err.contains("flat index 1"), "{err}");
    }
}
