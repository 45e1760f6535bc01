//! Dense row-major 4-D tensors and the deterministic generator used to fill
//! them.
//!
//! Every tensor in the crate is a [`Tensor4`]: feature maps are `N×C×H×W`,
//! filter banks are `Cout×(Cin/g)×K×K`. Storage is a flat `Vec<f64>` with the
//! last axis fastest.
//!
//! [`Rng`] is xoshiro256++ whose 256-bit state is expanded from a 64-bit seed
//! with SplitMix64 (`z += 0x9E3779B97F4A7C15; z = (z ^ z>>30)·0xBF58476D1CE4E5B9;
//! z = (z ^ z>>27)·0x94D049BB133111EB; z ^= z>>31`, four times). Normal
//! samples come from the ziggurat sampler in `rand_distr`. Both are pure
//! integer/IEEE arithmetic, so a seed yields the same stream on every host.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random::<u64>()
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

fn checked_len(dims: [usize; 4]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::SizeOverflow(dims))
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Tensor4 {
            dims,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(dims)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// I.i.d. `N(0, sigma²)` entries drawn in flat order.
    pub fn randn(dims: [usize; 4], rng: &mut Rng, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let len = checked_len(dims)?;
        let data = (0..len).map(|_| sigma * rng.normal()).collect();
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn flat_index(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        let [_, d1, d2, d3] = self.dims;
        debug_assert!(a < self.dims[0] && b < d1 && c < d2 && d < d3);
        ((a * d1 + b) * d2 + c) * d3 + d
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.flat_index(a, b, c, d)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, d: usize, v: f64) {
        let idx = self.flat_index(a, b, c, d);
        self.data[idx] = v;
    }

    /// The contiguous `d2×d3` slice at `(a, b)`.
    pub fn plane(&self, a: usize, b: usize) -> &[f64] {
        let n = self.dims[2] * self.dims[3];
        let start = (a * self.dims[1] + b) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let n = self.dims[2] * self.dims[3];
        let start = (a * self.dims[1] + b) * n;
        &mut self.data[start..start + n]
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        max_abs_diff(self, other)
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor4) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_same_dims(&self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn zeros_small() {
        let t = Tensor4::zeros([1, 1, 2, 2]).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeros_empty() {
        let t = Tensor4::zeros([0, 3, 3, 3]).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn zeros_overflow() {
        assert!(matches!(
            Tensor4::zeros([usize::MAX, 2, 1, 1]),
            Err(Error::SizeOverflow(_))
        ));
    }

    #[test]
    fn flat_index_by_hand() {
        // ((1·3 + 2)·4 + 3)·5 + 4
        let t = Tensor4::zeros([2, 3, 4, 5]).unwrap();
        assert_eq!(t.flat_index(1, 2, 3, 4), 119);
        assert_eq!(t.flat_index(0, 0, 0, 0), 0);
    }

    #[test]
    fn flat_index_strictly_increasing() {
        let t = Tensor4::zeros([2, 3, 4, 5]).unwrap();
        let mut prev = None;
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        let idx = t.flat_index(a, b, c, d);
                        if let Some(p) = prev {
                            assert_eq!(idx, p + 1);
                        }
                        prev = Some(idx);
                    }
                }
            }
        }
        assert_eq!(prev, Some(t.len() - 1));
    }

    #[test]
    fn randn_deterministic() {
        let a = Tensor4::randn([2, 3, 4, 5], &mut Rng::new(11), 1.0).unwrap();
        let b = Tensor4::randn([2, 3, 4, 5], &mut Rng::new(11), 1.0).unwrap();
        let bits = |t: &Tensor4| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = Tensor4::randn([2, 3, 4, 5], &mut Rng::new(12), 1.0).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn randn_rejects_nonpositive_sigma() {
        assert!(Tensor4::randn([1, 1, 1, 1], &mut Rng::new(0), 0.0).is_err());
        assert!(Tensor4::randn([1, 1, 1, 1], &mut Rng::new(0), -1.0).is_err());
    }

    #[test]
    fn randn_mean_near_zero() {
        let t = Tensor4::randn([1, 1, 1000, 1000], &mut Rng::new(3), 1.0).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 5e-3, "mean {mean}");
    }

    #[test]
    fn rng_stream_is_pinned() {
        // Cross-checked against a standalone xoshiro256++/SplitMix64 implementation.
        let mut rng = Rng::new(42);
        let first: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        let mut again = Rng::new(42);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(first[0], PINNED_SEED42_FIRST);
    }

    const PINNED_SEED42_FIRST: u64 = 15_021_278_609_987_233_951;

    #[test]
    fn max_abs_diff_basic() {
        let a = Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor4::from_vec([1, 1, 1, 1], vec![-2.0]).unwrap();
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 3.0);
    }

    #[test]
    fn max_abs_diff_shape_mismatch() {
        let a = Tensor4::zeros([1, 1, 2, 2]).unwrap();
        let b = Tensor4::zeros([1, 1, 4, 1]).unwrap();
        assert!(matches!(max_abs_diff(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn max_abs_diff_matches_loop() {
        let mut rng = Rng::new(5);
        let a = Tensor4::randn([2, 3, 4, 5], &mut rng, 1.0).unwrap();
        let b = Tensor4::randn([2, 3, 4, 5], &mut rng, 1.0).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..a.len() {
            let d = (a.data()[i] - b.data()[i]).abs();
            if d > oracle {
                oracle = d;
            }
        }
        assert_eq!(max_abs_diff(&a, &b).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn set_get_round_trip(a in 0usize..2, b in 0usize..3, c in 0usize..4, d in 0usize..5, v in any::<f64>()) {
            let mut t = Tensor4::zeros([2, 3, 4, 5]).unwrap();
            t.set(a, b, c, d, v);
            prop_assert_eq!(t.get(a, b, c, d).to_bits(), v.to_bits());
        }
    }
}
