//! Minimal neural-network kernels with hand-derived reverse-mode gradients.
//! Everything is generic over the scalar so training runs in f32 while
//! gradient checks run in f64.

pub mod adam;
pub mod ops;

use rand_chacha::ChaCha8Rng;

/// Scalar type for network math. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense (channels, height, width) tensor, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self {
            ch,
            h,
            w,
            data: vec![T::zero(); ch * h * w],
        }
    }

    pub fn from_data(ch: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), ch * h * w, "tensor shape/data mismatch");
        Self { ch, h, w, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

/// Standard normal draw (Box-Muller on the uniform stream), deterministic for
/// a given RNG state.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.gen();
        if u1 > 0.0 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
