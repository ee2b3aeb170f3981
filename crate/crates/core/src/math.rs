//! Scalar float helpers that work with and without `std`.
//!
//! Under `no_std` the intrinsics come from `libm`; under `std` we use the
//! methods on `f64` directly. Everything downstream goes through these
//! wrappers so the two builds differ in at most the libm implementations.

#[cfg(feature = "std")]
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
#[inline(always)]
pub fn ln(x: f64) -> f64 {
    x.ln()
}

#[cfg(not(feature = "std"))]
#[inline(always)]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[cfg(feature = "std")]
#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    x.sqrt()
}

#[cfg(not(feature = "std"))]
#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[cfg(feature = "std")]
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

#[cfg(not(feature = "std"))]
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[cfg(feature = "std")]
#[inline(always)]
pub fn powi(x: f64, n: i32) -> f64 {
    x.powi(n)
}

#[cfg(not(feature = "std"))]
#[inline(always)]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[cfg(feature = "std")]
#[inline(always)]
pub fn cos(x: f64) -> f64 {
    x.cos()
}

#[cfg(not(feature = "std"))]
#[inline(always)]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}
