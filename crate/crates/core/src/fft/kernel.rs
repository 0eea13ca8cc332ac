//! One-dimensional complex transform kernels.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::precision::Real;

/// A planned length-`n` complex transform. Both directions are unnormalised.
pub trait Kernel1d<T>: Send + Sync {
    fn len(&self) -> usize;
    fn forward(&self, line: &mut [Complex<T>]);
    fn inverse(&self, line: &mut [Complex<T>]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    #[default]
    RustFft,
    Naive,
}

impl FromStr for KernelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "rustfft" => Ok(KernelChoice::RustFft),
            "naive" => Ok(KernelChoice::Naive),
            other => Err(Error::config(format!("unknown FFT kernel `{other}`"))),
        }
    }
}

pub fn plan<T: Real>(choice: KernelChoice, n: usize) -> Arc<dyn Kernel1d<T>> {
    match choice {
        KernelChoice::RustFft => Arc::new(RustFftKernel::new(n)),
        KernelChoice::Naive => Arc::new(NaiveDft::new(n)),
    }
}

pub struct RustFftKernel<T: Real> {
    forward: Arc<dyn rustfft::Fft<T>>,
    inverse: Arc<dyn rustfft::Fft<T>>,
}

impl<T: Real> RustFftKernel<T> {
    pub fn new(n: usize) -> Self {
        let mut planner = rustfft::FftPlanner::new();
        RustFftKernel {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

impl<T: Real> Kernel1d<T> for RustFftKernel<T> {
    fn len(&self) -> usize {
        self.forward.len()
    }

    fn forward(&self, line: &mut [Complex<T>]) {
        self.forward.process(line);
    }

    fn inverse(&self, line: &mut [Complex<T>]) {
        self.inverse.process(line);
    }
}

/// O(n^2) reference transform, accumulated in double precision.
pub struct NaiveDft {
    twiddles: Vec<Complex<f64>>,
}

impl NaiveDft {
    pub fn new(n: usize) -> Self {
        NaiveDft {
            twiddles: (0..n)
                .map(|m| Complex::from_polar(1.0, -2.0 * PI * m as f64 / n as f64))
                .collect(),
        }
    }

    fn apply<T: Real>(&self, line: &mut [Complex<T>], conj: bool) {
        let n = self.twiddles.len();
        let input: Vec<Complex<f64>> = line.iter().map(|c| Complex::new(c.re.f64(), c.im.f64())).collect();
        for (k, out) in line.iter_mut().enumerate() {
            let mut acc = Complex::new(0.0, 0.0);
            for (j, x) in input.iter().enumerate() {
                let w = self.twiddles[(j * k) % n];
                acc += x * if conj { w.conj() } else { w };
            }
            *out = Complex::new(T::of(acc.re), T::of(acc.im));
        }
    }
}

impl<T: Real> Kernel1d<T> for NaiveDft {
    fn len(&self) -> usize {
        self.twiddles.len()
    }

    fn forward(&self, line: &mut [Complex<T>]) {
        self.apply(line, false);
    }

    fn inverse(&self, line: &mut [Complex<T>]) {
        self.apply(line, true);
    }
}

/// True when `n` has no prime factors other than 2, 3 and 5.
pub fn is_transformable(mut n: usize) -> bool {
    if n == 0 {
        return false;
    }
    for p in [2, 3, 5] {
        while n % p == 0 {
            n /= p;
        }
    }
    n == 1
}
