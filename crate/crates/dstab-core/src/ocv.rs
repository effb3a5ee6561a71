//! Dense polynomials for open-circuit-voltage curves: evaluation,
//! least-squares fitting and monotonicity auditing.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Polynomial with coefficients stored in ascending power order, so
/// `coeffs[k]` multiplies `x^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// Evaluates the polynomial at `x` by Horner's rule.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// First derivative at `x`.
    pub fn deriv1(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * x + c * k as f64;
        }
        acc
    }

    /// Second derivative at `x`.
    pub fn deriv2(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate().skip(2).rev() {
            acc = acc * x + c * (k * (k - 1)) as f64;
        }
        acc
    }

    /// Least-squares fit of a polynomial of the given degree to `(xs, ys)`.
    ///
    /// Returns the fitted polynomial and the root-mean-square residual.
    /// Requires at least `degree + 1` samples.
    pub fn fit(xs: &[f64], ys: &[f64], degree: usize) -> Result<(Self, f64)> {
        if xs.len() != ys.len() {
            return Err(Error::BadInput(format!(
                "polynomial fit: {} abscissae vs {} ordinates",
                xs.len(),
                ys.len()
            )));
        }
        if xs.len() < degree + 1 {
            return Err(Error::BadInput(format!(
                "polynomial fit: degree {} needs at least {} samples, got {}",
                degree,
                degree + 1,
                xs.len()
            )));
        }
        let m = xs.len();
        let n = degree + 1;
        let mut vand = DMatrix::<f64>::zeros(m, n);
        for (i, &x) in xs.iter().enumerate() {
            let mut p = 1.0;
            for j in 0..n {
                vand[(i, j)] = p;
                p *= x;
            }
        }
        let y = DVector::from_column_slice(ys);
        let svd = vand.clone().svd(true, true);
        let sol = svd
            .solve(&y, 1e-14)
            .map_err(|e| Error::Solver(format!("polynomial fit SVD: {e}")))?;
        let resid = (&vand * &sol) - &y;
        let rms = (resid.norm_squared() / m as f64).sqrt();
        Ok((Self::new(sol.iter().copied().collect()), rms))
    }

    /// Checks whether the polynomial is monotone (non-increasing or
    /// non-decreasing) on `[lo, hi]`, sampling at the given resolution in
    /// `x` units. Differences smaller than `1e-12` in magnitude are treated
    /// as flat.
    pub fn is_monotone_on(&self, lo: f64, hi: f64, resolution: f64) -> bool {
        if !(hi > lo) || resolution <= 0.0 {
            return true;
        }
        let steps = ((hi - lo) / resolution).ceil().max(1.0) as usize;
        let mut rising = false;
        let mut falling = false;
        let mut prev = self.eval(lo);
        for k in 1..=steps {
            let x = lo + (hi - lo) * k as f64 / steps as f64;
            let cur = self.eval(x);
            let d = cur - prev;
            if d > 1e-12 {
                rising = true;
            } else if d < -1e-12 {
                falling = true;
            }
            prev = cur;
        }
        !(rising && falling)
    }
}
