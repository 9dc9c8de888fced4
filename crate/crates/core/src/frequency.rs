//! Gaussian high-pass filtering of the input image in the Fourier domain and
//! assembly of the two-channel spatial-frequency input.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// DC-centered high-pass mask M(u, v) = 1 - exp(-d^2 / (2 sigma^2)).
#[derive(Debug, Clone)]
pub struct HighpassMask {
    pub values: Array2<f64>,
    /// Center of the frequency spectrum (u0, v0) on the shifted grid.
    pub center: (usize, usize),
    pub sigma: f64,
}

impl HighpassMask {
    /// Continuous evaluation of the mask formula at (possibly fractional)
    /// centered-spectrum coordinates.
    pub fn value_at(&self, u: f64, v: f64) -> f64 {
        let du = u - self.center.0 as f64;
        let dv = v - self.center.1 as f64;
        1.0 - (-(du * du + dv * dv) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Two-channel input [x ; x_hp], stored as [2, H, W].
#[derive(Debug, Clone)]
pub struct SpatialFrequencyInput {
    pub channels: Array3<f64>,
}

impl SpatialFrequencyInput {
    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }
}

pub fn gaussian_highpass_mask(h: usize, w: usize, sigma: f64) -> Result<HighpassMask> {
    if h == 0 || w == 0 {
        return Err(Error::Shape("mask dimensions must be >= 1".into()));
    }
    if sigma <= 0.0 {
        return Err(Error::Config("sigma_hp must be positive".into()));
    }
    let center = (h / 2, w / 2);
    let mut values = Array2::<f64>::zeros((h, w));
    let two_s2 = 2.0 * sigma * sigma;
    for u in 0..h {
        for v in 0..w {
            let du = u as f64 - center.0 as f64;
            let dv = v as f64 - center.1 as f64;
            values[[u, v]] = 1.0 - (-(du * du + dv * dv) / two_s2).exp();
        }
    }
    Ok(HighpassMask { values, center, sigma })
}

fn fft2(x: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut planner = FftPlanner::<f64>::new();
    let fft_w = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    let fft_h = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut data = x.clone();
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex64> = row.to_vec();
        fft_w.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    for mut col in data.columns_mut() {
        let mut buf: Vec<Complex64> = col.to_vec();
        fft_h.process(&mut buf);
        for (dst, src) in col.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    data
}

/// Apply a DC-centered mask to `x` in the frequency domain and return the
/// real part of the inverse transform together with the maximum imaginary
/// residue (which is analytically zero for a real, symmetric mask).
pub fn filter_with_mask(x: &Array2<f64>, mask: &Array2<f64>) -> (Array2<f64>, f64) {
    let (h, w) = x.dim();
    assert_eq!(mask.dim(), (h, w), "mask / image shape mismatch");
    let spectrum = fft2(&x.mapv(|v| Complex64::new(v, 0.0)), false);
    let (h0, w0) = (h / 2, w / 2);
    let mut masked = spectrum;
    for ku in 0..h {
        for kv in 0..w {
            // index of this unshifted bin on the DC-centered grid
            let su = (ku + h0) % h;
            let sv = (kv + w0) % w;
            masked[[ku, kv]] *= mask[[su, sv]];
        }
    }
    let back = fft2(&masked, true);
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::<f64>::zeros((h, w));
    let mut max_imag: f64 = 0.0;
    for ((i, j), v) in back.indexed_iter() {
        out[[i, j]] = v.re * scale;
        max_imag = max_imag.max((v.im * scale).abs());
    }
    (out, max_imag)
}

/// High-pass filter `x` with a Gaussian mask of the given sigma and pack the
/// two-channel [x ; x_hp] input. `x` is used as given; normalization happens
/// upstream in the data pipeline.
pub fn highpass_filter(x: &Array2<f64>, sigma: f64) -> Result<SpatialFrequencyInput> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite image passed to highpass_filter".into()));
    }
    let (h, w) = x.dim();
    let mask = gaussian_highpass_mask(h, w, sigma)?;
    let (hp, max_imag) = filter_with_mask(x, &mask.values);
    let energy = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(
        max_imag <= 1e-5 * energy.max(1e-12),
        "imaginary residue {max_imag} exceeds tolerance for channel energy {energy}"
    );
    let mut channels = Array3::<f64>::zeros((2, h, w));
    channels.index_axis_mut(ndarray::Axis(0), 0).assign(x);
    channels.index_axis_mut(ndarray::Axis(0), 1).assign(&hp);
    Ok(SpatialFrequencyInput { channels })
}

/// Per-image standard normalization to zero mean / unit variance.
pub fn normalize_image(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean().unwrap_or(0.0);
    let var = x.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
    let std = var.sqrt().max(1e-6);
    x.mapv(|v| (v - mean) / std)
}
