//! Learnable Gaussian band-pass filter bank over the 2-d frequency plane.
//!
//! A bank of `K` filters `B_k(r) = exp(-(r - mu_k)^2 / (2 sigma_k^2))^max(0, alpha_k)`
//! is evaluated on a normalized frequency-radius grid and applied to feature
//! maps through forward/inverse Fourier transforms. Center frequency,
//! bandwidth, and amplitude exponent are all learnable.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use autodiff::{Arr, GradSink, Var};
use ndarray::{Array2, Array3, ArrayView2, Axis, Ix3, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Bandwidths below this are clamped before evaluation; the Gaussian is
/// singular at zero bandwidth.
pub const SIGMA_MIN: f64 = 1e-3;

/// Tolerance on the imaginary residue of inverse transforms of symmetric
/// filters (checked in debug builds).
pub const IMAG_TOL: f64 = 1e-4;

/// Per-cell normalized frequency radius for an `height x width` grid.
///
/// Frequencies are Nyquist-relative: each axis spans `[-0.5, 0.5)`, so the
/// radius is resolution independent and tops out near `sqrt(0.5)` at the
/// corner of the plane.
#[derive(Debug, Clone)]
pub struct FrequencyRadiusField {
    pub height: usize,
    pub width: usize,
    pub r: Array2<f64>,
}

/// Signed normalized frequency of bin `i` out of `n` (fftfreq convention).
fn norm_freq(i: usize, n: usize) -> f64 {
    let half = n / 2;
    if i <= half && !(i == half && n % 2 == 0) {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

pub fn make_radius_grid(height: usize, width: usize) -> Result<FrequencyRadiusField> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "radius grid needs positive dims, got {height}x{width}"
        )));
    }
    let r = Array2::from_shape_fn((height, width), |(i, j)| {
        let fy = norm_freq(i, height);
        let fx = norm_freq(j, width);
        (fy * fy + fx * fx).sqrt()
    });
    Ok(FrequencyRadiusField { height, width, r })
}

/// Learnable per-band `(mu_k, sigma_k, alpha_k)` triples.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterBankParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl FilterBankParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Argument("filter bank needs K >= 1 bands".into()));
        }
        if mu.len() != sigma.len() || mu.len() != alpha.len() {
            return Err(Error::Argument(format!(
                "band parameter lengths disagree: mu {}, sigma {}, alpha {}",
                mu.len(),
                sigma.len(),
                alpha.len()
            )));
        }
        Ok(FilterBankParams { mu, sigma, alpha })
    }

    /// Default bank: four bands tiling the normalized spectrum.
    pub fn default_bank() -> Self {
        FilterBankParams {
            mu: vec![0.05, 0.2, 0.35, 0.5],
            sigma: vec![0.15; 4],
            alpha: vec![1.0; 4],
        }
    }

    pub fn bands(&self) -> usize {
        self.mu.len()
    }

    /// Evaluate band `k` on a radius grid. Values lie in `(0, 1]`; the whole
    /// mask is 1 when `alpha_k <= 0`.
    pub fn eval_band(&self, band: usize, grid: &FrequencyRadiusField) -> Result<Array2<f64>> {
        if band >= self.bands() {
            return Err(Error::Argument(format!(
                "band index {band} out of range for K={}",
                self.bands()
            )));
        }
        let mu = self.mu[band];
        let sigma = self.sigma[band].max(SIGMA_MIN);
        let a = self.alpha[band].max(0.0);
        Ok(grid.r.mapv(|r| {
            let t = (r - mu) * (r - mu) / (2.0 * sigma * sigma);
            (-a * t).exp()
        }))
    }
}

// ---- FFT plumbing ----

type Cplx = Complex<f64>;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut map = cell.borrow_mut();
        map.entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place unnormalized forward 2-d FFT.
pub fn fft2_inplace(a: &mut Array2<Cplx>) {
    fft2_dir(a, false);
}

/// In-place inverse 2-d FFT including the `1/(h*w)` normalization.
pub fn ifft2_inplace(a: &mut Array2<Cplx>) {
    fft2_dir(a, true);
    let scale = 1.0 / (a.nrows() * a.ncols()) as f64;
    a.mapv_inplace(|v| v * scale);
}

fn fft2_dir(a: &mut Array2<Cplx>, inverse: bool) {
    let (h, w) = a.dim();
    let row_fft = plan(w, inverse);
    for mut row in a.rows_mut() {
        let slice = row.as_slice_mut().expect("contiguous row");
        row_fft.process(slice);
    }
    let col_fft = plan(h, inverse);
    let mut col = vec![Cplx::default(); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = a[(i, j)];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            a[(i, j)] = col[i];
        }
    }
}

fn to_complex(x: ArrayView2<'_, f64>) -> Array2<Cplx> {
    x.mapv(|v| Cplx::new(v, 0.0))
}

/// Apply a real frequency-domain gain to one real channel:
/// `real(ifft2(fft2(x) * mask))`. Returns the maximum imaginary residue too.
fn filter_channel(x: ArrayView2<'_, f64>, mask: &Array2<f64>) -> (Array2<f64>, f64) {
    let mut f = to_complex(x);
    fft2_inplace(&mut f);
    f.zip_mut_with(mask, |v, &m| *v *= m);
    ifft2_inplace(&mut f);
    let mut max_imag = 0.0f64;
    let out = f.mapv(|v| {
        max_imag = max_imag.max(v.im.abs());
        v.re
    });
    (out, max_imag)
}

/// Decompose a real `[h, w, c]` feature map into `K` spatial sub-bands.
pub fn decompose(feature: &Array3<f64>, params: &FilterBankParams) -> Result<Vec<Array3<f64>>> {
    let (h, w, c) = feature.dim();
    let grid = make_radius_grid(h, w)?;
    let mut out = Vec::with_capacity(params.bands());
    for k in 0..params.bands() {
        let mask = params.eval_band(k, &grid)?;
        let mut band = Array3::<f64>::zeros((h, w, c));
        for ch in 0..c {
            let (filtered, imag) = filter_channel(feature.index_axis(Axis(2), ch), &mask);
            debug_assert!(
                imag < IMAG_TOL,
                "imaginary residue {imag} above {IMAG_TOL} for a symmetric filter"
            );
            band.index_axis_mut(Axis(2), ch).assign(&filtered);
        }
        out.push(band);
    }
    Ok(out)
}

/// Recombine sub-bands. By linearity of the Fourier transform this equals the
/// transform-sum-inverse formulation; both routes are compared in tests.
pub fn reconstruct_sum(bands: &[Array3<f64>]) -> Result<Array3<f64>> {
    let first = bands
        .first()
        .ok_or_else(|| Error::Argument("reconstruct_sum needs at least one band".into()))?;
    let mut acc = first.clone();
    for b in &bands[1..] {
        if b.dim() != first.dim() {
            return Err(Error::Argument(format!(
                "band shapes disagree: {:?} vs {:?}",
                b.dim(),
                first.dim()
            )));
        }
        acc += b;
    }
    Ok(acc)
}

// ---- tape operations ----

/// Evaluate band `band` of a bank held in `[K]` parameter vectors on a fixed
/// radius grid, differentiably in `mu`, `sigma`, and `alpha`.
pub fn gauss_band_var(
    grid: &Rc<Array2<f64>>,
    mu: &Var,
    sigma: &Var,
    alpha: &Var,
    band: usize,
) -> Var {
    let k = mu.shape()[0];
    assert!(band < k, "band {band} out of range for K={k}");
    assert_eq!(sigma.shape(), &[k]);
    assert_eq!(alpha.shape(), &[k]);
    let mu_v = mu.value()[[band]];
    let sigma_raw = sigma.value()[[band]];
    let sigma_v = sigma_raw.max(SIGMA_MIN);
    let a_v = alpha.value()[[band]].max(0.0);

    let value = grid.mapv(|r| {
        let t = (r - mu_v) * (r - mu_v) / (2.0 * sigma_v * sigma_v);
        (-a_v * t).exp()
    });

    let tape = mu.tape().clone();
    let (id_mu, id_sigma, id_alpha) = (mu.id(), sigma.id(), alpha.id());
    let (tr_mu, tr_sigma, tr_alpha) = (mu.is_tracked(), sigma.is_tracked(), alpha.is_tracked());
    let grid = Rc::clone(grid);
    let mask = Rc::new(value.clone());
    let alpha_raw = alpha.value()[[band]];
    tape.custom(
        value.into_dyn(),
        tr_mu || tr_sigma || tr_alpha,
        Box::new(move |g, sink: &mut GradSink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut d_mu = 0.0;
            let mut d_sigma = 0.0;
            let mut d_alpha = 0.0;
            for ((idx, &gv), &bv) in g2.indexed_iter().zip(mask.iter()) {
                let r = grid[idx];
                let dr = r - mu_v;
                d_mu += gv * bv * a_v * dr / (sigma_v * sigma_v);
                d_sigma += gv * bv * a_v * dr * dr / (sigma_v * sigma_v * sigma_v);
                if alpha_raw > 0.0 {
                    d_alpha += gv * bv * (-(dr * dr) / (2.0 * sigma_v * sigma_v));
                }
            }
            if sigma_raw <= SIGMA_MIN {
                d_sigma = 0.0; // clamped: no sensitivity below the floor
            }
            let scatter = |pid: usize, on: bool, val: f64, sink: &mut GradSink| {
                if on {
                    let mut v = Arr::zeros(IxDyn(&[k]));
                    v[[band]] = val;
                    sink(pid, v);
                }
            };
            scatter(id_mu, tr_mu, d_mu, sink);
            scatter(id_sigma, tr_sigma, d_sigma, sink);
            scatter(id_alpha, tr_alpha, d_alpha, sink);
        }),
    )
}

/// Frequency-domain filtering of `[h, w, c]` by a real symmetric `[h, w]`
/// gain mask: `real(ifft2(fft2(x) * mask))` per channel. Differentiable in
/// both the features and the mask.
pub fn band_filter_var(x: &Var, mask: &Var) -> Var {
    let xs = x.shape();
    assert_eq!(xs.len(), 3, "band_filter expects [h,w,c]");
    let (h, w, c) = (xs[0], xs[1], xs[2]);
    assert_eq!(mask.shape(), &[h, w], "mask shape mismatch");

    let x3 = x.value().view().into_dimensionality::<Ix3>().unwrap();
    let mask2 = mask
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();

    // Forward: keep the channel spectra for the mask gradient.
    let mut spectra: Vec<Array2<Cplx>> = Vec::with_capacity(c);
    let mut out = Array3::<f64>::zeros((h, w, c));
    for ch in 0..c {
        let mut f = to_complex(x3.index_axis(Axis(2), ch));
        fft2_inplace(&mut f);
        spectra.push(f.clone());
        f.zip_mut_with(&mask2, |v, &m| *v *= m);
        ifft2_inplace(&mut f);
        let mut max_imag = 0.0f64;
        let re = f.mapv(|v| {
            max_imag = max_imag.max(v.im.abs());
            v.re
        });
        debug_assert!(
            max_imag < IMAG_TOL,
            "imaginary residue {max_imag} above {IMAG_TOL}"
        );
        out.index_axis_mut(Axis(2), ch).assign(&re);
    }

    let tape = x.tape().clone();
    let (id_x, id_mask) = (x.id(), mask.id());
    let (want_x, want_mask) = (x.is_tracked(), mask.is_tracked());
    let spectra = Rc::new(spectra);
    let mask_c = Rc::new(mask2);
    tape.custom(
        out.into_dyn(),
        want_x || want_mask,
        Box::new(move |g, sink: &mut GradSink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = Array3::<f64>::zeros((h, w, c));
            let mut dmask = Array2::<f64>::zeros((h, w));
            for ch in 0..c {
                // The filter operator is symmetric for a negation-symmetric
                // real mask, so the feature gradient reuses the forward path.
                let mut gf = to_complex(g3.index_axis(Axis(2), ch));
                if want_mask {
                    let mut gi = gf.clone();
                    ifft2_inplace(&mut gi);
                    let spec = &spectra[ch];
                    dmask.indexed_iter_mut().for_each(|(idx, dm)| {
                        *dm += (spec[idx] * gi[idx]).re;
                    });
                }
                if want_x {
                    fft2_inplace(&mut gf);
                    gf.zip_mut_with(&mask_c, |v, &m| *v *= m);
                    ifft2_inplace(&mut gf);
                    dx.index_axis_mut(Axis(2), ch).assign(&gf.mapv(|v| v.re));
                }
            }
            if want_x {
                sink(id_x, dx.into_dyn());
            }
            if want_mask {
                sink(id_mask, dmask.into_dyn());
            }
        }),
    )
}

/// Round-trip helper used by tests and the reconstruction-equivalence oracle:
/// `ifft2(fft2(x))` per channel, returning the real part.
pub fn fft_round_trip(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for ch in 0..c {
        let mut f = to_complex(x.index_axis(Axis(2), ch));
        fft2_inplace(&mut f);
        ifft2_inplace(&mut f);
        out.index_axis_mut(Axis(2), ch).assign(&f.mapv(|v| v.re));
    }
    out
}

/// The literal transform-sum-inverse recombination:
/// `real(ifft2(sum_k fft2(band_k)))` per channel.
pub fn reconstruct_via_transform(bands: &[Array3<f64>]) -> Result<Array3<f64>> {
    let first = bands
        .first()
        .ok_or_else(|| Error::Argument("reconstruct needs at least one band".into()))?;
    let (h, w, c) = first.dim();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for ch in 0..c {
        let mut acc = Array2::<Cplx>::zeros((h, w));
        for b in bands {
            if b.dim() != first.dim() {
                return Err(Error::Argument("band shapes disagree".into()));
            }
            let mut f = to_complex(b.index_axis(Axis(2), ch));
            fft2_inplace(&mut f);
            acc += &f;
        }
        ifft2_inplace(&mut acc);
        out.index_axis_mut(Axis(2), ch).assign(&acc.mapv(|v| v.re));
    }
    Ok(out)
}
