//! Tensor operations on [`Var`]. Every op keeps outputs in standard layout
//! and records a backward closure when the tape is recording.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::{Arr, GradSink, Var, UNTRACKED};

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

/// Deterministic sequential sum; summation order is part of the contract for
/// reproducing reference values exactly.
pub fn seq_sum(a: &Arr) -> f64 {
    a.as_slice()
        .expect("standard layout")
        .iter()
        .fold(0.0, |s, &v| s + v)
}

fn rows_view(a: &Arr) -> ArrayView2<'_, f64> {
    let c = *a.shape().last().expect("at least 1-d");
    let rows = a.len() / c.max(1);
    a.view()
        .into_shape_with_order((rows, c))
        .expect("standard layout")
}

impl Var {
    fn unary<F>(&self, value: Arr, back: F) -> Var
    where
        F: Fn(&Arr) -> Arr + 'static,
    {
        let pid = self.id;
        self.tape.custom(
            value,
            self.is_tracked(),
            Box::new(move |g, sink: &mut GradSink| sink(pid, back(g))),
        )
    }

    fn binary<FA, FB>(&self, rhs: &Var, value: Arr, back_a: FA, back_b: FB) -> Var
    where
        FA: Fn(&Arr) -> Arr + 'static,
        FB: Fn(&Arr) -> Arr + 'static,
    {
        debug_assert!(Rc::ptr_eq(&self.tape.inner, &rhs.tape.inner), "tape mismatch");
        let (ida, idb) = (self.id, rhs.id);
        self.tape.custom(
            value,
            self.is_tracked() || rhs.is_tracked(),
            Box::new(move |g, sink: &mut GradSink| {
                if ida != UNTRACKED {
                    sink(ida, back_a(g));
                }
                if idb != UNTRACKED {
                    sink(idb, back_b(g));
                }
            }),
        )
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value = &*self.value + &*rhs.value;
        self.binary(rhs, value, |g| g.clone(), |g| g.clone())
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value = &*self.value - &*rhs.value;
        self.binary(rhs, value, |g| g.clone(), |g| -g)
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let value = &*self.value * &*rhs.value;
        let a = self.rc_value();
        let b = rhs.rc_value();
        self.binary(rhs, value, move |g| g * &*b, move |g| g * &*a)
    }

    pub fn div(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        let value = &*self.value / &*rhs.value;
        let a = self.rc_value();
        let b = rhs.rc_value();
        let b2 = rhs.rc_value();
        self.binary(
            rhs,
            value,
            move |g| g / &*b,
            move |g| -(g * &*a) / (&*b2 * &*b2),
        )
    }

    pub fn neg(&self) -> Var {
        self.unary(-&*self.value, |g| -g)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(&*self.value + c, |g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(&*self.value * c, move |g| g * c)
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64) -> Var {
        self.unary(c - &*self.value, |g| -g)
    }

    pub fn exp(&self) -> Var {
        let value = self.value.mapv(f64::exp);
        let y = Rc::new(value.clone());
        self.unary(value, move |g| g * &*y)
    }

    pub fn ln(&self) -> Var {
        let value = self.value.mapv(f64::ln);
        let x = self.rc_value();
        self.unary(value, move |g| g / &*x)
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = Rc::new(value.clone());
        self.unary(value, move |g| g * &(&*y * &(1.0 - &*y)))
    }

    pub fn relu(&self) -> Var {
        let value = self.value.mapv(|v| v.max(0.0));
        let x = self.rc_value();
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&x, |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            out
        })
    }

    pub fn gelu(&self) -> Var {
        let value = self
            .value
            .mapv(|x| 0.5 * x * (1.0 + (GELU_S * (x + GELU_A * x * x * x)).tanh()));
        let x = self.rc_value();
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&x, |gv, &xv| {
                let t = (GELU_S * (xv + GELU_A * xv * xv * xv)).tanh();
                let d = 0.5 * (1.0 + t)
                    + 0.5 * xv * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_A * xv * xv);
                *gv *= d;
            });
            out
        })
    }

    /// `x^p` for a fixed exponent; expects nonnegative inputs.
    pub fn powf_const(&self, p: f64) -> Var {
        let value = self.value.mapv(|v| v.powf(p));
        let x = self.rc_value();
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&x, |gv, &xv| {
                *gv *= if xv > 0.0 { p * xv.powf(p - 1.0) } else { 0.0 };
            });
            out
        })
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value.mapv(|v| v.clamp(lo, hi));
        let x = self.rc_value();
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&x, |gv, &xv| {
                if xv <= lo || xv >= hi {
                    *gv = 0.0;
                }
            });
            out
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var {
        let value = Arr::from_elem(IxDyn(&[]), seq_sum(&self.value));
        let shape = self.value.raw_dim();
        self.unary(value, move |g| {
            Arr::from_elem(shape.clone(), *g.first().unwrap())
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value.len() as f64;
        let value = Arr::from_elem(IxDyn(&[]), seq_sum(&self.value) / n);
        let shape = self.value.raw_dim();
        self.unary(value, move |g| {
            Arr::from_elem(shape.clone(), *g.first().unwrap() / n)
        })
    }

    // ---- linear algebra ----

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = as2(&self.value);
        let b = as2(&rhs.value);
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims");
        let value = a.dot(&b).into_dyn();
        let av = self.rc_value();
        let bv = rhs.rc_value();
        self.binary(
            rhs,
            value,
            move |g| as2(g).dot(&as2(&bv).t()).into_dyn(),
            move |g| as2(&av).t().dot(&as2(g)).into_dyn(),
        )
    }

    /// `[n,k] x [m,k]^T -> [n,m]`
    pub fn matmul_nt(&self, rhs: &Var) -> Var {
        let a = as2(&self.value);
        let b = as2(&rhs.value);
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dims");
        let value = a.dot(&b.t()).into_dyn();
        let av = self.rc_value();
        let bv = rhs.rc_value();
        self.binary(
            rhs,
            value,
            move |g| as2(g).dot(&as2(&bv)).into_dyn(),
            move |g| as2(g).t().dot(&as2(&av)).into_dyn(),
        )
    }

    /// Batched `[b,n,k] x [b,k,m] -> [b,n,m]`
    pub fn bmm(&self, rhs: &Var) -> Var {
        let value = bmm_impl(&self.value, &rhs.value, false);
        let av = self.rc_value();
        let bv = rhs.rc_value();
        self.binary(
            rhs,
            value,
            move |g| bmm_impl(g, &bv, true), // g [b,n,m] x b^T [b,m,k]
            move |g| bmm_tn(&av, g),         // a^T [b,k,n] x g [b,n,m]
        )
    }

    /// Batched `[b,n,k] x [b,m,k]^T -> [b,n,m]`
    pub fn bmm_nt(&self, rhs: &Var) -> Var {
        let value = bmm_impl(&self.value, &rhs.value, true);
        let av = self.rc_value();
        let bv = rhs.rc_value();
        self.binary(
            rhs,
            value,
            move |g| bmm_impl(g, &bv, false), // [b,n,m] x [b,m,k]
            move |g| bmm_tn(g, &av),          // g^T [b,m,n] x a [b,n,k]
        )
    }

    // ---- neural-net primitives ----

    pub fn softmax_last(&self) -> Var {
        let mut value = (*self.value).clone();
        {
            let c = *value.shape().last().unwrap();
            let rows = value.len() / c;
            let mut v2 = value
                .view_mut()
                .into_shape_with_order((rows, c))
                .expect("standard layout");
            for mut row in v2.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                let inv = 1.0 / s;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let y = Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut out = g * &*y;
            let c = *out.shape().last().unwrap();
            let rows = out.len() / c;
            let y2 = rows_view(&y);
            let mut o2 = out
                .view_mut()
                .into_shape_with_order((rows, c))
                .expect("standard layout");
            for (mut orow, yrow) in o2.rows_mut().into_iter().zip(y2.rows()) {
                let dot: f64 = orow.iter().sum();
                for (ov, yv) in orow.iter_mut().zip(yrow.iter()) {
                    *ov -= dot * yv;
                }
            }
            out
        })
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let c = *self.shape().last().expect("layer_norm: rank >= 1");
        assert_eq!(gamma.shape(), &[c], "layer_norm: gamma shape");
        assert_eq!(beta.shape(), &[c], "layer_norm: beta shape");
        let rows = self.value.len() / c;
        let x2 = rows_view(&self.value);
        let g1 = gamma.value.as_slice().unwrap();
        let b1 = beta.value.as_slice().unwrap();
        let mut xhat = Array2::<f64>::zeros((rows, c));
        let mut rstd = Array1::<f64>::zeros(rows);
        let mut out = Array2::<f64>::zeros((rows, c));
        for r in 0..rows {
            let xr = x2.row(r);
            let mu = xr.sum() / c as f64;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (xr[j] - mu) * rs;
                xhat[(r, j)] = xh;
                out[(r, j)] = xh * g1[j] + b1[j];
            }
        }
        let value = out
            .into_shape_with_order(self.value.raw_dim())
            .expect("layer_norm: reshape");
        let (idx, idg, idb) = (self.id, gamma.id, beta.id);
        let xhat = Rc::new(xhat);
        let rstd = Rc::new(rstd);
        let gval = gamma.rc_value();
        let in_shape = self.value.raw_dim();
        self.tape.custom(
            value,
            self.is_tracked() || gamma.is_tracked() || beta.is_tracked(),
            Box::new(move |g, sink: &mut GradSink| {
                let g2 = rows_view(g);
                let gam = gval.as_slice().unwrap();
                if idg != UNTRACKED {
                    let mut dg = Array1::<f64>::zeros(c);
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g2[(r, j)] * xhat[(r, j)];
                        }
                    }
                    sink(idg, dg.into_dyn());
                }
                if idb != UNTRACKED {
                    let mut db = Array1::<f64>::zeros(c);
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g2[(r, j)];
                        }
                    }
                    sink(idb, db.into_dyn());
                }
                if idx != UNTRACKED {
                    let mut dx = Array2::<f64>::zeros((rows, c));
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gg = g2[(r, j)] * gam[j];
                            m1 += gg;
                            m2 += gg * xhat[(r, j)];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gg = g2[(r, j)] * gam[j];
                            dx[(r, j)] = rstd[r] * (gg - m1 - xhat[(r, j)] * m2);
                        }
                    }
                    sink(idx, dx.into_shape_with_order(in_shape.clone()).unwrap());
                }
            }),
        )
    }

    /// `x[..., c] + bias[c]`
    pub fn add_bias(&self, bias: &Var) -> Var {
        let c = *self.shape().last().expect("add_bias: rank >= 1");
        assert_eq!(bias.shape(), &[c], "add_bias: bias shape");
        let value = &*self.value + &bias.value.view().into_shape_with_order(vec![c]).unwrap();
        self.binary(bias, value, |g| g.clone(), move |g| {
            let g2 = rows_view(g);
            g2.sum_axis(Axis(0)).into_dyn()
        })
    }

    /// `x[..., cin] x w[cin, cout] (+ bias)`; applied per trailing vector.
    pub fn linear(&self, w: &Var, bias: Option<&Var>) -> Var {
        let cin = *self.shape().last().expect("linear: rank >= 1");
        assert_eq!(w.shape()[0], cin, "linear: weight rows");
        let cout = w.shape()[1];
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;
        let rows = self.value.len() / cin;
        let x2 = self.reshape(&[rows, cin]);
        let y2 = x2.matmul(w);
        let y2 = match bias {
            Some(b) => y2.add_bias(b),
            None => y2,
        };
        y2.reshape(&out_shape)
    }

    /// 2-d convolution on `[h, w, cin]` with weights `[kh, kw, cin, cout]`,
    /// symmetric zero padding and a uniform stride.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape();
        assert_eq!(xs.len(), 3, "conv2d: input [h,w,c]");
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv2d: weight [kh,kw,cin,cout]");
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel too large");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&self.value, kh, kw, stride, pad, oh, ow);
        let w2 = weight
            .value
            .view()
            .into_shape_with_order((kh * kw * cin, cout))
            .expect("weight layout");
        let y2 = cols.dot(&w2);
        let value = y2
            .into_shape_with_order(IxDyn(&[oh, ow, cout]))
            .expect("conv2d: output reshape");

        let (idx, idw) = (self.id, weight.id);
        let cols = Rc::new(cols);
        let wv = weight.rc_value();
        let in_shape = [h, w, cin];
        let out = self.tape.custom(
            value,
            self.is_tracked() || weight.is_tracked(),
            Box::new(move |g, sink: &mut GradSink| {
                let g2 = g
                    .view()
                    .into_shape_with_order((oh * ow, cout))
                    .expect("grad layout");
                if idw != UNTRACKED {
                    let dw = cols.t().dot(&g2);
                    sink(
                        idw,
                        dw.into_shape_with_order(IxDyn(&[kh, kw, cin, cout])).unwrap(),
                    );
                }
                if idx != UNTRACKED {
                    let w2 = wv
                        .view()
                        .into_shape_with_order((kh * kw * cin, cout))
                        .unwrap();
                    let dcols = g2.dot(&w2.t());
                    let dx = col2im(&dcols, in_shape, kh, kw, stride, pad, oh, ow);
                    sink(idx, dx);
                }
            }),
        );
        match bias {
            Some(b) => out.add_bias(b),
            None => out,
        }
    }

    /// Bilinear upsampling of `[h, w, c]` by an integer factor
    /// (half-pixel-center convention, edges clamped).
    pub fn upsample_bilinear(&self, scale: usize) -> Var {
        assert!(scale >= 1);
        let xs = self.shape();
        assert_eq!(xs.len(), 3, "upsample: input [h,w,c]");
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * scale, w * scale);
        let ty = axis_taps(h, oh);
        let tx = axis_taps(w, ow);
        let x3 = self.value.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((oh, ow, c));
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                for ch in 0..c {
                    let v = x3[(y0, x0, ch)] * (1.0 - fy) * (1.0 - fx)
                        + x3[(y0, x1, ch)] * (1.0 - fy) * fx
                        + x3[(y1, x0, ch)] * fy * (1.0 - fx)
                        + x3[(y1, x1, ch)] * fy * fx;
                    out[(oy, ox, ch)] = v;
                }
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
            for oy in 0..oh {
                let (y0, y1, fy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = tx[ox];
                    for ch in 0..c {
                        let gv = g3[(oy, ox, ch)];
                        dx[(y0, x0, ch)] += gv * (1.0 - fy) * (1.0 - fx);
                        dx[(y0, x1, ch)] += gv * (1.0 - fy) * fx;
                        dx[(y1, x0, ch)] += gv * fy * (1.0 - fx);
                        dx[(y1, x1, ch)] += gv * fy * fx;
                    }
                }
            }
            dx.into_dyn()
        })
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value.len(),
            "reshape: element count {:?} -> {:?}",
            self.shape(),
            shape
        );
        let value = self
            .value
            .as_standard_layout()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        let in_shape = self.value.raw_dim();
        self.unary(value, move |g| {
            g.as_standard_layout()
                .into_shape_with_order(in_shape.clone())
                .expect("reshape grad")
                .to_owned()
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        assert_eq!(axes.len(), self.ndim(), "permute: axis count");
        let value = self
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.unary(value, move |g| {
            g.view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned()
        })
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let axis = parts[0].ndim() - 1;
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let value = concatenate(Axis(axis), &views)
            .expect("concat_last: shapes")
            .as_standard_layout()
            .to_owned();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let any = parts.iter().any(|p| p.is_tracked());
        tape.custom(
            value,
            any,
            Box::new(move |g, sink: &mut GradSink| {
                let mut off = 0;
                for (&pid, &wd) in ids.iter().zip(widths.iter()) {
                    if pid != UNTRACKED {
                        let piece = g
                            .slice_axis(Axis(axis), Slice::from(off..off + wd))
                            .as_standard_layout()
                            .to_owned();
                        sink(pid, piece);
                    }
                    off += wd;
                }
            }),
        )
    }

    /// Select index `i` of the last axis, dropping it.
    pub fn index_last(&self, i: usize) -> Var {
        let axis = self.ndim() - 1;
        let c = self.shape()[axis];
        assert!(i < c, "index_last: {} out of {}", i, c);
        let value = self
            .value
            .index_axis(Axis(axis), i)
            .as_standard_layout()
            .to_owned();
        let in_shape = self.value.raw_dim();
        self.unary(value, move |g| {
            let mut dx = Arr::zeros(in_shape.clone());
            dx.index_axis_mut(Axis(axis), i).assign(g);
            dx
        })
    }

    /// Circular shift of `[h, w, c]` content by `(dy, dx)`.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Var {
        let value = roll2d_impl(&self.value, dy, dx);
        self.unary(value, move |g| roll2d_impl(g, -dy, -dx))
    }

    /// Repeat the whole tensor `reps` times along a new leading block:
    /// `[b, ...] -> [reps*b, ...]`. Backward sums the blocks.
    pub fn tile_block0(&self, reps: usize) -> Var {
        let mut shape = self.shape().to_vec();
        let b0 = shape[0];
        shape[0] = b0 * reps;
        let mut value = Arr::zeros(IxDyn(&shape));
        for r in 0..reps {
            value
                .slice_axis_mut(Axis(0), Slice::from(r * b0..(r + 1) * b0))
                .assign(&self.value);
        }
        self.unary(value, move |g| {
            let mut acc = g
                .slice_axis(Axis(0), Slice::from(0..b0))
                .as_standard_layout()
                .to_owned();
            for r in 1..reps {
                acc += &g.slice_axis(Axis(0), Slice::from(r * b0..(r + 1) * b0));
            }
            acc
        })
    }

    /// Gather rows of a `[rows, c]` table: output `[idx.len(), c]`.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var {
        let ts = self.shape();
        assert_eq!(ts.len(), 2, "gather_rows: table [rows, c]");
        let (rows, c) = (ts[0], ts[1]);
        let t2 = as2(&self.value);
        let mut out = Array2::<f64>::zeros((idx.len(), c));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "gather_rows: index {} out of {}", r, rows);
            out.row_mut(i).assign(&t2.row(r));
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dt = Array2::<f64>::zeros((rows, c));
            for (i, &r) in idx.iter().enumerate() {
                let mut row = dt.row_mut(r);
                row += &g2.row(i);
            }
            dt.into_dyn()
        })
    }

    // ---- broadcast helpers ----

    /// Elementwise product with an untracked constant of the same shape.
    pub fn mul_const(&self, c: &Arr) -> Var {
        assert_eq!(self.shape(), c.shape(), "mul_const: shape mismatch");
        let value = &*self.value * c;
        let cc = c.clone();
        self.unary(value, move |g| g * &cc)
    }

    /// Elementwise sum with an untracked constant of the same shape.
    pub fn add_const(&self, c: &Arr) -> Var {
        assert_eq!(self.shape(), c.shape(), "add_const: shape mismatch");
        self.unary(&*self.value + c, |g| g.clone())
    }

    /// `x[..., c] * gate[..., 1]`, broadcasting the gate over the last axis.
    pub fn mul_bcast_last1(&self, gate: &Var) -> Var {
        let axis = self.ndim() - 1;
        assert_eq!(gate.shape()[axis], 1, "gate last axis must be 1");
        assert_eq!(&self.shape()[..axis], &gate.shape()[..axis], "leading dims");
        let value = &*self.value * &*gate.value;
        let x = self.rc_value();
        let gt = gate.rc_value();
        self.binary(
            gate,
            value,
            move |g| g * &*gt,
            move |g| {
                (g * &*x)
                    .sum_axis(Axis(axis))
                    .insert_axis(Axis(axis))
                    .as_standard_layout()
                    .to_owned()
            },
        )
    }

    /// Multiply by a scalar (zero-dimensional) variable.
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        assert_eq!(s.ndim(), 0, "mul_scalar_var: scalar rhs");
        let sv = s.scalar_value();
        let value = &*self.value * sv;
        let x = self.rc_value();
        self.binary(
            s,
            value,
            move |g| g * sv,
            move |g| Arr::from_elem(IxDyn(&[]), seq_sum(&(g * &*x))),
        )
    }

    /// Forward difference along the second axis of `[h, w]` with an implicit
    /// zero column appended: `y[i,j] = x[i,j+1] - x[i,j]`, last column `-x`.
    pub fn diff_x(&self) -> Var {
        let xs = self.shape();
        assert_eq!(xs.len(), 2, "diff_x: input [h,w]");
        let (h, w) = (xs[0], xs[1]);
        let x2 = as2(&self.value);
        let mut out = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let next = if j + 1 < w { x2[(i, j + 1)] } else { 0.0 };
                out[(i, j)] = next - x2[(i, j)];
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let mut v = -g2[(i, j)];
                    if j > 0 {
                        v += g2[(i, j - 1)];
                    }
                    dx[(i, j)] = v;
                }
            }
            dx.into_dyn()
        })
    }

    /// Forward difference along the first axis of `[h, w]`; see [`Var::diff_x`].
    pub fn diff_y(&self) -> Var {
        let xs = self.shape();
        assert_eq!(xs.len(), 2, "diff_y: input [h,w]");
        let (h, w) = (xs[0], xs[1]);
        let x2 = as2(&self.value);
        let mut out = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let next = if i + 1 < h { x2[(i + 1, j)] } else { 0.0 };
                out[(i, j)] = next - x2[(i, j)];
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let mut v = -g2[(i, j)];
                    if i > 0 {
                        v += g2[(i - 1, j)];
                    }
                    dx[(i, j)] = v;
                }
            }
            dx.into_dyn()
        })
    }
}

fn bmm_impl(a: &Arr, b: &Arr, transpose_b: bool) -> Arr {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm: lhs 3-d");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm: rhs 3-d");
    let (ba, n, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
    let m = if transpose_b { b3.shape()[1] } else { b3.shape()[2] };
    assert_eq!(ba, b3.shape()[0], "bmm: batch mismatch");
    let kb = if transpose_b { b3.shape()[2] } else { b3.shape()[1] };
    assert_eq!(k, kb, "bmm: inner dims");
    let mut out = ndarray::Array3::<f64>::zeros((ba, n, m));
    for i in 0..ba {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let mut oi = out.index_axis_mut(Axis(0), i);
        if transpose_b {
            general_mat_mul(1.0, &ai, &bi.t(), 0.0, &mut oi);
        } else {
            general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
        }
    }
    out.into_dyn()
}

/// `a^T x b` per batch: `[b,n,k]^T x [b,n,m] -> [b,k,m]`
fn bmm_tn(a: &Arr, b: &Arr) -> Arr {
    let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
    let (ba, n, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
    assert_eq!(n, b3.shape()[1], "bmm_tn: inner dims");
    let m = b3.shape()[2];
    let mut out = ndarray::Array3::<f64>::zeros((ba, k, m));
    for i in 0..ba {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let mut oi = out.index_axis_mut(Axis(0), i);
        general_mat_mul(1.0, &ai.t(), &bi, 0.0, &mut oi);
    }
    out.into_dyn()
}

fn im2col(
    x: &Arr,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let (h, w, c) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let xs = x3.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((oh * ow, kh * kw * c));
    let cs = cols.as_slice_mut().unwrap();
    let row_len = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let base = row * row_len;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (ky * kw + kx) * c;
                    cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: [usize; 3],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Arr {
    let [h, w, c] = in_shape;
    let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
    let ds = dx.as_slice_mut().unwrap();
    let src = dcols.as_slice().unwrap();
    let row_len = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let base = row * row_len;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let s = base + (ky * kw + kx) * c;
                    for ch in 0..c {
                        ds[dst + ch] += src[s + ch];
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

fn roll2d_impl(x: &Arr, dy: isize, dx: isize) -> Arr {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("roll2d: [h,w,c]");
    let (h, w, c) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let mut out = ndarray::Array3::<f64>::zeros((h, w, c));
    for i in 0..h {
        let si = (i as isize - dy).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                out[(i, j, ch)] = x3[(si, sj, ch)];
            }
        }
    }
    out.into_dyn()
}

/// Per-output-index `(i0, i1, frac)` taps for bilinear resampling.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = floor.max(0.0) as usize;
            let i0 = i0.min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            if floor < 0.0 {
                (0, i1.min(in_len - 1), 0.0)
            } else {
                (i0, i1, frac)
            }
        })
        .collect()
}
