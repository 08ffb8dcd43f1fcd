//! Learnable Gaussian band-pass fusion of the convolutional and attention
//! encoder branches.
//!
//! Both feature streams are decomposed into `K` learnable frequency bands,
//! cross-attended per band (queries from the attention branch, keys/values
//! from the convolutional branch), recombined by band summation, and gated
//! against a direct projection of the concatenated inputs:
//!
//! `F_out = G * F_sum + (1 - G) * proj([F_c, F_t])`, `G = sigmoid(W_g [F_t, F_sum])`.

use std::rc::Rc;

use autodiff::Var;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::freqbank::{band_filter_var, gauss_band_var, make_radius_grid, FilterBankParams};
use crate::nn::{
    from_tokens, multi_head_attention, to_tokens, AttnP, Binder, LinearP, ParamId, ParamStore,
};

/// Cross attention between the two branch sub-bands of one frequency band.
/// Queries come from the transformer band, keys and values from the CNN band.
pub fn band_cross_attention(
    b: &Binder,
    f_t_band: &Var,
    f_c_band: &Var,
    weights: &AttnP,
) -> Result<Var> {
    Ok(band_cross_attention_probs(b, f_t_band, f_c_band, weights)?.0)
}

/// Same as [`band_cross_attention`] but also returns the attention
/// probabilities `[heads, n, n]` for verification.
pub fn band_cross_attention_probs(
    b: &Binder,
    f_t_band: &Var,
    f_c_band: &Var,
    weights: &AttnP,
) -> Result<(Var, Var)> {
    let ts = f_t_band.shape();
    if ts != f_c_band.shape() {
        return Err(Error::Argument(format!(
            "band shapes disagree: {:?} vs {:?}",
            ts,
            f_c_band.shape()
        )));
    }
    if ts.len() != 3 {
        return Err(Error::Argument(format!(
            "band_cross_attention expects [h,w,c], got {ts:?}"
        )));
    }
    let (h, w, c) = (ts[0], ts[1], ts[2]);
    if c % weights.heads != 0 {
        return Err(Error::Argument(format!(
            "channels {c} not divisible by {} heads",
            weights.heads
        )));
    }
    let q = to_tokens(f_t_band);
    let kv = to_tokens(f_c_band);
    let (out, probs) = multi_head_attention(b, &q, &kv, weights, None, None);
    Ok((from_tokens(&out, h, w), probs))
}

/// One fusion site: a filter bank plus per-band attention and the output gate.
pub struct LgbpFusion {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mu: ParamId,
    pub sigma: ParamId,
    pub alpha: ParamId,
    pub band_attn: Vec<AttnP>,
    /// `[F_t, F_sum] (2c) -> c` gate logits.
    pub gate: LinearP,
    /// `[F_c, F_t] (2c) -> c` direct-path projection.
    pub proj: LinearP,
    grid: Rc<Array2<f64>>,
}

impl LgbpFusion {
    /// `bank` provides the initial band parameters; each fusion site owns an
    /// independent copy (one bank per scale).
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        height: usize,
        width: usize,
        channels: usize,
        heads: usize,
        bank: &FilterBankParams,
    ) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: channels {channels} not divisible by {heads} heads"
            )));
        }
        let grid = Rc::new(make_radius_grid(height, width)?.r);
        let k = bank.bands();
        let mu = ps.add(
            format!("{name}.bank.mu"),
            ndarray::Array1::from(bank.mu.clone()).into_dyn(),
        );
        let sigma = ps.add(
            format!("{name}.bank.sigma"),
            ndarray::Array1::from(bank.sigma.clone()).into_dyn(),
        );
        let alpha = ps.add(
            format!("{name}.bank.alpha"),
            ndarray::Array1::from(bank.alpha.clone()).into_dyn(),
        );
        let band_attn = (0..k)
            .map(|i| AttnP::init(ps, rng, &format!("{name}.band{i}"), channels, heads))
            .collect();
        let gate = LinearP::init(ps, rng, &format!("{name}.gate"), 2 * channels, channels);
        let proj = LinearP::init(ps, rng, &format!("{name}.proj"), 2 * channels, channels);
        Ok(LgbpFusion {
            channels,
            height,
            width,
            mu,
            sigma,
            alpha,
            band_attn,
            gate,
            proj,
            grid,
        })
    }

    pub fn bands(&self) -> usize {
        self.band_attn.len()
    }

    /// Snapshot of the current bank parameters.
    pub fn bank_params(&self, ps: &ParamStore) -> FilterBankParams {
        FilterBankParams {
            mu: ps.value(self.mu).iter().cloned().collect(),
            sigma: ps.value(self.sigma).iter().cloned().collect(),
            alpha: ps.value(self.alpha).iter().cloned().collect(),
        }
    }

    /// Sum of per-band cross attentions (the pre-gate fused stream).
    pub fn band_sum(&self, b: &Binder, f_c: &Var, f_t: &Var) -> Result<Var> {
        let mu = b.var(self.mu);
        let sigma = b.var(self.sigma);
        let alpha = b.var(self.alpha);
        let mut fused: Option<Var> = None;
        for (k, attn) in self.band_attn.iter().enumerate() {
            let mask = gauss_band_var(&self.grid, &mu, &sigma, &alpha, k);
            let fc_band = band_filter_var(f_c, &mask);
            let ft_band = band_filter_var(f_t, &mask);
            let a = band_cross_attention(b, &ft_band, &fc_band, attn)?;
            fused = Some(match fused {
                Some(acc) => acc.add(&a),
                None => a,
            });
        }
        Ok(fused.expect("at least one band"))
    }

    /// Fuse CNN features `f_c` with transformer features `f_t`, both
    /// `[h, w, c]` matching this site's geometry.
    pub fn forward(&self, b: &Binder, f_c: &Var, f_t: &Var) -> Result<Var> {
        if f_c.shape() != f_t.shape() {
            return Err(Error::Argument(format!(
                "fusion inputs disagree: {:?} vs {:?}",
                f_c.shape(),
                f_t.shape()
            )));
        }
        let expect = [self.height, self.width, self.channels];
        if f_c.shape() != expect {
            return Err(Error::Argument(format!(
                "fusion site built for {:?}, got {:?}",
                expect,
                f_c.shape()
            )));
        }
        let mu = b.var(self.mu);
        if mu.shape()[0] != self.bands() {
            return Err(Error::Config(format!(
                "bank has {} bands but {} attention blocks",
                mu.shape()[0],
                self.bands()
            )));
        }
        let f_sum = self.band_sum(b, f_c, f_t)?;

        let gate_in = Var::concat_last(&[f_t, &f_sum]);
        let gate = self.gate.apply(b, &gate_in).sigmoid();
        let direct_in = Var::concat_last(&[f_c, f_t]);
        let direct = self.proj.apply(b, &direct_in);

        let one_minus = gate.rsub_scalar(1.0);
        Ok(gate.mul(&f_sum).add(&one_minus.mul(&direct)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use autodiff::{finite_diff, Arr, Tape};
    use ndarray::{Array3, IxDyn};
    use rand::Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn new_site(c: usize, h: usize, w: usize, heads: usize, seed: u64) -> (ParamStore, LgbpFusion) {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let bank = FilterBankParams::default_bank();
        let site = LgbpFusion::init(&mut ps, &mut rng, "lgbp", h, w, c, heads, &bank).unwrap();
        (ps, site)
    }

    #[test]
    fn zero_values_give_zero_attention_output() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(1);
        let attn = AttnP::init(&mut ps, &mut rng, "a", 8, 2);
        let tape = Tape::inference();
        let binder = Binder::new(tape.clone(), &ps);
        let f_t = tape.constant(rand_arr(&mut rng, &[4, 4, 8]));
        let f_c = tape.constant(Arr::zeros(IxDyn(&[4, 4, 8])));
        let out = band_cross_attention(&binder, &f_t, &f_c, &attn).unwrap();
        assert!(out.value().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn single_token_softmax_is_identity() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(2);
        let attn = AttnP::init(&mut ps, &mut rng, "a", 6, 2);
        let tape = Tape::inference();
        let binder = Binder::new(tape.clone(), &ps);
        let f_t = tape.constant(rand_arr(&mut rng, &[1, 1, 6]));
        let f_c_arr = rand_arr(&mut rng, &[1, 1, 6]);
        let f_c = tape.constant(f_c_arr.clone());
        let out = band_cross_attention(&binder, &f_t, &f_c, &attn).unwrap();

        // One key: attention collapses to W_o(W_v f_c + b_v) + b_o.
        let v = f_c
            .reshape(&[1, 6])
            .matmul(&binder.var(attn.wv.w))
            .add_bias(&binder.var(attn.wv.b));
        let want = v
            .matmul(&binder.var(attn.wo.w))
            .add_bias(&binder.var(attn.wo.b));
        let err = out
            .value()
            .iter()
            .zip(want.value().iter())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(err < 1e-10, "err {err}");
    }

    /// Scalar re-derivation of the whole attention path.
    fn scalar_attention(
        ps: &ParamStore,
        attn: &AttnP,
        f_t: &Arr,
        f_c: &Arr,
    ) -> (Array3<f64>, Vec<Vec<Vec<f64>>>) {
        let (h, w, c) = (f_t.shape()[0], f_t.shape()[1], f_t.shape()[2]);
        let n = h * w;
        let heads = attn.heads;
        let d = c / heads;
        let lin = |x: &Arr, wp: &LinearP| -> Vec<Vec<f64>> {
            let wm = ps.value(wp.w);
            let bm = ps.value(wp.b);
            let xs = x.as_slice().unwrap();
            (0..n)
                .map(|t| {
                    (0..c)
                        .map(|o| {
                            let mut acc = bm[[o]];
                            for i in 0..c {
                                acc += xs[t * c + i] * wm[[i, o]];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let q = lin(f_t, &attn.wq);
        let k = lin(f_c, &attn.wk);
        let v = lin(f_c, &attn.wv);
        let mut probs = vec![vec![vec![0.0; n]; n]; heads];
        let mut ctx = vec![vec![0.0; c]; n];
        for head in 0..heads {
            let off = head * d;
            for ti in 0..n {
                let mut row = vec![0.0; n];
                for (tj, rv) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for e in 0..d {
                        s += q[ti][off + e] * k[tj][off + e];
                    }
                    *rv = s / (d as f64).sqrt();
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                for tj in 0..n {
                    for e in 0..d {
                        ctx[ti][off + e] += row[tj] * v[tj][off + e];
                    }
                }
                probs[head][ti] = row;
            }
        }
        let wo = ps.value(attn.wo.w);
        let bo = ps.value(attn.wo.b);
        let mut out = Array3::<f64>::zeros((h, w, c));
        for t in 0..n {
            for o in 0..c {
                let mut acc = bo[[o]];
                for i in 0..c {
                    acc += ctx[t][i] * wo[[i, o]];
                }
                out[(t / w, t % w, o)] = acc;
            }
        }
        (out, probs)
    }

    #[test]
    fn attention_matches_scalar_reference_and_rows_normalize() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(3);
        let attn = AttnP::init(&mut ps, &mut rng, "a", 8, 2);
        let f_t_arr = rand_arr(&mut rng, &[4, 4, 8]);
        let f_c_arr = rand_arr(&mut rng, &[4, 4, 8]);

        let tape = Tape::inference();
        let binder = Binder::new(tape.clone(), &ps);
        let f_t = tape.constant(f_t_arr.clone());
        let f_c = tape.constant(f_c_arr.clone());
        let (out, probs) = band_cross_attention_probs(&binder, &f_t, &f_c, &attn).unwrap();

        let (want, want_probs) = scalar_attention(&ps, &attn, &f_t_arr, &f_c_arr);
        let err = out
            .value()
            .iter()
            .zip(want.iter())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(err < 1e-9, "output mismatch {err}");

        let p = probs.value();
        assert_eq!(p.shape(), &[2, 16, 16]);
        for head in 0..2 {
            for ti in 0..16 {
                let mut sum = 0.0;
                for tj in 0..16 {
                    let v = p[[head, ti, tj]];
                    assert!(v >= 0.0);
                    assert!((v - want_probs[head][ti][tj]).abs() < 1e-9);
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_heads() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(4);
        let attn = AttnP::init(&mut ps, &mut rng, "a", 8, 2);
        let tape = Tape::inference();
        let binder = Binder::new(tape.clone(), &ps);
        let a = tape.constant(Arr::zeros(IxDyn(&[4, 4, 8])));
        let b = tape.constant(Arr::zeros(IxDyn(&[4, 2, 8])));
        assert!(matches!(
            band_cross_attention(&binder, &a, &b, &attn),
            Err(Error::Argument(_))
        ));
        let bad = AttnP { heads: 3, ..attn };
        assert!(matches!(
            band_cross_attention(&binder, &a, &a, &bad),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gate_saturation_selects_endpoints() {
        let (mut ps, site) = new_site(8, 6, 6, 2, 5);
        let mut rng = seeded_rng(6);
        let f_c_arr = rand_arr(&mut rng, &[6, 6, 8]);
        let f_t_arr = rand_arr(&mut rng, &[6, 6, 8]);

        let run = |ps: &ParamStore| -> (Arr, Arr, Arr) {
            let tape = Tape::inference();
            let binder = Binder::new(tape.clone(), ps);
            let f_c = tape.constant(f_c_arr.clone());
            let f_t = tape.constant(f_t_arr.clone());
            let out = site.forward(&binder, &f_c, &f_t).unwrap();
            let f_sum = site.band_sum(&binder, &f_c, &f_t).unwrap();
            let direct = site.proj.apply(&binder, &Var::concat_last(&[&f_c, &f_t]));
            (
                out.value().clone(),
                f_sum.value().clone(),
                direct.value().clone(),
            )
        };

        // Saturate the gate high: F_out == F_sum exactly.
        *ps.value_mut(site.gate.b) = crate::nn::full(&[8], 60.0);
        let (out, f_sum, _) = run(&ps);
        assert_eq!(out, f_sum);

        // Saturate low: F_out == direct projection exactly.
        *ps.value_mut(site.gate.b) = crate::nn::full(&[8], -60.0);
        let (out, _, direct) = run(&ps);
        assert_eq!(out, direct);
    }

    #[test]
    fn output_between_gate_endpoints() {
        let (ps, site) = new_site(8, 6, 6, 2, 7);
        let mut rng = seeded_rng(8);
        let tape = Tape::inference();
        let binder = Binder::new(tape.clone(), &ps);
        let f_c = tape.constant(rand_arr(&mut rng, &[6, 6, 8]));
        let f_t = tape.constant(rand_arr(&mut rng, &[6, 6, 8]));
        let out = site.forward(&binder, &f_c, &f_t).unwrap();
        let f_sum = site.band_sum(&binder, &f_c, &f_t).unwrap();
        let direct = site.proj.apply(&binder, &Var::concat_last(&[&f_c, &f_t]));

        for ((&o, &a), &b) in out
            .value()
            .iter()
            .zip(f_sum.value().iter())
            .zip(direct.value().iter())
        {
            let lo = a.min(b) - 1e-12;
            let hi = a.max(b) + 1e-12;
            assert!(o >= lo && o <= hi, "output {o} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn shape_preserved_across_sites() {
        for &(h, c, heads) in &[(7usize, 8usize, 2usize), (14, 8, 4)] {
            let (ps, site) = new_site(c, h, h, heads, 9);
            let mut rng = seeded_rng(10);
            let tape = Tape::inference();
            let binder = Binder::new(tape.clone(), &ps);
            let f_c = tape.constant(rand_arr(&mut rng, &[h, h, c]));
            let f_t = tape.constant(rand_arr(&mut rng, &[h, h, c]));
            let out = site.forward(&binder, &f_c, &f_t).unwrap();
            assert_eq!(out.shape(), &[h, h, c]);
            assert!(out.value().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (ps, site) = new_site(8, 6, 6, 2, 11);
        let mut rng = seeded_rng(12);
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &ps);
        let f_c = tape.constant(rand_arr(&mut rng, &[6, 6, 8]));
        let f_t = tape.constant(rand_arr(&mut rng, &[6, 6, 8]));
        let out = site.forward(&binder, &f_c, &f_t).unwrap();
        let loss = out.mul(&out).sum_all();
        let mut grads = tape.backward(&loss);
        let collected = binder.collect_grads(&mut grads);
        for (i, g) in collected.iter().enumerate() {
            let name = ps.name(ParamId(i));
            let g = g.as_ref().unwrap_or_else(|| panic!("no grad for {name}"));
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero grad for {name}");
        }
    }

    #[test]
    fn end_to_end_center_frequency_gradient_matches_fd() {
        let (ps, site) = new_site(8, 6, 6, 2, 13);
        let mut rng = seeded_rng(14);
        let f_c_arr = rand_arr(&mut rng, &[6, 6, 8]);
        let f_t_arr = rand_arr(&mut rng, &[6, 6, 8]);

        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &ps);
        let f_c = tape.constant(f_c_arr.clone());
        let f_t = tape.constant(f_t_arr.clone());
        let out = site.forward(&binder, &f_c, &f_t).unwrap();
        let loss = out.sum_all();
        let grads = tape.backward(&loss);
        let mu_var = binder.var(site.mu);
        let analytic = grads.get_or_zeros(&mu_var);

        let mu0 = ps.value(site.mu).clone();
        let fd = finite_diff(
            |probe| {
                let mut ps2 = ps.clone();
                *ps2.value_mut(site.mu) = probe.clone();
                let tape = Tape::inference();
                let binder = Binder::new(tape.clone(), &ps2);
                let f_c = tape.constant(f_c_arr.clone());
                let f_t = tape.constant(f_t_arr.clone());
                site.forward(&binder, &f_c, &f_t)
                    .unwrap()
                    .sum_all()
                    .scalar_value()
            },
            &mu0,
            1e-3,
        );
        let rel = autodiff::rel_err(&analytic, &fd);
        assert!(rel < 1e-2, "mu gradient rel err {rel}");
    }
}
