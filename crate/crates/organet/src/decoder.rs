//! Bidirectional cross fusion of adjacent pyramid scales and the progressive
//! concatenation-upsampling decoder.
//!
//! Each fusion site lifts the coarser level with a learnable patch expansion,
//! runs attention in both directions (high-to-low and low-to-high, with a
//! shared relative position bias), scales the two outputs by learnable
//! factors, blends them through an MLP gate, and projects the residual
//! concatenation back to the high-resolution width. The decoder then folds
//! the pyramid into full-resolution two-channel logits.

use std::rc::Rc;

use autodiff::Var;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{DualEncoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::freqbank::FilterBankParams;
use crate::nn::{
    full, init_trunc_normal, multi_head_attention, relative_position_index, AttnP, Binder, ConvP,
    LinearP, NormP, ParamId, ParamStore,
};

/// Learnable 2x upsampling: a linear `c -> 2c` expansion whose four output
/// groups of `c/2` channels become the 2x2 spatial neighborhood.
pub struct PatchExpand {
    pub expand: LinearP,
    channels: usize,
}

impl PatchExpand {
    pub fn init(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::Argument(format!(
                "patch expansion needs even channels, got {c}"
            )));
        }
        Ok(PatchExpand {
            expand: LinearP::init(ps, rng, name, c, 2 * c),
            channels: c,
        })
    }

    /// `[s, s, c] -> [2s, 2s, c/2]`
    pub fn forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::Argument(format!(
                "patch expansion built for {} channels, got {s:?}",
                self.channels
            )));
        }
        let (side, c) = (s[0], s[2]);
        let half = c / 2;
        let wide = self.expand.apply(b, x); // [s, s, 2c]
        Ok(wide
            .reshape(&[side, side, 2, 2, half])
            .permute(&[0, 2, 1, 3, 4])
            .reshape(&[2 * side, 2 * side, half]))
    }
}

/// Intermediates of one bidirectional fusion, exposed for verification.
pub struct BcfParts {
    pub fused: Var,
    pub o_h2l: Var,
    pub o_l2h: Var,
    pub gate: Var,
    pub probs_h2l: Var,
    pub probs_l2h: Var,
}

/// Bidirectional cross fusion between a high-resolution level `[s, s, c]` and
/// the next coarser level `[s/2, s/2, 2c]`.
pub struct BcfBlock {
    pub side: usize,
    pub channels: usize,
    pub expand: PatchExpand,
    norm_high: NormP,
    norm_up: NormP,
    prefuse_in: LinearP,
    prefuse_out: LinearP,
    attn_h2l: AttnP,
    attn_l2h: AttnP,
    bias_table: ParamId,
    bias_idx: Rc<Vec<usize>>,
    pub gamma_h2l: ParamId,
    pub gamma_l2h: ParamId,
    gate_in: LinearP,
    gate_out: LinearP,
    out_proj: LinearP,
}

impl BcfBlock {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        side: usize,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: channels {channels} not divisible by {heads} heads"
            )));
        }
        let span = 2 * side - 1;
        Ok(BcfBlock {
            side,
            channels,
            expand: PatchExpand::init(ps, rng, &format!("{name}.expand"), 2 * channels)?,
            norm_high: NormP::init(ps, &format!("{name}.norm_high"), channels),
            norm_up: NormP::init(ps, &format!("{name}.norm_up"), channels),
            prefuse_in: LinearP::init(
                ps,
                rng,
                &format!("{name}.prefuse_in"),
                2 * channels,
                2 * channels,
            ),
            prefuse_out: LinearP::init(
                ps,
                rng,
                &format!("{name}.prefuse_out"),
                2 * channels,
                channels,
            ),
            attn_h2l: AttnP::init(ps, rng, &format!("{name}.h2l"), channels, heads),
            attn_l2h: AttnP::init(ps, rng, &format!("{name}.l2h"), channels, heads),
            bias_table: ps.add(
                format!("{name}.bias_table"),
                init_trunc_normal(rng, &[span * span, heads], 0.02),
            ),
            bias_idx: Rc::new(relative_position_index(side)),
            gamma_h2l: ps.add(format!("{name}.gamma_h2l"), full(&[], 0.1)),
            gamma_l2h: ps.add(format!("{name}.gamma_l2h"), full(&[], 0.1)),
            gate_in: LinearP::init(ps, rng, &format!("{name}.gate_in"), 2 * channels, channels),
            gate_out: LinearP::init(ps, rng, &format!("{name}.gate_out"), channels, 1),
            out_proj: LinearP::init(
                ps,
                rng,
                &format!("{name}.out_proj"),
                2 * channels,
                channels,
            ),
        })
    }

    pub fn forward(&self, b: &Binder, p_high: &Var, p_low: &Var) -> Result<Var> {
        Ok(self.forward_parts(b, p_high, p_low)?.fused)
    }

    pub fn forward_parts(&self, b: &Binder, p_high: &Var, p_low: &Var) -> Result<BcfParts> {
        let (s, c) = (self.side, self.channels);
        if p_high.shape() != [s, s, c] {
            return Err(Error::Argument(format!(
                "high level must be [{s}, {s}, {c}], got {:?}",
                p_high.shape()
            )));
        }
        if p_low.shape() != [s / 2, s / 2, 2 * c] {
            return Err(Error::Argument(format!(
                "low level must be [{0}, {0}, {1}] to satisfy the pyramid contract, got {2:?}",
                s / 2,
                2 * c,
                p_low.shape()
            )));
        }
        let n = s * s;

        let p2_up = self.expand.forward(b, p_low)?;
        let hn = self.norm_high.apply(b, p_high).reshape(&[1, n, c]);
        let un = self.norm_up.apply(b, &p2_up).reshape(&[1, n, c]);

        let prefused = {
            let cat = Var::concat_last(&[&hn, &un]);
            let h = self.prefuse_in.apply(b, &cat).gelu();
            self.prefuse_out.apply(b, &h)
        };

        let bias = b
            .var(self.bias_table)
            .gather_rows(Rc::clone(&self.bias_idx))
            .reshape(&[n, n, self.attn_h2l.heads])
            .permute(&[2, 0, 1]);

        let (o_h, probs_h) = multi_head_attention(b, &hn, &un, &self.attn_h2l, Some(&bias), None);
        let (o_l, probs_l) =
            multi_head_attention(b, &un, &prefused, &self.attn_l2h, Some(&bias), None);
        let o_h = o_h.mul_scalar_var(&b.var(self.gamma_h2l));
        let o_l = o_l.mul_scalar_var(&b.var(self.gamma_l2h));

        let gate = {
            let cat = Var::concat_last(&[&o_h, &o_l]);
            let h = self.gate_in.apply(b, &cat).gelu();
            self.gate_out.apply(b, &h).sigmoid()
        };
        let fused_dirs = o_h
            .mul_bcast_last1(&gate)
            .add(&o_l.mul_bcast_last1(&gate.rsub_scalar(1.0)));

        let high_tokens = p_high.reshape(&[1, n, c]);
        let residual = high_tokens.add(&fused_dirs);
        let out = self
            .out_proj
            .apply(b, &Var::concat_last(&[&high_tokens, &residual]))
            .reshape(&[s, s, c]);

        Ok(BcfParts {
            fused: out,
            o_h2l: o_h,
            o_l2h: o_l,
            gate,
            probs_h2l: probs_h,
            probs_l2h: probs_l,
        })
    }
}

/// 3x3 convolution + channel norm + GELU.
struct ConvBlock {
    conv: ConvP,
    norm: NormP,
}

impl ConvBlock {
    fn init(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            conv: ConvP::init(ps, rng, name, 3, cin, cout, 1, 1),
            norm: NormP::init(ps, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, b: &Binder, x: &Var) -> Var {
        self.norm.apply(b, &self.conv.apply(b, x)).gelu()
    }
}

/// Progressive concatenation-upsampling decoder head.
pub struct Decoder {
    conv_0_1: ConvBlock,
    conv_1_2: ConvBlock,
    final_conv: ConvBlock,
    pub seg_head: LinearP,
    c0: usize,
}

/// Foreground prior used to initialize the segmentation head bias; organoid
/// pixels are the minority class, so untrained output favors background.
pub const SEG_BIAS_BACKGROUND: f64 = 1.0;
pub const SEG_BIAS_FOREGROUND: f64 = -1.0;

impl Decoder {
    pub fn init(ps: &mut ParamStore, rng: &mut ChaCha8Rng, c0: usize) -> Self {
        let conv_0_1 = ConvBlock::init(ps, rng, "decoder.conv_0_1", c0 + 2 * c0, c0);
        let conv_1_2 = ConvBlock::init(ps, rng, "decoder.conv_1_2", 2 * c0 + 4 * c0, 2 * c0);
        let final_conv = ConvBlock::init(ps, rng, "decoder.final", 2 * c0 + c0 + c0, c0);
        let seg_head = LinearP::init(ps, rng, "decoder.seg_head", c0, 2);
        let mut bias = full(&[2], 0.0);
        bias[[0]] = SEG_BIAS_BACKGROUND;
        bias[[1]] = SEG_BIAS_FOREGROUND;
        *ps.value_mut(seg_head.b) = bias;
        Decoder {
            conv_0_1,
            conv_1_2,
            final_conv,
            seg_head,
            c0,
        }
    }

    /// `(P0', P1', P2) -> [input, input, 2]` logits. `P2` enters directly;
    /// only the two finer levels pass through cross fusion.
    pub fn forward(&self, b: &Binder, p0f: &Var, p1f: &Var, p2: &Var) -> Result<Var> {
        let c0 = self.c0;
        let s0 = p0f.shape()[0];
        if p0f.shape() != [s0, s0, c0] {
            return Err(Error::Argument(format!(
                "P0' must be [{s0}, {s0}, {c0}], got {:?}",
                p0f.shape()
            )));
        }
        if p1f.shape() != [s0 / 2, s0 / 2, 2 * c0] {
            return Err(Error::Argument(format!(
                "P1' shape {:?} inconsistent with P0' {:?}",
                p1f.shape(),
                p0f.shape()
            )));
        }
        if p2.shape() != [s0 / 4, s0 / 4, 4 * c0] {
            return Err(Error::Argument(format!(
                "P2 shape {:?} inconsistent with P0' {:?}",
                p2.shape(),
                p0f.shape()
            )));
        }

        let p01 = {
            let up = p1f.upsample_bilinear(2);
            self.conv_0_1.forward(b, &Var::concat_last(&[&up, p0f]))
        };
        let p12 = {
            let up = p2.upsample_bilinear(2);
            self.conv_1_2.forward(b, &Var::concat_last(&[&up, p1f]))
        };
        let merged = {
            let up = p12.upsample_bilinear(2);
            self.final_conv
                .forward(b, &Var::concat_last(&[&up, &p01, p0f]))
        };
        let full_res = merged.upsample_bilinear(4);
        Ok(self.seg_head.apply(b, &full_res))
    }
}

/// The full segmentation model: encoder, two fusion sites, decoder.
pub struct Model {
    pub encoder: DualEncoder,
    pub bcf01: BcfBlock,
    pub bcf12: BcfBlock,
    pub decoder: Decoder,
}

impl Model {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        bank: &FilterBankParams,
    ) -> Result<Self> {
        let encoder = DualEncoder::init(ps, rng, cfg, bank)?;
        let bcf01 = BcfBlock::init(
            ps,
            rng,
            "bcf01",
            cfg.stage_side(0),
            cfg.stage_channels(0),
            cfg.fusion_heads,
        )?;
        let bcf12 = BcfBlock::init(
            ps,
            rng,
            "bcf12",
            cfg.stage_side(1),
            cfg.stage_channels(1),
            cfg.fusion_heads,
        )?;
        let decoder = Decoder::init(ps, rng, cfg.base_channels);
        Ok(Model {
            encoder,
            bcf01,
            bcf12,
            decoder,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }

    /// Image `[s, s, 3] -> [s, s, 2]` class logits.
    pub fn forward_logits(&self, b: &Binder, image: &Var) -> Result<Var> {
        let FeaturePyramid { p0, p1, p2 } = self.encoder.forward(b, image)?;
        let p0f = self.bcf01.forward(b, &p0, &p1)?;
        let p1f = self.bcf12.forward(b, &p1, &p2)?;
        self.decoder.forward(b, &p0f, &p1f, &p2)
    }

    /// Image `[s, s, 3] -> [s, s, 2]` per-pixel class probabilities.
    pub fn forward_probs(&self, b: &Binder, image: &Var) -> Result<Var> {
        Ok(self.forward_logits(b, image)?.softmax_last())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_cfg;
    use crate::nn::seeded_rng;
    use autodiff::{Arr, Tape};
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn patch_expand_shapes() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(1);
        let pe = PatchExpand::init(&mut ps, &mut rng, "pe", 16).unwrap();
        let pe2 = PatchExpand::init(&mut ps, &mut rng, "pe2", 8).unwrap();
        assert!(PatchExpand::init(&mut ps, &mut rng, "odd", 7).is_err());

        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let x = tape.constant(rand_arr(&mut rng, &[7, 7, 16]));
        let y = pe.forward(&b, &x).unwrap();
        assert_eq!(y.shape(), &[14, 14, 8]);

        let x = tape.constant(rand_arr(&mut rng, &[14, 14, 8]));
        assert_eq!(pe2.forward(&b, &x).unwrap().shape(), &[28, 28, 4]);
    }

    #[test]
    fn patch_expand_rearrangement_matches_scalar_reference() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(2);
        let c = 6;
        let pe = PatchExpand::init(&mut ps, &mut rng, "pe", c).unwrap();
        let x_arr = rand_arr(&mut rng, &[3, 3, c]);

        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let x = tape.constant(x_arr.clone());
        let y = pe.forward(&b, &x).unwrap();

        // scalar reference: wide[i,j,o] = sum_i x*w + bias; out[2i+a, 2j+b, ch]
        // = wide[i, j, (a*2+b)*c/2 + ch]
        let w = ps.value(pe.expand.w);
        let bias = ps.value(pe.expand.b);
        let half = c / 2;
        for i in 0..3 {
            for j in 0..3 {
                for a in 0..2 {
                    for bb in 0..2 {
                        for ch in 0..half {
                            let o = (a * 2 + bb) * half + ch;
                            let mut acc = bias[[o]];
                            for k in 0..c {
                                acc += x_arr[[i, j, k]] * w[[k, o]];
                            }
                            let got = y.value()[[2 * i + a, 2 * j + bb, ch]];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patch_expand_constant_input_with_replicated_groups() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(3);
        let c = 8;
        let pe = PatchExpand::init(&mut ps, &mut rng, "pe", c).unwrap();
        // Make the four output groups identical: every output pixel of a
        // constant input then carries the same vector.
        {
            let w = ps.value_mut(pe.expand.w);
            let half = c / 2;
            let base: Vec<Vec<f64>> = (0..c)
                .map(|k| (0..half).map(|o| ((k * 31 + o * 7) % 5) as f64 * 0.1).collect())
                .collect();
            for k in 0..c {
                for g in 0..4 {
                    for o in 0..half {
                        w[[k, g * half + o]] = base[k][o];
                    }
                }
            }
        }
        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let x = tape.constant(Arr::from_elem(IxDyn(&[4, 4, c]), 0.7));
        let y = pe.forward(&b, &x).unwrap();
        let first: Vec<f64> = (0..c / 2).map(|i| y.value()[[0, 0, i]]).collect();
        for yy in 0..8 {
            for xx in 0..8 {
                for (i, want) in first.iter().enumerate() {
                    assert!((y.value()[[yy, xx, i]] - want).abs() < 1e-12);
                }
            }
        }
    }

    fn new_bcf(side: usize, c: usize, seed: u64) -> (ParamStore, BcfBlock) {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let bcf = BcfBlock::init(&mut ps, &mut rng, "bcf", side, c, 2).unwrap();
        (ps, bcf)
    }

    #[test]
    fn bcf_shapes_and_attention_rows() {
        let (ps, bcf) = new_bcf(14, 8, 4);
        let mut rng = seeded_rng(5);
        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let p_high = tape.constant(rand_arr(&mut rng, &[14, 14, 8]));
        let p_low = tape.constant(rand_arr(&mut rng, &[7, 7, 16]));
        let parts = bcf.forward_parts(&b, &p_high, &p_low).unwrap();
        assert_eq!(parts.fused.shape(), &[14, 14, 8]);

        for probs in [&parts.probs_h2l, &parts.probs_l2h] {
            let p = probs.value();
            let (bh, n, _) = (p.shape()[0], p.shape()[1], p.shape()[2]);
            for i in 0..bh {
                for a in 0..n {
                    let mut sum = 0.0;
                    for bb in 0..n {
                        let v = p[[i, a, bb]];
                        assert!(v >= 0.0);
                        sum += v;
                    }
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }

        // gate strictly inside (0, 1)
        assert!(parts
            .gate
            .value()
            .iter()
            .all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn bcf_rejects_pyramid_violations() {
        let (ps, bcf) = new_bcf(14, 8, 6);
        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let p_high = tape.constant(Arr::zeros(IxDyn(&[14, 14, 8])));
        let bad_low = tape.constant(Arr::zeros(IxDyn(&[6, 6, 16])));
        assert!(matches!(
            bcf.forward(&b, &p_high, &bad_low),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn bcf_gate_saturation_selects_h2l() {
        let (mut ps, bcf) = new_bcf(8, 8, 7);
        *ps.value_mut(bcf.gate_out.b) = full(&[1], 60.0);
        let mut rng = seeded_rng(8);
        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let p_high = tape.constant(rand_arr(&mut rng, &[8, 8, 8]));
        let p_low = tape.constant(rand_arr(&mut rng, &[4, 4, 16]));
        let parts = bcf.forward_parts(&b, &p_high, &p_low).unwrap();
        // pre-residual blend equals the h2l branch exactly at a saturated gate
        let blend = parts
            .o_h2l
            .mul_bcast_last1(&parts.gate)
            .add(&parts.o_l2h.mul_bcast_last1(&parts.gate.rsub_scalar(1.0)));
        assert_eq!(blend.value(), parts.o_h2l.value());
    }

    #[test]
    fn bcf_zero_gamma_is_affine_in_high_level_only() {
        let (mut ps, bcf) = new_bcf(8, 8, 9);
        *ps.value_mut(bcf.gamma_h2l) = full(&[], 0.0);
        *ps.value_mut(bcf.gamma_l2h) = full(&[], 0.0);
        let mut rng = seeded_rng(10);

        let run = |high: &Arr, low: &Arr| -> Arr {
            let tape = Tape::inference();
            let b = Binder::new(tape.clone(), &ps);
            let h = tape.constant(high.clone());
            let l = tape.constant(low.clone());
            bcf.forward(&b, &h, &l).unwrap().value().clone()
        };

        let high = rand_arr(&mut rng, &[8, 8, 8]);
        let low_a = rand_arr(&mut rng, &[4, 4, 16]);
        let low_b = rand_arr(&mut rng, &[4, 4, 16]);
        // independent of the low level
        assert_eq!(run(&high, &low_a), run(&high, &low_b));

        // affine in the high level: f(x1 + x2) = f(x1) + f(x2) - f(0)
        let h1 = rand_arr(&mut rng, &[8, 8, 8]);
        let h2 = rand_arr(&mut rng, &[8, 8, 8]);
        let sum = &h1 + &h2;
        let zero = Arr::zeros(IxDyn(&[8, 8, 8]));
        let lhs = run(&sum, &low_a);
        let rhs = &(&run(&h1, &low_a) + &run(&h2, &low_a)) - &run(&zero, &low_a);
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "not affine: {err}");
    }

    #[test]
    fn decoder_shapes_and_zero_pyramid_bias() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(11);
        let dec = Decoder::init(&mut ps, &mut rng, 8);
        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);

        let p0f = tape.constant(rand_arr(&mut rng, &[16, 16, 8]));
        let p1f = tape.constant(rand_arr(&mut rng, &[8, 8, 16]));
        let p2 = tape.constant(rand_arr(&mut rng, &[4, 4, 32]));
        let logits = dec.forward(&b, &p0f, &p1f, &p2).unwrap();
        assert_eq!(logits.shape(), &[64, 64, 2]);

        // all-zero pyramid: only the head bias survives the zero-initialized
        // linear/conv stack
        let z0 = tape.constant(Arr::zeros(IxDyn(&[16, 16, 8])));
        let z1 = tape.constant(Arr::zeros(IxDyn(&[8, 8, 16])));
        let z2 = tape.constant(Arr::zeros(IxDyn(&[4, 4, 32])));
        let logits = dec.forward(&b, &z0, &z1, &z2).unwrap();
        for px in logits.value().rows() {
            assert!((px[0] - SEG_BIAS_BACKGROUND).abs() < 1e-12);
            assert!((px[1] - SEG_BIAS_FOREGROUND).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_rejects_mismatched_pyramid() {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(12);
        let dec = Decoder::init(&mut ps, &mut rng, 8);
        let tape = Tape::inference();
        let b = Binder::new(tape.clone(), &ps);
        let p0f = tape.constant(Arr::zeros(IxDyn(&[16, 16, 8])));
        let p1f = tape.constant(Arr::zeros(IxDyn(&[8, 8, 16])));
        let bad_p2 = tape.constant(Arr::zeros(IxDyn(&[4, 4, 16])));
        assert!(matches!(
            dec.forward(&b, &p0f, &p1f, &bad_p2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn model_probabilities_normalize_and_are_deterministic() {
        let cfg = tiny_cfg();
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(13);
        let bank =
            FilterBankParams::new(vec![0.1, 0.35], vec![0.15, 0.15], vec![1.0, 1.0]).unwrap();
        let model = Model::init(&mut ps, &mut rng, &cfg, &bank).unwrap();

        let img = Arr::from_shape_fn(IxDyn(&[64, 64, 3]), |_| rng.random_range(0.0..1.0));
        let run = || -> Arr {
            let tape = Tape::inference();
            let b = Binder::new(tape.clone(), &ps);
            let image = tape.constant(img.clone());
            model.forward_probs(&b, &image).unwrap().value().clone()
        };
        let probs = run();
        assert_eq!(probs.shape(), &[64, 64, 2]);
        for px in probs.rows() {
            assert!((px[0] + px[1] - 1.0).abs() < 1e-6);
            assert!(px[0] >= 0.0 && px[1] >= 0.0);
        }
        // duplicated input in a "batch" gives identical outputs
        assert_eq!(probs, run());
    }

    #[test]
    fn model_gradient_reaches_every_parameter() {
        let cfg = tiny_cfg();
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(14);
        let bank =
            FilterBankParams::new(vec![0.1, 0.35], vec![0.15, 0.15], vec![1.0, 1.0]).unwrap();
        let model = Model::init(&mut ps, &mut rng, &cfg, &bank).unwrap();
        let tape = Tape::new();
        let b = Binder::new(tape.clone(), &ps);
        let img = tape.constant(Arr::from_shape_fn(IxDyn(&[64, 64, 3]), |_| {
            rng.random_range(0.0..1.0)
        }));
        let logits = model.forward_logits(&b, &img).unwrap();
        let loss = logits.mul(&logits).sum_all();
        let mut grads = tape.backward(&loss);
        let collected = b.collect_grads(&mut grads);
        for (i, g) in collected.iter().enumerate() {
            let name = ps.name(ParamId(i));
            let g = g.as_ref().unwrap_or_else(|| panic!("no grad for {name}"));
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero grad for {name}");
        }
    }
}
