//! Dual-branch feature pyramid encoder.
//!
//! A shared convolutional stem feeds two parallel branches: a ResNet-style
//! bottleneck branch for local texture and a shifted-window attention branch
//! for global context. At each of three scales the branches are fused by
//! [`LgbpFusion`]; the fused map becomes a pyramid level and (after patch
//! merging) the input to the next attention stage, while the convolutional
//! branch consumes its own previous output.

use std::rc::Rc;

use autodiff::{Arr, Var};
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqbank::FilterBankParams;
use crate::fusion::LgbpFusion;
use crate::nn::{
    init_trunc_normal, multi_head_attention, AttnP, Binder, ConvP, LinearP, NormP, ParamId,
    ParamStore,
};

/// Geometry and width configuration of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square input side; must be divisible by 16 and yield window-divisible
    /// stage sides.
    pub input_size: usize,
    /// Channel width at scale 0; doubles per scale.
    pub base_channels: usize,
    /// Attention layers per stage.
    pub stage_depths: [usize; 3],
    /// Attention heads per stage.
    pub stage_heads: [usize; 3],
    /// Window side of the shifted-window attention.
    pub window: usize,
    /// Bottleneck blocks per convolutional stage.
    pub conv_blocks: [usize; 3],
    /// Frequency bands per fusion site.
    pub fusion_bands: usize,
    /// Attention heads inside each fusion site.
    pub fusion_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::default_224()
    }
}

impl EncoderConfig {
    /// Full-size geometry: 224 input, 96 base channels, depths 2/2/6,
    /// heads 3/6/12, window 7.
    pub fn default_224() -> Self {
        EncoderConfig {
            input_size: 224,
            base_channels: 96,
            stage_depths: [2, 2, 6],
            stage_heads: [3, 6, 12],
            window: 7,
            conv_blocks: [3, 4, 6],
            fusion_bands: 4,
            fusion_heads: 4,
        }
    }

    /// Desk-scale geometry: 112 input, 32 base channels. Head counts divide
    /// the narrower widths; everything else matches the full model.
    pub fn toy_112() -> Self {
        EncoderConfig {
            input_size: 112,
            base_channels: 32,
            stage_depths: [2, 2, 6],
            stage_heads: [2, 4, 8],
            window: 7,
            conv_blocks: [3, 4, 6],
            fusion_bands: 4,
            fusion_heads: 4,
        }
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        (self.input_size / 4) >> stage
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base channels {} must be positive and even",
                self.base_channels
            )));
        }
        for stage in 0..3 {
            let side = self.stage_side(stage);
            if side == 0 || side % self.window != 0 {
                return Err(Error::Config(format!(
                    "stage {stage} side {side} (input {} / {}) must be divisible by window {}",
                    self.input_size,
                    4 << stage,
                    self.window
                )));
            }
            let c = self.stage_channels(stage);
            if c % self.stage_heads[stage] != 0 {
                return Err(Error::Config(format!(
                    "stage {stage} channels {c} not divisible by {} heads",
                    self.stage_heads[stage]
                )));
            }
            if c % self.fusion_heads != 0 {
                return Err(Error::Config(format!(
                    "stage {stage} channels {c} not divisible by {} fusion heads",
                    self.fusion_heads
                )));
            }
            if self.stage_depths[stage] == 0 {
                return Err(Error::Config(format!("stage {stage} has zero depth")));
            }
        }
        if self.fusion_bands == 0 {
            return Err(Error::Config("fusion needs at least one band".into()));
        }
        Ok(())
    }
}

/// The three fused pyramid levels: sides halve and channels double per level.
pub struct FeaturePyramid {
    pub p0: Var,
    pub p1: Var,
    pub p2: Var,
}

// ---- stem ----

/// Convolutional stem shared by both branches: two stride-2 conv/norm/GELU
/// stages reducing the input to 1/4 resolution.
pub struct Stem {
    conv1: ConvP,
    norm1: NormP,
    conv2: ConvP,
    norm2: NormP,
    input_size: usize,
    out_channels: usize,
}

impl Stem {
    pub fn init(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Self {
        let c0 = cfg.base_channels;
        let mid = c0 / 2;
        Stem {
            conv1: ConvP::init(ps, rng, "stem.conv1", 3, 3, mid, 2, 1),
            norm1: NormP::init(ps, "stem.norm1", mid),
            conv2: ConvP::init(ps, rng, "stem.conv2", 3, mid, c0, 2, 1),
            norm2: NormP::init(ps, "stem.norm2", c0),
            input_size: cfg.input_size,
            out_channels: c0,
        }
    }

    /// `[s, s, 3] -> [s/4, s/4, c0]`; the identical output feeds both branches.
    pub fn forward(&self, b: &Binder, image: &Var) -> Result<Var> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Argument(format!(
                "stem expects [h, w, 3], got {s:?}"
            )));
        }
        if s[0] != self.input_size || s[1] != self.input_size {
            return Err(Error::Config(format!(
                "input {}x{} does not match configured size {}; the side must be \
                 a multiple of 16 with window-divisible stage sides",
                s[0], s[1], self.input_size
            )));
        }
        let x = self.norm1.apply(b, &self.conv1.apply(b, image)).gelu();
        let x = self.norm2.apply(b, &self.conv2.apply(b, &x)).gelu();
        debug_assert_eq!(x.shape(), &[s[0] / 4, s[1] / 4, self.out_channels]);
        Ok(x)
    }
}

// ---- convolutional branch ----

struct Bottleneck {
    reduce: ConvP,
    norm1: NormP,
    conv: ConvP,
    norm2: NormP,
    expand: ConvP,
    norm3: NormP,
    skip: Option<(ConvP, NormP)>,
}

impl Bottleneck {
    fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let mid = (cout / 4).max(1);
        let skip = if cin != cout || stride != 1 {
            Some((
                ConvP::init(ps, rng, &format!("{name}.skip"), 1, cin, cout, stride, 0),
                NormP::init(ps, &format!("{name}.skipnorm"), cout),
            ))
        } else {
            None
        };
        Bottleneck {
            reduce: ConvP::init(ps, rng, &format!("{name}.reduce"), 1, cin, mid, 1, 0),
            norm1: NormP::init(ps, &format!("{name}.norm1"), mid),
            conv: ConvP::init(ps, rng, &format!("{name}.conv"), 3, mid, mid, stride, 1),
            norm2: NormP::init(ps, &format!("{name}.norm2"), mid),
            expand: ConvP::init(ps, rng, &format!("{name}.expand"), 1, mid, cout, 1, 0),
            norm3: NormP::init(ps, &format!("{name}.norm3"), cout),
            skip,
        }
    }

    fn forward(&self, b: &Binder, x: &Var) -> Var {
        let h = self.norm1.apply(b, &self.reduce.apply(b, x)).relu();
        let h = self.norm2.apply(b, &self.conv.apply(b, &h)).relu();
        let h = self.norm3.apply(b, &self.expand.apply(b, &h));
        let skip = match &self.skip {
            Some((conv, norm)) => norm.apply(b, &conv.apply(b, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

/// One level of the convolutional branch plus its channel-alignment 1x1.
pub struct ConvStage {
    blocks: Vec<Bottleneck>,
    align: ConvP,
}

impl ConvStage {
    fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        stage: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let cin = if stage == 0 {
            cfg.base_channels
        } else {
            cfg.stage_channels(stage - 1)
        };
        let cout = cfg.stage_channels(stage);
        let stride = if stage == 0 { 1 } else { 2 };
        let mut blocks = Vec::new();
        for i in 0..cfg.conv_blocks[stage] {
            let (bi, bo, st) = if i == 0 {
                (cin, cout, stride)
            } else {
                (cout, cout, 1)
            };
            blocks.push(Bottleneck::init(
                ps,
                rng,
                &format!("conv{stage}.block{i}"),
                bi,
                bo,
                st,
            ));
        }
        let align = ConvP::init(ps, rng, &format!("conv{stage}.align"), 1, cout, cout, 1, 0);
        ConvStage { blocks, align }
    }

    /// Returns `(stage_output, channel_aligned_output)`: the former continues
    /// the branch, the latter meets the attention branch in the fusion site.
    pub fn forward(&self, b: &Binder, x: &Var) -> (Var, Var) {
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(b, &h);
        }
        let aligned = self.align.apply(b, &h);
        (h, aligned)
    }
}

// ---- attention branch ----

/// Region labels of the shifted-window partition; tokens sharing a label may
/// attend to each other.
fn shift_region_labels(side: usize, window: usize, shift: usize) -> Vec<usize> {
    let bounds = [0, side - window, side - shift, side];
    let region_of = |v: usize| -> usize {
        if v < bounds[1] {
            0
        } else if v < bounds[2] {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; side * side];
    for y in 0..side {
        for x in 0..side {
            labels[y * side + x] = region_of(y) * 3 + region_of(x);
        }
    }
    labels
}

/// Additive attention mask `[n_windows * heads, w^2, w^2]` for a shifted
/// layer: 0 within a region, a large negative elsewhere.
fn shifted_window_mask(side: usize, window: usize, shift: usize, heads: usize) -> Arr {
    let labels = shift_region_labels(side, window, shift);
    let nw_axis = side / window;
    let n = window * window;
    let nw = nw_axis * nw_axis;
    let mut mask = Arr::zeros(IxDyn(&[nw * heads, n, n]));
    // labels of the rolled feature map, then windowed
    let rolled = |y: usize, x: usize| -> usize {
        let sy = (y + shift) % side;
        let sx = (x + shift) % side;
        labels[sy * side + sx]
    };
    for wy in 0..nw_axis {
        for wx in 0..nw_axis {
            let wi = wy * nw_axis + wx;
            for a in 0..n {
                let (ay, ax) = (wy * window + a / window, wx * window + a % window);
                for bt in 0..n {
                    let (by, bx) = (wy * window + bt / window, wx * window + bt % window);
                    if rolled(ay, ax) != rolled(by, bx) {
                        for h in 0..heads {
                            mask[[wi * heads + h, a, bt]] = -1e9;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Partition `[s, s, c]` into `[n_windows, w^2, c]`.
fn window_partition(x: &Var, window: usize) -> Var {
    let s = x.shape();
    let (side, c) = (s[0], s[2]);
    let nw = side / window;
    x.reshape(&[nw, window, nw, window, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[nw * nw, window * window, c])
}

fn window_reverse(x: &Var, side: usize, window: usize) -> Var {
    let c = x.shape()[2];
    let nw = side / window;
    x.reshape(&[nw, nw, window, window, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[side, side, c])
}

struct SwinBlock {
    norm1: NormP,
    attn: AttnP,
    bias_table: ParamId,
    norm2: NormP,
    mlp_in: LinearP,
    mlp_out: LinearP,
    shift: usize,
    mask: Option<Rc<Arr>>,
    bias_idx: Rc<Vec<usize>>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        side: usize,
        channels: usize,
        heads: usize,
        window: usize,
        shift: usize,
        bias_idx: Rc<Vec<usize>>,
    ) -> Self {
        let span = 2 * window - 1;
        let bias_table = ps.add(
            format!("{name}.bias_table"),
            init_trunc_normal(rng, &[span * span, heads], 0.02),
        );
        let mask = if shift > 0 {
            Some(Rc::new(shifted_window_mask(side, window, shift, heads)))
        } else {
            None
        };
        SwinBlock {
            norm1: NormP::init(ps, &format!("{name}.norm1"), channels),
            attn: AttnP::init(ps, rng, &format!("{name}.attn"), channels, heads),
            bias_table,
            norm2: NormP::init(ps, &format!("{name}.norm2"), channels),
            mlp_in: LinearP::init(ps, rng, &format!("{name}.mlp_in"), channels, 4 * channels),
            mlp_out: LinearP::init(ps, rng, &format!("{name}.mlp_out"), 4 * channels, channels),
            shift,
            mask,
            bias_idx,
        }
    }

    fn forward(&self, b: &Binder, x: &Var, window: usize) -> Var {
        let side = x.shape()[0];
        let n = window * window;
        let heads = self.attn.heads;

        let h = self.norm1.apply(b, x);
        let h = if self.shift > 0 {
            h.roll2d(-(self.shift as isize), -(self.shift as isize))
        } else {
            h
        };
        let windows = window_partition(&h, window);
        let bias = b
            .var(self.bias_table)
            .gather_rows(Rc::clone(&self.bias_idx))
            .reshape(&[n, n, heads])
            .permute(&[2, 0, 1]);
        let (attn_out, _) = multi_head_attention(
            b,
            &windows,
            &windows,
            &self.attn,
            Some(&bias),
            self.mask.as_deref(),
        );
        let merged = window_reverse(&attn_out, side, window);
        let merged = if self.shift > 0 {
            merged.roll2d(self.shift as isize, self.shift as isize)
        } else {
            merged
        };
        let x = x.add(&merged);

        let m = self.norm2.apply(b, &x);
        let m = self.mlp_out.apply(b, &self.mlp_in.apply(b, &m).gelu());
        x.add(&m)
    }
}

/// One attention stage: alternating plain and shifted window layers.
pub struct SwinStage {
    blocks: Vec<SwinBlock>,
    window: usize,
    side: usize,
    channels: usize,
}

impl SwinStage {
    fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        stage: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let side = cfg.stage_side(stage);
        let channels = cfg.stage_channels(stage);
        let heads = cfg.stage_heads[stage];
        let window = cfg.window;
        // A single-window stage cannot shift.
        let base_shift = if side == window { 0 } else { window / 2 };
        let bias_idx = Rc::new(crate::nn::relative_position_index(window));
        let blocks = (0..cfg.stage_depths[stage])
            .map(|i| {
                let shift = if i % 2 == 1 { base_shift } else { 0 };
                SwinBlock::init(
                    ps,
                    rng,
                    &format!("swin{stage}.block{i}"),
                    side,
                    channels,
                    heads,
                    window,
                    shift,
                    Rc::clone(&bias_idx),
                )
            })
            .collect();
        SwinStage {
            blocks,
            window,
            side,
            channels,
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s != [self.side, self.side, self.channels] {
            return Err(Error::Config(format!(
                "attention stage expects [{0}, {0}, {1}], got {s:?}; the side must be \
                 divisible by window {2}",
                self.side, self.channels, self.window
            )));
        }
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(b, &h, self.window);
        }
        Ok(h)
    }
}

// ---- patch merging ----

/// 2x2 neighborhood concatenation (4c) followed by a linear reduction to 2c.
pub struct PatchMerge {
    norm: NormP,
    reduce: LinearP,
}

impl PatchMerge {
    fn init(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        PatchMerge {
            norm: NormP::init(ps, &format!("{name}.norm"), 4 * c),
            reduce: LinearP::init(ps, rng, &format!("{name}.reduce"), 4 * c, 2 * c),
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::Argument(format!(
                "patch merge expects square [s, s, c], got {s:?}"
            )));
        }
        let (side, c) = (s[0], s[2]);
        if side % 2 != 0 {
            return Err(Error::Argument(format!(
                "patch merge needs an even side, got {side}"
            )));
        }
        let grouped = x
            .reshape(&[side / 2, 2, side / 2, 2, c])
            .permute(&[0, 2, 1, 3, 4])
            .reshape(&[side / 2, side / 2, 4 * c]);
        Ok(self.reduce.apply(b, &self.norm.apply(b, &grouped)))
    }
}

// ---- the full encoder ----

pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub stem: Stem,
    pub conv_stages: Vec<ConvStage>,
    pub swin_stages: Vec<SwinStage>,
    pub merges: Vec<PatchMerge>,
    pub fusions: Vec<LgbpFusion>,
}

impl DualEncoder {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        bank: &FilterBankParams,
    ) -> Result<Self> {
        cfg.validate()?;
        if bank.bands() != cfg.fusion_bands {
            return Err(Error::Config(format!(
                "bank has {} bands, config asks for {}",
                bank.bands(),
                cfg.fusion_bands
            )));
        }
        let stem = Stem::init(ps, rng, cfg);
        let conv_stages = (0..3).map(|i| ConvStage::init(ps, rng, i, cfg)).collect();
        let swin_stages = (0..3).map(|i| SwinStage::init(ps, rng, i, cfg)).collect();
        let merges = (0..2)
            .map(|i| PatchMerge::init(ps, rng, &format!("merge{i}"), cfg.stage_channels(i)))
            .collect();
        let fusions = (0..3)
            .map(|i| {
                let side = cfg.stage_side(i);
                LgbpFusion::init(
                    ps,
                    rng,
                    &format!("fusion{i}"),
                    side,
                    side,
                    cfg.stage_channels(i),
                    cfg.fusion_heads,
                    bank,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DualEncoder {
            cfg: cfg.clone(),
            stem,
            conv_stages,
            swin_stages,
            merges,
            fusions,
        })
    }

    pub fn forward(&self, b: &Binder, image: &Var) -> Result<FeaturePyramid> {
        let stem_out = self.stem.forward(b, image)?;
        let mut conv_in = stem_out.clone();
        let mut attn_in = stem_out;
        let mut levels = Vec::with_capacity(3);
        for stage in 0..3 {
            let (conv_out, aligned) = self.conv_stages[stage].forward(b, &conv_in);
            let attn_out = self.swin_stages[stage].forward(b, &attn_in)?;
            let fused = self.fusions[stage].forward(b, &aligned, &attn_out)?;
            if stage < 2 {
                attn_in = self.merges[stage].forward(b, &fused)?;
            }
            conv_in = conv_out;
            levels.push(fused);
        }
        let mut it = levels.into_iter();
        Ok(FeaturePyramid {
            p0: it.next().unwrap(),
            p1: it.next().unwrap(),
            p2: it.next().unwrap(),
        })
    }
}
