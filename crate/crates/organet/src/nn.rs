//! Parameter storage, layer building blocks, and attention shared by the
//! encoder, fusion, and decoder modules.

use std::cell::RefCell;
use std::rc::Rc;

use autodiff::{Arr, Grads, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order. Registration order is
/// deterministic, which keeps checkpoints and seeded initialization stable.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Arr] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arr] {
        &mut self.values
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Binds parameters to leaves of one tape, one leaf per parameter, so that
/// gradients accumulate across every use in a forward pass.
pub struct Binder<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'s> Binder<'s> {
    pub fn new(tape: Tape, store: &'s ParamStore) -> Self {
        let bound = RefCell::new(vec![None; store.len()]);
        Binder { tape, store, bound }
    }

    /// Leaf variable for a parameter (cached per tape).
    pub fn var(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = &bound[id.0] {
            return v.clone();
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        bound[id.0] = Some(v.clone());
        v
    }

    pub fn constant(&self, value: Arr) -> Var {
        self.tape.constant(value)
    }

    /// Gradient per parameter, `None` for parameters never touched or with no
    /// path to the loss.
    pub fn collect_grads(&self, grads: &mut Grads) -> Vec<Option<Arr>> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .map(|slot| slot.as_ref().and_then(|v| grads.take(v)))
            .collect()
    }
}

// ---- initialization ----

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> Arr {
    Arr::from_elem(IxDyn(shape), v)
}

/// Xavier/Glorot uniform for linear projections.
pub fn init_linear_weight(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Arr {
    let limit = (6.0 / (cin + cout) as f64).sqrt();
    Arr::from_shape_fn(IxDyn(&[cin, cout]), |_| rng.random_range(-limit..limit))
}

/// Kaiming normal for convolution kernels.
pub fn init_conv_weight(rng: &mut ChaCha8Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Arr {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Arr::from_shape_fn(IxDyn(&[kh, kw, cin, cout]), |_| dist.sample(rng))
}

/// Truncated normal (|v| <= 2 std) used for bias tables.
pub fn init_trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

// ---- layer parameter bundles ----

/// Dense projection `[cin] -> [cout]` with bias.
#[derive(Clone, Copy)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearP {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init_linear_weight(rng, cin, cout));
        let b = ps.add(format!("{name}.b"), zeros(&[cout]));
        LinearP { w, b }
    }

    pub fn apply(&self, b: &Binder, x: &Var) -> Var {
        x.linear(&b.var(self.w), Some(&b.var(self.b)))
    }
}

/// Layer-norm affine parameters over the trailing channel axis.
#[derive(Clone, Copy)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl NormP {
    pub fn init(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), full(&[c], 1.0));
        let beta = ps.add(format!("{name}.beta"), zeros(&[c]));
        NormP { gamma, beta }
    }

    pub fn apply(&self, b: &Binder, x: &Var) -> Var {
        x.layer_norm(&b.var(self.gamma), &b.var(self.beta), NORM_EPS)
    }
}

/// 2-d convolution parameters.
#[derive(Clone, Copy)]
pub struct ConvP {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvP {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init_conv_weight(rng, k, k, cin, cout));
        let b = ps.add(format!("{name}.b"), zeros(&[cout]));
        ConvP { w, b, stride, pad }
    }

    pub fn apply(&self, b: &Binder, x: &Var) -> Var {
        x.conv2d(&b.var(self.w), Some(&b.var(self.b)), self.stride, self.pad)
    }
}

// ---- multi-head attention ----

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy)]
pub struct AttnP {
    pub wq: LinearP,
    pub wk: LinearP,
    pub wv: LinearP,
    pub wo: LinearP,
    pub heads: usize,
}

impl AttnP {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        heads: usize,
    ) -> Self {
        assert!(c % heads == 0, "channels {c} not divisible by heads {heads}");
        AttnP {
            wq: LinearP::init(ps, rng, &format!("{name}.wq"), c, c),
            wk: LinearP::init(ps, rng, &format!("{name}.wk"), c, c),
            wv: LinearP::init(ps, rng, &format!("{name}.wv"), c, c),
            wo: LinearP::init(ps, rng, &format!("{name}.wo"), c, c),
            heads,
        }
    }
}

/// Split `[batch, tokens, c]` into `[batch*heads, tokens, c/heads]`.
fn split_heads(x: &Var, heads: usize) -> Var {
    let s = x.shape();
    let (bt, n, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    x.reshape(&[bt, n, heads, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[bt * heads, n, d])
}

fn merge_heads(x: &Var, heads: usize) -> Var {
    let s = x.shape();
    let (bh, n, d) = (s[0], s[1], s[2]);
    let bt = bh / heads;
    x.reshape(&[bt, heads, n, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[bt, n, heads * d])
}

/// Scaled dot-product attention over `[batch, tokens, c]` with queries from
/// `q_in` and keys/values from `kv_in`. `bias` is a learnable `[heads, n, n]`
/// term tiled over the batch; `mask` is an additive constant of shape
/// `[batch*heads, n, n]`. Returns the output and the attention probabilities
/// `[batch*heads, n, n]`.
pub fn multi_head_attention(
    b: &Binder,
    q_in: &Var,
    kv_in: &Var,
    p: &AttnP,
    bias: Option<&Var>,
    mask: Option<&Arr>,
) -> (Var, Var) {
    let s = q_in.shape().to_vec();
    assert_eq!(s.len(), 3, "attention expects [batch, tokens, c]");
    let (batch, _n, c) = (s[0], s[1], s[2]);
    assert_eq!(kv_in.shape(), &s[..], "attention q/kv shape mismatch");
    let heads = p.heads;
    let d = c / heads;

    let q = split_heads(&p.wq.apply(b, q_in), heads);
    let k = split_heads(&p.wk.apply(b, kv_in), heads);
    let v = split_heads(&p.wv.apply(b, kv_in), heads);

    let mut scores = q.bmm_nt(&k).mul_scalar(1.0 / (d as f64).sqrt());
    if let Some(bias) = bias {
        let tiled = if batch == 1 {
            bias.clone()
        } else {
            bias.tile_block0(batch)
        };
        scores = scores.add(&tiled);
    }
    if let Some(mask) = mask {
        scores = scores.add_const(mask);
    }
    let probs = scores.softmax_last();
    let out = merge_heads(&probs.bmm(&v), heads);
    (p.wo.apply(b, &out), probs)
}

/// Tokens `[h, w, c]` flattened to a single attention batch `[1, h*w, c]`.
pub fn to_tokens(x: &Var) -> Var {
    let s = x.shape();
    x.reshape(&[1, s[0] * s[1], s[2]])
}

pub fn from_tokens(x: &Var, h: usize, w: usize) -> Var {
    let c = x.shape()[2];
    x.reshape(&[h, w, c])
}

/// Relative-position index map for a `side x side` token grid: for each
/// ordered token pair, the flattened offset into a `(2*side-1)^2` bias table.
pub fn relative_position_index(side: usize) -> Vec<usize> {
    let n = side * side;
    let span = 2 * side - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        let (ya, xa) = (a / side, a % side);
        for b in 0..n {
            let (yb, xb) = (b / side, b % side);
            let dy = ya as isize - yb as isize + side as isize - 1;
            let dx = xa as isize - xb as isize + side as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// Seeded RNG used for every parameter initialization path.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Leaf wrapper for an input tensor that never needs gradients.
pub fn input_var(tape: &Tape, value: Arr) -> Var {
    tape.constant(value)
}

/// Shared gradient plumbing: either accumulate `delta` into `acc` or move it in.
pub fn accumulate(acc: &mut Option<Arr>, delta: Arr) {
    match acc {
        Some(a) => *a += &delta,
        None => *acc = Some(delta),
    }
}

/// Scalar mean of a slice of scalar variables.
pub fn mean_of_scalars(vars: &[Var]) -> Var {
    assert!(!vars.is_empty());
    let mut acc = vars[0].clone();
    for v in &vars[1..] {
        acc = acc.add(v);
    }
    acc.mul_scalar(1.0 / vars.len() as f64)
}

/// Rc-wrapped index vector helper for gather ops.
pub fn shared_indices(v: Vec<usize>) -> Rc<Vec<usize>> {
    Rc::new(v)
}
