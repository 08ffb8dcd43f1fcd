//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to tracked [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the tape in reverse and
//! accumulates gradients for every tracked node, including leaves created
//! with [`Tape::leaf`]. An inference tape ([`Tape::inference`]) runs the same
//! operations without recording, so intermediates are freed as soon as the
//! caller drops them.
//!
//! Tensors are `f64` and kept in standard (row-major, contiguous) layout by
//! every operation. Scalars are zero-dimensional arrays.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

mod check;
mod ops;

pub use check::{finite_diff, grads_close, max_abs_diff, rel_err};
pub use ops::seq_sum;

/// Dynamic-dimension tensor used throughout the tape.
pub type Arr = ArrayD<f64>;

/// Callback that receives `(parent_id, gradient_contribution)` pairs.
pub type GradSink<'a> = dyn FnMut(usize, Arr) + 'a;

/// Backward function of one recorded node.
pub type BackFn = Box<dyn Fn(&Arr, &mut GradSink)>;

const UNTRACKED: usize = usize::MAX;

struct TapeInner {
    /// `None` marks a leaf (no parents).
    nodes: RefCell<Vec<Option<BackFn>>>,
    enabled: bool,
}

/// Shared recording tape. Cloning is cheap; clones refer to the same tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Tape {
    /// A recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                enabled: true,
            }),
        }
    }

    /// A non-recording tape: operations compute values only.
    pub fn inference() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                enabled: false,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.enabled
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked leaf variable (parameter or input that needs a gradient).
    pub fn leaf(&self, value: Arr) -> Var {
        if !self.inner.enabled {
            return self.constant(value);
        }
        let id = {
            let mut nodes = self.inner.nodes.borrow_mut();
            nodes.push(None);
            nodes.len() - 1
        };
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
        }
    }

    /// An untracked constant; never receives a gradient.
    pub fn constant(&self, value: Arr) -> Var {
        Var {
            tape: self.clone(),
            id: UNTRACKED,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Record a custom operation. `back` receives the upstream gradient and a
    /// sink for `(parent_id, contribution)` pairs; parent ids come from
    /// [`Var::id`]. Untracked results are returned when nothing is recording.
    pub fn custom(&self, value: Arr, any_tracked_parent: bool, back: BackFn) -> Var {
        if !self.inner.enabled || !any_tracked_parent {
            return self.constant(value);
        }
        let id = {
            let mut nodes = self.inner.nodes.borrow_mut();
            nodes.push(Some(back));
            nodes.len() - 1
        };
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
        }
    }

    /// Run reverse accumulation from a scalar variable.
    ///
    /// Panics if `loss` is untracked or not zero-dimensional.
    pub fn backward(&self, loss: &Var) -> Grads {
        assert!(loss.is_tracked(), "backward from an untracked variable");
        assert_eq!(
            loss.value.ndim(),
            0,
            "backward expects a scalar, got shape {:?}",
            loss.shape()
        );
        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Arr::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(back) = nodes[id].as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads[id].take() else {
                continue; // not on any path to the loss
            };
            back(&g, &mut |pid, contrib| {
                debug_assert!(pid < id, "tape order violated: {} -> {}", pid, id);
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Grads { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable id.
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Arr> {
        if var.is_tracked() {
            self.grads.get(var.id).and_then(|g| g.as_ref())
        } else {
            None
        }
    }

    pub fn take(&mut self, var: &Var) -> Option<Arr> {
        if var.is_tracked() {
            self.grads.get_mut(var.id).and_then(|g| g.take())
        } else {
            None
        }
    }

    /// Gradient of a leaf, or zeros of its shape if it never received one.
    pub fn get_or_zeros(&self, var: &Var) -> Arr {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Arr::zeros(var.value.raw_dim()))
    }
}

/// A tensor tracked (or not) by a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Rc<Arr>,
}

impl Var {
    pub fn value(&self) -> &Arr {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.value.ndim()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id != UNTRACKED
    }

    /// Node id used by custom backward closures.
    pub fn id(&self) -> usize {
        self.id
    }

    /// Extract a zero-dimensional value.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.value.ndim(), 0, "not a scalar: {:?}", self.shape());
        *self.value.first().unwrap()
    }

    pub(crate) fn rc_value(&self) -> Rc<Arr> {
        Rc::clone(&self.value)
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
