//! Linear layers, two-layer perceptrons, and parameter plumbing.
//!
//! Parameter structs own plain tensors. To run a forward pass they are
//! *bound* into a [`Graph`] through a [`Binder`], which inserts either
//! differentiable leaves (training) or constants (frozen / inference) and
//! records the leaf ids in visit order. The same visit order is used for
//! serialization and optimizer updates, so gradients, checkpoints, and
//! update loops all line up without any name lookups.

use crate::autodiff::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Walk every parameter tensor in a fixed, documented order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Flatten to `(name, tensor)` pairs in visit order.
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }
}

/// All parameter entries of `p` concatenated in visit order.
pub fn flatten_params<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut flat = Vec::new();
    p.visit("", &mut |_, t| flat.extend_from_slice(t.data()));
    flat
}

/// Write a flat vector (in visit order) back into `p`'s tensors.
pub fn assign_params<P: Params + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}

/// Inserts parameters into a graph, remembering leaf ids in visit order.
pub struct Binder<'g> {
    pub graph: &'g mut Graph,
    trainable: bool,
    leaves: Vec<NodeId>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g mut Graph, trainable: bool) -> Self {
        Binder {
            graph,
            trainable,
            leaves: Vec::new(),
        }
    }

    pub fn bind(&mut self, t: &Tensor) -> NodeId {
        if self.trainable {
            let id = self.graph.leaf(t.clone());
            self.leaves.push(id);
            id
        } else {
            self.graph.constant(t.clone())
        }
    }

    /// Leaf ids in bind order (empty when binding frozen parameters).
    pub fn into_leaves(self) -> Vec<NodeId> {
        self.leaves
    }
}

/// Fully connected layer, `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct LinearIds {
    pub w: NodeId,
    pub b: NodeId,
}

impl Linear {
    /// Kaiming-uniform weights for ReLU fan-in, zero bias.
    pub fn kaiming(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / c_in as f64).sqrt();
        let mut w = Tensor::zeros(&[c_in, c_out]);
        for v in w.data_mut() {
            *v = rng.uniform_in(-bound, bound);
        }
        Linear {
            w,
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[c_in, c_out]),
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn identity(c: usize) -> Self {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        Linear {
            w,
            b: Tensor::zeros(&[c]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let mut y = x.matmul_last(&self.w).expect("linear shapes");
        let n = self.b.len();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.b.data()[i % n];
        }
        y
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> LinearIds {
        LinearIds {
            w: b.bind(&self.w),
            b: b.bind(&self.b),
        }
    }
}

impl LinearIds {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.linear(x, self.w, Some(self.b))
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct Mlp2Ids {
    pub l1: LinearIds,
    pub l2: LinearIds,
}

impl Mlp2 {
    pub fn kaiming(c_in: usize, hidden: usize, c_out: usize, rng: &mut Rng) -> Self {
        Mlp2 {
            l1: Linear::kaiming(c_in, hidden, rng),
            l2: Linear::kaiming(hidden, c_out, rng),
        }
    }

    pub fn zeros(c_in: usize, hidden: usize, c_out: usize) -> Self {
        Mlp2 {
            l1: Linear::zeros(c_in, hidden),
            l2: Linear::zeros(hidden, c_out),
        }
    }

    /// Layers that pass positive inputs through unchanged; handy in tests.
    pub fn identity(c: usize) -> Self {
        Mlp2 {
            l1: Linear::identity(c),
            l2: Linear::identity(c),
        }
    }

    /// Zero layers whose output is the constant `value` on every channel.
    pub fn constant(c_in: usize, hidden: usize, c_out: usize, value: f64) -> Self {
        let mut mlp = Mlp2::zeros(c_in, hidden, c_out);
        for v in mlp.l2.b.data_mut() {
            *v = value;
        }
        mlp
    }

    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let h = self.l1.forward_plain(x).map(|v| v.max(0.0));
        self.l2.forward_plain(&h)
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Mlp2Ids {
        Mlp2Ids {
            l1: self.l1.bind(b),
            l2: self.l2.bind(b),
        }
    }
}

impl Mlp2Ids {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.l1.apply(g, x);
        let h = g.relu(h);
        self.l2.apply(g, h)
    }
}

impl Params for Mlp2 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
    }
}

/// AdamW: Adam moments with decoupled weight decay.
///
/// Per-tensor state is addressed by the caller's visit index, so one
/// optimizer instance stays aligned with a fixed parameter walk order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Start a new optimizer step (advances bias correction).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter tensor; `idx` must follow the same walk order on
    /// every step.
    pub fn update_one(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) {
        assert!(self.step > 0, "call begin_step before update_one");
        assert_eq!(param.shape(), grad.shape(), "param/grad shape");
        while self.m.len() <= idx {
            self.m.push(Tensor::zeros(&[0]));
            self.v.push(Tensor::zeros(&[0]));
        }
        if self.m[idx].is_empty() {
            self.m[idx] = Tensor::zeros(param.shape());
            self.v[idx] = Tensor::zeros(param.shape());
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m = self.m[idx].data_mut();
        let v = self.v[idx].data_mut();
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}
