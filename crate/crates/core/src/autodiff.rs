//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A `Graph` records every operation during a forward pass; `backward`
//! replays the tape in reverse, handing each node's cotangent to a stored
//! closure that maps it onto the node's parents. Node ids are insertion
//! ordered, so reverse insertion order is already a valid reverse topological
//! order and no explicit sort is needed.
//!
//! Gradients only flow where they are needed: a node participates in the
//! backward sweep iff one of its ancestors is a differentiable leaf, so
//! frozen parameters and plain data ride along for free.

use std::rc::Rc;

use crate::fft::transform_axis;
use crate::tensor::Tensor;

pub type NodeId = usize;

pub struct BackwardArgs<'a> {
    /// Cotangent of this node's output.
    pub grad: &'a Tensor,
    /// Values of the node's parents, in parent order.
    pub inputs: &'a [&'a Tensor],
    /// The node's own forward value.
    pub output: &'a Tensor,
    /// Which parents actually need a gradient; backward impls may return an
    /// empty placeholder tensor for slots marked `false`.
    pub needed: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    needs_grad: bool,
    back: Option<BackwardFn>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        back: Option<BackwardFn>,
    ) -> NodeId {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            back,
        });
        self.nodes.len() - 1
    }

    /// Insert a differentiable leaf (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: true,
            back: None,
        });
        self.nodes.len() - 1
    }

    /// Insert a constant (data, frozen parameters). No gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: false,
            back: None,
        });
        self.nodes.len() - 1
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.add(&self.nodes[b].value).expect("add");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|args| vec![args.grad.clone(), args.grad.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.sub(&self.nodes[b].value).expect("sub");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|args| {
                vec![args.grad.clone(), args.grad.scale(-1.0)]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a]
            .value
            .zip_map(&self.nodes[b].value, |x, y| x * y)
            .expect("mul");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|args| {
                let ga = args.grad.zip_map(args.inputs[1], |g, y| g * y).unwrap();
                let gb = args.grad.zip_map(args.inputs[0], |g, x| g * x).unwrap();
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.scale(c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| vec![args.grad.scale(c)])),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|v| v.max(0.0));
        self.push(
            value,
            vec![a],
            Some(Box::new(|args| {
                vec![args
                    .grad
                    .zip_map(args.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap()]
            })),
        )
    }

    // ---- linear algebra ----

    /// `x @ w + b` applied to the last axis of `x`; `w: [c_in, c_out]`,
    /// `b: [c_out]` optional.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let mut value = self.nodes[x]
            .value
            .matmul_last(&self.nodes[w].value)
            .expect("linear");
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            let bv = &self.nodes[bias].value;
            assert_eq!(bv.shape(), &[value.last_dim()], "bias shape");
            let n = value.last_dim();
            for (i, v) in value.data_mut().iter_mut().enumerate() {
                *v += bv.data()[i % n];
            }
            parents.push(bias);
        }
        let has_bias = b.is_some();
        self.push(
            value,
            parents,
            Some(Box::new(move |args| {
                let x = args.inputs[0];
                let w = args.inputs[1];
                let g = args.grad;
                let c_in = w.shape()[0];
                let c_out = w.shape()[1];
                let rows = g.len() / c_out;
                // dL/dx = g @ w^T
                let gx = if args.needed[0] {
                    let mut out = vec![0.0; rows * c_in];
                    for r in 0..rows {
                        let grow = &g.data()[r * c_out..(r + 1) * c_out];
                        let orow = &mut out[r * c_in..(r + 1) * c_in];
                        for (ci, ov) in orow.iter_mut().enumerate() {
                            let wrow = &w.data()[ci * c_out..(ci + 1) * c_out];
                            let mut acc = 0.0;
                            for (gv, wv) in grow.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            *ov = acc;
                        }
                    }
                    Tensor::from_vec(x.shape(), out)
                } else {
                    Tensor::zeros(&[0])
                };
                // dL/dw = x^T @ g
                let gw = if args.needed[1] {
                    let mut out = vec![0.0; c_in * c_out];
                    for r in 0..rows {
                        let xrow = &x.data()[r * c_in..(r + 1) * c_in];
                        let grow = &g.data()[r * c_out..(r + 1) * c_out];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let orow = &mut out[ci * c_out..(ci + 1) * c_out];
                            for (ov, &gv) in orow.iter_mut().zip(grow) {
                                *ov += xv * gv;
                            }
                        }
                    }
                    Tensor::from_vec(w.shape(), out)
                } else {
                    Tensor::zeros(&[0])
                };
                let mut grads = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![0.0; c_out];
                    for r in 0..rows {
                        for (acc, &gv) in gb
                            .iter_mut()
                            .zip(&g.data()[r * c_out..(r + 1) * c_out])
                        {
                            *acc += gv;
                        }
                    }
                    grads.push(Tensor::from_vec(&[c_out], gb));
                }
                grads
            })),
        )
    }

    /// Add a vector `v: [c]` to every row of `x: [..., c]`.
    pub fn broadcast_rows_add(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let vv = &self.nodes[v].value;
        let c = xv.last_dim();
        assert_eq!(vv.shape(), &[c], "broadcast vector shape");
        let mut value = xv.clone();
        for (i, e) in value.data_mut().iter_mut().enumerate() {
            *e += vv.data()[i % c];
        }
        self.push(
            value,
            vec![x, v],
            Some(Box::new(move |args| {
                let gv = if args.needed[1] {
                    let mut acc = vec![0.0; c];
                    for (i, &g) in args.grad.data().iter().enumerate() {
                        acc[i % c] += g;
                    }
                    Tensor::from_vec(&[c], acc)
                } else {
                    Tensor::zeros(&[0])
                };
                vec![args.grad.clone(), gv]
            })),
        )
    }

    /// `a[q,k,:] - b[q,:]` for `a: [Q,K,C]`, `b: [Q,C]`.
    pub fn sub_expand(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.rank(), 3);
        let (q, k, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape(), &[q, c], "sub_expand operand shapes");
        let mut value = av.clone();
        for qi in 0..q {
            let brow = &bv.data()[qi * c..(qi + 1) * c];
            for ki in 0..k {
                let off = (qi * k + ki) * c;
                for (ci, &b) in brow.iter().enumerate() {
                    value.data_mut()[off + ci] -= b;
                }
            }
        }
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |args| {
                let gb = if args.needed[1] {
                    let mut acc = vec![0.0; q * c];
                    for qi in 0..q {
                        for ki in 0..k {
                            let off = (qi * k + ki) * c;
                            for ci in 0..c {
                                acc[qi * c + ci] -= args.grad.data()[off + ci];
                            }
                        }
                    }
                    Tensor::from_vec(&[q, c], acc)
                } else {
                    Tensor::zeros(&[0])
                };
                vec![args.grad.clone(), gb]
            })),
        )
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.shape()[..av.rank() - 1], bv.shape()[..bv.rank() - 1]);
        let ca = av.last_dim();
        let cb = bv.last_dim();
        let rows = av.rows();
        let mut out_shape = av.shape().to_vec();
        *out_shape.last_mut().unwrap() = ca + cb;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let a_shape = av.shape().to_vec();
        let b_shape = bv.shape().to_vec();
        self.push(
            Tensor::from_vec(&out_shape, data),
            vec![a, b],
            Some(Box::new(move |args| {
                let ct = ca + cb;
                let mut ga = Tensor::zeros(&a_shape);
                let mut gb = Tensor::zeros(&b_shape);
                for r in 0..rows {
                    let grow = &args.grad.data()[r * ct..(r + 1) * ct];
                    ga.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                    gb.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                vec![ga, gb]
            })),
        )
    }

    // ---- gathers and reductions ----

    /// Gather rows of `values: [R, rest..]` with a flattened index table of
    /// `Q*K` entries, producing `[Q, K, rest..]`.
    pub fn gather_rows(
        &mut self,
        values: NodeId,
        indices: Rc<Vec<usize>>,
        group_size: usize,
    ) -> NodeId {
        let vv = &self.nodes[values].value;
        let rest: usize = vv.shape()[1..].iter().product();
        let r = vv.shape()[0];
        assert!(indices.iter().all(|&i| i < r), "gather index out of range");
        assert_eq!(indices.len() % group_size, 0);
        let q = indices.len() / group_size;
        let mut out_shape = vec![q, group_size];
        out_shape.extend_from_slice(&vv.shape()[1..]);
        let mut data = Vec::with_capacity(indices.len() * rest);
        for &idx in indices.iter() {
            data.extend_from_slice(&vv.data()[idx * rest..(idx + 1) * rest]);
        }
        let v_shape = vv.shape().to_vec();
        let idx = Rc::clone(&indices);
        self.push(
            Tensor::from_vec(&out_shape, data),
            vec![values],
            Some(Box::new(move |args| {
                let mut gv = Tensor::zeros(&v_shape);
                for (j, &i) in idx.iter().enumerate() {
                    let src = &args.grad.data()[j * rest..(j + 1) * rest];
                    let dst = &mut gv.data_mut()[i * rest..(i + 1) * rest];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![gv]
            })),
        )
    }

    /// Sum over axis 1 of `[Q, K, C] -> [Q, C]`.
    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.rank(), 3);
        let (q, k, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = vec![0.0; q * c];
        for qi in 0..q {
            for ki in 0..k {
                let off = (qi * k + ki) * c;
                for ci in 0..c {
                    out[qi * c + ci] += av.data()[off + ci];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[q, c], out),
            vec![a],
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(&[q, k, c]);
                for qi in 0..q {
                    let grow = &args.grad.data()[qi * c..(qi + 1) * c];
                    for ki in 0..k {
                        let off = (qi * k + ki) * c;
                        g.data_mut()[off..off + c].copy_from_slice(grow);
                    }
                }
                vec![g]
            })),
        )
    }

    /// Channel-wise max over axis 1 of `[Q, K, C] -> [Q, C]`. Ties resolve to
    /// the lowest neighbor slot.
    pub fn max_axis1(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.rank(), 3);
        let (q, k, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert!(k >= 1);
        let mut out = vec![f64::NEG_INFINITY; q * c];
        let mut arg = vec![0usize; q * c];
        for qi in 0..q {
            for ki in 0..k {
                let off = (qi * k + ki) * c;
                for ci in 0..c {
                    let v = av.data()[off + ci];
                    if v > out[qi * c + ci] {
                        out[qi * c + ci] = v;
                        arg[qi * c + ci] = ki;
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[q, c], out),
            vec![a],
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(&[q, k, c]);
                for qi in 0..q {
                    for ci in 0..c {
                        let ki = arg[qi * c + ci];
                        g.data_mut()[(qi * k + ki) * c + ci] += args.grad.data()[qi * c + ci];
                    }
                }
                vec![g]
            })),
        )
    }

    /// Softmax over axis 1 (the neighbor axis) of `[Q, K, C]`, independently
    /// per `(q, c)` pair.
    pub fn softmax_axis1(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.rank(), 3);
        let (q, k, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut value = av.clone();
        for qi in 0..q {
            for ci in 0..c {
                let mut m = f64::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(value.data()[(qi * k + ki) * c + ci]);
                }
                let mut z = 0.0;
                for ki in 0..k {
                    let idx = (qi * k + ki) * c + ci;
                    let e = (value.data()[idx] - m).exp();
                    value.data_mut()[idx] = e;
                    z += e;
                }
                for ki in 0..k {
                    value.data_mut()[(qi * k + ki) * c + ci] /= z;
                }
            }
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| {
                let y = args.output;
                let mut g = Tensor::zeros(&[q, k, c]);
                for qi in 0..q {
                    for ci in 0..c {
                        let mut dot = 0.0;
                        for ki in 0..k {
                            let idx = (qi * k + ki) * c + ci;
                            dot += args.grad.data()[idx] * y.data()[idx];
                        }
                        for ki in 0..k {
                            let idx = (qi * k + ki) * c + ci;
                            g.data_mut()[idx] =
                                y.data()[idx] * (args.grad.data()[idx] - dot);
                        }
                    }
                }
                vec![g]
            })),
        )
    }

    /// Inverse-distance interpolation: `out[n,:] = sum_l w[n][l] * coarse[idx[n][l], :]`.
    /// Indices and weights are fixed data (they come from geometry, not from
    /// differentiable values).
    pub fn weighted_gather_sum(
        &mut self,
        coarse: NodeId,
        stencil: Rc<Vec<Vec<(usize, f64)>>>,
    ) -> NodeId {
        let cv = &self.nodes[coarse].value;
        assert_eq!(cv.rank(), 2);
        let (m, c) = (cv.shape()[0], cv.shape()[1]);
        let n = stencil.len();
        let mut out = vec![0.0; n * c];
        for (ni, entries) in stencil.iter().enumerate() {
            for &(idx, w) in entries {
                debug_assert!(idx < m);
                let src = &cv.data()[idx * c..(idx + 1) * c];
                let dst = &mut out[ni * c..(ni + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let st = Rc::clone(&stencil);
        self.push(
            Tensor::from_vec(&[n, c], out),
            vec![coarse],
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(&[m, c]);
                for (ni, entries) in st.iter().enumerate() {
                    let grow = &args.grad.data()[ni * c..(ni + 1) * c];
                    for &(idx, w) in entries {
                        let dst = &mut g.data_mut()[idx * c..(idx + 1) * c];
                        for (d, s) in dst.iter_mut().zip(grow) {
                            *d += w * s;
                        }
                    }
                }
                vec![g]
            })),
        )
    }

    /// Row-wise RMS normalization over the last axis:
    /// `y[r, :] = x[r, :] / sqrt(mean(x[r, :]^2) + eps)`.
    pub fn rms_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = &self.nodes[a].value;
        let c = av.last_dim();
        let rows = av.rows();
        let mut value = av.clone();
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut value.data_mut()[r * c..(r + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_rms.push(inv);
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| {
                let y = args.output;
                let mut g = Tensor::zeros(y.shape());
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let ys = &y.data()[r * c..(r + 1) * c];
                    let gs = &args.grad.data()[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    let out = &mut g.data_mut()[r * c..(r + 1) * c];
                    for ((o, &gv), &yv) in out.iter_mut().zip(gs).zip(ys) {
                        *o = inv * (gv - yv * dot / c as f64);
                    }
                }
                vec![g]
            })),
        )
    }

    // ---- spectral ----

    /// Forward or inverse DFT along `axis`, on a complex signal held as two
    /// real tensors. Returns the transformed `(re, im)` pair as two nodes.
    pub fn fft_axis(
        &mut self,
        re: NodeId,
        im: NodeId,
        axis: usize,
        inverse: bool,
    ) -> (NodeId, NodeId) {
        let shape = self.nodes[re].value.shape().to_vec();
        assert_eq!(self.nodes[im].value.shape(), &shape[..]);
        let mut out_re = self.nodes[re].value.data().to_vec();
        let mut out_im = self.nodes[im].value.data().to_vec();
        transform_axis(&mut out_re, &mut out_im, &shape, axis, inverse);

        // The transform is linear; its backward is the (real) transpose of
        // the applied matrix, expressible as one forward transform of the
        // cotangent along the same axis. With F the unnormalized DFT matrix
        // (symmetric) and G = F^{-1} = conj(F)/L:
        //   re-output node:  d/d(re) = Re(A) g,  d/d(im) = -Im(A) g
        //   im-output node:  d/d(re) = Im(A) g,  d/d(im) =  Re(A) g
        // where A g is computed by transforming g as a real signal.
        let make_back = |is_im_output: bool| -> BackwardFn {
            let shape = shape.clone();
            Box::new(move |args: &BackwardArgs<'_>| {
                let mut h_re = args.grad.data().to_vec();
                let mut h_im = vec![0.0; h_re.len()];
                transform_axis(&mut h_re, &mut h_im, &shape, axis, false);
                if inverse {
                    // A = conj(F)/L: Re(A) h = Re(F h)/L, Im(A) h = -Im(F h)/L
                    let l = shape[axis] as f64;
                    for v in h_re.iter_mut() {
                        *v /= l;
                    }
                    for v in h_im.iter_mut() {
                        *v = -*v / l;
                    }
                }
                let (g_re, g_im) = if is_im_output {
                    (h_im.clone(), h_re.clone())
                } else {
                    (h_re.clone(), h_im.iter().map(|&v| -v).collect())
                };
                vec![
                    Tensor::from_vec(&shape, g_re),
                    Tensor::from_vec(&shape, g_im),
                ]
            })
        };

        let re_node = self.push(
            Tensor::from_vec(&shape, out_re),
            vec![re, im],
            Some(make_back(false)),
        );
        let im_node = self.push(
            Tensor::from_vec(&shape, out_im),
            vec![re, im],
            Some(make_back(true)),
        );
        (re_node, im_node)
    }

    // ---- losses ----

    /// Mean of squared entries, a scalar node.
    pub fn mean_sq(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let n = av.len() as f64;
        let value = Tensor::scalar(av.norm_sq() / n);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| {
                let g = args.grad.item();
                vec![args.inputs[0].map(|x| g * 2.0 * x / n)]
            })),
        )
    }

    /// Mean softmax cross-entropy of `logits: [N, M]` against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Rc<Vec<usize>>) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rank(), 2);
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(targets.len(), n);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let tg = Rc::clone(&targets);
        self.push(
            Tensor::scalar(total / n as f64),
            vec![logits],
            Some(Box::new(move |args| {
                let g = args.grad.item() / n as f64;
                let lv = args.inputs[0];
                let mut out = Tensor::zeros(&[n, m]);
                for (r, &t) in tg.iter().enumerate() {
                    let row = &lv.data()[r * m..(r + 1) * m];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    let orow = &mut out.data_mut()[r * m..(r + 1) * m];
                    for (c, ov) in orow.iter_mut().enumerate() {
                        let p = (row[c] - mx).exp() / z;
                        *ov = g * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                vec![out]
            })),
        )
    }

    /// Backpropagate from a scalar root node; returns per-node gradients.
    /// Interior gradients are consumed during the sweep; leaves keep theirs.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root].needs_grad {
            return Gradients { grads };
        }
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| &self.nodes[p].value)
                .collect();
            let needed: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let parent_grads = back(&BackwardArgs {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
                needed: &needed,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((pg, &p), need) in parent_grads
                .into_iter()
                .zip(&node.parents)
                .zip(&needed)
            {
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}
