//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every operation records its parents and a backward closure; gradients
//! are computed by a single reverse sweep from a scalar root. The tape is
//! generic over the element type so training runs in f32 while gradient
//! checks run in f64.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4};

/// Element types the tape can differentiate through.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

struct BackCtx<'a, F: Scalar> {
    values: &'a [ArrayD<F>],
    parents: &'a [VarId],
    out: VarId,
    grad: &'a ArrayD<F>,
}

impl<'a, F: Scalar> BackCtx<'a, F> {
    fn parent(&self, i: usize) -> &ArrayD<F> {
        &self.values[self.parents[i].0]
    }
    fn output(&self) -> &ArrayD<F> {
        &self.values[self.out.0]
    }
}

type BackFn<F> = Box<dyn Fn(&BackCtx<F>) -> Vec<ArrayD<F>>>;

enum Node<F: Scalar> {
    Leaf,
    Op { parents: Vec<VarId>, back: BackFn<F> },
}

/// Gradients indexed by [`VarId`], produced by [`Tape::backward`].
pub struct Grads<F: Scalar> {
    by_id: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of the root with respect to `id`; zero-shaped entries are
    /// absent when a variable does not influence the root.
    pub fn get(&self, id: VarId) -> Option<&ArrayD<F>> {
        self.by_id.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<F: Scalar> {
    values: Vec<ArrayD<F>>,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    /// Scalar value of a 0-dimensional variable.
    pub fn scalar(&self, id: VarId) -> F {
        let v = self.value(id);
        assert_eq!(v.ndim(), 0, "expected a scalar variable");
        *v.first().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<F>) -> VarId {
        // Leaves are caller-supplied data or parameters; rejecting bad
        // inputs here keeps downstream diagnostics meaningful. Op outputs
        // stay unchecked so divergence surfaces as a non-finite loss the
        // training loop can catch.
        assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value entered the tape"
        );
        self.push(value, Node::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: F) -> VarId {
        self.leaf(ArrayD::from_elem(ndarray::IxDyn(&[]), value))
    }

    /// Re-enters a value as a fresh leaf, cutting the gradient path.
    /// Unlike `leaf` this performs no finiteness check: a diverged value
    /// must flow on to the loss where the caller detects it.
    pub fn detach(&mut self, id: VarId) -> VarId {
        let v = self.value(id).clone();
        self.push(v, Node::Leaf)
    }

    fn push(&mut self, value: ArrayD<F>, node: Node<F>) -> VarId {
        self.values.push(value);
        self.nodes.push(node);
        VarId(self.values.len() - 1)
    }

    fn unary(
        &mut self,
        a: VarId,
        value: ArrayD<F>,
        back: impl Fn(&BackCtx<F>) -> Vec<ArrayD<F>> + 'static,
    ) -> VarId {
        self.push(value, Node::Op { parents: vec![a], back: Box::new(back) })
    }

    fn binary(
        &mut self,
        a: VarId,
        b: VarId,
        value: ArrayD<F>,
        back: impl Fn(&BackCtx<F>) -> Vec<ArrayD<F>> + 'static,
    ) -> VarId {
        self.push(value, Node::Op { parents: vec![a, b], back: Box::new(back) })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: VarId) -> Grads<F> {
        assert_eq!(self.value(root).ndim(), 0, "backward root must be a scalar");
        let mut by_id: Vec<Option<ArrayD<F>>> = vec![None; self.values.len()];
        by_id[root.0] = Some(ArrayD::from_elem(ndarray::IxDyn(&[]), F::one()));
        for id in (0..=root.0).rev() {
            let Some(grad) = by_id[id].take() else { continue };
            if let Node::Op { parents, back } = &self.nodes[id] {
                let ctx = BackCtx {
                    values: &self.values,
                    parents,
                    out: VarId(id),
                    grad: &grad,
                };
                let parent_grads = back(&ctx);
                assert_eq!(parent_grads.len(), parents.len());
                for (p, g) in parents.iter().zip(parent_grads) {
                    debug_assert_eq!(g.shape(), self.values[p.0].shape());
                    match &mut by_id[p.0] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
            }
            by_id[id] = Some(grad);
        }
        Grads { by_id }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, |ctx| vec![ctx.grad.clone(), ctx.grad.clone()])
    }

    /// Sum of any number of same-shaped variables.
    pub fn add_n(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty());
        let mut v = self.value(ids[0]).clone();
        for id in &ids[1..] {
            assert_eq!(self.value(*id).shape(), v.shape());
            v += self.value(*id);
        }
        let n = ids.len();
        self.push(
            v,
            Node::Op {
                parents: ids.to_vec(),
                back: Box::new(move |ctx| (0..n).map(|_| ctx.grad.clone()).collect()),
            },
        )
    }

    pub fn scale(&mut self, a: VarId, c: F) -> VarId {
        let v = self.value(a).mapv(|x| x * c);
        self.unary(a, v, move |ctx| vec![ctx.grad.mapv(|g| g * c)])
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, |ctx| {
            vec![ctx.grad * ctx.parent(1), ctx.grad * ctx.parent(0)]
        })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| F::one() / (F::one() + (-x).exp()));
        self.unary(a, v, |ctx| {
            let s = ctx.output();
            vec![ctx.grad * &s.mapv(|s| s * (F::one() - s))]
        })
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x.tanh());
        self.unary(a, v, |ctx| {
            let t = ctx.output();
            vec![ctx.grad * &t.mapv(|t| F::one() - t * t)]
        })
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: F) -> VarId {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { x * slope });
        self.unary(a, v, move |ctx| {
            let x = ctx.parent(0);
            let mut g = ctx.grad.clone();
            ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                if x <= F::zero() {
                    *g *= slope;
                }
            });
            vec![g]
        })
    }

    // ---- convolution ----

    /// 2D convolution over NCHW input with zero padding.
    /// `w` is `[c_out, c_in, kh, kw]`, `b` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> VarId {
        let xv = as4(self.value(x));
        let wv = as4(self.value(w));
        let bv = as1(self.value(b));
        assert_eq!(xv.dim().1, wv.dim().1, "conv2d channel mismatch");
        assert_eq!(bv.len(), wv.dim().0, "conv2d bias mismatch");
        let v = conv_fwd(&xv, &wv, Some(&bv), stride, pad).into_dyn();
        self.push(
            v,
            Node::Op {
                parents: vec![x, w, b],
                back: Box::new(move |ctx| {
                    let g = as4(ctx.grad);
                    let xv = as4(ctx.parent(0));
                    let wv = as4(ctx.parent(1));
                    let (_, _, h, wid) = xv.dim();
                    let (_, _, kh, kw) = wv.dim();
                    let dx = conv_bwd_input(&g, &wv, stride, pad, (h, wid));
                    let dw = conv_bwd_kernel(&xv, &g, stride, pad, (kh, kw));
                    let db = bias_grad(&g);
                    vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
                }),
            },
        )
    }

    /// Transposed 2D convolution (the gradient of conv2d used as a forward
    /// op). `w` is `[c_in, c_out, kh, kw]`; `out_hw` fixes the output size.
    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: (usize, usize),
        pad: (usize, usize),
        out_hw: (usize, usize),
    ) -> VarId {
        let xv = as4(self.value(x));
        let wv = as4(self.value(w));
        let bv = as1(self.value(b));
        assert_eq!(xv.dim().1, wv.dim().0, "conv_transpose2d channel mismatch");
        assert_eq!(bv.len(), wv.dim().1, "conv_transpose2d bias mismatch");
        let (_, _, h_in, w_in) = xv.dim();
        let (_, _, kh, kw) = wv.dim();
        assert_eq!(
            (out_hw.0 + 2 * pad.0 - kh) / stride.0 + 1,
            h_in,
            "conv_transpose2d inconsistent output height"
        );
        assert_eq!(
            (out_hw.1 + 2 * pad.1 - kw) / stride.1 + 1,
            w_in,
            "conv_transpose2d inconsistent output width"
        );
        let mut v = conv_bwd_input(&xv, &wv, stride, pad, out_hw);
        for (co, &bias) in bv.iter().enumerate() {
            v.index_axis_mut(Axis(1), co).mapv_inplace(|y| y + bias);
        }
        self.push(
            v.into_dyn(),
            Node::Op {
                parents: vec![x, w, b],
                back: Box::new(move |ctx| {
                    let g = as4(ctx.grad);
                    let xv = as4(ctx.parent(0));
                    let wv = as4(ctx.parent(1));
                    let (_, _, kh, kw) = wv.dim();
                    let dx = conv_fwd(&g, &wv, None, stride, pad);
                    let dw = conv_bwd_kernel(&g, &xv, stride, pad, (kh, kw));
                    let db = bias_grad(&g);
                    vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
                }),
            },
        )
    }

    // ---- normalization and reshaping ----

    /// Instance normalization over H and W per (sample, channel), without
    /// learned affine parameters.
    pub fn instance_norm(&mut self, x: VarId, eps: F) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(h * w > 1, "instance_norm needs more than one spatial element");
        let mut v = Array4::<F>::zeros((n, c, h, w));
        for i in 0..n {
            for j in 0..c {
                let plane = xv.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), j);
                let (mu, sigma) = plane_stats(&plane, eps);
                let mut out = v.index_axis_mut(Axis(0), i);
                let mut out = out.index_axis_mut(Axis(0), j);
                ndarray::Zip::from(&mut out)
                    .and(&plane)
                    .for_each(|o, &x| *o = (x - mu) / sigma);
            }
        }
        self.unary(x, v.into_dyn(), move |ctx| {
            let xv = as4(ctx.parent(0));
            let g = as4(ctx.grad);
            let (n, c, h, w) = xv.dim();
            let count = F::from_f64((h * w) as f64);
            let mut dx = Array4::<F>::zeros((n, c, h, w));
            for i in 0..n {
                for j in 0..c {
                    let plane = xv.index_axis(Axis(0), i);
                    let plane = plane.index_axis(Axis(0), j);
                    let gp = g.index_axis(Axis(0), i);
                    let gp = gp.index_axis(Axis(0), j);
                    let (mu, sigma) = plane_stats(&plane, eps);
                    let mut g_mean = F::zero();
                    let mut gx_mean = F::zero();
                    ndarray::Zip::from(&gp).and(&plane).for_each(|&g, &x| {
                        let xh = (x - mu) / sigma;
                        g_mean += g;
                        gx_mean += g * xh;
                    });
                    g_mean /= count;
                    gx_mean /= count;
                    let mut out = dx.index_axis_mut(Axis(0), i);
                    let mut out = out.index_axis_mut(Axis(0), j);
                    ndarray::Zip::from(&mut out)
                        .and(&gp)
                        .and(&plane)
                        .for_each(|d, &g, &x| {
                            let xh = (x - mu) / sigma;
                            *d = (g - g_mean - xh * gx_mean) / sigma;
                        });
                }
            }
            vec![dx.into_dyn()]
        })
    }

    /// Depth-to-space: `[n, c*rh*rw, h, w]` becomes `[n, c, h*rh, w*rw]`.
    pub fn pixel_shuffle(&mut self, x: VarId, rh: usize, rw: usize) -> VarId {
        let xv = as4(self.value(x));
        let (n, c_in, h, w) = xv.dim();
        assert_eq!(c_in % (rh * rw), 0, "pixel_shuffle channel mismatch");
        let c = c_in / (rh * rw);
        let v = Array4::from_shape_fn((n, c, h * rh, w * rw), |(i, j, oh, ow)| {
            xv[[i, j * rh * rw + (oh % rh) * rw + (ow % rw), oh / rh, ow / rw]]
        });
        self.unary(x, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let dx = Array4::from_shape_fn((n, c_in, h, w), |(i, j, ih, iw)| {
                let cj = j / (rh * rw);
                let rem = j % (rh * rw);
                g[[i, cj, ih * rh + rem / rw, iw * rw + rem % rw]]
            });
            vec![dx.into_dyn()]
        })
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_ch(&mut self, a: VarId, b: VarId) -> VarId {
        let av = as4(self.value(a));
        let bv = as4(self.value(b));
        let (n, ca, h, w) = av.dim();
        let (nb, _cb, hb, wb) = bv.dim();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_ch spatial mismatch");
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        self.binary(a, b, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let ga = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
            let gb = g.slice(ndarray::s![.., ca.., .., ..]).to_owned();
            vec![ga.into_dyn(), gb.into_dyn()]
        })
    }

    /// Mean over the width axis, keeping it with size 1.
    pub fn mean_w(&mut self, x: VarId) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let inv = F::from_f64(1.0 / w as f64);
        let mut v = Array4::<F>::zeros((n, c, h, 1));
        for ((i, j, k, _), out) in v.indexed_iter_mut() {
            let mut acc = F::zero();
            for l in 0..w {
                acc += xv[[i, j, k, l]];
            }
            *out = acc * inv;
        }
        self.unary(x, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let dx = Array4::from_shape_fn((n, c, h, w), |(i, j, k, _)| g[[i, j, k, 0]] * inv);
            vec![dx.into_dyn()]
        })
    }

    /// Expands each cell into an `rh x rw` block (nearest-neighbor repeat).
    pub fn repeat_hw(&mut self, x: VarId, rh: usize, rw: usize) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let v = Array4::from_shape_fn((n, c, h * rh, w * rw), |(i, j, oh, ow)| {
            xv[[i, j, oh / rh, ow / rw]]
        });
        self.unary(x, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let mut dx = Array4::<F>::zeros((n, c, h, w));
            for ((i, j, oh, ow), &gv) in g.indexed_iter() {
                dx[[i, j, oh / rh, ow / rw]] += gv;
            }
            vec![dx.into_dyn()]
        })
    }

    /// Cyclically tiles the width axis out to `target_w`.
    pub fn tile_w(&mut self, x: VarId, target_w: usize) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(w >= 1 && target_w >= 1);
        let v = Array4::from_shape_fn((n, c, h, target_w), |(i, j, k, l)| xv[[i, j, k, l % w]]);
        self.unary(x, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let mut dx = Array4::<F>::zeros((n, c, h, w));
            for ((i, j, k, l), &gv) in g.indexed_iter() {
                dx[[i, j, k, l % w]] += gv;
            }
            vec![dx.into_dyn()]
        })
    }

    /// Extends the width axis to `target_w` by symmetric reflection
    /// (edge-repeating, period `2w`), so any target length is reachable.
    pub fn reflect_pad_w(&mut self, x: VarId, target_w: usize) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(target_w >= w, "reflect_pad_w cannot shrink");
        let mirror = move |l: usize| {
            let m = l % (2 * w);
            if m < w {
                m
            } else {
                2 * w - 1 - m
            }
        };
        let v = Array4::from_shape_fn((n, c, h, target_w), |(i, j, k, l)| {
            xv[[i, j, k, mirror(l)]]
        });
        self.unary(x, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let mut dx = Array4::<F>::zeros((n, c, h, w));
            for ((i, j, k, l), &gv) in g.indexed_iter() {
                dx[[i, j, k, mirror(l)]] += gv;
            }
            vec![dx.into_dyn()]
        })
    }

    /// Extracts one sample's full-height patch `[1, c, h, len]` starting at
    /// width offset `off`.
    pub fn patch(&mut self, x: VarId, sample: usize, off: usize, len: usize) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(sample < n && off + len <= w, "patch out of bounds");
        let v = xv
            .slice(ndarray::s![sample..sample + 1, .., .., off..off + len])
            .to_owned();
        self.unary(x, v.into_dyn(), move |ctx| {
            let g = as4(ctx.grad);
            let mut dx = Array4::<F>::zeros((n, c, h, w));
            dx.slice_mut(ndarray::s![sample..sample + 1, .., .., off..off + len])
                .assign(&g);
            vec![dx.into_dyn()]
        })
    }

    /// Flattens NCHW to `[n, c*h*w]`.
    pub fn flatten(&mut self, x: VarId) -> VarId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let v = xv
            .to_owned()
            .into_shape_with_order((n, c * h * w))
            .unwrap()
            .into_dyn();
        self.unary(x, v, move |ctx| {
            let g = ctx
                .grad
                .to_owned()
                .into_shape_with_order(ndarray::IxDyn(&[n, c, h, w]))
                .unwrap();
            vec![g]
        })
    }

    /// Affine map `y = x . w + b` with `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        let bv = as1(self.value(b));
        assert_eq!(xv.dim().1, wv.dim().0, "linear shape mismatch");
        assert_eq!(bv.len(), wv.dim().1, "linear bias mismatch");
        let mut v = xv.dot(&wv);
        v += &bv.view().insert_axis(Axis(0));
        self.push(
            v.into_dyn(),
            Node::Op {
                parents: vec![x, w, b],
                back: Box::new(|ctx| {
                    let g = as2(ctx.grad);
                    let xv = as2(ctx.parent(0));
                    let wv = as2(ctx.parent(1));
                    let dx = g.dot(&wv.t());
                    let dw = xv.t().dot(&g);
                    let db = g.sum_axis(Axis(0));
                    vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
                }),
            },
        )
    }

    // ---- losses ----

    /// Mean over samples of `-ln(max(softmax(logits)[label], floor))`.
    /// Samples whose picked probability hits the floor contribute a
    /// constant and therefore no gradient.
    pub fn neg_log_softmax_pick(&mut self, logits: VarId, labels: &[usize], floor: F) -> VarId {
        let lv = as2(self.value(logits));
        let (n, m) = lv.dim();
        assert_eq!(labels.len(), n, "one label per sample");
        assert!(labels.iter().all(|&l| l < m), "label out of range");
        let labels = labels.to_vec();
        let probs = softmax_rows(&lv);
        let mut total = F::zero();
        for (i, &l) in labels.iter().enumerate() {
            total += -(probs[[i, l]].max(floor)).ln();
        }
        let v = ArrayD::from_elem(ndarray::IxDyn(&[]), total / F::from_f64(n as f64));
        self.unary(logits, v, move |ctx| {
            let lv = as2(ctx.parent(0));
            let probs = softmax_rows(&lv);
            let g = *ctx.grad.first().unwrap() / F::from_f64(n as f64);
            let mut dx = Array2::<F>::zeros((n, m));
            for (i, &l) in labels.iter().enumerate() {
                if probs[[i, l]] > floor {
                    for j in 0..m {
                        let delta = if j == l { F::one() } else { F::zero() };
                        dx[[i, j]] = g * (probs[[i, j]] - delta);
                    }
                }
            }
            vec![dx.into_dyn()]
        })
    }

    /// Mean absolute difference over all elements of two same-shaped
    /// tensors; the subgradient at equal elements is zero.
    pub fn mean_abs_diff(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let count = F::from_f64(self.value(a).len() as f64);
        let mut total = F::zero();
        ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .for_each(|&x, &y| total += (x - y).abs());
        let v = ArrayD::from_elem(ndarray::IxDyn(&[]), total / count);
        self.binary(a, b, v, move |ctx| {
            let g = *ctx.grad.first().unwrap() / count;
            let mut da = ctx.parent(0).clone();
            ndarray::Zip::from(&mut da)
                .and(ctx.parent(1))
                .for_each(|d, &y| {
                    let x = *d;
                    *d = if x > y {
                        g
                    } else if x < y {
                        -g
                    } else {
                        F::zero()
                    };
                });
            let db = da.mapv(|v| -v);
            vec![da, db]
        })
    }

    /// Mean of scalar variables.
    pub fn mean_scalars(&mut self, ids: &[VarId]) -> VarId {
        let sum = self.add_n(ids);
        self.scale(sum, F::from_f64(1.0 / ids.len() as f64))
    }
}

// ---- shape helpers ----

fn as4<F: Scalar>(v: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    v.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

fn as2<F: Scalar>(v: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    v.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

fn as1<F: Scalar>(v: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    v.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected a 1-d tensor")
}

fn plane_stats<F: Scalar>(plane: &ndarray::ArrayView2<F>, eps: F) -> (F, F) {
    let count = F::from_f64(plane.len() as f64);
    let mut mu = F::zero();
    for &x in plane.iter() {
        mu += x;
    }
    mu /= count;
    let mut var = F::zero();
    for &x in plane.iter() {
        var += (x - mu) * (x - mu);
    }
    var /= count;
    (mu, (var + eps).sqrt())
}

fn softmax_rows<F: Scalar>(logits: &ndarray::ArrayView2<F>) -> Array2<F> {
    let (n, m) = logits.dim();
    let mut out = Array2::<F>::zeros((n, m));
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for j in 0..m {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            denom += e;
        }
        for j in 0..m {
            out[[i, j]] /= denom;
        }
    }
    out
}

// ---- convolution kernels (shared by forward and backward) ----

fn conv_out_dim(in_dim: usize, k: usize, s: usize, p: usize) -> usize {
    (in_dim + 2 * p - k) / s + 1
}

fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let (kh, kw) = k;
    let (ho, wo) = out;
    let mut col = Array2::<F>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut col_row = col.row_mut(row);
                for oh in 0..ho {
                    let ih = (oh * stride.0 + ki) as isize - pad.0 as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride.1 + kj) as isize - pad.1 as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col_row[oh * wo + ow] = x[[ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Forward convolution: `x [n,ci,h,w]`, `w [co,ci,kh,kw]` -> `[n,co,ho,wo]`.
pub(crate) fn conv_fwd<F: Scalar>(
    x: &ndarray::ArrayView4<F>,
    w: &ndarray::ArrayView4<F>,
    b: Option<&ndarray::ArrayView1<F>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array4<F> {
    let (n, ci, h, wid) = x.dim();
    let (co, ci_w, kh, kw) = w.dim();
    assert_eq!(ci, ci_w);
    let ho = conv_out_dim(h, kh, stride.0, pad.0);
    let wo = conv_out_dim(wid, kw, stride.1, pad.1);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap();
    let mut y = Array4::<F>::zeros((n, co, ho, wo));
    for i in 0..n {
        let col = im2col(&x.index_axis(Axis(0), i), (kh, kw), stride, pad, (ho, wo));
        let y_mat = w_mat.dot(&col);
        let mut yi = y.index_axis_mut(Axis(0), i);
        for c in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    yi[[c, oh, ow]] = y_mat[[c, oh * wo + ow]];
                }
            }
        }
    }
    if let Some(b) = b {
        for c in 0..co {
            y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + b[c]);
        }
    }
    y
}

/// Gradient of conv_fwd with respect to its input; also the forward pass
/// of transposed convolution.
pub(crate) fn conv_bwd_input<F: Scalar>(
    dy: &ndarray::ArrayView4<F>,
    w: &ndarray::ArrayView4<F>,
    stride: (usize, usize),
    pad: (usize, usize),
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, co, ho, wo) = dy.dim();
    let (co_w, ci, kh, kw) = w.dim();
    assert_eq!(co, co_w);
    assert_eq!(conv_out_dim(in_hw.0, kh, stride.0, pad.0), ho);
    assert_eq!(conv_out_dim(in_hw.1, kw, stride.1, pad.1), wo);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap();
    let mut dx = Array4::<F>::zeros((n, ci, in_hw.0, in_hw.1));
    for i in 0..n {
        let mut dy_mat = Array2::<F>::zeros((co, ho * wo));
        for c in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    dy_mat[[c, oh * wo + ow]] = dy[[i, c, oh, ow]];
                }
            }
        }
        let col_grad = w_mat.t().dot(&dy_mat);
        // col2im scatter-add.
        let mut dxi = dx.index_axis_mut(Axis(0), i);
        for ci_i in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci_i * kh + ki) * kw + kj;
                    for oh in 0..ho {
                        let ih = (oh * stride.0 + ki) as isize - pad.0 as isize;
                        if ih < 0 || ih >= in_hw.0 as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride.1 + kj) as isize - pad.1 as isize;
                            if iw < 0 || iw >= in_hw.1 as isize {
                                continue;
                            }
                            dxi[[ci_i, ih as usize, iw as usize]] += col_grad[[row, oh * wo + ow]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of conv_fwd with respect to its kernel.
pub(crate) fn conv_bwd_kernel<F: Scalar>(
    x: &ndarray::ArrayView4<F>,
    dy: &ndarray::ArrayView4<F>,
    stride: (usize, usize),
    pad: (usize, usize),
    k: (usize, usize),
) -> Array4<F> {
    let (n, ci, _h, _w) = x.dim();
    let (n_dy, co, ho, wo) = dy.dim();
    assert_eq!(n, n_dy);
    let (kh, kw) = k;
    let mut dw_mat = Array2::<F>::zeros((co, ci * kh * kw));
    for i in 0..n {
        let col = im2col(&x.index_axis(Axis(0), i), k, stride, pad, (ho, wo));
        let mut dy_mat = Array2::<F>::zeros((co, ho * wo));
        for c in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    dy_mat[[c, oh * wo + ow]] = dy[[i, c, oh, ow]];
                }
            }
        }
        dw_mat += &dy_mat.dot(&col.t());
    }
    dw_mat.into_shape_with_order((co, ci, kh, kw)).unwrap()
}

fn bias_grad<F: Scalar>(dy: &ndarray::ArrayView4<F>) -> Array1<F> {
    let (n, co, ho, wo) = dy.dim();
    let mut db = Array1::<F>::zeros(co);
    for c in 0..co {
        let mut acc = F::zero();
        for i in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    acc += dy[[i, c, oh, ow]];
                }
            }
        }
        db[c] = acc;
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                rng,
            )
        })
    }

    /// Central-difference gradient check: builds the graph with `f` from
    /// leaf values, compares analytic and numeric gradients elementwise.
    fn gradcheck(
        inputs: &[ArrayD<f64>],
        f: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
        tol: f64,
    ) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<VarId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = f(&mut tape, &ids);
        let grads = tape.backward(root);

        let h = 1e-5;
        for (pi, input) in inputs.iter().enumerate() {
            let analytic: Vec<f64> = grads
                .get(ids[pi])
                .map(|g| g.iter().cloned().collect())
                .unwrap_or_else(|| vec![0.0; input.len()]);
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[pi].as_slice_mut().unwrap()[idx] += h;
                minus[pi].as_slice_mut().unwrap()[idx] -= h;
                let eval = |vals: &[ArrayD<f64>]| {
                    let mut t = Tape::<f64>::new();
                    let ids: Vec<VarId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
                    let r = f(&mut t, &ids);
                    t.scalar(r)
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[idx];
                let denom = 1.0f64.max(a.abs()).max(numeric.abs());
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "input {pi} elem {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]);
        gradcheck(&[a.clone(), b.clone()], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let m = t.mul(s, ids[0]);
            let sg = t.sigmoid(m);
            let th = t.tanh(sg);
            let sc = t.scale(th, 1.7);
            let z = t.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
            t.mean_abs_diff(sc, z)
        }, 1e-6);
    }

    #[test]
    fn gradcheck_leaky_relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = randn(&mut rng, &[3, 4]);
        // Keep inputs away from the kink at zero.
        a.mapv_inplace(|v| if v.abs() < 0.1 { v + 0.2 * v.signum() + 0.05 } else { v });
        gradcheck(&[a], |t, ids| {
            let r = t.leaky_relu(ids[0], 0.2);
            let z = t.leaf(ArrayD::zeros(IxDyn(&[3, 4])));
            t.mean_abs_diff(r, z)
        }, 1e-6);
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 6, 5]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let b = randn(&mut rng, &[4]);
        let target = randn(&mut rng, &[2, 4, 3, 3]);
        gradcheck(&[x, w, b, target], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (2, 2), (1, 1));
            t.mean_abs_diff(y, ids[3])
        }, 1e-5);
    }

    #[test]
    fn gradcheck_conv2d_asymmetric_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 2, 8, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let target = randn(&mut rng, &[1, 3, 4, 6]);
        gradcheck(&[x, w, b, target], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (2, 1), (1, 1));
            t.mean_abs_diff(y, ids[3])
        }, 1e-5);
    }

    #[test]
    fn gradcheck_conv_transpose2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 4, 3]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[2]);
        let target = randn(&mut rng, &[2, 2, 8, 6]);
        gradcheck(&[x, w, b, target], |t, ids| {
            let y = t.conv_transpose2d(ids[0], ids[1], ids[2], (2, 2), (1, 1), (8, 6));
            t.mean_abs_diff(y, ids[3])
        }, 1e-5);
    }

    #[test]
    fn conv_transpose_matches_upsampling_size_rules() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, 8, 8])));
        let w = tape.leaf(ArrayD::zeros(IxDyn(&[2, 5, 3, 3])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[5])));
        let y = tape.conv_transpose2d(x, w, b, (2, 2), (1, 1), (16, 16));
        assert_eq!(tape.value(y).shape(), &[1, 5, 16, 16]);
        let y1 = tape.conv_transpose2d(x, w, b, (1, 1), (1, 1), (8, 8));
        assert_eq!(tape.value(y1).shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn gradcheck_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[2, 2, 4, 3]);
        let target = randn(&mut rng, &[2, 2, 4, 3]);
        gradcheck(&[x, target], |t, ids| {
            let y = t.instance_norm(ids[0], 1e-5);
            t.mean_abs_diff(y, ids[1])
        }, 1e-4);
    }

    #[test]
    fn instance_norm_standardizes_each_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 3, 5, 4]);
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(x);
        let y = tape.instance_norm(id, 1e-8);
        let yv = as4(tape.value(y));
        for i in 0..2 {
            for j in 0..3 {
                let plane = yv.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), j);
                let mean: f64 = plane.iter().sum::<f64>() / 20.0;
                let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
                assert!(mean.abs() < 1e-10, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn gradcheck_pixel_shuffle_and_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[1, 4, 3, 2]);
        let target = randn(&mut rng, &[1, 2, 6, 2]);
        gradcheck(&[x, target], |t, ids| {
            let y = t.pixel_shuffle(ids[0], 2, 1);
            t.mean_abs_diff(y, ids[1])
        }, 1e-6);

        let x2 = randn(&mut rng, &[1, 2, 2, 1]);
        let target2 = randn(&mut rng, &[1, 2, 4, 3]);
        gradcheck(&[x2, target2], |t, ids| {
            let y = t.repeat_hw(ids[0], 2, 3);
            t.mean_abs_diff(y, ids[1])
        }, 1e-6);
    }

    #[test]
    fn pixel_shuffle_layout_matches_depth_to_space() {
        // Channels [c*rh*rw] with rh=2, rw=1: channel 0 fills even rows,
        // channel 1 odd rows.
        let mut tape = Tape::<f64>::new();
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2, 2]), |d| {
            (d[1] * 100 + d[2] * 10 + d[3]) as f64
        });
        let id = tape.leaf(x);
        let y = tape.pixel_shuffle(id, 2, 1);
        let yv = as4(tape.value(y));
        assert_eq!(yv.dim(), (1, 1, 4, 2));
        assert_eq!(yv[[0, 0, 0, 0]], 0.0); // ch0 h0
        assert_eq!(yv[[0, 0, 1, 0]], 100.0); // ch1 h0
        assert_eq!(yv[[0, 0, 2, 1]], 11.0); // ch0 h1 w1
        assert_eq!(yv[[0, 0, 3, 1]], 111.0); // ch1 h1 w1
    }

    #[test]
    fn gradcheck_concat_mean_tile_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, &[2, 2, 3, 4]);
        let b = randn(&mut rng, &[2, 1, 3, 4]);
        let target = randn(&mut rng, &[1, 3, 3, 2]);
        gradcheck(&[a, b, target], |t, ids| {
            let cat = t.concat_ch(ids[0], ids[1]);
            let p = t.patch(cat, 1, 1, 2);
            t.mean_abs_diff(p, ids[2])
        }, 1e-6);

        let x = randn(&mut rng, &[1, 2, 2, 3]);
        let target2 = randn(&mut rng, &[1, 2, 2, 7]);
        gradcheck(&[x.clone(), target2], |t, ids| {
            let m = t.tile_w(ids[0], 7);
            t.mean_abs_diff(m, ids[1])
        }, 1e-6);

        let target3 = randn(&mut rng, &[1, 2, 2, 1]);
        gradcheck(&[x, target3], |t, ids| {
            let m = t.mean_w(ids[0]);
            t.mean_abs_diff(m, ids[1])
        }, 1e-6);
    }

    #[test]
    fn gradcheck_reflect_pad_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(&mut rng, &[1, 2, 3, 4]);
        let target = randn(&mut rng, &[1, 2, 3, 9]);
        gradcheck(&[x, target], |t, ids| {
            let y = t.reflect_pad_w(ids[0], 9);
            t.mean_abs_diff(y, ids[1])
        }, 1e-6);
    }

    #[test]
    fn reflect_pad_w_mirrors_then_repeats() {
        // Width 3 padded to 8: [a b c c b a a b].
        let mut tape = Tape::<f64>::new();
        let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 1, 3]), vec![1.0, 2.0, 3.0]).unwrap();
        let id = tape.leaf(x);
        let y = tape.reflect_pad_w(id, 8);
        let yv: Vec<f64> = tape.value(y).iter().cloned().collect();
        assert_eq!(yv, vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn gradcheck_linear_and_softmax_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[1, 2, 2, 3]);
        let w = randn(&mut rng, &[12, 6]);
        let b = randn(&mut rng, &[6]);
        gradcheck(&[x, w, b], |t, ids| {
            let f = t.flatten(ids[0]);
            let y = t.linear(f, ids[1], ids[2]);
            t.neg_log_softmax_pick(y, &[3], 1e-12)
        }, 1e-6);
    }

    #[test]
    fn softmax_pick_floor_gives_constant_and_zero_grad() {
        let mut tape = Tape::<f64>::new();
        // Logits so extreme the picked class has probability ~e^-200.
        let logits = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![200.0, 0.0]).unwrap(),
        );
        let loss = tape.neg_log_softmax_pick(logits, &[1], 1e-12);
        let expect = -(1e-12f64).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-9);
        assert!((expect - 27.631021115928547).abs() < 1e-9);
        let grads = tape.backward(loss);
        let g = grads.get(logits).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_pick_uniform_logits_give_ln_m() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[3, 4])));
        let loss = tape.neg_log_softmax_pick(logits, &[0, 1, 3], 1e-12);
        assert!((tape.scalar(loss) - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_mean_abs_diff_and_combinators() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Keep |a - b| away from zero so the subgradient is exact.
        let a = randn(&mut rng, &[3, 3]).mapv(|v| v + 3.0);
        let b = randn(&mut rng, &[3, 3]).mapv(|v| v - 3.0);
        gradcheck(&[a, b], |t, ids| {
            let l1 = t.mean_abs_diff(ids[0], ids[1]);
            let l2 = t.mean_abs_diff(ids[1], ids[0]);
            let s = t.add(l1, l2);
            t.scale(s, 0.5)
        }, 1e-6);
    }

    #[test]
    fn add_n_and_mean_scalars_accumulate() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<VarId> = [1.0, 2.0, 6.0].iter().map(|&v| tape.scalar_leaf(v)).collect();
        let mean = tape.mean_scalars(&xs);
        assert!((tape.scalar(mean) - 3.0).abs() < 1e-12);
        let grads = tape.backward(mean);
        for id in xs {
            let g = grads.get(id).unwrap();
            assert!((g.first().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let b = tape.detach(a);
        let c = tape.mul(b, b);
        let z = tape.leaf(ArrayD::zeros(IxDyn(&[2, 2])));
        let loss = tape.mean_abs_diff(c, z);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn gradients_accumulate_across_reused_variables() {
        // f(x) = mean|x*x - 0| with x reused twice; d/dx = 2x/n for x > 0.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let sq = tape.mul(x, x);
        let z = tape.leaf(ArrayD::zeros(IxDyn(&[2])));
        let loss = tape.mean_abs_diff(sq, z);
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        for v in g.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_fwd_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, &[2, 3, 7, 6]).into_dimensionality::<Ix4>().unwrap();
        let w = randn(&mut rng, &[4, 3, 3, 3]).into_dimensionality::<Ix4>().unwrap();
        let b = randn(&mut rng, &[4])
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let stride = (2, 1);
        let pad = (1, 1);
        let fast = conv_fwd(&x.view(), &w.view(), Some(&b.view()), stride, pad);

        let (n, ci, h, wid) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let ho = conv_out_dim(h, kh, stride.0, pad.0);
        let wo = conv_out_dim(wid, kw, stride.1, pad.1);
        let mut naive = Array4::<f64>::zeros((n, co, ho, wo));
        for i in 0..n {
            for c in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b[c];
                        for cc in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride.0 + ki) as isize - pad.0 as isize;
                                    let iw = (ow * stride.1 + kj) as isize - pad.1 as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < wid
                                    {
                                        acc += x[[i, cc, ih as usize, iw as usize]]
                                            * w[[c, cc, ki, kj]];
                                    }
                                }
                            }
                        }
                        naive[[i, c, oh, ow]] = acc;
                    }
                }
            }
        }
        for (a, b) in fast.iter().zip(naive.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_values_are_rejected_at_entry() {
        let mut tape = Tape::<f32>::new();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.leaf(ArrayD::from_elem(IxDyn(&[2]), f32::NAN));
        }));
        assert!(result.is_err());
    }
}
