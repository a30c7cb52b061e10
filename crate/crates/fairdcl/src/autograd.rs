//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse. The op set is exactly what the encoder, discriminators
//! and segmentation decoder need, with fused losses (InfoNCE, cross-entropy)
//! carrying hand-derived gradients.

use std::cell::RefCell;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix2, Ix4};

use crate::nn::{conv2d_backward, conv2d_forward, Real};

pub type NodeId = usize;

struct BackCtx<'a, F: Real> {
    grad_out: &'a ArrayD<F>,
    value: &'a ArrayD<F>,
    parents: &'a [&'a ArrayD<F>],
    need: &'a [bool],
}

trait Backward<F: Real> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>>;
}

struct Node<F: Real> {
    value: ArrayD<F>,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Backward<F>>>,
    needs_grad: bool,
}

/// Gradients indexed by node id after a backward pass.
pub struct Gradients<F: Real>(Vec<Option<ArrayD<F>>>);

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> ArrayD<F> {
        self.0[id].take().expect("gradient present")
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> NodeId {
        self.push(value, vec![], None, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> F {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap()
    }

    fn push(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<NodeId>,
        op: Option<Box<dyn Backward<F>>>,
        leaf_grad: bool,
    ) -> NodeId {
        let needs_grad = if op.is_none() {
            leaf_grad
        } else {
            parents.iter().any(|&p| self.nodes[p].needs_grad)
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Reverse sweep from `root` (normally a scalar loss).
    pub fn backward(&self, root: NodeId) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if node.op.is_none() || !node.needs_grad {
                continue;
            }
            let grad_out = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let parents: Vec<&ArrayD<F>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let pgrads = node.op.as_ref().unwrap().backward(BackCtx {
                grad_out: &grad_out,
                value: &node.value,
                parents: &parents,
                need: &need,
            });
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients(grads)
    }

    // ---- elementwise and structural ops ----

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.max(F::zero()));
        self.push(v, vec![x], Some(Box::new(ReluOp)), false)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(softplus_stable);
        self.push(v, vec![x], Some(Box::new(SoftplusOp)), false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, vec![a, b], Some(Box::new(AddScaledOp { alpha: F::one() })), false)
    }

    /// `a + alpha * b`
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: F) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value.mapv(|x| x * alpha);
        self.push(v, vec![a, b], Some(Box::new(AddScaledOp { alpha })), false)
    }

    pub fn scale(&mut self, x: NodeId, alpha: F) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * alpha);
        self.push(v, vec![x], Some(Box::new(ScaleOp { alpha })), false)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -F::one())
    }

    /// Per-channel affine map on an (N, C, H, W) tensor:
    /// `y[n,c,h,w] = x[n,c,h,w] * scale[c] + shift[c]`. The coefficients are
    /// constants (no gradient), so the backward pass only rescales.
    pub fn channel_affine(&mut self, x: NodeId, scale: Vec<F>, shift: Vec<F>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.ndim(), 4, "channel_affine expects NCHW");
        assert_eq!(xv.shape()[1], scale.len());
        assert_eq!(scale.len(), shift.len());
        let mut v = xv.clone();
        for (c, mut lane) in v
            .axis_iter_mut(ndarray::Axis(1))
            .enumerate()
        {
            let (s, b) = (scale[c], shift[c]);
            lane.mapv_inplace(|a| a * s + b);
        }
        self.push(v, vec![x], Some(Box::new(ChannelAffineOp { scale })), false)
    }

    /// Element-count-preserving reshape; gradient reshapes back.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let old = self.nodes[x].value.shape().to_vec();
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(ndarray::IxDyn(shape))
            .expect("reshape element count");
        self.push(v, vec![x], Some(Box::new(ReshapeOp { old })), false)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let m = self.nodes[x].value.iter().copied().sum::<F>() / F::of(n as f64);
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), m);
        self.push(v, vec![x], Some(Box::new(MeanAllOp)), false)
    }

    /// Identity forward, `-lambda` scaled gradient backward.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: F) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.push(v, vec![x], Some(Box::new(ScaleGradOp { alpha: -lambda })), false)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|&p| self.nodes[p].value.view())
            .collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let splits = parts
            .iter()
            .map(|&p| self.nodes[p].value.shape()[1])
            .collect();
        self.push(
            v,
            parts.to_vec(),
            Some(Box::new(ConcatChannelsOp { splits })),
            false,
        )
    }

    // ---- layers ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv input 4d");
        let wv = self.nodes[w]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight 4d");
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv bias 1d")
            .to_owned();
        let (out, cols) = conv2d_forward(&xv, &wv, &bv, stride, pad);
        let op = Conv2dOp {
            stride,
            pad,
            input_dim: xv.dim(),
            cols: RefCell::new(Some(cols)),
        };
        self.push(out.into_dyn(), vec![x, w, b], Some(Box::new(op)), false)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.as2(x);
        let wv = self.as2(w);
        let mut out = xv.dot(&wv);
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias 1d");
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row).and(&bv).for_each(|r, &b| *r = *r + b);
        }
        self.push(out.into_dyn(), vec![x, w, b], Some(Box::new(LinearOp)), false)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("pool input 4d");
        let (n, c, h, w) = xv.dim();
        let denom = F::of((h * w) as f64);
        let mut out = Array2::<F>::zeros((n, c));
        for bn in 0..n {
            for ch in 0..c {
                let mut s = F::zero();
                for y in 0..h {
                    for xq in 0..w {
                        s = s + xv[[bn, ch, y, xq]];
                    }
                }
                out[[bn, ch]] = s / denom;
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(GlobalAvgPoolOp { dim: (n, c, h, w) })),
            false,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.as2(x);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|&a| a * a).sum::<F>().sqrt().max(F::of(1e-12));
            row.mapv_inplace(|a| a / norm);
        }
        self.push(out.into_dyn(), vec![x], Some(Box::new(L2NormRowsOp)), false)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample input 4d");
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xq in 0..w {
                        let v = xv[[bn, ch, y, xq]];
                        out[[bn, ch, 2 * y, 2 * xq]] = v;
                        out[[bn, ch, 2 * y, 2 * xq + 1]] = v;
                        out[[bn, ch, 2 * y + 1, 2 * xq]] = v;
                        out[[bn, ch, 2 * y + 1, 2 * xq + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x], Some(Box::new(Upsample2Op)), false)
    }

    // ---- fused losses ----

    /// Temperature-scaled contrastive loss of `q` against one positive key
    /// per row and a shared bank of negative keys. Gradient flows to `q`
    /// only; keys come from the momentum encoder and the queue.
    pub fn info_nce(&mut self, q: NodeId, keys: Array2<F>, negatives: Array2<F>, tau: F) -> NodeId {
        assert!(tau > F::zero(), "temperature must be positive");
        assert!(negatives.nrows() > 0, "empty negative bank");
        let qv = self.as2(q).to_owned();
        let (loss, p_pos, p_neg) = info_nce_forward(&qv, &keys, &negatives, tau);
        let op = InfoNceOp {
            keys,
            negatives,
            tau,
            p_pos,
            p_neg,
        };
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), loss);
        self.push(v, vec![q], Some(Box::new(op)), false)
    }

    /// Mean per-pixel cross-entropy of `(N, C, H, W)` logits against class
    /// index targets `(N, H, W)`.
    pub fn cross_entropy_spatial(&mut self, logits: NodeId, target: Array3<usize>) -> NodeId {
        let lv = self.nodes[logits]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("logits 4d");
        let (n, c, h, w) = lv.dim();
        assert_eq!(target.dim(), (n, h, w), "target shape");
        let mut total = F::zero();
        for bn in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let t = target[[bn, y, x]];
                    debug_assert!(t < c);
                    let mut mx = lv[[bn, 0, y, x]];
                    for ch in 1..c {
                        mx = mx.max(lv[[bn, ch, y, x]]);
                    }
                    let mut se = F::zero();
                    for ch in 0..c {
                        se = se + (lv[[bn, ch, y, x]] - mx).exp();
                    }
                    total = total + mx + se.ln() - lv[[bn, t, y, x]];
                }
            }
        }
        let count = F::of((n * h * w) as f64);
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), total / count);
        self.push(
            v,
            vec![logits],
            Some(Box::new(CrossEntropySpatialOp { target })),
            false,
        )
    }

    /// Mean cross-entropy of `(N, K)` logits against class indices.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, target: Vec<usize>) -> NodeId {
        let lv = self.as2(logits).to_owned();
        let (n, k) = lv.dim();
        assert_eq!(target.len(), n);
        let mut total = F::zero();
        for (row, &t) in lv.rows().into_iter().zip(&target) {
            debug_assert!(t < k);
            let mx = row.iter().copied().fold(F::min_value(), F::max);
            let se: F = row.iter().map(|&a| (a - mx).exp()).sum();
            total = total + mx + se.ln() - row[t];
        }
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), total / F::of(n as f64));
        self.push(
            v,
            vec![logits],
            Some(Box::new(CrossEntropyRowsOp { target })),
            false,
        )
    }

    fn as2(&self, id: NodeId) -> ndarray::ArrayView2<'_, F> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2d value")
    }
}

fn softplus_stable<F: Real>(x: F) -> F {
    // sp(x) = max(x, 0) + ln(1 + exp(-|x|))
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn info_nce_forward<F: Real>(
    q: &Array2<F>,
    keys: &Array2<F>,
    negatives: &Array2<F>,
    tau: F,
) -> (F, Array1<F>, Array2<F>) {
    let n = q.nrows();
    let l_neg = q.dot(&negatives.t()).mapv(|a| a / tau);
    let mut p_pos = Array1::<F>::zeros(n);
    let mut p_neg = Array2::<F>::zeros(l_neg.raw_dim());
    let mut loss = F::zero();
    for i in 0..n {
        let lp = q.row(i).dot(&keys.row(i)) / tau;
        let row = l_neg.row(i);
        let mx = row.iter().copied().fold(lp, F::max);
        let mut se = (lp - mx).exp();
        for &a in row.iter() {
            se = se + (a - mx).exp();
        }
        let lse = mx + se.ln();
        loss = loss + lse - lp;
        p_pos[i] = (lp - lse).exp();
        for (j, &a) in row.iter().enumerate() {
            p_neg[[i, j]] = (a - lse).exp();
        }
    }
    (loss / F::of(n as f64), p_pos, p_neg)
}

// ---- op implementations ----

struct ReluOp;
impl<F: Real> Backward<F> for ReluOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let mut g = ctx.grad_out.clone();
        ndarray::Zip::from(&mut g).and(ctx.value).for_each(|g, &v| {
            if v <= F::zero() {
                *g = F::zero();
            }
        });
        vec![Some(g)]
    }
}

struct SoftplusOp;
impl<F: Real> Backward<F> for SoftplusOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let mut g = ctx.grad_out.clone();
        ndarray::Zip::from(&mut g)
            .and(ctx.parents[0])
            .for_each(|g, &x| *g = *g * sigmoid(x));
        vec![Some(g)]
    }
}

struct AddScaledOp<F> {
    alpha: F,
}
impl<F: Real> Backward<F> for AddScaledOp<F> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let ga = ctx.need[0].then(|| ctx.grad_out.clone());
        let gb = ctx.need[1].then(|| ctx.grad_out.mapv(|g| g * self.alpha));
        vec![ga, gb]
    }
}

struct ChannelAffineOp<F> {
    scale: Vec<F>,
}
impl<F: Real> Backward<F> for ChannelAffineOp<F> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let mut g = ctx.grad_out.clone();
        for (c, mut lane) in g.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let s = self.scale[c];
            lane.mapv_inplace(|a| a * s);
        }
        vec![Some(g)]
    }
}

struct ScaleOp<F> {
    alpha: F,
}
impl<F: Real> Backward<F> for ScaleOp<F> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        vec![Some(ctx.grad_out.mapv(|g| g * self.alpha))]
    }
}

/// Identity forward with a scaled gradient (gradient reversal when alpha < 0).
struct ScaleGradOp<F> {
    alpha: F,
}
impl<F: Real> Backward<F> for ScaleGradOp<F> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        vec![Some(ctx.grad_out.mapv(|g| g * self.alpha))]
    }
}

struct MeanAllOp;
struct ReshapeOp {
    old: Vec<usize>,
}
impl<F: Real> Backward<F> for ReshapeOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        vec![Some(
            ctx.grad_out
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&self.old))
                .expect("reshape gradient"),
        )]
    }
}

impl<F: Real> Backward<F> for MeanAllOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let x = ctx.parents[0];
        let g = ctx.grad_out.iter().copied().next().unwrap() / F::of(x.len() as f64);
        vec![Some(ArrayD::from_elem(x.raw_dim(), g))]
    }
}

struct ConcatChannelsOp {
    splits: Vec<usize>,
}
impl<F: Real> Backward<F> for ConcatChannelsOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let mut out = Vec::with_capacity(self.splits.len());
        let mut offset = 0;
        for (i, &len) in self.splits.iter().enumerate() {
            if ctx.need[i] {
                let part = ctx
                    .grad_out
                    .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                out.push(Some(part.as_standard_layout().to_owned()));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    }
}

struct Conv2dOp<F: Real> {
    stride: usize,
    pad: usize,
    input_dim: (usize, usize, usize, usize),
    cols: RefCell<Option<Array2<F>>>,
}
impl<F: Real> Backward<F> for Conv2dOp<F> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let g = ctx
            .grad_out
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv grad 4d");
        let w = ctx.parents[1]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight 4d");
        let cols = self.cols.borrow();
        let cols = cols.as_ref().expect("cached im2col");
        let (gx, gw, gb) = conv2d_backward(
            &g,
            cols,
            &w,
            self.input_dim,
            self.stride,
            self.pad,
            ctx.need[0],
        );
        vec![
            gx.map(|a| a.into_dyn()),
            ctx.need[1].then(|| gw.into_dyn()),
            ctx.need[2].then(|| gb.into_dyn()),
        ]
    }
}

struct LinearOp;
impl<F: Real> Backward<F> for LinearOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let g = ctx
            .grad_out
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear grad 2d");
        let x = ctx.parents[0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let w = ctx.parents[1]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let gx = ctx.need[0].then(|| g.dot(&w.t()).into_dyn());
        let gw = ctx.need[1].then(|| x.t().dot(&g).into_dyn());
        let gb = ctx.need[2].then(|| g.sum_axis(Axis(0)).into_dyn());
        vec![gx, gw, gb]
    }
}

struct GlobalAvgPoolOp {
    dim: (usize, usize, usize, usize),
}
impl<F: Real> Backward<F> for GlobalAvgPoolOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let (n, c, h, w) = self.dim;
        let g = ctx
            .grad_out
            .view()
            .into_dimensionality::<Ix2>()
            .expect("pool grad 2d");
        let denom = F::of((h * w) as f64);
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for bn in 0..n {
            for ch in 0..c {
                let v = g[[bn, ch]] / denom;
                gx.slice_mut(ndarray::s![bn, ch, .., ..]).fill(v);
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct L2NormRowsOp;
impl<F: Real> Backward<F> for L2NormRowsOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let g = ctx
            .grad_out
            .view()
            .into_dimensionality::<Ix2>()
            .expect("norm grad 2d");
        let x = ctx.parents[0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let y = ctx.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut gx = Array2::<F>::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            let norm = x
                .row(i)
                .iter()
                .map(|&a| a * a)
                .sum::<F>()
                .sqrt()
                .max(F::of(1e-12));
            let dot = g.row(i).dot(&y.row(i));
            for j in 0..x.ncols() {
                gx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norm;
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct Upsample2Op;
impl<F: Real> Backward<F> for Upsample2Op {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let g = ctx
            .grad_out
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample grad 4d");
        let (n, c, h2, w2) = g.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gx[[bn, ch, y, x]] = g[[bn, ch, 2 * y, 2 * x]]
                            + g[[bn, ch, 2 * y, 2 * x + 1]]
                            + g[[bn, ch, 2 * y + 1, 2 * x]]
                            + g[[bn, ch, 2 * y + 1, 2 * x + 1]];
                    }
                }
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct InfoNceOp<F: Real> {
    keys: Array2<F>,
    negatives: Array2<F>,
    tau: F,
    p_pos: Array1<F>,
    p_neg: Array2<F>,
}
impl<F: Real> Backward<F> for InfoNceOp<F> {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let n = self.keys.nrows();
        let scale = ctx.grad_out.iter().copied().next().unwrap()
            / (self.tau * F::of(n as f64));
        // dL/dq_i = ((p_pos_i - 1) * k_i + p_neg_i . negatives) / (tau * N)
        let mut gq = self.p_neg.dot(&self.negatives);
        for i in 0..n {
            let coef = self.p_pos[i] - F::one();
            for j in 0..gq.ncols() {
                gq[[i, j]] = (gq[[i, j]] + coef * self.keys[[i, j]]) * scale;
            }
        }
        vec![Some(gq.into_dyn())]
    }
}

struct CrossEntropySpatialOp {
    target: Array3<usize>,
}
impl<F: Real> Backward<F> for CrossEntropySpatialOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let l = ctx.parents[0]
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, c, h, w) = l.dim();
        let scale = ctx.grad_out.iter().copied().next().unwrap() / F::of((n * h * w) as f64);
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for bn in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut mx = l[[bn, 0, y, x]];
                    for ch in 1..c {
                        mx = mx.max(l[[bn, ch, y, x]]);
                    }
                    let mut se = F::zero();
                    for ch in 0..c {
                        se = se + (l[[bn, ch, y, x]] - mx).exp();
                    }
                    let t = self.target[[bn, y, x]];
                    for ch in 0..c {
                        let p = (l[[bn, ch, y, x]] - mx).exp() / se;
                        let delta = if ch == t { F::one() } else { F::zero() };
                        gx[[bn, ch, y, x]] = (p - delta) * scale;
                    }
                }
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct CrossEntropyRowsOp {
    target: Vec<usize>,
}
impl<F: Real> Backward<F> for CrossEntropyRowsOp {
    fn backward(&self, ctx: BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> {
        let l = ctx.parents[0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let (n, k) = l.dim();
        let scale = ctx.grad_out.iter().copied().next().unwrap() / F::of(n as f64);
        let mut gx = Array2::<F>::zeros((n, k));
        for i in 0..n {
            let row = l.row(i);
            let mx = row.iter().copied().fold(F::min_value(), F::max);
            let se: F = row.iter().map(|&a| (a - mx).exp()).sum();
            for j in 0..k {
                let p = (row[j] - mx).exp() / se;
                let delta = if j == self.target[i] { F::one() } else { F::zero() };
                gx[[i, j]] = (p - delta) * scale;
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

/// Central finite differences of a scalar function, for gradient checks.
pub fn numeric_gradient<F: Real>(
    mut f: impl FnMut(&ArrayD<F>) -> F,
    x: &ArrayD<F>,
    eps: F,
) -> ArrayD<F> {
    let mut grad = ArrayD::<F>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (F::of(2.0) * eps);
    }
    grad
}

/// Max relative error between two gradients, with an absolute floor to
/// avoid blowing up on near-zero entries.
pub fn max_rel_error<F: Real>(analytic: &ArrayD<F>, numeric: &ArrayD<F>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(F::of(1e-6));
            ((a - n).abs() / denom).to_f64()
        })
        .fold(0.0, f64::max)
}
