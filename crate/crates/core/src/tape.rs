//! Wengert tape: reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] records every operation of a forward pass eagerly (values are
//! computed immediately) and replays the list in reverse to accumulate
//! vector-Jacobian products. One graph per forward pass; parameters are
//! registered as leaves and their gradients collected afterwards.
//!
//! The op set is exactly what a conditional U-Net needs: convolutions,
//! linears, batched matmuls for attention, group/layer norm, SiLU/GELU,
//! softmax, concat/slice/reshape plumbing and the mean-square loss head.
//! All kernels are single-threaded; replaying the same graph over the same
//! values is bitwise deterministic.

use crate::tensor::{gelu, gelu_grad, gemm_acc, silu, silu_grad, Elem, Tensor};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T: Elem> {
    Leaf,
    /// 2-D convolution; `cols` holds the saved im2col buffers (one per
    /// sample) unless the graph runs in inference mode or k = 1.
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize, cols: Vec<Vec<T>> },
    /// out = x · wᵀ (+ b); x is (..., in), w is (out, in).
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// Batched matmul (B,m,k)·(B,k,n).
    Bmm { a: NodeId, b: NodeId },
    /// Batched matmul with transposed rhs: (B,m,k)·(B,n,k)ᵀ.
    BmmNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    /// out = a + c·b, elementwise.
    AddScaled { a: NodeId, b: NodeId, c: T },
    /// x (B,C,H,W) plus a per-sample channel vector v (B,C).
    AddChannelBias { x: NodeId, v: NodeId },
    Silu { x: NodeId },
    Gelu { x: NodeId },
    /// Saved per-(sample, group) statistics: (mean, rstd) pairs.
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: Vec<(T, T)> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: Vec<(T, T)> },
    /// Softmax over the last dim; backward uses the stored output.
    Softmax { x: NodeId },
    /// Channel concatenation of two NCHW tensors.
    ConcatCh { a: NodeId, b: NodeId },
    /// Slice [start, start+len) of the last dim.
    SliceLast { x: NodeId, start: usize, len: usize },
    Reshape { x: NodeId },
    /// (B,m,n) -> (B,n,m).
    TransposeLast2 { x: NodeId },
    /// (B,n,h·d) -> (B·h,n,d).
    SplitHeads { x: NodeId, heads: usize },
    /// (B·h,n,d) -> (B,n,h·d).
    MergeHeads { x: NodeId, heads: usize },
    /// Nearest-neighbour 2x upsample of NCHW.
    Upsample2 { x: NodeId },
    /// Scalar mean of squared differences.
    MseMean { a: NodeId, b: NodeId },
    /// Scalar mean over all elements.
    MeanAll { x: NodeId },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward pass plus the machinery to differentiate it.
pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
    /// When false, buffers that exist only for the backward pass are not kept.
    training: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Elem> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), training: true }
    }

    /// A graph that skips backward-only buffers. `backward` must not be
    /// called on it.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), training: false }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Non-differentiable input (data, conditioning, noise).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a model parameter).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    // ── compound ops ─────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (bs, cin, h, width) = dims4(xv.dims());
        let wd = wv.dims();
        assert_eq!(wd.len(), 4, "conv weight must be 4-d");
        assert_eq!(wd[1], cin, "conv weight in-channels");
        let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (width + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

        let mut out = Tensor::zeros(&[bs, cout, ho, wo]);
        let mut cols_saved: Vec<Vec<T>> = Vec::new();
        {
            let xd = xv.data();
            let wdat = wv.data();
            let od = out.data_mut();
            let mut col = vec![T::ZERO; k * ho * wo];
            for s in 0..bs {
                let xs = &xd[s * cin * h * width..(s + 1) * cin * h * width];
                let os = &mut od[s * cout * ho * wo..(s + 1) * cout * ho * wo];
                if pointwise {
                    gemm_acc(cout, k, ho * wo, T::ONE, wdat, xs, T::ZERO, os);
                } else {
                    im2col(xs, cin, h, width, kh, kw, stride, pad, &mut col);
                    gemm_acc(cout, k, ho * wo, T::ONE, wdat, &col, T::ZERO, os);
                    if self.training {
                        cols_saved.push(col.clone());
                    }
                }
            }
        }
        if let Some(bid) = b {
            let bv = self.nodes[bid.0].value.data().to_vec();
            assert_eq!(bv.len(), cout);
            let od = out.data_mut();
            for s in 0..bs {
                for c in 0..cout {
                    let base = (s * cout + c) * ho * wo;
                    for i in 0..ho * wo {
                        od[base + i] += bv[c];
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad, cols: cols_saved }, rg)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let xd = xv.dims();
        let (n_out, k) = (wv.dims()[0], wv.dims()[1]);
        assert_eq!(*xd.last().unwrap(), k, "linear in-features");
        let m: usize = xd[..xd.len() - 1].iter().product();
        let mut out_dims = xd[..xd.len() - 1].to_vec();
        out_dims.push(n_out);
        let mut out = Tensor::zeros(&out_dims);
        gemm_nt_into(m, k, n_out, xv.data(), wv.data(), out.data_mut());
        if let Some(bid) = b {
            let bv = self.nodes[bid.0].value.data().to_vec();
            let od = out.data_mut();
            for r in 0..m {
                for c in 0..n_out {
                    od[r * n_out + c] += bv[c];
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (bs, m, k) = dims3(av.dims());
        let (bs2, k2, n) = dims3(bv.dims());
        assert!(bs == bs2 && k == k2, "bmm shapes {:?} x {:?}", av.dims(), bv.dims());
        let mut out = Tensor::zeros(&[bs, m, n]);
        for s in 0..bs {
            gemm_acc(m, k, n, T::ONE, &av.data()[s * m * k..], &bv.data()[s * k * n..], T::ZERO, &mut out.data_mut()[s * m * n..]);
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Bmm { a, b }, rg)
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (bs, m, k) = dims3(av.dims());
        let (bs2, n, k2) = dims3(bv.dims());
        assert!(bs == bs2 && k == k2, "bmm_nt shapes {:?} x {:?}", av.dims(), bv.dims());
        let mut out = Tensor::zeros(&[bs, m, n]);
        for s in 0..bs {
            gemm_nt_into(m, k, n, &av.data()[s * m * k..], &bv.data()[s * n * k..], &mut out.data_mut()[s * m * n..]);
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::BmmNt { a, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x.0].value.map(|t| t * c);
        let rg = self.needs(x);
        self.push(v, Op::Scale { x, c }, rg)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + c * y);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::AddScaled { a, b, c }, rg)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let (bs, c, h, w) = dims4(xv.dims());
        assert_eq!(vv.dims(), &[bs, c], "channel bias dims");
        let mut out = xv.clone();
        let od = out.data_mut();
        let vd = vv.data();
        for s in 0..bs {
            for ch in 0..c {
                let bias = vd[s * c + ch];
                let base = (s * c + ch) * h * w;
                for i in 0..h * w {
                    od[base + i] += bias;
                }
            }
        }
        let rg = self.needs(x) || self.needs(v);
        self.push(out, Op::AddChannelBias { x, v }, rg)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(silu);
        let rg = self.needs(x);
        self.push(v, Op::Silu { x }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(gelu);
        let rg = self.needs(x);
        self.push(v, Op::Gelu { x }, rg)
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (bs, c, h, w) = dims4(xv.dims());
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let gsize = (c / groups) * h * w;
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let bv = self.nodes[beta.0].value.data().to_vec();
        assert!(gv.len() == c && bv.len() == c);
        let mut out = Tensor::zeros(xv.dims());
        let mut stats = Vec::with_capacity(bs * groups);
        {
            let xd = xv.data();
            let od = out.data_mut();
            for s in 0..bs {
                for g in 0..groups {
                    let base = s * c * h * w + g * gsize;
                    let slab = &xd[base..base + gsize];
                    let mut mean = T::ZERO;
                    for &v in slab {
                        mean += v;
                    }
                    mean = mean / T::from_f64(gsize as f64);
                    let mut var = T::ZERO;
                    for &v in slab {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var / T::from_f64(gsize as f64);
                    let rstd = T::ONE / (var + eps).sqrt();
                    stats.push((mean, rstd));
                    let ch0 = g * (c / groups);
                    for cc in 0..c / groups {
                        let gm = gv[ch0 + cc];
                        let bt = bv[ch0 + cc];
                        for i in 0..h * w {
                            let idx = base + cc * h * w + i;
                            od[idx] = (xd[idx] - mean) * rstd * gm + bt;
                        }
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let dims = xv.dims().to_vec();
        let c = *dims.last().unwrap();
        let rows = xv.numel() / c;
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let bv = self.nodes[beta.0].value.data().to_vec();
        assert!(gv.len() == c && bv.len() == c);
        let mut out = Tensor::zeros(&dims);
        let mut stats = Vec::with_capacity(rows);
        {
            let xd = xv.data();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mut mean = T::ZERO;
                for &v in row {
                    mean += v;
                }
                mean = mean / T::from_f64(c as f64);
                let mut var = T::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / T::from_f64(c as f64);
                let rstd = T::ONE / (var + eps).sqrt();
                stats.push((mean, rstd));
                for i in 0..c {
                    od[r * c + i] = (row[i] - mean) * rstd * gv[i] + bv[i];
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, rg)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let dims = xv.dims().to_vec();
        let c = *dims.last().unwrap();
        let rows = xv.numel() / c;
        let mut out = Tensor::zeros(&dims);
        {
            let xd = xv.data();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::ZERO;
                for i in 0..c {
                    let e = (row[i] - mx).exp();
                    od[r * c + i] = e;
                    denom += e;
                }
                for i in 0..c {
                    od[r * c + i] = od[r * c + i] / denom;
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (bs, ca, h, w) = dims4(av.dims());
        let (bs2, cb, h2, w2) = dims4(bv.dims());
        assert!(bs == bs2 && h == h2 && w == w2, "concat_ch spatial dims");
        let mut out = Tensor::zeros(&[bs, ca + cb, h, w]);
        {
            let od = out.data_mut();
            let (ad, bd) = (av.data(), bv.data());
            let plane = h * w;
            for s in 0..bs {
                let dst = s * (ca + cb) * plane;
                od[dst..dst + ca * plane].copy_from_slice(&ad[s * ca * plane..(s + 1) * ca * plane]);
                od[dst + ca * plane..dst + (ca + cb) * plane].copy_from_slice(&bd[s * cb * plane..(s + 1) * cb * plane]);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCh { a, b }, rg)
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let dims = xv.dims().to_vec();
        let c = *dims.last().unwrap();
        assert!(start + len <= c);
        let rows = xv.numel() / c;
        let mut out_dims = dims.clone();
        *out_dims.last_mut().unwrap() = len;
        let mut out = Tensor::zeros(&out_dims);
        {
            let od = out.data_mut();
            let xd = xv.data();
            for r in 0..rows {
                od[r * len..(r + 1) * len].copy_from_slice(&xd[r * c + start..r * c + start + len]);
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::SliceLast { x, start, len }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        let v = self.nodes[x.0].value.reshaped(dims);
        let rg = self.needs(x);
        self.push(v, Op::Reshape { x }, rg)
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (bs, m, n) = dims3(xv.dims());
        let mut out = Tensor::zeros(&[bs, n, m]);
        transpose_batch(xv.data(), out.data_mut(), bs, m, n);
        let rg = self.needs(x);
        self.push(out, Op::TransposeLast2 { x }, rg)
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (bs, n, hd) = dims3(xv.dims());
        assert_eq!(hd % heads, 0);
        let d = hd / heads;
        let mut out = Tensor::zeros(&[bs * heads, n, d]);
        split_heads_copy(xv.data(), out.data_mut(), bs, n, heads, d);
        let rg = self.needs(x);
        self.push(out, Op::SplitHeads { x, heads }, rg)
    }

    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (bh, n, d) = dims3(xv.dims());
        assert_eq!(bh % heads, 0);
        let bs = bh / heads;
        let mut out = Tensor::zeros(&[bs, n, heads * d]);
        merge_heads_copy(xv.data(), out.data_mut(), bs, n, heads, d);
        let rg = self.needs(x);
        self.push(out, Op::MergeHeads { x, heads }, rg)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (bs, c, h, w) = dims4(xv.dims());
        let mut out = Tensor::zeros(&[bs, c, 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            for p in 0..bs * c {
                let src = p * h * w;
                let dst = p * 4 * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let v = xd[src + i * w + j];
                        let r0 = dst + (2 * i) * 2 * w + 2 * j;
                        let r1 = dst + (2 * i + 1) * 2 * w + 2 * j;
                        od[r0] = v;
                        od[r0 + 1] = v;
                        od[r1] = v;
                        od[r1 + 1] = v;
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dims(), bv.dims());
        let mut acc = T::ZERO;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = x - y;
            acc += d * d;
        }
        let v = Tensor::scalar(acc / T::from_f64(av.numel() as f64));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::MseMean { a, b }, rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut acc = T::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let v = Tensor::scalar(acc / T::from_f64(xv.numel() as f64));
        let rg = self.needs(x);
        self.push(v, Op::MeanAll { x }, rg)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node; seeds its gradient with one.
    pub fn backward(&mut self, loss: NodeId) -> Gradients<T> {
        assert!(self.training, "backward on an inference graph");
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                assert_eq!(existing.dims(), delta.dims());
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        // Bitwise determinism relies on fixed iteration order everywhere here.
        match &self.nodes[idx].op {
            Op::Leaf => {}

            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (bs, cin, h, width) = dims4(xv.dims());
                let wd = wv.dims();
                let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
                let (s, p) = (*stride, *pad);
                let ho = (h + 2 * p - kh) / s + 1;
                let wo = (width + 2 * p - kw) / s + 1;
                let k = cin * kh * kw;
                let pointwise = kh == 1 && kw == 1 && s == 1 && p == 0;
                assert!(pointwise || cols.len() == bs, "conv cols missing: inference graph used for training?");

                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.dims());
                    for smp in 0..bs {
                        let go = &gout.data()[smp * cout * ho * wo..];
                        let colref: &[T] = if pointwise { &xv.data()[smp * cin * h * width..(smp + 1) * cin * h * width] } else { &cols[smp] };
                        // dW += gOut (cout×how) · colsᵀ (how×k)
                        gemm_nt_acc(cout, ho * wo, k, go, colref, dw.data_mut());
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    let mut dcol = vec![T::ZERO; k * ho * wo];
                    for smp in 0..bs {
                        let go = &gout.data()[smp * cout * ho * wo..smp * cout * ho * wo + cout * ho * wo];
                        if pointwise {
                            gemm_tn_into(k, cout, ho * wo, wv.data(), go, &mut dx.data_mut()[smp * cin * h * width..(smp + 1) * cin * h * width]);
                        } else {
                            gemm_tn_into(k, cout, ho * wo, wv.data(), go, &mut dcol);
                            col2im_acc(&dcol, cin, h, width, kh, kw, s, p, &mut dx.data_mut()[smp * cin * h * width..(smp + 1) * cin * h * width]);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let mut db = Tensor::zeros(&[cout]);
                        let dbd = db.data_mut();
                        for smp in 0..bs {
                            for c in 0..cout {
                                let base = (smp * cout + c) * ho * wo;
                                for i in 0..ho * wo {
                                    dbd[c] += gout.data()[base + i];
                                }
                            }
                        }
                        self.accumulate(grads, *bid, db);
                    }
                }
            }

            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n_out, k) = (wv.dims()[0], wv.dims()[1]);
                let m = xv.numel() / k;
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    // dX (m×k) = gOut (m×n) · W (n×k)
                    gemm_acc(m, n_out, k, T::ONE, gout.data(), wv.data(), T::ZERO, dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.dims());
                    // dW (n×k) = gOutᵀ (n×m) · X (m×k)
                    gemm_tn_into(n_out, m, k, gout.data(), xv.data(), dw.data_mut());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let mut db = Tensor::zeros(&[n_out]);
                        let dbd = db.data_mut();
                        for r in 0..m {
                            for c in 0..n_out {
                                dbd[c] += gout.data()[r * n_out + c];
                            }
                        }
                        self.accumulate(grads, *bid, db);
                    }
                }
            }

            Op::Bmm { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bs, m, k) = dims3(av.dims());
                let n = bv.dims()[2];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.dims());
                    for s in 0..bs {
                        gemm_nt_into(m, n, k, &gout.data()[s * m * n..], &bv.data()[s * k * n..], &mut da.data_mut()[s * m * k..]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.dims());
                    for s in 0..bs {
                        gemm_tn_into(k, m, n, &av.data()[s * m * k..], &gout.data()[s * m * n..], &mut db.data_mut()[s * k * n..]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }

            Op::BmmNt { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bs, m, k) = dims3(av.dims());
                let n = bv.dims()[1];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.dims());
                    for s in 0..bs {
                        // dA = gOut (m×n) · B (n×k)
                        gemm_acc(m, n, k, T::ONE, &gout.data()[s * m * n..], &bv.data()[s * n * k..], T::ZERO, &mut da.data_mut()[s * m * k..]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.dims());
                    for s in 0..bs {
                        // dB = gOutᵀ (n×m) · A (m×k)
                        gemm_tn_into(n, m, k, &gout.data()[s * m * n..], &av.data()[s * m * k..], &mut db.data_mut()[s * n * k..]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }

            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gout.zip_map(&self.nodes[b.0].value, |g, y| g * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gout.zip_map(&self.nodes[a.0].value, |g, x| g * x));
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, gout.map(|g| g * c));
            }
            Op::AddScaled { a, b, c } => {
                let c = *c;
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|g| g * c));
            }

            Op::AddChannelBias { x, v } => {
                let (bs, c, h, w) = dims4(self.nodes[x.0].value.dims());
                self.accumulate(grads, *x, gout.clone());
                if self.needs(*v) {
                    let mut dv = Tensor::zeros(&[bs, c]);
                    let dvd = dv.data_mut();
                    for s in 0..bs {
                        for ch in 0..c {
                            let base = (s * c + ch) * h * w;
                            for i in 0..h * w {
                                dvd[s * c + ch] += gout.data()[base + i];
                            }
                        }
                    }
                    self.accumulate(grads, *v, dv);
                }
            }

            Op::Silu { x } => {
                let dx = gout.zip_map(&self.nodes[x.0].value, |g, v| g * silu_grad(v));
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let dx = gout.zip_map(&self.nodes[x.0].value, |g, v| g * gelu_grad(v));
                self.accumulate(grads, *x, dx);
            }

            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xv = &self.nodes[x.0].value;
                let gv = self.nodes[gamma.0].value.data();
                let (bs, c, h, w) = dims4(xv.dims());
                let cpg = c / groups;
                let gsize = cpg * h * w;
                let xd = xv.data();
                let god = gout.data();

                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    let dxd = dx.data_mut();
                    for s in 0..bs {
                        for g in 0..*groups {
                            let (mean, rstd) = stats[s * groups + g];
                            let base = s * c * h * w + g * gsize;
                            let ch0 = g * cpg;
                            // sums of dxhat and dxhat*xhat over the group
                            let mut sum_dxh = T::ZERO;
                            let mut sum_dxh_xh = T::ZERO;
                            for cc in 0..cpg {
                                let gm = gv[ch0 + cc];
                                for i in 0..h * w {
                                    let idx = base + cc * h * w + i;
                                    let xh = (xd[idx] - mean) * rstd;
                                    let dxh = god[idx] * gm;
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * xh;
                                }
                            }
                            let n = T::from_f64(gsize as f64);
                            for cc in 0..cpg {
                                let gm = gv[ch0 + cc];
                                for i in 0..h * w {
                                    let idx = base + cc * h * w + i;
                                    let xh = (xd[idx] - mean) * rstd;
                                    let dxh = god[idx] * gm;
                                    dxd[idx] = rstd * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    for s in 0..bs {
                        for g in 0..*groups {
                            let (mean, rstd) = stats[s * groups + g];
                            let base = s * c * h * w + g * gsize;
                            let ch0 = g * cpg;
                            for cc in 0..cpg {
                                let mut dg = T::ZERO;
                                let mut db = T::ZERO;
                                for i in 0..h * w {
                                    let idx = base + cc * h * w + i;
                                    dg += god[idx] * (xd[idx] - mean) * rstd;
                                    db += god[idx];
                                }
                                dgamma.data_mut()[ch0 + cc] += dg;
                                dbeta.data_mut()[ch0 + cc] += db;
                            }
                        }
                    }
                    self.accumulate(grads, *gamma, dgamma);
                    self.accumulate(grads, *beta, dbeta);
                }
            }

            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = &self.nodes[x.0].value;
                let gv = self.nodes[gamma.0].value.data();
                let c = *xv.dims().last().unwrap();
                let rows = xv.numel() / c;
                let xd = xv.data();
                let god = gout.data();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    let dxd = dx.data_mut();
                    let n = T::from_f64(c as f64);
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let mut sum_dxh = T::ZERO;
                        let mut sum_dxh_xh = T::ZERO;
                        for i in 0..c {
                            let xh = (xd[r * c + i] - mean) * rstd;
                            let dxh = god[r * c + i] * gv[i];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for i in 0..c {
                            let xh = (xd[r * c + i] - mean) * rstd;
                            let dxh = god[r * c + i] * gv[i];
                            dxd[r * c + i] = rstd * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        for i in 0..c {
                            dgamma.data_mut()[i] += god[r * c + i] * (xd[r * c + i] - mean) * rstd;
                            dbeta.data_mut()[i] += god[r * c + i];
                        }
                    }
                    self.accumulate(grads, *gamma, dgamma);
                    self.accumulate(grads, *beta, dbeta);
                }
            }

            Op::Softmax { x } => {
                let yv = &self.nodes[idx].value;
                let c = *yv.dims().last().unwrap();
                let rows = yv.numel() / c;
                let mut dx = Tensor::zeros(yv.dims());
                {
                    let dxd = dx.data_mut();
                    let yd = yv.data();
                    let god = gout.data();
                    for r in 0..rows {
                        let mut dot = T::ZERO;
                        for i in 0..c {
                            dot += god[r * c + i] * yd[r * c + i];
                        }
                        for i in 0..c {
                            dxd[r * c + i] = yd[r * c + i] * (god[r * c + i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }

            Op::ConcatCh { a, b } => {
                let (bs, ca, h, w) = dims4(self.nodes[a.0].value.dims());
                let cb = self.nodes[b.0].value.dims()[1];
                let plane = h * w;
                if self.needs(*a) {
                    let mut da = Tensor::zeros(self.nodes[a.0].value.dims());
                    for s in 0..bs {
                        let src = s * (ca + cb) * plane;
                        da.data_mut()[s * ca * plane..(s + 1) * ca * plane].copy_from_slice(&gout.data()[src..src + ca * plane]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(self.nodes[b.0].value.dims());
                    for s in 0..bs {
                        let src = s * (ca + cb) * plane + ca * plane;
                        db.data_mut()[s * cb * plane..(s + 1) * cb * plane].copy_from_slice(&gout.data()[src..src + cb * plane]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }

            Op::SliceLast { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let c = *xv.dims().last().unwrap();
                let rows = xv.numel() / c;
                let mut dx = Tensor::zeros(xv.dims());
                for r in 0..rows {
                    dx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(&gout.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }

            Op::Reshape { x } => {
                let dims = self.nodes[x.0].value.dims().to_vec();
                self.accumulate(grads, *x, gout.reshaped(&dims));
            }

            Op::TransposeLast2 { x } => {
                let (bs, m, n) = dims3(self.nodes[x.0].value.dims());
                // gout is (bs, n, m); transpose back
                let mut dx = Tensor::zeros(&[bs, m, n]);
                transpose_batch(gout.data(), dx.data_mut(), bs, n, m);
                self.accumulate(grads, *x, dx);
            }

            Op::SplitHeads { x, heads } => {
                let (bs, n, hd) = dims3(self.nodes[x.0].value.dims());
                let d = hd / heads;
                let mut dx = Tensor::zeros(&[bs, n, hd]);
                merge_heads_copy(gout.data(), dx.data_mut(), bs, n, *heads, d);
                self.accumulate(grads, *x, dx);
            }

            Op::MergeHeads { x, heads } => {
                let (bh, n, d) = dims3(self.nodes[x.0].value.dims());
                let bs = bh / heads;
                let mut dx = Tensor::zeros(&[bh, n, d]);
                split_heads_copy(gout.data(), dx.data_mut(), bs, n, *heads, d);
                self.accumulate(grads, *x, dx);
            }

            Op::Upsample2 { x } => {
                let (bs, c, h, w) = dims4(self.nodes[x.0].value.dims());
                let mut dx = Tensor::zeros(&[bs, c, h, w]);
                {
                    let dxd = dx.data_mut();
                    let god = gout.data();
                    for p in 0..bs * c {
                        let dst = p * h * w;
                        let src = p * 4 * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let r0 = src + (2 * i) * 2 * w + 2 * j;
                                let r1 = src + (2 * i + 1) * 2 * w + 2 * j;
                                dxd[dst + i * w + j] = god[r0] + god[r0 + 1] + god[r1] + god[r1 + 1];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }

            Op::MseMean { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let g = gout.data()[0];
                let scale = T::from_f64(2.0 / av.numel() as f64) * g;
                if self.needs(*a) {
                    self.accumulate(grads, *a, av.zip_map(bv, |x, y| scale * (x - y)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, av.zip_map(bv, |x, y| -scale * (x - y)));
                }
            }

            Op::MeanAll { x } => {
                let xv = &self.nodes[x.0].value;
                let g = gout.data()[0] / T::from_f64(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::filled(xv.dims(), g));
            }
        }
    }
}

// ── shape helpers and raw kernels ───────────────────────────────────────

fn dims4(d: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(d.len(), 4, "expected 4-d tensor, got {:?}", d);
    (d[0], d[1], d[2], d[3])
}

fn dims3(d: &[usize]) -> (usize, usize, usize) {
    assert_eq!(d.len(), 3, "expected 3-d tensor, got {:?}", d);
    (d[0], d[1], d[2])
}

/// C (m×n) = A (m×k) · B (n×k)ᵀ.
fn gemm_nt_into<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_strided(m, k, n, T::ONE, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, T::ZERO, c.as_mut_ptr());
    }
}

/// Accumulating variant: C (m×n) += A (m×k) · B (n×k)ᵀ.
fn gemm_nt_acc<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_strided(m, k, n, T::ONE, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, T::ONE, c.as_mut_ptr());
    }
}

/// C (m×n) = A (k×m)ᵀ · B (k×n).
fn gemm_tn_into<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_strided(m, k, n, T::ONE, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, T::ZERO, c.as_mut_ptr());
    }
}

unsafe fn gemm_strided<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
) {
    // Route through the two concrete matrixmultiply entry points.
    if T::DTYPE == crate::tensor::Dtype::F32 {
        matrixmultiply::sgemm(m, k, n, alpha.to_f64() as f32, a as *const f32, rsa, csa, b as *const f32, rsb, csb, beta.to_f64() as f32, c as *mut f32, n as isize, 1)
    } else {
        matrixmultiply::dgemm(m, k, n, alpha.to_f64(), a as *const f64, rsa, csa, b as *const f64, rsb, csb, beta.to_f64(), c as *mut f64, n as isize, 1)
    }
}

fn transpose_batch<T: Elem>(src: &[T], dst: &mut [T], bs: usize, m: usize, n: usize) {
    for s in 0..bs {
        let sb = s * m * n;
        for i in 0..m {
            for j in 0..n {
                dst[sb + j * m + i] = src[sb + i * n + j];
            }
        }
    }
}

fn split_heads_copy<T: Elem>(src: &[T], dst: &mut [T], bs: usize, n: usize, heads: usize, d: usize) {
    for b in 0..bs {
        for t in 0..n {
            for h in 0..heads {
                let s_off = (b * n + t) * heads * d + h * d;
                let d_off = ((b * heads + h) * n + t) * d;
                dst[d_off..d_off + d].copy_from_slice(&src[s_off..s_off + d]);
            }
        }
    }
}

fn merge_heads_copy<T: Elem>(src: &[T], dst: &mut [T], bs: usize, n: usize, heads: usize, d: usize) {
    for b in 0..bs {
        for h in 0..heads {
            for t in 0..n {
                let s_off = ((b * heads + h) * n + t) * d;
                let d_off = (b * n + t) * heads * d + h * d;
                dst[d_off..d_off + d].copy_from_slice(&src[s_off..s_off + d]);
            }
        }
    }
}

fn im2col<T: Elem>(x: &[T], cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, col: &mut [T]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(col.len(), cin * kh * kw * ho * wo);
    let mut row = 0;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let mut o = 0;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        for v in dst[o..o + wo].iter_mut() {
                            *v = T::ZERO;
                        }
                        o += wo;
                        continue;
                    }
                    let src_row = c * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        dst[o] = if jj < 0 || jj >= w as isize { T::ZERO } else { x[src_row + jj as usize] };
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_acc<T: Elem>(col: &[T], cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, x: &mut [T]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut row = 0;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let mut o = 0;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        o += wo;
                        continue;
                    }
                    let dst_row = c * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            x[dst_row + jj as usize] += src[o];
                        }
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(r: &mut rng::Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng::uniform_in(r, -1.0, 1.0)).collect())
    }

    /// Central finite differences on an arbitrary scalar-valued builder.
    fn check_grad(dims_in: &[usize], build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId) {
        let mut r = rng::seeded(11);
        let x0 = rand_tensor(&mut r, dims_in);

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        let mut grads = g.backward(loss);
        let analytic = grads.take(x).expect("grad flowed to x");

        let h = 1e-6;
        for probe in 0..x0.numel().min(24) {
            let mut plus = x0.clone();
            plus.data_mut()[probe] += h;
            let mut minus = x0.clone();
            minus.data_mut()[probe] -= h;
            let mut gp = Graph::new();
            let xp = gp.param(plus);
            let lp_node = build(&mut gp, xp);
            let lp = gp.value(lp_node).data()[0];
            let mut gm = Graph::new();
            let xm = gm.param(minus);
            let lm_node = build(&mut gm, xm);
            let lm = gm.value(lm_node).data()[0];
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.data()[probe];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < 1e-5,
                "grad mismatch at {probe}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = rng::seeded(3);
        let w0 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_tensor(&mut rng, &[3]);
        check_grad(&[2, 2, 5, 5], |g, x| {
            let w = g.param(w0.clone());
            let b = g.param(b0.clone());
            let y = g.conv2d(x, w, Some(b), 1, 1);
            let z = Tensor::zeros(g.value(y).dims());
            let t = g.input(z);
            g.mse_mean(y, t)
        });
    }

    #[test]
    fn conv2d_strided_and_pointwise_grad() {
        let mut rng = rng::seeded(4);
        let w0 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let p0 = rand_tensor(&mut rng, &[2, 4, 1, 1]);
        check_grad(&[1, 3, 6, 6], |g, x| {
            let w = g.param(w0.clone());
            let y = g.conv2d(x, w, None, 2, 1);
            let pw = g.param(p0.clone());
            let y2 = g.conv2d(y, pw, None, 1, 0);
            let z = Tensor::zeros(g.value(y2).dims());
            let t = g.input(z);
            g.mse_mean(y2, t)
        });
    }

    #[test]
    fn norm_grads() {
        let mut rng = rng::seeded(5);
        let gamma = rand_tensor(&mut rng, &[4]).map(|v| v + 1.5);
        let beta = rand_tensor(&mut rng, &[4]);
        let target_gn = rand_tensor(&mut rng, &[2, 4, 3, 3]);
        let target_ln = rand_tensor(&mut rng, &[3, 5, 4]);
        check_grad(&[2, 4, 3, 3], |g, x| {
            let gm = g.param(gamma.clone());
            let bt = g.param(beta.clone());
            let y = g.group_norm(x, gm, bt, 2, 1e-5);
            let t = g.input(target_gn.clone());
            g.mse_mean(y, t)
        });
        check_grad(&[3, 5, 4], |g, x| {
            let gm = g.param(Tensor::filled(&[4], 1.1));
            let bt = g.param(Tensor::filled(&[4], -0.2));
            let y = g.layer_norm(x, gm, bt, 1e-5);
            let t = g.input(target_ln.clone());
            g.mse_mean(y, t)
        });
    }

    #[test]
    fn attention_shaped_pipeline_grad() {
        // softmax(q kᵀ / s) v with head split/merge, the exact attention wiring.
        let mut rng = rng::seeded(6);
        let k0 = rand_tensor(&mut rng, &[2, 5, 8]);
        let v0 = rand_tensor(&mut rng, &[2, 5, 8]);
        check_grad(&[2, 4, 8], |g, x| {
            let k = g.param(k0.clone());
            let v = g.param(v0.clone());
            let (heads, scale) = (2, 0.5);
            let qh = g.split_heads(x, heads);
            let kh = g.split_heads(k, heads);
            let vh = g.split_heads(v, heads);
            let scores = g.bmm_nt(qh, kh);
            let scaled = g.scale(scores, scale);
            let att = g.softmax_last(scaled);
            let ctx = g.bmm(att, vh);
            let merged = g.merge_heads(ctx, heads);
            let z = Tensor::zeros(g.value(merged).dims());
            let t = g.input(z);
            g.mse_mean(merged, t)
        });
    }

    #[test]
    fn plumbing_op_grads() {
        check_grad(&[2, 3, 4, 4], |g, x| {
            let up = g.upsample2(x);
            let s = g.silu(up);
            let other = g.input(Tensor::filled(&[2, 2, 8, 8], 0.1));
            let oth_sliced = g.input(Tensor::filled(&[2, 3, 8, 8], -0.2));
            let cat = g.concat_ch(s, oth_sliced);
            let _ = other;
            let z = Tensor::zeros(g.value(cat).dims());
            let t = g.input(z);
            g.mse_mean(cat, t)
        });
        check_grad(&[2, 6], |g, x| {
            let a = g.slice_last(x, 0, 3);
            let b = g.slice_last(x, 3, 3);
            let gb = g.gelu(b);
            let prod = g.mul(a, gb);
            let m = g.mean_all(prod);
            let sq = g.mul(m, m);
            g.reshape(sq, &[1])
        });
    }

    #[test]
    fn linear_and_bias_grads() {
        let mut rng = rng::seeded(7);
        let w0 = rand_tensor(&mut rng, &[5, 6]);
        let b0 = rand_tensor(&mut rng, &[5]);
        check_grad(&[3, 4, 6], |g, x| {
            let w = g.param(w0.clone());
            let b = g.param(b0.clone());
            let y = g.linear(x, w, Some(b));
            let z = Tensor::zeros(g.value(y).dims());
            let t = g.input(z);
            g.mse_mean(y, t)
        });
        check_grad(&[2, 3], |g, v| {
            let x = g.input(Tensor::filled(&[2, 3, 4, 4], 0.7));
            let y = g.add_channel_bias(x, v);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        });
    }

    #[test]
    fn inference_graph_skips_conv_buffers() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::filled(&[1, 2, 4, 4], 1.0));
        let w = g.input(Tensor::filled(&[3, 2, 3, 3], 0.5));
        let y = g.conv2d(x, w, None, 1, 1);
        assert_eq!(g.value(y).dims(), &[1, 3, 4, 4]);
        match &g.nodes[y.0].op {
            Op::Conv2d { cols, .. } => assert!(cols.is_empty()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn same_graph_twice_is_bitwise_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let mut rng = rng::seeded(2);
            let n = 2 * 3 * 4 * 4;
            let x = g.input(Tensor::from_vec(&[2, 3, 4, 4], (0..n).map(|_| rng::uniform(&mut rng) as f32).collect()));
            let w = g.param(Tensor::from_vec(&[3, 3, 3, 3], (0..81).map(|_| rng::uniform(&mut rng) as f32).collect()));
            let y = g.conv2d(x, w, None, 1, 1);
            let gn_g = g.param(Tensor::filled(&[3], 1.0));
            let gn_b = g.param(Tensor::filled(&[3], 0.0));
            let y = g.group_norm(y, gn_g, gn_b, 3, 1e-5);
            let y = g.silu(y);
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
