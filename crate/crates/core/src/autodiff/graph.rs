use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    ConcatLast {
        inputs: Vec<Var>,
    },
    SliceLast {
        a: Var,
        from: usize,
        to: usize,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    SliceRows {
        a: Var,
        from: usize,
    },
    GatherRows {
        a: Var,
        index: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample {
        a: Var,
        rows: AxisInterp,
        cols: AxisInterp,
    },
    Sum {
        a: Var,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    BoxLoss {
        pred: Var,
        dpred: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Per-axis bilinear sampling table (two taps per output coordinate).
#[derive(Clone, Debug)]
struct AxisInterp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisInterp {
    /// Half-pixel-centre mapping, clamped at the borders.
    fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(s - i0 as f64);
        }
        AxisInterp { lo, hi, w_hi }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Operations are recorded in execution order, so the node list is already
/// topologically sorted; `backward` walks it once in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
    track_params: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `c[m×n] = op(a)[m×k] · op(b)[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access by the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    trimmed.len() <= a.len() && a[a.len() - trimmed.len()..] == trimmed[..]
}

impl Graph {
    /// Graph in which parameters are differentiable leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            track_params: true,
            backward_done: false,
        }
    }

    /// Graph for forward-only evaluation; parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            self.track_params,
        );
        self.param_lookup.insert(id, v);
        self.params.push((id, v));
        v
    }

    /// Parameter gradients in first-use order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }

    /// Adds this graph's parameter gradients into `store`, scaled by `scale`.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g, scale);
        }
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    // ---- elementwise --------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::dim(name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let bl = vb.len();
        let out = if bl == 0 {
            Vec::new()
        } else {
            va.iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % bl]))
                .collect()
        };
        Ok((sa.to_vec(), out, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Sigmoid { a }, rg)
    }

    /// Numerically stable row softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax_rows", &shape, &[]))?;
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = vec![0.0; x.len()];
        if n > 0 {
            for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                softmax_into(src, dst);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SoftmaxRows { a }, rg))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::dim("layer_norm", &shape, &[]));
        }
        if self.shape(gamma).iter().product::<usize>() != n
            || self.shape(beta).iter().product::<usize>() != n
        {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- structural ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), v, Op::Reshape { a }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose { a }, rg))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat_last of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::ConcatLast {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `[from, to)` of the last dimension.
    pub fn slice_last(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap_or(&0);
        if from > to || to > n {
            return Err(Error::Bounds {
                op: "slice_last",
                from,
                to,
                extent: n,
            });
        }
        let rows = self.value(a).len() / n.max(1);
        let w = to - from;
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&x[r * n + from..r * n + to]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = w;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SliceLast { a, from, to }, rg))
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(v));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `[from, to)` of the first dimension.
    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let m = s[0];
        if from > to || to > m {
            return Err(Error::Bounds {
                op: "slice_rows",
                from,
                to,
                extent: m,
            });
        }
        let stride = numel(&s[1..]);
        let out = self.value(a)[from * stride..to * stride].to_vec();
        let mut shape = s;
        shape[0] = to - from;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SliceRows { a, from }, rg))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let stride = numel(&s[1..]);
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Bounds {
                op: "gather_rows",
                from: bad,
                to: bad + 1,
                extent: s[0],
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(index.len() * stride);
        for &i in index {
            out.extend_from_slice(&x[i * stride..(i + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    // ---- convolution and resampling ----------------------------------

    /// Cross-correlation of `x: [C×H×W]` with `w: [C'×C×kh×kw]`, optional bias `[C']`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if numel(self.shape(b)) != c_out {
                return Err(Error::dim("conv2d bias", &sw, self.shape(b)));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(self.value(x), &geom);
        let ckk = c_in * kh * kw;
        let p = oh * ow;
        let mut out = vec![0.0; c_out * p];
        gemm(c_out, ckk, p, self.value(w), false, &cols, false, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            for (o, row) in out.chunks_exact_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[o]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![c_out, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Bilinear resize of `[C×H×W]` to `[C×out_h×out_w]` (half-pixel centres).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::dim("upsample_bilinear", &s, &[out_h, out_w]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = AxisInterp::new(h, out_h);
        let cols = AxisInterp::new(w, out_w);
        let x = self.value(a);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, wy) = (rows.lo[oy], rows.hi[oy], rows.w_hi[oy]);
                for ox in 0..out_w {
                    let (x0, x1, wx) = (cols.lo[ox], cols.hi[ox], cols.w_hi[ox]);
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Upsample { a, rows, cols }, rg))
    }

    // ---- reductions and losses ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σᵢ weights[i] · CE(softmax(logits[i]), targets[i])` over rows of a 2-D tensor.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(Error::dim("cross_entropy_rows", &s, &[targets.len()]));
        }
        let (m, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!(
                "class index {t} out of range for {c} classes"
            )));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            let row = &x[i * c..(i + 1) * c];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - row[targets[i]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σᵢ l1_weight·‖pred[i] − target[i]‖₁ + giou_weight·(1 − GIoU(pred[i], target[i]))`
    /// for `pred: [k×4]` in (cx, cy, w, h) form.
    pub fn box_loss(
        &mut self,
        pred: Var,
        targets: &[BBox],
        l1_weight: f64,
        giou_weight: f64,
    ) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 4 || s[0] != targets.len() {
            return Err(Error::dim("box_loss", &s, &[targets.len(), 4]));
        }
        let x = self.value(pred);
        let mut total = 0.0;
        let mut dpred = vec![0.0; x.len()];
        for (i, t) in targets.iter().enumerate() {
            let p = BBox::from_slice(&x[i * 4..i * 4 + 4]);
            let (l1, dl1) = geometry::l1_with_grad(&p, t);
            let (g, dg) = geometry::giou_with_grad(&p, t);
            total += l1_weight * l1 + giou_weight * (1.0 - g);
            for k in 0..4 {
                dpred[i * 4 + k] = l1_weight * dl1[k] - giou_weight * dg[k];
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(vec![1], vec![total], Op::BoxLoss { pred, dpred }, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A second call without
    /// [`Graph::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = numel(&self.nodes[v.0].shape);
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // The op is moved out for the duration of the call so that input
        // gradient buffers can be borrowed mutably alongside saved state.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
                let (m, k) = (sa[0], sa[1]);
                let n = if trans_b { sb[0] } else { sb[1] };
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let da = self.grad_buf(a).unwrap();
                    // dA = dC · Bᵀ   (or dC · B when B entered transposed)
                    gemm(m, n, k, g, false, &bv, !trans_b, da, 1.0);
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let db = self.grad_buf(b).unwrap();
                    if trans_b {
                        gemm(n, m, k, g, true, &av, false, db, 1.0);
                    } else {
                        gemm(k, m, n, &av, true, g, false, db, 1.0);
                    }
                    self.nodes[a.0].value = av;
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(da) = self.grad_buf(a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(db) = self.grad_buf(b) {
                    let bl = db.len();
                    for (i, v) in g.iter().enumerate() {
                        db[i % bl] += sign * v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let bl = bv.len();
                    let da = self.grad_buf(a).unwrap();
                    for (i, v) in g.iter().enumerate() {
                        da[i] += v * bv[i % bl];
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let db = self.grad_buf(b).unwrap();
                    let bl = db.len();
                    for (i, v) in g.iter().enumerate() {
                        db[i % bl] += v * av[i];
                    }
                    self.nodes[a.0].value = av;
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = self.grad_buf(a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if let Some(da) = self.grad_buf(a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Relu { a } => {
                let x = std::mem::take(&mut self.nodes[a.0].value);
                if let Some(da) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
                self.nodes[a.0].value = x;
            }
            &Op::Sigmoid { a } => {
                let y = std::mem::take(&mut self.nodes[idx].value);
                if let Some(da) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                self.nodes[idx].value = y;
            }
            &Op::SoftmaxRows { a } => {
                let n = *self.nodes[idx].shape.last().unwrap();
                let y = std::mem::take(&mut self.nodes[idx].value);
                if let Some(da) = self.grad_buf(a) {
                    for r in 0..y.len() / n.max(1) {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            da[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.nodes[idx].value = y;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = *self.nodes[x.0].shape.last().unwrap();
                let rows = xhat.len() / n;
                if let Some(db) = self.grad_buf(beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                }
                if let Some(dg) = self.grad_buf(gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(x) {
                    let gv = self.nodes[gamma.0].value.clone();
                    let dx = self.grad_buf(x).unwrap();
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Transpose { a } => {
                let s = self.nodes[a.0].shape.clone();
                let (m, n) = (s[0], s[1]);
                if let Some(da) = self.grad_buf(a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatLast { inputs } => {
                let total = *self.nodes[idx].shape.last().unwrap();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &v in inputs {
                    let w = *self.nodes[v.0].shape.last().unwrap();
                    if let Some(dv) = self.grad_buf(v) {
                        for r in 0..rows {
                            for j in 0..w {
                                dv[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceLast { a, from, to } => {
                let n = *self.nodes[a.0].shape.last().unwrap();
                let w = to - from;
                if let Some(da) = self.grad_buf(a) {
                    let rows = da.len() / n.max(1);
                    for r in 0..rows {
                        for j in 0..w {
                            da[r * n + from + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = numel(&self.nodes[v.0].shape);
                    if let Some(dv) = self.grad_buf(v) {
                        dv.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, x)| *d += x);
                    }
                    offset += len;
                }
            }
            &Op::SliceRows { a, from, .. } => {
                let stride = numel(&self.nodes[a.0].shape[1..]);
                if let Some(da) = self.grad_buf(a) {
                    da[from * stride..from * stride + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::GatherRows { a, index } => {
                let stride = numel(&self.nodes[a.0].shape[1..]);
                if let Some(da) = self.grad_buf(*a) {
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..stride {
                            da[i * stride + j] += g[k * stride + j];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let ckk = geom.c_in * geom.kh * geom.kw;
                let p = geom.oh * geom.ow;
                if let Some(b) = b {
                    if let Some(db) = self.grad_buf(b) {
                        for (o, row) in g.chunks_exact(p).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(dw) = self.grad_buf(w) {
                    gemm(geom.c_out, p, ckk, g, false, cols, true, dw, 1.0);
                }
                if self.rg(x) {
                    let wv = std::mem::take(&mut self.nodes[w.0].value);
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, geom.c_out, p, &wv, true, g, false, &mut dcols, 0.0);
                    self.nodes[w.0].value = wv;
                    let dx = self.grad_buf(x).unwrap();
                    col2im_add(&dcols, &geom, dx);
                }
            }
            Op::Upsample { a, rows, cols } => {
                let s = self.nodes[a.0].shape.clone();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                if let Some(da) = self.grad_buf(*a) {
                    for ch in 0..c {
                        let src = &mut da[ch * h * w..(ch + 1) * h * w];
                        let gg = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        for oy in 0..oh {
                            let (y0, y1, wy) = (rows.lo[oy], rows.hi[oy], rows.w_hi[oy]);
                            for ox in 0..ow {
                                let (x0, x1, wx) = (cols.lo[ox], cols.hi[ox], cols.w_hi[ox]);
                                let v = gg[oy * ow + ox];
                                src[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                                src[y0 * w + x1] += v * (1.0 - wy) * wx;
                                src[y1 * w + x0] += v * wy * (1.0 - wx);
                                src[y1 * w + x1] += v * wy * wx;
                            }
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.grad_buf(a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.nodes[logits.0].shape[1];
                if let Some(dl) = self.grad_buf(*logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * c + j] += g[0] * w * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::BoxLoss { pred, dpred } => {
                if let Some(dp) = self.grad_buf(*pred) {
                    dp.iter_mut().zip(dpred).for_each(|(d, v)| *d += g[0] * v);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
