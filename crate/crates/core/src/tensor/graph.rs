use super::kernels::{self, ConvGeom, LayerNormCache, MatRef};
use super::{numel, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Logit(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    AvgPool {
        x: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Composite {
        pred: Var,
        input: Var,
        mask: Vec<f64>,
    },
    LocalMeans {
        x: Var,
        k: usize,
    },
    Diff {
        x: Var,
        axis: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
    param: Option<ParamId>,
}

/// A forward computation recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the arena is already a
/// topological order and `backward` is a single reverse sweep. A graph is
/// meant to be built and consumed by one thread; separate graphs are
/// independent.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Output of [`Graph::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, id) in &self.bindings {
            if let Some(g) = &self.grads[node] {
                let t = store.get_mut(id);
                if t.requires_grad() {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{what}: shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Binds a stored parameter; its gradient flows back via
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id));
        self.nodes[v.0].param = Some(id);
        v
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        same_shape(self.shape(a), self.shape(b), what)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "add", |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(shape, data, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "sub", |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(shape, data, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "mul", |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(shape, data, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        let t = self.tracked(&[a]);
        self.push(shape, data, Op::Scale(a, s), t)
    }

    /// `[rows × C] + [C]`, broadcasting the row vector.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(row) != [xs[1]] {
            return Err(dim_err!(
                "add_row: {:?} + {:?}",
                xs,
                self.shape(row)
            ));
        }
        let c = xs[1];
        let r = self.value(row);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % c])
            .collect();
        let shape = xs.to_vec();
        let t = self.tracked(&[x, row]);
        Ok(self.push(shape, data, Op::AddRow(x, row), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {:?} × {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let t = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let t = self.tracked(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), t))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let t = self.tracked(&[a]);
        self.push(shape, data, op, t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// `ln(c / (1 − c))` with `c = clamp(x, eps, 1 − eps)`; the gradient is
    /// zero where the clamp is active.
    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::Logit(a, eps), |v| {
            let c = v.clamp(eps, 1.0 - eps);
            (c / (1.0 - c)).ln()
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let t = self.tracked(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let t = self.tracked(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), t)
    }

    /// Softmax over the last axis; see [`kernels::softmax_rows`] for the
    /// handling of `-inf`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = self.shape(a).last().copied().unwrap_or(1);
        let data = kernels::softmax_rows(self.value(a), cols);
        let shape = self.shape(a).to_vec();
        let t = self.tracked(&[a]);
        self.push(shape, data, Op::Softmax(a), t)
    }

    /// Normalizes each row of a `[tokens × C]` matrix, then applies the affine pair.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 || self.shape(gain) != [xs[1]] || self.shape(bias) != [xs[1]] {
            return Err(dim_err!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                xs,
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (out, cache) =
            kernels::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps);
        let shape = xs.to_vec();
        let t = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            t,
        ))
    }

    fn chw(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(dim_err!("{what}: expected C×H×W, got {:?}", s)),
        }
    }

    /// Cross-correlation of a `C_in×H×W` input with `C_out×C_in×k×k`
    /// kernels, zero padding, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.chw(x, "conv2d")?;
        let (co, ci, k) = match *self.shape(weight) {
            [co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            ref s => return Err(dim_err!("conv2d: bad kernel shape {:?}", s)),
        };
        if ci != c {
            return Err(dim_err!("conv2d: input has {c} channels, kernel expects {ci}"));
        }
        if k % 2 == 0 {
            return Err(dim_err!("conv2d: kernel size {k} must be odd"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(dim_err!("conv2d: bias shape {:?}", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c, h, w, k, stride, padding)
            .ok_or_else(|| dim_err!("conv2d: empty output for {h}×{w}, k={k}, stride={stride}, padding={padding}"))?;
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            co,
            &geom,
        );
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let t = self.tracked(&deps);
        Ok(self.push(
            vec![co, geom.out_height, geom.out_width],
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                out_channels: co,
            },
            t,
        ))
    }

    /// Fixed uniform `k×k` mean filter per channel (zero padding, divisor `k²`).
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x, "avg_pool")?;
        let geom = ConvGeom::new(c, h, w, kernel, stride, padding)
            .ok_or_else(|| dim_err!("avg_pool: empty output for {h}×{w}"))?;
        let out = kernels::avg_pool_forward(self.value(x), &geom);
        let t = self.tracked(&[x]);
        Ok(self.push(
            vec![c, geom.out_height, geom.out_width],
            out,
            Op::AvgPool { x, geom },
            t,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "upsample2x")?;
        let out = kernels::upsample2x_forward(self.value(x), c, h, w);
        let t = self.tracked(&[x]);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2x(x), t))
    }

    /// Stacks `C_i×H×W` inputs along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat_channels: no inputs"))?;
        let (_, h, w) = self.chw(first, "concat_channels")?;
        let mut total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.chw(p, "concat_channels")?;
            if (ph, pw) != (h, w) {
                return Err(dim_err!("concat_channels: {ph}×{pw} vs {h}×{w}"));
            }
            total += c;
            data.extend_from_slice(self.value(p));
        }
        let t = self.tracked(parts);
        Ok(self.push(vec![total, h, w], data, Op::Concat(parts.to_vec()), t))
    }

    /// `mask ∘ pred + (1 − mask) ∘ input` with an `H×W` mask broadcast over channels.
    pub fn composite(&mut self, pred: Var, input: Var, mask: &[f64]) -> Result<Var> {
        same_shape(self.shape(pred), self.shape(input), "composite")?;
        let (c, h, w) = self.chw(pred, "composite")?;
        if mask.len() != h * w {
            return Err(dim_err!("composite: mask has {} pixels, image {h}×{w}", mask.len()));
        }
        let plane = h * w;
        let (p, s) = (self.value(pred), self.value(input));
        let data = (0..c * plane)
            .map(|i| {
                let m = mask[i % plane];
                m * p[i] + (1.0 - m) * s[i]
            })
            .collect();
        let t = self.tracked(&[pred, input]);
        Ok(self.push(
            vec![c, h, w],
            data,
            Op::Composite {
                pred,
                input,
                mask: mask.to_vec(),
            },
            t,
        ))
    }

    /// Channel mean followed by non-overlapping `k×k` average pooling:
    /// `C×H×W → (H/k)×(W/k)`.
    pub fn local_area_means(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x, "local_area_means")?;
        if k == 0 || h % k != 0 || w % k != 0 || c == 0 {
            return Err(dim_err!("local_area_means: k={k} does not tile {h}×{w}"));
        }
        let src = self.value(x);
        let plane = h * w;
        let mut gray = vec![0.0; plane];
        for ch in 0..c {
            for (g, v) in gray.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                *g += v;
            }
        }
        gray.iter_mut().for_each(|g| *g /= c as f64);
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for y in oy * k..(oy + 1) * k {
                    for xx in ox * k..(ox + 1) * k {
                        acc += gray[y * w + xx];
                    }
                }
                out[oy * ow + ox] = acc / (k * k) as f64;
            }
        }
        let t = self.tracked(&[x]);
        Ok(self.push(vec![oh, ow], out, Op::LocalMeans { x, k }, t))
    }

    /// Forward differences of a matrix along `axis` (0 = down, 1 = right).
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (h, w) = match *self.shape(x) {
            [h, w] => (h, w),
            ref s => return Err(dim_err!("diff: expected a matrix, got {:?}", s)),
        };
        let src = self.value(x);
        let (shape, data) = match axis {
            0 => {
                let oh = h.saturating_sub(1);
                let data = (0..oh * w).map(|i| src[i + w] - src[i]).collect();
                (vec![oh, w], data)
            }
            1 => {
                let ow = w.saturating_sub(1);
                let mut data = Vec::with_capacity(h * ow);
                for y in 0..h {
                    for xx in 0..ow {
                        data.push(src[y * w + xx + 1] - src[y * w + xx]);
                    }
                }
                (vec![h, ow], data)
            }
            _ => return Err(dim_err!("diff: axis {axis} out of range")),
        };
        let t = self.tracked(&[x]);
        Ok(self.push(shape, data, Op::Diff { x, axis }, t))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Only nodes that depend on a gradient-requiring leaf receive a buffer,
    /// so a loss built from constants yields no gradients at all.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if ln.tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let bindings = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, bindings })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.tracked {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.data.len()]);
            f(buf);
        };
        let add_from = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_from(buf, g));
                acc(*b, &mut |buf| add_from(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_from(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| {
                    for ((x, d), y) in buf.iter_mut().zip(g).zip(vb) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((x, d), y) in buf.iter_mut().zip(g).zip(va) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(x, d)| *x += d * s)
            }),
            Op::AddRow(x, row) => {
                acc(*x, &mut |buf| add_from(buf, g));
                let c = self.shape(*row)[0];
                acc(*row, &mut |buf| {
                    for (i, d) in g.iter().enumerate() {
                        buf[i % c] += d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::new(g, m, n);
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| kernels::gemm(gm, MatRef::new(vb, k, n).t(), buf, 1.0));
                acc(*b, &mut |buf| kernels::gemm(MatRef::new(va, m, k).t(), gm, buf, 1.0));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_from(buf, g)),
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((x, d), v) in buf.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.data;
                acc(*a, &mut |buf| {
                    for ((x, d), s) in buf.iter_mut().zip(g).zip(y) {
                        *x += d * s * (1.0 - s);
                    }
                });
            }
            Op::Logit(a, eps) => {
                let va = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((x, d), v) in buf.iter_mut().zip(g).zip(va) {
                        if *v > *eps && *v < 1.0 - *eps {
                            *x += d / (v * (1.0 - v));
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((x, d), v) in buf.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += d;
                        } else if *v < 0.0 {
                            *x -= d;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let va = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((x, d), v) in buf.iter_mut().zip(g).zip(va) {
                        *x += 2.0 * v * d;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Softmax(a) => {
                let cols = node.shape.last().copied().unwrap_or(1);
                acc(*a, &mut |buf| kernels::softmax_rows_backward(&node.data, g, cols, buf));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let gv = self.value(*gain);
                acc(*x, &mut |buf| {
                    kernels::layer_norm_backward(cache, gv, g, Some(buf), None, None)
                });
                acc(*gain, &mut |buf| {
                    kernels::layer_norm_backward(cache, gv, g, None, Some(buf), None)
                });
                acc(*bias, &mut |buf| {
                    kernels::layer_norm_backward(cache, gv, g, None, None, Some(buf))
                });
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                out_channels,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                acc(*x, &mut |buf| {
                    kernels::conv2d_backward(vx, vw, g, *out_channels, geom, Some(buf), None, None)
                });
                acc(*weight, &mut |buf| {
                    kernels::conv2d_backward(vx, vw, g, *out_channels, geom, None, Some(buf), None)
                });
                if let Some(b) = bias {
                    acc(*b, &mut |buf| {
                        kernels::conv2d_backward(vx, vw, g, *out_channels, geom, None, None, Some(buf))
                    });
                }
            }
            Op::AvgPool { x, geom } => {
                acc(*x, &mut |buf| kernels::avg_pool_backward(g, geom, buf));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |buf| kernels::upsample2x_backward(g, c, h, w, buf));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |buf| add_from(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Composite { pred, input, mask } => {
                let plane = mask.len();
                acc(*pred, &mut |buf| {
                    for (i, (x, d)) in buf.iter_mut().zip(g).enumerate() {
                        *x += mask[i % plane] * d;
                    }
                });
                acc(*input, &mut |buf| {
                    for (i, (x, d)) in buf.iter_mut().zip(g).enumerate() {
                        *x += (1.0 - mask[i % plane]) * d;
                    }
                });
            }
            Op::LocalMeans { x, k } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let ow = w / k;
                let norm = 1.0 / (c * k * k) as f64;
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                buf[(ch * h + y) * w + xx] += g[(y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Diff { x, axis } => {
                let s = self.shape(*x);
                let (h, w) = (s[0], s[1]);
                acc(*x, &mut |buf| {
                    if *axis == 0 {
                        for (i, d) in g.iter().enumerate() {
                            buf[i + w] += d;
                            buf[i] -= d;
                        }
                    } else {
                        let ow = w - 1;
                        for y in 0..h {
                            for xx in 0..ow {
                                let d = g[y * ow + xx];
                                buf[y * w + xx + 1] += d;
                                buf[y * w + xx] -= d;
                            }
                        }
                    }
                });
            }
        }
    }
}
