//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for each forward pass. Every primitive records
//! its output value and whatever it needs for the backward rule; [`Var`] is
//! a plain index into that record, so nodes always follow their inputs.

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{invalid, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial reduction used by [`Tape::global_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// Sum over positions, as in `P_k = sum_{x,y} f^k(x,y)`.
    #[default]
    Sum,
    Mean,
}

/// `(input, output, grad_output) -> grad_input` for [`Tape::custom`].
pub type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalPool {
        input: Var,
        area: usize,
        mode: PoolMode,
    },
    AvgPoolRect {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
        d: usize,
        k: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        k: usize,
    },
    Bilinear {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    Reshape(Var),
    TransposeLast2 {
        input: Var,
        outer: usize,
        rows: usize,
        cols: usize,
    },
    Narrow {
        input: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Custom {
        input: Var,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = T::from_f64(a.to_f64() + v.to_f64());
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Copies `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.node(v).value.clone();
        self.constant(t)
    }

    /// Binds a stored parameter; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bindings.push((id, v));
        v
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] {
            return Err(mismatch("conv2d", &is, &ks));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if ks[2] > is[2] + 2 * pad || ks[3] > is[3] + 2 * pad {
            return Err(mismatch("conv2d", &is, &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &ks[..1]));
            }
        }
        let geom = ConvGeom {
            cin: is[1],
            h: is[2],
            w: is[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let batch = is[0];
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let needs = self.needs(&deps);
        let keep = self.node(kernel).needs_grad;
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            batch,
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
            keep,
        );
        let value = Tensor::new(&[batch, geom.cout, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::Relu(input), needs)
    }

    /// Square-window max pooling over the last two axes.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || k == 0 || stride == 0 || k > s[s.len() - 2] || k > s[s.len() - 1] {
            return Err(invalid("max_pool2d", format!("window {k} on shape {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let (out, argmax) = kernels::max_pool2d(planes, h, w, k, stride, self.data(input));
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([(h - k) / stride + 1, (w - k) / stride + 1]);
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Reduces `[.., H, W]` to `[..]` by spatial sum or mean.
    pub fn global_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 3 {
            return Err(invalid("global_pool", format!("need [.., H, W], got {s:?}")));
        }
        let area = s[s.len() - 2] * s[s.len() - 1];
        let norm = match mode {
            PoolMode::Sum => 1.0,
            PoolMode::Mean => area as f64,
        };
        let data = self
            .data(input)
            .chunks(area)
            .map(|c| T::from_f64(c.iter().map(|v| v.to_f64()).sum::<f64>() / norm))
            .collect();
        let value = Tensor::new(&s[..s.len() - 2], data)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalPool { input, area, mode }, needs))
    }

    /// Non-overlapping `kh x kw` average pooling over the last two axes.
    pub fn avg_pool_rect(&mut self, input: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(invalid("avg_pool_rect", format!("need [.., H, W], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(invalid(
                "avg_pool_rect",
                format!("kernel {kh}x{kw} does not tile {h}x{w}"),
            ));
        }
        let planes = s[..s.len() - 2].iter().product();
        let out = kernels::avg_pool_rect(planes, h, w, kh, kw, self.data(input));
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([h / kh, w / kw]);
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::AvgPoolRect {
                input,
                planes,
                h,
                w,
                kh,
                kw,
            },
            needs,
        ))
    }

    /// `input[B,D] . weight[D,K] + bias[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
            return Err(mismatch("linear", &is, &ws));
        }
        let (batch, d, k) = (is[0], ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(mismatch("linear bias", self.shape(b), &[k]));
            }
        }
        let out = kernels::linear(
            batch,
            d,
            k,
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(
            Tensor::new(&[batch, k], out)?,
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                d,
                k,
            },
            needs,
        ))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    fn map(&mut self, input: Var, f: impl Fn(f64) -> f64) -> Tensor<T> {
        let t = self.value(input);
        let data = t.data().iter().map(|v| T::from_f64(f(v.to_f64()))).collect();
        Tensor::new(t.shape(), data).expect("same shape")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.map(input, |v| v * factor);
        let needs = self.needs(&[input]);
        self.push(value, Op::Scale(input, factor), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.map(input, |v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(&[input]);
        self.push(value, Op::Sigmoid(input), needs)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.map(input, f64::tanh);
        let needs = self.needs(&[input]);
        self.push(value, Op::Tanh(input), needs)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.data(input).iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(input), needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = vec![0f64; batch * k];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &self.data(logits)[b * k..(b + 1) * k];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
                *p = (v.to_f64() - max).exp();
                z += *p;
            }
            for p in &mut probs[b * k..(b + 1) * k] {
                *p /= z;
            }
            loss += z.ln() + max - row[label].to_f64();
        }
        let value = Tensor::scalar(T::from_f64(loss / batch as f64));
        let needs = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                k,
            },
            needs,
        ))
    }

    /// Resizes the last two axes with half-pixel-centre bilinear sampling.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(invalid(
                "bilinear_resize",
                format!("cannot resize {s:?} to {out_h}x{out_w}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let out = kernels::bilinear_resize(planes, h, w, out_h, out_w, self.data(input));
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([out_h, out_w]);
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Bilinear {
                input,
                planes,
                h,
                w,
                out_h,
                out_w,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose_last2", format!("need rank >= 2, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = s[..s.len() - 2].iter().product();
        let src = self.data(input);
        let mut out = Vec::with_capacity(src.len());
        for o in 0..outer {
            let m = &src[o * rows * cols..(o + 1) * rows * cols];
            for c in 0..cols {
                for r in 0..rows {
                    out.push(m[r * cols + c]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([cols, rows]);
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::TransposeLast2 {
                input,
                outer,
                rows,
                cols,
            },
            needs,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let src = self.data(input);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Narrow {
                input,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            needs,
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let needs = self.needs(parts);
        let parts = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts,
                outer,
                inner,
            },
            needs,
        ))
    }

    /// Shape-preserving elementwise op with caller-supplied rules.
    pub fn custom(
        &mut self,
        input: Var,
        forward: impl FnOnce(&[T]) -> Vec<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        let t = self.value(input);
        let out = forward(t.data());
        let value = Tensor::new(t.shape(), out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Custom { input, backward }, needs))
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf.
    ///
    /// Leaf gradients persist on the tape, so calling this twice without
    /// rebuilding the tape adds the two gradients together. Differentiable
    /// leaves the loss does not reach get explicit zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(s.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::from_f64(1.0)]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, gi) in self.local_grads(i, &g) {
                if self.nodes[v.0].needs_grad {
                    add_into(&mut grads[v.0], gi);
                }
            }
        }
        self.leaf_grads.resize_with(n, || None);
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                add_into(&mut self.leaf_grads[i], g);
            }
        }
        Ok(())
    }

    /// Gradients w.r.t. each input of node `i`, given its output gradient.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let f = |x: &T| x.to_f64();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                cols,
            } => {
                let mut res = Vec::new();
                if self.node(*input).needs_grad {
                    let gi = kernels::conv2d_grad_input(geom, *batch, g, self.data(*kernel));
                    res.push((*input, gi));
                }
                if self.node(*kernel).needs_grad {
                    let cols = cols.as_ref().expect("patches kept for kernel grad");
                    res.push((*kernel, kernels::conv2d_grad_weight(geom, *batch, g, cols)));
                }
                if let Some(b) = bias {
                    res.push((*b, kernels::conv2d_grad_bias(geom, *batch, g)));
                }
                res
            }
            Op::Relu(input) => {
                let x = self.data(*input);
                let gi = x
                    .iter()
                    .zip(g)
                    .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                vec![(*input, gi)]
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0f64; self.value(*input).numel()];
                for (src, gv) in argmax.iter().zip(g) {
                    gi[*src] += gv.to_f64();
                }
                vec![(*input, gi.into_iter().map(T::from_f64).collect())]
            }
            Op::GlobalPool { input, area, mode } => {
                let norm = match mode {
                    PoolMode::Sum => 1.0,
                    PoolMode::Mean => *area as f64,
                };
                let gi = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(T::from_f64(gv.to_f64() / norm), *area))
                    .collect();
                vec![(*input, gi)]
            }
            Op::AvgPoolRect {
                input,
                planes,
                h,
                w,
                kh,
                kw,
            } => {
                let (ow, norm) = (w / kw, (kh * kw) as f64);
                let mut gi = vec![T::zero(); planes * h * w];
                for pl in 0..*planes {
                    for y in 0..*h {
                        for x in 0..*w {
                            let src = g[(pl * (h / kh) + y / kh) * ow + x / kw].to_f64();
                            gi[(pl * h + y) * w + x] = T::from_f64(src / norm);
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                d,
                k,
            } => {
                let mut res = Vec::new();
                if self.node(*input).needs_grad {
                    let gi = kernels::linear_grad_input(*batch, *d, *k, g, self.data(*weight));
                    res.push((*input, gi));
                }
                if self.node(*weight).needs_grad {
                    let gw = kernels::linear_grad_weight(*batch, *d, *k, g, self.data(*input));
                    res.push((*weight, gw));
                }
                if let Some(b) = bias {
                    res.push((*b, kernels::sum_rows(*batch, *k, g)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ga = g
                    .iter()
                    .zip(db)
                    .map(|(g, y)| T::from_f64(f(g) * f(y)))
                    .collect();
                let gb = g
                    .iter()
                    .zip(da)
                    .map(|(g, x)| T::from_f64(f(g) * f(x)))
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(input, c) => {
                vec![(*input, g.iter().map(|v| T::from_f64(f(v) * c)).collect())]
            }
            Op::Sigmoid(input) => {
                let gi = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| T::from_f64(f(g) * f(y) * (1.0 - f(y))))
                    .collect();
                vec![(*input, gi)]
            }
            Op::Tanh(input) => {
                let gi = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| T::from_f64(f(g) * (1.0 - f(y) * f(y))))
                    .collect();
                vec![(*input, gi)]
            }
            Op::Sum(input) => {
                vec![(*input, vec![g[0]; self.value(*input).numel()])]
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                k,
            } => {
                let scale = f(&g[0]) / labels.len() as f64;
                let mut gi: Vec<T> = probs.iter().map(|p| T::from_f64(p * scale)).collect();
                for (b, &l) in labels.iter().enumerate() {
                    gi[b * k + l] = T::from_f64((probs[b * k + l] - 1.0) * scale);
                }
                vec![(*logits, gi)]
            }
            Op::Bilinear {
                input,
                planes,
                h,
                w,
                out_h,
                out_w,
            } => {
                let gi = kernels::bilinear_resize_grad(*planes, *h, *w, *out_h, *out_w, g);
                vec![(*input, gi)]
            }
            Op::Reshape(input) => vec![(*input, g.to_vec())],
            Op::TransposeLast2 {
                input,
                outer,
                rows,
                cols,
            } => {
                let mut gi = Vec::with_capacity(g.len());
                for o in 0..*outer {
                    let m = &g[o * rows * cols..(o + 1) * rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gi.push(m[c * rows + r]);
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::Narrow {
                input,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                let mut gi = vec![T::zero(); outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    gi[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, gi)]
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|(_, n)| n).sum();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &(p, n) in parts {
                    let mut gi = Vec::with_capacity(outer * n * inner);
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[src..src + n * inner]);
                    }
                    offset += n;
                    res.push((p, gi));
                }
                res
            }
            Op::Custom { input, backward } => {
                vec![(*input, backward(self.data(*input), out, g))]
            }
        }
    }
}
