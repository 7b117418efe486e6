//! Recorded operation graph with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value. Nodes are pushed in
//! evaluation order, so the node list is already topologically sorted and
//! `backward` is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train or eval behaviour for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics used by [`Graph::batch_norm`].
pub enum NormStats<'a> {
    /// Normalise with the current batch's per-channel moments.
    Batch,
    /// Normalise with fixed running moments.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel moments observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        a_shared: bool,
        b_shared: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DwConv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCe {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An append-only record of tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// `(outer, len, inner)` for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad();
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn elementwise2(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.elementwise2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.elementwise2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.elementwise2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("mean axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MeanAxis { x, axis }, &[x]))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            ));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape(x)
            ));
        }
        let (data, shape) = permute_data(self.data(x), self.shape(x), axes);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return dim_err(format!("transpose of rank-{rank} tensor"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            &[x],
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return dim_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat: {s:?} incompatible with {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Batched matrix product `[..,m,k] @ [..,k,n]`. Batch extents must be
    /// equal, or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return mismatch();
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return mismatch();
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch_shape, a_shared, b_shared) = if ba == bb {
            (ba.to_vec(), false, false)
        } else if bb.is_empty() {
            (ba.to_vec(), false, true)
        } else if ba.is_empty() {
            (bb.to_vec(), true, false)
        } else {
            return mismatch();
        };
        let batch = numel(&batch_shape);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let ao = if a_shared { 0 } else { i * m * k };
                let bo = if b_shared { 0 } else { i * k * n };
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ad[ao..ao + m * k],
                    false,
                    &bd[bo..bo + k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Matmul {
                a,
                b,
                batch,
                a_shared,
                b_shared,
            },
            &[a, b],
        ))
    }

    /// Affine map over the trailing axis: `x[..,k] · w[k,n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().ok_or_else(|| Error::Dimension("linear of scalar".into()))?;
        if sw.len() != 2 || sw[0] != k {
            return dim_err(format!("linear: input {sx:?} incompatible with weight {sw:?}"));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return dim_err(format!(
                    "linear: bias {:?} does not match output width {n}",
                    self.shape(b)
                ));
            }
        }
        let rows = numel(&sx) / k;
        let mut out = vec![0.0; rows * n];
        kernels::gemm(rows, k, n, self.data(x), false, self.data(w), false, 0.0, &mut out);
        if let Some(b) = b {
            let bd = self.data(b);
            out.chunks_mut(n).for_each(|row| add_into(row, bd));
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Linear { x, w, b }, &inputs))
    }

    fn conv_geom(
        &self,
        x: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        what: &str,
    ) -> Result<(usize, ConvGeom)> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return dim_err(format!("{what}: expected [B,C,H,W] input, got {sx:?}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "{what}: kernel {kh}x{kw} must have odd extents"
            )));
        }
        if stride == 0 {
            return Err(Error::Config(format!("{what}: stride must be >= 1")));
        }
        let (h, w) = (sx[2], sx[3]);
        let (ho, wo) = match (
            kernels::conv_out(h, kh, stride, pad),
            kernels::conv_out(w, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Config(format!(
                    "{what}: {kh}x{kw} kernel does not fit {h}x{w} input with padding {pad}"
                )))
            }
        };
        Ok((
            sx[0],
            ConvGeom {
                c: sx[1],
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
        ))
    }

    /// Dense 2-D convolution: `x[B,Cin,H,W]`, `w[Cout,Cin,kh,kw]`, `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 {
            return dim_err(format!("conv2d: weight must be [Cout,Cin,kh,kw], got {sw:?}"));
        }
        let (batch, geom) = self.conv_geom(x, sw[2], sw[3], stride, pad, "conv2d")?;
        if sw[1] != geom.c {
            return dim_err(format!(
                "conv2d: weight {sw:?} expects {} input channels, input has {}",
                sw[1], geom.c
            ));
        }
        let cout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return dim_err(format!("conv2d: bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let ck = geom.c * geom.kh * geom.kw;
        let plane = geom.ho * geom.wo;
        let in_sz = geom.c * geom.h * geom.w;
        let mut out = vec![0.0; batch * cout * plane];
        let mut cols = vec![0.0; ck * plane];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            for bi in 0..batch {
                kernels::im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
                let ob = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
                kernels::gemm(cout, ck, plane, wd, false, &cols, false, 0.0, ob);
                if let Some(b) = b {
                    for (co, &bv) in self.data(b).iter().enumerate() {
                        ob[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            &inputs,
        ))
    }

    /// Depthwise 2-D convolution: one `[kh,kw]` kernel and bias per channel,
    /// no mixing across channels.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 3 {
            return dim_err(format!("depthwise_conv2d: kernel must be [C,kh,kw], got {sk:?}"));
        }
        let (batch, geom) = self.conv_geom(x, sk[1], sk[2], stride, pad, "depthwise_conv2d")?;
        if sk[0] != geom.c {
            return dim_err(format!(
                "depthwise_conv2d: kernel {sk:?} for input with {} channels",
                geom.c
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [geom.c] {
                return dim_err(format!(
                    "depthwise_conv2d: bias {:?} for {} channels",
                    self.shape(b),
                    geom.c
                ));
            }
        }
        let (ipl, opl, kk) = (geom.h * geom.w, geom.ho * geom.wo, geom.kh * geom.kw);
        let mut out = vec![0.0; batch * geom.c * opl];
        {
            let xd = self.data(x);
            let kd = self.data(kernel);
            let bd = bias.map(|b| self.data(b));
            for bi in 0..batch {
                for c in 0..geom.c {
                    let p = bi * geom.c + c;
                    kernels::dw_plane_forward(
                        &xd[p * ipl..(p + 1) * ipl],
                        &kd[c * kk..(c + 1) * kk],
                        bd.map_or(0.0, |b| b[c]),
                        &geom,
                        &mut out[p * opl..(p + 1) * opl],
                    );
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![batch, geom.c, geom.ho, geom.wo], out),
            Op::DwConv2d {
                x,
                k: kernel,
                b: bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Per-channel normalisation of `x[B,C,...]` followed by `gamma·x̂+beta`.
    ///
    /// Returns the batch moments when `stats` is [`NormStats::Batch`] so the
    /// caller can fold them into running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return dim_err(format!("batch_norm: expected [B,C,...], got {sx:?}"));
        }
        let (b, c) = (sx[0], sx[1]);
        let inner = numel(&sx[2..]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!(
                "batch_norm: affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xd = self.data(x);
        let count = (b * inner) as f64;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += xd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err(format!(
                        "batch_norm: running stats of length {}/{} for {c} channels",
                        mean.len(),
                        var.len()
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                for i in r {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let moments = batch_stats.then(|| BatchMoments { mean, var });
        let v = self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    /// Mean over the batch of `-Σ target·log softmax(logits)` for
    /// `logits[B,C]` and per-row target distributions `target[B,C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || target.shape() != sl.as_slice() {
            return dim_err(format!(
                "cross entropy: logits {sl:?} vs targets {:?}",
                target.shape()
            ));
        }
        let (b, c) = (sl[0], sl[1]);
        let ld = self.data(logits);
        let td = target.data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                loss -= td[r * c + j] * logp;
            }
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                target: td.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, grads: &Gradients, v: Var, t: &mut Tensor) -> Result<()> {
        match grads.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        match &mut grads[v.0] {
            Some(buf) => add_into(buf, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.acc(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    self.acc(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    self.acc(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    self.acc(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                    self.acc(grads, a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                    self.acc(grads, b, d);
                }
            }
            &Op::Scale(x, c) => self.acc(grads, x, g.iter().map(|v| v * c).collect()),
            &Op::Exp(x) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.acc(grads, x, d);
            }
            &Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc(grads, x, d);
            }
            &Op::Sum(x) => self.acc(grads, x, vec![g[0]; self.value(x).numel()]),
            &Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                let inv = 1.0 / len as f64;
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dv, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv = gv * inv;
                        }
                    }
                }
                self.acc(grads, x, d);
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + ii;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.acc(grads, x, d);
            }
            &Op::Reshape(x) => self.acc(grads, x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (d, _) = permute_data(g, out.shape(), &inverse);
                self.acc(grads, *x, d);
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(x), axis);
                let len = out.shape()[axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, x, d);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, v, d);
                    }
                    offset += len;
                }
            }
            &Op::Matmul {
                a,
                b,
                batch,
                a_shared,
                b_shared,
            } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let mut d = vec![0.0; self.value(a).numel()];
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * m * k };
                        let bo = if b_shared { 0 } else { i * k * n };
                        let beta = if a_shared && i > 0 { 1.0 } else { 0.0 };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[bo..bo + k * n],
                            true,
                            beta,
                            &mut d[ao..ao + m * k],
                        );
                    }
                    self.acc(grads, a, d);
                }
                if self.needs(b) {
                    let mut d = vec![0.0; self.value(b).numel()];
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * m * k };
                        let bo = if b_shared { 0 } else { i * k * n };
                        let beta = if b_shared && i > 0 { 1.0 } else { 0.0 };
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &ad[ao..ao + m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            beta,
                            &mut d[bo..bo + k * n],
                        );
                    }
                    self.acc(grads, b, d);
                }
            }
            &Op::Linear { x, w, b } => {
                let sw = self.shape(w);
                let (k, n) = (sw[0], sw[1]);
                let rows = self.value(x).numel() / k;
                if self.needs(x) {
                    let mut d = vec![0.0; rows * k];
                    kernels::gemm(rows, n, k, g, false, self.data(w), true, 0.0, &mut d);
                    self.acc(grads, x, d);
                }
                if self.needs(w) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, rows, n, self.data(x), true, g, false, 0.0, &mut d);
                    self.acc(grads, w, d);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut d = vec![0.0; n];
                    g.chunks(n).for_each(|row| add_into(&mut d, row));
                    self.acc(grads, b, d);
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(x)[0];
                let cout = self.shape(w)[0];
                let ck = geom.c * geom.kh * geom.kw;
                let plane = geom.ho * geom.wo;
                let in_sz = geom.c * geom.h * geom.w;
                let (xd, wd) = (self.data(x), self.data(w));
                let mut dx = self.needs(x).then(|| vec![0.0; batch * in_sz]);
                let mut dw = self.needs(w).then(|| vec![0.0; cout * ck]);
                let mut cols = vec![0.0; ck * plane];
                for bi in 0..batch {
                    let gb = &g[bi * cout * plane..(bi + 1) * cout * plane];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
                        kernels::gemm(cout, plane, ck, gb, false, &cols, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm(ck, cout, plane, wd, true, gb, false, 0.0, &mut cols);
                        kernels::col2im(&cols, &geom, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                }
                if let Some(d) = dx {
                    self.acc(grads, x, d);
                }
                if let Some(d) = dw {
                    self.acc(grads, w, d);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut d = vec![0.0; cout];
                    for bi in 0..batch {
                        for (co, dv) in d.iter_mut().enumerate() {
                            let s = (bi * cout + co) * plane;
                            *dv += g[s..s + plane].iter().sum::<f64>();
                        }
                    }
                    self.acc(grads, b, d);
                }
            }
            &Op::DwConv2d { x, k, b, geom } => {
                let batch = self.shape(x)[0];
                let (ipl, opl, kk) = (geom.h * geom.w, geom.ho * geom.wo, geom.kh * geom.kw);
                let (xd, kd) = (self.data(x), self.data(k));
                let mut dx = self.needs(x).then(|| vec![0.0; batch * geom.c * ipl]);
                let mut dk = self.needs(k).then(|| vec![0.0; geom.c * kk]);
                let mut db = vec![0.0; geom.c];
                for bi in 0..batch {
                    for c in 0..geom.c {
                        let p = bi * geom.c + c;
                        db[c] += kernels::dw_plane_backward(
                            &xd[p * ipl..(p + 1) * ipl],
                            &kd[c * kk..(c + 1) * kk],
                            &g[p * opl..(p + 1) * opl],
                            &geom,
                            dx.as_mut().map(|d| &mut d[p * ipl..(p + 1) * ipl]),
                            dk.as_mut().map(|d| &mut d[c * kk..(c + 1) * kk]),
                        );
                    }
                }
                if let Some(d) = dx {
                    self.acc(grads, x, d);
                }
                if let Some(d) = dk {
                    self.acc(grads, k, d);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    self.acc(grads, b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let sx = self.shape(*x);
                let (b, c) = (sx[0], sx[1]);
                let inner = numel(&sx[2..]);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        for i in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut d = vec![0.0; g.len()];
                    let count = (b * inner) as f64;
                    for ch in 0..c {
                        let scale = gd[ch] * inv_std[ch];
                        // dxhat = g·γ, so Σdxhat = γ·dβ and Σdxhat·x̂ = γ·dγ
                        let (mean_d, mean_dx) = if *batch_stats {
                            (dbeta[ch] / count, dgamma[ch] / count)
                        } else {
                            (0.0, 0.0)
                        };
                        for bi in 0..b {
                            for i in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                                d[i] = scale * (g[i] - mean_d - xhat[i] * mean_dx);
                            }
                        }
                    }
                    self.acc(grads, *x, d);
                }
                if self.needs(*gamma) {
                    self.acc(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    self.acc(grads, *beta, dbeta);
                }
            }
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => {
                let b = self.shape(*logits)[0] as f64;
                let scale = g[0] / b;
                let d = probs.iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                self.acc(grads, *logits, d);
            }
        }
    }
}
