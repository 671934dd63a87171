//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node. Operations are
//! coarse (whole convolutions, whole directional scans) so the tape stays
//! short even for the full denoiser.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image_grid::Image;
use crate::providers::Embedder;
use crate::ssm::{scan_order, ScanDirection};
use crate::tensor::Tensor;

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
    MulConst(Var, Tensor),
    ChannelBias(Var, Var),
    ChannelScale(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    AvgPool2(Var),
    Upsample2(Var),
    Silu(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Var },
    Concat(Var, Var),
    Scan { x: Var, a: Var, b: Var, c: Var, states: Vec<f64> },
    Clamp01(Var),
    Sum(Var),
    SumSq(Var),
    Crop { x: Var, y0: usize, x0: usize },
    Embed { x: Var, embedder: Arc<dyn Embedder> },
    CosineLoss { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::ChannelBias(a, b) | Op::ChannelScale(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Clamp01(a)
            | Op::Sum(a)
            | Op::SumSq(a) => vec![*a],
            Op::Conv2d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Scan { x, a, b, c, .. } => vec![*x, *a, *b, *c],
            Op::Crop { x, .. } | Op::Embed { x, .. } => vec![*x],
            Op::CosineLoss { a, b } => vec![*a, *b],
        }
    }
}

/// Norm below which a vector counts as directionless for cosine terms.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient; work feeding only constants is
    /// skipped in [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(value, Op::MulConst(a, c))
    }

    /// `x[c, h, w] + b[c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        debug_assert_eq!(bias.len(), c);
        for (ch, plane) in value.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v += bias[ch];
            }
        }
        self.push(value, Op::ChannelBias(x, b))
    }

    /// `x[c, h, w] * s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let mut value = self.value(x).clone();
        let scale = self.value(s).data();
        debug_assert_eq!(scale.len(), c);
        for (ch, plane) in value.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v *= scale[ch];
            }
        }
        self.push(value, Op::ChannelScale(x, s))
    }

    /// Stride-1 convolution with zero "same" padding and an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        self.push(value, Op::Conv2d { x, w, b })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let s = src[base + 2 * y * w + 2 * xx]
                        + src[base + 2 * y * w + 2 * xx + 1]
                        + src[base + (2 * y + 1) * w + 2 * xx]
                        + src[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[ch * ho * wo + y * wo + xx] = 0.25 * s;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out).expect("pool shape");
        self.push(value, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[ch * ho * wo + y * wo + xx] = src[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out).expect("upsample shape");
        self.push(value, Op::Upsample2(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `w[m, n] @ x[n] + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).data();
        let wv = self.value(w);
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        debug_assert_eq!(xv.len(), n);
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv.data()[i * n..(i + 1) * n];
                bv[i] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let value = Tensor::from_vec(out);
        self.push(value, Op::Linear { x, w, b })
    }

    /// Concatenate two `[C, H, W]` maps along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw();
        let (cb, _, _) = self.value(b).chw();
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, h, w], data).expect("concat shape");
        self.push(value, Op::Concat(a, b))
    }

    /// Four-direction diagonal linear scan, merged back onto the map and
    /// averaged. `a`, `b`, `c` are `[4, channels, state]`.
    pub fn scan2d(&mut self, x: Var, a: Var, b: Var, c: Var) -> Var {
        let (value, states) = scan2d_forward(
            self.value(x),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        self.push(value, Op::Scan { x, a, b, c, states })
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(value, Op::Clamp01(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_sq());
        self.push(value, Op::SumSq(x))
    }

    /// Spatial window `[C, h, w]` of a `[C, H, W]` map starting at `(y0, x0)`.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let (c, hh, ww) = self.value(x).chw();
        debug_assert!(y0 + h <= hh && x0 + w <= ww);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let start = ch * hh * ww + (y0 + y) * ww + x0;
                out.extend_from_slice(&src[start..start + w]);
            }
        }
        let value = Tensor::new(vec![c, h, w], out).expect("crop shape");
        self.push(value, Op::Crop { x, y0, x0 })
    }

    /// Image embedding of a `[C, H, W]` map through a provider.
    pub fn embed(&mut self, x: Var, embedder: Arc<dyn Embedder>) -> Result<Var> {
        let img = Image::from_chw(self.value(x));
        let value = Tensor::from_vec(embedder.embed_image(&img)?);
        Ok(self.push(value, Op::Embed { x, embedder }))
    }

    /// `1 - cos(a, b)` with the degenerate-direction convention of
    /// [`cosine_loss`].
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::scalar(cosine_loss(self.value(a).data(), self.value(b).data()));
        self.push(value, Op::CosineLoss { a, b })
    }

    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                    accumulate(&mut grads, &self.nodes, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &self.nodes, *b, g.map(|v| -v));
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, &self.nodes, *a, g.map(|v| v * s));
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, &self.nodes, *a, g.zip_map(c, |x, y| x * y));
                }
                Op::ChannelBias(x, b) => {
                    let (c, h, w) = g.chw();
                    let gb: Vec<f64> = (0..c)
                        .map(|ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().sum())
                        .collect();
                    accumulate(&mut grads, &self.nodes, *b, Tensor::from_vec(gb));
                    accumulate(&mut grads, &self.nodes, *x, g.clone());
                }
                Op::ChannelScale(x, s) => {
                    let xv = &self.nodes[x.0].value;
                    let (c, h, w) = g.chw();
                    let sv = self.nodes[s.0].value.data();
                    let mut gx = g.clone();
                    let mut gs = vec![0.0; c];
                    for ch in 0..c {
                        let r = ch * h * w..(ch + 1) * h * w;
                        gs[ch] = g.data()[r.clone()]
                            .iter()
                            .zip(&xv.data()[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for v in &mut gx.data_mut()[r] {
                            *v *= sv[ch];
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *s, Tensor::from_vec(gs));
                    accumulate(&mut grads, &self.nodes, *x, gx);
                }
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        self.needs_grad(*x),
                        self.needs_grad(*w),
                    );
                    accumulate(&mut grads, &self.nodes, *x, gx);
                    accumulate(&mut grads, &self.nodes, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, &self.nodes, *b, gb);
                    }
                }
                Op::AvgPool2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let (ho, wo) = (h / 2, w / 2);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[ch * h * w + y * w + xx] =
                                    0.25 * g.data()[ch * ho * wo + (y / 2) * wo + xx / 2];
                            }
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, Tensor::new(vec![c, h, w], gx)?);
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                gx[ch * h * w + (y / 2) * w + xx / 2] +=
                                    g.data()[ch * ho * wo + y * wo + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, Tensor::new(vec![c, h, w], gx)?);
                }
                Op::Silu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, v| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    });
                    accumulate(&mut grads, &self.nodes, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut grads, &self.nodes, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w);
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let mut gx = vec![0.0; n];
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &wv.data()[i * n..(i + 1) * n];
                        for j in 0..n {
                            gx[j] += gi * row[j];
                            gw[i * n + j] = gi * xv[j];
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, Tensor::from_vec(gx));
                    accumulate(&mut grads, &self.nodes, *w, Tensor::new(vec![m, n], gw)?);
                    accumulate(&mut grads, &self.nodes, *b, g.clone());
                }
                Op::Concat(a, b) => {
                    let (ca, h, w) = self.value(*a).chw();
                    let (cb, _, _) = self.value(*b).chw();
                    let split = ca * h * w;
                    let ga = Tensor::new(vec![ca, h, w], g.data()[..split].to_vec())?;
                    let gb = Tensor::new(vec![cb, h, w], g.data()[split..].to_vec())?;
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                }
                Op::Scan { x, a, b, c, states } => {
                    let (gx, ga, gb, gc) = scan2d_backward(
                        self.value(*x),
                        self.value(*a),
                        self.value(*b),
                        self.value(*c),
                        states,
                        &g,
                    );
                    accumulate(&mut grads, &self.nodes, *x, gx);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                    accumulate(&mut grads, &self.nodes, *c, gc);
                }
                Op::Clamp01(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, v| {
                        if (0.0..=1.0).contains(&v) {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, &self.nodes, *x, gx);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    accumulate(&mut grads, &self.nodes, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::SumSq(x) => {
                    let gv = g.item();
                    accumulate(&mut grads, &self.nodes, *x, self.value(*x).map(|v| 2.0 * gv * v));
                }
                Op::Crop { x, y0, x0 } => {
                    let (c, hh, ww) = self.value(*x).chw();
                    let (_, h, w) = g.chw();
                    let mut gx = vec![0.0; c * hh * ww];
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = ch * hh * ww + (y0 + y) * ww + x0;
                            let src = ch * h * w + y * w;
                            gx[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, Tensor::new(vec![c, hh, ww], gx)?);
                }
                Op::Embed { x, embedder } => {
                    let img = Image::from_chw(self.value(*x));
                    let gimg = embedder.image_vjp(&img, g.data()).ok_or_else(|| {
                        Error::Provider("embedder is not differentiable".into())
                    })?;
                    accumulate(&mut grads, &self.nodes, *x, gimg.to_chw());
                }
                Op::CosineLoss { a, b } => {
                    let gv = g.item();
                    let (ga, gb) =
                        cosine_loss_grad(self.value(*a).data(), self.value(*b).data());
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *a,
                        Tensor::from_vec(ga.into_iter().map(|v| v * gv).collect()),
                    );
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *b,
                        Tensor::from_vec(gb.into_iter().map(|v| v * gv).collect()),
                    );
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads(grads))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `1 - a.b / (|a| |b|)`. When either norm is below [`COSINE_EPS`] the value
/// is 0 if both are, 1 otherwise.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    match (na < COSINE_EPS, nb < COSINE_EPS) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        (false, false) => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - dot / (na * nb)
        }
    }
}

fn cosine_loss_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    (ga, gb)
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (ci, h, wd) = x.chw();
    let ws = w.shape();
    let (co, k) = (ws[0], ws[2]);
    debug_assert_eq!(ws[1], ci);
    debug_assert_eq!(ws[3], k);
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let mut out = vec![0.0; co * plane];
    let xd = x.data();
    let wdata = w.data();
    for o in 0..co {
        let dst = &mut out[o * plane..(o + 1) * plane];
        let bias = b.map_or(0.0, |b| b.data()[o]);
        dst.iter_mut().for_each(|v| *v = bias);
        for i in 0..ci {
            let src = &xd[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = wdata[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = valid_range(wd, dx);
                    let (y_lo, y_hi) = valid_range(h, dy);
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * wd + x_lo..y * wd + x_hi];
                        let sstart = (sy * wd) as isize + x_lo as isize + dx;
                        let srow = &src[sstart as usize..sstart as usize + (x_hi - x_lo)];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, wd], out).expect("conv shape")
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_w: bool,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = x.chw();
    let ws = w.shape();
    let (co, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let xd = x.data();
    let wdata = w.data();
    let gd = g.data();
    let mut gx = vec![0.0; ci * plane];
    let mut gw = vec![0.0; w.len()];
    let gb: Vec<f64> = (0..co)
        .map(|o| gd[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    for o in 0..co {
        let go = &gd[o * plane..(o + 1) * plane];
        for i in 0..ci {
            let src = &xd[i * plane..(i + 1) * plane];
            let gxi = &mut gx[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = wdata[widx];
                    let (x_lo, x_hi) = valid_range(wd, dx);
                    let (y_lo, y_hi) = valid_range(h, dy);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &go[y * wd + x_lo..y * wd + x_hi];
                        let sstart = ((sy * wd) as isize + x_lo as isize + dx) as usize;
                        let n = x_hi - x_lo;
                        if need_w {
                            let srow = &src[sstart..sstart + n];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if need_x && wv != 0.0 {
                            let gxrow = &mut gxi[sstart..sstart + n];
                            for (d, gv) in gxrow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(vec![ci, h, wd], gx).expect("conv grad shape"),
        Tensor::new(ws.to_vec(), gw).expect("conv grad shape"),
        Tensor::from_vec(gb),
    )
}

/// Output indices `lo..hi` whose input index `i + d` stays inside `0..len`.
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn scan2d_forward(x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> (Tensor, Vec<f64>) {
    let (ch, h, w) = x.chw();
    let s = a.shape()[2];
    let n = h * w;
    let mut out = vec![0.0; ch * n];
    let mut states = vec![0.0; 4 * ch * n * s];
    for (k, dir) in ScanDirection::ALL.iter().enumerate() {
        let order = scan_order(h, w, *dir);
        for cc in 0..ch {
            let p = (k * ch + cc) * s;
            let (av, bv, cv) = (&a.data()[p..p + s], &b.data()[p..p + s], &c.data()[p..p + s]);
            let xs = &x.data()[cc * n..(cc + 1) * n];
            let hist = &mut states[(k * ch + cc) * n * s..(k * ch + cc + 1) * n * s];
            let mut state = vec![0.0; s];
            for (j, &pix) in order.iter().enumerate() {
                let u = xs[pix];
                let mut y = 0.0;
                for q in 0..s {
                    state[q] = av[q] * state[q] + bv[q] * u;
                    y += cv[q] * state[q];
                }
                hist[j * s..(j + 1) * s].copy_from_slice(&state);
                out[cc * n + pix] += 0.25 * y;
            }
        }
    }
    (
        Tensor::new(vec![ch, h, w], out).expect("scan shape"),
        states,
    )
}

fn scan2d_backward(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    states: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (ch, h, w) = x.chw();
    let s = a.shape()[2];
    let n = h * w;
    let mut gx = vec![0.0; ch * n];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let mut gc = vec![0.0; c.len()];
    for (k, dir) in ScanDirection::ALL.iter().enumerate() {
        let order = scan_order(h, w, *dir);
        for cc in 0..ch {
            let p = (k * ch + cc) * s;
            let (av, bv, cv) = (&a.data()[p..p + s], &b.data()[p..p + s], &c.data()[p..p + s]);
            let xs = &x.data()[cc * n..(cc + 1) * n];
            let hist = &states[(k * ch + cc) * n * s..(k * ch + cc + 1) * n * s];
            let mut lam = vec![0.0; s];
            for j in (0..n).rev() {
                let pix = order[j];
                let gy = 0.25 * g.data()[cc * n + pix];
                let u = xs[pix];
                let mut gu = 0.0;
                for q in 0..s {
                    lam[q] = cv[q] * gy + av[q] * lam[q];
                    let prev = if j > 0 { hist[(j - 1) * s + q] } else { 0.0 };
                    ga[p + q] += lam[q] * prev;
                    gb[p + q] += lam[q] * u;
                    gc[p + q] += gy * hist[j * s + q];
                    gu += bv[q] * lam[q];
                }
                gx[cc * n + pix] += gu;
            }
        }
    }
    (
        Tensor::new(vec![ch, h, w], gx).expect("scan grad shape"),
        Tensor::new(a.shape().to_vec(), ga).expect("scan grad shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("scan grad shape"),
        Tensor::new(c.shape().to_vec(), gc).expect("scan grad shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every element of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Tensor],
        which: usize,
        f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    ) -> Vec<f64> {
        let h = 1e-6;
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check(inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (which, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v, &inputs[which]);
            let numeric = numeric_grad(&inputs, which, f);
            for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
                let denom = a.abs().max(n.abs()).max(1e-3);
                assert!(
                    (a - n).abs() / denom < 1e-5,
                    "input {which} elem {i}: analytic {a} numeric {n}"
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 5, 4], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        check(vec![x, w, b], &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]));
            let y = g.silu(y);
            g.sum_sq(y)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 3], &mut r);
        let w = Tensor::randn(&[1, 2, 3, 3], &mut r);
        let b = Tensor::from_vec(vec![0.3]);
        let out = conv2d_forward(&x, &w, Some(&b));
        for y in 0..4isize {
            for xx in 0..3isize {
                let mut acc = 0.3;
                for i in 0..2 {
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy < 0 || sy >= 4 || sx < 0 || sx >= 3 {
                                continue;
                            }
                            acc += w.data()[((i * 3) + ky as usize) * 3 + kx as usize]
                                * x.data()[i * 12 + sy as usize * 3 + sx as usize];
                        }
                    }
                }
                let got = out.data()[y as usize * 3 + xx as usize];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4], &mut r);
        let y = Tensor::randn(&[1, 4, 4], &mut r);
        let bias = Tensor::randn(&[3], &mut r);
        let scale = Tensor::randn(&[3], &mut r);
        check(vec![x, y, bias, scale], &|g, v| {
            let c = g.concat(v[0], v[1]);
            let c = g.channel_bias(c, v[2]);
            let c = g.channel_scale(c, v[3]);
            let p = g.avg_pool2(c);
            let u = g.upsample2(p);
            let q = g.crop(u, 1, 0, 2, 3);
            let s = g.sigmoid(q);
            let m = g.mul(s, s);
            g.sum(m)
        });
    }

    #[test]
    fn linear_and_cosine_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[4], &mut r);
        let w = Tensor::randn(&[3, 4], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let t = Tensor::randn(&[3], &mut r);
        check(vec![x, w, b, t], &|g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            g.cosine_loss(y, v[3])
        });
    }

    #[test]
    fn scan_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4], &mut r);
        let a = Tensor::uniform(&[4, 2, 2], 0.9, &mut r);
        let b = Tensor::randn(&[4, 2, 2], &mut r);
        let c = Tensor::randn(&[4, 2, 2], &mut r);
        let target = Tensor::randn(&[2, 3, 4], &mut r);
        check(vec![x, a, b, c, target], &|g, v| {
            let y = g.scan2d(v[0], v[1], v[2], v[3]);
            let d = g.sub(y, v[4]);
            g.sum_sq(d)
        });
    }

    #[test]
    fn clamp_passes_gradient_inside_unit_interval() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-0.5, 0.25, 0.75, 1.5]));
        let c = g.clamp01(x);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cosine_loss_conventions() {
        assert_eq!(cosine_loss(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(cosine_loss(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert!((cosine_loss(&[1.0, 0.0], &[-2.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }
}
