use crate::kernels::{col2im, conv_out_size, conv_transpose_out_size, gemm, im2col, Geometry, Mat};
use crate::{par, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<f64>,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    MeanSqDiff {
        a: Var,
        b: Var,
    },
    BceWithLogits {
        x: Var,
        target: f64,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    PairContrastive {
        a: Var,
        b: Var,
        genuine: Vec<bool>,
        margin: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a computation, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(TensorError::Shape(msg))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return shape_err(format!(
                "conv weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return shape_err(format!("conv bias {:?}, want [{o}]", self.value(b).shape()));
            }
        }
        let (oh, ow) = match (
            conv_out_size(h, k, stride, pad),
            conv_out_size(wd, k, stride, pad),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return shape_err(format!(
                    "input {h}x{wd} too small for kernel {k} stride {stride} pad {pad}"
                ))
            }
        };
        let g = Geometry {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let in_len = c * h * wd;
        let out_len = o * oh * ow;
        let mut out = vec![0.0; n * out_len];
        par::for_each_chunk_mut(&mut out, out_len, |i, dst| {
            let mut cols = vec![0.0; g.rows() * g.cols()];
            im2col(&xv[i * in_len..(i + 1) * in_len], &g, &mut cols);
            gemm(
                Mat::new(wv, o, g.rows()),
                Mat::new(&cols, g.rows(), g.cols()),
                0.0,
                dst,
            );
            if let Some(bv) = bv {
                for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        });
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// Transposed 2-D convolution. `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`, `b: [Cout]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return shape_err(format!(
                "transposed conv weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return shape_err(format!(
                    "transposed conv bias {:?}, want [{cout}]",
                    self.value(b).shape()
                ));
            }
        }
        let (oh, ow) = match (
            conv_transpose_out_size(h, k, stride, pad),
            conv_transpose_out_size(wd, k, stride, pad),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return shape_err(format!("bad transposed conv geometry for {h}x{wd}")),
        };
        let g = Geometry {
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let in_len = cin * h * wd;
        let out_len = cout * oh * ow;
        let mut out = vec![0.0; n * out_len];
        par::for_each_chunk_mut(&mut out, out_len, |i, dst| {
            let mut cols = vec![0.0; g.rows() * g.cols()];
            gemm(
                Mat::new(wv, cin, g.rows()).t(),
                Mat::new(&xv[i * in_len..(i + 1) * in_len], cin, h * wd),
                0.0,
                &mut cols,
            );
            col2im(&cols, &g, dst);
            if let Some(bv) = bv {
                for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        });
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = vec![0.0; n * c];
        for (p, chunk) in out.chunks_mut(plane).enumerate() {
            let mean = chunk.iter().sum::<f64>() / plane as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std[p] = inv;
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!(
                "concat {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&av[i * la..(i + 1) * la]);
            out.extend_from_slice(&bv[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }, &[a, b]))
    }

    /// Non-overlapping `factor × factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = avg_pool(self.value(x), factor)?;
        Ok(self.push(value, Op::AvgPool { x, factor }, &[x]))
    }

    /// `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = (h * w) as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x: [N, F]`, `w: [O, F]`, `b: [O]` → `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (o, wf) = self.value(w).dims2()?;
        if wf != f {
            return shape_err(format!(
                "linear weight {:?} vs input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return shape_err(format!("linear bias has {} values, want {o}", bv.len()));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            Mat::new(self.value(x).data(), n, f),
            Mat::new(self.value(w).data(), o, f).t(),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Scales each row of `[N, F]` to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        let mut inv_norm = vec![0.0; n];
        for (i, row) in out.chunks_mut(f).enumerate() {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm[i] = inv;
        }
        let value = Tensor::new(vec![n, f], out)?;
        Ok(self.push(value, Op::L2Normalize { x, inv_norm }, &[x]))
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mean_abs_diff")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAbsDiff { a, b }, &[a, b]))
    }

    /// Mean squared difference, a scalar.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mean_sq_diff")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanSqDiff { a, b }, &[a, b]))
    }

    /// Binary cross-entropy of raw logits against a constant target, averaged.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let xv = self.value(x).data();
        let s = xv.iter().map(|&l| bce_with_logits(l, target)).sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::BceWithLogits { x, target }, &[x])
    }

    /// `Σ wᵢ · termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return shape_err(format!("weighted_sum term has shape {:?}", self.value(v).shape()));
            }
            s += w * self.value(v).item();
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &parents,
        ))
    }

    /// Mean contrastive loss over row pairs of `a, b: [N, F]`:
    /// `d²` for genuine pairs and `max(0, margin − d)²` otherwise.
    pub fn pair_contrastive(
        &mut self,
        a: Var,
        b: Var,
        genuine: &[bool],
        margin: f64,
    ) -> Result<Var> {
        self.check_same(a, b, "pair_contrastive")?;
        let (n, f) = self.value(a).dims2()?;
        if genuine.len() != n {
            return shape_err(format!("{} labels for {n} pairs", genuine.len()));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut s = 0.0;
        for i in 0..n {
            let d = row_distance(&av[i * f..(i + 1) * f], &bv[i * f..(i + 1) * f]);
            s += if genuine[i] {
                d * d
            } else {
                (margin - d).max(0.0).powi(2)
            };
        }
        Ok(self.push(
            Tensor::scalar(s / n as f64),
            Op::PairContrastive {
                a,
                b,
                genuine: genuine.to_vec(),
                margin,
            },
            &[a, b],
        ))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    /// Back-propagates from the scalar `loss`; only leaves created with
    /// [`Tape::param`] retain their gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (parent, g) in self.node_backward(node, &dy)? {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut grads[parent.0], g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, c, h, wd) = self.value(*x).dims4()?;
                let (o, _, k, _) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = dy.dims4()?;
                let g = Geometry {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                    oh,
                    ow,
                };
                let (need_x, need_w) = (self.wants(*x), self.wants(*w));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let dyv = dy.data();
                let (in_len, out_len) = (c * h * wd, o * oh * ow);
                let per_sample = par::map_range(n, |i| {
                    let dyi = &dyv[i * out_len..(i + 1) * out_len];
                    let dw = need_w.then(|| {
                        let mut cols = vec![0.0; g.rows() * g.cols()];
                        im2col(&xv[i * in_len..(i + 1) * in_len], &g, &mut cols);
                        let mut dw = vec![0.0; o * g.rows()];
                        gemm(
                            Mat::new(dyi, o, g.cols()),
                            Mat::new(&cols, g.rows(), g.cols()).t(),
                            0.0,
                            &mut dw,
                        );
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dcols = vec![0.0; g.rows() * g.cols()];
                        gemm(
                            Mat::new(wv, o, g.rows()).t(),
                            Mat::new(dyi, o, g.cols()),
                            0.0,
                            &mut dcols,
                        );
                        let mut dx = vec![0.0; in_len];
                        col2im(&dcols, &g, &mut dx);
                        dx
                    });
                    (dx, dw)
                });
                if need_x {
                    let mut dx = Vec::with_capacity(n * in_len);
                    for (d, _) in &per_sample {
                        dx.extend_from_slice(d.as_ref().expect("dx computed"));
                    }
                    out.push((*x, Tensor::new(vec![n, c, h, wd], dx)?));
                }
                if need_w {
                    let mut dw = vec![0.0; o * g.rows()];
                    for (_, d) in &per_sample {
                        for (a, b) in dw.iter_mut().zip(d.as_ref().expect("dw computed")) {
                            *a += b;
                        }
                    }
                    out.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, channel_sums(dy)?));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, k, _) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = dy.dims4()?;
                let g = Geometry {
                    c: cout,
                    h: oh,
                    w: ow,
                    k,
                    stride: *stride,
                    pad: *pad,
                    oh: h,
                    ow: wd,
                };
                let (need_x, need_w) = (self.wants(*x), self.wants(*w));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let dyv = dy.data();
                let (in_len, out_len) = (cin * h * wd, cout * oh * ow);
                let per_sample = par::map_range(n, |i| {
                    let mut dcols = vec![0.0; g.rows() * g.cols()];
                    im2col(&dyv[i * out_len..(i + 1) * out_len], &g, &mut dcols);
                    let dx = need_x.then(|| {
                        let mut dx = vec![0.0; in_len];
                        gemm(
                            Mat::new(wv, cin, g.rows()),
                            Mat::new(&dcols, g.rows(), g.cols()),
                            0.0,
                            &mut dx,
                        );
                        dx
                    });
                    let dw = need_w.then(|| {
                        let mut dw = vec![0.0; cin * g.rows()];
                        gemm(
                            Mat::new(&xv[i * in_len..(i + 1) * in_len], cin, h * wd),
                            Mat::new(&dcols, g.rows(), g.cols()).t(),
                            0.0,
                            &mut dw,
                        );
                        dw
                    });
                    (dx, dw)
                });
                if need_x {
                    let mut dx = Vec::with_capacity(n * in_len);
                    for (d, _) in &per_sample {
                        dx.extend_from_slice(d.as_ref().expect("dx computed"));
                    }
                    out.push((*x, Tensor::new(vec![n, cin, h, wd], dx)?));
                }
                if need_w {
                    let mut dw = vec![0.0; cin * g.rows()];
                    for (_, d) in &per_sample {
                        for (a, b) in dw.iter_mut().zip(d.as_ref().expect("dw computed")) {
                            *a += b;
                        }
                    }
                    out.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, channel_sums(dy)?));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = dy.dims4()?;
                let plane = h * w;
                let y = node.value.data();
                let mut dx = dy.data().to_vec();
                for (p, chunk) in dx.chunks_mut(plane).enumerate() {
                    let yp = &y[p * plane..(p + 1) * plane];
                    let mean_dy = chunk.iter().sum::<f64>() / plane as f64;
                    let mean_dyy =
                        chunk.iter().zip(yp).map(|(d, y)| d * y).sum::<f64>() / plane as f64;
                    for (d, yv) in chunk.iter_mut().zip(yp) {
                        *d = inv_std[p] * (*d - mean_dy - yv * mean_dyy);
                    }
                }
                out.push((*x, Tensor::new(dy.shape().to_vec(), dx)?));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(d, &v)| if v > 0.0 { *d } else { slope * d })
                    .collect();
                out.push((*x, Tensor::new(dy.shape().to_vec(), dx)?));
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                out.push((*x, Tensor::new(dy.shape().to_vec(), dx)?));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?.1;
                let (la, lb) = (ca * h * w, cb * h * w);
                let dyv = dy.data();
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for i in 0..n {
                    let s = &dyv[i * (la + lb)..(i + 1) * (la + lb)];
                    da.extend_from_slice(&s[..la]);
                    db.extend_from_slice(&s[la..]);
                }
                out.push((*a, Tensor::new(vec![n, ca, h, w], da)?));
                out.push((*b, Tensor::new(vec![n, cb, h, w], db)?));
            }
            Op::AvgPool { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (h / factor, w / factor);
                let scale = 1.0 / (factor * factor) as f64;
                let dyv = dy.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] =
                                dyv[p * oh * ow + (y / factor) * ow + xx / factor] * scale;
                        }
                    }
                }
                out.push((*x, Tensor::new(vec![n, c, h, w], dx)?));
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = Vec::with_capacity(n * c * plane);
                for &d in dy.data() {
                    dx.extend(std::iter::repeat_n(d / plane as f64, plane));
                }
                out.push((*x, Tensor::new(vec![n, c, h, w], dx)?));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = self.value(*x).dims2()?;
                let o = self.value(*w).dims2()?.0;
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * f];
                    gemm(
                        Mat::new(dy.data(), n, o),
                        Mat::new(self.value(*w).data(), o, f),
                        0.0,
                        &mut dx,
                    );
                    out.push((*x, Tensor::new(vec![n, f], dx)?));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * f];
                    gemm(
                        Mat::new(dy.data(), n, o).t(),
                        Mat::new(self.value(*x).data(), n, f),
                        0.0,
                        &mut dw,
                    );
                    out.push((*w, Tensor::new(vec![o, f], dw)?));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; o];
                    for row in dy.data().chunks(o) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((b, Tensor::new(vec![o], db)?));
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                let (_, f) = dy.dims2()?;
                let y = node.value.data();
                let mut dx = dy.data().to_vec();
                for (i, row) in dx.chunks_mut(f).enumerate() {
                    let yr = &y[i * f..(i + 1) * f];
                    let dot: f64 = row.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for (d, yv) in row.iter_mut().zip(yr) {
                        *d = (*d - yv * dot) * inv_norm[i];
                    }
                }
                out.push((*x, Tensor::new(dy.shape().to_vec(), dx)?));
            }
            Op::MeanAbsDiff { a, b } => {
                let g = dy.item();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = g / av.len() as f64;
                let da: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = self.value(*a).shape().to_vec();
                let db = da.iter().map(|v| -v).collect();
                out.push((*a, Tensor::new(shape.clone(), da)?));
                out.push((*b, Tensor::new(shape, db)?));
            }
            Op::MeanSqDiff { a, b } => {
                let g = dy.item();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                let shape = self.value(*a).shape().to_vec();
                let db = da.iter().map(|v| -v).collect();
                out.push((*a, Tensor::new(shape.clone(), da)?));
                out.push((*b, Tensor::new(shape, db)?));
            }
            Op::BceWithLogits { x, target } => {
                let g = dy.item();
                let xv = self.value(*x);
                let scale = g / xv.len() as f64;
                out.push((*x, xv.map(|l| scale * (sigmoid(l) - target))));
            }
            Op::WeightedSum { terms } => {
                let g = dy.item();
                for &(v, w) in terms {
                    out.push((v, Tensor::scalar(g * w)));
                }
            }
            Op::PairContrastive {
                a,
                b,
                genuine,
                margin,
            } => {
                let g = dy.item();
                let (n, f) = self.value(*a).dims2()?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; n * f];
                for i in 0..n {
                    let (ar, br) = (&av[i * f..(i + 1) * f], &bv[i * f..(i + 1) * f]);
                    let d = row_distance(ar, br);
                    // d(loss)/d(a − b)
                    let coef = if genuine[i] {
                        2.0
                    } else if d < *margin && d > 0.0 {
                        -2.0 * (margin - d) / d
                    } else {
                        0.0
                    };
                    for j in 0..f {
                        da[i * f + j] = g * coef * (ar[j] - br[j]) / n as f64;
                    }
                }
                let db = da.iter().map(|v| -v).collect();
                out.push((*a, Tensor::new(vec![n, f], da)?));
                out.push((*b, Tensor::new(vec![n, f], db)?));
            }
        }
        Ok(out)
    }
}

fn channel_sums(dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dy.dims4()?;
    let mut db = vec![0.0; c];
    for (p, plane) in dy.data().chunks(h * w).enumerate() {
        db[p % c] += plane.iter().sum::<f64>();
    }
    debug_assert_eq!(dy.len(), n * c * h * w);
    Tensor::new(vec![c], db)
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy of one logit against `target`.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Non-overlapping average pooling of an NCHW tensor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(TensorError::Invalid(format!(
            "cannot pool {h}x{w} by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let xv = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xv[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                out[p * oh * ow + (y / factor) * ow + xx / factor] += src[y * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(vec![n, c, oh, ow], out)
}
