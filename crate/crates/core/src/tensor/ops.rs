//! Forward operations and their backward rules.
//!
//! Each forward method validates shapes, computes the result into a fresh
//! buffer, and records an [`Op`] with parent links when the result is on a
//! gradient path. `backward_op` dispatches the vector-Jacobian products.

use super::conv;
use super::{Real, Record, Result, Tensor, TensorError};

/// Recorded operation kind, carrying whatever the backward pass needs.
pub enum Op<R: Real> {
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Linear,
    Softmax { axis: usize },
    Relu,
    Add,
    Mul,
    Affine { a: R },
    Concat { axis: usize },
    Reshape,
    GlobalAvgPool,
    AvgPool { k: usize, stride: usize },
    BatchNorm { mean: Vec<R>, invstd: Vec<R>, train: bool },
    BilinearUp,
    CosineMap { eps: R },
    MeanAll,
    SumAll,
    WeightedSum,
}

fn dim_err(op: &'static str, axis: &'static str, expected: usize, got: usize) -> TensorError {
    TensorError::DimMismatch { op, axis, expected, got }
}

fn want_rank<R: Real>(op: &'static str, t: &Tensor<R>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(dim_err(op, "rank", rank, t.shape().len()));
    }
    Ok(())
}

impl<R: Real> Tensor<R> {
    fn unary(&self, data: Vec<R>, shape: Vec<usize>, op: Op<R>) -> Tensor<R> {
        Tensor::make(
            data,
            shape,
            false,
            Some(Record {
                op,
                parents: vec![self.clone()],
            }),
        )
    }

    /// 2-D cross-correlation. `x: [B,Cin,H,W]`, `weight: [Cout,Cin,kh,kw]`,
    /// `bias: [Cout]`.
    pub fn conv2d(&self, weight: &Tensor<R>, bias: &Tensor<R>, stride: usize, pad: usize) -> Result<Tensor<R>> {
        want_rank("conv2d", self, 4)?;
        want_rank("conv2d", weight, 4)?;
        let (b, ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (co, wci, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wci != ci {
            return Err(dim_err("conv2d", "in_channels", ci, wci));
        }
        if bias.numel() != co {
            return Err(dim_err("conv2d", "bias", co, bias.numel()));
        }
        if stride < 1 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(dim_err("conv2d", "kernel", h + 2 * pad, kh.max(kw)));
        }
        let oh = conv::conv_out_size(h, kh, stride, pad);
        let ow = conv::conv_out_size(w, kw, stride, pad);
        let mut out = vec![R::zero(); b * co * oh * ow];
        conv::conv2d_forward(
            &self.0.data.borrow(),
            &weight.0.data.borrow(),
            &bias.0.data.borrow(),
            &mut out,
            (b, ci, h, w),
            (co, kh, kw),
            stride,
            pad,
        );
        Ok(Tensor::make(
            out,
            vec![b, co, oh, ow],
            false,
            Some(Record {
                op: Op::Conv2d { stride, pad },
                parents: vec![self.clone(), weight.clone(), bias.clone()],
            }),
        ))
    }

    /// Transposed 2-D convolution. `weight: [Cin,Cout,kh,kw]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<R>,
        bias: &Tensor<R>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<R>> {
        want_rank("conv_transpose2d", self, 4)?;
        want_rank("conv_transpose2d", weight, 4)?;
        let (b, ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (wci, co, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wci != ci {
            return Err(dim_err("conv_transpose2d", "in_channels", ci, wci));
        }
        if bias.numel() != co {
            return Err(dim_err("conv_transpose2d", "bias", co, bias.numel()));
        }
        let oh = conv::convt_out_size(h, kh, stride, pad);
        let ow = conv::convt_out_size(w, kw, stride, pad);
        let mut out = vec![R::zero(); b * co * oh * ow];
        conv::convt2d_forward(
            &self.0.data.borrow(),
            &weight.0.data.borrow(),
            &bias.0.data.borrow(),
            &mut out,
            (b, ci, h, w),
            (co, kh, kw),
            stride,
            pad,
        );
        Ok(Tensor::make(
            out,
            vec![b, co, oh, ow],
            false,
            Some(Record {
                op: Op::ConvT2d { stride, pad },
                parents: vec![self.clone(), weight.clone(), bias.clone()],
            }),
        ))
    }

    /// Fully connected layer: `y = x Wᵀ + b`. `x: [B,Din]`, `w: [Dout,Din]`.
    pub fn linear(&self, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
        want_rank("linear", self, 2)?;
        want_rank("linear", weight, 2)?;
        let (b, din) = (self.shape()[0], self.shape()[1]);
        let (dout, wdin) = (weight.shape()[0], weight.shape()[1]);
        if wdin != din {
            return Err(dim_err("linear", "in_features", din, wdin));
        }
        if bias.numel() != dout {
            return Err(dim_err("linear", "bias", dout, bias.numel()));
        }
        let x = self.0.data.borrow();
        let w = weight.0.data.borrow();
        let bs = bias.0.data.borrow();
        let mut out = vec![R::zero(); b * dout];
        for bi in 0..b {
            let xrow = &x[bi * din..][..din];
            for o in 0..dout {
                let wrow = &w[o * din..][..din];
                let mut acc = bs[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc = acc + *xv * *wv;
                }
                out[bi * dout + o] = acc;
            }
        }
        drop((x, w, bs));
        Ok(Tensor::make(
            out,
            vec![b, dout],
            false,
            Some(Record {
                op: Op::Linear,
                parents: vec![self.clone(), weight.clone(), bias.clone()],
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<R>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank,
            });
        }
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let x = self.0.data.borrow();
        let mut out = vec![R::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = x[base];
                for j in 1..n {
                    m = m.max(x[base + j * inner]);
                }
                let mut z = R::zero();
                for j in 0..n {
                    let e = (x[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    z = z + e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / z;
                }
            }
        }
        drop(x);
        Ok(self.unary(out, self.shape().to_vec(), Op::Softmax { axis }))
    }

    pub fn relu(&self) -> Tensor<R> {
        let out: Vec<R> = self.0.data.borrow().iter().map(|v| v.max(R::zero())).collect();
        self.unary(out, self.shape().to_vec(), Op::Relu)
    }

    pub fn add(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        if self.shape() != other.shape() {
            return Err(dim_err("add", "shape", self.numel(), other.numel()));
        }
        let out: Vec<R> = self
            .0
            .data
            .borrow()
            .iter()
            .zip(other.0.data.borrow().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(Tensor::make(
            out,
            self.shape().to_vec(),
            false,
            Some(Record {
                op: Op::Add,
                parents: vec![self.clone(), other.clone()],
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        if self.shape() != other.shape() {
            return Err(dim_err("mul", "shape", self.numel(), other.numel()));
        }
        let out: Vec<R> = self
            .0
            .data
            .borrow()
            .iter()
            .zip(other.0.data.borrow().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        Ok(Tensor::make(
            out,
            self.shape().to_vec(),
            false,
            Some(Record {
                op: Op::Mul,
                parents: vec![self.clone(), other.clone()],
            }),
        ))
    }

    /// Elementwise `a*x + b` with constants.
    pub fn affine(&self, a: R, b: R) -> Tensor<R> {
        let out: Vec<R> = self.0.data.borrow().iter().map(|v| a * *v + b).collect();
        self.unary(out, self.shape().to_vec(), Op::Affine { a })
    }

    pub fn scale(&self, a: R) -> Tensor<R> {
        self.affine(a, R::zero())
    }

    /// Concatenate along `axis`. All other axes must match.
    pub fn concat(parts: &[Tensor<R>], axis: usize) -> Result<Tensor<R>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut cat_dim = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(dim_err("concat", "rank", rank, p.shape().len()));
            }
            for (d, (a, b)) in first.shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(dim_err("concat", "non-concat axis", *a, *b));
                }
            }
            cat_dim += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = cat_dim;
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let outer: usize = first.shape()[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * cat_dim * inner);
        for o in 0..outer {
            for p in parts {
                let blk = p.shape()[axis] * inner;
                let d = p.0.data.borrow();
                out.extend_from_slice(&d[o * blk..][..blk]);
            }
        }
        Ok(Tensor::make(
            out,
            shape,
            false,
            Some(Record {
                op: Op::Concat { axis },
                parents: parts.to_vec(),
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<R>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", "numel", self.numel(), shape.iter().product()));
        }
        Ok(self.unary(self.to_vec(), shape.to_vec(), Op::Reshape))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&self) -> Result<Tensor<R>> {
        let b = *self.shape().first().unwrap_or(&1);
        let rest = self.numel() / b.max(1);
        self.reshape(&[b, rest])
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<R>> {
        want_rank("global_avg_pool", self, 4)?;
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let inv = R::from_f64(1.0 / (h * w) as f64);
        let x = self.0.data.borrow();
        let mut out = vec![R::zero(); b * c];
        for p in 0..b * c {
            out[p] = x[p * h * w..][..h * w].iter().copied().sum::<R>() * inv;
        }
        drop(x);
        Ok(self.unary(out, vec![b, c], Op::GlobalAvgPool))
    }

    pub fn avg_pool(&self, k: usize, stride: usize) -> Result<Tensor<R>> {
        want_rank("avg_pool", self, 4)?;
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if k > h || k > w {
            return Err(dim_err("avg_pool", "kernel", h.min(w), k));
        }
        let oh = conv::conv_out_size(h, k, stride, 0);
        let ow = conv::conv_out_size(w, k, stride, 0);
        let mut out = vec![R::zero(); b * c * oh * ow];
        conv::avg_pool_forward(&self.0.data.borrow(), &mut out, (b * c, h, w), k, stride);
        Ok(self.unary(out, vec![b, c, oh, ow], Op::AvgPool { k, stride }))
    }

    /// Batch normalization over `[B,H,W]` per channel.
    ///
    /// Training mode normalizes with batch statistics and returns them so
    /// the owning layer can update its running estimates; eval mode uses the
    /// supplied running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor<R>,
        beta: &Tensor<R>,
        running_mean: &[R],
        running_var: &[R],
        eps: f64,
        train: bool,
    ) -> Result<(Tensor<R>, Option<(Vec<R>, Vec<R>)>)> {
        want_rank("batchnorm2d", self, 4)?;
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if gamma.numel() != c || beta.numel() != c || running_mean.len() != c || running_var.len() != c {
            return Err(dim_err("batchnorm2d", "channels", c, gamma.numel()));
        }
        let m = (b * h * w) as f64;
        let x = self.0.data.borrow();
        let eps_r = R::from_f64(eps);
        let (mean, var): (Vec<R>, Vec<R>) = if train {
            let mut mean = vec![R::zero(); c];
            let mut var = vec![R::zero(); c];
            for ch in 0..c {
                let mut acc = R::zero();
                for bi in 0..b {
                    let plane = &x[(bi * c + ch) * h * w..][..h * w];
                    acc = acc + plane.iter().copied().sum::<R>();
                }
                mean[ch] = acc * R::from_f64(1.0 / m);
            }
            for ch in 0..c {
                let mu = mean[ch];
                let mut acc = R::zero();
                for bi in 0..b {
                    let plane = &x[(bi * c + ch) * h * w..][..h * w];
                    for v in plane {
                        let d = *v - mu;
                        acc = acc + d * d;
                    }
                }
                var[ch] = acc * R::from_f64(1.0 / m);
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<R> = var.iter().map(|v| R::one() / (*v + eps_r).sqrt()).collect();
        let g = gamma.0.data.borrow();
        let be = beta.0.data.borrow();
        let mut out = vec![R::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let (mu, is, ga, bt) = (mean[ch], invstd[ch], g[ch], be[ch]);
                for i in 0..h * w {
                    out[base + i] = (x[base + i] - mu) * is * ga + bt;
                }
            }
        }
        drop((x, g, be));
        let stats = if train { Some((mean.clone(), var.clone())) } else { None };
        let t = Tensor::make(
            out,
            self.shape().to_vec(),
            false,
            Some(Record {
                op: Op::BatchNorm { mean, invstd, train },
                parents: vec![self.clone(), gamma.clone(), beta.clone()],
            }),
        );
        Ok((t, stats))
    }

    /// Bilinear resize of `[B,C,H,W]` to `[B,C,th,tw]` (half-pixel centers).
    pub fn bilinear_upsample(&self, th: usize, tw: usize) -> Result<Tensor<R>> {
        want_rank("bilinear_upsample", self, 4)?;
        if th < 1 || tw < 1 {
            return Err(TensorError::Invalid {
                op: "bilinear_upsample",
                msg: format!("target size {}x{} must be >= 1", th, tw),
            });
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let mut out = vec![R::zero(); b * c * th * tw];
        conv::bilinear_forward(&self.0.data.borrow(), &mut out, b * c, (h, w), (th, tw));
        Ok(self.unary(out, vec![b, c, th, tw], Op::BilinearUp))
    }

    /// Per-position cosine similarity over the channel axis:
    /// `[B,C,H,W] x [B,C,H,W] -> [B,H,W]`, values in `[-1, 1]`.
    pub fn cosine_map(&self, other: &Tensor<R>, eps: f64) -> Result<Tensor<R>> {
        want_rank("cosine_map", self, 4)?;
        if self.shape() != other.shape() {
            return Err(dim_err("cosine_map", "shape", self.numel(), other.numel()));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let eps_r = R::from_f64(eps);
        let a = self.0.data.borrow();
        let bd = other.0.data.borrow();
        let hw = h * w;
        let mut out = vec![R::zero(); b * hw];
        for bi in 0..b {
            for i in 0..hw {
                let mut dot = R::zero();
                let mut na = R::zero();
                let mut nb = R::zero();
                for ch in 0..c {
                    let av = a[(bi * c + ch) * hw + i];
                    let bv = bd[(bi * c + ch) * hw + i];
                    dot = dot + av * bv;
                    na = na + av * av;
                    nb = nb + bv * bv;
                }
                out[bi * hw + i] = dot / (na.sqrt() * nb.sqrt() + eps_r);
            }
        }
        drop((a, bd));
        Ok(Tensor::make(
            out,
            vec![b, h, w],
            false,
            Some(Record {
                op: Op::CosineMap { eps: eps_r },
                parents: vec![self.clone(), other.clone()],
            }),
        ))
    }

    /// Mean over all elements, as a `[1]` scalar.
    pub fn mean_all(&self) -> Tensor<R> {
        let inv = R::from_f64(1.0 / self.numel() as f64);
        let s: R = self.0.data.borrow().iter().copied().sum();
        self.unary(vec![s * inv], vec![1], Op::MeanAll)
    }

    /// Sum over all elements, as a `[1]` scalar.
    pub fn sum_all(&self) -> Tensor<R> {
        let s: R = self.0.data.borrow().iter().copied().sum();
        self.unary(vec![s], vec![1], Op::SumAll)
    }

    /// Convex (or arbitrary) combination `Σ_j w[j]·x_j` of same-shape
    /// tensors, differentiable in both the weights and the inputs.
    pub fn weighted_sum(parts: &[Tensor<R>], weights: &Tensor<R>) -> Result<Tensor<R>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "weighted_sum",
                msg: "empty input list".into(),
            });
        }
        if weights.numel() != parts.len() {
            return Err(dim_err("weighted_sum", "weights", parts.len(), weights.numel()));
        }
        let shape = parts[0].shape().to_vec();
        for p in parts {
            if p.shape() != shape.as_slice() {
                return Err(dim_err("weighted_sum", "part shape", parts[0].numel(), p.numel()));
            }
        }
        let w = weights.0.data.borrow();
        let mut out = vec![R::zero(); parts[0].numel()];
        for (j, p) in parts.iter().enumerate() {
            let wv = w[j];
            for (o, v) in out.iter_mut().zip(p.0.data.borrow().iter()) {
                *o = *o + wv * *v;
            }
        }
        drop(w);
        let mut parents = vec![weights.clone()];
        parents.extend(parts.iter().cloned());
        Ok(Tensor::make(
            out,
            shape,
            false,
            Some(Record {
                op: Op::WeightedSum,
                parents,
            }),
        ))
    }
}

/// Vector-Jacobian product: scatter `grad` (w.r.t. `node`'s output) into the
/// parents that are on a gradient path.
pub(crate) fn backward_op<R: Real>(rec: &Record<R>, node: &Tensor<R>, grad: &[R]) {
    let parents = &rec.parents;
    match &rec.op {
        Op::Conv2d { stride, pad } => {
            let (x, w, _b) = (&parents[0], &parents[1], &parents[2]);
            let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let mut dx = vec![R::zero(); x.numel()];
            let mut dw = vec![R::zero(); w.numel()];
            let mut db = vec![R::zero(); co];
            conv::conv2d_backward(
                &x.0.data.borrow(),
                &w.0.data.borrow(),
                grad,
                &mut dx,
                &mut dw,
                &mut db,
                (bs, ci, h, wd),
                (co, kh, kw),
                *stride,
                *pad,
            );
            if parents[0].0.track {
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].0.track {
                parents[1].accumulate_grad(&dw);
            }
            if parents[2].0.track {
                parents[2].accumulate_grad(&db);
            }
        }
        Op::ConvT2d { stride, pad } => {
            let (x, w) = (&parents[0], &parents[1]);
            let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
            let mut dx = vec![R::zero(); x.numel()];
            let mut dw = vec![R::zero(); w.numel()];
            let mut db = vec![R::zero(); co];
            conv::convt2d_backward(
                &x.0.data.borrow(),
                &w.0.data.borrow(),
                grad,
                &mut dx,
                &mut dw,
                &mut db,
                (bs, ci, h, wd),
                (co, kh, kw),
                *stride,
                *pad,
            );
            if parents[0].0.track {
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].0.track {
                parents[1].accumulate_grad(&dw);
            }
            if parents[2].0.track {
                parents[2].accumulate_grad(&db);
            }
        }
        Op::Linear => {
            let (x, w) = (&parents[0], &parents[1]);
            let (b, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[0];
            let xd = x.0.data.borrow();
            let wd = w.0.data.borrow();
            if parents[0].0.track {
                let mut dx = vec![R::zero(); b * din];
                for bi in 0..b {
                    for o in 0..dout {
                        let gv = grad[bi * dout + o];
                        let wrow = &wd[o * din..][..din];
                        let dxrow = &mut dx[bi * din..][..din];
                        for (d, wv) in dxrow.iter_mut().zip(wrow) {
                            *d = *d + gv * *wv;
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].0.track {
                let mut dw = vec![R::zero(); dout * din];
                for bi in 0..b {
                    let xrow = &xd[bi * din..][..din];
                    for o in 0..dout {
                        let gv = grad[bi * dout + o];
                        let dwrow = &mut dw[o * din..][..din];
                        for (d, xv) in dwrow.iter_mut().zip(xrow) {
                            *d = *d + gv * *xv;
                        }
                    }
                }
                parents[1].accumulate_grad(&dw);
            }
            if parents[2].0.track {
                let mut db = vec![R::zero(); dout];
                for bi in 0..b {
                    for o in 0..dout {
                        db[o] = db[o] + grad[bi * dout + o];
                    }
                }
                parents[2].accumulate_grad(&db);
            }
        }
        Op::Softmax { axis } => {
            if !parents[0].0.track {
                return;
            }
            let y = node.0.data.borrow();
            let n = node.shape()[*axis];
            let inner: usize = node.shape()[*axis + 1..].iter().product();
            let outer: usize = node.shape()[..*axis].iter().product();
            let mut dx = vec![R::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = R::zero();
                    for j in 0..n {
                        dot = dot + grad[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..n {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (grad[idx] - dot);
                    }
                }
            }
            drop(y);
            parents[0].accumulate_grad(&dx);
        }
        Op::Relu => {
            if !parents[0].0.track {
                return;
            }
            let x = parents[0].0.data.borrow();
            let dx: Vec<R> = x
                .iter()
                .zip(grad)
                .map(|(xv, g)| if *xv > R::zero() { *g } else { R::zero() })
                .collect();
            drop(x);
            parents[0].accumulate_grad(&dx);
        }
        Op::Add => {
            for p in parents {
                if p.0.track {
                    p.accumulate_grad(grad);
                }
            }
        }
        Op::Mul => {
            if parents[0].0.track {
                let b = parents[1].0.data.borrow();
                let dx: Vec<R> = grad.iter().zip(b.iter()).map(|(g, v)| *g * *v).collect();
                drop(b);
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].0.track {
                let a = parents[0].0.data.borrow();
                let dx: Vec<R> = grad.iter().zip(a.iter()).map(|(g, v)| *g * *v).collect();
                drop(a);
                parents[1].accumulate_grad(&dx);
            }
        }
        Op::Affine { a } => {
            if parents[0].0.track {
                let dx: Vec<R> = grad.iter().map(|g| *a * *g).collect();
                parents[0].accumulate_grad(&dx);
            }
        }
        Op::Concat { axis } => {
            let inner: usize = node.shape()[*axis + 1..].iter().product();
            let outer: usize = node.shape()[..*axis].iter().product();
            let total = node.shape()[*axis];
            let mut offset = 0;
            for p in parents {
                let blk = p.shape()[*axis] * inner;
                if p.0.track {
                    let mut dp = vec![R::zero(); p.numel()];
                    for o in 0..outer {
                        let src = &grad[o * total * inner + offset..][..blk];
                        dp[o * blk..][..blk].copy_from_slice(src);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += blk;
            }
        }
        Op::Reshape => {
            if parents[0].0.track {
                parents[0].accumulate_grad(grad);
            }
        }
        Op::GlobalAvgPool => {
            if !parents[0].0.track {
                return;
            }
            let shape = parents[0].shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let inv = R::from_f64(1.0 / (h * w) as f64);
            let mut dx = vec![R::zero(); parents[0].numel()];
            for p in 0..b * c {
                let gv = grad[p] * inv;
                for v in dx[p * h * w..][..h * w].iter_mut() {
                    *v = gv;
                }
            }
            parents[0].accumulate_grad(&dx);
        }
        Op::AvgPool { k, stride } => {
            if !parents[0].0.track {
                return;
            }
            let shape = parents[0].shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let mut dx = vec![R::zero(); parents[0].numel()];
            conv::avg_pool_backward(grad, &mut dx, (b * c, h, w), *k, *stride);
            parents[0].accumulate_grad(&dx);
        }
        Op::BatchNorm { mean, invstd, train } => {
            let x = &parents[0];
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let hw = h * w;
            let m = R::from_f64((b * hw) as f64);
            let xd = x.0.data.borrow();
            let gam = parents[1].0.data.borrow();
            // Per-channel reductions Σg and Σg·x̂ serve both dγ/dβ and dx.
            let mut sum_g = vec![R::zero(); c];
            let mut sum_gx = vec![R::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    let (mu, is) = (mean[ch], invstd[ch]);
                    let mut sg = R::zero();
                    let mut sgx = R::zero();
                    for i in 0..hw {
                        let g = grad[base + i];
                        sg = sg + g;
                        sgx = sgx + g * (xd[base + i] - mu) * is;
                    }
                    sum_g[ch] = sum_g[ch] + sg;
                    sum_gx[ch] = sum_gx[ch] + sgx;
                }
            }
            if x.0.track {
                let mut dx = vec![R::zero(); x.numel()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let (mu, is, ga) = (mean[ch], invstd[ch], gam[ch]);
                        if *train {
                            let k1 = ga * is / m;
                            for i in 0..hw {
                                let xhat = (xd[base + i] - mu) * is;
                                dx[base + i] = k1 * (m * grad[base + i] - sum_g[ch] - xhat * sum_gx[ch]);
                            }
                        } else {
                            let k1 = ga * is;
                            for i in 0..hw {
                                dx[base + i] = k1 * grad[base + i];
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
            drop((xd, gam));
            if parents[1].0.track {
                parents[1].accumulate_grad(&sum_gx);
            }
            if parents[2].0.track {
                parents[2].accumulate_grad(&sum_g);
            }
        }
        Op::BilinearUp => {
            if !parents[0].0.track {
                return;
            }
            let shape = parents[0].shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let (th, tw) = (node.shape()[2], node.shape()[3]);
            let mut dx = vec![R::zero(); parents[0].numel()];
            conv::bilinear_backward(grad, &mut dx, b * c, (h, w), (th, tw));
            parents[0].accumulate_grad(&dx);
        }
        Op::CosineMap { eps } => {
            let (a, b_t) = (&parents[0], &parents[1]);
            let (bs, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
            let hw = h * w;
            let ad = a.0.data.borrow();
            let bd = b_t.0.data.borrow();
            let mut da = vec![R::zero(); ad.len()];
            let mut db = vec![R::zero(); bd.len()];
            for bi in 0..bs {
                for i in 0..hw {
                    let g = grad[bi * hw + i];
                    if g == R::zero() {
                        continue;
                    }
                    let mut dot = R::zero();
                    let mut na2 = R::zero();
                    let mut nb2 = R::zero();
                    for ch in 0..c {
                        let av = ad[(bi * c + ch) * hw + i];
                        let bv = bd[(bi * c + ch) * hw + i];
                        dot = dot + av * bv;
                        na2 = na2 + av * av;
                        nb2 = nb2 + bv * bv;
                    }
                    let na = na2.sqrt();
                    let nb = nb2.sqrt();
                    let den = na * nb + *eps;
                    let cval = dot / den;
                    let inv_na2 = if na > R::zero() { R::one() / na2 } else { R::zero() };
                    let inv_nb2 = if nb > R::zero() { R::one() / nb2 } else { R::zero() };
                    // d cos / d a_k = b_k/den − cos · (nb/na) · a_k / den
                    //              = (b_k − cos·den·a_k/na²·(na·nb/den)) / den; expanded below.
                    let ka = cval * na * nb * inv_na2 / den;
                    let kb = cval * na * nb * inv_nb2 / den;
                    for ch in 0..c {
                        let idx = (bi * c + ch) * hw + i;
                        let av = ad[idx];
                        let bv = bd[idx];
                        da[idx] = da[idx] + g * (bv / den - ka * av);
                        db[idx] = db[idx] + g * (av / den - kb * bv);
                    }
                }
            }
            drop((ad, bd));
            if parents[0].0.track {
                parents[0].accumulate_grad(&da);
            }
            if parents[1].0.track {
                parents[1].accumulate_grad(&db);
            }
        }
        Op::MeanAll => {
            if !parents[0].0.track {
                return;
            }
            let gv = grad[0] * R::from_f64(1.0 / parents[0].numel() as f64);
            let dx = vec![gv; parents[0].numel()];
            parents[0].accumulate_grad(&dx);
        }
        Op::SumAll => {
            if !parents[0].0.track {
                return;
            }
            let dx = vec![grad[0]; parents[0].numel()];
            parents[0].accumulate_grad(&dx);
        }
        Op::WeightedSum => {
            let weights = &parents[0];
            let n = parents.len() - 1;
            let wd = weights.0.data.borrow();
            if weights.0.track {
                let mut dw = vec![R::zero(); n];
                for (j, dwj) in dw.iter_mut().enumerate() {
                    let pd = parents[j + 1].0.data.borrow();
                    let mut acc = R::zero();
                    for (g, v) in grad.iter().zip(pd.iter()) {
                        acc = acc + *g * *v;
                    }
                    *dwj = acc;
                }
                drop(wd);
                weights.accumulate_grad(&dw);
            } else {
                drop(wd);
            }
            let wd = weights.0.data.borrow();
            for (j, p) in parents[1..].iter().enumerate() {
                if p.0.track {
                    let wv = wd[j];
                    let dx: Vec<R> = grad.iter().map(|g| wv * *g).collect();
                    p.accumulate_grad(&dx);
                }
            }
        }
    }
}
