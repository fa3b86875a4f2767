use crate::graph::Node;
use crate::kernels::{self, ConvGeom};
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: T,
        denom: Vec<T>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    ChannelDot(Var, Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    StopGradient(Var),
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Relu(..) => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ChannelDot(..) => "channel_dot",
            Op::Gather { .. } => "gather",
            Op::StopGradient(..) => "stop_gradient",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ChannelDot(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AvgPool2d { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Relu(x)
            | Op::L2Normalize { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Gather { x, .. }
            | Op::StopGradient(x) => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n−1) variance, the estimator running statistics track.
    pub var: Vec<T>,
}

/// `(outer, channels, inner)` for a tensor whose channel axis is 1.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Graph<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[N,C]` or `[N,C,...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.shape(x))
            .ok_or_else(|| TensorError::shape("add_bias", "input rank < 2"))?;
        if self.shape(bias) != [c] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..n {
            for (ci, &bv) in b.iter().enumerate() {
                let start = (i * c + ci) * inner;
                data[start..start + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias { x, bias }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        let out = Tensor::new([m, n], c)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Cross-correlation of `x[B,Cin,H,W]` with `w[Cout,Cin,kh,kw]`, plus an
    /// optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias {:?} for kernel {sw:?}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad).ok_or_else(|| {
            TensorError::shape(
                "conv2d",
                format!("kernel {sw:?} does not fit input {sx:?} with stride {stride}, pad {pad}"),
            )
        })?;
        let (batch, cout) = (sx[0], sw[0]);
        let (k, p) = (geom.patch_len(), geom.out_len());
        let xin = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); batch * cout * p];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let in_len = geom.cin * geom.h * geom.w;
        for bi in 0..batch {
            let xb = &xin[bi * in_len..(bi + 1) * in_len];
            let patches: &[T] = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(&geom, xb, &mut col);
                &col
            };
            let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
            kernels::gemm(cout, k, p, wd, patches, ob);
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    ob[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new([batch, cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(TensorError::shape(
                "avg_pool2d",
                format!("input {s:?} with window {k}"),
            ));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            let src = &xd[plane * s[2] * s[3]..];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += src[(oy * k + ky) * s[3] + ox * k + kx];
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let out = Tensor::new([s[0], s[1], oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::AvgPool2d { x, k }, rg)
    }

    /// `[B,C,H,W] → [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("global_avg_pool", format!("input {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = 1.0 / hw as f64;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| T::from_f64_lossy(plane.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
            .collect();
        let out = Tensor::new([s[0], s[1]], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, inner) = channel_layout(self.shape(x))
            .ok_or_else(|| TensorError::shape("batch_norm", "input rank < 2"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                "batch_norm",
                format!(
                    "scale {:?} / shift {:?} for input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        Ok((n, c, inner))
    }

    /// Batch normalization with statistics of the current batch, over every
    /// axis except 1. Returns the batch statistics for running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::usage(
                "batch_norm",
                format!("train mode needs batch size >= 2, got {n}"),
            ));
        }
        let count = (n * inner) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                let start = (i * c + ci) * inner;
                s += xd[start..start + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            mean[ci] = s / count;
            let mut q = 0.0;
            for i in 0..n {
                let start = (i * c + ci) * inner;
                q += xd[start..start + inner]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean[ci];
                        d * d
                    })
                    .sum::<f64>();
            }
            var[ci] = q / count;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + eps.as_f64()).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean_t, &inv_std, (n, c, inner));
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let stats = BatchStats {
            mean: mean_t,
            var: var
                .iter()
                .map(|&v| T::from_f64_lossy(v * count / (count - 1.0)))
                .collect(),
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let layout = self.bn_check(x, gamma, beta)?;
        if mean.len() != layout.1 || var.len() != layout.1 {
            return Err(TensorError::shape(
                "batch_norm",
                format!("running stats of length {} / {} for {} channels", mean.len(), var.len(), layout.1),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, mean, &inv_std, layout);
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        )
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        (n, c, inner): (usize, usize, usize),
    ) -> (Vec<T>, Vec<T>) {
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ci in 0..c {
                let start = (i * c + ci) * inner;
                for j in start..start + inner {
                    let h = (xd[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = g[ci] * h + b[ci];
                }
            }
        }
        (xhat, out)
    }

    /// Divides every vector along `axis` by `max(‖v‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(TensorError::shape(
                "l2_normalize",
                format!("axis {axis} of shape {s:?}"),
            ));
        }
        let (outer, d, inner) = axis_layout(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut denom = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * d * inner + i;
                let mut sq = T::zero();
                for k in 0..d {
                    let v = xd[base + k * inner];
                    sq += v * v;
                }
                let den = sq.sqrt().max(eps);
                denom[o * inner + i] = den;
                for k in 0..d {
                    out[base + k * inner] = xd[base + k * inner] / den;
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, axis, eps, denom }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| TensorError::usage("concat", "no inputs"))?;
        if first.len() < 2 {
            return Err(TensorError::shape("concat", "input rank < 2"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(TensorError::shape("concat", format!("{first:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let (n, inner) = (first[0], first[2..].iter().product::<usize>());
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[i * c * inner..(i + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::usage("mean", "empty tensor"));
        }
        let s: f64 = v.data().iter().map(|e| e.as_f64()).sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(x), rg)
    }

    /// `out[b,p,q] = Σ_c a[b,c,p]·b[b,c,q]`, trailing axes flattened.
    pub fn channel_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some((ba, ca, p)), Some((bb, cb, q))) = (channel_layout(&sa), channel_layout(&sb)) else {
            return Err(TensorError::shape("channel_dot", "input rank < 2"));
        };
        if ba != bb || ca != cb {
            return Err(TensorError::shape("channel_dot", format!("{sa:?} vs {sb:?}")));
        }
        let mut out = vec![T::zero(); ba * p * q];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            kernels::gemm_at(
                p,
                ca,
                q,
                &ad[i * ca * p..(i + 1) * ca * p],
                &bd[i * ca * q..(i + 1) * ca * q],
                &mut out[i * p * q..(i + 1) * p * q],
            );
        }
        let out = Tensor::new([ba, p, q], out)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ChannelDot(a, b), rg)
    }

    /// Cosine similarity between every location of `a[B,C,...]` and every
    /// location of `b[B,C,...]`, shaped `[B, |a locations|, |b locations|]`.
    pub fn cosine_similarity_map(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let na = self.l2_normalize(a, 1, eps)?;
        let nb = self.l2_normalize(b, 1, eps)?;
        self.channel_dot(na, nb)
    }

    /// Picks locations of `x[B,C,...]`: `out[b,c,p] = x[b,c,index[b·P+p]]`,
    /// shaped `[B,C] ++ out_spatial`.
    pub fn gather_locations(&mut self, x: Var, index: &[usize], out_spatial: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, c, q) = channel_layout(&s)
            .ok_or_else(|| TensorError::shape("gather", "input rank < 2"))?;
        let p: usize = out_spatial.iter().product();
        if index.len() != n * p {
            return Err(TensorError::shape(
                "gather",
                format!("{} indices for batch {n} x {p} locations", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= q) {
            return Err(TensorError::usage(
                "gather",
                format!("index {bad} out of range for {q} locations"),
            ));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * p];
        for bi in 0..n {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * q..(bi * c + ci + 1) * q];
                let dst = &mut out[(bi * c + ci) * p..(bi * c + ci + 1) * p];
                for (pi, d) in dst.iter_mut().enumerate() {
                    *d = src[index[bi * p + pi]];
                }
            }
        }
        let mut shape = vec![n, c];
        shape.extend_from_slice(out_spatial);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient(x), false)
    }
}

impl<T: Real> Op<T> {
    /// Gradient contributions to this op's inputs given the output gradient.
    pub(crate) fn backward(&self, nodes: &[Node<T>], me: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: Var| &nodes[v.0].value;
        let need = |v: Var| nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match self {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.iter().zip(val(*b).data()).map(|(&gv, &bv)| gv * bv).collect()));
                }
                if need(*b) {
                    out.push((*b, g.iter().zip(val(*a).data()).map(|(&gv, &av)| gv * av).collect()));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::AddBias { x, bias } => {
                out.push((*x, g.to_vec()));
                if need(*bias) {
                    let (n, c, inner) = channel_layout(val(*x).shape()).unwrap();
                    let mut gb = vec![0.0f64; c];
                    for i in 0..n {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            let start = (i * c + ci) * inner;
                            *acc += g[start..start + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                    }
                    out.push((*bias, gb.into_iter().map(T::from_f64_lossy).collect()));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if need(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_bt(m, n, k, g, val(*b).data(), &mut ga);
                    out.push((*a, ga));
                }
                if need(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_at(k, m, n, val(*a).data(), g, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = val(*x).shape()[0];
                let cout = val(*w).shape()[0];
                let (k, p) = (geom.patch_len(), geom.out_len());
                let in_len = geom.cin * geom.h * geom.w;
                let xd = val(*x).data();
                let wd = val(*w).data();
                let (need_x, need_w) = (need(*x), need(*w));
                let mut gx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut gw = vec![T::zero(); if need_w { wd.len() } else { 0 }];
                let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                let mut dcol = if need_x && !geom.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
                for bi in 0..batch {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    let xb = &xd[bi * in_len..(bi + 1) * in_len];
                    if need_w {
                        let patches: &[T] = if geom.is_pointwise() {
                            xb
                        } else {
                            kernels::im2col(geom, xb, &mut col);
                            &col
                        };
                        kernels::gemm_bt(cout, p, k, gb, patches, &mut gw);
                    }
                    if need_x {
                        let gxb = &mut gx[bi * in_len..(bi + 1) * in_len];
                        if geom.is_pointwise() {
                            kernels::gemm_at(k, cout, p, wd, gb, gxb);
                        } else {
                            dcol.fill(T::zero());
                            kernels::gemm_at(k, cout, p, wd, gb, &mut dcol);
                            kernels::col2im(geom, &dcol, gxb);
                        }
                    }
                }
                if need_x {
                    out.push((*x, gx));
                }
                if need_w {
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut gbias = vec![0.0f64; cout];
                        for bi in 0..batch {
                            for (co, acc) in gbias.iter_mut().enumerate() {
                                let start = (bi * cout + co) * p;
                                *acc += g[start..start + p].iter().map(|v| v.as_f64()).sum::<f64>();
                            }
                        }
                        out.push((*b, gbias.into_iter().map(T::from_f64_lossy).collect()));
                    }
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = val(*x).shape();
                let (oh, ow) = (s[2] / k, s[3] / k);
                let inv = T::one() / T::from_usize(k * k).unwrap();
                let mut gx = vec![T::zero(); val(*x).numel()];
                for plane in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(plane * oh + oy) * ow + ox] * inv;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    gx[plane * s[2] * s[3] + (oy * k + ky) * s[3] + ox * k + kx] += gv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut gx = Vec::with_capacity(val(*x).numel());
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                out.push((*x, gx));
            }
            Op::Relu(x) => {
                out.push((
                    *x,
                    g.iter()
                        .zip(val(*x).data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                ));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, inner) = channel_layout(val(*x).shape()).unwrap();
                let gam = val(*gamma).data();
                let count = (n * inner) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ci in 0..c {
                        let start = (i * c + ci) * inner;
                        for j in start..start + inner {
                            sum_g[ci] += g[j].as_f64();
                            sum_gx[ci] += (g[j] * xhat[j]).as_f64();
                        }
                    }
                }
                if need(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ci in 0..c {
                            let start = (i * c + ci) * inner;
                            let scale = gam[ci] * inv_std[ci];
                            if *train {
                                let mg = T::from_f64_lossy(sum_g[ci] / count);
                                let mgx = T::from_f64_lossy(sum_gx[ci] / count);
                                for j in start..start + inner {
                                    gx[j] = scale * (g[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in start..start + inner {
                                    gx[j] = scale * g[j];
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                out.push((*gamma, sum_gx.into_iter().map(T::from_f64_lossy).collect()));
                out.push((*beta, sum_g.into_iter().map(T::from_f64_lossy).collect()));
            }
            Op::L2Normalize { x, axis, eps, denom } => {
                let s = val(*x).shape();
                let (outer, d, inner) = axis_layout(s, *axis);
                let y = me.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * d * inner + i;
                        let den = denom[o * inner + i];
                        // Clamped vectors are divided by the constant eps.
                        let clamped = den <= *eps;
                        let mut proj = T::zero();
                        if !clamped {
                            for kk in 0..d {
                                proj += g[base + kk * inner] * y[base + kk * inner];
                            }
                        }
                        for kk in 0..d {
                            let idx = base + kk * inner;
                            gx[idx] = (g[idx] - y[idx] * proj) / den;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat(parts) => {
                let s0 = val(parts[0]).shape();
                let (n, inner) = (s0[0], s0[2..].iter().product::<usize>());
                let total_c: usize = parts.iter().map(|&p| val(p).shape()[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    let mut gp = Vec::with_capacity(n * c * inner);
                    for i in 0..n {
                        let start = (i * total_c + offset) * inner;
                        gp.extend_from_slice(&g[start..start + c * inner]);
                    }
                    offset += c;
                    out.push((p, gp));
                }
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::ChannelDot(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, c, p) = channel_layout(sa).unwrap();
                let q = channel_layout(sb).unwrap().2;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if need(*a) {
                    let mut ga = vec![T::zero(); ad.len()];
                    for i in 0..n {
                        kernels::gemm_bt(
                            c,
                            q,
                            p,
                            &bd[i * c * q..(i + 1) * c * q],
                            &g[i * p * q..(i + 1) * p * q],
                            &mut ga[i * c * p..(i + 1) * c * p],
                        );
                    }
                    out.push((*a, ga));
                }
                if need(*b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    for i in 0..n {
                        kernels::gemm(
                            c,
                            p,
                            q,
                            &ad[i * c * p..(i + 1) * c * p],
                            &g[i * p * q..(i + 1) * p * q],
                            &mut gb[i * c * q..(i + 1) * c * q],
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::Gather { x, index } => {
                let (n, c, q) = channel_layout(val(*x).shape()).unwrap();
                let p = index.len() / n;
                let mut gx = vec![T::zero(); val(*x).numel()];
                for bi in 0..n {
                    for ci in 0..c {
                        for pi in 0..p {
                            gx[(bi * c + ci) * q + index[bi * p + pi]] += g[(bi * c + ci) * p + pi];
                        }
                    }
                }
                out.push((*x, gx));
            }
        }
        Ok(out)
    }
}
