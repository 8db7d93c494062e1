//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Node indices are assigned in insertion order, so
//! the tape is topologically sorted by construction and `backward` simply
//! walks it in reverse.

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        /// im2col buffers for the whole batch, kept only when a gradient is needed.
        cols: Vec<f32>,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        /// normalized input, kept for the backward pass
        xhat: Vec<f32>,
        /// per-sample 1/sqrt(var + eps)
        inv_std: Vec<f32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        /// per-channel 1/sqrt(var + eps)
        inv_std: Vec<f32>,
        /// batch mean and biased variance; empty when fixed statistics were used
        moments: Option<(Vec<f32>, Vec<f32>)>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Reshape {
        input: Var,
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
        input: Var,
        factor: f32,
    },
    Sum {
        input: Var,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    MeanRows {
        input: Var,
    },
    ChannelMean {
        input: Var,
    },
    ChannelStd {
        input: Var,
    },
    AdaIn {
        input: Var,
        mean: Var,
        std: Var,
        target_mean: Var,
        target_std: Var,
        eps: f32,
    },
    SimilarityScores {
        query: Var,
        key: Var,
    },
    SoftmaxRows {
        input: Var,
    },
    AttentionPool {
        features: Var,
        weights: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
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

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        inputs_of(op)
            .into_iter()
            .all(|v| self.nodes[v.0].value.all_finite())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("conv2d")?;
        let (co, ci, kh, kw) = self.value(weight).dims4("conv2d")?;
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                "in_channels",
                format!("input has {c} channels, weight expects {ci}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "kernel", "only square kernels"));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [co] {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("expected [{co}], got {:?}", self.value(bv).shape()),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride", "stride must be positive"));
        }
        if kh > h + 2 * pad || kh > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                "kernel",
                format!("kernel {kh} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) {
            return Err(Error::shape(
                "conv2d",
                "height",
                format!("(H+2·pad−k) = {} not divisible by stride {stride}", h + 2 * pad - kh),
            ));
        }
        if !(w + 2 * pad - kw).is_multiple_of(stride) {
            return Err(Error::shape(
                "conv2d",
                "width",
                format!("(W+2·pad−k) = {} not divisible by stride {stride}", w + 2 * pad - kw),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let needs_grad = self.any_grad(&inputs);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_len = c * h * w;
        let out_len = co * ncols;
        let mut out = vec![0.0f32; b * out_len];
        let mut cols = vec![0.0f32; if needs_grad { b * rows * ncols } else { rows * ncols }];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let bias_data = bias.map(|bv| self.value(bv).data());
            for bi in 0..b {
                let col = if needs_grad {
                    &mut cols[bi * rows * ncols..(bi + 1) * rows * ncols]
                } else {
                    &mut cols[..]
                };
                kernels::im2col(&geom, &x[bi * in_len..(bi + 1) * in_len], col);
                let o = &mut out[bi * out_len..(bi + 1) * out_len];
                if let Some(bd) = bias_data {
                    for (oc, chunk) in o.chunks_mut(ncols).enumerate() {
                        chunk.fill(bd[oc]);
                    }
                }
                kernels::gemm_nn(co, rows, ncols, wt, col, o);
            }
        }
        if !needs_grad {
            cols = Vec::new();
        }
        let value = Tensor::new(vec![b, co, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            needs_grad,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    /// `max(x, slope·x)`; the derivative at exactly 0 is taken as `slope`.
    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::LeakyRelu { input, slope })
    }

    /// Per-sample normalization over `C,H,W` followed by a per-channel
    /// affine map: `y = gamma_c · (x − m_b)/sqrt(v_b + eps) + beta_c`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("layer_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    name,
                    format!("expected [{c}], got {:?}", self.value(v).shape()),
                ));
            }
        }
        let (n, hw) = (c * h * w, h * w);
        let x = self.value(input).data();
        let (ga, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        let mut inv_std = Vec::with_capacity(b);
        for bi in 0..b {
            let xs = &x[bi * n..(bi + 1) * n];
            let m = mean_f64(xs);
            let var = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            let inv = (1.0 / (var + eps as f64).sqrt()) as f32;
            inv_std.push(inv);
            let m = m as f32;
            for ch in 0..c {
                for p in 0..hw {
                    let i = bi * n + ch * hw + p;
                    let xh = (x[i] - m) * inv;
                    xhat[i] = xh;
                    out[i] = ga[ch] * xh + be[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let needs = rg;
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat: if needs { xhat } else { Vec::new() },
                inv_std,
            },
        ))
    }

    /// Per-channel normalization over `B,H,W` followed by a per-channel
    /// affine map. With `fixed = Some((mean, var))` those statistics are used
    /// as constants; otherwise the batch moments are used and differentiated
    /// through, and can be read back with [`Tape::batch_moments`].
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        fixed: Option<(&[f32], &[f32])>,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    name,
                    format!("expected [{c}], got {:?}", self.value(v).shape()),
                ));
            }
        }
        if let Some((m, v)) = fixed {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm", "running", format!("expected {c} channels")));
            }
        }
        let hw = h * w;
        let x = self.value(input).data();
        let plane = |bi: usize, ch: usize| &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
        let (mean, var) = match fixed {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let n = (b * hw) as f64;
                let mut mean = Vec::with_capacity(c);
                let mut var = Vec::with_capacity(c);
                for ch in 0..c {
                    let m = (0..b).map(|bi| plane(bi, ch).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / n;
                    let v = (0..b)
                        .map(|bi| plane(bi, ch).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
                        .sum::<f64>()
                        / n;
                    mean.push(m as f32);
                    var.push(v as f32);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v as f64 + eps as f64).sqrt()) as f32).collect();
        let (ga, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for p in 0..hw {
                    let xh = (x[base + p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    out[base + p] = ga[ch] * xh + be[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
                moments: fixed.is_none().then_some((mean, var)),
            },
        ))
    }

    /// Batch mean and biased variance used by a batch-statistics
    /// [`Tape::batch_norm`] node.
    pub fn batch_moments(&self, v: Var) -> Option<(&[f32], &[f32])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                moments: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let hw = h * w;
        let x = self.value(input).data();
        let data = x
            .chunks(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    /// `y = x·Wᵀ + b` with `x: [B,D]`, `W: [O,D]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, d) = self.value(input).dims2("linear")?;
        let (o, dw) = self.value(weight).dims2("linear")?;
        if d != dw {
            return Err(Error::shape(
                "linear",
                "in_features",
                format!("input width {d}, weight expects {dw}"),
            ));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::shape(
                "linear",
                "bias",
                format!("expected [{o}], got {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = Vec::with_capacity(b * o);
        let bd = self.value(bias).data();
        for _ in 0..b {
            out.extend_from_slice(bd);
        }
        kernels::gemm_nt(
            b,
            d,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        let value = Tensor::new(vec![b, o], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, computed with
    /// max-subtraction and `f64` accumulation.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "batch",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if b == 0 {
            return Err(Error::EmptyDataset("cross-entropy over an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; b * k];
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_sum = sum.ln();
            for j in 0..k {
                probs[i * k + j] = ((row[j] as f64 - max).exp() / sum) as f32;
            }
            total += log_sum - (row[label] as f64 - max);
        }
        let value = Tensor::scalar((total / b as f64) as f32);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                "operands",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Scale { input, factor })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total as f32), rg, Op::Sum { input })
    }

    /// Select slices along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if x.rank() == 0 {
            return Err(Error::shape("gather_rows", "rank", "cannot gather from a scalar"));
        }
        let rows = x.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                "index",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let n = x.row_len();
        let mut data = Vec::with_capacity(n * index.len());
        for &i in index {
            data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                input,
                index: index.to_vec(),
            },
        ))
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "count", "nothing to concatenate"))?;
        let tail = self.value(first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    "trailing dims",
                    format!("{:?} vs {:?}", t.shape(), tail),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            rg,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// `[B,D1] ⧺ [B,D2] -> [B,D1+D2]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.value(a).dims2("concat_cols")?;
        let (rb, db) = self.value(b).dims2("concat_cols")?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                "rows",
                format!("{ra} vs {rb}"),
            ));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (da + db));
        for r in 0..ra {
            data.extend_from_slice(&xa[r * da..(r + 1) * da]);
            data.extend_from_slice(&xb[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(vec![ra, da + db], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatCols { a, b }))
    }

    /// `[R,C] -> [1,C]` column means.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let (r, c) = self.value(input).dims2("mean_rows")?;
        if r == 0 {
            return Err(Error::shape("mean_rows", "rows", "mean of zero rows"));
        }
        let x = self.value(input).data();
        let data = (0..c)
            .map(|j| ((0..r).map(|i| x[i * c + j] as f64).sum::<f64>() / r as f64) as f32)
            .collect();
        let value = Tensor::new(vec![1, c], data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::MeanRows { input }))
    }

    /// Per-sample, per-channel spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("channel_mean")?;
        let hw = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| mean_f64(p) as f32)
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::ChannelMean { input }))
    }

    /// Per-sample, per-channel spatial standard deviation (population
    /// variance): `[B,C,H,W] -> [B,C]`. The derivative is taken as 0 where
    /// the deviation is exactly 0.
    pub fn channel_std(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("channel_std")?;
        let hw = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| {
                let m = mean_f64(p);
                let var = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / hw as f64;
                var.sqrt() as f32
            })
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::ChannelStd { input }))
    }

    /// Adaptive instance normalization:
    /// `y = target_std ⊙ (x − mean)/√(std² + eps) + target_mean`, with all
    /// statistics shaped `[B,C]` and broadcast over `H,W`. The floor keeps a
    /// collapsed (constant) channel from amplifying rounding residue.
    pub fn adain(
        &mut self,
        input: Var,
        mean: Var,
        std: Var,
        target_mean: Var,
        target_std: Var,
        eps: f32,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("adain")?;
        for (name, v) in [
            ("mean", mean),
            ("std", std),
            ("target_mean", target_mean),
            ("target_std", target_std),
        ] {
            if self.value(v).shape() != [b, c] {
                return Err(Error::shape(
                    "adain",
                    name,
                    format!("expected [{b},{c}], got {:?}", self.value(v).shape()),
                ));
            }
        }
        let hw = h * w;
        let x = self.value(input).data();
        let (m, s) = (self.value(mean).data(), self.value(std).data());
        let (tm, ts) = (self.value(target_mean).data(), self.value(target_std).data());
        let mut out = vec![0.0f32; x.len()];
        for bc in 0..b * c {
            let inv = 1.0 / (s[bc] * s[bc] + eps).sqrt();
            for p in 0..hw {
                let i = bc * hw + p;
                out[i] = ts[bc] * ((x[i] - m[bc]) * inv) + tm[bc];
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.any_grad(&[input, mean, std, target_mean, target_std]);
        Ok(self.push(
            value,
            rg,
            Op::AdaIn {
                input,
                mean,
                std,
                target_mean,
                target_std,
                eps,
            },
        ))
    }

    /// Attention logits for each sample: builds the spatial similarity
    /// `S = Qᵀ K` (`[HW,HW]`, rows indexed by query position) and returns the
    /// mean over query positions, one value per key position: `[B,HW]`.
    pub fn similarity_scores(&mut self, query: Var, key: Var) -> Result<Var> {
        self.check_same_shape("similarity_scores", query, key)?;
        let (b, d, h, w) = self.value(query).dims4("similarity_scores")?;
        let hw = h * w;
        let q = self.value(query).data();
        let k = self.value(key).data();
        let mut out = vec![0.0f32; b * hw];
        let mut sim = vec![0.0f32; hw * hw];
        for bi in 0..b {
            let qb = &q[bi * d * hw..(bi + 1) * d * hw];
            let kb = &k[bi * d * hw..(bi + 1) * d * hw];
            sim.fill(0.0);
            kernels::gemm_tn(hw, d, hw, qb, kb, &mut sim);
            let row = &mut out[bi * hw..(bi + 1) * hw];
            for m in 0..hw {
                let col: f64 = (0..hw).map(|p| sim[p * hw + m] as f64).sum();
                row[m] = (col / hw as f64) as f32;
            }
        }
        let value = Tensor::new(vec![b, hw], out)?;
        let rg = self.any_grad(&[query, key]);
        Ok(self.push(value, rg, Op::SimilarityScores { query, key }))
    }

    /// Row-wise softmax of a `[B,N]` matrix.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let (b, n) = self.value(input).dims2("softmax_rows")?;
        let x = self.value(input).data();
        let mut out = vec![0.0f32; b * n];
        for i in 0..b {
            softmax_into(&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![b, n], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::SoftmaxRows { input }))
    }

    /// `A[b,c] = Σ_p weights[b,p] · features[b,c,p]`.
    pub fn attention_pool(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(features).dims4("attention_pool")?;
        let hw = h * w;
        if self.value(weights).shape() != [b, hw] {
            return Err(Error::shape(
                "attention_pool",
                "weights",
                format!("expected [{b},{hw}], got {:?}", self.value(weights).shape()),
            ));
        }
        let z = self.value(features).data();
        let a = self.value(weights).data();
        let mut out = vec![0.0f32; b * c];
        for bi in 0..b {
            let ab = &a[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let zc = &z[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                out[bi * c + ci] = zc
                    .iter()
                    .zip(ab)
                    .map(|(&zv, &av)| zv as f64 * av as f64)
                    .sum::<f64>() as f32;
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        let rg = self.any_grad(&[features, weights]);
        Ok(self.push(value, rg, Op::AttentionPool { features, weights }))
    }

    // ----------------------------------------------------------- backward

    /// Populate gradients of `loss` w.r.t. every gradient-requiring node
    /// reachable from it. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &[f32]) {
        // Partials are computed against an immutable view of the node, then
        // accumulated; this keeps the borrow of `self.nodes` short.
        let mut partials: Vec<(Var, Vec<f32>)> = Vec::new();
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (b, co) = (node.value.shape()[0], node.value.shape()[1]);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let w = val(*weight);
                let mut dw = vec![0.0f32; w.len()];
                let mut dx = vec![0.0f32; if needs(*input) { b * in_len } else { 0 }];
                let mut dcols = vec![0.0f32; rows * ncols];
                for bi in 0..b {
                    let gb = &g[bi * co * ncols..(bi + 1) * co * ncols];
                    let cb = &cols[bi * rows * ncols..(bi + 1) * rows * ncols];
                    if needs(*weight) {
                        kernels::gemm_nt(co, ncols, rows, gb, cb, &mut dw);
                    }
                    if needs(*input) {
                        dcols.fill(0.0);
                        kernels::gemm_tn(rows, co, ncols, w, gb, &mut dcols);
                        kernels::col2im(geom, &dcols, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if let Some(bv) = bias {
                    let mut db = vec![0.0f32; co];
                    for bi in 0..b {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let s = &g[(bi * co + oc) * ncols..(bi * co + oc + 1) * ncols];
                            *d += s.iter().sum::<f32>();
                        }
                    }
                    partials.push((*bv, db));
                }
                partials.push((*weight, dw));
                partials.push((*input, dx));
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                partials.push((*input, d));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let n = c * hw;
                let ga = val(*gamma);
                let mut dg = vec![0.0f32; c];
                let mut db = vec![0.0f32; c];
                let mut dx = vec![0.0f32; if needs(*input) { b * n } else { 0 }];
                for bi in 0..b {
                    let mut sum_d = 0.0f64;
                    let mut sum_dx = 0.0f64;
                    for ch in 0..c {
                        let mut sg = 0.0f64;
                        let mut sgx = 0.0f64;
                        for p in 0..hw {
                            let i = bi * n + ch * hw + p;
                            sg += g[i] as f64;
                            sgx += (g[i] * xhat[i]) as f64;
                        }
                        db[ch] += sg as f32;
                        dg[ch] += sgx as f32;
                        sum_d += ga[ch] as f64 * sg;
                        sum_dx += ga[ch] as f64 * sgx;
                    }
                    if needs(*input) {
                        let md = (sum_d / n as f64) as f32;
                        let mdx = (sum_dx / n as f64) as f32;
                        let inv = inv_std[bi];
                        for ch in 0..c {
                            for p in 0..hw {
                                let i = bi * n + ch * hw + p;
                                dx[i] = inv * (ga[ch] * g[i] - md - xhat[i] * mdx);
                            }
                        }
                    }
                }
                partials.push((*gamma, dg));
                partials.push((*beta, db));
                partials.push((*input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                moments,
            } => {
                let shape = node.value.shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let ga = val(*gamma);
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            db[ch] += g[base + p] as f64;
                            dg[ch] += (g[base + p] * xhat[base + p]) as f64;
                        }
                    }
                }
                if needs(*input) {
                    let n = (b * hw) as f64;
                    let mut dx = vec![0.0f32; b * c * hw];
                    for ch in 0..c {
                        let scale = ga[ch] * inv_std[ch];
                        // batch statistics contribute the two centering terms
                        let (md, mdx) = if moments.is_some() {
                            ((db[ch] / n) as f32, (dg[ch] / n) as f32)
                        } else {
                            (0.0, 0.0)
                        };
                        for bi in 0..b {
                            let base = (bi * c + ch) * hw;
                            for p in 0..hw {
                                let i = base + p;
                                dx[i] = scale * (g[i] - md - xhat[i] * mdx);
                            }
                        }
                    }
                    partials.push((*input, dx));
                }
                partials.push((*gamma, dg.into_iter().map(|v| v as f32).collect()));
                partials.push((*beta, db.into_iter().map(|v| v as f32).collect()));
            }
            Op::GlobalAvgPool { input } => {
                let x = &self.nodes[input.0].value;
                let hw = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / hw as f32;
                let mut d = vec![0.0f32; x.numel()];
                for (bc, &gv) in g.iter().enumerate() {
                    d[bc * hw..(bc + 1) * hw].fill(gv * inv);
                }
                partials.push((*input, d));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let (b, dim) = (x.shape()[0], x.shape()[1]);
                let o = node.value.shape()[1];
                let w = val(*weight);
                if needs(*input) {
                    let mut dx = vec![0.0f32; b * dim];
                    kernels::gemm_nn(b, o, dim, g, w, &mut dx);
                    partials.push((*input, dx));
                }
                if needs(*weight) {
                    let mut dw = vec![0.0f32; o * dim];
                    kernels::gemm_tn(o, b, dim, g, x.data(), &mut dw);
                    partials.push((*weight, dw));
                }
                let mut db = vec![0.0f32; o];
                for r in 0..b {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += g[r * o + j];
                    }
                }
                partials.push((*bias, db));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f32;
                let mut d: Vec<f32> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                partials.push((*logits, d));
            }
            Op::Reshape { input } => partials.push((*input, g.to_vec())),
            Op::Add { a, b } => {
                partials.push((*a, g.to_vec()));
                partials.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                partials.push((*a, g.to_vec()));
                partials.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                partials.push((*a, g.iter().zip(xb).map(|(gv, bv)| gv * bv).collect()));
                partials.push((*b, g.iter().zip(xa).map(|(gv, av)| gv * av).collect()));
            }
            Op::Scale { input, factor } => {
                partials.push((*input, g.iter().map(|v| v * factor).collect()));
            }
            Op::Sum { input } => {
                let n = self.nodes[input.0].value.numel();
                partials.push((*input, vec![g[0]; n]));
            }
            Op::GatherRows { input, index } => {
                let x = &self.nodes[input.0].value;
                let n = x.row_len();
                let mut d = vec![0.0f32; x.numel()];
                for (r, &src) in index.iter().enumerate() {
                    for (di, gi) in d[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *di += gi;
                    }
                }
                partials.push((*input, d));
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].value.numel();
                    partials.push((v, g[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::ConcatCols { a, b } => {
                let r = node.value.shape()[0];
                let width = node.value.shape()[1];
                let wa = if r == 0 { 0 } else { val(*a).len() / r };
                let wb = width - wa;
                let mut ga = Vec::with_capacity(r * wa);
                let mut gb = Vec::with_capacity(r * wb);
                for i in 0..r {
                    ga.extend_from_slice(&g[i * width..i * width + wa]);
                    gb.extend_from_slice(&g[i * width + wa..(i + 1) * width]);
                }
                partials.push((*a, ga));
                partials.push((*b, gb));
            }
            Op::MeanRows { input } => {
                let x = &self.nodes[input.0].value;
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let inv = 1.0 / r as f32;
                let mut d = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j] * inv;
                    }
                }
                partials.push((*input, d));
            }
            Op::ChannelMean { input } => {
                let x = &self.nodes[input.0].value;
                let hw = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / hw as f32;
                let mut d = vec![0.0f32; x.numel()];
                for (bc, &gv) in g.iter().enumerate() {
                    d[bc * hw..(bc + 1) * hw].fill(gv * inv);
                }
                partials.push((*input, d));
            }
            Op::ChannelStd { input } => {
                let x = &self.nodes[input.0].value;
                let hw = x.shape()[2] * x.shape()[3];
                let s = node.value.data();
                let mut d = vec![0.0f32; x.numel()];
                for (bc, &gv) in g.iter().enumerate() {
                    if s[bc] <= 0.0 {
                        continue;
                    }
                    let plane = &x.data()[bc * hw..(bc + 1) * hw];
                    let m = mean_f64(plane) as f32;
                    let coef = gv / (hw as f32 * s[bc]);
                    for (di, &xv) in d[bc * hw..(bc + 1) * hw].iter_mut().zip(plane) {
                        *di = coef * (xv - m);
                    }
                }
                partials.push((*input, d));
            }
            Op::AdaIn {
                input,
                mean,
                std,
                target_mean,
                target_std,
                eps,
            } => {
                let x = &self.nodes[input.0].value;
                let hw = x.shape()[2] * x.shape()[3];
                let bc_count = x.shape()[0] * x.shape()[1];
                let (m, s) = (val(*mean), val(*std));
                let ts = val(*target_std);
                let mut dx = vec![0.0f32; x.numel()];
                let mut dm = vec![0.0f32; bc_count];
                let mut ds = vec![0.0f32; bc_count];
                let mut dts = vec![0.0f32; bc_count];
                let mut dtm = vec![0.0f32; bc_count];
                for bc in 0..bc_count {
                    let inv = 1.0 / (s[bc] * s[bc] + eps).sqrt();
                    let plane = &x.data()[bc * hw..(bc + 1) * hw];
                    let gp = &g[bc * hw..(bc + 1) * hw];
                    let (mut sum_g, mut sum_gn) = (0.0f64, 0.0f64);
                    for p in 0..hw {
                        let n = (plane[p] - m[bc]) * inv;
                        dx[bc * hw + p] = gp[p] * ts[bc] * inv;
                        sum_g += gp[p] as f64;
                        sum_gn += (gp[p] * n) as f64;
                    }
                    dtm[bc] = sum_g as f32;
                    dts[bc] = sum_gn as f32;
                    dm[bc] = -(sum_g as f32) * ts[bc] * inv;
                    ds[bc] = -(sum_gn as f32) * ts[bc] * inv * (s[bc] * inv);
                }
                partials.push((*input, dx));
                partials.push((*mean, dm));
                partials.push((*std, ds));
                partials.push((*target_mean, dtm));
                partials.push((*target_std, dts));
            }
            Op::SimilarityScores { query, key } => {
                let q = &self.nodes[query.0].value;
                let (b, d) = (q.shape()[0], q.shape()[1]);
                let hw = q.shape()[2] * q.shape()[3];
                let (qd, kd) = (q.data(), val(*key));
                let inv = 1.0 / hw as f32;
                let mut dq = vec![0.0f32; q.numel()];
                let mut dk = vec![0.0f32; q.numel()];
                for bi in 0..b {
                    let gb = &g[bi * hw..(bi + 1) * hw];
                    for e in 0..d {
                        let off = (bi * d + e) * hw;
                        let k_row = &kd[off..off + hw];
                        let q_row = &qd[off..off + hw];
                        // dQ[e,p] = (1/HW) Σ_m g[m] K[e,m], identical for every p
                        let gk = kernels::dot(gb, k_row) * inv;
                        dq[off..off + hw].fill(gk);
                        // dK[e,m] = g[m] · mean_p Q[e,p]
                        let q_mean = q_row.iter().map(|&v| v as f64).sum::<f64>() as f32 * inv;
                        for (dkv, &gv) in dk[off..off + hw].iter_mut().zip(gb) {
                            *dkv = gv * q_mean;
                        }
                    }
                }
                partials.push((*query, dq));
                partials.push((*key, dk));
            }
            Op::SoftmaxRows { input } => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut d = vec![0.0f32; y.len()];
                for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f32 = kernels::dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                partials.push((*input, d));
            }
            Op::AttentionPool { features, weights } => {
                let z = &self.nodes[features.0].value;
                let (b, c) = (z.shape()[0], z.shape()[1]);
                let hw = z.shape()[2] * z.shape()[3];
                let a = val(*weights);
                let mut dz = vec![0.0f32; z.numel()];
                let mut da = vec![0.0f32; b * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g[bi * c + ci];
                        let off = (bi * c + ci) * hw;
                        let zc = &z.data()[off..off + hw];
                        for p in 0..hw {
                            dz[off + p] = gv * a[bi * hw + p];
                            da[bi * hw + p] += gv * zc[p];
                        }
                    }
                }
                partials.push((*features, dz));
                partials.push((*weights, da));
            }
        }
        for (v, d) in partials {
            if d.len() == self.nodes[v.0].value.numel() {
                self.accumulate(v, &d);
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias);
            v
        }
        Op::LayerNorm {
            input, gamma, beta, ..
        }
        | Op::BatchNorm {
            input, gamma, beta, ..
        } => vec![*input, *gamma, *beta],
        Op::LeakyRelu { input, .. }
        | Op::GlobalAvgPool { input }
        | Op::Reshape { input }
        | Op::Scale { input, .. }
        | Op::Sum { input }
        | Op::GatherRows { input, .. }
        | Op::MeanRows { input }
        | Op::ChannelMean { input }
        | Op::ChannelStd { input }
        | Op::SoftmaxRows { input } => vec![*input],
        Op::Linear {
            input,
            weight,
            bias,
        } => vec![*input, *weight, *bias],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::ConcatCols { a, b } => {
            vec![*a, *b]
        }
        Op::ConcatRows { inputs } => inputs.clone(),
        Op::AdaIn {
            input,
            mean,
            std,
            target_mean,
            target_std,
            ..
        } => vec![*input, *mean, *std, *target_mean, *target_std],
        Op::SimilarityScores { query, key } => vec![*query, *key],
        Op::AttentionPool { features, weights } => vec![*features, *weights],
    }
}

fn mean_f64(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

/// Numerically stabilized softmax of `x` written into `out`.
pub(crate) fn softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = x.iter().map(|&v| (v as f64 - max).exp()).sum();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v as f64 - max).exp() / sum) as f32;
    }
}
