//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`GradTape`] is rebuilt for every forward pass (define-by-run). Each op
//! appends one node holding its output value and enough context to replay the
//! chain rule. [`GradTape::backward`] walks the tape strictly in reverse node
//! order, which makes gradient accumulation order deterministic and therefore
//! bitwise reproducible across runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels;
use super::store::{ParamId, ParamStore};

/// Index of a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        through_batch: bool,
    },
    Relu {
        input: NodeId,
    },
    SoftmaxRows {
        input: NodeId,
    },
    MatmulBatched {
        a: NodeId,
        b: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    SumAll {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    TransposeLast2 {
        input: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Statistics a train-mode batch norm computed, needed by the layer to update
/// its running buffers.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    pub count: usize,
}

/// The autodiff tape. See module docs.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, NodeId)>,
    backward_sign_fault: bool,
}

fn dims4(t: &Tensor, op: &'static str, role: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{role} must be rank 4, got shape {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<NodeId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: context.to_string(),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Record a constant/input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Record a leaf for a stored parameter. Repeated calls for the same
    /// parameter on one tape return the same node, so its gradient
    /// contributions from all uses accumulate into one slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&(_, node)) = self.bindings.iter().find(|(pid, _)| *pid == id) {
            return Ok(node);
        }
        let node = self.push(store.param(id).value.clone(), Op::Leaf, "param")?;
        self.bindings.push((id, node));
        Ok(node)
    }

    /// Pre-bind an existing leaf node to a parameter id, so later
    /// [`GradTape::param`] calls for that id reuse the node instead of reading
    /// the store. This lets a gradient checker substitute perturbed values for
    /// parameters while the model code stays unchanged.
    pub fn bind_param(&mut self, id: ParamId, node: NodeId) -> Result<()> {
        if !matches!(self.nodes[node.0].op, Op::Leaf) {
            return Err(Error::InvalidConfig(
                "bind_param target must be a leaf node".into(),
            ));
        }
        if self.bindings.iter().any(|(pid, _)| *pid == id) {
            return Err(Error::InvalidConfig(
                "parameter is already bound on this tape".into(),
            ));
        }
        self.bindings.push((id, node));
        Ok(())
    }

    /// Convolution (cross-correlation) with zero padding.
    /// input [N,Cin,H,W] * weight [Cout,Cin,kh,kw] + bias [Cout] -> [N,Cout,H',W'].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = dims4(self.value(input), "conv2d", "input")?;
        let (cout, wcin, kh, kw) = dims4(self.value(weight), "conv2d", "weight")?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {cin} channels but weight expects {wcin}"),
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias shape {:?} does not match {cout} output channels",
                    self.value(bias).shape()
                ),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        let oh = kernels::conv2d_out_dim(h, kh, stride, padding);
        let ow = kernels::conv2d_out_dim(w, kw, stride, padding);
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
        );
        let value = Tensor::from_raw(vec![n, cout, oh, ow], out);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    /// Transposed convolution. input [N,Cin,H,W] * weight [Cin,Cout,kh,kw] + bias [Cout]
    /// -> [N,Cout,(H-1)*stride-2*padding+kh, (W-1)*stride-2*padding+kw].
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::InvalidConfig(
                "conv_transpose2d stride must be >= 1".into(),
            ));
        }
        let (n, cin, h, w) = dims4(self.value(input), "conv_transpose2d", "input")?;
        let (wcin, cout, kh, kw) = dims4(self.value(weight), "conv_transpose2d", "weight")?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input has {cin} channels but weight expects {wcin}"),
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!(
                    "bias shape {:?} does not match {cout} output channels",
                    self.value(bias).shape()
                ),
            });
        }
        if (h - 1) * stride + kh <= 2 * padding || (w - 1) * stride + kw <= 2 * padding {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                detail: "padding consumes the entire output".into(),
            });
        }
        let oh = kernels::conv_transpose2d_out_dim(h, kh, stride, padding);
        let ow = kernels::conv_transpose2d_out_dim(w, kw, stride, padding);
        let out = kernels::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
        );
        let value = Tensor::from_raw(vec![n, cout, oh, ow], out);
        self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv_transpose2d",
        )
    }

    fn batchnorm_common(
        &self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = dims4(self.value(input), "batchnorm2d", "input")?;
        for (node, role) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(node).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm2d",
                    detail: format!(
                        "{role} shape {:?} does not match {c} channels",
                        self.value(node).shape()
                    ),
                });
            }
        }
        Ok((n, c, h * w))
    }

    /// Train-mode batch norm: normalizes with the batch statistics and
    /// differentiates through them. Returns the statistics so the caller can
    /// update running buffers.
    pub fn batchnorm2d_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let (n, c, hw) = self.batchnorm_common(input, gamma, beta)?;
        if n * hw < 2 {
            return Err(Error::DegenerateBatch);
        }
        let (mean, var) = kernels::batch_stats(self.value(input).data(), n, c, hw);
        let out = kernels::batchnorm_apply(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            eps,
            n,
            c,
            hw,
        );
        let shape = self.value(input).shape().to_vec();
        let stats = BatchStats {
            mean: mean.clone(),
            var_biased: var.clone(),
            count: n * hw,
        };
        let id = self.push(
            Tensor::from_raw(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
                through_batch: true,
            },
            "batchnorm2d_train",
        )?;
        Ok((id, stats))
    }

    /// Eval-mode batch norm: normalizes with fixed running statistics, which
    /// are treated as constants by backward.
    pub fn batchnorm2d_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, hw) = self.batchnorm_common(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!(
                    "running stats of {} / {} channels do not match input with {c}",
                    running_mean.len(),
                    running_var.len()
                ),
            });
        }
        let out = kernels::batchnorm_apply(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
            n,
            c,
            hw,
        );
        let shape = self.value(input).shape().to_vec();
        self.push(
            Tensor::from_raw(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                through_batch: false,
            },
            "batchnorm2d_eval",
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input);
        let out: Vec<f64> = value.data().iter().map(|v| v.max(0.0)).collect();
        let shape = value.shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Relu { input }, "relu")
    }

    /// Softmax along the trailing axis, numerically stabilized by max
    /// subtraction. Rows of the output sum to 1.
    pub fn softmax_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input);
        let shape = value.shape().to_vec();
        let row_len = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax_rows",
            detail: "input must have at least one axis".into(),
        })?;
        if row_len == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                detail: "trailing axis is empty".into(),
            });
        }
        let out = kernels::softmax_rows_forward(value.data(), row_len);
        self.push(
            Tensor::from_raw(shape, out),
            Op::SoftmaxRows { input },
            "softmax_rows",
        )
    }

    /// Batched matrix product [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn matmul_batched(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "matmul_batched",
                detail: format!("expected rank-3 operands, got {sa:?} and {sb:?}"),
            });
        }
        if sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_batched",
                detail: format!("incompatible shapes {sa:?} x {sb:?}"),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out =
            kernels::matmul_batched_forward(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        self.push(
            Tensor::from_raw(vec![batch, m, n], out),
            Op::MatmulBatched { a, b },
            "matmul_batched",
        )
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input), "maxpool2", "input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2",
                detail: format!("spatial dims {h}x{w} must be even"),
            });
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), n, c, h, w);
        self.push(
            Tensor::from_raw(vec![n, c, h / 2, w / 2], out),
            Op::MaxPool2 { input, argmax },
            "maxpool2",
        )
    }

    fn elementwise_shapes(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("operand shapes {sa:?} and {sb:?} differ"),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shapes(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Tensor::from_raw(shape, out), Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shapes(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(Tensor::from_raw(shape, out), Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shapes(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Tensor::from_raw(shape, out), Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite {
                context: "scale factor".into(),
            });
        }
        let value = self.value(input);
        let out: Vec<f64> = value.data().iter().map(|v| v * factor).collect();
        let shape = value.shape().to_vec();
        self.push(
            Tensor::from_raw(shape, out),
            Op::Scale { input, factor },
            "scale",
        )
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        let mut acc = 0.0;
        for v in self.value(input).data() {
            acc += v;
        }
        self.push(Tensor::from_raw(vec![], vec![acc]), Op::SumAll { input }, "sum_all")
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input);
        let numel: usize = shape.iter().product();
        if numel != value.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot reshape {:?} ({} elements) to {shape:?} ({numel} elements)",
                    value.shape(),
                    value.numel()
                ),
            });
        }
        let out = Tensor::from_raw(shape, value.data().to_vec());
        self.push(out, Op::Reshape { input }, "reshape")
    }

    /// Swap the last two axes: [.., R, C] -> [.., C, R].
    pub fn transpose_last2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input);
        let s = value.shape();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose_last2",
                detail: format!("need rank >= 2, got {s:?}"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let out = kernels::transpose_last2(value.data(), batch, r, c);
        let mut shape = s.to_vec();
        let last = shape.len() - 1;
        shape.swap(last - 1, last);
        self.push(
            Tensor::from_raw(shape, out),
            Op::TransposeLast2 { input },
            "transpose_last2",
        )
    }

    /// Reverse pass from a scalar output node. Populates per-node gradients
    /// readable via [`GradTape::grad`] until the next op is recorded.
    /// Fault fixture: flips the sign of the seed gradient so every backward
    /// kernel's output comes out negated. Exists solely so detector
    /// sensitivity can be demonstrated (a gradient check run against a tape
    /// with this armed must fail); never set in real training or evaluation.
    pub fn inject_backward_sign_fault(&mut self) {
        self.backward_sign_fault = true;
    }

    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        let out_t = self.value(out);
        if out_t.numel() != 1 {
            return Err(Error::NonScalarBackward(out_t.shape().to_vec()));
        }
        let seed = if self.backward_sign_fault { -1.0 } else { 1.0 };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![seed; 1]);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        fn acc(grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: Vec<f64>) {
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        }
        // Negated accumulate, used by Sub's right operand.
        fn acc_neg(grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: &[f64]) {
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e -= c;
                    }
                }
                slot => *slot = Some(contrib.iter().map(|v| -v).collect()),
            }
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (n, cin, h, w) = {
                    let s = self.value(*input).shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (cout, _, kh, kw) = {
                    let s = self.value(*weight).shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (di, dw, db) = kernels::conv2d_backward(
                    g,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *padding,
                );
                acc(grads, *input, di);
                acc(grads, *weight, dw);
                acc(grads, *bias, db);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (n, cin, h, w) = {
                    let s = self.value(*input).shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (_, cout, kh, kw) = {
                    let s = self.value(*weight).shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (di, dw, db) = kernels::conv_transpose2d_backward(
                    g,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *padding,
                );
                acc(grads, *input, di);
                acc(grads, *weight, dw);
                acc(grads, *bias, db);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
                through_batch,
            } => {
                let s = self.value(*input).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (di, dgamma, dbeta) = if *through_batch {
                    kernels::batchnorm_train_backward(
                        g,
                        self.value(*input).data(),
                        self.value(*gamma).data(),
                        mean,
                        var,
                        *eps,
                        n,
                        c,
                        hw,
                    )
                } else {
                    kernels::batchnorm_eval_backward(
                        g,
                        self.value(*input).data(),
                        self.value(*gamma).data(),
                        mean,
                        var,
                        *eps,
                        n,
                        c,
                        hw,
                    )
                };
                acc(grads, *input, di);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let di: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *input, di);
            }
            Op::SoftmaxRows { input } => {
                let y = &self.nodes[id].value;
                let row_len = *y.shape().last().expect("validated at record time");
                let di = kernels::softmax_rows_backward(g, y.data(), row_len);
                acc(grads, *input, di);
            }
            Op::MatmulBatched { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = kernels::matmul_batched_backward(
                    g,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    batch,
                    m,
                    k,
                    n,
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MaxPool2 { input, argmax } => {
                let di = kernels::maxpool2_backward(g, argmax, self.value(*input).numel());
                acc(grads, *input, di);
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.to_vec());
                acc_neg(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(gv, x)| gv * x).collect();
                let db: Vec<f64> = g.iter().zip(av.iter()).map(|(gv, x)| gv * x).collect();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale { input, factor } => {
                let di: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                acc(grads, *input, di);
            }
            Op::SumAll { input } => {
                let di = vec![g[0]; self.value(*input).numel()];
                acc(grads, *input, di);
            }
            Op::TransposeLast2 { input } => {
                let s = self.nodes[id].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch: usize = s[..s.len() - 2].iter().product();
                let di = kernels::transpose_last2(g, batch, r, c);
                acc(grads, *input, di);
            }
            Op::Reshape { input } => {
                acc(grads, *input, g.to_vec());
            }
        }
        Ok(())
    }

    /// Add every bound parameter's tape gradient into the store's grad
    /// accumulators. Call after [`GradTape::backward`].
    pub fn export_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(pid, node) in &self.bindings {
            if let Some(g) = self.grad(node) {
                let p = store.param_mut(pid);
                if p.grad.numel() != g.len() {
                    return Err(Error::ShapeMismatch {
                        op: "export_grads",
                        detail: format!(
                            "parameter '{}' has {} elements but tape gradient has {}",
                            p.name,
                            p.grad.numel(),
                            g.len()
                        ),
                    });
                }
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarBackward(_))
        ));
    }

    #[test]
    fn sum_of_product_grads() {
        // d/da sum(a*b) = b, d/db = a
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        // y = sum(x*x): dy/dx = 2x via two paths through Mul.
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum_all(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = GradTape::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let data = tape.value(y).data();
        let r0: f64 = data[..3].iter().sum();
        let r1: f64 = data[3..].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12 && (r1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_binding_dedupes() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let mut tape = GradTape::new();
        let n1 = tape.param(&store, w).unwrap();
        let n2 = tape.param(&store, w).unwrap();
        assert_eq!(n1, n2);
        // y = sum(w*w) -> dw = 2w, accumulated on the single binding.
        let sq = tape.mul(n1, n2).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        tape.export_grads(&mut store).unwrap();
        assert_eq!(store.param(w).grad.data(), &[3.0, -1.0]);
    }

    #[test]
    fn transpose_last2_round_trip() {
        let mut tape = GradTape::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let t = tape.transpose_last2(x).unwrap();
        assert_eq!(tape.value(t).shape(), &[1, 3, 2]);
        assert_eq!(tape.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.transpose_last2(t).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }
}
