use super::{AutodiffError, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Convolution geometry shared by the 2d and 3d paths. The 2d case is the
/// 3d case with a singleton depth axis and no depth padding.
#[derive(Clone, Debug)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    input: [usize; 3],
    output: [usize; 3],
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn output_positions(&self) -> usize {
        self.output[0] * self.output[1] * self.output[2]
    }
}

enum Op<S> {
    Leaf,
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    MatVec {
        weights: Var,
        input: Var,
    },
    Conv {
        input: Var,
        kernels: Var,
        bias: Var,
        geometry: ConvGeometry,
        /// im2col patch matrix cached from the forward pass.
        columns: Vec<S>,
    },
    MaxPool {
        input: Var,
        /// Flat input index of the (first, row-major) maximum per output cell.
        argmax: Vec<usize>,
    },
    Bce {
        prediction: Var,
        label: S,
        /// Probability after clamping to [1e-7, 1 - 1e-7].
        clamped: S,
        /// False when the raw prediction sat outside the clamp interval, in
        /// which case the loss is locally constant and the gradient is zero.
        interior: bool,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Per-gate LSTM parameters: input weights `w [H,I]`, recurrent weights
/// `u [H,H]`, bias `b [H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmGates {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// Full gate set for one LSTM cell/layer.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellParams {
    pub input: LstmGates,
    pub forget: LstmGates,
    pub cell: LstmGates,
    pub output: LstmGates,
}

/// Recording computation graph. Operations append nodes; [`Graph::backward`]
/// replays them in reverse to populate gradients.
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a graph input. Parameters are inserted with
    /// `requires_grad = true`, data with `false`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    /// Gradient buffer of `var`, present once [`Graph::backward`] has
    /// reached it. Untouched (None) for non-ancestors of the loss.
    pub fn grad(&self, var: Var) -> Option<&[S]> {
        self.nodes[var.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => {
                self.requires(*lhs) || self.requires(*rhs)
            }
            Op::Sum { input }
            | Op::Reshape { input }
            | Op::Activation { input, .. }
            | Op::MaxPool { input, .. } => self.requires(*input),
            Op::Dense {
                input,
                weights,
                bias,
            } => self.requires(*input) || self.requires(*weights) || self.requires(*bias),
            Op::MatVec { weights, input } => self.requires(*weights) || self.requires(*input),
            Op::Conv {
                input,
                kernels,
                bias,
                ..
            } => self.requires(*input) || self.requires(*kernels) || self.requires(*bias),
            Op::Bce { prediction, .. } => self.requires(*prediction),
        };
        self.push(value, requires_grad, op)
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape_of(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    // ------------------------------------------------------------------
    // Elementwise and reduction ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, AutodiffError> {
        self.check_same_shape("add", lhs, rhs)?;
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = Tensor::new(self.shape_of(lhs).to_vec(), data)?;
        Ok(self.push_op(value, Op::Add { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, AutodiffError> {
        self.check_same_shape("mul", lhs, rhs)?;
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::new(self.shape_of(lhs).to_vec(), data)?;
        Ok(self.push_op(value, Op::Mul { lhs, rhs }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), Op::Sum { input })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = Tensor::new(shape.to_vec(), self.value(input).data().to_vec())?;
        if value.numel() != self.value(input).numel() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "reshape cannot change element count ({} -> {})",
                self.value(input).numel(),
                value.numel()
            )));
        }
        Ok(self.push_op(value, Op::Reshape { input }))
    }

    fn check_same_shape(&self, op: &str, lhs: Var, rhs: Var) -> Result<(), AutodiffError> {
        if self.shape_of(lhs) != self.shape_of(rhs) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape_of(lhs),
                self.shape_of(rhs)
            )));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Activations
    // ------------------------------------------------------------------

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&x| apply_activation(x, kind))
            .collect();
        let value = Tensor::new(self.shape_of(input).to_vec(), data).expect("same shape");
        self.push_op(value, Op::Activation { input, kind })
    }

    // ------------------------------------------------------------------
    // Linear layers
    // ------------------------------------------------------------------

    /// `weights[M,N] * input[N] + bias[M]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.check_matvec("dense", weights, input)?;
        let b = self.shape_of(bias);
        if b != [m] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "dense: bias shape {b:?} does not match output width {m}"
            )));
        }
        let mut out = self.value(bias).data().to_vec();
        matvec_accumulate(
            self.value(weights).data(),
            self.value(input).data(),
            &mut out,
            m,
            n,
        );
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push_op(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    /// `weights[M,N] * input[N]`, no bias. Used for the recurrent half of
    /// LSTM gates.
    pub fn matvec(&mut self, weights: Var, input: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.check_matvec("matvec", weights, input)?;
        let mut out = vec![S::zero(); m];
        matvec_accumulate(
            self.value(weights).data(),
            self.value(input).data(),
            &mut out,
            m,
            n,
        );
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push_op(value, Op::MatVec { weights, input }))
    }

    fn check_matvec(
        &self,
        op: &str,
        weights: Var,
        input: Var,
    ) -> Result<(usize, usize), AutodiffError> {
        let w = self.shape_of(weights);
        let x = self.shape_of(input);
        if w.len() != 2 || x.len() != 1 || w[1] != x[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{op}: weights {w:?} incompatible with input {x:?}"
            )));
        }
        Ok((w[0], w[1]))
    }

    // ------------------------------------------------------------------
    // Convolutions
    // ------------------------------------------------------------------

    /// Cross-correlation of `input [C_in,H,W]` with `kernels
    /// [C_out,C_in,kH,kW]` plus per-channel bias. No kernel flip.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let ishape = self.shape_of(input).to_vec();
        let kshape = self.shape_of(kernels).to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d: expected input [C,H,W] and kernels [O,C,kH,kW], got {ishape:?} and {kshape:?}"
            )));
        }
        let geometry = ConvGeometry {
            c_in: ishape[0],
            c_out: kshape[0],
            kernel: [1, kshape[2], kshape[3]],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
            input: [1, ishape[1], ishape[2]],
            output: [0; 3],
        };
        self.conv_common("conv2d", input, kernels, bias, geometry, kshape[1], false)
    }

    /// Cross-correlation of `input [C_in,D,H,W]` with `kernels
    /// [C_out,C_in,kD,kH,kW]`; stride and padding apply to all three axes.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let ishape = self.shape_of(input).to_vec();
        let kshape = self.shape_of(kernels).to_vec();
        if ishape.len() != 4 || kshape.len() != 5 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv3d: expected input [C,D,H,W] and kernels [O,C,kD,kH,kW], got {ishape:?} and {kshape:?}"
            )));
        }
        let geometry = ConvGeometry {
            c_in: ishape[0],
            c_out: kshape[0],
            kernel: [kshape[2], kshape[3], kshape[4]],
            stride: [stride; 3],
            padding: [padding; 3],
            input: [ishape[1], ishape[2], ishape[3]],
            output: [0; 3],
        };
        self.conv_common("conv3d", input, kernels, bias, geometry, kshape[1], true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_common(
        &mut self,
        op: &str,
        input: Var,
        kernels: Var,
        bias: Var,
        mut geometry: ConvGeometry,
        kernel_c_in: usize,
        keep_depth_axis: bool,
    ) -> Result<Var, AutodiffError> {
        if kernel_c_in != geometry.c_in {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{op}: kernel expects {kernel_c_in} input channels, input has {}",
                geometry.c_in
            )));
        }
        if self.shape_of(bias) != [geometry.c_out] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{op}: bias shape {:?} does not match {} output channels",
                self.shape_of(bias),
                geometry.c_out
            )));
        }
        for axis in 0..3 {
            let padded = geometry.input[axis] + 2 * geometry.padding[axis];
            let k = geometry.kernel[axis];
            if k == 0 || k > padded {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "{op}: kernel extent {k} exceeds padded input extent {padded} on axis {axis}"
                )));
            }
            let span = padded - k;
            if span % geometry.stride[axis] != 0 {
                return Err(AutodiffError::Config(format!(
                    "{op}: output extent ({padded} - {k}) / {} + 1 is not integral on axis {axis}",
                    geometry.stride[axis]
                )));
            }
            geometry.output[axis] = span / geometry.stride[axis] + 1;
        }

        let columns = im2col(self.value(input).data(), &geometry);
        let positions = geometry.output_positions();
        let patch = geometry.patch_len();

        // out[c_out, positions] = kernels[c_out, patch] * columns[patch, positions]
        let mut out = vec![S::zero(); geometry.c_out * positions];
        for (c, row) in out.chunks_mut(positions).enumerate() {
            let b = self.value(bias).data()[c];
            row.fill(b);
        }
        S::gemm(
            geometry.c_out,
            patch,
            positions,
            S::one(),
            self.value(kernels).data(),
            patch as isize,
            1,
            &columns,
            positions as isize,
            1,
            S::one(),
            &mut out,
            positions as isize,
            1,
        );

        let out_shape = if keep_depth_axis {
            vec![
                geometry.c_out,
                geometry.output[0],
                geometry.output[1],
                geometry.output[2],
            ]
        } else {
            vec![geometry.c_out, geometry.output[1], geometry.output[2]]
        };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(
            value,
            Op::Conv {
                input,
                kernels,
                bias,
                geometry,
                columns,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Pooling
    // ------------------------------------------------------------------

    /// Max pooling over the trailing two axes; leading axes are preserved.
    /// Gradient routes to the first maximal element in row-major order.
    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape_of(input).to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "maxpool2d: input rank must be >= 2, got shape {shape:?}"
            )));
        }
        if window == 0 || stride == 0 {
            return Err(AutodiffError::Config(
                "maxpool2d: window and stride must be positive".into(),
            ));
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        if window > h || window > w {
            return Err(AutodiffError::Config(format!(
                "maxpool2d: window {window} exceeds input extent {h}x{w}"
            )));
        }
        let channels: usize = shape[..shape.len() - 2].iter().product();
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;

        let data = self.value(input).data();
        let mut out = Vec::with_capacity(channels * oh * ow);
        let mut argmax = Vec::with_capacity(channels * oh * ow);
        for c in 0..channels {
            let plane = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best_idx = plane + y0 * w + x0;
                    let mut best = data[best_idx];
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = plane + (y0 + dy) * w + (x0 + dx);
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }

        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(oh);
        out_shape.push(ow);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, Op::MaxPool { input, argmax }))
    }

    // ------------------------------------------------------------------
    // LSTM
    // ------------------------------------------------------------------

    fn lstm_gate(
        &mut self,
        x: Var,
        h_prev: Var,
        gate: &LstmGates,
        kind: Activation,
    ) -> Result<Var, AutodiffError> {
        let wx = self.dense(x, gate.w, gate.b)?;
        let uh = self.matvec(gate.u, h_prev)?;
        let pre = self.add(wx, uh)?;
        Ok(self.activation(pre, kind))
    }

    /// One LSTM step:
    /// `i = sigmoid(Wi x + Ui h + bi)`, `f = sigmoid(Wf x + Uf h + bf)`,
    /// `g = tanh(Wg x + Ug h + bg)`, `o = sigmoid(Wo x + Uo h + bo)`,
    /// `c = f (.) c_prev + i (.) g`, `h = o (.) tanh(c)`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        params: &LstmCellParams,
    ) -> Result<(Var, Var), AutodiffError> {
        let i = self.lstm_gate(x, h_prev, &params.input, Activation::Sigmoid)?;
        let f = self.lstm_gate(x, h_prev, &params.forget, Activation::Sigmoid)?;
        let g = self.lstm_gate(x, h_prev, &params.cell, Activation::Tanh)?;
        let o = self.lstm_gate(x, h_prev, &params.output, Activation::Sigmoid)?;
        let fc = self.mul(f, c_prev)?;
        let ig = self.mul(i, g)?;
        let c = self.add(fc, ig)?;
        let tc = self.activation(c, Activation::Tanh);
        let h = self.mul(o, tc)?;
        Ok((h, c))
    }

    /// Stacked LSTM over a sequence: layer `l+1` consumes layer `l`'s hidden
    /// sequence; states start at zero. Returns the final layer's last hidden
    /// state.
    pub fn multilayer_lstm(
        &mut self,
        sequence: &[Var],
        layers: &[LstmCellParams],
    ) -> Result<Var, AutodiffError> {
        if sequence.is_empty() {
            return Err(AutodiffError::Contract(
                "multilayer_lstm: empty sequence".into(),
            ));
        }
        if layers.is_empty() {
            return Err(AutodiffError::Contract(
                "multilayer_lstm: at least one layer required".into(),
            ));
        }
        let mut inputs = sequence.to_vec();
        let mut last_hidden = None;
        for params in layers {
            let hidden = self.shape_of(params.input.b)[0];
            let zero = Tensor::zeros(&[hidden]);
            let mut h = self.leaf(zero.clone(), false);
            let mut c = self.leaf(zero, false);
            let mut outputs = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                let (nh, nc) = self.lstm_cell(x, h, c, params)?;
                h = nh;
                c = nc;
                outputs.push(h);
            }
            last_hidden = Some(h);
            inputs = outputs;
        }
        Ok(last_hidden.expect("at least one layer"))
    }

    // ------------------------------------------------------------------
    // Loss
    // ------------------------------------------------------------------

    /// Binary cross-entropy `-(y ln p + (1-y) ln(1-p))` on a scalar
    /// probability, clamped to [1e-7, 1 - 1e-7] before the logs.
    pub fn bce_loss(&mut self, prediction: Var, label: S) -> Result<Var, AutodiffError> {
        if self.value(prediction).numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "bce_loss: prediction must be scalar, got shape {:?}",
                self.shape_of(prediction)
            )));
        }
        if label != S::zero() && label != S::one() {
            return Err(AutodiffError::Contract(format!(
                "bce_loss: label must be 0 or 1, got {label}"
            )));
        }
        let raw = self.value(prediction).data()[0];
        let lo = S::lit(1e-7);
        let hi = S::one() - lo;
        let clamped = raw.max(lo).min(hi);
        let interior = raw > lo && raw < hi;
        let loss =
            -(label * clamped.ln() + (S::one() - label) * (S::one() - clamped).ln());
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::Bce {
                prediction,
                label,
                clamped,
                interior,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Populate `grad` with d(loss)/d(node) for every ancestor of `loss`.
    /// Gradients accumulate additively across fan-out; non-ancestors keep
    /// `grad = None`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        self.accumulate(loss, |g| g[0] += S::one());

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, write: impl FnOnce(&mut [S])) {
        let node = &mut self.nodes[var.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![S::zero(); node.value.numel()]);
        write(grad);
    }

    fn step_backward(&mut self, id: usize) {
        // Move the upstream gradient and the op out so parent nodes can be
        // borrowed mutably; both are restored at the end.
        let upstream = self.nodes[id].grad.take().expect("gradient present");
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { lhs, rhs } => {
                if self.requires(*lhs) {
                    self.accumulate(*lhs, |g| {
                        for (g, &u) in g.iter_mut().zip(&upstream) {
                            *g += u;
                        }
                    });
                }
                if self.requires(*rhs) {
                    self.accumulate(*rhs, |g| {
                        for (g, &u) in g.iter_mut().zip(&upstream) {
                            *g += u;
                        }
                    });
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.requires(*lhs) {
                    let other = self.nodes[rhs.0].value.data().to_vec();
                    self.accumulate(*lhs, |g| {
                        for ((g, &u), &o) in g.iter_mut().zip(&upstream).zip(&other) {
                            *g += u * o;
                        }
                    });
                }
                if self.requires(*rhs) {
                    let other = self.nodes[lhs.0].value.data().to_vec();
                    self.accumulate(*rhs, |g| {
                        for ((g, &u), &o) in g.iter_mut().zip(&upstream).zip(&other) {
                            *g += u * o;
                        }
                    });
                }
            }
            Op::Sum { input } => {
                if self.requires(*input) {
                    let u = upstream[0];
                    self.accumulate(*input, |g| {
                        for g in g.iter_mut() {
                            *g += u;
                        }
                    });
                }
            }
            Op::Reshape { input } => {
                if self.requires(*input) {
                    self.accumulate(*input, |g| {
                        for (g, &u) in g.iter_mut().zip(&upstream) {
                            *g += u;
                        }
                    });
                }
            }
            Op::Activation { input, kind } => {
                if self.requires(*input) {
                    let kind = *kind;
                    let local: Vec<S> = self.nodes[id]
                        .value
                        .data()
                        .iter()
                        .zip(&upstream)
                        .map(|(&y, &u)| u * activation_derivative(y, kind))
                        .collect();
                    self.accumulate(*input, |g| {
                        for (g, d) in g.iter_mut().zip(local) {
                            *g += d;
                        }
                    });
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let m = self.nodes[weights.0].value.shape()[0];
                let n = self.nodes[weights.0].value.shape()[1];
                if self.requires(*input) {
                    let mut dx = vec![S::zero(); n];
                    let w = self.nodes[weights.0].value.data();
                    for (row, &u) in w.chunks_exact(n).zip(&upstream) {
                        for (dx, &wv) in dx.iter_mut().zip(row) {
                            *dx += u * wv;
                        }
                    }
                    self.accumulate(*input, |g| {
                        for (g, d) in g.iter_mut().zip(dx) {
                            *g += d;
                        }
                    });
                }
                if self.requires(*weights) {
                    let x = self.nodes[input.0].value.data().to_vec();
                    self.accumulate(*weights, |g| {
                        for (grow, &u) in g.chunks_exact_mut(n).zip(&upstream) {
                            for (g, &xv) in grow.iter_mut().zip(&x) {
                                *g += u * xv;
                            }
                        }
                    });
                }
                if self.requires(*bias) {
                    debug_assert_eq!(upstream.len(), m);
                    self.accumulate(*bias, |g| {
                        for (g, &u) in g.iter_mut().zip(&upstream) {
                            *g += u;
                        }
                    });
                }
            }
            Op::MatVec { weights, input } => {
                let n = self.nodes[weights.0].value.shape()[1];
                if self.requires(*input) {
                    let mut dx = vec![S::zero(); n];
                    let w = self.nodes[weights.0].value.data();
                    for (row, &u) in w.chunks_exact(n).zip(&upstream) {
                        for (dx, &wv) in dx.iter_mut().zip(row) {
                            *dx += u * wv;
                        }
                    }
                    self.accumulate(*input, |g| {
                        for (g, d) in g.iter_mut().zip(dx) {
                            *g += d;
                        }
                    });
                }
                if self.requires(*weights) {
                    let x = self.nodes[input.0].value.data().to_vec();
                    self.accumulate(*weights, |g| {
                        for (grow, &u) in g.chunks_exact_mut(n).zip(&upstream) {
                            for (g, &xv) in grow.iter_mut().zip(&x) {
                                *g += u * xv;
                            }
                        }
                    });
                }
            }
            Op::Conv {
                input,
                kernels,
                bias,
                geometry,
                columns,
            } => {
                let positions = geometry.output_positions();
                let patch = geometry.patch_len();
                if self.requires(*bias) {
                    let mut db = vec![S::zero(); geometry.c_out];
                    for (c, row) in upstream.chunks_exact(positions).enumerate() {
                        db[c] = row.iter().copied().sum();
                    }
                    self.accumulate(*bias, |g| {
                        for (g, d) in g.iter_mut().zip(db) {
                            *g += d;
                        }
                    });
                }
                if self.requires(*kernels) {
                    // dK[c_out, patch] = upstream[c_out, positions] * columns^T
                    let mut dk = vec![S::zero(); geometry.c_out * patch];
                    S::gemm(
                        geometry.c_out,
                        positions,
                        patch,
                        S::one(),
                        &upstream,
                        positions as isize,
                        1,
                        columns,
                        1,
                        positions as isize,
                        S::zero(),
                        &mut dk,
                        patch as isize,
                        1,
                    );
                    self.accumulate(*kernels, |g| {
                        for (g, d) in g.iter_mut().zip(dk) {
                            *g += d;
                        }
                    });
                }
                if self.requires(*input) {
                    // dCols[patch, positions] = kernels^T * upstream
                    let mut dcols = vec![S::zero(); patch * positions];
                    S::gemm(
                        patch,
                        geometry.c_out,
                        positions,
                        S::one(),
                        self.nodes[kernels.0].value.data(),
                        1,
                        patch as isize,
                        &upstream,
                        positions as isize,
                        1,
                        S::zero(),
                        &mut dcols,
                        positions as isize,
                        1,
                    );
                    let dinput = col2im(&dcols, geometry);
                    self.accumulate(*input, |g| {
                        for (g, d) in g.iter_mut().zip(dinput) {
                            *g += d;
                        }
                    });
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.requires(*input) {
                    self.accumulate(*input, |g| {
                        for (&src, &u) in argmax.iter().zip(&upstream) {
                            g[src] += u;
                        }
                    });
                }
            }
            Op::Bce {
                prediction,
                label,
                clamped,
                interior,
            } => {
                if self.requires(*prediction) && *interior {
                    let p = *clamped;
                    let y = *label;
                    let d = -y / p + (S::one() - y) / (S::one() - p);
                    let u = upstream[0];
                    self.accumulate(*prediction, |g| g[0] += u * d);
                }
            }
        }
        self.nodes[id].op = op;
        self.nodes[id].grad = Some(upstream);
    }
}

fn apply_activation<S: Scalar>(x: S, kind: Activation) -> S {
    match kind {
        Activation::Relu => {
            if x > S::zero() {
                x
            } else {
                S::zero()
            }
        }
        Activation::Sigmoid => {
            // Numerically stable split; clamp keeps the output strictly
            // inside (0, 1) even where exp saturates.
            let y = if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            };
            let margin = S::unit_margin();
            y.max(margin).min(S::one() - margin)
        }
        Activation::Tanh => {
            let y = x.tanh();
            let bound = S::one() - S::unit_margin();
            y.max(-bound).min(bound)
        }
    }
}

/// Derivative expressed through the activation output `y`.
fn activation_derivative<S: Scalar>(y: S, kind: Activation) -> S {
    match kind {
        Activation::Relu => {
            if y > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::Sigmoid => y * (S::one() - y),
        Activation::Tanh => S::one() - y * y,
    }
}

/// Unfold the (virtually zero-padded) input volume into a `[patch_len,
/// output_positions]` matrix so the convolution becomes one matrix product.
fn im2col<S: Scalar>(input: &[S], geo: &ConvGeometry) -> Vec<S> {
    let [id, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let positions = od * oh * ow;
    let mut cols = vec![S::zero(); geo.patch_len() * positions];
    let mut row = 0;
    for c in 0..geo.c_in {
        let channel = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..geo.kernel[0] {
            for ky in 0..geo.kernel[1] {
                for kx in 0..geo.kernel[2] {
                    let out_row = &mut cols[row * positions..(row + 1) * positions];
                    let mut l = 0;
                    for zd in 0..od {
                        let sd = (zd * geo.stride[0] + kd) as isize - geo.padding[0] as isize;
                        for zy in 0..oh {
                            let sy = (zy * geo.stride[1] + ky) as isize - geo.padding[1] as isize;
                            if sd < 0 || sd >= id as isize || sy < 0 || sy >= ih as isize {
                                l += ow;
                                continue;
                            }
                            let plane = (sd as usize * ih + sy as usize) * iw;
                            for zx in 0..ow {
                                let sx =
                                    (zx * geo.stride[2] + kx) as isize - geo.padding[2] as isize;
                                if sx >= 0 && sx < iw as isize {
                                    out_row[l] = channel[plane + sx as usize];
                                }
                                l += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto the input volume, accumulating
/// overlapping patches and dropping contributions that fell in the padding.
fn col2im<S: Scalar>(cols: &[S], geo: &ConvGeometry) -> Vec<S> {
    let [id, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let positions = od * oh * ow;
    let mut input = vec![S::zero(); geo.c_in * id * ih * iw];
    let mut row = 0;
    for c in 0..geo.c_in {
        for kd in 0..geo.kernel[0] {
            for ky in 0..geo.kernel[1] {
                for kx in 0..geo.kernel[2] {
                    let col_row = &cols[row * positions..(row + 1) * positions];
                    let mut l = 0;
                    for zd in 0..od {
                        let sd = (zd * geo.stride[0] + kd) as isize - geo.padding[0] as isize;
                        for zy in 0..oh {
                            let sy = (zy * geo.stride[1] + ky) as isize - geo.padding[1] as isize;
                            if sd < 0 || sd >= id as isize || sy < 0 || sy >= ih as isize {
                                l += ow;
                                continue;
                            }
                            let plane =
                                ((c * id + sd as usize) * ih + sy as usize) * iw;
                            for zx in 0..ow {
                                let sx =
                                    (zx * geo.stride[2] + kx) as isize - geo.padding[2] as isize;
                                if sx >= 0 && sx < iw as isize {
                                    input[plane + sx as usize] += col_row[l];
                                }
                                l += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    input
}

fn matvec_accumulate<S: Scalar>(weights: &[S], input: &[S], out: &mut [S], m: usize, n: usize) {
    debug_assert_eq!(weights.len(), m * n);
    debug_assert_eq!(input.len(), n);
    debug_assert_eq!(out.len(), m);
    for (o, row) in out.iter_mut().zip(weights.chunks_exact(n)) {
        let mut acc = S::zero();
        for (&w, &x) in row.iter().zip(input) {
            acc = acc + w * x;
        }
        *o += acc;
    }
}
