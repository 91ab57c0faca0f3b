//! The three sequential-volume architectures assembled from autodiff ops:
//! a 3D CNN that sees the whole stack at once, a CNN-LSTM that extracts
//! per-slice features and integrates them recurrently, and a differential
//! CNN-LSTM that runs the same pathway over slice-to-slice differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    Activation, AutodiffError, Graph, LstmCellParams, LstmGates, Tensor, Var,
};
use crate::datapipe::{differential, DataError, Sample, SliceStack};

mod weights;

pub use weights::{load_weights, read_weight_file, save_weights, WEIGHT_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a VSDL weight file")]
    WeightBadMagic { path: String },
    #[error("{path}: unsupported weight format version {found} (expected {expected})")]
    WeightBadVersion {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated weight file ({context})")]
    WeightTruncated { path: String, context: String },
    #[error("{path}: {extra} trailing bytes after the last tensor")]
    WeightTrailingBytes { path: String, extra: usize },
    #[error("{path}: tensor '{name}' does not match the model spec: {message}")]
    WeightTensorMismatch {
        path: String,
        name: String,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnn3d,
    CnnLstm,
    DcnnLstm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Cnn3d => "cnn3d",
            ModelKind::CnnLstm => "cnn-lstm",
            ModelKind::DcnnLstm => "dcnn-lstm",
        }
    }
}

/// One feature-extractor stage: `channels` output maps from a
/// `kernel x kernel` (or cubic) convolution at `stride` with same-padding,
/// followed by `pool x pool` max pooling when `pool > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

/// Declarative description of one architecture and its layer dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Pixels per slice edge.
    pub input_side: usize,
    /// Slices per stack on disk.
    pub stack_len: usize,
    pub extractor: Vec<ConvStage>,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    /// Dense head widths, ending in 1 (sigmoid output).
    pub head: Vec<usize>,
}

pub const FULL_SCALE_SIDE: usize = 224;
pub const SMALL_SCALE_SIDE: usize = 64;

impl ModelSpec {
    /// Small 64-pixel configuration that trains in minutes on a CPU.
    pub fn small(kind: ModelKind) -> Self {
        Self::with_side(kind, SMALL_SCALE_SIDE)
    }

    /// Full 224-pixel configuration matching the clinical input size.
    pub fn full(kind: ModelKind) -> Self {
        Self::with_side(kind, FULL_SCALE_SIDE)
    }

    pub fn with_side(kind: ModelKind, input_side: usize) -> Self {
        Self {
            kind,
            input_side,
            stack_len: crate::datapipe::DEFAULT_SLICE_COUNT,
            extractor: vec![
                ConvStage { channels: 8, kernel: 3, stride: 1, pool: 2 },
                ConvStage { channels: 16, kernel: 3, stride: 1, pool: 2 },
                ConvStage { channels: 32, kernel: 3, stride: 1, pool: 2 },
            ],
            lstm_layers: 2,
            lstm_hidden: 64,
            head: vec![32, 1],
        }
    }

    /// Timesteps the network consumes: differencing turns `stack_len` raw
    /// slices into `stack_len - 1` frames.
    pub fn sequence_len(&self) -> usize {
        match self.kind {
            ModelKind::Cnn3d | ModelKind::CnnLstm => self.stack_len,
            ModelKind::DcnnLstm => self.stack_len - 1,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_side < 4 {
            return Err(NetError::Config(format!(
                "input side {} too small",
                self.input_side
            )));
        }
        if self.stack_len < 2 {
            return Err(NetError::Config(format!(
                "stack length {} must be at least 2",
                self.stack_len
            )));
        }
        if self.extractor.is_empty() {
            return Err(NetError::Config("extractor needs at least one stage".into()));
        }
        if self.head.last() != Some(&1) {
            return Err(NetError::Config(format!(
                "head must terminate in width 1, got {:?}",
                self.head
            )));
        }
        if matches!(self.kind, ModelKind::CnnLstm | ModelKind::DcnnLstm)
            && (self.lstm_layers == 0 || self.lstm_hidden == 0)
        {
            return Err(NetError::Config(
                "recurrent models need lstm_layers >= 1 and lstm_hidden >= 1".into(),
            ));
        }
        self.feature_dims()?;
        Ok(())
    }

    /// Spatial/channel dimensions after the extractor, per slice (or per
    /// volume for the 3D variant, where depth rides along unchanged).
    fn feature_dims(&self) -> Result<(usize, usize), NetError> {
        let mut side = self.input_side;
        let mut channels = 1usize;
        for (i, stage) in self.extractor.iter().enumerate() {
            if stage.kernel == 0 || stage.stride == 0 || stage.channels == 0 {
                return Err(NetError::Config(format!(
                    "stage {i}: kernel, stride, and channels must be positive"
                )));
            }
            let padding = stage.kernel / 2;
            let padded = side + 2 * padding;
            if stage.kernel > padded {
                return Err(NetError::Config(format!(
                    "stage {i}: kernel {} exceeds padded extent {padded}",
                    stage.kernel
                )));
            }
            if (padded - stage.kernel) % stage.stride != 0 {
                return Err(NetError::Config(format!(
                    "stage {i}: stride {} does not divide extent {}",
                    stage.stride,
                    padded - stage.kernel
                )));
            }
            side = (padded - stage.kernel) / stage.stride + 1;
            if stage.pool > 0 {
                if stage.pool > side {
                    return Err(NetError::Config(format!(
                        "stage {i}: pool {} exceeds extent {side}",
                        stage.pool
                    )));
                }
                side = (side - stage.pool) / stage.pool + 1;
            }
            if side == 0 {
                return Err(NetError::Config(format!(
                    "stage {i}: feature map collapsed to zero extent"
                )));
            }
            channels = stage.channels;
        }
        Ok((channels, side))
    }

    /// Flattened feature width entering the recurrent / head stage.
    pub fn feature_len(&self) -> Result<usize, NetError> {
        let (channels, side) = self.feature_dims()?;
        Ok(match self.kind {
            ModelKind::Cnn3d => channels * self.stack_len * side * side,
            _ => channels * side * side,
        })
    }
}

enum Init {
    /// Zero-mean Gaussian, std = sqrt(2 / fan_in).
    He { fan_in: usize },
    /// Uniform in +-sqrt(1 / hidden).
    LstmUniform { hidden: usize },
    Zero,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_defs(spec: &ModelSpec) -> Result<Vec<ParamDef>, NetError> {
    spec.validate()?;
    let mut defs = Vec::new();
    let mut c_in = 1usize;
    for (i, stage) in spec.extractor.iter().enumerate() {
        let k = stage.kernel;
        let (shape, fan_in) = match spec.kind {
            ModelKind::Cnn3d => (vec![stage.channels, c_in, k, k, k], c_in * k * k * k),
            _ => (vec![stage.channels, c_in, k, k], c_in * k * k),
        };
        defs.push(ParamDef {
            name: format!("extractor{i}.kernels"),
            shape,
            init: Init::He { fan_in },
        });
        defs.push(ParamDef {
            name: format!("extractor{i}.bias"),
            shape: vec![stage.channels],
            init: Init::Zero,
        });
        c_in = stage.channels;
    }

    let mut head_in = spec.feature_len()?;
    if matches!(spec.kind, ModelKind::CnnLstm | ModelKind::DcnnLstm) {
        let mut in_dim = head_in;
        for layer in 0..spec.lstm_layers {
            let h = spec.lstm_hidden;
            for gate in ["input", "forget", "cell", "output"] {
                defs.push(ParamDef {
                    name: format!("lstm{layer}.{gate}.w"),
                    shape: vec![h, in_dim],
                    init: Init::LstmUniform { hidden: h },
                });
                defs.push(ParamDef {
                    name: format!("lstm{layer}.{gate}.u"),
                    shape: vec![h, h],
                    init: Init::LstmUniform { hidden: h },
                });
                defs.push(ParamDef {
                    name: format!("lstm{layer}.{gate}.b"),
                    shape: vec![h],
                    init: Init::Zero,
                });
            }
            in_dim = h;
        }
        head_in = spec.lstm_hidden;
    }

    let mut prev = head_in;
    for (j, &width) in spec.head.iter().enumerate() {
        defs.push(ParamDef {
            name: format!("head{j}.weights"),
            shape: vec![width, prev],
            init: Init::He { fan_in: prev },
        });
        defs.push(ParamDef {
            name: format!("head{j}.bias"),
            shape: vec![width],
            init: Init::Zero,
        });
        prev = width;
    }
    Ok(defs)
}

/// One architecture instance: spec plus named parameter tensors in a stable
/// order.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ModelSpec,
    params: Vec<(String, Tensor<f32>)>,
    pub rng_seed: u64,
}

impl Network {
    /// Deterministic initialization from `seed`: identical (spec, seed)
    /// pairs produce bit-identical networks.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self, NetError> {
        let defs = param_defs(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = defs
            .into_iter()
            .map(|def| {
                let tensor = match def.init {
                    Init::He { fan_in } => {
                        let normal =
                            Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("std > 0");
                        Tensor::from_fn(&def.shape, |_| normal.sample(&mut rng))
                    }
                    Init::LstmUniform { hidden } => {
                        let bound = (1.0 / hidden as f32).sqrt();
                        Tensor::from_fn(&def.shape, |_| rng.random_range(-bound..bound))
                    }
                    Init::Zero => Tensor::zeros(&def.shape),
                };
                (def.name, tensor)
            })
            .collect();
        Ok(Self {
            spec,
            params,
            rng_seed: seed,
        })
    }

    /// All-zero parameters; the sigmoid head then outputs exactly 0.5.
    pub fn zeroed(spec: ModelSpec) -> Result<Self, NetError> {
        let defs = param_defs(&spec)?;
        Ok(Self {
            spec,
            params: defs
                .into_iter()
                .map(|def| (def.name, Tensor::zeros(&def.shape)))
                .collect(),
            rng_seed: 0,
        })
    }

    pub(crate) fn from_parts(
        spec: ModelSpec,
        params: Vec<(String, Tensor<f32>)>,
        rng_seed: u64,
    ) -> Self {
        Self {
            spec,
            params,
            rng_seed,
        }
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Graph handles for every parameter, in network order.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Insert all parameters as graph leaves; `trainable` controls whether
/// gradients flow to them.
pub fn bind(graph: &mut Graph<f32>, net: &Network, trainable: bool) -> BoundParams {
    BoundParams {
        vars: net
            .params
            .iter()
            .map(|(_, t)| graph.leaf(t.clone(), trainable))
            .collect(),
    }
}

fn stack_errors(spec: &ModelSpec, stack: &SliceStack) -> Option<String> {
    if stack.len() != spec.stack_len {
        return Some(format!(
            "expected {} slices, got {}",
            spec.stack_len,
            stack.len()
        ));
    }
    if stack.height() != spec.input_side || stack.width() != spec.input_side {
        return Some(format!(
            "expected {0}x{0} slices, got {1}x{2}",
            spec.input_side,
            stack.height(),
            stack.width()
        ));
    }
    for (i, slice) in stack.slices.iter().enumerate() {
        if slice.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Some(format!("slice {i} is not normalized to [0, 1]"));
        }
    }
    None
}

fn extractor_2d(
    graph: &mut Graph<f32>,
    spec: &ModelSpec,
    params: &BoundParams,
    mut x: Var,
) -> Result<Var, NetError> {
    for (i, stage) in spec.extractor.iter().enumerate() {
        let kernels = params.vars[2 * i];
        let bias = params.vars[2 * i + 1];
        x = graph.conv2d(x, kernels, bias, stage.stride, stage.kernel / 2)?;
        x = graph.activation(x, Activation::Relu);
        if stage.pool > 0 {
            x = graph.maxpool2d(x, stage.pool, stage.pool)?;
        }
    }
    let flat = graph.value(x).numel();
    Ok(graph.reshape(x, &[flat])?)
}

fn lstm_layer_params(params: &BoundParams, base: usize, layer: usize) -> LstmCellParams {
    let at = |gate: usize, part: usize| params.vars[base + 12 * layer + 3 * gate + part];
    let gates = |gate: usize| LstmGates {
        w: at(gate, 0),
        u: at(gate, 1),
        b: at(gate, 2),
    };
    LstmCellParams {
        input: gates(0),
        forget: gates(1),
        cell: gates(2),
        output: gates(3),
    }
}

fn head(
    graph: &mut Graph<f32>,
    spec: &ModelSpec,
    params: &BoundParams,
    base: usize,
    mut x: Var,
) -> Result<Var, NetError> {
    for (j, _) in spec.head.iter().enumerate() {
        let weights = params.vars[base + 2 * j];
        let bias = params.vars[base + 2 * j + 1];
        x = graph.dense(x, weights, bias)?;
        if j + 1 < spec.head.len() {
            x = graph.activation(x, Activation::Relu);
        }
    }
    Ok(graph.activation(x, Activation::Sigmoid))
}

/// Record the full forward pass for `stack` and return the probability
/// output variable. Used by both inference and the training loop.
pub fn forward_bound(
    graph: &mut Graph<f32>,
    spec: &ModelSpec,
    params: &BoundParams,
    stack: &SliceStack,
) -> Result<Var, NetError> {
    if let Some(msg) = stack_errors(spec, stack) {
        return Err(NetError::Input(msg));
    }
    let n_stage_params = 2 * spec.extractor.len();
    match spec.kind {
        ModelKind::Cnn3d => {
            let side = spec.input_side;
            let mut data = Vec::with_capacity(spec.stack_len * side * side);
            for slice in &stack.slices {
                data.extend_from_slice(&slice.data);
            }
            let input = Tensor::new(vec![1, spec.stack_len, side, side], data)
                .map_err(NetError::Autodiff)?;
            let mut x = graph.leaf(input, false);
            for (i, stage) in spec.extractor.iter().enumerate() {
                let kernels = params.vars[2 * i];
                let bias = params.vars[2 * i + 1];
                // Same-padding on all three axes keeps the depth aligned with
                // the slice order; pooling is spatial only.
                x = graph.conv3d(x, kernels, bias, stage.stride, stage.kernel / 2)?;
                x = graph.activation(x, Activation::Relu);
                if stage.pool > 0 {
                    x = graph.maxpool2d(x, stage.pool, stage.pool)?;
                }
            }
            let flat = graph.value(x).numel();
            let x = graph.reshape(x, &[flat])?;
            Ok(head(graph, spec, params, n_stage_params, x)?)
        }
        ModelKind::CnnLstm | ModelKind::DcnnLstm => {
            let side = spec.input_side;
            let frames: Vec<Tensor<f32>> = match spec.kind {
                ModelKind::CnnLstm => stack
                    .slices
                    .iter()
                    .map(|s| Tensor::new(vec![1, side, side], s.data.clone()))
                    .collect::<Result<_, _>>()
                    .map_err(NetError::Autodiff)?,
                _ => differential(stack)?
                    .into_iter()
                    .map(|f| Tensor::new(vec![1, side, side], f.data))
                    .collect::<Result<_, _>>()
                    .map_err(NetError::Autodiff)?,
            };
            debug_assert_eq!(frames.len(), spec.sequence_len());
            let mut features = Vec::with_capacity(frames.len());
            for frame in frames {
                let x = graph.leaf(frame, false);
                features.push(extractor_2d(graph, spec, params, x)?);
            }
            let layers: Vec<LstmCellParams> = (0..spec.lstm_layers)
                .map(|l| lstm_layer_params(params, n_stage_params, l))
                .collect();
            let hidden = graph.multilayer_lstm(&features, &layers)?;
            let head_base = n_stage_params + 12 * spec.lstm_layers;
            Ok(head(graph, spec, params, head_base, hidden)?)
        }
    }
}

fn forward_value(net: &Network, stack: &SliceStack) -> Result<f32, NetError> {
    let mut graph = Graph::new();
    let params = bind(&mut graph, net, false);
    let out = forward_bound(&mut graph, &net.spec, &params, stack)?;
    Ok(graph.value(out).item())
}

/// Probability that `stack` is class 1 under the matching architecture.
pub fn forward(net: &Network, stack: &SliceStack) -> Result<f32, NetError> {
    forward_value(net, stack)
}

pub fn forward_cnn3d(net: &Network, stack: &SliceStack) -> Result<f32, NetError> {
    expect_kind(net, ModelKind::Cnn3d)?;
    forward_value(net, stack)
}

pub fn forward_cnn_lstm(net: &Network, stack: &SliceStack) -> Result<f32, NetError> {
    expect_kind(net, ModelKind::CnnLstm)?;
    forward_value(net, stack)
}

pub fn forward_dcnn_lstm(net: &Network, stack: &SliceStack) -> Result<f32, NetError> {
    expect_kind(net, ModelKind::DcnnLstm)?;
    forward_value(net, stack)
}

fn expect_kind(net: &Network, kind: ModelKind) -> Result<(), NetError> {
    if net.spec.kind != kind {
        return Err(NetError::Input(format!(
            "network is {:?}, expected {:?}",
            net.spec.kind, kind
        )));
    }
    Ok(())
}

/// Score a batch of samples; order-preserving and safe to parallelize since
/// forwards never mutate the network.
pub fn score_stacks(net: &Network, samples: &[Sample]) -> Result<Vec<f32>, NetError> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| forward_value(net, &s.stack))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{Image, Label};

    fn tiny_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            input_side: 16,
            stack_len: 4,
            extractor: vec![
                ConvStage { channels: 2, kernel: 3, stride: 1, pool: 2 },
                ConvStage { channels: 4, kernel: 3, stride: 1, pool: 2 },
            ],
            lstm_layers: 2,
            lstm_hidden: 6,
            head: vec![5, 1],
        }
    }

    fn ramp_stack(len: usize, side: usize) -> SliceStack {
        let slices = (0..len)
            .map(|i| {
                Image::new(
                    side,
                    side,
                    (0..side * side)
                        .map(|p| ((p + 7 * i) % 97) as f32 / 97.0)
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        SliceStack::new(slices, 0.3, Some(Label::Unstable)).unwrap()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let spec = tiny_spec(ModelKind::CnnLstm);
        let a = Network::build(spec.clone(), 11).unwrap();
        let b = Network::build(spec.clone(), 11).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(na, nb);
            let ba: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }

        let c = Network::build(spec, 12).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|((_, ta), (_, tb))| ta.data() != tb.data());
        assert!(differs, "different seeds must differ somewhere");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let spec = ModelSpec::small(ModelKind::CnnLstm);
        let net = Network::build(spec.clone(), 0).unwrap();
        // Hand count over the declared stages: conv kernels + biases,
        // four LSTM gates (W, U, b) per layer, dense head.
        let mut expect = 0usize;
        let mut c_in = 1;
        for st in &spec.extractor {
            expect += st.channels * c_in * st.kernel * st.kernel + st.channels;
            c_in = st.channels;
        }
        let feat = 32 * 8 * 8; // 64 -> 32 -> 16 -> 8 spatial, 32 channels
        let h = spec.lstm_hidden;
        expect += 4 * (h * feat + h * h + h); // layer 0
        expect += 4 * (h * h + h * h + h); // layer 1
        expect += 32 * h + 32; // head0
        expect += 32 + 1; // head1
        assert_eq!(net.param_count(), expect);
        assert_eq!(spec.feature_len().unwrap(), feat);
    }

    #[test]
    fn zeroed_network_outputs_exactly_half() {
        for kind in [ModelKind::Cnn3d, ModelKind::CnnLstm, ModelKind::DcnnLstm] {
            let net = Network::zeroed(tiny_spec(kind)).unwrap();
            let stack = ramp_stack(4, 16);
            let p = forward(&net, &stack).unwrap();
            assert_eq!(p, 0.5, "{kind:?}");
        }
    }

    #[test]
    fn forwards_are_pure_and_in_unit_interval() {
        for kind in [ModelKind::Cnn3d, ModelKind::CnnLstm, ModelKind::DcnnLstm] {
            let net = Network::build(tiny_spec(kind), 3).unwrap();
            let stack = ramp_stack(4, 16);
            let a = forward(&net, &stack).unwrap();
            let b = forward(&net, &stack).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{kind:?} must be pure");
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn sigmoid_range_holds_over_random_stacks() {
        let net = Network::build(tiny_spec(ModelKind::Cnn3d), 5).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let slices = (0..4)
                .map(|_| {
                    Image::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect())
                        .unwrap()
                })
                .collect();
            let stack = SliceStack::new(slices, 0.3, None).unwrap();
            let p = forward(&net, &stack).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn cnn3d_depends_on_slice_order() {
        let net = Network::build(tiny_spec(ModelKind::Cnn3d), 21).unwrap();
        let stack = ramp_stack(4, 16);
        let mut reversed = stack.clone();
        reversed.slices.reverse();
        let a = forward(&net, &stack).unwrap();
        let b = forward(&net, &reversed).unwrap();
        assert!(
            (a - b).abs() > 1e-9,
            "depth axis must be semantic: {a} vs {b}"
        );
    }

    #[test]
    fn wrong_stack_length_and_unnormalized_input_are_rejected() {
        let net = Network::build(tiny_spec(ModelKind::CnnLstm), 2).unwrap();
        let short = ramp_stack(3, 16);
        assert!(matches!(forward(&net, &short), Err(NetError::Input(_))));

        let mut bad = ramp_stack(4, 16);
        bad.slices[1].data[5] = 1.5;
        assert!(matches!(forward(&net, &bad), Err(NetError::Input(_))));

        let wrong_kind = forward_cnn3d(&net, &ramp_stack(4, 16));
        assert!(wrong_kind.is_err());
    }

    #[test]
    fn dcnn_constant_stack_equals_zero_sequence_response() {
        let spec = tiny_spec(ModelKind::DcnnLstm);
        let net = Network::build(spec.clone(), 9).unwrap();
        let constant = SliceStack::new(
            (0..4).map(|_| Image::filled(16, 16, 0.37)).collect(),
            0.3,
            None,
        )
        .unwrap();
        let p = forward(&net, &constant).unwrap();

        // Same pathway fed the all-zero 3-frame sequence directly.
        let mut graph = Graph::new();
        let params = bind(&mut graph, &net, false);
        let features: Vec<Var> = (0..3)
            .map(|_| {
                let x = graph.leaf(Tensor::zeros(&[1, 16, 16]), false);
                extractor_2d(&mut graph, &spec, &params, x).unwrap()
            })
            .collect();
        let layers: Vec<LstmCellParams> = (0..spec.lstm_layers)
            .map(|l| lstm_layer_params(&params, 4, l))
            .collect();
        let hidden = graph.multilayer_lstm(&features, &layers).unwrap();
        let out = head(&mut graph, &spec, &params, 4 + 24, hidden).unwrap();
        assert_eq!(p, graph.value(out).item());
    }

    #[test]
    fn dcnn_is_invariant_to_constant_intensity_offset() {
        let net = Network::build(tiny_spec(ModelKind::DcnnLstm), 13).unwrap();
        let base = SliceStack::new(
            (0..4)
                .map(|i| {
                    Image::new(
                        16,
                        16,
                        (0..256).map(|p| ((p * (i + 2)) % 61) as f32 / 100.0).collect(),
                    )
                    .unwrap()
                })
                .collect(),
            0.3,
            None,
        )
        .unwrap();
        let mut shifted = base.clone();
        for s in &mut shifted.slices {
            for v in &mut s.data {
                *v += 0.2;
            }
        }
        let a = forward(&net, &base).unwrap();
        let b = forward(&net, &shifted).unwrap();
        assert!((a - b).abs() < 1e-6, "offset changed output: {a} vs {b}");
    }

    #[test]
    fn dcnn_consumes_one_fewer_timestep_than_stack_length() {
        let spec = tiny_spec(ModelKind::DcnnLstm);
        assert_eq!(spec.sequence_len(), 3);
        assert_eq!(ModelSpec::small(ModelKind::DcnnLstm).sequence_len(), 12);
        assert_eq!(ModelSpec::small(ModelKind::CnnLstm).sequence_len(), 13);
        assert_eq!(ModelSpec::small(ModelKind::Cnn3d).sequence_len(), 13);
    }

    #[test]
    fn extractor_weight_sharing_applies_to_all_timesteps() {
        // Identical slices produce identical per-timestep features, and a
        // perturbed extractor changes them all identically.
        let spec = tiny_spec(ModelKind::CnnLstm);
        let feats = |net: &Network, stack: &SliceStack| -> Vec<Vec<f32>> {
            let mut graph = Graph::new();
            let params = bind(&mut graph, net, false);
            stack
                .slices
                .iter()
                .map(|s| {
                    let x = graph
                        .leaf(Tensor::new(vec![1, 16, 16], s.data.clone()).unwrap(), false);
                    let f = extractor_2d(&mut graph, &spec, &params, x).unwrap();
                    graph.value(f).data().to_vec()
                })
                .collect()
        };
        let constant = SliceStack::new(
            (0..4).map(|_| Image::filled(16, 16, 0.4)).collect(),
            0.3,
            None,
        )
        .unwrap();
        let mut net = Network::build(spec.clone(), 31).unwrap();
        let before = feats(&net, &constant);
        assert!(before.windows(2).all(|w| w[0] == w[1]));

        net.params_mut()[0].1.data_mut()[0] += 0.25;
        let after = feats(&net, &constant);
        assert!(after.windows(2).all(|w| w[0] == w[1]));
        assert!(after[0] != before[0]);
    }
}
