//! TDNN-LSTM frame classifier over pdf-ids: forward/backward, SGD training with
//! per-layer learning-rate multipliers, and the per-iteration training log.

mod layers;
mod train;

pub use train::{
    dropout_schedule, frame_accuracy, lr_schedule, make_chunks, train_sgd, IterRecord, TrainConfig,
    TrainLog,
};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binio::{BinError, BinReader, BinWriter};
use crate::features::FeatureMatrix;
use layers::{LstmCache, TdnnCache};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("target {target} out of range for {classes} output classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("{frames} frames but {targets} targets")]
    FrameMismatch { frames: usize, targets: usize },
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("progress {0} outside [0, 1]")]
    Progress(f64),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("malformed network data: {0}")]
    Format(String),
}

impl From<BinError> for NnetError {
    fn from(e: BinError) -> Self {
        NnetError::Format(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Spliced affine layer with ReLU.
    Tdnn {
        offsets: Vec<i32>,
        dim: usize,
    },
    /// LSTM with recurrent projection; output dim is `proj`.
    Lstm {
        cell: usize,
        proj: usize,
    },
    SoftmaxOutput {
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn tdnn(name: &str, offsets: &[i32], dim: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Tdnn {
                offsets: offsets.to_vec(),
                dim,
            },
        }
    }

    pub fn lstm(name: &str, cell: usize, proj: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Lstm { cell, proj },
        }
    }

    pub fn softmax(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::SoftmaxOutput { dim },
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Tdnn { dim, .. } | LayerKind::SoftmaxOutput { dim } => *dim,
            LayerKind::Lstm { proj, .. } => *proj,
        }
    }

    fn validate(&self) -> Result<(), NnetError> {
        let bad = |msg: &str| Err(NnetError::Spec(format!("layer {}: {msg}", self.name)));
        match &self.kind {
            LayerKind::Tdnn { offsets, dim } => {
                if offsets.is_empty() || offsets.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("offsets must be nonempty and strictly increasing");
                }
                if *dim == 0 {
                    return bad("dim must be at least 1");
                }
            }
            LayerKind::Lstm { cell, proj } => {
                if *cell == 0 || *proj == 0 {
                    return bad("cell and projection dims must be at least 1");
                }
            }
            LayerKind::SoftmaxOutput { dim } => {
                if *dim == 0 {
                    return bad("dim must be at least 1");
                }
            }
        }
        Ok(())
    }

    /// Parameter shapes given the upstream dim.
    fn param_shapes(&self, input_dim: usize) -> Vec<(usize, usize)> {
        match &self.kind {
            LayerKind::Tdnn { offsets, dim } => vec![(*dim, input_dim * offsets.len()), (1, *dim)],
            LayerKind::Lstm { cell, proj } => {
                vec![
                    (4 * cell, input_dim),
                    (4 * cell, *proj),
                    (1, 4 * cell),
                    (*proj, *cell),
                ]
            }
            LayerKind::SoftmaxOutput { dim } => vec![(*dim, input_dim), (1, *dim)],
        }
    }
}

/// Alternating TDNN/LSTM stack ending in a softmax over `num_pdfs` classes.
pub fn tdnn_lstm_specs(
    tdnn_dim: usize,
    cell_dim: usize,
    proj_dim: usize,
    num_pdfs: usize,
) -> Vec<LayerSpec> {
    let wide = [-3, 0, 3];
    vec![
        LayerSpec::tdnn("tdnn1", &[-1, 0, 1], tdnn_dim),
        LayerSpec::tdnn("tdnn2", &[-1, 0, 1], tdnn_dim),
        LayerSpec::tdnn("tdnn3", &wide, tdnn_dim),
        LayerSpec::lstm("lstm1", cell_dim, proj_dim),
        LayerSpec::tdnn("tdnn4", &wide, tdnn_dim),
        LayerSpec::tdnn("tdnn5", &wide, tdnn_dim),
        LayerSpec::lstm("lstm2", cell_dim, proj_dim),
        LayerSpec::tdnn("tdnn6", &wide, tdnn_dim),
        LayerSpec::tdnn("tdnn7", &wide, tdnn_dim),
        LayerSpec::lstm("lstm3", cell_dim, proj_dim),
        LayerSpec::softmax("output", num_pdfs),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input_dim: usize,
    /// Weights and biases; biases are stored as 1 x n rows.
    pub params: Vec<Array2<f64>>,
    pub lr_multiplier: f64,
}

impl Layer {
    /// Weights uniform in +-g/sqrt(fan_in), biases zero. g = sqrt(6) for ReLU (tdnn) layers
    /// and sqrt(3) for LSTM layers (unit-variance pre-activations), 1 for the output layer.
    /// With g = 1 everywhere the 11-layer stack barely trains under plain SGD.
    pub fn random<R: Rng>(spec: LayerSpec, input_dim: usize, rng: &mut R) -> Self {
        let gain = match spec.kind {
            LayerKind::Tdnn { .. } => 6f64.sqrt(),
            LayerKind::Lstm { .. } => 3f64.sqrt(),
            _ => 1.0,
        };
        let params = spec
            .param_shapes(input_dim)
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    return Array2::zeros((r, c));
                }
                let bound = gain / (c as f64).sqrt();
                Array2::from_shape_simple_fn((r, c), || rng.random_range(-bound..bound))
            })
            .collect();
        Self {
            spec,
            input_dim,
            params,
            lr_multiplier: 1.0,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

enum Cache {
    Tdnn(TdnnCache),
    Lstm(LstmCache),
    Output(Array2<f64>),
}

struct LayerTrace {
    cache: Option<Cache>,
    /// Inverted-dropout scale per output element (0 or 1/(1-p)).
    mask: Option<Array2<f64>>,
}

/// Forward state kept for backpropagation.
pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    log_probs: Array2<f64>,
}

/// Gradients shaped like the network parameters; layers below the backprop stop are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<Array2<f64>>>);

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self, NnetError> {
        if input_dim == 0 {
            return Err(NnetError::Spec("input dim must be at least 1".into()));
        }
        if layers.is_empty() {
            return Err(NnetError::Spec("network has no layers".into()));
        }
        let mut dim = input_dim;
        let mut names = std::collections::HashSet::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.spec.validate()?;
            if !names.insert(layer.spec.name.as_str()) {
                return Err(NnetError::Spec(format!(
                    "duplicate layer name {}",
                    layer.spec.name
                )));
            }
            let is_output = matches!(layer.spec.kind, LayerKind::SoftmaxOutput { .. });
            if is_output != (i + 1 == layers.len()) {
                return Err(NnetError::Spec(
                    "softmax-output must be the last layer, and only there".into(),
                ));
            }
            if layer.input_dim != dim {
                return Err(NnetError::DimMismatch {
                    expected: dim,
                    got: layer.input_dim,
                });
            }
            let shapes = layer.spec.param_shapes(dim);
            if layer.params.len() != shapes.len()
                || layer.params.iter().zip(&shapes).any(|(p, s)| p.dim() != *s)
            {
                return Err(NnetError::Spec(format!(
                    "layer {}: parameter shapes",
                    layer.spec.name
                )));
            }
            if !(layer.lr_multiplier >= 0.0 && layer.lr_multiplier.is_finite()) {
                return Err(NnetError::Spec(format!(
                    "layer {}: lr multiplier must be >= 0",
                    layer.spec.name
                )));
            }
            dim = layer.output_dim();
        }
        Ok(Self { input_dim, layers })
    }

    /// Seeded random initialization of every layer, in order.
    pub fn random(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self, NnetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = input_dim;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let layer = Layer::random(spec.clone(), dim, &mut rng);
            dim = layer.output_dim();
            layers.push(layer);
        }
        Self::new(input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn set_lr_multiplier(&mut self, layer: usize, value: f64) -> Result<(), NnetError> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(NnetError::Spec(format!(
                "lr multiplier must be >= 0, got {value}"
            )));
        }
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| NnetError::Spec(format!("no layer {layer}")))?;
        l.lr_multiplier = value;
        Ok(())
    }

    /// Index of the first layer with a nonzero multiplier, where backprop can stop.
    pub fn first_trainable(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.lr_multiplier > 0.0)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<(), NnetError> {
        if x.ncols() != self.input_dim {
            return Err(NnetError::DimMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Runs all layers; caches are kept from layer `keep_from` upward. Dropout (if any) is
    /// applied to hidden layer outputs only.
    pub(crate) fn forward_trace<R: Rng>(
        &self,
        x: ArrayView2<'_, f64>,
        dropout: Option<(f64, &mut R)>,
        keep_from: usize,
    ) -> Trace {
        let last = self.layers.len() - 1;
        let mut dropout = dropout.filter(|(p, _)| *p > 0.0);
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut cur: Array2<f64> = x.to_owned();
        let mut log_probs = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let keep = i >= keep_from;
            let p = &layer.params;
            let (mut out, cache) = match &layer.spec.kind {
                LayerKind::Tdnn { offsets, .. } => {
                    let (y, c) = layers::tdnn_forward(cur.view(), offsets, &p[0], &p[1]);
                    (y, keep.then_some(Cache::Tdnn(c)))
                }
                LayerKind::Lstm { .. } => {
                    let (y, c) = layers::lstm_forward(cur.view(), p);
                    (y, keep.then_some(Cache::Lstm(c)))
                }
                LayerKind::SoftmaxOutput { .. } => {
                    let lp = layers::output_forward(cur.view(), &p[0], &p[1]);
                    log_probs = Some(lp);
                    let input = std::mem::replace(&mut cur, Array2::zeros((0, 0)));
                    traces.push(LayerTrace {
                        cache: keep.then_some(Cache::Output(input)),
                        mask: None,
                    });
                    break;
                }
            };
            let mut mask = None;
            if i < last {
                if let Some((rate, rng)) = dropout.as_mut() {
                    let scale = 1.0 / (1.0 - *rate);
                    let m = Array2::from_shape_simple_fn(out.dim(), || {
                        if rng.random::<f64>() < *rate {
                            0.0
                        } else {
                            scale
                        }
                    });
                    out *= &m;
                    mask = Some(m);
                }
            }
            traces.push(LayerTrace { cache, mask });
            cur = out;
        }
        Trace {
            layers: traces,
            log_probs: log_probs.expect("network ends in an output layer"),
        }
    }

    /// Backpropagates `d_logits` (gradient w.r.t. output pre-softmax activations) down to
    /// layer `stop`, accumulating into `grads`.
    pub(crate) fn backward_trace(
        &self,
        trace: &Trace,
        d_logits: Array2<f64>,
        stop: usize,
        grads: &mut Gradients,
    ) {
        let mut d = d_logits;
        for i in (stop..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let lt = &trace.layers[i];
            if let Some(mask) = &lt.mask {
                d *= mask;
            }
            let need_input = i > stop;
            let g = &mut grads.0[i];
            let next = match (
                &layer.spec.kind,
                lt.cache.as_ref().expect("cache kept above stop"),
            ) {
                (LayerKind::Tdnn { offsets, .. }, Cache::Tdnn(c)) => {
                    layers::tdnn_backward(c, &d, offsets, &layer.params[0], g, need_input)
                }
                (LayerKind::Lstm { .. }, Cache::Lstm(c)) => {
                    layers::lstm_backward(c, &d, &layer.params, g, need_input)
                }
                (LayerKind::SoftmaxOutput { .. }, Cache::Output(x)) => {
                    layers::output_backward(x, &d, &layer.params[0], g, need_input)
                }
                _ => unreachable!("cache kind matches layer kind"),
            };
            match next {
                Some(n) => d = n,
                None => break,
            }
        }
    }

    pub(crate) fn zero_gradients(&self, stop: usize) -> Gradients {
        Gradients(
            self.layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if i < stop {
                        Vec::new()
                    } else {
                        l.params.iter().map(|p| Array2::zeros(p.dim())).collect()
                    }
                })
                .collect(),
        )
    }

    /// Per-frame log-posteriors without dropout.
    pub fn log_posteriors(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnetError> {
        self.check_input(input)?;
        let trace = self.forward_trace::<ChaCha8Rng>(input, None, self.layers.len());
        Ok(trace.log_probs)
    }

    /// Per-frame posteriors. In train mode hidden outputs get inverted dropout at
    /// `dropout_rate` from a fixed-seed generator.
    pub fn forward(
        &self,
        input: &FeatureMatrix,
        train_mode: bool,
        dropout_rate: f64,
    ) -> Result<Array2<f64>, NnetError> {
        self.check_input(input.view())?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(NnetError::Config(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dropout = train_mode.then_some((dropout_rate, &mut rng));
        let trace = self.forward_trace(input.view(), dropout, self.layers.len());
        Ok(trace.log_probs.mapv(f64::exp))
    }

    fn check_targets(&self, frames: usize, targets: &[usize]) -> Result<(), NnetError> {
        if targets.len() != frames {
            return Err(NnetError::FrameMismatch {
                frames,
                targets: targets.len(),
            });
        }
        let classes = self.output_dim();
        if let Some(&target) = targets.iter().find(|&&t| t >= classes) {
            return Err(NnetError::TargetOutOfRange { target, classes });
        }
        Ok(())
    }

    /// Mean per-frame cross-entropy of the targets, without dropout.
    pub fn cross_entropy(
        &self,
        input: ArrayView2<'_, f64>,
        targets: &[usize],
    ) -> Result<f64, NnetError> {
        let lp = self.log_posteriors(input)?;
        self.check_targets(lp.nrows(), targets)?;
        if targets.is_empty() {
            return Ok(0.0);
        }
        Ok(-targets
            .iter()
            .enumerate()
            .map(|(t, &y)| lp[[t, y]])
            .sum::<f64>()
            / targets.len() as f64)
    }

    /// Exact gradients of the mean per-frame cross-entropy for every parameter.
    pub fn backward(
        &self,
        input: &FeatureMatrix,
        targets: &[usize],
    ) -> Result<Gradients, NnetError> {
        self.check_input(input.view())?;
        self.check_targets(input.frames(), targets)?;
        let trace = self.forward_trace::<ChaCha8Rng>(input.view(), None, 0);
        let mut grads = self.zero_gradients(0);
        let d = softmax_ce_grad(&trace.log_probs, targets, 1.0 / targets.len().max(1) as f64);
        self.backward_trace(&trace, d, 0, &mut grads);
        Ok(grads)
    }

    /// Sign pattern of every ReLU pre-activation, for detecting kink crossings.
    pub fn relu_pattern(&self, input: ArrayView2<'_, f64>) -> Result<Vec<bool>, NnetError> {
        self.check_input(input)?;
        let trace = self.forward_trace::<ChaCha8Rng>(input, None, 0);
        Ok(trace
            .layers
            .iter()
            .filter_map(|lt| match &lt.cache {
                Some(Cache::Tdnn(c)) => Some(c.z.iter().map(|&z| z > 0.0).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(b"NNET", 1);
        w.u64(self.input_dim as u64);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.str(&l.spec.name);
            match &l.spec.kind {
                LayerKind::Tdnn { offsets, dim } => {
                    w.u8(0);
                    w.u32(offsets.len() as u32);
                    for &o in offsets {
                        w.i32(o);
                    }
                    w.u64(*dim as u64);
                }
                LayerKind::Lstm { cell, proj } => {
                    w.u8(1);
                    w.u64(*cell as u64);
                    w.u64(*proj as u64);
                }
                LayerKind::SoftmaxOutput { dim } => {
                    w.u8(2);
                    w.u64(*dim as u64);
                }
            }
            w.f64(l.lr_multiplier);
            w.u32(l.params.len() as u32);
            for p in &l.params {
                w.array2(p);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, NnetError> {
        let mut r = BinReader::new(data, b"NNET", 1)?;
        let input_dim = r.u64("input dim")? as usize;
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::new();
        let mut dim = input_dim;
        for _ in 0..count {
            let name = r.str("layer name")?;
            let kind = match r.u8("layer kind")? {
                0 => {
                    let n = r.u32("offset count")? as usize;
                    if n > 1024 {
                        return Err(NnetError::Format(format!("implausible offset count {n}")));
                    }
                    let offsets = (0..n)
                        .map(|_| r.i32("offset"))
                        .collect::<Result<Vec<_>, _>>()?;
                    LayerKind::Tdnn {
                        offsets,
                        dim: r.u64("dim")? as usize,
                    }
                }
                1 => LayerKind::Lstm {
                    cell: r.u64("cell")? as usize,
                    proj: r.u64("proj")? as usize,
                },
                2 => LayerKind::SoftmaxOutput {
                    dim: r.u64("dim")? as usize,
                },
                k => return Err(NnetError::Format(format!("unknown layer kind {k}"))),
            };
            let lr_multiplier = r.f64("lr multiplier")?;
            let n = r.u32("param count")? as usize;
            if n > 8 {
                return Err(NnetError::Format(format!("implausible param count {n}")));
            }
            let params = (0..n)
                .map(|_| r.array2("param"))
                .collect::<Result<Vec<_>, _>>()?;
            let spec = LayerSpec { name, kind };
            let out = spec.output_dim();
            layers.push(Layer {
                spec,
                input_dim: dim,
                params,
                lr_multiplier,
            });
            dim = out;
        }
        r.finish()?;
        Self::new(input_dim, layers)
    }
}

/// d(mean CE)/d(logits) scaled by `scale`: (softmax - onehot) * scale.
pub(crate) fn softmax_ce_grad(
    log_probs: &Array2<f64>,
    targets: &[usize],
    scale: f64,
) -> Array2<f64> {
    let mut d = log_probs.mapv(f64::exp);
    for (t, &y) in targets.iter().enumerate() {
        d[[t, y]] -= 1.0;
    }
    d *= scale;
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_specs(classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::tdnn("tdnn1", &[-1, 0, 1], 5),
            LayerSpec::lstm("lstm1", 3, 2),
            LayerSpec::softmax("output", classes),
        ]
    }

    fn input(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Array2::from_shape_simple_fn((frames, dim), || {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let net = Network::random(4, &tdnn_lstm_specs(8, 4, 3, 6), 1).unwrap();
        let p = net.forward(&input(20, 4, 2), false, 0.0).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let p = net.forward(&input(20, 4, 2), true, 0.3).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_give_uniform_and_closed_form_bias_gradient() {
        let mut net = Network::random(3, &tiny_specs(4), 5).unwrap();
        for l in net.layers_mut() {
            for p in &mut l.params {
                p.fill(0.0);
            }
        }
        let x = input(6, 3, 1);
        let p = net.forward(&x, false, 0.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let targets = [0, 1, 1, 3, 3, 3];
        let g = net.backward(&x, &targets).unwrap();
        let bias = &g.0[2][1];
        let expect = [0.25 - 1.0 / 6.0, 0.25 - 2.0 / 6.0, 0.25, 0.25 - 3.0 / 6.0];
        for (c, e) in expect.iter().enumerate() {
            assert!((bias[[0, c]] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tdnn_clamps_first_frame() {
        let spec = vec![
            LayerSpec::tdnn("tdnn1", &[-1, 0, 1], 1),
            LayerSpec::softmax("output", 1),
        ];
        let mut net = Network::random(1, &spec, 0).unwrap();
        // picks the -1 offset only
        net.layers_mut()[0].params[0] = array![[1.0, 0.0, 0.0]];
        let x = array![[5.0], [7.0], [9.0]];
        let trace = net.forward_trace::<ChaCha8Rng>(x.view(), None, 0);
        let Some(Cache::Tdnn(c)) = &trace.layers[0].cache else {
            panic!("tdnn cache")
        };
        assert_eq!(c.z.column(0).to_vec(), vec![5.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_is_deterministic_and_checks_targets() {
        let net = Network::random(3, &tiny_specs(4), 5).unwrap();
        let x = input(7, 3, 3);
        let t = [0, 1, 2, 3, 0, 1, 2];
        assert_eq!(net.backward(&x, &t).unwrap(), net.backward(&x, &t).unwrap());
        assert!(matches!(
            net.backward(&x, &[0, 1, 2, 3, 0, 1, 4]),
            Err(NnetError::TargetOutOfRange { target: 4, .. })
        ));
        assert!(matches!(
            net.backward(&x, &[0]),
            Err(NnetError::FrameMismatch { .. })
        ));
        assert!(matches!(
            net.forward(&input(7, 2, 0), false, 0.0),
            Err(NnetError::DimMismatch { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Network::random(3, &tiny_specs(3), 11).unwrap();
        let x = input(8, 3, 4);
        let t = [0, 1, 2, 2, 1, 0, 0, 1];
        let g = net.backward(&x, &t).unwrap();
        let base_pattern = net.relu_pattern(x.view()).unwrap();
        let h = 1e-5;
        for (li, layer) in net.layers().iter().enumerate() {
            for (pi, p) in layer.params.iter().enumerate() {
                for idx in 0..p.len() {
                    let (r, c) = (idx / p.ncols(), idx % p.ncols());
                    let mut plus = net.clone();
                    plus.layers_mut()[li].params[pi][[r, c]] += h;
                    let mut minus = net.clone();
                    minus.layers_mut()[li].params[pi][[r, c]] -= h;
                    if plus.relu_pattern(x.view()).unwrap() != base_pattern
                        || minus.relu_pattern(x.view()).unwrap() != base_pattern
                    {
                        continue;
                    }
                    let num = (plus.cross_entropy(x.view(), &t).unwrap()
                        - minus.cross_entropy(x.view(), &t).unwrap())
                        / (2.0 * h);
                    let ana = g.0[li][pi][[r, c]];
                    assert!(
                        (num - ana).abs() <= 1e-6 + 1e-4 * num.abs().max(ana.abs()),
                        "{li}/{pi}[{r},{c}]: {num} vs {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(Network::random(
            3,
            &[LayerSpec::tdnn("a", &[0, 0], 2), LayerSpec::softmax("o", 2)],
            0
        )
        .is_err());
        assert!(Network::random(
            3,
            &[LayerSpec::tdnn("a", &[0], 2), LayerSpec::softmax("a", 2)],
            0
        )
        .is_err());
        assert!(Network::random(
            3,
            &[LayerSpec::softmax("o", 2), LayerSpec::tdnn("a", &[0], 2)],
            0
        )
        .is_err());
        assert!(Network::random(
            3,
            &[LayerSpec::lstm("l", 0, 2), LayerSpec::softmax("o", 2)],
            0
        )
        .is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let mut net = Network::random(4, &tdnn_lstm_specs(6, 3, 2, 5), 9).unwrap();
        net.set_lr_multiplier(2, 0.25).unwrap();
        let back = Network::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back, net);
        let mut bytes = net.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Network::from_bytes(&bytes).is_err());
    }
}
