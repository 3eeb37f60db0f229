//! Teacher, student and aligner networks.
//!
//! Models are plain MLPs split into a feature extractor (ReLU after every
//! layer) and a classifier head (ReLU after all but the last layer, raw
//! logits out). The aligner is a single affine map plus ReLU projecting
//! teacher features into the student feature space.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};
use crate::optim::{AdamWConfig, Optimizer};
use crate::tensor::{affine_backward, affine_forward, relu, relu_backward, ParamTensor, Tensor};

/// Model family selector. `FedAvg` reuses the variant-1 student topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    SentinelI,
    SentinelII,
    FedAvg,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "sentinel-1" => Ok(Variant::SentinelI),
            "sentinel-2" => Ok(Variant::SentinelII),
            "fedavg" => Ok(Variant::FedAvg),
            other => Err(SentinelError::InvalidArgument(format!(
                "unknown variant '{other}' (expected sentinel-1, sentinel-2 or fedavg)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::SentinelI => "sentinel-1",
            Variant::SentinelII => "sentinel-2",
            Variant::FedAvg => "fedavg",
        }
    }
}

/// Layer widths of one MLP: feature extractor plus classifier head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub feature_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        feature_widths: Vec<usize>,
        head_widths: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(SentinelError::InvalidArgument(
                "input_dim and num_classes must be at least 1".into(),
            ));
        }
        if feature_widths.is_empty() || head_widths.is_empty() {
            return Err(SentinelError::InvalidArgument(
                "feature_widths and head_widths must be non-empty".into(),
            ));
        }
        Ok(MlpSpec {
            input_dim,
            feature_widths,
            head_widths,
            num_classes,
        })
    }

    /// Feature dimension produced by the extractor.
    pub fn feature_dim(&self) -> usize {
        *self.feature_widths.last().unwrap()
    }

    /// `(d_in, d_out)` of every affine layer, features then head; the last
    /// head layer emits `num_classes` logits.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &w in &self.feature_widths {
            dims.push((prev, w));
            prev = w;
        }
        for &w in &self.head_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    /// Total trainable parameter count: Σ (d_in + 1)·d_out.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| (i + 1) * o)
            .sum()
    }
}

/// Variant architectures: teacher spec, student spec, aligner (in, out) dims.
pub fn build_variant(
    variant: Variant,
    input_dim: usize,
    num_classes: usize,
) -> Result<(MlpSpec, MlpSpec, (usize, usize))> {
    let student = MlpSpec::new(input_dim, vec![64, 32], vec![16], num_classes)?;
    let teacher = match variant {
        Variant::SentinelI | Variant::FedAvg => student.clone(),
        Variant::SentinelII => MlpSpec::new(input_dim, vec![128, 64], vec![32], num_classes)?,
    };
    let aligner_dims = (teacher.feature_dim(), student.feature_dim());
    Ok((teacher, student, aligner_dims))
}

/// One affine layer with weight `[d_in, d_out]` and bias `[d_out]`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl AffineLayer {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        AffineLayer {
            weight: ParamTensor::new(Tensor::zeros(vec![d_in, d_out])),
            bias: ParamTensor::new(Tensor::zeros(vec![d_out])),
        }
    }

    /// Fan-in uniform init: weights ~ U(−1/√d_in, 1/√d_in), biases zero.
    fn init(d_in: usize, d_out: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut layer = Self::zeros(d_in, d_out);
        for v in layer.weight.value.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }
}

/// Ordered affine layers split into a feature extractor and a head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub feature_layers: Vec<AffineLayer>,
    pub head_layers: Vec<AffineLayer>,
}

/// Activations recorded by a cached forward pass, consumed by backward.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input to each layer, in layer order.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    preacts: Vec<Tensor>,
    /// Whether a ReLU follows each layer.
    relu_after: Vec<bool>,
}

impl ForwardCache {
    fn new() -> Self {
        ForwardCache {
            inputs: Vec::new(),
            preacts: Vec::new(),
            relu_after: Vec::new(),
        }
    }
}

fn run_layers(
    layers: &[AffineLayer],
    x: &Tensor,
    relu_flags: impl Fn(usize) -> bool,
    mut cache: Option<&mut ForwardCache>,
) -> Result<Tensor> {
    let mut cur = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let pre = affine_forward(&cur, &layer.weight.value, &layer.bias.value)?;
        let with_relu = relu_flags(i);
        let out = if with_relu { relu(&pre) } else { pre.clone() };
        if let Some(c) = cache.as_deref_mut() {
            c.inputs.push(cur);
            c.preacts.push(pre);
            c.relu_after.push(with_relu);
        }
        cur = out;
    }
    Ok(cur)
}

fn backward_layers(layers: &mut [AffineLayer], cache: &ForwardCache, dy: &Tensor) -> Tensor {
    let mut grad = dy.clone();
    for (i, layer) in layers.iter_mut().enumerate().rev() {
        if cache.relu_after[i] {
            grad = relu_backward(&cache.preacts[i], &grad);
        }
        let (dx, dw, db) = affine_backward(&cache.inputs[i], &layer.weight.value, &grad);
        layer.weight.grad.add_scaled(&dw, 1.0);
        layer.bias.grad.add_scaled(&db, 1.0);
        grad = dx;
    }
    grad
}

impl ModelParams {
    /// Seed-deterministic initialization from a spec.
    pub fn init(spec: &MlpSpec, rng: &mut ChaCha12Rng) -> Self {
        let dims = spec.layer_dims();
        let n_feat = spec.feature_widths.len();
        let mut feature_layers = Vec::new();
        let mut head_layers = Vec::new();
        for (i, &(d_in, d_out)) in dims.iter().enumerate() {
            let layer = AffineLayer::init(d_in, d_out, rng);
            if i < n_feat {
                feature_layers.push(layer);
            } else {
                head_layers.push(layer);
            }
        }
        ModelParams {
            feature_layers,
            head_layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_layers.last().unwrap().out_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head_layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.all_layers()
            .map(|l| l.weight.value.len() + l.bias.value.len())
            .sum()
    }

    fn all_layers(&self) -> impl Iterator<Item = &AffineLayer> {
        self.feature_layers.iter().chain(self.head_layers.iter())
    }

    /// Feature extractor: ReLU after every layer.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(SentinelError::dim("x.cols vs input_dim", self.input_dim(), x.cols()));
        }
        run_layers(&self.feature_layers, x, |_| true, None)
    }

    pub fn forward_features_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(SentinelError::dim("x.cols vs input_dim", self.input_dim(), x.cols()));
        }
        let mut cache = ForwardCache::new();
        let h = run_layers(&self.feature_layers, x, |_| true, Some(&mut cache))?;
        Ok((h, cache))
    }

    /// Head: ReLU after all but the last layer; raw logits out.
    pub fn forward_head(&self, h: &Tensor) -> Result<Tensor> {
        if h.cols() != self.feature_dim() {
            return Err(SentinelError::dim("h.cols vs feature_dim", self.feature_dim(), h.cols()));
        }
        let last = self.head_layers.len() - 1;
        run_layers(&self.head_layers, h, |i| i != last, None)
    }

    pub fn forward_head_cached(&self, h: &Tensor) -> Result<(Tensor, ForwardCache)> {
        if h.cols() != self.feature_dim() {
            return Err(SentinelError::dim("h.cols vs feature_dim", self.feature_dim(), h.cols()));
        }
        let last = self.head_layers.len() - 1;
        let mut cache = ForwardCache::new();
        let z = run_layers(&self.head_layers, h, |i| i != last, Some(&mut cache))?;
        Ok((z, cache))
    }

    /// Full forward for inference.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.forward_features(x)?;
        self.forward_head(&h)
    }

    /// Accumulate head gradients; returns the gradient at the feature input.
    pub fn backward_head(&mut self, cache: &ForwardCache, dz: &Tensor) -> Tensor {
        backward_layers(&mut self.head_layers, cache, dz)
    }

    /// Accumulate feature-extractor gradients; returns the input gradient.
    pub fn backward_features(&mut self, cache: &ForwardCache, dh: &Tensor) -> Tensor {
        backward_layers(&mut self.feature_layers, cache, dh)
    }

    /// Parameter labels in flatten order (`fe0.weight`, `fe0.bias`, ...).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.feature_layers.len() {
            names.push(format!("fe{i}.weight"));
            names.push(format!("fe{i}.bias"));
        }
        for i in 0..self.head_layers.len() {
            names.push(format!("head{i}.weight"));
            names.push(format!("head{i}.bias"));
        }
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.all_layers()
            .flat_map(|l| {
                [
                    l.weight.value.shape().to_vec(),
                    l.bias.value.shape().to_vec(),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.feature_layers
            .iter_mut()
            .chain(self.head_layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn optimizer(&self, cfg: &AdamWConfig) -> Optimizer {
        Optimizer::new(cfg, &self.param_shapes())
    }

    /// All parameter values concatenated in flatten order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.all_layers() {
            out.extend_from_slice(l.weight.value.data());
            out.extend_from_slice(l.bias.value.data());
        }
        out
    }

    /// Load values from a flat vector in flatten order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(SentinelError::dim("flat parameter vector", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for l in self
            .feature_layers
            .iter_mut()
            .chain(self.head_layers.iter_mut())
        {
            for t in [&mut l.weight.value, &mut l.bias.value] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Wire format returned by a client update: ordered
    /// `(layer name, shape, row-major values)` entries.
    pub fn state_dict(&self) -> StateDict {
        let names = self.param_names();
        let mut entries = Vec::with_capacity(names.len());
        let mut idx = 0;
        for l in self.all_layers() {
            for t in [&l.weight.value, &l.bias.value] {
                entries.push(StateEntry {
                    name: names[idx].clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                });
                idx += 1;
            }
        }
        StateDict { entries }
    }

    /// Load a state dictionary, validating names and shapes.
    pub fn load_state_dict(&mut self, dict: &StateDict) -> Result<()> {
        let names = self.param_names();
        if dict.entries.len() != names.len() {
            return Err(SentinelError::dim("state dict entries", names.len(), dict.entries.len()));
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (entry, name) in dict.entries.iter().zip(&names) {
            if &entry.name != name {
                return Err(SentinelError::Config(format!(
                    "state dict entry '{}' does not match expected layer '{}'",
                    entry.name, name
                )));
            }
            flat.extend_from_slice(&entry.values);
        }
        self.load_flat(&flat)
    }
}

/// Serialized model parameters: the only object a client sends uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDict {
    pub entries: Vec<StateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl StateDict {
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.entries {
            out.extend_from_slice(&e.values);
        }
        out
    }
}

/// Single affine map plus ReLU from teacher feature space to student
/// feature space. Trained on detached teacher features only.
#[derive(Debug, Clone)]
pub struct AlignerParams {
    pub layer: AffineLayer,
}

impl AlignerParams {
    pub fn init(d_teacher: usize, d_student: usize, rng: &mut ChaCha12Rng) -> Self {
        AlignerParams {
            layer: AffineLayer::init(d_teacher, d_student, rng),
        }
    }

    pub fn forward(&self, h_detached: &Tensor) -> Result<Tensor> {
        if h_detached.cols() != self.layer.in_dim() {
            return Err(SentinelError::dim(
                "h.cols vs aligner input",
                self.layer.in_dim(),
                h_detached.cols(),
            ));
        }
        let pre = affine_forward(&h_detached, &self.layer.weight.value, &self.layer.bias.value)?;
        Ok(relu(&pre))
    }

    pub fn forward_cached(&self, h_detached: &Tensor) -> Result<(Tensor, Tensor)> {
        if h_detached.cols() != self.layer.in_dim() {
            return Err(SentinelError::dim(
                "h.cols vs aligner input",
                self.layer.in_dim(),
                h_detached.cols(),
            ));
        }
        let pre = affine_forward(&h_detached, &self.layer.weight.value, &self.layer.bias.value)?;
        let out = relu(&pre);
        Ok((out, pre))
    }

    /// Accumulate aligner gradients; the input gradient is dropped because
    /// the input is detached by contract.
    pub fn backward(&mut self, input: &Tensor, preact: &Tensor, dy: &Tensor) {
        let grad = relu_backward(preact, dy);
        let (_dx, dw, db) = affine_backward(input, &self.layer.weight.value, &grad);
        self.layer.weight.grad.add_scaled(&dw, 1.0);
        self.layer.bias.grad.add_scaled(&db, 1.0);
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }

    pub fn param_names(&self) -> Vec<String> {
        vec!["aligner.weight".into(), "aligner.bias".into()]
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.layer.weight.value.shape().to_vec(),
            self.layer.bias.value.shape().to_vec(),
        ]
    }

    pub fn zero_grads(&mut self) {
        self.layer.weight.zero_grad();
        self.layer.bias.zero_grad();
    }

    pub fn optimizer(&self, cfg: &AdamWConfig) -> Optimizer {
        Optimizer::new(cfg, &self.param_shapes())
    }
}
