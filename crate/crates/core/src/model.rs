//! Convolutional encoder, prototype layer and linear head.
//!
//! All forward computation goes through a [`Tape`]; inference simply records
//! constant leaves, so training and evaluation share one code path and
//! produce bit-identical values.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derived_rng, STREAM_INIT, STREAM_PROTOTYPE};
use crate::tensor::{bilinear_upsample, conv_output_size, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv layer; the last one is the latent depth D.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub n_classes: usize,
    pub prototypes_per_class: usize,
    pub prototype_height: usize,
    pub prototype_width: usize,
    /// Apply ReLU after the last conv layer too.
    pub latent_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            padding: 1,
            n_classes: 2,
            prototypes_per_class: 1,
            prototype_height: 1,
            prototype_width: 1,
            latent_relu: true,
        }
    }
}

impl ModelConfig {
    /// Spatial size of the latent grid.
    pub fn latent_size(&self) -> Option<usize> {
        self.channels.iter().try_fold(self.image_size, |s, _| {
            conv_output_size(s, self.kernel, self.stride, self.padding)
        })
    }

    pub fn latent_depth(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn n_prototypes(&self) -> usize {
        self.n_classes * self.prototypes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("conv channels {:?} must be non-empty and positive", self.channels));
        }
        if self.in_channels == 0 || self.n_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        if self.prototypes_per_class == 0 {
            return bad("every class needs at least one prototype".into());
        }
        match self.latent_size() {
            Some(s) if s >= 2 => {}
            other => return bad(format!("latent grid {other:?} is smaller than 2×2")),
        }
        let s = self.latent_size().unwrap();
        if self.prototype_height == 0
            || self.prototype_width == 0
            || self.prototype_height > s
            || self.prototype_width > s
        {
            return bad(format!(
                "prototype window {}×{} does not fit the {s}×{s} latent grid",
                self.prototype_height, self.prototype_width
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Provenance {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub distance_before: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// m×D×ph×pw
    pub vectors: Tensor,
    pub class_of: Vec<usize>,
    pub provenance: Vec<Option<Provenance>>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.vectors.len() / self.len().max(1)
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        let n = self.patch_len();
        &self.vectors.data()[j * n..(j + 1) * n]
    }

    pub fn set_vector(&mut self, j: usize, v: &[f64]) {
        let n = self.patch_len();
        self.vectors.data_mut()[j * n..(j + 1) * n].copy_from_slice(v);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// classes×m
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Prototypes,
    Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub prototypes: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        prototypes: true,
        head: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        prototypes: false,
        head: false,
    };
    pub const HEAD: Trainable = Trainable {
        encoder: false,
        prototypes: false,
        head: true,
    };

    fn has(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Prototypes => self.prototypes,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Bias-free conv kernels, out×in×k×k. Without biases an all-zero
    /// region encodes to the zero vector.
    pub layers: Vec<Tensor>,
    pub prototypes: PrototypeBank,
    pub head: LinearHead,
}

/// Tape handles for every parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub params: Vec<Var>,
    n_layers: usize,
}

impl ModelVars {
    pub fn prototypes(&self) -> Var {
        self.params[self.n_layers]
    }

    fn head(&self) -> (Var, Var) {
        (self.params[self.n_layers + 1], self.params[self.n_layers + 2])
    }
}

/// Per-sample tape outputs.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub latent: Var,
    /// m×H'×W' cosine distances.
    pub maps: Var,
    /// [m] min-pooled distances g.
    pub scores: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    /// B×m
    pub scores: Var,
    /// B×classes
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub latent: Tensor,
    pub maps: Tensor,
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Forward {
    pub fn similarities(&self) -> Vec<f64> {
        self.scores.iter().map(|g| 1.0 - g).collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Model {
    /// Encoder and head from the init stream, prototypes uniform on [0,1)
    /// from the prototype stream. Prototypes are expected to be pushed
    /// before use.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = derived_rng(seed, STREAM_INIT, 0);
        let mut layers = Vec::with_capacity(config.channels.len());
        let mut cin = config.in_channels;
        for &cout in &config.channels {
            let fan_in = (cin * config.kernel * config.kernel) as f64;
            let bound = 1.0 / fan_in.sqrt();
            layers.push(uniform(&mut rng, &[cout, cin, config.kernel, config.kernel], bound));
            cin = cout;
        }
        let m = config.n_prototypes();
        let class_of: Vec<usize> = (0..m).map(|j| j / config.prototypes_per_class).collect();
        let mut prng = derived_rng(seed, STREAM_PROTOTYPE, 0);
        let vectors = Tensor::from_fn(
            &[m, config.latent_depth(), config.prototype_height, config.prototype_width],
            |_| prng.gen::<f64>(),
        );
        let head = Self::default_head(config.n_classes, &class_of);
        Ok(Model {
            layers,
            prototypes: PrototypeBank {
                vectors,
                class_of,
                provenance: vec![None; m],
            },
            head,
            config,
        })
    }

    /// +1 from own-class prototypes, −0.5 from the others, zero bias.
    pub fn default_head(n_classes: usize, class_of: &[usize]) -> LinearHead {
        let m = class_of.len();
        LinearHead {
            weight: Tensor::from_fn(&[n_classes, m], |i| {
                if class_of[i % m] == i / m {
                    1.0
                } else {
                    -0.5
                }
            }),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    pub fn n_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn latent_size(&self) -> usize {
        self.config.latent_size().expect("validated")
    }

    /// Every parameter in a fixed order: conv kernels, prototypes, head
    /// weight, head bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.layers.iter().collect();
        v.push(&self.prototypes.vectors);
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.layers.iter_mut().collect();
        v.push(&mut self.prototypes.vectors);
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Encoder; self.layers.len()];
        g.push(ParamGroup::Prototypes);
        g.push(ParamGroup::Head);
        g.push(ParamGroup::Head);
        g
    }

    /// Little-endian bytes of the encoder parameters, for freeze checks.
    pub fn encoder_bytes(&self) -> Vec<u8> {
        self.layers.iter().flat_map(|l| l.to_le_bytes()).collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: Trainable) -> ModelVars {
        let groups = self.param_groups();
        let params = self
            .params()
            .into_iter()
            .zip(groups)
            .map(|(t, g)| tape.leaf(t.clone(), trainable.has(g)))
            .collect();
        ModelVars {
            params,
            n_layers: self.layers.len(),
        }
    }

    /// Binds existing tape variables (in [`Model::params`] order) as this
    /// model's parameters.
    pub fn bind(&self, params: Vec<Var>) -> Result<ModelVars> {
        if params.len() != self.params().len() {
            return Err(ModelError::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                self.params().len(),
                params.len()
            )));
        }
        Ok(ModelVars {
            params,
            n_layers: self.layers.len(),
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.shape() != [c.in_channels, c.image_size, c.image_size] {
            return Err(ModelError::Tensor(TensorError::InvalidShape(format!(
                "expected {}×{}×{} input, got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                x.shape()
            ))));
        }
        Ok(())
    }

    pub fn record_encoder(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, &w) in vars.params[..n].iter().enumerate() {
            h = tape.conv2d(h, w, self.config.stride, self.config.padding)?;
            if i + 1 < n || self.config.latent_relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Prototype layer on a recorded latent.
    pub fn record_prototype_layer(&self, tape: &mut Tape, vars: &ModelVars, latent: Var) -> Result<SampleVars> {
        let maps = tape.cosine_distance_map(latent, vars.prototypes())?;
        let scores = tape.min_pool(maps)?;
        Ok(SampleVars { latent, maps, scores })
    }

    pub fn record_sample(&self, tape: &mut Tape, vars: &ModelVars, x: &Tensor, input_grad: bool) -> Result<SampleVars> {
        self.check_input(x)?;
        let xv = tape.leaf(x.clone(), input_grad);
        let latent = self.record_encoder(tape, vars, xv)?;
        self.record_prototype_layer(tape, vars, latent)
    }

    /// Head on stacked scores: logits = (1 − g)·Wᵀ + b.
    pub fn record_head(&self, tape: &mut Tape, vars: &ModelVars, scores: Var) -> Result<Var> {
        let (w, b) = vars.head();
        let neg = tape.scale(scores, -1.0);
        let sims = tape.shift(neg, 1.0);
        let wt = tape.transpose(w)?;
        let z = tape.matmul(sims, wt)?;
        Ok(tape.row_bias(z, b)?)
    }

    pub fn record_batch(&self, tape: &mut Tape, vars: &ModelVars, xs: &[&Tensor]) -> Result<BatchVars> {
        let per: Vec<Var> = xs
            .iter()
            .map(|x| self.record_sample(tape, vars, x, false).map(|s| s.scores))
            .collect::<Result<_>>()?;
        let scores = tape.stack(&per)?;
        let logits = self.record_head(tape, vars, scores)?;
        Ok(BatchVars { scores, logits })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        let s = self.record_sample(&mut tape, &vars, x, false)?;
        let m = self.n_prototypes();
        let scores2 = tape.reshape(s.scores, &[1, m])?;
        let logits = self.record_head(&mut tape, &vars, scores2)?;
        Ok(Forward {
            latent: tape.value(s.latent).clone(),
            maps: tape.value(s.maps).clone(),
            scores: tape.value(s.scores).data().to_vec(),
            logits: tape.value(logits).data().to_vec(),
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        self.check_input(x)?;
        let xv = tape.constant(x.clone());
        let z = self.record_encoder(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Prototype scores g for an already computed latent.
    pub fn scores_from_latent(&self, latent: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        let z = tape.constant(latent.clone());
        let s = self.record_prototype_layer(&mut tape, &vars, z)?;
        Ok(tape.value(s.scores).data().to_vec())
    }

    /// Logits from a score vector g.
    pub fn logits_from_scores(&self, scores: &[f64]) -> Result<Vec<f64>> {
        let m = self.n_prototypes();
        if scores.len() != m {
            return Err(ModelError::InvalidArgument(format!("{} scores for {m} prototypes", scores.len())));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        let g = tape.constant(Tensor::new(vec![1, m], scores.to_vec())?);
        let l = self.record_head(&mut tape, &vars, g)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Similarity map of prototype `j` (1 − distance) upsampled to the input
    /// resolution.
    pub fn activation_map(&self, x: &Tensor, j: usize) -> Result<Tensor> {
        let f = self.forward(x)?;
        self.activation_map_from(&f, j)
    }

    pub fn activation_map_from(&self, f: &Forward, j: usize) -> Result<Tensor> {
        let m = self.n_prototypes();
        if j >= m {
            return Err(ModelError::InvalidArgument(format!("prototype {j} out of range for {m}")));
        }
        let (h, w) = (f.maps.shape()[1], f.maps.shape()[2]);
        let sim = Tensor::new(vec![h, w], f.maps.data()[j * h * w..(j + 1) * h * w].iter().map(|d| 1.0 - d).collect())?;
        let s = self.config.image_size;
        Ok(bilinear_upsample(&sim, (s, s))?)
    }
}

/// Cosine distance with the model's conventions.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ModelError::Tensor(TensorError::InvalidShape(format!(
            "cosine_distance of lengths {} and {}",
            a.len(),
            b.len()
        ))));
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![a.len(), 1, 1], a.to_vec())?);
    let p = tape.constant(Tensor::new(vec![1, b.len(), 1, 1], b.to_vec())?);
    let d = tape.cosine_distance_map(z, p)?;
    Ok(tape.value(d).item())
}
