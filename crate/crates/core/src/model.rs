//! The prototypical part network `h ∘ g_p ∘ f`: a convolutional backbone `f`
//! ending in two 1×1 add-on layers, a prototype layer `g_p` that scores how
//! close each prototype comes to some latent patch, and a bias-free linear
//! last layer `h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, PoolMode};
use crate::projection::ProjectionRecord;
use crate::tensor::Tensor;

/// Default ε in the similarity function; `ln(1/ε) ≈ 9.21` is the largest
/// possible score.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// One backbone block: convolution, ReLU, then an optional max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(window, stride)` of the max-pool following the convolution.
    pub pool: Option<(usize, usize)>,
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel: usize, pool: Option<(usize, usize)>) -> Self {
        ConvBlock {
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub blocks: Vec<ConvBlock>,
    /// Channel count `D` of both add-on layers and therefore of the latent.
    pub latent_depth: usize,
    pub proto_height: usize,
    pub proto_width: usize,
    pub num_classes: usize,
    /// `m_k` for every class.
    pub prototypes_per_class: Vec<usize>,
    pub epsilon: f64,
}

impl ModelConfig {
    /// Three 3×3 blocks (16/32/64 channels, 2×2 pooling) and a 64-deep latent.
    /// A 32×32 input gives a 7×7 latent; the last pool uses stride 1.
    pub fn desk(num_classes: usize, prototypes_per_class: usize) -> Self {
        ModelConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            blocks: vec![
                ConvBlock::new(16, 3, Some((2, 2))),
                ConvBlock::new(32, 3, Some((2, 2))),
                ConvBlock::new(64, 3, Some((2, 1))),
            ],
            latent_depth: 64,
            proto_height: 1,
            proto_width: 1,
            num_classes,
            prototypes_per_class: vec![prototypes_per_class; num_classes],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes_per_class.iter().sum()
    }

    /// Class of every prototype, in prototype order: class 0's block first.
    pub fn allocation(&self) -> Vec<usize> {
        self.prototypes_per_class
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect()
    }

    /// Latent spatial size `(H, W)` produced by the backbone.
    pub fn latent_size(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, b) in self.blocks.iter().enumerate() {
            let step = |len: usize| -> Option<usize> {
                let len = kernels::sliding_extent(len, b.kernel, b.stride, b.padding)?;
                match b.pool {
                    Some((win, st)) => kernels::sliding_extent(len, win, st, 0),
                    None => Some(len),
                }
            };
            match (step(h), step(w)) {
                (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "backbone block {i} does not fit its {h}x{w} input"
                    )))
                }
            }
        }
        Ok((h, w))
    }

    /// Spatial size of each distance / activation map.
    pub fn map_size(&self) -> Result<(usize, usize)> {
        let (h, w) = self.latent_size()?;
        Ok((h + 1 - self.proto_height, w + 1 - self.proto_width))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return bad("input extents must be positive".into());
        }
        if self.latent_depth == 0 || self.proto_height == 0 || self.proto_width == 0 {
            return bad("latent depth and prototype extents must be positive".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return bad(format!("backbone block {i} has a zero extent"));
            }
            if let Some((win, st)) = b.pool {
                if win == 0 || st == 0 {
                    return bad(format!("backbone block {i} has a zero pool extent"));
                }
            }
        }
        if self.num_classes == 0 {
            return bad("at least one class is required".into());
        }
        if self.prototypes_per_class.len() != self.num_classes {
            return bad(format!(
                "{} prototype counts given for {} classes",
                self.prototypes_per_class.len(),
                self.num_classes
            ));
        }
        if self.prototypes_per_class.contains(&0) {
            return bad("every class needs at least one prototype".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        let (h, w) = self.latent_size()?;
        if self.proto_height > h || self.proto_width > w {
            return bad(format!(
                "latent {h}x{w} is smaller than the {}x{} prototype",
                self.proto_height, self.proto_width
            ));
        }
        Ok(())
    }

    /// Layer-by-layer description of the backbone including the add-on layers.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.blocks.len() + 2);
        let mut in_ch = self.input_channels;
        for b in &self.blocks {
            specs.push(LayerSpec {
                in_channels: in_ch,
                out_channels: b.out_channels,
                kernel: b.kernel,
                stride: b.stride,
                padding: b.padding,
                activation: Activation::Relu,
                pool: b.pool,
            });
            in_ch = b.out_channels;
        }
        for activation in [Activation::Relu, Activation::Sigmoid] {
            specs.push(LayerSpec {
                in_channels: in_ch,
                out_channels: self.latent_depth,
                kernel: 1,
                stride: 1,
                padding: 0,
                activation,
                pool: None,
            });
            in_ch = self.latent_depth;
        }
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub pool: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    /// `kernel × kernel × in × out`.
    pub filters: Tensor,
    pub bias: Tensor,
}

/// The convolutional feature extractor `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<ConvLayer>,
}

impl Backbone {
    /// He-uniform filters, zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        let layers = specs
            .iter()
            .map(|&spec| {
                let fan_in = spec.kernel * spec.kernel * spec.in_channels;
                let bound = (6.0 / fan_in as f64).sqrt();
                let shape = [
                    spec.kernel,
                    spec.kernel,
                    spec.in_channels,
                    spec.out_channels,
                ];
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                ConvLayer {
                    spec,
                    filters: Tensor::new(shape.to_vec(), data).expect("filter shape"),
                    bias: Tensor::zeros(&[spec.out_channels]),
                }
            })
            .collect();
        Backbone { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = kernels::conv2d(&h, &layer.filters, layer.spec.stride, layer.spec.padding)?;
            h = kernels::bias_add(&h, &layer.bias)?;
            let f = match layer.spec.activation {
                Activation::Relu => kernels::relu,
                Activation::Sigmoid => kernels::sigmoid,
            };
            h.data_mut().iter_mut().for_each(|v| *v = f(*v));
            if let Some((size, stride)) = layer.spec.pool {
                h = kernels::max_pool(&h, PoolMode::Window { size, stride })?.0;
            }
        }
        Ok(h)
    }

    /// Registers every filter and bias as a leaf, in layer order.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.filters.clone(), requires_grad),
                    tape.leaf(l.bias.clone(), requires_grad),
                )
            })
            .collect()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, &(filters, bias)) in self.layers.iter().zip(params) {
            h = tape.conv2d(h, filters, layer.spec.stride, layer.spec.padding)?;
            h = tape.bias_add(h, bias)?;
            h = tape.elementwise(h, layer.spec.activation);
            if let Some((size, stride)) = layer.spec.pool {
                h = tape.max_pool(h, PoolMode::Window { size, stride })?;
            }
        }
        Ok(h)
    }

    /// All parameters as a flat list (filters then bias, per layer).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.filters, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.filters, &mut l.bias])
            .collect()
    }

    pub fn bit_eq(&self, other: &Backbone) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.spec == b.spec && a.filters.bit_eq(&b.filters) && a.bias.bit_eq(&b.bias)
            })
    }
}

/// `ln((d² + 1) / (d² + ε))` for a squared distance `d² ≥ 0`.
pub fn prototype_activation(squared_distance: f64, epsilon: f64) -> f64 {
    ((squared_distance + 1.0) / (squared_distance + epsilon)).ln()
}

/// Last-layer weights with 1 between a prototype and its own class logit and
/// −0.5 everywhere else.
pub fn init_last_layer(allocation: &[usize], num_classes: usize) -> Tensor {
    let m = allocation.len();
    let mut w = vec![-0.5; num_classes * m];
    for (j, &k) in allocation.iter().enumerate() {
        w[k * m + j] = 1.0;
    }
    Tensor::new(vec![num_classes, m], w).expect("K x m")
}

/// Everything computed on the way to the logits for one image.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub min_distances: Vec<f64>,
    pub distance_maps: Vec<Tensor>,
    pub latent: Tensor,
}

impl ModelOutput {
    pub fn predicted(&self) -> usize {
        kernels::argmax(&self.logits)
    }
}

/// Tape handles for every trainable tensor of a [`ProtoPNet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub backbone: Vec<(Var, Var)>,
    pub prototypes: Vec<Var>,
    pub last_layer: Var,
}

/// Tape handles for the intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct TapeOutput {
    pub latent: Var,
    pub distance_maps: Vec<Var>,
    /// Vector of the `m` per-prototype minimum distances.
    pub min_distances: Var,
    pub scores: Var,
    pub logits: Var,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub prototypes: bool,
    pub last_layer: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        backbone: true,
        prototypes: true,
        last_layer: true,
    };
    pub const NONE: Trainable = Trainable {
        backbone: false,
        prototypes: false,
        last_layer: false,
    };
    /// Stage-1 groups: everything before the last layer.
    pub const FEATURES: Trainable = Trainable {
        backbone: true,
        prototypes: true,
        last_layer: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoPNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// `m` tensors of shape `H1 × W1 × D`.
    pub prototypes: Vec<Tensor>,
    /// Class of every prototype.
    pub allocation: Vec<usize>,
    /// `K × m`, no bias.
    pub last_layer: Tensor,
    /// Seed the parameters were initialised from.
    pub seed: u64,
    /// Records of the most recent prototype projection, if any.
    pub projection: Vec<ProjectionRecord>,
}

impl ProtoPNet {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&config.layer_specs(), &mut rng);
        let proto_shape = [config.proto_height, config.proto_width, config.latent_depth];
        let proto_len: usize = proto_shape.iter().product();
        let prototypes = (0..config.num_prototypes())
            .map(|_| {
                let data = (0..proto_len).map(|_| rng.gen::<f64>()).collect();
                Tensor::new(proto_shape.to_vec(), data).expect("prototype shape")
            })
            .collect();
        let allocation = config.allocation();
        let last_layer = init_last_layer(&allocation, config.num_classes);
        Ok(ProtoPNet {
            config,
            backbone,
            prototypes,
            allocation,
            last_layer,
            seed,
            projection: Vec::new(),
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [
            self.config.input_height,
            self.config.input_width,
            self.config.input_channels,
        ];
        if x.shape() != want {
            return Err(Error::InvalidShape(format!(
                "expected a {want:?} image, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// `z = f(x)`.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.backbone.forward(x)
    }

    /// Distance maps and similarity scores of every prototype against `z`.
    pub fn prototype_forward(&self, z: &Tensor) -> Result<PrototypeForward> {
        let mut maps = Vec::with_capacity(self.prototypes.len());
        let mut mins = Vec::with_capacity(self.prototypes.len());
        for p in &self.prototypes {
            let map = kernels::l2_distance_map(z, p)?;
            mins.push(map.data()[kernels::argmin(map.data())]);
            maps.push(map);
        }
        let scores = mins
            .iter()
            .map(|&d| prototype_activation(d, self.config.epsilon))
            .collect();
        Ok(PrototypeForward {
            scores,
            min_distances: mins,
            distance_maps: maps,
        })
    }

    /// Logits from a latent.
    pub fn logits_from_scores(&self, scores: &[f64]) -> Vec<f64> {
        kernels::linear(&Tensor::from_vec(scores.to_vec()), &self.last_layer)
            .expect("last layer matches prototype count")
            .into_data()
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let latent = self.latent(x)?;
        let pf = self.prototype_forward(&latent)?;
        let logits = self.logits_from_scores(&pf.scores);
        Ok(ModelOutput {
            logits,
            scores: pf.scores,
            min_distances: pf.min_distances,
            distance_maps: pf.distance_maps,
            latent,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.forward(x)?.predicted())
    }

    pub fn register(&self, tape: &mut Tape, trainable: Trainable) -> ParamVars {
        let backbone = self.backbone.register(tape, trainable.backbone);
        let prototypes = self
            .prototypes
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable.prototypes))
            .collect();
        let last_layer = tape.leaf(self.last_layer.clone(), trainable.last_layer);
        ParamVars {
            backbone,
            prototypes,
            last_layer,
        }
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        x: Var,
    ) -> Result<TapeOutput> {
        let latent = self.backbone.forward_on_tape(tape, &params.backbone, x)?;
        let mut distance_maps = Vec::with_capacity(params.prototypes.len());
        let mut mins = Vec::with_capacity(params.prototypes.len());
        for &p in &params.prototypes {
            let map = tape.l2_distance_map(latent, p)?;
            mins.push(tape.min_all(map));
            distance_maps.push(map);
        }
        let min_distances = tape.stack(&mins)?;
        let scores = tape.prototype_activation(min_distances, self.config.epsilon);
        let logits = tape.linear(scores, params.last_layer)?;
        Ok(TapeOutput {
            latent,
            distance_maps,
            min_distances,
            scores,
            logits,
        })
    }

    /// Indices of the prototypes allocated to `class`.
    pub fn prototypes_of(&self, class: usize) -> Vec<usize> {
        (0..self.allocation.len())
            .filter(|&j| self.allocation[j] == class)
            .collect()
    }

    pub fn prototypes_bit_eq(&self, other: &ProtoPNet) -> bool {
        self.prototypes.len() == other.prototypes.len()
            && self
                .prototypes
                .iter()
                .zip(&other.prototypes)
                .all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeForward {
    pub scores: Vec<f64>,
    pub min_distances: Vec<f64>,
    pub distance_maps: Vec<Tensor>,
}
