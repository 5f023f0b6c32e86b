//! Pixel encoder, dictionary decoder and the parameter container tying them
//! together.

pub mod cluster;
pub mod decoder;
pub mod encoder;
pub mod similarity;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub use cluster::{cluster_update, softmax_update, Aggregation, ClusterUpdate};
pub use decoder::{DecoderConfig, Dictionary, FeedForward, Level, Projections, StageAssignments};
pub use encoder::{encode_pixels, Encoder, EncoderConfig, PixelFeatures};
pub use similarity::{similarity_logits, Similarity};

use decoder::{level_backward, level_forward, LevelOutput};
use encoder::EncoderCache;

/// Floating-point element type of model tensors.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

/// Per-pixel similarity logits at both levels, `HW x P` and `HW x P~`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub height: usize,
    pub width: usize,
    pub part: Array2<T>,
    pub object: Array2<T>,
}

impl<T: Real> Logits<T> {
    pub fn to_f64(&self) -> Logits<f64> {
        Logits {
            height: self.height,
            width: self.width,
            part: self.part.mapv(|v| v.to_f64().unwrap()),
            object: self.object.mapv(|v| v.to_f64().unwrap()),
        }
    }

    /// `H x W x P` view of the part logits.
    pub fn part_array3(&self) -> Array3<T> {
        let n = self.part.ncols();
        self.part
            .clone()
            .into_shape_with_order((self.height, self.width, n))
            .expect("contiguous logits")
    }

    pub fn object_array3(&self) -> Array3<T> {
        let n = self.object.ncols();
        self.object
            .clone()
            .into_shape_with_order((self.height, self.width, n))
            .expect("contiguous logits")
    }
}

/// Final dictionary state and logits of one decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput<T> {
    pub dictionary: Dictionary<T>,
    pub logits: Logits<T>,
}

/// A forward pass with everything the backward pass needs.
pub struct Forward<T> {
    features: PixelFeatures<T>,
    encoder_cache: EncoderCache<T>,
    part: LevelOutput<T>,
    object: LevelOutput<T>,
}

impl<T: Real> Forward<T> {
    pub fn features(&self) -> &PixelFeatures<T> {
        &self.features
    }

    pub fn part_logits(&self) -> ArrayView2<'_, T> {
        self.part.logits.view()
    }

    pub fn object_logits(&self) -> ArrayView2<'_, T> {
        self.object.logits.view()
    }

    /// Post-decoder part components, `P x D`.
    pub fn part_components(&self) -> ArrayView2<'_, T> {
        self.part.components.view()
    }

    pub fn object_components(&self) -> ArrayView2<'_, T> {
        self.object.components.view()
    }

    pub fn logits(&self) -> Logits<T> {
        Logits {
            height: self.features.height,
            width: self.features.width,
            part: self.part.logits.clone(),
            object: self.object.logits.clone(),
        }
    }

    pub fn output(&self) -> DecoderOutput<T> {
        DecoderOutput {
            dictionary: Dictionary {
                part_components: self.part.components.clone(),
                object_components: self.object.components.clone(),
            },
            logits: self.logits(),
        }
    }

    pub fn assignments(&self) -> (StageAssignments, StageAssignments) {
        (self.part.cache.assignments(), self.object.cache.assignments())
    }
}

/// Loss gradients w.r.t. the forward outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub part_logits: Array2<T>,
    pub object_logits: Array2<T>,
    pub part_components: Array2<T>,
    pub object_components: Array2<T>,
}

impl<T: Real> OutputGrads<T> {
    pub fn zeros(forward: &Forward<T>) -> Self {
        Self {
            part_logits: Array2::zeros(forward.part.logits.dim()),
            object_logits: Array2::zeros(forward.object.logits.dim()),
            part_components: Array2::zeros(forward.part.components.dim()),
            object_components: Array2::zeros(forward.object.components.dim()),
        }
    }
}

pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
    pub decay: bool,
}

/// All learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    /// The learnable dictionaries (pre-decoder state).
    pub dictionary: Dictionary<T>,
    /// One entry when projections are shared, otherwise `[part, object]`.
    pub projections: Vec<Projections<T>>,
    pub part_ffn: Vec<FeedForward<T>>,
    pub object_ffn: Vec<FeedForward<T>>,
}

// Visits every tensor in a fixed order. `$acc` is `as_slice` or
// `as_slice_mut`, with `mut` passed alongside the latter.
macro_rules! visit_tensors {
    ($net:expr, $visit:ident, $acc:ident $(, $m:ident)?) => {{
        let net = $net;
        let shared = net.projections.len() == 1;
        for (i, layer) in (& $($m)? net.encoder.layers).into_iter().enumerate() {
            let t = & $($m)? layer.weight;
            let shape = t.shape().to_vec();
            $visit(format!("encoder.{i}.weight"), shape, t.$acc().unwrap(), true);
            if let Some(t) = & $($m)? layer.bias {
                let shape = t.shape().to_vec();
                $visit(format!("encoder.{i}.bias"), shape, t.$acc().unwrap(), false);
            }
        }
        {
            let t = & $($m)? net.dictionary.part_components;
            let shape = t.shape().to_vec();
            $visit("dict.part".to_string(), shape, t.$acc().unwrap(), true);
            let t = & $($m)? net.dictionary.object_components;
            let shape = t.shape().to_vec();
            $visit("dict.object".to_string(), shape, t.$acc().unwrap(), true);
        }
        for (li, proj) in (& $($m)? net.projections).into_iter().enumerate() {
            let level = if shared { "shared" } else if li == 0 { "part" } else { "object" };
            let t = & $($m)? proj.key;
            let shape = t.shape().to_vec();
            $visit(format!("proj.{level}.key"), shape, t.$acc().unwrap(), true);
            for (s, t) in (& $($m)? proj.values).into_iter().enumerate() {
                let shape = t.shape().to_vec();
                $visit(format!("proj.{level}.{s}.value"), shape, t.$acc().unwrap(), true);
            }
            for (s, t) in (& $($m)? proj.queries).into_iter().enumerate() {
                let shape = t.shape().to_vec();
                $visit(format!("proj.{level}.{s}.query"), shape, t.$acc().unwrap(), false);
            }
        }
        for (level, ffns) in [("part", & $($m)? net.part_ffn), ("object", & $($m)? net.object_ffn)] {
            for (s, f) in ffns.into_iter().enumerate() {
                let t = & $($m)? f.w1;
                let shape = t.shape().to_vec();
                $visit(format!("ffn.{level}.{s}.w1"), shape, t.$acc().unwrap(), true);
                let t = & $($m)? f.b1;
                let shape = t.shape().to_vec();
                $visit(format!("ffn.{level}.{s}.b1"), shape, t.$acc().unwrap(), false);
                let t = & $($m)? f.w2;
                let shape = t.shape().to_vec();
                $visit(format!("ffn.{level}.{s}.w2"), shape, t.$acc().unwrap(), true);
                let t = & $($m)? f.b2;
                let shape = t.shape().to_vec();
                $visit(format!("ffn.{level}.{s}.b2"), shape, t.$acc().unwrap(), false);
            }
        }
    }};
}

impl<T: Real> Network<T> {
    pub fn init(config: &ModelConfig, num_parts: usize, num_objects: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_parts == 0 || num_objects == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.decoder.channels;
        let encoder = Encoder::init(&config.encoder, d, &mut rng);
        let normal = Normal::new(0.0, config.decoder.init_scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut component = |n: usize| Array2::from_shape_fn((n, d), |_| T::from(normal.sample(&mut rng)).unwrap());
        let dictionary = Dictionary {
            part_components: component(num_parts),
            object_components: component(num_objects),
        };
        let levels = if config.decoder.share_projections { 1 } else { 2 };
        let projections = (0..levels)
            .map(|_| Projections::init(&config.decoder, &mut rng))
            .collect();
        let part_ffn = (0..config.decoder.stages)
            .map(|_| FeedForward::init(&config.decoder, &mut rng))
            .collect();
        let object_ffn = (0..config.decoder.stages)
            .map(|_| FeedForward::init(&config.decoder, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            dictionary,
            projections,
            part_ffn,
            object_ffn,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.dictionary.part_components.nrows()
    }

    pub fn num_objects(&self) -> usize {
        self.dictionary.object_components.nrows()
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.num_parts() != taxonomy.num_parts() || self.num_objects() != taxonomy.num_objects() {
            return Err(Error::Shape(format!(
                "model has {} part / {} object components but the taxonomy defines {} / {}",
                self.num_parts(),
                self.num_objects(),
                taxonomy.num_parts(),
                taxonomy.num_objects()
            )));
        }
        Ok(())
    }

    fn projection_index(&self, level: Level) -> usize {
        match level {
            Level::Part => 0,
            Level::Object => self.projections.len() - 1,
        }
    }

    pub fn projections_for(&self, level: Level) -> &Projections<T> {
        &self.projections[self.projection_index(level)]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            dictionary: Dictionary {
                part_components: Array2::zeros(self.dictionary.part_components.dim()),
                object_components: Array2::zeros(self.dictionary.object_components.dim()),
            },
            projections: self.projections.iter().map(Projections::zeros_like).collect(),
            part_ffn: self.part_ffn.iter().map(FeedForward::zeros_like).collect(),
            object_ffn: self.object_ffn.iter().map(FeedForward::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        let mut visit = |name, shape, data, decay| out.push(TensorRef { name, shape, data, decay });
        visit_tensors!(self, visit, as_slice);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        let mut visit = |name, shape, data, decay| out.push(TensorMut { name, shape, data, decay });
        visit_tensors!(self, visit, as_slice_mut, mut);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Same parameters in another float type.
    pub fn convert<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::init(&self.config, self.num_parts(), self.num_objects(), 0)
            .expect("configuration already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::from(*s).unwrap();
            }
        }
        out
    }

    /// Rebuilds a network from named tensors; every tensor must be present
    /// with its expected shape.
    pub fn from_tensors(
        config: &ModelConfig,
        num_parts: usize,
        num_objects: usize,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<T>)>,
    ) -> Result<Self> {
        let mut net = Self::init(config, num_parts, num_objects, 0)?;
        let mut used = 0;
        for dst in net.tensors_mut() {
            let (shape, data) = tensors
                .get(&dst.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", dst.name)))?;
            if *shape != dst.shape || data.len() != dst.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    dst.name, shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(data);
            used += 1;
        }
        if used != tensors.len() {
            let known: Vec<String> = net.tensors().into_iter().map(|t| t.name).collect();
            let extra = tensors.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(net)
    }

    pub fn forward(&self, image: &Array3<f32>) -> Result<Forward<T>> {
        self.forward_with(image, None)
    }

    /// Forward pass, optionally replaying recorded `(part, object)` assignments.
    pub fn forward_with(
        &self,
        image: &Array3<f32>,
        fixed: Option<&(StageAssignments, StageAssignments)>,
    ) -> Result<Forward<T>> {
        let (features, encoder_cache) = self.encoder.forward(image)?;
        let (part, object) = self.decode_levels(&features, fixed);
        Ok(Forward {
            features,
            encoder_cache,
            part,
            object,
        })
    }

    /// Runs the decoder on precomputed features.
    pub fn decode(&self, features: &PixelFeatures<T>) -> Result<DecoderOutput<T>> {
        if features.channels() != self.config.decoder.channels {
            return Err(Error::Shape(format!(
                "features have {} channels, decoder expects {}",
                features.channels(),
                self.config.decoder.channels
            )));
        }
        let (part, object) = self.decode_levels(features, None);
        Ok(DecoderOutput {
            dictionary: Dictionary {
                part_components: part.components,
                object_components: object.components,
            },
            logits: Logits {
                height: features.height,
                width: features.width,
                part: part.logits,
                object: object.logits,
            },
        })
    }

    fn decode_levels(
        &self,
        features: &PixelFeatures<T>,
        fixed: Option<&(StageAssignments, StageAssignments)>,
    ) -> (LevelOutput<T>, LevelOutput<T>) {
        let cfg = &self.config.decoder;
        let f = features.values.view();
        let part = level_forward(
            cfg,
            f,
            self.dictionary.part_components.view(),
            self.projections_for(Level::Part),
            &self.part_ffn,
            fixed.map(|(p, _)| p),
        );
        let object = level_forward(
            cfg,
            f,
            self.dictionary.object_components.view(),
            self.projections_for(Level::Object),
            &self.object_ffn,
            fixed.map(|(_, o)| o),
        );
        (part, object)
    }

    /// Accumulates the parameter gradient of a loss into `grads`.
    pub fn backward(&self, forward: &Forward<T>, output_grads: &OutputGrads<T>, grads: &mut Network<T>) {
        let cfg = &self.config.decoder;
        let f = forward.features.values.view();
        let object_index = self.projection_index(Level::Object);
        let Network {
            encoder: grad_encoder,
            dictionary: grad_dictionary,
            projections: grad_projections,
            part_ffn: grad_part_ffn,
            object_ffn: grad_object_ffn,
            ..
        } = grads;

        let mut grad_features = level_backward(
            cfg,
            f,
            self.projections_for(Level::Part),
            &self.part_ffn,
            &forward.part,
            output_grads.part_logits.view(),
            output_grads.part_components.view(),
            &mut grad_dictionary.part_components,
            &mut grad_projections[0],
            grad_part_ffn,
        );
        grad_features += &level_backward(
            cfg,
            f,
            self.projections_for(Level::Object),
            &self.object_ffn,
            &forward.object,
            output_grads.object_logits.view(),
            output_grads.object_components.view(),
            &mut grad_dictionary.object_components,
            &mut grad_projections[object_index],
            grad_object_ffn,
        );
        self.encoder.backward(
            &forward.encoder_cache,
            forward.features.height,
            forward.features.width,
            grad_features,
            grad_encoder,
        );
    }
}

/// Runs the decoder over precomputed pixel features.
pub fn decoder_forward<T: Real>(features: &PixelFeatures<T>, network: &Network<T>) -> Result<DecoderOutput<T>> {
    network.decode(features)
}
