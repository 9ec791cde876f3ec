//! The harmonization network: a fully convolutional encoder-decoder over the
//! image concatenated with its foreground mask, with optional backbone features
//! injected at one encoder stage and an attention-blend output head.
//!
//! With the blend head on, the decoder features `x` drive two 1×1 convolutions,
//! `rgb = d_rgb(x)` and `M_A = sigmoid(d_m(x))`, and the output is
//! `image · (1 − M_A) + rgb · M_A`. With it off, the output is `rgb` directly.

mod backbone;
mod features;
mod layers;
mod stem;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{inject_features, BackboneKind, ToyBackbone, TOY_BACKBONE_STRIDE};
pub use features::{
    decode_features, encode_features, feature_path, load_precomputed_features,
    write_precomputed_features, FeatureStore, FEATURE_EXTENSION, FEATURE_MAGIC,
};
pub use layers::Conv;
pub use stem::MaskFusionStem;

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Axis, Error, Result};
use crate::objectives::check_mask_range;
use crate::tensor::{Shape, Tensor};
use layers::Init;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub input_size: usize,
    /// Channels of the first encoder stage; stage `i` has `base_width · 2^i`.
    pub base_width: usize,
    pub depth: usize,
    pub skip_connections: bool,
    pub blend_head: bool,
    pub backbone: BackboneKind,
    /// Adds the zero-initialized mask branch to the backbone stem.
    pub foreground_aware_backbone: bool,
    /// Encoder stage receiving backbone features; `None` picks the stage whose
    /// resolution matches the backbone stride.
    pub injection_stage: Option<usize>,
    pub precomputed_channels: usize,
    pub precomputed_stride: usize,
    pub leaky_slope: f64,
    /// Initial bias of the attention conv. Negative starts the blend near
    /// pass-through (`sigmoid(-4) ≈ 0.018`), so early training is not dominated by
    /// random predictions on the background.
    pub attention_bias_init: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            input_size: 64,
            base_width: 16,
            depth: 4,
            skip_connections: true,
            blend_head: true,
            backbone: BackboneKind::Toy,
            foreground_aware_backbone: true,
            injection_stage: None,
            precomputed_channels: 64,
            precomputed_stride: 4,
            leaky_slope: 0.2,
            attention_bias_init: -4.0,
        }
    }
}

impl ArchitectureConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn backbone_channels(&self) -> Option<usize> {
        match self.backbone {
            BackboneKind::None => None,
            BackboneKind::Toy => Some(2 * self.base_width),
            BackboneKind::Precomputed => Some(self.precomputed_channels),
        }
    }

    pub fn backbone_stride(&self) -> Option<usize> {
        match self.backbone {
            BackboneKind::None => None,
            BackboneKind::Toy => Some(TOY_BACKBONE_STRIDE),
            BackboneKind::Precomputed => Some(self.precomputed_stride),
        }
    }

    /// Resolved injection stage, or `None` without a backbone.
    pub fn resolved_injection_stage(&self) -> Option<usize> {
        let stride = self.backbone_stride()?;
        Some(self.injection_stage.unwrap_or_else(|| {
            let log2 = (stride.max(1) as f64).log2().round() as usize;
            log2.min(self.depth.saturating_sub(1))
        }))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push("depth must be >= 1".to_string());
        }
        if self.base_width == 0 {
            problems.push("base_width must be >= 1".to_string());
        }
        if self.input_size == 0 {
            problems.push("input_size must be >= 1".to_string());
        } else if self.depth < usize::BITS as usize && self.input_size % (1 << self.depth) != 0 {
            problems.push(format!(
                "input_size {} is not divisible by 2^depth = {}",
                self.input_size,
                1usize << self.depth
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            problems.push(format!("leaky_slope {} not in (0, 1)", self.leaky_slope));
        }
        if !self.attention_bias_init.is_finite() {
            problems.push(format!(
                "attention_bias_init {} is not finite",
                self.attention_bias_init
            ));
        }
        if let Some(stage) = self.injection_stage {
            if stage >= self.depth {
                problems.push(format!(
                    "injection_stage {stage} must be < depth {}",
                    self.depth
                ));
            }
        }
        match self.backbone {
            BackboneKind::Toy if self.input_size % TOY_BACKBONE_STRIDE != 0 => problems
                .push(format!(
                "input_size {} is not divisible by the toy backbone stride {TOY_BACKBONE_STRIDE}",
                self.input_size
            )),
            BackboneKind::Precomputed => {
                if self.precomputed_channels == 0 {
                    problems.push("precomputed_channels must be >= 1".to_string());
                }
                if self.precomputed_stride == 0 {
                    problems.push("precomputed_stride must be >= 1".to_string());
                }
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn activation(&self) -> Activation {
        Activation::LeakyRelu {
            alpha: self.leaky_slope,
        }
    }
}

/// The two 1×1 output convolutions.
#[derive(Debug, Clone, Copy)]
pub struct BlendHead {
    pub d_rgb: Conv,
    /// Absent when the blend head is disabled.
    pub d_m: Option<Conv>,
}

#[derive(Debug, Clone)]
enum Backbone {
    Toy(ToyBackbone),
    Precomputed,
}

/// What feeds the backbone branch during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub enum BackboneInput<'a> {
    /// The toy backbone sees the same mask as the encoder.
    #[default]
    SameMask,
    /// The toy backbone sees this mask instead (the encoder still sees the real one).
    Mask(&'a Tensor),
    /// Precomputed feature maps, batch-aligned with the image.
    Features(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub prediction: Var,
    /// `M_A`; all ones when the blend head is disabled.
    pub attention: Var,
    pub rgb: Var,
    /// Decoder output `x` fed to the head.
    pub features: Var,
    pub bottleneck: Var,
    pub backbone: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct HarmonizationModel {
    config: ArchitectureConfig,
    params: ParamStore,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    head: BlendHead,
    backbone: Option<Backbone>,
}

/// Builds a model with deterministic He-uniform initialization from `seed`.
/// Biases start at zero and any mask-fusion branch starts at zero weights.
pub fn build_model(config: &ArchitectureConfig, seed: u64) -> Result<HarmonizationModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let injection = config.resolved_injection_stage();
    let bb_channels = config.backbone_channels().unwrap_or(0);

    let backbone = match config.backbone {
        BackboneKind::None => None,
        BackboneKind::Precomputed => Some(Backbone::Precomputed),
        BackboneKind::Toy => {
            let width = config.base_width;
            let rgb_conv = Conv::new(
                &mut params,
                &mut rng,
                "backbone.stem.rgb",
                3,
                width,
                3,
                2,
                Init::HeUniform,
            )?;
            let mask_conv = if config.foreground_aware_backbone {
                Some(Conv::new(
                    &mut params,
                    &mut rng,
                    "backbone.stem.mask",
                    1,
                    width,
                    3,
                    2,
                    Init::Zero,
                )?)
            } else {
                None
            };
            let conv2 = Conv::new(
                &mut params,
                &mut rng,
                "backbone.conv2",
                width,
                2 * width,
                3,
                2,
                Init::HeUniform,
            )?;
            Some(Backbone::Toy(ToyBackbone {
                stem: MaskFusionStem {
                    rgb_conv,
                    mask_conv,
                },
                conv2,
            }))
        }
    };

    let mut encoder = Vec::with_capacity(config.depth);
    for stage in 0..config.depth {
        let mut in_c = if stage == 0 {
            4
        } else {
            config.stage_channels(stage - 1)
        };
        if injection == Some(stage) {
            in_c += bb_channels;
        }
        encoder.push(Conv::new(
            &mut params,
            &mut rng,
            &format!("encoder.{stage}"),
            in_c,
            config.stage_channels(stage),
            3,
            1,
            Init::HeUniform,
        )?);
    }

    let mut decoder = vec![None; config.depth];
    for level in (0..config.depth).rev() {
        let from_below = config.stage_channels((level + 1).min(config.depth - 1));
        let skip = if config.skip_connections {
            config.stage_channels(level)
        } else {
            0
        };
        decoder[level] = Some(Conv::new(
            &mut params,
            &mut rng,
            &format!("decoder.{level}"),
            from_below + skip,
            config.stage_channels(level),
            3,
            1,
            Init::HeUniform,
        )?);
    }
    let decoder = decoder
        .into_iter()
        .map(|d| d.expect("every level built"))
        .collect();

    let c = config.base_width;
    let d_rgb = Conv::new(
        &mut params,
        &mut rng,
        "head.rgb",
        c,
        3,
        1,
        1,
        Init::HeUniform,
    )?;
    let d_m = if config.blend_head {
        let conv = Conv::new(
            &mut params,
            &mut rng,
            "head.mask",
            c,
            1,
            1,
            1,
            Init::HeUniform,
        )?;
        let bias = &mut params.get_mut(conv.bias).tensor;
        *bias = Tensor::full(bias.shape(), config.attention_bias_init);
        Some(conv)
    } else {
        None
    };

    Ok(HarmonizationModel {
        config: config.clone(),
        params,
        encoder,
        decoder,
        head: BlendHead { d_rgb, d_m },
        backbone,
    })
}

impl HarmonizationModel {
    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blend_head(&self) -> &BlendHead {
        &self.head
    }

    pub fn backbone_stem(&self) -> Option<&MaskFusionStem> {
        match &self.backbone {
            Some(Backbone::Toy(t)) => Some(&t.stem),
            _ => None,
        }
    }

    /// Parameters of the (nominally pre-trained) backbone, excluding the new
    /// mask branch of its stem.
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        match &self.backbone {
            Some(Backbone::Toy(t)) => t
                .stem
                .rgb_conv
                .ids()
                .into_iter()
                .chain(t.conv2.ids())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn set_backbone_lr_multiplier(&mut self, multiplier: f64) -> Result<()> {
        if !(multiplier > 0.0 && multiplier.is_finite()) {
            return Err(Error::argument(
                "backbone_lr_multiplier",
                format!("must be positive, got {multiplier}"),
            ));
        }
        for id in self.backbone_param_ids() {
            self.params.get_mut(id).lr_multiplier = multiplier;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, image: &Tensor, mask: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(tape, image, mask, BackboneInput::SameMask)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        mask: &Tensor,
        backbone_input: BackboneInput<'_>,
    ) -> Result<ForwardOutput> {
        const OP: &str = "forward";
        let is = image.shape();
        let ms = mask.shape();
        if is.channels != 3 {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Channel,
                expected: 3,
                actual: is.channels,
            });
        }
        is.with_channels(1).expect_eq(&ms, OP)?;
        check_mask_range(mask)?;
        let granularity = 1usize << self.config.depth;
        for (axis, len) in [(Axis::Height, is.height), (Axis::Width, is.width)] {
            if len % granularity != 0 {
                return Err(Error::Dimension {
                    op: OP,
                    axis,
                    expected: len.next_multiple_of(granularity),
                    actual: len,
                });
            }
        }

        let store = &self.params;
        let act = self.config.activation();
        let image_v = tape.constant(image.clone());
        let mask_v = tape.constant(mask.clone());

        let backbone = match (&self.backbone, backbone_input) {
            (None, _) => None,
            (Some(Backbone::Toy(toy)), input) => {
                let bb_mask = match input {
                    BackboneInput::Mask(m) => {
                        ms.expect_eq(&m.shape(), "backbone mask")?;
                        check_mask_range(m)?;
                        tape.constant(m.clone())
                    }
                    BackboneInput::SameMask => mask_v,
                    BackboneInput::Features(_) => {
                        return Err(Error::argument(
                            OP,
                            "precomputed features given to a toy-backbone model",
                        ))
                    }
                };
                Some(toy.forward(tape, store, image_v, bb_mask, act)?)
            }
            (Some(Backbone::Precomputed), BackboneInput::Features(f)) => {
                let fs = f.shape();
                if fs.channels != self.config.precomputed_channels {
                    return Err(Error::Dimension {
                        op: "backbone features",
                        axis: Axis::Channel,
                        expected: self.config.precomputed_channels,
                        actual: fs.channels,
                    });
                }
                Some(tape.constant(f.clone()))
            }
            (Some(Backbone::Precomputed), _) => {
                return Err(Error::argument(
                    OP,
                    "model expects precomputed backbone features",
                ))
            }
        };
        let injection = self.config.resolved_injection_stage();

        let mut x = tape.concat_channels(image_v, mask_v)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (stage, conv) in self.encoder.iter().enumerate() {
            if let (Some(feat), Some(at)) = (backbone, injection) {
                if at == stage {
                    x = inject_features(tape, x, feat)?;
                }
            }
            let y = conv.forward(tape, store, x)?;
            let y = tape.activation(y, act)?;
            skips.push(y);
            x = tape.max_pool2d(y, 2, 2)?;
        }
        let bottleneck = x;
        for level in (0..self.config.depth).rev() {
            x = tape.upsample_nearest(x, 2)?;
            if self.config.skip_connections {
                x = tape.concat_channels(x, skips[level])?;
            }
            x = self.decoder[level].forward(tape, store, x)?;
            x = tape.activation(x, act)?;
        }
        let features = x;

        let rgb = self.head.d_rgb.forward(tape, store, features)?;
        let (prediction, attention) = match &self.head.d_m {
            Some(d_m) => {
                let logits = d_m.forward(tape, store, features)?;
                let attention = tape.activation(logits, Activation::Sigmoid)?;
                let keep = tape.scalar_affine(attention, -1.0, 1.0);
                let kept = tape.mul(image_v, keep)?;
                let painted = tape.mul(rgb, attention)?;
                (tape.add(kept, painted)?, attention)
            }
            None => {
                let ones = tape.constant(Tensor::ones(ms));
                (rgb, ones)
            }
        };
        Ok(ForwardOutput {
            prediction,
            attention,
            rgb,
            features,
            bottleneck,
            backbone,
        })
    }

    /// Forward pass returning `(prediction, attention)` values.
    pub fn predict(
        &self,
        image: &Tensor,
        mask: &Tensor,
        backbone_input: BackboneInput<'_>,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward_with(&mut tape, image, mask, backbone_input)?;
        Ok((
            tape.value(out.prediction).clone(),
            tape.value(out.attention).clone(),
        ))
    }

    /// Copies named tensors into the model; every parameter must be supplied with
    /// its exact shape.
    pub fn load_parameters(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        if named.len() != self.params.len() {
            problems.push(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                named.len()
            ));
        }
        for (name, tensor) in named {
            match self.params.find(name) {
                None => problems.push(format!("unknown parameter `{name}`")),
                Some(id) => {
                    let p = self.params.get(id);
                    if p.tensor.shape() != tensor.shape() {
                        problems.push(format!(
                            "parameter `{name}`: expected shape {}, got {}",
                            p.tensor.shape(),
                            tensor.shape()
                        ));
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for (name, tensor) in named {
            let id = self.params.find(name).expect("checked above");
            self.params.get_mut(id).tensor = tensor.clone();
        }
        Ok(())
    }

    /// Shape of the bottleneck map for an `input_size` square input.
    pub fn bottleneck_shape(&self, batch: usize) -> Shape {
        let side = self.config.input_size >> self.config.depth;
        Shape::new(
            batch,
            self.config.stage_channels(self.config.depth - 1),
            side,
            side,
        )
    }
}
