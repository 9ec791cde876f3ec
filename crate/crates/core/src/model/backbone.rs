use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamStore, Tape, Var};
use crate::error::{Axis, Error, Result};
use crate::model::layers::Conv;
use crate::model::stem::MaskFusionStem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    None,
    /// Two stride-2 convolutions behind a [`MaskFusionStem`].
    Toy,
    /// Feature maps produced elsewhere and read from `.hfeat` files.
    Precomputed,
}

/// Stand-in for a pre-trained segmentation network: stride 4 overall,
/// `2 · stem_width` output channels.
#[derive(Debug, Clone, Copy)]
pub struct ToyBackbone {
    pub stem: MaskFusionStem,
    pub conv2: Conv,
}

pub const TOY_BACKBONE_STRIDE: usize = 4;

impl ToyBackbone {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        mask: Var,
        activation: Activation,
    ) -> Result<Var> {
        let x = self.stem.forward(tape, store, image, mask)?;
        let x = tape.activation(x, activation)?;
        let x = self.conv2.forward(tape, store, x)?;
        tape.activation(x, activation)
    }
}

/// Nearest-resizes `backbone_feat` to the spatial size of `encoder_feat`, then
/// concatenates it after the encoder channels.
pub fn inject_features(tape: &mut Tape, encoder_feat: Var, backbone_feat: Var) -> Result<Var> {
    let es = tape.shape(encoder_feat);
    let bs = tape.shape(backbone_feat);
    if es.batch != bs.batch {
        return Err(Error::Dimension {
            op: "inject_features",
            axis: Axis::Batch,
            expected: es.batch,
            actual: bs.batch,
        });
    }
    let resized = if (bs.height, bs.width) == (es.height, es.width) {
        backbone_feat
    } else {
        tape.resize_nearest(backbone_feat, es.height, es.width)?
    };
    tape.concat_channels(encoder_feat, resized)
}
