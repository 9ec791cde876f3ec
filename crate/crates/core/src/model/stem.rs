use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Axis, Error, Result};
use crate::model::layers::Conv;

/// First convolution of a backbone made foreground-aware: an RGB branch plus a
/// parallel mask branch with identical kernel/stride, summed elementwise.
///
/// The mask branch starts at zero, so at initialization the stem computes exactly
/// what the RGB branch alone would.
#[derive(Debug, Clone, Copy)]
pub struct MaskFusionStem {
    pub rgb_conv: Conv,
    /// `None` for a foreground-blind stem.
    pub mask_conv: Option<Conv>,
}

impl MaskFusionStem {
    pub fn out_channels(&self, store: &ParamStore) -> usize {
        self.rgb_conv.out_channels(store)
    }

    /// `rgb_conv(image) + mask_conv(mask)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        mask: Var,
    ) -> Result<Var> {
        let rgb = self.rgb_conv.forward(tape, store, image)?;
        let Some(mask_conv) = &self.mask_conv else {
            return Ok(rgb);
        };
        let mask_channels = tape.shape(mask).channels;
        if mask_channels != 1 {
            return Err(Error::Dimension {
                op: "fuse_mask_stem",
                axis: Axis::Channel,
                expected: 1,
                actual: mask_channels,
            });
        }
        let m = mask_conv.forward(tape, store, mask)?;
        tape.add(rgb, m)
    }
}
