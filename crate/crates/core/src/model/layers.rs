use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

/// Convolution layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) enum Init {
    HeUniform,
    Zero,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let shape = Shape::new(out_channels, in_channels, kernel, kernel);
        let weight = match init {
            Init::HeUniform => {
                let bound = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
            Init::Zero => Tensor::zeros(shape),
        };
        let weight = store.add(format!("{name}.weight"), weight, 1.0)?;
        store.get_mut(weight).fan_in = Some(in_channels * kernel * kernel);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, 1, 1, out_channels)),
            1.0,
        )?;
        Ok(Conv {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(input, w, b, self.stride, self.padding)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.shape().batch
    }

    pub(crate) fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
