use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeometry};
use super::params::{ParamId, ParamStore};
use crate::error::{Axis, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Sigmoid,
}

impl Activation {
    fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                Err(Error::argument(
                    "activation",
                    format!("leaky_relu alpha {alpha} not in (0, 1)"),
                ))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Constant,
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    ResizeNearest {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Sum {
        input: Var,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: Vjp,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed ops so that [`Tape::backward`] can replay them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).tensor.clone(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if stride == 0 {
            return Err(Error::argument(OP, "stride must be >= 1"));
        }
        if ws.channels != xs.channels {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Channel,
                expected: ws.channels,
                actual: xs.channels,
            });
        }
        if bs.numel() != ws.batch {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Batch,
                expected: ws.batch,
                actual: bs.numel(),
            });
        }
        let padded_h = xs.height + 2 * padding;
        let padded_w = xs.width + 2 * padding;
        if ws.height > padded_h {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Height,
                expected: ws.height,
                actual: padded_h,
            });
        }
        if ws.width > padded_w {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Width,
                expected: ws.width,
                actual: padded_w,
            });
        }
        let geometry = ConvGeometry {
            channels: xs.channels,
            height: xs.height,
            width: xs.width,
            out_channels: ws.batch,
            kh: ws.height,
            kw: ws.width,
            stride,
            padding,
            out_h: (padded_h - ws.height) / stride + 1,
            out_w: (padded_w - ws.width) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            xs.batch,
            self.value(weight).data(),
            self.value(bias).data(),
            &geometry,
        );
        let shape = Shape::new(xs.batch, ws.batch, geometry.out_h, geometry.out_w);
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn resize_nearest(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        if height == 0 || width == 0 {
            return Err(Error::argument(
                "resize_nearest",
                "target size must be >= 1",
            ));
        }
        let from = self.shape(input);
        let to = Shape::new(from.batch, from.channels, height, width);
        let out = kernels::resize_nearest_forward(self.value(input).data(), from, to);
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::from_vec(to, out)?, Op::ResizeNearest { input }, rg))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::argument("upsample_nearest", "factor must be >= 1"));
        }
        let s = self.shape(input);
        self.resize_nearest(input, s.height * factor, s.width * factor)
    }

    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        if k == 0 || stride == 0 {
            return Err(Error::argument(OP, "window and stride must be >= 1"));
        }
        let from = self.shape(input);
        if k > from.height {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Height,
                expected: k,
                actual: from.height,
            });
        }
        if k > from.width {
            return Err(Error::Dimension {
                op: OP,
                axis: Axis::Width,
                expected: k,
                actual: from.width,
            });
        }
        let to = Shape::new(
            from.batch,
            from.channels,
            (from.height - k) / stride + 1,
            (from.width - k) / stride + 1,
        );
        let (out, argmax) =
            kernels::max_pool_forward(self.value(input).data(), from, to, k, stride);
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::from_vec(to, out)?,
            Op::MaxPool { input, argmax },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let out = self.value(input).map(|x| kind.apply(x));
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Activation { input, kind }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let sa = self.shape(a);
        let sb = self.shape(b);
        sa.with_channels(sb.channels).expect_eq(&sb, OP)?;
        let plane = sa.plane();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.batch {
            out.extend_from_slice(&va[n * sa.channels * plane..(n + 1) * sa.channels * plane]);
            out.extend_from_slice(&vb[n * sb.channels * plane..(n + 1) * sb.channels * plane]);
        }
        let shape = sa.with_channels(sa.channels + sb.channels);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Concat { a, b }, rg))
    }

    /// `b` must match `a` exactly or have a single channel that is replicated.
    fn broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.channels == 1 {
            sa.with_channels(1).expect_eq(&sb, op)
        } else {
            sa.expect_eq(&sb, op)
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let va = self.value(a);
        let vb = self.value(b);
        if sa == sb {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::from_vec(sa, data).expect("shape preserved");
        }
        let plane = sa.plane();
        let mut out = va.clone();
        for n in 0..sa.batch {
            let m = &vb.data()[n * plane..(n + 1) * plane];
            for c in 0..sa.channels {
                let start = (n * sa.channels + c) * plane;
                for (o, &y) in out.data_mut()[start..start + plane].iter_mut().zip(m) {
                    *o = f(*o, y);
                }
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let out = self.binary(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let out = self.binary(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// `scale · a + shift`, elementwise.
    pub fn scalar_affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(input).map(|x| scale * x + shift);
        let rg = self.needs(&[input]);
        self.push(out, Op::Affine { input, scale }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    /// Records an op whose vector-Jacobian product is supplied by the caller.
    /// `vjp` maps the output gradient to one gradient per entry of `inputs`, in order.
    pub fn custom(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        vjp: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        let rg = self.needs(&inputs);
        self.push(
            value,
            Op::Custom {
                inputs,
                vjp: Box::new(vjp),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into `store`
    /// (a second call without zeroing accumulates); per-variable gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.get_mut(*id).gradient.add_assign(g);
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {ls}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let xs = self.shape(*input);
                let need_input = self.nodes[input.0].requires_grad;
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    xs.batch,
                    self.value(*weight).data(),
                    g.data(),
                    geometry,
                    need_input,
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, Tensor::from_vec(xs, dx).expect("shape"));
                }
                let dw = Tensor::from_vec(self.shape(*weight), cg.weight).expect("shape");
                self.accumulate(grads, *weight, dw);
                let db = Tensor::from_vec(self.shape(*bias), cg.bias).expect("shape");
                self.accumulate(grads, *bias, db);
            }
            Op::ResizeNearest { input } => {
                let from = self.shape(*input);
                let dx = kernels::resize_nearest_backward(g.data(), from, g.shape());
                self.accumulate(grads, *input, Tensor::from_vec(from, dx).expect("shape"));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(
                    grads,
                    *input,
                    Tensor::from_vec(g.shape(), data).expect("shape"),
                );
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a).channels;
                let total = g.shape().channels;
                self.accumulate(grads, *a, g.slice_channels(0, ca).expect("concat split"));
                self.accumulate(
                    grads,
                    *b,
                    g.slice_channels(ca, total).expect("concat split"),
                );
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                let db = self.reduce_broadcast(g.clone(), self.shape(*b));
                self.accumulate(grads, *b, db);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da = self.binary_grad(g, *b, *a);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let prod = {
                        let va = self.value(*a);
                        let data = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                        Tensor::from_vec(g.shape(), data).expect("shape")
                    };
                    let db = self.reduce_broadcast(prod, self.shape(*b));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                self.accumulate(grads, *input, g.map(|v| v * s));
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                self.accumulate(grads, *input, Tensor::full(self.shape(*input), gv));
            }
            Op::Custom { inputs, vjp } => {
                let parts = vjp(g);
                debug_assert_eq!(parts.len(), inputs.len());
                for (v, part) in inputs.iter().zip(parts) {
                    self.accumulate(grads, *v, part);
                }
            }
        }
    }

    /// `g ⊙ value(b)` laid out in the shape of `target`, replicating a singleton channel of `b`.
    fn binary_grad(&self, g: &Tensor, b: Var, target: Var) -> Tensor {
        let vb = self.value(b);
        let st = self.shape(target);
        if vb.shape() == st {
            let data = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
            return Tensor::from_vec(st, data).expect("shape");
        }
        let plane = st.plane();
        let mut out = g.clone();
        for n in 0..st.batch {
            let m = &vb.data()[n * plane..(n + 1) * plane];
            for c in 0..st.channels {
                let start = (n * st.channels + c) * plane;
                for (o, &y) in out.data_mut()[start..start + plane].iter_mut().zip(m) {
                    *o *= y;
                }
            }
        }
        out
    }

    /// Sums a full-channel gradient back onto a broadcast singleton channel.
    fn reduce_broadcast(&self, g: Tensor, target: Shape) -> Tensor {
        let gs = g.shape();
        if gs == target {
            return g;
        }
        let plane = gs.plane();
        let mut out = Tensor::zeros(target);
        for n in 0..gs.batch {
            let dst = &mut out.data_mut()[n * plane..(n + 1) * plane];
            for c in 0..gs.channels {
                let start = (n * gs.channels + c) * plane;
                for (d, v) in dst.iter_mut().zip(&g.data()[start..start + plane]) {
                    *d += v;
                }
            }
        }
        out
    }
}
