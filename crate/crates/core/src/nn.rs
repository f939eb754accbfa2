//! Parameterized layers shared by the reconstruction and feature networks.

use rand::Rng;

use crate::autograd::{Activation, Graph, Var};
use crate::error::Result;
use crate::params::{BufferId, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `out × inp × k × k` convolution, He-initialized, "same" padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (inp * kernel * kernel) as f64).sqrt();
        Self::with_std(store, name, group, inp, out, kernel, stride, bias, std, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            Tensor::randn(&[out, inp, kernel, kernel], std, rng),
            group,
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out]), group));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).dim(0)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad, act)
    }
}

/// Stride-2 transposed convolution (kernel 4, padding 1) doubling the
/// spatial size.
#[derive(Debug, Clone)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, inp: usize, out: usize, rng: &mut R) -> Self {
        // each output pixel sees inp * 2 * 2 input taps
        let std = (2.0 / (inp * 4) as f64).sqrt();
        Self {
            weight: store.add_param(format!("{name}.weight"), Tensor::randn(&[inp, out, 4, 4], std, rng), group),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[out]), group),
        }
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).dim(1)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv_transpose2d(x, w, Some(b), 2, 1, act)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full(&[channels], 1.0), group),
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros(&[channels]), group),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(x, ga, be, self.running_mean, self.running_var, BN_EPS, BN_MOMENTUM)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_param(format!("{name}.weight"), Tensor::randn(&[out, inp], std, rng), group),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[out]), group),
        }
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.value(self.weight).dim(0)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}
