use rand::Rng;

use crate::{Graph, NodeId, Result, Tensor};

/// Anything that owns named parameter tensors.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Weight initialisation scheme, chosen by the activation that follows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given negative slope of a (leaky) ReLU.
    Kaiming { negative_slope: f32 },
    /// Glorot-normal, for layers feeding tanh or sigmoid.
    Xavier,
}

impl Init {
    fn std(&self, fan_in: usize, fan_out: usize) -> f32 {
        match *self {
            Init::Kaiming { negative_slope } => {
                (2.0 / ((1.0 + negative_slope * negative_slope) * fan_in as f32)).sqrt()
            }
            Init::Xavier => (2.0 / (fan_in + fan_out) as f32).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let fan_out = c_out * kernel * kernel;
        Self {
            name: name.into(),
            weight: Tensor::randn(&[c_out, c_in, kernel, kernel], init.std(fan_in, fan_out), rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{}.weight", self.name), &self.weight);
        let b = g.param(&format!("{}.bias", self.name), &self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::randn(&[d_out, d_in], init.std(d_in, d_out), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{}.weight", self.name), &self.weight);
        let b = g.param(&format!("{}.bias", self.name), &self.bias);
        g.linear(x, w, Some(b))
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}
