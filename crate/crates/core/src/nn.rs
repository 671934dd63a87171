//! Parameter storage and the few layers the denoiser is built from.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    /// Dotted name; the first segment is the namespace (`base`, `control`, `text`, `ssm`).
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn namespace(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Replace all values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Put every parameter on the tape; only trainable ones receive gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if p.trainable {
                        g.leaf(p.value.clone())
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Put every parameter on the tape as a constant, for inference.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.constant(p.value.clone())).collect())
    }
}

/// Tape variables for a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    Uniform,
    Zeros,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let (w, b) = match init {
            Init::Zeros => (Tensor::zeros(&shape), Tensor::zeros(&[c_out])),
            Init::Uniform => {
                let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
                (
                    Tensor::uniform(&shape, bound, rng),
                    Tensor::uniform(&[c_out], bound, rng),
                )
            }
        };
        Self {
            w: store.add(format!("{name}.w"), w, trainable),
            b: Some(store.add(format!("{name}.b"), b, trainable)),
        }
    }

    /// Bias-free convolution, so that a zero input maps to zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unbiased<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Uniform => {
                Tensor::uniform(&shape, 1.0 / ((c_in * kernel * kernel) as f64).sqrt(), rng)
            }
        };
        Self {
            w: store.add(format!("{name}.w"), w, trainable),
            b: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], self.b.map(|b| p[b]))
    }

    /// Same layer registered again under `name`, starting from this layer's values.
    pub fn copy_into(&self, store: &mut ParamStore, name: &str, trainable: bool) -> Self {
        let w = store.get(self.w).clone();
        let b = self.b.map(|b| store.get(b).clone());
        Self {
            w: store.add(format!("{name}.w"), w, trainable),
            b: b.map(|b| store.add(format!("{name}.b"), b, trainable)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::Zeros => (Tensor::zeros(&[n_out, n_in]), Tensor::zeros(&[n_out])),
            Init::Uniform => {
                let bound = 1.0 / (n_in as f64).sqrt();
                (
                    Tensor::uniform(&[n_out, n_in], bound, rng),
                    Tensor::uniform(&[n_out], bound, rng),
                )
            }
        };
        Self {
            w: store.add(format!("{name}.w"), w, trainable),
            b: store.add(format!("{name}.b"), b, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], p[self.b])
    }

    pub fn copy_into(&self, store: &mut ParamStore, name: &str, trainable: bool) -> Self {
        let (w, b) = (store.get(self.w).clone(), store.get(self.b).clone());
        Self {
            w: store.add(format!("{name}.w"), w, trainable),
            b: store.add(format!("{name}.b"), b, trainable),
        }
    }
}

/// `x + conv2(silu(conv1(silu(x)) + bias))`, with `bias` a per-channel
/// conditioning vector (time and text).
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                Init::Uniform,
                trainable,
                rng,
            ),
            conv2: Conv::new(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                Init::Uniform,
                trainable,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, bias: Option<Var>) -> Var {
        let h = g.silu(x);
        let mut h = self.conv1.forward(g, p, h);
        if let Some(b) = bias {
            h = g.channel_bias(h, b);
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        g.add(x, h)
    }

    pub fn copy_into(&self, store: &mut ParamStore, name: &str, trainable: bool) -> Self {
        Self {
            conv1: self
                .conv1
                .copy_into(store, &format!("{name}.conv1"), trainable),
            conv2: self
                .conv2
                .copy_into(store, &format!("{name}.conv2"), trainable),
        }
    }
}
