use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Normalization epsilon shared by layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    /// Per-row statistics over channels.
    Layer,
    /// Per-channel statistics over the rows of the current batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub norm: NormKind,
    pub activation: Activation,
}

/// Layer widths plus per-layer normalization and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// `widths[0]` is the input width. Hidden layers get `norm` then ReLU;
    /// the last layer is a bare linear map.
    pub fn new(widths: &[usize], norm: NormKind) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("MLP widths must be positive: {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths[1..]
            .iter()
            .enumerate()
            .map(|(i, &width)| LayerSpec {
                width,
                norm: if i == last { NormKind::None } else { norm },
                activation: if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Self {
            input: widths[0],
            layers,
        })
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.width)
    }
}

/// `y = x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert_uniform(format!("{name}.weight"), input, output, input, rng)?;
        let bias = if bias {
            Some(store.insert_uniform(format!("{name}.bias"), 1, output, input, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.input {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?} for {} ({}→{})",
                    g.shape(x),
                    store.get(self.weight).name,
                    self.input,
                    self.output
                ),
            ));
        }
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Standardization followed by a learned per-channel scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, kind: NormKind, width: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Matrix::filled(1, width, 1.0))?;
        let beta = store.insert(format!("{name}.beta"), Matrix::zeros(1, width))?;
        Ok(Self { kind, gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let z = match self.kind {
            NormKind::Layer => g.row_norm(x, NORM_EPS)?,
            NormKind::Batch => g.col_norm(x, NORM_EPS)?,
            NormKind::None => return Ok(x),
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul_row(z, gamma)?;
        g.add_row(scaled, beta)
    }
}

/// Layer normalization with learned affine.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, norm: &Norm) -> Result<Var> {
    debug_assert_eq!(norm.kind, NormKind::Layer);
    norm.forward(g, store, x)
}

#[derive(Debug, Clone, PartialEq)]
struct MlpLayer {
    linear: Linear,
    norm: Option<Norm>,
    activation: Activation,
}

/// A stack of linear layers sharing weights across all input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<MlpLayer>,
}

impl Mlp {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::Config(format!("{prefix}: empty MLP spec")));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut width = spec.input;
        for (i, l) in spec.layers.iter().enumerate() {
            let linear = Linear::init(store, &format!("{prefix}.{i}"), width, l.width, true, rng)?;
            let norm = match l.norm {
                NormKind::None => None,
                kind => Some(Norm::init(store, &format!("{prefix}.{i}.norm"), kind, l.width)?),
            };
            layers.push(MlpLayer {
                linear,
                norm,
                activation: l.activation,
            });
            width = l.width;
        }
        Ok(Self { spec, layers })
    }

    /// Re-attaches to parameters already present in `store` under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut width = spec.input;
        for (i, l) in spec.layers.iter().enumerate() {
            let weight = store.id(&format!("{prefix}.{i}.weight"))?;
            if store.get(weight).value.shape() != (width, l.width) {
                return Err(Error::Config(format!(
                    "{prefix}.{i}.weight has shape {:?}, spec wants {:?}",
                    store.get(weight).value.shape(),
                    (width, l.width)
                )));
            }
            let bias = Some(store.id(&format!("{prefix}.{i}.bias"))?);
            let norm = match l.norm {
                NormKind::None => None,
                kind => Some(Norm {
                    kind,
                    gamma: store.id(&format!("{prefix}.{i}.norm.gamma"))?,
                    beta: store.id(&format!("{prefix}.{i}.norm.beta"))?,
                }),
            };
            layers.push(MlpLayer {
                linear: Linear {
                    weight,
                    bias,
                    input: width,
                    output: l.width,
                },
                norm,
                activation: l.activation,
            });
            width = l.width;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn output(&self) -> usize {
        self.spec.output()
    }

    /// Parameter ids of the final linear layer (weight, bias).
    pub fn last_linear(&self) -> Linear {
        self.layers.last().expect("non-empty").linear
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.linear.forward(g, store, h)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(g, store, h)?;
            }
            if layer.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
