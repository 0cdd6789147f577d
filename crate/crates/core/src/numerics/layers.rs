//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;

use super::{Graph, NumericsError, ParamId, ParameterSet, SetId, Tensor, Var};

/// Hidden-unit nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_bound(params, name, fan_in, fan_out, bound, rng)
    }

    pub fn with_bound<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let w = params.add(format!("{name}.w"), Tensor::uniform(fan_in, fan_out, bound, rng))?;
        let b = params.add(format!("{name}.b"), Tensor::uniform(1, fan_out, bound, rng))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// All-zero weights and bias.
    pub fn zeroed(params: &mut ParameterSet, name: &str, fan_in: usize, fan_out: usize) -> Result<Self, NumericsError> {
        let w = params.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out))?;
        let b = params.add(format!("{name}.b"), Tensor::zeros(1, fan_out))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, set: SetId, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(set, self.w);
        let b = g.param(set, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Layer-normalization gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, name: &str, width: usize) -> Result<Self, NumericsError> {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(1, width, 1.0))?;
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(1, width))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph<'_>, set: SetId, x: Var) -> Result<Var, NumericsError> {
        let gamma = g.param(set, self.gamma);
        let beta = g.param(set, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer encoder layer:
/// `x + Attn(LN(x))`, then `· + FF(LN(·))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    ln_attn: LayerNorm,
    qkv: Dense,
    proj: Dense,
    ln_ff: LayerNorm,
    ff_in: Dense,
    ff_out: Dense,
    heads: usize,
    activation: Activation,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        width: usize,
        heads: usize,
        ff_hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_block",
                detail: format!("width {width} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), width)?,
            qkv: Dense::new(params, &format!("{name}.qkv"), width, 3 * width, rng)?,
            proj: Dense::new(params, &format!("{name}.proj"), width, width, rng)?,
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), width)?,
            ff_in: Dense::new(params, &format!("{name}.ff_in"), width, ff_hidden, rng)?,
            ff_out: Dense::new(params, &format!("{name}.ff_out"), ff_hidden, width, rng)?,
            heads,
            activation,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Masked multi-head self-attention over independent sequences of
    /// `group` rows. `mask` is `group × group`, row-major, true diagonal.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        x: Var,
        group: usize,
        mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let h = self.ln_attn.forward(g, set, x)?;
        let qkv = self.qkv.forward(g, set, h)?;
        let att = g.attention(qkv, group, mask, self.heads)?;
        let att = self.proj.forward(g, set, att)?;
        let x = g.add(x, att)?;
        let h = self.ln_ff.forward(g, set, x)?;
        let h = self.ff_in.forward(g, set, h)?;
        let h = self.activation.apply(g, h);
        let h = self.ff_out.forward(g, set, h)?;
        g.add(x, h)
    }
}

/// All-pairs mask for a sequence of `n` tokens.
pub fn full_mask(n: usize) -> Vec<bool> {
    vec![true; n * n]
}
