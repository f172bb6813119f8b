//! Topology-enhanced Transformer encoders and forecasting heads.

mod attention;
mod cdtf;
mod encoder;
mod params;

pub use attention::{tem_attention_head, HeadInjection, HeadWeights};
pub use cdtf::{cdtf_fuse, Cdtf};
pub use encoder::{EncodeOutput, Encoder};
pub use params::ParamStore;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Graph, Var};
use crate::tokenizer::{token_shape, PatchSpec, TokenScheme};
use crate::topology::PeKind;

use params::{xavier, zeros_row};

/// Raw value whose softplus is ~0.0025: injection starts close to the baseline.
pub const DEFAULT_INIT_RAW: f64 = -6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub scheme: TokenScheme,
    pub patch: Option<PatchSpec>,
    pub lookback: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub pe_kind: PeKind,
    pub tem_enabled: bool,
    pub ln_eps: f64,
    pub init_raw: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 8,
            d_model: 32,
            d_ff: 128,
            scheme: TokenScheme::Variable,
            patch: None,
            lookback: 96,
            horizon: 96,
            n_vars: 7,
            pe_kind: PeKind::Convolutional,
            tem_enabled: true,
            ln_eps: 1e-5,
            init_raw: DEFAULT_INIT_RAW,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(N_t, d_raw)` for this configuration's token scheme.
    pub fn token_shape(&self) -> Result<(usize, usize)> {
        token_shape(self.scheme, self.lookback, self.n_vars, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layers, heads, d_model and d_ff must all be >= 1".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.pe_kind == PeKind::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return bad(format!("sinusoidal PE needs an even d_model, got {}", self.d_model));
        }
        if self.lookback == 0 || self.horizon == 0 || self.n_vars == 0 {
            return bad("lookback, horizon and n_vars must be >= 1".into());
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be > 0".into());
        }
        self.token_shape().map(|_| ())
    }
}

/// Graph leaves for every model parameter and injection raw, in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub params: Vec<Var>,
    pub injection: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Single(ModelConfig),
    Cdtf { temporal: ModelConfig, variable: ModelConfig },
}

impl ModelSpec {
    pub fn tem_enabled(&self) -> bool {
        match self {
            ModelSpec::Single(c) => c.tem_enabled,
            ModelSpec::Cdtf { temporal, variable } => temporal.tem_enabled || variable.tem_enabled,
        }
    }

    pub fn lookback(&self) -> usize {
        match self {
            ModelSpec::Single(c) => c.lookback,
            ModelSpec::Cdtf { temporal, .. } => temporal.lookback,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            ModelSpec::Single(c) => c.horizon,
            ModelSpec::Cdtf { temporal, .. } => temporal.horizon,
        }
    }

    pub fn n_vars(&self) -> usize {
        match self {
            ModelSpec::Single(c) => c.n_vars,
            ModelSpec::Cdtf { temporal, .. } => temporal.n_vars,
        }
    }

    /// Same architecture with topology injection switched on or off everywhere.
    pub fn with_tem(&self, on: bool) -> ModelSpec {
        match self {
            ModelSpec::Single(c) => ModelSpec::Single(ModelConfig { tem_enabled: on, ..c.clone() }),
            ModelSpec::Cdtf { temporal, variable } => ModelSpec::Cdtf {
                temporal: ModelConfig { tem_enabled: on, ..temporal.clone() },
                variable: ModelConfig { tem_enabled: on, ..variable.clone() },
            },
        }
    }
}

/// Single encoder with a linear forecasting head.
#[derive(Debug, Clone)]
pub struct SingleBranch {
    pub encoder: Encoder,
    dec_w: usize,
    dec_b: usize,
}

impl SingleBranch {
    fn new(cfg: &ModelConfig, params: &mut ParamStore, injection: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(cfg, "", params, injection, rng)?;
        let (n_t, _) = cfg.token_shape()?;
        let (dec_w, dec_b) = match cfg.scheme {
            // shared per-variable map D -> S
            TokenScheme::Variable => (
                params.register("decoder.w", xavier(rng, cfg.d_model, cfg.horizon)),
                params.register("decoder.b", zeros_row(cfg.horizon)),
            ),
            // flattened H_L -> S·N
            TokenScheme::Temporal | TokenScheme::Patch => {
                let out = cfg.horizon * cfg.n_vars;
                (
                    params.register("decoder.w", xavier(rng, n_t * cfg.d_model, out)),
                    params.register("decoder.b", zeros_row(out)),
                )
            }
        };
        Ok(Self { encoder, dec_w, dec_b })
    }

    fn decode(&self, g: &mut Graph, bound: &BoundParams, h: Var) -> Result<Var> {
        let cfg = self.encoder.config();
        let (w, b) = (bound.params[self.dec_w], bound.params[self.dec_b]);
        match cfg.scheme {
            TokenScheme::Variable => {
                let y = g.affine(h, w, b)?;
                Ok(g.transpose(y))
            }
            TokenScheme::Temporal | TokenScheme::Patch => {
                let (r, c) = g.dims(h);
                let flat = g.reshape(h, 1, r * c)?;
                let y = g.affine(flat, w, b)?;
                g.reshape(y, cfg.horizon, cfg.n_vars)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Architecture {
    Single(SingleBranch),
    Cdtf(Cdtf),
}

/// Result of a forward pass recorded in a graph.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `S × N` forecast (normalized space).
    pub prediction: Var,
    /// One entry per encoder branch.
    pub encodings: Vec<EncodeOutput>,
}

/// A forecaster together with its parameters and injection raws.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    arch: Architecture,
    pub params: ParamStore,
    pub injection: ParamStore,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut injection = ParamStore::new();
        let arch = match spec {
            ModelSpec::Single(cfg) => Architecture::Single(SingleBranch::new(cfg, &mut params, &mut injection, &mut rng)?),
            ModelSpec::Cdtf { temporal, variable } => {
                Architecture::Cdtf(Cdtf::new(temporal, variable, &mut params, &mut injection, &mut rng)?)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            arch,
            params,
            injection,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tem_enabled(&self) -> bool {
        self.spec.tem_enabled()
    }

    pub fn encoders(&self) -> Vec<&Encoder> {
        match &self.arch {
            Architecture::Single(s) => vec![&s.encoder],
            Architecture::Cdtf(c) => vec![&c.temporal, &c.variable],
        }
    }

    pub fn bind(&self, g: &mut Graph, train_params: bool, train_injection: bool) -> BoundParams {
        BoundParams {
            params: self.params.bind(g, train_params),
            injection: self.injection.bind(g, train_injection),
        }
    }

    /// Records the forward pass for one normalized `T × N` window.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, x: &Matrix) -> Result<ForwardOutput> {
        match &self.arch {
            Architecture::Single(s) => {
                let enc = s.encoder.encode(g, bound, x)?;
                let prediction = s.decode(g, bound, enc.output)?;
                Ok(ForwardOutput {
                    prediction,
                    encodings: vec![enc],
                })
            }
            Architecture::Cdtf(c) => c.forward_graph(g, bound, x),
        }
    }

    /// Forecast for one normalized window.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false);
        let out = self.forward_graph(&mut g, &bound, x)?;
        Ok(g.to_matrix(out.prediction))
    }

    /// Overwrites every effective injection weight with `softplus⁻¹(value)`.
    pub fn set_effective_injection(&mut self, gamma: f64, xi: f64) -> Result<()> {
        let inv = |v: f64| -> Result<f64> {
            if v <= 0.0 {
                return Err(Error::InvalidArgument(format!("effective injection must be > 0, got {v}")));
            }
            // softplus⁻¹(v) = ln(eᵛ − 1)
            Ok(if v > 30.0 { v } else { v.exp_m1().ln() })
        };
        let (rg, rx) = (inv(gamma)?, inv(xi)?);
        self.set_injection_raw(rg, rx);
        Ok(())
    }

    /// Sets the positional and semantic injection raws independently.
    pub fn set_injection_raw(&mut self, gamma_raw: f64, xi_raw: f64) {
        let idx: Vec<(usize, usize)> = self.encoders().iter().map(|e| (e.gamma_index(), e.xi_index())).collect();
        for (gi, xi_i) in idx {
            self.injection.get_mut(gi).values_mut().iter_mut().for_each(|v| *v = gamma_raw);
            self.injection.get_mut(xi_i).values_mut().iter_mut().for_each(|v| *v = xi_raw);
        }
    }
}

#[cfg(test)]
mod tests;
