use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Graph, Var};
use crate::tokenizer::TokenScheme;

use super::encoder::Encoder;
use super::params::{xavier, zeros_row, ParamStore};
use super::{BoundParams, ForwardOutput, ModelConfig};

/// Dual-branch model: a temporal-token encoder and a variable-token encoder
/// fused by a sigmoid gate.
#[derive(Debug, Clone)]
pub struct Cdtf {
    pub temporal: Encoder,
    pub variable: Encoder,
    t1_w: usize,
    t1_b: usize,
    t2_w: usize,
    t2_b: usize,
    v_w: usize,
    v_b: usize,
    fuse_w: usize,
}

/// `G = σ([F_t, F_v]·W_f)`, `Ŷᵀ = G ⊙ F_t + (1 − G) ⊙ F_v`; all `N × S`.
pub fn cdtf_fuse(g: &mut Graph, f_t: Var, f_v: Var, w_f: Var) -> Result<Var> {
    let cat = g.concat_cols(&[f_t, f_v])?;
    let gate = g.matmul(cat, w_f)?;
    let gate = g.sigmoid(gate);
    let diff = g.sub(f_t, f_v)?;
    let gated = g.mul(gate, diff)?;
    g.add(f_v, gated)
}

impl Cdtf {
    pub(super) fn new(
        temporal: &ModelConfig,
        variable: &ModelConfig,
        params: &mut ParamStore,
        injection: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if temporal.scheme != TokenScheme::Temporal || variable.scheme != TokenScheme::Variable {
            return Err(Error::Config("dual-branch model needs a temporal and a variable branch".into()));
        }
        if (temporal.lookback, temporal.horizon, temporal.n_vars) != (variable.lookback, variable.horizon, variable.n_vars) {
            return Err(Error::Config("dual-branch lookback, horizon and variables must agree".into()));
        }
        let (t, s, n) = (temporal.lookback, temporal.horizon, temporal.n_vars);
        let temporal_enc = Encoder::new(temporal, "time.", params, injection, rng)?;
        let variable_enc = Encoder::new(variable, "var.", params, injection, rng)?;
        Ok(Self {
            temporal: temporal_enc,
            variable: variable_enc,
            t1_w: params.register("fuse.t1.w", xavier(rng, temporal.d_model, n)),
            t1_b: params.register("fuse.t1.b", zeros_row(n)),
            t2_w: params.register("fuse.t2.w", xavier(rng, t, s)),
            t2_b: params.register("fuse.t2.b", zeros_row(s)),
            v_w: params.register("fuse.v.w", xavier(rng, variable.d_model, s)),
            v_b: params.register("fuse.v.b", zeros_row(s)),
            fuse_w: params.register("fuse.gate.w", xavier(rng, 2 * s, s)),
        })
    }

    pub fn fuse_weight_index(&self) -> usize {
        self.fuse_w
    }

    /// Branch features `(F_t, F_v)`, each `N × S`.
    pub fn branch_features(&self, g: &mut Graph, bound: &BoundParams, h_time: Var, h_var: Var) -> Result<(Var, Var)> {
        let p = |i: usize| bound.params[i];
        let ft = g.affine(h_time, p(self.t1_w), p(self.t1_b))?;
        let ft = g.transpose(ft);
        let ft = g.affine(ft, p(self.t2_w), p(self.t2_b))?;
        let fv = g.affine(h_var, p(self.v_w), p(self.v_b))?;
        Ok((ft, fv))
    }

    pub(super) fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, x: &Matrix) -> Result<ForwardOutput> {
        let time = self.temporal.encode(g, bound, x)?;
        let var = self.variable.encode(g, bound, x)?;
        let (ft, fv) = self.branch_features(g, bound, time.output, var.output)?;
        let fused = cdtf_fuse(g, ft, fv, bound.params[self.fuse_w])?;
        let prediction = g.transpose(fused);
        Ok(ForwardOutput {
            prediction,
            encodings: vec![time, var],
        })
    }
}
