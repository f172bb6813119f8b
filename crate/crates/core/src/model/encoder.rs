use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::tokenize;
use crate::topology::{conv_pe, ost_matrix, sinusoidal_pe, PeKind};

use super::attention::{tem_attention_head, HeadInjection, HeadWeights};
use super::params::{ones_row, xavier, zeros_row, ParamStore};
use super::{BoundParams, ModelConfig};

#[derive(Debug, Clone)]
struct HeadParams {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone)]
struct LayerParams {
    heads: Vec<HeadParams>,
    wo: usize,
    bo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln_g: usize,
    ln_b: usize,
}

/// Graph nodes produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// `H_L`, `N_t × D`.
    pub output: Var,
    /// Output of every layer, ascending.
    pub layers: Vec<Var>,
    /// Positional encodings used as OPT, `N_t × D`.
    pub opt: Var,
    /// Raw-token Gram matrix, `N_t × N_t`, detached.
    pub ost: Var,
    /// `H⁰` before embedding.
    pub raw_tokens: Matrix,
}

/// Transformer encoder over one token scheme, with optional topology injection.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    embed_w: usize,
    embed_b: usize,
    conv_kernel: Option<usize>,
    layers: Vec<LayerParams>,
    gamma: usize,
    xi: usize,
}

impl Encoder {
    pub fn new(
        cfg: &ModelConfig,
        prefix: &str,
        params: &mut ParamStore,
        injection: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (_, d_raw) = cfg.token_shape()?;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let p = |s: &str| format!("{prefix}{s}");

        let embed_w = params.register(p("embed.w"), xavier(rng, d_raw, d));
        let embed_b = params.register(p("embed.b"), zeros_row(d));
        let conv_kernel = match cfg.pe_kind {
            PeKind::Convolutional => Some(params.register(p("pe.conv_kernel"), xavier(rng, 3, d))),
            PeKind::Sinusoidal => None,
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for i in 0..cfg.n_heads {
                let hp = |s: &str| p(&format!("layer{l}.head{i}.{s}"));
                heads.push(HeadParams {
                    wq: params.register(hp("wq"), xavier(rng, dh, dh)),
                    bq: params.register(hp("bq"), zeros_row(dh)),
                    wk: params.register(hp("wk"), xavier(rng, dh, dh)),
                    bk: params.register(hp("bk"), zeros_row(dh)),
                    wv: params.register(hp("wv"), xavier(rng, dh, dh)),
                    bv: params.register(hp("bv"), zeros_row(dh)),
                    ln_g: params.register(hp("ln.g"), ones_row(dh)),
                    ln_b: params.register(hp("ln.b"), zeros_row(dh)),
                });
            }
            let lp = |s: &str| p(&format!("layer{l}.{s}"));
            layers.push(LayerParams {
                heads,
                wo: params.register(lp("wo"), xavier(rng, d, d)),
                bo: params.register(lp("bo"), zeros_row(d)),
                w1: params.register(lp("ffn.w1"), xavier(rng, d, cfg.d_ff)),
                b1: params.register(lp("ffn.b1"), zeros_row(cfg.d_ff)),
                w2: params.register(lp("ffn.w2"), xavier(rng, cfg.d_ff, d)),
                b2: params.register(lp("ffn.b2"), zeros_row(d)),
                ln_g: params.register(lp("ln.g"), ones_row(d)),
                ln_b: params.register(lp("ln.b"), zeros_row(d)),
            });
        }
        let gamma = injection.register(
            p("gamma_raw"),
            Tensor::filled(&[cfg.n_layers, cfg.n_heads, 3], cfg.init_raw),
        );
        let xi = injection.register(p("xi_raw"), Tensor::filled(&[cfg.n_layers, cfg.n_heads], cfg.init_raw));
        Ok(Self {
            cfg: cfg.clone(),
            embed_w,
            embed_b,
            conv_kernel,
            layers,
            gamma,
            xi,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn gamma_index(&self) -> usize {
        self.gamma
    }

    pub fn xi_index(&self) -> usize {
        self.xi
    }

    pub fn conv_kernel_index(&self) -> Option<usize> {
        self.conv_kernel
    }

    /// Linear token embedding plus the input-layer positional encoding.
    /// Returns `(H⁰_embedded, PE)`.
    pub fn embed(&self, g: &mut Graph, bound: &BoundParams, tokens: Var) -> Result<(Var, Var)> {
        let (n_t, _) = g.dims(tokens);
        let e = g.affine(tokens, bound.params[self.embed_w], bound.params[self.embed_b])?;
        let pe = match self.conv_kernel {
            Some(k) => conv_pe(g, e, bound.params[k])?,
            None => {
                let m = sinusoidal_pe(n_t, self.cfg.d_model)?;
                g.constant(&m)
            }
        };
        let h = g.add(e, pe)?;
        Ok((h, pe))
    }

    fn head_injection(&self, g: &mut Graph, gamma: Var, xi: Var, l: usize, i: usize) -> Result<HeadInjection> {
        let base = (l * self.cfg.n_heads + i) * 3;
        Ok(HeadInjection {
            gamma_q: g.index(gamma, base)?,
            gamma_k: g.index(gamma, base + 1)?,
            gamma_v: g.index(gamma, base + 2)?,
            xi: g.index(xi, l * self.cfg.n_heads + i)?,
        })
    }

    /// One encoder layer: split into heads, topology-injected attention with a
    /// per-head residual and layer norm, fuse, then the FFN block.
    pub fn encoder_layer(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        l: usize,
        h: Var,
        opt_heads: &[Var],
        ost: Var,
        injection: Option<&[HeadInjection]>,
    ) -> Result<Var> {
        let lp = &self.layers[l];
        let dh = self.cfg.head_dim();
        let pv = |i: usize| bound.params[i];
        let mut outs = Vec::with_capacity(self.cfg.n_heads);
        for (i, hp) in lp.heads.iter().enumerate() {
            let hi = g.slice_cols(h, i * dh, dh)?;
            let w = HeadWeights {
                wq: pv(hp.wq),
                bq: pv(hp.bq),
                wk: pv(hp.wk),
                bk: pv(hp.bk),
                wv: pv(hp.wv),
                bv: pv(hp.bv),
            };
            let attn = tem_attention_head(g, hi, opt_heads[i], ost, &w, injection.map(|inj| &inj[i]))?;
            let res = g.add(hi, attn)?;
            outs.push(g.layer_norm(res, pv(hp.ln_g), pv(hp.ln_b), self.cfg.ln_eps)?);
        }
        let fused = g.concat_cols(&outs)?;
        let fused = g.affine(fused, pv(lp.wo), pv(lp.bo))?;
        let ff = g.affine(fused, pv(lp.w1), pv(lp.b1))?;
        let ff = g.relu(ff);
        let ff = g.affine(ff, pv(lp.w2), pv(lp.b2))?;
        let res = g.add(fused, ff)?;
        g.layer_norm(res, pv(lp.ln_g), pv(lp.ln_b), self.cfg.ln_eps)
    }

    /// Full encoder pass over one normalized `T × N` window.
    pub fn encode(&self, g: &mut Graph, bound: &BoundParams, x: &Matrix) -> Result<EncodeOutput> {
        if x.rows() != self.cfg.lookback || x.cols() != self.cfg.n_vars {
            return Err(Error::InvalidArgument(format!(
                "encoder expects a {}x{} window, got {}x{}",
                self.cfg.lookback,
                self.cfg.n_vars,
                x.rows(),
                x.cols()
            )));
        }
        let batch = tokenize(x, self.cfg.scheme, self.cfg.patch)?;
        let ost_m = ost_matrix(&batch.tokens);
        let ost = g.constant(&ost_m);
        let tokens = g.constant(&batch.tokens);
        let (mut h, opt) = self.embed(g, bound, tokens)?;

        let dh = self.cfg.head_dim();
        let opt_heads = (0..self.cfg.n_heads)
            .map(|i| g.slice_cols(opt, i * dh, dh))
            .collect::<Result<Vec<_>>>()?;

        let effective = if self.cfg.tem_enabled {
            let gamma = g.softplus(bound.injection[self.gamma]);
            let xi = g.softplus(bound.injection[self.xi]);
            Some((gamma, xi))
        } else {
            None
        };

        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let inj = match effective {
                Some((gamma, xi)) => Some(
                    (0..self.cfg.n_heads)
                        .map(|i| self.head_injection(g, gamma, xi, l, i))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            h = self.encoder_layer(g, bound, l, h, &opt_heads, ost, inj.as_deref())?;
            layers.push(h);
        }
        Ok(EncodeOutput {
            output: h,
            layers,
            opt,
            ost,
            raw_tokens: batch.tokens,
        })
    }
}
