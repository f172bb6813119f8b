use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Per-head projection weights, each `D_h × D_h` with a `1 × D_h` bias.
#[derive(Debug, Clone, Copy)]
pub struct HeadWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// Effective (positive) injection strengths of one head, as 1×1 nodes.
#[derive(Debug, Clone, Copy)]
pub struct HeadInjection {
    pub gamma_q: Var,
    pub gamma_k: Var,
    pub gamma_v: Var,
    pub xi: Var,
}

/// One attention head with positional and semantic topology injection.
///
/// With `injection = None` this is a vanilla scaled dot-product head.
/// Otherwise `Q = FC_q(H + Γ_Q·OPT)` (likewise K, V) and the logits are
/// `(QKᵀ + Ξ·OST) / √D_h` before the row softmax.
pub fn tem_attention_head(
    g: &mut Graph,
    h: Var,
    opt: Var,
    ost: Var,
    w: &HeadWeights,
    injection: Option<&HeadInjection>,
) -> Result<Var> {
    let (_, dh) = g.dims(h);
    let input = |g: &mut Graph, gamma: Option<Var>| -> Result<Var> {
        match gamma {
            Some(s) => {
                let scaled = g.mul_scalar(s, opt)?;
                g.add(h, scaled)
            }
            None => Ok(h),
        }
    };
    let (hq, hk, hv) = (
        input(g, injection.map(|i| i.gamma_q))?,
        input(g, injection.map(|i| i.gamma_k))?,
        input(g, injection.map(|i| i.gamma_v))?,
    );
    let q = g.affine(hq, w.wq, w.bq)?;
    let k = g.affine(hk, w.wk, w.bk)?;
    let v = g.affine(hv, w.wv, w.bv)?;
    let kt = g.transpose(k);
    let mut logits = g.matmul(q, kt)?;
    if let Some(inj) = injection {
        let bias = g.mul_scalar(inj.xi, ost)?;
        logits = g.add(logits, bias)?;
    }
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax_rows(logits)?;
    g.matmul(attn, v)
}
