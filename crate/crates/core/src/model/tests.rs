use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::check_gradients;
use crate::topology::sinusoidal_pe;

fn random(seed: u64, r: usize, c: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn tiny(scheme: TokenScheme) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        scheme,
        patch: (scheme == TokenScheme::Patch).then_some(PatchSpec { patch_len: 2, stride: 2 }),
        lookback: 6,
        horizon: 3,
        n_vars: 3,
        pe_kind: if scheme == TokenScheme::Variable {
            PeKind::Convolutional
        } else {
            PeKind::Sinusoidal
        },
        tem_enabled: true,
        ln_eps: 1e-5,
        init_raw: DEFAULT_INIT_RAW,
    }
}

fn mse(g: &mut Graph, pred: Var, target: &Matrix) -> Var {
    let t = g.constant(target);
    let d = g.sub(pred, t).unwrap();
    let sq = g.mul(d, d).unwrap();
    g.mean(sq)
}

#[test]
fn config_validation() {
    let mut c = tiny(TokenScheme::Temporal);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(TokenScheme::Temporal);
    c.d_model = 6;
    c.n_heads = 1;
    assert!(c.validate().is_ok());
    let mut c = tiny(TokenScheme::Patch);
    c.patch = Some(PatchSpec { patch_len: 7, stride: 1 });
    assert!(c.validate().is_err());
}

#[test]
fn embed_is_linear_map_plus_pe() {
    let cfg = ModelConfig {
        n_heads: 1,
        pe_kind: PeKind::Sinusoidal,
        scheme: TokenScheme::Temporal,
        ..tiny(TokenScheme::Temporal)
    };
    let model = Model::new(&ModelSpec::Single(cfg.clone()), 1).unwrap();
    let enc = model.encoders()[0];
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, false);

    // zero tokens: only the bias (zero at init) and PE remain
    let zeros = g.constant(&Matrix::zeros(2, cfg.n_vars));
    let (h, _) = enc.embed(&mut g, &bound, zeros).unwrap();
    assert_eq!(g.to_matrix(h), sinusoidal_pe(2, 8).unwrap());

    // two tokens against an explicit product
    let tok = random(9, 2, cfg.n_vars);
    let tv = g.constant(&tok);
    let (h, _) = enc.embed(&mut g, &bound, tv).unwrap();
    let w = model.params.get(model.params.index_of("embed.w").unwrap()).to_matrix();
    let pe = sinusoidal_pe(2, 8).unwrap();
    let h = g.to_matrix(h);
    for i in 0..2 {
        for j in 0..8 {
            let mut s = pe.get(i, j);
            for k in 0..cfg.n_vars {
                s += tok.get(i, k) * w.get(k, j);
            }
            assert!((h.get(i, j) - s).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_pe_with_zero_kernel_leaves_plain_embedding() {
    let cfg = tiny(TokenScheme::Variable);
    let mut model = Model::new(&ModelSpec::Single(cfg.clone()), 2).unwrap();
    let k = model.encoders()[0].conv_kernel_index().unwrap();
    model.params.get_mut(k).values_mut().iter_mut().for_each(|v| *v = 0.0);
    let enc = model.encoders()[0].clone();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, false);
    let tok = random(3, cfg.n_vars, cfg.lookback);
    let tv = g.constant(&tok);
    let (h, pe) = enc.embed(&mut g, &bound, tv).unwrap();
    assert!(g.value(pe).iter().all(|&v| v == 0.0));
    let w = model.params.get(model.params.index_of("embed.w").unwrap()).to_matrix();
    assert!(g.to_matrix(h).max_abs_diff(&tok.matmul(&w).unwrap()) < 1e-14);
}

#[test]
fn single_head_layer_matches_composed_primitives() {
    let cfg = ModelConfig {
        n_heads: 1,
        ..tiny(TokenScheme::Temporal)
    };
    let model = Model::new(&ModelSpec::Single(cfg.clone()), 4).unwrap();
    let enc = model.encoders()[0];
    let p = |name: &str| model.params.index_of(name).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, false);
    let h = g.constant(&random(5, 6, 8));
    let opt = g.constant(&sinusoidal_pe(6, 8).unwrap());
    let ost = g.constant(&random(6, 6, 6));
    let out = enc.encoder_layer(&mut g, &bound, 0, h, &[opt], ost, None).unwrap();
    assert_eq!(g.dims(out), (6, 8));

    let b = |i: usize| bound.params[i];
    let w = HeadWeights {
        wq: b(p("layer0.head0.wq")),
        bq: b(p("layer0.head0.bq")),
        wk: b(p("layer0.head0.wk")),
        bk: b(p("layer0.head0.bk")),
        wv: b(p("layer0.head0.wv")),
        bv: b(p("layer0.head0.bv")),
    };
    let a = tem_attention_head(&mut g, h, opt, ost, &w, None).unwrap();
    let r = g.add(h, a).unwrap();
    let r = g.layer_norm(r, b(p("layer0.head0.ln.g")), b(p("layer0.head0.ln.b")), 1e-5).unwrap();
    let f = g.affine(r, b(p("layer0.wo")), b(p("layer0.bo"))).unwrap();
    let ff = g.affine(f, b(p("layer0.ffn.w1")), b(p("layer0.ffn.b1"))).unwrap();
    let ff = g.relu(ff);
    let ff = g.affine(ff, b(p("layer0.ffn.w2")), b(p("layer0.ffn.b2"))).unwrap();
    let s = g.add(f, ff).unwrap();
    let expect = g.layer_norm(s, b(p("layer0.ln.g")), b(p("layer0.ln.b")), 1e-5).unwrap();
    assert_eq!(g.value(out), g.value(expect));
}

#[test]
fn forward_shape_and_determinism() {
    for scheme in [TokenScheme::Temporal, TokenScheme::Variable, TokenScheme::Patch] {
        let spec = ModelSpec::Single(tiny(scheme));
        let x = random(7, 6, 3);
        let a = Model::new(&spec, 11).unwrap().forward(&x).unwrap();
        let b = Model::new(&spec, 11).unwrap().forward(&x).unwrap();
        assert_eq!(a.shape(), [3, 3]);
        assert!(a.is_finite());
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn wrong_window_shape_is_rejected() {
    let model = Model::new(&ModelSpec::Single(tiny(TokenScheme::Temporal)), 1).unwrap();
    assert!(model.forward(&random(1, 5, 3)).is_err());
}

#[test]
fn floor_injection_matches_baseline_for_all_schemes() {
    for scheme in [TokenScheme::Temporal, TokenScheme::Variable, TokenScheme::Patch] {
        let cfg = tiny(scheme);
        let mut tem = Model::new(&ModelSpec::Single(cfg.clone()), 21).unwrap();
        tem.set_injection_raw(-20.0, -20.0);
        let base = Model::new(&ModelSpec::Single(ModelConfig { tem_enabled: false, ..cfg }), 21).unwrap();
        for s in 0..3 {
            let x = random(100 + s, 6, 3);
            let d = tem.forward(&x).unwrap().max_abs_diff(&base.forward(&x).unwrap());
            assert!(d < 1e-6, "{scheme}: {d}");
        }
    }
}

#[test]
fn injection_gradients_are_nonzero_and_match_differences() {
    for scheme in [TokenScheme::Temporal, TokenScheme::Variable] {
        let cfg = tiny(scheme);
        let mut model = Model::new(&ModelSpec::Single(cfg), 5).unwrap();
        model.set_injection_raw(-0.5, -1.0);
        let x = random(31, 6, 3);
        let y = random(32, 3, 3);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false, true);
        let out = model.forward_graph(&mut g, &bound, &x).unwrap();
        let loss = mse(&mut g, out.prediction, &y);
        let grads = g.grad(loss, &bound.injection, false).unwrap();
        for gv in grads {
            assert!(g.value(gv).iter().all(|&v| v != 0.0), "{scheme}: zero injection gradient");
        }

        let np = model.params.len();
        let mut all: Vec<_> = model.params.tensors().to_vec();
        all.extend(model.injection.tensors().iter().cloned());
        let err = check_gradients(
            |g, vars| {
                let bound = BoundParams {
                    params: vars[..np].to_vec(),
                    injection: vars[np..].to_vec(),
                };
                let out = model.forward_graph(g, &bound, &x)?;
                Ok(mse(g, out.prediction, &y))
            },
            &mut all,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{scheme}: {err}");
    }
}

#[test]
fn attention_rows_sum_to_one_with_semantic_bias() {
    let mut g = Graph::new();
    let logits = g.constant(&random(3, 5, 5));
    let ost = g.constant(&random(4, 5, 5).map(|v| 50.0 * v));
    let s = g.add(logits, ost).unwrap();
    let a = g.softmax_rows(s).unwrap();
    for row in g.value(a).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn variable_scheme_is_permutation_equivariant() {
    let mut cfg = tiny(TokenScheme::Variable);
    cfg.n_vars = 4;
    let mut model = Model::new(&ModelSpec::Single(cfg), 8).unwrap();
    model.set_injection_raw(0.3, -0.2);
    // a depthwise kernel that only uses its centre tap does not see neighbours
    let k = model.encoders()[0].conv_kernel_index().unwrap();
    let d = 8;
    for (i, v) in model.params.get_mut(k).values_mut().iter_mut().enumerate() {
        if i / d != 1 {
            *v = 0.0;
        }
    }
    let x = random(40, 6, 4);
    let perm = [2, 0, 3, 1];
    let y = model.forward(&x).unwrap();
    let yp = model.forward(&x.select_columns(&perm)).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        for t in 0..3 {
            assert!((yp.get(t, k) - y.get(t, src)).abs() < 1e-8);
        }
    }
}

fn cdtf_spec() -> ModelSpec {
    ModelSpec::Cdtf {
        temporal: tiny(TokenScheme::Temporal),
        variable: tiny(TokenScheme::Variable),
    }
}

#[test]
fn cdtf_gate_limits() {
    let mut g = Graph::new();
    let ft = g.constant(&random(1, 3, 2).map(|v| v.abs() + 0.1));
    let fv = g.constant(&random(2, 3, 2).map(|v| v.abs() + 0.1));
    let big = g.constant(&Matrix::from_fn(4, 2, |_, _| 1000.0));
    let y = cdtf_fuse(&mut g, ft, fv, big).unwrap();
    assert_eq!(g.value(y), g.value(ft));

    let zero = g.constant(&Matrix::zeros(4, 2));
    let y = cdtf_fuse(&mut g, ft, fv, zero).unwrap();
    for ((a, b), c) in g.value(y).iter().zip(g.value(ft)).zip(g.value(fv)) {
        assert!((a - 0.5 * (b + c)).abs() < 1e-15);
    }
}

#[test]
fn cdtf_matches_independent_composition() {
    let model = Model::new(&cdtf_spec(), 3).unwrap();
    let x = random(50, 6, 3);
    let y = model.forward(&x).unwrap();
    assert_eq!(y.shape(), [3, 3]);

    let Architecture::Cdtf(c) = model.architecture() else {
        panic!("expected dual branch")
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, false);
    let ht = c.temporal.encode(&mut g, &bound, &x).unwrap().output;
    let hv = c.variable.encode(&mut g, &bound, &x).unwrap().output;
    let (ht, hv) = (g.to_matrix(ht), g.to_matrix(hv));
    let p = |n: &str| model.params.get(model.params.index_of(n).unwrap()).to_matrix();
    let add_row = |m: Matrix, b: Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + b.get(0, j));
    let ft = add_row(ht.matmul(&p("fuse.t1.w")).unwrap(), p("fuse.t1.b")).transpose();
    let ft = add_row(ft.matmul(&p("fuse.t2.w")).unwrap(), p("fuse.t2.b"));
    let fv = add_row(hv.matmul(&p("fuse.v.w")).unwrap(), p("fuse.v.b"));
    let wf = p("fuse.gate.w");
    for i in 0..3 {
        for s in 0..3 {
            let mut z = 0.0;
            for k in 0..3 {
                z += ft.get(i, k) * wf.get(k, s) + fv.get(i, k) * wf.get(3 + k, s);
            }
            let gate = 1.0 / (1.0 + (-z).exp());
            let expect = gate * ft.get(i, s) + (1.0 - gate) * fv.get(i, s);
            assert!((y.get(s, i) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cdtf_rejects_mismatched_branches() {
    let mut v = tiny(TokenScheme::Variable);
    v.horizon = 4;
    let spec = ModelSpec::Cdtf {
        temporal: tiny(TokenScheme::Temporal),
        variable: v,
    };
    assert!(Model::new(&spec, 1).is_err());
}

