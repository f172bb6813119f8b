use std::fs;
use std::path::Path;

use log::info;
use tem_core::checkpoint::Checkpoint;
use tem_core::config::{ConfigMap, RunConfig};
use tem_core::data::{self, SeriesDataset, Splits, WindowSample};
use tem_core::diagnostics::{self, LayerCurves};
use tem_core::model::{Model, ModelConfig, ModelSpec};
use tem_core::tokenizer::TokenScheme;
use tem_core::topology::PeKind;
use tem_core::trainer::{self, RunMetrics};
use tem_core::{Error, Result};

use crate::{Cli, Command};

const GRADCHECK_TOL: f64 = 1e-4;

pub fn run(cli: &Cli) -> Result<()> {
    let mut map = match &cli.config {
        Some(p) => ConfigMap::from_file(p)?,
        None => ConfigMap::parse("")?,
    };
    for kv in &cli.overrides {
        map.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        let key = if matches!(cli.command, Command::SynthData) { "data.synth_seed" } else { "train.seed" };
        map.set(key, &seed.to_string())?;
    }
    // Fail on bad values before touching the filesystem.
    map.resolve()?;
    match &cli.command {
        Command::Train => train(&map, &cli.out),
        Command::Evaluate { checkpoint } => evaluate(cli, checkpoint),
        Command::Diagnose { checkpoint, compare, dumps } => {
            diagnose(&map, &cli.out, checkpoint.as_deref(), compare.as_deref(), dumps)
        }
        Command::SynthData => synth_data(&map, &cli.out),
        Command::Gradcheck => gradcheck(&map, &cli.out),
    }
}

/// Creates the run directory and freezes the resolved configuration in it.
fn prepare_run(map: &ConfigMap, out: &Path) -> Result<RunConfig> {
    let rc = map.resolve()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), map.to_text())?;
    fs::write(out.join("seed.txt"), format!("{}\n", rc.train.seed))?;
    fs::write(out.join("build.txt"), format!("{}\n", env!("TEM_BUILD_TAG")))?;
    Ok(rc)
}

fn load_data(rc: &RunConfig) -> Result<SeriesDataset> {
    match &rc.data.path {
        Some(p) => data::load_csv(p),
        None => data::synthetic(&rc.data.synth),
    }
}

fn make_splits(rc: &RunConfig, ds: &SeriesDataset) -> Result<Splits> {
    data::split(ds, rc.data.split, rc.model.base.lookback, rc.data.overhang)
}

fn train(map: &ConfigMap, out: &Path) -> Result<()> {
    let rc = prepare_run(map, out)?;
    let ds = load_data(&rc)?;
    let splits = make_splits(&rc, &ds)?;
    let spec = rc.model.spec(ds.n_vars())?;
    info!(
        "training on {} rows x {} vars (train {}, val {}, test {})",
        ds.len(),
        ds.n_vars(),
        splits.train.core_len(),
        splits.val.core_len(),
        splits.test.core_len()
    );
    let (model, metrics) = trainer::train(&splits, &spec, &rc.train)?;
    Checkpoint::new(&model, &map.to_text(), &splits.norm).save(out.join("model.ckpt"))?;
    fs::write(out.join("metrics.csv"), metrics.to_csv())?;
    if rc.diagnose.enabled {
        let curves = model_curves(&model, &rc)?;
        fs::write(out.join("curves.csv"), curves.to_csv())?;
    }
    report(&metrics);
    Ok(())
}

fn report(m: &RunMetrics) {
    println!(
        "epochs {} best {} test_mse {:.6} test_mae {:.6}",
        m.epochs.len(),
        m.best_epoch,
        m.test_mse,
        m.test_mae
    );
}

/// Rebuilds a trained model from a checkpoint and the configuration frozen in it.
fn load_model(path: &Path, overrides: &[String]) -> Result<(Model, Checkpoint, ConfigMap)> {
    let ck = Checkpoint::load(path)?;
    let mut map = ConfigMap::parse(&ck.config)?;
    for kv in overrides {
        map.apply_override(kv)?;
    }
    let rc = map.resolve()?;
    let spec = rc.model.spec(ck.n_vars)?;
    let mut model = Model::new(&spec, rc.train.seed)?;
    ck.restore_into(&mut model)?;
    Ok((model, ck, map))
}

fn evaluate(cli: &Cli, checkpoint: &Path) -> Result<()> {
    let (model, ck, map) = load_model(checkpoint, &cli.overrides)?;
    let rc = prepare_run(&map, &cli.out)?;
    let ds = load_data(&rc)?;
    if ds.n_vars() != ck.n_vars {
        return Err(Error::Data(format!(
            "checkpoint expects {} variables, data has {}",
            ck.n_vars,
            ds.n_vars()
        )));
    }
    let mut splits = make_splits(&rc, &ds)?;
    splits.norm = ck.norm.clone();
    let (t, s) = (model.spec().lookback(), model.spec().horizon());
    let test = trainer::split_windows(&splits, &splits.test, t, s, rc.train.eval_stride)?;
    let (mse, mae) = trainer::evaluate(&model, &test, Some(&splits.norm))?;
    fs::write(cli.out.join("evaluation.csv"), format!("split,mse,mae\ntest,{mse},{mae}\n"))?;
    println!("test_mse {mse:.6} test_mae {mae:.6}");
    Ok(())
}

fn model_curves(model: &Model, rc: &RunConfig) -> Result<LayerCurves> {
    let spec = model.spec();
    let probes = diagnostics::probe_windows(
        spec.lookback(),
        spec.n_vars(),
        rc.diagnose.probes,
        rc.diagnose.probe_seed,
    )?;
    diagnostics::layer_curves(model, &probes, rc.diagnose.branch)
}

fn diagnose(
    map: &ConfigMap,
    out: &Path,
    checkpoint: Option<&Path>,
    compare: Option<&Path>,
    dumps: &[std::path::PathBuf],
) -> Result<()> {
    if !dumps.is_empty() {
        prepare_run(map, out)?;
        let curves = LayerCurves::from_trace(&diagnostics::trace_from_dumps(dumps)?)?;
        fs::write(out.join("curves.csv"), curves.to_csv())?;
        print!("{}", curves.to_csv());
        return Ok(());
    }
    let (model, map) = match checkpoint {
        Some(p) => {
            let (m, _, ck_map) = load_model(p, &[])?;
            // Diagnostic keys from the command line still apply.
            let mut merged = ck_map;
            for key in ["diagnose.probes", "diagnose.probe_seed", "diagnose.branch"] {
                merged.set(key, map.get(key).expect("known key"))?;
            }
            (m, merged)
        }
        None => {
            let rc = map.resolve()?;
            let n_vars = load_data(&rc)?.n_vars();
            (Model::new(&rc.model.spec(n_vars)?, rc.train.seed)?, map.clone())
        }
    };
    let rc = prepare_run(&map, out)?;
    let curves = model_curves(&model, &rc)?;
    fs::write(out.join("curves.csv"), curves.to_csv())?;
    print!("{}", curves.to_csv());
    if let Some(p) = compare {
        let (other, _, _) = load_model(p, &[])?;
        let other_curves = model_curves(&other, &rc)?;
        fs::write(out.join("curves_compare.csv"), other_curves.to_csv())?;
        println!("compare:");
        print!("{}", other_curves.to_csv());
    }
    Ok(())
}

fn synth_data(map: &ConfigMap, out: &Path) -> Result<()> {
    let rc = prepare_run(map, out)?;
    let ds = data::synthetic(&rc.data.synth)?;
    let path = out.join("data.csv");
    data::write_csv(&ds, &path)?;
    println!("wrote {} rows x {} vars to {}", ds.len(), ds.n_vars(), path.display());
    Ok(())
}

fn tiny_config(n_layers: usize, d_model: usize, lookback: usize, horizon: usize, n_vars: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads: d_model / 4,
        d_model,
        d_ff: d_model,
        scheme: TokenScheme::Variable,
        patch: None,
        lookback,
        horizon,
        n_vars,
        pe_kind: PeKind::Convolutional,
        tem_enabled: true,
        ln_eps: 1e-5,
        init_raw: 0.0,
    }
}

fn tiny_batch(lookback: usize, horizon: usize, n_vars: usize, seed: u64) -> Result<Vec<WindowSample>> {
    let series = diagnostics::probe_windows(lookback + horizon, n_vars, 2, seed)?;
    Ok(series
        .iter()
        .map(|w| WindowSample {
            x: w.slice_rows(0, lookback),
            y: w.slice_rows(lookback, lookback + horizon),
            start: 0,
        })
        .collect())
}

fn gradcheck(map: &ConfigMap, out: &Path) -> Result<()> {
    let rc = prepare_run(map, out)?;
    let seed = rc.train.seed;

    let spec = ModelSpec::Single(tiny_config(2, 8, 6, 3, 4));
    let model = Model::new(&spec, seed)?;
    let autodiff = trainer::model_gradient_check(&model, &tiny_batch(6, 3, 4, seed)?, 1e-5)?;

    let spec = ModelSpec::Single(tiny_config(1, 4, 4, 2, 2));
    let model = Model::new(&spec, seed)?;
    let bilevel = trainer::bilevel_gradient_check(&model, &tiny_batch(4, 2, 2, seed)?, 0.2, 1e-4)?;

    let mut csv = String::from("check,max_rel_err,tolerance,pass\n");
    for (name, err) in [("autodiff", autodiff), ("bilevel", bilevel)] {
        let pass = err < GRADCHECK_TOL;
        csv.push_str(&format!("{name},{err:e},{GRADCHECK_TOL:e},{pass}\n"));
        println!("{name}: max relative error {err:.3e} ({})", if pass { "ok" } else { "FAIL" });
    }
    fs::write(out.join("gradcheck.csv"), csv)?;
    let worst = autodiff.max(bilevel);
    if worst.is_nan() || worst >= GRADCHECK_TOL {
        return Err(Error::NonFinite(format!(
            "gradient check exceeded tolerance: {worst:e} >= {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}
