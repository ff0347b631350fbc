use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mfdiff_core::dataset::{build_dataset, read_f32, write_f32, MultiFidelityDataset, NormStats};
use mfdiff_core::error::Error;
use mfdiff_core::eval::{emit_report, relative_l2, summarize, Comparison, ResultRow};
use mfdiff_core::field::SolutionField;
use mfdiff_core::pde::{PdeKind, PdeSpec};
use mfdiff_core::sampler::{generate_ensemble, generate_ensembles, generate_slices, SamplerConfig};
use mfdiff_core::score_net::FidelityMode;
use mfdiff_core::seed::sub_seed;
use mfdiff_core::trainer::{load_checkpoint, load_checkpoint_for, train_loop, TrainOutputs, TrainState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ModeName};
use crate::{CliError, EvalArgs, GenDataArgs, ReproduceArgs, SampleArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serialize")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn manifest_sha256(dataset_dir: &Path) -> Result<String> {
    let path = dataset_dir.join("manifest.json");
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn make_dataset(pde: &str, fidelities: &[usize], counts: &[usize], seed: u64, out: &Path) -> Result<MultiFidelityDataset> {
    if fidelities.is_empty() || fidelities.len() != counts.len() {
        return Err(CliError::Usage(format!(
            "--fidelities has {} entries but --counts has {}",
            fidelities.len(),
            counts.len()
        )));
    }
    let kind = PdeKind::parse(pde).map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = build_dataset(&PdeSpec::new(kind), fidelities, counts, seed)?;
    ds.save(out)?;
    let m = &ds.manifest;
    println!(
        "{}: {} examples on a {}x{} grid, fidelities {:?}, counts {:?}, mean {:.6}, std {:.6} -> {}",
        m.pde,
        ds.len(),
        m.grid,
        m.grid,
        m.fidelities,
        m.counts,
        m.mean,
        m.std,
        out.display()
    );
    Ok(ds)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    make_dataset(&a.pde, &a.fidelities, &a.counts, a.seed, &a.out).map(|_| ())
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = [dir.to_path_buf(), dir.join("checkpoints")]
        .iter()
        .filter_map(|d| fs::read_dir(d).ok())
        .flatten()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "mfdf")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("checkpoint_"))
        })
        .collect();
    found.sort_by_key(|p| p.file_name().map(|n| n.to_owned()));
    found.pop()
}

#[derive(Serialize)]
struct Provenance {
    dataset_dir: PathBuf,
    dataset_manifest_sha256: String,
    model_config_sha256: String,
    train_levels: Option<Vec<usize>>,
}

fn fidelity_mode(name: ModeName, ds: &MultiFidelityDataset) -> FidelityMode {
    match name {
        ModeName::Discrete => ds.discrete_mode(),
        ModeName::Continuous => FidelityMode::Continuous,
    }
}

/// Trains into `out` and returns the final checkpoint.
fn run_training(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<PathBuf> {
    if !cfg.dataset_dir.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} does not exist", cfg.dataset_dir.display())));
    }
    let mut ds = MultiFidelityDataset::load(&cfg.dataset_dir)?;
    if let Some(levels) = &cfg.train_levels {
        ds = ds.subset(levels).map_err(|e| CliError::Usage(format!("train_levels: {e}")))?;
    }
    let mode = fidelity_mode(cfg.fidelity_mode, &ds);
    let model_cfg = cfg.model_config(ds.grid(), ds.param_dim(), mode, ds.manifest.tau_grid.is_some())?;
    model_cfg.validate()?;
    let examples = ds.training_examples(mode)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    let provenance = Provenance {
        dataset_dir: cfg.dataset_dir.clone(),
        dataset_manifest_sha256: manifest_sha256(&cfg.dataset_dir)?,
        model_config_sha256: hex(&mfdiff_core::trainer::config_hash(&model_cfg, &cfg.sde)),
        train_levels: cfg.train_levels.clone(),
    };
    write_json(&out.join("provenance.json"), &provenance)?;

    let ckpt_dir = out.join("checkpoints");
    let log_path = out.join("train_log.csv");
    let mut state = match latest_checkpoint(&ckpt_dir).filter(|_| resume) {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            load_checkpoint_for(&path, &model_cfg, &cfg.sde)?
        }
        None => {
            if ckpt_dir.exists() {
                fs::remove_dir_all(&ckpt_dir).with_context(|| format!("clearing {}", ckpt_dir.display()))?;
            }
            TrainState::new(model_cfg, cfg.sde, ds.norm_stats(), cfg.seed)?
        }
    };
    log::info!(
        "training {} parameters on {} examples for {} steps",
        state.model.num_parameters(),
        examples.len(),
        cfg.train.total_steps
    );
    let outputs = TrainOutputs {
        checkpoint_dir: Some(ckpt_dir.clone()),
        log_path: Some(log_path),
        log_every: 100,
    };
    train_loop(&examples, &mut state, &cfg.train, &outputs)?;
    let last = latest_checkpoint(&ckpt_dir).context("training wrote no checkpoint")?;
    println!("step {} loss {:.4e} -> {}", state.step, state.loss.last, last.display());
    Ok(last)
}

fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, steps: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(n) = steps {
        cfg.train.total_steps = n;
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = &a.dataset_dir {
        cfg.dataset_dir = d.clone();
    }
    apply_overrides(&mut cfg, a.seed, a.steps);
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir_for(&a.config));
    run_training(&cfg, &out, a.resume).map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub method_tag: String,
    pub pde: String,
    pub fidelity_mode: String,
    pub ensemble_k: usize,
    pub count: usize,
    pub shape: (usize, usize, usize),
}

fn prediction_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("pred_{i}.f32"))
}

fn default_tag(mode: FidelityMode, k: usize) -> String {
    format!("mf-{}-k{k}", ModeName::of(mode).as_str())
}

fn conditioning_mesh(norm: &NormStats, fidelity: Option<usize>) -> Result<usize> {
    match fidelity {
        Some(s) => Ok(s),
        None => norm
            .fidelities
            .last()
            .copied()
            .ok_or_else(|| CliError::Usage("checkpoint lists no fidelities; pass --fidelity".into())),
    }
}

/// Predicts every example of `test` and writes them to `out`.
fn predict_test_set(
    state: &TrainState,
    test: &MultiFidelityDataset,
    sampler: &SamplerConfig,
    fidelity: Option<usize>,
    seed: u64,
    tag: &str,
    out: &Path,
) -> Result<()> {
    let model = &state.model;
    let norm = &state.norm;
    let mode = model.config().fidelity_mode;
    let mesh = conditioning_mesh(norm, fidelity)?;
    let k = sampler.ensemble_k;
    let seeds: Vec<u64> = (0..test.len()).map(|i| sub_seed(seed, i as u64)).collect();
    let preds: Vec<SolutionField> = match &test.manifest.tau_grid {
        None => {
            let conds = test
                .examples
                .iter()
                .map(|e| norm.condition(&e.x, mesh, mode, None))
                .collect::<mfdiff_core::error::Result<Vec<_>>>()?;
            generate_ensembles(model, model.sde(), &conds, sampler, k, &seeds, norm)?
        }
        Some(taus) => {
            if !model.config().slice_conditioning {
                return Err(CliError::Usage("test set is sliced but the model has no slice conditioning".into()));
            }
            let taus: Vec<f64> = taus.iter().map(|&t| norm.encode_tau(t)).collect();
            test.examples
                .iter()
                .zip(&seeds)
                .map(|(e, &s)| {
                    let base = norm.condition(&e.x, mesh, mode, None)?;
                    generate_slices(model, model.sde(), &base, &taus, sampler, s, norm)
                })
                .collect::<mfdiff_core::error::Result<_>>()?
        }
    };
    if out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, p) in preds.iter().enumerate() {
        write_f32(&prediction_path(out, i), p.data())?;
    }
    let meta = PredictionMeta {
        method_tag: tag.to_string(),
        pde: test.manifest.pde.clone(),
        fidelity_mode: ModeName::of(mode).as_str().into(),
        ensemble_k: k,
        count: preds.len(),
        shape: preds.first().map(SolutionField::shape).unwrap_or((0, 0, 0)),
    };
    write_json(&out.join("predictions.json"), &meta)?;
    println!("{} predictions ({tag}) -> {}", preds.len(), out.display());
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let path = if a.checkpoint.is_dir() {
        latest_checkpoint(&a.checkpoint)
            .ok_or_else(|| CliError::Usage(format!("no checkpoint found in {}", a.checkpoint.display())))?
    } else {
        a.checkpoint.clone()
    };
    let state = match &a.config {
        Some(cfg_path) => {
            let cfg = ExperimentConfig::load(cfg_path)?;
            let mut ds = MultiFidelityDataset::load(&cfg.dataset_dir)?;
            if let Some(levels) = &cfg.train_levels {
                ds = ds.subset(levels)?;
            }
            let mode = fidelity_mode(cfg.fidelity_mode, &ds);
            let model_cfg = cfg.model_config(ds.grid(), ds.param_dim(), mode, ds.manifest.tau_grid.is_some())?;
            load_checkpoint_for(&path, &model_cfg, &cfg.sde)?
        }
        None => load_checkpoint(&path)?,
    };
    let slice_model = state.model.config().slice_conditioning;
    if a.tau.is_some() && !slice_model {
        return Err(CliError::Usage("--tau needs a model trained with slice conditioning".into()));
    }
    let sampler = SamplerConfig {
        num_steps: a.steps,
        corrector_steps: a.corrector_steps,
        snr: a.snr,
        ensemble_k: a.ensemble_k,
        denoise: a.denoise,
        ..SamplerConfig::default()
    };
    sampler.validate()?;
    let mode = state.model.config().fidelity_mode;
    let tag = a.method_tag.clone().unwrap_or_else(|| default_tag(mode, a.ensemble_k));

    if let Some(test_dir) = &a.test_set {
        if !test_dir.is_dir() {
            return Err(CliError::Usage(format!("test set {} does not exist", test_dir.display())));
        }
        let test = MultiFidelityDataset::load(test_dir)?;
        return predict_test_set(&state, &test, &sampler, a.fidelity, a.seed, &tag, &a.out);
    }
    let x = a.x.as_ref().ok_or_else(|| CliError::Usage("pass --x or --test-set".into()))?;
    let norm = &state.norm;
    let mesh = conditioning_mesh(norm, a.fidelity)?;
    let sde = state.model.sde();
    let field = match &a.tau {
        Some(taus) => {
            let base = norm.condition(x, mesh, mode, None)?;
            let taus: Vec<f64> = taus.iter().map(|&t| norm.encode_tau(t)).collect();
            generate_slices(&state.model, sde, &base, &taus, &sampler, a.seed, norm)?
        }
        None if slice_model => {
            return Err(CliError::Usage("slice-conditioned model needs --tau".into()));
        }
        None => {
            let cond = norm.condition(x, mesh, mode, None)?;
            generate_ensemble(&state.model, sde, &cond, &sampler, a.ensemble_k, a.seed, norm)?
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_f32(&a.out, field.data())?;
    let (r, c, d) = field.shape();
    println!("{r}x{c}x{d} prediction ({tag}) -> {}", a.out.display());
    Ok(())
}

/// Relative L2 rows for one prediction directory plus the fields compared.
fn score_run(pred_dir: &Path, truth: &MultiFidelityDataset, run: usize) -> Result<(Vec<ResultRow>, Vec<SolutionField>)> {
    let meta: PredictionMeta = read_json(&pred_dir.join("predictions.json"))?;
    if meta.count != truth.len() {
        return Err(Error::Integrity {
            path: pred_dir.to_path_buf(),
            reason: format!("{} predictions for {} reference examples", meta.count, truth.len()),
        }
        .into());
    }
    let mut rows = Vec::new();
    let mut fields = Vec::new();
    for (i, ex) in truth.examples.iter().enumerate() {
        if meta.shape != ex.field.shape() {
            return Err(Error::Integrity {
                path: pred_dir.to_path_buf(),
                reason: format!("prediction shape {:?} does not match reference {:?}", meta.shape, ex.field.shape()),
            }
            .into());
        }
        let (r, c, d) = meta.shape;
        let data = read_f32(&prediction_path(pred_dir, i), r * c * d)?;
        let pred = SolutionField::from_vec_3d(r, c, d, data)?;
        rows.push(ResultRow {
            method_tag: meta.method_tag.clone(),
            pde: meta.pde.clone(),
            fidelity_mode: meta.fidelity_mode.clone(),
            ensemble_k: meta.ensemble_k,
            run,
            rel_l2: relative_l2(&pred, &ex.field)?,
        });
        fields.push(pred);
    }
    Ok((rows, fields))
}

fn evaluate(preds: &[PathBuf], truth_dir: &Path, out: &Path, images: usize) -> Result<()> {
    if !truth_dir.is_dir() {
        return Err(CliError::Usage(format!("truth directory {} does not exist", truth_dir.display())));
    }
    let truth = MultiFidelityDataset::load(truth_dir)?;
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for (run, dir) in preds.iter().enumerate() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("prediction directory {} does not exist", dir.display())));
        }
        let (r, fields) = score_run(dir, &truth, run)?;
        if run == 0 {
            for (i, pred) in fields.into_iter().take(images).enumerate() {
                comparisons.push(Comparison {
                    name: format!("example_{i}"),
                    pred,
                    truth: truth.examples[i].field.clone(),
                });
            }
        }
        rows.extend(r);
    }
    emit_report(&rows, &comparisons, out)?;
    for s in summarize(&rows)? {
        println!(
            "{} {} {} k={}: rel L2 {:.4e} +- {:.4e} over {} run(s)",
            s.method_tag, s.pde, s.fidelity_mode, s.ensemble_k, s.mean_rel_l2, s.std_rel_l2, s.runs
        );
    }
    println!("report -> {}", out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    evaluate(&a.preds, &a.truth, &a.out, a.images)
}

pub fn reproduce(a: &ReproduceArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    apply_overrides(&mut cfg, a.seed, a.steps);
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{} has no \"data\" section", a.config.display())))?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir_for(&a.config));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;

    make_dataset(&data.pde, &data.fidelities, &data.counts, cfg.seed, &cfg.dataset_dir)?;
    let top = *data.fidelities.iter().max().expect("non-empty fidelities");
    let test_dir = cfg.test_dir.clone().unwrap_or_else(|| out.join("test_data"));
    let test_seed = data.test_seed.unwrap_or(cfg.seed.wrapping_add(1));
    let test = make_dataset(&data.pde, &[top], &[data.test_count], test_seed, &test_dir)?;

    let mut preds = Vec::new();
    for run in 0..cfg.runs {
        let mut run_cfg = cfg.clone();
        apply_overrides(&mut run_cfg, Some(cfg.seed.wrapping_add(run as u64)), None);
        let run_dir = out.join(format!("run_{run}"));
        let ckpt = run_training(&run_cfg, &run_dir, false)?;
        let state = load_checkpoint(&ckpt)?;
        let mode = state.model.config().fidelity_mode;
        let tag = cfg.method_tag.clone().unwrap_or_else(|| default_tag(mode, cfg.sampler.ensemble_k));
        let pred_dir = run_dir.join("predictions");
        predict_test_set(&state, &test, &cfg.sampler, Some(top), run_cfg.seed, &tag, &pred_dir)?;
        preds.push(pred_dir);
    }
    evaluate(&preds, &test_dir, &out.join("report"), 3)
}
