use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Manifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_match_csv, EvalReport};
use crate::fixtures::Fixture;
use crate::losses::LossName;
use crate::numerics::mix_seed;
use crate::policy::TabularPolicy;
use crate::samplers::Strategy;
use crate::training::{
    generate_dataset_with, read_jsonl, train_offline, train_online, write_jsonl, write_trace_csv, NoiseSpec,
    PreferenceRecord, TrainConfig, TrainTrace, TraceRow,
};
use crate::verify::{run_checks, VerifyReport};

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn manifest_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_trace(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace_csv(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Generates the dataset and its manifest; returns the manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    let f = cfg.fixture()?;
    prepare_dir(cfg)?;
    let d = &cfg.dataset;
    let records = generate_dataset_with(&f.env, &f.proposal, d.candidates, d.n_records, d.noise, d.judge, d.seed)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&path)?);
    write_jsonl(&records, &mut w)?;
    w.flush()?;
    drop(w);
    let mut m = Manifest::new("dataset", cfg, d.seed);
    m.record_count = Some(records.len());
    m.add_file(&path)?;
    m.write(&manifest_path(&path))?;
    log::info!("wrote {} records to {}", records.len(), path.display());
    Ok(m)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<PreferenceRecord>> {
    let path = cfg.dataset_path();
    let file = File::open(&path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e} (run gen-data first)", path.display()),
        ))
    })?;
    read_jsonl(BufReader::new(file))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub manifest: Manifest,
    pub last: Option<TraceRow>,
}

/// Trains from the reference and writes the checkpoint, trace CSV, the
/// reference and optimal policies, and a run manifest. A diverged run still
/// writes its partial trace before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let f = cfg.fixture()?;
    let dir = prepare_dir(cfg)?;
    let result = if cfg.train.online {
        train_online(f.context(), &cfg.train)
    } else if cfg.train.loss.name == LossName::NllExact && !cfg.dataset_path().exists() {
        train_offline(f.context(), &[], &cfg.train)
    } else {
        let data = load_dataset(cfg)?;
        train_offline(f.context(), &data, &cfg.train)
    };
    let trace_path = dir.join("trace.csv");
    let (policy, trace) = match result {
        Ok(v) => v,
        Err(Error::DivergenceDetected { step, reason, trace }) => {
            write_trace(&trace, &trace_path)?;
            let mut m = Manifest::new("train_diverged", cfg, cfg.train.seed);
            m.add_file(&trace_path)?;
            m.write(&dir.join("run.manifest.json"))?;
            return Err(Error::DivergenceDetected { step, reason, trace });
        }
        Err(e) => return Err(e),
    };
    write_trace(&trace, &trace_path)?;
    let ext = cfg.checkpoint_format.extension();
    let checkpoint = dir.join(format!("checkpoint.{ext}"));
    policy.save(&checkpoint)?;
    let reference = dir.join(format!("reference.{ext}"));
    f.reference.save(&reference)?;
    let optimal = dir.join(format!("optimal.{ext}"));
    f.optimal()?.save(&optimal)?;

    let mut m = Manifest::new("train", cfg, cfg.train.seed);
    for p in [&trace_path, &checkpoint, &reference, &optimal] {
        m.add_file(p)?;
    }
    m.write(&dir.join("run.manifest.json"))?;
    Ok(TrainOutcome {
        checkpoint,
        trace: trace_path,
        manifest: m,
        last: trace.last().cloned(),
    })
}

/// Runs the identity checks and writes `verify_report.json`. The caller
/// decides the exit status from `passed`.
pub fn cmd_verify(cfg: &ExperimentConfig, corrupt_gradient: bool) -> Result<VerifyReport> {
    let f = cfg.fixture()?;
    let dir = prepare_dir(cfg)?;
    let report = run_checks(&f.env, &f.reference, &f.proposal, &cfg.verify, corrupt_gradient)?;
    let path = dir.join("verify_report.json");
    write_json(&report, &path)?;
    let mut m = Manifest::new("verify", cfg, cfg.verify.seed);
    m.add_file(&path)?;
    m.write(&dir.join("verify.manifest.json"))?;
    Ok(report)
}

/// `reference` and `optimal` name the fixture's policies; anything else is
/// a checkpoint path.
fn resolve_policy(f: &Fixture, what: &str) -> Result<TabularPolicy> {
    let p = match what {
        "reference" => f.reference.clone(),
        "optimal" => f.optimal()?,
        path => TabularPolicy::load(Path::new(path))?,
    };
    if p.shape() != f.env.shape() {
        return Err(Error::ShapeMismatch {
            expected: f.env.shape(),
            got: p.shape(),
        });
    }
    Ok(p)
}

/// Matches `a` against `b`; writes `eval_report.json` and `matches.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, a: &str, b: &str) -> Result<EvalReport> {
    let f = cfg.fixture()?;
    let pa = resolve_policy(&f, a)?;
    let pb = resolve_policy(&f, b)?;
    let dir = prepare_dir(cfg)?;
    let (report, logs) = evaluate(&f.env, &pa, &pb, &f.reference, cfg.beta_star, &cfg.eval)?;
    let report_path = dir.join("eval_report.json");
    write_json(&report, &report_path)?;
    let csv_path = dir.join("matches.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    write_match_csv(&logs, &mut w)?;
    w.flush()?;
    drop(w);
    let mut m = Manifest::new("eval", cfg, cfg.eval.seed);
    m.add_file(&report_path)?;
    m.add_file(&csv_path)?;
    m.write(&dir.join("eval.manifest.json"))?;
    Ok(report)
}

pub const ABLATION_HEADER: [&str; 12] = [
    "experiment",
    "loss",
    "strategy",
    "M",
    "seed",
    "steps",
    "final_loss",
    "exact_nll",
    "kl_to_pistar",
    "expected_reward",
    "noise_selected",
    "noise_uniform",
];

/// One trained cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: String,
    pub loss: LossName,
    pub strategy: Strategy,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub exact_nll: f64,
    pub kl_to_pistar: f64,
    pub expected_reward: f64,
    /// Noise selections after the first epoch.
    pub noise_selected: usize,
    /// Expected count of the same under uniform choice.
    pub noise_uniform: f64,
}

struct Cell {
    experiment: &'static str,
    train: TrainConfig,
    noise: NoiseSpec,
    data_seed: u64,
    run: u64,
}

fn run_cell(cfg: &ExperimentConfig, f: &Fixture, cell: &Cell) -> Result<AblationRow> {
    let d = &cfg.dataset;
    let data = generate_dataset_with(&f.env, &f.proposal, d.candidates, d.n_records, cell.noise, d.judge, cell.data_seed)?;
    let (_, trace) = train_offline(f.context(), &data, &cell.train)?;
    let last = trace.last().cloned().unwrap_or(TraceRow {
        step: 0,
        loss: f64::NAN,
        grad_norm: 0.0,
        exact_nll: f64::NAN,
        kl_to_pistar: f64::NAN,
        expected_reward: f64::NAN,
    });
    let later = trace.epochs.iter().skip(1);
    Ok(AblationRow {
        experiment: cell.experiment.into(),
        loss: cell.train.loss.name,
        strategy: cell.train.sampler.strategy,
        m: cell.train.loss.m,
        seed: cell.run,
        steps: trace.rows.len(),
        final_loss: last.loss,
        exact_nll: last.exact_nll,
        kl_to_pistar: last.kl_to_pistar,
        expected_reward: last.expected_reward,
        noise_selected: later.clone().map(|e| e.noise_selected).sum(),
        noise_uniform: later.map(|e| e.uniform_expected).sum(),
    })
}

/// Runs the sampling-strategy grid over `M` values and seeds, then the
/// injected-noise comparison between MC-PO and DPO with the noise
/// candidate forced as the negative. Writes `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let f = cfg.fixture()?;
    let dir = prepare_dir(cfg)?;
    let a = &cfg.ablate;
    let mut cells = Vec::new();
    for &m in &a.m_values {
        for &strategy in &a.strategies {
            for s in 0..a.seeds as u64 {
                let mut train = cfg.train.clone();
                train.loss.name = LossName::Mcpo;
                train.loss.m = m;
                train.sampler.strategy = strategy;
                train.seed = mix_seed(cfg.train.seed, s);
                cells.push(Cell {
                    experiment: "strategy",
                    train,
                    noise: NoiseSpec::default(),
                    data_seed: mix_seed(cfg.dataset.seed, s),
                    run: s,
                });
            }
        }
    }
    if a.noise {
        let noise = NoiseSpec {
            enabled: true,
            ..cfg.dataset.noise
        };
        for s in 0..a.seeds as u64 {
            for (name, forced) in [(LossName::Mcpo, false), (LossName::Dpo, true)] {
                let mut train = cfg.train.clone();
                train.loss.name = name;
                train.loss.m = 1;
                train.sampler.strategy = Strategy::Mc;
                train.force_noise_negative = forced;
                train.seed = mix_seed(cfg.train.seed, s);
                cells.push(Cell {
                    experiment: "noise",
                    train,
                    noise,
                    data_seed: mix_seed(cfg.dataset.seed, s),
                    run: s,
                });
            }
        }
    }
    let rows: Vec<AblationRow> = cells.par_iter().map(|c| run_cell(cfg, &f, c)).collect::<Result<_>>()?;

    let path = dir.join("ablation.csv");
    let mut out = csv::Writer::from_path(&path)?;
    out.write_record(ABLATION_HEADER)?;
    for r in &rows {
        out.write_record([
            r.experiment.clone(),
            r.loss.to_string(),
            r.strategy.to_string(),
            r.m.to_string(),
            r.seed.to_string(),
            r.steps.to_string(),
            r.final_loss.to_string(),
            r.exact_nll.to_string(),
            r.kl_to_pistar.to_string(),
            r.expected_reward.to_string(),
            r.noise_selected.to_string(),
            r.noise_uniform.to_string(),
        ])?;
    }
    out.flush()?;
    drop(out);
    let mut m = Manifest::new("ablate", cfg, cfg.train.seed);
    m.add_file(&path)?;
    m.write(&dir.join("ablation.manifest.json"))?;
    Ok(rows)
}
