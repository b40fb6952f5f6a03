//! The CLI commands. Each writes its artifacts under the configured output
//! directory and returns what the binary prints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::gradcheck::{gradcheck_model, run_gradcheck};
use super::train::{prepare_data, resolve_model, train_run, PreparedData};
use crate::autodiff::GradCheckConfig;
use crate::error::{Error, Result};
use crate::gating::{sweep_positions, GatingConfig, GatingVariant};
use crate::metrics::{read_report_csv, EpochRecord, RunValue, SuiteReport};
use crate::model::{self, gating_param_count, param_count};
use crate::params::ParamStore;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const ARTIFACT_FILE: &str = "artifact.json";
pub const PARAMS_FILE: &str = "params.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const GATES_FILE: &str = "gates.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Everything needed to audit or replay one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub dataset: String,
    /// Variant label (a variant name, or a sweep position label).
    pub variant: String,
    /// Column of the label in the experiment's report.
    pub column: usize,
    pub seed: u64,
    /// Resolved config of this run; `seeds` lists only this seed.
    pub config: String,
    /// Metric names in the task's reporting order.
    pub metrics: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub params_file: String,
    pub wall_clock_secs: f64,
}

/// Runs and the report built from their best epochs.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub artifacts: Vec<RunArtifact>,
    pub report: SuiteReport,
    pub out: PathBuf,
}

impl Experiment {
    /// Report table, or a note when no run had an epoch to select.
    pub fn render(&self) -> Result<String> {
        if self.report.is_empty() {
            return Ok(format!("no epochs were run; artifacts in {}\n", self.out.display()));
        }
        self.report.to_table()
    }
}

struct Job {
    label: String,
    column: usize,
    cfg: ExperimentConfig,
    seed: u64,
}

fn run_job(job: &Job, data: &PreparedData, host: Option<&ParamStore>) -> Result<RunArtifact> {
    let dir = job.cfg.out.join(&job.label).join(format!("seed-{}", job.seed));
    fs::create_dir_all(&dir)?;
    let mut snapshot = job.cfg.clone();
    snapshot.seeds = vec![job.seed];
    let config = snapshot.to_config_string();
    fs::write(dir.join(CONFIG_FILE), &config)?;

    let started = Instant::now();
    let mut gate_file = match job.cfg.dump_gates {
        true => Some(std::io::BufWriter::new(fs::File::create(dir.join(GATES_FILE))?)),
        false => None,
    };
    let sink = gate_file.as_mut().map(|f| f as &mut dyn std::io::Write);
    let run = train_run(&job.cfg, data, job.seed, host, sink)?;
    if let Some(mut f) = gate_file {
        std::io::Write::flush(&mut f)?;
    }
    let wall_clock_secs = started.elapsed().as_secs_f64();

    fs::write(dir.join(RECORDS_FILE), run.record.to_jsonl()?)?;
    model::save_params(&dir.join(PARAMS_FILE), &run.params)?;
    let artifact = RunArtifact {
        dataset: data.task.name.clone(),
        variant: job.label.clone(),
        column: job.column,
        seed: job.seed,
        config,
        metrics: data.task.metrics.iter().map(|m| m.to_string()).collect(),
        best_epoch: run.record.best_epoch(),
        epochs: run.record.epochs,
        params_file: PARAMS_FILE.into(),
        wall_clock_secs,
    };
    fs::write(dir.join(ARTIFACT_FILE), serde_json::to_string_pretty(&artifact)? + "\n")?;
    Ok(artifact)
}

/// Runs jobs on up to `available_parallelism` threads; results keep job order.
fn run_jobs(jobs: &[Job], data: &PreparedData, host: Option<&ParamStore>) -> Result<Vec<RunArtifact>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunArtifact>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(job, data, host);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Best-epoch metric values of every run, aggregated per dataset and label.
pub fn report_from_artifacts(artifacts: &[RunArtifact]) -> Result<SuiteReport> {
    let mut values = Vec::new();
    for a in artifacts {
        let Some(best) = a.best_epoch.map(|i| &a.epochs[i]) else { continue };
        for m in &a.metrics {
            let value = *best
                .metrics
                .get(m)
                .ok_or_else(|| Error::InvalidArgument(format!("run {}/{}: metric {m} missing", a.variant, a.seed)))?;
            values.push(RunValue {
                dataset: a.dataset.clone(),
                variant: a.variant.clone(),
                metric: m.clone(),
                run: a.seed.to_string(),
                value,
            });
        }
    }
    SuiteReport::from_runs(&values)
}

fn run_experiment(base: &ExperimentConfig, variants: Vec<(String, ExperimentConfig)>) -> Result<Experiment> {
    for (_, cfg) in &variants {
        cfg.validate()?;
    }
    let data = prepare_data(base)?;
    for (_, cfg) in &variants {
        resolve_model(cfg, &data)?;
    }
    let host = base.host_params.as_deref().map(model::load_params).transpose()?;
    let jobs: Vec<Job> = variants
        .into_iter()
        .enumerate()
        .flat_map(|(column, (label, cfg))| {
            cfg.seeds.clone().into_iter().map(move |seed| Job { label: label.clone(), column, cfg: cfg.clone(), seed })
        })
        .collect();
    let artifacts = run_jobs(&jobs, &data, host.as_ref())?;
    let report = report_from_artifacts(&artifacts)?;
    fs::create_dir_all(&base.out)?;
    fs::write(base.out.join(SUMMARY_FILE), report.to_csv()?)?;
    let exp = Experiment { artifacts, report, out: base.out.clone() };
    fs::write(base.out.join(REPORT_FILE), exp.render()?)?;
    Ok(exp)
}

/// Trains the configured variant once per seed.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Experiment> {
    run_experiment(cfg, vec![(cfg.variant.to_string(), cfg.clone())])
}

/// Trains all three variants on the same data and seeds.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<Experiment> {
    let variants = GatingVariant::ALL
        .into_iter()
        .map(|v| (v.to_string(), ExperimentConfig { variant: v, ..cfg.clone() }))
        .collect();
    run_experiment(cfg, variants)
}

/// Neuromodulated gating at the scaled start and end positions.
pub fn cmd_sweep_positions(cfg: &ExperimentConfig) -> Result<Experiment> {
    let (start, end) = sweep_positions(cfg.layers);
    if start == end {
        return Err(Error::Config(format!(
            "{} layers map both sweep positions to layer {start}",
            cfg.layers
        )));
    }
    let variants = [("start", start), ("end", end)]
        .into_iter()
        .map(|(name, layer)| {
            let c = ExperimentConfig {
                variant: GatingVariant::NeuromodulatedGating,
                positions: Some(vec![layer]),
                ..cfg.clone()
            };
            (format!("{name}-layer-{layer}"), c)
        })
        .collect();
    run_experiment(cfg, variants)
}

/// Parameter totals for the three variants under the configured geometry.
pub fn cmd_paramcount(cfg: &ExperimentConfig) -> Result<String> {
    let task = cfg.task_spec()?;
    let vocab = match cfg.vocab_size {
        Some(v) => v,
        None => prepare_data(cfg)?.vocab.len(),
    };
    let model = cfg.model_config(vocab, task.output_units)?;
    let positions = cfg.resolved_positions();
    let mut out = String::new();
    writeln!(
        out,
        "profile {} (H={} L={} A={} I={} vocab={} outputs={}), gating blocks at {:?}, depth {}",
        cfg.profile, model.hidden, model.num_layers, model.heads, model.intermediate, model.vocab_size,
        model.output_units, positions, cfg.gb_depth
    )
    .unwrap();
    writeln!(out, "{:<28}{:>14}{:>14}", "variant", "total", "gating").unwrap();
    for v in GatingVariant::ALL {
        let gating = GatingConfig::for_variant(v, positions.clone(), cfg.gb_depth);
        gating.validate(model.num_layers)?;
        writeln!(out, "{:<28}{:>14}{:>14}", v.as_str(), param_count(&model, &gating), gating_param_count(&model, &gating))
            .unwrap();
    }
    Ok(out)
}

/// Finite-difference check of every variant; returns the report and whether
/// all passed.
pub fn cmd_gradcheck(seed: u64) -> Result<(String, bool)> {
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let m = gradcheck_model();
    let mut out = String::new();
    writeln!(
        out,
        "grad check: H={} L={} A={} I={}, eps {:e}, tolerance {:e}, <= {} coordinates per tensor, dropout frozen",
        m.hidden, m.num_layers, m.heads, m.intermediate, cfg.eps, cfg.tolerance, cfg.max_coords
    )
    .unwrap();
    let mut all = true;
    for (variant, report) in run_gradcheck(seed, &cfg)? {
        all &= report.passed;
        let coords: usize = report.params.iter().map(|p| p.coords_checked).sum();
        writeln!(
            out,
            "{:<28}{}  max rel err {:.3e} over {} tensors / {} coordinates",
            variant.as_str(),
            if report.passed { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.params.len(),
            coords
        )
        .unwrap();
    }
    Ok((out, all))
}

/// Report from a summary or per-run CSV.
pub fn cmd_aggregate(path: &Path) -> Result<SuiteReport> {
    read_report_csv(path)
}

/// Rebuilds the report from `dir/<label>/seed-*/artifact.json`.
pub fn cmd_report(dir: &Path) -> Result<SuiteReport> {
    let mut paths = Vec::new();
    for label in fs::read_dir(dir)? {
        let label = label?.path();
        if !label.is_dir() {
            continue;
        }
        for run in fs::read_dir(&label)? {
            let p = run?.path().join(ARTIFACT_FILE);
            if p.is_file() {
                paths.push(p);
            }
        }
    }
    if paths.is_empty() {
        return Err(Error::Config(format!("no {ARTIFACT_FILE} files under {}", dir.display())));
    }
    paths.sort();
    let mut artifacts = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = fs::read_to_string(p)?;
        artifacts.push(serde_json::from_str::<RunArtifact>(&text).map_err(|e| Error::parse(p, e.line(), e.to_string()))?);
    }
    artifacts.sort_by_key(|a| (a.column, a.seed));
    report_from_artifacts(&artifacts)
}
