use std::io::Write;
use std::path::{Path, PathBuf};

use became_core::lab::{self, LabRow};
use became_core::pipeline::metrics::{self, mean_std};
use became_core::pipeline::runner::upper_bound_from;
use became_core::pipeline::sweep::{self, SweepReport};
use became_core::pipeline::{rundir, RunDir};
use became_core::{AccuracyMatrix, MetricReport, RunKind};

use crate::config::{ExperimentConfig, RunManifest};
use crate::error::CliError;

/// Directory of one method and seed below the experiment's output directory.
pub fn run_path(output_dir: &Path, kind: RunKind, seed: u64) -> PathBuf {
    output_dir.join(kind.name()).join(format!("seed_{seed}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub kind: RunKind,
    pub per_seed: Vec<(u64, MetricReport)>,
}

impl MethodSummary {
    /// Population mean and standard deviation of one metric over seeds;
    /// `None` when any seed lacks it.
    pub fn stat(&self, metric: usize) -> Option<(f64, f64)> {
        let xs: Option<Vec<f64>> = self.per_seed.iter().map(|(_, m)| m.values()[metric]).collect();
        xs.map(|xs| mean_std(&xs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub methods: Vec<MethodSummary>,
}

impl RunSummary {
    pub fn method(&self, kind: RunKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.kind == kind)
    }

    /// Metrics in percent, `mean ± std` over seeds.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16}", "method");
        for name in MetricReport::NAMES {
            out += &format!("{:>16}", name.to_uppercase());
        }
        out.push('\n');
        for m in &self.methods {
            out += &format!("{:<16}", m.kind.name());
            for k in 0..MetricReport::NAMES.len() {
                let cell = match m.stat(k) {
                    Some((mean, std)) => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std),
                    None => "-".to_string(),
                };
                out += &format!("{cell:>16}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let fail = |e: csv::Error| CliError::runtime("summary", became_core::Error::Format {
            field: path.display().to_string(),
            detail: e.to_string(),
        });
        let mut w = csv::Writer::from_path(path).map_err(fail)?;
        w.write_record(["method", "metric", "mean", "std", "seeds"]).map_err(fail)?;
        for m in &self.methods {
            for (k, name) in MetricReport::NAMES.iter().enumerate() {
                let (mean, std) = m
                    .stat(k)
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .unwrap_or_default();
                w.write_record([m.kind.name(), name, &mean, &std, &m.per_seed.len().to_string()])
                    .map_err(fail)?;
            }
        }
        w.flush().map_err(|e| CliError::runtime("summary", became_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }))
    }
}

type SeedResult = Result<Vec<(RunKind, MetricReport)>, CliError>;

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedResult {
    let stream = cfg.build_stream(seed)?;
    let mut upper = None;
    let mut out = Vec::new();
    for kind in cfg.methods() {
        let id = format!("{}/seed_{seed}", kind.name());
        let fail = |e| CliError::runtime(id.clone(), e);
        let dir = RunDir::create(run_path(&cfg.output_dir, kind, seed)).map_err(fail)?;
        let manifest = RunManifest {
            kind,
            seed,
            experiment: cfg.clone(),
        };
        rundir::write_json(&dir.config(), &manifest).map_err(fail)?;
        log::info!("starting {id}");
        let mut record = became_core::pipeline::run(kind, &stream, &cfg.pipeline, seed, Some(&dir)).map_err(fail)?;
        if kind == RunKind::Multitask {
            upper = Some(upper_bound_from(&record).map_err(fail)?);
        } else if let Some(ub) = &upper {
            record.accuracy.set_upper_bound(ub.clone()).map_err(fail)?;
            record.write_reports(&dir).map_err(fail)?;
        }
        out.push((kind, record.metrics().map_err(fail)?));
    }
    Ok(out)
}

/// Runs every method for every seed, `jobs` seeds at a time.
pub fn cmd_run(config: &Path, dry_run: bool, jobs: usize, out: &mut dyn Write) -> Result<Option<RunSummary>, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    if dry_run {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        writeln!(out, "{text}").ok();
        return Ok(None);
    }
    let jobs = jobs.max(1);
    let mut per_seed: Vec<Option<SeedResult>> = (0..cfg.seeds.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in cfg.seeds.chunks(jobs).enumerate() {
        let results: Vec<_> = std::thread::scope(|s| {
            let cfg = &cfg;
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(cfg, seed))).collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        });
        for (k, r) in results.into_iter().enumerate() {
            per_seed[chunk_idx * jobs + k] = Some(r);
        }
    }
    let mut methods: Vec<MethodSummary> = cfg
        .methods()
        .into_iter()
        .map(|kind| MethodSummary {
            kind,
            per_seed: Vec::new(),
        })
        .collect();
    for (seed, result) in cfg.seeds.iter().zip(per_seed) {
        for (kind, report) in result.expect("every seed ran")? {
            let m = methods.iter_mut().find(|m| m.kind == kind).expect("known method");
            m.per_seed.push((*seed, report));
        }
    }
    // report the merging method first, as in the usual table layout
    methods.sort_by_key(|m| RunKind::ALL.iter().position(|k| *k == m.kind));
    let summary = RunSummary { methods };
    write!(out, "{}", summary.table()).ok();
    summary.write_csv(&cfg.output_dir.join("summary.csv"))?;
    Ok(Some(summary))
}

fn open_run(dir: &Path) -> Result<(RunDir, RunManifest), CliError> {
    let id = dir.display().to_string();
    let run = RunDir::open(dir).map_err(|e| CliError::runtime(id.clone(), e))?;
    let manifest: RunManifest = rundir::read_json(&run.config()).map_err(|e| CliError::runtime(id.clone(), e))?;
    manifest.experiment.validate()?;
    Ok((run, manifest))
}

/// Loss along the merge path of task `t`, written to `sweep_task_<t>.csv`.
pub fn cmd_sweep(dir: &Path, t: usize, step: f64, out: &mut dyn Write) -> Result<SweepReport, CliError> {
    let (run, manifest) = open_run(dir)?;
    let id = dir.display().to_string();
    let fail = |e| CliError::runtime(id.clone(), e);
    let stream = manifest.experiment.build_stream(manifest.seed)?;
    let spec = manifest.experiment.pipeline.network(&stream).map_err(fail)?;
    let report = sweep::lambda_sweep_experiment(&spec, &stream, &run, t, step).map_err(fail)?;
    report.write_csv(&run.sweep(t)).map_err(fail)?;
    writeln!(
        out,
        "task {t}: lambda* = {:.4}, grid arg-min {:.2} (surrogate {:.2}), negative curvature at {} of {} points",
        report.lambda_star,
        report.cumulative_argmin,
        report.surrogate_argmin,
        report.convexity_violations.len(),
        report.rows.len().saturating_sub(2)
    )
    .ok();
    if report.convex_fraction() < 0.5 {
        return Err(CliError::Assertion(format!(
            "cumulative loss of task {t} is mostly concave along the merge path (violations at {:?})",
            report.convexity_violations
        )));
    }
    Ok(report)
}

/// 2-plane loss grid around checkpoints of task `t`.
pub fn cmd_landscape(dir: &Path, t: usize, resolution: usize, margin: f64, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let (run, manifest) = open_run(dir)?;
    let id = dir.display().to_string();
    let fail = |e| CliError::runtime(id.clone(), e);
    let stream = manifest.experiment.build_stream(manifest.seed)?;
    let spec = manifest.experiment.pipeline.network(&stream).map_err(fail)?;
    let points = sweep::landscape(&spec, &stream, &run, t, resolution, margin).map_err(fail)?;
    let path = run.landscape(t);
    sweep::write_landscape_csv(&path, t, &points).map_err(fail)?;
    writeln!(out, "wrote {} points to {}", points.len(), path.display()).ok();
    Ok(path)
}

fn write_lab_csv(path: &Path, rows: &[LabRow]) -> Result<(), CliError> {
    let fail = |detail: String| {
        CliError::runtime("lab", became_core::Error::Format {
            field: path.display().to_string(),
            detail,
        })
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(e.to_string()))?;
    w.write_record([
        "instance", "dim", "tasks", "lambda_star", "loss_at_0", "loss_at_star", "loss_at_1", "slope_at_0",
        "slope_at_1", "second_derivative", "grid_lambda", "lemma_holds", "slope_0_ok", "slope_1_ok", "convex",
        "grid_agrees",
    ])
    .map_err(|e| fail(e.to_string()))?;
    for r in rows {
        let p = &r.report;
        w.write_record([
            r.instance.to_string(),
            r.dim.to_string(),
            r.tasks.to_string(),
            p.lambda_star.to_string(),
            p.loss_at_0.to_string(),
            p.loss_at_star.to_string(),
            p.loss_at_1.to_string(),
            p.slope_at_0.to_string(),
            p.slope_at_1.to_string(),
            p.second_derivative.to_string(),
            p.grid_lambda.to_string(),
            p.lemma_holds.to_string(),
            p.slope_0_ok.to_string(),
            p.slope_1_ok.to_string(),
            p.convex.to_string(),
            p.grid_agrees.to_string(),
        ])
        .map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(|e| fail(e.to_string()))
}

/// Quadratic lab battery; fails listing the instances that break a hard check.
pub fn cmd_lab(seed: u64, instances: usize, report: &Path, out: &mut dyn Write) -> Result<Vec<LabRow>, CliError> {
    if instances == 0 {
        return Err(CliError::Config {
            key: "instances".into(),
            message: "must be at least 1".into(),
        });
    }
    let rows = lab::run_lab(seed, instances).map_err(|e| CliError::runtime("lab", e))?;
    write_lab_csv(report, &rows)?;
    let failed: Vec<usize> = rows.iter().filter(|r| !r.report.passes()).map(|r| r.instance).collect();
    let slope1 = rows.iter().filter(|r| !r.report.slope_1_ok).count();
    writeln!(
        out,
        "{} instances, {} failed, {} with a positive-side slope warning; report in {}",
        rows.len(),
        failed.len(),
        slope1,
        report.display()
    )
    .ok();
    if !failed.is_empty() {
        return Err(CliError::Assertion(format!("lab instances failed: {failed:?}")));
    }
    Ok(rows)
}

/// Metrics of a saved accuracy matrix.
pub fn cmd_metrics(path: &Path, out: &mut dyn Write) -> Result<MetricReport, CliError> {
    let id = path.display().to_string();
    let a = AccuracyMatrix::read_csv(path).map_err(|e| CliError::runtime(id.clone(), e))?;
    let report = metrics::metrics(&a).map_err(|e| CliError::runtime(id.clone(), e))?;
    writeln!(out, "metric,value").ok();
    for (name, v) in MetricReport::NAMES.iter().zip(report.values()) {
        writeln!(out, "{name},{}", v.map(|x| x.to_string()).unwrap_or_default()).ok();
    }
    if a.upper_bound().is_some() {
        let worst = metrics::tradeoff_identity_check(&a)
            .map_err(|e| CliError::runtime(id.clone(), e))?
            .into_iter()
            .fold(0.0f64, |m, r| m.max(r.abs()));
        if worst >= 1e-12 {
            return Err(CliError::Assertion(format!("trade-off identity residual {worst:e}")));
        }
    }
    Ok(report)
}
