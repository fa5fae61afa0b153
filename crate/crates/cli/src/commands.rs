use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use lossforge::corpus::{parse_formula_lines, FormulaLine, DISCOVERED};
use lossforge::reject::RejectionContext;
use lossforge::search::{run_search_with, CandidateRecord, RunOptions, VariantReport, TOP_K};
use lossforge::{run_ablation, InputKind, Metric, ProxyTask, SearchConfig, TaskConfig, TaskKind};
use serde::Serialize;

use crate::config::{AblationSection, Resolved, SeedSource};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const RUNLOG: &str = "runlog.jsonl";
pub const HISTORY: &str = "history.csv";
pub const BEST: &str = "best.txt";
pub const DATASET: &str = "dataset.csv";
pub const SUMMARY: &str = "ablation_summary.csv";

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Completed,
    Aborted,
}

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub lossforge_core: &'static str,
    pub lossforge_cli: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct Seeds {
    pub search: u64,
    pub source: SeedSource,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config: SearchConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
    pub seeds: Seeds,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub versions: Versions,
    pub outputs: Vec<PathBuf>,
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

impl RunManifest {
    fn new(command: &'static str, r: &Resolved, outputs: Vec<PathBuf>) -> Self {
        RunManifest {
            command,
            config: r.search.clone(),
            ablation: None,
            seeds: Seeds { search: r.search.seed, source: r.seed_source },
            started_unix: now_unix(),
            finished_unix: None,
            status: Status::Running,
            abort_reason: None,
            versions: Versions { lossforge_core: lossforge::VERSION, lossforge_cli: env!("CARGO_PKG_VERSION") },
            outputs,
        }
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&dir.join(MANIFEST), &(text + "\n"))
    }

    fn finish(&mut self, dir: &Path, abort_reason: Option<String>) -> Result<(), CliError> {
        self.finished_unix = Some(now_unix());
        self.status = if abort_reason.is_some() { Status::Aborted } else { Status::Completed };
        self.abort_reason = abort_reason;
        self.write(dir)
    }
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn label(task: &TaskConfig) -> String {
    format!("{}/{}", task.kind, task.metric)
}

pub fn search(r: &Resolved, out: &Path, dump_dataset: bool) -> Result<(), CliError> {
    prepare_dir(out)?;
    let mut outputs: Vec<PathBuf> = [MANIFEST, RUNLOG, HISTORY, BEST].iter().map(|f| out.join(f)).collect();
    if dump_dataset {
        outputs.push(out.join(DATASET));
    }
    let mut manifest = RunManifest::new("search", r, outputs);
    manifest.write(out)?;

    let cfg = &r.search;
    if dump_dataset {
        let task = cfg.task.build(cfg.seed).map_err(|e| CliError::usage(e.to_string()))?;
        let path = out.join(DATASET);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        task.write_csv(BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
    }

    let log_path = out.join(RUNLOG);
    let mut runlog = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut write_err = None;
    let mut sink = |rec: &CandidateRecord| {
        if write_err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(runlog, "{line}") {
            write_err = Some(e);
        }
        log::info!("#{} {:?} fitness {:.4} {}", rec.index, rec.origin, rec.fitness, rec.formula);
    };
    let run = run_search_with(cfg, &RunOptions::default(), &mut sink).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path, e));
    }
    runlog.flush().map_err(|e| io_err(&log_path, e))?;

    write_file(&out.join(HISTORY), &run.history_csv())?;
    let mut best = format!(
        "# top {TOP_K} of {} proxy evaluations, seed {}\n",
        run.counters.proxy_evals, cfg.seed
    );
    for (rank, e) in run.top(TOP_K).iter().enumerate() {
        best.push_str(&format!("# rank {} fitness {:.6}\n{}: {}\n", rank + 1, e.fitness, label(&cfg.task), e.loss));
    }
    write_file(&out.join(BEST), &best)?;

    let c = run.counters;
    println!(
        "explored {} rejected {} cache_hits {} proxy_evals {} best {:.6}",
        c.explored,
        c.rejected,
        c.cache_hits,
        c.proxy_evals,
        run.best.as_ref().and_then(|b| b.fitness()).unwrap_or(0.0)
    );
    manifest.finish(out, run.aborted.clone())?;
    match run.aborted {
        Some(reason) => Err(CliError::aborted(reason)),
        None => Ok(()),
    }
}

pub fn ablation(r: &Resolved, out: &Path) -> Result<(), CliError> {
    let section = r.ablation.clone().unwrap_or_default();
    if section.variants.is_empty() {
        return Err(CliError::usage("ablation needs at least one variant"));
    }
    if !(section.wall_clock_secs > 0.0 && section.wall_clock_secs.is_finite()) {
        return Err(CliError::usage("`ablation.wall_clock_secs` must be positive"));
    }
    prepare_dir(out)?;
    let mut outputs: Vec<PathBuf> = vec![out.join(MANIFEST), out.join(SUMMARY)];
    outputs.extend(section.variants.iter().map(|v| out.join(format!("ablation_{}.csv", v.slug()))));
    let mut manifest = RunManifest::new("ablation", r, outputs);
    manifest.ablation = Some(section.clone());
    manifest.write(out)?;

    let reports = run_ablation(&r.search, &section.variants, Duration::from_secs_f64(section.wall_clock_secs))
        .map_err(|e| CliError::usage(e.to_string()))?;
    for rep in &reports {
        write_file(&out.join(format!("ablation_{}.csv", rep.variant.slug())), &rep.curve_csv())?;
    }
    let summary = summary_csv(&reports);
    write_file(&out.join(SUMMARY), &summary)?;
    print!("{summary}");

    let aborted: Vec<String> =
        reports.iter().filter_map(|r| r.aborted.as_ref().map(|a| format!("{}: {a}", r.variant))).collect();
    let reason = (!aborted.is_empty()).then(|| aborted.join("; "));
    manifest.finish(out, reason.clone())?;
    match reason {
        Some(reason) => Err(CliError::aborted(reason)),
        None => Ok(()),
    }
}

pub fn summary_csv(reports: &[VariantReport]) -> String {
    let mut s = String::from(
        "variant,explored,rejected,cache_hits,proxy_evals,best,positive_found,elapsed_secs,timed_out,aborted\n",
    );
    for r in reports {
        let c = r.counters;
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{:.3},{},{}\n",
            r.variant,
            c.explored,
            c.rejected,
            c.cache_hits,
            c.proxy_evals,
            r.best,
            r.positive_found,
            r.elapsed_secs,
            r.timed_out,
            r.aborted.is_some()
        ));
    }
    s
}

/// What a checked line is screened against.
fn target_for(line: &FormulaLine, forced: &Resolved, task_flag: bool, metric_flag: bool) -> (TaskConfig, Metric) {
    let inferred = match line.loss.branches().iter().map(|b| b.inputs).collect::<Vec<_>>().as_slice() {
        [InputKind::Areas] => TaskKind::Box,
        [InputKind::Dense, InputKind::Areas] => TaskKind::Det,
        _ => TaskKind::Seg,
    };
    let kind = if task_flag { forced.search.task.kind } else { inferred };
    let task = if kind == forced.search.task.kind { forced.search.task.clone() } else { TaskConfig::default_for(kind) };
    let metric = if metric_flag {
        forced.search.task.metric
    } else {
        line.metric().filter(|m| kind.supports(*m)).unwrap_or_else(|| kind.default_metric())
    };
    (task, metric)
}

fn context_for<'a>(
    cache: &'a mut HashMap<(TaskKind, Metric), (ProxyTask, RejectionContext)>,
    base: &SearchConfig,
    task: TaskConfig,
    metric: Metric,
) -> Result<&'a (ProxyTask, RejectionContext), CliError> {
    if !cache.contains_key(&(task.kind, metric)) {
        let mut cfg = base.clone();
        cfg.task = TaskConfig { metric, ..task };
        let built = cfg.task.build(cfg.seed).map_err(|e| CliError::usage(e.to_string()))?;
        let ctx = cfg.rejection_context(&built).map_err(|e| CliError::usage(e.to_string()))?;
        cache.insert((cfg.task.kind, metric), (built, ctx));
    }
    Ok(&cache[&(task.kind, metric)])
}

/// Prints `line,label,task,metric,g,result` for every formula. Lines that
/// fail to parse are reported on stderr and make the command fail after all
/// other lines were checked.
pub fn reject_check(
    r: &Resolved,
    file: Option<&Path>,
    task_flag: bool,
    metric_flag: bool,
) -> Result<(), CliError> {
    let text = match file {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?,
        None => DISCOVERED.to_owned(),
    };
    let mut cache = HashMap::new();
    let mut failed = 0;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "line,label,task,metric,g,result");
    for (n, parsed) in parse_formula_lines(&text) {
        let line = match parsed {
            Ok(l) => l,
            Err(e) => {
                eprintln!("{e}");
                failed += 1;
                continue;
            }
        };
        let (task, metric) = target_for(&line, r, task_flag, metric_flag);
        let (built, ctx) = context_for(&mut cache, &r.search, task, metric)?;
        let label = line.label.clone().unwrap_or_default();
        let (g, result) = match built.check_loss(&line.loss).and_then(|_| ctx.evaluate(&line.loss)) {
            Ok(rep) => (format!("{:.6}", rep.g), if rep.passed { "pass" } else { "fail" }),
            Err(e) => {
                eprintln!("line {n}: {e}");
                (String::new(), "error")
            }
        };
        let _ = writeln!(out, "{n},{label},{},{metric},{g},{result}", built.kind);
    }
    if failed > 0 {
        return Err(CliError::usage(format!("{failed} line(s) failed to parse")));
    }
    Ok(())
}

