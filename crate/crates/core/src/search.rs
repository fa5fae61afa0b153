//! The evolutionary search loop and the component ablation.
//!
//! Work proceeds in batches of `workers` offspring slots. Each slot selects
//! a parent, varies it until the rejection test passes and fingerprints the
//! result in parallel; the coordinator then resolves cache hits in slot
//! order, trains the remaining candidates in parallel and inserts everything
//! in slot order. A run is therefore reproducible for any fixed worker count.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{make_offspring, random_loss, Individual, OffspringPath, Population, REJECTION_RETRY_CAP};
use crate::expr::{structural_hash, MultiBranchLoss};
use crate::metrics::Metric;
use crate::proxy::{
    generate_box_task, generate_detection_task, generate_segmentation_task, train_and_score_with, ProxyTask,
    TaskKind,
};
use crate::reject::{capture_samples, DescentConfig, Fingerprint, FingerprintCache, RejectionContext, ETA};

/// Number of best losses averaged in the history curve.
pub const TOP_K: usize = 5;

const STREAM_CAPTURE: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_OFFSPRING: u64 = 3;

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | index);
    rng
}

/// Which proxy task to build and how large it is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub metric: Metric,
    /// Ignored by the box task.
    pub classes: usize,
    pub samples: usize,
    /// Image side; segmentation only.
    pub side: usize,
}

impl TaskConfig {
    pub fn segmentation() -> Self {
        TaskConfig { kind: TaskKind::Seg, metric: Metric::MIoU, classes: 4, samples: 64, side: 16 }
    }

    pub fn box_regression() -> Self {
        TaskConfig { kind: TaskKind::Box, metric: Metric::BoxIoU, classes: 1, samples: 200, side: 1 }
    }

    pub fn detection() -> Self {
        TaskConfig { kind: TaskKind::Det, metric: Metric::DetHit, classes: 2, samples: 400, side: 1 }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Seg => Self::segmentation(),
            TaskKind::Box => Self::box_regression(),
            TaskKind::Det => Self::detection(),
        }
    }

    pub fn build(&self, seed: u64) -> Result<ProxyTask> {
        let task = match self.kind {
            TaskKind::Seg => generate_segmentation_task(self.classes, self.samples, self.side, seed)?,
            TaskKind::Box => generate_box_task(self.samples, seed)?,
            TaskKind::Det => generate_detection_task(self.classes, self.samples, seed)?,
        };
        task.with_metric(self.metric)
    }
}

/// Search components that the ablation switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub rejection: bool,
    pub fingerprint: bool,
    pub early_stop: bool,
}

impl Components {
    pub const ALL: Components = Components { rejection: true, fingerprint: true, early_stop: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub task: TaskConfig,
    /// Initial population size K.
    pub population: usize,
    /// Recency window P.
    pub capacity: usize,
    /// Tournament fraction T.
    pub tournament: f64,
    /// Depth D of freshly initialized graphs.
    pub depth: usize,
    /// Rejection samples B.
    pub rejection_samples: usize,
    pub eta: f64,
    /// Proxy evaluations before the search stops.
    pub budget: usize,
    pub workers: usize,
    pub seed: u64,
    pub descent: DescentConfig,
    pub components: Components,
}

impl SearchConfig {
    pub fn new(task: TaskConfig, seed: u64) -> Self {
        SearchConfig {
            task,
            population: 20,
            capacity: 2500,
            tournament: 0.05,
            depth: 3,
            rejection_samples: 5,
            eta: ETA,
            budget: 500,
            workers: 1,
            seed,
            descent: DescentConfig::default(),
            components: Components::ALL,
        }
    }

    /// The rejection samples a search with this config screens against.
    pub fn rejection_context(&self, task: &ProxyTask) -> Result<RejectionContext> {
        let mut ctx = capture_samples(task, self.rejection_samples, &mut stream_rng(self.seed, STREAM_CAPTURE, 0))?;
        ctx.eta = self.eta;
        ctx.descent = self.descent.clone();
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("population", self.population),
            ("capacity", self.capacity),
            ("depth", self.depth),
            ("rejection_samples", self.rejection_samples),
            ("budget", self.budget),
            ("workers", self.workers),
            ("descent.iterations", self.descent.iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.tournament > 0.0 && self.tournament <= 1.0) {
            return Err(Error::Config(format!("`tournament` must lie in (0, 1], got {}", self.tournament)));
        }
        if !self.eta.is_finite() {
            return Err(Error::Config("`eta` must be finite".into()));
        }
        if !(self.descent.lr > 0.0 && self.descent.lr.is_finite()) || !(0.0..1.0).contains(&self.descent.momentum) {
            return Err(Error::Config("descent needs lr > 0 and momentum in [0, 1)".into()));
        }
        if !self.task.kind.supports(self.task.metric) {
            return Err(Error::Config(format!(
                "metric `{}` does not apply to task `{}`",
                self.task.metric, self.task.kind
            )));
        }
        Ok(())
    }
}

/// Stable 64-bit digest of a multi-branch loss.
pub fn loss_hash(loss: &MultiBranchLoss) -> u64 {
    loss.branches().iter().fold(0x9e37_79b9_7f4a_7c15, |h, b| h.rotate_left(17) ^ structural_hash(b))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Every candidate generated, rejected or not.
    pub explored: u64,
    pub rejected: u64,
    pub cache_hits: u64,
    pub proxy_evals: u64,
    /// Proxy trainings that hit a non-finite value.
    pub invalid: u64,
    pub inserted: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Init,
    Seeded,
    Copy,
    Reinit,
    Mutate,
}

impl From<OffspringPath> for Origin {
    fn from(p: OffspringPath) -> Self {
        match p {
            OffspringPath::Copy => Origin::Copy,
            OffspringPath::Reinit => Origin::Reinit,
            OffspringPath::Mutate => Origin::Mutate,
        }
    }
}

/// One admitted candidate, as written to the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// Insertion order, 0-based.
    pub index: u64,
    pub batch: u64,
    pub origin: Origin,
    pub hash: String,
    pub formula: String,
    pub fingerprint: Option<String>,
    pub g: Option<f64>,
    /// Candidates generated for this slot, including the admitted one.
    pub attempts: u64,
    pub cache_hit: bool,
    pub fitness: f64,
    pub invalid: bool,
    pub reject_ms: f64,
    pub eval_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub eval_index: u64,
    /// Mean fitness of the best [`TOP_K`] proxy-evaluated losses so far (of
    /// all of them before the fifth evaluation).
    pub top5_mean: f64,
    pub best: f64,
    pub explored: u64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub loss: MultiBranchLoss,
    pub fitness: f64,
    /// Insertion index of the evaluated individual.
    pub index: u64,
}

#[derive(Debug)]
pub struct SearchRun {
    pub population: Population,
    pub cache: FingerprintCache,
    pub counters: Counters,
    pub history: Vec<HistoryRow>,
    /// Every proxy-evaluated loss in evaluation order.
    pub evaluated: Vec<Evaluated>,
    /// Fittest inserted individual; ties go to the earliest.
    pub best: Option<Individual>,
    /// Diagnostic when the run stopped on a retry cap.
    pub aborted: Option<String>,
    /// Whether a wall-clock deadline ended the run.
    pub timed_out: bool,
    pub elapsed: Duration,
}

impl SearchRun {
    /// The `k` fittest distinct proxy-evaluated losses, best first; ties
    /// keep evaluation order.
    pub fn top(&self, k: usize) -> Vec<&Evaluated> {
        let mut all: Vec<&Evaluated> = self.evaluated.iter().collect();
        all.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.index.cmp(&b.index)));
        all.truncate(k);
        all
    }

    /// `eval_index,top5_mean,best` with fixed precision.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("eval_index,top5_mean,best\n");
        for r in &self.history {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.eval_index, r.top5_mean, r.best));
        }
        out
    }
}

/// Extra knobs for [`run_search_with`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop starting new work after this instant.
    pub deadline: Option<Instant>,
    /// Losses tried before random ones when filling the initial population.
    pub seeded: Vec<MultiBranchLoss>,
}

struct Admitted {
    loss: MultiBranchLoss,
    attempts: u64,
    origin: Origin,
    g: Option<f64>,
    fingerprint: Option<Fingerprint>,
    reject_ms: f64,
}

enum SlotResult {
    Admitted(Admitted),
    Exhausted,
    Deadline,
}

struct SlotOutcome {
    attempts: u64,
    rejected: u64,
    result: Result<SlotResult>,
}

struct Shared<'a> {
    cfg: &'a SearchConfig,
    task: &'a ProxyTask,
    ctx: &'a RejectionContext,
    deadline: Option<Instant>,
}

impl Shared<'_> {
    fn past_deadline(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    /// Runs the rejection test on `loss` if enabled. Returns the g-score and
    /// whether the loss is admitted.
    fn screen(&self, loss: &MultiBranchLoss) -> Result<(Option<f64>, bool)> {
        if !self.cfg.components.rejection {
            return Ok((None, true));
        }
        let report = self.ctx.evaluate(loss)?;
        Ok((Some(report.g), report.passed))
    }

    fn admit(&self, loss: MultiBranchLoss, origin: Origin, g: Option<f64>, attempts: u64, reject_ms: f64) -> Result<Admitted> {
        let fingerprint = if self.cfg.components.fingerprint { Some(self.ctx.fingerprint(&loss)?) } else { None };
        Ok(Admitted { loss, attempts, origin, g, fingerprint, reject_ms })
    }

    /// Generates candidates from `next` until one passes rejection.
    fn fill_slot(&self, mut next: impl FnMut() -> (MultiBranchLoss, Origin)) -> SlotOutcome {
        let start = Instant::now();
        let mut attempts = 0;
        let mut rejected = 0;
        let result = (|| {
            for _ in 0..REJECTION_RETRY_CAP {
                if self.past_deadline() {
                    return Ok(SlotResult::Deadline);
                }
                let (loss, origin) = next();
                attempts += 1;
                let (g, passed) = self.screen(&loss)?;
                if passed {
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    return Ok(SlotResult::Admitted(self.admit(loss, origin, g, attempts, ms)?));
                }
                rejected += 1;
            }
            Ok(SlotResult::Exhausted)
        })();
        SlotOutcome { attempts, rejected, result }
    }

    /// Initial slot `slot` tries `seeded[slot]` first, then random losses.
    fn init_slot(&self, slot: usize, seeded: &[MultiBranchLoss]) -> SlotOutcome {
        let mut rng = stream_rng(self.cfg.seed, STREAM_INIT, slot as u64);
        let specs = self.task.branch_specs();
        let mut first = seeded.get(slot);
        self.fill_slot(|| match first.take() {
            Some(l) => (l.clone(), Origin::Seeded),
            None => (random_loss(&specs, self.cfg.depth, &mut rng), Origin::Init),
        })
    }

    fn offspring_slot(&self, pop: &Population, index: u64) -> SlotOutcome {
        let mut rng = stream_rng(self.cfg.seed, STREAM_OFFSPRING, index);
        let parent = match pop.tournament_select(self.cfg.tournament, &mut rng) {
            Ok(p) => p.loss.clone(),
            Err(e) => return SlotOutcome { attempts: 0, rejected: 0, result: Err(e) },
        };
        self.fill_slot(|| {
            let (child, path) = make_offspring(&parent, self.cfg.depth, &mut rng);
            (child, path.into())
        })
    }
}

enum Resolution {
    Hit(f64),
    SameAs(usize),
    Evaluate,
    Skip,
}

/// [`run_search_with`] without a deadline, seeded losses or a log sink.
pub fn run_search(cfg: &SearchConfig) -> Result<SearchRun> {
    run_search_with(cfg, &RunOptions::default(), &mut |_| {})
}

/// Runs the search until `cfg.budget` proxy evaluations, the deadline, or a
/// retry-cap abort. `sink` receives one record per inserted individual.
pub fn run_search_with(
    cfg: &SearchConfig,
    opts: &RunOptions,
    sink: &mut dyn FnMut(&CandidateRecord),
) -> Result<SearchRun> {
    cfg.validate()?;
    let start = Instant::now();
    let task = cfg.task.build(cfg.seed)?;
    let ctx = cfg.rejection_context(&task)?;
    for s in &opts.seeded {
        task.check_loss(s)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let shared = Shared { cfg, task: &task, ctx: &ctx, deadline: opts.deadline };
    let mut state = State {
        cfg,
        task: &task,
        pool: &pool,
        run: SearchRun {
            population: Population::new(cfg.capacity),
            cache: FingerprintCache::new(),
            counters: Counters::default(),
            history: Vec::new(),
            evaluated: Vec::new(),
            best: None,
            aborted: None,
            timed_out: false,
            elapsed: Duration::ZERO,
        },
        start,
        batch: 0,
        top: Vec::new(),
    };

    let init: Vec<SlotOutcome> = pool.install(|| {
        (0..cfg.population).into_par_iter().map(|s| shared.init_slot(s, &opts.seeded)).collect()
    });
    let mut stop = state.absorb(init, sink)?;
    let mut next_index = 0u64;
    while !stop && (state.run.counters.proxy_evals as usize) < cfg.budget {
        if shared.past_deadline() {
            state.run.timed_out = true;
            break;
        }
        let pop = &state.run.population;
        let first = next_index;
        let outcomes: Vec<SlotOutcome> = pool.install(|| {
            (0..cfg.workers as u64).into_par_iter().map(|s| shared.offspring_slot(pop, first + s)).collect()
        });
        next_index += cfg.workers as u64;
        stop = state.absorb(outcomes, sink)?;
    }
    if shared.past_deadline() && (state.run.counters.proxy_evals as usize) < cfg.budget && state.run.aborted.is_none()
    {
        state.run.timed_out = true;
    }
    state.run.elapsed = start.elapsed();
    Ok(state.run)
}

struct State<'a> {
    cfg: &'a SearchConfig,
    task: &'a ProxyTask,
    pool: &'a rayon::ThreadPool,
    run: SearchRun,
    start: Instant,
    batch: u64,
    /// Fitness values of all proxy evaluations, sorted descending, capped
    /// at [`TOP_K`].
    top: Vec<f64>,
}

impl State<'_> {
    /// Resolves one batch of slot outcomes: cache lookups, parallel proxy
    /// evaluation, insertion. Returns `true` when the run must stop.
    fn absorb(&mut self, outcomes: Vec<SlotOutcome>, sink: &mut dyn FnMut(&CandidateRecord)) -> Result<bool> {
        let batch = self.batch;
        self.batch += 1;
        let mut stop = false;
        let mut admitted: Vec<Admitted> = Vec::new();
        for o in outcomes {
            self.run.counters.explored += o.attempts;
            self.run.counters.rejected += o.rejected;
            match o.result? {
                SlotResult::Admitted(a) => admitted.push(a),
                SlotResult::Exhausted => {
                    if self.run.aborted.is_none() {
                        self.run.aborted = Some(format!(
                            "no candidate passed rejection within {REJECTION_RETRY_CAP} attempts (batch {batch})"
                        ));
                    }
                    stop = true;
                }
                SlotResult::Deadline => {
                    self.run.timed_out = true;
                    stop = true;
                }
            }
        }

        let remaining = self.cfg.budget.saturating_sub(self.run.counters.proxy_evals as usize);
        let mut scheduled = 0;
        let mut pending: HashMap<&Fingerprint, usize> = HashMap::new();
        let mut plan = Vec::with_capacity(admitted.len());
        for (k, a) in admitted.iter().enumerate() {
            let r = match &a.fingerprint {
                Some(fp) => {
                    if let Some(f) = self.run.cache.lookup(fp) {
                        Resolution::Hit(f)
                    } else if let Some(&j) = pending.get(fp) {
                        Resolution::SameAs(j)
                    } else if scheduled < remaining {
                        scheduled += 1;
                        pending.insert(fp, k);
                        Resolution::Evaluate
                    } else {
                        Resolution::Skip
                    }
                }
                None if scheduled < remaining => {
                    scheduled += 1;
                    Resolution::Evaluate
                }
                None => Resolution::Skip,
            };
            plan.push(r);
        }

        let (task, seed, early_stop) = (self.task, self.cfg.seed, self.cfg.components.early_stop);
        let jobs: Vec<usize> = (0..admitted.len()).filter(|&k| matches!(plan[k], Resolution::Evaluate)).collect();
        let results: Vec<Result<(f64, bool, f64)>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&k| {
                    let t = Instant::now();
                    let out = train_and_score_with(task, &admitted[k].loss, seed, early_stop)?;
                    Ok((out.fitness, out.non_finite_at.is_some(), t.elapsed().as_secs_f64() * 1e3))
                })
                .collect()
        });
        let mut evals: HashMap<usize, (f64, bool, f64)> = HashMap::with_capacity(jobs.len());
        for (k, r) in jobs.into_iter().zip(results) {
            evals.insert(k, r?);
        }

        for (k, (a, r)) in admitted.into_iter().zip(plan).enumerate() {
            let (fitness, invalid, eval_ms, hit) = match r {
                Resolution::Skip => continue,
                Resolution::Hit(f) => (f, false, 0.0, true),
                Resolution::SameAs(j) => (evals[&j].0, false, 0.0, true),
                Resolution::Evaluate => {
                    let (f, inv, ms) = evals[&k];
                    (f, inv, ms, false)
                }
            };
            self.insert(a, batch, fitness, invalid, eval_ms, hit, sink);
        }
        Ok(stop)
    }

    #[allow(clippy::too_many_arguments)]
    fn insert(
        &mut self,
        a: Admitted,
        batch: u64,
        fitness: f64,
        invalid: bool,
        eval_ms: f64,
        hit: bool,
        sink: &mut dyn FnMut(&CandidateRecord),
    ) {
        if self.cfg.components.rejection {
            assert!(a.g.is_some_and(|g| g >= self.cfg.eta), "inserted individual must have passed rejection");
        }
        let index = self.run.counters.inserted;
        let c = &mut self.run.counters;
        c.inserted += 1;
        if hit {
            c.cache_hits += 1;
        } else {
            c.proxy_evals += 1;
            c.invalid += u64::from(invalid);
            if let Some(fp) = &a.fingerprint {
                self.run.cache.insert(fp.clone(), fitness);
            }
        }
        let record = CandidateRecord {
            index,
            batch,
            origin: a.origin,
            hash: format!("{:016x}", loss_hash(&a.loss)),
            formula: a.loss.to_string(),
            fingerprint: a.fingerprint.as_ref().map(ToString::to_string),
            g: a.g,
            attempts: a.attempts,
            cache_hit: hit,
            fitness,
            invalid,
            reject_ms: a.reject_ms,
            eval_ms,
        };
        sink(&record);
        let mut ind = Individual::new(a.loss, batch);
        ind.set_fitness(fitness);
        ind.fingerprint = a.fingerprint;
        ind.g_score = a.g;
        if self.run.best.as_ref().is_none_or(|b| fitness > b.fitness().unwrap_or(f64::NEG_INFINITY)) {
            self.run.best = Some(ind.clone());
        }
        if !hit {
            self.run.evaluated.push(Evaluated { loss: ind.loss.clone(), fitness, index });
            let pos = self.top.partition_point(|&v| v >= fitness);
            self.top.insert(pos, fitness);
            self.top.truncate(TOP_K);
            self.run.history.push(HistoryRow {
                eval_index: self.run.counters.proxy_evals,
                top5_mean: self.top.iter().sum::<f64>() / self.top.len() as f64,
                best: self.top[0],
                explored: self.run.counters.explored,
                elapsed_secs: self.start.elapsed().as_secs_f64(),
            });
        }
        self.run.population.push(ind);
    }
}

/// Cumulative ablation variants, each adding one component to the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "+rejection")]
    Rejection,
    #[serde(rename = "+fingerprint")]
    Fingerprint,
    #[serde(rename = "+earlystop")]
    EarlyStop,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Naive, Variant::Rejection, Variant::Fingerprint, Variant::EarlyStop];

    pub const fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Rejection => "+rejection",
            Variant::Fingerprint => "+fingerprint",
            Variant::EarlyStop => "+earlystop",
        }
    }

    /// File-name friendly form of [`Variant::name`].
    pub const fn slug(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Rejection => "rejection",
            Variant::Fingerprint => "fingerprint",
            Variant::EarlyStop => "earlystop",
        }
    }

    pub const fn components(self) -> Components {
        match self {
            Variant::Naive => Components { rejection: false, fingerprint: false, early_stop: false },
            Variant::Rejection => Components { rejection: true, fingerprint: false, early_stop: false },
            Variant::Fingerprint => Components { rejection: true, fingerprint: true, early_stop: false },
            Variant::EarlyStop => Components::ALL,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('+').to_ascii_lowercase();
        match t.as_str() {
            "naive" => Ok(Variant::Naive),
            "rejection" => Ok(Variant::Rejection),
            "fingerprint" => Ok(Variant::Fingerprint),
            "earlystop" | "early_stop" | "early-stop" => Ok(Variant::EarlyStop),
            _ => Err(Error::Config(format!("unknown ablation variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub counters: Counters,
    pub best: f64,
    pub positive_found: bool,
    pub elapsed_secs: f64,
    pub timed_out: bool,
    pub aborted: Option<String>,
    pub history: Vec<HistoryRow>,
}

impl VariantReport {
    /// `eval_index,elapsed_secs,explored,top5_mean,best`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("eval_index,elapsed_secs,explored,top5_mean,best\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{:.3},{},{:.6},{:.6}\n",
                r.eval_index, r.elapsed_secs, r.explored, r.top5_mean, r.best
            ));
        }
        out
    }
}

/// Runs each variant single-threaded under the same wall-clock allowance
/// (and the configured evaluation budget).
pub fn run_ablation(cfg: &SearchConfig, variants: &[Variant], wall_clock: Duration) -> Result<Vec<VariantReport>> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    variants.iter().map(|&v| run_variant(cfg, v, wall_clock)).collect()
}

pub fn run_variant(cfg: &SearchConfig, variant: Variant, wall_clock: Duration) -> Result<VariantReport> {
    let mut c = cfg.clone();
    c.workers = 1;
    c.components = variant.components();
    let opts = RunOptions { deadline: Some(Instant::now() + wall_clock), ..RunOptions::default() };
    let run = run_search_with(&c, &opts, &mut |_| {})?;
    let best = run.best.as_ref().and_then(Individual::fitness).unwrap_or(0.0);
    log::info!(
        "{variant}: explored {} rejected {} evals {} hits {} best {best:.4}",
        run.counters.explored,
        run.counters.rejected,
        run.counters.proxy_evals,
        run.counters.cache_hits
    );
    Ok(VariantReport {
        variant,
        counters: run.counters,
        best,
        positive_found: best > 0.0,
        elapsed_secs: run.elapsed.as_secs_f64(),
        timed_out: run.timed_out,
        aborted: run.aborted,
        history: run.history,
    })
}
