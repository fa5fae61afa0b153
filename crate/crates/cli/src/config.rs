//! Config file schema and flag overrides.
//!
//! ```toml
//! seed = 7              # optional; falls back to LOSSFORGE_SEED, then 0
//! workers = 4
//!
//! [task]
//! kind = "seg"          # seg | box | det
//! metric = "miou"       # miou fwiou gacc macc biou bf1 | box_iou | det_hit
//! classes = 4
//! samples = 64
//! side = 16
//!
//! [search]
//! population = 20
//! capacity = 2500
//! tournament = 0.05
//! depth = 3
//! rejection_samples = 5
//! eta = 0.6
//! budget = 500
//!
//! [rejection]
//! lr = 0.001
//! momentum = 0.9
//! iterations = 500
//!
//! [ablation]            # required by `ablation` only
//! wall_clock_secs = 40.0
//! variants = ["naive", "+rejection", "+fingerprint", "+earlystop"]
//! ```
//!
//! Every key except `seed` and the `[ablation]` table is required.

use std::path::Path;

use lossforge::reject::DescentConfig;
use lossforge::search::Components;
use lossforge::{Metric, SearchConfig, TaskConfig, TaskKind, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "LOSSFORGE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub workers: usize,
    pub task: TaskConfig,
    pub search: SearchSection,
    pub rejection: DescentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub population: usize,
    pub capacity: usize,
    pub tournament: f64,
    pub depth: usize,
    pub rejection_samples: usize,
    pub eta: f64,
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub wall_clock_secs: f64,
    pub variants: Vec<Variant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { wall_clock_secs: 40.0, variants: Variant::ALL.to_vec() }
    }
}

/// Flag values that win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub task: Option<TaskKind>,
    pub metric: Option<Metric>,
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Env,
    Default,
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub search: SearchConfig,
    pub seed_source: SeedSource,
    pub ablation: Option<AblationSection>,
}

pub fn load(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {}", path.display(), e.message())))
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl FileConfig {
    /// The built-in defaults for `kind`, as a config file would spell them.
    pub fn defaults(kind: TaskKind) -> Self {
        let cfg = SearchConfig::new(TaskConfig::default_for(kind), 0);
        FileConfig {
            seed: None,
            workers: cfg.workers,
            task: cfg.task,
            search: SearchSection {
                population: cfg.population,
                capacity: cfg.capacity,
                tournament: cfg.tournament,
                depth: cfg.depth,
                rejection_samples: cfg.rejection_samples,
                eta: cfg.eta,
                budget: cfg.budget,
            },
            rejection: cfg.descent,
            ablation: None,
        }
    }
}

/// Merges file, flags and environment. A `--task` that changes the task
/// kind replaces the whole `[task]` table with that kind's defaults.
pub fn resolve(file: Option<FileConfig>, o: &Overrides) -> Result<Resolved, CliError> {
    let mut f = file.unwrap_or_else(|| FileConfig::defaults(o.task.unwrap_or(TaskKind::Seg)));
    if let Some(kind) = o.task {
        if kind != f.task.kind {
            f.task = TaskConfig::default_for(kind);
        }
    }
    if let Some(m) = o.metric {
        f.task.metric = m;
    }
    let (seed, seed_source) = match (o.seed, f.seed, env_seed()?) {
        (Some(s), _, _) => (s, SeedSource::Flag),
        (None, Some(s), _) => (s, SeedSource::Config),
        (None, None, Some(s)) => (s, SeedSource::Env),
        (None, None, None) => (0, SeedSource::Default),
    };
    let search = SearchConfig {
        task: f.task,
        population: f.search.population,
        capacity: f.search.capacity,
        tournament: f.search.tournament,
        depth: f.search.depth,
        rejection_samples: f.search.rejection_samples,
        eta: f.search.eta,
        budget: o.budget.unwrap_or(f.search.budget),
        workers: o.workers.unwrap_or(f.workers),
        seed,
        descent: f.rejection,
        components: Components::ALL,
    };
    search.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(Resolved { search, seed_source, ablation: f.ablation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in [TaskKind::Seg, TaskKind::Box, TaskKind::Det] {
            let mut f = FileConfig::defaults(kind);
            f.seed = Some(3);
            f.ablation = Some(AblationSection::default());
            let text = toml::to_string(&f).unwrap();
            assert_eq!(toml::from_str::<FileConfig>(&text).unwrap(), f);
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = toml::to_string(&FileConfig::defaults(TaskKind::Seg)).unwrap().replace("budget = 500\n", "");
        let err = toml::from_str::<FileConfig>(&text).unwrap_err();
        assert!(err.message().contains("budget"), "{}", err.message());
    }

    #[test]
    fn flags_override_file() {
        let mut f = FileConfig::defaults(TaskKind::Seg);
        f.seed = Some(1);
        let o = Overrides { seed: Some(9), budget: Some(7), metric: Some(Metric::GAcc), ..Default::default() };
        let r = resolve(Some(f.clone()), &o).unwrap();
        assert_eq!((r.search.seed, r.seed_source, r.search.budget), (9, SeedSource::Flag, 7));
        assert_eq!(r.search.task.metric, Metric::GAcc);

        let o = Overrides { task: Some(TaskKind::Det), ..Default::default() };
        let r = resolve(Some(f), &o).unwrap();
        assert_eq!(r.search.task, TaskConfig::detection());
        assert_eq!((r.search.seed, r.seed_source), (1, SeedSource::Config));
    }

    #[test]
    fn incompatible_metric_is_a_usage_error() {
        let o = Overrides { task: Some(TaskKind::Box), metric: Some(Metric::MIoU), ..Default::default() };
        assert_eq!(resolve(None, &o).unwrap_err().code, 2);
    }
}
