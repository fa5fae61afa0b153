//! Desk-scale proxy tasks: synthetic datasets, a small differentiable
//! predictor and a training loop that turns a candidate loss into a fitness
//! score.

mod data;
mod predictor;
mod train;

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::BranchSpec;
use crate::expr::{InputKind, MultiBranchLoss};
use crate::metrics::{detection_hit, BoxF, Metric};
use crate::tensor::Tensor4;

pub use data::{generate_box_task, generate_detection_task, generate_segmentation_task};
pub use predictor::Predictor;
pub use train::{train_and_score, train_and_score_with, untrained_score, TrainOutcome};

/// Iterations within which a non-finite loss counts as an early failure.
pub const EARLY_STOP_WINDOW: usize = 20;
/// Loss weights of the two detection branches (classification, regression).
pub const DETECTION_WEIGHTS: [f64; 2] = [1.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Per-pixel classification, one dense branch.
    Seg,
    /// Box regression from a feature vector, one area branch.
    Box,
    /// Classification plus box regression, two branches.
    Det,
}

impl TaskKind {
    pub const fn name(self) -> &'static str {
        match self {
            TaskKind::Seg => "seg",
            TaskKind::Box => "box",
            TaskKind::Det => "det",
        }
    }

    pub fn default_metric(self) -> Metric {
        match self {
            TaskKind::Seg => Metric::MIoU,
            TaskKind::Box => Metric::BoxIoU,
            TaskKind::Det => Metric::DetHit,
        }
    }

    pub fn supports(self, metric: Metric) -> bool {
        match self {
            TaskKind::Seg => metric.is_segmentation(),
            TaskKind::Box => metric == Metric::BoxIoU,
            TaskKind::Det => metric == Metric::DetHit,
        }
    }

    pub fn branch_specs(self) -> Vec<BranchSpec> {
        match self {
            TaskKind::Seg => vec![BranchSpec::new("loss", InputKind::Dense)],
            TaskKind::Box => vec![BranchSpec::new("reg", InputKind::Areas)],
            TaskKind::Det => {
                vec![BranchSpec::new("cls", InputKind::Dense), BranchSpec::new("reg", InputKind::Areas)]
            }
        }
    }

    pub fn branch_weights(self) -> Vec<f64> {
        match self {
            TaskKind::Det => DETECTION_WEIGHTS.to_vec(),
            _ => vec![1.0],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seg" | "segmentation" => Ok(TaskKind::Seg),
            "box" | "box_regression" => Ok(TaskKind::Box),
            "det" | "detection" => Ok(TaskKind::Det),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Per-pixel class labels, `h × w` row-major.
    Labels(Vec<usize>),
    Box(BoxF),
    Det { class: usize, bbox: BoxF },
}

/// One input/target pair. Segmentation features are stored pixel-major
/// (`h · w` rows of `feature_dim` values).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: Target,
}

/// Prediction/target pair for one loss branch, in the loss's input space.
#[derive(Clone, Debug, PartialEq)]
pub enum BranchSample {
    Dense { yhat: Tensor4, y: Tensor4 },
    Box { pred: BoxF, target: BoxF },
}

#[derive(Clone, Debug)]
pub struct ProxyTask {
    pub kind: TaskKind,
    pub metric: Metric,
    pub classes: usize,
    /// Image side for segmentation, 1 otherwise.
    pub side: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub trainer: TrainerConfig,
    pub seed: u64,
}

impl ProxyTask {
    pub fn with_metric(mut self, metric: Metric) -> Result<Self> {
        if !self.kind.supports(metric) {
            return Err(Error::Config(format!("metric `{metric}` does not apply to task `{}`", self.kind)));
        }
        self.metric = metric;
        Ok(self)
    }

    pub fn branch_specs(&self) -> Vec<BranchSpec> {
        self.kind.branch_specs()
    }

    pub fn branch_weights(&self) -> Vec<f64> {
        self.kind.branch_weights()
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Seg => self.classes,
            TaskKind::Box => 4,
            TaskKind::Det => self.classes + 4,
        }
    }

    pub fn init_predictor<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Predictor {
        Predictor::init(self.feature_dim, self.hidden, self.output_dim(), rng)
    }

    /// Checks that `loss` has one branch per task head with matching input
    /// families. Branch names are free.
    pub fn check_loss(&self, loss: &MultiBranchLoss) -> Result<()> {
        let specs = self.branch_specs();
        if loss.len() != specs.len() {
            return Err(Error::Config(format!(
                "task `{}` has {} loss branches, got {}",
                self.kind,
                specs.len(),
                loss.len()
            )));
        }
        for (b, s) in loss.branches().iter().zip(&specs) {
            if b.inputs != s.inputs {
                return Err(Error::Config(format!(
                    "branch `{}` reads {:?} inputs, task head `{}` provides {:?}",
                    b.name, b.inputs, s.name, s.inputs
                )));
            }
        }
        Ok(())
    }

    /// Predictions of `predictor` on `examples`, one branch list per example.
    pub fn predict_samples(&self, predictor: &Predictor, examples: &[&Example]) -> Vec<Vec<BranchSample>> {
        let mut ws = train::Workspace::default();
        examples.iter().map(|ex| train::predict_one(self, predictor, ex, &mut ws)).collect()
    }

    /// Metric of a single prediction/target pair.
    pub fn sample_score(&self, sample: &[BranchSample]) -> Result<f64> {
        score_sample(self.kind, self.metric, sample)
    }


    /// Writes both splits as CSV: `split,index,f0..fk,target`. Segmentation
    /// rows are per pixel.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let cols: Vec<String> = (0..self.feature_dim).map(|k| format!("f{k}")).collect();
        let target_cols = match self.kind {
            TaskKind::Seg => "pixel,label",
            TaskKind::Box => "x1,y1,x2,y2",
            TaskKind::Det => "class,x1,y1,x2,y2",
        };
        writeln!(out, "split,index,{},{target_cols}", cols.join(","))?;
        for (split, set) in [("train", &self.train), ("eval", &self.eval)] {
            for (i, ex) in set.iter().enumerate() {
                let row = |vals: &[f64]| vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
                match &ex.target {
                    Target::Labels(labels) => {
                        for (p, l) in labels.iter().enumerate() {
                            let f = &ex.features[p * self.feature_dim..(p + 1) * self.feature_dim];
                            writeln!(out, "{split},{i},{},{p},{l}", row(f))?;
                        }
                    }
                    Target::Box(b) => writeln!(out, "{split},{i},{},{}", row(&ex.features), row(&b.to_array()))?,
                    Target::Det { class, bbox } => {
                        writeln!(out, "{split},{i},{},{class},{}", row(&ex.features), row(&bbox.to_array()))?
                    }
                }
            }
        }
        Ok(())
    }
}

/// Metric of a single prediction/target pair of a `kind` task.
pub fn score_sample(kind: TaskKind, metric: Metric, sample: &[BranchSample]) -> Result<f64> {
    match (kind, sample) {
        (TaskKind::Seg, [BranchSample::Dense { yhat, y }]) => metric.score_dense(yhat, y),
        (TaskKind::Box, [BranchSample::Box { pred, target }]) => {
            crate::metrics::box_regression_score(&[*pred], &[*target])
        }
        (TaskKind::Det, [BranchSample::Dense { yhat, y }, BranchSample::Box { pred, target }]) => {
            let class = crate::metrics::argmax_labels(y)[0];
            Ok(f64::from(u8::from(detection_hit(yhat.data(), class, pred, target))))
        }
        _ => Err(Error::Config(format!("sample layout does not match task `{kind}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_parse() {
        for k in [TaskKind::Seg, TaskKind::Box, TaskKind::Det] {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
            assert!(k.supports(k.default_metric()));
            assert_eq!(k.branch_specs().len(), k.branch_weights().len());
        }
        assert!("pose".parse::<TaskKind>().is_err());
    }

    #[test]
    fn csv_snapshot_has_one_row_per_pixel() {
        let task = generate_segmentation_task(2, 20, 8, 1).unwrap();
        let mut buf = Vec::new();
        task.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 20 * 64);
        let header_cols = text.lines().next().unwrap().split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == header_cols));
    }
}
