//! Curation by uncertain prototype and the repeated fine-tuning comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DatasetError, LabeledDataset};
use crate::prototypes::prototype_name;
use crate::refnet::{evaluate, finetune, ConfusionMatrix, ModelState, RefnetError, TrainHyper};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("curation removes every sample")]
    EmptyCuration,
    #[error("prototype {0} outside the book of {1}")]
    BadPrototype(usize, usize),
    #[error("invalid class pair ({0}, {1})")]
    BadPair(usize, usize),
    #[error("unknown schedule {0:?}")]
    UnknownSchedule(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] RefnetError),
}

pub type Result<T> = std::result::Result<T, GuidanceError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationPlan {
    pub source: String,
    pub source_count: usize,
    pub prototype: usize,
    pub pair: Option<(usize, usize)>,
    pub excluded: Vec<u64>,
    pub retained: usize,
}

impl CurationPlan {
    pub fn apply(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        let excluded: BTreeSet<u64> = self.excluded.iter().copied().collect();
        let id = format!("{}-without-{}", data.id(), prototype_name(self.prototype));
        Ok(data.without_ids(&excluded, id)?)
    }
}

/// Excludes samples containing prototype `k`, only among labels in `pair` when given.
pub fn curate(
    data: &LabeledDataset,
    presence: &[BTreeSet<usize>],
    k: usize,
    prototype_count: usize,
    pair: Option<(usize, usize)>,
) -> Result<CurationPlan> {
    let source = CurationSource {
        id: data.id(),
        labels: data.labels(),
        sample_ids: data.sample_ids(),
        class_count: data.class_count(),
    };
    curate_samples(source, presence, k, prototype_count, pair)
}

/// Labels and ids of the dataset being curated.
#[derive(Debug, Clone, Copy)]
pub struct CurationSource<'a> {
    pub id: &'a str,
    pub labels: &'a [usize],
    pub sample_ids: &'a [u64],
    pub class_count: usize,
}

pub fn curate_samples(
    source: CurationSource<'_>,
    presence: &[BTreeSet<usize>],
    k: usize,
    prototype_count: usize,
    pair: Option<(usize, usize)>,
) -> Result<CurationPlan> {
    if k >= prototype_count {
        return Err(GuidanceError::BadPrototype(k, prototype_count));
    }
    let n = source.labels.len();
    if presence.len() != n || source.sample_ids.len() != n {
        return Err(GuidanceError::BadParam(format!(
            "{} presence sets and {} ids for {n} samples",
            presence.len(),
            source.sample_ids.len()
        )));
    }
    if let Some((a, b)) = pair {
        if a == b || a >= source.class_count || b >= source.class_count {
            return Err(GuidanceError::BadPair(a, b));
        }
    }
    let excluded: Vec<u64> = (0..n)
        .filter(|&i| presence[i].contains(&k))
        .filter(|&i| pair.is_none_or(|(a, b)| source.labels[i] == a || source.labels[i] == b))
        .map(|i| source.sample_ids[i])
        .collect();
    let retained = n - excluded.len();
    if retained == 0 {
        return Err(GuidanceError::EmptyCuration);
    }
    Ok(CurationPlan {
        source: source.id.to_string(),
        source_count: n,
        prototype: k,
        pair,
        excluded,
        retained,
    })
}

/// `(a -> b, b -> a, a <-> b)` counts.
pub fn confusion_pair_stats(cm: &ConfusionMatrix, a: usize, b: usize) -> Result<(u64, u64, u64)> {
    if a == b || a >= cm.classes() || b >= cm.classes() {
        return Err(GuidanceError::BadPair(a, b));
    }
    let (ab, ba) = (cm.get(a, b), cm.get(b, a));
    Ok((ab, ba, ab + ba))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn render(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    /// Percent.
    pub accuracy: f64,
    pub ab: u64,
    pub ba: u64,
    pub sum: u64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub name: String,
    pub accuracy: MeanStd,
    pub ab: MeanStd,
    pub ba: MeanStd,
    pub sum: MeanStd,
    pub repeats: Vec<RepeatResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStats {
    pub pair: (usize, usize),
    pub repeat_count: usize,
    pub seeds: Vec<u64>,
    pub std_kind: String,
    pub schedules: Vec<ScheduleStats>,
}

pub struct Schedule<'a> {
    pub name: String,
    pub stages: Vec<&'a LabeledDataset>,
}

/// Fine-tunes a fresh copy of `base` per schedule and repeat (seed `seed0 + r`)
/// and evaluates on `test`.
pub fn run_experiment(
    base: &ModelState,
    schedules: &[Schedule<'_>],
    hyper: &TrainHyper,
    repeats: usize,
    seed0: u64,
    test: &LabeledDataset,
    pair: (usize, usize),
) -> Result<ExperimentStats> {
    if repeats == 0 {
        return Err(GuidanceError::BadParam("repeats must be >= 1".into()));
    }
    let m = base.spec().classes;
    if pair.0 == pair.1 || pair.0 >= m || pair.1 >= m {
        return Err(GuidanceError::BadPair(pair.0, pair.1));
    }
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| seed0.wrapping_add(r)).collect();
    let schedules = schedules
        .iter()
        .map(|s| {
            let repeats = seeds
                .par_iter()
                .map(|&seed| {
                    let h = TrainHyper {
                        seed,
                        ..hyper.clone()
                    };
                    let tuned = finetune(base.clone(), &s.stages, &h)?;
                    let cm = evaluate(&tuned, test)?;
                    let (ab, ba, sum) = confusion_pair_stats(&cm, pair.0, pair.1)?;
                    Ok(RepeatResult {
                        seed,
                        accuracy: 100.0 * cm.accuracy(),
                        ab,
                        ba,
                        sum,
                        confusion: cm,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let stat = |f: fn(&RepeatResult) -> f64| {
                MeanStd::of(&repeats.iter().map(f).collect::<Vec<_>>())
            };
            Ok(ScheduleStats {
                name: s.name.clone(),
                accuracy: stat(|r| r.accuracy),
                ab: stat(|r| r.ab as f64),
                ba: stat(|r| r.ba as f64),
                sum: stat(|r| r.sum as f64),
                repeats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentStats {
        pair,
        repeat_count: repeats,
        seeds,
        std_kind: "population".into(),
        schedules,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Improved,
    NoChange,
    Worsened,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub target: String,
    pub pair: (usize, usize),
    pub delta_sum_mean: f64,
    pub delta_sum_std: f64,
    pub delta_accuracy: f64,
    pub verdict: Verdict,
}

/// Target minus baseline; improved iff the mean pair confusion drops.
pub fn compare_runs(stats: &ExperimentStats, baseline: &str, target: &str) -> Result<Comparison> {
    let find = |name: &str| {
        stats
            .schedules
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| GuidanceError::UnknownSchedule(name.to_string()))
    };
    let (b, t) = (find(baseline)?, find(target)?);
    let delta = t.sum.mean - b.sum.mean;
    Ok(Comparison {
        baseline: baseline.to_string(),
        target: target.to_string(),
        pair: stats.pair,
        delta_sum_mean: delta,
        delta_sum_std: t.sum.std - b.sum.std,
        delta_accuracy: t.accuracy.mean - b.accuracy.mean,
        verdict: if delta < 0.0 {
            Verdict::Improved
        } else if delta > 0.0 {
            Verdict::Worsened
        } else {
            Verdict::NoChange
        },
    })
}

fn header(pair: (usize, usize)) -> [String; 5] {
    let (a, b) = pair;
    [
        "Dataset".into(),
        "Acc.".into(),
        format!("{a}→{b}"),
        format!("{b}→{a}"),
        format!("{a}↔{b}"),
    ]
}

fn cells(s: &ScheduleStats) -> [String; 5] {
    [
        s.name.clone(),
        s.accuracy.render(),
        s.ab.render(),
        s.ba.render(),
        s.sum.render(),
    ]
}

impl ExperimentStats {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# mean ± population std over {} repeats\n",
            self.repeat_count
        );
        out.push_str(&header(self.pair).join(","));
        out.push('\n');
        for s in &self.schedules {
            out.push_str(&cells(s).join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "Mean ± population std over {} repeats.\n\n",
            self.repeat_count
        );
        let _ = writeln!(out, "| {} |", header(self.pair).join(" | "));
        out.push_str("|---|---|---|---|---|\n");
        for s in &self.schedules {
            let _ = writeln!(out, "| {} |", cells(s).join(" | "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_lookup() {
        let mut cm = ConfusionMatrix::new(8);
        for _ in 0..11 {
            cm.record(7, 2);
        }
        for _ in 0..3 {
            cm.record(2, 7);
        }
        assert_eq!(confusion_pair_stats(&cm, 2, 7).unwrap(), (3, 11, 14));
        assert!(matches!(
            confusion_pair_stats(&cm, 2, 2),
            Err(GuidanceError::BadPair(2, 2))
        ));
        assert!(matches!(
            confusion_pair_stats(&cm, 2, 8),
            Err(GuidanceError::BadPair(2, 8))
        ));
    }

    #[test]
    fn population_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
        assert_eq!(
            MeanStd {
                mean: 8.4,
                std: 1.85
            }
            .render(),
            "8.40 ± 1.85"
        );
    }
}
