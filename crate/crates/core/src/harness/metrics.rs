//! Suite and sweep aggregation. Every reported ratio goes through
//! [`percent_1dp`] so tests and CSVs agree digit for digit.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::craftworld::{Level, RuleSet};
use crate::pim::NMax;

use super::episode::{run_episode, EpisodeRecord, FrameworkConfig, Variant};
use super::expert::ScriptedExpert;
use super::tasks::TaskSpec;
use super::HarnessError;

/// `100 · num / den` rounded half away from zero to one decimal; 0 when `den` is 0.
pub fn percent_1dp(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        return 0.0;
    }
    (1000.0 * num / den).round() / 10.0
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population variance.
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    /// Percent of successful episodes.
    pub success_rate: f64,
    /// Mean simulated human time per episode, seconds.
    pub human_time_s: f64,
    /// Mean total time per episode, seconds (failures included).
    pub total_time_s: f64,
    /// Mean human time over mean total time, percent.
    pub human_ratio: f64,
    pub episodes: usize,
    pub queries: u32,
}

impl LevelStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EpisodeRecord>) -> Self {
        let recs: Vec<&EpisodeRecord> = records.into_iter().collect();
        let succ: Vec<f64> = recs.iter().map(|r| f64::from(u8::from(r.success))).collect();
        let human = mean(&recs.iter().map(|r| r.t_human_s).collect::<Vec<_>>());
        let total = mean(&recs.iter().map(|r| r.t_total_s).collect::<Vec<_>>());
        LevelStats {
            success_rate: percent_1dp(mean(&succ), 1.0),
            human_time_s: human,
            total_time_s: total,
            human_ratio: percent_1dp(human, total),
            episodes: recs.len(),
            queries: recs.iter().map(|r| r.queries).sum(),
        }
    }
}

pub const LEVELS: [Level; 3] = [Level::Easy, Level::Normal, Level::Hard];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub easy: LevelStats,
    pub normal: LevelStats,
    pub hard: LevelStats,
}

impl MetricsRow {
    pub fn level(&self, level: Level) -> &LevelStats {
        match level {
            Level::Easy => &self.easy,
            Level::Normal => &self.normal,
            Level::Hard => &self.hard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, variant: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["variant".to_owned()];
        for l in LEVELS {
            for c in ["success_rate", "human_time_s", "total_time_s", "human_ratio"] {
                header.push(format!("{}_{c}", l.name()));
            }
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.variant.clone()];
            for l in LEVELS {
                let s = row.level(l);
                rec.extend([
                    format!("{:.1}", s.success_rate),
                    format!("{:.1}", s.human_time_s),
                    format!("{:.1}", s.total_time_s),
                    format!("{:.1}", s.human_ratio),
                ]);
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed of trial `i`, shared by every variant.
pub fn trial_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// One scripted episode with the expert seeded from the episode seed.
pub fn scripted_episode(task: &TaskSpec, cfg: &FrameworkConfig, seed: u64) -> Result<EpisodeRecord, HarnessError> {
    let mut expert = ScriptedExpert::new(Arc::new(RuleSet::standard()), cfg.review_cost, cfg.reply_noise, seed);
    run_episode(task, cfg, &mut expert, seed)
}

/// All `(task, trial)` episodes for one configuration, in task-major order.
pub fn run_trials(tasks: &[TaskSpec], trials: usize, cfg: &FrameworkConfig, base_seed: u64) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let jobs: Vec<(&TaskSpec, u64)> =
        tasks.iter().flat_map(|t| (0..trials).map(move |i| (t, trial_seed(base_seed, i)))).collect();
    jobs.par_iter().map(|(t, s)| scripted_episode(t, cfg, *s)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub table: MetricsTable,
    /// Records per variant, in the order the variants were given.
    pub records: Vec<(String, Vec<EpisodeRecord>)>,
}

pub fn run_suite(tasks: &[TaskSpec], trials: usize, variants: &[FrameworkConfig], base_seed: u64) -> Result<SuiteOutcome, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config("trials must be at least 1".into()));
    }
    let mut rows = vec![];
    let mut records = vec![];
    for cfg in variants {
        let recs = run_trials(tasks, trials, cfg, base_seed)?;
        let stats = |l: Level| {
            LevelStats::from_records(
                recs.iter().filter(|r| tasks.iter().any(|t| t.id == r.task_id && t.level == l)),
            )
        };
        let name = cfg.variant.name().to_owned();
        rows.push(MetricsRow { variant: name.clone(), easy: stats(Level::Easy), normal: stats(Level::Normal), hard: stats(Level::Hard) });
        records.push((name, recs));
    }
    Ok(SuiteOutcome { table: MetricsTable { rows }, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_max: NMax,
    pub success_rate: f64,
    pub human_ratio: f64,
    pub total_time_mean: f64,
    pub total_time_var: f64,
    pub queries: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub task_id: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, n_max: NMax) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.n_max == n_max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n_max", "success_rate", "human_ratio", "total_time_mean", "total_time_var", "queries"])?;
        for r in &self.rows {
            w.write_record([
                r.n_max.to_string(),
                format!("{:.1}", r.success_rate),
                format!("{:.1}", r.human_ratio),
                format!("{:.2}", r.total_time_mean),
                format!("{:.2}", r.total_time_var),
                r.queries.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn sweep_row(n_max: NMax, records: &[EpisodeRecord]) -> SweepRow {
    let stats = LevelStats::from_records(records);
    let totals: Vec<f64> = records.iter().map(|r| r.t_total_s).collect();
    SweepRow {
        n_max,
        success_rate: stats.success_rate,
        human_ratio: stats.human_ratio,
        total_time_mean: mean(&totals),
        total_time_var: variance(&totals),
        queries: stats.queries,
    }
}

/// Full-variant runs of one task over a range of autonomy thresholds.
pub fn ablation_sweep(
    task: &TaskSpec,
    n_max_values: &[NMax],
    trials: usize,
    base: &FrameworkConfig,
    base_seed: u64,
) -> Result<(SweepTable, Vec<Vec<EpisodeRecord>>), HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config("trials must be at least 1".into()));
    }
    let mut rows = vec![];
    let mut all = vec![];
    for &n in n_max_values {
        let cfg = FrameworkConfig { variant: Variant::Full, n_max: n, ..base.clone() };
        let recs = run_trials(std::slice::from_ref(task), trials, &cfg, base_seed)?;
        rows.push(sweep_row(n, &recs));
        all.push(recs);
    }
    Ok((SweepTable { task_id: task.id.clone(), rows }, all))
}

/// Synthetic knobs reported next to every table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub trials: usize,
    pub base_seed: u64,
    pub reply_noise: f64,
    pub review_cost_s: f64,
    pub seconds_per_step: f64,
    pub configs: Vec<FrameworkConfig>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_ratios_round_to_one_decimal() {
        assert_eq!(percent_1dp(79.4, 1265.6), 6.3);
        assert_eq!(percent_1dp(310.1, 1513.7), 20.5);
        assert_eq!(percent_1dp(0.0, 1513.7), 0.0);
        assert_eq!(percent_1dp(1.0, 0.0), 0.0);
        assert_eq!(percent_1dp(1.0, 1.0), 100.0);
    }

    #[test]
    fn variance_is_population() {
        assert_eq!(variance(&[1.0, 3.0]), 1.0);
        assert_eq!(variance(&[]), 0.0);
    }

    #[test]
    fn csv_has_table_columns() {
        let row = MetricsRow { variant: "full".into(), easy: LevelStats::default(), normal: LevelStats::default(), hard: LevelStats::default() };
        let mut buf = vec![];
        MetricsTable { rows: vec![row] }.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 13);
        assert!(header.starts_with("variant,easy_success_rate,easy_human_time_s,easy_total_time_s,easy_human_ratio,normal_"));
        assert!(header.ends_with("hard_human_ratio"));
    }
}
