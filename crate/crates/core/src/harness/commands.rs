use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{evaluate_on, for_seeds, run_closed_loop, train_baseline, LoopOutcome};
use super::metrics::{LatencyReport, MetricsPhase, MetricsRow, MetricsTable};
use crate::adapt::write_events;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, GruParameters};
use crate::sim::ActivityClass;

pub const BASELINE_STEM: &str = "baseline";
pub const SHIFTED_STEM: &str = "shifted";
pub const CLOSED_LOOP_STEM: &str = "closed_loop";
pub const SWEEP_STEM: &str = "sweep";

pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir
        .join("checkpoints")
        .join(format!("baseline-seed{seed}.ckpt"))
}

/// Loads the baseline of every configured seed.
pub fn load_baselines(cfg: &ExperimentConfig) -> Result<Vec<(u64, GruParameters)>> {
    cfg.seeds
        .iter()
        .map(|&s| {
            let p = checkpoint_path(cfg, s);
            if !p.exists() {
                return Err(Error::Invalid(format!(
                    "baseline checkpoint {} is missing; run train-baseline first",
                    p.display()
                )));
            }
            let params = load_checkpoint(&p)?;
            if params.config() != Some(cfg.model_config()) {
                return Err(Error::Invalid(format!(
                    "{} does not match the configured model",
                    p.display()
                )));
            }
            Ok((s, params))
        })
        .collect()
}

/// Trains and saves one baseline per seed; writes `baseline.{csv,json}`.
pub fn train_baselines(cfg: &ExperimentConfig, parallel: bool) -> Result<MetricsTable> {
    let runs = for_seeds(&cfg.seeds, parallel, |s| train_baseline(cfg, s))?;
    std::fs::create_dir_all(cfg.output_dir.join("checkpoints"))?;
    let mut table = MetricsTable::default();
    for r in &runs {
        save_checkpoint(&r.params, &checkpoint_path(cfg, r.seed))?;
        table.push(MetricsRow::new(r.seed, MetricsPhase::Baseline, &r.table));
    }
    table.write(&cfg.output_dir, BASELINE_STEM)?;
    Ok(table)
}

/// Scores the saved baselines under the configured shift.
pub fn inject_shift(cfg: &ExperimentConfig, parallel: bool) -> Result<MetricsTable> {
    let baselines = load_baselines(cfg)?;
    let rows = for_seeds(&cfg.seeds, parallel, |s| {
        let params = &baselines.iter().find(|b| b.0 == s).expect("loaded").1;
        Ok(MetricsRow::new(
            s,
            MetricsPhase::Shifted,
            &evaluate_on(cfg, params, s, true)?,
        ))
    })?;
    let table = MetricsTable { rows };
    table.write(&cfg.output_dir, SHIFTED_STEM)?;
    Ok(table)
}

/// Scores one checkpoint, or every saved baseline, on the in-domain or
/// shifted test recording of each seed.
pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    shifted: bool,
) -> Result<MetricsTable> {
    let models: Vec<(u64, GruParameters)> = match checkpoint {
        Some(p) => {
            let params = load_checkpoint(p)?;
            cfg.seeds.iter().map(|&s| (s, params.clone())).collect()
        }
        None => load_baselines(cfg)?,
    };
    let phase = if shifted {
        MetricsPhase::Shifted
    } else {
        MetricsPhase::Baseline
    };
    let mut table = MetricsTable::default();
    for (s, params) in &models {
        table.push(MetricsRow::new(
            *s,
            phase,
            &evaluate_on(cfg, params, *s, shifted)?,
        ));
    }
    table.write(&cfg.output_dir, "eval")?;
    Ok(table)
}

/// Per-run record kept next to the metric tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub teacher_precision: f64,
    pub outcome: LoopOutcome,
    pub teacher_calls_outside_collection: u64,
    pub teacher_calls_during_collection: u64,
    pub monitored_mean_confidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSummary {
    pub metrics: MetricsTable,
    pub runs: Vec<RunRecord>,
    pub latency: BTreeMap<String, LatencyReport>,
}

/// Shift plus one adaptation cycle per seed, at the configured teacher
/// precision or, with `sweep`, at every sweep precision. Writes the metric
/// tables, one event log per run, the run records and the latency report.
/// Without `sweep`, runs each of `precisions` (the configured teacher
/// precision when empty).
pub fn closed_loop(
    cfg: &ExperimentConfig,
    parallel: bool,
    sweep: bool,
    precisions: &[f64],
) -> Result<ClosedLoopSummary> {
    let baselines = load_baselines(cfg)?;
    let precisions = if sweep {
        cfg.sweep_precisions.clone()
    } else if precisions.is_empty() {
        vec![cfg.teacher.precision]
    } else {
        precisions.to_vec()
    };
    if let Some(p) = precisions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!(
            "teacher precision {p} outside [0, 1]"
        )));
    }
    let per_seed = for_seeds(&cfg.seeds, parallel, |s| {
        let params = &baselines.iter().find(|b| b.0 == s).expect("loaded").1;
        let base = evaluate_on(cfg, params, s, false)?;
        let runs = precisions
            .iter()
            .map(|&p| run_closed_loop(cfg, params, s, p))
            .collect::<Result<Vec<_>>>()?;
        Ok((s, base, runs))
    })?;

    let stem = if sweep { SWEEP_STEM } else { CLOSED_LOOP_STEM };
    let events_dir = cfg.output_dir.join("events");
    std::fs::create_dir_all(&events_dir)?;
    let mut metrics = MetricsTable::default();
    let mut records = Vec::new();
    let mut latency = BTreeMap::new();
    for (s, base, runs) in &per_seed {
        metrics.push(MetricsRow::new(*s, MetricsPhase::Baseline, base));
        metrics.push(MetricsRow::new(*s, MetricsPhase::Shifted, &runs[0].shifted));
        for r in runs {
            metrics.push(
                MetricsRow::new(*s, MetricsPhase::Recovered, &r.recovered)
                    .with_precision(r.precision),
            );
            let tag = format!("seed{s}-p{:.3}", r.precision);
            let file = std::fs::File::create(events_dir.join(format!("{stem}-{tag}.jsonl")))?;
            write_events(&r.events, std::io::BufWriter::new(file))?;
            latency.insert(tag, r.latency);
            records.push(RunRecord {
                seed: *s,
                teacher_precision: r.precision,
                outcome: r.outcome.clone(),
                teacher_calls_outside_collection: r.teacher_calls_outside,
                teacher_calls_during_collection: r.teacher_calls_inside,
                monitored_mean_confidence: r.monitored_mean_confidence,
            });
        }
    }
    metrics.write(&cfg.output_dir, stem)?;
    std::fs::write(
        cfg.output_dir.join(format!("{stem}_runs.json")),
        pretty_json(&records),
    )?;
    std::fs::write(
        cfg.output_dir.join(format!("{stem}_latency.json")),
        pretty_json(&latency),
    )?;
    Ok(ClosedLoopSummary {
        metrics,
        runs: records,
        latency,
    })
}

fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in &idx[i..=j] {
                r[*k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn target(name: &str, passed: bool, detail: String) -> Target {
    Target {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Class-wise mean accuracy over the rows of one phase.
fn class_means(t: &MetricsTable, phase: MetricsPhase, p: Option<f64>) -> Vec<f64> {
    let rows: Vec<&MetricsRow> = t
        .rows
        .iter()
        .filter(|r| r.phase == phase && r.teacher_precision == p)
        .collect();
    (0..ActivityClass::COUNT)
        .map(|c| rows.iter().map(|r| r.per_class[c]).sum::<f64>() / rows.len().max(1) as f64)
        .collect()
}

pub fn baseline_targets(t: &MetricsTable) -> Vec<Target> {
    let rows: Vec<f64> = t
        .rows
        .iter()
        .filter(|r| r.phase == MetricsPhase::Baseline)
        .map(|r| r.overall)
        .collect();
    let Some(mean) = t.mean_overall(MetricsPhase::Baseline, None) else {
        return Vec::new();
    };
    let min = rows.iter().copied().fold(f64::INFINITY, f64::min);
    vec![
        target("baseline-mean>=90", mean >= 90.0, format!("mean {mean:.2}")),
        target("baseline-each>=85", min >= 85.0, format!("min {min:.2}")),
    ]
}

pub fn shift_targets(t: &MetricsTable) -> Vec<Target> {
    let Some(mean) = t.mean_overall(MetricsPhase::Shifted, None) else {
        return Vec::new();
    };
    let low = class_means(t, MetricsPhase::Shifted, None)
        .iter()
        .filter(|&&a| a < 40.0)
        .count();
    vec![
        target("shifted-mean<=65", mean <= 65.0, format!("mean {mean:.2}")),
        target(
            "shifted-classes<40>=2",
            low >= 2,
            format!("{low} classes below 40"),
        ),
    ]
}

/// Recovery targets for the recovered rows at precision `p`.
pub fn recovery_targets(
    t: &MetricsTable,
    p: f64,
    min_gain: f64,
    min_abs: Option<f64>,
) -> Vec<Target> {
    let (Some(shifted), Some(rec)) = (
        t.mean_overall(MetricsPhase::Shifted, None),
        t.mean_overall(MetricsPhase::Recovered, Some(p)),
    ) else {
        return Vec::new();
    };
    let gain = rec - shifted;
    let mut out = vec![target(
        &format!("recovery-p{p}-gain>={min_gain}"),
        gain >= min_gain,
        format!("{shifted:.2} -> {rec:.2} ({gain:+.2})"),
    )];
    if let Some(a) = min_abs {
        out.push(target(
            &format!("recovery-p{p}>={a}"),
            rec >= a,
            format!("recovered {rec:.2}"),
        ));
    }
    out
}

pub fn sweep_targets(t: &MetricsTable, precisions: &[f64]) -> Vec<Target> {
    let means: Vec<Option<f64>> = precisions
        .iter()
        .map(|&p| t.mean_overall(MetricsPhase::Recovered, Some(p)))
        .collect();
    if means.iter().any(Option::is_none) || precisions.len() < 2 {
        return Vec::new();
    }
    let means: Vec<f64> = means.into_iter().flatten().collect();
    let mut order: Vec<usize> = (0..precisions.len()).collect();
    order.sort_by(|&a, &b| precisions[a].total_cmp(&precisions[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| means[i]).collect();
    let monotone = sorted.windows(2).all(|w| w[1] >= w[0]);
    let rho = spearman(precisions, &means);
    let listing = order
        .iter()
        .map(|&i| format!("p={}: {:.2}", precisions[i], means[i]))
        .collect::<Vec<_>>()
        .join(", ");
    vec![target(
        "sweep-monotone",
        monotone && rho > 0.0,
        format!("{listing}; spearman {rho:.3}"),
    )]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub targets: Vec<Target>,
    pub markdown: String,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.targets.iter().all(|t| t.passed)
    }
}

fn read_table(dir: &Path, stem: &str) -> Result<Option<MetricsTable>> {
    let p = dir.join(format!("{stem}.json"));
    if !p.exists() {
        return Ok(None);
    }
    MetricsTable::from_json(&std::fs::read_to_string(p)?).map(Some)
}

fn markdown_table(title: &str, t: &MetricsTable) -> String {
    let mut keys: Vec<(MetricsPhase, Option<f64>)> = t
        .rows
        .iter()
        .map(|r| (r.phase, r.teacher_precision))
        .collect();
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.unwrap_or(-1.0).total_cmp(&b.1.unwrap_or(-1.0)))
    });
    keys.dedup();
    let mut s = format!("## {title}\n\n| class |");
    for (phase, p) in &keys {
        match p {
            Some(p) => s.push_str(&format!(" {} (p={p}) |", phase.name())),
            None => s.push_str(&format!(" {} |", phase.name())),
        }
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(keys.len()));
    s.push('\n');
    let cols: Vec<Vec<f64>> = keys.iter().map(|(ph, p)| class_means(t, *ph, *p)).collect();
    for (c, class) in ActivityClass::ALL.iter().enumerate() {
        s.push_str(&format!("| {} |", class.name()));
        for col in &cols {
            s.push_str(&format!(" {:.2} |", col[c]));
        }
        s.push('\n');
    }
    s.push_str("| overall |");
    for (ph, p) in &keys {
        s.push_str(&format!(
            " {:.2} |",
            t.mean_overall(*ph, *p).unwrap_or(f64::NAN)
        ));
    }
    s.push_str("\n\n");
    s
}

/// Collects whatever metric files exist in the output directory into
/// `report.md`, with seed-mean tables and the degrade/recover targets.
pub fn report(cfg: &ExperimentConfig) -> Result<Report> {
    let dir = &cfg.output_dir;
    let mut md = String::from(
        "# csiloop report\n\nAccuracies are class-averaged percentages, mean over seeds.\n\n",
    );
    let mut targets = Vec::new();
    let mut found = false;
    if let Some(t) = read_table(dir, BASELINE_STEM)? {
        found = true;
        md.push_str(&markdown_table("Baseline", &t));
        targets.extend(baseline_targets(&t));
    }
    if let Some(t) = read_table(dir, CLOSED_LOOP_STEM)? {
        found = true;
        md.push_str(&markdown_table("Closed loop", &t));
        targets.extend(shift_targets(&t));
        let ps: Vec<f64> = {
            let mut v: Vec<f64> = t.rows.iter().filter_map(|r| r.teacher_precision).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        for p in ps {
            let (gain, abs) = if p >= 1.0 {
                (25.0, Some(78.0))
            } else {
                (15.0, None)
            };
            targets.extend(recovery_targets(&t, p, gain, abs));
        }
    } else if let Some(t) = read_table(dir, SHIFTED_STEM)? {
        found = true;
        md.push_str(&markdown_table("Shifted", &t));
        targets.extend(shift_targets(&t));
    }
    if let Some(t) = read_table(dir, SWEEP_STEM)? {
        found = true;
        md.push_str(&markdown_table("Teacher precision sweep", &t));
        targets.extend(sweep_targets(&t, &cfg.sweep_precisions));
    }
    if !found {
        return Err(Error::Invalid(format!(
            "no metric files in {}",
            dir.display()
        )));
    }
    md.push_str("## Targets\n\n");
    for t in &targets {
        md.push_str(&format!(
            "- {} {}: {}\n",
            if t.passed { "PASS" } else { "FAIL" },
            t.name,
            t.detail
        ));
    }
    std::fs::write(dir.join("report.md"), &md)?;
    Ok(Report {
        targets,
        markdown: md,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_matches_hand_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ranks y: 1, 2.5, 2.5, 4 -> rho = 4.5 / sqrt(5 * 4.5)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 5.0, 9.0]);
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[3.0, 3.0]), 0.0);
    }

    #[test]
    fn sweep_target_requires_monotone_means() {
        let mut t = MetricsTable::default();
        for (p, v) in [(0.5, 60.0), (0.7, 70.0), (0.9, 69.0), (1.0, 85.0)] {
            t.push(MetricsRow {
                seed: 1,
                phase: MetricsPhase::Recovered,
                teacher_precision: Some(p),
                per_class: vec![v; 8],
                overall: v,
            });
        }
        let r = sweep_targets(&t, &[0.5, 0.7, 0.9, 1.0]);
        assert!(!r[0].passed);
        t.rows[2].overall = 71.0;
        assert!(sweep_targets(&t, &[0.5, 0.7, 0.9, 1.0])[0].passed);
    }
}
