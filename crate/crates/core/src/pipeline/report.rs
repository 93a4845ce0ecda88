//! results.csv, per-config learning curves, and timing.csv.

use std::fmt::Write as _;
use std::path::Path;

use super::stages::{child_configs, parse_summary, CHANCE_CONFIG};
use super::{io_err, run_stage, Ctx, ExperimentConfig, PipelineError, Stage, VOLATILE_FILE};

pub const RESULTS_HEADER: &str = "config,k,x,ivector_source,cer,wer,final_valid_logprob";
pub const TIMING_HEADER: &str = "config,iterations,median_ms_per_iter,total_minutes";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config: String,
    pub k: usize,
    pub x: f64,
    pub ivector_source: String,
    pub cer: f64,
    pub wer: f64,
    pub final_valid_logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub config: String,
    pub iterations: usize,
    pub median_ms_per_iter: f64,
    pub total_minutes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub results: Vec<ResultRow>,
    pub timing: Vec<TimingRow>,
}

struct Curve {
    iterations: usize,
    final_valid: f64,
    median_ms: f64,
    total_ms: f64,
}

/// Column `col` of a CSV file with a header line.
fn csv_column(text: &str, col: usize, path: &Path) -> Result<Vec<f64>, PipelineError> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            line.split(',')
                .nth(col)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| PipelineError::Artifact {
                    path: path.to_path_buf(),
                    msg: format!("line {}: malformed training log", i + 1),
                })
        })
        .collect()
}

fn parse_curve(log: &str, timing: &str, dir: &Path) -> Result<Curve, PipelineError> {
    let valid = csv_column(log, 2, &dir.join("log.csv"))?;
    let wall = csv_column(timing, 1, &dir.join(VOLATILE_FILE))?;
    if wall.len() != valid.len() {
        return Err(PipelineError::Artifact {
            path: dir.join(VOLATILE_FILE),
            msg: "row count differs from log.csv".into(),
        });
    }
    let mut sorted = wall.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median_ms = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    Ok(Curve {
        iterations: n,
        final_valid: valid.last().copied().unwrap_or(f64::NAN),
        median_ms,
        total_ms: wall.iter().sum(),
    })
}

pub(crate) fn write_report(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let summary_path = ctx.path("score/summary.tsv");
    let summary = parse_summary(&ctx.read_string("score/summary.tsv")?, &summary_path)?;
    let configs = child_configs(cfg);
    let mut results = format!("{RESULTS_HEADER}\n");
    let mut timing = format!("{TIMING_HEADER}\n");
    let mut add_timing = |name: &str, c: &Curve| {
        let _ = writeln!(
            timing,
            "{name},{},{:.3},{:.4}",
            c.iterations,
            c.median_ms,
            c.total_ms / 60_000.0
        );
    };

    let mut curve_of = |dir: &str, name: &str| -> Result<Curve, PipelineError> {
        let log = ctx.read_string(format!("{dir}/log.csv"))?;
        let timing = ctx.read_string(format!("{dir}/{VOLATILE_FILE}"))?;
        let c = parse_curve(&log, &timing, &ctx.path(dir))?;
        ctx.write(format!("curves/{name}.csv"), &log)?;
        add_timing(name, &c);
        Ok(c)
    };
    curve_of("train-parent", "parent")?;

    let mut scored = 0;
    for cc in &configs {
        let Some((_, s)) = summary.iter().find(|(n, _)| *n == cc.name) else {
            continue;
        };
        let curve = curve_of(&format!("transfer-train/{}", cc.name), &cc.name)?;
        let _ = writeln!(
            results,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            cc.name,
            cc.k,
            cc.x,
            cfg.ivector.source.name(),
            s.chars.rate(),
            s.words.rate(),
            curve.final_valid
        );
        scored += 1;
    }
    debug_assert!(summary
        .iter()
        .all(|(n, _)| n == CHANCE_CONFIG || configs.iter().any(|c| &c.name == n)));
    if scored == 0 {
        return Err(PipelineError::NoScoredConfigs);
    }
    ctx.write("results.csv", results)?;
    ctx.write("timing.csv", timing)?;
    Ok(())
}

fn bad_row(path: &Path, line: usize) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_path_buf(),
        msg: format!("line {line}: malformed row"),
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || bad_row(path, i + 1);
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
        out.push(ResultRow {
            config: f[0].to_string(),
            k: f[1].parse().map_err(|_| bad())?,
            x: num(2)?,
            ivector_source: f[3].to_string(),
            cer: num(4)?,
            wer: num(5)?,
            final_valid_logprob: num(6)?,
        });
    }
    Ok(out)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRow>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || bad_row(path, i + 1);
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(TimingRow {
            config: f[0].to_string(),
            iterations: f[1].parse().map_err(|_| bad())?,
            median_ms_per_iter: f[2].parse().map_err(|_| bad())?,
            total_minutes: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Runs the report stage and reads back what it wrote.
pub fn emit_report(cfg: &ExperimentConfig) -> Result<Report, PipelineError> {
    run_stage(Stage::Report, cfg)?;
    Ok(Report {
        results: read_results(&cfg.out_dir.join("results.csv"))?,
        timing: read_timing(&cfg.out_dir.join("timing.csv"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_summary() {
        let c = parse_curve(
            "iter,train_logprob,valid_logprob\n0,-3,-3.5\n1,-2,-2.5\n2,-1,-1.5\n",
            "iter,wall_ms\n0,10\n1,30\n2,20\n",
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(c.iterations, 3);
        assert_eq!(c.final_valid, -1.5);
        assert_eq!(c.median_ms, 20.0);
        assert_eq!(c.total_ms, 60.0);
        assert!(parse_curve("h\n0,a,b\n", "h\n0,1\n", Path::new("x")).is_err());
        assert!(parse_curve("h\n0,1,2\n", "h\n", Path::new("x")).is_err());
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        std::fs::write(
            &p,
            format!("{RESULTS_HEADER}\nk2_x0.25,2,0.25,child,0.5,0.75,-1.25\n"),
        )
        .unwrap();
        let rows = read_results(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k, 2);
        assert_eq!(rows[0].x, 0.25);
        std::fs::write(&p, format!("{RESULTS_HEADER}\nbad\n")).unwrap();
        assert!(read_results(&p).is_err());
    }
}
