//! Learning-curve persistence (CSV), Simpson AUC and run summaries.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{CoberlError, Result};

pub const CSV_HEADER: &str =
    "step,episode_return,eval_return,loss_rl,loss_contrastive,priority_mean,epsilon_mean";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return: Option<f64>,
    pub eval_return: Option<f64>,
    pub loss_rl: Option<f64>,
    pub loss_contrastive: Option<f64>,
    pub priority_mean: Option<f64>,
    pub epsilon_mean: Option<f64>,
}

pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x}")).unwrap_or_default()
        }
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            row.step,
            cell(row.episode_return),
            cell(row.eval_return),
            cell(row.loss_rl),
            cell(row.loss_contrastive),
            cell(row.priority_mean),
            cell(row.epsilon_mean),
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim() != CSV_HEADER {
                return Err(CoberlError::Csv {
                    line: lineno,
                    message: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(CoberlError::Csv {
                line: lineno,
                message: format!("expected 7 columns, got {}", cells.len()),
            });
        }
        let step: u64 = cells[0].trim().parse().map_err(|_| CoberlError::Csv {
            line: lineno,
            message: format!("bad step '{}'", cells[0]),
        })?;
        let parse_opt = |i: usize| -> Result<Option<f64>> {
            let s = cells[i].trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| CoberlError::Csv {
                line: lineno,
                message: format!("bad value '{s}' in column {}", i + 1),
            })
        };
        rows.push(MetricsRow {
            step,
            episode_return: parse_opt(1)?,
            eval_return: parse_opt(2)?,
            loss_rl: parse_opt(3)?,
            loss_contrastive: parse_opt(4)?,
            priority_mean: parse_opt(5)?,
            epsilon_mean: parse_opt(6)?,
        });
    }
    Ok(rows)
}

/// Ordered (step, value) series with uniform step spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurve {
    pub steps: Vec<f64>,
    pub values: Vec<f64>,
}

impl LearningCurve {
    pub fn new(steps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(CoberlError::Input(format!(
                "curve length mismatch: {} steps vs {} values",
                steps.len(),
                values.len()
            )));
        }
        for w in steps.windows(2) {
            if w[1] <= w[0] {
                return Err(CoberlError::Input(format!(
                    "steps must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(LearningCurve { steps, values })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn uniform_spacing(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(CoberlError::Input("curve too short for spacing".into()));
        }
        let dx = self.steps[1] - self.steps[0];
        for w in self.steps.windows(2) {
            let d = w[1] - w[0];
            if (d - dx).abs() > 1e-9 * dx.abs().max(1.0) {
                return Err(CoberlError::Input(format!(
                    "non-uniform spacing: {dx} vs {d}"
                )));
            }
        }
        Ok(dx)
    }
}

/// AUC value with an optional warning (emitted when a trailing point had to
/// be dropped to get an even interval count).
#[derive(Clone, Debug)]
pub struct Auc {
    pub value: f64,
    pub warning: Option<String>,
}

/// Composite Simpson's rule over the step axis.
pub fn compute_auc(curve: &LearningCurve) -> Result<Auc> {
    if curve.len() < 3 {
        return Err(CoberlError::Input(format!(
            "AUC needs at least 3 points, got {}",
            curve.len()
        )));
    }
    let dx = curve.uniform_spacing()?;
    let mut n = curve.len();
    let mut warning = None;
    if n % 2 == 0 {
        warning = Some(format!(
            "even point count {n}: dropping trailing point for Simpson's rule"
        ));
        n -= 1;
    }
    let y = &curve.values[..n];
    let mut sum = y[0] + y[n - 1];
    for (i, &v) in y.iter().enumerate().take(n - 1).skip(1) {
        sum += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    Ok(Auc {
        value: dx / 3.0 * sum,
        warning,
    })
}

/// Simpson integral of `max(value - threshold, 0)` (clipped samples).
pub fn auc_above_threshold(curve: &LearningCurve, threshold: f64) -> Result<Auc> {
    let clipped = LearningCurve::new(
        curve.steps.clone(),
        curve.values.iter().map(|v| (v - threshold).max(0.0)).collect(),
    )?;
    compute_auc(&clipped)
}

/// Linear-interpolation resample onto a uniform grid with spacing `dx`
/// starting at the first step. Used before AUC when the raw logging cadence
/// differs from the required spacing.
pub fn resample_uniform(curve: &LearningCurve, dx: f64) -> Result<LearningCurve> {
    if curve.len() < 2 {
        return Err(CoberlError::Input("cannot resample a curve with < 2 points".into()));
    }
    let lo = curve.steps[0];
    let hi = *curve.steps.last().unwrap();
    let n = ((hi - lo) / dx).floor() as usize + 1;
    let mut steps = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut seg = 0usize;
    for i in 0..n {
        let x = lo + i as f64 * dx;
        while seg + 2 < curve.len() && curve.steps[seg + 1] < x {
            seg += 1;
        }
        let (x0, x1) = (curve.steps[seg], curve.steps[seg + 1]);
        let (y0, y1) = (curve.values[seg], curve.values[seg + 1]);
        let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
        steps.push(x);
        values.push(y0 + t * (y1 - y0));
    }
    LearningCurve::new(steps, values)
}

/// Step spacing mandated for learning-curve AUC.
pub const AUC_DELTA: f64 = 5.0;

/// AUC of the eval-return curve in a metrics CSV, resampled to [`AUC_DELTA`].
pub fn auc_of_eval_curve(rows: &[MetricsRow]) -> Result<Auc> {
    let curve = eval_curve(rows)?;
    let resampled = resample_uniform(&curve, AUC_DELTA)?;
    compute_auc(&resampled)
}

pub fn eval_curve(rows: &[MetricsRow]) -> Result<LearningCurve> {
    let mut steps = Vec::new();
    let mut values = Vec::new();
    for row in rows {
        if let Some(v) = row.eval_return {
            steps.push(row.step as f64);
            values.push(v);
        }
    }
    LearningCurve::new(steps, values)
}

#[derive(Clone, Debug)]
pub struct SeedSummary {
    pub path: String,
    pub final_window_mean: f64,
    pub final_window_reports: usize,
    pub auc: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seeds: Vec<SeedSummary>,
    pub final_mean: f64,
    pub final_stderr: f64,
    pub auc_mean: f64,
}

impl RunSummary {
    /// Plain-text report followed by a machine-readable key=value block.
    pub fn report_text(&self) -> String {
        let mut s = String::new();
        s += "run summary\n";
        s += &format!(
            "  final-5% eval return: {:.6} +/- {:.6} (stderr over {} seed(s))\n",
            self.final_mean,
            self.final_stderr,
            self.seeds.len()
        );
        s += &format!("  mean AUC: {:.6}\n", self.auc_mean);
        for seed in &self.seeds {
            s += &format!(
                "  {}: final={:.6} over {} report(s), auc={:.6}\n",
                seed.path, seed.final_window_mean, seed.final_window_reports, seed.auc
            );
        }
        s += "---\n";
        s += &format!("final_mean = {}\n", self.final_mean);
        s += &format!("final_stderr = {}\n", self.final_stderr);
        s += &format!("auc_mean = {}\n", self.auc_mean);
        for (i, seed) in self.seeds.iter().enumerate() {
            s += &format!("seed{}_final = {}\n", i, seed.final_window_mean);
            s += &format!("seed{}_auc = {}\n", i, seed.auc);
        }
        s
    }
}

/// Fraction of the step budget that counts as the "final" reporting window.
pub const FINAL_WINDOW_FRACTION: f64 = 0.05;

/// Mean eval return over reports falling in the final 5% of the budget.
pub fn final_window_mean(rows: &[MetricsRow], budget: u64) -> Result<(f64, usize)> {
    let cutoff = (budget as f64) * (1.0 - FINAL_WINDOW_FRACTION);
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in rows {
        if let Some(v) = row.eval_return {
            if row.step as f64 >= cutoff && row.step <= budget {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CoberlError::Input(format!(
            "no eval reports in the final window [{} .. {budget}]",
            cutoff as u64
        )));
    }
    Ok((sum / n as f64, n))
}

/// Summarize one or more per-seed metrics CSVs from the same run config.
/// The step budget is taken as the maximum step across all files.
pub fn summarize_run(paths: &[std::path::PathBuf]) -> Result<RunSummary> {
    if paths.is_empty() {
        return Err(CoberlError::Input("no CSV files given".into()));
    }
    let mut budget = 0u64;
    let mut all_rows = Vec::new();
    for path in paths {
        let rows = read_metrics(path)?;
        if let Some(max) = rows.iter().map(|r| r.step).max() {
            budget = budget.max(max);
        }
        all_rows.push(rows);
    }
    let mut seeds = Vec::new();
    for (path, rows) in paths.iter().zip(&all_rows) {
        let (mean, n) = final_window_mean(rows, budget)?;
        let auc = auc_of_eval_curve(rows)?;
        seeds.push(SeedSummary {
            path: path.display().to_string(),
            final_window_mean: mean,
            final_window_reports: n,
            auc: auc.value,
        });
    }
    let n = seeds.len() as f64;
    let final_mean = seeds.iter().map(|s| s.final_window_mean).sum::<f64>() / n;
    let final_stderr = if seeds.len() < 2 {
        0.0
    } else {
        let var = seeds
            .iter()
            .map(|s| (s.final_window_mean - final_mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    };
    let auc_mean = seeds.iter().map(|s| s.auc).sum::<f64>() / n;
    Ok(RunSummary {
        seeds,
        final_mean,
        final_stderr,
        auc_mean,
    })
}
