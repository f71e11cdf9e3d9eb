//! Aggregation of seed curves into binned mean ± standard error.

use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use super::run::{read_metrics, CONFIG_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::trainer::MetricsRow;

pub const N_BINS: usize = 100;
pub const EXPORT_HEADER: &str = "run,algo,bin,step,mean,stderr,n_seeds";

/// One aggregated row.
#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub run: String,
    pub algo: String,
    pub bin: usize,
    /// Centre of the bin in env steps.
    pub step: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

/// Averages a curve into `N_BINS` equal-width bins over `[0, max_step]`.
/// Bins without an evaluation repeat the previous bin (the first filled bin
/// for leading gaps).
pub fn bin_curve(rows: &[MetricsRow], max_step: u64) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Argument("cannot bin an empty curve".into()));
    }
    let width = (max_step as f64 + 1.0) / N_BINS as f64;
    let mut sum = [0.0; N_BINS];
    let mut count = [0usize; N_BINS];
    for r in rows {
        let b = ((r.step as f64 / width) as usize).min(N_BINS - 1);
        sum[b] += r.mean_test_return;
        count[b] += 1;
    }
    let first = (0..N_BINS).find(|&b| count[b] > 0).expect("non-empty curve");
    let mut out = Vec::with_capacity(N_BINS);
    let mut last = sum[first] / count[first] as f64;
    for b in 0..N_BINS {
        if count[b] > 0 {
            last = sum[b] / count[b] as f64;
        }
        out.push(last);
    }
    Ok(out)
}

/// Aggregates every seed of one experiment directory.
pub fn aggregate_experiment(dir: &Path) -> Result<Vec<BinRow>> {
    let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)?;
    let mut curves = Vec::new();
    for &seed in &cfg.seeds {
        let path = dir.join(format!("seed{seed}")).join(METRICS_FILE);
        if path.exists() {
            curves.push((seed, read_metrics(&path)?));
        }
    }
    if curves.is_empty() {
        return Err(Error::Argument(format!("no metrics under {}", dir.display())));
    }
    let grid: Vec<u64> = curves[0].1.iter().map(|r| r.step).collect();
    for (seed, c) in &curves[1..] {
        let g: Vec<u64> = c.iter().map(|r| r.step).collect();
        if g != grid {
            return Err(Error::Alignment(format!(
                "seed {seed} of {} evaluates at different steps than seed {}",
                dir.display(),
                curves[0].0
            )));
        }
    }
    if grid.is_empty() {
        return Err(Error::Argument(format!("empty metrics under {}", dir.display())));
    }
    let max_step = *grid.last().expect("non-empty grid");
    let binned: Vec<Vec<f64>> = curves.iter().map(|(_, c)| bin_curve(c, max_step)).collect::<Result<_>>()?;
    let n = binned.len();
    let width = (max_step as f64 + 1.0) / N_BINS as f64;
    let mut out = Vec::with_capacity(N_BINS);
    for b in 0..N_BINS {
        let vals: Vec<f64> = binned.iter().map(|c| c[b]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        out.push(BinRow {
            run: cfg.name.clone(),
            algo: cfg.algo.name().to_string(),
            bin: b,
            step: (b as f64 + 0.5) * width,
            mean,
            stderr,
            n_seeds: n,
        });
    }
    Ok(out)
}

/// CSV of the aggregated curves of all `dirs`, one row per (run, bin).
pub fn export_plot_data(dirs: &[impl AsRef<Path>]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Argument("no run directories given".into()));
    }
    let mut s = String::from(EXPORT_HEADER);
    s.push('\n');
    for d in dirs {
        for r in aggregate_experiment(d.as_ref())? {
            s.push_str(&format!(
                "{},{},{},{},{:?},{:?},{}\n",
                r.run, r.algo, r.bin, r.step, r.mean, r.stderr, r.n_seeds
            ));
        }
    }
    Ok(s)
}
