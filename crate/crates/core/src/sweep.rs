//! α-sweep harness: merge a task vector (or a pair, as `(α, 1 − α)`) into a
//! toy base model at each grid point and record per-task losses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::ScoreTable;
use crate::toy::{evaluate, SyntheticTask, ToyModel};
use crate::vector::{apply, compose, Coefficient, TaskVector};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "VECFORGE_NUM_THREADS";

const GRID_EPS: f64 = 1e-9;

fn round12(x: f64) -> f64 {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Parses `start:stop:step` into an increasing list of points. The stop
/// value is included when it lies on the grid within `1e-9`; points are
/// rounded to 12 decimals so `0:1:0.2` yields exactly `0.6`, not
/// `0.6000000000000001`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(Error::Config(format!("grid `{spec}` is not start:stop:step")));
    };
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("grid `{spec}`: `{s}` is not a number")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config(format!("grid `{spec}`: `{s}` is not finite")))
        }
    };
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if step <= 0.0 {
        return Err(Error::Config(format!("grid `{spec}`: step must be positive")));
    }
    if stop < start {
        return Err(Error::Config(format!("grid `{spec}` is empty")));
    }
    let n = ((stop - start) / step + GRID_EPS).floor() as usize;
    Ok((0..=n).map(|i| round12(start + i as f64 * step)).collect())
}

/// Worker count: `VECFORGE_NUM_THREADS` if set to a positive integer,
/// otherwise rayon's default.
pub fn thread_limit() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Second coefficient in mix mode, `1 − α`.
    pub alpha2: Option<f64>,
    /// `None` when an external metric has no scores for this point.
    pub metrics: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub config_echo: serde_json::Value,
}

pub struct Sweep<'a> {
    pub base: &'a ToyModel,
    pub vector: &'a TaskVector,
    /// Present in mix mode.
    pub vector2: Option<&'a TaskVector>,
    pub grid: Vec<f64>,
    pub tasks: Vec<SyntheticTask>,
    pub eval_samples: usize,
    pub force: bool,
    /// External per-utterance scores; rows whose utterance id starts with
    /// `<alpha>/` are averaged into the matching grid point.
    pub scores: Option<&'a ScoreTable>,
}

impl Sweep<'_> {
    fn merged(&self, alpha: f64) -> Result<ToyModel> {
        let base = self.base.weights();
        let merged = match self.vector2 {
            None => apply(base, self.vector, Coefficient::new(alpha)?, self.force)?,
            Some(v2) => {
                let coeffs = [Coefficient::new(alpha)?, Coefficient::new(round12(1.0 - alpha))?];
                let combined = compose(&[self.vector, v2], &coeffs, self.force)?;
                apply(base, &combined, Coefficient::new(1.0)?, self.force)?
            }
        };
        self.base.with_weights(merged)
    }

    fn point(&self, alpha: f64) -> Result<SweepRow> {
        let model = self.merged(alpha)?;
        let mut metrics = BTreeMap::new();
        let mut losses = Vec::with_capacity(self.tasks.len());
        for task in &self.tasks {
            let mse = evaluate(&model, task, self.eval_samples)?;
            losses.push(mse);
            metrics.insert(format!("mse[{}]", task.task_id), Some(mse));
        }
        if self.tasks.len() > 1 {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            metrics.insert("mse_mean".to_string(), Some(mean));
        }
        if let Some(scores) = self.scores {
            let prefix = format!("{}/", fmt_f64(alpha));
            let names: BTreeSet<&str> = scores.rows.iter().map(|r| r.metric_name.as_str()).collect();
            let summary = scores.summarize_where(|id| id.starts_with(&prefix));
            for name in names {
                metrics.insert(format!("ext[{name}]"), summary.get(name).map(|s| s.mean));
            }
        }
        Ok(SweepRow {
            alpha,
            alpha2: self.vector2.map(|_| round12(1.0 - alpha)),
            metrics,
        })
    }

    pub fn run(&self) -> Result<SweepResult> {
        if self.grid.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("sweep needs at least one task".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid values must be strictly increasing".into()));
        }
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = thread_limit() {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        // `collect` on an indexed parallel iterator keeps grid order.
        let rows = pool.install(|| {
            self.grid
                .par_iter()
                .map(|&a| self.point(a))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(SweepResult {
            rows,
            config_echo: self.echo(),
        })
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": if self.vector2.is_some() { "mix" } else { "single" },
            "grid": self.grid,
            "vector": self.vector.id(),
            "vector2": self.vector2.map(|v| v.id()),
            "tasks": self.tasks.iter().map(|t| serde_json::json!({
                "task_id": t.task_id, "dim": t.dim, "seed": t.seed,
            })).collect::<Vec<_>>(),
            "eval_samples": self.eval_samples,
            "force": self.force,
            "external_scores": self.scores.is_some(),
        })
    }
}

/// Shortest decimal that round-trips; stable across platforms.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

impl SweepResult {
    pub fn metric_names(&self) -> Vec<&str> {
        self.rows
            .first()
            .map(|r| r.metrics.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// `alpha,alpha2,<metric>...`, one row per grid point.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
        let names = self.metric_names();
        let mut header = vec!["alpha", "alpha2"];
        header.extend(&names);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![fmt_f64(row.alpha), row.alpha2.map(fmt_f64).unwrap_or_default()];
            for name in &names {
                rec.push(row.metrics.get(*name).copied().flatten().map(fmt_f64).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        let _ = writeln!(s);
        Ok(s)
    }

    pub fn write(&self, csv_path: &Path, json_path: Option<&Path>) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        if let Some(p) = json_path {
            std::fs::write(p, self.to_json()?).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{random_adapter, Activation};
    use crate::vector::lora_delta;

    fn lora_delta_for(model: &ToyModel, seed: u64) -> Result<TaskVector> {
        lora_delta(&random_adapter(model, 2, 2.0, seed, 0.2)?)
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:0.2").unwrap(), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(parse_grid("0:1:0.3").unwrap(), vec![0.0, 0.3, 0.6, 0.9]);
        assert_eq!(parse_grid("0.5:0.5:1").unwrap(), vec![0.5]);
        assert_eq!(parse_grid("0:0.3:0.1").unwrap().len(), 4);
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("0:1:-0.1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("a:1:0.1").is_err());
    }

    fn setup() -> (ToyModel, TaskVector, TaskVector, SyntheticTask, SyntheticTask) {
        let model = ToyModel::identity(4, &[Activation::Tanh, Activation::Identity]).unwrap();
        let ta = SyntheticTask::preset("rotation:30", 4, 1).unwrap();
        let tb = SyntheticTask::preset("rotation:-30", 4, 1).unwrap();
        let va = lora_delta_for(&model, 3).unwrap();
        let vb = lora_delta_for(&model, 4).unwrap();
        (model, va, vb, ta, tb)
    }

    #[test]
    fn single_and_mix_rows() {
        let (model, va, vb, ta, tb) = setup();
        let sweep = Sweep {
            base: &model,
            vector: &va,
            vector2: None,
            grid: parse_grid("0:1:0.5").unwrap(),
            tasks: vec![ta.clone(), tb.clone()],
            eval_samples: 50,
            force: false,
            scores: None,
        };
        let single = sweep.run().unwrap();
        assert_eq!(single.rows.len(), 3);
        assert_eq!(single.rows[0].metrics["mse[rotation:30]"], Some(evaluate(&model, &ta, 50).unwrap()));

        let mix = Sweep { vector2: Some(&vb), ..sweep }.run().unwrap();
        assert_eq!(mix.rows[2].alpha2, Some(0.0));
        // α = 1 in mix mode is the first vector alone.
        assert_eq!(mix.rows[2].metrics, single.rows[2].metrics);

        let csv = mix.to_csv().unwrap();
        assert!(csv.starts_with("alpha,alpha2,mse[rotation:-30],mse[rotation:30],mse_mean\n0,1,"));
        assert_eq!(csv.lines().count(), 4);
        let single_csv = single.to_csv().unwrap();
        assert!(single_csv.lines().nth(1).unwrap().starts_with("0,,"));
    }

    #[test]
    fn external_scores_attach_by_alpha_prefix() {
        let (model, va, _, ta, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "utterance_id,metric_name,value\n0/u1,utmos,3\n0/u2,utmos,4\n1/u1,utmos,2\n").unwrap();
        let scores = ScoreTable::read(&p).unwrap();
        let r = Sweep {
            base: &model,
            vector: &va,
            vector2: None,
            grid: parse_grid("0:1:0.5").unwrap(),
            tasks: vec![ta],
            eval_samples: 10,
            force: false,
            scores: Some(&scores),
        }
        .run()
        .unwrap();
        let ext: Vec<_> = r.rows.iter().map(|row| row.metrics["ext[utmos]"]).collect();
        assert_eq!(ext, vec![Some(3.5), None, Some(2.0)]);
        assert!(r.to_csv().unwrap().lines().nth(2).unwrap().starts_with("0.5,,,"));
    }

    #[test]
    fn unbound_vector_needs_force() {
        let (model, va, _, ta, _) = setup();
        let unbound = TaskVector::from_checkpoint({
            let mut c = va.to_checkpoint().unwrap();
            c.metadata_mut().remove("base_fingerprint");
            c
        })
        .unwrap();
        let mut sweep = Sweep {
            base: &model,
            vector: &unbound,
            vector2: None,
            grid: vec![0.0, 1.0],
            tasks: vec![ta],
            eval_samples: 10,
            force: false,
            scores: None,
        };
        assert!(matches!(sweep.run(), Err(Error::BaseMismatch { .. })));
        sweep.force = true;
        assert!(sweep.run().is_ok());
    }
}
