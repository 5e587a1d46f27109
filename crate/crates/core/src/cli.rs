//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for I/O failures, 2 for invalid input.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{
    fingerprint, read_checkpoint, read_lora, write_checkpoint, write_lora, Checkpoint, ManifestEntry,
    VectorKind, VectorManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{corpus_error_rates, read_records, EmbeddingSet, LangMode, ScoreTable};
use crate::sweep::{fmt_f64, parse_grid, Sweep};
use crate::tensor::stats;
use crate::toy::{
    evaluate, evaluate_with_adapter, gradient_check, random_adapter, train_lora_with_history,
    SyntheticTask, ToyModel, TrainConfig,
};
use crate::vector::{
    apply, compose, extract_vector, lora_delta, read_vector, vector_stats, write_vector, Coefficient,
    TaskVector,
};

#[derive(Debug, Parser)]
#[command(name = "vecforge", version, about = "Task-vector arithmetic over model checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Task vector = fine-tuned − pretrained.
    Extract {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vector id; defaults to one derived from the content.
        #[arg(long)]
        id: Option<String>,
    },
    /// base + Σ αᵢ · vectorᵢ.
    Merge {
        #[arg(long)]
        base: PathBuf,
        /// Vector file, or a vector id when --manifest is given.
        #[arg(long = "vector", required = true, num_args = 1..)]
        vectors: Vec<String>,
        #[arg(long = "alpha", required = true, num_args = 1.., allow_negative_numbers = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip base-fingerprint checks.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Expand a LoRA adapter into a dense task vector.
    LoraExpand {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bind the vector to this base checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
    },
    /// Merge at each point of an α grid and evaluate toy tasks.
    Sweep(SweepArgs),
    /// Toy-lab model, training and checks.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Transcript and embedding metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print the tensors (and provenance) of a file.
    Inspect {
        #[arg(long, conflicts_with = "vector", required_unless_present = "vector")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vector: Option<PathBuf>,
    },
    /// Registry of named vectors.
    #[command(subcommand)]
    Manifest(ManifestCommand),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Toy model checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub vector: PathBuf,
    /// Second vector; switches to mix mode with coefficients (α, 1 − α).
    #[arg(long)]
    pub vector2: Option<PathBuf>,
    #[arg(long, default_value = "0:1:0.2")]
    pub grid: String,
    /// Task preset to evaluate; repeat for several.
    #[arg(long = "task", required = true)]
    pub tasks: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the result as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    /// External scores (`utterance_id,metric_name,value`, ids prefixed `<alpha>/`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f64,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Write the reference two-layer, 16-wide model.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a LoRA adapter on a task preset.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        /// Write the per-step loss as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Mean squared error on a task's evaluation samples.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        adapter_scale: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic LoRA gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "rotation:30")]
        task: String,
        /// Adapter to check; by default a seeded random one.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    /// CSV or JSONL with `ref`, `hyp`, `duration_seconds`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum, default_value_t = LangArg::BasicEn)]
    pub lang: LangArg,
    /// Write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LangArg {
    BasicEn,
    None,
}

impl From<LangArg> for LangMode {
    fn from(l: LangArg) -> Self {
        match l {
            LangArg::BasicEn => LangMode::BasicEn,
            LangArg::None => LangMode::None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Corpus word error rate after filtering.
    Wer(RecordArgs),
    /// Corpus character error rate after filtering.
    Cer(RecordArgs),
    /// Cosine similarity of each sample embedding to a reference centroid.
    AccentSim {
        /// Checkpoint of 1-D sample embeddings.
        #[arg(long)]
        sample: PathBuf,
        /// Checkpoint of 1-D reference embeddings.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Aggregate external per-utterance scores by metric.
    Scores {
        #[arg(long)]
        scores: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ManifestCommand {
    /// Register a vector (or LoRA adapter) file.
    Add {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::FullDelta)]
        kind: KindArg,
        /// Required for adapters; vectors default to their own id.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "")]
        label: String,
    },
    List {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    FullDelta,
    Lora,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_io() {
                1
            } else {
                2
            }
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(io_err)?
    };
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Extract {
            pretrained,
            finetuned,
            out: path,
            id,
        } => {
            let pre = read_checkpoint(&pretrained)?;
            let ft = read_checkpoint(&finetuned)?;
            let mut v = extract_vector(&ft, &pre)?;
            if let Some(id) = id {
                v = v.with_id(id);
            }
            write_vector(&v, &path)?;
            say!(out, "vector_id={} l2_norm={}", v.id(), fmt_f64(v.l2_norm()));
        }
        Command::Merge {
            base,
            vectors,
            alphas,
            out: path,
            force,
            manifest,
        } => {
            if vectors.len() != alphas.len() {
                return Err(Error::LengthMismatch {
                    vectors: vectors.len(),
                    coefficients: alphas.len(),
                });
            }
            let manifest = manifest.map(VectorManifest::load).transpose()?;
            let loaded = vectors
                .iter()
                .map(|v| load_vector_ref(v, manifest.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let coeffs = alphas.iter().map(|&a| Coefficient::new(a)).collect::<Result<Vec<_>>>()?;
            for c in &coeffs {
                let a = c.value();
                if !(0.0..=1.0).contains(&a) {
                    say!(err, "warning: alpha {} lies outside [0, 1]; extrapolating", fmt_f64(a));
                }
                if c.is_unusual() {
                    say!(err, "warning: alpha {} lies outside [0, 2]; results may be far from either model", fmt_f64(a));
                }
            }
            let base_ckpt = read_checkpoint(&base)?;
            if force {
                let fp = fingerprint(&base_ckpt);
                for v in &loaded {
                    if v.base_fingerprint() != Some(fp.as_str()) {
                        say!(
                            err,
                            "warning: {} was extracted against {}, not this base; continuing (--force)",
                            v.id(),
                            v.base_fingerprint().unwrap_or("<unbound>")
                        );
                    }
                }
            }
            let merged = if loaded.len() == 1 {
                apply(&base_ckpt, &loaded[0], coeffs[0], force)?
            } else {
                let refs: Vec<&TaskVector> = loaded.iter().collect();
                let combined = compose(&refs, &coeffs, force)?;
                apply(&base_ckpt, &combined, Coefficient::new(1.0)?, force)?
            };
            write_checkpoint(&merged, &path)?;
            say!(out, "fingerprint={}", fingerprint(&merged));
        }
        Command::LoraExpand {
            adapter,
            out: path,
            base,
            id,
        } => {
            let adapter = read_lora(&adapter)?;
            let mut v = lora_delta(&adapter)?;
            if let Some(base) = base {
                let base = read_checkpoint(&base)?;
                // Validates keys and shapes against the base.
                apply(&base, &v, Coefficient::new(0.0)?, true)?;
                v = v.with_base_fingerprint(fingerprint(&base));
            }
            if let Some(id) = id {
                v = v.with_id(id);
            }
            write_vector(&v, &path)?;
            say!(out, "vector_id={} l2_norm={}", v.id(), fmt_f64(v.l2_norm()));
        }
        Command::Sweep(args) => run_sweep(args, out)?,
        Command::Toy(cmd) => run_toy(cmd, out)?,
        Command::Eval(cmd) => run_eval(cmd, out)?,
        Command::Inspect { checkpoint, vector } => {
            if let Some(p) = checkpoint {
                print_checkpoint(&read_checkpoint(&p)?, out)?;
            } else if let Some(p) = vector {
                let v = read_vector(&p)?;
                let pv = v.provenance();
                say!(out, "vector_id: {}", pv.vector_id);
                say!(out, "source: {}", pv.source.as_str());
                say!(out, "base_fingerprint: {}", pv.base_fingerprint.as_deref().unwrap_or("<unbound>"));
                say!(out, "scale: {}", fmt_f64(pv.scale));
                if let Some(cs) = &pv.components {
                    for c in cs {
                        say!(out, "component: {} × {}", c.vector_id, fmt_f64(c.coefficient));
                    }
                }
                say!(out, "l2_norm: {}", fmt_f64(v.l2_norm()));
                say!(out, "name\tshape\tl2_norm\tmax_abs\tmean\tfraction_zero");
                for (name, s) in vector_stats(&v) {
                    let shape = v.get(&name).unwrap().shape().to_vec();
                    say!(
                        out,
                        "{name}\t{shape:?}\t{}\t{}\t{}\t{}",
                        fmt_f64(s.l2_norm),
                        fmt_f64(s.max_abs),
                        fmt_f64(s.mean),
                        fmt_f64(s.fraction_zero)
                    );
                }
            }
        }
        Command::Manifest(ManifestCommand::Add {
            manifest,
            path,
            kind,
            id,
            label,
        }) => {
            let mut m = if manifest.exists() {
                VectorManifest::load(&manifest)?
            } else {
                VectorManifest::default()
            };
            let entry = match kind {
                KindArg::FullDelta => {
                    let v = read_vector(&path)?;
                    ManifestEntry {
                        vector_id: id.unwrap_or_else(|| v.id().to_string()),
                        path: path.display().to_string(),
                        kind: VectorKind::FullDelta,
                        base_fingerprint: v
                            .base_fingerprint()
                            .ok_or_else(|| Error::Manifest("vector is not bound to a base".into()))?
                            .to_string(),
                        label,
                    }
                }
                KindArg::Lora => {
                    let a = read_lora(&path)?;
                    ManifestEntry {
                        vector_id: id.ok_or_else(|| Error::Manifest("adapters need --id".into()))?,
                        path: path.display().to_string(),
                        kind: VectorKind::Lora,
                        base_fingerprint: a
                            .base_fingerprint()
                            .ok_or_else(|| Error::Manifest("adapter is not bound to a base".into()))?
                            .to_string(),
                        label,
                    }
                }
            };
            let vid = entry.vector_id.clone();
            m.add(entry)?;
            m.save(&manifest)?;
            say!(out, "added {vid}");
        }
        Command::Manifest(ManifestCommand::List { manifest }) => {
            let m = VectorManifest::load(&manifest)?;
            say!(out, "vector_id\tkind\tbase_fingerprint\tpath\tlabel");
            for e in &m.entries {
                let kind = match e.kind {
                    VectorKind::FullDelta => "full_delta",
                    VectorKind::Lora => "lora",
                };
                say!(out, "{}\t{kind}\t{}\t{}\t{}", e.vector_id, e.base_fingerprint, e.path, e.label);
            }
        }
    }
    Ok(())
}

/// A path, or an id looked up in the manifest (paths resolve relative to it).
fn load_vector_ref(spec: &str, manifest: Option<&VectorManifest>) -> Result<TaskVector> {
    let Some(entry) = manifest.and_then(|m| m.get(spec)) else {
        return read_vector(spec);
    };
    let v = match entry.kind {
        VectorKind::FullDelta => read_vector(&entry.path)?,
        VectorKind::Lora => lora_delta(&read_lora(&entry.path)?)?,
    };
    Ok(v.with_id(entry.vector_id.clone()))
}

fn print_checkpoint(ckpt: &Checkpoint, out: &mut dyn Write) -> Result<()> {
    say!(out, "fingerprint: {}", fingerprint(ckpt));
    for (k, v) in ckpt.metadata() {
        say!(out, "meta {k}: {v}");
    }
    say!(out, "name\tshape\tdtype\tl2_norm\tmax_abs\tmean\tfraction_zero");
    for (name, t) in ckpt.tensors() {
        let s = stats(t);
        say!(
            out,
            "{name}\t{:?}\t{}\t{}\t{}\t{}\t{}",
            t.shape(),
            t.dtype().as_str(),
            fmt_f64(s.l2_norm),
            fmt_f64(s.max_abs),
            fmt_f64(s.mean),
            fmt_f64(s.fraction_zero)
        );
    }
    say!(out, "parameters: {}", ckpt.num_parameters());
    Ok(())
}

fn load_model(path: &Path) -> Result<ToyModel> {
    ToyModel::from_checkpoint(read_checkpoint(path)?)
}

fn run_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let base = load_model(&a.base)?;
    let v1 = read_vector(&a.vector)?;
    let v2 = a.vector2.as_ref().map(read_vector).transpose()?;
    let tasks = a
        .tasks
        .iter()
        .map(|t| SyntheticTask::preset(t, base.input_dim(), a.seed))
        .collect::<Result<Vec<_>>>()?;
    let scores = a.scores.as_ref().map(ScoreTable::read).transpose()?;
    let result = Sweep {
        base: &base,
        vector: &v1,
        vector2: v2.as_ref(),
        grid,
        tasks,
        eval_samples: a.samples,
        force: a.force,
        scores: scores.as_ref(),
    }
    .run()?;
    result.write(&a.out, a.json.as_deref())?;
    say!(out, "wrote {} rows to {}", result.rows.len(), a.out.display());
    Ok(())
}

fn run_toy(cmd: ToyCommand, out: &mut dyn Write) -> Result<()> {
    match cmd {
        ToyCommand::Init { out: path, seed } => {
            let m = ToyModel::reference(seed)?;
            let ckpt = m.to_checkpoint();
            write_checkpoint(&ckpt, &path)?;
            say!(out, "fingerprint={}", fingerprint(&ckpt));
        }
        ToyCommand::Train {
            model,
            task,
            out: path,
            seed,
            train,
            history,
        } => {
            let m = load_model(&model)?;
            let task = SyntheticTask::preset(&task, m.input_dim(), seed)?;
            let cfg = TrainConfig {
                learning_rate: train.lr,
                steps: train.steps,
                batch_size: train.batch_size,
                lora_rank: train.rank,
                lora_alpha: train.lora_alpha,
                seed,
            };
            let (adapter, losses) = train_lora_with_history(&m, &task, &cfg)?;
            write_lora(&adapter, &path)?;
            if let Some(h) = history {
                let mut text = String::from("step,loss\n");
                for (i, l) in losses.iter().enumerate() {
                    text.push_str(&format!("{},{}\n", i + 1, fmt_f64(*l)));
                }
                std::fs::write(&h, text).map_err(|e| Error::io(&h, e))?;
            }
            let last = losses.last().copied().unwrap_or(f64::NAN);
            say!(
                out,
                "fingerprint={} final_loss={}",
                fingerprint(&adapter.to_checkpoint()?),
                fmt_f64(last)
            );
        }
        ToyCommand::Eval {
            model,
            task,
            adapter,
            adapter_scale,
            samples,
            seed,
        } => {
            let m = load_model(&model)?;
            let task = SyntheticTask::preset(&task, m.input_dim(), seed)?;
            let mse = match adapter {
                Some(p) => evaluate_with_adapter(&m, Some(&read_lora(&p)?), adapter_scale, &task, samples)?,
                None => evaluate(&m, &task, samples)?,
            };
            say!(out, "mse={}", fmt_f64(mse));
        }
        ToyCommand::Gradcheck {
            model,
            task,
            adapter,
            rank,
            seed,
        } => {
            let m = match model {
                Some(p) => load_model(&p)?,
                None => ToyModel::reference(seed)?,
            };
            let task = SyntheticTask::preset(&task, m.input_dim(), seed)?;
            let adapter = match adapter {
                Some(p) => read_lora(&p)?,
                None => random_adapter(&m, rank, 2.0 * rank as f64, seed, 0.1)?,
            };
            let e = gradient_check(&m, &adapter, &task)?;
            say!(out, "max_relative_error={e:e}");
        }
    }
    Ok(())
}

fn run_eval(cmd: EvalCommand, out: &mut dyn Write) -> Result<()> {
    match cmd {
        EvalCommand::Wer(a) => report_rates(a, true, out)?,
        EvalCommand::Cer(a) => report_rates(a, false, out)?,
        EvalCommand::AccentSim { sample, reference } => {
            let refs = EmbeddingSet::read(&reference)?;
            let samples = read_checkpoint(&sample)?;
            if samples.is_empty() {
                return Err(Error::Config("sample file holds no embeddings".into()));
            }
            say!(out, "reference: {} ({} embeddings)", refs.label, refs.len());
            for (name, t) in samples.tensors() {
                let s = crate::metrics::accent_similarity(t, &refs)?;
                say!(out, "{name}\t{}", fmt_f64(s));
            }
        }
        EvalCommand::Scores { scores } => {
            let table = ScoreTable::read(&scores)?;
            say!(out, "metric\tcount\tmean\tmin\tmax");
            for (name, s) in table.summarize() {
                say!(out, "{name}\t{}\t{}\t{}\t{}", s.count, fmt_f64(s.mean), fmt_f64(s.min), fmt_f64(s.max));
            }
        }
    }
    Ok(())
}

fn report_rates(a: RecordArgs, word_level: bool, out: &mut dyn Write) -> Result<()> {
    let records = read_records(&a.records)?;
    let r = corpus_error_rates(&records, a.lang.into())?;
    let (name, rate, counts) = if word_level {
        ("wer", r.wer, r.words)
    } else {
        ("cer", r.cer, r.chars)
    };
    say!(
        out,
        "{name}={} substitutions={} insertions={} deletions={} kept={} rejected={}",
        fmt_f64(rate),
        counts.substitutions,
        counts.insertions,
        counts.deletions,
        r.kept,
        r.rejected.len()
    );
    for rej in &r.rejected {
        let id = rej.record.id.clone().unwrap_or_else(|| format!("#{}", rej.index));
        say!(out, "rejected\t{id}\t{}", rej.rule.name());
    }
    if let Some(p) = a.json {
        let report: BTreeMap<&str, serde_json::Value> = [
            ("wer", serde_json::json!(r.wer)),
            ("cer", serde_json::json!(r.cer)),
            ("words", serde_json::to_value(r.words)?),
            ("chars", serde_json::to_value(r.chars)?),
            ("kept", serde_json::json!(r.kept)),
            ("rejected", serde_json::to_value(&r.rejected)?),
        ]
        .into_iter()
        .collect();
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
