//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vecforge::checkpoint::LoraLayer;
use vecforge::metrics::{filter_records, rejection_rule, wer, EvalRecord, FilterRule};
use vecforge::sweep::{parse_grid, Sweep};
use vecforge::tensor::ulps_at_scale;
use vecforge::toy::{
    evaluate, forward_f64, gradient_check, random_adapter, train_lora, SyntheticTask, ToyModel, TrainConfig,
};
use vecforge::vector::{compose, read_vector, scale_vector, write_vector};
use vecforge::{
    apply, extract_vector, fingerprint, lora_delta, read_checkpoint, write_checkpoint, Checkpoint, Coefficient,
    LoraAdapter, Tensor, TaskVector,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn c(v: f64) -> Coefficient {
    Coefficient::new(v).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0f32, std).unwrap();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random_bool(0.5) {
        vec![rng.random_range(1..=10_000)]
    } else {
        let r = rng.random_range(1..=100);
        vec![r, rng.random_range(1..=10_000 / r)]
    }
}

/// Largest elementwise error of `actual` vs `expected`, in ulps at the
/// magnitude of the largest of the three operands.
fn max_ulps(actual: &Checkpoint, expected: &Checkpoint, operand: &Checkpoint) -> f64 {
    let mut worst = 0.0f64;
    for (k, e) in expected.tensors() {
        let a = actual.get(k).expect("same keys");
        let o = operand.get(k).expect("same keys");
        for ((&x, &y), &z) in a.data().iter().zip(e.data()).zip(o.data()) {
            worst = worst.max(ulps_at_scale(x, y, z));
        }
    }
    worst
}

fn criterion1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (mut pre, mut ft) = (Checkpoint::new(), Checkpoint::new());
        for i in 0..rng.random_range(3..=10) {
            let shape = random_shape(&mut rng);
            let p = random_tensor(&mut rng, shape.clone(), 1.0);
            let scale = 10f32.powi(rng.random_range(-4..=1));
            let d = random_tensor(&mut rng, shape, scale);
            let f = Tensor::new(
                p.shape().to_vec(),
                p.data().iter().zip(d.data()).map(|(a, b)| a + b).collect(),
            )
            .unwrap();
            pre.insert(format!("t{i}"), p).unwrap();
            ft.insert(format!("t{i}"), f).unwrap();
        }
        let v = extract_vector(&ft, &pre).map_err(|e| e.to_string())?;
        let back = apply(&pre, &v, c(1.0), false).map_err(|e| e.to_string())?;
        worst = worst.max(max_ulps(&back, &ft, &pre).max(max_ulps(&back, &ft, &ft)));
        let zero = apply(&pre, &v, c(0.0), false).map_err(|e| e.to_string())?;
        ensure(zero.bit_eq(&pre), || "alpha = 0 is not bit-identical to the base".into())?;
    }
    ensure(worst <= 1.0, || format!("round trip off by {worst} ulps"))?;
    Ok(format!("50 pairs, max error {worst} ulp, alpha=0 bit-identical"))
}

fn criterion2() -> Outcome {
    let mut worst_ulps = 0.0f64;
    let mut worst_fwd = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for (i, &rank) in [1usize, 4, 16].iter().enumerate() {
        // Random dense checkpoint plus an adapter on some of its matrices.
        let mut base = Checkpoint::new();
        let mut layers = BTreeMap::new();
        for j in 0..4 {
            let (o, n) = (rng.random_range(rank..=64), rng.random_range(rank..=64));
            base.insert(format!("m{j}.weight"), random_tensor(&mut rng, vec![o, n], 1.0)).unwrap();
            if j % 2 == 0 {
                layers.insert(
                    format!("m{j}.weight"),
                    LoraLayer {
                        a_factor: random_tensor(&mut rng, vec![rank, n], 0.1),
                        b_factor: random_tensor(&mut rng, vec![o, rank], 0.1),
                    },
                );
            }
        }
        let adapter = LoraAdapter::new(layers, rank, 2.0 * rank as f64)
            .unwrap()
            .with_base_fingerprint(fingerprint(&base));
        let delta = lora_delta(&adapter).map_err(|e| e.to_string())?;
        let merged = apply(&base, &delta, c(1.0), false).map_err(|e| e.to_string())?;
        let extracted = extract_vector(&merged, &base).map_err(|e| e.to_string())?;
        let mut sub_base = Checkpoint::new();
        let mut sub_ex = Checkpoint::new();
        for k in delta.keys() {
            sub_base.insert(k, base.get(k).unwrap().clone()).unwrap();
            sub_ex.insert(k, extracted.get(k).unwrap().clone()).unwrap();
        }
        worst_ulps = worst_ulps.max(max_ulps(&sub_ex, delta.deltas(), &sub_base));
        for (k, t) in extracted.deltas().tensors() {
            if !delta.keys().any(|d| d == k) {
                ensure(t.data().iter().all(|&x| x == 0.0), || format!("unadapted `{k}` changed"))?;
            }
        }

        // Merged vs adapter-in-the-loop on the toy network.
        let model = ToyModel::reference(i as u64).unwrap();
        let adapter = random_adapter(&model, rank, 2.0 * rank as f64, 7 + i as u64, 0.1).unwrap();
        let merged_model = model.merge_adapter(&adapter, 1.0).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let x: Vec<f64> = (0..model.input_dim())
                .map(|_| rng.random_range(-1.0f32..=1.0) as f64)
                .collect();
            let dynamic = forward_f64(&model, &x, Some(&adapter), 1.0).unwrap();
            let fused = forward_f64(&merged_model, &x, None, 0.0).unwrap();
            for (a, b) in dynamic.iter().zip(&fused) {
                worst_fwd = worst_fwd.max((a - b).abs());
            }
        }
    }
    ensure(worst_ulps <= 1.0, || format!("lora_delta vs extracted off by {worst_ulps} ulps"))?;
    ensure(worst_fwd <= 1e-4, || format!("merged vs dynamic forward differ by {worst_fwd:e}"))?;
    Ok(format!("ranks 1/4/16: {worst_ulps} ulp, forward max-abs {worst_fwd:.2e}"))
}

fn random_vector(rng: &mut ChaCha8Rng, base: &Checkpoint) -> TaskVector {
    let mut ft = Checkpoint::new();
    for (k, t) in base.tensors() {
        let d = random_tensor(rng, t.shape().to_vec(), 0.5);
        let f = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(d.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        ft.insert(k, f).unwrap();
    }
    extract_vector(&ft, base).unwrap()
}

fn criterion3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut base = Checkpoint::new();
        for j in 0..rng.random_range(1..=4) {
            let shape = vec![rng.random_range(1..=20), rng.random_range(1..=20)];
            base.insert(format!("p{j}"), random_tensor(&mut rng, shape, 1.0)).unwrap();
        }
        let (u, v, w) = (random_vector(&mut rng, &base), random_vector(&mut rng, &base), random_vector(&mut rng, &base));
        let cs: Vec<Coefficient> = (0..3).map(|_| c(rng.random_range(-2.0..2.0))).collect();
        let fwd = compose(&[&u, &v, &w], &cs, false).map_err(|e| e.to_string())?;
        let rev = compose(&[&w, &u, &v], &[cs[2], cs[0], cs[1]], false).map_err(|e| e.to_string())?;
        for (k, t) in fwd.deltas().tensors() {
            for (&a, &b) in t.data().iter().zip(rev.get(k).unwrap().data()) {
                worst = worst.max(ulps_at_scale(a, b, 0.0));
            }
        }

        let alpha = cs[0];
        let single = compose(&[&u], &[alpha], false).map_err(|e| e.to_string())?;
        let scaled = scale_vector(&u, alpha).map_err(|e| e.to_string())?;
        ensure(single.deltas().bit_eq(scaled.deltas()), || "compose([v],[a]) != scale_vector(v,a)".into())?;

        let neg = scale_vector(&u, c(-1.0)).map_err(|e| e.to_string())?;
        let cancel = compose(&[&u, &neg], &[c(0.5), c(0.5)], false).map_err(|e| e.to_string())?;
        ensure(cancel.l2_norm() == 0.0, || format!("v and -v leave norm {}", cancel.l2_norm()))?;
    }
    ensure(worst <= 1.0, || format!("permutation changes result by {worst} ulps"))?;
    Ok(format!("100 cases, permutation error {worst} ulp"))
}

struct Lab {
    base: ToyModel,
    task_a: SyntheticTask,
    task_b: SyntheticTask,
}

const EVAL_SAMPLES: usize = 1000;

impl Lab {
    fn new() -> Self {
        Lab {
            base: ToyModel::reference(0).unwrap(),
            task_a: SyntheticTask::preset("rotation:30", 16, 0).unwrap(),
            task_b: SyntheticTask::preset("rotation:-30", 16, 0).unwrap(),
        }
    }

    fn vector(&self, task: &SyntheticTask) -> Result<TaskVector, String> {
        let adapter = train_lora(&self.base, task, &TrainConfig::default()).map_err(|e| e.to_string())?;
        lora_delta(&adapter).map_err(|e| e.to_string())
    }

    fn sweep(&self, v: &TaskVector, v2: Option<&TaskVector>, tasks: Vec<SyntheticTask>) -> Result<Vec<BTreeMap<String, f64>>, String> {
        let r = Sweep {
            base: &self.base,
            vector: v,
            vector2: v2,
            grid: parse_grid("0:1:0.2").unwrap(),
            tasks,
            eval_samples: EVAL_SAMPLES,
            force: false,
            scores: None,
        }
        .run()
        .map_err(|e| e.to_string())?;
        Ok(r.rows
            .into_iter()
            .map(|row| row.metrics.into_iter().map(|(k, v)| (k, v.unwrap())).collect())
            .collect())
    }
}

fn criterion4() -> Outcome {
    let lab = Lab::new();
    let v = lab.vector(&lab.task_a)?;
    let rows = lab.sweep(&v, None, vec![lab.task_a.clone()])?;
    let mse: Vec<f64> = rows.iter().map(|r| r["mse[rotation:30]"]).collect();
    let slack = 0.05 * mse[0];
    for (i, w) in mse.windows(2).enumerate() {
        ensure(w[1] <= w[0] + slack, || format!("MSE rises between points {i} and {}: {mse:?}", i + 1))?;
    }
    ensure(mse[5] < 0.5 * mse[0], || format!("MSE(1) = {} not below half of MSE(0) = {}", mse[5], mse[0]))?;
    let shown: Vec<String> = mse.iter().map(|m| format!("{m:.4}")).collect();
    Ok(format!("MSE over alpha 0..1: [{}]", shown.join(", ")))
}

fn criterion5() -> Outcome {
    let lab = Lab::new();
    let va = lab.vector(&lab.task_a)?;
    let vb = lab.vector(&lab.task_b)?;
    let tasks = vec![lab.task_a.clone(), lab.task_b.clone()];
    let base_combined = 0.5
        * (evaluate(&lab.base, &lab.task_a, EVAL_SAMPLES).unwrap() + evaluate(&lab.base, &lab.task_b, EVAL_SAMPLES).unwrap());

    let half = compose(&[&va, &vb], &[c(0.5), c(0.5)], false).map_err(|e| e.to_string())?;
    let merged = lab
        .base
        .with_weights(apply(lab.base.weights(), &half, c(1.0), false).map_err(|e| e.to_string())?)
        .unwrap();
    let mixed = 0.5
        * (evaluate(&merged, &lab.task_a, EVAL_SAMPLES).unwrap() + evaluate(&merged, &lab.task_b, EVAL_SAMPLES).unwrap());
    ensure(mixed < base_combined, || format!("(0.5, 0.5) combined loss {mixed} >= base {base_combined}"))?;

    let mix = lab.sweep(&va, Some(&vb), tasks.clone())?;
    let only_a = lab.sweep(&va, None, tasks.clone())?;
    let only_b = lab.sweep(&vb, None, tasks)?;
    // Mix alpha = 1 is (1, 0): vector A alone at full strength; alpha = 0 is B alone.
    let mut worst = 0.0f64;
    for (mix_row, single_row) in [(&mix[5], &only_a[5]), (&mix[0], &only_b[5])] {
        for k in ["mse[rotation:30]", "mse[rotation:-30]"] {
            worst = worst.max((mix_row[k] - single_row[k]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("mix endpoints differ from single merges by {worst:e}"))?;
    let (a, b) = ("mse[rotation:30]", "mse[rotation:-30]");
    ensure(
        mix[5][a] < mix[0][a] && mix[5][b] > mix[0][b],
        || "task losses do not move in opposite directions across the mix grid".into(),
    )?;
    Ok(format!("combined loss base {base_combined:.4} -> (0.5,0.5) {mixed:.4}; endpoint error {worst:e}"))
}

fn criterion6() -> Outcome {
    let model = ToyModel::reference(0).unwrap();
    let adapter = random_adapter(&model, 4, 8.0, 0, 0.1).unwrap();
    let task = SyntheticTask::preset("rotation:30", 16, 0).unwrap();
    let err = gradient_check(&model, &adapter, &task).map_err(|e| e.to_string())?;
    ensure(err < 1e-5, || format!("gradient error {err:e}"))?;
    Ok(format!("max relative gradient error {err:.2e}"))
}

/// Textbook edit distance, kept independent of the library's aligner.
fn oracle_edits(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn criterion7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let vocab = ["the", "a", "cat", "sat", "on", "mat", "dog"];
    let words = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<String> {
        (0..rng.random_range(lo..=15))
            .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
            .collect()
    };
    for case in 0..200 {
        let r = words(&mut rng, 1);
        let h = words(&mut rng, 0);
        let got = wer(&r, &h).map_err(|e| e.to_string())?;
        let edits = oracle_edits(&r, &h);
        ensure(
            got.substitutions + got.insertions + got.deletions == edits && got.wer == edits as f64 / r.len() as f64,
            || format!("case {case}: {got:?} vs oracle {edits} edits"),
        )?;
    }

    let fast = EvalRecord::new("one two three", vec!["w"; 20].join(" "), 2.0).unwrap();
    let short = EvalRecord::new("hello", "hello", 1.0).unwrap();
    let long = EvalRecord::new("a b c d", "a b c d", 31.0).unwrap();
    for (rec, rule) in [(&fast, FilterRule::WordRate), (&short, FilterRule::MinWords), (&long, FilterRule::MaxDuration)] {
        ensure(rejection_rule(rec) == Some(rule), || format!("{rec:?} not rejected by {}", rule.name()))?;
    }
    let out = filter_records(&[fast, short, long]);
    ensure(out.kept.is_empty() && out.rejected.len() == 3, || "filter did not reject all fixtures".into())?;
    Ok("200 cases match the DP oracle; word_rate/min_words/max_duration fixtures rejected".into())
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn criterion8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for name in ["empty.safetensors", "small.safetensors"] {
        let original = fs::read(fixture(name)).map_err(|e| e.to_string())?;
        let ckpt = read_checkpoint(fixture(name)).map_err(|e| e.to_string())?;
        let out = dir.path().join(name);
        write_checkpoint(&ckpt, &out).map_err(|e| e.to_string())?;
        ensure(fs::read(&out).unwrap() == original, || format!("{name} changed on rewrite"))?;
        let again = dir.path().join(format!("again-{name}"));
        write_checkpoint(&ckpt, &again).map_err(|e| e.to_string())?;
        let a = read_checkpoint(&out).unwrap();
        let b = read_checkpoint(&again).unwrap();
        ensure(fingerprint(&a) == fingerprint(&b), || format!("{name}: two writes hash differently"))?;
    }
    let v = read_vector(fixture("vector.safetensors")).map_err(|e| e.to_string())?;
    let out = dir.path().join("vector.safetensors");
    write_vector(&v, &out).map_err(|e| e.to_string())?;
    ensure(
        fs::read(&out).unwrap() == fs::read(fixture("vector.safetensors")).unwrap(),
        || "vector fixture changed on rewrite".into(),
    )?;
    Ok("3 golden files byte-identical after rewrite; repeated writes hash-equal".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_vecforge"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr))
    })
}

fn pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    let j = |n: &str| dir.join(n).to_str().unwrap().to_string();
    cli(&["toy", "init", "--out", &j("base.st"), "--seed", "0"])?;
    for (task, name) in [("rotation:30", "a"), ("rotation:-30", "b")] {
        cli(&["toy", "train", "--model", &j("base.st"), "--task", task, "--seed", "0", "--out", &j(&format!("{name}.lora"))])?;
        cli(&["lora-expand", "--adapter", &j(&format!("{name}.lora")), "--out", &j(&format!("{name}.tv"))])?;
    }
    cli(&["sweep", "--base", &j("base.st"), "--vector", &j("a.tv"), "--task", "rotation:30", "--seed", "0", "--out", &j("single.csv")])?;
    cli(&[
        "sweep", "--base", &j("base.st"), "--vector", &j("a.tv"), "--vector2", &j("b.tv"), "--task", "rotation:30",
        "--task", "rotation:-30", "--seed", "0", "--out", &j("mix.csv"),
    ])?;
    let mut out = fs::read(dir.join("single.csv")).map_err(|e| e.to_string())?;
    out.extend(fs::read(dir.join("mix.csv")).map_err(|e| e.to_string())?);
    Ok(out)
}

fn criterion9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    ensure(first == second, || "CSV outputs differ between runs".into())?;
    Ok(format!("two full runs, {} CSV bytes identical", first.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("round-trip identity", criterion1, 5),
        ("LoRA equivalence", criterion2, 10),
        ("composition algebra", criterion3, 5),
        ("alpha-sweep behaviour", criterion4, 60),
        ("mixing behaviour", criterion5, 90),
        ("gradient correctness", criterion6, 10),
        ("WER/CER oracle and filtering", criterion7, 5),
        ("format stability", criterion8, 2),
        ("determinism", criterion9, 120),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > Duration::from_secs(*limit) => Err(format!("{msg}; took longer than {limit} s")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS {} {name}: {msg} ({:.2} s)", i + 1, took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name}: {msg} ({:.2} s)", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
