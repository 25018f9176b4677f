//! Acceptance suite: one PASS/FAIL line per criterion.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diseg::alignment::{
    contrastive_loss_node, expected_segment_representations_node, segment_marginals, segment_marginals_node, Truncation,
    WordSpans,
};
use diseg::attention::{encoder_attention, init_attention, same_segment_node, self_attention, AttentionKind, EncoderMask};
use diseg::autodiff::{finite_difference_check, FdConfig, ParameterSet, Tensor};
use diseg::metrics::{equal_spacing_boundaries, latency_from_times, over_segmentation, r_value, segmentation_report};
use diseg::model::{Checkpoint, Model, ModelConfig};
use diseg::policy::read_traces;
use diseg::segmentation::{sample_noise, segment_count_loss_node};
use diseg::synth::{load_corpus, Sentence};
use diseg::{Error, FeatureSequence};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn diseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_diseg")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("diseg {} exited with {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Sum over every boundary pattern; segments past `k` fold into the last.
fn brute_force(p: &[f64], k: usize) -> Vec<Vec<f64>> {
    let n = p.len();
    let mut m = vec![vec![0.0; k]; n];
    for pattern in 0..1usize << (n - 1) {
        let cut = |l: usize| pattern >> l & 1 == 1;
        let mut w = 1.0;
        for (l, &pl) in p[..n - 1].iter().enumerate() {
            w *= if cut(l) { pl } else { 1.0 - pl };
        }
        let mut seg = 0;
        for (i, row) in m.iter_mut().enumerate() {
            if i > 0 && cut(i - 1) {
                seg += 1;
            }
            row[seg.min(k - 1)] += w;
        }
    }
    m
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=n);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let dp = segment_marginals(&p, k).map_err(|e| e.to_string())?;
        let oracle = brute_force(&p, k);
        for (i, row) in oracle.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst = worst.max((dp.matrix().get(i, j) - v).abs());
            }
        }
    }
    let t = start.elapsed();
    check(worst <= 1e-10 && t < Duration::from_secs(10), format!("max abs err {worst:.2e} (tol 1e-10), {t:.2?} (limit 10 s)"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(1..=15);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = segment_marginals(&p, k).map_err(|e| e.to_string())?;
        for i in 0..n {
            worst = worst.max((m.matrix().row_slice(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst <= 1e-12, format!("max |row sum - 1| {worst:.2e} over 1000 instances (tol 1e-12)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (d, heads) = (8, 2);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let mut params = ParameterSet::new();
        init_attention(&mut params, "att", d, heads, &mut rng).map_err(|e| e.to_string())?;
        let x = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let run = |kind, seg: Option<&[f64]>| encoder_attention(&x, &params, "att", heads, kind, seg).map_err(|e| e.to_string());
        let zeros = vec![0.0; n];
        worst[0] = worst[0].max(run(AttentionKind::Expected, Some(&zeros))?.max_abs_diff(&run(AttentionKind::Bi, None)?));
        let b: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        worst[1] = worst[1].max(run(AttentionKind::Expected, Some(&b))?.max_abs_diff(&run(AttentionKind::Hard, Some(&b))?));
        let ones = vec![1.0; n];
        worst[2] = worst[2].max(run(AttentionKind::Hard, Some(&ones))?.max_abs_diff(&run(AttentionKind::Uni, None)?));
    }
    check(
        worst.iter().all(|&w| w <= 1e-12),
        format!("p=0 vs bi {:.2e}, binary p vs hard {:.2e}, b=1 vs uni {:.2e} (tol 1e-12)", worst[0], worst[1], worst[2]),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let e = |e: Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = FdConfig::with_tol(1e-4);
    let n = 6;
    let mut worst: Vec<(String, f64)> = vec![];

    let mut params = ParameterSet::new();
    params.insert("p", Tensor::column(&[0.2, 0.7, 0.4, 0.9, 0.15, 0.6])).map_err(|x| x.to_string())?;
    for k in [1, 2, 4] {
        let r = finite_difference_check::<Error, _>(&params, &cfg, |g| {
            let p = g.param("p")?;
            segment_count_loss_node(g, p, k)
        })
        .map_err(e)?;
        worst.push((format!("L_num K={k}"), r.max_rel_err()));
    }

    let mut params = ParameterSet::new();
    params.insert("p", Tensor::column(&(0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>())).map_err(|x| x.to_string())?;
    params.insert("a", Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0))).map_err(|x| x.to_string())?;
    params.insert("e", Tensor::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0))).map_err(|x| x.to_string())?;
    let r = finite_difference_check::<Error, _>(&params, &cfg, |g| {
        let (p, a, emb) = (g.param("p")?, g.param("a")?, g.param("e")?);
        let m = segment_marginals_node(g, p, 3, Truncation::Absorb)?;
        let fs = expected_segment_representations_node(g, a, m)?;
        contrastive_loss_node(g, fs, emb, 0.1)
    })
    .map_err(e)?;
    worst.push(("L_ctr".into(), r.max_rel_err()));

    let mut params = ParameterSet::new();
    init_attention(&mut params, "att", 8, 2, &mut rng).map_err(e)?;
    params.insert("p", Tensor::column(&(0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>())).map_err(|x| x.to_string())?;
    let x = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
    let proj = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
    let r = finite_difference_check::<Error, _>(&params, &cfg, |g| {
        let xv = g.input(x.clone())?;
        let p = g.param("p")?;
        let beta = same_segment_node(g, p)?;
        let (out, _) = self_attention(g, "att", 2, xv, &EncoderMask::Expected(beta))?;
        let w = g.input(proj.clone())?;
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod)?)
    })
    .map_err(e)?;
    worst.push(("expected attention".into(), r.max_rel_err()));

    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn: 16,
        src_vocab: 5,
        tgt_vocab: 4,
        frame_dim: 8,
        ..Default::default()
    };
    let model = Model::new(config, &mut rng).map_err(e)?;
    let sentence = Sentence {
        id: 0,
        features: FeatureSequence::new(Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0)), 40.0).map_err(e)?,
        subwords: vec![4, 0, 2],
        spans: WordSpans::new(vec![(1, 1), (2, 2), (3, 3)], 3).map_err(e)?,
        target: vec![3, 1, 0],
        boundaries_ms: vec![80.0, 160.0, 240.0],
    };
    let noise = sample_noise(n, 1.0, &mut rng).map_err(e)?;
    for k in 1..=3 {
        let r = finite_difference_check::<Error, _>(&model.params, &cfg, |g| {
            Ok(model.sentence_graph(g, &sentence, k, Some(&noise))?.losses.total)
        })
        .map_err(e)?;
        worst.push((format!("L_DiSeg k={k}"), r.max_rel_err()));
    }
    let t = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let label = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    check(max <= 1e-4 && t < Duration::from_secs(60), format!("max rel err {max:.2e} (tol 1e-4) in {t:.2?}: {label}"))
}

fn criterion_5() -> Outcome {
    let lat = |tau: &[f64], t: f64| latency_from_times(tau, t).expect("non-empty");
    let cases = [
        ("AL single token", lat(&[1000.0], 1000.0).al, 1000.0),
        ("AL paced", lat(&[500.0, 1000.0, 1500.0, 2000.0], 2000.0).al, 500.0),
        ("CW", lat(&[500.0, 500.0, 1000.0], 1000.0).cw, 500.0),
        ("DAL clamped", lat(&[2000.0, 2000.0], 2000.0).dal, 2000.0),
    ];
    let mut failures: Vec<String> = cases.iter().filter(|c| c.1 != c.2).map(|c| format!("{} = {} != {}", c.0, c.1, c.2)).collect();
    let os = over_segmentation(34.9, 32.3).unwrap_or(f64::NAN);
    let rv = r_value(0.323, os / 100.0);
    if (os + 7.4).abs() > 0.1 {
        failures.push(format!("OS {os}"));
    }
    if (rv - 44.6).abs() > 0.1 {
        failures.push(format!("R-value {rv}"));
    }
    let mut detail = format!("latency examples exact; OS {os:.2} (-7.4 +/- 0.1), R-value {rv:.2} (44.6 +/- 0.1)");
    if !failures.is_empty() {
        detail = format!("{}; mismatches: {}", detail.replacen("exact", "checked", 1), failures.join("; "));
    }
    check(failures.is_empty(), detail)
}

/// Artifacts of the end-to-end run, shared by criteria 6 to 8.
struct Experiment {
    dir: PathBuf,
    train_time: Duration,
}

impl Experiment {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

const KS: [&str; 5] = ["1", "2", "3", "4", "inf"];

fn run_experiment(dir: &Path) -> Result<Experiment, String> {
    let p = |n: &str| dir.join(n);
    diseg(&["gen-data", "--out", s(&p("train.jsonl")), "--sentences", "2000", "--seed", "1"])?;
    diseg(&["gen-data", "--out", s(&p("test.jsonl")), "--sentences", "200", "--first-id", "2000", "--seed", "1"])?;
    let start = Instant::now();
    diseg(&[
        "train",
        "--corpus",
        s(&p("train.jsonl")),
        "--out",
        s(&p("model.json")),
        "--epochs",
        "10",
        "--learning-rate",
        "1e-3",
        "--seed",
        "1",
    ])?;
    let train_time = start.elapsed();
    diseg(&["simulate", "--checkpoint", s(&p("model.json")), "--corpus", s(&p("test.jsonl")), "--k", &KS.join(","), "--out-dir", s(&p("traces"))])?;
    let traces: Vec<String> = KS.iter().map(|k| s(&p(&format!("traces/traces_k{k}.jsonl"))).to_string()).collect();
    let (test, csv) = (p("test.jsonl"), p("eval.csv"));
    let mut args = vec!["eval", "--corpus", s(&test), "--tolerance-frames", "1", "--out", s(&csv), "--traces"];
    args.extend(traces.iter().map(String::as_str));
    diseg(&args)?;
    Ok(Experiment { dir: dir.to_path_buf(), train_time })
}

fn criterion_6(x: &Experiment) -> Outcome {
    let model = Checkpoint::load(&x.path("model.json")).and_then(|c| c.model()).map_err(|e| e.to_string())?;
    let corpus = load_corpus(&x.path("test.jsonl")).map_err(|e| e.to_string())?;
    let traces = read_traces(fs::read(x.path("traces/traces_kinf.jsonl")).map_err(|e| e.to_string())?.as_slice())
        .map_err(|e| e.to_string())?;
    if traces.len() != corpus.len() {
        return Err(format!("{} traces for {} sentences", traces.len(), corpus.len()));
    }
    let mut mismatched = vec![];
    for (t, s) in traces.iter().zip(&corpus) {
        let offline = model.offline_decode(&s.features, s.k()).map_err(|e| e.to_string())?;
        if t.id != s.id || t.hypothesis != offline.tokens {
            mismatched.push(s.id);
        }
    }
    check(mismatched.is_empty(), format!("{} of {} sentences differ {mismatched:?}", mismatched.len(), corpus.len()))
}

struct Row {
    al: f64,
    bleu: f64,
    f1: f64,
}

fn read_rows(path: &Path) -> Result<Vec<(String, Row)>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{v}: {e}"));
    text.lines()
        .skip(2)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            Ok((c[0].to_string(), Row { al: num(c[1])?, bleu: num(c[5])?, f1: num(c[8])? }))
        })
        .collect()
}

fn criterion_7(x: &Experiment) -> Outcome {
    let rows = read_rows(&x.path("eval.csv"))?;
    let row = |k: &str| rows.iter().find(|r| r.0 == k).map(|r| &r.1).ok_or(format!("no row for k={k}"));
    let corpus = load_corpus(&x.path("test.jsonl")).map_err(|e| e.to_string())?;
    let model = Checkpoint::load(&x.path("model.json")).and_then(|c| c.model()).map_err(|e| e.to_string())?;
    let frame_ms = corpus[0].features.frame_ms();

    let baseline: Vec<Vec<f64>> = corpus.iter().map(|s| equal_spacing_boundaries(s.features.len(), 7, frame_ms)).collect();
    let base = segmentation_report(
        baseline.iter().zip(&corpus).map(|(h, s)| (h.as_slice(), s.boundaries_ms.as_slice(), s.duration_ms())),
        frame_ms,
    );
    let f1 = row("inf")?.f1;
    let gap = f1 - base.f1;

    let mut deviation = 0.0;
    for s in &corpus {
        let p = model.segment(s.features.frames()).map_err(|e| e.to_string())?;
        deviation += (p.iter().sum::<f64>() - s.k() as f64).abs();
    }
    deviation /= corpus.len() as f64;

    let (b4, binf) = (row("4")?.bleu, row("inf")?.bleu);
    let al: Vec<f64> = KS.iter().map(|k| row(k).map(|r| r.al)).collect::<Result<_, _>>()?;
    let monotone = al.windows(2).all(|w| w[0] <= w[1]);

    let parts = [
        (f1 > base.f1 && gap >= 15.0, format!("(a) F1 {f1:.2} vs 7-frame baseline {:.2}, gap {gap:.2} (target >= 15)", base.f1)),
        (deviation <= 1.0, format!("(b) mean |sum p - K| {deviation:.3} (<= 1)")),
        ((b4 - binf).abs() <= 2.0, format!("(c) BLEU k=4 {b4:.2} vs k=inf {binf:.2} (within 2)")),
        (monotone, format!("(d) AL over k=1,2,3,4,inf {al:.1?} non-decreasing")),
        (x.train_time < Duration::from_secs(600), format!("training {:.1?} (< 10 min)", x.train_time)),
    ];
    let ok = parts.iter().all(|p| p.0);
    check(ok, parts.iter().map(|p| format!("{}{}", if p.0 { "" } else { "FAILED " }, p.1)).collect::<Vec<_>>().join("; "))
}

/// Reruns every command from its manifest and compares the outputs.
fn criterion_8(dir: &Path) -> Outcome {
    let p = |n: &str| dir.join(n);
    diseg(&["gen-data", "--out", s(&p("c.jsonl")), "--sentences", "40", "--seed", "5"])?;
    diseg(&["train", "--corpus", s(&p("c.jsonl")), "--out", s(&p("m.json")), "--epochs", "2", "--d-model", "16", "--ffn", "32"])?;
    diseg(&["simulate", "--checkpoint", s(&p("m.json")), "--corpus", s(&p("c.jsonl")), "--k", "1,3,inf", "--out-dir", s(&p("tr"))])?;
    diseg(&[
        "eval",
        "--corpus",
        s(&p("c.jsonl")),
        "--tolerance-frames",
        "1",
        "--out",
        s(&p("e.csv")),
        "--traces",
        s(&p("tr/traces_k1.jsonl")),
        s(&p("tr/traces_k3.jsonl")),
        s(&p("tr/traces_kinf.jsonl")),
    ])?;
    let manifests = ["c.jsonl.manifest.json", "m.json.manifest.json", "tr/simulate.manifest.json", "e.csv.manifest.json"];
    let mut checked = 0;
    for name in manifests {
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p(name)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let outputs = manifest["outputs"].as_array().ok_or("manifest without outputs")?;
        let before: Vec<(PathBuf, Vec<u8>)> = outputs
            .iter()
            .map(|o| {
                let path = PathBuf::from(o["path"].as_str().unwrap_or_default());
                fs::read(&path).map(|b| (path, b)).map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        for (path, _) in &before {
            fs::remove_file(path).map_err(|e| e.to_string())?;
        }
        let args: Vec<String> = manifest["args"].as_array().ok_or("manifest without args")?.iter().map(|a| a.as_str().unwrap_or_default().to_string()).collect();
        diseg(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        for (path, bytes) in &before {
            let after = fs::read(path).map_err(|e| e.to_string())?;
            if &after != bytes {
                return Err(format!("{} differs after rerunning {}", path.display(), manifest["command"]));
            }
            checked += 1;
        }
        let rerun: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p(name)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for field in ["command", "args", "config", "seed", "inputs", "outputs", "code_version"] {
            if rerun[field] != manifest[field] {
                return Err(format!("manifest field {field} of {} changed on rerun", manifest["command"]));
            }
        }
    }
    check(checked > 0, format!("{checked} outputs of gen-data, train, simulate, eval byte-identical when rerun from manifests"))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let experiment = catch_unwind(AssertUnwindSafe(|| run_experiment(work.path())))
        .unwrap_or_else(|_| Err("experiment panicked".to_string()));
    let determinism = work.path().join("determinism");
    fs::create_dir_all(&determinism).expect("create directory");

    let experiment = &experiment;
    let with_experiment = |f: fn(&Experiment) -> Outcome| -> Box<dyn Fn() -> Outcome + '_> {
        Box::new(move || match experiment {
            Ok(x) => f(x),
            Err(e) => Err(format!("end-to-end run failed: {e}")),
        })
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("DP oracle equivalence", Box::new(criterion_1)),
        ("marginal normalization", Box::new(criterion_2)),
        ("attention reduction triple", Box::new(criterion_3)),
        ("gradient verification", Box::new(criterion_4)),
        ("metric hand-checks", Box::new(criterion_5)),
        ("offline equivalence", with_experiment(criterion_6)),
        ("end-to-end synthetic experiment", with_experiment(criterion_7)),
        ("determinism", Box::new(|| criterion_8(&determinism))),
    ];

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
