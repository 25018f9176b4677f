use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use diseg::metrics::{evaluate_traces, write_csv, MetricReport};
use diseg::model::{epoch_log_csv, train, Checkpoint, ModelConfig};
use diseg::policy::{read_traces, simulate, write_traces};
use diseg::synth::{fingerprint, generate, load_corpus, write_corpus, CorpusConfig, Sentence};
use diseg::verify::{self, VerifyOptions};
use diseg::Error;

use crate::manifest::{manifest_path, write_atomic, write_manifest, FileRecord, RunManifest};
use crate::{CliError, Command, EvalArgs, GenDataArgs, SimulateArgs, TrainArgs, VerifyArgs};

pub fn run(command: Command, args: Vec<String>) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a, args),
        Command::Train(a) => train_cmd(a, args),
        Command::Simulate(a) => simulate_cmd(a, args),
        Command::Eval(a) => eval(a, args),
        Command::Verify(a) => verify_cmd(a, args),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    start: Instant,
    inputs: Vec<FileRecord>,
}

impl Run {
    fn new(command: &'static str, args: Vec<String>) -> Run {
        Run { command, args, start: Instant::now(), inputs: vec![] }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    fn finish(self, at: &Path, config: serde_json::Value, seed: Option<u64>, outputs: &[PathBuf]) -> Result<(), CliError> {
        let outputs = outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<Vec<_>, _>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            config,
            seed,
            inputs: self.inputs,
            outputs,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_ms: self.start.elapsed().as_millis(),
        };
        write_manifest(at, &manifest)
    }
}

fn gen_data(a: GenDataArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut run = Run::new("gen-data", args);
    let mut cfg = match &a.config {
        Some(p) => {
            run.input(p)?;
            read_json(p)?
        }
        None => CorpusConfig::default(),
    };
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.sentences, a.sentences);
    set(&mut cfg.first_id, a.first_id);
    set(&mut cfg.word_types, a.word_types);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.noise_std, a.noise_std);
    set(&mut cfg.silence_probability, a.silence_probability);
    set(&mut cfg.frame_ms, a.frame_ms);
    set(&mut cfg.reorder_window, a.reorder_window);
    cfg.validate()?;
    let corpus = generate(&cfg)?;
    let mut buf = Vec::new();
    write_corpus(&mut buf, &corpus)?;
    write_atomic(&a.out, &buf)?;
    eprintln!("wrote {} sentences to {}", corpus.len(), a.out.display());
    run.finish(&manifest_path(&a.out), to_value(&cfg), Some(cfg.seed), &[a.out])
}

fn max_id(corpus: &[Sentence], ids: impl Fn(&Sentence) -> &[usize]) -> usize {
    corpus.iter().flat_map(|s| ids(s).iter().copied()).max().map_or(1, |m| m + 1)
}

fn train_cmd(a: TrainArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut run = Run::new("train", args);
    run.input(&a.corpus)?;
    let mut corpus = load_corpus(&a.corpus)?;
    if let Some(n) = a.sentences {
        if n == 0 || n > corpus.len() {
            return Err(CliError::Usage(format!("--sentences {n} but the corpus has {} sentences", corpus.len())));
        }
        corpus.truncate(n);
    }
    let mut cfg = match &a.config {
        Some(p) => {
            run.input(p)?;
            read_json(p)?
        }
        None => ModelConfig::default(),
    };
    cfg.frame_dim = corpus[0].features.dim();
    cfg.src_vocab = a.src_vocab.unwrap_or_else(|| max_id(&corpus, |s| &s.subwords));
    cfg.tgt_vocab = a.tgt_vocab.unwrap_or_else(|| max_id(&corpus, |s| &s.target));
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.learning_rate, a.learning_rate);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.d_model, a.d_model);
    set(&mut cfg.heads, a.heads);
    set(&mut cfg.encoder_layers, a.encoder_layers);
    set(&mut cfg.decoder_layers, a.decoder_layers);
    set(&mut cfg.ffn, a.ffn);
    set(&mut cfg.noise_variance, a.noise_variance);
    if a.max_k.is_some() {
        cfg.max_k = a.max_k;
    }
    cfg.validate()?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".loss.csv");
        a.out.with_file_name(name)
    });
    let outcome = train(&corpus, &cfg, |e| {
        let l = &e.losses;
        eprintln!(
            "epoch {:>3}  st {:.4}  asr {:.4}  mt {:.4}  num {:.4}  ctr {:.4}  total {:.4}",
            e.epoch, l.st, l.asr, l.mt, l.num, l.ctr, l.total
        );
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Divergence { epoch, loss, initial, log }) => {
            write_atomic(&log_path, log.as_bytes())?;
            return Err(CliError::Data(format!(
                "training diverged at epoch {epoch}: loss {loss} against initial {initial}; log in {}",
                log_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let checkpoint = Checkpoint::new(&outcome.model, &fingerprint(&corpus)?);
    write_atomic(&a.out, checkpoint.to_json()?.as_bytes())?;
    write_atomic(&log_path, epoch_log_csv(&outcome.log).as_bytes())?;
    eprintln!("wrote checkpoint {} and loss log {}", a.out.display(), log_path.display());
    run.finish(&manifest_path(&a.out), to_value(&cfg), Some(cfg.seed), &[a.out, log_path])
}

fn parse_k(raw: &str) -> Result<Option<usize>, CliError> {
    match raw.trim() {
        "inf" | "∞" => Ok(None),
        v => match v.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Some(k)),
            _ => Err(CliError::Usage(format!("invalid lagging value '{raw}': expected a positive integer or 'inf'"))),
        },
    }
}

pub fn k_label(k: Option<usize>) -> String {
    k.map_or_else(|| "inf".to_string(), |k| k.to_string())
}

fn simulate_cmd(a: SimulateArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut run = Run::new("simulate", args);
    let ks = a.k.iter().map(|k| parse_k(k)).collect::<Result<Vec<_>, _>>()?;
    for (i, k) in ks.iter().enumerate() {
        if ks[..i].contains(k) {
            return Err(CliError::Usage(format!("lagging value {} given twice", k_label(*k))));
        }
    }
    run.input(&a.checkpoint)?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = checkpoint.model()?;
    run.input(&a.corpus)?;
    let corpus = load_corpus(&a.corpus)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let mut outputs = Vec::with_capacity(ks.len());
    for &k in &ks {
        let traces = corpus
            .iter()
            .map(|s| simulate(&model, &s.features, k, s.k(), s.id))
            .collect::<Result<Vec<_>, _>>()?;
        let mut buf = Vec::new();
        write_traces(&mut buf, &traces)?;
        let path = a.out_dir.join(format!("traces_k{}.jsonl", k_label(k)));
        write_atomic(&path, &buf)?;
        eprintln!("k={}: {} traces to {}", k_label(k), traces.len(), path.display());
        outputs.push(path);
    }
    let config = serde_json::json!({
        "k": ks.iter().map(|&k| k_label(k)).collect::<Vec<_>>(),
        "model": to_value(&checkpoint.config),
    });
    run.finish(&a.out_dir.join("simulate.manifest.json"), config, Some(checkpoint.config.seed), &outputs)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    tolerance_frames: usize,
    tolerance_ms: f64,
    frame_ms: f64,
    reports: &'a [MetricReport],
}

fn eval(a: EvalArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut run = Run::new("eval", args);
    run.input(&a.corpus)?;
    let corpus = load_corpus(&a.corpus)?;
    let frame_ms = corpus[0].features.frame_ms();
    if corpus.iter().any(|s| s.features.frame_ms() != frame_ms) {
        return Err(CliError::Data("corpus mixes frame durations".into()));
    }
    let tolerance_ms = a.tolerance_frames as f64 * frame_ms;
    let mut reports = Vec::with_capacity(a.traces.len());
    for path in &a.traces {
        run.input(path)?;
        let file = fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
        let traces = read_traces(std::io::BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let report = evaluate_traces(&traces, &corpus, tolerance_ms).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if reports.iter().any(|r: &MetricReport| r.k == report.k) {
            return Err(CliError::Data(format!("two trace files for k={}", k_label(report.k))));
        }
        reports.push(report);
    }
    reports.sort_by_key(|r| r.k.unwrap_or(usize::MAX));
    let mut csv = Vec::new();
    write_csv(&mut csv, &reports, a.tolerance_frames, frame_ms)?;
    write_atomic(&a.out, &csv)?;
    let json_path = a.json.clone().unwrap_or_else(|| a.out.with_extension("json"));
    let report = EvalReport { tolerance_frames: a.tolerance_frames, tolerance_ms, frame_ms, reports: &reports };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&json_path, format!("{json}\n").as_bytes())?;
    print!("{}", String::from_utf8_lossy(&csv));
    let config = serde_json::json!({ "tolerance_frames": a.tolerance_frames, "tolerance_ms": tolerance_ms });
    run.finish(&manifest_path(&a.out), config, None, &[a.out, json_path])
}

fn verify_cmd(a: VerifyArgs, args: Vec<String>) -> Result<(), CliError> {
    let run = Run::new("verify", args);
    let opts = VerifyOptions { seed: a.seed, gradient_perturbation: a.perturb_gradient };
    let report = verify::run(&opts)?;
    for f in &report.families {
        eprintln!(
            "{:<24} {:>5} checks  {:>3} failed  max err {:.2e}  {}",
            f.name,
            f.checks,
            f.failures,
            f.max_error,
            if f.passed { "PASS" } else { "FAIL" }
        );
        for note in &f.notes {
            eprintln!("    {note}");
        }
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &a.out {
        write_atomic(out, format!("{json}\n").as_bytes())?;
        let config = serde_json::json!({ "perturb_gradient": a.perturb_gradient });
        run.finish(&manifest_path(out), config, Some(a.seed), std::slice::from_ref(out))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!("{} of {} checks failed", report.failures, report.checks)))
    }
}
