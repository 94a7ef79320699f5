use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use deep_lstm::asgd::run_asgd;
use deep_lstm::checkpoint::{inspect_bytes, Checkpoint, CHECKPOINT_MAGIC};
use deep_lstm::data::{
    generate_context_sum, generate_delayed_echo, load_corpus, save_corpus, ContextSumTask, Corpus, EchoTask,
    CORPUS_MAGIC,
};
use deep_lstm::gradcheck::{check, CheckOptions, Instance};
use deep_lstm::manifest::RunManifest;
use deep_lstm::net::{parse_any, Network, NetworkSpec};
use deep_lstm::trainer::{evaluate, init_network, pretrain_discriminative, train, EpochMetrics, TrainConfig};
use deep_lstm::{Error, ErrorKind, Parameters, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "deeplstm", version, about = "Train and evaluate deep LSTM sequence labellers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    #[command(subcommand)]
    Generate(Generate),
    /// Train a network and write a checkpoint and run manifest.
    Train(TrainArgs),
    /// Report cross-entropy and frame accuracy of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    Gradcheck(GradcheckArgs),
    /// Print the header and tensor table of a checkpoint or corpus file.
    Inspect { path: PathBuf },
}

#[derive(Subcommand)]
enum Generate {
    /// One-hot symbols; the label is the symbol seen `delay` frames earlier.
    Echo {
        #[arg(long, default_value_t = 200)]
        n_utts: usize,
        #[arg(long, default_value_t = 40)]
        min_len: usize,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        delay: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scalar symbol stream; the label is the sum of the last `window`
    /// symbols modulo `classes`.
    ContextSum {
        #[arg(long, default_value_t = 200)]
        n_utts: usize,
        #[arg(long, default_value_t = 40)]
        min_len: usize,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        #[arg(long, default_value_t = 4)]
        symbols: usize,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture, e.g. "relu(64)x3 > lstm(32) > softmax(C)".
    #[arg(long, required_unless_present = "manifest")]
    arch: Option<String>,
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 15)]
    tbptt: usize,
    #[arg(long, default_value_t = 5)]
    toverlap: usize,
    #[arg(long, default_value_t = 20)]
    streams: usize,
    #[arg(long, default_value_t = 3)]
    delay: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    /// Defaults to a tenth of --lr.
    #[arg(long)]
    lr_final: Option<f64>,
    /// Global gradient-norm threshold; "inf" disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    carry_state: bool,
    /// Earlier pre-training architectures separated by ';'.
    #[arg(long)]
    pretrain_stages: Option<String>,
    /// Replay a previous run; all other training flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    /// Also append the per-epoch records to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    delay: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 4)]
    input_dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: perturb the analytic gradient of blocks containing this name.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", json!({"error": kind_name(kind), "message": e.to_string()}));
            ExitCode::from(exit_code(kind))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(g) => cmd_generate(g),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

fn cmd_generate(g: Generate) -> Result<()> {
    let (corpus, out) = match g {
        Generate::Echo {
            n_utts,
            min_len,
            max_len,
            vocab,
            delay,
            seed,
            out,
        } => {
            let task = EchoTask {
                n_utts,
                min_len,
                max_len,
                vocab,
                delay,
            };
            (generate_delayed_echo(&task, &mut ChaCha8Rng::seed_from_u64(seed))?, out)
        }
        Generate::ContextSum {
            n_utts,
            min_len,
            max_len,
            symbols,
            window,
            classes,
            seed,
            out,
        } => {
            let task = ContextSumTask {
                n_utts,
                min_len,
                max_len,
                n_symbols: symbols,
                window,
                n_classes: classes,
            };
            (generate_context_sum(&task, &mut ChaCha8Rng::seed_from_u64(seed))?, out)
        }
    };
    save_corpus(&corpus, &out)?;
    println!(
        "{}",
        json!({
            "out": out,
            "utterances": corpus.len(),
            "frames": corpus.total_frames(),
            "feature_dim": corpus.feature_dim,
            "n_classes": corpus.n_classes,
        })
    );
    Ok(())
}

fn manifest_from_flags(a: &TrainArgs) -> Result<RunManifest> {
    let clip_norm = if a.clip.is_infinite() && a.clip > 0.0 {
        None
    } else {
        Some(a.clip)
    };
    let config = TrainConfig {
        t_bptt: a.tbptt,
        t_overlap: a.toverlap,
        n_streams: a.streams,
        lr_initial: a.lr,
        lr_final: a.lr_final.unwrap_or(a.lr / 10.0),
        clip_norm,
        target_delay: a.delay,
        epochs: a.epochs,
        seed: a.seed,
        workers: a.workers,
        carry_state: a.carry_state,
    };
    config.validate()?;
    let arch = a.arch.clone().expect("required by clap");
    let data = a.data.clone().expect("required by clap");
    let mut m = RunManifest::new(arch, data, config);
    m.val_data = a.val.clone();
    m.pretrain_stages = a
        .pretrain_stages
        .as_deref()
        .map(|s| s.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    Ok(m)
}

/// Writes one JSON record per line to stdout and, optionally, a file.
struct Emitter {
    file: Option<Mutex<File>>,
}

impl Emitter {
    fn new(path: Option<&Path>) -> Result<Emitter> {
        Ok(Emitter {
            file: path.map(File::create).transpose()?.map(Mutex::new),
        })
    }

    fn emit(&self, record: Value) {
        let line = record.to_string();
        println!("{line}");
        if let Some(f) = &self.file {
            let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("could not write metrics: {e}");
            }
        }
    }

    fn epoch(&self, m: &EpochMetrics, extra: Value) {
        let mut v = serde_json::to_value(m).expect("metrics serialise");
        if let (Value::Object(obj), Value::Object(more)) = (&mut v, extra) {
            obj.extend(more);
        }
        self.emit(v);
    }
}

fn check_dims(spec: &NetworkSpec, corpus: &Corpus, what: &'static str) -> Result<()> {
    if spec.input_dim != corpus.feature_dim || spec.n_classes() != corpus.n_classes {
        return Err(Error::shape(
            what,
            format!("{} inputs, {} classes", spec.input_dim, spec.n_classes()),
            format!("{} inputs, {} classes", corpus.feature_dim, corpus.n_classes),
        ));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = match &a.manifest {
        Some(p) => RunManifest::load(p)?,
        None => manifest_from_flags(&a)?,
    };
    let manifest_out = a
        .manifest_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", a.out.display())));
    manifest.save(&manifest_out)?;

    let net = train_from_manifest(&manifest, &Emitter::new(a.metrics.as_deref())?)?;
    Checkpoint::new(net, manifest.seed).save(&a.out)?;
    Ok(())
}

/// Runs the training described by `m` and returns the final network.
fn train_from_manifest(m: &RunManifest, emitter: &Emitter) -> Result<Network> {
    let corpus = load_corpus(&m.train_data)?;
    let val = m.val_data.as_ref().map(load_corpus).transpose()?;
    let specs = m
        .pretrain_stages
        .iter()
        .chain(std::iter::once(&m.arch))
        .map(|s| parse_any(s, corpus.feature_dim, corpus.n_classes))
        .collect::<Result<Vec<_>>>()?;
    if let Some(v) = &val {
        check_dims(&specs[specs.len() - 1], v, "network vs validation corpus")?;
    }
    let config = &m.config;

    if config.workers > 1 {
        if specs.len() > 1 {
            return Err(Error::Config("pre-training stages run on a single worker only".into()));
        }
        let net = init_network(specs[0].clone(), m.seed)?;
        let shards = corpus.shard(config.workers)?;
        let outcome = run_asgd(&shards, &net, config, &|w, e| emitter.epoch(e, json!({"worker": w})))?;
        let mut summary = json!({
            "updates_applied": outcome.updates_applied,
            "worker_updates": outcome.workers.iter().map(|r| r.updates).collect::<Vec<_>>(),
            "mean_staleness": outcome.mean_staleness,
        });
        if let Some(v) = &val {
            let e = evaluate(&outcome.net, v, config.target_delay)?;
            summary["val_loss"] = json!(e.mean_ce);
            summary["val_accuracy"] = json!(e.frame_accuracy);
        }
        emitter.emit(summary);
        return Ok(outcome.net);
    }

    if specs.len() > 1 {
        let (net, reports) = pretrain_discriminative(&specs, &corpus, val.as_ref(), config, |k, e| {
            emitter.epoch(e, json!({"stage": k}))
        })?;
        for (k, r) in reports.iter().enumerate() {
            emitter.emit(json!({
                "stage": k,
                "spec": r.spec,
                "retained_params": r.retained_params,
                "new_params": r.new_params,
                "total_params": r.total_params,
            }));
        }
        return Ok(net);
    }

    let mut net = init_network(specs[0].clone(), m.seed)?;
    train(&mut net, &corpus, val.as_ref(), config, |e| emitter.epoch(e, json!({})))?;
    Ok(net)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.data)?;
    check_dims(ck.net.spec(), &corpus, "checkpoint vs corpus")?;
    let e = evaluate(&ck.net, &corpus, a.delay)?;
    println!(
        "{}",
        json!({"mean_ce": e.mean_ce, "frame_accuracy": e.frame_accuracy, "frames": e.frames})
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let spec = parse_any(&a.arch, a.input_dim, a.classes)?;
    let instance = Instance::random(spec, a.frames, a.seed)?;
    let report = check(&instance, &CheckOptions { corrupt: a.corrupt })?;
    println!("{:<24} {:>8} {:>12}", "block", "size", "max_rel_err");
    for b in &report.blocks {
        println!("{:<24} {:>8} {:>12.3e}", b.name, b.size, b.max_rel_error);
    }
    println!(
        "parameters {}  max_rel_err {:.3e}  tolerance {:.0e}",
        instance.net.param_count(),
        report.max_rel_error(),
        report.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Error::GradCheck(report.failing().map(|b| b.name.clone()).collect()))
    }
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == CHECKPOINT_MAGIC => {
            let (dsl, seed, tensors) = inspect_bytes(&bytes)?;
            println!("checkpoint  arch: {dsl}  seed: {seed}");
            let mut total = 0;
            for t in &tensors {
                println!("  {:<24} {:>5} x {:<5}", t.name, t.rows, t.cols);
                total += t.rows * t.cols;
            }
            println!("tensors {}  parameters {total}", tensors.len());
        }
        Some(m) if m == CORPUS_MAGIC => {
            let c = Corpus::from_bytes(&bytes)?;
            let lengths = c.lengths();
            println!(
                "corpus  utterances: {}  frames: {}  feature_dim: {}  classes: {}  length: {}..={}",
                c.len(),
                c.total_frames(),
                c.feature_dim,
                c.n_classes,
                lengths.iter().min().unwrap_or(&0),
                lengths.iter().max().unwrap_or(&0)
            );
        }
        _ => {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
    }
    Ok(())
}
