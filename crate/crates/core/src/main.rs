use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zforce::checkpoint::Checkpoint;
use zforce::config::TrainConfig;
use zforce::data::synthetic::{parity_tokens, sine_mixture, two_mode_hmm, HmmSpec, SineSpec, SyntheticKind};
use zforce::data::{write_frame_file, write_sequences_file, write_vocab_file, DataKind, Dataset, Observation, Sequences};
use zforce::error::{Error, Result};
use zforce::gradcheck::{check_all_ops, check_model_loss, DEFAULT_EPS, DEFAULT_TOLERANCE};
use zforce::interpolate::interpolate_latents;
use zforce::model::{Decode, GenerateOptions};
use zforce::pipeline::{load_split, load_vocab, prepare};
use zforce::rng::{stream_rng, Stream};
use zforce::trainer::{evaluate_dataset, EvalRecord, MetricLog, Trainer};

#[derive(Parser)]
#[command(name = "zforce", version, about = "Train and evaluate stochastic recurrent sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and a matching config file.
    MakeData(MakeData),
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Report ELBO and IWAE bounds on a data split.
    Eval(EvalArgs),
    /// Generate sequences by ancestral sampling.
    Sample(SampleArgs),
    /// Decode along a line between the latent encodings of two sequences.
    Interpolate(InterpolateArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Overrides {
    /// Any config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// `on` or `off`.
    #[arg(long)]
    kl_anneal: Option<String>,
    #[arg(long)]
    max_updates: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

fn apply_pairs(pairs: &[String], c: &mut TrainConfig) -> Result<()> {
    for kv in pairs {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        c.set(k.trim(), v)?;
    }
    Ok(())
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) -> Result<()> {
        apply_pairs(&self.set, c)?;
        let pairs = [
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("kl_anneal", self.kl_anneal.clone()),
            ("max_updates", self.max_updates.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct MakeData {
    /// sine-mixture, two-mode-hmm or parity-tokens
    #[arg(long)]
    kind: SyntheticKind,
    /// Training sequences.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Validation sequences.
    #[arg(long, default_value_t = 64)]
    valid: usize,
    /// Sequence length (maximum filler count for parity-tokens).
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `train`, `valid`, or a path to a data file.
    #[arg(long, default_value = "valid")]
    split: String,
    #[arg(long, default_value_t = 25)]
    iwae_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Eval CSV to append to (default: eval.csv next to the checkpoint).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Any config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// argmax or sample
    #[arg(long, default_value = "sample")]
    decode: Decode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// First sequence: words for token models, 0/1 values for binary models.
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    /// Number of intervals between the endpoints; `steps + 1` rows are decoded.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value = "argmax")]
    decode: Decode,
    #[arg(long, default_value_t = 50)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn io_err(ctx: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = ctx.into();
    move |e| Error::Io { context: ctx, source: e }
}

fn make_data(args: &MakeData) -> Result<()> {
    if args.n == 0 || args.len == 0 {
        return Err(Error::InvalidArgument("--n and --len must be at least 1".into()));
    }
    fs::create_dir_all(&args.out).map_err(io_err(format!("creating {}", args.out.display())))?;
    let total = args.n + args.valid;
    let mut config = TrainConfig::default();
    let (full, ext) = match args.kind {
        SyntheticKind::SineMixture => {
            config.data_kind = DataKind::Frames;
            (sine_mixture(&SineSpec::default(), total, args.len, args.seed).0, "frames")
        }
        SyntheticKind::TwoModeHmm => {
            config.data_kind = DataKind::Binary;
            (two_mode_hmm(&HmmSpec::default(), total, args.len, args.seed).0, "txt")
        }
        SyntheticKind::ParityTokens => {
            config.data_kind = DataKind::Tokens;
            let (vocab, ds) = parity_tokens(total, args.len, args.seed);
            let vp = args.out.join("vocab.txt");
            write_vocab_file(&vp, &vocab)?;
            config.vocab_path = Some(vp.file_name().unwrap().into());
            (ds, "txt")
        }
    };
    let (train, valid) = full.split_at(args.n);
    let write = |ds: &Dataset, name: &str| -> Result<PathBuf> {
        let p = args.out.join(format!("{name}.{ext}"));
        match &ds.sequences {
            Sequences::Frames { .. } => write_frame_file(&p, ds)?,
            Sequences::Ids(s) => write_sequences_file(&p, s)?,
        }
        Ok(PathBuf::from(p.file_name().unwrap()))
    };
    config.train_path = Some(write(&train, "train")?);
    if !valid.is_empty() {
        config.valid_path = Some(write(&valid, "valid")?);
    }
    let cp = args.out.join("data.conf");
    fs::write(&cp, config.to_text()).map_err(io_err(format!("writing {}", cp.display())))?;
    println!("wrote {} train / {} valid sequences to {}", train.len(), valid.len(), args.out.display());
    Ok(())
}

fn write_outputs(out: &Path, trainer_log: &MetricLog) -> Result<()> {
    MetricLog::append_train_csv(&out.join("metrics.csv"), &trainer_log.train)?;
    MetricLog::append_eval_csv(&out.join("eval.csv"), &trainer_log.eval)
}

fn train(args: &TrainArgs) -> Result<()> {
    fs::create_dir_all(&args.out).map_err(io_err(format!("creating {}", args.out.display())))?;
    let trainer = if let Some(ck) = &args.resume {
        let ckpt = Checkpoint::load(ck)?;
        let mut config = ckpt.config.clone();
        if let Some(p) = &args.config {
            config.apply_text(&fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?)?;
        }
        args.overrides.apply(&mut config)?;
        config.validate()?;
        // Dimensions must still match the stored parameters.
        ckpt.restore_with(&config)?;
        let train_path = config.train_path.clone().ok_or_else(|| Error::Config("`train_path` is not set".into()))?;
        let train = load_split(&config, &train_path, ckpt.normalization)?;
        let valid = match &config.valid_path {
            Some(p) => Some(load_split(&config, p, ckpt.normalization)?),
            None => None,
        };
        let mut ckpt = ckpt;
        ckpt.config = config;
        Trainer::from_checkpoint(ckpt, train, valid)?
    } else {
        let mut config = match &args.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        args.overrides.apply(&mut config)?;
        config.validate()?;
        let prepared = prepare(&mut config)?;
        Trainer::new(config, prepared.train, prepared.valid, prepared.end_id, prepared.normalization)?
    };
    let config_path = args.out.join("config.txt");
    fs::write(&config_path, trainer.config.to_text()).map_err(io_err(format!("writing {}", config_path.display())))?;
    let start = trainer.update;
    let outcome = trainer.run()?;
    write_outputs(&args.out, &outcome.log)?;
    outcome.last.save(&args.out.join("checkpoint.bin"))?;
    if let Some(best) = &outcome.best {
        best.save(&args.out.join("best.bin"))?;
    }
    if let Some(last) = outcome.log.train.last() {
        println!(
            "updates {}..{}: rec {:.4} kl {:.4} aux {:.4} bwd {:.4} total {:.4}",
            start,
            outcome.last.updates,
            last.rec,
            last.kl,
            last.aux,
            last.bwd,
            last.total
        );
    }
    if let Some(reason) = outcome.halted {
        eprintln!("training halted: {reason}; last good parameters saved");
        return Err(Error::NonFiniteLoss(outcome.last.updates));
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    apply_pairs(&args.set, &mut config)?;
    let (model, params) = ckpt.restore_with(&config)?;
    let path = match args.split.as_str() {
        "train" => config.train_path.clone().ok_or_else(|| Error::Config("`train_path` is not set".into()))?,
        "valid" => config.valid_path.clone().ok_or_else(|| Error::Config("`valid_path` is not set".into()))?,
        other => PathBuf::from(other),
    };
    let data = load_split(&config, &path, ckpt.normalization)?;
    let ev = evaluate_dataset(&model, &params, &data, config.batch_size, args.iwae_samples, args.seed, ckpt.updates)?;
    println!("split {} ({} sequences)", args.split, ev.sequences);
    println!("elbo {:.6} nats/seq", ev.elbo);
    println!("iwae[{}] {:.6} nats/seq", ev.k, ev.iwae);
    if config.data_kind == DataKind::Tokens {
        println!("perplexity elbo {:.4} iwae {:.4}", ev.elbo_perplexity(), ev.iwae_perplexity());
    }
    let csv = args.csv.clone().unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.csv")
    });
    MetricLog::append_eval_csv(
        &csv,
        &[EvalRecord {
            update: ckpt.updates,
            split: args.split.clone(),
            elbo: ev.elbo,
            iwae: ev.iwae,
            k: ev.k,
        }],
    )
}

fn render(config: &TrainConfig, vocab: Option<&zforce::data::Vocab>, seq: &[Observation], norm: Option<zforce::data::Normalization>) -> String {
    let parts: Vec<String> = seq
        .iter()
        .map(|o| match o {
            Observation::Id(i) => match (config.data_kind, vocab) {
                (DataKind::Tokens, Some(v)) => v.token(*i).unwrap_or("<?>").to_owned(),
                _ => i.to_string(),
            },
            Observation::Frame(f) => {
                let mut f = f.clone();
                if let Some(n) = norm {
                    n.invert(&mut f);
                }
                f.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }
        })
        .collect();
    let sep = if config.data_kind == DataKind::Frames { ";" } else { " " };
    parts.join(sep)
}

fn sample(args: &SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    let (model, params) = ckpt.restore_model()?;
    let vocab = match config.data_kind {
        DataKind::Tokens => Some(load_vocab(&mut config)?.0),
        _ => None,
    };
    let start = match config.data_kind {
        DataKind::Tokens => Observation::Id(vocab.as_ref().and_then(|v| v.id(&config.start_token)).unwrap_or(0)),
        DataKind::Binary => Observation::Id(0),
        DataKind::Frames => Observation::Frame(vec![0.0; config.frame_width]),
    };
    let opts = GenerateOptions {
        steps: args.steps,
        decode: args.decode,
        latent_noise: true,
    };
    let mut text = String::new();
    for i in 0..args.n {
        let mut rng = stream_rng(args.seed, Stream::Sample, i as u64);
        let seq = model.unroll_prior(&params, std::slice::from_ref(&start), opts, &mut rng)?;
        let _ = writeln!(text, "{}", render(&config, vocab.as_ref(), &seq, ckpt.normalization));
    }
    fs::write(&args.out, text).map_err(io_err(format!("writing {}", args.out.display())))?;
    println!("wrote {} sequences to {}", args.n, args.out.display());
    Ok(())
}

fn interpolate(args: &InterpolateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    let (model, params) = ckpt.restore_model()?;
    let (vocab, parse): (Option<zforce::data::Vocab>, Box<dyn Fn(&str) -> Result<Vec<Observation>>>) =
        match config.data_kind {
            DataKind::Tokens => {
                let (v, _) = load_vocab(&mut config)?;
                let (s, e) = (config.start_token.clone(), config.end_token.clone());
                let vc = v.clone();
                (
                    Some(v),
                    Box::new(move |text: &str| {
                        let mut ids = vc.encode(text)?;
                        if ids.first() != vc.id(&s).as_ref() {
                            ids.insert(0, vc.id(&s).unwrap());
                        }
                        if ids.last() != vc.id(&e).as_ref() {
                            ids.push(vc.id(&e).unwrap());
                        }
                        Ok(ids.into_iter().map(Observation::Id).collect())
                    }),
                )
            }
            DataKind::Binary => (
                None,
                Box::new(|text: &str| {
                    text.split_whitespace()
                        .map(|w| match w {
                            "0" => Ok(Observation::Id(0)),
                            "1" => Ok(Observation::Id(1)),
                            _ => Err(Error::Data(format!("expected 0 or 1, got {w:?}"))),
                        })
                        .collect()
                }),
            ),
            DataKind::Frames => {
                return Err(Error::InvalidArgument("interpolate supports token and binary models".into()))
            }
        };
    let a = parse(&args.from)?;
    let b = parse(&args.to)?;
    let mut rng = stream_rng(args.seed, Stream::Sample, 0);
    let rows = interpolate_latents(&model, &params, &a, &b, args.steps, args.decode, args.max_steps, &mut rng)?;
    let mut csv_rows = Vec::new();
    for r in &rows {
        let text = render(&config, vocab.as_ref(), &r.output, None);
        println!("{:.3}\t{}", r.a, text);
        csv_rows.push((r.a, text));
    }
    if let Some(out) = &args.out {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["a", "sequence"])?;
        for (a, t) in csv_rows {
            w.write_record([a.to_string(), t])?;
        }
        w.flush().map_err(io_err(format!("writing {}", out.display())))?;
    }
    Ok(())
}

fn grad_check(args: &GradCheckArgs) -> Result<bool> {
    let mut ok = true;
    let mut report = |r: &zforce::gradcheck::CheckResult, scope: &str| {
        let pass = r.passed(args.tolerance);
        ok &= pass;
        println!(
            "{} {scope} {} ({} coords) max rel err {:.3e}",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.coordinates,
            r.max_rel_error
        );
    };
    for r in check_all_ops(args.eps, args.seed)? {
        report(&r, "op");
    }
    for kind in [DataKind::Frames, DataKind::Tokens, DataKind::Binary] {
        for r in check_model_loss(kind, args.eps, args.seed)? {
            report(&r, &format!("loss[{kind}]"));
        }
    }
    println!("{}", if ok { "all gradient checks passed" } else { "gradient checks FAILED" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::MakeData(a) => make_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Sample(a) => sample(a)?,
        Command::Interpolate(a) => interpolate(a)?,
        Command::GradCheck(a) => {
            if !grad_check(a)? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
