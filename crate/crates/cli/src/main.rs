//! `mflow`: data generation, training, sampling and evaluation for the toy
//! bench.
//!
//! Every subcommand reads a `key=value` config. Paired datasets live at the
//! stem named by `data.<a>-<b>`, as `<stem>.train` and `<stem>.val`.
//! Checkpoints, loss logs, metrics and images go under `out.dir`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mflow::checkpoint::{load_checkpoint, save_checkpoint};
use mflow::config::{Config, Settings};
use mflow::data::{seed_range, Datasets, PairedDataset, Sample, Split};
use mflow::eval::{self, ContextMode, MetricRow};
use mflow::modality::encode_rows;
use mflow::pnm::write_pgm;
use mflow::sampler::{decode_rows, joint_sample, sample, PartnerLatent};
use mflow::system::{System, DEFAULT_PAIRS};
use mflow::trainer::{self, LossLog};
use mflow::Error;

#[derive(Parser)]
#[command(name = "mflow", version, about = "Multi-flow cross-guided diffusion toy bench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key=value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the paired train/val datasets.
    GenData(Common),
    /// Align the prompt encoders; writes align.mm2g.
    Align(Common),
    /// Pretrain every backbone unconditionally; writes pretrain.mm2g.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the flow rounds; writes flows.mm2g and one checkpoint per round.
    TrainFlows {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample one modality, optionally guided by validation partners.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target: String,
        /// Partner modality; its first `count` validation samples guide the batch.
        #[arg(long)]
        context: Option<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Co-generate several modalities.
    Jointsample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated modality names.
        #[arg(long, value_delimiter = ',', required = true)]
        modalities: Vec<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Held-out retrieval, conditional loss and fidelity; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Validation items sampled for the fidelity metrics (0 skips them).
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Print the noise schedule as CSV.
    InspectSchedule(Common),
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Coverage(_) | Error::Config(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

struct Ctx {
    config: Config,
    settings: Settings,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, Failure> {
        let mut config = match &c.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = c.seed {
            config.set("seed", s);
        }
        let settings = Settings::from_config(&config)?;
        let out = config.path("out.dir").unwrap_or_else(|| {
            c.config
                .as_deref()
                .and_then(Path::parent)
                .map(|p| p.join("out"))
                .unwrap_or_else(|| PathBuf::from("out"))
        });
        Ok(Self { config, settings, out })
    }

    fn stem(&self, a: &str, b: &str) -> Result<PathBuf, Failure> {
        self.config
            .pair_path(a, b)
            .ok_or_else(|| Error::Coverage(format!("no dataset path for pair {a}-{b} (set `data.{a}-{b}`)")).into())
    }

    /// Every default pair's stem, checked up front so a missing key fails
    /// before any work starts.
    fn stems(&self) -> Result<Vec<(&'static str, &'static str, PathBuf)>, Failure> {
        DEFAULT_PAIRS
            .iter()
            .map(|&(a, b)| Ok((a, b, self.stem(a, b)?)))
            .collect()
    }

    fn datasets(&self, split: Split) -> Result<Datasets, Failure> {
        let mut ds = Datasets::new();
        for (_, _, stem) in self.stems()? {
            ds.insert(PairedDataset::load(&split_path(&stem, split))?);
        }
        Ok(ds)
    }

    fn load(&self, explicit: &Option<PathBuf>, default: &str) -> Result<System, Failure> {
        let path = explicit.clone().unwrap_or_else(|| self.out.join(default));
        if !path.exists() {
            return Err(Error::Param(format!("checkpoint {} not found", path.display())).into());
        }
        Ok(load_checkpoint(&path)?)
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn write_log(&self, name: &str, log: &LossLog) -> Outcome {
        let mut f = fs::File::create(self.out_dir()?.join(name))?;
        log.write_csv(&mut f)?;
        Ok(())
    }
}

fn split_path(stem: &Path, split: Split) -> PathBuf {
    let ext = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let mut s = stem.as_os_str().to_owned();
    s.push(format!(".{ext}"));
    PathBuf::from(s)
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::GenData(c) => gen_data(&Ctx::new(&c)?),
        Cmd::Align(c) => align(&Ctx::new(&c)?),
        Cmd::Pretrain { common, checkpoint } => pretrain(&Ctx::new(&common)?, &checkpoint),
        Cmd::TrainFlows { common, checkpoint } => train_flows(&Ctx::new(&common)?, &checkpoint),
        Cmd::Sample {
            common,
            checkpoint,
            target,
            context,
            count,
        } => sample_cmd(&Ctx::new(&common)?, &checkpoint, &target, context.as_deref(), count),
        Cmd::Jointsample {
            common,
            checkpoint,
            modalities,
            count,
        } => joint_cmd(&Ctx::new(&common)?, &checkpoint, &modalities, count),
        Cmd::Eval {
            common,
            checkpoint,
            samples,
        } => eval_cmd(&Ctx::new(&common)?, &checkpoint, samples),
        Cmd::InspectSchedule(c) => inspect_schedule(&Ctx::new(&c)?),
    }
}

fn gen_data(ctx: &Ctx) -> Outcome {
    let s = &ctx.settings;
    for (i, (a, b, stem)) in ctx.stems()?.into_iter().enumerate() {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        for (split, n) in [(Split::Train, s.train_count), (Split::Val, s.val_count)] {
            let ds = PairedDataset::generate(a, b, split, seed_range(s.data_seed, i, split, n))?;
            ds.save(&split_path(&stem, split))?;
        }
        println!("{a}-{b}: {} train, {} val -> {}", s.train_count, s.val_count, stem.display());
    }
    Ok(())
}

fn align(ctx: &Ctx) -> Outcome {
    let ds = ctx.datasets(Split::Train)?;
    let mut sys = ctx.settings.system()?;
    let mut log = LossLog::default();
    trainer::align_encoders(&mut sys, &ds, &ctx.settings.train, ctx.settings.seed, &mut log)?;
    ctx.write_log("align_loss.csv", &log)?;
    save_checkpoint(&sys, &ctx.out_dir()?.join("align.mm2g"))?;
    println!("tau {:.4}", sys.tau());
    Ok(())
}

fn pretrain(ctx: &Ctx, ckpt: &Option<PathBuf>) -> Outcome {
    let ds = ctx.datasets(Split::Train)?;
    let mut sys = ctx.load(ckpt, "align.mm2g")?;
    let mut log = LossLog::default();
    let names: Vec<String> = sys.registry.names().map(String::from).collect();
    for m in &names {
        let samples = ds.samples_of(m);
        trainer::pretrain(&mut sys, m, &samples, &ctx.settings.train, ctx.settings.seed, &mut log)?;
    }
    ctx.write_log("pretrain_loss.csv", &log)?;
    save_checkpoint(&sys, &ctx.out_dir()?.join("pretrain.mm2g"))?;
    Ok(())
}

fn train_flows(ctx: &Ctx, ckpt: &Option<PathBuf>) -> Outcome {
    let ds = ctx.datasets(Split::Train)?;
    let mut sys = ctx.load(ckpt, "pretrain.mm2g")?;
    let cfg = &ctx.settings.train;
    let plan = trainer::default_plan(&sys, cfg.flow_steps)?;
    let mut log = LossLog::default();
    trainer::validate(&plan, &sys)?;
    let out = ctx.out_dir()?.to_path_buf();
    for (i, round) in plan.rounds.iter().enumerate() {
        let pair = ds.require(&round.pair.0, &round.pair.1)?;
        if round.steps > 0 {
            trainer::init_adaptations(&mut sys, pair, ctx.settings.seed)?;
        }
        trainer::run_round(&mut sys, round, pair, cfg, ctx.settings.seed, &mut log)?;
        save_checkpoint(&sys, &out.join(format!("flow_round{}.mm2g", i + 1)))?;
    }
    ctx.write_log("flow_loss.csv", &log)?;
    save_checkpoint(&sys, &out.join("flows.mm2g"))?;
    Ok(())
}

fn validation_side(ctx: &Ctx, a: &str, b: &str, side: &str, count: usize) -> Result<Vec<Sample>, Failure> {
    let ds = PairedDataset::load(&split_path(&ctx.stem(a, b)?, Split::Val))?;
    if count > ds.len() {
        return Err(Error::Param(format!("{count} requested, validation set has {}", ds.len())).into());
    }
    Ok(ds.side(side)?[..count].iter().map(|s| (*s).clone()).collect())
}

fn write_samples(dir: &Path, name: &str, samples: &[Sample]) -> Outcome {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        match s {
            Sample::Image(img) => write_pgm(&dir.join(format!("{name}_{i:03}.pgm")), img)?,
            Sample::Text(tokens) => {
                let mut f = fs::File::create(dir.join(format!("{name}_{i:03}.txt")))?;
                writeln!(f, "{}", tokens.join(" "))?;
            }
        }
    }
    Ok(())
}

fn sample_cmd(ctx: &Ctx, ckpt: &Option<PathBuf>, target: &str, context: Option<&str>, count: usize) -> Outcome {
    let sys = ctx.load(ckpt, "flows.mm2g")?;
    let spec = sys.registry.get(target)?.clone();
    let partner = match context {
        Some(p) => {
            let xs = validation_side(ctx, p, target, p, count)?;
            let refs: Vec<&Sample> = xs.iter().collect();
            Some(PartnerLatent {
                modality: p.to_string(),
                rows: encode_rows(sys.registry.get(p)?, &refs)?,
            })
        }
        None => None,
    };
    let rows = sample(&sys, target, partner.as_ref(), count, &ctx.settings.sampler)?;
    let samples = decode_rows(&spec, &rows)?;
    write_samples(&ctx.out_dir()?.join("samples"), target, &samples)
}

fn joint_cmd(ctx: &Ctx, ckpt: &Option<PathBuf>, modalities: &[String], count: usize) -> Outcome {
    let sys = ctx.load(ckpt, "flows.mm2g")?;
    let names: Vec<&str> = modalities.iter().map(String::as_str).collect();
    let out = joint_sample(&sys, &names, None, count, &ctx.settings.sampler)?;
    let dir = ctx.out_dir()?.join("joint");
    for (m, rows) in &out {
        let samples = decode_rows(sys.registry.get(m)?, rows)?;
        write_samples(&dir, m, &samples)?;
    }
    Ok(())
}

/// Retrieval subjects: `eval.pairs` as `a-b,c-d`, else the trained pairs
/// plus the never-paired xray–mri.
fn eval_pairs(ctx: &Ctx) -> Result<Vec<(String, String)>, Failure> {
    let raw = ctx.config.raw("eval.pairs").unwrap_or("text-xray,text-ct,ct-mri,xray-mri");
    raw.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad pair `{p}` in eval.pairs")))?;
            Ok((a.to_string(), b.to_string()))
        })
        .collect()
}

fn eval_cmd(ctx: &Ctx, ckpt: &Option<PathBuf>, samples: usize) -> Outcome {
    let sys = ctx.load(ckpt, "flows.mm2g")?;
    let val = ctx.datasets(Split::Val)?;
    let seed = ctx.settings.seed;
    let mut rows = Vec::new();
    let mut push = |metric: &str, subject: String, value: f64| {
        println!("{metric} {subject} {value:.4}");
        rows.push(MetricRow {
            metric: metric.to_string(),
            subject,
            value,
        });
    };
    // Retrieval runs on scenes rendered fresh from the validation seed range,
    // so never-paired modalities can be scored too.
    for (a, b) in eval_pairs(ctx)? {
        let n = ctx.settings.val_count.min(32);
        let ds = PairedDataset::generate(&a, &b, Split::Val, seed_range(ctx.settings.data_seed, 0, Split::Val, n))?;
        push("top1", format!("{a}->{b}"), eval::retrieval(&sys, &a, &b, &ds, n, 1)?);
    }
    for ds in val.iter() {
        let (a, b) = (&ds.pair.0, &ds.pair.1);
        let n = ds.len().min(64);
        for (t, p) in [(a, b), (b, a)] {
            let s = eval::eval_seed(seed, &format!("{p}.{t}"));
            let matched = eval::conditional_loss(&sys, t, p, ds, n, ContextMode::Matched, s)?;
            let null = eval::conditional_loss(&sys, t, p, ds, n, ContextMode::Null, s)?;
            let subject = format!("{t}|{p}");
            push("loss_matched", subject.clone(), matched);
            push("loss_null", subject.clone(), null);
            push("loss_reduction", subject, 1.0 - matched / null);
        }
    }
    if samples > 0 {
        let ds = val.require("text", "xray")?;
        let n = samples.min(ds.len());
        for (mode, tag) in [(ContextMode::Matched, "matched"), (ContextMode::Mismatched, "mismatched")] {
            let f = eval::conditional_fidelity(&sys, "xray", "text", ds, n, mode, &ctx.settings.sampler)?;
            push("psnr", format!("xray|text:{tag}"), f.psnr);
            push("ssim", format!("xray|text:{tag}"), f.ssim);
        }
    }
    let mut f = fs::File::create(ctx.out_dir()?.join("metrics.csv"))?;
    eval::write_metrics_csv(&rows, &mut f)?;
    Ok(())
}

fn inspect_schedule(ctx: &Ctx) -> Outcome {
    let s = ctx.settings.schedule()?;
    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    writeln!(w, "t,beta,alpha_bar,snr")?;
    for t in 1..=s.steps() {
        writeln!(w, "{t},{},{},{}", s.beta(t)?, s.alpha_bar(t)?, s.snr(t)?)?;
    }
    w.flush()?;
    Ok(())
}
