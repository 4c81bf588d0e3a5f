use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use msrl_core::analysis::probe::DEFAULT_CLASS_COUNTS;
use msrl_core::analysis::svg::{heatmap_svg, radial_svg};
use msrl_core::analysis::{
    assignment_heatmap, embed_dataset, probe_train_eval, radial_histogram, Embeddings, NucleusDataset, ProbeConfig,
    ProbeReport,
};
use msrl_core::corpus::{read_corpus, write_corpus};
use msrl_core::gradcheck::pipeline_grad_check;
use msrl_core::prototypes::Temperature;
use msrl_core::synth::{generate_corpus, SubtypeProfile};
use msrl_core::training::{resume, Checkpoint, TrainConfig, TrainOptions, CONFIG_KEYS, LOG_HEADER};

#[derive(Parser)]
#[command(
    name = "msrl",
    version,
    about = "Multi-scale representation learning in the Poincaré ball"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an encoder and prototypes; the per-epoch log goes to stdout.
    Train(TrainArgs),
    /// Embed every grid tissue view and every nucleus view of a corpus.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of distances from the origin per view kind.
    Radial {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Subtype × nucleus-class assignment degree.
    Heatmap {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Assignment temperature; defaults to the checkpoint's anchor temperature.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Nucleus-type probe with stratified k-fold cross-validation. With
    /// `--ckpt` both the pretrained and the scratch arm run.
    Probe(ProbeArgs),
    /// Write a synthetic corpus.
    GenData {
        #[arg(long, default_value = "default")]
        profile_set: String,
        #[arg(long, default_value_t = 200)]
        slides: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full pipeline gradient.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; keys not given keep the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written at the end and every `checkpoint_every` epochs.
    #[arg(long, default_value = "model.hmsb")]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = ProbeConfig::default().batch_size)]
    batch_size: usize,
    /// Train only the linear layer.
    #[arg(long)]
    freeze: bool,
    /// Views per class, in class-code order.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CLASS_COUNTS)]
    counts: Vec<usize>,
}

/// One optional flag per configuration key, spelled with underscores or
/// dashes.
struct Overrides(Vec<(String, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        // `profile` replaces the whole config, so it goes first
        let mut keys: Vec<&str> = CONFIG_KEYS.to_vec();
        keys.sort_by_key(|k| *k != "profile");
        Ok(Self(
            keys.into_iter()
                .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        CONFIG_KEYS.iter().fold(cmd, |cmd, &key| {
            let mut arg = Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(format!("Override `{key}`"));
            if key.contains('_') {
                arg = arg.alias(key.replace('_', "-"));
            }
            if key == "deterministic" {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            cmd.arg(arg)
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Train(args) => train(args)?,
        Cmd::Embed { ckpt, corpus, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let slides = read_corpus(&corpus)?;
            let emb = embed_dataset(&ck, &slides)?;
            emb.save(&out)?;
            eprintln!("{} embeddings written to {}", emb.records.len(), out.display());
        }
        Cmd::Radial { emb, bins, out, svg } => {
            let h = radial_histogram(&Embeddings::load(&emb)?, bins)?;
            write(&out, &h.to_tsv())?;
            if let Some(p) = svg {
                write(&p, &radial_svg(&h))?;
            }
            eprint!("{}", h.summary_tsv());
        }
        Cmd::Heatmap {
            emb,
            ckpt,
            out,
            tau,
            svg,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let tau = match tau {
                Some(t) => Temperature::new(t)?,
                None => ck.temperatures()?.1,
            };
            let t = assignment_heatmap(&Embeddings::load(&emb)?, &ck.prototypes, tau)?;
            write(&out, &t.to_tsv())?;
            if let Some(p) = svg {
                write(&p, &heatmap_svg(&t))?;
            }
        }
        Cmd::Probe(args) => probe(args)?,
        Cmd::GenData {
            profile_set,
            slides,
            seed,
            size,
            out,
        } => {
            let profiles = SubtypeProfile::profile_set(&profile_set)?;
            let corpus = generate_corpus(&profiles, slides, seed, size)?;
            write_corpus(&out, &corpus)?;
            let nuclei: usize = corpus.iter().map(|s| s.nuclei.len()).sum();
            eprintln!("{slides} slides, {nuclei} nuclei written to {}", out.display());
        }
        Cmd::GradCheck { seeds, step, tol } => {
            let errs = pipeline_grad_check(0..seeds, step)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "seed\tmax_relative_error")?;
            for (s, e) in errs.iter().enumerate() {
                writeln!(stdout, "{s}\t{e:.3e}")?;
            }
            let worst = errs.iter().cloned().fold(0.0, f64::max);
            eprintln!("worst relative error {worst:.3e} (tolerance {tol:e})");
            if worst.is_nan() || worst >= tol {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::default();
    if let Some(p) = &args.config {
        config.apply(&msrl_core::config::KeyValues::load(p)?)?;
    }
    for (k, v) in &args.overrides.0 {
        config.set(k, v)?;
    }
    config.validate()?;
    let Some(corpus) = config.corpus.clone() else {
        bail!("no corpus: set `corpus` in the config or pass --corpus");
    };
    let slides = read_corpus(&corpus)?;
    let ck = match &args.resume {
        Some(p) => {
            let mut ck = Checkpoint::load_for(p, &config)?;
            ck.config = config;
            ck
        }
        None => Checkpoint::init(config)?,
    };
    let mut dump = args.out.as_os_str().to_owned();
    dump.push(".dump");
    let opts = TrainOptions {
        checkpoint_path: Some(args.out.clone()),
        dump_path: Some(dump.into()),
        stop_at_epoch: None,
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{LOG_HEADER}")?;
    let mut io_err = None;
    let ck = resume(ck, &slides, &opts, |e| {
        if let Err(err) = writeln!(stdout, "{}", e.tsv_row()).and_then(|_| stdout.flush()) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    eprintln!("checkpoint at epoch {} written to {}", ck.epoch, args.out.display());
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let slides = read_corpus(&args.corpus)?;
    let ck = args.ckpt.as_deref().map(Checkpoint::load).transpose()?;
    let config = ck.as_ref().map_or_else(TrainConfig::default, |c| c.config.clone());
    let counts: [usize; 4] = args
        .counts
        .as_slice()
        .try_into()
        .context("--counts needs four values")?;
    let data = NucleusDataset::from_slides(&slides, counts, config.nucleus_size, config.input_size, args.seed)?;
    let cfg = ProbeConfig {
        folds: args.folds,
        seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        freeze: args.freeze,
    };
    let mut reports: Vec<ProbeReport> = Vec::new();
    if let Some(ck) = &ck {
        reports.push(probe_train_eval(Some(ck), config.encoder_config(), &data, &cfg)?);
    }
    reports.push(probe_train_eval(None, config.encoder_config(), &data, &cfg)?);
    let mut text = format!("{}\n", ProbeReport::TSV_HEADER);
    for r in &reports {
        text.push_str(&r.tsv_rows());
        eprintln!(
            "{} mean accuracy {:.4}, macro F1 {:.4}",
            r.arm(),
            r.mean.accuracy,
            r.mean.f1
        );
    }
    write(&args.out, &text)
}
