use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use omoe::decomp::ExpertKind;
use omoe::eval::{self, Composition, EvalOptions, Perturbation};
use omoe::model::OmniModel;
use omoe::synthdata::{labels_csv, FakeMode, SyntheticSample};
use omoe::trainer::checkpoint::{self, Container};
use omoe::trainer::config::{key_reference, parse_config, render};
use omoe::trainer::pipeline::{build_model, pretrain, Datasets, RunConfig};
use omoe::trainer::{log_csv, train_stage1, train_stage2, TrainRecord};
use omoe::Error;

#[derive(Parser)]
#[command(name = "omoe", version, about = "Orthogonal mixture-of-experts forgery detector on synthetic data")]
#[command(after_help = after_help())]
struct Cli {
    /// Flat key = value config file (defaults to the toy profile).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint read and/or written by the command.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!(
        "Exit codes: 0 success, 2 invalid input or config, 3 numerical failure, 4 checkpoint error.\n\n\
         Config keys:\n{}",
        key_reference()
    )
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the encoder on domain labels and write a backbone checkpoint.
    Pretrain,
    /// Decompose a pretrained backbone into principal and expert parts.
    Decompose {
        /// Write the model here instead of overwriting --checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: train one expert on its hard-sampled stream.
    TrainExpert {
        #[command(flatten)]
        which: ExpertArg,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: train the router and a fresh head with frozen experts.
    TrainRouter {
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate the checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Drop the universal expert from the composition.
        #[arg(long, conflicts_with_all = ["isolated", "no_semantic"])]
        no_universal: bool,
        /// Zero every semantic gate (universal expert and stage-2 head only).
        #[arg(long, conflicts_with = "isolated")]
        no_semantic: bool,
        /// Evaluate one expert alone with its stage-1 head
        /// (`universal` or a semantic index).
        #[arg(long)]
        isolated: Option<String>,
    },
    /// Per-sample routing table as CSV.
    InspectRouting {
        #[command(flatten)]
        data: DataArg,
    },
    /// Evaluate under Gaussian blur or additive noise.
    PerturbEval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, conflicts_with = "noise", required_unless_present = "noise")]
        blur: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Write a synthetic dataset (tensor container plus labels CSV).
    GenData {
        /// heldout | router | pretrain | universal | expert<i> | probe-<mode>-<domain>
        #[arg(long, default_value = "heldout")]
        set: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ExpertArg {
    /// Semantic expert index.
    #[arg(long)]
    index: Option<usize>,
    /// Train the universal artifact expert.
    #[arg(long)]
    universal: bool,
}

#[derive(Args)]
struct DataArg {
    /// Dataset written by gen-data; defaults to the held-out set of the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_config(&text)?
        }
        None => RunConfig::toy(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli) -> anyhow::Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("--checkpoint is required for this command".into()).into())
}

fn load_model(path: &Path) -> anyhow::Result<OmniModel> {
    let c = Container::load(path)?;
    if !checkpoint::is_model(&c) {
        return Err(Error::InvalidInput(format!(
            "{} holds a bare backbone; run `decompose` first",
            path.display()
        ))
        .into());
    }
    Ok(checkpoint::model_from_container(&c)?)
}

fn load_data(arg: &DataArg, data: &Datasets) -> anyhow::Result<Vec<SyntheticSample>> {
    match &arg.data {
        Some(p) => Ok(checkpoint::dataset_from_container(&Container::load(p)?)?),
        None => Ok(data.heldout()?),
    }
}

fn write_log(path: Option<&Path>, records: &[TrainRecord]) -> anyhow::Result<()> {
    if let Some(p) = path {
        std::fs::write(p, log_csv(records)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn summarize(name: &str, records: &[TrainRecord]) {
    match (records.first(), records.last()) {
        (Some(a), Some(b)) => eprintln!(
            "{name}: {} steps, total loss {:.4} -> {:.4}",
            records.len(),
            a.losses.total,
            b.losses.total
        ),
        _ => eprintln!("{name}: no steps"),
    }
}

fn parse_set(set: &str, data: &Datasets) -> anyhow::Result<Vec<SyntheticSample>> {
    let bad = || Error::InvalidInput(format!("unknown dataset '{set}'"));
    Ok(match set {
        "heldout" => data.heldout()?,
        "router" => data.router()?,
        "pretrain" => data.pretrain()?,
        "universal" => data.expert(ExpertKind::Universal)?,
        s if s.starts_with("expert") => {
            let i = s["expert".len()..].parse().map_err(|_| bad())?;
            data.expert(ExpertKind::Semantic(i))?
        }
        s if s.starts_with("probe-") => {
            let (mode, d) = s["probe-".len()..].rsplit_once('-').ok_or_else(bad)?;
            let mode = FakeMode::parse(mode).filter(|m| *m != FakeMode::None).ok_or_else(bad)?;
            let d: usize = d.parse().map_err(|_| bad())?;
            data.probe(d, mode)?
        }
        _ => return Err(bad().into()),
    })
}

fn print_report(r: &eval::EvalReport, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Csv => print!("{}", eval::report_csv(r)),
        Format::Json => println!("{}", serde_json::to_string(r)?),
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let data = Datasets::new(&cfg)?;
    match &cli.command {
        Command::ShowConfig => print!("{}", render(&cfg)),
        Command::Pretrain => {
            let path = checkpoint_path(cli)?;
            let out = pretrain(&cfg, &data)?;
            checkpoint::backbone_to_container(&out.backbone).save(path)?;
            eprintln!(
                "pretrained: held-out domain accuracy {:.4}, final loss {:.4}",
                out.heldout_accuracy, out.final_loss
            );
            if out.heldout_accuracy < omoe::backbone::PRETRAIN_TARGET {
                eprintln!(
                    "warning: accuracy below the {:.2} target",
                    omoe::backbone::PRETRAIN_TARGET
                );
            }
        }
        Command::Decompose { out } => {
            let path = checkpoint_path(cli)?;
            let backbone = checkpoint::backbone_from_container(&Container::load(path)?)?;
            let model = build_model(&cfg, backbone)?;
            let dest = out.as_deref().unwrap_or(path);
            checkpoint::save_checkpoint(dest, &model)?;
            eprintln!(
                "decomposed {} projections at r = {} into {}",
                model.layers.len(),
                model.r(),
                dest.display()
            );
        }
        Command::TrainExpert { which, log } => {
            let path = checkpoint_path(cli)?;
            let mut model = load_model(path)?;
            let kind = match which.index {
                Some(i) if i >= model.n_semantic() => {
                    return Err(Error::InvalidExpertIndex {
                        index: i,
                        n_semantic: model.n_semantic(),
                    }
                    .into())
                }
                Some(i) => ExpertKind::Semantic(i),
                None => ExpertKind::Universal,
            };
            let mut tcfg = cfg.train;
            tcfg.r = model.r();
            let recs = train_stage1(&mut model, kind, &data.expert(kind)?, &tcfg)?;
            checkpoint::save_checkpoint(path, &model)?;
            write_log(log.as_deref(), &recs)?;
            summarize(&format!("stage 1 {kind}"), &recs);
        }
        Command::TrainRouter { log } => {
            let path = checkpoint_path(cli)?;
            let mut model = load_model(path)?;
            let mut tcfg = cfg.train;
            tcfg.r = model.r();
            let recs = train_stage2(&mut model, &data.router()?, &tcfg)?;
            checkpoint::save_checkpoint(path, &model)?;
            write_log(log.as_deref(), &recs)?;
            summarize("stage 2", &recs);
        }
        Command::Eval {
            data: d,
            format,
            no_universal,
            no_semantic,
            isolated,
        } => {
            let model = load_model(checkpoint_path(cli)?)?;
            let samples = load_data(d, &data)?;
            let comp = match isolated.as_deref() {
                Some("universal") => Composition::Isolated(ExpertKind::Universal),
                Some(i) => Composition::Isolated(ExpertKind::Semantic(
                    i.parse()
                        .map_err(|_| Error::InvalidInput(format!("bad --isolated value '{i}'")))?,
                )),
                None if *no_semantic => Composition::UniversalOnly,
                None => Composition::Routed(EvalOptions {
                    k_s: cfg.train.k_s,
                    renormalize: cfg.train.renormalize,
                    include_universal: !no_universal,
                }),
            };
            print_report(&eval::evaluate_with(&model, &samples, comp)?, *format)?;
        }
        Command::InspectRouting { data: d } => {
            let model = load_model(checkpoint_path(cli)?)?;
            let samples = load_data(d, &data)?;
            print!("{}", eval::inspect_routing(&model, &samples, cfg.train.k_s)?);
        }
        Command::PerturbEval {
            data: d,
            blur,
            noise,
            format,
        } => {
            let model = load_model(checkpoint_path(cli)?)?;
            let samples = load_data(d, &data)?;
            let p = match (blur, noise) {
                (Some(sigma), _) => Perturbation::Blur { sigma: *sigma },
                (None, Some(std)) => Perturbation::Noise {
                    std: *std,
                    seed: cfg.seed,
                },
                (None, None) => bail!(Error::InvalidInput("--blur or --noise is required".into())),
            };
            let opts = EvalOptions {
                k_s: cfg.train.k_s,
                renormalize: cfg.train.renormalize,
                include_universal: true,
            };
            print_report(&eval::perturb_eval(&model, &samples, p, opts)?, *format)?;
        }
        Command::GenData { set, out } => {
            let samples = parse_set(set, &data)?;
            checkpoint::dataset_to_container(&samples).save(out)?;
            let csv = out.with_extension("labels.csv");
            std::fs::write(&csv, labels_csv(&samples)).with_context(|| format!("writing {}", csv.display()))?;
            eprintln!("wrote {} samples to {} and {}", samples.len(), out.display(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
