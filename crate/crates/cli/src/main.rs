use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gfe_core::checkpoint;
use gfe_core::config::RunConfig;
use gfe_core::corpus::{self, MANIFEST_NAME};
use gfe_core::degrade::SamplingPolicy;
use gfe_core::eval::{self, count_macs, gmac, MacConvention};
use gfe_core::fundus::{self, list_images, load_with_sidecar, save_png, save_rgb_png, RangeTag};
use gfe_core::inference::{enhance, nearest_multiple};
use gfe_core::phantom;
use gfe_core::train::run_training;
use gfe_core::Error;

const RUN_CONFIG_NAME: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "gfe", version, about = "Fundus image enhancement: view synthesis, training, inference, evaluation")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mirror a corpus as masked PNGs with field-of-view mask sidecars.
    Prepare {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// File listing one relative image path per line.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write procedural clear fundus images for smoke tests.
    Phantom {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write degraded views of every image and a JSON-lines manifest.
    Synthesize {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling policy, either bare or under `degradation_policy` of a run config.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Re-render the views of a manifest from the original corpus.
    Replay {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Train a network on a directory of clear images.
    Train(TrainArgs),
    /// Run a trained network over a directory of images.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Square processing side; defaults to each image's sides rounded to the nearest valid multiple.
        #[arg(long)]
        size: Option<usize>,
        /// Also write the reconstructed high-frequency maps under `hfm/`.
        #[arg(long)]
        dump_hfm: bool,
        /// Compare against this config instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Load even when the config hash does not match.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        device: DeviceArgs,
    },
    /// Score enhanced images against references with SSIM and PSNR.
    Evaluate {
        #[arg(long)]
        enhanced_dir: PathBuf,
        #[arg(long)]
        reference_dir: PathBuf,
        /// Per-image CSV report.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Aggregate JSON; printed to stdout when omitted.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Restrict both metrics to the reference's field of view.
        #[arg(long)]
        masked: bool,
    },
    /// Print multiply-accumulate counts of the configured network.
    Cost {
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, value_enum, default_value_t = Convention::Output)]
        convention: Convention,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print one line per layer.
        #[arg(long)]
        layers: bool,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// File listing the training images, one relative path per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accepted for compatibility; training is always single-threaded and reproducible.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    /// Override a config key, e.g. `--set lr_init=2e-4` or `--set degradation_policy.defocus.p=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    device: DeviceArgs,
}

#[derive(Args, Debug)]
struct DeviceArgs {
    #[arg(long, env = "GFE_DEVICE", default_value = "cpu")]
    device: String,
}

impl DeviceArgs {
    fn check(&self) -> anyhow::Result<&str> {
        match self.device.as_str() {
            "cpu" => Ok("cpu"),
            other => Err(Error::Config(format!("device `{other}` is not available; only `cpu` is supported")).into()),
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Convention {
    /// Transposed convolutions counted per output position.
    Output,
    /// Transposed convolutions counted per input position.
    Input,
}

impl From<Convention> for MacConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Output => MacConvention::OutputPositions,
            Convention::Input => MacConvention::InputPositions,
        }
    }
}

/// Exit code for an error chain: the toolkit's own class, 2 for other I/O, else 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn write_run_config(out_dir: &Path, command: &str, extra: serde_json::Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut doc = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
    });
    if let (Some(d), serde_json::Value::Object(e)) = (doc.as_object_mut(), extra) {
        d.extend(e);
    }
    let path = out_dir.join(RUN_CONFIG_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_override(raw: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn load_policy(path: Option<&Path>) -> anyhow::Result<SamplingPolicy> {
    let Some(path) = path else {
        return Ok(SamplingPolicy::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // a bare policy is read as the policy section of an otherwise default config
    let doc = if doc.get("degradation_policy").is_some() {
        doc
    } else {
        json!({ "degradation_policy": doc })
    };
    let policy = RunConfig::from_value(doc)?.degradation_policy;
    policy.validate()?;
    Ok(policy)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let device = args.device.check()?;
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = args
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(c) = args.clip_grad_norm {
        overrides.push(("clip_grad_norm".into(), c.to_string()));
    }
    let cfg = base.with_overrides(&overrides)?;
    write_run_config(
        &args.out_dir,
        "train",
        json!({
            "device": device,
            "deterministic": true,
            "data_dir": args.data_dir,
            "resume": args.resume,
            "config_hash": cfg.config_hash(),
            "config": cfg.to_value(),
        }),
    )?;
    let images = corpus::load_corpus(&args.data_dir, args.manifest.as_deref())?;
    log::info!(
        "training on {} images, {} views each, {} epochs",
        images.len(),
        cfg.views_per_image,
        cfg.total_epochs()
    );
    let outcome = run_training(images, &cfg, &args.out_dir, args.resume.as_deref())?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("loss curve: {}", outcome.loss_csv.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_enhance(
    ckpt: &Path,
    input_dir: &Path,
    output_dir: &Path,
    size: Option<usize>,
    dump_hfm: bool,
    config: Option<&Path>,
    force: bool,
    device: &DeviceArgs,
) -> anyhow::Result<()> {
    let device = device.check()?;
    let runtime = config.map(RunConfig::load).transpose()?;
    let (mut net, meta) = checkpoint::load_network(ckpt, runtime.as_ref(), force)?;
    let cfg = meta.config.clone();
    let divisor = net.config.divisor();
    if let Some(s) = size {
        net.config.check_side(s)?;
    }
    write_run_config(
        output_dir,
        "enhance",
        json!({
            "device": device,
            "checkpoint": ckpt,
            "checkpoint_epoch": meta.epoch,
            "size": size,
            "config_hash": cfg.config_hash(),
            "config": cfg.to_value(),
        }),
    )?;
    let files = list_images(input_dir, None)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG or JPEG images under {}", input_dir.display())).into());
    }
    let mut written = 0;
    for rel in &files {
        let result = (|| -> gfe_core::Result<()> {
            let img = load_with_sidecar(&input_dir.join(rel), RangeTag::Unit)?;
            let (h, w) = match size {
                Some(s) => (s, s),
                None => (nearest_multiple(img.height(), divisor), nearest_multiple(img.width(), divisor)),
            };
            let out = enhance(&mut net, &cfg, &img, h, w)?;
            save_png(&out.image, &output_dir.join(eval::output_name(rel)))?;
            if dump_hfm {
                save_rgb_png(out.hfm.view(), RangeTag::Signed, &output_dir.join("hfm").join(eval::output_name(rel)))?;
            }
            Ok(())
        })();
        match result {
            Ok(()) => written += 1,
            Err(e) => log::warn!("{}: {e}", rel.display()),
        }
    }
    println!("enhanced {written} of {} images into {}", files.len(), output_dir.display());
    if written == 0 {
        bail!(Error::Degenerate("every input failed".into()));
    }
    Ok(())
}

fn cmd_evaluate(enhanced: &Path, reference: &Path, out: &Path, json_out: Option<&Path>, masked: bool) -> anyhow::Result<()> {
    let report = eval::evaluate_pairs(enhanced, reference, masked)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.per_image.is_empty() {
        bail!(Error::Degenerate(format!(
            "no matching image pairs between {} and {}",
            enhanced.display(),
            reference.display()
        )));
    }
    report.write_csv(out)?;
    let agg = json!({ "aggregate": report.aggregate, "warnings": report.warnings });
    let text = serde_json::to_string_pretty(&agg)?;
    match json_out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_cost(side: usize, convention: Convention, config: Option<&Path>, per_layer: bool) -> anyhow::Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let net = cfg.network();
    net.check_side(side)?;
    let conv = convention.into();
    if per_layer {
        for s in net.layer_plan(side) {
            println!(
                "{:<8}{:>2} {:>4} -> {:>4} ch {:>4} -> {:>4} px {:>10.4} GMac",
                s.block,
                s.index,
                s.in_channels,
                s.out_channels,
                s.in_side,
                s.out_side,
                gmac(eval::layer_macs(&s, conv))
            );
        }
    }
    println!("{:.3} GMac at {side}x{side} ({convention:?} positions)", gmac(count_macs(&net, side, conv)));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare {
            input_dir,
            output_dir,
            manifest,
        } => {
            write_run_config(&output_dir, "prepare", json!({ "input_dir": input_dir }))?;
            let n = fundus::prepare_dataset(&input_dir, &output_dir, manifest.as_deref())?;
            println!("prepared {n} images into {}", output_dir.display());
        }
        Command::Phantom {
            output_dir,
            count,
            size,
            seed,
        } => {
            if count == 0 || size < 32 {
                return Err(anyhow!(Error::Config("phantom needs --count >= 1 and --size >= 32".into())));
            }
            for i in 0..count {
                let img = phantom::fundus(size, seed + i as u64);
                save_png(&img, &output_dir.join(format!("phantom_{i:03}.png")))?;
            }
            println!("wrote {count} phantoms into {}", output_dir.display());
        }
        Command::Synthesize {
            input_dir,
            output_dir,
            views,
            seed,
            policy,
        } => {
            if views == 0 {
                return Err(anyhow!(Error::Config("--views must be >= 1".into())));
            }
            let policy = load_policy(policy.as_deref())?;
            write_run_config(
                &output_dir,
                "synthesize",
                json!({ "input_dir": input_dir, "views": views, "seed": seed, "policy": policy }),
            )?;
            let images = corpus::load_corpus(&input_dir, None)?;
            let records = corpus::synthesize_corpus(&images, &output_dir, views, seed, &policy)?;
            println!(
                "wrote {} views of {} images; manifest {}",
                records.len(),
                images.len(),
                output_dir.join(MANIFEST_NAME).display()
            );
        }
        Command::Replay {
            input_dir,
            manifest,
            output_dir,
        } => {
            write_run_config(&output_dir, "replay", json!({ "input_dir": input_dir, "manifest": manifest }))?;
            let images = corpus::load_corpus(&input_dir, None)?;
            let paths = corpus::replay_manifest(&images, &manifest, &output_dir)?;
            println!("replayed {} views into {}", paths.len(), output_dir.display());
        }
        Command::Train(args) => cmd_train(args)?,
        Command::Enhance {
            checkpoint,
            input_dir,
            output_dir,
            size,
            dump_hfm,
            config,
            force,
            device,
        } => cmd_enhance(
            &checkpoint,
            &input_dir,
            &output_dir,
            size,
            dump_hfm,
            config.as_deref(),
            force,
            &device,
        )?,
        Command::Evaluate {
            enhanced_dir,
            reference_dir,
            out,
            json,
            masked,
        } => cmd_evaluate(&enhanced_dir, &reference_dir, &out, json.as_deref(), masked)?,
        Command::Cost {
            side,
            convention,
            config,
            layers,
        } => cmd_cost(side, convention, config.as_deref(), layers)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
