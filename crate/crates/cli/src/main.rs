use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use udcn::augment::{strong_augment, weak_augment, SeededRng};
use udcn::autograd::checkpoint;
use udcn::data::{
    generate_glyph_benchmark, load_dataset, read_image, write_benchmark, write_image, Domain, Split, MANIFEST_NAME,
};
use udcn::harness::{evaluate, prepare_data, run_experiment, run_seeds, TrainConfig};
use udcn::nets;

#[derive(Parser)]
#[command(name = "udcn", version, about = "Unsupervised domain adaptation on grayscale glyphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic glyph benchmark as PGM files plus manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train and write metrics.jsonl and checkpoint.bin.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; reports mean ± std when more than one.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Accuracy of a checkpoint on a manifest-described dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding manifest.csv and the images it lists.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write weak and strong augmentations of one image.
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn gen_data(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let bench = generate_glyph_benchmark(&cfg.glyph_spec(), &cfg.glyph_counts(), cfg.data_seed)?;
    write_benchmark(out, &bench)?;
    for (name, d) in bench.splits() {
        println!("{name}: {} images", d.len());
    }
    Ok(())
}

fn train(out: &Path, seeds: &[u64], cfg: &TrainConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    if seeds.len() > 1 {
        let (summary, _) = run_seeds(cfg, &data, seeds, Some(out))?;
        std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!(
            "target {:.4} ± {:.4}  source {:.4} ± {:.4}  over seeds {:?}",
            summary.target_mean, summary.target_std, summary.source_mean, summary.source_std, summary.seeds
        );
    } else {
        let cfg = TrainConfig {
            seed: seeds.first().copied().unwrap_or(cfg.seed),
            ..cfg.clone()
        };
        let run = run_experiment(&cfg, &data, Some(out))?;
        let last = run.last();
        println!(
            "iteration {}  target {:.4}  source {:.4}  checkpoint {}",
            last.iteration, last.target_acc, last.source_acc, run.checkpoint_digest
        );
    }
    Ok(())
}

fn eval(ckpt: &Path, data_dir: &Path, cfg: &TrainConfig) -> Result<()> {
    let arch = cfg.architecture();
    let mut params = nets::init_params(&arch, &mut SeededRng::new(0));
    checkpoint::load_into(&mut params, ckpt)?;
    let data = load_dataset(
        data_dir,
        &data_dir.join(MANIFEST_NAME),
        arch.height,
        arch.width,
        arch.classes,
        Domain::Target,
        Split::Test,
    )?;
    let acc = evaluate(&params, &arch, &data)?;
    println!("accuracy {acc:.4} on {} images", data.len());
    Ok(())
}

fn augment_preview(image: &Path, seed: u64, count: usize, out: &Path, cfg: &TrainConfig) -> Result<()> {
    if count == 0 {
        bail!("count must be positive");
    }
    let img = read_image(image)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let policy = cfg.policy();
    let root = SeededRng::new(seed);
    write_image(&out.join("original.png"), &img)?;
    for k in 0..count {
        let mut r = root.fork(k as u64);
        write_image(&out.join(format!("weak_{k:03}.png")), &weak_augment(&img, &mut r))?;
        write_image(
            &out.join(format!("strong_{k:03}.png")),
            &strong_augment(&img, &policy, &mut r),
        )?;
    }
    println!("wrote {} variants to {}", 2 * count, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, config } => gen_data(&out, &config.resolve()?),
        Command::Train { out, seeds, config } => train(&out, &seeds, &config.resolve()?),
        Command::Eval {
            checkpoint,
            data,
            config,
        } => eval(&checkpoint, &data, &config.resolve()?),
        Command::AugmentPreview {
            image,
            seed,
            count,
            out,
            config,
        } => augment_preview(&image, seed, count, &out, &config.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
