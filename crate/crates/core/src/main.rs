use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use co4::complexity::{closed_form_report, measure, MacQuery};
use co4::data::babi::{self, StoryConfig};
use co4::rl::{self, EsConfig, Encoder};
use co4::train::{self, Precision, ScheduleKind, Task, TrainConfig};
use co4::{sample_field, Arch, ModulationKind};

#[derive(Parser)]
#[command(name = "co4", version, about = "Triadic-modulation attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a modulation function and its partials on an R × C grid.
    Field {
        #[arg(long, default_value = "cooperation")]
        kind: ModulationKind,
        #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
        rmin: f64,
        #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
        rmax: f64,
        #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
        cmin: f64,
        #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
        cmax: f64,
        #[arg(long, default_value_t = 201)]
        steps: usize,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report closed-form (and optionally measured) multiply-accumulates.
    Macs {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        e: u64,
        #[arg(long, default_value_t = 1)]
        layers: u64,
        #[arg(long, default_value_t = 8)]
        latents: u64,
        #[arg(long, default_value_t = 1)]
        heads: u64,
        /// Run an instrumented forward pass as well.
        #[arg(long)]
        measure: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate "where is X?" stories as JSON lines.
    GenBabi {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolve a permutation-invariant cart-pole policy.
    Rl {
        #[arg(long, default_value = "co4")]
        encoder: Encoder,
        #[arg(long, default_value_t = 20)]
        gens: usize,
        #[arg(long, default_value_t = 32)]
        pop: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier and write a run directory.
    Train(TrainArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value = "co4")]
    arch: Arch,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    latents: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Generated stories (babi) or image subset size (cifar).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    modulation: Option<ModulationKind>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Learned positional embeddings on or off.
    #[arg(long)]
    positional: Option<bool>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Directory holding CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Write config and initial checkpoint without training.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn resolve(self) -> TrainConfig {
        let mut c = TrainConfig::for_task(self.task);
        c.arch = self.arch;
        c.seed = self.seed;
        c.data_seed = self.data_seed.unwrap_or(self.seed);
        c.dry_run = self.dry_run;
        c.data_dir = self.data_dir.or(c.data_dir);
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { c.$($dst).+ = v; })*
            };
        }
        set!(
            heads => block.heads,
            layers => block.layers,
            latents => block.latents,
            embed_dim => block.embed_dim,
            modulation => block.modulation,
            dropout => block.dropout_p,
            positional => block.use_positional,
            epochs => epochs,
            samples => samples,
            batch_size => batch_size,
            lr => lr,
            weight_decay => optimizer.weight_decay,
            schedule => schedule,
            precision => precision,
        );
        c
    }
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Field {
            kind,
            rmin,
            rmax,
            cmin,
            cmax,
            steps,
            out,
        } => {
            let grid = sample_field(kind, rmin, rmax, cmin, cmax, steps)?;
            grid.write_csv(output(out.as_ref())?)?;
        }
        Command::Macs {
            arch,
            n,
            e,
            layers,
            latents,
            heads,
            measure: run,
            seed,
        } => {
            let q = MacQuery {
                arch,
                n,
                e,
                layers,
                latents,
                heads,
            };
            let report = if run { measure(q, seed)? } else { closed_form_report(q)? };
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenBabi { seed, count, out } => {
            let (_, samples) = babi::generate(&StoryConfig::with_seed(seed), count)?;
            let mut w = output(Some(&out))?;
            babi::write_jsonl(&samples, &mut w)?;
            w.flush()?;
        }
        Command::Rl {
            encoder,
            gens,
            pop,
            seed,
            sigma,
            episodes,
            out,
        } => {
            let cfg = EsConfig {
                encoder,
                generations: gens,
                population: pop,
                sigma,
                episodes,
                seed,
                ..EsConfig::default()
            };
            let result = rl::es_train(&cfg)?;
            let mut w = output(Some(&out))?;
            rl::write_curve(&result.curve, &mut w)?;
            w.flush()?;
            println!(
                "{}",
                serde_json::json!({
                    "encoder": encoder,
                    "best_fitness": result.best_fitness,
                    "final_fitness": result.final_fitness,
                })
            );
        }
        Command::Train(args) => {
            let out = args.out.clone();
            let cfg = args.resolve();
            let summary = train::run(&cfg, &out).with_context(|| format!("training into {}", out.display()))?;
            let last = summary.history.last();
            println!(
                "{}",
                serde_json::json!({
                    "parameters": summary.num_parameters,
                    "epochs": summary.history.len(),
                    "val_accuracy": last.map(|r| r.val_accuracy),
                    "macro_f1": last.map(|r| r.macro_f1),
                })
            );
        }
    }
    Ok(())
}
