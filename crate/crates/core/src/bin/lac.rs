use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lac_core::harness::checkpoint::{self, Checkpoint};
use lac_core::harness::evaluate::{self, Variant, VariantSource};
use lac_core::harness::gradcheck::gradcheck;
use lac_core::harness::train::{self, Jsonl, RL_FINAL, SFT_FINAL};
use lac_core::harness::{report, RunConfig};
use lac_core::latentpolicy::Mode;
use lac_core::toyscene::prompt::Category;
use lac_core::toyscene::read_prompts;
use lac_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lac", version, about = "Latent action control on a toy scene domain")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides `seeds.data`.
    #[arg(long, global = true)]
    seed_data: Option<u64>,
    /// Overrides `seeds.init`.
    #[arg(long, global = true)]
    seed_init: Option<u64>,
    /// Overrides `seeds.rollout`.
    #[arg(long, global = true)]
    seed_rollout: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    Mean,
    Stochastic,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write the training task file.
    GenData,
    /// Run both supervised phases.
    TrainSft {
        /// Continue from a checkpoint written by this command.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run LF-GRPO from a supervised checkpoint.
    TrainRl {
        /// Supervised checkpoint (default `<out_dir>/sft.ckpt`).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from an RL checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `rl.updates`.
        #[arg(long)]
        updates: Option<usize>,
    },
    /// Teacher-free generation for a prompt file or held-out prompts.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Task or prompt file; only id, category and tokens are read.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Held-out prompts of this category (when no prompt file is given).
        #[arg(long)]
        category: Option<String>,
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SampleMode::Mean)]
        mode: SampleMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL output (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-category benchmark table on held-out prompts.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `eval.n_per_category`.
        #[arg(long)]
        n_per_category: Option<usize>,
        /// Overrides `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Zero, random and shuffled latent interventions with matched noise.
    Intervene {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `eval.intervention_prompts`.
        #[arg(long)]
        n_prompts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Role-removal and fixed-budget ablations.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of no_plan,no_draft,no_diagnosis,no_refine,fixed_8,fixed_15.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Train each variant's supervised run instead of reusing the checkpoint.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        n_per_category: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference audit of all seven losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the configured model widths instead of the small preset.
        #[arg(long)]
        full_width: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    if let Some(s) = c.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = c.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = c.seed_rollout {
        cfg.seeds.rollout = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Explicit path, else the RL result, else the supervised result.
fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let rl = cfg.paths.file(RL_FINAL);
    if rl.exists() {
        rl
    } else {
        cfg.paths.file(SFT_FINAL)
    }
}

fn load_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg, explicit);
    eprintln!("checkpoint: {}", path.display());
    checkpoint::load_checked(&path, &cfg.hash())
}

fn write_report(cfg: &RunConfig, stem: &str, text: &str, json: &impl serde::Serialize, svg: Option<String>) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    std::fs::write(cfg.paths.file(&format!("{stem}.txt")), text)?;
    std::fs::write(cfg.paths.file(&format!("{stem}.json")), serde_json::to_string_pretty(json)?)?;
    if let Some(svg) = svg.filter(|_| cfg.eval.chart) {
        std::fs::write(cfg.paths.file(&format!("{stem}.svg")), svg)?;
    }
    print!("{text}");
    eprintln!("wrote {}", cfg.paths.file(&format!("{stem}.{{txt,json}}")).display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::GenData => {
            let p = train::gen_data(&cfg)?;
            eprintln!("wrote {} tasks to {}", cfg.data.n_tasks, p.display());
        }
        Command::TrainSft { resume } => {
            let p = train::train_sft(&cfg, resume.as_deref())?;
            eprintln!("wrote {}", p.display());
        }
        Command::TrainRl { init, resume, updates } => {
            if let Some(u) = updates {
                cfg.rl.updates = u;
            }
            let p = train::train_rl(&cfg, init.as_deref(), resume.as_deref())?;
            eprintln!("wrote {}", p.display());
        }
        Command::Sample { checkpoint, prompts, category, n, mode, seed, output } => {
            let ck = load_checkpoint(&cfg, checkpoint.as_deref())?;
            let entries = match (prompts, category) {
                (Some(p), _) => read_prompts(&p)?.1,
                (None, Some(c)) => {
                    let cat = Category::ALL
                        .into_iter()
                        .find(|k| k.name() == c)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown category '{c}'")))?;
                    let all = train::held_out_prompts(&cfg, n * Category::ALL.len());
                    all.into_iter().filter(|p| p.category == cat).take(n).collect()
                }
                (None, None) => train::held_out_prompts(&cfg, n),
            };
            let mode = match mode {
                SampleMode::Mean => Mode::Mean,
                SampleMode::Stochastic => Mode::Stochastic,
            };
            let records = evaluate::sample(&ck.model, &entries, mode, seed)?;
            match output {
                Some(p) => {
                    let mut w = Jsonl::create(&p)?;
                    for r in &records {
                        w.line(r)?;
                    }
                    eprintln!("wrote {} samples to {}", records.len(), p.display());
                }
                None => {
                    for r in &records {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
            }
        }
        Command::Eval { checkpoint, n_per_category, seed } => {
            let ck = load_checkpoint(&cfg, checkpoint.as_deref())?;
            let seed = seed.unwrap_or(cfg.eval.seed);
            let prompts = evaluate::eval_prompts(&cfg, n_per_category.unwrap_or(cfg.eval.n_per_category))?;
            let r = evaluate::eval(&ck.model, &prompts, seed)?;
            write_report(&cfg, "eval", &report::eval_table(&r), &r, Some(report::eval_chart(&r)))?;
        }
        Command::Intervene { checkpoint, n_prompts, seed } => {
            let ck = load_checkpoint(&cfg, checkpoint.as_deref())?;
            let seed = seed.unwrap_or(cfg.eval.seed);
            let prompts = train::held_out_prompts(&cfg, n_prompts.unwrap_or(cfg.eval.intervention_prompts));
            let r = evaluate::intervene_report(&ck.model, &prompts, seed)?;
            write_report(&cfg, "intervention", &report::intervention_table(&r), &r, Some(report::intervention_chart(&r)))?;
        }
        Command::Ablate { checkpoint, variants, train: retrain, n_per_category, seed } => {
            let ck = load_checkpoint(&cfg, checkpoint.as_deref())?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?
            };
            let seed = seed.unwrap_or(cfg.eval.seed);
            let prompts = evaluate::eval_prompts(&cfg, n_per_category.unwrap_or(cfg.eval.n_per_category))?;
            let tasks;
            let source = if retrain {
                tasks = train::load_tasks(&cfg)?;
                VariantSource::Train { cfg: &cfg, tasks: &tasks }
            } else {
                VariantSource::Reuse(&ck.model)
            };
            let t = evaluate::ablate(source, &ck.model, &variants, &prompts, seed)?;
            write_report(&cfg, "ablation", &report::ablation_table(&t), &t, Some(report::ablation_chart(&t)))?;
            if t.rows.iter().any(|r| !r.audit_passed) {
                eprintln!("structural audit failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Gradcheck { seed, full_width } => {
            let model = if full_width { cfg.model() } else { RunConfig::small().model() };
            let s = gradcheck(&model, seed)?;
            print!("{}", s.table());
            std::fs::create_dir_all(&cfg.paths.out_dir)?;
            std::fs::write(cfg.paths.file("gradcheck.json"), serde_json::to_string_pretty(&s)?)?;
            if !s.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
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
            ExitCode::FAILURE
        }
    }
}
