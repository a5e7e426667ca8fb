use clap::{Parser, Subcommand};
use dtkd::config::ExperimentConfig;
use dtkd::run::{self, FinetuneArgs};
use dtkd::plots;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dtkd", about = "Transfer-learning + knowledge-distillation experiment runner")]
struct Cli {
    /// Worker thread cap (also settable via DTKD_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch on the source class group.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "teacher")]
        arch: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune on the target class group, optionally distilling a teacher.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "student")]
        arch: String,
        /// Pretrained checkpoint; loading it freezes the backbone and
        /// re-initializes the classifier head.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value = "teacher")]
        teacher_arch: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        label_noise_fraction: Option<f64>,
        #[arg(long)]
        image_noise_train_fraction: Option<f64>,
        #[arg(long)]
        corruption: Option<String>,
        #[arg(long)]
        center_min: Option<usize>,
        #[arg(long)]
        center_max: Option<usize>,
        #[arg(long)]
        run_name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two finished runs on the target validation set.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact Shapley attribution of one validation sample.
    Attribute {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "auto")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value = "4x4")]
        grid: String,
        #[arg(long, default_value = "mean")]
        background: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Foreground/background contribution table + Wilcoxon tests for two models.
    Quantify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 1)]
        image_id: u64,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value = "4x4")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write before/after PPM images of a corruption operator.
    CorruptPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corruption: String,
        #[arg(long)]
        center_min: Option<usize>,
        #[arg(long)]
        center_max: Option<usize>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every layer and loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid over a fraction parameter, training TL and TL+KD per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated fraction values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render history CSVs into one SVG line plot.
    Plot {
        /// One or more history.csv paths.
        #[arg(long, required = true, num_args = 1..)]
        history: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> dtkd_core::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::parse(&text)
}

fn real_main() -> dtkd_core::Result<()> {
    let cli = Cli::parse();
    let threads = cli.jobs.or_else(|| {
        std::env::var("DTKD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| dtkd_core::Error::Config(format!("thread pool: {e}")))?;
    }

    match cli.cmd {
        Cmd::Pretrain {
            config,
            arch,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = run::pretrain(&cfg, &arch, seed, out)?;
            println!("{}", dir.display());
        }
        Cmd::Finetune {
            config,
            arch,
            init,
            teacher,
            teacher_arch,
            alpha,
            temperature,
            seed,
            train_fraction,
            label_noise_fraction,
            image_noise_train_fraction,
            corruption,
            center_min,
            center_max,
            run_name,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(t) = temperature {
                cfg.temperature = t;
            }
            if let Some(f) = train_fraction {
                cfg.train_fraction = f;
            }
            if let Some(f) = label_noise_fraction {
                cfg.label_noise_fraction = f;
            }
            if let Some(f) = image_noise_train_fraction {
                cfg.image_noise_train_fraction = f;
            }
            if let Some(c) = corruption {
                cfg.corruption = c;
            }
            if let Some(m) = center_min {
                cfg.center_min = m;
            }
            if let Some(m) = center_max {
                cfg.center_max = m;
            }
            if let Some(n) = run_name {
                cfg.run_name = n;
            }
            cfg.validate()?;
            let args = FinetuneArgs {
                arch,
                init,
                teacher,
                teacher_arch,
                only_seed: seed,
                out,
            };
            let dir = run::finetune(&cfg, &args)?;
            println!("{}", dir.display());
        }
        Cmd::Evaluate {
            config,
            run_a,
            run_b,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = run::evaluate(&cfg, &run_a, &run_b, out)?;
            println!("{}", dir.display());
        }
        Cmd::Attribute {
            config,
            checkpoint,
            arch,
            sample,
            grid,
            background,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = run::attribute_cmd(&cfg, &checkpoint, &arch, sample, &grid, &background, out)?;
            println!("{}", dir.display());
        }
        Cmd::Quantify {
            config,
            checkpoint_a,
            checkpoint_b,
            mask,
            image_id,
            samples,
            grid,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = run::quantify(
                &cfg,
                &checkpoint_a,
                &checkpoint_b,
                &mask,
                image_id,
                samples,
                &grid,
                out,
            )?;
            println!("{}", dir.display());
        }
        Cmd::CorruptPreview {
            config,
            corruption,
            center_min,
            center_max,
            count,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = center_min {
                cfg.center_min = m;
            }
            if let Some(m) = center_max {
                cfg.center_max = m;
            }
            let dir = run::corrupt_preview(&cfg, &corruption, count, out)?;
            println!("{}", dir.display());
        }
        Cmd::Gradcheck { configs, seed } => {
            let json = run::gradcheck(configs, seed)?;
            println!("{json}");
        }
        Cmd::Sweep {
            config,
            param,
            values,
            teacher,
            out,
        } => {
            let cfg = load_config(&config)?;
            let values: Vec<f64> = values
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| dtkd_core::Error::Config(format!("bad value {s:?}")))
                })
                .collect::<dtkd_core::Result<_>>()?;
            let dir = run::sweep(&cfg, &param, &values, teacher.as_deref(), out)?;
            println!("{}", dir.display());
        }
        Cmd::Plot { history, out } => {
            let series: Vec<(String, PathBuf)> = history
                .iter()
                .map(|p| {
                    let name = p
                        .parent()
                        .and_then(|d| d.file_name())
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.display().to_string());
                    (name, p.clone())
                })
                .collect();
            let svg = plots::history_plot(&series)?;
            std::fs::write(&out, svg)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = format!("{e:?}");
            let kind = kind
                .split(['(', '{', ' '])
                .next()
                .unwrap_or("Error")
                .to_string();
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
