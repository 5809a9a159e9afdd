use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use transdiff_core::analysis::FusionMode;
use transdiff_core::model::TransDiff;
use transdiff_core::sampler::{SamplerConfig, SamplerMode};
use transdiff_core::SeededRng;
use transdiff_harness::eval::{self, EvalOptions};
use transdiff_harness::export::{render_pgm, write_tensor};
use transdiff_harness::gradcheck::joint_loss_gradcheck;
use transdiff_harness::train::LossRecord;
use transdiff_harness::{Checkpoint, HarnessError, Result, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "transdiff", about = "Train and sample a desk-scale TransDiff latent generator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Paradigm {
    #[value(name = "1step")]
    OneStep,
    Mrar,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ode,
    Sde,
}

#[derive(clap::Args)]
struct SamplerArgs {
    /// Integration steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    s1: Option<f64>,
    #[arg(long)]
    s2: Option<f64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    cfg: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, mut c: SamplerConfig) -> SamplerConfig {
        if let Some(s) = self.steps {
            c.steps = s;
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                Mode::Ode => SamplerMode::Ode,
                Mode::Sde => SamplerMode::Sde,
            };
        }
        c.s1 = self.s1.unwrap_or(c.s1);
        c.s2 = self.s2.unwrap_or(c.s2);
        c.cfg_scale = self.cfg.unwrap_or(c.cfg_scale);
        c
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default configuration as TOML.
    Config,
    /// 1-step pretraining from scratch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint of the same phase.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Multi-reference fine-tuning of a pretrain checkpoint.
    FinetuneMrar {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate latents; writes `<out>.tdlt` and `<out>.pgm` per sample.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, value_enum, default_value = "1step")]
        paradigm: Paradigm,
        #[arg(long, default_value_t = 4)]
        refs: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the fusion of two classes' condition blocks.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class_a: usize,
        #[arg(long)]
        class_b: usize,
        /// Token rows taken from class A; defaults to half.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        interleaved: bool,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Condition diversity of one class (lower is more diverse).
    Diversity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 4)]
        refs: usize,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sliced Wasserstein distance and centroid accuracy against held-out data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        refs: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of the joint loss gradient (64-bit, micro config).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_log(r: &LossRecord) {
    println!(
        "step={} refs={} loss={:.6} grad_norm={:.4} lr={:.3e}",
        r.step, r.references, r.loss, r.grad_norm, r.lr
    );
}

fn load_model(path: &Path) -> Result<(Checkpoint, TransDiff<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.ema_model()?;
    Ok((ckpt, model))
}

fn write_sample(out: &Path, idx: usize, count: usize, x: &transdiff_core::Tensor<f32>, c: &RunConfig) -> Result<()> {
    let stem = if count == 1 {
        out.to_path_buf()
    } else {
        PathBuf::from(format!("{}_{idx}", out.display()))
    };
    write_tensor(&stem.with_extension("tdlt"), x)?;
    let pgm = stem.with_extension("pgm");
    std::fs::write(&pgm, render_pgm(x, c.model.h, c.model.w)?).map_err(|e| HarnessError::io(&pgm, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config => print!("{}", RunConfig::default().to_toml()),
        Cmd::Train {
            config,
            out,
            steps,
            resume,
        } => {
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&Checkpoint::load(&p)?)?,
                None => {
                    let mut c = match config {
                        Some(p) => RunConfig::load(&p)?,
                        None => RunConfig::default(),
                    };
                    c.train.phase = transdiff_harness::Phase::Pretrain1Step;
                    Trainer::new(c)?
                }
            };
            if let Some(s) = steps {
                trainer.config.train.steps = s;
            }
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            trainer.run(Some(&out), print_log)?;
            println!("checkpoint={}", trainer.checkpoint_path(&out).display());
        }
        Cmd::FinetuneMrar { from, out, steps, lr } => {
            let pre = Checkpoint::load(&from)?;
            let mut t = pre.config.train.finetune();
            if let Some(s) = steps {
                t.steps = s;
            }
            t.lr = lr;
            let mut trainer = Trainer::finetune_from(&pre, t)?;
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            trainer.run(Some(&out), print_log)?;
            println!("checkpoint={}", trainer.checkpoint_path(&out).display());
        }
        Cmd::Sample {
            ckpt,
            class,
            paradigm,
            refs,
            sampler,
            seed,
            count,
            out,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let cfg = sampler.apply(ck.config.sampler.clone());
            let n_refs = match paradigm {
                Paradigm::OneStep => 0,
                Paradigm::Mrar => refs,
            };
            let mut rng = SeededRng::new(seed, 0);
            let xs = eval::generate_class(&model, class, count, n_refs, &cfg, &mut rng)?;
            for (i, x) in xs.iter().enumerate() {
                write_sample(&out, i, count, x, &ck.config)?;
            }
            println!("samples={count} class={class} refs={n_refs}");
        }
        Cmd::Fuse {
            ckpt,
            class_a,
            class_b,
            k,
            interleaved,
            sampler,
            seed,
            out,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let cfg = sampler.apply(ck.config.sampler.clone());
            let k = k.unwrap_or(ck.config.model.cond_tokens() / 2);
            let mode = if interleaved {
                FusionMode::Interleaved
            } else {
                FusionMode::Prefix
            };
            let mut rng = SeededRng::new(seed, 0);
            let xs = eval::fused_samples(&model, class_a, class_b, k, mode, 1, &cfg, &mut rng)?;
            write_sample(&out, 0, 1, &xs[0], &ck.config)?;
            println!("fused={class_a}+{class_b} k={k}");
        }
        Cmd::Diversity {
            ckpt,
            class,
            refs,
            samples,
            sampler,
            seed,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let cfg = sampler.apply(ck.config.sampler.clone());
            println!("diversity.1step={}", eval::one_step_diversity(&model, class)?);
            let mut rng = SeededRng::new(seed, 0);
            let d = eval::mrar_diversity(&model, class, refs, samples, &cfg, &mut rng)?;
            println!("diversity.mrar{refs}={d}");
        }
        Cmd::Eval {
            ckpt,
            samples,
            refs,
            sampler,
            seed,
            csv,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let cfg = sampler.apply(ck.config.sampler.clone());
            let opts = EvalOptions {
                samples_per_class: samples,
                n_refs: refs,
                seed,
                ..Default::default()
            };
            let report = eval::evaluate(&model, &ck.config.dataset_spec(), &cfg, &opts)?;
            print!("{}", report.to_key_values());
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv()).map_err(|e| HarnessError::io(&p, e))?;
            }
        }
        Cmd::Gradcheck { seed } => {
            let r = joint_loss_gradcheck(seed)?;
            println!("coordinates={}", r.coordinates);
            println!("max_rel_error={:e}", r.max_rel_error);
            println!("worst={}[{}]", r.worst_param, r.worst_index);
            if r.max_rel_error > 1e-4 {
                return Err(HarnessError::Config(format!("gradient check failed: {:e}", r.max_rel_error)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
