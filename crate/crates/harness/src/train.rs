//! Two-phase training: 1-step pretraining, then multi-reference fine-tuning.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use transdiff_core::model::{LabeledLatent, LossDraws, TransDiff};
use transdiff_core::SeededRng;

use crate::checkpoint::Checkpoint;
use crate::config::{Phase, RunConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::ema::Ema;
use crate::error::{HarnessError, Result};
use crate::optim::{clip_grad_norm, AdamW};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub references: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,phase,references,loss,grad_norm,lr";

pub struct Trainer {
    pub config: RunConfig,
    pub model: TransDiff<f32>,
    pub optimizer: AdamW,
    pub ema: Ema,
    /// Steps completed in the current phase.
    pub step: u64,
    pub data: Dataset,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    /// Fresh model for pretraining; parameters are seeded by `train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = TransDiff::new(config.model.clone(), config.train.seed)?;
        Self::with_model(config, model)
    }

    fn with_model(config: RunConfig, model: TransDiff<f32>) -> Result<Self> {
        let data = Dataset::generate(config.dataset_spec(), config.data.train_per_class)?;
        let t = &config.train;
        let optimizer = AdamW::new(model.params(), t.effective_lr(), (t.beta1, t.beta2), t.weight_decay);
        let ema = Ema::new(model.params(), t.ema_decay);
        Ok(Self {
            config,
            model,
            optimizer,
            ema,
            step: 0,
            data,
            history: Vec::new(),
        })
    }

    /// Continue a run from a checkpoint of the same phase.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut tr = Self::with_model(ckpt.config.clone(), ckpt.model()?)?;
        if ckpt.phase != tr.config.train.phase {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint phase {} does not match configured phase {}",
                ckpt.phase.name(),
                tr.config.train.phase.name()
            )));
        }
        if ckpt.ema.len() != tr.ema.shadow.len() {
            return Err(HarnessError::Checkpoint("EMA tensors do not match the model".into()));
        }
        tr.ema.shadow = ckpt.ema.iter().map(|(_, t)| t.clone()).collect();
        if let Some(opt) = &ckpt.optimizer {
            tr.optimizer = opt.clone();
        }
        tr.step = ckpt.step;
        Ok(tr)
    }

    /// Start multi-reference fine-tuning from a pretrain checkpoint's EMA
    /// weights, with `train` as the fine-tune schedule.
    pub fn finetune_from(pretrain: &Checkpoint, train: TrainConfig) -> Result<Self> {
        if pretrain.phase != Phase::Pretrain1Step {
            return Err(HarnessError::Checkpoint(format!(
                "fine-tuning needs a pretrain checkpoint, got {}",
                pretrain.phase.name()
            )));
        }
        let config = RunConfig {
            train: TrainConfig {
                phase: Phase::FinetuneMrar,
                ..train
            },
            ..pretrain.config.clone()
        };
        config.validate()?;
        Self::with_model(config, pretrain.ema_model()?)
    }

    pub fn phase(&self) -> Phase {
        self.config.train.phase
    }

    /// Draws for `step` depend only on `(seed, phase, step)`, so resumed runs
    /// see the same batches.
    fn batch_for(&self, step: u64) -> Result<(Vec<Vec<LabeledLatent<f32>>>, LossDraws<f32>)> {
        let c = &self.config.model;
        let t = &self.config.train;
        let mut rng = SeededRng::new(t.seed, 1000 + self.phase().code() as u64).substream(step);
        let refs = match self.phase() {
            Phase::Pretrain1Step => 0,
            Phase::FinetuneMrar => rng.below(c.max_references + 1),
        };
        let mut batch = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let k = rng.below(c.n_classes);
            let seq = self.data.draw_sequence(k, refs + 1, &mut rng)?;
            batch.push(seq.into_iter().map(|latent| LabeledLatent { class_id: k, latent }).collect());
        }
        let draws = LossDraws::sample(c, t.batch_size * (refs + 1), &mut rng);
        Ok((batch, draws))
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let (batch, draws) = self.batch_for(self.step)?;
        let loss = match self.model.loss_and_grad(&batch, &draws) {
            Ok(l) => l,
            Err(transdiff_core::Error::NonFiniteObjective) => {
                return Err(HarnessError::Diverged {
                    step: self.step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let grad_norm = clip_grad_norm(self.model.params_mut(), self.config.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(HarnessError::Diverged { step: self.step, loss });
        }
        self.optimizer.step(self.model.params_mut())?;
        self.ema.update(self.model.params())?;
        self.step += 1;
        let rec = LossRecord {
            step: self.step,
            references: batch[0].len() - 1,
            loss,
            grad_norm,
            lr: self.optimizer.lr,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Train until `config.train.steps`, saving into `out_dir` when given
    /// (periodically and at the end, as `<phase>.ckpt`).
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_log: impl FnMut(&LossRecord)) -> Result<Checkpoint> {
        let t = self.config.train.clone();
        while self.step < t.steps {
            let rec = self.train_step()?;
            if t.log_every > 0 && (rec.step % t.log_every == 0 || rec.step == t.steps) {
                on_log(&rec);
            }
            if let Some(dir) = out_dir {
                if t.checkpoint_every > 0 && rec.step % t.checkpoint_every == 0 {
                    self.checkpoint().save(&self.checkpoint_path(dir))?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = out_dir {
            ckpt.save(&self.checkpoint_path(dir))?;
            let csv = dir.join(format!("{}-loss.csv", self.phase().name()));
            std::fs::write(&csv, self.loss_csv()).map_err(|e| HarnessError::io(&csv, e))?;
        }
        Ok(ckpt)
    }

    pub fn checkpoint_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.ckpt", self.phase().name()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = |use_ema: bool| {
            if use_ema {
                self.ema.named(self.model.params())
            } else {
                self.model
                    .params()
                    .iter()
                    .map(|(_, p)| (p.name.clone(), p.value.clone()))
                    .collect()
            }
        };
        Checkpoint {
            config: self.config.clone(),
            phase: self.phase(),
            step: self.step,
            params: named(false),
            ema: named(true),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Loss history as CSV with [`LOSS_CSV_HEADER`].
    pub fn loss_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                self.phase().name(),
                r.references,
                r.loss,
                r.grad_norm,
                r.lr
            );
        }
        s
    }
}

/// Mean of the first and last `window` losses of a history.
pub fn loss_ends(history: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if history.len() < window || window == 0 {
        return None;
    }
    let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
    Some((mean(&history[..window]), mean(&history[history.len() - window..])))
}
