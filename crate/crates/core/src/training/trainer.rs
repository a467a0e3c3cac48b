use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, one_cycle_lr, AdamW, OneCycle};
use super::sampler::{temporal_indices, TemporalBatchRule};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{apply_aug_pair, sample_aug, transform_to_frame, PointFrame};
use crate::io::{check_param_names, Checkpoint, RngState};
use crate::model::{architecture_of, forward_concat, forward_tmae, init_params, Architecture};
use crate::params::ParamStore;
use crate::tensor::Tape;

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 0-based global step.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Comma-separated metrics table, header `step,epoch,lr,loss`.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub const HEADER: &'static str = "step,epoch,lr,loss";

    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(MetricsLog { out })
    }

    /// Continue an existing log without repeating the header.
    pub fn append(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn write(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.out, "{},{},{:.8e},{:.8e}", r.step, r.epoch, r.lr, r.loss)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parameters, optimizer state and the single RNG driving sampling,
/// augmentation, masking and target draws.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub params: ParamStore,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters from `config.train.seed`.
    pub fn new(config: RunConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let params = init_params(&config.model, arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Trainer { config, params, rng })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let expected = init_params(&ck.config.model, architecture_of(&ck.params), 0)?;
        check_param_names(&ck.params, &expected)?;
        Ok(Trainer {
            config: ck.config,
            params: ck.params,
            rng: ck.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn architecture(&self) -> Architecture {
        architecture_of(&self.params)
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.params.step()
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.train.total_steps()
    }

    /// One optimizer step on `batch_size` pairs drawn from `dataset`.
    pub fn step(&mut self, dataset: &[Vec<PointFrame>]) -> Result<StepRecord> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let tc = &self.config.train;
        let step = self.params.step();
        let lr = one_cycle_lr(step, tc.total_steps(), &OneCycle::from(tc))?;
        let rule = TemporalBatchRule::new(tc.temporal_n)?;
        let arch = architecture_of(&self.params);

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut losses = Vec::with_capacity(tc.batch_size);
        let mut drawn = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let s = self.rng.gen_range(0..dataset.len());
            let (i, j) = temporal_indices(dataset[s].len(), &rule, &mut self.rng)?;
            drawn.push((s, i, j));
            let cur = &dataset[s][j];
            let prev = transform_to_frame(&dataset[s][i], &cur.pose)?;
            let (prev, cur) = if tc.augment {
                let aug = sample_aug(&mut self.rng, &tc.aug);
                apply_aug_pair((&prev, cur), &aug)
            } else {
                (prev, cur.clone())
            };
            let out = match arch {
                Architecture::Temporal => {
                    forward_tmae(&mut tape, &bound, &self.config.model, &self.config.grid, &prev, &cur, &mut self.rng)?
                }
                Architecture::Concat => {
                    forward_concat(&mut tape, &bound, &self.config.model, &self.config.grid, &prev, &cur, &mut self.rng)?
                }
            };
            losses.push(out.loss);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / losses.len() as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at step {step} (lr {lr:.3e}); pairs (sequence, prev, cur): {drawn:?}"
            )));
        }
        let epoch = step / tc.steps_per_epoch;
        if tape.requires_grad(loss) {
            let grads = tape.backward(loss)?;
            let grads = bound.gradients(&tape, &grads);
            adamw_step(&mut self.params, &grads, lr, &AdamW::from(tc))?;
        } else {
            // nothing was masked; count the step without moving anything
            self.params.step += 1;
        }
        debug!("step {step} pairs {drawn:?} loss {value:.6e}");
        Ok(StepRecord { step, epoch, lr, loss: value })
    }

    /// Train until the configured step count, calling `on_step` after every
    /// step and `on_epoch` with a checkpoint at every epoch boundary.
    ///
    /// Parameters are rounded to checkpoint precision at each boundary so a
    /// run resumed from the checkpoint continues bit-identically.
    pub fn run(
        &mut self,
        dataset: &[Vec<PointFrame>],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
        mut on_epoch: impl FnMut(u64, &Checkpoint) -> Result<()>,
    ) -> Result<()> {
        let per_epoch = self.config.train.steps_per_epoch;
        while !self.is_done() {
            let rec = self.step(dataset)?;
            on_step(&rec)?;
            if self.step_count().is_multiple_of(per_epoch) {
                self.params.round_to_f32();
                let epoch = self.step_count() / per_epoch;
                info!("epoch {epoch} done at step {}, loss {:.4e}", self.step_count(), rec.loss);
                on_epoch(epoch, &self.checkpoint())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::test_support::{frames, tiny_run_config};

    fn run(t: &mut Trainer, data: &[Vec<PointFrame>]) -> (Vec<StepRecord>, Vec<Checkpoint>) {
        let mut recs = Vec::new();
        let mut cks = Vec::new();
        t.run(
            data,
            |r| {
                recs.push(*r);
                Ok(())
            },
            |_, ck| {
                cks.push(ck.clone());
                Ok(())
            },
        )
        .unwrap();
        (recs, cks)
    }

    #[test]
    fn runs_are_reproducible_and_resume_exactly() {
        let cfg = tiny_run_config();
        let data = frames(&cfg);
        let (a, cks) = run(&mut Trainer::new(cfg.clone(), Architecture::Temporal).unwrap(), &data);
        let (b, _) = run(&mut Trainer::new(cfg.clone(), Architecture::Temporal).unwrap(), &data);
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(cks.len(), 2);
        assert_eq!(a[0].lr, one_cycle_lr(0, 6, &OneCycle::from(&cfg.train)).unwrap());
        assert_eq!(a.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);

        let mut resumed = Trainer::from_checkpoint(cks[0].clone()).unwrap();
        let (c, _) = run(&mut resumed, &data);
        assert_eq!(c, a[3..]);
    }

    #[test]
    fn concat_baseline_trains() {
        let cfg = tiny_run_config();
        let data = frames(&cfg);
        let mut t = Trainer::new(cfg, Architecture::Concat).unwrap();
        assert_eq!(t.architecture(), Architecture::Concat);
        let r = t.step(&data).unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
    }

    #[test]
    fn metrics_format() {
        let mut log = MetricsLog::new(Vec::new()).unwrap();
        log.write(&StepRecord { step: 0, epoch: 0, lr: 3e-4, loss: 0.123456789123 }).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        assert_eq!(text, "step,epoch,lr,loss\n0,0,3.00000000e-4,1.23456789e-1\n");
    }

    #[test]
    fn mismatched_checkpoint_is_refused() {
        let cfg = tiny_run_config();
        let mut ck = Trainer::new(cfg, Architecture::Temporal).unwrap().checkpoint();
        ck.config.model.encoder_blocks = 3;
        let e = Trainer::from_checkpoint(ck).unwrap_err();
        assert!(e.to_string().contains("missing"), "{e}");
    }
}
