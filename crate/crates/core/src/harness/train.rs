//! The training loop.
//!
//! One trainer owns the parameters. Samples are visited in a shuffled order
//! drawn from `(seed, epoch)`, one forward per sample, and the batch loss is
//! the mean over its samples. With frozen backbones their features are
//! computed once per sample and reused.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{frozen_checksums, Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
use super::optim::AdamW;
use super::{load_samples, Sample};
use crate::backbone::{TextFeatures, VisualFeatureMap};
use crate::config::{DatasetKind, RunConfig};
use crate::data::{load_dataset, synthetic};
use crate::error::{Error, Result};
use crate::losses::{training_loss, LossReport, LossSettings};
use crate::model::{GroundingModel, ParamGroup};
use crate::tokenizer::{Tokenizer, Vocabulary};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step index, counted from zero.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Components averaged over the batch.
    pub report: LossReport,
}

pub struct Trainer {
    cfg: RunConfig,
    model: GroundingModel,
    vocab: Vocabulary,
    tokenizer: Tokenizer,
    optimizer: AdamW,
    settings: LossSettings,
    epoch: usize,
    cache: HashMap<usize, (VisualFeatureMap, TextFeatures)>,
    history: Vec<StepRecord>,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let model = GroundingModel::new(&cfg.model, vocab.len(), cfg.seed)?;
        Self::with_model(cfg, vocab, model)
    }

    fn with_model(cfg: RunConfig, vocab: Vocabulary, model: GroundingModel) -> Result<Self> {
        let trainable = model
            .params()
            .vars()
            .into_iter()
            .filter(|(name, _)| {
                ParamGroup::of(name)
                    .map(|g| g.is_trainable(&cfg.model))
                    .unwrap_or(false)
            })
            .collect();
        let optimizer = AdamW::new(trainable, cfg.optimizer.clone())?;
        Ok(Self {
            settings: LossSettings::from(&cfg.model),
            tokenizer: Tokenizer::new(vocab.clone(), cfg.model.max_text_len),
            vocab,
            model,
            optimizer,
            cfg,
            epoch: 0,
            cache: HashMap::new(),
            history: Vec::new(),
            dump_dir: None,
        })
    }

    /// Resumes from a checkpoint, optimizer moments included.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.load_model()?;
        let mut t = Self::with_model(ckpt.meta.config.clone(), ckpt.vocabulary()?, model)?;
        if let Some(p) = ckpt.optimizer_path() {
            t.optimizer.load_state(&p, ckpt.meta.optimizer_step)?;
        }
        t.epoch = ckpt.meta.epoch;
        Ok(t)
    }

    /// Where to write the offending batch when the loss turns non-finite.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn model(&self) -> &GroundingModel {
        &self.model
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    /// Sample order of an epoch.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn features(
        &mut self,
        index: usize,
        sample: &Sample,
    ) -> Result<(VisualFeatureMap, TextFeatures)> {
        if let Some(f) = self.cache.get(&index) {
            return Ok(f.clone());
        }
        let prompt = self.tokenizer.encode(&sample.annotation.caption)?;
        let f = self.model.encode_inputs(&sample.clip, &prompt)?;
        if self.cfg.model.freeze_backbone {
            self.cache.insert(index, f.clone());
        }
        Ok(f)
    }

    /// One optimizer step on the samples at `indices`.
    pub fn step(&mut self, samples: &[Sample], indices: &[usize]) -> Result<StepRecord> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let step = self.optimizer.step_count();
        let mut total: Option<Tensor> = None;
        let mut report = LossReport::default();
        for &i in indices {
            let sample = &samples[i];
            let (fv, fp) = self.features(i, sample)?;
            let out = self.model.forward_features(&fv, &fp)?;
            let (loss, r) = training_loss(
                &out,
                &sample.annotation,
                &self.settings,
                self.cfg.model.d_model,
            )?;
            if !r.total.is_finite() {
                return Err(self.abort(step, samples, indices, &r));
            }
            total = Some(match total {
                None => loss,
                Some(acc) => (acc + loss)?,
            });
            accumulate(&mut report, &r);
        }
        let n = indices.len() as f64;
        scale(&mut report, 1.0 / n);
        let loss = (total.expect("batch is non-empty") / n)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        let stats = self.optimizer.step(&grads).map_err(|e| match e {
            Error::NumericalAbort { message, .. } => Error::NumericalAbort {
                batch: step,
                message: format!("{message}; samples {}", ids(samples, indices)),
            },
            e => e,
        })?;
        let rec = StepRecord {
            epoch: self.epoch,
            step,
            loss: value,
            grad_norm: stats.grad_norm,
            report,
        };
        log::debug!("epoch {} step {} loss {:.6}", rec.epoch, rec.step, rec.loss);
        self.history.push(rec.clone());
        Ok(rec)
    }

    fn abort(&self, step: usize, samples: &[Sample], indices: &[usize], r: &LossReport) -> Error {
        let message = format!("non-finite loss on samples {}", ids(samples, indices));
        if let Some(dir) = &self.dump_dir {
            let dump = serde_json::json!({
                "batch": step,
                "epoch": self.epoch,
                "samples": indices.iter().map(|&i| samples[i].annotation.video_id.clone()).collect::<Vec<_>>(),
                "captions": indices.iter().map(|&i| samples[i].annotation.caption.clone()).collect::<Vec<_>>(),
                "report": r,
            });
            let path = dir.join(format!("abort_batch_{step}.json"));
            let written =
                std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, dump.to_string()));
            if let Err(e) = written {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::NumericalAbort {
            batch: step,
            message,
        }
    }

    /// Runs one epoch and advances the epoch counter.
    pub fn train_epoch(&mut self, samples: &[Sample]) -> Result<Vec<StepRecord>> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let order = Self::epoch_order(self.cfg.seed, self.epoch, samples.len());
        let records = order
            .chunks(self.cfg.optimizer.batch_size)
            .map(|batch| self.step(samples, batch))
            .collect::<Result<Vec<_>>>()?;
        self.epoch += 1;
        Ok(records)
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.step_count(),
            frozen_checksums: frozen_checksums(&self.model)?,
            rng_seed: self.cfg.seed,
            rng_epoch: self.epoch,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<Checkpoint> {
        Checkpoint::write(
            dir,
            self.meta()?,
            &self.model,
            &self.vocab,
            Some(&self.optimizer),
        )
    }
}

fn ids(samples: &[Sample], indices: &[usize]) -> String {
    indices
        .iter()
        .map(|&i| samples[i].annotation.video_id.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

fn accumulate(acc: &mut LossReport, r: &LossReport) {
    acc.l1 += r.l1;
    acc.giou += r.giou;
    acc.confidence += r.confidence;
    acc.kl_start += r.kl_start;
    acc.kl_end += r.kl_end;
    acc.relevance += r.relevance;
    acc.total += r.total;
    if acc.layers.is_empty() {
        acc.layers = r.layers.clone();
    } else {
        for (a, l) in acc.layers.iter_mut().zip(&r.layers) {
            a.l1 += l.l1;
            a.giou += l.giou;
            a.confidence += l.confidence;
            a.kl_start += l.kl_start;
            a.kl_end += l.kl_end;
            a.total += l.total;
        }
    }
}

fn scale(r: &mut LossReport, s: f64) {
    r.l1 *= s;
    r.giou *= s;
    r.confidence *= s;
    r.kl_start *= s;
    r.kl_end *= s;
    r.relevance *= s;
    r.total *= s;
    for l in &mut r.layers {
        l.l1 *= s;
        l.giou *= s;
        l.confidence *= s;
        l.kl_start *= s;
        l.kl_end *= s;
        l.total *= s;
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// The checkpoint written after the last epoch.
    pub final_checkpoint: PathBuf,
}

/// Trains on the configured dataset, writing checkpoints under
/// `<output_dir>/checkpoints/` and the loss trace to `<output_dir>/loss.jsonl`.
/// `data_root` overrides the dataset root from the config.
pub fn train(cfg: &RunConfig, data_root: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("run config names no dataset".into()))?;
    let root = data_root.unwrap_or(&ds.root);
    let manifest = load_dataset(
        ds.kind,
        root,
        &ds.split,
        ds.version,
        cfg.model.strict_interval,
    )?;
    if manifest.is_empty() {
        return Err(Error::Data(format!(
            "no usable samples under {}",
            root.display()
        )));
    }
    let vocab_file = root.join(synthetic::VOCAB_FILE);
    let vocab = if ds.kind == DatasetKind::Synthetic && vocab_file.exists() {
        Vocabulary::from_file(&vocab_file)?
    } else {
        Vocabulary::from_corpus(manifest.annotations().map(|a| a.caption.as_str()))
    };
    let samples = load_samples(&manifest, root, &cfg.model)?;

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let trace_path = out.join("loss.jsonl");
    let mut trace = std::fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;

    let mut trainer = Trainer::new(cfg.clone(), vocab)?;
    trainer.set_dump_dir(out);
    let epochs = cfg.epochs();
    let mut checkpoints = Vec::new();
    for epoch in 0..epochs {
        let records = trainer.train_epoch(&samples)?;
        for r in &records {
            writeln!(trace, "{}", serde_json::to_string(r)?)
                .map_err(|e| Error::io(&trace_path, e))?;
        }
        let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        log::info!("epoch {}/{epochs}: mean loss {mean:.5}", epoch + 1);
        if let Some(every) = cfg.checkpoint_every.filter(|e| *e > 0) {
            if (epoch + 1) % every == 0 && epoch + 1 != epochs {
                let dir = out
                    .join("checkpoints")
                    .join(format!("epoch_{:04}", epoch + 1));
                checkpoints.push(trainer.save_checkpoint(&dir)?.dir);
            }
        }
    }
    let final_dir = out.join("checkpoints").join("final");
    checkpoints.push(trainer.save_checkpoint(&final_dir)?.dir);
    Ok(TrainOutcome {
        history: trainer.history().to_vec(),
        checkpoints,
        final_checkpoint: final_dir,
    })
}
