//! Deterministic training, evaluation and the component-removal sweep.
//!
//! Every random choice (initialization, shuffling, augmentation) derives from
//! `train.seed`, and everything runs in a fixed order, so a given configuration
//! and dataset always reproduce the same loss curve bit for bit.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::{RunConfig, Variant};
use crate::data::{augment, Dataset, Sample, SampleBatch, Split};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossValue};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::Sffnet;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;
use checkpoint::Checkpoint;
use optim::{AdamW, OptimState};
use schedule::Schedule;

pub const LOG_FILE: &str = "log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOG_HEADER: [&str; 8] = [
    "epoch",
    "lr",
    "train_loss_total",
    "train_loss_ce",
    "train_loss_dice",
    "eval_mIoU",
    "eval_meanF1",
    "eval_OA",
];
const AUGMENT_STREAM_SALT: u64 = 0x5eed_a097;

/// Worker threads for evaluation and sweeps: `SFFNET_THREADS` if set, else all cores.
pub fn threads() -> usize {
    std::env::var("SFFNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's batches.
    pub loss: LossValue,
    pub eval: Option<Metrics>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let eval = |f: fn(&Metrics) -> f64| self.eval.as_ref().map_or(String::new(), |m| format!("{:.6}", f(m)));
        vec![
            self.epoch.to_string(),
            format!("{:e}", self.lr),
            format!("{:.17e}", self.loss.total),
            format!("{:.17e}", self.loss.ce),
            format!("{:.17e}", self.loss.dice),
            eval(|m| m.miou),
            eval(|m| m.mean_f1),
            eval(|m| m.oa),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_miou: f64,
    pub best_epoch: Option<usize>,
    pub reached_target: bool,
}

/// Per-pixel argmax class of one image.
pub fn predict(net: &Sffnet, store: &ParamStore, image: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
    let x = ctx.input(image.clone());
    let logits = net.forward(&mut ctx, x)?;
    drop(ctx);
    let t = tape.value(logits);
    let [n, k, h, w] = t.dims();
    let d = t.data();
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for p in 0..h * w {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * h * w + p] > d[(b * k + best) * h * w + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Confusion matrix over `samples`, split across worker threads and merged.
pub fn evaluate(net: &Sffnet, store: &ParamStore, samples: &[&Sample], ignore: usize) -> Result<ConfusionMatrix> {
    let classes = net.config.num_classes;
    let workers = threads().min(samples.len()).max(1);
    let chunk = samples.len().div_ceil(workers).max(1);
    let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut cm = ConfusionMatrix::new(classes, Some(ignore));
                    for s in part {
                        cm.accumulate(&predict(net, store, &s.image)?, &s.mask.labels)?;
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(classes, Some(ignore));
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Sffnet,
    pub store: ParamStore,
    pub optim: OptimState,
    pub schedule: Schedule,
    pub epochs_done: usize,
    pub best_miou: f64,
    pub best_epoch: Option<usize>,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = Sffnet::build(&cfg.model, cfg.train.seed)?;
        let optim = OptimState::new(AdamW::from_config(&cfg.train), &store);
        Ok(Self {
            cfg: cfg.clone(),
            net,
            store,
            optim,
            schedule: Schedule::from_config(&cfg.train),
            epochs_done: 0,
            best_miou: f64::NAN,
            best_epoch: None,
            best: None,
        })
    }

    /// Resumes from a checkpoint; `cfg` replaces the stored run configuration
    /// (the model section must describe the same network).
    pub fn resume(ck: &Checkpoint, cfg: Option<&RunConfig>) -> Result<Self> {
        let mut ck = ck.clone();
        if let Some(cfg) = cfg {
            cfg.validate()?;
            ck.config = cfg.clone();
        }
        let (net, store, optim) = ck.restore()?;
        let optim = optim.unwrap_or_else(|| OptimState::new(AdamW::from_config(&ck.config.train), &store));
        Ok(Self {
            schedule: Schedule::from_config(&ck.config.train),
            cfg: ck.config.clone(),
            net,
            store,
            optim,
            epochs_done: ck.epochs,
            best_miou: ck.best_miou,
            best_epoch: None,
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.store, Some(&self.optim), self.epochs_done, self.best_miou)
    }

    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &SampleBatch, lr: f64) -> Result<LossValue> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train);
        let x = ctx.input(batch.images.clone());
        let logits = self.net.forward(&mut ctx, x)?;
        let (loss, value) = total_loss(ctx.tape, logits, &batch.labels, Some(batch.ignore_index), self.cfg.train.dice_eps)?;
        let rec = ctx.finish();
        if !value.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss after {} optimizer steps", self.optim.step),
            });
        }
        tape.backward(loss)?;
        let grads = rec.grads(&tape);
        self.optim.step(&mut self.store, &grads, lr)?;
        self.store.apply_stats(&rec.updates);
        Ok(value)
    }

    /// Validation indices, or training indices when there is no validation split.
    pub fn eval_split(data: &Dataset) -> Vec<usize> {
        let val = data.indices(Split::Val);
        if val.is_empty() {
            data.indices(Split::Train)
        } else {
            val
        }
    }

    /// Metrics on the validation split, or on the training split when there is none.
    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        let samples: Vec<&Sample> = Self::eval_split(data).into_iter().map(|i| &data.samples[i]).collect();
        let cm = evaluate(&self.net, &self.store, &samples, self.cfg.train.ignore_index)?;
        Ok(cm.metrics(&self.cfg.metrics.exclude_classes))
    }

    /// Trains one epoch; evaluates when the epoch is due.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let tc = &self.cfg.train;
        let epoch = self.epochs_done;
        let lr = self.schedule.lr_at(epoch);
        let mut order = data.indices(Split::Train);
        if order.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (ignore, batch_size, augment_on, seed) = (tc.ignore_index, tc.batch_size, tc.augment, tc.seed);
        let mut sum = LossValue {
            total: 0.0,
            ce: 0.0,
            dice: 0.0,
            all_ignored: false,
        };
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    if !augment_on {
                        return Ok(data.samples[i].clone());
                    }
                    let mut arng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_STREAM_SALT);
                    arng.set_stream(((epoch as u64) << 32) | i as u64);
                    augment::augment(&data.samples[i], &self.cfg.augment, &mut arng)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = SampleBatch::from_samples(&samples, ignore)?;
            let v = self.train_step(&batch, lr)?;
            sum.total += v.total;
            sum.ce += v.ce;
            sum.dice += v.dice;
            sum.all_ignored |= v.all_ignored;
            batches += 1;
        }
        let nb = batches as f64;
        let loss = LossValue {
            total: sum.total / nb,
            ce: sum.ce / nb,
            dice: sum.dice / nb,
            all_ignored: sum.all_ignored,
        };
        self.epochs_done += 1;
        let due = self.epochs_done % self.cfg.train.eval_every == 0 || self.epochs_done == self.cfg.train.epochs;
        let eval = if due { Some(self.evaluate(data)?) } else { None };
        if let Some(m) = &eval {
            if self.best_miou.is_nan() || m.miou > self.best_miou {
                self.best_miou = m.miou;
                self.best_epoch = Some(self.epochs_done);
                self.best = Some(self.checkpoint());
            }
        }
        Ok(EpochRecord {
            epoch: self.epochs_done,
            lr,
            loss,
            eval,
        })
    }

    /// Trains until `train.epochs` epochs are done or `train.target_miou` is
    /// reached. With `out`, writes the metric log and the best and last checkpoints.
    pub fn fit(&mut self, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
        data.check(self.cfg.model.num_classes, self.cfg.train.ignore_index)?;
        let mut log = match out {
            Some(dir) => Some(self.open_log(dir)?),
            None => None,
        };
        let mut records = Vec::new();
        let mut reached_target = false;
        while self.epochs_done < self.cfg.train.epochs {
            let rec = self.run_epoch(data)?;
            log::info!(
                "epoch {} lr {:.3e} loss {:.5} (ce {:.5}, dice {:.5}){}",
                rec.epoch,
                rec.lr,
                rec.loss.total,
                rec.loss.ce,
                rec.loss.dice,
                rec.eval.as_ref().map_or(String::new(), |m| format!(" eval mIoU {:.4}", m.miou))
            );
            if let (Some(dir), Some(w)) = (out, log.as_mut()) {
                w.write_record(rec.csv_row()).map_err(|e| Error::io(dir.join(LOG_FILE), e.into()))?;
                w.flush().map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
                self.checkpoint().write(&dir.join(LAST_CHECKPOINT))?;
                if self.best_epoch == Some(rec.epoch) {
                    if let Some(best) = &self.best {
                        best.write(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            let hit = matches!((&rec.eval, self.cfg.train.target_miou), (Some(m), Some(t)) if m.miou >= t);
            records.push(rec);
            if hit {
                reached_target = true;
                break;
            }
        }
        Ok(TrainOutcome {
            records,
            best_miou: self.best_miou,
            best_epoch: self.best_epoch,
            reached_target,
        })
    }

    /// Creates the metric log with the run configuration as `#` comment lines, or
    /// appends to an existing one when resuming.
    fn open_log(&self, dir: &Path) -> Result<csv::Writer<std::fs::File>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let append = self.epochs_done > 0 && path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !append {
            let mut header = String::new();
            for line in self.cfg.to_toml().lines() {
                header.push_str("# ");
                header.push_str(line);
                header.push('\n');
            }
            header.push_str(&LOG_HEADER.join(","));
            header.push('\n');
            file.write_all(header.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(csv::Writer::from_writer(file))
    }
}

/// Reads a metric log written by [`Trainer::fit`], skipping the comment header.
pub fn read_log(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Parse {
            offset: 0,
            detail: format!("{}: {e}", path.display()),
        })?;
    rdr.records()
        .map(|r| {
            r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| Error::Parse {
                offset: e.position().map_or(0, |p| p.byte() as usize),
                detail: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub best_epoch: Option<usize>,
    /// Evaluation metrics of the best checkpoint.
    pub metrics: Metrics,
}

pub const ABLATION_HEADER: [&str; 6] = ["variant", "params", "best_epoch", "meanF1", "OA", "mIoU"];

/// Trains every variant from the same seed and reports its best evaluation.
pub fn ablate(cfg: &RunConfig, data: &Dataset, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let run = |v: Variant| -> Result<AblationRow> {
        let mut c = cfg.clone();
        c.model = v.apply(&cfg.model);
        let mut t = Trainer::new(&c)?;
        let params = t.store.num_scalars();
        t.fit(data, None)?;
        let (net, store, _) = match t.best_checkpoint() {
            Some(ck) => ck.restore()?,
            None => return Err(Error::Contract(format!("{} was never evaluated", v.label()))),
        };
        let samples: Vec<&Sample> = Trainer::eval_split(data).into_iter().map(|i| &data.samples[i]).collect();
        let metrics = evaluate(&net, &store, &samples, c.train.ignore_index)?.metrics(&c.metrics.exclude_classes);
        Ok(AblationRow {
            variant: v,
            params,
            best_epoch: t.best_epoch,
            metrics,
        })
    };
    let workers = threads().min(variants.len()).max(1);
    let mut rows: Vec<Option<Result<AblationRow>>> = (0..variants.len()).map(|_| None).collect();
    for group in (0..variants.len()).collect::<Vec<_>>().chunks(workers) {
        let done: Vec<(usize, Result<AblationRow>)> = std::thread::scope(|scope| {
            let hs: Vec<_> = group
                .iter()
                .map(|&i| {
                    let run = &run;
                    scope.spawn(move || (i, run(variants[i])))
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        for (i, r) in done {
            rows[i] = Some(r);
        }
    }
    rows.into_iter().map(|r| r.expect("every variant ran")).collect()
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        offset: 0,
        detail: format!("{}: {e}", path.display()),
    })?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(ABLATION_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.variant.label().to_string(),
            r.params.to_string(),
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            crate::metrics::format_percent(r.metrics.mean_f1),
            crate::metrics::format_percent(r.metrics.oa),
            crate::metrics::format_percent(r.metrics.miou),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
