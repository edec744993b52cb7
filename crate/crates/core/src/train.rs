//! Multi-path training loop, validation, early stopping and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use meshcontact_tensor::{Gradients, ParamStore, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::LossBreakdown;
use crate::model::{Model, PathSpec};
use crate::nn::{stream, tag};
use crate::optim::{clip_global_norm, lr_at, Adam};
use crate::scenes::Sample;

const CHECKPOINT_MAGIC: &[u8] = b"GCCKPT1\0";

/// Per-epoch summary; losses are means over the epoch's samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub train_total: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,lr,L_m,L_cls_A,L_cls_B,L_sem,L_bp,L_all,val_L_all";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let c = r.train.components();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.lr, c[0], c[1], c[2], c[3], c[4], r.train_total, r.val_total
            );
        }
        out
    }

    /// Record with the lowest validation loss (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_total <= r.val_total => Some(b),
                _ => Some(r),
            })
    }
}

/// Parameters, optimizer state and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.str(&self.config.hash());
        w.str(&self.config.to_toml());
        w.u64(self.epoch as u64);
        w.u64(self.adam.step_count());
        w.table(self.params.iter());
        w.table(self.adam.first_moments().iter());
        w.table(self.adam.second_moments().iter());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader::new(what, bytes, CHECKPOINT_MAGIC)?;
        let hash = r.str()?;
        let toml_offset = r.offset();
        let text = r.str()?;
        let config: RunConfig = text.parse().map_err(|_| r.err_at(toml_offset))?;
        if config.hash() != hash {
            return Err(Error::Load(format!("{what}: configuration hash mismatch")));
        }
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let params: ParamStore = r.table()?.into_iter().collect();
        let m: BTreeMap<String, Tensor> = r.table()?.into_iter().collect();
        let v: BTreeMap<String, Tensor> = r.table()?.into_iter().collect();
        r.finish()?;
        let adam = Adam::from_parts(step, m, v)?;
        Ok(Self {
            config,
            epoch,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the model and checks that the parameters fit it.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.config.clone())?;
        model.check_params(&self.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub history: History,
    pub stopped_early: bool,
}

/// Loss terms and total for one sample, plus gradients when requested.
fn sample_pass(model: &Model, params: &ParamStore, sample: &Sample, spec: &PathSpec, grads: bool) -> Result<(LossBreakdown, f64, Option<Gradients>)> {
    let mut tape = Tape::new();
    let pv = if grads { params.register(&mut tape) } else { params.register_frozen(&mut tape) };
    let fwd = model.forward(&mut tape, &pv, &sample.image, spec)?;
    let (total, terms) = model.loss(&mut tape, &fwd, sample)?;
    let parts = LossBreakdown::from_components(terms.map(|t| tape.value(t).item()));
    let total_value = tape.value(total).item();
    let g = if grads && total_value.is_finite() {
        Some(tape.backward(total)?.named())
    } else {
        None
    };
    Ok((parts, total_value, g))
}

/// NaN reaching an op means the parameters have blown up.
fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NanInput { .. }) => Error::Divergence { epoch, batch },
        e => e,
    }
}

/// Mean single-path objective over `samples`.
pub fn validation_loss(model: &Model, params: &ParamStore, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let totals = samples
        .par_iter()
        .map(|s| sample_pass(model, params, s, &PathSpec::single(), false).map(|r| r.1))
        .collect::<Result<Vec<f64>>>()?;
    Ok(totals.iter().sum::<f64>() / samples.len() as f64)
}

/// Trains from `init` (or fresh parameters seeded by `train.seed`), calling
/// `on_epoch` after every epoch.
pub fn train(
    model: &Model,
    train_set: &[Sample],
    val_set: &[Sample],
    init: Option<ParamStore>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let cfg = model.config();
    let tc = &cfg.train;
    let mut params = match init {
        Some(p) => {
            model.check_params(&p)?;
            p
        }
        None => model.init_params(tc.seed)?,
    };
    let mut adam = Adam::new();
    let mut history = History::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..tc.max_epochs {
        let lr = lr_at(epoch, tc);
        order.shuffle(&mut stream(tc.seed, &[tag("shuffle"), epoch as u64]));
        let mut sums = [0.0; 5];
        let mut total_sum = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let spec = PathSpec {
                        n_paths: cfg.simu.n_paths,
                        seed: tc.seed,
                        epoch: epoch as u64,
                        sample: i as u64,
                    };
                    sample_pass(model, &params, &train_set[i], &spec, true)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(e, epoch + 1, b + 1))?;
            let mut grads = Gradients::new();
            for (parts, total, g) in results {
                let g = match g {
                    Some(g) if g.global_norm().is_finite() => g,
                    _ => {
                        return Err(Error::Divergence {
                            epoch: epoch + 1,
                            batch: b + 1,
                        })
                    }
                };
                if grads.is_empty() {
                    grads = g;
                } else {
                    grads.accumulate(&g)?;
                }
                for (s, c) in sums.iter_mut().zip(parts.components()) {
                    *s += c;
                }
                total_sum += total;
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_global_norm(&mut grads, tc.grad_clip);
            adam.step(&mut params, &grads, lr)?;
        }
        let n = train_set.len() as f64;
        let val_total = validation_loss(model, &params, val_set).map_err(|e| diverged(e, epoch + 1, 0))?;
        if !val_total.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                batch: 0,
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train: LossBreakdown::from_components(sums.map(|s| s / n)),
            train_total: total_sum / n,
            val_total,
        };
        history.records.push(record);
        on_epoch(&record);

        if best.as_ref().is_none_or(|(b, _)| val_total < *b) {
            best = Some((
                val_total,
                Checkpoint {
                    config: cfg.clone(),
                    epoch: epoch + 1,
                    params: params.clone(),
                    adam: adam.clone(),
                },
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (_, best) = best.ok_or_else(|| Error::Contract("train.max_epochs must be at least 1".into()))?;
    Ok(TrainOutcome {
        best,
        history,
        stopped_early,
    })
}
