//! Objective `cls + λ·ufm`, Adam or SGD with momentum, per-epoch dev evaluation,
//! best-dev checkpointing and early stopping.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod model;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{Optimizer, TrainConfig, Variant};
pub use gradcheck::{gradcheck, Component, GradcheckReport};
pub use loss::{class_index, cls_loss, total_loss};
pub use model::{BatchOutput, Example, Model};

use crate::autograd::{Gradients, ParamStore};
use crate::dataset::io::load_png;
use crate::dataset::synth::mix_seed;
use crate::dataset::{render, Manifest, ProtocolSplit, SplitPart};
use crate::error::{Error, Result};
use crate::eval::metrics::{dev_threshold, metrics_at, ScoreEntry, ScoreSet};
use crate::parallel;
use crate::tensor::Matrix;
use crate::vision::patchify;

const SHUFFLE_STREAM: u64 = 0x5b0f;

/// Fixed input standardisation applied to every pixel before patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    pub ufm: f64,
    pub total: f64,
    /// `NaN` when the split has no usable dev part.
    pub dev_acer: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<EpochRecord>,
}

impl LossTrace {
    /// One epoch per line: `epoch cls ufm total dev_acer`, tab separated.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\tcls\tufm\ttotal\tdev_acer\n");
        for e in &self.epochs {
            writeln!(s, "{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}", e.epoch, e.cls, e.ufm, e.total, e.dev_acer)
                .expect("string write");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev result.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub trace: LossTrace,
}

/// Renders (or reads) and patchifies the given samples, in order.
pub fn load_examples(manifest: &Manifest, ids: &[String], config: &TrainConfig) -> Result<Vec<Example>> {
    let index = manifest.index();
    let descriptors = ids
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Lookup(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let synth = &manifest.generator_config;
    parallel::map(config.execution, &descriptors, |d| {
        let image = match &config.image_dir {
            Some(dir) => load_png(&dir.join(format!("{}.png", d.sample_id)))?,
            None => render(d, synth)?,
        };
        let patches = patchify(&image, config.patch_size)?.map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
        Ok(Example { sample_id: d.sample_id.clone(), label: d.label, patches })
    })
    .into_iter()
    .collect()
}

/// Live scores and mean cross-entropy of a set of examples.
pub fn score_examples(model: &Model, store: &ParamStore, examples: &[Example]) -> Result<(ScoreSet, f64)> {
    let cf = model.class_features(store)?;
    let rows = parallel::map(model.config.execution, examples, |ex| -> Result<(ScoreEntry, f64)> {
        let (_, logits) = model.predict(store, &cf, &ex.patches)?;
        let y = class_index(ex.label);
        let l = logits.row(0);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ce = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - l[y];
        Ok((ScoreEntry { sample_id: ex.sample_id.clone(), label: ex.label, live_score: Model::live_score(&logits) }, ce))
    });
    let mut entries = Vec::with_capacity(rows.len());
    let mut ce = 0.0;
    for r in rows {
        let (e, c) = r?;
        ce += c;
        entries.push(e);
    }
    let mean_ce = if entries.is_empty() { 0.0 } else { ce / entries.len() as f64 };
    Ok((ScoreSet::new(entries), mean_ce))
}

/// ACER on the dev set at its own equal-error threshold; `None` when the dev
/// set lacks a class.
pub fn dev_acer(dev: &ScoreSet) -> Result<Option<f64>> {
    match dev_threshold(dev) {
        Ok(t) => Ok(Some(metrics_at(dev, t)?.acer)),
        Err(Error::Contract(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn clip(grads: &mut Gradients, max_norm: f64) {
    if max_norm > 0.0 {
        let n = grads.global_norm();
        if n > max_norm {
            grads.scale(max_norm / n);
        }
    }
}

/// Per-parameter optimizer state.
struct OptimizerState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: i32,
}

impl OptimizerState {
    fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { first: zeros(), second: zeros(), steps: 0 }
    }

    /// SGD: `v ← μ·v + g`, `θ ← θ − lr·v`. Adam: the usual bias-corrected
    /// moments with `β₁ = μ`.
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients, config: &TrainConfig) {
        self.steps += 1;
        let (lr, mu) = (config.learning_rate, config.momentum);
        let (b2, eps) = (0.999, 1e-8);
        let c1 = 1.0 - mu.powi(self.steps);
        let c2 = 1.0 - f64::powi(b2, self.steps);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id).as_mut_slice();
            let m = self.first[id.0].as_mut_slice();
            match config.optimizer {
                Optimizer::Sgd => {
                    for ((pi, mi), gi) in p.iter_mut().zip(m.iter_mut()).zip(g.as_slice()) {
                        *mi = mu * *mi + gi;
                        *pi -= lr * *mi;
                    }
                }
                Optimizer::Adam => {
                    let v = self.second[id.0].as_mut_slice();
                    for (((pi, mi), vi), gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.as_slice()) {
                        *mi = mu * *mi + (1.0 - mu) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Trains on `split.train`, evaluating on `split.eval` after every epoch.
pub fn train(manifest: &Manifest, split: &ProtocolSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Contract("split has an empty train part".into()));
    }
    let (model, mut store) = Model::new(config, manifest.generator_config.image_size as usize)?;
    let train_set = load_examples(manifest, split.part(SplitPart::Train), config)?;
    let dev_set = load_examples(manifest, split.part(SplitPart::Eval), config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, SHUFFLE_STREAM]));
    let mut optimizer = OptimizerState::new(&store);
    let mut trace = LossTrace::default();
    let snapshot = |store: &ParamStore, epoch: usize, rng: &ChaCha8Rng| Checkpoint {
        config: config.clone(),
        data: manifest.generator_config.clone(),
        epoch,
        rng: RngState::capture(rng),
        params: store.clone(),
    };
    let mut best: Option<((f64, f64), Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let (mut best_acer, mut stale) = (f64::INFINITY, 0);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut cls, mut ufm, mut correct) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut out = model.batch(&store, &batch)?;
            let total = total_loss(out.cls, out.ufm, config.lambda);
            if !total.is_finite() || !out.grads.global_norm().is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} step {step}: loss {total} (cls {}, ufm {})",
                    out.cls, out.ufm
                )));
            }
            let n = batch.len() as f64;
            cls += out.cls * n;
            ufm += out.ufm * n;
            correct += out.correct;
            clip(&mut out.grads, config.grad_clip);
            optimizer.step(&mut store, &out.grads, config);
        }
        let n = train_set.len() as f64;
        let (cls, ufm) = (cls / n, ufm / n);
        let (dev_scores, dev_ce) = score_examples(&model, &store, &dev_set)?;
        let acer = dev_acer(&dev_scores)?.unwrap_or(f64::NAN);
        let record = EpochRecord {
            epoch,
            cls,
            ufm,
            total: total_loss(cls, ufm, config.lambda),
            dev_acer: acer,
            train_acc: correct as f64 / n,
        };
        log::info!(
            "epoch {epoch}: cls {:.4} ufm {:.4} train_acc {:.3} dev_acer {:.4}",
            record.cls,
            record.ufm,
            record.train_acc,
            record.dev_acer
        );
        trace.epochs.push(record);
        // NaN dev ACER (no dev set) ranks by dev loss alone
        let key = (if acer.is_nan() { 0.0 } else { acer }, dev_ce);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, snapshot(&store, epoch, &rng)));
        }
        // without a dev set there is nothing to stop on
        if acer < best_acer {
            (best_acer, stale) = (acer, 0);
        } else if !acer.is_nan() {
            stale += 1;
        }
        if config.patience > 0 && stale >= config.patience {
            log::info!("no dev improvement for {stale} epochs, stopping after epoch {epoch}");
            break;
        }
    }
    let last_epoch = trace.epochs.len();
    let last = snapshot(&store, last_epoch, &rng);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, trace })
}
