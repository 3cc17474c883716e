//! Mini-batch training and inference over in-memory samples.
//!
//! Every image of a batch gets its own graph; per-image gradients are summed
//! in batch order, so results do not depend on the worker count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::augment::{augment, AugmentOp};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{report, Detection, EvalConfig, EvalReport, GroundTruthBox};
use crate::matching::LossParts;
use crate::model::{DenoiseNoise, Detector, LossReport, Targets};
use crate::optim::{scheduled_lr, AdamW, AdamWConfig};
use crate::param::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Real;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "PDTR_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub denoise: DenoiseNoise,
    /// Probability of applying one random augmentation to a training image.
    pub augment_prob: f64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            lr_drop_epoch: 40,
            lr_drop_factor: 0.1,
            denoise: DenoiseNoise::default(),
            augment_prob: 0.5,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::Config("augment_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub total: f64,
    pub matched: LossParts,
    pub denoise: LossParts,
    pub encoder: LossParts,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "epoch,steps,lr,total,cls,l1,giou,dn_cls,dn_l1,dn_giou,enc_cls,enc_l1,enc_giou,grad_norm";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{:e}", self.epoch, self.steps, self.lr);
        for v in [
            self.total,
            self.matched.class,
            self.matched.l1,
            self.matched.giou,
            self.denoise.class,
            self.denoise.l1,
            self.denoise.giou,
            self.encoder.class,
            self.encoder.l1,
            self.encoder.giou,
            self.grad_norm,
        ] {
            let _ = write!(s, ",{v:.6}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best: ParamStore<T>,
}

/// Thread pool honouring the worker-count variable.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Normalised targets of a sample relative to the detector frame.
pub fn targets(model: &Detector, s: &Sample) -> Targets {
    let (fh, fw) = model.frame(s.image.height, s.image.width);
    Targets {
        boxes: s.record.normalised_boxes(fw, fh),
        labels: s.record.labels(),
    }
}

struct ImageResult<T> {
    grads: Vec<(usize, Vec<T>)>,
    report: LossReport,
}

fn image_step<T: Real>(
    model: &Detector,
    store: &ParamStore<T>,
    sample: &Sample,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ImageResult<T>> {
    let mut rng = SeededRng::new(seed);
    let sample = if cfg.augment_prob > 0.0 && rng.bernoulli(cfg.augment_prob) {
        let op = AugmentOp::random(&mut rng);
        let (image, anns) = augment(&sample.image, &sample.record.annotations, op);
        let mut record = sample.record.clone();
        record.width = image.width;
        record.height = image.height;
        record.annotations = anns;
        Sample { image, record }
    } else {
        sample.clone()
    };
    let t = targets(model, &sample);
    let id = sample.record.id;
    let numeric = |e: Error| match e {
        Error::Numeric(_) | Error::DegenerateSlice { .. } => {
            Error::Numeric(format!("{e} for image {id} (batch seed {seed})"))
        }
        e => e,
    };
    let mut g = Graph::new();
    let out = model
        .forward(
            &mut g,
            store,
            &sample.image.to_tensor(),
            Some((&t, cfg.denoise, &mut rng)),
        )
        .map_err(numeric)?;
    let (loss, report) = model.loss(&mut g, &out, &t).map_err(numeric)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss for image {id} (batch seed {seed})"
        )));
    }
    g.check().map_err(numeric)?;
    let grads = g.backward(loss)?;
    let grads = g
        .params()
        .filter_map(|(pid, node)| grads.get(node).map(|v| (pid, v.to_vec())))
        .collect();
    Ok(ImageResult { grads, report })
}

fn add_parts(a: &mut LossParts, b: LossParts, w: f64) {
    a.class += b.class * w;
    a.l1 += b.l1 * w;
    a.giou += b.giou * w;
}

/// Trains `store` in place; `on_epoch` sees each epoch's log as it completes.
pub fn train<T: Real + Send + Sync>(
    model: &Detector,
    store: &mut ParamStore<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let pool = thread_pool()?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), store);
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut steps = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.optimizer.lr, epoch, cfg.lr_drop_epoch, cfg.lr_drop_factor);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle = SeededRng::derive(seed, 0x5348_0000 + epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below(i + 1));
        }
        let mut entry = EpochLog {
            epoch,
            lr,
            ..Default::default()
        };
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch_seed = SeededRng::derive(seed, ((epoch as u64) << 32) | steps as u64).next_u64();
            let results: Vec<Result<ImageResult<T>>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(i, &idx)| {
                        let s = SeededRng::derive(batch_seed, i as u64).next_u64();
                        image_step(model, store, &samples[idx], cfg, s)
                    })
                    .collect()
            });
            store.zero_grad();
            let scale = T::of(1.0 / batch.len() as f64);
            for r in results {
                let r = r?;
                for (pid, g) in r.grads {
                    for (d, s) in store.get_mut(pid).grad.iter_mut().zip(g) {
                        *d += s * scale;
                    }
                }
                entry.total += r.report.total;
                add_parts(&mut entry.matched, r.report.matched, 1.0);
                add_parts(&mut entry.denoise, r.report.denoise, 1.0);
                add_parts(&mut entry.encoder, r.report.encoder, 1.0);
                seen += 1;
            }
            entry.grad_norm += opt.step(store, lr);
            entry.steps += 1;
            steps += 1;
        }
        if entry.steps == 0 {
            break 'epochs;
        }
        let w = 1.0 / seen as f64;
        entry.total *= w;
        for p in [&mut entry.matched, &mut entry.denoise, &mut entry.encoder] {
            let v = *p;
            *p = LossParts::default();
            add_parts(p, v, w);
        }
        entry.grad_norm /= entry.steps as f64;
        on_epoch(&entry);
        if entry.total < best.0 {
            best = (entry.total, epoch, store.clone());
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        steps,
        best_epoch: best.1,
        best: best.2,
    })
}

/// Detections for every sample, in sample order.
pub fn predict<T: Real + Send + Sync>(
    model: &Detector,
    store: &ParamStore<T>,
    samples: &[Sample],
    max_dets: usize,
) -> Result<Vec<Detection>> {
    let pool = thread_pool()?;
    let per: Vec<Result<Vec<Detection>>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let out = model.forward(&mut g, store, &s.image.to_tensor(), None)?;
                g.check()?;
                Ok(model.detections(&g, &out, s.record.id, (s.image.height, s.image.width), max_dets))
            })
            .collect()
    });
    let mut all = Vec::new();
    for p in per {
        all.extend(p?);
    }
    Ok(all)
}

pub fn ground_truth(samples: &[Sample]) -> Vec<GroundTruthBox> {
    samples
        .iter()
        .flat_map(|s| {
            s.record.annotations.iter().map(|a| GroundTruthBox {
                image_id: s.record.id,
                class_id: a.class_id,
                bbox: a.bbox,
            })
        })
        .collect()
}

/// Predicts and scores `samples`.
pub fn evaluate_model<T: Real + Send + Sync>(
    model: &Detector,
    store: &ParamStore<T>,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<(Vec<Detection>, EvalReport)> {
    let dets = predict(model, store, samples, cfg.max_detections)?;
    let r = report(&dets, &ground_truth(samples), cfg)?;
    Ok((dets, r))
}
