//! Adam training loop and the deterministic evaluation runner.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{load_manifest, load_study, write_atomic, LoadedStudy};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::linalg::Mat;
use crate::loss::{composite_loss_graph, LossBreakdown, LossWeights};
use crate::metrics::{self, MetricsReport, RocPoint, ViewDetections};
use crate::model::{predict, Model, StudyOutputs};
use crate::params::ParamStore;

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| {
                    let p = store.get(id);
                    Mat::zeros(p.rows, p.cols)
                })
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Loss, gradients and outputs of one study.
pub struct StudyStep {
    pub loss: LossBreakdown,
    pub grads: Vec<Option<Mat>>,
    pub outputs: StudyOutputs,
}

pub fn study_step(model: &Model, study: &LoadedStudy, weights: &LossWeights) -> Result<StudyStep> {
    let mut g = Graph::new(&model.params);
    let vars = model
        .arch
        .study_forward(&mut g, &study.images, None)
        .map_err(|e| with_study(&study.record.study_id, e))?;
    let (root, loss) = composite_loss_graph(&mut g, &vars, study.record.label, weights)?;
    let outputs = vars.outputs(&g);
    let grads = if loss.total.is_finite() {
        g.backward(root).params
    } else {
        Vec::new()
    };
    Ok(StudyStep {
        loss,
        grads,
        outputs,
    })
}

fn with_study(id: &str, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("study {id}: {m}")),
        other => other,
    }
}

#[cfg(feature = "parallel")]
fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Sums per-study gradients in batch order.
fn accumulate(total: &mut Vec<Option<Mat>>, grads: Vec<Option<Mat>>) {
    if total.is_empty() {
        *total = grads;
        return;
    }
    for (t, g) in total.iter_mut().zip(grads) {
        match (t.as_mut(), g) {
            (Some(t), Some(g)) => t.add_assign(&g),
            (None, Some(g)) => *t = Some(g),
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_auc: Option<f64>,
    pub train_acc: f64,
    pub test: Option<MetricsReport>,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Path of the best checkpoint when an output directory was given.
    pub best_checkpoint: Option<PathBuf>,
}

/// Loads every study of a manifest, failing on the first unreadable one.
pub fn load_split(manifest: &Path, size: (usize, usize)) -> Result<Vec<LoadedStudy>> {
    let records = load_manifest(manifest)?;
    let loaded = map_ordered(&records, |r| load_study(r, size));
    loaded.into_iter().collect()
}

/// Loads a manifest, skipping studies whose views cannot be read.
pub fn load_split_lenient(manifest: &Path, size: (usize, usize)) -> Result<Vec<LoadedStudy>> {
    let records = load_manifest(manifest)?;
    let loaded = map_ordered(&records, |r| load_study(r, size));
    let mut out = Vec::with_capacity(loaded.len());
    for (r, l) in records.iter().zip(loaded) {
        match l {
            Ok(s) => out.push(s),
            Err(e) => warn!("skipping study {}: {e}", r.study_id),
        }
    }
    Ok(out)
}

/// Trains from the manifests named in the config, writing the log and
/// checkpoints under `output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let size = cfg.data.image_size;
    let train_path = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_manifest is required for training".into()))?;
    let train = load_split(train_path, size)?;
    let test = match &cfg.data.test_manifest {
        Some(p) => Some(load_split(p, size)?),
        None => None,
    };
    train_on(cfg, &train, test.as_deref(), Some(&cfg.output_dir))
}

pub fn train_on(
    cfg: &RunConfig,
    train: &[LoadedStudy],
    test: Option<&[LoadedStudy]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid!("the training split is empty"));
    }
    let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
    let o = &cfg.optim;
    let mut adam = Adam::new(&model.params, o.learning_rate, o.beta1, o.beta2, o.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut history: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut best_checkpoint = None;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    for epoch in 0..o.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut scores = Vec::with_capacity(train.len());
        let mut labels = Vec::with_capacity(train.len());
        for batch in order.chunks(o.batch_size) {
            let studies: Vec<&LoadedStudy> = batch.iter().map(|&i| &train[i]).collect();
            let steps = map_ordered(&studies, |s| study_step(&model, s, &cfg.loss));
            let mut total = Vec::new();
            let mut diverged = Vec::new();
            for (s, step) in studies.iter().zip(steps) {
                let step = step?;
                if !step.loss.total.is_finite() {
                    diverged.push(s.record.study_id.clone());
                    continue;
                }
                sum.add(&step.loss);
                scores.push(step.outputs.fusion_prob());
                labels.push(s.record.label);
                accumulate(&mut total, step.grads);
            }
            if !diverged.is_empty() {
                return Err(Error::Diverged {
                    study_ids: studies.iter().map(|s| s.record.study_id.clone()).collect(),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for g in total.iter_mut().flatten() {
                g.scale(inv);
            }
            adam.step(&mut model.params, &total);
        }
        let loss = sum.scaled(1.0 / train.len() as f64);
        let train_auc = metrics::auc(&scores, &labels).ok();
        let train_acc = metrics::confusion(&scores, &labels, cfg.eval.threshold)?.accuracy();
        let test_report = match test {
            Some(t) if !t.is_empty() => {
                Some(evaluate(&model, t, cfg.eval.threshold, cfg.eval.tau)?.report)
            }
            _ => None,
        };
        let log = EpochLog {
            epoch,
            loss,
            train_auc,
            train_acc,
            test: test_report,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!("{}", serde_json::to_string(&log).unwrap_or_default());
        let selection_auc = log
            .test
            .as_ref()
            .and_then(|r| r.auc)
            .or(log.train_auc)
            .unwrap_or(f64::NEG_INFINITY);
        let improved = best.map_or(true, |(b, _)| selection_auc > b);
        let stop = match (&log.test, o.stop_at_auc) {
            (Some(r), Some(target)) => {
                r.auc.is_some_and(|a| a >= target)
                    && o.stop_at_mdr.map_or(true, |m| r.mdr.is_some_and(|v| v <= m))
            }
            _ => false,
        };
        history.push(log);
        if improved {
            best = Some((selection_auc, epoch));
        }
        if let Some(d) = out_dir {
            let lines: String = history
                .iter()
                .map(|l| serde_json::to_string(l).expect("log serialises") + "\n")
                .collect();
            write_atomic(&d.join("train_log.jsonl"), lines.as_bytes())?;
            let meta = CheckpointMeta {
                config: cfg.clone(),
                epoch,
                history: history
                    .iter()
                    .map(|l| serde_json::to_value(l).expect("log serialises"))
                    .collect(),
            };
            checkpoint::save(&d.join("last.ckpt"), &model, &meta)?;
            if improved {
                let p = d.join("best.ckpt");
                checkpoint::save(&p, &model, &meta)?;
                best_checkpoint = Some(p);
            }
        }
        if stop {
            info!("stopping after epoch {epoch}: targets reached");
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.map_or(0, |b| b.1),
        best_checkpoint,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub study_id: String,
    pub label: u8,
    pub fusion_prob: f64,
    pub global_prob: f64,
    pub local_logit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub roc: Option<Vec<RocPoint>>,
    pub predictions: Vec<Prediction>,
    pub outputs: Vec<StudyOutputs>,
}

impl Evaluation {
    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("study_id,label,fusion_prob,global_prob,local_logit\n");
        for p in &self.predictions {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.study_id, p.label, p.fusion_prob, p.global_prob, p.local_logit
            ));
        }
        s
    }

    /// Writes `metrics.json`, `roc.csv` (when defined) and `predictions.csv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let files = [
            ("metrics.json", Some(self.report.to_json())),
            ("roc.csv", self.roc.as_ref().map(|r| metrics::roc_csv(r))),
            ("predictions.csv", Some(self.predictions_csv())),
        ];
        for (name, body) in files {
            if let Some(b) = body {
                write_atomic(&out_dir.join(name), b.as_bytes())?;
            }
        }
        Ok(())
    }
}

/// Deterministic forward over every study. Scores are `sigmoid(fusion_logit)`.
pub fn evaluate(
    model: &Model,
    studies: &[LoadedStudy],
    threshold: f64,
    tau: f64,
) -> Result<Evaluation> {
    if studies.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let outs = map_ordered(studies, |s| {
        predict(model, &s.images).map_err(|e| with_study(&s.record.study_id, e))
    });
    let outputs: Vec<StudyOutputs> = outs.into_iter().collect::<Result<_>>()?;
    let scores: Vec<f64> = outputs.iter().map(StudyOutputs::fusion_prob).collect();
    let labels: Vec<u8> = studies.iter().map(|s| s.record.label).collect();
    let mut detections = Vec::new();
    for (s, o) in studies.iter().zip(&outputs) {
        if !s.has_boxes() {
            continue;
        }
        for (v, sel) in o.patch_selections.iter().enumerate() {
            detections.push(ViewDetections {
                lesions: s.boxes[v].clone(),
                patches: sel.boxes.clone(),
            });
        }
    }
    let report = MetricsReport::compute(&scores, &labels, threshold, &detections, tau)?;
    let roc = metrics::roc_curve(&scores, &labels).ok();
    let predictions = studies
        .iter()
        .zip(&outputs)
        .map(|(s, o)| Prediction {
            study_id: s.record.study_id.clone(),
            label: s.record.label,
            fusion_prob: o.fusion_prob(),
            global_prob: o.global_prob,
            local_logit: o.local_logit,
        })
        .collect();
    Ok(Evaluation {
        report,
        roc,
        predictions,
        outputs,
    })
}
