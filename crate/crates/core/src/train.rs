//! Training loop: frozen text encoder, scaled image-encoder learning rate,
//! easy-to-hard schedule advanced every step, metrics and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{batch_targets, alignment_loss_vars, LabelMap};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::contrastive::{schedule_counts, ScheduleState};
use crate::data::{Dataset, Sample};
use crate::encoders::{batch_images, Image, STRIDES};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSource};
use crate::losses::{contrast_term, seg_loss_vars, total_loss, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::optim::Optimizer;
use crate::params::{Graph, GroupPolicy, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_seg: f64,
    pub l_align: f64,
    pub l_contrast: f64,
    pub gamma: f64,
    pub total: f64,
    /// Scheduled easy and hard positives per class.
    pub n_easy: usize,
    pub n_hard: usize,
    /// Positives actually drawn across all classes.
    pub sampled_easy: usize,
    pub sampled_hard: usize,
    pub anchors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub split: String,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_val: Option<EvalReport>,
    pub text_hash_start: String,
    pub text_hash_end: String,
}

/// Files written into a run directory.
pub struct RunFiles;

impl RunFiles {
    pub const CONFIG: &'static str = "config.toml";
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const EVAL_LOG: &'static str = "eval_log.jsonl";
    pub const CHECKPOINT: &'static str = "checkpoint.bin";
    pub const CHECKPOINT_DIR: &'static str = "checkpoints";
    pub const EVAL_VAL: &'static str = "eval_val.json";
    pub const SUMMARY: &'static str = "summary.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub steps: usize,
    pub final_total: f64,
    pub val_miou: Option<f64>,
    pub text_hash_start: String,
    pub text_hash_end: String,
}

/// Builds a fresh model and parameter store with the run's group policies.
pub fn init_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    let model = Model::new(cfg.model.clone())?;
    let mut store = model.init_params(cfg.train.seed)?;
    apply_policies(cfg, &mut store);
    Ok((model, store))
}

pub fn apply_policies(cfg: &RunConfig, store: &mut ParamStore) {
    store.set_policy(
        ParamGroup::ImageEncoder,
        GroupPolicy {
            trainable: true,
            lr_mult: cfg.train.image_lr_mult,
        },
    );
    store.set_policy(
        ParamGroup::TextEncoder,
        GroupPolicy {
            trainable: !cfg.train.freeze_text_encoder,
            lr_mult: 1.0,
        },
    );
}

/// Draws batches by walking seeded shuffles of the training set.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loss values and gradients for one batch; parameters are not touched.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub record: StepRecord,
    pub grads: std::collections::BTreeMap<String, crate::tensor::Tensor>,
}

/// Forward and backward pass of the full objective on `batch`.
pub fn compute_step(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore,
    batch: &[&Sample],
    step: usize,
) -> Result<StepResult> {
    let mut g = Graph::new(store, true);
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let labels: Vec<&LabelMap> = batch.iter().map(|s| &s.labels).collect();
    let x = g.input(batch_images(&images)?);
    let out = model.encode_and_align(&mut g, x)?;
    let logits = model.decode(&mut g, &out)?;

    let (h, w) = (images[0].height(), images[0].width());
    let seg = seg_loss_vars(&mut g, logits, batch_targets(&labels, h, w))?;

    let temp = cfg.loss.temp_align;
    let scales: Vec<usize> = if cfg.loss.align_loss_all_scales && cfg.model.multi_scale {
        (0..4).collect()
    } else {
        vec![3]
    };
    let mut align_terms = Vec::with_capacity(scales.len());
    for &i in &scales {
        let (hs, ws) = (h / STRIDES[i], w / STRIDES[i]);
        let t = batch_targets(&labels, hs, ws);
        // A coarse map can fall entirely on background.
        let term = if t.iter().all(Option::is_none) {
            g.input(Tensor::scalar(0.0))
        } else {
            alignment_loss_vars(&mut g, out.scores[i], t, temp)?
        };
        align_terms.push(term);
    }
    let mut align = align_terms[0];
    for &t in &align_terms[1..] {
        align = g.tape.add(align, t)?;
    }
    let align = g.tape.scale(align, 1.0 / align_terms.len() as f64);

    let ccfg = cfg.contrastive();
    let state = ScheduleState {
        step,
        total_steps: cfg.train.steps,
        cap: ccfg.positives_cap,
    };
    let (n_easy, n_hard) = schedule_counts(state);
    let contrast = contrast_term(
        &mut g,
        out.finest,
        &labels,
        state,
        &ccfg,
        step_seed(cfg.train.seed, step),
    )?;

    let weights = LossWeights {
        gamma: cfg.loss.gamma,
    };
    let breakdown = total_loss(
        g.tape.value(seg).item(),
        g.tape.value(align).item(),
        g.tape.value(contrast.loss).item(),
        weights,
        step,
    )?;

    let mut total = g.tape.add(seg, align)?;
    if weights.gamma != 0.0 {
        let c = g.tape.scale(contrast.loss, weights.gamma);
        total = g.tape.add(total, c)?;
    }
    let grads = g.tape.backward(total);
    let grads = g.param_grads(&grads);
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("gradient of '{name}' is not finite"),
        });
    }

    let record = StepRecord {
        step,
        l_seg: breakdown.seg,
        l_align: breakdown.align,
        l_contrast: breakdown.contrast,
        gamma: breakdown.gamma,
        total: breakdown.total,
        n_easy,
        n_hard,
        sampled_easy: contrast.n_easy,
        sampled_hard: contrast.n_hard,
        anchors: contrast.anchors,
    };
    Ok(StepResult {
        breakdown,
        record,
        grads,
    })
}

fn append_json<T: Serialize>(file: &mut Option<std::fs::File>, v: &T) -> Result<()> {
    if let Some(f) = file {
        serde_json::to_writer(&mut *f, v)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains on `data.train`. When `out` is given, the run directory receives
/// the echoed config, metrics and evaluation logs, checkpoints and a final
/// validation report.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let (model, mut store) = init_model(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer());
    let mut sampler = BatchSampler::new(data.train.len(), cfg.train.seed);
    let text_hash_start = store.group_hash(ParamGroup::TextEncoder);

    let (mut metrics, mut eval_log) = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(RunFiles::CONFIG), cfg.to_toml())?;
            (
                Some(std::fs::File::create(dir.join(RunFiles::METRICS))?),
                Some(std::fs::File::create(dir.join(RunFiles::EVAL_LOG))?),
            )
        }
        None => (None, None),
    };

    let steps = cfg.train.steps;
    let mut records = Vec::with_capacity(steps);
    let mut evals = Vec::new();
    let started = std::time::Instant::now();
    for step in 0..steps {
        let idx = sampler.next(cfg.train.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
        let r = compute_step(cfg, &model, &store, &batch, step)?;
        opt.step(&mut store, &r.grads, cfg.train.lr)?;
        append_json(&mut metrics, &r.record)?;
        if step % 50 == 0 || step + 1 == steps {
            log::info!(
                "step {step}/{steps} total {:.4} seg {:.4} align {:.4} contrast {:.4} ({:.1}s)",
                r.breakdown.total,
                r.breakdown.seg,
                r.breakdown.align,
                r.breakdown.contrast,
                started.elapsed().as_secs_f64()
            );
        }
        records.push(r.record);

        let done = step + 1;
        let every = cfg.train.eval_every;
        if every > 0 && done % every == 0 && done < steps && !data.val.is_empty() {
            let rep = evaluate(
                &model,
                &store,
                &data.val,
                "val",
                EvalSource::Decoder,
                cfg.train.eval_batch_size,
            )?;
            let rec = EvalRecord {
                step: done,
                split: "val".into(),
                miou: rep.miou,
            };
            append_json(&mut eval_log, &rec)?;
            evals.push(rec);
        }
        let every = cfg.train.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && done % every == 0 && done < steps {
                let p: PathBuf = dir
                    .join(RunFiles::CHECKPOINT_DIR)
                    .join(format!("step-{done}.bin"));
                checkpoint::save(&p, cfg, &store, done)?;
            }
        }
    }

    let final_val = if data.val.is_empty() {
        None
    } else {
        let rep = evaluate(
            &model,
            &store,
            &data.val,
            "val",
            EvalSource::Decoder,
            cfg.train.eval_batch_size,
        )?;
        let rec = EvalRecord {
            step: steps,
            split: "val".into(),
            miou: rep.miou,
        };
        append_json(&mut eval_log, &rec)?;
        evals.push(rec);
        Some(rep)
    };
    let text_hash_end = store.group_hash(ParamGroup::TextEncoder);

    if let Some(dir) = out {
        checkpoint::save(&dir.join(RunFiles::CHECKPOINT), cfg, &store, steps)?;
        if let Some(rep) = &final_val {
            std::fs::write(dir.join(RunFiles::EVAL_VAL), serde_json::to_string_pretty(rep)?)?;
        }
        let summary = RunSummary {
            name: cfg.run.name.clone(),
            steps,
            final_total: records.last().map(|r| r.total).unwrap_or(0.0),
            val_miou: final_val.as_ref().map(|r| r.miou),
            text_hash_start: text_hash_start.clone(),
            text_hash_end: text_hash_end.clone(),
        };
        std::fs::write(
            dir.join(RunFiles::SUMMARY),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }

    Ok(TrainOutcome {
        model,
        store,
        records,
        evals,
        final_val,
        text_hash_start,
        text_hash_end,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_eval_log(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.num_classes = 3;
        c.model.embed_dim = 8;
        c.model.global_dim = 8;
        c.model.text_heads = 2;
        c.model.context_len = 2;
        c.model.decoder_dim = 4;
        c.data.image_size = 32;
        c.data.train_images = 4;
        c.data.val_images = 2;
        c.train.steps = 4;
        c.train.batch_size = 2;
        c
    }

    #[test]
    fn sampler_covers_every_image_per_epoch() {
        let mut s = BatchSampler::new(5, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next(9).len(), 5);
    }

    #[test]
    fn short_run_keeps_text_frozen_and_logs_every_step() {
        let cfg = tiny();
        let data = generate_dataset(&cfg.dataset_spec()).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.text_hash_start, out.text_hash_end);
        for r in &out.records {
            assert_eq!(r.total, r.l_seg + r.l_align + r.gamma * r.l_contrast);
            assert_eq!(r.n_easy + r.n_hard, 5);
        }
        assert!(out.final_val.is_some());
    }

    #[test]
    fn unfrozen_text_encoder_changes() {
        let mut cfg = tiny();
        cfg.train.freeze_text_encoder = false;
        let data = generate_dataset(&cfg.dataset_spec()).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert_ne!(out.text_hash_start, out.text_hash_end);
    }
}
