//! Pixel predictions and mIoU over a pooled confusion matrix.

use serde::{Deserialize, Serialize};

use crate::alignment::IGNORE;
use crate::data::Sample;
use crate::encoders::{batch_images, Image};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Graph, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSource {
    #[default]
    Decoder,
    /// Argmax of the finest alignment map, upsampled to full resolution.
    RawAlignment,
}

impl EvalSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSource::Decoder => "decoder",
            EvalSource::RawAlignment => "raw-alignment",
        }
    }
}

impl std::fmt::Display for EvalSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(EvalSource::Decoder),
            "raw-alignment" | "raw_alignment" | "raw" => Ok(EvalSource::RawAlignment),
            other => Err(Error::UnknownVariant {
                kind: "evaluation source",
                value: other.to_string(),
            }),
        }
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds one image; ignored ground-truth pixels are skipped.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE || (t as usize) >= self.classes || (p as usize) >= self.classes {
                continue;
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
    }

    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
                let pred: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
                (gt > 0).then(|| tp as f64 / (gt + pred - tp) as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub source: EvalSource,
    pub images: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Predicted class per pixel for each image, row-major.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    images: &[&Image],
    source: EvalSource,
) -> Result<Vec<Vec<u8>>> {
    let mut g = Graph::new(store, false);
    let x = g.input(batch_images(images)?);
    let out = model.encode_and_align(&mut g, x)?;
    let logits = match source {
        EvalSource::Decoder => model.decode(&mut g, &out)?,
        EvalSource::RawAlignment => model.raw_alignment_logits(&mut g, &out)?,
    };
    let v = g.tape.value(logits);
    let k = v.last_dim();
    let per_image = v.numel() / images.len();
    Ok(v.data()
        .chunks(per_image)
        .map(|img| {
            img.chunks(k)
                .map(|row| {
                    let mut best = 0;
                    for (i, &s) in row.iter().enumerate() {
                        if s > row[best] {
                            best = i;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Evaluates a split in fixed-size batches so results do not depend on
/// anything but the parameters and the data.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    split: &str,
    source: EvalSource,
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let preds = predict(model, store, &imgs, source)?;
        for (p, s) in preds.iter().zip(chunk) {
            cm.add(p, &s.labels.labels);
        }
    }
    let k = cm.classes;
    let correct: u64 = (0..k).map(|c| cm.counts[c * k + c]).sum();
    let total: u64 = cm.counts.iter().sum();
    Ok(EvalReport {
        split: split.to_string(),
        source,
        images: samples.len(),
        per_class_iou: cm.iou(),
        miou: cm.mean_iou(),
        pixel_accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
    })
}
