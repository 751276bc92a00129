//! Segmentation loss, the combined objective, and the contrastive term on
//! a tape.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::alignment::LabelMap;
use crate::autograd::Var;
use crate::contrastive::{
    anchor_terms, info_nce, partition_easy_hard, points_matrix, sample_points, ContrastiveConfig,
    ScheduleState,
};
use crate::alignment::AlignmentMap;
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub align: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub total: f64,
}

/// `total = seg + align + gamma * contrast`; errors on any non-finite part.
pub fn total_loss(seg: f64, align: f64, contrast: f64, w: LossWeights, step: usize) -> Result<LossBreakdown> {
    let total = seg + align + w.gamma * contrast;
    for (name, v) in [
        ("segmentation", seg),
        ("alignment", align),
        ("contrastive", contrast),
        ("gamma", w.gamma),
        ("total", total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{name} loss is {v}"),
            });
        }
    }
    Ok(LossBreakdown {
        seg,
        align,
        contrast,
        gamma: w.gamma,
        total,
    })
}

/// Mean softmax cross-entropy of `(..., K)` logits over non-ignored pixels.
pub fn seg_loss_vars(g: &mut Graph, logits: Var, targets: Arc<Vec<Option<usize>>>) -> Result<Var> {
    g.tape.cross_entropy(logits, targets, 1.0)
}

/// Value-level segmentation loss for one image, logits `(H, W, K)`.
pub fn seg_loss(logits: &Tensor, labels: &LabelMap) -> Result<f64> {
    if logits.rank() != 3 || logits.shape()[0] != labels.height || logits.shape()[1] != labels.width {
        return Err(Error::DimensionMismatch(format!(
            "logits {:?} vs labels {}x{}",
            logits.shape(),
            labels.height,
            labels.width
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let l = g.input(logits.clone());
    let v = seg_loss_vars(&mut g, l, Arc::new(labels.targets()))?;
    Ok(g.tape.value(v).item())
}

/// Result of the contrastive term on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ContrastTerm {
    pub loss: Var,
    pub anchors: usize,
    pub n_easy: usize,
    pub n_hard: usize,
}

/// Samples alignment points from `scores` `(B, h, w, K)`, evaluates the
/// InfoNCE objective on them and records it on the tape so gradients reach
/// the sampled score vectors.
pub fn contrast_term(
    g: &mut Graph,
    scores: Var,
    labels: &[&LabelMap],
    state: ScheduleState,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<ContrastTerm> {
    let shape = g.tape.shape(scores).to_vec();
    let (b, h, w, k) = (shape[0], shape[1], shape[2], shape[3]);
    let value = g.tape.value(scores);
    let maps: Vec<AlignmentMap> = (0..b)
        .map(|i| {
            Tensor::new(
                vec![h, w, k],
                value.data()[i * h * w * k..(i + 1) * h * w * k].to_vec(),
            )
            .map(AlignmentMap)
        })
        .collect::<Result<_>>()?;
    let owned: Vec<LabelMap> = labels.iter().map(|l| (*l).clone()).collect();
    let (easy, hard) = partition_easy_hard(&maps, &owned)?;
    let sets = sample_points(&easy, &hard, state, cfg, seed);
    let (rows, terms) = anchor_terms(&sets);
    let (n_easy, n_hard) = sets.iter().flat_map(|s| &s.positives).fold((0, 0), |(e, hd), p| {
        if p.easy {
            (e + 1, hd)
        } else {
            (e, hd + 1)
        }
    });
    if terms.is_empty() {
        let zero = g.input(Tensor::scalar(0.0));
        return Ok(ContrastTerm {
            loss: zero,
            anchors: 0,
            n_easy,
            n_hard,
        });
    }
    let flat: Vec<usize> = rows.iter().map(|p| p.image * h * w + p.pixel).collect();
    let gathered = g
        .tape
        .gather(scores, layout::select_rows(&flat, k), &[rows.len(), k])?;
    let m = points_matrix(&rows, k);
    let r = info_nce(&m, &terms, cfg.temperature, cfg.cosine);
    let loss = g.tape.custom_scalar(&[gathered], r.loss, vec![r.grad])?;
    Ok(ContrastTerm {
        loss,
        anchors: r.anchors,
        n_easy,
        n_hard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::IGNORE;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn total_examples() {
        let b = total_loss(1.0, 2.0, 4.0, LossWeights { gamma: 0.5 }, 0).unwrap();
        assert_eq!(b.total, 5.0);
        let b = total_loss(1.0, 2.0, 4.0, LossWeights { gamma: 0.0 }, 0).unwrap();
        assert_eq!(b.total, 3.0);
        assert_eq!(LossWeights::default().gamma, 0.5);
        let e = total_loss(f64::NAN, 0.0, 0.0, LossWeights::default(), 7).unwrap_err();
        assert!(e.is_numeric());
    }

    #[test]
    fn seg_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let labels = LabelMap::new(2, 2, vec![1, IGNORE, 0, 2]).unwrap();
        let mut expect = 0.0;
        for (p, &l) in labels.labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let row = logits.row(p);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[l as usize].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((seg_loss(&logits, &labels).unwrap() - expect).abs() < 1e-12);

        let uniform = Tensor::zeros(&[2, 2, 3]);
        assert!((seg_loss(&uniform, &labels).unwrap() - 3f64.ln()).abs() < 1e-12);

        let mut perfect = Tensor::zeros(&[1, 2, 3]);
        perfect.data_mut()[1] = 60.0;
        perfect.data_mut()[5] = 60.0;
        let l = LabelMap::new(1, 2, vec![1, 2]).unwrap();
        assert!(seg_loss(&perfect, &l).unwrap() < 1e-20);

        let ignored = LabelMap::new(1, 2, vec![IGNORE, IGNORE]).unwrap();
        assert!(matches!(seg_loss(&perfect, &ignored), Err(Error::AllIgnored)));
    }

    #[test]
    fn contrast_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let l0 = LabelMap::new(2, 3, vec![0, 0, 1, 1, 2, IGNORE]).unwrap();
        let l1 = LabelMap::new(2, 3, vec![0, 1, 1, 2, 2, 0]).unwrap();
        let state = ScheduleState {
            step: 3,
            total_steps: 10,
            cap: 5,
        };
        let cfg = ContrastiveConfig {
            temperature: 0.5,
            ..Default::default()
        };
        let store = ParamStore::new();
        let rep = check_gradient(
            &[scores],
            0,
            |tape, v| {
                let mut g = Graph::from_tape(&store, std::mem::take(tape), true);
                let t = contrast_term(&mut g, v[0], &[&l0, &l1], state, &cfg, 9).unwrap();
                *tape = g.into_tape();
                t.loss
            },
            GradCheck::default(),
        );
        assert!(rep.max_rel_err <= 1e-3, "{}", rep.max_rel_err);
    }
}
