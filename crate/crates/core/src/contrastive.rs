//! Align-guided contrastive learning over alignment points.
//!
//! Every labelled pixel of a score map is an alignment point: its `K`
//! scores plus its class. Points whose argmax matches the label are easy,
//! the rest are hard. Per class, a small positive sample is drawn with an
//! easy-to-hard budget that shifts linearly over training, and each sampled
//! positive acts as an anchor in an InfoNCE term against the other
//! positives and a shared set of negatives from other classes.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentMap, LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPoint {
    pub scores: Vec<f64>,
    pub label: usize,
    pub easy: bool,
    /// Index of the image within the batch.
    pub image: usize,
    /// Flat pixel index within that image's score map.
    pub pixel: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Splits every non-ignored pixel of the batch into easy or hard points.
/// Labels are resized to each map's resolution first.
pub fn partition_easy_hard(
    maps: &[AlignmentMap],
    labels: &[LabelMap],
) -> Result<(Vec<AlignmentPoint>, Vec<AlignmentPoint>)> {
    if maps.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} score maps vs {} label maps",
            maps.len(),
            labels.len()
        )));
    }
    let (mut easy, mut hard) = (Vec::new(), Vec::new());
    for (image, (a, l)) in maps.iter().zip(labels).enumerate() {
        let l = l.resize_nearest(a.height(), a.width());
        for (pixel, &lab) in l.labels.iter().enumerate() {
            if lab == IGNORE {
                continue;
            }
            let scores = a.0.row(pixel).to_vec();
            let label = lab as usize;
            let is_easy = argmax(&scores) == label;
            let p = AlignmentPoint {
                scores,
                label,
                easy: is_easy,
                image,
                pixel,
            };
            if is_easy {
                easy.push(p);
            } else {
                hard.push(p);
            }
        }
    }
    Ok((easy, hard))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleState {
    pub step: usize,
    pub total_steps: usize,
    pub cap: usize,
}

/// `(n_easy, n_hard)` with `n_hard = floor(step * cap / total_steps)`.
pub fn schedule_counts(s: ScheduleState) -> (usize, usize) {
    let t = s.step.min(s.total_steps);
    let n_hard = if s.total_steps == 0 {
        s.cap
    } else {
        ((t as u128 * s.cap as u128) / s.total_steps as u128) as usize
    };
    (s.cap - n_hard, n_hard)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    Random,
    #[default]
    EasyToHard,
}

impl SamplingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::Random => "random",
            SamplingStrategy::EasyToHard => "easy-to-hard",
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingStrategy::Random),
            "easy-to-hard" | "easy_to_hard" => Ok(SamplingStrategy::EasyToHard),
            other => Err(Error::UnknownVariant {
                kind: "sampling strategy",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub positives_cap: usize,
    pub negatives_cap: usize,
    pub strategy: SamplingStrategy,
    /// Use cosine similarity between points instead of raw dot products.
    pub cosine: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            positives_cap: 5,
            negatives_cap: 64,
            strategy: SamplingStrategy::EasyToHard,
            cosine: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("contrast_temperature", "must be positive and finite"));
        }
        if self.positives_cap == 0 {
            return Err(Error::config("positives_per_class", "must be at least 1"));
        }
        if self.negatives_cap == 0 {
            return Err(Error::config("negatives_cap", "must be at least 1"));
        }
        Ok(())
    }
}

/// Sampled positives and negatives for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub class: usize,
    pub positives: Vec<AlignmentPoint>,
    pub negatives: Vec<AlignmentPoint>,
}

fn draw<'a>(pool: &[&'a AlignmentPoint], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a AlignmentPoint> {
    let n = n.min(pool.len());
    let mut picks: Vec<usize> = index::sample(rng, pool.len(), n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| pool[i]).collect()
}

/// Draws one [`SampleSet`] per class present in the batch, in class order.
pub fn sample_points(
    easy: &[AlignmentPoint],
    hard: &[AlignmentPoint],
    state: ScheduleState,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Vec<SampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: std::collections::BTreeSet<usize> =
        easy.iter().chain(hard).map(|p| p.label).collect();
    let cap = cfg.positives_cap;
    let (_, n_hard) = schedule_counts(ScheduleState { cap, ..state });

    let mut out = Vec::with_capacity(classes.len());
    for &k in &classes {
        let e: Vec<&AlignmentPoint> = easy.iter().filter(|p| p.label == k).collect();
        let h: Vec<&AlignmentPoint> = hard.iter().filter(|p| p.label == k).collect();
        let positives: Vec<AlignmentPoint> = match cfg.strategy {
            SamplingStrategy::Random => {
                let all: Vec<&AlignmentPoint> = e.iter().chain(&h).copied().collect();
                draw(&all, cap, &mut rng).into_iter().cloned().collect()
            }
            SamplingStrategy::EasyToHard => {
                let total = cap.min(e.len() + h.len());
                // A shortfall in either pool is taken from the other one.
                let take_e = (total - n_hard.min(h.len())).min(e.len());
                let take_h = total - take_e;
                let mut p: Vec<AlignmentPoint> =
                    draw(&e, take_e, &mut rng).into_iter().cloned().collect();
                p.extend(draw(&h, take_h, &mut rng).into_iter().cloned());
                p
            }
        };
        let others: Vec<&AlignmentPoint> = easy
            .iter()
            .chain(hard)
            .filter(|p| p.label != k)
            .collect();
        let negatives = draw(&others, cfg.negatives_cap, &mut rng)
            .into_iter()
            .cloned()
            .collect();
        out.push(SampleSet {
            class: k,
            positives,
            negatives,
        });
    }
    out
}

/// One InfoNCE anchor with indices into a point matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTerm {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Loss value, gradient with respect to every point row, and anchor count.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad: Tensor,
    pub anchors: usize,
}

fn similarity_rows(points: &Tensor, cosine: bool) -> (Tensor, Vec<f64>) {
    if !cosine {
        return (points.clone(), vec![1.0; points.numel() / points.last_dim().max(1)]);
    }
    let k = points.last_dim();
    let mut out = points.clone();
    let mut norms = Vec::new();
    for row in out.data_mut().chunks_mut(k) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// InfoNCE over explicit anchor terms. `points` is `(M, K)`.
///
/// Each anchor contributes the mean over its positives `q+` of
/// `-log(e^{s+} / (e^{s+} + sum_{q-} e^{s-}))` with `s = sim(p, q) / tau`;
/// the loss is the mean over anchors that have at least one positive.
pub fn info_nce(points: &Tensor, terms: &[AnchorTerm], tau: f64, cosine: bool) -> InfoNce {
    let k = points.last_dim();
    let (u, norms) = similarity_rows(points, cosine);
    let mut grad_u = Tensor::zeros(points.shape());
    let live: Vec<&AnchorTerm> = terms.iter().filter(|t| !t.positives.is_empty()).collect();
    if live.is_empty() {
        return InfoNce {
            loss: 0.0,
            grad: grad_u,
            anchors: 0,
        };
    }
    let dot = |a: usize, b: usize| -> f64 {
        u.row(a).iter().zip(u.row(b)).map(|(x, y)| x * y).sum::<f64>()
    };
    let n_anchors = live.len() as f64;
    let mut total = 0.0;
    let mut neg_logits = Vec::new();
    for t in &live {
        let p = t.anchor;
        neg_logits.clear();
        neg_logits.extend(t.negatives.iter().map(|&q| dot(p, q) / tau));
        let w = 1.0 / (t.positives.len() as f64 * n_anchors);
        let mut anchor_loss = 0.0;
        for &qp in &t.positives {
            let lp = dot(p, qp) / tau;
            let max = neg_logits.iter().cloned().fold(lp, f64::max);
            let ep = (lp - max).exp();
            let en: Vec<f64> = neg_logits.iter().map(|l| (l - max).exp()).collect();
            let z = ep + en.iter().sum::<f64>();
            anchor_loss += max + z.ln() - lp;

            // d/d logit: softmax - onehot(positive).
            let dp = (ep / z - 1.0) * w / tau;
            let (gp, gq) = (u.row(qp).to_vec(), u.row(p).to_vec());
            add_row(&mut grad_u, p, &gp, dp, k);
            add_row(&mut grad_u, qp, &gq, dp, k);
            for (&qn, e) in t.negatives.iter().zip(&en) {
                let dn = e / z * w / tau;
                let gn = u.row(qn).to_vec();
                add_row(&mut grad_u, p, &gn, dn, k);
                add_row(&mut grad_u, qn, &gq, dn, k);
            }
        }
        total += anchor_loss / t.positives.len() as f64;
    }
    let grad = if cosine {
        // Back through row normalisation: (g - (g.u) u) / |x|.
        let mut g = grad_u;
        for (r, n) in norms.iter().enumerate() {
            let ur = u.row(r);
            let gr = &mut g.data_mut()[r * k..(r + 1) * k];
            let proj: f64 = gr.iter().zip(ur).map(|(a, b)| a * b).sum();
            for (gv, uv) in gr.iter_mut().zip(ur) {
                *gv = (*gv - proj * uv) / n;
            }
        }
        g
    } else {
        grad_u
    };
    InfoNce {
        loss: total / n_anchors,
        grad,
        anchors: live.len(),
    }
}

fn add_row(g: &mut Tensor, r: usize, src: &[f64], scale: f64, k: usize) {
    for (d, s) in g.data_mut()[r * k..(r + 1) * k].iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Flattens sample sets into a point matrix and anchor terms: every
/// positive anchors against the other positives of its class and the
/// class's shared negatives.
pub fn anchor_terms(samples: &[SampleSet]) -> (Vec<AlignmentPoint>, Vec<AnchorTerm>) {
    let mut rows = Vec::new();
    let mut terms = Vec::new();
    for s in samples {
        let pos0 = rows.len();
        rows.extend(s.positives.iter().cloned());
        let neg0 = rows.len();
        rows.extend(s.negatives.iter().cloned());
        let negatives: Vec<usize> = (neg0..rows.len()).collect();
        let np = s.positives.len();
        if np < 2 {
            continue;
        }
        for i in 0..np {
            terms.push(AnchorTerm {
                anchor: pos0 + i,
                positives: (0..np).filter(|&j| j != i).map(|j| pos0 + j).collect(),
                negatives: negatives.clone(),
            });
        }
    }
    (rows, terms)
}

pub fn points_matrix(points: &[AlignmentPoint], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(points.len() * k);
    for p in points {
        data.extend_from_slice(&p.scores);
    }
    Tensor::new(vec![points.len(), k], data).expect("score vectors share width K")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub anchors: usize,
    /// Set when no class had two or more sampled positives.
    pub empty_warning: bool,
}

/// Contrastive loss of a sample collection.
pub fn contrastive_loss(samples: &[SampleSet], cfg: &ContrastiveConfig) -> Result<ContrastiveLoss> {
    cfg.validate()?;
    let (rows, terms) = anchor_terms(samples);
    if terms.is_empty() {
        return Ok(ContrastiveLoss {
            value: 0.0,
            anchors: 0,
            empty_warning: true,
        });
    }
    let k = rows[0].scores.len();
    let m = points_matrix(&rows, k);
    let r = info_nce(&m, &terms, cfg.temperature, cfg.cosine);
    Ok(ContrastiveLoss {
        value: r.loss,
        anchors: r.anchors,
        empty_warning: false,
    })
}
