//! Dense pixel-text score maps, their multi-scale fusion, and the per-pixel
//! alignment loss.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::Var;
use crate::encoders::{FeaturePyramid, STRIDES};
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Graph, ParamGroup, ParamStore};
use crate::prompting::TextEmbeddingMatrix;
use crate::tensor::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

const NORM_EPS: f64 = 1e-12;

/// Per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "label map {}x{} with {} entries",
                height,
                width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour resize sampling at cell centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                    .min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        LabelMap {
            height,
            width,
            labels,
        }
    }

    /// Cross-entropy targets with ignored pixels as `None`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE).then_some(l as usize))
            .collect()
    }
}

/// Concatenated targets for a batch of label maps, each resized to `(h, w)`.
pub fn batch_targets(labels: &[&LabelMap], h: usize, w: usize) -> Arc<Vec<Option<usize>>> {
    Arc::new(
        labels
            .iter()
            .flat_map(|l| l.resize_nearest(h, w).targets())
            .collect(),
    )
}

/// Score map `(H, W, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMap(pub Tensor);

impl AlignmentMap {
    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.0.last_dim()
    }
}

/// Score maps at strides 4, 8, 16, 32 (same order as [`STRIDES`]).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPyramid {
    pub levels: Vec<AlignmentMap>,
}

impl AlignmentPyramid {
    pub fn level(&self, stride: usize) -> Option<&AlignmentMap> {
        STRIDES
            .iter()
            .position(|&s| s == stride)
            .and_then(|i| self.levels.get(i))
    }
}

/// `(B, h, w, C) x (B, K, C) -> (B, h, w, K)`.
pub fn align_vars(g: &mut Graph, feat: Var, text: Var, normalize: bool) -> Result<Var> {
    let fs = g.tape.shape(feat).to_vec();
    let ts = g.tape.shape(text).to_vec();
    if fs.len() != 4 || ts.len() != 3 || fs[0] != ts[0] {
        return Err(Error::DimensionMismatch(format!(
            "align: feature {fs:?} vs text {ts:?}"
        )));
    }
    if fs[3] != ts[2] {
        return Err(Error::WidthMismatch {
            expected: ts[2],
            got: fs[3],
            context: "feature map vs text embedding",
        });
    }
    let (b, h, w, c, k) = (fs[0], fs[1], fs[2], fs[3], ts[1]);
    let (f, t) = if normalize {
        (
            g.tape.l2_normalize(feat, NORM_EPS),
            g.tape.l2_normalize(text, NORM_EPS),
        )
    } else {
        (feat, text)
    };
    let f = g.tape.reshape(f, &[b, h * w, c])?;
    let a = g.tape.bmm(f, t, true)?;
    g.tape.reshape(a, &[b, h, w, k])
}

/// Scores every pixel of an `(H, W, C)` map against the `K` class rows.
pub fn align(feat: &Tensor, text: &TextEmbeddingMatrix, normalize: bool) -> Result<AlignmentMap> {
    if feat.rank() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "feature map must be (H, W, C), got {:?}",
            feat.shape()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let (h, w, c) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let k = text.0.shape()[0];
    let f = g.input(feat.clone().reshape(&[1, h, w, c])?);
    let t = g.input(text.0.clone().reshape(&[1, k, text.0.last_dim()])?);
    let a = align_vars(&mut g, f, t, normalize)?;
    Ok(AlignmentMap(g.tape.value(a).clone().reshape(&[h, w, k])?))
}

/// Learned 2x transposed convolutions (kernel 2, stride 2).
///
/// The feature stage is a full `C -> C` transposed convolution. The score
/// stages are depthwise over the `K` classes; a kernel of ones with zero
/// bias is exactly nearest-neighbour upsampling. `x4` and `x8` are applied
/// two and three times respectively.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsamplers {
    pub channels: usize,
    pub classes: usize,
}

impl Upsamplers {
    pub const SCORE_STAGES: [(&'static str, usize); 3] = [("x2", 1), ("x4", 2), ("x8", 3)];

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (c, k) = (self.channels, self.classes);
        let mut w = Tensor::randn(&[c, 4 * c], 0.01, rng);
        for q in 0..4 {
            for ch in 0..c {
                w.data_mut()[ch * 4 * c + q * c + ch] += 1.0;
            }
        }
        store.insert("up.feat.w", w, ParamGroup::Upsample);
        store.insert("up.feat.b", Tensor::zeros(&[4 * c]), ParamGroup::Upsample);
        for (name, _) in Self::SCORE_STAGES {
            store.insert(
                format!("up.{name}.w"),
                Tensor::full(&[4 * k], 1.0),
                ParamGroup::Upsample,
            );
            store.insert(format!("up.{name}.b"), Tensor::zeros(&[k]), ParamGroup::Upsample);
        }
    }

    /// `(B, h, w, C) -> (B, 2h, 2w, C)`.
    pub fn feature_up(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let wt = g.param("up.feat.w")?;
        let bias = g.param("up.feat.b")?;
        let y = g.tape.linear(x, wt, Some(bias))?;
        g.tape
            .gather(y, layout::depth_to_space2(b, h, w, c), &[b, 2 * h, 2 * w, c])
    }

    fn score_stage(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        let (b, h, w, k) = (s[0], s[1], s[2], s[3]);
        if k != self.classes {
            return Err(Error::WidthMismatch {
                expected: self.classes,
                got: k,
                context: "score upsampler",
            });
        }
        let wt = g.param(&format!("up.{name}.w"))?;
        let bias = g.param(&format!("up.{name}.b"))?;
        let up = g
            .tape
            .gather(x, layout::upsample_nearest(b, h, w, k, 2), &[b, 2 * h, 2 * w, k])?;
        let kern = g
            .tape
            .gather(wt, layout::tile_kernel2(b, h, w, k), &[b, 2 * h, 2 * w, k])?;
        let y = g.tape.mul(up, kern)?;
        g.tape.add_bias(y, bias)
    }

    /// Score-space upsampling by `factor` in {2, 4, 8}.
    pub fn score_up(&self, g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
        let (name, reps) = match factor {
            2 => Self::SCORE_STAGES[0],
            4 => Self::SCORE_STAGES[1],
            8 => Self::SCORE_STAGES[2],
            f => {
                return Err(Error::DimensionMismatch(format!(
                    "unsupported upsampling factor {f}"
                )))
            }
        };
        let mut y = x;
        for _ in 0..reps {
            y = self.score_stage(g, y, name)?;
        }
        Ok(y)
    }
}

fn expect_size(g: &Graph, v: Var, h: usize, w: usize) -> Result<()> {
    let s = g.tape.shape(v);
    if s[1] != h || s[2] != w {
        return Err(Error::DimensionMismatch(format!(
            "upsampled map is {}x{}, expected {h}x{w}",
            s[1], s[2]
        )));
    }
    Ok(())
}

/// Multi-scale alignment from the stride-32 features `(B, h, w, C)` and text
/// `(B, K, C)`. Returns maps in [`STRIDES`] order.
pub fn multi_scale_align_vars(
    g: &mut Graph,
    feat32: Var,
    text: Var,
    up: &Upsamplers,
    normalize: bool,
) -> Result<[Var; 4]> {
    let s = g.tape.shape(feat32).to_vec();
    let (h, w) = (s[1], s[2]);
    let a32 = align_vars(g, feat32, text, normalize)?;
    let f16 = up.feature_up(g, feat32)?;
    let a16 = align_vars(g, f16, text, normalize)?;
    expect_size(g, a16, 2 * h, 2 * w)?;

    let u = up.score_up(g, a32, 4)?;
    let v = up.score_up(g, a16, 2)?;
    let a8 = g.tape.add(u, v)?;
    expect_size(g, a8, 4 * h, 4 * w)?;

    let u = up.score_up(g, a32, 8)?;
    let v = up.score_up(g, a16, 4)?;
    let x = up.score_up(g, a8, 2)?;
    let uv = g.tape.add(u, v)?;
    let a4 = g.tape.add(uv, x)?;
    expect_size(g, a4, 8 * h, 8 * w)?;
    Ok([a4, a8, a16, a32])
}

/// Multi-scale alignment of a single image.
pub fn multi_scale_align(
    pyr: &FeaturePyramid,
    text: &TextEmbeddingMatrix,
    store: &ParamStore,
    up: &Upsamplers,
    normalize: bool,
) -> Result<AlignmentPyramid> {
    let f32 = pyr
        .level(32)
        .ok_or_else(|| Error::DimensionMismatch("pyramid lacks stride 32".into()))?;
    let (h, w, c) = (f32.shape()[0], f32.shape()[1], f32.shape()[2]);
    let k = text.0.shape()[0];
    let mut g = Graph::new(store, false);
    let f = g.input(f32.clone().reshape(&[1, h, w, c])?);
    let t = g.input(text.0.clone().reshape(&[1, k, text.0.last_dim()])?);
    let maps = multi_scale_align_vars(&mut g, f, t, up, normalize)?;
    let levels = maps
        .iter()
        .map(|&m| {
            let s = g.tape.shape(m).to_vec();
            Ok(AlignmentMap(
                g.tape.value(m).clone().reshape(&[s[1], s[2], s[3]])?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentPyramid { levels })
}

/// Mean cross-entropy of `scores / temp` over non-ignored targets.
pub fn alignment_loss_vars(
    g: &mut Graph,
    scores: Var,
    targets: Arc<Vec<Option<usize>>>,
    temp: f64,
) -> Result<Var> {
    if !(temp > 0.0) {
        return Err(Error::config("temp_align", "must be positive"));
    }
    g.tape.cross_entropy(scores, targets, 1.0 / temp)
}

/// Per-pixel classification loss of a score map against labels resized to
/// its resolution.
pub fn alignment_loss(a: &AlignmentMap, labels: &LabelMap, temp: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let targets = Arc::new(labels.resize_nearest(a.height(), a.width()).targets());
    let s = g.input(a.0.clone());
    let l = alignment_loss_vars(&mut g, s, targets, temp)?;
    Ok(g.tape.value(l).item())
}

/// Concatenates features and scores per stride: width `C + K`.
pub fn concat_for_decoder_vars(g: &mut Graph, feats: &[Var; 4], scores: &[Var; 4]) -> Result<[Var; 4]> {
    let mut out = [feats[0]; 4];
    for i in 0..4 {
        let fs = g.tape.shape(feats[i]).to_vec();
        let ss = g.tape.shape(scores[i]).to_vec();
        if fs[..3] != ss[..3] {
            return Err(Error::DimensionMismatch(format!(
                "stride {}: features {fs:?} vs scores {ss:?}",
                STRIDES[i]
            )));
        }
        out[i] = g.tape.concat_last(&[feats[i], scores[i]])?;
    }
    Ok(out)
}

/// Value-level decoder input: one `(h, w, C + K)` map per stride.
pub fn concat_for_decoder(pyr: &FeaturePyramid, apyr: &AlignmentPyramid) -> Result<Vec<Tensor>> {
    pyr.levels
        .iter()
        .zip(&apyr.levels)
        .zip(STRIDES)
        .map(|((f, a), s)| {
            if f.shape()[..2] != a.0.shape()[..2] {
                return Err(Error::DimensionMismatch(format!(
                    "stride {s}: features {:?} vs scores {:?}",
                    f.shape(),
                    a.0.shape()
                )));
            }
            let (c, k) = (f.last_dim(), a.classes());
            let rows = f.numel() / c;
            let mut data = Vec::with_capacity(rows * (c + k));
            for r in 0..rows {
                data.extend_from_slice(f.row(r));
                data.extend_from_slice(a.0.row(r));
            }
            Tensor::new(vec![f.shape()[0], f.shape()[1], c + k], data)
        })
        .collect()
}
