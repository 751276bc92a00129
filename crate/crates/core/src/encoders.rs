//! Small trainable stand-ins for a CLIP-style image encoder, text encoder
//! and the instance projector.
//!
//! The image encoder is a four-stage patch-convolution stack producing a
//! feature pyramid at strides 4, 8, 16 and 32 plus a mean-pooled global
//! vector. The text encoder is a pre-norm self-attention stack that reads
//! out the final token of each prompt.

use rand::Rng;

use crate::autograd::{Activation, Var};
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Graph, ParamGroup, ParamStore};
use crate::prompting::{PromptSequence, TextEmbeddingMatrix};
use crate::tensor::Tensor;

/// Output strides of the feature pyramid, finest first.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// RGB image, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "image {height}x{width} is not a non-empty multiple of 32"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} pixel values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.pixels.clone()).expect("validated")
    }
}

/// Stacks same-sized images into a `(B, H, W, 3)` tensor.
pub fn batch_images(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptySplit)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::DimensionMismatch(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}

/// Dense image embeddings, one `(H/s, W/s, C)` map per stride in [`STRIDES`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, stride: usize) -> Option<&Tensor> {
        STRIDES
            .iter()
            .position(|&s| s == stride)
            .and_then(|i| self.levels.get(i))
    }

    pub fn channels(&self) -> usize {
        self.levels[0].last_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceVector(pub Tensor);

/// Batched pyramid on a tape: each level is `(B, h, w, C)`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub levels: [Var; 4],
    pub sizes: [(usize, usize); 4],
    pub batch: usize,
}

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn lecun(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub embed_dim: usize,
    pub global_dim: usize,
    pub activation: Activation,
}

impl ImageEncoder {
    pub fn new(embed_dim: usize, global_dim: usize) -> Self {
        Self {
            embed_dim,
            global_dim,
            activation: Activation::Gelu,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.embed_dim;
        let g = ParamGroup::ImageEncoder;
        store.insert("image.stem.w", Tensor::randn(&[48, c], he(48), rng), g);
        store.insert("image.stem.b", Tensor::zeros(&[c]), g);
        for stage in 2..=4 {
            store.insert(
                format!("image.stage{stage}.w"),
                Tensor::randn(&[4 * c, c], he(4 * c), rng),
                g,
            );
            store.insert(format!("image.stage{stage}.b"), Tensor::zeros(&[c]), g);
        }
        if self.global_dim != c {
            store.insert(
                "image.global.w",
                Tensor::randn(&[c, self.global_dim], lecun(c), rng),
                g,
            );
        }
    }

    /// `images` is `(B, H, W, 3)`.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<(PyramidVars, Var)> {
        let shape = g.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected (B, H, W, 3) images, got {shape:?}"
            )));
        }
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "image {h}x{w} is not a non-empty multiple of 32"
            )));
        }
        let c = self.embed_dim;

        let patches = g.tape.gather(
            images,
            layout::space_to_depth(b, h, w, 3, 4),
            &[b, h / 4, w / 4, 48],
        )?;
        let (wt, bs) = (g.param("image.stem.w")?, g.param("image.stem.b")?);
        let y = g.tape.linear(patches, wt, Some(bs))?;
        let mut x = g.tape.act(y, self.activation);

        let mut levels = [x; 4];
        let mut sizes = [(h / 4, w / 4); 4];
        for stage in 1..4 {
            let (hs, ws) = sizes[stage - 1];
            let p = g.tape.gather(
                x,
                layout::space_to_depth(b, hs, ws, c, 2),
                &[b, hs / 2, ws / 2, 4 * c],
            )?;
            let wt = g.param(&format!("image.stage{}.w", stage + 1))?;
            let bs = g.param(&format!("image.stage{}.b", stage + 1))?;
            let y = g.tape.linear(p, wt, Some(bs))?;
            x = g.tape.act(y, self.activation);
            levels[stage] = x;
            sizes[stage] = (hs / 2, ws / 2);
        }

        let (h32, w32) = sizes[3];
        let flat = g.tape.reshape(levels[3], &[b, h32 * w32, c])?;
        let mut global = g.tape.mean_axis(flat, 1)?;
        if self.global_dim != c {
            let wg = g.param("image.global.w")?;
            global = g.tape.matmul(global, wg)?;
        }
        Ok((
            PyramidVars {
                levels,
                sizes,
                batch: b,
            },
            global,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest prompt the positional table covers.
    pub max_len: usize,
}

impl TextEncoder {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.width;
        let hdim = c * self.mlp_ratio;
        let g = ParamGroup::TextEncoder;
        store.insert("text.pos", Tensor::randn(&[self.max_len, c], 0.1, rng), g);
        for l in 0..self.layers {
            let p = |s: &str| format!("text.l{l}.{s}");
            store.insert(p("ln1.g"), Tensor::full(&[c], 1.0), g);
            store.insert(p("ln1.b"), Tensor::zeros(&[c]), g);
            store.insert(p("qkv.w"), Tensor::randn(&[c, 3 * c], lecun(c), rng), g);
            store.insert(p("qkv.b"), Tensor::zeros(&[3 * c]), g);
            store.insert(p("out.w"), Tensor::randn(&[c, c], lecun(c), rng), g);
            store.insert(p("out.b"), Tensor::zeros(&[c]), g);
            store.insert(p("ln2.g"), Tensor::full(&[c], 1.0), g);
            store.insert(p("ln2.b"), Tensor::zeros(&[c]), g);
            store.insert(p("mlp1.w"), Tensor::randn(&[c, hdim], lecun(c), rng), g);
            store.insert(p("mlp1.b"), Tensor::zeros(&[hdim]), g);
            store.insert(p("mlp2.w"), Tensor::randn(&[hdim, c], lecun(hdim), rng), g);
            store.insert(p("mlp2.b"), Tensor::zeros(&[c]), g);
        }
        store.insert("text.ln_final.g", Tensor::full(&[c], 1.0), g);
        store.insert("text.ln_final.b", Tensor::zeros(&[c]), g);
        store.insert("text.proj", Tensor::randn(&[c, c], lecun(c), rng), g);
    }

    fn norm_affine(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let n = g.tape.layer_norm(x, 1e-5);
        let gain = g.param(&format!("{prefix}.g"))?;
        let bias = g.param(&format!("{prefix}.b"))?;
        let y = g.tape.mul_bias(n, gain)?;
        g.tape.add_bias(y, bias)
    }

    /// `tokens` is `(S, L, C)`; returns `(S, C)`.
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let shape = g.tape.shape(tokens).to_vec();
        let c = self.width;
        if shape.len() != 3 || shape[2] != c {
            return Err(Error::WidthMismatch {
                expected: c,
                got: *shape.last().unwrap_or(&0),
                context: "text encoder token width",
            });
        }
        let (s, l) = (shape[0], shape[1]);
        if l == 0 || l > self.max_len {
            return Err(Error::DimensionMismatch(format!(
                "prompt length {l} outside 1..={}",
                self.max_len
            )));
        }
        let heads = self.heads;
        let dh = c / heads;

        let pos_all = g.param("text.pos")?;
        let pos = g
            .tape
            .gather(pos_all, std::sync::Arc::new((0..l * c).collect()), &[l * c])?;
        let mut x = g.tape.add_bias(tokens, pos)?;

        for li in 0..self.layers {
            let p = |n: &str| format!("text.l{li}.{n}");
            let h = self.norm_affine(g, x, &p("ln1"))?;
            let (w, b) = (g.param(&p("qkv.w"))?, g.param(&p("qkv.b"))?);
            let qkv = g.tape.linear(h, w, Some(b))?;
            let mut parts = Vec::with_capacity(3);
            for part in 0..3 {
                let sl = g
                    .tape
                    .gather(qkv, layout::slice_last(s * l, 3 * c, part * c, c), &[s, l, c])?;
                let split = g
                    .tape
                    .gather(sl, layout::split_heads(s, l, heads, dh), &[s * heads, l, dh])?;
                parts.push(split);
            }
            let scores = g.tape.bmm(parts[0], parts[1], true)?;
            let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.tape.softmax(scores);
            let ctx = g.tape.bmm(attn, parts[2], false)?;
            let merged = g
                .tape
                .gather(ctx, layout::merge_heads(s, l, heads, dh), &[s, l, c])?;
            let (w, b) = (g.param(&p("out.w"))?, g.param(&p("out.b"))?);
            let o = g.tape.linear(merged, w, Some(b))?;
            x = g.tape.add(x, o)?;

            let h = self.norm_affine(g, x, &p("ln2"))?;
            let (w1, b1) = (g.param(&p("mlp1.w"))?, g.param(&p("mlp1.b"))?);
            let (w2, b2) = (g.param(&p("mlp2.w"))?, g.param(&p("mlp2.b"))?);
            let m = g.tape.linear(h, w1, Some(b1))?;
            let m = g.tape.act(m, Activation::Gelu);
            let m = g.tape.linear(m, w2, Some(b2))?;
            x = g.tape.add(x, m)?;
        }

        let last: Vec<usize> = (0..s).map(|i| i * l + l - 1).collect();
        let eot = g
            .tape
            .gather(x, layout::select_rows(&last, c), &[s, c])?;
        let eot = self.norm_affine(g, eot, "text.ln_final")?;
        let proj = g.param("text.proj")?;
        g.tape.matmul(eot, proj)
    }
}

/// Two affine maps `D -> C -> C` with an elementwise nonlinearity between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Projector {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (d, c) = (self.in_dim, self.out_dim);
        let g = ParamGroup::Projector;
        store.insert("proj.w1", Tensor::randn(&[d, c], lecun(d), rng), g);
        store.insert("proj.b1", Tensor::zeros(&[c]), g);
        store.insert("proj.w2", Tensor::randn(&[c, c], lecun(c), rng), g);
        store.insert("proj.b2", Tensor::zeros(&[c]), g);
    }

    /// `global` is `(B, D)`; returns `(B, C)`.
    pub fn forward(&self, g: &mut Graph, global: Var) -> Result<Var> {
        let got = g.tape.value(global).last_dim();
        if got != self.in_dim {
            return Err(Error::WidthMismatch {
                expected: self.in_dim,
                got,
                context: "projector input",
            });
        }
        let (w1, b1) = (g.param("proj.w1")?, g.param("proj.b1")?);
        let (w2, b2) = (g.param("proj.w2")?, g.param("proj.b2")?);
        let h = g.tape.linear(global, w1, Some(b1))?;
        let h = g.tape.act(h, self.activation);
        g.tape.linear(h, w2, Some(b2))
    }
}

/// Runs the image encoder on a single image.
pub fn encode_image(
    image: &Image,
    store: &ParamStore,
    encoder: &ImageEncoder,
) -> Result<(FeaturePyramid, GlobalFeature)> {
    let mut g = Graph::new(store, false);
    let x = g.input(batch_images(&[image])?);
    let (pyr, global) = encoder.forward(&mut g, x)?;
    let levels = pyr
        .levels
        .iter()
        .zip(pyr.sizes)
        .map(|(&v, (h, w))| {
            g.tape
                .value(v)
                .clone()
                .reshape(&[h, w, encoder.embed_dim])
        })
        .collect::<Result<Vec<_>>>()?;
    let gv = g.tape.value(global).clone().reshape(&[encoder.global_dim])?;
    Ok((FeaturePyramid { levels }, GlobalFeature(gv)))
}

/// Encodes a batch of `K` prompts into a `K x C` text embedding matrix.
pub fn encode_text(
    prompts: &[PromptSequence],
    store: &ParamStore,
    encoder: &TextEncoder,
) -> Result<TextEmbeddingMatrix> {
    let first = prompts
        .first()
        .ok_or_else(|| Error::DimensionMismatch("no prompts".into()))?;
    let len = first.len();
    let c = encoder.width;
    let mut data = Vec::with_capacity(prompts.len() * len * c);
    for (i, p) in prompts.iter().enumerate() {
        if p.len() != len {
            return Err(Error::RaggedSequences {
                index: i,
                expected: len,
                got: p.len(),
            });
        }
        if p.width() != c {
            return Err(Error::WidthMismatch {
                expected: c,
                got: p.width(),
                context: "prompt token width",
            });
        }
        data.extend_from_slice(p.tokens.data());
    }
    let mut g = Graph::new(store, false);
    let x = g.input(Tensor::new(vec![prompts.len(), len, c], data)?);
    let out = encoder.forward(&mut g, x)?;
    Ok(TextEmbeddingMatrix(g.tape.value(out).clone()))
}

/// `I = f_P(global)`.
pub fn project_global(
    global: &GlobalFeature,
    store: &ParamStore,
    projector: &Projector,
) -> Result<InstanceVector> {
    if global.0.numel() != projector.in_dim {
        return Err(Error::WidthMismatch {
            expected: projector.in_dim,
            got: global.0.numel(),
            context: "global feature",
        });
    }
    let mut g = Graph::new(store, false);
    let x = g.input(global.0.clone().reshape(&[1, projector.in_dim])?);
    let out = projector.forward(&mut g, x)?;
    Ok(InstanceVector(
        g.tape.value(out).clone().reshape(&[projector.out_dim])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph_gradient, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn text_encoder(c: usize, max_len: usize) -> TextEncoder {
        TextEncoder {
            width: c,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            max_len,
        }
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let enc = ImageEncoder::new(32, 32);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(0));
        let (pyr, global) = encode_image(&random_image(64, 64, 1), &store, &enc).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 16, 32], vec![8, 8, 32], vec![4, 4, 32], vec![2, 2, 32]]
        );
        assert_eq!(global.0.shape(), &[32]);
        assert!(global.0.all_finite());
    }

    #[test]
    fn non_multiple_of_32_is_rejected() {
        assert!(Image::new(48, 64, vec![0.0; 48 * 64 * 3]).is_err());
        let enc = ImageEncoder::new(8, 8);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(0));
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::zeros(&[1, 40, 64, 3]));
        assert!(matches!(
            enc.forward(&mut g, x),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_global() {
        let enc = ImageEncoder::new(16, 24);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(3));
        let img = Image::new(32, 32, vec![0.0; 32 * 32 * 3]).unwrap();
        let (_, global) = encode_image(&img, &store, &enc).unwrap();
        assert!(global.0.data().iter().all(|&v| v == 0.0));
        assert_eq!(global.0.numel(), 24);
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = ImageEncoder::new(16, 16);
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        enc.init(&mut s1, &mut rng(9));
        enc.init(&mut s2, &mut rng(9));
        let img = random_image(64, 32, 2);
        let a = encode_image(&img, &s1, &enc).unwrap();
        let b = encode_image(&img, &s2, &enc).unwrap();
        assert_eq!(a, b);
    }

    fn prompt(len: usize, c: usize, seed: u64) -> PromptSequence {
        PromptSequence {
            tokens: Tensor::randn(&[len, c], 1.0, &mut rng(seed)),
        }
    }

    #[test]
    fn text_output_shape_and_ragged_error() {
        let enc = text_encoder(16, 10);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(1));
        let prompts: Vec<_> = (0..5).map(|k| prompt(10, 16, k)).collect();
        let t = encode_text(&prompts, &store, &enc).unwrap();
        assert_eq!(t.0.shape(), &[5, 16]);
        let one = encode_text(&prompts[..1], &store, &enc).unwrap();
        assert_eq!(one.0.shape(), &[1, 16]);

        let mut ragged = prompts.clone();
        ragged[3] = prompt(9, 16, 99);
        assert!(matches!(
            encode_text(&ragged, &store, &enc),
            Err(Error::RaggedSequences { index: 3, .. })
        ));
    }

    #[test]
    fn text_rows_permute_with_classes() {
        let enc = text_encoder(16, 10);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(2));
        let prompts: Vec<_> = (0..4).map(|k| prompt(10, 16, 10 + k)).collect();
        let t = encode_text(&prompts, &store, &enc).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| prompts[i].clone()).collect();
        let tp = encode_text(&permuted, &store, &enc).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for (a, b) in tp.0.row(row).iter().zip(t.0.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_text_encoder_passes_gradient_to_prompt_tokens() {
        let enc = text_encoder(8, 4);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(4));
        assert!(!store.is_trainable("text.proj"));
        let tokens = Tensor::randn(&[1, 2, 8], 1.0, &mut rng(5));
        let weights = Tensor::randn(&[1, 8], 1.0, &mut rng(6));
        let report = check_graph_gradient(
            &store,
            &[tokens],
            0,
            |g, v| {
                let out = enc.forward(g, v[0]).unwrap();
                let w = g.tape.constant(weights.clone());
                let y = g.tape.mul(out, w).unwrap();
                g.tape.sum(y)
            },
            GradCheck::default(),
        );
        assert!(report.analytic.iter().any(|v| v.abs() > 1e-8));
        assert!(report.max_rel_err <= 1e-3, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn projector_identity_and_zero_cases() {
        let proj = Projector {
            in_dim: 4,
            out_dim: 4,
            activation: Activation::Relu,
        };
        let mut store = ParamStore::new();
        store.insert("proj.w1", Tensor::identity(4), ParamGroup::Projector);
        store.insert("proj.b1", Tensor::zeros(&[4]), ParamGroup::Projector);
        store.insert("proj.w2", Tensor::identity(4), ParamGroup::Projector);
        store.insert("proj.b2", Tensor::zeros(&[4]), ParamGroup::Projector);
        let g = GlobalFeature(Tensor::new(vec![4], vec![0.5, 1.0, 2.0, 3.5]).unwrap());
        let out = project_global(&g, &store, &proj).unwrap();
        assert_eq!(out.0, g.0);

        let zero = GlobalFeature(Tensor::zeros(&[4]));
        let out = project_global(&zero, &store, &proj).unwrap();
        assert!(out.0.data().iter().all(|&v| v == 0.0));

        let wrong = GlobalFeature(Tensor::zeros(&[3]));
        assert!(matches!(
            project_global(&wrong, &store, &proj),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn projector_matches_dense_oracle() {
        let (d, c) = (6, 5);
        let proj = Projector {
            in_dim: d,
            out_dim: c,
            activation: Activation::Tanh,
        };
        let mut store = ParamStore::new();
        let mut r = rng(12);
        proj.init(&mut store, &mut r);
        for name in ["proj.b1", "proj.b2"] {
            let n = store.get(name).unwrap().numel();
            *store.get_mut(name).unwrap() = Tensor::randn(&[n], 0.3, &mut r);
        }
        let gv = Tensor::randn(&[d], 1.0, &mut r);
        let out = project_global(&GlobalFeature(gv.clone()), &store, &proj).unwrap();

        let w1 = store.get("proj.w1").unwrap().data();
        let b1 = store.get("proj.b1").unwrap().data();
        let w2 = store.get("proj.w2").unwrap().data();
        let b2 = store.get("proj.b2").unwrap().data();
        let mut hidden = vec![0.0; c];
        for j in 0..c {
            let mut s = b1[j];
            for i in 0..d {
                s += gv.data()[i] * w1[i * c + j];
            }
            hidden[j] = s.tanh();
        }
        for j in 0..c {
            let mut s = b2[j];
            for i in 0..c {
                s += hidden[i] * w2[i * c + j];
            }
            assert!((out.0.data()[j] - s).abs() < 1e-6);
        }
    }
}
