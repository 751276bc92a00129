//! The full segmentation model: image encoder, instance projector, prompt
//! learner, frozen text encoder, text refinement, (multi-scale) alignment
//! and the fusion decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_vars, multi_scale_align_vars, concat_for_decoder_vars, Upsamplers};
use crate::autograd::{Activation, Var};
use crate::decoder::{upsample_logits, Decoder};
use crate::encoders::{ImageEncoder, Projector, PyramidVars, TextEncoder, STRIDES};
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Graph, ParamStore};
use crate::prompting::{PromptLearner, PromptMode, TextRefiner};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Pixel and text embedding width `C`.
    pub embed_dim: usize,
    /// Global image feature width `D`.
    pub global_dim: usize,
    pub context_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub prompt_mode: PromptMode,
    pub refine_heads: usize,
    pub refine_blocks: usize,
    pub lambda_init: f64,
    pub lambda_trainable: bool,
    pub multi_scale: bool,
    pub normalize_embeddings: bool,
    pub decoder_dim: usize,
    pub activation: Activation,
    pub projector_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            embed_dim: 64,
            global_dim: 64,
            context_len: 8,
            text_layers: 2,
            text_heads: 4,
            prompt_mode: PromptMode::Icpc,
            refine_heads: 1,
            refine_blocks: 1,
            lambda_init: 1e-4,
            lambda_trainable: true,
            multi_scale: true,
            normalize_embeddings: true,
            decoder_dim: 32,
            activation: Activation::Gelu,
            projector_activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("model.num_classes", self.num_classes)?;
        pos("model.embed_dim", self.embed_dim)?;
        pos("model.global_dim", self.global_dim)?;
        pos("model.text_layers", self.text_layers)?;
        pos("model.text_heads", self.text_heads)?;
        pos("model.refine_heads", self.refine_heads)?;
        pos("model.refine_blocks", self.refine_blocks)?;
        pos("model.decoder_dim", self.decoder_dim)?;
        if self.num_classes >= 255 {
            return Err(Error::config("model.num_classes", "must be below 255"));
        }
        if self.embed_dim % self.text_heads != 0 {
            return Err(Error::config("model.text_heads", "must divide embed_dim"));
        }
        if self.embed_dim % self.refine_heads != 0 {
            return Err(Error::config("model.refine_heads", "must divide embed_dim"));
        }
        if self.context_len == 0 && self.prompt_mode != PromptMode::Instance {
            return Err(Error::config(
                "model.context_len",
                "must be positive unless prompt_mode is instance",
            ));
        }
        if !self.lambda_init.is_finite() {
            return Err(Error::config("model.lambda_init", "must be finite"));
        }
        Ok(())
    }
}

/// Graph values shared by the decoder, the losses and raw-alignment
/// evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AlignOutput {
    pub pyramid: PyramidVars,
    pub global: Var,
    pub instance: Option<Var>,
    /// Refined class embeddings `(B, K, C)`.
    pub text: Var,
    /// Score maps in [`STRIDES`] order; with multi-scale off only the
    /// stride-32 entry is computed and the others are zeros.
    pub scores: [Var; 4],
    /// Finest real score map: stride 4 with multi-scale, else stride 32.
    pub finest: Var,
    pub finest_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub projector: Projector,
    pub prompts: PromptLearner,
    pub refiner: TextRefiner,
    pub upsamplers: Upsamplers,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let k = cfg.num_classes;
        Ok(Self {
            image: ImageEncoder {
                embed_dim: c,
                global_dim: cfg.global_dim,
                activation: cfg.activation,
            },
            text: TextEncoder {
                width: c,
                layers: cfg.text_layers,
                heads: cfg.text_heads,
                mlp_ratio: 4,
                max_len: cfg.context_len + 2,
            },
            projector: Projector {
                in_dim: cfg.global_dim,
                out_dim: c,
                activation: cfg.projector_activation,
            },
            prompts: PromptLearner {
                context_len: cfg.context_len,
                width: c,
                num_classes: k,
                mode: cfg.prompt_mode,
            },
            refiner: TextRefiner {
                width: c,
                heads: cfg.refine_heads,
                blocks: cfg.refine_blocks,
                lambda_init: cfg.lambda_init,
                lambda_trainable: cfg.lambda_trainable,
            },
            upsamplers: Upsamplers {
                channels: c,
                classes: k,
            },
            decoder: Decoder {
                in_channels: c + k,
                hidden: cfg.decoder_dim,
                classes: k,
                activation: cfg.activation,
            },
            cfg,
        })
    }

    /// Fresh parameters. The text encoder is initialised from its own seed
    /// stream so that it is identical across runs that differ only in
    /// other settings.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text_rng = ChaCha8Rng::seed_from_u64(seed);
        text_rng.set_stream(1);
        self.image.init(&mut store, &mut rng);
        self.text.init(&mut store, &mut text_rng);
        self.projector.init(&mut store, &mut rng);
        self.prompts.init(&mut store, &mut rng);
        self.refiner.init(&mut store, &mut rng)?;
        self.upsamplers.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        Ok(store)
    }

    /// Encoders, prompts, refinement and alignment for `(B, H, W, 3)` images.
    pub fn encode_and_align(&self, g: &mut Graph, images: Var) -> Result<AlignOutput> {
        let (pyramid, global) = self.image.forward(g, images)?;
        let b = pyramid.batch;
        let (c, k) = (self.cfg.embed_dim, self.cfg.num_classes);

        let instance = if self.cfg.prompt_mode.uses_instance() {
            Some(self.projector.forward(g, global)?)
        } else {
            None
        };
        let tokens = self.prompts.forward(g, instance)?;
        let encoded = self.text.forward(g, tokens)?;
        let text = if instance.is_some() {
            g.tape.reshape(encoded, &[b, k, c])?
        } else {
            let rows: Vec<usize> = (0..b).flat_map(|_| 0..k).collect();
            g.tape
                .gather(encoded, layout::select_rows(&rows, c), &[b, k, c])?
        };

        let f32v = pyramid.levels[3];
        let (h32, w32) = pyramid.sizes[3];
        let memory = g.tape.reshape(f32v, &[b, h32 * w32, c])?;
        let text = self.refiner.forward(g, text, memory)?;

        let normalize = self.cfg.normalize_embeddings;
        let (scores, finest, finest_stride) = if self.cfg.multi_scale {
            let s = multi_scale_align_vars(g, f32v, text, &self.upsamplers, normalize)?;
            (s, s[0], STRIDES[0])
        } else {
            let a32 = align_vars(g, f32v, text, normalize)?;
            let mut s = [a32; 4];
            for i in 0..3 {
                let (h, w) = pyramid.sizes[i];
                s[i] = g.input(Tensor::zeros(&[b, h, w, k]));
            }
            (s, a32, STRIDES[3])
        };
        Ok(AlignOutput {
            pyramid,
            global,
            instance,
            text,
            scores,
            finest,
            finest_stride,
        })
    }

    /// Full-resolution decoder logits `(B, H, W, K)`.
    pub fn decode(&self, g: &mut Graph, out: &AlignOutput) -> Result<Var> {
        let decorated = concat_for_decoder_vars(g, &out.pyramid.levels, &out.scores)?;
        let logits = self.decoder.forward(g, &decorated)?;
        upsample_logits(g, logits, STRIDES[0])
    }

    /// Finest score map upsampled to full resolution `(B, H, W, K)`.
    pub fn raw_alignment_logits(&self, g: &mut Graph, out: &AlignOutput) -> Result<Var> {
        upsample_logits(g, out.finest, out.finest_stride)
    }
}
