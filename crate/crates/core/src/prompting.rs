//! Prompt assembly and text-embedding refinement.
//!
//! A prompt for class `k` is a token sequence fed to the text encoder. The
//! default layout is `[V_1..V_N, I, CLS_k]`: shared learnable context,
//! a per-image instance vector, then the class token. The other
//! [`PromptMode`]s are the ablation baselines.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoders::InstanceVector;
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Graph, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Frozen context table, no instance vector.
    Fixed,
    /// `[V_1..V_N, CLS_k]`.
    Learnable,
    /// `[I, CLS_k]`.
    Instance,
    /// `[V_1..V_N, I, CLS_k]`.
    #[default]
    Icpc,
    /// `[V_1+I, .., V_N+I, CLS_k]`.
    Cocoop,
}

impl PromptMode {
    pub const ALL: [PromptMode; 5] = [
        PromptMode::Fixed,
        PromptMode::Learnable,
        PromptMode::Instance,
        PromptMode::Icpc,
        PromptMode::Cocoop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Fixed => "fixed",
            PromptMode::Learnable => "learnable",
            PromptMode::Instance => "instance",
            PromptMode::Icpc => "icpc",
            PromptMode::Cocoop => "cocoop",
        }
    }

    pub fn uses_instance(self) -> bool {
        matches!(
            self,
            PromptMode::Instance | PromptMode::Icpc | PromptMode::Cocoop
        )
    }

    /// Token count per prompt for `context_len` context vectors.
    pub fn seq_len(self, context_len: usize) -> usize {
        match self {
            PromptMode::Fixed | PromptMode::Learnable | PromptMode::Cocoop => context_len + 1,
            PromptMode::Instance => 2,
            PromptMode::Icpc => context_len + 2,
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(PromptMode::Fixed),
            "learnable" | "learnable-only" => Ok(PromptMode::Learnable),
            "instance" | "instance-only" => Ok(PromptMode::Instance),
            "icpc" => Ok(PromptMode::Icpc),
            "cocoop" | "cocoop-style" => Ok(PromptMode::Cocoop),
            other => Err(Error::UnknownVariant {
                kind: "prompt mode",
                value: other.to_string(),
            }),
        }
    }
}

/// One class prompt, `(len, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub tokens: Tensor,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.last_dim()
    }
}

/// Encoded class embeddings, `(K, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingMatrix(pub Tensor);

/// Context and class-token tables used to assemble prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTables {
    /// Learnable shared context `(N, C)`.
    pub context: Tensor,
    /// Frozen context `(N, C)` for [`PromptMode::Fixed`].
    pub fixed_context: Tensor,
    /// One token per class `(K, C)`.
    pub class_tokens: Tensor,
}

/// Parameter names and sizes for the prompt tables.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptLearner {
    pub context_len: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mode: PromptMode,
}

impl PromptLearner {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (n, c, k) = (self.context_len, self.width, self.num_classes);
        store.insert("prompt.ctx", Tensor::randn(&[n, c], 0.02, rng), ParamGroup::Prompt);
        store.insert("prompt.cls", Tensor::randn(&[k, c], 0.5, rng), ParamGroup::Prompt);
        store.insert(
            "prompt.fixed_ctx",
            Tensor::randn(&[n, c], 0.5, rng),
            ParamGroup::FixedPrompt,
        );
    }

    pub fn tables(&self, store: &ParamStore) -> Result<PromptTables> {
        Ok(PromptTables {
            context: store.get("prompt.ctx")?.clone(),
            fixed_context: store.get("prompt.fixed_ctx")?.clone(),
            class_tokens: store.get("prompt.cls")?.clone(),
        })
    }

    /// Builds `(S, L, C)` prompt tokens. With an instance-conditioned mode
    /// `instance` must be `(B, C)` and `S = B * K` (image-major); otherwise
    /// `S = K` and the prompts are shared by every image.
    pub fn forward(&self, g: &mut Graph, instance: Option<Var>) -> Result<Var> {
        let ctx = g.param("prompt.ctx")?;
        let fixed = g.param("prompt.fixed_ctx")?;
        let cls = g.param("prompt.cls")?;
        assemble(g, self.mode, ctx, fixed, cls, instance)
    }
}

fn check_width(g: &Graph, v: Var, c: usize, context: &'static str) -> Result<()> {
    let got = g.tape.value(v).last_dim();
    if got != c {
        return Err(Error::WidthMismatch {
            expected: c,
            got,
            context,
        });
    }
    Ok(())
}

fn assemble(
    g: &mut Graph,
    mode: PromptMode,
    ctx: Var,
    fixed: Var,
    cls: Var,
    instance: Option<Var>,
) -> Result<Var> {
    let c = g.tape.value(cls).last_dim();
    let k = g.tape.value(cls).shape()[0];
    let n = g.tape.value(ctx).shape()[0];
    check_width(g, ctx, c, "context tokens")?;
    check_width(g, fixed, c, "fixed context tokens")?;

    let inst = if mode.uses_instance() {
        let v = instance.ok_or_else(|| {
            Error::DimensionMismatch(format!("prompt mode '{mode}' needs an instance vector"))
        })?;
        check_width(g, v, c, "instance vector")?;
        Some(v)
    } else {
        None
    };
    let b = inst.map(|v| g.tape.value(v).numel() / c).unwrap_or(1);

    // Flatten every token source into one bank and gather token rows from it.
    let mut pieces: Vec<Var> = Vec::new();
    let mut offset = 0usize;
    let mut push = |g: &mut Graph, v: Var, rows: usize| -> Result<usize> {
        let flat = g.tape.reshape(v, &[1, rows * c])?;
        pieces.push(flat);
        let start = offset;
        offset += rows;
        Ok(start)
    };
    let cls_at = push(g, cls, k)?;

    let mut tokens: Vec<usize> = Vec::new();
    let seq = mode.seq_len(n);
    match mode {
        PromptMode::Fixed | PromptMode::Learnable => {
            let src = if mode == PromptMode::Fixed { fixed } else { ctx };
            let ctx_at = push(g, src, n)?;
            for kk in 0..k {
                tokens.extend(ctx_at..ctx_at + n);
                tokens.push(cls_at + kk);
            }
        }
        PromptMode::Instance | PromptMode::Icpc => {
            let ctx_at = push(g, ctx, n)?;
            let inst_at = push(g, inst.unwrap(), b)?;
            for bi in 0..b {
                for kk in 0..k {
                    if mode == PromptMode::Icpc {
                        tokens.extend(ctx_at..ctx_at + n);
                    }
                    tokens.push(inst_at + bi);
                    tokens.push(cls_at + kk);
                }
            }
        }
        PromptMode::Cocoop => {
            // (B, N, C) = ctx broadcast over images + I broadcast over context slots.
            let inst = inst.unwrap();
            let rep: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat(bi).take(n)).collect();
            let inst_rep = g
                .tape
                .gather(inst, layout::select_rows(&rep, c), &[b, n * c])?;
            let ctx_flat = g.tape.reshape(ctx, &[n * c])?;
            let shifted = g.tape.add_bias(inst_rep, ctx_flat)?;
            let sh_at = push(g, shifted, b * n)?;
            for bi in 0..b {
                for kk in 0..k {
                    tokens.extend(sh_at + bi * n..sh_at + (bi + 1) * n);
                    tokens.push(cls_at + kk);
                }
            }
        }
    }
    let bank = g.tape.concat_last(&pieces)?;
    let s = tokens.len() / seq;
    let idx: Vec<usize> = tokens
        .iter()
        .flat_map(|&t| t * c..(t + 1) * c)
        .collect();
    g.tape.gather(bank, Arc::new(idx), &[s, seq, c])
}

/// Assembles the `K` prompts for one image.
pub fn build_prompts(
    tables: &PromptTables,
    instance: Option<&InstanceVector>,
    mode: PromptMode,
) -> Result<Vec<PromptSequence>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let ctx = g.input(tables.context.clone());
    let fixed = g.input(tables.fixed_context.clone());
    let cls = g.input(tables.class_tokens.clone());
    let inst = match instance {
        Some(i) => {
            let c = i.0.numel();
            Some(g.input(i.0.clone().reshape(&[1, c])?))
        }
        None => None,
    };
    let out = assemble(&mut g, mode, ctx, fixed, cls, inst)?;
    let v = g.tape.value(out);
    let (s, l, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    (0..s)
        .map(|i| {
            Ok(PromptSequence {
                tokens: Tensor::new(vec![l, c], v.data()[i * l * c..(i + 1) * l * c].to_vec())?,
            })
        })
        .collect()
}

/// Cross-attention refinement `T <- T + lambda * cross_attn(T, F)` with text
/// as query and image pixels as key and value.
#[derive(Clone, Debug, PartialEq)]
pub struct TextRefiner {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub lambda_init: f64,
    pub lambda_trainable: bool,
}

impl TextRefiner {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = self.width;
        let std = (1.0 / c as f64).sqrt();
        for blk in 0..self.blocks {
            for w in ["q", "k", "v", "o"] {
                store.insert(
                    format!("refine.b{blk}.{w}"),
                    Tensor::randn(&[c, c], std, rng),
                    ParamGroup::Refinement,
                );
            }
        }
        store.insert(
            "refine.lambda",
            Tensor::scalar(self.lambda_init),
            ParamGroup::Refinement,
        );
        store.set_frozen("refine.lambda", !self.lambda_trainable)
    }

    /// `text` is `(B, K, C)`, `feat` is `(B, P, C)` with `P` pixels.
    pub fn forward(&self, g: &mut Graph, text: Var, feat: Var) -> Result<Var> {
        let ts = g.tape.shape(text).to_vec();
        let fs = g.tape.shape(feat).to_vec();
        let c = self.width;
        if fs.len() != 3 || fs[1] == 0 {
            return Err(Error::EmptyFeatureMap);
        }
        if ts[2] != c || fs[2] != c {
            return Err(Error::WidthMismatch {
                expected: c,
                got: if ts[2] != c { ts[2] } else { fs[2] },
                context: "refinement input",
            });
        }
        if ts[0] != fs[0] {
            return Err(Error::DimensionMismatch(format!(
                "refinement batch {} vs {}",
                ts[0], fs[0]
            )));
        }
        let (b, k, p) = (ts[0], ts[1], fs[1]);
        let heads = self.heads;
        let dh = c / heads;

        let mut h = text;
        let mut out = text;
        for blk in 0..self.blocks {
            let pn = |w: &str| format!("refine.b{blk}.{w}");
            let (wq, wk, wv, wo) = (
                g.param(&pn("q"))?,
                g.param(&pn("k"))?,
                g.param(&pn("v"))?,
                g.param(&pn("o"))?,
            );
            let q = g.tape.matmul(h, wq)?;
            let kk = g.tape.matmul(feat, wk)?;
            let v = g.tape.matmul(feat, wv)?;
            let q = g
                .tape
                .gather(q, layout::split_heads(b, k, heads, dh), &[b * heads, k, dh])?;
            let kk = g
                .tape
                .gather(kk, layout::split_heads(b, p, heads, dh), &[b * heads, p, dh])?;
            let v = g
                .tape
                .gather(v, layout::split_heads(b, p, heads, dh), &[b * heads, p, dh])?;
            let scores = g.tape.bmm(q, kk, true)?;
            let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.tape.softmax(scores);
            let ctx = g.tape.bmm(attn, v, false)?;
            let ctx = g
                .tape
                .gather(ctx, layout::merge_heads(b, k, heads, dh), &[b, k, c])?;
            out = g.tape.matmul(ctx, wo)?;
            if blk + 1 < self.blocks {
                h = g.tape.add(h, out)?;
            }
        }
        let lambda = g.param("refine.lambda")?;
        let scaled = g.tape.scale_by(out, lambda)?;
        g.tape.add(text, scaled)
    }
}

/// Refines a single `(K, C)` text matrix against one `(h, w, C)` feature map.
pub fn refine_text(
    text: &TextEmbeddingMatrix,
    feat: &Tensor,
    store: &ParamStore,
    refiner: &TextRefiner,
) -> Result<TextEmbeddingMatrix> {
    if feat.numel() == 0 {
        return Err(Error::EmptyFeatureMap);
    }
    let c = feat.last_dim();
    let p = feat.numel() / c;
    let k = text.0.shape()[0];
    let mut g = Graph::new(store, false);
    let t = g.input(text.0.clone().reshape(&[1, k, text.0.last_dim()])?);
    let f = g.input(feat.clone().reshape(&[1, p, c])?);
    let out = refiner.forward(&mut g, t, f)?;
    Ok(TextEmbeddingMatrix(
        g.tape.value(out).clone().reshape(&[k, text.0.last_dim()])?,
    ))
}

/// Zero-shot class probabilities `p_k ∝ exp(cos(g, T_k) / temp)`.
pub fn zero_shot_probs(global: &[f64], text: &TextEmbeddingMatrix, temp: f64) -> Result<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let c = text.0.last_dim();
    if global.len() != c {
        return Err(Error::WidthMismatch {
            expected: c,
            got: global.len(),
            context: "zero-shot global feature",
        });
    }
    let gn = global.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gn == 0.0 {
        return Err(Error::ZeroNorm("global feature"));
    }
    let k = text.0.numel() / c;
    let mut logits = Vec::with_capacity(k);
    for i in 0..k {
        let row = text.0.row(i);
        let tn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if tn == 0.0 {
            return Err(Error::ZeroNorm("text embedding"));
        }
        let dot: f64 = row.iter().zip(global).map(|(a, b)| a * b).sum();
        logits.push(dot / (gn * tn) / temp);
    }
    crate::autograd::softmax_in_place(&mut logits);
    Ok(logits)
}
