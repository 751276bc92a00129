//! Lightweight fusion decoder: per-stride 1x1 projection of the decorated
//! pyramid, nearest-neighbour upsampling to stride 4, sum, nonlinearity,
//! 1x1 classifier, then nearest-neighbour upsampling to full resolution.

use rand::Rng;

use crate::autograd::{Activation, Var};
use crate::encoders::STRIDES;
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Graph, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    /// Width of each decorated level, `C + K`.
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl Decoder {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (ci, cd, k) = (self.in_channels, self.hidden, self.classes);
        for s in STRIDES {
            store.insert(
                format!("dec.lat{s}.w"),
                Tensor::randn(&[ci, cd], (2.0 / ci as f64).sqrt(), rng),
                ParamGroup::Decoder,
            );
            store.insert(format!("dec.lat{s}.b"), Tensor::zeros(&[cd]), ParamGroup::Decoder);
        }
        store.insert(
            "dec.cls.w",
            Tensor::randn(&[cd, k], (1.0 / cd as f64).sqrt(), rng),
            ParamGroup::Decoder,
        );
        store.insert("dec.cls.b", Tensor::zeros(&[k]), ParamGroup::Decoder);
    }

    /// `levels` are `(B, H/s, W/s, C + K)` in [`STRIDES`] order. Returns
    /// stride-4 logits `(B, H/4, W/4, K)`.
    pub fn forward(&self, g: &mut Graph, levels: &[Var; 4]) -> Result<Var> {
        let base = g.tape.shape(levels[0]).to_vec();
        let (b, h4, w4) = (base[0], base[1], base[2]);
        let mut acc: Option<Var> = None;
        for (i, &s) in STRIDES.iter().enumerate() {
            let shape = g.tape.shape(levels[i]).to_vec();
            if shape[3] != self.in_channels {
                return Err(Error::WidthMismatch {
                    expected: self.in_channels,
                    got: shape[3],
                    context: "decoder input",
                });
            }
            let f = s / STRIDES[0];
            if shape[1] * f != h4 || shape[2] * f != w4 {
                return Err(Error::DimensionMismatch(format!(
                    "decoder level at stride {s} is {}x{}",
                    shape[1], shape[2]
                )));
            }
            let w = g.param(&format!("dec.lat{s}.w"))?;
            let bias = g.param(&format!("dec.lat{s}.b"))?;
            let y = g.tape.linear(levels[i], w, Some(bias))?;
            let y = if f > 1 {
                g.tape.gather(
                    y,
                    layout::upsample_nearest(b, shape[1], shape[2], self.hidden, f),
                    &[b, h4, w4, self.hidden],
                )?
            } else {
                y
            };
            acc = Some(match acc {
                Some(a) => g.tape.add(a, y)?,
                None => y,
            });
        }
        let h = g.tape.act(acc.expect("four levels"), self.activation);
        let w = g.param("dec.cls.w")?;
        let bias = g.param("dec.cls.b")?;
        g.tape.linear(h, w, Some(bias))
    }
}

/// Nearest-neighbour upsampling of `(B, h, w, K)` logits by `factor`.
pub fn upsample_logits(g: &mut Graph, logits: Var, factor: usize) -> Result<Var> {
    let s = g.tape.shape(logits).to_vec();
    g.tape.gather(
        logits,
        layout::upsample_nearest(s[0], s[1], s[2], s[3], factor),
        &[s[0], s[1] * factor, s[2] * factor, s[3]],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_and_level_checks() {
        let dec = Decoder {
            in_channels: 6,
            hidden: 4,
            classes: 3,
            activation: Activation::Gelu,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut rng);
        let mut g = Graph::new(&store, false);
        let levels: Vec<Var> = STRIDES
            .iter()
            .map(|s| g.input(Tensor::randn(&[2, 64 / s, 32 / s, 6], 1.0, &mut rng)))
            .collect();
        let lv = [levels[0], levels[1], levels[2], levels[3]];
        let out = dec.forward(&mut g, &lv).unwrap();
        assert_eq!(g.tape.shape(out), &[2, 16, 8, 3]);
        let full = upsample_logits(&mut g, out, 4).unwrap();
        assert_eq!(g.tape.shape(full), &[2, 64, 32, 3]);

        let swapped = [levels[1], levels[0], levels[2], levels[3]];
        assert!(dec.forward(&mut g, &swapped).is_err());
    }
}
