use rand::Rng;

use crate::data::gaussian_tensor;
use crate::tensor::{Tape, Tensor, Var};

// Generates a parameter struct generic over its storage together with
// `map`, `fields` and `fields_mut` in declaration order.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $($(#[$fmeta])* pub $field: T,)+
        }

        impl<T> $name<T> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)+ }
            }

            pub fn fields(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),+]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field)),+]
            }
        }
    };
}

param_struct!(
    /// One pre-LN transformer block.
    LayerWeights {
        ln1_g,
        ln1_b,
        /// `[D, 3D]`, query/key/value side by side.
        w_qkv,
        b_qkv,
        w_o,
        b_o,
        ln2_g,
        ln2_b,
        /// `[D, hD]`
        w_ff1,
        b_ff1,
        /// `[hD, D]`
        w_ff2,
        b_ff2,
    }
);

param_struct!(
    /// Everything of one encoder outside its blocks.
    EncoderHead {
        /// `[P, D]`; row 0 doubles as the vision class embedding.
        pos_embed,
        ln_final_g,
        ln_final_b,
        /// `[D, E]`
        proj,
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T = Tensor> {
    pub head: EncoderHead<T>,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            head: self.head.map(&mut f),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self, prefix: &str) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = self
            .head
            .fields()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .fields()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.layer{i}.{n}"), t)),
            );
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> = self
            .head
            .fields_mut()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .fields_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.layer{i}.{n}"), t)),
            );
        }
        out
    }
}

impl EncoderWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        layers: usize,
        width: usize,
        tokens: usize,
        hidden_mult: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = width;
        let h = hidden_mult * width;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let head = EncoderHead {
            pos_embed: gaussian_tensor(&[tokens, d], 0.5, rng),
            ln_final_g: Tensor::ones(&[d]),
            ln_final_b: Tensor::zeros(&[d]),
            proj: gaussian_tensor(&[d, embed_dim], fan(d), rng),
        };
        let layers = (0..layers)
            .map(|_| LayerWeights {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: gaussian_tensor(&[d, 3 * d], fan(d), rng),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: gaussian_tensor(&[d, d], 0.5 * fan(d), rng),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w_ff1: gaussian_tensor(&[d, h], fan(d), rng),
                b_ff1: Tensor::zeros(&[h]),
                w_ff2: gaussian_tensor(&[h, d], 0.5 * fan(h), rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        Self { head, layers }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EncoderWeights<Var<'t>> {
        self.map(|t| tape.leaf(t))
    }
}
