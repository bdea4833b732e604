use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Tape, Tensor, Var};

/// Steering parameters of one modality at one layer.
///
/// Generic over the storage so the same layout serves owned parameters
/// (`Tensor`) and their leaves on a tape (`Var`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityAdapter<T = Tensor> {
    /// `[D, 2r]`: first `r` columns feed the mean-update channel, the rest
    /// the uncertainty channel.
    pub w_down: T,
    /// `[2r]`
    pub b_down: T,
    /// `[r, D]`, zero at initialization.
    pub w_up: T,
    /// `[D]`, zero at initialization.
    pub b_up: T,
    /// `[r, 1]` confidence weights.
    pub w_gate: T,
    /// `[1]`
    pub b_gate: T,
    /// `[1]`, unconstrained; the steering scale is `sigmoid(alpha_raw)`.
    pub alpha_raw: T,
}

pub(crate) const MODALITY_FIELDS: [&str; 7] = [
    "w_down",
    "b_down",
    "w_up",
    "b_up",
    "w_gate",
    "b_gate",
    "alpha_raw",
];

impl<T> ModalityAdapter<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModalityAdapter<U> {
        ModalityAdapter {
            w_down: f(&self.w_down),
            b_down: f(&self.b_down),
            w_up: f(&self.w_up),
            b_up: f(&self.b_up),
            w_gate: f(&self.w_gate),
            b_gate: f(&self.b_gate),
            alpha_raw: f(&self.alpha_raw),
        }
    }

    pub fn fields(&self) -> [(&'static str, &T); 7] {
        let v = [
            &self.w_down,
            &self.b_down,
            &self.w_up,
            &self.b_up,
            &self.w_gate,
            &self.b_gate,
            &self.alpha_raw,
        ];
        let mut i = 0;
        v.map(|t| {
            i += 1;
            (MODALITY_FIELDS[i - 1], t)
        })
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut T); 7] {
        let v = [
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_gate,
            &mut self.b_gate,
            &mut self.alpha_raw,
        ];
        let mut i = 0;
        v.map(|t| {
            i += 1;
            (MODALITY_FIELDS[i - 1], t)
        })
    }
}

impl ModalityAdapter<Tensor> {
    /// Down-projection uniform in ±1/√D; everything else zero, so the update
    /// is exactly zero, gates sit at 0.5 and α at 0.5.
    pub fn init<R: Rng + ?Sized>(dim: usize, r: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w_down: Vec<f64> = (0..dim * 2 * r).map(|_| dist.sample(rng)).collect();
        let trainable = |t: Tensor| t.with_requires_grad(true);
        Self {
            w_down: trainable(Tensor::from_parts(vec![dim, 2 * r], w_down)),
            b_down: trainable(Tensor::zeros(&[2 * r])),
            w_up: trainable(Tensor::zeros(&[r, dim])),
            b_up: trainable(Tensor::zeros(&[dim])),
            w_gate: trainable(Tensor::zeros(&[r, 1])),
            b_gate: trainable(Tensor::zeros(&[1])),
            alpha_raw: trainable(Tensor::zeros(&[1])),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModalityAdapter<Var<'t>> {
        self.map(|t| tape.leaf(t))
    }

    pub fn dim(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.w_up.shape()[0]
    }

    pub fn num_scalars(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.len()).sum()
    }
}

/// One layer's steering parameters for both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayerParams<T = Tensor> {
    pub vision: ModalityAdapter<T>,
    pub text: ModalityAdapter<T>,
}

impl AdapterLayerParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(d_vision: usize, d_text: usize, r: usize, rng: &mut R) -> Self {
        let vision = ModalityAdapter::init(d_vision, r, rng);
        let text = ModalityAdapter::init(d_text, r, rng);
        Self { vision, text }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> AdapterLayerParams<Var<'t>> {
        AdapterLayerParams {
            vision: self.vision.bind(tape),
            text: self.text.bind(tape),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.vision.num_scalars() + self.text.num_scalars()
    }
}
