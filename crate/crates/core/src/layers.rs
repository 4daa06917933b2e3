//! Parameterized building blocks shared by the backbone and the adapter.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{filled, normal, ParamGroup, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weight entries are `N(0, std²)`; the bias starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        bias: bool,
        group: ParamGroup,
        trainable: bool,
    ) -> Linear {
        let w = store.add(
            format!("{name}.w"),
            normal(rng, vec![d_in, d_out], std),
            group,
            trainable,
            true,
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.b"),
                Tensor::zeros(vec![d_out]),
                group,
                trainable,
                false,
            )
        });
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup, trainable: bool) -> LayerNorm {
        let gamma = store.add(
            format!("{name}.gamma"),
            filled(vec![d], 1.0),
            group,
            trainable,
            false,
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![d]), group, trainable, false);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}
