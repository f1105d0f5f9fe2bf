use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Dense layer `y = xW + b` with parameters held in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_init(format!("{name}.weight"), d_in, d_out, gain, rng);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                super::tensor::Tensor::zeros(&[d_out]),
            )
        });
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Looks up `{name}.weight` and optional `{name}.bias` in an existing store.
    pub fn bind(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let shape = store.value(weight).shape();
        let (d_in, d_out) = (shape[0], *shape.get(1)?);
        Some(Self {
            weight,
            bias: store.id(&format!("{name}.bias")),
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Tape-free forward for inference.
    pub fn apply(&self, store: &ParamStore, x: &super::Tensor) -> Result<super::Tensor> {
        let mut y = x.matmul(store.value(self.weight))?;
        if let Some(b) = self.bias {
            let bias = store.value(b).data();
            let m = self.d_out;
            for row in y.data_mut().chunks_exact_mut(m) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        Ok(y)
    }
}
