//! Parameter naming and initialisation shared by the heads and the
//! interaction units.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, NumericsError, ParamStore, Real, Tensor, Var};

/// Weight `[fan_in, fan_out]` uniform in ±1/sqrt(fan_in); bias zero.
pub(crate) fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<(), NumericsError> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<T> = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    store.insert(format!("{prefix}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

pub(crate) fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<(), NumericsError> {
    store.insert(format!("{prefix}.gain"), Tensor::filled(&[d], T::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

pub(crate) fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var, NumericsError> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = match store.get(&format!("{prefix}.bias")) {
        Ok(_) => Some(g.param(store, &format!("{prefix}.bias"))?),
        Err(_) => None,
    };
    g.linear(x, w, b)
}

pub(crate) fn layer_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var, NumericsError> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, T::lit(eps))
}
