//! Projections from raw encoder features to the model's global and local
//! features.
//!
//! Visual global: the four CLS vectors are concatenated shallow-first,
//! layer-normalised and sent through an MLP to `d_v`. Visual local: a
//! shared affine map applied to every final-layer hidden state. Text: the
//! CLS row is the global feature and the whole hidden-state matrix is the
//! local feature; no parameters are involved.

use rand_chacha::ChaCha8Rng;

use crate::config::HyperConfig;
use crate::data::FeatureBatch;
use crate::nn;
use crate::numerics::{Graph, NumericsError, ParamStore, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Mention,
    Entity,
}

/// Parameter prefix of the visual heads for one side.
pub fn head_prefix(cfg: &HyperConfig, side: Side) -> &'static str {
    match (cfg.tie_heads, side) {
        (true, _) => "heads",
        (false, Side::Mention) => "heads.mention",
        (false, Side::Entity) => "heads.entity",
    }
}

fn mlp_widths(cfg: &HyperConfig) -> Vec<(usize, usize)> {
    let wide = 4 * cfg.d_c;
    (0..cfg.mlp_depth)
        .map(|i| {
            let out = if i + 1 == cfg.mlp_depth { cfg.d_v } else { wide };
            (wide, out)
        })
        .collect()
}

pub(crate) fn init<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: &HyperConfig,
) -> Result<(), NumericsError> {
    let prefixes: &[&str] = if cfg.tie_heads {
        &["heads"]
    } else {
        &["heads.mention", "heads.entity"]
    };
    for p in prefixes {
        nn::init_layer_norm(store, &format!("{p}.global.ln"), 4 * cfg.d_c)?;
        for (i, (fin, fout)) in mlp_widths(cfg).into_iter().enumerate() {
            nn::init_linear(store, rng, &format!("{p}.global.fc{}", i + 1), fin, fout, true)?;
        }
        nn::init_linear(store, rng, &format!("{p}.local.fc"), cfg.d_c, cfg.d_v, true)?;
    }
    Ok(())
}

/// `MLP(LayerNorm(concat(F3, F10, F11, F12)))` for a batch: each input is
/// `[B, d_c]`, the output `[B, d_v]`.
pub fn visual_global_head<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    prefix: &str,
    cls: [Var; 4],
) -> Result<Var, NumericsError> {
    let cat = g.concat(&cls)?;
    let mut h = nn::layer_norm(g, store, &format!("{prefix}.global.ln"), cat, cfg.layer_norm_eps)?;
    for i in 0..cfg.mlp_depth {
        if i > 0 {
            h = g.tanh(h);
        }
        h = nn::linear(g, store, &format!("{prefix}.global.fc{}", i + 1), h)?;
    }
    Ok(h)
}

/// Row-wise affine map `[.., d_c] → [.., d_v]` with shared weights.
pub fn visual_local_head<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    img_local: Var,
) -> Result<Var, NumericsError> {
    nn::linear(g, store, &format!("{prefix}.local.fc"), img_local)
}

/// Splits `[B, Lt, d_t]` text hidden states into the CLS rows `[B, d_t]`
/// and the full local matrix.
pub fn text_features<T: Real>(g: &mut Graph<T>, txt: Var) -> Result<(Var, Var), NumericsError> {
    let shape = g.shape(txt).to_vec();
    let [b, lt, d] = shape[..] else {
        return Err(NumericsError::Rank {
            op: "text_features",
            expected: 3,
            shape,
        });
    };
    let flat = g.reshape(txt, &[b * lt, d])?;
    let cls_rows: Vec<usize> = (0..b).map(|i| i * lt).collect();
    let global = g.gather(flat, &cls_rows)?;
    Ok((global, txt))
}

/// Model-space features of one batch of items.
#[derive(Debug, Clone)]
pub struct ProjectedFeatures {
    /// `[B, d_v]`
    pub v_global: Var,
    /// `[B, Lv, d_v]`
    pub v_local: Var,
    /// `[B, d_t]`
    pub t_global: Var,
    /// `[B, Lt, d_t]`
    pub t_local: Var,
    pub img_mask: Vec<bool>,
    pub txt_mask: Vec<bool>,
    pub len: usize,
    pub img_rows: usize,
    pub txt_rows: usize,
}

/// Input leaves for a batch: the four CLS matrices, visual local states and
/// text states.
pub struct BatchInputs {
    pub cls: [Var; 4],
    pub img_local: Var,
    pub txt: Var,
}

pub fn batch_inputs<T: Real>(g: &mut Graph<T>, batch: &FeatureBatch<T>) -> BatchInputs {
    BatchInputs {
        cls: std::array::from_fn(|k| g.input(batch.cls[k].clone())),
        img_local: g.input(batch.img_local.clone()),
        txt: g.input(batch.txt.clone()),
    }
}

pub fn project_inputs<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    batch: &FeatureBatch<T>,
    inputs: &BatchInputs,
    side: Side,
) -> Result<ProjectedFeatures, NumericsError> {
    let prefix = head_prefix(cfg, side);
    let v_global = visual_global_head(g, store, cfg, prefix, inputs.cls)?;
    let v_local = visual_local_head(g, store, prefix, inputs.img_local)?;
    let (t_global, t_local) = text_features(g, inputs.txt)?;
    Ok(ProjectedFeatures {
        v_global,
        v_local,
        t_global,
        t_local,
        img_mask: batch.img_mask.clone(),
        txt_mask: batch.txt_mask.clone(),
        len: batch.len(),
        img_rows: batch.img_rows(),
        txt_rows: batch.txt_rows(),
    })
}

pub fn project<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    batch: &FeatureBatch<T>,
    side: Side,
) -> Result<ProjectedFeatures, NumericsError> {
    let inputs = batch_inputs(g, batch);
    project_inputs(g, store, cfg, batch, &inputs, side)
}
