//! Visual (VFI), textual (TFI) and cross-modal (CMFI) interaction units.
//!
//! All units score a list of (mention, entity) pairs given as row indices
//! into a projected mention batch and a projected entity batch. The
//! training grid is every mention against every entity; ranking uses each
//! mention against its own candidates.

use rand_chacha::ChaCha8Rng;

use crate::config::HyperConfig;
use crate::heads::ProjectedFeatures;
use crate::nn;
use crate::numerics::{Graph, NumericsError, ParamStore, Real, Var};

/// Row indices of scored pairs; `mention[p]` and `entity[p]` form pair `p`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pairs {
    pub mention: Vec<usize>,
    pub entity: Vec<usize>,
}

impl Pairs {
    /// Row-major `bm × be` grid: pair `i·be + j` is mention `i`, entity `j`.
    pub fn grid(bm: usize, be: usize) -> Self {
        let mut p = Pairs::default();
        for i in 0..bm {
            for j in 0..be {
                p.push(i, j);
            }
        }
        p
    }

    pub fn push(&mut self, mention: usize, entity: usize) {
        self.mention.push(mention);
        self.entity.push(entity);
    }

    pub fn len(&self) -> usize {
        self.mention.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mention.is_empty()
    }
}

pub(crate) fn init<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: &HyperConfig,
) -> Result<(), NumericsError> {
    let (dv, dt, dc) = (cfg.d_v, cfg.d_t, cfg.cmfi_width());
    for dir in ["vfi.m2e", "vfi.e2m"] {
        nn::init_layer_norm(store, &format!("{dir}.ln1"), dv)?;
        nn::init_linear(store, rng, &format!("{dir}.fc1"), dv, dv, true)?;
        nn::init_linear(store, rng, &format!("{dir}.fc2"), dv, dv, true)?;
        nn::init_layer_norm(store, &format!("{dir}.ln2"), dv)?;
    }
    for w in ["tfi.wq", "tfi.wk", "tfi.wv"] {
        nn::init_linear(store, rng, w, dt, dt, false)?;
    }
    nn::init_layer_norm(store, "tfi.ln", dt)?;
    nn::init_linear(store, rng, "tfi.fc", dt, dt, true)?;
    nn::init_linear(store, rng, "cmfi.fc1", dt, dc, true)?;
    nn::init_linear(store, rng, "cmfi.fc2", cfg.d_v, dc, true)?;
    nn::init_linear(store, rng, "cmfi.fc3", dc, dc, true)?;
    nn::init_layer_norm(store, "cmfi.ln", dc)?;
    Ok(())
}

fn final_dot<T: Real>(g: &mut Graph<T>, a: Var, b: Var, normalize: bool) -> Result<Var, NumericsError> {
    if normalize {
        let a = g.l2_normalize(a)?;
        let b = g.l2_normalize(b)?;
        g.row_dot(a, b)
    } else {
        g.row_dot(a, b)
    }
}

fn gather_mask(mask: &[bool], rows: usize, index: &[usize]) -> Vec<bool> {
    index
        .iter()
        .flat_map(|&i| mask[i * rows..(i + 1) * rows].iter().copied())
        .collect()
}

/// One VFI direction over pairs.
///
/// `query_g` is `[Bq, d_v]` indexed by `q_idx`; `target_g` / `target_l`
/// (`[Bt, d_v]`, `[Bt, L, d_v]` with a `Bt·L` mask) are indexed by `t_idx`.
/// `prefix` selects the parameter set (`vfi.m2e` or `vfi.e2m`).
#[allow(clippy::too_many_arguments)]
pub fn vfi_directional<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    prefix: &str,
    query_g: Var,
    q_idx: &[usize],
    target_g: Var,
    target_l: Var,
    target_mask: &[bool],
    t_idx: &[usize],
) -> Result<Var, NumericsError> {
    let pooled = g.mean_pool(target_l, target_mask)?;
    let hp = g.gather(pooled, t_idx)?;
    let q = g.gather(query_g, q_idx)?;
    let tg = g.gather(target_g, t_idx)?;
    let s = g.add(hp, q)?;
    let s = nn::layer_norm(g, store, &format!("{prefix}.ln1"), s, cfg.layer_norm_eps)?;
    let hvc = nn::linear(g, store, &format!("{prefix}.fc1"), s)?;
    let hvg = nn::linear(g, store, &format!("{prefix}.fc2"), hvc)?;
    let hvg = g.tanh(hvg);
    let fused = g.mul(hvg, hvc)?;
    let fused = g.add(fused, tg)?;
    let hv = nn::layer_norm(g, store, &format!("{prefix}.ln2"), fused, cfg.layer_norm_eps)?;
    final_dot(g, hv, q, cfg.normalize_scores)
}

/// `S_V = (S_V^{M2E} + S_V^{E2M}) / 2` per pair.
pub fn vfi_score<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    m: &ProjectedFeatures,
    e: &ProjectedFeatures,
    pairs: &Pairs,
) -> Result<Var, NumericsError> {
    let m2e = vfi_directional(
        g, store, cfg, "vfi.m2e", m.v_global, &pairs.mention, e.v_global, e.v_local, &e.img_mask, &pairs.entity,
    )?;
    let e2m = vfi_directional(
        g, store, cfg, "vfi.e2m", e.v_global, &pairs.entity, m.v_global, m.v_local, &m.img_mask, &pairs.mention,
    )?;
    let sum = g.add(m2e, e2m)?;
    Ok(g.scale(sum, T::lit(0.5)))
}

/// Cosine similarity of the text CLS features.
pub fn tfi_g2g<T: Real>(
    g: &mut Graph<T>,
    m_tg: Var,
    e_tg: Var,
    pairs: &Pairs,
) -> Result<Var, NumericsError> {
    let mn = g.l2_normalize(m_tg)?;
    let en = g.l2_normalize(e_tg)?;
    let a = g.gather(mn, &pairs.mention)?;
    let b = g.gather(en, &pairs.entity)?;
    g.row_dot(a, b)
}

/// Entity-global to mention-local attention score.
pub fn tfi_g2l<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    m: &ProjectedFeatures,
    e: &ProjectedFeatures,
    pairs: &Pairs,
) -> Result<Var, NumericsError> {
    let (ltm, lte) = (m.txt_rows, e.txt_rows);
    let q = nn::linear(g, store, "tfi.wq", e.t_local)?;
    let k = nn::linear(g, store, "tfi.wk", m.t_local)?;
    let v = nn::linear(g, store, "tfi.wv", m.t_local)?;
    let q = g.gather(q, &pairs.entity)?;
    let k = g.gather(k, &pairs.mention)?;
    let v = g.gather(v, &pairs.mention)?;

    let logits = g.batch_matmul(q, k, true)?;
    let d_t = g.shape(q)[2];
    let logits = g.scale(logits, T::one() / T::lit(d_t as f64).sqrt());
    let m_mask = gather_mask(&m.txt_mask, ltm, &pairs.mention);
    let mut attn_mask = Vec::with_capacity(pairs.len() * lte * ltm);
    for p in 0..pairs.len() {
        let row = &m_mask[p * ltm..(p + 1) * ltm];
        for _ in 0..lte {
            attn_mask.extend_from_slice(row);
        }
    }
    let alpha = g.softmax(logits, Some(&attn_mask))?;
    let h = g.batch_matmul(alpha, v, false)?;
    let e_mask = gather_mask(&e.txt_mask, lte, &pairs.entity);
    let h = g.mean_pool(h, &e_mask)?;
    let ht = nn::layer_norm(g, store, "tfi.ln", h, cfg.layer_norm_eps)?;
    let fe = nn::linear(g, store, "tfi.fc", e.t_global)?;
    let fe = g.gather(fe, &pairs.entity)?;
    g.row_dot(fe, ht)
}

/// `S_T = (G2G + G2L) / 2` per pair.
pub fn tfi_score<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    m: &ProjectedFeatures,
    e: &ProjectedFeatures,
    pairs: &Pairs,
) -> Result<Var, NumericsError> {
    let g2g = tfi_g2g(g, m.t_global, e.t_global, pairs)?;
    let g2l = tfi_g2l(g, store, cfg, m, e, pairs)?;
    let sum = g.add(g2g, g2l)?;
    Ok(g.scale(sum, T::lit(0.5)))
}

/// Cross-modal context vector per item: `t_g` is `[B, d_t]`, `v_l` is
/// `[B, L, d_v]` with a `B·L` mask; returns `[B, d_c']`.
pub fn cmfi_context<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    t_g: Var,
    v_l: Var,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    let ht = nn::linear(g, store, "cmfi.fc1", t_g)?;
    let hv = nn::linear(g, store, "cmfi.fc2", v_l)?;
    let (b, l, d) = {
        let s = g.shape(hv);
        (s[0], s[1], s[2])
    };
    let col = g.reshape(ht, &[b, d, 1])?;
    let logits = g.batch_matmul(hv, col, false)?;
    let logits = g.reshape(logits, &[b, l])?;
    let alpha = g.softmax(logits, Some(mask))?;
    let alpha = g.reshape(alpha, &[b, 1, l])?;
    let hc = g.batch_matmul(alpha, hv, false)?;
    let hc = g.reshape(hc, &[b, d])?;
    let hg = nn::linear(g, store, "cmfi.fc3", ht)?;
    let hg = g.tanh(hg);
    let fused = g.mul(hg, ht)?;
    let fused = g.add(fused, hc)?;
    nn::layer_norm(g, store, "cmfi.ln", fused, cfg.layer_norm_eps)
}

/// `S_C = h_e · h_m` per pair from per-item context vectors.
pub fn cmfi_score<T: Real>(
    g: &mut Graph<T>,
    cfg: &HyperConfig,
    h_m: Var,
    h_e: Var,
    pairs: &Pairs,
) -> Result<Var, NumericsError> {
    let a = g.gather(h_m, &pairs.mention)?;
    let b = g.gather(h_e, &pairs.entity)?;
    final_dot(g, b, a, cfg.normalize_scores)
}

/// Per-pair unit scores and their mean, each `[P]`.
#[derive(Debug, Clone, Copy)]
pub struct PairScores {
    pub s_v: Var,
    pub s_t: Var,
    pub s_c: Var,
    pub s: Var,
}

pub fn score_pairs<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &HyperConfig,
    m: &ProjectedFeatures,
    e: &ProjectedFeatures,
    pairs: &Pairs,
) -> Result<PairScores, NumericsError> {
    let s_v = vfi_score(g, store, cfg, m, e, pairs)?;
    let s_t = tfi_score(g, store, cfg, m, e, pairs)?;
    let h_m = cmfi_context(g, store, cfg, m.t_global, m.v_local, &m.img_mask)?;
    let h_e = cmfi_context(g, store, cfg, e.t_global, e.v_local, &e.img_mask)?;
    let s_c = cmfi_score(g, cfg, h_m, h_e, pairs)?;
    let s = crate::objective::combined_score(g, s_v, s_t, s_c)?;
    Ok(PairScores { s_v, s_t, s_c, s })
}
