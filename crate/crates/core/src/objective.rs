//! Combined similarity and the in-batch contrastive objective.

use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};

pub use crate::numerics::kernels::contrastive_loss;

/// `(S_V + S_T + S_C) / 3`, elementwise.
pub fn combined_score<T: Real>(g: &mut Graph<T>, s_v: Var, s_t: Var, s_c: Var) -> Result<Var, NumericsError> {
    let a = g.add(s_v, s_t)?;
    let a = g.add(a, s_c)?;
    Ok(g.scale(a, T::one() / T::lit(3.0)))
}

pub fn combined<T: Real>(s_v: T, s_t: T, s_c: T) -> T {
    (s_v + s_t + s_c) / T::lit(3.0)
}

/// `B × C` scores with the positive column of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T: Real = f32> {
    scores: Tensor<T>,
    positives: Vec<usize>,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn new(scores: Tensor<T>, positives: Vec<usize>) -> Result<Self, NumericsError> {
        if scores.rank() != 2 {
            return Err(NumericsError::Rank {
                op: "score_matrix",
                expected: 2,
                shape: scores.shape().to_vec(),
            });
        }
        if positives.len() != scores.shape()[0] {
            return Err(NumericsError::Shape {
                op: "score_matrix positives",
                left: scores.shape().to_vec(),
                right: vec![positives.len()],
            });
        }
        let c = scores.shape()[1];
        if let Some(&p) = positives.iter().find(|&&p| p >= c) {
            return Err(NumericsError::Index { index: p, len: c });
        }
        Ok(ScoreMatrix { scores, positives })
    }

    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }
}

/// Loss nodes produced by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub l_o: Var,
    pub l_v: Var,
    pub l_t: Var,
    pub l_c: Var,
}

/// `L_O + λ(L_V + L_T + L_C)` on `[B, C]` score nodes.
///
/// Each loss is the row-mean cross-entropy at `positives`; `L_O` uses the
/// elementwise mean of the three matrices. All scores are divided by
/// `temperature` first.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    s_v: Var,
    s_t: Var,
    s_c: Var,
    positives: &[usize],
    lambda: f64,
    temperature: f64,
) -> Result<LossParts, NumericsError> {
    let inv_t = T::lit(1.0 / temperature);
    let (s_v, s_t, s_c) = if temperature == 1.0 {
        (s_v, s_t, s_c)
    } else {
        (g.scale(s_v, inv_t), g.scale(s_t, inv_t), g.scale(s_c, inv_t))
    };
    let s = combined_score(g, s_v, s_t, s_c)?;
    let l_o = g.cross_entropy(s, positives)?;
    let l_v = g.cross_entropy(s_v, positives)?;
    let l_t = g.cross_entropy(s_t, positives)?;
    let l_c = g.cross_entropy(s_c, positives)?;
    let total = if lambda == 0.0 {
        l_o
    } else {
        let aux = g.add(l_v, l_t)?;
        let aux = g.add(aux, l_c)?;
        let aux = g.scale(aux, T::lit(lambda));
        g.add(l_o, aux)?
    };
    Ok(LossParts {
        total,
        l_o,
        l_v,
        l_t,
        l_c,
    })
}

/// Scalar values of the four losses and the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub l_o: f64,
    pub l_v: f64,
    pub l_t: f64,
    pub l_c: f64,
}

/// [`total_loss`] evaluated on plain matrices.
pub fn total_loss_value<T: Real>(
    s_v: &ScoreMatrix<T>,
    s_t: &ScoreMatrix<T>,
    s_c: &ScoreMatrix<T>,
    lambda: f64,
    temperature: f64,
) -> Result<LossValues, NumericsError> {
    for other in [s_t, s_c] {
        if other.scores.shape() != s_v.scores.shape() {
            return Err(NumericsError::Shape {
                op: "total_loss",
                left: s_v.scores.shape().to_vec(),
                right: other.scores.shape().to_vec(),
            });
        }
        if other.positives != s_v.positives {
            return Err(NumericsError::Domain("score matrices disagree on positives".into()));
        }
    }
    let mut g = Graph::new();
    let v = g.input(s_v.scores.clone());
    let t = g.input(s_t.scores.clone());
    let c = g.input(s_c.scores.clone());
    let parts = total_loss(&mut g, v, t, c, &s_v.positives, lambda, temperature)?;
    let val = |x: Var| g.value(x).data()[0].as_f64();
    Ok(LossValues {
        total: val(parts.total),
        l_o: val(parts.l_o),
        l_v: val(parts.l_v),
        l_t: val(parts.l_t),
        l_c: val(parts.l_c),
    })
}
