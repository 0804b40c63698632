use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::HyperConfig;
use crate::data::{FeatureBatch, FeatureBundle, FeatureDims};
use crate::heads::{self, ProjectedFeatures, Side};
use crate::interaction::{self, PairScores, Pairs};
use crate::numerics::{Graph, NumericsError, ParamStore, Real};
use crate::Error;

/// Trainable parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: HyperConfig,
    pub params: ParamStore<T>,
}

/// Plain per-pair scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredPairs {
    pub s_v: Vec<f64>,
    pub s_t: Vec<f64>,
    pub s_c: Vec<f64>,
    pub s: Vec<f64>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &HyperConfig) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        heads::init(&mut params, &mut rng, config)?;
        interaction::init(&mut params, &mut rng, config)?;
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    pub fn check_dims(&self, dims: FeatureDims) -> Result<(), Error> {
        if dims.d_c != self.config.d_c || dims.d_t != self.config.d_t {
            return Err(Error::Validation(format!(
                "data dims (d_c={}, d_t={}) do not match the model (d_c={}, d_t={})",
                dims.d_c, dims.d_t, self.config.d_c, self.config.d_t
            )));
        }
        Ok(())
    }

    /// Builds the scoring graph for `pairs` over a mention and an entity batch.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        mentions: &FeatureBatch<T>,
        entities: &FeatureBatch<T>,
        pairs: &Pairs,
    ) -> Result<(ProjectedFeatures, ProjectedFeatures, PairScores), NumericsError> {
        let cfg = &self.config;
        let m = heads::project(g, &self.params, cfg, mentions, Side::Mention)?;
        let e = heads::project(g, &self.params, cfg, entities, Side::Entity)?;
        let scores = interaction::score_pairs(g, &self.params, cfg, &m, &e, pairs)?;
        Ok((m, e, scores))
    }

    /// Scores without keeping a graph around.
    pub fn score(
        &self,
        mentions: &[&FeatureBundle],
        entities: &[&FeatureBundle],
        pairs: &Pairs,
    ) -> Result<ScoredPairs, NumericsError> {
        if pairs.is_empty() {
            return Ok(ScoredPairs::default());
        }
        let mb = FeatureBatch::<T>::assemble(mentions);
        let eb = FeatureBatch::<T>::assemble(entities);
        let mut g = Graph::new();
        let (_, _, s) = self.forward(&mut g, &mb, &eb, pairs)?;
        let read = |v| g.value(v).data().iter().map(|x: &T| x.as_f64()).collect();
        Ok(ScoredPairs {
            s_v: read(s.s_v),
            s_t: read(s.s_t),
            s_c: read(s.s_c),
            s: read(s.s),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
