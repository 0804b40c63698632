use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numerics::Tensor;

/// Tensor names as they appear in manifests.
pub const CLS_TENSORS: [&str; 4] = ["img_cls_l3", "img_cls_l10", "img_cls_l11", "img_cls_l12"];
pub const IMG_LOCAL: &str = "img_local";
pub const TXT_HIDDEN: &str = "txt_hidden";

/// Dataset-level feature widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_c: usize,
    pub d_t: usize,
}

/// Raw encoder outputs for one image-text item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// CLS vectors of the selected encoder layers, shallow first.
    pub img_cls: [Tensor; 4],
    /// Final-layer visual hidden states, `[n+1, d_c]`, row 0 is CLS.
    pub img_local: Tensor,
    /// Text hidden states, `[l_t+1, d_t]`, row 0 is CLS.
    pub txt_hidden: Tensor,
    pub img_mask: Vec<bool>,
    pub txt_mask: Vec<bool>,
}

impl FeatureBundle {
    /// Bundle with all rows valid.
    pub fn new(img_cls: [Tensor; 4], img_local: Tensor, txt_hidden: Tensor) -> Self {
        let img_mask = vec![true; img_local.shape().first().copied().unwrap_or(0)];
        let txt_mask = vec![true; txt_hidden.shape().first().copied().unwrap_or(0)];
        FeatureBundle {
            img_cls,
            img_local,
            txt_hidden,
            img_mask,
            txt_mask,
        }
    }

    pub fn img_rows(&self) -> usize {
        self.img_local.shape()[0]
    }

    pub fn txt_rows(&self) -> usize {
        self.txt_hidden.shape()[0]
    }

    pub fn validate(&self, dims: FeatureDims, record: &str) -> Result<(), DataError> {
        let mismatch = |tensor: &str, expected: Vec<usize>, found: &[usize]| DataError::DimMismatch {
            record: record.to_string(),
            tensor: tensor.to_string(),
            expected,
            found: found.to_vec(),
        };
        for (name, t) in CLS_TENSORS.iter().zip(&self.img_cls) {
            if t.shape() != [dims.d_c] {
                return Err(mismatch(name, vec![dims.d_c], t.shape()));
            }
        }
        let il = self.img_local.shape();
        if il.len() != 2 || il[1] != dims.d_c || il[0] == 0 {
            return Err(mismatch(IMG_LOCAL, vec![il.first().copied().unwrap_or(1), dims.d_c], il));
        }
        let th = self.txt_hidden.shape();
        if th.len() != 2 || th[1] != dims.d_t || th[0] == 0 {
            return Err(mismatch(TXT_HIDDEN, vec![th.first().copied().unwrap_or(1), dims.d_t], th));
        }
        let schema = |message: String| DataError::Schema {
            record: record.to_string(),
            message,
        };
        if self.img_mask.len() != il[0] || self.txt_mask.len() != th[0] {
            return Err(schema("mask length does not match row count".into()));
        }
        if !self.img_mask.iter().any(|&b| b) || !self.txt_mask.iter().any(|&b| b) {
            return Err(schema("masks need at least one set bit".into()));
        }
        if !self.txt_mask[0] {
            return Err(schema("text CLS row must be unmasked".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MentionRecord {
    pub id: String,
    /// Mention sentence.
    pub sentence: String,
    /// Auxiliary text produced by the vision-language model, possibly empty.
    pub aux_text: String,
    /// `None` marks a mention whose entity is known to be missing from the KB.
    pub gold: Option<String>,
    /// `None` means rank against the whole KB.
    pub candidates: Option<Vec<String>>,
    pub features: FeatureBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub id: String,
    pub name: String,
    pub attributes: String,
    /// Kept for completeness; the model does not read it.
    pub description: String,
    pub features: FeatureBundle,
}

/// Entities with an id index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entities: Vec<EntityRecord>,
    index: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<EntityRecord>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(DataError::DuplicateEntity(e.id.clone()));
            }
        }
        Ok(KnowledgeBase { entities, index })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn get(&self, i: usize) -> &EntityRecord {
        &self.entities[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// One split of mentions over a shared knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub dims: FeatureDims,
    pub mentions: Vec<MentionRecord>,
    pub kb: Arc<KnowledgeBase>,
    /// Number of mentions whose gold is absent from their candidate list
    /// or flagged missing.
    pub gold_warnings: usize,
}

impl Dataset {
    /// Validates references and dims, and counts gold warnings.
    pub fn new(
        split: impl Into<String>,
        dims: FeatureDims,
        mentions: Vec<MentionRecord>,
        kb: Arc<KnowledgeBase>,
    ) -> Result<Self, DataError> {
        let mut seen = HashMap::with_capacity(mentions.len());
        let mut gold_warnings = 0;
        for e in kb.entities() {
            e.features.validate(dims, &e.id)?;
        }
        for m in &mentions {
            if seen.insert(m.id.as_str(), ()).is_some() {
                return Err(DataError::DuplicateMention(m.id.clone()));
            }
            m.features.validate(dims, &m.id)?;
            if let Some(g) = &m.gold {
                if kb.position(g).is_none() {
                    return Err(DataError::UnresolvedGold {
                        mention: m.id.clone(),
                        entity: g.clone(),
                    });
                }
            }
            match &m.candidates {
                Some(c) => {
                    if c.is_empty() {
                        return Err(DataError::Schema {
                            record: m.id.clone(),
                            message: "candidate list is empty".into(),
                        });
                    }
                    let mut uniq = HashMap::with_capacity(c.len());
                    for id in c {
                        if kb.position(id).is_none() {
                            return Err(DataError::UnresolvedCandidate {
                                mention: m.id.clone(),
                                entity: id.clone(),
                            });
                        }
                        if uniq.insert(id.as_str(), ()).is_some() {
                            return Err(DataError::DuplicateCandidate {
                                mention: m.id.clone(),
                                entity: id.clone(),
                            });
                        }
                    }
                    if m.gold.as_ref().is_none_or(|g| !uniq.contains_key(g.as_str())) {
                        log::warn!("mention {}: gold entity not among candidates", m.id);
                        gold_warnings += 1;
                    }
                }
                None => {
                    if m.gold.is_none() {
                        gold_warnings += 1;
                    }
                }
            }
        }
        Ok(Dataset {
            split: split.into(),
            dims,
            mentions,
            kb,
            gold_warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    pub fn mention(&self, id: &str) -> Option<&MentionRecord> {
        self.mentions.iter().find(|m| m.id == id)
    }

    /// KB indices a mention is ranked against.
    pub fn candidate_indices(&self, m: &MentionRecord) -> Vec<usize> {
        match &m.candidates {
            Some(c) => c.iter().filter_map(|id| self.kb.position(id)).collect(),
            None => (0..self.kb.len()).collect(),
        }
    }

    /// Splits mentions at `at`; both halves share the KB.
    pub fn split_at(&self, at: usize, left: &str, right: &str) -> Result<(Dataset, Dataset), DataError> {
        let at = at.min(self.mentions.len());
        let (a, b) = self.mentions.split_at(at);
        Ok((
            Dataset::new(left, self.dims, a.to_vec(), self.kb.clone())?,
            Dataset::new(right, self.dims, b.to_vec(), self.kb.clone())?,
        ))
    }
}
