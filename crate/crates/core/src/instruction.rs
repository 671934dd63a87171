//! Instruction canonicalization for training batches and inference requests.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{Embedder, InstructionUnifier};

pub const DEFAULT_UNIFY_FRACTION: f64 = 0.5;

static INFERENCE_UNIFICATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of instructions routed through [`unify_for_inference`] so far in
/// this process.
pub fn inference_unification_count() -> u64 {
    INFERENCE_UNIFICATIONS.load(Ordering::SeqCst)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub raw: String,
    pub unified: Option<String>,
    pub used_unified: bool,
}

impl InstructionRecord {
    pub fn new(raw: impl Into<String>) -> Self {
        Self {
            raw: raw.into(),
            unified: None,
            used_unified: false,
        }
    }

    /// The text the model trains on.
    pub fn text(&self) -> &str {
        match (&self.unified, self.used_unified) {
            (Some(u), true) => u,
            _ => &self.raw,
        }
    }
}

/// Unify `floor(len · fraction)` seeded-random records of the batch.
/// Unified text replaces the raw text for those records.
pub fn augment_batch(
    batch: &[InstructionRecord],
    uni: &dyn InstructionUnifier,
    fraction: f64,
    seed: u64,
) -> Result<Vec<InstructionRecord>> {
    if batch.is_empty() {
        return Err(Error::Validation("cannot augment an empty batch".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("unification fraction {fraction} is outside [0, 1]")));
    }
    let k = (batch.len() as f64 * fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.to_vec();
    for i in sample(&mut rng, batch.len(), k) {
        let rec = &mut out[i];
        rec.unified = Some(uni.unify(&rec.raw)?);
        rec.used_unified = true;
    }
    Ok(out)
}

/// Every inference instruction goes through the unifier.
pub fn unify_for_inference(instruction: &str, uni: &dyn InstructionUnifier) -> Result<String> {
    if instruction.trim().is_empty() {
        return Err(Error::Validation("instruction is empty".into()));
    }
    INFERENCE_UNIFICATIONS.fetch_add(1, Ordering::SeqCst);
    uni.unify(instruction)
}

/// Text embedding fed to the model; empty text maps to the zero vector.
pub fn text_embedding(text: &str, emb: &dyn Embedder, dim: usize) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Ok(vec![0.0; dim]);
    }
    let v = emb.embed_text(text);
    if v.len() != dim {
        return Err(Error::Dimension(format!(
            "text embedding has {} entries, model expects {dim}",
            v.len()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{paraphrase_classes, Embedder, MockEmbedder, MockUnifier};

    fn batch(n: usize) -> Vec<InstructionRecord> {
        (0..n)
            .map(|i| InstructionRecord::new(format!("Make the box{i} red.")))
            .collect()
    }

    #[test]
    fn half_of_each_batch_is_unified() {
        let u = MockUnifier::new();
        for (n, expect) in [(1, 0), (2, 1), (4, 2), (7, 3), (10, 5)] {
            let out = augment_batch(&batch(n), &u, 0.5, 3).unwrap();
            assert_eq!(out.iter().filter(|r| r.used_unified).count(), expect);
            for r in &out {
                if r.used_unified {
                    assert_eq!(r.unified.as_deref(), Some(u.unify(&r.raw).unwrap().as_str()));
                    assert_eq!(r.text(), r.unified.as_deref().unwrap());
                } else {
                    assert_eq!(r.text(), r.raw);
                }
            }
        }
        assert!(augment_batch(&[], &u, 0.5, 0).is_err());
    }

    #[test]
    fn selection_is_seeded() {
        let u = MockUnifier::new();
        let a = augment_batch(&batch(16), &u, 0.5, 42).unwrap();
        let b = augment_batch(&batch(16), &u, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let differs = (0..20u64).any(|s| augment_batch(&batch(16), &u, 0.5, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn inference_path_counts_and_canonicalizes() {
        let u = MockUnifier::new();
        let before = inference_unification_count();
        assert_eq!(unify_for_inference("Make the dog a cat.", &u).unwrap(), "change the dog to a cat");
        assert_eq!(
            unify_for_inference("change the dog to a cat", &u).unwrap(),
            "change the dog to a cat"
        );
        assert!(inference_unification_count() >= before + 2);
        assert!(matches!(unify_for_inference("  ", &u), Err(Error::Validation(_))));
    }

    #[test]
    fn paraphrases_embed_identically_after_unification() {
        let (u, e) = (MockUnifier::new(), MockEmbedder::new());
        for class in paraphrase_classes() {
            let target = e.embed_text(&unify_for_inference(&class.canonical, &u).unwrap());
            for v in &class.variants {
                assert_eq!(e.embed_text(&unify_for_inference(v, &u).unwrap()), target);
            }
        }
    }
}
