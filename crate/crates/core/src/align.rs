//! Optional alignment pre-pass: teaches a base model the chat template and
//! to answer yes/no questions before it is attacked in aligned mode.
//!
//! The toy model is a plain next-token predictor, so it has no notion of
//! the template's role markers or of single-token answers. This pass full
//! fine-tunes it on generic template-rendered question/answer pairs built
//! from freshly generated text (never from either evaluation pool): intact
//! documents are answered YES and corrupted copies NO.

use std::collections::HashSet;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::datasets::{generate_synthetic_corpus, SyntheticCorpusSpec};
use crate::error::{Error, Result};
use crate::model::{Trainable, TransformerLM};
use crate::scalar::Scalar;
use crate::template::ChatTemplate;
use crate::train::{fit_examples, Example, TrainConfig, TrainReport};
use crate::vocab::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub enabled: bool,
    /// Question/answer pairs (half intact, half corrupted).
    pub n_pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of letters replaced in a corrupted copy.
    pub corruption: f64,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            n_pairs: 256,
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
            corruption: 0.3,
            seed: 11,
        }
    }
}

fn corrupt(text: &str, rate: f64, rng: &mut Pcg64) -> String {
    text.bytes()
        .map(|b| {
            if b.is_ascii_alphabetic() && rng.random_bool(rate) {
                rng.random_range(b'a'..=b'z') as char
            } else {
                b as char
            }
        })
        .collect()
}

/// Fine-tunes `model` on generic yes/no pairs. Texts in `exclude` are never
/// used.
pub fn align_model<S: Scalar>(
    model: &mut TransformerLM<S>,
    template: &ChatTemplate,
    generator: &SyntheticCorpusSpec,
    exclude: &HashSet<&str>,
    cfg: &AlignmentConfig,
) -> Result<TrainReport> {
    if !(cfg.corruption > 0.0 && cfg.corruption < 1.0) {
        return Err(Error::config("align.corruption", "must lie in (0, 1)"));
    }
    let half = cfg.n_pairs.div_ceil(2);
    let spec = SyntheticCorpusSpec {
        seed: cfg.seed,
        n_members: half + exclude.len().min(half),
        n_non_members: 1,
        ..generator.clone()
    };
    let fresh = generate_synthetic_corpus(&spec)?;
    let texts: Vec<&str> = fresh
        .members
        .iter()
        .map(|r| r.text.as_str())
        .filter(|t| !exclude.contains(t))
        .take(half)
        .collect();
    let mut rng = Pcg64::seed_from_u64(cfg.seed ^ 0xa11_6e);
    let mut examples = Vec::with_capacity(texts.len() * 2);
    for t in texts {
        let bad = corrupt(t, cfg.corruption, &mut rng);
        for (x, ans) in [(t.to_string(), Token::YES), (bad, Token::NO)] {
            let r = template.render(x.as_bytes(), Some(ans));
            let targets = template.lm_targets::<S>(&r);
            examples.push(Example {
                tokens: r.tokens,
                targets,
            });
        }
    }
    let train = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        max_len: usize::MAX,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    fit_examples(model, &examples, &train, Trainable::All)
}
