//! Chat-template rendering and the answer-slot distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SoftPrompt, TransformerLM};
use crate::scalar::Scalar;
use crate::trace::{for_each_logits, log_softmax_row, WeightedTargets};
use crate::vocab::{tokenize, Token, VOCAB_SIZE};

/// The strings and loss weights of the question template.
///
/// Rendering is `[BOS, SYS, system, USER, user_prefix, x, ASST, answer?]`;
/// the soft prompt (if any) is injected in front of BOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChatTemplate {
    pub system: String,
    pub user_prefix: String,
    /// Loss weight of every template and text token.
    pub prompt_weight: f64,
    /// Loss weight of the answer token.
    pub answer_weight: f64,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self {
            system: "You are a helpful assistant.".into(),
            user_prefix:
                "Please tell me whether the given example is used in the training dataset: ".into(),
            prompt_weight: 0.01,
            answer_weight: 1.0,
        }
    }
}

/// A rendered sample; `answer_pos` indexes the ASST marker whose logits
/// predict the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub tokens: Vec<Token>,
    pub answer_pos: usize,
}

impl ChatTemplate {
    /// Number of template tokens around the text (answer included).
    pub fn overhead(&self) -> usize {
        5 + self.system.len() + self.user_prefix.len()
    }

    pub fn render(&self, text: &[u8], answer: Option<Token>) -> Rendered {
        let mut tokens = Vec::with_capacity(self.overhead() + text.len());
        tokens.push(Token::BOS);
        tokens.push(Token::SYS);
        tokens.extend(tokenize(self.system.as_bytes()));
        tokens.push(Token::USER);
        tokens.extend(tokenize(self.user_prefix.as_bytes()));
        tokens.extend(tokenize(text));
        let answer_pos = tokens.len();
        tokens.push(Token::ASST);
        if let Some(a) = answer {
            tokens.push(a);
        }
        Rendered { tokens, answer_pos }
    }

    /// Per-position weights of the language-modeling part of the hybrid
    /// loss for a rendering that includes its answer token.
    pub fn lm_targets<S: Scalar>(&self, r: &Rendered) -> WeightedTargets<S> {
        let (pw, aw) = (S::c(self.prompt_weight), S::c(self.answer_weight));
        let entries = (0..r.tokens.len() - 1)
            .map(|p| (p, r.tokens[p + 1], if p == r.answer_pos { aw } else { pw }))
            .collect();
        WeightedTargets { entries }
    }
}

/// The next-token distribution at the answer slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub probs: Vec<f64>,
    pub log_yes: f64,
    pub log_no: f64,
}

impl AnswerDistribution {
    fn from_logits<S: Scalar>(row: &[S]) -> Self {
        let lp = log_softmax_row(row);
        Self {
            log_yes: lp[Token::YES.index()],
            log_no: lp[Token::NO.index()],
            probs: lp.iter().map(|l| l.exp()).collect(),
        }
    }

    pub fn p_yes(&self) -> f64 {
        self.probs[Token::YES.index()]
    }

    pub fn p_no(&self) -> f64 {
        self.probs[Token::NO.index()]
    }

    /// Mass on every token other than YES and NO.
    pub fn p_others(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != Token::YES.index() && i != Token::NO.index())
            .map(|(_, p)| p)
            .sum()
    }

    /// `log P(YES) − log P(NO)`: non-negative exactly when YES is at least
    /// as likely as NO.
    pub fn log_ratio(&self) -> f64 {
        self.log_yes - self.log_no
    }
}

pub fn answer_distribution_batch<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    template: &ChatTemplate,
    texts: &[&[u8]],
) -> Result<Vec<AnswerDistribution>> {
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::Invalid(format!("text #{i} is empty")));
    }
    let rendered: Vec<Rendered> = texts.iter().map(|t| template.render(t, None)).collect();
    let seqs: Vec<Vec<Token>> = rendered.iter().map(|r| r.tokens.clone()).collect();
    let mut out = vec![None; texts.len()];
    for_each_logits(model, prompt, &seqs, |i, logits| {
        let p = rendered[i].answer_pos;
        out[i] = Some(AnswerDistribution::from_logits(
            &logits[p * VOCAB_SIZE..(p + 1) * VOCAB_SIZE],
        ));
        Ok(())
    })?;
    Ok(out.into_iter().map(|d| d.expect("every text visited")).collect())
}

pub fn answer_distribution<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    template: &ChatTemplate,
    text: &[u8],
) -> Result<AnswerDistribution> {
    Ok(answer_distribution_batch(model, prompt, template, &[text])?.remove(0))
}
