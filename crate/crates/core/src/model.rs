//! A small pre-norm decoder-only transformer over the byte vocabulary, plus
//! the soft prompt that can be injected in front of its token embeddings.
//!
//! Positions are encoded with rotary embeddings inside attention, so the
//! model has no absolute position table: prepending a soft prompt or a chat
//! template moves text to later positions without leaving the range the
//! model was trained on.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{Token, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the MLP as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Maximum number of positions (soft prompt + template + text).
    pub context_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 4,
            context_length: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("context_length", self.context_length),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{k}"), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config(
                "model.n_heads",
                "head width must be even for rotary positions",
            ));
        }
        Ok(())
    }

    /// Half width and half depth (at least one layer), the default shape of
    /// the smaller reference model.
    pub fn halved(&self) -> Self {
        let mut c = self.clone();
        c.d_model = (self.d_model / 2).max(2 * self.n_heads);
        c.n_layers = (self.n_layers / 2).max(1);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<S> {
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    w_qkv: Tensor<S>,
    b_qkv: Tensor<S>,
    w_o: Tensor<S>,
    b_o: Tensor<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    w_1: Tensor<S>,
    b_1: Tensor<S>,
    w_2: Tensor<S>,
    b_2: Tensor<S>,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.w_qkv",
    "attn.b_qkv",
    "attn.w_out",
    "attn.b_out",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w_in",
    "mlp.b_in",
    "mlp.w_out",
    "mlp.b_out",
];

impl<S: Scalar> Block<S> {
    fn tensors(&self) -> [&Tensor<S>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_o,
            &self.b_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

/// Frozen-or-trainable parameters of the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLM<S> {
    config: ModelConfig,
    tok_emb: Tensor<S>,
    blocks: Vec<Block<S>>,
    lnf_g: Tensor<S>,
    lnf_b: Tensor<S>,
    w_out: Tensor<S>,
}

/// Which parameters receive gradients when a model is bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    None,
    All,
    /// The last transformer block, final norm and output projection.
    FinalBlock,
}

/// Tape handles for every model parameter, in [`TransformerLM::named_params`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    all: Vec<Var>,
}

impl ModelVars {
    fn tok_emb(&self) -> Var {
        self.all[0]
    }
    fn block(&self, layer: usize, field: usize) -> Var {
        self.all[1 + layer * BLOCK_FIELDS.len() + field]
    }
    fn tail(&self, k: usize) -> Var {
        self.all[self.all.len() - 3 + k]
    }
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// One sequence of a packed forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PackedInput<'a> {
    /// `[n_p, d_model]` prompt node injected before the tokens.
    pub prompt: Option<Var>,
    pub tokens: &'a [Token],
}

/// Logits of a packed pass: `[rows, V]` plus the first token row of each input.
#[derive(Debug, Clone)]
pub struct PackedLogits {
    pub logits: Var,
    pub token_rows: Vec<usize>,
    pub lengths: Vec<usize>,
}

fn normal_tensor<S: Scalar>(rng: &mut Pcg64, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let v = (0..n).map(|_| S::c(dist.sample(rng))).collect();
    Tensor::parameter(shape, v).expect("shape")
}

fn const_tensor<S: Scalar>(shape: Vec<usize>, v: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::parameter(shape, vec![S::c(v); n]).expect("shape")
}

impl<S: Scalar> TransformerLM<S> {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg64::seed_from_u64(config.seed);
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal_tensor(&mut rng, vec![VOCAB_SIZE, d], INIT_STD);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: const_tensor(vec![d], 1.0),
                ln1_b: const_tensor(vec![d], 0.0),
                w_qkv: normal_tensor(&mut rng, vec![d, 3 * d], INIT_STD),
                b_qkv: const_tensor(vec![3 * d], 0.0),
                w_o: normal_tensor(&mut rng, vec![d, d], resid_std),
                b_o: const_tensor(vec![d], 0.0),
                ln2_g: const_tensor(vec![d], 1.0),
                ln2_b: const_tensor(vec![d], 0.0),
                w_1: normal_tensor(&mut rng, vec![d, hidden], INIT_STD),
                b_1: const_tensor(vec![hidden], 0.0),
                w_2: normal_tensor(&mut rng, vec![hidden, d], resid_std),
                b_2: const_tensor(vec![d], 0.0),
            })
            .collect();
        let w_out = normal_tensor(&mut rng, vec![d, VOCAB_SIZE], INIT_STD);
        Ok(Self {
            config,
            tok_emb,
            blocks,
            lnf_g: const_tensor(vec![d], 1.0),
            lnf_b: const_tensor(vec![d], 0.0),
            w_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gamma".into(), &self.lnf_g));
        out.push(("ln_f.beta".into(), &self.lnf_b));
        out.push(("lm_head".into(), &self.w_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Index range (in `named_params` order) touched by `Trainable::FinalBlock`.
    fn final_block_start(&self) -> usize {
        1 + (self.config.n_layers - 1) * BLOCK_FIELDS.len()
    }

    pub(crate) fn is_trainable(&self, index: usize, mode: Trainable) -> bool {
        match mode {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::FinalBlock => index >= self.final_block_start(),
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<S>, mode: Trainable) -> ModelVars {
        let all = self
            .named_params()
            .into_iter()
            .enumerate()
            .map(|(i, (_, t))| {
                let vals = t.values().to_vec();
                let shape = t.shape().to_vec();
                if self.is_trainable(i, mode) {
                    tape.variable(shape, vals)
                } else {
                    tape.constant(shape, vals)
                }
                .expect("parameter shape")
            })
            .collect();
        ModelVars { all }
    }

    /// Adds tape gradients of the bound parameters into the model tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, vars: &ModelVars) -> Result<()> {
        for (v, t) in vars.all.iter().zip(self.params_mut()) {
            tape.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    /// Mutable references to the parameters selected by `mode`.
    pub fn trainable_params_mut(&mut self, mode: Trainable) -> Vec<&mut Tensor<S>> {
        let start = self.final_block_start();
        self.params_mut()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| match mode {
                Trainable::None => false,
                Trainable::All => true,
                Trainable::FinalBlock => *i >= start,
            })
            .map(|(_, t)| t)
            .collect()
    }

    pub(crate) fn replace_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Invalid(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            **slot = p;
            slot.set_requires_grad(true);
        }
        Ok(())
    }

    /// Packed causal forward pass; each input is an independent sequence.
    pub fn forward_packed(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        inputs: &[PackedInput<'_>],
    ) -> Result<PackedLogits> {
        let c = &self.config;
        let d = c.d_model;
        let mut pieces = Vec::with_capacity(inputs.len() * 2);
        let mut lengths = Vec::with_capacity(inputs.len());
        let mut token_rows = Vec::with_capacity(inputs.len());
        let mut row = 0;
        for inp in inputs {
            let n_p = match inp.prompt {
                Some(p) => {
                    let shape = tape.shape(p);
                    if shape.len() != 2 || shape[1] != d {
                        return Err(Error::Invalid(format!(
                            "soft prompt shape {shape:?} does not match d_model {d}"
                        )));
                    }
                    shape[0]
                }
                None => 0,
            };
            let total = n_p + inp.tokens.len();
            if total > c.context_length {
                return Err(Error::ContextOverflow {
                    needed: total,
                    limit: c.context_length,
                });
            }
            if inp.tokens.is_empty() {
                return Err(Error::Invalid("empty token sequence".into()));
            }
            if let Some(p) = inp.prompt {
                pieces.push(p);
            }
            let ids: Vec<usize> = inp.tokens.iter().map(|t| t.index()).collect();
            pieces.push(tape.gather(vars.tok_emb(), &ids)?);
            token_rows.push(row + n_p);
            lengths.push(total);
            row += total;
        }
        let mut h = if pieces.len() == 1 {
            pieces[0]
        } else {
            tape.concat(&pieces, 0)?
        };
        let eps = S::c(LN_EPS);
        for l in 0..c.n_layers {
            let b = |f: usize| vars.block(l, f);
            let a = tape.layer_norm(h, b(0), b(1), eps)?;
            let qkv = tape.matmul(a, b(2))?;
            let qkv = tape.add(qkv, b(3))?;
            let att = tape.causal_attention(qkv, &lengths, c.n_heads, true)?;
            let o = tape.matmul(att, b(4))?;
            let o = tape.add(o, b(5))?;
            h = tape.add(h, o)?;
            let m = tape.layer_norm(h, b(6), b(7), eps)?;
            let u = tape.matmul(m, b(8))?;
            let u = tape.add(u, b(9))?;
            let u = tape.gelu(u);
            let u = tape.matmul(u, b(10))?;
            let u = tape.add(u, b(11))?;
            h = tape.add(h, u)?;
        }
        let f = tape.layer_norm(h, vars.tail(0), vars.tail(1), eps)?;
        let logits = tape.matmul(f, vars.tail(2))?;
        Ok(PackedLogits {
            logits,
            token_rows,
            lengths,
        })
    }

    /// Inference-only logits for the token positions of one sequence, `T x V`
    /// row-major.
    pub fn forward(&self, tokens: &[Token], prompt: Option<&SoftPrompt<S>>) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable::None);
        let pv = prompt.and_then(|p| p.bind(&mut tape, false));
        let out = self.forward_packed(
            &mut tape,
            &vars,
            &[PackedInput {
                prompt: pv,
                tokens,
            }],
        )?;
        let start = out.token_rows[0] * VOCAB_SIZE;
        Ok(tape.value(out.logits)[start..start + tokens.len() * VOCAB_SIZE].to_vec())
    }

    /// Zeroes the output projection (the model then predicts uniformly).
    pub fn zero_output_projection(&mut self) {
        self.w_out.values_mut().iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn cast<T: Scalar>(&self) -> TransformerLM<T> {
        let mut m = TransformerLM::<T>::new(self.config.clone()).expect("validated config");
        let params = self.named_params().into_iter().map(|(_, t)| t.cast()).collect();
        m.replace_params(params).expect("same architecture");
        m
    }
}

/// Tunable virtual-token embeddings prepended at the embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt<S> {
    d_model: usize,
    weights: Option<Tensor<S>>,
}

impl<S: Scalar> SoftPrompt<S> {
    /// Seeded normal initialization with standard deviation 0.02.
    pub fn init(len: usize, d_model: usize, seed: u64) -> Self {
        if len == 0 {
            return Self::empty(d_model);
        }
        let mut rng = Pcg64::seed_from_u64(seed);
        Self {
            d_model,
            weights: Some(normal_tensor(&mut rng, vec![len, d_model], INIT_STD)),
        }
    }

    pub fn empty(d_model: usize) -> Self {
        Self {
            d_model,
            weights: None,
        }
    }

    pub fn from_values(len: usize, d_model: usize, values: Vec<S>) -> Result<Self> {
        if len == 0 {
            return if values.is_empty() {
                Ok(Self::empty(d_model))
            } else {
                Err(Error::Invalid("values given for an empty soft prompt".into()))
            };
        }
        Ok(Self {
            d_model,
            weights: Some(Tensor::parameter(vec![len, d_model], values)?),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_none()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn values(&self) -> &[S] {
        self.weights.as_ref().map_or(&[], |w| w.values())
    }

    pub fn tensor_mut(&mut self) -> Option<&mut Tensor<S>> {
        self.weights.as_mut()
    }

    /// Records the prompt on a tape; `None` for an empty prompt.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Option<Var> {
        self.weights.as_ref().map(|w| {
            let (shape, vals) = (w.shape().to_vec(), w.values().to_vec());
            if trainable {
                tape.variable(shape, vals)
            } else {
                tape.constant(shape, vals)
            }
            .expect("prompt shape")
        })
    }
}
