#![allow(dead_code)]

use mia_workbench::datasets::{generate_synthetic_corpus, BenchmarkSplit, SyntheticCorpusSpec};
use mia_workbench::model::{ModelConfig, TransformerLM};
use mia_workbench::train::{train_lm, TrainConfig};

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 2,
        context_length: 192,
        seed,
    }
}

pub fn tiny_split() -> BenchmarkSplit {
    generate_synthetic_corpus(&SyntheticCorpusSpec {
        seed: 3,
        n_members: 48,
        n_non_members: 48,
        doc_len: 48,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap()
}

/// A small model trained long enough on the member pool of [`tiny_split`]
/// to memorize it noticeably.
pub fn tiny_trained(config: ModelConfig) -> (TransformerLM<f64>, BenchmarkSplit) {
    let split = tiny_split();
    let corpus: Vec<Vec<u8>> = split.members.iter().map(|r| r.text.clone().into_bytes()).collect();
    let mut m = TransformerLM::new(config).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        lr: 5e-3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train_lm(&mut m, &corpus, &cfg).unwrap();
    (m, split)
}

pub fn texts(records: &[mia_workbench::datasets::TextRecord]) -> Vec<&[u8]> {
    records.iter().map(|r| r.text.as_bytes()).collect()
}

/// All-pairs AUC, ties counted half.
pub fn brute_auc(members: &[f64], non_members: &[f64]) -> f64 {
    let mut s = 0.0;
    for m in members {
        for n in non_members {
            s += if m > n {
                1.0
            } else if m == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (members.len() * non_members.len()) as f64
}

/// A complete run configuration small enough for integration tests.
pub fn tiny_run_config(seed: u64) -> mia_workbench::RunConfig {
    let mut c = mia_workbench::RunConfig {
        seed,
        ..mia_workbench::RunConfig::default()
    };
    c.data.synthetic.n_members = 40;
    c.data.synthetic.n_non_members = 40;
    c.data.synthetic.doc_len = 40;
    c.data.n_tuning_members = 8;
    c.data.n_tuning_non_members = 8;
    c.data.eval_per_class = Some(24);
    c.data.n_held_out = 8;
    c.model = ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 2,
        context_length: 192,
        seed: 0,
    };
    c.train.epochs = 20;
    c.train.lr = 5e-3;
    c.train.batch_size = 8;
    c.attack.epochs = 2;
    c.attack.batch_size = 8;
    c.defense.epochs = 1;
    c.defense.batch_size = 8;
    c.sweep.few_shot = vec![16];
    c.resolved()
}
