mod common;

use mia_workbench::artifact::{load_model, save_model};
use mia_workbench::model::{SoftPrompt, TransformerLM};
use mia_workbench::trace::{sequence_nll, trace, Reduction};
use mia_workbench::train::{train_lm, TrainConfig};
use mia_workbench::vocab::{detokenize, tokenize, with_bos, VOCAB_SIZE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use common::*;

/// Log-softmax by direct summation, independent of the fused kernels.
fn naive_log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| v - m - z.ln()).collect()
}

#[test]
fn uniform_model_nll_is_log_vocab() {
    let mut m = TransformerLM::<f64>::new(tiny_config(1)).unwrap();
    m.zero_output_projection();
    let text = b"0123456789";
    let v = (VOCAB_SIZE as f64).ln();
    assert!((sequence_nll(&m, None, text, Reduction::Sum).unwrap() - 10.0 * v).abs() < 1e-9);
    assert!((sequence_nll(&m, None, text, Reduction::Mean).unwrap() - v).abs() < 1e-12);
    assert!((v - 5.572).abs() < 1e-3);
}

#[test]
fn trace_matches_explicit_summation_over_the_vocabulary() {
    let (m, split) = tiny_trained(tiny_config(4));
    let text = split.members[1].text.as_bytes();
    let tr = trace(&m, None, text).unwrap();
    assert_eq!(tr.len(), text.len());
    let tokens = with_bos(text);
    let logits = m.forward(&tokens, None).unwrap();
    let mut sum = 0.0;
    for i in 0..text.len() {
        let lp = naive_log_softmax(&logits[i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE]);
        let mu: f64 = lp.iter().map(|l| l.exp() * l).sum();
        let second: f64 = lp.iter().map(|l| l.exp() * l * l).sum();
        let sd = (second - mu * mu).max(0.0).sqrt();
        assert!((tr.mean[i] - mu).abs() < 1e-10);
        assert!((tr.std[i] - sd).abs() < 1e-6);
        assert!(tr.mean[i] <= 0.0 && tr.std[i] >= 0.0);
        let target = tokens[i + 1].index();
        assert!((tr.target_logp[i] - lp[target]).abs() < 1e-10);
        sum -= lp[target];
    }
    assert!((sequence_nll(&m, None, text, Reduction::Sum).unwrap() - sum).abs() < 1e-10);
}

#[test]
fn prompt_shifts_positions_but_not_the_scored_set() {
    let m = TransformerLM::<f64>::new(tiny_config(2)).unwrap();
    let p = SoftPrompt::init(8, 32, 1);
    let text = b"scored text";
    let with = trace(&m, Some(&p), text).unwrap();
    let without = trace(&m, None, text).unwrap();
    assert_eq!(with.len(), without.len());
    assert_ne!(with.target_logp, without.target_logp);
}

#[test]
fn memorizing_a_sentence_separates_it_from_a_disjoint_one() {
    let seen = b"the river crossed the old stone bridge at noon.".to_vec();
    let unseen = b"QUARTERLY 4471 ZX revenue; margins: 9%, 12%!".to_vec();
    let mut m = TransformerLM::<f64>::new(tiny_config(3)).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        lr: 5e-3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let report = train_lm(&mut m, &vec![seen.clone(); 4], &cfg).unwrap();
    let a = sequence_nll(&m, None, &seen, Reduction::Mean).unwrap();
    let b = sequence_nll(&m, None, &unseen, Reduction::Mean).unwrap();
    assert!(a < 0.5, "seen {a}");
    assert!(b > 2.0, "unseen {b}");
    assert!(report.final_loss().unwrap() < 0.1 * report.initial_nll);
}

#[test]
fn checkpoint_reload_reproduces_traces_bit_exactly() {
    let (m, split) = tiny_trained(tiny_config(8));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&m, &path).unwrap();
    let back: TransformerLM<f64> = load_model(&path).unwrap();
    let text = split.non_members[0].text.as_bytes();
    assert_eq!(trace(&m, None, text).unwrap(), trace(&back, None, text).unwrap());
}

#[test]
fn random_byte_strings_roundtrip() {
    let mut rng = Pcg64::seed_from_u64(64);
    for _ in 0..32 {
        let bytes: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 0xff) as u8).collect();
        assert_eq!(detokenize(&tokenize(&bytes)), bytes);
    }
}

proptest! {
    #[test]
    fn tokenize_roundtrips(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
        let t = tokenize(&bytes);
        prop_assert_eq!(t.len(), bytes.len());
        prop_assert_eq!(detokenize(&t), bytes);
    }
}
