use std::collections::HashSet;

use chrono::NaiveDate;
use mia_workbench::datasets::*;
use proptest::prelude::*;

fn dated(id: &str, date: (i32, u32, u32)) -> TextRecord {
    let mut r = TextRecord::new(id, format!("text of {id}"), Label::NonMember);
    r.timestamp = NaiveDate::from_ymd_opt(date.0, date.1, date.2);
    r
}

#[test]
fn generator_is_deterministic_and_pools_are_disjoint() {
    let spec = SyntheticCorpusSpec {
        seed: 7,
        n_members: 64,
        n_non_members: 64,
        ..SyntheticCorpusSpec::default()
    };
    let a = generate_synthetic_corpus(&spec).unwrap();
    let b = generate_synthetic_corpus(&spec).unwrap();
    assert_eq!(a, b);
    let members: HashSet<&str> = a.members.iter().map(|r| r.text.as_str()).collect();
    assert!(a.non_members.iter().all(|r| !members.contains(r.text.as_str())));
    assert!(a.members.iter().all(|r| r.label == Label::Member));
    assert!(a.non_members.iter().all(|r| r.label == Label::NonMember));
}

#[test]
fn pools_share_one_byte_distribution() {
    let split = generate_synthetic_corpus(&SyntheticCorpusSpec {
        seed: 11,
        n_members: 512,
        n_non_members: 512,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap();
    let freq = |rs: &[TextRecord]| {
        let mut c = [0f64; 256];
        let mut total = 0.0;
        for r in rs {
            for &b in r.text.as_bytes() {
                c[b as usize] += 1.0;
                total += 1.0;
            }
        }
        c.map(|v| v / total)
    };
    let (p, q) = (freq(&split.members), freq(&split.non_members));
    let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn jsonl_parsing_and_domain_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(&path, "{\"input\":\"abc\",\"label\":1}\n").unwrap();
    let recs = load_jsonl(&path).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].text, "abc");
    assert_eq!(recs[0].label, Label::Member);

    std::fs::write(&path, "{\"input\":\"ok\",\"label\":0}\n{\"input\":\"x\",\"label\":2}\n").unwrap();
    let err = load_jsonl(&path).unwrap_err().to_string();
    assert!(err.contains(":2") || err.contains("line 2"), "{err}");

    std::fs::write(&path, "not json\n").unwrap();
    assert!(load_jsonl(&path).is_err());
}

#[test]
fn cutoff_partitions_the_input() {
    let recs = vec![
        dated("old", (2016, 5, 1)),
        dated("new", (2024, 5, 1)),
        dated("mid", (2020, 1, 1)),
        dated("on_bound", (2017, 1, 1)),
        dated("on_cutoff", (2024, 3, 1)),
    ];
    let out = split_by_cutoff(&recs, DEFAULT_CUTOFF, DEFAULT_MEMBER_BOUND).unwrap();
    let ids = |rs: &[TextRecord]| rs.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&out.split.members), ["old"]);
    assert_eq!(ids(&out.split.non_members), ["new"]);
    assert_eq!(ids(&out.excluded), ["mid", "on_bound", "on_cutoff"]);
    assert_eq!(
        out.split.members.len() + out.split.non_members.len() + out.excluded.len(),
        recs.len()
    );
}

#[test]
fn tuning_subsets_are_disjoint_from_eval() {
    let split = generate_synthetic_corpus(&SyntheticCorpusSpec {
        seed: 2,
        n_members: 100,
        n_non_members: 100,
        doc_len: 32,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap();
    let s = sample_tuning_set(&split, 30, 30, 5).unwrap();
    assert_eq!(s.tuning().len(), 60);
    let tuning: HashSet<&str> = s.tuning().iter().map(|r| r.id.as_str()).collect();
    let eval = s.eval(None);
    assert_eq!(eval.len(), 140);
    assert!(eval.iter().all(|r| !tuning.contains(r.id.as_str())));
    assert_eq!(s, sample_tuning_set(&split, 30, 30, 5).unwrap());

    let none = sample_tuning_set(&split, 0, 0, 5).unwrap();
    assert_eq!(none.eval(None).len(), 200);
    assert!(sample_tuning_set(&split, 101, 0, 5).is_err());
}

fn arb_record() -> impl Strategy<Value = TextRecord> {
    (
        "[a-zA-Z0-9_-]{1,12}",
        "\\PC{1,40}",
        any::<bool>(),
        proptest::option::of((1990i32..2030, 1u32..13, 1u32..29)),
    )
        .prop_map(|(id, text, member, ts)| TextRecord {
            id,
            text,
            label: if member { Label::Member } else { Label::NonMember },
            timestamp: ts.and_then(|(y, m, d)| NaiveDate::from_ymd_opt(y, m, d)),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn jsonl_roundtrip_is_lossless(records in proptest::collection::vec(arb_record(), 100)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        save_jsonl(&records, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(std::fs::read(&path).unwrap(), to_jsonl(&back).unwrap());
    }

    #[test]
    fn cutoff_covers_every_record_once(records in proptest::collection::vec(arb_record(), 1..60)) {
        let dated: Vec<TextRecord> = records.into_iter().filter(|r| r.timestamp.is_some()).collect();
        let out = split_by_cutoff(&dated, DEFAULT_CUTOFF, DEFAULT_MEMBER_BOUND).unwrap();
        prop_assert_eq!(
            out.split.members.len() + out.split.non_members.len() + out.excluded.len(),
            dated.len()
        );
        prop_assert!(out.split.members.iter().all(|r| r.timestamp.unwrap() < DEFAULT_MEMBER_BOUND));
        prop_assert!(out.split.non_members.iter().all(|r| r.timestamp.unwrap() > DEFAULT_CUTOFF));
    }
}
