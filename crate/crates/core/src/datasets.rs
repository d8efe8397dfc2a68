//! Member / non-member corpora: synthetic generation, JSONL files, cutoff
//! splitting and tuning-set sampling.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    NonMember,
    Member,
}

impl Label {
    pub fn is_member(self) -> bool {
        self == Label::Member
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::NonMember),
            1 => Ok(Label::Member),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub timestamp: Option<NaiveDate>,
}

impl TextRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
            timestamp: None,
        }
    }
}

/// Members, non-members, and which of each are reserved for tuning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkSplit {
    pub members: Vec<TextRecord>,
    pub non_members: Vec<TextRecord>,
    /// Sorted indices into `members`.
    pub tuning_members: Vec<usize>,
    /// Sorted indices into `non_members`.
    pub tuning_non_members: Vec<usize>,
}

impl BenchmarkSplit {
    pub fn new(members: Vec<TextRecord>, non_members: Vec<TextRecord>) -> Result<Self> {
        for r in &members {
            if r.label != Label::Member {
                return Err(Error::Invalid(format!("record {} in member pool has label 0", r.id)));
            }
        }
        for r in &non_members {
            if r.label != Label::NonMember {
                return Err(Error::Invalid(format!(
                    "record {} in non-member pool has label 1",
                    r.id
                )));
            }
        }
        Ok(Self {
            members,
            non_members,
            ..Self::default()
        })
    }

    /// Splits labeled records into the two pools, preserving order.
    pub fn from_records(records: Vec<TextRecord>) -> Self {
        let (members, non_members) = records.into_iter().partition(|r| r.label.is_member());
        Self {
            members,
            non_members,
            ..Self::default()
        }
    }

    pub fn tuning(&self) -> Vec<&TextRecord> {
        let m = self.tuning_members.iter().map(|&i| &self.members[i]);
        let n = self.tuning_non_members.iter().map(|&i| &self.non_members[i]);
        m.chain(n).collect()
    }

    pub fn eval_members(&self) -> Vec<&TextRecord> {
        remainder(&self.members, &self.tuning_members)
    }

    pub fn eval_non_members(&self) -> Vec<&TextRecord> {
        remainder(&self.non_members, &self.tuning_non_members)
    }

    /// Evaluation records (members first), at most `limit` per class.
    pub fn eval(&self, limit: Option<usize>) -> Vec<&TextRecord> {
        let cap = limit.unwrap_or(usize::MAX);
        let mut out: Vec<&TextRecord> = self.eval_members().into_iter().take(cap).collect();
        out.extend(self.eval_non_members().into_iter().take(cap));
        out
    }
}

fn remainder<'a>(pool: &'a [TextRecord], taken: &[usize]) -> Vec<&'a TextRecord> {
    let skip: HashSet<usize> = taken.iter().copied().collect();
    pool.iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(_, r)| r)
        .collect()
}

/// Reserves `n_member` + `n_non_member` uniformly drawn records for tuning.
pub fn sample_tuning_set(
    split: &BenchmarkSplit,
    n_member: usize,
    n_non_member: usize,
    seed: u64,
) -> Result<BenchmarkSplit> {
    let (m, n) = (split.members.len(), split.non_members.len());
    if n_member > m || n_non_member > n {
        return Err(Error::Insufficient(format!(
            "requested {n_member} members and {n_non_member} non-members for tuning, \
             pools hold {m} and {n}"
        )));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut draw = |pool: usize, k: usize| {
        let mut idx = rand::seq::index::sample(&mut rng, pool, k).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut out = split.clone();
    out.tuning_members = draw(m, n_member);
    out.tuning_non_members = draw(n, n_non_member);
    Ok(out)
}

pub const DEFAULT_CUTOFF: NaiveDate = match NaiveDate::from_ymd_opt(2024, 3, 1) {
    Some(d) => d,
    None => unreachable!(),
};
pub const DEFAULT_MEMBER_BOUND: NaiveDate = match NaiveDate::from_ymd_opt(2017, 1, 1) {
    Some(d) => d,
    None => unreachable!(),
};

#[derive(Debug, Clone, PartialEq)]
pub struct CutoffSplit {
    pub split: BenchmarkSplit,
    /// Records dated within `[member_bound, cutoff]`.
    pub excluded: Vec<TextRecord>,
}

/// Labels records by date: strictly before `member_bound` → member, strictly
/// after `cutoff` → non-member, anything in between (bounds included) is
/// excluded.
pub fn split_by_cutoff(
    records: &[TextRecord],
    cutoff: NaiveDate,
    member_bound: NaiveDate,
) -> Result<CutoffSplit> {
    if member_bound > cutoff {
        return Err(Error::config(
            "member_bound",
            format!("{member_bound} is later than the cutoff {cutoff}"),
        ));
    }
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| r.timestamp.is_none())
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "{} record(s) without timestamp: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut out = CutoffSplit {
        split: BenchmarkSplit::default(),
        excluded: Vec::new(),
    };
    for r in records {
        let ts = r.timestamp.expect("checked above");
        let mut r = r.clone();
        if ts < member_bound {
            r.label = Label::Member;
            out.split.members.push(r);
        } else if ts > cutoff {
            r.label = Label::NonMember;
            out.split.non_members.push(r);
        } else {
            out.excluded.push(r);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    input: String,
    label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp: Option<NaiveDate>,
}

/// Reads one record per line; blank lines are skipped. Records without an
/// `"id"` get `line-<n>`.
pub fn load_jsonl(path: &Path) -> Result<Vec<TextRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.input.is_empty() {
            return Err(parse_err("empty \"input\"".into()));
        }
        out.push(TextRecord {
            id: rec.id.unwrap_or_else(|| format!("line-{}", i + 1)),
            text: rec.input,
            label: rec.label,
            timestamp: rec.timestamp,
        });
    }
    Ok(out)
}

pub fn to_jsonl(records: &[TextRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        let jr = JsonRecord {
            id: Some(r.id.clone()),
            input: r.text.clone(),
            label: r.label,
            timestamp: r.timestamp,
        };
        serde_json::to_writer(&mut buf, &jr)?;
        buf.write_all(b"\n").expect("write to Vec");
    }
    Ok(buf)
}

pub fn save_jsonl(records: &[TextRecord], path: &Path) -> Result<()> {
    write_atomic(path, &to_jsonl(records)?)
}

/// Parameters of the template-grammar news generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub n_members: usize,
    pub n_non_members: usize,
    /// Document length in bytes (one byte per token).
    pub doc_len: usize,
    /// Per-byte probability of replacing a letter with a random one.
    pub noise_rate: f64,
    /// How many entries of each entity pool are used (capped at the pool size).
    pub pool_size: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_members: 512,
            n_non_members: 512,
            doc_len: 128,
            noise_rate: 0.0,
            pool_size: 32,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 || self.n_non_members == 0 {
            return Err(Error::config("data.n_members", "both pools need at least one document"));
        }
        if self.doc_len < 8 {
            return Err(Error::config("data.doc_len", "must be at least 8"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config("data.noise_rate", "must lie in [0, 1)"));
        }
        if self.pool_size == 0 {
            return Err(Error::config("data.pool_size", "must be positive"));
        }
        Ok(())
    }
}

const FIRST: &[&str] = &[
    "Anna", "Boris", "Carla", "David", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Kira",
    "Liam", "Maya", "Nils", "Olga", "Pavel", "Rosa", "Samir", "Tara", "Umar", "Vera", "Wei",
    "Xenia", "Yusuf", "Zoe", "Amir", "Bianca", "Cyril", "Dana", "Emil", "Fiona", "Goran",
];
const LAST: &[&str] = &[
    "Adler", "Brandt", "Costa", "Duarte", "Evans", "Fischer", "Garcia", "Horvat", "Ivanov",
    "Jensen", "Kowalski", "Larsen", "Moreau", "Novak", "Okafor", "Petrov", "Quinn", "Rossi",
    "Sato", "Tanaka", "Urban", "Varga", "Weber", "Xu", "Yilmaz", "Zhang", "Albrecht", "Bauer",
    "Castro", "Dobrev", "Engel", "Ferrari",
];
const CITY: &[&str] = &[
    "Lisbon", "Oslo", "Kyoto", "Lagos", "Quito", "Riga", "Perth", "Dakar", "Hanoi", "Tunis",
    "Porto", "Turin", "Gdansk", "Malmo", "Cusco", "Osaka", "Split", "Cork", "Ghent", "Bergen",
    "Leeds", "Lyon", "Graz", "Brno", "Basel", "Izmir", "Mumbai", "Dubai", "Cairo", "Accra",
    "Lima", "Tartu",
];
const ORG: &[&str] = &[
    "the city council", "a local bank", "the university", "a rail operator", "the port authority",
    "a hospital group", "the water board", "a tech startup", "the museum", "a farming cooperative",
    "the energy agency", "a shipping firm", "the central library", "a football club",
    "the health ministry", "a film studio", "the weather office", "a chemical plant",
    "the tax office", "a textile maker", "the science academy", "a steel works", "the zoo",
    "a wine estate", "the post office", "a bus company", "the airport", "an insurance firm",
    "the opera house", "a publishing house", "the court", "a research lab",
];
const ACTION: &[&str] = &[
    "announced", "opened", "cancelled", "approved", "rejected", "delayed", "expanded", "sold",
    "bought", "renovated", "closed", "funded", "tested", "launched", "reviewed", "merged",
    "restored", "moved", "signed", "paused", "doubled", "halved", "planned", "finished",
    "inspected", "rebuilt", "leased", "audited", "designed", "unveiled", "shared", "ranked",
];
const OBJECT: &[&str] = &[
    "a new bridge", "the budget", "a solar farm", "the old harbor", "a bike lane", "a vaccine trial",
    "the night market", "a tram line", "the archive", "a flood barrier", "the stadium", "a school",
    "a data center", "the ferry route", "a wind park", "the main square", "a clinic", "the tunnel",
    "a housing plan", "the city park", "a water plant", "the airport hub", "a concert hall",
    "the coastal road", "a theater", "a seed bank", "the canal", "a chip factory", "the library",
    "a sports hall", "the market hall", "a rescue fleet",
];
const MONTH: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];
const UNIT: &[&str] = &["workers", "tonnes", "euros", "homes", "beds", "visitors", "seats", "trees"];

struct Pools {
    size: usize,
}

impl Pools {
    fn pick<'a, R: Rng + ?Sized>(&self, rng: &mut R, pool: &'a [&'a str]) -> &'a str {
        let n = self.size.min(pool.len());
        pool[..n].choose(rng).expect("non-empty pool")
    }
}

fn sentence<R: Rng + ?Sized>(rng: &mut R, p: &Pools) -> String {
    let person = format!("{} {}", p.pick(rng, FIRST), p.pick(rng, LAST));
    let city = p.pick(rng, CITY);
    let org = p.pick(rng, ORG);
    let act = p.pick(rng, ACTION);
    let obj = p.pick(rng, OBJECT);
    let month = MONTH.choose(rng).expect("months");
    let day = rng.random_range(1..=28);
    let year = rng.random_range(1990..=2023);
    let num = rng.random_range(2..=999);
    let unit = UNIT.choose(rng).expect("units");
    match rng.random_range(0..6) {
        0 => format!("On {month} {day}, {year}, {org} in {city} {act} {obj}. "),
        1 => format!("{person} said {org} {act} {obj} with {num} {unit}. "),
        2 => format!("In {city}, {person} {act} {obj} in {month} {year}. "),
        3 => format!("{org} of {city} {act} {obj}, {person} told reporters. "),
        4 => format!("By {year} {city} had {num} {unit} after {org} {act} {obj}. "),
        _ => format!("{person} of {city} {act} {obj} on {month} {day}. "),
    }
}

fn capitalize(s: &mut String) {
    if let Some(c) = s.get(..1) {
        let up = c.to_ascii_uppercase();
        s.replace_range(..1, &up);
    }
}

fn document<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticCorpusSpec, p: &Pools) -> String {
    let mut doc = String::new();
    while doc.len() < spec.doc_len {
        let mut s = sentence(rng, p);
        capitalize(&mut s);
        doc.push_str(&s);
    }
    let mut bytes = doc.into_bytes();
    bytes.truncate(spec.doc_len);
    if spec.noise_rate > 0.0 {
        for b in bytes.iter_mut() {
            if b.is_ascii_lowercase() && rng.random_bool(spec.noise_rate) {
                *b = rng.random_range(b'a'..=b'z');
            }
        }
    }
    String::from_utf8(bytes).expect("generator emits ASCII")
}

/// Draws both pools i.i.d. from one generator; duplicate texts are redrawn so
/// the pools are disjoint.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<BenchmarkSplit> {
    spec.validate()?;
    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let pools = Pools { size: spec.pool_size };
    let mut seen = HashSet::new();
    let total = spec.n_members + spec.n_non_members;
    let mut docs = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while docs.len() < total {
        attempts += 1;
        if attempts > total * 100 {
            return Err(Error::config(
                "data.pool_size",
                "generator cannot produce enough distinct documents",
            ));
        }
        let d = document(&mut rng, spec, &pools);
        if seen.insert(d.clone()) {
            docs.push(d);
        }
    }
    // Interleaved assignment keeps both pools drawn from the same stream.
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut members = Vec::with_capacity(spec.n_members);
    let mut non_members = Vec::with_capacity(spec.n_non_members);
    for (k, &i) in order.iter().enumerate() {
        let text = std::mem::take(&mut docs[i]);
        if k < spec.n_members {
            members.push(TextRecord::new(format!("mem-{:04}", members.len()), text, Label::Member));
        } else {
            non_members.push(TextRecord::new(
                format!("non-{:04}", non_members.len()),
                text,
                Label::NonMember,
            ));
        }
    }
    BenchmarkSplit::new(members, non_members)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn dated(id: &str, d: NaiveDate) -> TextRecord {
        TextRecord {
            timestamp: Some(d),
            ..TextRecord::new(id, "text", Label::NonMember)
        }
    }

    #[test]
    fn cutoff_labels_follow_the_bounds() {
        let recs = vec![
            dated("a", date(2016, 5, 1)),
            dated("b", date(2024, 5, 1)),
            dated("c", date(2020, 1, 1)),
            dated("d", DEFAULT_MEMBER_BOUND),
            dated("e", DEFAULT_CUTOFF),
        ];
        let s = split_by_cutoff(&recs, DEFAULT_CUTOFF, DEFAULT_MEMBER_BOUND).unwrap();
        assert_eq!(s.split.members.len(), 1);
        assert_eq!(s.split.members[0].id, "a");
        assert_eq!(s.split.non_members[0].id, "b");
        assert_eq!(s.excluded.len(), 3);
    }

    #[test]
    fn missing_timestamps_are_listed() {
        let recs = vec![
            dated("a", date(2016, 5, 1)),
            TextRecord::new("x1", "t", Label::Member),
            TextRecord::new("x2", "t", Label::Member),
        ];
        let err = split_by_cutoff(&recs, DEFAULT_CUTOFF, DEFAULT_MEMBER_BOUND).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x1") && msg.contains("x2"), "{msg}");
    }

    #[test]
    fn labels_reject_other_values() {
        assert!(serde_json::from_str::<Label>("2").is_err());
        assert_eq!(serde_json::from_str::<Label>("1").unwrap(), Label::Member);
    }

    #[test]
    fn generator_respects_length_and_disjointness() {
        let spec = SyntheticCorpusSpec {
            n_members: 40,
            n_non_members: 40,
            ..SyntheticCorpusSpec::default()
        };
        let s = generate_synthetic_corpus(&spec).unwrap();
        assert!(s.members.iter().chain(&s.non_members).all(|r| r.text.len() == 128));
        let m: HashSet<_> = s.members.iter().map(|r| &r.text).collect();
        assert!(s.non_members.iter().all(|r| !m.contains(&r.text)));
    }

    #[test]
    fn tuning_sample_sizes() {
        let spec = SyntheticCorpusSpec {
            n_members: 50,
            n_non_members: 50,
            ..SyntheticCorpusSpec::default()
        };
        let s = generate_synthetic_corpus(&spec).unwrap();
        let t = sample_tuning_set(&s, 0, 0, 1).unwrap();
        assert_eq!(t.eval(None).len(), 100);
        let t = sample_tuning_set(&s, 30, 30, 1).unwrap();
        assert_eq!(t.tuning().len(), 60);
        assert_eq!(t.eval(None).len(), 40);
        assert!(matches!(sample_tuning_set(&s, 51, 0, 1), Err(Error::Insufficient(_))));
    }
}
