//! Deterministic generators for the two synthetic parent/child corpora.
//!
//! v1 sentences read `"[villager] is the parent of [child]"`; v2 inserts an
//! irrelevant descriptor clause: `"[villager], who [desc], is the parent of
//! [child]"`. For a fixed seed the villager/child relations of v1 and v2 are
//! identical — v2 only adds the descriptors — which is what makes the paired
//! train-on-v2 / test-with-v1 comparison meaningful.
//!
//! Names are pronounceable consonant-vowel syllable strings drawn without
//! replacement, so pools never run dry at the default sizes and every child
//! name is a single token under the word tokenizer by construction.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MacondoVersion {
    V1,
    V2,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VillagerRecord {
    pub villager_id: u32,
    pub first_name: String,
    pub last_name: String,
    pub children: Vec<String>,
    pub descriptor: Option<String>,
}

impl VillagerRecord {
    pub fn full_name(&self) -> String {
        format!("{} {}", self.first_name, self.last_name)
    }
}

#[derive(Debug, Clone)]
pub struct MacondoDataset {
    pub version: MacondoVersion,
    pub records: Vec<VillagerRecord>,
    pub sentences: Vec<String>,
    pub seed: u64,
}

/// Generation knobs. `villagers_per_group` villagers get exactly `c`
/// children for each `c` in `1..=child_count_groups`.
#[derive(Debug, Clone)]
pub struct MacondoSpec {
    pub villagers_per_group: usize,
    pub child_count_groups: usize,
    pub syllables_per_name: usize,
    pub first_name_pool: usize,
    pub last_name_pool: usize,
    pub descriptor_pool: Vec<String>,
}

impl Default for MacondoSpec {
    fn default() -> Self {
        MacondoSpec {
            villagers_per_group: 100,
            child_count_groups: 5,
            syllables_per_name: 3,
            first_name_pool: 160,
            last_name_pool: 160,
            descriptor_pool: default_descriptor_pool(),
        }
    }
}

impl MacondoSpec {
    pub fn villager_count(&self) -> usize {
        self.villagers_per_group * self.child_count_groups
    }

    pub fn sentence_count(&self) -> usize {
        // groups 1..=g, each with `per_group` villagers: per_group · g(g+1)/2
        self.villagers_per_group * self.child_count_groups * (self.child_count_groups + 1) / 2
    }
}

const CONSONANTS: [char; 16] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'y', 'z', 'j'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

fn syllable_name(rng: &mut ChaCha12Rng, syllables: usize, capitalize: bool) -> String {
    let mut s = String::with_capacity(2 * syllables);
    for i in 0..syllables {
        let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
        let v = VOWELS[rng.random_range(0..VOWELS.len())];
        if i == 0 && capitalize {
            s.extend(c.to_uppercase());
        } else {
            s.push(c);
        }
        s.push(v);
    }
    s
}

fn fresh_name(
    rng: &mut ChaCha12Rng,
    used: &mut BTreeSet<String>,
    syllables: usize,
    pool: &'static str,
) -> Result<String> {
    for _ in 0..10_000 {
        let name = syllable_name(rng, syllables, true);
        if used.insert(name.clone()) {
            return Ok(name);
        }
    }
    Err(CoreError::NamePoolExhausted(pool))
}

/// 50 short habit/occupation predicates, one assigned per villager in v2.
pub fn default_descriptor_pool() -> Vec<String> {
    [
        "raises bees", "mends nets", "bakes rye bread", "carves oars", "herds goats",
        "paints fences", "grinds maize", "repairs clocks", "weaves baskets", "plants almond trees",
        "salts fish", "forges horseshoes", "tends orchids", "sweeps the chapel", "binds old books",
        "brews chicory", "trains pigeons", "digs wells", "dries tobacco", "stitches sails",
        "collects rainwater", "polishes stones", "keeps the ledger", "waters the plaza", "sharpens knives",
        "hums old waltzes", "feeds stray dogs", "studies comets", "presses olives", "sorts seashells",
        "patches roofs", "spins wool", "sings at dawn", "counts swallows", "peels chestnuts",
        "guards the bridge", "draws river maps", "cures leather", "plays the accordion", "whittles flutes",
        "smokes eels", "grows blue corn", "teaches checkers", "rings the bell", "braids rope",
        "ferments plums", "sketches clouds", "mops the arcade", "breeds canaries", "stacks firewood",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn generate_records(seed: u64, spec: &MacondoSpec) -> Result<Vec<VillagerRecord>> {
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut names_rng = substream(seed, "macondo.names");
    let mut firsts = Vec::with_capacity(spec.first_name_pool);
    for _ in 0..spec.first_name_pool {
        firsts.push(fresh_name(&mut names_rng, &mut used, spec.syllables_per_name, "first")?);
    }
    let mut lasts = Vec::with_capacity(spec.last_name_pool);
    for _ in 0..spec.last_name_pool {
        lasts.push(fresh_name(&mut names_rng, &mut used, spec.syllables_per_name, "last")?);
    }

    // unique (first, last) combinations
    let mut pair_rng = substream(seed, "macondo.pairs");
    let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
    let n_villagers = spec.villager_count();
    if n_villagers > spec.first_name_pool * spec.last_name_pool {
        return Err(CoreError::NamePoolExhausted("full-name"));
    }
    let mut pairs = Vec::with_capacity(n_villagers);
    while pairs.len() < n_villagers {
        let p = (
            pair_rng.random_range(0..spec.first_name_pool),
            pair_rng.random_range(0..spec.last_name_pool),
        );
        if taken.insert(p) {
            pairs.push(p);
        }
    }

    let mut child_rng = substream(seed, "macondo.children");
    let mut records = Vec::with_capacity(n_villagers);
    for (i, &(fi, la)) in pairs.iter().enumerate() {
        let n_children = i / spec.villagers_per_group + 1;
        let mut children = Vec::with_capacity(n_children);
        for _ in 0..n_children {
            children.push(fresh_name(&mut child_rng, &mut used, spec.syllables_per_name, "child")?);
        }
        records.push(VillagerRecord {
            villager_id: i as u32,
            first_name: firsts[fi].clone(),
            last_name: lasts[la].clone(),
            children,
            descriptor: None,
        });
    }
    Ok(records)
}

fn render(records: &[VillagerRecord], version: MacondoVersion) -> Vec<String> {
    let mut sentences = Vec::new();
    for r in records {
        for child in &r.children {
            let s = match (&version, &r.descriptor) {
                (MacondoVersion::V2, Some(desc)) => format!(
                    "{} {}, who {}, is the parent of {}",
                    r.first_name, r.last_name, desc, child
                ),
                _ => format!("{} {} is the parent of {}", r.first_name, r.last_name, child),
            };
            sentences.push(s);
        }
    }
    sentences
}

/// Macondo v1: villagers in `child_count_groups` equal groups by number of
/// children, one sentence per (villager, child) pair.
pub fn generate_v1(seed: u64, spec: &MacondoSpec) -> Result<MacondoDataset> {
    let records = generate_records(seed, spec)?;
    let sentences = render(&records, MacondoVersion::V1);
    Ok(MacondoDataset { version: MacondoVersion::V1, records, sentences, seed })
}

/// Macondo v2: identical relations to `generate_v1(seed)`, plus one fixed
/// descriptor per villager (drawn with replacement from the pool).
pub fn generate_v2(seed: u64, spec: &MacondoSpec) -> Result<MacondoDataset> {
    if spec.descriptor_pool.is_empty() {
        return Err(CoreError::EmptyDescriptorPool);
    }
    let mut records = generate_records(seed, spec)?;
    let mut desc_rng = substream(seed, "macondo.descriptors");
    for r in &mut records {
        let d = &spec.descriptor_pool[desc_rng.random_range(0..spec.descriptor_pool.len())];
        r.descriptor = Some(d.clone());
    }
    let sentences = render(&records, MacondoVersion::V2);
    Ok(MacondoDataset { version: MacondoVersion::V2, records, sentences, seed })
}

/// An evaluation prompt with its gold child set.
#[derive(Debug, Clone)]
pub struct EvalPrompt {
    pub villager_id: u32,
    pub prompt: String,
    pub gold_children: Vec<String>,
}

/// The paired test view: v1-style prompts (descriptors absent) with gold
/// children taken from a v2 dataset's relations.
pub fn test_view_v1(dataset: &MacondoDataset) -> Result<Vec<EvalPrompt>> {
    if dataset.version != MacondoVersion::V2 {
        return Err(CoreError::InvalidConfig(
            "test_view_v1 requires a v2 dataset".into(),
        ));
    }
    Ok(prompts_v1(&dataset.records))
}

/// v1-style prompts for any record set (used directly for v1 datasets too).
pub fn prompts_v1(records: &[VillagerRecord]) -> Vec<EvalPrompt> {
    records
        .iter()
        .filter(|r| !r.children.is_empty())
        .map(|r| EvalPrompt {
            villager_id: r.villager_id,
            prompt: format!("{} {} is the parent of", r.first_name, r.last_name),
            gold_children: r.children.clone(),
        })
        .collect()
}

/// v2-style prompts (descriptor clause included); the memorization probe on
/// the v2 training distribution itself.
pub fn prompts_v2(records: &[VillagerRecord]) -> Result<Vec<EvalPrompt>> {
    records
        .iter()
        .filter(|r| !r.children.is_empty())
        .map(|r| {
            let desc = r.descriptor.as_ref().ok_or_else(|| {
                CoreError::InvalidConfig("v2 prompts need descriptors".into())
            })?;
            Ok(EvalPrompt {
                villager_id: r.villager_id,
                prompt: format!(
                    "{} {}, who {}, is the parent of",
                    r.first_name, r.last_name, desc
                ),
                gold_children: r.children.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Jsonl,
    Plain,
    Conversational,
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Render the dataset in one of the export formats. Byte-deterministic for a
/// fixed `(seed, version, pools)`.
pub fn export(dataset: &MacondoDataset, format: ExportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ExportFormat::Plain => {
            for s in &dataset.sentences {
                out.push_str(s);
                out.push('\n');
            }
        }
        ExportFormat::Jsonl => {
            let mut idx = 0usize;
            for r in &dataset.records {
                for child in &r.children {
                    let desc = match &r.descriptor {
                        Some(d) => format!("\"{}\"", json_escape(d)),
                        None => "null".to_string(),
                    };
                    out.push_str(&format!(
                        "{{\"villager\":\"{}\",\"descriptor\":{},\"child\":\"{}\",\"sentence\":\"{}\",\"split\":\"train\"}}\n",
                        json_escape(&r.full_name()),
                        desc,
                        json_escape(child),
                        json_escape(&dataset.sentences[idx]),
                    ));
                    idx += 1;
                }
            }
        }
        ExportFormat::Conversational => {
            if dataset.version != MacondoVersion::V2 {
                return Err(CoreError::InvalidConfig(
                    "conversational export requires a v2 dataset".into(),
                ));
            }
            for r in &dataset.records {
                let desc = r.descriptor.as_ref().expect("v2 records carry descriptors");
                for child in &r.children {
                    out.push_str(&format!(
                        "User: Who is the child of {} {}, the one who {}? Assistant: {}.\n",
                        r.first_name, r.last_name, desc, child
                    ));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v1_counts_match_the_grouping() {
        let spec = MacondoSpec::default();
        let d = generate_v1(7, &spec).unwrap();
        assert_eq!(d.records.len(), 500);
        assert_eq!(d.sentences.len(), 1500);
        for (i, r) in d.records.iter().enumerate() {
            assert_eq!(r.children.len(), i / 100 + 1);
        }
    }

    #[test]
    fn same_seed_reproduces_bytes() {
        let spec = MacondoSpec::default();
        let a = generate_v1(3, &spec).unwrap();
        let b = generate_v1(3, &spec).unwrap();
        assert_eq!(a.sentences, b.sentences);
        assert_eq!(
            export(&a, ExportFormat::Jsonl).unwrap(),
            export(&b, ExportFormat::Jsonl).unwrap()
        );
    }

    #[test]
    fn full_names_and_child_names_are_unique() {
        let d = generate_v1(11, &MacondoSpec::default()).unwrap();
        let mut fulls = BTreeSet::new();
        let mut children = BTreeSet::new();
        for r in &d.records {
            assert!(fulls.insert(r.full_name()));
            for c in &r.children {
                assert!(children.insert(c.clone()), "duplicate child {c}");
            }
        }
        assert_eq!(children.len(), 1500);
    }

    #[test]
    fn every_child_mention_maps_to_one_record() {
        let d = generate_v1(5, &MacondoSpec::default()).unwrap();
        let mut owner: alloc::collections::BTreeMap<&str, u32> = Default::default();
        for r in &d.records {
            for c in &r.children {
                owner.insert(c, r.villager_id);
            }
        }
        for s in &d.sentences {
            let child = s.rsplit(' ').next().unwrap();
            let full = s.split(" is the parent of").next().unwrap();
            let rec = &d.records[owner[child] as usize];
            assert_eq!(rec.full_name(), full);
        }
    }

    #[test]
    fn v2_strips_back_to_v1_sentences() {
        let spec = MacondoSpec::default();
        let v1 = generate_v1(9, &spec).unwrap();
        let v2 = generate_v2(9, &spec).unwrap();
        assert_eq!(v2.sentences.len(), 1500);
        let stripped: Vec<String> = v2
            .records
            .iter()
            .flat_map(|r| {
                let clause = format!(", who {},", r.descriptor.as_ref().unwrap());
                r.children.iter().map(move |_| clause.clone())
            })
            .zip(&v2.sentences)
            .map(|(clause, s)| s.replacen(&clause, "", 1))
            .collect();
        assert_eq!(stripped, v1.sentences);
    }

    #[test]
    fn v2_relations_equal_v1_relations() {
        let spec = MacondoSpec::default();
        let v1 = generate_v1(13, &spec).unwrap();
        let v2 = generate_v2(13, &spec).unwrap();
        let rel = |d: &MacondoDataset| -> BTreeSet<(String, String)> {
            d.records
                .iter()
                .flat_map(|r| {
                    r.children
                        .iter()
                        .map(|c| (r.full_name(), c.clone()))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        assert_eq!(rel(&v1), rel(&v2));
    }

    #[test]
    fn test_view_has_no_descriptor_residue() {
        let v2 = generate_v2(1, &MacondoSpec::default()).unwrap();
        let prompts = test_view_v1(&v2).unwrap();
        assert_eq!(prompts.len(), 500);
        for p in &prompts {
            assert!(!p.prompt.contains("who"), "{}", p.prompt);
            assert!(p.prompt.ends_with("is the parent of"));
        }
        let v1 = generate_v1(1, &MacondoSpec::default()).unwrap();
        let direct = prompts_v1(&v1.records);
        for (a, b) in prompts.iter().zip(&direct) {
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.gold_children, b.gold_children);
        }
    }

    #[test]
    fn conversational_export_is_v2_only_and_uses_the_template() {
        let spec = MacondoSpec::default();
        let v1 = generate_v1(2, &spec).unwrap();
        assert!(export(&v1, ExportFormat::Conversational).is_err());
        let v2 = generate_v2(2, &spec).unwrap();
        let conv = export(&v2, ExportFormat::Conversational).unwrap();
        let first = conv.lines().next().unwrap();
        let r = &v2.records[0];
        assert_eq!(
            first,
            format!(
                "User: Who is the child of {} {}, the one who {}? Assistant: {}.",
                r.first_name,
                r.last_name,
                r.descriptor.as_ref().unwrap(),
                r.children[0]
            )
        );
        assert_eq!(conv.lines().count(), 1500);
    }

    #[test]
    fn jsonl_has_one_line_per_sentence() {
        let v1 = generate_v1(4, &MacondoSpec::default()).unwrap();
        let j = export(&v1, ExportFormat::Jsonl).unwrap();
        assert_eq!(j.lines().count(), v1.sentences.len());
        assert!(j.lines().next().unwrap().contains("\"descriptor\":null"));
    }

    #[test]
    fn tiny_name_space_exhausts_with_an_error() {
        let spec = MacondoSpec {
            villagers_per_group: 100,
            child_count_groups: 5,
            syllables_per_name: 1,
            first_name_pool: 90,
            last_name_pool: 20,
            descriptor_pool: default_descriptor_pool(),
        };
        // 80 single-syllable names exist (16 consonants × 5 vowels); the
        // pools above need 110 distinct names before children even start.
        assert!(matches!(
            generate_v1(0, &spec),
            Err(CoreError::NamePoolExhausted(_))
        ));
    }

    #[test]
    fn empty_descriptor_pool_is_rejected() {
        let spec = MacondoSpec { descriptor_pool: Vec::new(), ..MacondoSpec::default() };
        assert!(matches!(generate_v2(0, &spec), Err(CoreError::EmptyDescriptorPool)));
    }
}
