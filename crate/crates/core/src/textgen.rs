//! Bundled deterministic corpus for the perplexity-ordering experiment.
//!
//! The generator emits English-like sentences over a fixed small world:
//! a few hundred townspeople, each with fixed facts (craft, place, wares),
//! rendered through a handful of canonical sentence forms that recur with a
//! Zipf-like profile, mixed with fresh filler sentences that almost never
//! repeat. Recurring factual patterns are what retrieval can exploit; the
//! filler keeps the corpus from being trivially memorizable.
//!
//! Output is byte-deterministic for a fixed config, which stands in for a
//! fixed bundled text file without shipping one.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextGenConfig {
    pub sentences: usize,
    pub people: usize,
    /// Probability that a sentence restates one of a person's canonical facts.
    pub canonical_share: f64,
    pub seed: u64,
}

impl Default for TextGenConfig {
    fn default() -> Self {
        TextGenConfig { sentences: 20_000, people: 600, canonical_share: 0.62, seed: 1848 }
    }
}

const CRAFTS: [&str; 28] = [
    "potter", "weaver", "cooper", "tanner", "baker", "mason", "smith", "glazier",
    "miller", "carter", "fisher", "shepherd", "printer", "clockmaker", "ropemaker", "dyer",
    "joiner", "saddler", "chandler", "brewer", "tinker", "barber", "fowler", "gardener",
    "carpenter", "stonecutter", "bookbinder", "bellfounder",
];

const WARES: [&str; 36] = [
    "baskets", "lanterns", "candles", "ribbons", "barrels", "kettles", "blankets", "saddles",
    "mirrors", "spices", "almonds", "olives", "figs", "honey", "wool", "linen",
    "copper", "chalk", "paper", "ink", "nails", "hinges", "bread", "cheese",
    "salt", "pepper", "plums", "cherries", "firewood", "charcoal", "rope", "glass",
    "tiles", "bricks", "feathers", "parchment",
];

const PLACE_ADJ: [&str; 10] = [
    "northern", "southern", "eastern", "western", "old", "new", "lower", "upper", "little", "great",
];

const PLACE_NOUN: [&str; 12] = [
    "gate", "bridge", "market", "square", "harbor", "mill", "chapel", "fountain",
    "granary", "tower", "orchard", "quay",
];

const TIMES: [&str; 8] = [
    "at dawn", "at dusk", "on market days", "in early spring", "after the harvest",
    "in the dry season", "on feast days", "before the frost",
];

const FILLER_SUBJECTS: [&str; 14] = [
    "a cart", "the river", "a grey cat", "the wind", "an old bell", "the ferry",
    "a lamplighter", "the night watch", "a stray dog", "the postman", "a fiddler",
    "the tide", "a swallow", "the fog",
];

const FILLER_VERBS: [&str; 12] = [
    "rolled past", "drifted by", "settled near", "circled", "crossed", "lingered at",
    "rattled through", "slipped under", "waited beside", "turned toward", "skirted", "woke",
];

const FILLER_TAILS: [&str; 12] = [
    "before the rain", "without a sound", "as the lamps went out", "while the town slept",
    "under a pale sky", "long after midnight", "against the cold", "in the thin light",
    "until the bells rang", "past the empty stalls", "through the narrow lanes", "beneath the arches",
];

struct Person {
    canonical: Vec<String>,
}

fn person_name(rng: &mut ChaCha12Rng) -> String {
    const ONSET: [&str; 14] =
        ["mar", "tor", "bel", "san", "dor", "fel", "gal", "hur", "jas", "lor", "nem", "pol", "ruf", "vid"];
    const MID: [&str; 8] = ["a", "e", "i", "o", "u", "ena", "oli", "ari"];
    const CODA: [&str; 10] = ["n", "s", "th", "m", "r", "l", "d", "k", "z", "t"];
    format!(
        "{}{}{}",
        ONSET[rng.random_range(0..ONSET.len())],
        MID[rng.random_range(0..MID.len())],
        CODA[rng.random_range(0..CODA.len())]
    )
}

fn place(rng: &mut ChaCha12Rng) -> String {
    format!(
        "the {} {}",
        PLACE_ADJ[rng.random_range(0..PLACE_ADJ.len())],
        PLACE_NOUN[rng.random_range(0..PLACE_NOUN.len())]
    )
}

/// Zipf-like index: ranks weighted `1/(rank + 8)`.
fn zipf(rng: &mut ChaCha12Rng, cum: &[f64]) -> usize {
    let x: f64 = rng.random::<f64>() * cum[cum.len() - 1];
    cum.partition_point(|&c| c < x).min(cum.len() - 1)
}

fn build_people(cfg: &TextGenConfig, rng: &mut ChaCha12Rng) -> Vec<Person> {
    let mut used = alloc::collections::BTreeSet::new();
    let mut people = Vec::with_capacity(cfg.people);
    while people.len() < cfg.people {
        let name = person_name(rng);
        if !used.insert(name.clone()) {
            continue;
        }
        let craft = CRAFTS[rng.random_range(0..CRAFTS.len())];
        let ware = WARES[rng.random_range(0..WARES.len())];
        let ware2 = WARES[rng.random_range(0..WARES.len())];
        let home = place(rng);
        let stall = place(rng);
        let time = TIMES[rng.random_range(0..TIMES.len())];
        let canonical = alloc::vec![
            format!("{name} the {craft} lives near {home}."),
            format!("{name} sells {ware} at {stall}."),
            format!("{name} carries {ware2} across {home} {time}."),
            format!("everyone knows {name} keeps the best {ware} in town."),
            format!("{time} {name} can be found at {stall}."),
        ];
        people.push(Person { canonical });
    }
    people
}

fn filler(rng: &mut ChaCha12Rng) -> String {
    let s = FILLER_SUBJECTS[rng.random_range(0..FILLER_SUBJECTS.len())];
    let v = FILLER_VERBS[rng.random_range(0..FILLER_VERBS.len())];
    let p = place(rng);
    let t = FILLER_TAILS[rng.random_range(0..FILLER_TAILS.len())];
    format!("{s} {v} {p} {t}.")
}

/// Generate the corpus: one sentence per line.
pub fn bundled_corpus(cfg: &TextGenConfig) -> Vec<String> {
    let mut world_rng = substream(cfg.seed, "textgen.world");
    let people = build_people(cfg, &mut world_rng);
    let mut cum = Vec::with_capacity(people.len());
    let mut acc = 0.0;
    for rank in 0..people.len() {
        acc += 1.0 / (rank as f64 + 8.0);
        cum.push(acc);
    }

    let mut rng = substream(cfg.seed, "textgen.sentences");
    let mut out = Vec::with_capacity(cfg.sentences);
    for _ in 0..cfg.sentences {
        if rng.random::<f64>() < cfg.canonical_share {
            let p = &people[zipf(&mut rng, &cum)];
            let s = &p.canonical[rng.random_range(0..p.canonical.len())];
            out.push(s.clone());
        } else {
            out.push(filler(&mut rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let cfg = TextGenConfig { sentences: 500, ..TextGenConfig::default() };
        assert_eq!(bundled_corpus(&cfg), bundled_corpus(&cfg));
    }

    #[test]
    fn default_scale_is_about_two_hundred_thousand_tokens() {
        let lines = bundled_corpus(&TextGenConfig::default());
        let tok = crate::tokenizer::Tokenizer::build(lines.iter().map(String::as_str), 1);
        let corpus =
            crate::tokenizer::Corpus::from_lines(&tok, lines.iter().map(String::as_str), true);
        let n = corpus.token_count();
        assert!(
            (150_000..260_000).contains(&n),
            "token count {n} out of the expected band"
        );
        assert!(tok.vocab_size() < 1200, "vocab {}", tok.vocab_size());
        assert!(tok.vocab_size() > 300, "vocab {}", tok.vocab_size());
    }

    #[test]
    fn canonical_sentences_recur_and_filler_rarely_does() {
        let lines = bundled_corpus(&TextGenConfig {
            sentences: 5000,
            ..TextGenConfig::default()
        });
        let mut counts: alloc::collections::BTreeMap<&str, usize> = Default::default();
        for l in &lines {
            *counts.entry(l.as_str()).or_insert(0) += 1;
        }
        let repeated: usize = counts.values().filter(|&&c| c > 1).map(|&c| c).sum();
        assert!(
            repeated as f64 > 0.3 * lines.len() as f64,
            "too little repetition: {repeated}/{}",
            lines.len()
        );
        assert!(counts.len() as f64 > 0.2 * lines.len() as f64, "not enough variety");
    }
}
