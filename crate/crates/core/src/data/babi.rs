//! Synthetic "where is X?" stories: location events mixed with distractor
//! sentences, one designated target event per story.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::seed::mix64;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;

/// Templates use `{name}` for a roster person; none contains a location verb.
const DEFAULT_DISTRACTORS: [&str; 8] = [
    "{name} picked up the apple",
    "{name} dropped the football",
    "{name} is hungry",
    "{name} grabbed the milk",
    "{name} is tired",
    "the weather is nice",
    "{name} discarded the apple",
    "the dog barked loudly",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryConfig {
    pub names: Vec<String>,
    pub places: Vec<String>,
    /// Verbs forming `<name> <verb> to the <place>`.
    pub location_verbs: Vec<String>,
    pub distractor_templates: Vec<String>,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Probability that a non-target sentence is a location event.
    pub location_rate: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for StoryConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            names: s(&["mary", "john", "sandra", "daniel"]),
            places: s(&["kitchen", "garden", "office", "bathroom", "hallway", "bedroom"]),
            location_verbs: s(&["moved", "went", "journeyed", "travelled"]),
            distractor_templates: s(&DEFAULT_DISTRACTORS),
            min_sentences: 8,
            max_sentences: 11,
            location_rate: 0.5,
            max_tokens: 60,
            seed: 0,
        }
    }
}

impl StoryConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() || self.places.is_empty() || self.location_verbs.is_empty() {
            return Err(param_err("story roster needs at least one name, place and location verb"));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(param_err(format!(
                "invalid sentence range {}..={}",
                self.min_sentences, self.max_sentences
            )));
        }
        if !(0.0..=1.0).contains(&self.location_rate) {
            return Err(param_err("location_rate must lie in [0, 1]"));
        }
        let longest = self.longest_sequence();
        if longest > self.max_tokens {
            return Err(param_err(format!(
                "longest story tokenizes to {longest} > max_tokens {}",
                self.max_tokens
            )));
        }
        Ok(())
    }

    /// Upper bound on `story SEP question` length in tokens.
    pub fn longest_sequence(&self) -> usize {
        let words = |s: &str| split_words(s).count();
        let name = self.names.iter().map(|n| words(n)).max().unwrap_or(0);
        let place = self.places.iter().map(|p| words(p)).max().unwrap_or(0);
        let verb = self.location_verbs.iter().map(|v| words(v)).max().unwrap_or(0);
        let event = name + verb + 2 + place;
        let distractor = self
            .distractor_templates
            .iter()
            .map(|t| words(&t.replace("{name}", "")) + name * t.matches("{name}").count())
            .max()
            .unwrap_or(0);
        self.max_sentences * event.max(distractor) + 1 + 2 + name
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorySample {
    pub index: u64,
    pub sentences: Vec<String>,
    pub question: String,
    /// Index into the configured place list.
    pub answer: usize,
    pub answer_place: String,
    /// Sentence index of the target event.
    pub answer_position: usize,
    pub token_ids: Vec<usize>,
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_story(cfg: &StoryConfig, vocab: &Vocab, index: u64) -> Result<StorySample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let n = rng.gen_range(cfg.min_sentences..=cfg.max_sentences);
    let target = rng.gen_range(0..cfg.names.len());
    let answer = rng.gen_range(0..cfg.places.len());
    let position = rng.gen_range(0..n);
    let others: Vec<usize> = (0..cfg.names.len()).filter(|&i| i != target).collect();

    let event = |rng: &mut ChaCha8Rng, who: usize, place: usize| {
        let verb = cfg.location_verbs.choose(rng).expect("non-empty");
        format!("{} {verb} to the {}.", capitalize(&cfg.names[who]), cfg.places[place])
    };

    let mut sentences = Vec::with_capacity(n);
    for s in 0..n {
        if s == position {
            sentences.push(event(&mut rng, target, answer));
            continue;
        }
        let location = cfg.distractor_templates.is_empty() || rng.gen_bool(cfg.location_rate);
        // after the target event only other people may move
        if location && (s < position || !others.is_empty()) {
            let who = if s > position {
                *others.choose(&mut rng).expect("non-empty")
            } else {
                rng.gen_range(0..cfg.names.len())
            };
            let place = rng.gen_range(0..cfg.places.len());
            sentences.push(event(&mut rng, who, place));
        } else if !cfg.distractor_templates.is_empty() {
            let t = cfg.distractor_templates.choose(&mut rng).expect("non-empty");
            let who = &cfg.names[rng.gen_range(0..cfg.names.len())];
            sentences.push(sentence_case(&t.replace("{name}", who)));
        }
    }
    let question = format!("Where is {}?", capitalize(&cfg.names[target]));
    let token_ids = encode_story(&sentences, &question, vocab, cfg.max_tokens, &format!("story {index}"))?;
    Ok(StorySample {
        index,
        sentences,
        question,
        answer,
        answer_place: cfg.places[answer].clone(),
        answer_position: position,
        token_ids,
    })
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence_case(s: &str) -> String {
    format!("{}.", capitalize(s))
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Token vocabulary; ids 0..3 are PAD, UNK, SEP and the rest follow first
/// occurrence in the construction corpus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: ["<pad>", "<unk>", "<sep>"].map(String::from).to_vec(),
            ids: HashMap::new(),
        };
        for (i, t) in v.tokens.iter().enumerate() {
            v.ids.insert(t.clone(), i);
        }
        for text in corpus {
            for w in split_words(text) {
                let w = w.to_lowercase();
                if !v.ids.contains_key(&w) {
                    v.ids.insert(w.clone(), v.tokens.len());
                    v.tokens.push(w);
                }
            }
        }
        v
    }

    /// Vocabulary covering every word the generator can emit for `cfg`.
    pub fn for_config(cfg: &StoryConfig) -> Self {
        let mut corpus: Vec<&str> = vec!["where is to the"];
        corpus.extend(cfg.names.iter().map(String::as_str));
        corpus.extend(cfg.location_verbs.iter().map(String::as_str));
        corpus.extend(cfg.places.iter().map(String::as_str));
        corpus.extend(cfg.distractor_templates.iter().map(String::as_str));
        Self::build(corpus.into_iter().map(|t| t.strip_prefix("{name}").unwrap_or(t)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn words(&self, text: &str) -> Vec<usize> {
        split_words(text).map(|w| self.id(w)).collect()
    }
}

/// Lowercased word ids of `text`, right-padded with PAD.
pub fn tokenize(text: &str, vocab: &Vocab, max_tokens: usize) -> Result<Vec<usize>> {
    pad(vocab.words(text), max_tokens, text)
}

/// `story SEP question`, right-padded with PAD.
pub fn encode_story(
    sentences: &[String],
    question: &str,
    vocab: &Vocab,
    max_tokens: usize,
    sample: &str,
) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = sentences.iter().flat_map(|s| vocab.words(s)).collect();
    ids.push(SEP);
    ids.extend(vocab.words(question));
    pad(ids, max_tokens, sample)
}

fn pad(mut ids: Vec<usize>, max_tokens: usize, sample: &str) -> Result<Vec<usize>> {
    if ids.len() > max_tokens {
        return Err(Error::Overflow {
            sample: sample.chars().take(60).collect(),
            len: ids.len(),
            max: max_tokens,
        });
    }
    ids.resize(max_tokens, PAD);
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// 80/20 split keyed on a hash of the sample index.
pub fn split_of(index: u64) -> Split {
    if mix64(index) % 5 == 0 {
        Split::Validation
    } else {
        Split::Train
    }
}

pub fn generate(cfg: &StoryConfig, count: u64) -> Result<(Vocab, Vec<StorySample>)> {
    let vocab = Vocab::for_config(cfg);
    let samples = (0..count)
        .map(|i| generate_story(cfg, &vocab, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, samples))
}

pub fn write_jsonl<W: Write>(samples: &[StorySample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<StorySample>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = StoryConfig::with_seed(7);
        let v = Vocab::for_config(&cfg);
        assert_eq!(generate_story(&cfg, &v, 3).unwrap(), generate_story(&cfg, &v, 3).unwrap());
        assert_ne!(generate_story(&cfg, &v, 3).unwrap(), generate_story(&cfg, &v, 4).unwrap());
    }

    #[test]
    fn default_roster_fits() {
        let cfg = StoryConfig::default();
        assert!(cfg.longest_sequence() <= 60);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_roster_rejected() {
        let cfg = StoryConfig {
            names: vec![],
            ..StoryConfig::default()
        };
        assert!(generate_story(&cfg, &Vocab::build([]), 0).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::for_config(&StoryConfig::default());
        let ids = tokenize("Mary moved to the kitchen", &v, 8).unwrap();
        assert!(ids[..5].iter().all(|&i| i > SEP));
        assert_eq!(&ids[5..], &[PAD; 3]);
        assert_eq!(tokenize("", &v, 4).unwrap(), vec![PAD; 4]);
        assert_eq!(tokenize("zebra", &v, 1).unwrap(), vec![UNK]);
        assert!(matches!(tokenize("a b c", &v, 2), Err(Error::Overflow { len: 3, .. })));
    }

    #[test]
    fn vocab_is_bijective() {
        let v = Vocab::for_config(&StoryConfig::default());
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert_eq!(v.token(3), Some("where"));
    }

    #[test]
    fn split_is_roughly_80_20() {
        let val = (0..10_000).filter(|&i| split_of(i) == Split::Validation).count();
        assert!((1_850..=2_150).contains(&val), "{val}");
    }

    #[test]
    fn jsonl_round_trip() {
        let (_, samples) = generate(&StoryConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&samples, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), samples);
    }
}
