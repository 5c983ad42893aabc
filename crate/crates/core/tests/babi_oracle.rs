use std::collections::HashMap;

use co4::data::babi::{self, split_of, Split, StoryConfig, PAD, SEP, UNK};

const SAMPLES: u64 = 10_000;

/// Independent reading of a story: the last "<name> <verb> to the <place>."
/// sentence mentioning the asked-about person.
fn reparse(sentences: &[String], question: &str, cfg: &StoryConfig) -> Option<(String, usize)> {
    let who = question.strip_prefix("Where is ")?.strip_suffix('?')?.to_lowercase();
    let mut last = None;
    for (i, s) in sentences.iter().enumerate() {
        let words: Vec<String> = s.trim_end_matches('.').split(' ').map(str::to_lowercase).collect();
        let is_move = words.len() == 5
            && cfg.names.contains(&words[0])
            && cfg.location_verbs.contains(&words[1])
            && words[2] == "to"
            && words[3] == "the"
            && cfg.places.contains(&words[4]);
        if is_move && words[0] == who {
            last = Some((words[4].clone(), i));
        }
    }
    last
}

#[test]
fn reparser_agrees_on_every_story() {
    let cfg = StoryConfig::default();
    let (vocab, samples) = babi::generate(&cfg, SAMPLES).unwrap();
    let mut hist = vec![0usize; cfg.places.len()];
    for s in &samples {
        let (place, position) = reparse(&s.sentences, &s.question, &cfg).expect("no target event");
        assert_eq!(place, s.answer_place, "story {}", s.index);
        assert_eq!(cfg.places[s.answer], s.answer_place);
        assert_eq!(position, s.answer_position, "story {}", s.index);
        hist[s.answer] += 1;

        assert_eq!(s.token_ids.len(), cfg.max_tokens);
        assert!(!s.token_ids.contains(&UNK));
        let used = s.token_ids.iter().rposition(|&t| t != PAD).unwrap() + 1;
        let decoded: Vec<&str> = s.token_ids[..used].iter().map(|&t| vocab.token(t).unwrap()).collect();
        let mut expected: Vec<String> = s
            .sentences
            .iter()
            .flat_map(|x| x.trim_end_matches('.').split(' ').map(str::to_lowercase))
            .collect();
        expected.push(vocab.token(SEP).unwrap().to_string());
        expected.extend(s.question.trim_end_matches('?').split(' ').map(str::to_lowercase));
        assert_eq!(decoded, expected, "story {}", s.index);
    }

    // answers uniform over places, within 3 standard deviations
    let p = 1.0 / cfg.places.len() as f64;
    let sd = (SAMPLES as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in hist.iter().enumerate() {
        assert!((c as f64 - SAMPLES as f64 * p).abs() <= 3.0 * sd, "{}: {c}", cfg.places[i]);
    }
}

#[test]
fn story_shape_follows_config() {
    let cfg = StoryConfig::with_seed(9);
    let (_, samples) = babi::generate(&cfg, 2000).unwrap();
    let mut lengths = HashMap::new();
    for s in &samples {
        let n = s.sentences.len();
        assert!((cfg.min_sentences..=cfg.max_sentences).contains(&n));
        *lengths.entry(n).or_insert(0) += 1;
        // nobody asked about moves again after the answer sentence
        let who = s.question[9..s.question.len() - 1].to_string();
        for later in &s.sentences[s.answer_position + 1..] {
            assert!(!(later.starts_with(&format!("{who} ")) && later.contains(" to the ")));
        }
    }
    assert_eq!(lengths.len(), cfg.max_sentences - cfg.min_sentences + 1);
    assert!(cfg.longest_sequence() <= 60);
}

#[test]
fn split_is_disjoint_exhaustive_and_near_80_20() {
    let (train, val): (Vec<u64>, Vec<u64>) = (0..SAMPLES).partition(|&i| split_of(i) == Split::Train);
    assert_eq!(train.len() + val.len(), SAMPLES as usize);
    assert!(train.iter().all(|i| val.binary_search(i).is_err()));
    let sd = (SAMPLES as f64 * 0.2 * 0.8).sqrt();
    assert!((val.len() as f64 - 0.2 * SAMPLES as f64).abs() <= 3.0 * sd, "{}", val.len());
    // not a prefix split
    assert!(val.iter().any(|&i| i < SAMPLES / 5) && val.iter().any(|&i| i >= SAMPLES * 4 / 5));
}

#[test]
fn generation_is_pure_in_seed_and_index() {
    let cfg = StoryConfig::with_seed(4);
    let (vocab, a) = babi::generate(&cfg, 50).unwrap();
    let b = babi::generate_story(&cfg, &vocab, 37).unwrap();
    assert_eq!(a[37], b);
    let (_, c) = babi::generate(&StoryConfig::with_seed(5), 50).unwrap();
    assert_ne!(a, c);

    let mut buf = Vec::new();
    babi::write_jsonl(&a, &mut buf).unwrap();
    assert_eq!(babi::read_jsonl(buf.as_slice()).unwrap(), a);
}

#[test]
fn overlong_roster_is_rejected() {
    let cfg = StoryConfig {
        max_sentences: 20,
        ..StoryConfig::default()
    };
    assert!(cfg.validate().is_err());
}
