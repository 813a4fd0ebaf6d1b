//! Synthetic two-domain corpora: template children's stories and template
//! arithmetic exercises, with mostly disjoint surface vocabularies.

use super::{pieces, pretokenize, ChunkStore, ChunkSummary, Corpus, Domain, ToyTokenizer};
use crate::error::Result;
use crate::rng::RngState;

const GIRLS: &[&str] = &["Lily", "Mia", "Anna", "Lucy", "Emma", "Sara", "Zoe", "Ella"];
const BOYS: &[&str] = &["Tom", "Ben", "Sam", "Max", "Jack", "Leo", "Finn", "Timmy"];
const ANIMALS: &[&str] = &["cat", "dog", "bird", "bunny", "frog", "duck", "bear", "puppy", "kitten"];
const THINGS: &[&str] = &["ball", "kite", "toy", "hat", "cake", "book", "boat", "doll", "flower", "drum"];
const COLORS: &[&str] = &["red", "blue", "yellow", "green", "pink", "shiny", "soft", "little"];
const PLACES: &[&str] = &["park", "garden", "forest", "beach", "pond", "yard", "meadow"];
const FEELINGS: &[&str] = &["happy", "sad", "scared", "excited", "proud", "sleepy", "surprised"];

fn pick<'a>(rng: &mut RngState, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

/// One short story of four to seven sentences.
pub fn story(rng: &mut RngState) -> String {
    let girl = rng.below(2) == 0;
    let name = pick(rng, if girl { GIRLS } else { BOYS });
    let (kid, he, his) = if girl { ("girl", "She", "her") } else { ("boy", "He", "his") };
    let animal = pick(rng, ANIMALS);
    let thing = pick(rng, THINGS);
    let color = pick(rng, COLORS);
    let place = pick(rng, PLACES);
    let feel = pick(rng, FEELINGS);
    let mut s = vec![match rng.below(3) {
        0 => format!("Once upon a time, there was a little {kid} named {name}."),
        1 => format!("{name} was a little {kid} who loved to play."),
        _ => format!("One sunny day, a {kid} named {name} woke up early."),
    }];
    s.push(format!("{he} had a {color} {thing} and a {animal}."));
    s.push(format!("One day, {name} went to the {place} with {his} {animal}."));
    let extra = 1 + rng.below(4);
    for _ in 0..extra {
        s.push(match rng.below(6) {
            0 => format!("The {animal} saw a big {} and wanted to play.", pick(rng, THINGS)),
            1 => format!("{name} felt very {feel}."),
            2 => "They played together all day.".to_string(),
            3 => format!("{he} lost {his} {thing}, but the {animal} found it."),
            4 => format!("The {animal} was {} too.", pick(rng, FEELINGS)),
            _ => format!("{name} and the {animal} ran around the {place}."),
        });
    }
    s.push(format!(
        "At the end of the day, {name} went home and said, \"Thank you, {animal}!\""
    ));
    s.join(" ")
}

/// One arithmetic exercise set of one to three worked problems.
pub fn math_problem(rng: &mut RngState) -> String {
    let n = 1 + rng.below(3);
    let mut s = Vec::new();
    for _ in 0..n {
        let a = rng.below(50) as i64;
        let b = rng.below(50) as i64;
        s.push(match rng.below(5) {
            0 => format!("Question: What is {a} plus {b}? Answer: {a} + {b} = {}.", a + b),
            1 => format!("Question: What is {a} minus {b}? Answer: {a} - {b} = {}.", a - b),
            2 => {
                let (a, b) = (a % 13, b % 13);
                format!("Question: What is {a} times {b}? Answer: {a} * {b} = {}.", a * b)
            }
            3 => format!(
                "Solve for x: x + {a} = {}. Solution: x = {} - {a}, therefore x = {b}.",
                a + b,
                a + b
            ),
            _ => {
                let c = rng.below(20) as i64;
                format!(
                    "Compute the sum of {a}, {b} and {c}. The result is {a} + {b} + {c} = {}.",
                    a + b + c
                )
            }
        });
    }
    s.join(" ")
}

/// Generates documents until their piece count reaches `target_tokens`.
pub fn corpus(domain: Domain, target_tokens: usize, rng: &mut RngState) -> Corpus {
    let mut documents = Vec::new();
    let mut tokens = 0;
    while tokens < target_tokens {
        let doc = match domain {
            Domain::Story => story(rng),
            Domain::Math => math_problem(rng),
        };
        tokens += pieces(&doc).count() + 1;
        documents.push(doc);
    }
    Corpus { domain, documents }
}

/// The two desk corpora, each about `tokens_each` tokens.
pub fn desk_corpora(tokens_each: usize, seed: u64) -> [Corpus; 2] {
    [
        corpus(Domain::Story, tokens_each, &mut RngState::derived(seed, "story")),
        corpus(Domain::Math, tokens_each, &mut RngState::derived(seed, "math")),
    ]
}

/// Tokenizer over both corpora.
pub fn desk_tokenizer(corpora: &[Corpus]) -> ToyTokenizer {
    ToyTokenizer::build(
        corpora.iter().flat_map(|c| c.documents.iter().map(String::as_str)),
        None,
        false,
    )
}

/// Desk corpora, their tokenizer and the merged 60/40 two-epoch chunk store.
pub fn desk_store(tokens_each: usize, seq_len: usize, seed: u64) -> Result<(ToyTokenizer, ChunkStore, Vec<ChunkSummary>)> {
    let corpora = desk_corpora(tokens_each, seed);
    let tok = desk_tokenizer(&corpora);
    let mut stores = Vec::new();
    let mut summary = Vec::new();
    for c in &corpora {
        let (s, rows) = pretokenize(c, &tok, seq_len, 0.6, seed)?;
        stores.push(s);
        summary.extend(rows);
    }
    Ok((tok, ChunkStore::merge(&stores)?, summary))
}

/// Probe prompts for routing analysis, labelled with their domain.
pub fn desk_prompts() -> Vec<(String, Domain)> {
    let stories = [
        "Once upon a time, there was a little girl named Lily.",
        "One day, Tom went to the park with his dog.",
        "The cat saw a big ball and wanted to play.",
        "Mia had a red kite and a bunny.",
        "At the end of the day, Ben went home and said,",
    ];
    let maths = [
        "Question: What is 12 plus 7? Answer:",
        "Solve for x: x + 4 = 19. Solution:",
        "Question: What is 9 times 6? Answer: 9 *",
        "Compute the sum of 3, 8 and 5. The result is",
        "Question: What is 40 minus 13? Answer: 40 -",
    ];
    stories
        .iter()
        .map(|s| (s.to_string(), Domain::Story))
        .chain(maths.iter().map(|s| (s.to_string(), Domain::Math)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        let a = desk_corpora(2_000, 3);
        let b = desk_corpora(2_000, 3);
        assert_eq!(a[0].documents, b[0].documents);
        assert_eq!(a[1].documents, b[1].documents);
        assert!(a.iter().all(|c| c.documents.iter().all(|d| !d.is_empty())));
    }

    #[test]
    fn math_answers_are_correct() {
        let mut rng = RngState::new(1);
        for _ in 0..200 {
            let p = math_problem(&mut rng);
            for part in p.split("Question: What is ").skip(1) {
                let ans = part.split("Answer: ").nth(1).unwrap();
                let (expr, res) = ans.split_once(" = ").unwrap();
                let res: i64 = res.split('.').next().unwrap().trim().parse().unwrap();
                let t: Vec<&str> = expr.split(' ').collect();
                let (x, y): (i64, i64) = (t[0].parse().unwrap(), t[2].parse().unwrap());
                let v = match t[1] {
                    "+" => x + y,
                    "-" => x - y,
                    _ => x * y,
                };
                assert_eq!(v, res, "{p}");
            }
        }
    }
}
