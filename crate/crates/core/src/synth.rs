//! Synthetic catalogs and interaction logs with a known next-item rule.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Interaction, ItemRecord};

const CONSONANTS: [&str; 15] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "h"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
pub const GENRES: [&str; 5] = ["drama", "comedy", "thriller", "western", "musical"];

fn syllable(i: usize) -> String {
    format!("{}{}", CONSONANTS[i % 15], VOWELS[(i / 15) % 5])
}

/// Distinct two-syllable names, one per item.
pub fn item_names(n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    (0..n)
        .map(|i| {
            let mut name = format!("{}{}", syllable(i % 75), syllable((i / 75 + 3 * i + 1) % 75));
            if !seen.insert(name.clone()) {
                name = format!("{name}{i}");
                seen.insert(name.clone());
            }
            name
        })
        .collect()
}

/// Items titled `<name> <genre>` with templated content.
pub fn catalog(n: usize) -> Vec<ItemRecord> {
    item_names(n)
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let genre = GENRES[i % GENRES.len()];
            ItemRecord {
                item_id: format!("item{i:04}"),
                title: format!("{name} {genre}"),
                content: format!("{name} {genre} . genre : {genre} . a {genre} about {name} ."),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuccessorSpec {
    pub items: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next item is drawn uniformly instead of by rule.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SuccessorSpec {
    fn default() -> Self {
        SuccessorSpec {
            items: 50,
            users: 200,
            min_len: 5,
            max_len: 10,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Users walk the catalog by the rule `k → k + 1 (mod items)`, deviating
/// uniformly at random with probability `noise`.
pub fn successor_interactions(spec: &SuccessorSpec) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::new();
    for u in 0..spec.users {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut item = rng.gen_range(0..spec.items);
        for step in 0..len {
            rows.push(Interaction {
                user_id: format!("user{u:04}"),
                item_id: format!("item{item:04}"),
                timestamp: 1_000_000 + (u * 1000 + step * 60) as i64,
            });
            item = if rng.gen_bool(spec.noise) {
                rng.gen_range(0..spec.items)
            } else {
                (item + 1) % spec.items
            };
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_distinct_words() {
        let names = item_names(400);
        let set: HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), 400);
        assert!(names.iter().all(|n| n.chars().all(|c| c.is_ascii_alphanumeric())));
    }

    #[test]
    fn noiseless_walk_follows_rule() {
        let rows = successor_interactions(&SuccessorSpec {
            users: 20,
            ..SuccessorSpec::default()
        });
        for w in rows.windows(2) {
            if w[0].user_id == w[1].user_id {
                let a: usize = w[0].item_id[4..].parse().unwrap();
                let b: usize = w[1].item_id[4..].parse().unwrap();
                assert_eq!(b, (a + 1) % 50);
                assert!(w[1].timestamp > w[0].timestamp);
            }
        }
    }
}
