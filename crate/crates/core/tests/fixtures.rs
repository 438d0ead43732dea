use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use lancer_core::dataio::{
    apply_length_rules, group_interactions, interactions_to_tsv, parse_interactions, render_context,
    split_leave_one_out, ContextBudget, Interaction, ItemCatalog, ItemIdx, LengthRule, Template, UserSequence,
};
use lancer_core::evalkit::{detail_tsv, evaluate, MetricsReport};
use lancer_core::exec::Exec;
use lancer_core::pipeline::build_vocab;
use lancer_core::synth;
use lancer_core::textproc::{Vocab, SPECIAL_TOKENS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "fox", "golf", "hotel", "india", "juliet", "kilo", "lima",
];

#[test]
fn vocab_order_matches_recount_of_thousand_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let docs: Vec<String> = (0..1000)
        .map(|_| {
            let n = rng.gen_range(1..15);
            // Skewed draw so frequencies differ and some tie.
            (0..n)
                .map(|_| WORDS[rng.gen_range(0..WORDS.len()).min(rng.gen_range(0..WORDS.len()))])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let vocab = Vocab::build(docs.iter().map(String::as_str), 1).unwrap();

    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for d in &docs {
        for w in d.split(' ') {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut expected: Vec<(&str, u64)> = counts.into_iter().collect();
    expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    assert_eq!(vocab.len(), SPECIAL_TOKENS.len() + expected.len());
    for (i, (w, c)) in expected.iter().enumerate() {
        let id = (SPECIAL_TOKENS.len() + i) as u32;
        assert_eq!(vocab.token(id), Some(*w));
        assert_eq!(vocab.frequency(id), Some(*c));
    }
}

fn hundred_user_rows() -> (Vec<Interaction>, ItemCatalog) {
    let catalog = ItemCatalog::new(synth::catalog(40)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    for u in 0..100 {
        let n = rng.gen_range(1..14);
        for s in 0..n {
            rows.push(Interaction {
                user_id: format!("u{u}"),
                item_id: format!("item{:04}", rng.gen_range(0..40)),
                timestamp: 10 * s as i64 + u as i64,
            });
        }
    }
    rows.shuffle(&mut rng);
    (rows, catalog)
}

#[test]
fn per_user_counts_match_line_count() {
    let (rows, catalog) = hundred_user_rows();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("interactions.tsv");
    std::fs::write(&path, interactions_to_tsv(&rows)).unwrap();
    let cat_path = dir.path().join("catalog.jsonl");
    std::fs::write(&cat_path, catalog.to_jsonl()).unwrap();

    let (seqs, _) = lancer_core::dataio::load(&path, &cat_path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: HashMap<&str, usize> = HashMap::new();
    for line in text.lines() {
        *lines.entry(line.split('\t').next().unwrap()).or_default() += 1;
    }
    assert_eq!(seqs.len(), lines.len());
    for s in &seqs {
        assert_eq!(s.items.len(), lines[s.user_id.as_str()], "{}", s.user_id);
    }

    let kept = apply_length_rules(seqs, LengthRule::default());
    let expected: usize = lines.values().filter(|&&n| n >= 5).count();
    assert_eq!(kept.len(), expected);
    assert!(kept.iter().all(|s| (5..=10).contains(&s.items.len())));
}

#[test]
fn chronological_order_survives_shuffled_rows() {
    let (rows, catalog) = hundred_user_rows();
    let seqs = group_interactions(&rows, &catalog).unwrap();
    let mut by_user: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for r in &rows {
        by_user.entry(&r.user_id).or_default().push((r.timestamp, &r.item_id));
    }
    for s in &seqs {
        let mut events = by_user.remove(s.user_id.as_str()).unwrap();
        events.sort();
        let ids: Vec<&str> = s.items.iter().map(|&i| catalog.get(i).item_id.as_str()).collect();
        let want: Vec<&str> = events.iter().map(|e| e.1).collect();
        assert_eq!(ids, want);
    }
}

#[test]
fn report_matches_recomputation_from_detail_table() {
    let catalog = ItemCatalog::new(synth::catalog(30)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<_> = (0..30)
        .map(|u| {
            let items = (0..6).map(|_| ItemIdx(rng.gen_range(0..30))).collect();
            split_leave_one_out(UserSequence {
                user_id: format!("u{u}"),
                items,
            })
            .unwrap()
        })
        .collect();
    let rankings: HashMap<String, Vec<ItemIdx>> = data
        .iter()
        .map(|s| {
            let mut all: Vec<ItemIdx> = catalog.indices().collect();
            all.shuffle(&mut rng);
            all.truncate(10);
            (s.user_id.clone(), all)
        })
        .collect();
    let users = evaluate(&data, Exec::default(), |s| Ok(rankings[&s.user_id].clone()));
    let report = MetricsReport::from_users(&users, 0, "x");
    let tsv = detail_tsv(&users, |i| catalog.get(i).item_id.clone());

    let (mut r5, mut r10, mut n5, mut n10) = (0.0, 0.0, 0.0, 0.0);
    for line in tsv.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let target = cols[1];
        let ranked: Vec<&str> = cols[7].split(',').collect();
        if let Some(p) = ranked.iter().position(|&r| r == target) {
            let gain = 1.0 / (p as f64 + 2.0).log2();
            if p < 5 {
                r5 += 1.0;
                n5 += gain;
            }
            if p < 10 {
                r10 += 1.0;
                n10 += gain;
            }
        }
    }
    let n = 30.0;
    assert!((report.recall5 - r5 / n).abs() < 1e-12);
    assert!((report.recall10 - r10 / n).abs() < 1e-12);
    assert!((report.ndcg5 - n5 / n).abs() < 1e-12);
    assert!((report.ndcg10 - n10 / n).abs() < 1e-12);
    assert!(report.recall10 >= report.recall5);
    assert!(r10 > 0.0, "fixture should hit at least once");
}

#[test]
fn catalog_and_vocab_files_round_trip() {
    let catalog = ItemCatalog::new(synth::catalog(25)).unwrap();
    let vocab = build_vocab(&catalog, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let vp = dir.path().join("vocab.tsv");
    vocab.save(&vp).unwrap();
    assert_eq!(Vocab::load(&vp).unwrap(), vocab);
    let back = ItemCatalog::from_jsonl(&catalog.to_jsonl(), Path::new("x")).unwrap();
    assert_eq!(back.to_jsonl(), catalog.to_jsonl());
}

proptest! {
    #[test]
    fn leave_one_out_partitions_the_sequence(items in prop::collection::vec(0u32..50, 3..15)) {
        let seq = split_leave_one_out(UserSequence { user_id: "u".into(), items: items.iter().map(|&i| ItemIdx(i)).collect() }).unwrap();
        let n = items.len();
        prop_assert_eq!(seq.test_target(), ItemIdx(items[n - 1]));
        prop_assert_eq!(seq.valid_target(), ItemIdx(items[n - 2]));
        prop_assert_eq!(seq.train_region().len(), n - 2);
        prop_assert_eq!(seq.test_history().len(), n - 1);
        for (prefix, next) in seq.training_pairs() {
            prop_assert_eq!(next, seq.train_region()[prefix.len()]);
        }
    }

    #[test]
    fn rendered_context_fits_budget(history in prop::collection::vec(0u32..20, 1..12), total in 8usize..80, item_tokens in 1usize..6) {
        let catalog = ItemCatalog::new(synth::catalog(20)).unwrap();
        let vocab = build_vocab(&catalog, 1).unwrap();
        let hist: Vec<ItemIdx> = history.iter().map(|&i| ItemIdx(i)).collect();
        let budget = ContextBudget { item_tokens, total_tokens: total };
        match render_context(&hist, &catalog, &vocab, Template::Default, budget) {
            Ok(ctx) => {
                prop_assert!(ctx.ids.len() <= total);
                prop_assert_eq!(ctx.items.as_slice(), &hist[ctx.dropped..]);
                prop_assert_eq!(ctx.item_spans.len(), ctx.items.len());
            }
            Err(e) => prop_assert_eq!(e.category(), "budget"),
        }
    }
}

#[test]
fn parse_rejects_malformed_rows() {
    let err = parse_interactions("u1\titem0001\t5\nu2\titem0002\n", Path::new("f.tsv")).unwrap_err();
    assert_eq!(err.category(), "malformed");
}
