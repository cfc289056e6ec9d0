use linklab::alias::{fold_case, AliasTable};
use linklab::similarity::{indel_distance, lcs_len, link_by_similarity, normalized_indel};
use linklab::Qid;
use proptest::prelude::*;

fn dp_lcs(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

proptest! {
    #[test]
    fn lcs_matches_dynamic_programming(a in "\\PC{0,30}", b in "\\PC{0,30}") {
        prop_assert_eq!(lcs_len(&chars(&a), &chars(&b)), dp_lcs(&chars(&a), &chars(&b)));
    }

    #[test]
    fn long_inputs_cross_word_boundaries(a in "[ab]{0,200}", b in "[abc]{0,150}") {
        prop_assert_eq!(lcs_len(&chars(&a), &chars(&b)), dp_lcs(&chars(&a), &chars(&b)));
    }

    #[test]
    fn indel_is_a_metric(a in "\\PC{0,12}", b in "\\PC{0,12}", c in "\\PC{0,12}") {
        prop_assert_eq!(indel_distance(&a, &b), indel_distance(&b, &a));
        prop_assert_eq!(indel_distance(&a, &a), 0);
        prop_assert!(indel_distance(&a, &c) <= indel_distance(&a, &b) + indel_distance(&b, &c));
        let n = normalized_indel(&a, &b);
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert_eq!(n == 0.0, a == b);
    }

    #[test]
    fn alias_table_ignores_input_order(
        pairs in prop::collection::vec((0usize..4, 1u64..6), 1..40),
        seed in any::<u64>(),
        k in 1usize..4,
    ) {
        let aliases = ["Paris", "paris", "Roma", "Wien"];
        let input: Vec<(&str, Qid)> = pairs.iter().map(|&(a, q)| (aliases[a], Qid::new(q).unwrap())).collect();
        let mut shuffled = input.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        for cased in [true, false] {
            let a = AliasTable::build(input.iter().copied(), k, cased).unwrap();
            let b = AliasTable::build(shuffled.iter().copied(), k, cased).unwrap();
            let mut x = Vec::new();
            let mut y = Vec::new();
            a.write_tsv(&mut x).unwrap();
            b.write_tsv(&mut y).unwrap();
            prop_assert_eq!(&x, &y);
            for (_, list) in a.iter() {
                prop_assert!(list.len() <= k);
                prop_assert!(list.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
            }
        }
    }
}

#[test]
fn floor_flower() {
    assert_eq!(indel_distance("floor", "flower"), 3);
    assert!((normalized_indel("floor", "flower") - 3.0 / 11.0).abs() < 1e-15);
}

#[test]
fn uncased_table_folds_mentions() {
    let q = |n| Qid::new(n).unwrap();
    let t = AliasTable::build([("Paris", q(90)), ("PARIS", q(90)), ("paris", q(5))], 2, false).unwrap();
    assert_eq!(t.link("pArIs"), vec![q(90), q(5)]);
    assert_eq!(fold_case("İSTANBUL"), "istanbul");
}

#[test]
fn string_fallback_recovers_inflections() {
    let q = |n| Qid::new(n).unwrap();
    let t = AliasTable::build([("İstanbul", q(406)), ("Ankara", q(3640))], 1, true).unwrap();
    assert!(t.link("İstanbul'da").is_empty());
    assert_eq!(link_by_similarity(&t, "İstanbul'da", 1).unwrap(), vec![q(406)]);
}
