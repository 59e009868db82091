use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::numeric::seeded_rng;

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

fn random_corpus(seed: u64, n_docs: usize) -> Corpus {
    let mut rng = seeded_rng(seed);
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let texts: Vec<String> = (0..n_docs)
        .map(|_| {
            let len = rng.random_range(1..12);
            (0..len)
                .map(|_| words[rng.random_range(0..words.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Corpus::from_texts(&texts).unwrap()
}

fn random_query(rng: &mut impl Rng) -> Vec<String> {
    let len = rng.random_range(1..5);
    // a few words outside the corpus vocabulary
    (0..len).map(|_| format!("w{}", rng.random_range(0..34))).collect()
}

// Direct evaluation of the BM25 formula by scanning the whole corpus.
fn brute_bm25(corpus: &Corpus, query: &[String], doc_id: usize, k1: f64, b: f64) -> f64 {
    let docs = corpus.documents();
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.tokens.len()).sum::<usize>() as f64 / n;
    let doc = &docs[doc_id];
    let mut score = 0.0;
    for t in query {
        let tf = doc.tokens.iter().filter(|x| *x == t).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|d| d.tokens.contains(t)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.tokens.len() as f64 / avg));
    }
    score
}

fn brute_sparse(corpus: &Corpus, query: &[String], m: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..corpus.len())
        .map(|d| (d, brute_bm25(corpus, query, d, DEFAULT_K1, DEFAULT_B)))
        .filter(|&(_, s)| s > 0.0)
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(m);
    all
}

fn hash_embedder(dim: usize) -> impl Fn(&[String]) -> Result<Vec<f64>> {
    move |tokens: &[String]| {
        let mut v = vec![0.0; dim];
        for t in tokens {
            let mut rng = seeded_rng(t.bytes().fold(7u64, |h, c| h.wrapping_mul(31).wrapping_add(c as u64)));
            for x in v.iter_mut() {
                *x += rng.random_range(-1.0..1.0) / tokens.len() as f64;
            }
        }
        Ok(v)
    }
}

#[test]
fn single_document_postings() {
    let c = Corpus::from_texts(["a b a"]).unwrap();
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    assert_eq!(idx.postings("a"), &[(0, 2)]);
    assert_eq!(idx.postings("b"), &[(0, 1)]);
    assert_eq!(idx.doc_len(0), 3);
    assert!(idx.bm25_score(&toks("a b a"), 0) > 0.0);
}

#[test]
fn duplicate_documents_get_distinct_ids() {
    let c = Corpus::from_texts(["x y", "x y"]).unwrap();
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    assert_eq!(idx.postings("x"), &[(0, 1), (1, 1)]);
    assert_eq!(idx.bm25_score(&toks("x"), 0), idx.bm25_score(&toks("x"), 1));
}

#[test]
fn corpus_contracts() {
    assert!(matches!(Corpus::from_texts(Vec::<String>::new()), Err(RetrievalError::EmptyCorpus)));
    assert!(Corpus::from_texts(["ok", "..."]).is_err());
    let bad = "{\"id\": 0, \"text\": \"a\"}\n{\"id\": 2, \"text\": \"b\"}\n";
    assert!(matches!(Corpus::read_jsonl(bad.as_bytes()), Err(RetrievalError::Corpus(_))));
    let broken = "{\"id\": 0, \"text\": \"a\"}\nnot json\n";
    assert!(matches!(
        Corpus::read_jsonl(broken.as_bytes()),
        Err(RetrievalError::Parse { line: 2, .. })
    ));
    let shuffled = "{\"id\": 1, \"text\": \"b\"}\n\n{\"id\": 0, \"text\": \"a\"}\n";
    let c = Corpus::read_jsonl(shuffled.as_bytes()).unwrap();
    assert_eq!(c.get(0).unwrap().text, "a");
    let mut out = Vec::new();
    c.write_jsonl(&mut out).unwrap();
    assert_eq!(Corpus::read_jsonl(out.as_slice()).unwrap(), c);
}

#[test]
fn bad_bm25_parameters_are_rejected() {
    let c = Corpus::from_texts(["a"]).unwrap();
    assert!(build_index(&c, -1.0, 0.5).is_err());
    assert!(build_index(&c, 1.2, 1.5).is_err());
}

#[test]
fn index_statistics_match_a_recount() {
    let c = random_corpus(1, 50);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let mut total = 0;
    for d in c.documents() {
        assert_eq!(idx.doc_len(d.id), d.tokens.len());
        total += d.tokens.len();
        for t in &d.tokens {
            let tf = d.tokens.iter().filter(|x| *x == t).count() as u32;
            assert!(idx.postings(t).contains(&(d.id, tf)));
        }
    }
    assert!((idx.avg_doc_len() - total as f64 / 50.0).abs() < 1e-12);
    let mut sums = vec![0u32; 50];
    for t in idx.terms() {
        let list = idx.postings(t);
        assert!(list.windows(2).all(|w| w[0].0 < w[1].0));
        for &(d, tf) in list {
            sums[d] += tf;
        }
    }
    for d in 0..50 {
        assert_eq!(sums[d] as usize, idx.doc_len(d));
    }
}

#[test]
fn absent_terms_contribute_nothing() {
    let c = random_corpus(2, 10);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    for d in 0..10 {
        assert_eq!(idx.bm25_score(&toks("nothing here"), d), 0.0);
        let with = idx.bm25_score(&toks("w1 nothing"), d);
        assert_eq!(with, idx.bm25_score(&toks("w1"), d));
    }
    assert!(idx.sparse_retrieve(&toks("nothing"), 5).is_empty());
}

#[test]
fn bm25_matches_direct_formula() {
    let mut rng = seeded_rng(3);
    let c = random_corpus(3, 10);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    for _ in 0..20 {
        let q: Vec<String> = (0..3).map(|_| format!("w{}", rng.random_range(0..30))).collect();
        for d in 0..10 {
            let got = idx.bm25_score(&q, d);
            assert!((got - brute_bm25(&c, &q, d, DEFAULT_K1, DEFAULT_B)).abs() < 1e-9);
            assert!(got >= 0.0);
        }
    }
}

#[test]
fn ties_break_by_ascending_doc_id() {
    let c = Corpus::from_texts(["b", "a c", "z", "a c"]).unwrap();
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let r = idx.sparse_retrieve(&toks("a"), 10);
    assert_eq!(r.iter().map(|c| c.doc_id).collect::<Vec<_>>(), [1, 3]);
    assert_eq!(r[0].sparse_score, r[1].sparse_score);
    assert!(r.iter().all(|c| c.dense_score.is_none()));
}

#[test]
fn sparse_retrieval_equals_exhaustive_ranking() {
    let mut rng = seeded_rng(4);
    for trial in 0..5 {
        let c = random_corpus(100 + trial, 120);
        let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
        for _ in 0..10 {
            let q = random_query(&mut rng);
            let m = rng.random_range(1..40);
            let got = idx.sparse_retrieve(&q, m);
            let want = brute_sparse(&c, &q, m);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.doc_id, w.0);
                assert!((g.sparse_score - w.1).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn dense_rerank_equals_exhaustive_inner_product_sort() {
    let c = random_corpus(5, 60);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let emb = hash_embedder(6);
    let mut rng = seeded_rng(6);
    for _ in 0..10 {
        let q = random_query(&mut rng);
        let qe: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cands = idx.sparse_retrieve(&q, 20);
        let n = rng.random_range(1..25);
        let got = dense_rerank(&qe, cands.clone(), &c, &emb, n).unwrap();
        let mut want: Vec<(usize, f64)> = cands
            .iter()
            .map(|cand| {
                let k = emb(&c.get(cand.doc_id).unwrap().tokens).unwrap();
                (cand.doc_id, qe.iter().zip(&k).map(|(a, b)| a * b).sum())
            })
            .collect();
        want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        want.truncate(n);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.doc_id, w.0);
            assert!((g.dense_score.unwrap() - w.1).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_query_embedding_falls_back_to_doc_order() {
    let c = random_corpus(7, 30);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let cands = idx.sparse_retrieve(&toks("w1 w2 w3"), 10);
    let got = dense_rerank(&[0.0; 4], cands.clone(), &c, &hash_embedder(4), 10).unwrap();
    let mut ids: Vec<usize> = cands.iter().map(|c| c.doc_id).collect();
    ids.sort();
    assert_eq!(got.iter().map(|c| c.doc_id).collect::<Vec<_>>(), ids);
    assert!(got.iter().all(|c| c.dense_score == Some(0.0)));
}

#[test]
fn rerank_with_all_candidates_only_reorders() {
    let c = random_corpus(8, 40);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let cands = idx.sparse_retrieve(&toks("w4 w5"), 15);
    let got = dense_rerank(&[0.3, -0.2, 0.9], cands.clone(), &c, &hash_embedder(3), cands.len()).unwrap();
    let mut a: Vec<usize> = cands.iter().map(|c| c.doc_id).collect();
    let mut b: Vec<usize> = got.iter().map(|c| c.doc_id).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn two_stage_over_small_corpus_is_dense_ranking_of_matches() {
    let c = random_corpus(9, 20);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let emb = hash_embedder(5);
    let qe = [0.1, 0.5, -0.4, 0.2, 0.0];
    let got = idx.retrieve(&emb, &qe, "w3 w7", 100, 100).unwrap();
    let all = idx.sparse_retrieve(&toks("w3 w7"), usize::MAX);
    let want = dense_rerank(&qe, all, &c, &emb, usize::MAX).unwrap();
    assert_eq!(got, want);
    // n larger than m is clamped
    assert_eq!(idx.retrieve(&emb, &qe, "w3 w7", 2, 9).unwrap().len(), 2.min(want.len()));
}

#[test]
fn embedding_width_mismatch_and_nan_are_errors() {
    let c = random_corpus(10, 10);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let cands = idx.sparse_retrieve(&toks("w1 w2 w3 w4"), 5);
    assert!(!cands.is_empty());
    assert!(dense_rerank(&[1.0; 3], cands.clone(), &c, &hash_embedder(4), 5).is_err());
    assert!(dense_rerank(&[f64::NAN; 4], cands, &c, &hash_embedder(4), 5).is_err());
}

#[test]
fn persistence_rejects_other_versions_and_broken_postings() {
    let c = random_corpus(11, 10);
    let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
    let json = idx.to_json().unwrap();
    let bumped = json.replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(
        InvertedIndex::from_json(&bumped),
        Err(RetrievalError::Version { found: 9, expected: 1 })
    ));
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["doc_len"][0] = serde_json::json!(999);
    assert!(InvertedIndex::from_json(&v.to_string()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sparse_top_m_is_prefix_of_top_m_plus_one(seed in any::<u64>(), m in 1usize..30) {
        let c = random_corpus(seed, 40);
        let idx = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
        let q = random_query(&mut seeded_rng(seed ^ 0xff));
        let a = idx.sparse_retrieve(&q, m);
        let b = idx.sparse_retrieve(&q, m + 1);
        prop_assert!(b.len() >= a.len());
        prop_assert_eq!(&b[..a.len()], &a[..]);
    }

    #[test]
    fn round_trip_reproduces_scores_exactly(seed in any::<u64>()) {
        let c = random_corpus(seed, 30);
        let idx = build_index(&c, 0.9, 0.4).unwrap();
        let back = InvertedIndex::from_json(&idx.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &idx);
        let mut rng = seeded_rng(seed);
        for _ in 0..100 {
            let q = random_query(&mut rng);
            let d = rng.random_range(0..30);
            prop_assert_eq!(idx.bm25_score(&q, d).to_bits(), back.bm25_score(&q, d).to_bits());
        }
    }

    #[test]
    fn irrelevant_document_keeps_tf_component(seed in any::<u64>()) {
        let c = random_corpus(seed, 20);
        let mut texts: Vec<String> = c.documents().iter().map(|d| d.text.clone()).collect();
        texts.push("unrelated filler".into());
        let bigger = Corpus::from_texts(&texts).unwrap();
        let a = build_index(&c, DEFAULT_K1, DEFAULT_B).unwrap();
        let b = build_index(&bigger, DEFAULT_K1, DEFAULT_B).unwrap();
        // the new document shares no term, so each posting is unchanged
        for t in a.terms() {
            prop_assert_eq!(a.postings(t), b.postings(t));
            prop_assert!(b.idf(t) >= a.idf(t));
        }
    }
}
