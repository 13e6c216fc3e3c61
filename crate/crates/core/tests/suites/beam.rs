//! Beam search against brute-force enumeration on a three-token output
//! vocabulary, and the degenerate single-beam case against greedy decoding.

use paraal::layers::Decoder;
use paraal::numerics::{ParamStore, Rng};
use paraal::qamodel::beam_search;
use paraal::taskgen::EOS;

const A: usize = 3;
const B: usize = 4;
/// PAD and BOS are never emitted, so the output alphabet is {EOS, A, B}.
const VOCAB: usize = 5;
const CONTEXT: usize = 4;

fn decoder(seed: u64) -> (ParamStore, Decoder) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, "dec", VOCAB, 3, CONTEXT, 5, &mut rng);
    // sharpen the distributions so that the ranking is not near-uniform
    for t in store.tensors_mut() {
        t.values.iter_mut().for_each(|v| *v *= 2.5);
    }
    (store, dec)
}

fn context(rng: &mut Rng) -> Vec<f64> {
    (0..CONTEXT).map(|_| rng.normal()).collect()
}

/// Every finished sequence: EOS-terminated of length <= max_len, or
/// exactly max_len tokens without EOS.
fn all_sequences(max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for tok in [EOS, A, B] {
                let mut s = p.clone();
                s.push(tok);
                if tok == EOS || len == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

pub fn enumeration_counts() {
    assert_eq!(all_sequences(2).len(), 1 + 2 + 4);
    assert_eq!(all_sequences(3).len(), 1 + 2 + 4 + 8);
}

pub fn wide_beam_equals_exhaustive_enumeration() {
    let max_len = 3;
    let mut rng = Rng::new(17);
    for seed in 0..20 {
        let (store, dec) = decoder(seed);
        for _ in 0..10 {
            let z = context(&mut rng);
            let mut oracle: Vec<(Vec<usize>, f64)> = all_sequences(max_len)
                .into_iter()
                .map(|s| {
                    let lp = dec.sequence_logprob(&store, &z, &s);
                    (s, lp)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.total_cmp(&a.1));

            // width 8 keeps every prefix alive until the last step
            let beam = beam_search(&dec, &store, &z, 8, max_len).unwrap();
            assert_eq!(beam.len(), 8);
            for (h, (s, lp)) in beam.iter().zip(&oracle) {
                assert_eq!(&h.tokens, s);
                assert!((h.log_probability - lp).abs() < 1e-12);
                assert!((h.probability() - lp.exp()).abs() < 1e-12);
            }

            let full = beam_search(&dec, &store, &z, 64, max_len).unwrap();
            assert_eq!(full.len(), oracle.len());
            for (h, (s, lp)) in full.iter().zip(&oracle) {
                assert_eq!(&h.tokens, s);
                assert!((h.log_probability - lp).abs() < 1e-12);
            }
        }
    }
}

pub fn width_eight_covers_all_length_two_sequences() {
    let (store, dec) = decoder(99);
    let z = context(&mut Rng::new(5));
    let beam = beam_search(&dec, &store, &z, 8, 2).unwrap();
    let mut got: Vec<Vec<usize>> = beam.iter().map(|h| h.tokens.clone()).collect();
    let mut want = all_sequences(2);
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

pub fn width_one_is_greedy() {
    let mut rng = Rng::new(3);
    let mut checked = 0;
    for seed in 0..10 {
        let (store, dec) = decoder(100 + seed);
        for _ in 0..50 {
            let z = context(&mut rng);
            let max_len = 1 + rng.below(5);
            let beam = beam_search(&dec, &store, &z, 1, max_len).unwrap();
            assert_eq!(beam.len(), 1);
            assert_eq!(beam[0].answer_tokens(), dec.greedy(&store, &z, max_len).as_slice());
            checked += 1;
        }
    }
    assert_eq!(checked, 500);
}

pub fn log_probabilities_are_sorted_and_nonpositive() {
    let (store, dec) = decoder(7);
    let z = context(&mut Rng::new(8));
    let beam = beam_search(&dec, &store, &z, 5, 4).unwrap();
    assert!(beam.windows(2).all(|w| w[0].log_probability >= w[1].log_probability));
    assert!(beam.iter().all(|h| h.log_probability <= 0.0));
    assert!(beam_search(&dec, &store, &z, 0, 4).is_err());
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("enumeration_counts", enumeration_counts),
    (
        "wide_beam_equals_exhaustive_enumeration",
        wide_beam_equals_exhaustive_enumeration,
    ),
    (
        "width_eight_covers_all_length_two_sequences",
        width_eight_covers_all_length_two_sequences,
    ),
    ("width_one_is_greedy", width_one_is_greedy),
    (
        "log_probabilities_are_sorted_and_nonpositive",
        log_probabilities_are_sorted_and_nonpositive,
    ),
];
