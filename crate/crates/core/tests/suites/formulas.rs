//! Worked examples of every acquisition formula, and the model-level scores
//! checked against the formulas applied to their own beams.

use paraal::numerics::Rng;
use paraal::qamodel::{QaConfig, QaModel};
use paraal::uncertainty::{
    corrected_entropy_value, entropy_value, least_confidence_value, margin_value, mc_sample_with_seeds, score_entropy,
    score_least_confidence, score_margin, score_random, variance_score, variance_score_with, McSampleSet,
    VarianceAggregation,
};

const TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < TOL
}

fn set(embeddings: Vec<Vec<f64>>) -> McSampleSet {
    McSampleSet {
        seeds: (0..embeddings.len() as u64).collect(),
        embeddings,
        denoised: false,
    }
}

pub fn least_confidence_examples() {
    assert!(close(least_confidence_value(1.0), 0.0));
    assert!(close(least_confidence_value(0.3), 0.7));
    let mut rng = Rng::new(1);
    for _ in 0..1000 {
        let u = least_confidence_value(rng.uniform());
        assert!((0.0..=1.0).contains(&u));
    }
}

pub fn margin_examples() {
    assert!(close(margin_value(&[0.4, 0.4]), 1.0));
    assert!(close(margin_value(&[1.0, 0.0]), 0.0));
    assert!(close(margin_value(&[1.0]), 0.0));
    assert!(close(margin_value(&[0.5, 0.3]), 0.8));
}

pub fn entropy_examples() {
    assert!(close(entropy_value(&[1.0]), 0.0));
    assert!(close(entropy_value(&[1.0, 0.0, 0.0]), 0.0));
    assert!(close(entropy_value(&[0.2; 5]), 5f64.ln()));
    assert!(close(entropy_value(&[0.2; 5]), 1.6094379124341003));
}

pub fn corrected_entropy_examples() {
    // one class
    let same: Vec<(Option<usize>, f64)> = [0.3, 0.3, 0.2, 0.1, 0.1].iter().map(|&p| (Some(4), p)).collect();
    assert!(close(corrected_entropy_value(&same), 0.0));
    // all distinct classes: nothing merges
    let probs = [0.3, 0.3, 0.2, 0.1, 0.1];
    let distinct: Vec<(Option<usize>, f64)> = probs.iter().enumerate().map(|(i, &p)| (Some(i), p)).collect();
    assert!(close(corrected_entropy_value(&distinct), entropy_value(&probs)));
    // first two merge
    let merged = [
        (Some(0), 0.3),
        (Some(0), 0.3),
        (Some(1), 0.2),
        (Some(2), 0.1),
        (None, 0.1),
    ];
    assert!(close(
        corrected_entropy_value(&merged),
        entropy_value(&[0.6, 0.2, 0.1, 0.1])
    ));
}

pub fn corrected_never_exceeds_raw() {
    let mut rng = Rng::new(2024);
    for _ in 0..1000 {
        let b = 2 + rng.below(7);
        let mut p: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
        // beam masses are a sub-distribution
        let z: f64 = p.iter().sum::<f64>() / (0.2 + 0.8 * rng.uniform());
        p.iter_mut().for_each(|x| *x /= z);
        p.sort_by(|a, b| b.total_cmp(a));
        let classes = 1 + rng.below(b);
        let hyps: Vec<(Option<usize>, f64)> = p
            .iter()
            .map(|&x| {
                let c = rng.below(classes + 1);
                (if c == classes { None } else { Some(c) }, x)
            })
            .collect();
        let raw = entropy_value(&p);
        let corrected = corrected_entropy_value(&hyps);
        assert!(corrected <= raw + 1e-12, "{corrected} > {raw} for {hyps:?}");
    }
}

pub fn variance_examples() {
    assert!(close(variance_score(&set(vec![vec![1.0, -2.0]; 4])).unwrap(), 0.0));
    assert!(close(variance_score(&set(vec![vec![0.0], vec![2.0]])).unwrap(), 1.0));
    // per-dimension scalar oracle
    let mut rng = Rng::new(8);
    let samples: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.normal(), 3.0 * rng.normal()]).collect();
    let oracle: f64 = (0..2)
        .map(|d| {
            let xs: Vec<f64> = samples.iter().map(|s| s[d]).collect();
            let mean = xs.iter().sum::<f64>() / 7.0;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0
        })
        .sum();
    let s = set(samples.clone());
    assert!(close(variance_score(&s).unwrap(), oracle));
    assert!(close(
        variance_score_with(&s, VarianceAggregation::Mean).unwrap(),
        oracle / 2.0
    ));
    // permutation invariance
    let mut rev = samples;
    rev.reverse();
    assert!(close(variance_score(&set(rev)).unwrap(), oracle));
    assert!(variance_score(&set(vec![vec![1.0]])).is_err());
}

pub fn random_scores() {
    let a = score_random(10_000, &mut Rng::new(4));
    assert_eq!(a, score_random(10_000, &mut Rng::new(4)));
    let mean = a.iter().map(|s| s.value).sum::<f64>() / a.len() as f64;
    assert!((0.49..=0.51).contains(&mean), "{mean}");
    assert_eq!(score_random(1, &mut Rng::new(4)).len(), 1);
}

fn small_model(seed: u64) -> QaModel {
    let cfg = QaConfig {
        embed_dim: 6,
        token_dim: 4,
        question_hidden: 5,
        decoder_hidden: 5,
        max_len: 3,
        ..QaConfig::default()
    };
    QaModel::new(9, 4, &cfg, &mut Rng::new(seed)).unwrap()
}

pub fn model_scores_apply_the_formulas_to_their_beams() {
    let mut rng = Rng::new(12);
    for seed in 0..20 {
        let m = small_model(seed);
        let q = [3, 4, 5];
        let img: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let b1 = m.beam_decode(&q, &img, 1, 3).unwrap();
        assert!(close(
            score_least_confidence(&m, &q, &img).unwrap(),
            1.0 - b1[0].probability()
        ));
        let b2: Vec<f64> = m
            .beam_decode(&q, &img, 2, 3)
            .unwrap()
            .iter()
            .map(|h| h.probability())
            .collect();
        assert!(close(score_margin(&m, &q, &img).unwrap(), 1.0 + b2[1] - b2[0]));
        let b5: Vec<f64> = m
            .beam_decode(&q, &img, 5, 3)
            .unwrap()
            .iter()
            .map(|h| h.probability())
            .collect();
        let h: f64 = b5.iter().map(|p| -p * p.ln()).sum();
        assert!(close(score_entropy(&m, &q, &img, 5).unwrap(), h));
        assert!(score_entropy(&m, &q, &img, 1).is_err());
    }
}

pub fn no_dropout_means_no_variance() {
    let mut m = small_model(3);
    m.config.keep_probability = 1.0;
    let s = mc_sample_with_seeds(&m, &[3, 4], &[0.5, -1.0, 0.0, 2.0], &[1, 2, 3, 4]).unwrap();
    assert_eq!(variance_score(&s).unwrap(), 0.0);
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("least_confidence_examples", least_confidence_examples),
    ("margin_examples", margin_examples),
    ("entropy_examples", entropy_examples),
    ("corrected_entropy_examples", corrected_entropy_examples),
    ("corrected_never_exceeds_raw", corrected_never_exceeds_raw),
    ("variance_examples", variance_examples),
    ("random_scores", random_scores),
    (
        "model_scores_apply_the_formulas_to_their_beams",
        model_scores_apply_the_formulas_to_their_beams,
    ),
    ("no_dropout_means_no_variance", no_dropout_means_no_variance),
];
