//! Acquisition scores: output-space baselines computed from beam search,
//! and embedding-variance scores computed from Monte-Carlo dropout samples
//! of the hidden representation, optionally snapped back onto the semantic
//! space by a decode-and-re-encode denoiser.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedspace::SemanticSpace;
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, Rng};
use crate::qamodel::{BeamHypothesis, QaModel};
use crate::taskgen::{ParaphraseTable, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    LeastConfidence,
    Margin,
    Entropy,
    Baye,
    BayeDeno,
    BayeVs,
    BayeVsDeno,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Random,
        Strategy::LeastConfidence,
        Strategy::Margin,
        Strategy::Entropy,
        Strategy::Baye,
        Strategy::BayeDeno,
        Strategy::BayeVs,
        Strategy::BayeVsDeno,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Margin => "margin",
            Strategy::Entropy => "entropy",
            Strategy::Baye => "baye",
            Strategy::BayeDeno => "baye_deno",
            Strategy::BayeVs => "baye_vs",
            Strategy::BayeVsDeno => "baye_vs_deno",
        }
    }

    /// Whether models acquired with this strategy train with the embedding
    /// loss.
    pub fn embed_enabled(self) -> bool {
        matches!(self, Strategy::BayeVs | Strategy::BayeVsDeno)
    }

    pub fn uses_denoiser(self) -> bool {
        matches!(self, Strategy::BayeDeno | Strategy::BayeVsDeno)
    }

    pub fn is_bayesian(self) -> bool {
        matches!(
            self,
            Strategy::Baye | Strategy::BayeDeno | Strategy::BayeVs | Strategy::BayeVsDeno
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub item_index: usize,
    pub value: f64,
    pub strategy: Strategy,
}

/// How per-dimension variances are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceAggregation {
    #[default]
    Sum,
    Mean,
}

pub fn score_random(pool_size: usize, rng: &mut Rng) -> Vec<UncertaintyScore> {
    (0..pool_size)
        .map(|item_index| UncertaintyScore {
            item_index,
            value: rng.uniform(),
            strategy: Strategy::Random,
        })
        .collect()
}

/// `1 - P(a*)`.
pub fn least_confidence_value(p_top: f64) -> f64 {
    (1.0 - p_top).clamp(0.0, 1.0)
}

/// `1 + P(a2) - P(a1)` with `P(a2) = 0` when only one answer is reachable.
pub fn margin_value(probs: &[f64]) -> f64 {
    let p1 = probs.first().copied().unwrap_or(0.0);
    let p2 = probs.get(1).copied().unwrap_or(0.0);
    (1.0 - (p1 - p2)).clamp(0.0, 1.0)
}

/// `-sum p log p` over the given probabilities, used as they are.
pub fn entropy_value(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Entropy after merging the mass of hypotheses that share a paraphrase
/// class. Hypotheses without a class (`None`) stay separate.
pub fn corrected_entropy_value(hyps: &[(Option<usize>, f64)]) -> f64 {
    let mut by_class: Vec<(usize, f64)> = Vec::new();
    let mut masses = Vec::new();
    for &(class, p) in hyps {
        match class {
            Some(c) => match by_class.iter_mut().find(|(k, _)| *k == c) {
                Some(slot) => slot.1 += p,
                None => by_class.push((c, p)),
            },
            None => masses.push(p),
        }
    }
    masses.extend(by_class.into_iter().map(|(_, p)| p));
    entropy_value(&masses)
}

fn probs(hyps: &[BeamHypothesis]) -> Vec<f64> {
    hyps.iter().map(BeamHypothesis::probability).collect()
}

pub fn score_least_confidence(model: &QaModel, question: &[usize], image: &[f64]) -> Result<f64> {
    let hyps = model.beam_decode(question, image, 1, model.config.max_len)?;
    let top = hyps
        .first()
        .ok_or_else(|| Error::InvalidArgument("least confidence: decoder produced no hypothesis".into()))?;
    Ok(least_confidence_value(top.probability()))
}

pub const MARGIN_BEAM: usize = 2;
pub const ENTROPY_BEAM: usize = 5;

pub fn score_margin(model: &QaModel, question: &[usize], image: &[f64]) -> Result<f64> {
    let hyps = model.beam_decode(question, image, MARGIN_BEAM, model.config.max_len)?;
    Ok(margin_value(&probs(&hyps)))
}

pub fn score_entropy(model: &QaModel, question: &[usize], image: &[f64], beam_width: usize) -> Result<f64> {
    score_entropy_with(model, question, image, beam_width, false)
}

/// Beam entropy; `renormalize` rescales the beam probabilities to sum to 1
/// first.
pub fn score_entropy_with(
    model: &QaModel,
    question: &[usize],
    image: &[f64],
    beam_width: usize,
    renormalize: bool,
) -> Result<f64> {
    if beam_width < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy needs beam width >= 2, got {beam_width}"
        )));
    }
    let hyps = model.beam_decode(question, image, beam_width, model.config.max_len)?;
    let mut p = probs(&hyps);
    if renormalize {
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
    }
    Ok(entropy_value(&p))
}

/// Raw and class-merged entropy of the same beam. Diagnostic only.
pub fn entropy_pair(
    model: &QaModel,
    question: &[usize],
    image: &[f64],
    beam_width: usize,
    table: &ParaphraseTable,
) -> Result<(f64, f64)> {
    let hyps = model.beam_decode(question, image, beam_width, model.config.max_len)?;
    let raw = entropy_value(&probs(&hyps));
    let merged: Vec<(Option<usize>, f64)> = hyps
        .iter()
        .map(|h| (table.class_of_form(h.answer_tokens()), h.probability()))
        .collect();
    Ok((raw, corrected_entropy_value(&merged)))
}

pub fn corrected_entropy(
    model: &QaModel,
    question: &[usize],
    image: &[f64],
    beam_width: usize,
    table: &ParaphraseTable,
) -> Result<f64> {
    Ok(entropy_pair(model, question, image, beam_width, table)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSampleSet {
    pub embeddings: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub denoised: bool,
}

/// Dropout seeds for item `item` of a run: `mix(run_seed, item, k)`.
pub fn item_seeds(run_seed: u64, item: usize, m: usize) -> Vec<u64> {
    (0..m).map(|k| mix_seed(&[run_seed, item as u64, k as u64])).collect()
}

pub fn mc_sample_with_seeds(model: &QaModel, question: &[usize], image: &[f64], seeds: &[u64]) -> Result<McSampleSet> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 Monte-Carlo samples, got {}",
            seeds.len()
        )));
    }
    Ok(McSampleSet {
        embeddings: model.encode_mc(question, image, seeds)?,
        seeds: seeds.to_vec(),
        denoised: false,
    })
}

/// `m` Monte-Carlo encodings under distinct seeds drawn from `rng`.
pub fn mc_sample(model: &QaModel, question: &[usize], image: &[f64], m: usize, rng: &mut Rng) -> Result<McSampleSet> {
    let mut seeds: Vec<u64> = Vec::with_capacity(m);
    while seeds.len() < m {
        let s = rng.next_u64();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    mc_sample_with_seeds(model, question, image, &seeds)
}

/// Decode-and-re-encode of hidden vectors, with re-encodings memoised per
/// decoded token sequence.
pub struct Denoiser<'a> {
    pub model: &'a QaModel,
    pub space: &'a SemanticSpace,
    pub max_len: usize,
    cache: HashMap<Vec<usize>, Vec<f64>>,
    /// Decodes that produced no tokens and were embedded as a lone EOS.
    pub empty_decodes: usize,
}

impl<'a> Denoiser<'a> {
    pub fn new(model: &'a QaModel, space: &'a SemanticSpace, max_len: usize) -> Result<Self> {
        if model.embed_dim() != space.embed_dim() {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                shapes: format!(
                    "model dimension {} vs space dimension {}",
                    model.embed_dim(),
                    space.embed_dim()
                ),
            });
        }
        Ok(Self {
            model,
            space,
            max_len,
            cache: HashMap::new(),
            empty_decodes: 0,
        })
    }

    pub fn project(&mut self, h: &[f64]) -> Result<Vec<f64>> {
        let mut tokens = self.model.decode_greedy(h, self.max_len)?;
        if tokens.is_empty() {
            self.empty_decodes += 1;
            tokens.push(EOS);
        }
        if let Some(v) = self.cache.get(&tokens) {
            return Ok(v.clone());
        }
        let v = self.space.embed_text(&tokens)?;
        self.cache.insert(tokens, v.clone());
        Ok(v)
    }

    pub fn denoise(&mut self, samples: &McSampleSet) -> Result<McSampleSet> {
        if samples.denoised {
            return Err(Error::InvalidArgument("samples are already denoised".into()));
        }
        Ok(McSampleSet {
            embeddings: samples
                .embeddings
                .iter()
                .map(|h| self.project(h))
                .collect::<Result<_>>()?,
            seeds: samples.seeds.clone(),
            denoised: true,
        })
    }
}

pub fn denoise(samples: &McSampleSet, model: &QaModel, space: &SemanticSpace, max_len: usize) -> Result<McSampleSet> {
    Denoiser::new(model, space, max_len)?.denoise(samples)
}

/// Sum over dimensions of the population variance (divide by `m`).
pub fn variance_score(samples: &McSampleSet) -> Result<f64> {
    variance_score_with(samples, VarianceAggregation::Sum)
}

pub fn variance_score_with(samples: &McSampleSet, agg: VarianceAggregation) -> Result<f64> {
    let m = samples.embeddings.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs at least 2 samples, got {m}"
        )));
    }
    let d = samples.embeddings[0].len();
    if samples.embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::ShapeMismatch {
            op: "variance_score",
            shapes: "samples of unequal dimension".into(),
        });
    }
    let mut total = 0.0;
    for k in 0..d {
        let mean = samples.embeddings.iter().map(|e| e[k]).sum::<f64>() / m as f64;
        total += samples.embeddings.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / m as f64;
    }
    Ok(match agg {
        VarianceAggregation::Sum => total,
        VarianceAggregation::Mean => total / d as f64,
    })
}

/// Monte-Carlo sampling, optional denoising, then variance.
#[allow(clippy::too_many_arguments)]
pub fn score_bayesian(
    model: &QaModel,
    space: Option<&SemanticSpace>,
    question: &[usize],
    image: &[f64],
    m: usize,
    rng: &mut Rng,
    use_denoiser: bool,
    max_len: usize,
) -> Result<f64> {
    let samples = mc_sample(model, question, image, m, rng)?;
    if !use_denoiser {
        return variance_score(&samples);
    }
    let space = space.ok_or_else(|| Error::InvalidArgument("denoiser requires a semantic space".into()))?;
    variance_score(&denoise(&samples, model, space, max_len)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(least_confidence_value(1.0), 0.0);
        assert!((least_confidence_value(0.3) - 0.7).abs() < 1e-12);
        assert_eq!(margin_value(&[0.4, 0.4]), 1.0);
        assert_eq!(margin_value(&[1.0]), 0.0);
        assert!((margin_value(&[0.5, 0.3]) - 0.8).abs() < 1e-12);
        assert_eq!(entropy_value(&[1.0]), 0.0);
        assert!((entropy_value(&[0.2; 5]) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn corrected_entropy_cases() {
        let p = [0.3, 0.3, 0.2, 0.1, 0.1];
        let merged = corrected_entropy_value(&[
            (Some(0), 0.3),
            (Some(0), 0.3),
            (Some(1), 0.2),
            (Some(2), 0.1),
            (None, 0.1),
        ]);
        assert!((merged - entropy_value(&[0.6, 0.2, 0.1, 0.1])).abs() < 1e-12);
        let distinct: Vec<_> = p.iter().enumerate().map(|(i, &x)| (Some(i), x)).collect();
        assert!((corrected_entropy_value(&distinct) - entropy_value(&p)).abs() < 1e-12);
        let same: Vec<_> = [0.5, 0.5].iter().map(|&x| (Some(3), x)).collect();
        assert_eq!(corrected_entropy_value(&same), 0.0);
    }

    #[test]
    fn variance_examples() {
        let s = |e: Vec<Vec<f64>>| McSampleSet {
            seeds: (0..e.len() as u64).collect(),
            embeddings: e,
            denoised: false,
        };
        assert_eq!(variance_score(&s(vec![vec![1.0, 2.0]; 4])).unwrap(), 0.0);
        assert!((variance_score(&s(vec![vec![0.0], vec![2.0]])).unwrap() - 1.0).abs() < 1e-12);
        assert!(variance_score(&s(vec![vec![0.0]])).is_err());
        let two = s(vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 4.0]]);
        let mean = variance_score_with(&two, VarianceAggregation::Mean).unwrap();
        assert!((mean * 2.0 - variance_score(&two).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn random_scores() {
        let a = score_random(50, &mut Rng::new(2));
        assert_eq!(a, score_random(50, &mut Rng::new(2)));
        assert_eq!(score_random(1, &mut Rng::new(2)).len(), 1);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("bayes".parse::<Strategy>().is_err());
    }
}
