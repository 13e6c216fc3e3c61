//! Visual-semantic space: captions and image features embedded so that
//! matching pairs, and paraphrases of one another, lie close together.
//!
//! The space is trained with two hinge-triplet terms (caption anchored on
//! images, image anchored on captions), plus reconstruction cross-entropy
//! of the caption decoded back from its embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Decoder, Linear, SeqEncoder};
use crate::numerics::{adam_step, checkpoint, AdamConfig, AdamState, Graph, ParamStore, Rng, Var};

/// Which in-batch pairs serve as negatives for pair `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// The single pair `(j + 1) mod B`.
    Next,
    /// Every other pair in the batch, hinges averaged.
    AllInBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VsLossWeights {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for VsLossWeights {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl VsLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::Config(format!(
                "lambda1, lambda2 must be non-negative with a positive sum, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VsConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub decoder_hidden: usize,
    pub weights: VsLossWeights,
    pub negatives: Negatives,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that an iteration trains on answer pairs instead of
    /// caption pairs.
    pub answer_pair_rate: f64,
}

impl Default for VsConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            token_dim: 32,
            decoder_hidden: 64,
            weights: VsLossWeights::default(),
            negatives: Negatives::Next,
            iterations: 600,
            batch_size: 128,
            learning_rate: 1e-3,
            answer_pair_rate: 0.1,
        }
    }
}

impl VsConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.embed_dim == 0 || self.token_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "vs batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.answer_pair_rate) {
            return Err(Error::Config(format!(
                "answer_pair_rate must lie in [0, 1], got {}",
                self.answer_pair_rate
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

const DIST_EPS: f64 = 1e-12;

fn dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "triplet_losses",
            shapes: format!("[{}] vs [{}]", a.len(), b.len()),
        });
    }
    Ok((a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() + DIST_EPS).sqrt())
}

/// Hinge-triplet terms for a single pair `j` with negative pair `k`:
/// `L_image = [d(c_j, i_j) - d(c_j, i_k) + margin]+` and
/// `L_lang = [d(i_j, c_j) - d(i_j, c_k) + margin]+`.
pub fn triplet_losses(
    anchor_caption: &[f64],
    pos_image: &[f64],
    neg_image: &[f64],
    neg_caption: &[f64],
    margin: f64,
) -> Result<(f64, f64)> {
    let pos = dist(anchor_caption, pos_image)?;
    let l_image = (pos - dist(anchor_caption, neg_image)? + margin).max(0.0);
    let l_lang = (pos - dist(pos_image, neg_caption)? + margin).max(0.0);
    Ok((l_image, l_lang))
}

/// Loss terms of one batch, each already averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VsLoss {
    pub image: f64,
    pub lang: f64,
    pub recon: f64,
    pub total: f64,
}

/// Image feature / caption tokens pair as consumed by the space.
pub type VsPair<'a> = (&'a [f64], &'a [usize]);

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSpace {
    pub store: ParamStore,
    pub encoder: SeqEncoder,
    pub image_projector: Linear,
    pub decoder: Decoder,
    pub config: VsConfig,
    pub feature_dim: usize,
}

impl SemanticSpace {
    pub fn new(vocab: usize, feature_dim: usize, config: &VsConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let encoder = SeqEncoder::new(&mut store, "vs.enc", vocab, config.token_dim, d, rng);
        let image_projector = Linear::new(&mut store, "vs.img", feature_dim, d, true, rng);
        let decoder = Decoder::new(
            &mut store,
            "vs.dec",
            vocab,
            config.token_dim,
            d,
            config.decoder_hidden,
            rng,
        );
        Ok(Self {
            store,
            encoder,
            image_projector,
            decoder,
            config: config.clone(),
            feature_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab
    }

    /// Deterministic caption embedding `h_c`.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.encoder.encode(&self.store, tokens)
    }

    /// Projected image embedding `h_i`.
    pub fn embed_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "embed_image",
                shapes: format!("[{}] vs [{}]", features.len(), self.feature_dim),
            });
        }
        Ok(self.image_projector.apply(&self.store, features))
    }

    fn loss_graph(&self, g: &mut Graph, batch: &[VsPair], weights: &VsLossWeights) -> Result<(Var, [Var; 3])> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "vs loss needs at least 2 pairs for negatives, got {b}"
            )));
        }
        let f = self.feature_dim;
        let mut feats = Vec::with_capacity(b * f);
        for (x, _) in batch {
            if x.len() != f {
                return Err(Error::ShapeMismatch {
                    op: "vs_total_loss",
                    shapes: format!("[{}] vs [{f}]", x.len()),
                });
            }
            feats.extend_from_slice(x);
        }
        let tokens: Vec<&[usize]> = batch.iter().map(|(_, t)| *t).collect();
        let hc = self.encoder.forward(g, &self.store, &tokens)?;
        let x = g.input(vec![b, f], feats)?;
        let hi = self.image_projector.forward(g, &self.store, x)?;

        let d_pos = dist_rows(g, hc, hi)?;
        let shifts: Vec<usize> = match self.config.negatives {
            Negatives::Next => vec![1],
            Negatives::AllInBatch => (1..b).collect(),
        };
        let mut l_img = Vec::new();
        let mut l_lang = Vec::new();
        for s in shifts {
            let perm: Vec<usize> = (0..b).map(|j| (j + s) % b).collect();
            let hi_neg = g.embedding(hi, perm.clone())?;
            let hc_neg = g.embedding(hc, perm)?;
            let d_img = dist_rows(g, hc, hi_neg)?;
            let d_lang = dist_rows(g, hi, hc_neg)?;
            l_img.push(hinge_mean(g, d_pos, d_img, weights.margin)?);
            l_lang.push(hinge_mean(g, d_pos, d_lang, weights.margin)?);
        }
        let image = average(g, &l_img)?;
        let lang = average(g, &l_lang)?;
        let recon = self.decoder.loss(g, &self.store, hc, &tokens)?;
        let tri = g.add(image, lang)?;
        let tri = g.scale(tri, weights.lambda1)?;
        let rec = g.scale(recon, weights.lambda2)?;
        let total = g.add(tri, rec)?;
        Ok((total, [image, lang, recon]))
    }

    /// Weighted loss of one batch, with negatives drawn from the batch.
    pub fn vs_total_loss(&self, batch: &[VsPair], weights: &VsLossWeights) -> Result<VsLoss> {
        weights.validate()?;
        let mut g = Graph::new();
        let (total, [image, lang, recon]) = self.loss_graph(&mut g, batch, weights)?;
        Ok(VsLoss {
            image: g.scalar(image),
            lang: g.scalar(lang),
            recon: g.scalar(recon),
            total: g.scalar(total),
        })
    }

    /// Rebuilds a space from checkpointed parameters.
    pub fn from_store(vocab: usize, feature_dim: usize, config: &VsConfig, store: &ParamStore) -> Result<Self> {
        let mut space = Self::new(vocab, feature_dim, config, &mut Rng::new(0))?;
        checkpoint::restore_into(&mut space.store, store)?;
        Ok(space)
    }
}

fn dist_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let sq = g.sq_distance(a, b)?;
    let sq = g.add_scalar(sq, DIST_EPS)?;
    g.sqrt(sq)
}

fn hinge_mean(g: &mut Graph, d_pos: Var, d_neg: Var, margin: f64) -> Result<Var> {
    let diff = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(diff, margin)?;
    let h = g.relu(shifted)?;
    g.mean(h)
}

fn average(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let stacked = g.concat(parts, 0)?;
    g.mean(stacked)
}

/// Per-iteration training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    /// Iterations that used answer pairs.
    pub answer_iterations: Vec<usize>,
}

/// Minibatch Adam on the weighted space loss. Each iteration draws a batch
/// of caption pairs, or with probability `answer_pair_rate` a batch of
/// answer pairs.
pub fn train_semantic_space(
    space: &mut SemanticSpace,
    pairs: &[VsPair],
    answer_pairs: &[VsPair],
    rng: &mut Rng,
) -> Result<TrainTrace> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("train_semantic_space: no caption pairs".into()));
    }
    let cfg = space.config.clone();
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&space.store);
    let mut trace = TrainTrace::default();
    for it in 0..cfg.iterations {
        let use_answers = answer_pairs.len() >= 2 && rng.uniform() < cfg.answer_pair_rate;
        let source = if use_answers { answer_pairs } else { pairs };
        let n = cfg.batch_size.min(source.len());
        if n < 2 {
            return Err(Error::InvalidArgument(
                "train_semantic_space: need at least 2 pairs".into(),
            ));
        }
        let batch: Vec<VsPair> = rng
            .sample_indices(source.len(), n)
            .into_iter()
            .map(|i| source[i])
            .collect();
        let mut g = Graph::new();
        let step = (|| -> Result<f64> {
            let (total, _) = space.loss_graph(&mut g, &batch, &cfg.weights)?;
            let value = g.scalar(total);
            g.backward(total)?;
            space.store.accumulate(&g);
            adam_step(&mut space.store, &mut state, &adam, it as u64 + 1)?;
            Ok(value)
        })();
        let value = step.map_err(|e| match e {
            Error::NonFinite { .. } | Error::NonFiniteGrad(_) => Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            },
            other => other.at_iteration(it),
        })?;
        if use_answers {
            trace.answer_iterations.push(it);
        }
        trace.losses.push(value);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_floor_and_symmetry() {
        let (a, b) = triplet_losses(&[0.0, 0.0], &[1.0, 0.0], &[5.0, 0.0], &[0.0, 9.0], 0.5).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let (a, b) = triplet_losses(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 0.5).unwrap();
        assert!((a - 0.5).abs() < 1e-9 && (b - 0.5).abs() < 1e-9);
    }

    #[test]
    fn hand_case() {
        let (a, _) = triplet_losses(&[0.0, 0.0], &[1.0, 0.0], &[3.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(a, 0.0);
        let (a, _) = triplet_losses(&[0.0, 0.0], &[1.0, 0.0], &[1.5, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((a - 0.5).abs() < 1e-9);
        assert!(triplet_losses(&[0.0], &[1.0, 0.0], &[1.5, 0.0], &[0.0, 0.0], 1.0).is_err());
    }

    fn tiny_space() -> SemanticSpace {
        let cfg = VsConfig {
            embed_dim: 4,
            token_dim: 3,
            decoder_hidden: 5,
            ..VsConfig::default()
        };
        SemanticSpace::new(8, 3, &cfg, &mut Rng::new(2)).unwrap()
    }

    #[test]
    fn batch_loss_matches_scalar_oracle() {
        let space = tiny_space();
        let f1 = [0.2, -0.4, 1.0];
        let f2 = [1.0, 0.5, -0.3];
        let t1 = [3usize, 4];
        let t2 = [5usize];
        let batch: Vec<VsPair> = vec![(&f1, &t1), (&f2, &t2)];
        let w = VsLossWeights {
            margin: 0.7,
            lambda1: 0.6,
            lambda2: 1.3,
        };
        let got = space.vs_total_loss(&batch, &w).unwrap();
        let c = [space.embed_text(&t1).unwrap(), space.embed_text(&t2).unwrap()];
        let i = [space.embed_image(&f1).unwrap(), space.embed_image(&f2).unwrap()];
        let mut li = 0.0;
        let mut ll = 0.0;
        for j in 0..2 {
            let k = (j + 1) % 2;
            let (a, b) = triplet_losses(&c[j], &i[j], &i[k], &c[k], 0.7).unwrap();
            li += a / 2.0;
            ll += b / 2.0;
        }
        let lp1 = space
            .decoder
            .sequence_logprob(&space.store, &c[0], &[3, 4, crate::taskgen::EOS]);
        let lp2 = space
            .decoder
            .sequence_logprob(&space.store, &c[1], &[5, crate::taskgen::EOS]);
        let recon = -(lp1 + lp2) / 5.0;
        assert!((got.image - li).abs() < 1e-9);
        assert!((got.lang - ll).abs() < 1e-9);
        assert!((got.recon - recon).abs() < 1e-9);
        assert!((got.total - (0.6 * (li + ll) + 1.3 * recon)).abs() < 1e-9);

        let zero = VsLossWeights {
            lambda1: 0.0,
            ..w.clone()
        };
        let r = space.vs_total_loss(&batch, &zero).unwrap();
        assert!((r.total - 1.3 * recon).abs() < 1e-9);
        assert!(space.vs_total_loss(&batch[..1], &w).is_err());
    }

    #[test]
    fn zero_iterations_leave_space_unchanged() {
        let mut space = VsConfig {
            iterations: 0,
            ..VsConfig::default()
        };
        space.embed_dim = 4;
        let mut s = SemanticSpace::new(8, 3, &space, &mut Rng::new(2)).unwrap();
        let before = s.clone();
        let f = [0.0, 1.0, 0.0];
        let t = [3usize];
        train_semantic_space(&mut s, &[(&f, &t), (&f, &t)], &[], &mut Rng::new(1)).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(VsLossWeights {
            margin: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(VsLossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
