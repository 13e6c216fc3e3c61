//! Answer generator: question encoder, fusion of question and image into
//! the hidden representation `h`, and a recurrent answer decoder.
//!
//! Fusion is `h = tanh(W2 · drop(a) + b2)` where the first activation `a` is
//! either `tanh(W1 · [q; img] + b1)` or the product
//! `tanh(Wq · q + bq) ⊙ tanh(Wi · img + bi)`. The dropout site sits between
//! the two fusion layers, so Monte-Carlo samples of `h` vary through a
//! nonlinearity rather than by plain rescaling.

use serde::{Deserialize, Serialize};

use crate::embedspace::SemanticSpace;
use crate::error::{Error, Result};
use crate::layers::{Decoder, DecoderState, Linear, SeqEncoder};
use crate::numerics::{
    adam_step, checkpoint, mix_seed, AdamConfig, AdamState, DropoutMask, Graph, ParamStore, Rng, Var,
};
use crate::taskgen::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSites {
    /// Only between the fusion layers.
    Fusion,
    /// Also on the question vector before fusion.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Concat,
    Product,
}

/// Normalisation of the squared distance in the embedding loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedNorm {
    /// Full squared Euclidean norm, averaged over items.
    Sum,
    /// Squared norm divided by the dimension.
    PerDimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub question_hidden: usize,
    pub decoder_hidden: usize,
    pub keep_probability: f64,
    pub dropout_sites: DropoutSites,
    pub fusion: FusionKind,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_norm: EmbedNorm,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            token_dim: 32,
            question_hidden: 64,
            decoder_hidden: 64,
            keep_probability: 0.5,
            dropout_sites: DropoutSites::Fusion,
            fusion: FusionKind::Product,
            max_len: 6,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            embed_norm: EmbedNorm::Sum,
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_probability > 0.0 && self.keep_probability <= 1.0) {
            return Err(Error::Config(format!(
                "keep_probability must lie in (0, 1], got {}",
                self.keep_probability
            )));
        }
        if self.embed_dim == 0 || self.token_dim == 0 || self.question_hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.max_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_len and batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Eval,
    /// Dropout active, masks derived from this seed.
    Mc(u64),
}

/// One training or scoring input.
#[derive(Clone, Copy, Debug)]
pub struct QaExample<'a> {
    pub question: &'a [usize],
    pub features: &'a [f64],
    pub answer: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqaLossParts {
    pub recon: f64,
    pub embed: f64,
    pub total: f64,
    pub embed_enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted tokens, ending in EOS unless cut at the length cap.
    pub tokens: Vec<usize>,
    pub log_probability: f64,
}

impl BeamHypothesis {
    pub fn answer_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn probability(&self) -> f64 {
        self.log_probability.exp()
    }
}

const SITE_FUSION: u64 = 0;
const SITE_QUESTION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct QaModel {
    pub store: ParamStore,
    pub question_encoder: SeqEncoder,
    pub fuse_in: Linear,
    /// Image projection of the product fusion.
    pub fuse_img: Option<Linear>,
    pub fuse_out: Linear,
    pub decoder: Decoder,
    pub config: QaConfig,
    pub feature_dim: usize,
}

impl QaModel {
    pub fn new(vocab: usize, feature_dim: usize, config: &QaConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let question_encoder = SeqEncoder::new(
            &mut store,
            "qa.qenc",
            vocab,
            config.token_dim,
            config.question_hidden,
            rng,
        );
        let (fuse_in, fuse_img) = match config.fusion {
            FusionKind::Concat => (
                Linear::new(
                    &mut store,
                    "qa.fuse_in",
                    config.question_hidden + feature_dim,
                    d,
                    true,
                    rng,
                ),
                None,
            ),
            FusionKind::Product => (
                Linear::new(&mut store, "qa.fuse_in", config.question_hidden, d, true, rng),
                Some(Linear::new(&mut store, "qa.fuse_img", feature_dim, d, true, rng)),
            ),
        };
        let fuse_out = Linear::new(&mut store, "qa.fuse_out", d, d, true, rng);
        let decoder = Decoder::new(
            &mut store,
            "qa.dec",
            vocab,
            config.token_dim,
            d,
            config.decoder_hidden,
            rng,
        );
        Ok(Self {
            store,
            question_encoder,
            fuse_in,
            fuse_img,
            fuse_out,
            decoder,
            config: config.clone(),
            feature_dim,
        })
    }

    pub fn from_store(vocab: usize, feature_dim: usize, config: &QaConfig, store: &ParamStore) -> Result<Self> {
        let mut model = Self::new(vocab, feature_dim, config, &mut Rng::new(0))?;
        checkpoint::restore_into(&mut model.store, store)?;
        Ok(model)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_image(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                shapes: format!("image [{}] vs [{}]", image.len(), self.feature_dim),
            });
        }
        Ok(())
    }

    fn mask(&self, len: usize, seed: u64, site: u64) -> Result<DropoutMask> {
        DropoutMask::sample(len, self.config.keep_probability, mix_seed(&[seed, site]))
    }

    /// Question vector and first fusion activation, before any dropout.
    fn fusion_input(&self, question: &[usize], image: &[f64], mode: EncodeMode) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut q = self.question_encoder.encode(&self.store, question)?;
        if let (EncodeMode::Mc(seed), DropoutSites::All) = (mode, self.config.dropout_sites) {
            let m = self.mask(q.len(), seed, SITE_QUESTION)?;
            q.iter_mut().zip(&m.mask).for_each(|(x, m)| *x *= m);
        }
        let tanh = |mut v: Vec<f64>| {
            v.iter_mut().for_each(|x| *x = x.tanh());
            v
        };
        Ok(match &self.fuse_img {
            None => {
                q.extend_from_slice(image);
                tanh(self.fuse_in.apply(&self.store, &q))
            }
            Some(fi) => {
                let mut a = tanh(self.fuse_in.apply(&self.store, &q));
                let v = tanh(fi.apply(&self.store, image));
                a.iter_mut().zip(&v).for_each(|(x, y)| *x *= y);
                a
            }
        })
    }

    fn fusion_output(&self, mut a: Vec<f64>, mode: EncodeMode) -> Result<Vec<f64>> {
        if let EncodeMode::Mc(seed) = mode {
            let m = self.mask(a.len(), seed, SITE_FUSION)?;
            a.iter_mut().zip(&m.mask).for_each(|(x, m)| *x *= m);
        }
        let mut h = self.fuse_out.apply(&self.store, &a);
        h.iter_mut().for_each(|v| *v = v.tanh());
        Ok(h)
    }

    /// Hidden representation `h` of a question about an image.
    pub fn encode(&self, question: &[usize], image: &[f64], mode: EncodeMode) -> Result<Vec<f64>> {
        let a = self.fusion_input(question, image, mode)?;
        self.fusion_output(a, mode)
    }

    /// Monte-Carlo encodings, one per seed. The pre-dropout part is shared
    /// when only the fusion site is stochastic.
    pub fn encode_mc(&self, question: &[usize], image: &[f64], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        match self.config.dropout_sites {
            DropoutSites::Fusion => {
                let a = self.fusion_input(question, image, EncodeMode::Eval)?;
                seeds
                    .iter()
                    .map(|&s| self.fusion_output(a.clone(), EncodeMode::Mc(s)))
                    .collect()
            }
            DropoutSites::All => seeds
                .iter()
                .map(|&s| self.encode(question, image, EncodeMode::Mc(s)))
                .collect(),
        }
    }

    /// Taped batch encoding; `dropout_seed = None` runs in eval mode.
    fn encode_graph(&self, g: &mut Graph, batch: &[QaExample], dropout_seed: Option<u64>) -> Result<Var> {
        let b = batch.len();
        let questions: Vec<&[usize]> = batch.iter().map(|e| e.question).collect();
        let mut q = self.question_encoder.forward(g, &self.store, &questions)?;
        let mut feats = Vec::with_capacity(b * self.feature_dim);
        for e in batch {
            self.check_image(e.features)?;
            feats.extend_from_slice(e.features);
        }
        let keep = self.config.keep_probability;
        if let (Some(seed), DropoutSites::All) = (dropout_seed, self.config.dropout_sites) {
            q = g.dropout(q, keep, mix_seed(&[seed, SITE_QUESTION]), true)?.0;
        }
        let img = g.input(vec![b, self.feature_dim], feats)?;
        let mut a = match &self.fuse_img {
            None => {
                let x = g.concat(&[q, img], 1)?;
                let a = self.fuse_in.forward(g, &self.store, x)?;
                g.tanh(a)?
            }
            Some(fi) => {
                let aq = self.fuse_in.forward(g, &self.store, q)?;
                let aq = g.tanh(aq)?;
                let ai = fi.forward(g, &self.store, img)?;
                let ai = g.tanh(ai)?;
                g.mul(aq, ai)?
            }
        };
        if let Some(seed) = dropout_seed {
            a = g.dropout(a, keep, mix_seed(&[seed, SITE_FUSION]), true)?.0;
        }
        let h = self.fuse_out.forward(g, &self.store, a)?;
        g.tanh(h)
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        batch: &[QaExample],
        targets: Option<&[Vec<f64>]>,
        dropout_seed: Option<u64>,
    ) -> Result<(Var, Var, Option<Var>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("vqa loss on an empty batch".into()));
        }
        let h = self.encode_graph(g, batch, dropout_seed)?;
        let answers: Vec<&[usize]> = batch.iter().map(|e| e.answer).collect();
        let recon = self.decoder.loss(g, &self.store, h, &answers)?;
        let Some(targets) = targets else {
            return Ok((recon, recon, None));
        };
        let d = self.embed_dim();
        if targets.len() != batch.len() || targets.iter().any(|t| t.len() != d) {
            return Err(Error::ShapeMismatch {
                op: "vqa_loss",
                shapes: format!("answer embeddings vs hidden dimension {d}"),
            });
        }
        let flat: Vec<f64> = targets.iter().flatten().copied().collect();
        let t = g.input(vec![batch.len(), d], flat)?;
        let sq = g.sq_distance(h, t)?;
        let mut embed = g.mean(sq)?;
        if self.config.embed_norm == EmbedNorm::PerDimension {
            embed = g.scale(embed, 1.0 / d as f64)?;
        }
        let total = g.add(recon, embed)?;
        Ok((total, recon, Some(embed)))
    }

    /// Reconstruction and embedding losses of a batch. With `embed_enabled`
    /// the space provides frozen answer embeddings `h_a`.
    pub fn vqa_loss(
        &self,
        space: Option<&SemanticSpace>,
        batch: &[QaExample],
        embed_enabled: bool,
        dropout_seed: Option<u64>,
    ) -> Result<VqaLossParts> {
        let targets = answer_targets(self, space, batch, embed_enabled)?;
        let mut g = Graph::new();
        let (total, recon, embed) = self.loss_graph(&mut g, batch, targets.as_deref(), dropout_seed)?;
        Ok(VqaLossParts {
            recon: g.scalar(recon),
            embed: embed.map_or(0.0, |e| g.scalar(e)),
            total: g.scalar(total),
            embed_enabled,
        })
    }

    /// Greedy decode from a given hidden representation; excludes EOS.
    pub fn decode_greedy(&self, h: &[f64], max_len: usize) -> Result<Vec<usize>> {
        self.check_hidden(h)?;
        Ok(self.decoder.greedy(&self.store, h, max_len))
    }

    /// Greedy answer in eval mode.
    pub fn answer(&self, question: &[usize], image: &[f64]) -> Result<Vec<usize>> {
        let h = self.encode(question, image, EncodeMode::Eval)?;
        self.decode_greedy(&h, self.config.max_len)
    }

    fn check_hidden(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.embed_dim() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                shapes: format!("h [{}] vs [{}]", h.len(), self.embed_dim()),
            });
        }
        Ok(())
    }

    /// Eval-mode beam search.
    pub fn beam_decode(
        &self,
        question: &[usize],
        image: &[f64],
        beam_width: usize,
        max_len: usize,
    ) -> Result<Vec<BeamHypothesis>> {
        let h = self.encode(question, image, EncodeMode::Eval)?;
        beam_search(&self.decoder, &self.store, &h, beam_width, max_len)
    }
}

fn answer_targets(
    model: &QaModel,
    space: Option<&SemanticSpace>,
    batch: &[QaExample],
    embed_enabled: bool,
) -> Result<Option<Vec<Vec<f64>>>> {
    if !embed_enabled {
        return Ok(None);
    }
    let space = space.ok_or_else(|| Error::InvalidArgument("embedding loss requires a semantic space".into()))?;
    if space.embed_dim() != model.embed_dim() {
        return Err(Error::ShapeMismatch {
            op: "vqa_loss",
            shapes: format!(
                "space dimension {} vs model dimension {}",
                space.embed_dim(),
                model.embed_dim()
            ),
        });
    }
    batch
        .iter()
        .map(|e| space.embed_text(e.answer))
        .collect::<Result<_>>()
        .map(Some)
}

struct Partial {
    tokens: Vec<usize>,
    log_probability: f64,
    state: DecoderState,
    finished: bool,
}

/// Length-capped beam search from context `h`. At every step the beam is
/// the best `beam_width` of finished hypotheses and one-token extensions of
/// unfinished ones; a hypothesis finishes on EOS or at `max_len` tokens.
pub fn beam_search(
    decoder: &Decoder,
    store: &ParamStore,
    h: &[f64],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    if beam_width < 1 {
        return Err(Error::InvalidArgument(format!(
            "beam width must be >= 1, got {beam_width}"
        )));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let mut beams = vec![Partial {
        tokens: Vec::new(),
        log_probability: 0.0,
        state: decoder.start(store, h),
        finished: false,
    }];
    while beams.iter().any(|b| !b.finished) {
        let mut next = Vec::new();
        for p in beams {
            if p.finished {
                next.push(p);
                continue;
            }
            let prev = p.tokens.last().copied().unwrap_or(BOS);
            let (state, logp) = decoder.step(store, &p.state, prev);
            for (tok, &lp) in logp.iter().enumerate().skip(EOS) {
                let mut tokens = p.tokens.clone();
                tokens.push(tok);
                let finished = tok == EOS || tokens.len() == max_len;
                next.push(Partial {
                    tokens,
                    log_probability: p.log_probability + lp,
                    state: state.clone(),
                    finished,
                });
            }
        }
        next.sort_by(|a, b| b.log_probability.total_cmp(&a.log_probability));
        next.truncate(beam_width);
        beams = next;
    }
    Ok(beams
        .into_iter()
        .map(|p| BeamHypothesis {
            tokens: p.tokens,
            log_probability: p.log_probability,
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QaTrace {
    pub losses: Vec<VqaLossParts>,
}

/// Minibatch Adam over `epochs` shuffled passes, dropout active. With
/// `embed_enabled` the loss adds the distance to the frozen space's answer
/// embeddings.
pub fn train_qa(
    model: &mut QaModel,
    space: Option<&SemanticSpace>,
    examples: &[QaExample],
    embed_enabled: bool,
    rng: &mut Rng,
) -> Result<QaTrace> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("train_qa: no training examples".into()));
    }
    let cfg = model.config.clone();
    let targets = answer_targets(model, space, examples, embed_enabled)?;
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store);
    let mut trace = QaTrace::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<QaExample> = chunk.iter().map(|&i| examples[i]).collect();
            let batch_targets: Option<Vec<Vec<f64>>> =
                targets.as_ref().map(|t| chunk.iter().map(|&i| t[i].clone()).collect());
            let seed = rng.next_u64();
            let it = step as usize;
            let mut g = Graph::new();
            let parts = (|| -> Result<VqaLossParts> {
                let (total, recon, embed) = model.loss_graph(&mut g, &batch, batch_targets.as_deref(), Some(seed))?;
                let parts = VqaLossParts {
                    recon: g.scalar(recon),
                    embed: embed.map_or(0.0, |e| g.scalar(e)),
                    total: g.scalar(total),
                    embed_enabled,
                };
                g.backward(total)?;
                model.store.accumulate(&g);
                adam_step(&mut model.store, &mut state, &adam, step + 1)?;
                Ok(parts)
            })()
            .map_err(|e| match e {
                Error::NonFinite { .. } | Error::NonFiniteGrad(_) => Error::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                },
                other => other.at_iteration(it),
            })?;
            trace.losses.push(parts);
            step += 1;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(keep: f64) -> QaModel {
        let cfg = QaConfig {
            embed_dim: 4,
            token_dim: 3,
            question_hidden: 5,
            decoder_hidden: 6,
            keep_probability: keep,
            ..QaConfig::default()
        };
        QaModel::new(7, 3, &cfg, &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn encode_modes() {
        let m = tiny(0.5);
        let q = [3usize, 4];
        let img = [0.1, 0.2, -0.3];
        let e1 = m.encode(&q, &img, EncodeMode::Eval).unwrap();
        assert_eq!(e1, m.encode(&q, &img, EncodeMode::Eval).unwrap());
        let a = m.encode(&q, &img, EncodeMode::Mc(5)).unwrap();
        assert_eq!(a, m.encode(&q, &img, EncodeMode::Mc(5)).unwrap());
        assert_eq!(m.encode_mc(&q, &img, &[5]).unwrap()[0], a);
        let full = tiny(1.0);
        assert_eq!(
            full.encode(&q, &img, EncodeMode::Mc(5)).unwrap(),
            full.encode(&q, &img, EncodeMode::Eval).unwrap()
        );
        assert!(m.encode(&[], &img, EncodeMode::Eval).is_err());
        assert!(m.encode(&[70], &img, EncodeMode::Eval).is_err());
        assert!(m.encode(&q, &img[..2], EncodeMode::Eval).is_err());
    }

    #[test]
    fn taped_encoding_matches_plain() {
        let m = tiny(0.5);
        let q = [3usize, 4, 5];
        let img = [0.1, 0.2, -0.3];
        let ex = [QaExample {
            question: &q,
            features: &img,
            answer: &[3],
        }];
        for seed in [None, Some(11)] {
            let mut g = Graph::new();
            let h = m.encode_graph(&mut g, &ex, seed).unwrap();
            let mode = seed.map_or(EncodeMode::Eval, EncodeMode::Mc);
            let plain = m.encode(&q, &img, mode).unwrap();
            for (a, b) in g.value(h).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_switch() {
        let m = tiny(0.5);
        let q = [3usize];
        let img = [0.1, 0.2, -0.3];
        let ex = [QaExample {
            question: &q,
            features: &img,
            answer: &[4, 5],
        }];
        let parts = m.vqa_loss(None, &ex, false, None).unwrap();
        assert_eq!(parts.total, parts.recon);
        assert!(m.vqa_loss(None, &ex, true, None).is_err());
    }

    #[test]
    fn beam_contracts() {
        let m = tiny(1.0);
        let q = [3usize, 6];
        let img = [0.4, -0.2, 0.9];
        let h = m.encode(&q, &img, EncodeMode::Eval).unwrap();
        let one = m.beam_decode(&q, &img, 1, 6).unwrap();
        assert_eq!(one[0].answer_tokens(), m.decode_greedy(&h, 6).unwrap().as_slice());
        let five = m.beam_decode(&q, &img, 5, 6).unwrap();
        assert!(five.windows(2).all(|w| w[0].log_probability >= w[1].log_probability));
        let total: f64 = five.iter().map(|b| b.probability()).sum();
        assert!(total <= 1.0 + 1e-9);
        assert!(m.beam_decode(&q, &img, 0, 6).is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = tiny(0.5);
        m.config.epochs = 0;
        let before = m.clone();
        let q = [3usize];
        let img = [0.1, 0.2, -0.3];
        let ex = [QaExample {
            question: &q,
            features: &img,
            answer: &[4],
        }];
        train_qa(&mut m, None, &ex, false, &mut Rng::new(1)).unwrap();
        assert_eq!(m, before);
    }
}
