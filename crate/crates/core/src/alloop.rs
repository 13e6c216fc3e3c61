//! Pool-based active learning: bootstrap a model on a random labeled set,
//! then repeatedly draw a pool of unlabeled items, score it, label the top K
//! and retrain.
//!
//! All randomness is derived from `(seed, purpose, iteration)`, so two
//! strategies under one seed share the bootstrap set, the initial model and
//! (while their labeled sets agree) the pools.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedspace::{train_semantic_space, SemanticSpace, VsConfig, VsPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::numerics::{mix_seed, tag, Rng};
use crate::qamodel::{train_qa, QaConfig, QaExample, QaModel};
use crate::taskgen::{caption_pairs, Dataset, QaItem, QuestionType, Split};
use crate::uncertainty::{
    item_seeds, mc_sample_with_seeds, score_entropy_with, score_least_confidence, score_margin, score_random,
    variance_score_with, Denoiser, Strategy, UncertaintyScore, VarianceAggregation,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    FromScratch,
    Continue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlSchedule {
    pub bootstrap_fraction: f64,
    pub pool_fraction: f64,
    pub acquire_fraction: f64,
    pub iterations: usize,
    pub retrain_mode: RetrainMode,
}

impl Default for AlSchedule {
    fn default() -> Self {
        Self {
            bootstrap_fraction: 0.05,
            pool_fraction: 0.15,
            acquire_fraction: 0.05,
            iterations: 5,
            retrain_mode: RetrainMode::FromScratch,
        }
    }
}

/// Item counts implied by a schedule for a training pool of a given size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleCounts {
    pub original: usize,
    pub bootstrap: usize,
    pub pool: usize,
    pub acquire: usize,
}

fn count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

impl AlSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Schedule(m));
        for (name, v) in [
            ("bootstrap_fraction", self.bootstrap_fraction),
            ("pool_fraction", self.pool_fraction),
            ("acquire_fraction", self.acquire_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.bootstrap_fraction <= 0.0 {
            return fail("bootstrap_fraction must be positive".into());
        }
        if self.iterations > 0 && !(self.acquire_fraction > 0.0 && self.acquire_fraction <= self.pool_fraction) {
            return fail(format!(
                "need 0 < acquire_fraction <= pool_fraction, got {} and {}",
                self.acquire_fraction, self.pool_fraction
            ));
        }
        if self.bootstrap_fraction + self.iterations as f64 * self.acquire_fraction > 1.0 + 1e-12 {
            return fail("bootstrap plus all acquisitions exceed the training pool".into());
        }
        Ok(())
    }

    pub fn counts(&self, original: usize) -> Result<ScheduleCounts> {
        self.validate()?;
        let c = ScheduleCounts {
            original,
            bootstrap: count(self.bootstrap_fraction, original),
            pool: count(self.pool_fraction, original),
            acquire: count(self.acquire_fraction, original),
        };
        if c.bootstrap == 0 {
            return Err(Error::Schedule(format!(
                "bootstrap is empty for a pool of {original} items"
            )));
        }
        if c.bootstrap + self.iterations * c.acquire > original {
            return Err(Error::Schedule(format!(
                "{} labels requested but only {original} items exist",
                c.bootstrap + self.iterations * c.acquire
            )));
        }
        if self.iterations > 0 && (c.acquire == 0 || c.acquire > c.pool) {
            return Err(Error::Schedule(format!(
                "per-iteration acquisition {} must lie in 1..={}",
                c.acquire, c.pool
            )));
        }
        Ok(c)
    }

    /// Labeled-set size after iteration `t`.
    pub fn labeled_after(&self, original: usize, t: usize) -> Result<usize> {
        let c = self.counts(original)?;
        Ok(c.bootstrap + t * c.acquire)
    }
}

/// How pool items are scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub mc_samples: usize,
    pub entropy_beam: usize,
    pub entropy_renormalize: bool,
    pub variance_aggregation: VarianceAggregation,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            mc_samples: 20,
            entropy_beam: crate::uncertainty::ENTROPY_BEAM,
            entropy_renormalize: false,
            variance_aggregation: VarianceAggregation::Sum,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 2 {
            return Err(Error::Config(format!(
                "mc_samples must be >= 2, got {}",
                self.mc_samples
            )));
        }
        if self.entropy_beam < 2 {
            return Err(Error::Config(format!(
                "entropy_beam must be >= 2, got {}",
                self.entropy_beam
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlConfig {
    pub qa: QaConfig,
    pub acquisition: AcquisitionConfig,
}

impl AlConfig {
    pub fn validate(&self) -> Result<()> {
        self.qa.validate()?;
        self.acquisition.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub iteration: usize,
    pub item_index: usize,
    pub score: f64,
    pub question_type: QuestionType,
    pub answer_set_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled_count: usize,
    pub labeled_fraction: f64,
    pub report: EvalReport,
    /// Share (in percent) of each question type among this iteration's
    /// selections; empty for the bootstrap evaluation.
    pub type_percentages: BTreeMap<QuestionType, f64>,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlRunState {
    pub labeled: Vec<usize>,
    pub unlabeled: BTreeSet<usize>,
    pub pool: Vec<usize>,
    pub iteration: usize,
    pub original_size: usize,
    pub metric_history: Vec<IterationRecord>,
    pub selection_log: Vec<SelectionEntry>,
}

/// Dataset, configuration and shared resources of one seed.
#[derive(Clone, Copy)]
pub struct AlSetup<'a> {
    pub dataset: &'a Dataset,
    pub schedule: &'a AlSchedule,
    pub config: &'a AlConfig,
    pub seed: u64,
    pub space: Option<&'a SemanticSpace>,
}

impl AlSetup<'_> {
    fn rng(&self, purpose: &str, t: usize) -> Rng {
        Rng::derived(self.seed, &[tag(purpose), t as u64])
    }
}

/// Uniformly random bootstrap labeled set; identical for every strategy of
/// a seed.
pub fn bootstrap(dataset: &Dataset, schedule: &AlSchedule, seed: u64) -> Result<AlRunState> {
    let mut train = dataset.train_indices();
    let counts = schedule.counts(train.len())?;
    Rng::derived(seed, &[tag("bootstrap")]).shuffle(&mut train);
    let labeled = train[..counts.bootstrap].to_vec();
    let unlabeled = train[counts.bootstrap..].iter().copied().collect();
    Ok(AlRunState {
        labeled,
        unlabeled,
        pool: Vec::new(),
        iteration: 0,
        original_size: counts.original,
        metric_history: Vec::new(),
        selection_log: Vec::new(),
    })
}

/// Trains the seed's semantic space on as many captions of training scenes
/// as there are bootstrap items, plus the bootstrap items' answer pairs.
pub fn build_space(dataset: &Dataset, state: &AlRunState, config: &VsConfig, seed: u64) -> Result<SemanticSpace> {
    let mut scenes: Vec<usize> = dataset
        .train_indices()
        .iter()
        .map(|&i| dataset.items[i].scene_id)
        .collect();
    scenes.sort_unstable();
    scenes.dedup();
    let mut rng = Rng::derived(seed, &[tag("space")]);
    let captions = caption_pairs(dataset, &scenes, &mut rng, state.labeled.len())?;
    let answers: Vec<_> = state
        .labeled
        .iter()
        .map(|&i| dataset.answer_pair(&dataset.items[i]))
        .collect();
    let pairs: Vec<VsPair> = captions
        .iter()
        .map(|c| (c.features.as_slice(), c.tokens.as_slice()))
        .collect();
    let answer_pairs: Vec<VsPair> = answers
        .iter()
        .map(|c| (c.features.as_slice(), c.tokens.as_slice()))
        .collect();
    let mut space = SemanticSpace::new(dataset.vocab.len(), dataset.config.feature_dim, config, &mut rng)?;
    train_semantic_space(&mut space, &pairs, &answer_pairs, &mut rng)?;
    Ok(space)
}

/// Uniform sample without replacement of unlabeled items, taken as the
/// first unlabeled entries of a permutation fixed by `(seed, t)`.
pub fn draw_pool(
    state: &AlRunState,
    dataset: &Dataset,
    schedule: &AlSchedule,
    seed: u64,
    t: usize,
) -> Result<Vec<usize>> {
    let size = schedule.counts(state.original_size)?.pool;
    if state.unlabeled.len() < size {
        return Err(Error::Schedule(format!(
            "pool of {size} requested but only {} unlabeled items remain (short by {})",
            state.unlabeled.len(),
            size - state.unlabeled.len()
        )));
    }
    let mut order = dataset.train_indices();
    Rng::derived(seed, &[tag("pool"), t as u64]).shuffle(&mut order);
    Ok(order
        .into_iter()
        .filter(|i| state.unlabeled.contains(i))
        .take(size)
        .collect())
}

/// Item indices of the `k` highest scores, ties broken by ascending index.
pub fn select_top_k(scores: &[UncertaintyScore], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} scores",
            scores.len()
        )));
    }
    let mut sorted: Vec<&UncertaintyScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.item_index.cmp(&b.item_index)));
    Ok(sorted[..k].iter().map(|s| s.item_index).collect())
}

/// Moves `indices` into the labeled set and returns their ground truth.
pub fn oracle_label<'d>(dataset: &'d Dataset, state: &mut AlRunState, indices: &[usize]) -> Result<Vec<&'d QaItem>> {
    let mut seen = BTreeSet::new();
    for &i in indices {
        if !state.unlabeled.contains(&i) || !seen.insert(i) {
            return Err(Error::InvalidArgument(format!("item {i} is not an unlabeled item")));
        }
    }
    for &i in indices {
        state.unlabeled.remove(&i);
        state.labeled.push(i);
    }
    Ok(indices.iter().map(|&i| &dataset.items[i]).collect())
}

pub fn examples<'d>(dataset: &'d Dataset, indices: &[usize]) -> Vec<QaExample<'d>> {
    indices
        .iter()
        .map(|&i| {
            let it = &dataset.items[i];
            QaExample {
                question: &it.question_tokens,
                features: dataset.features(it),
                answer: &it.answer_tokens,
            }
        })
        .collect()
}

/// Trains a model on `labeled`. From-scratch training starts from the
/// seed's fixed initialisation; `init` warm-starts instead.
pub fn train_model(
    setup: &AlSetup,
    labeled: &[usize],
    embed_enabled: bool,
    t: usize,
    init: Option<&QaModel>,
) -> Result<(QaModel, f64)> {
    let ds = setup.dataset;
    let mut model = match init {
        Some(m) => m.clone(),
        None => QaModel::new(
            ds.vocab.len(),
            ds.config.feature_dim,
            &setup.config.qa,
            &mut setup.rng("init", 0),
        )?,
    };
    let ex = examples(ds, labeled);
    let mut rng = setup.rng("train", t);
    let trace = train_qa(&mut model, setup.space, &ex, embed_enabled, &mut rng)?;
    let last = trace.losses.last().map_or(f64::NAN, |p| p.total);
    Ok((model, last))
}

/// Scores every pool item with `strategy` under a frozen model.
pub fn score_pool(
    setup: &AlSetup,
    strategy: Strategy,
    model: &QaModel,
    pool: &[usize],
    t: usize,
) -> Result<Vec<UncertaintyScore>> {
    let ds = setup.dataset;
    let cfg = &setup.config.acquisition;
    if strategy == Strategy::Random {
        let raw = score_random(pool.len(), &mut setup.rng("random", t));
        return Ok(raw
            .into_iter()
            .map(|s| UncertaintyScore {
                item_index: pool[s.item_index],
                ..s
            })
            .collect());
    }
    let mut denoiser = if strategy.uses_denoiser() {
        let space = setup
            .space
            .ok_or_else(|| Error::Config(format!("{strategy} needs a semantic space")))?;
        Some(Denoiser::new(model, space, setup.config.qa.max_len)?)
    } else {
        None
    };
    let run_seed = mix_seed(&[setup.seed, tag("mc"), t as u64]);
    pool.iter()
        .map(|&i| {
            let it = &ds.items[i];
            let (q, img) = (it.question_tokens.as_slice(), ds.features(it));
            let value = match strategy {
                Strategy::LeastConfidence => score_least_confidence(model, q, img)?,
                Strategy::Margin => score_margin(model, q, img)?,
                Strategy::Entropy => score_entropy_with(model, q, img, cfg.entropy_beam, cfg.entropy_renormalize)?,
                _ => {
                    let seeds = item_seeds(run_seed, i, cfg.mc_samples);
                    let mut samples = mc_sample_with_seeds(model, q, img, &seeds)?;
                    if let Some(d) = denoiser.as_mut() {
                        samples = d.denoise(&samples)?;
                    }
                    variance_score_with(&samples, cfg.variance_aggregation)?
                }
            };
            Ok(UncertaintyScore {
                item_index: i,
                value,
                strategy,
            })
        })
        .collect()
}

fn type_percentages(entries: &[&SelectionEntry]) -> BTreeMap<QuestionType, f64> {
    let mut out: BTreeMap<QuestionType, f64> = QuestionType::ALL.iter().map(|&t| (t, 0.0)).collect();
    for e in entries {
        *out.get_mut(&e.question_type).expect("all types present") += 100.0 / entries.len() as f64;
    }
    out
}

/// Drives one strategy through the schedule, one iteration per [`step`].
///
/// [`step`]: ActiveLearner::step
pub struct ActiveLearner<'a> {
    pub setup: AlSetup<'a>,
    pub strategy: Strategy,
    pub state: AlRunState,
    pub model: QaModel,
    /// Scores of the most recent pool.
    pub last_scores: Vec<UncertaintyScore>,
}

impl<'a> ActiveLearner<'a> {
    /// Starts from the bootstrap state and its trained model `f0`, recording
    /// the iteration-0 evaluation.
    pub fn start(setup: AlSetup<'a>, strategy: Strategy, state: AlRunState, f0: QaModel, f0_loss: f64) -> Result<Self> {
        if state.iteration != 0 || !state.metric_history.is_empty() {
            return Err(Error::InvalidArgument("start expects a fresh bootstrap state".into()));
        }
        let mut learner = Self {
            setup,
            strategy,
            state,
            model: f0,
            last_scores: Vec::new(),
        };
        learner.record(BTreeMap::new(), f0_loss)?;
        Ok(learner)
    }

    /// Continues a run from a saved state and the model trained at its last
    /// completed iteration.
    pub fn resume(setup: AlSetup<'a>, strategy: Strategy, state: AlRunState, model: QaModel) -> Self {
        Self {
            setup,
            strategy,
            state,
            model,
            last_scores: Vec::new(),
        }
    }

    fn record(&mut self, type_percentages: BTreeMap<QuestionType, f64>, final_train_loss: f64) -> Result<()> {
        let report = evaluate(&self.model, self.setup.dataset, &self.setup.dataset.test_indices())?;
        let n = self.state.labeled.len();
        self.state.metric_history.push(IterationRecord {
            iteration: self.state.iteration,
            labeled_count: n,
            labeled_fraction: n as f64 / self.state.original_size as f64,
            report,
            type_percentages,
            final_train_loss,
        });
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.state.iteration >= self.setup.schedule.iterations
    }

    /// Pool draw, scoring, selection, labeling, retraining and evaluation.
    pub fn step(&mut self) -> Result<()> {
        let t = self.state.iteration + 1;
        self.step_inner(t).map_err(|e| e.at_iteration(t))
    }

    fn step_inner(&mut self, t: usize) -> Result<()> {
        let setup = self.setup;
        let counts = setup.schedule.counts(self.state.original_size)?;
        let pool = draw_pool(&self.state, setup.dataset, setup.schedule, setup.seed, t)?;
        let scores = score_pool(&setup, self.strategy, &self.model, &pool, t)?;
        let chosen = select_top_k(&scores, counts.acquire)?;
        let by_index: BTreeMap<usize, f64> = scores.iter().map(|s| (s.item_index, s.value)).collect();
        let labeled = oracle_label(setup.dataset, &mut self.state, &chosen)?;
        let mut entries = Vec::with_capacity(labeled.len());
        for item in labeled {
            entries.push(SelectionEntry {
                iteration: t,
                item_index: item.id,
                score: by_index[&item.id],
                question_type: item.question_type,
                answer_set_size: setup.dataset.table.forms(item.canonical_class)?.len(),
            });
        }
        let init = match setup.schedule.retrain_mode {
            RetrainMode::FromScratch => None,
            RetrainMode::Continue => Some(&self.model),
        };
        let (model, loss) = train_model(&setup, &self.state.labeled, self.strategy.embed_enabled(), t, init)?;
        self.model = model;
        self.state.pool = pool;
        self.state.iteration = t;
        let refs: Vec<&SelectionEntry> = entries.iter().collect();
        let pct = type_percentages(&refs);
        self.state.selection_log.extend(entries);
        self.last_scores = scores;
        self.record(pct, loss)
    }

    pub fn run(mut self) -> Result<AlRunState> {
        while !self.finished() {
            self.step()?;
        }
        Ok(self.state)
    }
}

/// Bootstrap, train `f0`, then run every iteration of the schedule.
pub fn run_active_learning(setup: AlSetup, strategy: Strategy) -> Result<AlRunState> {
    setup.config.validate()?;
    let state = bootstrap(setup.dataset, setup.schedule, setup.seed)?;
    let (f0, loss) = train_model(&setup, &state.labeled, strategy.embed_enabled(), 0, None)?;
    ActiveLearner::start(setup, strategy, state, f0, loss)?.run()
}

/// Every labeled item must come from the training split.
pub fn check_state(state: &AlRunState, dataset: &Dataset) -> Result<()> {
    let labeled: BTreeSet<usize> = state.labeled.iter().copied().collect();
    if labeled.len() != state.labeled.len() || labeled.iter().any(|i| state.unlabeled.contains(i)) {
        return Err(Error::InvalidArgument("labeled and unlabeled sets overlap".into()));
    }
    if labeled.iter().any(|&i| dataset.items[i].split != Split::TrainPool) {
        return Err(Error::InvalidArgument(
            "a labeled item is not in the training split".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(i: usize, v: f64) -> UncertaintyScore {
        UncertaintyScore {
            item_index: i,
            value: v,
            strategy: Strategy::Random,
        }
    }

    #[test]
    fn top_k_ties_by_index() {
        let s = [score(0, 0.9), score(1, 0.1), score(2, 0.9)];
        assert_eq!(select_top_k(&s, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_k(&s, 3).unwrap().len(), 3);
        assert!(select_top_k(&s, 4).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = Rng::new(3);
        let s: Vec<UncertaintyScore> = (0..100).map(|i| score(i * 7, (rng.below(20)) as f64)).collect();
        let got = select_top_k(&s, 30).unwrap();
        let mut oracle: Vec<(i64, usize)> = s.iter().map(|x| (-(x.value as i64), x.item_index)).collect();
        oracle.sort();
        let want: Vec<usize> = oracle[..30].iter().map(|x| x.1).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn schedule_counts() {
        let s = AlSchedule::default();
        let c = s.counts(8000).unwrap();
        assert_eq!((c.bootstrap, c.pool, c.acquire), (400, 1200, 400));
        let sizes: Vec<usize> = (0..=5).map(|t| s.labeled_after(8000, t).unwrap()).collect();
        assert_eq!(sizes, vec![400, 800, 1200, 1600, 2000, 2400]);
        let bad = AlSchedule {
            acquire_fraction: 0.2,
            ..AlSchedule::default()
        };
        assert!(bad.validate().is_err());
        let over = AlSchedule {
            bootstrap_fraction: 0.9,
            ..AlSchedule::default()
        };
        assert!(over.validate().is_err());
        let full = AlSchedule {
            bootstrap_fraction: 1.0,
            iterations: 0,
            ..AlSchedule::default()
        };
        assert_eq!(full.counts(100).unwrap().bootstrap, 100);
    }
}
