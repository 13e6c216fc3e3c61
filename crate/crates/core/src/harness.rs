//! Experiment configuration, strategy × seed grid orchestration, resumable
//! per-run result files and multi-seed aggregation.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json, schema.json
//! runs/<run_id>/record.json, metrics.csv, selections.jsonl, state.json, model_<t>.ckpt
//! scores/<run_id>/iter_<t>.csv        (with score dumps enabled)
//! report.csv                          (written by the report step)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alloop::{
    bootstrap, build_space, check_state, train_model, AcquisitionConfig, ActiveLearner, AlConfig, AlRunState,
    AlSchedule, AlSetup,
};
use crate::embedspace::{SemanticSpace, VsConfig};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, mix_seed, tag};
use crate::qamodel::{QaConfig, QaModel};
use crate::taskgen::{generate_dataset, Dataset, QuestionType, TaskConfig};
use crate::uncertainty::{
    entropy_pair, item_seeds, mc_sample_with_seeds, variance_score_with, Denoiser, Strategy, UncertaintyScore,
};

pub const CSV_COLUMNS: [&str; 8] = [
    "run_id",
    "strategy",
    "seed",
    "iteration",
    "labeled_fraction",
    "metric_name",
    "value",
    "question_type",
];
pub const SCORE_COLUMNS: [&str; 5] = ["item_index", "strategy", "value", "question_type", "answer_set_size"];
pub const REPORT_COLUMNS: [&str; 8] = [
    "strategy",
    "iteration",
    "labeled_fraction",
    "metric_name",
    "question_type",
    "mean",
    "std",
    "n",
];
pub const OUTPUT_DIR_ENV: &str = "PARAAL_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "paraal-output";
/// `question_type` of overall metric rows.
pub const ALL_TYPES: &str = "all";
/// Metric name of per-type selection shares.
pub const SELECTED_PERCENT: &str = "selected_percent";
pub const TRAIN_LOSS: &str = "train_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: TaskConfig,
    pub model: QaConfig,
    pub vs: VsConfig,
    pub acquisition: AcquisitionConfig,
    pub schedule: AlSchedule,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: TaskConfig::default(),
            model: QaConfig::default(),
            vs: VsConfig::default(),
            acquisition: AcquisitionConfig::default(),
            schedule: AlSchedule::default(),
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: None,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    /// Parses and validates a JSON config; parse errors carry line and
    /// column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.vs.validate()?;
        self.acquisition.validate()?;
        self.schedule.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies: the list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: the list is empty".into()));
        }
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if s.len() != self.strategies.len() || seeds.len() != self.seeds.len() {
            return Err(Error::Config("strategies and seeds must not repeat".into()));
        }
        if self.model.embed_dim != self.vs.embed_dim {
            return Err(Error::Config(format!(
                "model.embed_dim {} differs from vs.embed_dim {}",
                self.model.embed_dim, self.vs.embed_dim
            )));
        }
        Ok(())
    }

    /// Canonical JSON of everything that affects a single run's results.
    fn canonical(&self) -> String {
        let mut c = self.clone();
        c.strategies.clear();
        c.seeds.clear();
        c.output_dir = None;
        serde_json::to_string(&c).expect("config serialises")
    }

    pub fn config_hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn run_id(&self, seed: u64, strategy: Strategy) -> String {
        let text = format!("{}\nseed={seed}\nstrategy={}", self.canonical(), strategy.as_str());
        hex(&Sha256::digest(text.as_bytes()))[..12].to_string()
    }

    pub fn al_config(&self) -> AlConfig {
        AlConfig {
            qa: self.model.clone(),
            acquisition: self.acquisition.clone(),
        }
    }

    /// Command-line value first, then the config file, then the
    /// environment, then a fixed default.
    pub fn resolve_output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub complete: bool,
    /// Last iteration whose results are on disk.
    pub iteration: usize,
    pub metrics_path: PathBuf,
    pub selection_log_path: PathBuf,
    /// Wall-clock seconds per recorded iteration (iteration 0 included).
    pub timings_secs: Vec<f64>,
}

/// One row of a run's metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub metric_name: String,
    pub value: f64,
    pub question_type: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub item_index: usize,
    pub strategy: String,
    pub value: f64,
    pub question_type: QuestionType,
    pub answer_set_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub metric_name: String,
    pub question_type: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv(format!("{other:?}")),
    }
}

/// Writes through a temporary file and a rename, so readers never see a
/// partially written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads a CSV whose header must equal `columns` exactly.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != columns {
        return Err(Error::Csv(format!(
            "{}: header {:?} does not match {:?}",
            path.display(),
            header,
            columns
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Csv(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Metric rows of every recorded iteration of a run.
pub fn metric_rows(run_id: &str, strategy: Strategy, seed: u64, state: &AlRunState) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for rec in &state.metric_history {
        let mut push = |name: &str, value: f64, qt: &str| {
            rows.push(MetricRow {
                run_id: run_id.to_string(),
                strategy: strategy.as_str().to_string(),
                seed,
                iteration: rec.iteration,
                labeled_fraction: rec.labeled_fraction,
                metric_name: name.to_string(),
                value,
                question_type: qt.to_string(),
            })
        };
        for (name, v) in &rec.report.overall {
            push(name, *v, ALL_TYPES);
        }
        for (qt, m) in &rec.report.per_type {
            for (name, v) in m {
                push(name, *v, qt.as_str());
            }
        }
        for (qt, pct) in &rec.type_percentages {
            push(SELECTED_PERCENT, *pct, qt.as_str());
        }
        push(TRAIN_LOSS, rec.final_train_loss, ALL_TYPES);
    }
    rows
}

fn score_rows(dataset: &Dataset, scores: &[UncertaintyScore], label: &str) -> Result<Vec<ScoreRow>> {
    scores
        .iter()
        .map(|s| {
            let it = &dataset.items[s.item_index];
            Ok(ScoreRow {
                item_index: s.item_index,
                strategy: label.to_string(),
                value: s.value,
                question_type: it.question_type,
                answer_set_size: dataset.table.forms(it.canonical_class)?.len(),
            })
        })
        .collect()
}

/// Everything a seed's grid cells share: the dataset, the bootstrap state,
/// the semantic space and the bootstrap models.
pub struct SeedResources {
    pub seed: u64,
    pub dataset: Dataset,
    pub bootstrap: AlRunState,
    pub space: Option<SemanticSpace>,
    /// Keyed by whether the embedding loss was used.
    pub f0: BTreeMap<bool, (QaModel, f64)>,
}

impl SeedResources {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64, strategies: &[Strategy]) -> Result<Self> {
        let dataset = generate_dataset(&cfg.dataset, seed)?;
        let boot = bootstrap(&dataset, &cfg.schedule, seed)?;
        let needs_space = strategies.iter().any(|s| s.embed_enabled() || s.uses_denoiser());
        let space = if needs_space {
            Some(build_space(&dataset, &boot, &cfg.vs, seed)?)
        } else {
            None
        };
        let mut res = Self {
            seed,
            dataset,
            bootstrap: boot,
            space,
            f0: BTreeMap::new(),
        };
        let al = cfg.al_config();
        for embed in [false, true] {
            if strategies.iter().any(|s| s.embed_enabled() == embed) {
                let setup = res.setup(cfg, &al);
                let f0 = train_model(&setup, &res.bootstrap.labeled, embed, 0, None)?;
                res.f0.insert(embed, f0);
            }
        }
        Ok(res)
    }

    pub fn setup<'a>(&'a self, cfg: &'a ExperimentConfig, al: &'a AlConfig) -> AlSetup<'a> {
        AlSetup {
            dataset: &self.dataset,
            schedule: &cfg.schedule,
            config: al,
            seed: self.seed,
            space: self.space.as_ref(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    pub output_dir: PathBuf,
    pub overwrite: bool,
    pub jobs: usize,
    pub dump_scores: bool,
    /// Leave runs incomplete once they reach this iteration; a later call
    /// resumes them.
    pub stop_after: Option<usize>,
}

/// Filesystem paths of one run.
pub struct RunPaths {
    pub dir: PathBuf,
    pub scores_dir: PathBuf,
}

impl RunPaths {
    pub fn new(output_dir: &Path, run_id: &str) -> Self {
        Self {
            dir: output_dir.join("runs").join(run_id),
            scores_dir: output_dir.join("scores").join(run_id),
        }
    }
    pub fn record(&self) -> PathBuf {
        self.dir.join("record.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn selections(&self) -> PathBuf {
        self.dir.join("selections.jsonl")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("state.json")
    }
    pub fn model(&self, t: usize) -> PathBuf {
        self.dir.join(format!("model_{t}.ckpt"))
    }
}

fn persist(paths: &RunPaths, record: &RunRecord, learner: &ActiveLearner) -> Result<()> {
    let state = &learner.state;
    let t = state.iteration;
    write_csv(
        &paths.metrics(),
        &metric_rows(&record.run_id, record.strategy, record.seed, state),
    )?;
    let mut log = String::new();
    for e in &state.selection_log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    write_atomic(&paths.selections(), log.as_bytes())?;
    let ckpt = paths.model(t);
    let tmp = ckpt.with_extension("tmp");
    checkpoint::save(&learner.model.store, &tmp)?;
    fs::rename(&tmp, &ckpt)?;
    // the state names the checkpoint to resume from, so it goes last
    write_json(&paths.state(), state)?;
    write_json(&paths.record(), record)?;
    if t > 0 {
        let old = paths.model(t - 1);
        if old.exists() {
            fs::remove_file(old)?;
        }
    }
    Ok(())
}

/// Runs (or resumes, or skips when already complete) one grid cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    res: &SeedResources,
    strategy: Strategy,
    opts: &GridOptions,
) -> Result<RunRecord> {
    let seed = res.seed;
    let run_id = cfg.run_id(seed, strategy);
    let paths = RunPaths::new(&opts.output_dir, &run_id);
    if opts.overwrite {
        for d in [&paths.dir, &paths.scores_dir] {
            if d.exists() {
                fs::remove_dir_all(d)?;
            }
        }
    }
    if paths.record().exists() {
        let rec: RunRecord = read_json(&paths.record())?;
        if rec.complete {
            return Ok(rec);
        }
    }
    fs::create_dir_all(&paths.dir)?;
    let al = cfg.al_config();
    let setup = res.setup(cfg, &al);
    let mut record = RunRecord {
        run_id: run_id.clone(),
        strategy,
        seed,
        config_hash: cfg.config_hash(),
        complete: false,
        iteration: 0,
        metrics_path: paths.metrics(),
        selection_log_path: paths.selections(),
        timings_secs: Vec::new(),
    };
    let started = Instant::now();
    let mut learner = match resume_point(&paths, &res.dataset)? {
        Some((state, store)) => {
            if paths.record().exists() {
                let old: RunRecord = read_json(&paths.record())?;
                record.timings_secs = old.timings_secs;
            }
            record.timings_secs.truncate(state.iteration + 1);
            let model = QaModel::from_store(res.dataset.vocab.len(), res.dataset.config.feature_dim, &al.qa, &store)?;
            ActiveLearner::resume(setup, strategy, state, model)
        }
        None => {
            let (f0, loss) = res
                .f0
                .get(&strategy.embed_enabled())
                .ok_or_else(|| Error::InvalidArgument(format!("no bootstrap model prepared for {strategy}")))?;
            let l = ActiveLearner::start(setup, strategy, res.bootstrap.clone(), f0.clone(), *loss)?;
            record.timings_secs.push(started.elapsed().as_secs_f64());
            record.complete = l.finished();
            persist(&paths, &record, &l)?;
            l
        }
    };
    while !learner.finished() && opts.stop_after.is_none_or(|s| learner.state.iteration < s) {
        let t0 = Instant::now();
        learner.step()?;
        let t = learner.state.iteration;
        if opts.dump_scores {
            fs::create_dir_all(&paths.scores_dir)?;
            let rows = score_rows(&res.dataset, &learner.last_scores, strategy.as_str())?;
            write_csv(&paths.scores_dir.join(format!("iter_{t}.csv")), &rows)?;
        }
        record.iteration = t;
        record.complete = learner.finished();
        record.timings_secs.push(t0.elapsed().as_secs_f64());
        persist(&paths, &record, &learner)?;
    }
    Ok(record)
}

fn resume_point(paths: &RunPaths, dataset: &Dataset) -> Result<Option<(AlRunState, crate::numerics::ParamStore)>> {
    if !paths.state().exists() {
        return Ok(None);
    }
    let state: AlRunState = read_json(&paths.state())?;
    let ckpt = paths.model(state.iteration);
    if !ckpt.exists() {
        return Ok(None);
    }
    check_state(&state, dataset)?;
    Ok(Some((state, checkpoint::load(&ckpt)?)))
}

/// Writes the resolved configuration and the schema echo.
pub fn write_schema(cfg: &ExperimentConfig, output_dir: &Path) -> Result<()> {
    fs::create_dir_all(output_dir)?;
    write_json(&output_dir.join("config.json"), cfg)?;
    let schema = serde_json::json!({
        "config": cfg,
        "config_hash": cfg.config_hash(),
        "run_ids": cfg.seeds.iter().flat_map(|&seed| cfg.strategies.iter().map(move |&s| {
            serde_json::json!({"seed": seed, "strategy": s, "run_id": cfg.run_id(seed, s)})
        })).collect::<Vec<_>>(),
        "metrics_csv_columns": CSV_COLUMNS,
        "score_csv_columns": SCORE_COLUMNS,
        "report_csv_columns": REPORT_COLUMNS,
        "overall_question_type": ALL_TYPES,
        "extra_metrics": [SELECTED_PERCENT, TRAIN_LOSS],
    });
    write_json(&output_dir.join("schema.json"), &schema)
}

/// Runs every strategy × seed cell. Seeds are processed in order; the
/// strategies of one seed run on up to `jobs` threads.
pub fn run_grid(cfg: &ExperimentConfig, opts: &GridOptions) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    write_schema(cfg, &opts.output_dir)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let pending: Vec<Strategy> = cfg
            .strategies
            .iter()
            .copied()
            .filter(|&s| {
                opts.overwrite || {
                    let p = RunPaths::new(&opts.output_dir, &cfg.run_id(seed, s)).record();
                    !matches!(read_json::<RunRecord>(&p), Ok(r) if r.complete)
                }
            })
            .collect();
        let res = SeedResources::prepare(cfg, seed, &pending)?;
        let slots: Vec<Mutex<Option<Result<RunRecord>>>> = cfg.strategies.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..opts.jobs.clamp(1, cfg.strategies.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&s) = cfg.strategies.get(i) else { break };
                    let r = run_cell(cfg, &res, s, opts);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        for slot in slots {
            out.push(slot.into_inner().expect("slot lock").expect("every cell ran")?);
        }
    }
    Ok(out)
}

/// Complete runs found under `output_dir`, with their metric rows.
pub fn load_runs(output_dir: &Path) -> Result<Vec<(RunRecord, Vec<MetricRow>)>> {
    let runs = output_dir.join("runs");
    if !runs.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let rp = d.join("record.json");
        if !rp.exists() {
            continue;
        }
        let rec: RunRecord = read_json(&rp)?;
        if rec.complete {
            let rows = read_csv(&d.join("metrics.csv"), &CSV_COLUMNS)?;
            out.push((rec, rows));
        }
    }
    Ok(out)
}

/// Mean, sample standard deviation and count per (strategy, iteration,
/// metric, question type). All runs must share one config hash.
pub fn aggregate(runs: &[(RunRecord, Vec<MetricRow>)]) -> Result<Vec<AggregateRow>> {
    if let Some((first, _)) = runs.first() {
        if let Some((bad, _)) = runs.iter().find(|(r, _)| r.config_hash != first.config_hash) {
            return Err(Error::Config(format!(
                "runs {} and {} come from different configs ({} vs {})",
                first.run_id, bad.run_id, first.config_hash, bad.config_hash
            )));
        }
    }
    type Key = (String, usize, String, String);
    let mut groups: BTreeMap<Key, (f64, Vec<f64>)> = BTreeMap::new();
    for (_, rows) in runs {
        for r in rows {
            let key = (
                r.strategy.clone(),
                r.iteration,
                r.metric_name.clone(),
                r.question_type.clone(),
            );
            let g = groups.entry(key).or_insert((r.labeled_fraction, Vec::new()));
            g.1.push(r.value);
        }
    }
    Ok(groups
        .into_iter()
        .map(
            |((strategy, iteration, metric_name, question_type), (labeled_fraction, v))| {
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                AggregateRow {
                    strategy,
                    iteration,
                    labeled_fraction,
                    metric_name,
                    question_type,
                    mean,
                    std,
                    n,
                }
            },
        )
        .collect())
}

/// Aggregates the complete runs under `output_dir` into `report.csv`.
pub fn report(output_dir: &Path) -> Result<Vec<AggregateRow>> {
    let runs = load_runs(output_dir)?;
    if runs.is_empty() {
        return Err(Error::Config(format!(
            "no complete runs under {}",
            output_dir.display()
        )));
    }
    let rows = aggregate(&runs)?;
    write_csv(&output_dir.join("report.csv"), &rows)?;
    Ok(rows)
}

/// Scores of the bootstrap model over test items: raw and corrected beam
/// entropy and embedding variance.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyDiagnosis {
    pub rows: Vec<ScoreRow>,
    pub single_raw_mean: f64,
    pub multi_raw_mean: f64,
    pub multi_corrected_mean: f64,
    pub n_single: usize,
    pub n_multi: usize,
}

impl EntropyDiagnosis {
    /// Relative excess of multi-answer over single-answer raw entropy.
    pub fn overestimation(&self) -> f64 {
        self.multi_raw_mean / self.single_raw_mean - 1.0
    }
}

pub const CORRECTED_ENTROPY: &str = "corrected_entropy";

/// Trains `f⁰` for `seed` and scores up to `limit` test items.
pub fn diagnose_entropy(cfg: &ExperimentConfig, seed: u64, limit: Option<usize>) -> Result<EntropyDiagnosis> {
    cfg.validate()?;
    let res = SeedResources::prepare(cfg, seed, &[Strategy::Entropy, Strategy::BayeDeno])?;
    let al = cfg.al_config();
    let (model, _) = &res.f0[&false];
    let ds = &res.dataset;
    let space = res.space.as_ref().expect("space prepared");
    let mut denoiser = Denoiser::new(model, space, al.qa.max_len)?;
    let mut test = ds.test_indices();
    if let Some(n) = limit {
        test.truncate(n);
    }
    let run_seed = mix_seed(&[seed, tag("diagnose")]);
    let mut rows = Vec::with_capacity(3 * test.len());
    let (mut single, mut multi, mut corrected) = (Vec::new(), Vec::new(), Vec::new());
    for &i in &test {
        let it = &ds.items[i];
        let img = ds.features(it);
        let size = ds.table.forms(it.canonical_class)?.len();
        let (raw, corr) = entropy_pair(model, &it.question_tokens, img, al.acquisition.entropy_beam, &ds.table)?;
        let samples = mc_sample_with_seeds(
            model,
            &it.question_tokens,
            img,
            &item_seeds(run_seed, i, al.acquisition.mc_samples),
        )?;
        let var = variance_score_with(&denoiser.denoise(&samples)?, al.acquisition.variance_aggregation)?;
        if size > 1 {
            multi.push(raw);
            corrected.push(corr);
        } else {
            single.push(raw);
        }
        for (label, value) in [
            (Strategy::Entropy.as_str(), raw),
            (CORRECTED_ENTROPY, corr),
            (Strategy::BayeDeno.as_str(), var),
        ] {
            rows.push(ScoreRow {
                item_index: i,
                strategy: label.to_string(),
                value,
                question_type: it.question_type,
                answer_set_size: size,
            });
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EntropyDiagnosis {
        single_raw_mean: mean(&single),
        multi_raw_mean: mean(&multi),
        multi_corrected_mean: mean(&corrected),
        n_single: single.len(),
        n_multi: multi.len(),
        rows,
    })
}
