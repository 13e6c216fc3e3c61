//! Browser bindings: a preview of the synthetic world, the raw versus
//! paraphrase-corrected entropy of a hand-made beam, and Monte-Carlo
//! dropout spread of a small model trained in the page.
//!
//! Every export returns a JSON string; errors surface as JS exceptions.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use paraal::alloop::{bootstrap, build_space, train_model, AlConfig, AlSchedule, AlSetup};
use paraal::embedspace::{SemanticSpace, VsConfig};
use paraal::qamodel::{QaConfig, QaModel};
use paraal::taskgen::{generate_dataset, Dataset, TaskConfig};
use paraal::uncertainty::{
    corrected_entropy_value, entropy_value, item_seeds, mc_sample_with_seeds, variance_score, Denoiser,
};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct PreviewItem {
    question: String,
    answer: String,
    question_type: &'static str,
    paraphrases: Vec<String>,
}

#[derive(Serialize)]
struct PreviewScene {
    id: usize,
    objects: Vec<String>,
    items: Vec<PreviewItem>,
}

#[derive(Serialize)]
struct Preview {
    vocab_size: usize,
    paraphrased_classes: usize,
    classes: usize,
    scenes: Vec<PreviewScene>,
}

fn preview(seed: u64, scenes: usize, paraphrase_fraction: f64) -> paraal::Result<Preview> {
    use paraal::taskgen::world::{COLORS, MATERIALS, POSITIONS, SHAPES, SIZES};
    let cfg = TaskConfig {
        scenes: scenes.max(2),
        paraphrase_fraction,
        ..TaskConfig::default()
    };
    let ds = generate_dataset(&cfg, seed)?;
    let v = &ds.vocab;
    let mut out = Vec::new();
    for scene in ds.scenes.iter().take(scenes) {
        let objects = scene
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{} {} {} {} on the {}",
                    SIZES[o.size], COLORS[o.color], MATERIALS[o.material], SHAPES[o.shape], POSITIONS[o.slot]
                )
            })
            .collect();
        let mut items = Vec::new();
        for it in ds.items.iter().filter(|i| i.scene_id == scene.id) {
            let paraphrases = ds
                .table
                .forms(it.canonical_class)?
                .iter()
                .map(|f| v.decode(f))
                .collect::<paraal::Result<_>>()?;
            items.push(PreviewItem {
                question: v.decode(&it.question_tokens)?,
                answer: v.decode(&it.answer_tokens)?,
                question_type: it.question_type.as_str(),
                paraphrases,
            });
        }
        out.push(PreviewScene {
            id: scene.id,
            objects,
            items,
        });
    }
    let classes = ds.table.len();
    Ok(Preview {
        vocab_size: v.len(),
        paraphrased_classes: (0..classes).filter(|&c| ds.table.is_paraphrased(c)).count(),
        classes,
        scenes: out,
    })
}

/// Scenes of a freshly generated world with their questions, answers and
/// every paraphrase of each answer.
#[wasm_bindgen]
pub fn world_preview(seed: u32, scenes: usize, paraphrase_fraction: f64) -> Result<String, JsValue> {
    to_json(&preview(u64::from(seed), scenes, paraphrase_fraction).map_err(js_err)?)
}

#[derive(Deserialize)]
struct BeamEntry {
    /// Entries sharing a meaning share a label.
    meaning: String,
    probability: f64,
}

#[derive(Serialize)]
struct EntropyOut {
    raw: f64,
    corrected: f64,
    meanings: usize,
}

/// Raw beam entropy of `beam_json` (`[{"meaning": .., "probability": ..}]`)
/// next to the entropy after pooling the probability of each meaning.
#[wasm_bindgen]
pub fn entropy_overestimation(beam_json: &str) -> Result<String, JsValue> {
    let beam: Vec<BeamEntry> = serde_json::from_str(beam_json).map_err(js_err)?;
    if beam.iter().any(|b| !(0.0..=1.0).contains(&b.probability)) {
        return Err(js_err("probabilities must lie in [0, 1]"));
    }
    let mut labels: Vec<&str> = beam.iter().map(|b| b.meaning.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let raw = entropy_value(&beam.iter().map(|b| b.probability).collect::<Vec<_>>());
    let grouped: Vec<(Option<usize>, f64)> = beam
        .iter()
        .map(|b| (labels.binary_search(&b.meaning.as_str()).ok(), b.probability))
        .collect();
    to_json(&EntropyOut {
        raw,
        corrected: corrected_entropy_value(&grouped),
        meanings: labels.len(),
    })
}

/// A small world, semantic space and bootstrap model, trained once when the
/// page asks for it.
#[wasm_bindgen]
pub struct McDemo {
    dataset: Dataset,
    space: SemanticSpace,
    model: QaModel,
    seed: u64,
}

#[derive(Serialize)]
struct McOut {
    question: String,
    truth: String,
    eval_answer: String,
    sample_answers: Vec<String>,
    variance: f64,
    denoised_variance: f64,
}

#[wasm_bindgen]
impl McDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<McDemo, JsValue> {
        Self::build(u64::from(seed)).map_err(js_err)
    }

    fn build(seed: u64) -> paraal::Result<Self> {
        let task = TaskConfig {
            scenes: 300,
            ..TaskConfig::default()
        };
        let dataset = generate_dataset(&task, seed)?;
        let schedule = AlSchedule {
            bootstrap_fraction: 0.3,
            iterations: 0,
            ..AlSchedule::default()
        };
        let state = bootstrap(&dataset, &schedule, seed)?;
        let vs = VsConfig {
            iterations: 150,
            ..VsConfig::default()
        };
        let space = build_space(&dataset, &state, &vs, seed)?;
        let config = AlConfig {
            qa: QaConfig {
                epochs: 15,
                ..QaConfig::default()
            },
            ..AlConfig::default()
        };
        let setup = AlSetup {
            dataset: &dataset,
            schedule: &schedule,
            config: &config,
            seed,
            space: Some(&space),
        };
        let (model, _) = train_model(&setup, &state.labeled, true, 0, None)?;
        Ok(Self {
            dataset,
            space,
            model,
            seed,
        })
    }

    pub fn test_items(&self) -> usize {
        self.dataset.test_indices().len()
    }

    fn run(&mut self, test_item: usize, keep: f64, samples: usize) -> paraal::Result<McOut> {
        let test = self.dataset.test_indices();
        let idx = *test
            .get(test_item)
            .ok_or_else(|| paraal::Error::InvalidArgument(format!("test item {test_item} out of range")))?;
        let it = &self.dataset.items[idx];
        let img = self.dataset.features(it);
        self.model.config.keep_probability = keep;
        let v = &self.dataset.vocab;
        let seeds = item_seeds(self.seed, idx, samples);
        let set = mc_sample_with_seeds(&self.model, &it.question_tokens, img, &seeds)?;
        let mut denoiser = Denoiser::new(&self.model, &self.space, self.model.config.max_len)?;
        let denoised = denoiser.denoise(&set)?;
        let sample_answers = set
            .embeddings
            .iter()
            .map(|h| v.decode(&self.model.decode_greedy(h, self.model.config.max_len)?))
            .collect::<paraal::Result<_>>()?;
        Ok(McOut {
            question: v.decode(&it.question_tokens)?,
            truth: v.decode(&it.answer_tokens)?,
            eval_answer: v.decode(&self.model.answer(&it.question_tokens, img)?)?,
            sample_answers,
            variance: variance_score(&set)?,
            denoised_variance: variance_score(&denoised)?,
        })
    }

    /// Variance of `samples` dropout encodings of one test item at keep
    /// probability `keep`, before and after denoising.
    pub fn mc_variance(&mut self, test_item: usize, keep: f64, samples: usize) -> Result<String, JsValue> {
        if !(keep > 0.0 && keep <= 1.0) || samples < 2 {
            return Err(js_err("need 0 < keep <= 1 and at least 2 samples"));
        }
        let out = self.run(test_item, keep, samples).map_err(js_err)?;
        to_json(&out)
    }
}
