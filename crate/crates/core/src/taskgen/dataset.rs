use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::table::{build_paraphrase_table, ClassKind, ParaphraseTable, TableSpec};
use super::vocab::Vocab;
use super::world::{self, COLORS, MATERIALS, POSITIONS, SHAPES, SIZES, SLOTS, SLOT_DIMS};
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, tag, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    What,
    Where,
    Who,
    How,
    HowMany,
    Exist,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [
        QuestionType::What,
        QuestionType::Where,
        QuestionType::Who,
        QuestionType::How,
        QuestionType::HowMany,
        QuestionType::Exist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::What => "what",
            QuestionType::Where => "where",
            QuestionType::Who => "who",
            QuestionType::How => "how",
            QuestionType::HowMany => "how_many",
            QuestionType::Exist => "exist",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    Test,
}

/// Relative frequency of each question type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypeMix {
    pub what: f64,
    #[serde(rename = "where")]
    pub where_: f64,
    pub who: f64,
    pub how: f64,
    pub how_many: f64,
    pub exist: f64,
}

impl Default for TypeMix {
    fn default() -> Self {
        Self {
            what: 0.35,
            where_: 0.2,
            who: 0.1,
            how: 0.1,
            how_many: 0.1,
            exist: 0.15,
        }
    }
}

impl TypeMix {
    pub fn weights(&self) -> [f64; 6] {
        [self.what, self.where_, self.who, self.how, self.how_many, self.exist]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub scenes: usize,
    pub questions_per_scene: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub type_mix: TypeMix,
    pub test_fraction: f64,
    pub paraphrase_fraction: f64,
    pub forms_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            questions_per_scene: 5,
            max_objects: 3,
            feature_dim: 32,
            noise_std: 0.05,
            type_mix: TypeMix::default(),
            test_fraction: 0.2,
            paraphrase_fraction: 0.5,
            forms_per_class: 4,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scenes < 2 || self.questions_per_scene == 0 {
            return fail("need at least 2 scenes and 1 question per scene".into());
        }
        if self.max_objects == 0 || self.max_objects > SLOTS || self.max_objects > COLORS.len() {
            return fail(format!("max_objects must lie in 1..={SLOTS}, got {}", self.max_objects));
        }
        if self.feature_dim < world::MIN_FEATURE_DIM {
            return fail(format!(
                "feature_dim must be >= {}, got {}",
                world::MIN_FEATURE_DIM,
                self.feature_dim
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        let w = self.type_mix.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return fail(format!(
                "question-type mix must be non-negative with positive total, got {w:?}"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub material: usize,
    /// Horizontal slot, which doubles as the object's position.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub feature_vector: Vec<f64>,
}

fn encode_slot(block: &mut [f64], o: &SceneObject) {
    block[o.shape] = 1.0;
    block[SHAPES.len() + o.color] = 1.0;
    block[SHAPES.len() + COLORS.len()] = if o.size == 1 { 1.0 } else { -1.0 };
    block[SHAPES.len() + COLORS.len() + 1] = if o.material == 0 { 1.0 } else { -1.0 };
}

/// Slot-layout feature vector of `objects` plus Gaussian noise seeded by
/// `seed`. Pure function of its arguments.
pub fn scene_features(objects: &[SceneObject], seed: u64, dim: usize, noise_std: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for o in objects {
        encode_slot(&mut v[o.slot * SLOT_DIMS..(o.slot + 1) * SLOT_DIMS], o);
    }
    let mut rng = Rng::new(seed);
    v.iter_mut().for_each(|x| *x += noise_std * rng.normal());
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: usize,
    pub scene_id: usize,
    pub question_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub canonical_class: usize,
    pub question_type: QuestionType,
    pub split: Split,
    /// Object the answer is about, when there is a single one.
    pub referent: Option<usize>,
}

/// A feature vector paired with a describing token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPair {
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
    /// Answer classes the description is composed of.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    pub items: Vec<QaItem>,
    pub table: ParaphraseTable,
    pub vocab: Vocab,
}

const CAPTION_BUNDLES: [&[ClassKind]; 9] = [
    &[ClassKind::Color],
    &[ClassKind::Shape],
    &[ClassKind::Size],
    &[ClassKind::Material],
    &[ClassKind::Position],
    &[ClassKind::Color, ClassKind::Shape],
    &[ClassKind::Size, ClassKind::Color, ClassKind::Shape],
    &[ClassKind::Color, ClassKind::Material, ClassKind::Shape],
    &[
        ClassKind::Size,
        ClassKind::Color,
        ClassKind::Material,
        ClassKind::Shape,
        ClassKind::Position,
    ],
];

fn attribute(o: &SceneObject, kind: ClassKind) -> usize {
    match kind {
        ClassKind::Color => o.color,
        ClassKind::Shape => o.shape,
        ClassKind::Size => o.size,
        ClassKind::Material => o.material,
        ClassKind::Position => o.slot,
        _ => unreachable!("captions only describe object attributes"),
    }
}

struct Question {
    words: Vec<&'static str>,
    answer: (ClassKind, usize),
    referent: Option<usize>,
}

fn make_question(qt: QuestionType, scene: &Scene, rng: &mut Rng) -> Question {
    let objs = &scene.objects;
    let pick = rng.below(objs.len());
    let o = objs[pick];
    let (words, answer, referent) = match qt {
        QuestionType::What => match rng.below(3) {
            0 => (
                vec!["what", "shape", "is", "the", COLORS[o.color], "object"],
                (ClassKind::Shape, o.shape),
                Some(pick),
            ),
            1 => (
                vec!["what", "material", "is", "the", COLORS[o.color], "object"],
                (ClassKind::Material, o.material),
                Some(pick),
            ),
            _ => (
                vec!["what", "color", "is", "the", "object", "on", "the", POSITIONS[o.slot]],
                (ClassKind::Color, o.color),
                Some(pick),
            ),
        },
        QuestionType::Where => (
            vec!["where", "is", "the", COLORS[o.color], SHAPES[o.shape]],
            (ClassKind::Position, o.slot),
            Some(pick),
        ),
        QuestionType::Who => (
            vec!["who", "is", "on", "the", POSITIONS[o.slot]],
            (ClassKind::Shape, o.shape),
            Some(pick),
        ),
        QuestionType::How => (
            vec!["how", "big", "is", "the", COLORS[o.color], SHAPES[o.shape]],
            (ClassKind::Size, o.size),
            Some(pick),
        ),
        QuestionType::HowMany => {
            let (word, n) = match rng.below(3) {
                0 => {
                    let s = rng.below(SHAPES.len());
                    (SHAPES[s], objs.iter().filter(|x| x.shape == s).count())
                }
                1 => {
                    let c = rng.below(COLORS.len());
                    (COLORS[c], objs.iter().filter(|x| x.color == c).count())
                }
                _ => {
                    let m = rng.below(MATERIALS.len());
                    (MATERIALS[m], objs.iter().filter(|x| x.material == m).count())
                }
            };
            (
                vec!["how", "many", word, "things", "are", "there"],
                (ClassKind::Count, n),
                None,
            )
        }
        QuestionType::Exist => {
            if rng.uniform() < 0.5 {
                (
                    vec!["is", "there", "a", SIZES[o.size], COLORS[o.color], SHAPES[o.shape]],
                    (ClassKind::Binary, 1),
                    Some(pick),
                )
            } else {
                loop {
                    let (s, c, z) = (rng.below(SHAPES.len()), rng.below(COLORS.len()), rng.below(SIZES.len()));
                    if !objs.iter().any(|x| x.shape == s && x.color == c && x.size == z) {
                        break (
                            vec!["is", "there", "a", SIZES[z], COLORS[c], SHAPES[s]],
                            (ClassKind::Binary, 0),
                            None,
                        );
                    }
                }
            }
        }
    };
    Question {
        words,
        answer,
        referent,
    }
}

fn base_vocab() -> Vocab {
    let mut v = Vocab::new();
    v.intern_all(&world::QUESTION_WORDS);
    for list in [&SHAPES[..], &COLORS, &SIZES, &MATERIALS, &POSITIONS] {
        v.intern_all(list);
    }
    v
}

const STREAM_TABLE: &str = "paraphrase_table";
const STREAM_SCENES: &str = "scenes";
const STREAM_SPLIT: &str = "split";
const STREAM_QUESTIONS: &str = "questions";

/// Generates the synthetic grounded QA corpus. Same `(config, seed)` gives
/// an identical dataset.
pub fn generate_dataset(config: &TaskConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut vocab = base_vocab();
    let spec = TableSpec {
        classes: world::answer_classes(),
        paraphrase_fraction: config.paraphrase_fraction,
        forms_per_class: config.forms_per_class,
    };
    let table = build_paraphrase_table(&spec, &mut vocab, &mut Rng::derived(seed, &[tag(STREAM_TABLE)]))?;

    let mut rng = Rng::derived(seed, &[tag(STREAM_SCENES)]);
    let scenes: Vec<Scene> = (0..config.scenes)
        .map(|id| {
            let n = 1 + rng.below(config.max_objects);
            let slots = rng.sample_indices(SLOTS, n);
            let colors = rng.sample_indices(COLORS.len(), n);
            let mut objects: Vec<SceneObject> = slots
                .iter()
                .zip(&colors)
                .map(|(&slot, &color)| SceneObject {
                    shape: rng.below(SHAPES.len()),
                    color,
                    size: rng.below(SIZES.len()),
                    material: rng.below(MATERIALS.len()),
                    slot,
                })
                .collect();
            objects.sort_by_key(|o| o.slot);
            let scene_seed = mix_seed(&[seed, tag("scene"), id as u64]);
            let feature_vector = scene_features(&objects, scene_seed, config.feature_dim, config.noise_std);
            Scene {
                id,
                seed: scene_seed,
                objects,
                feature_vector,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..config.scenes).collect();
    Rng::derived(seed, &[tag(STREAM_SPLIT)]).shuffle(&mut order);
    let n_test = ((config.test_fraction * config.scenes as f64).round() as usize).clamp(1, config.scenes - 1);
    let mut scene_split = vec![Split::TrainPool; config.scenes];
    for &s in &order[..n_test] {
        scene_split[s] = Split::Test;
    }

    let weights = config.type_mix.weights();
    let mut rng = Rng::derived(seed, &[tag(STREAM_QUESTIONS)]);
    let mut items = Vec::with_capacity(config.scenes * config.questions_per_scene);
    for scene in &scenes {
        let mut asked: HashSet<Vec<&str>> = HashSet::new();
        for _ in 0..config.questions_per_scene {
            let qt = QuestionType::ALL[rng.weighted(&weights)];
            let mut q = make_question(qt, scene, &mut rng);
            for _ in 0..8 {
                if !asked.contains(&q.words) {
                    break;
                }
                q = make_question(qt, scene, &mut rng);
            }
            asked.insert(q.words.clone());
            let class = table
                .class_of(q.answer.0, q.answer.1)
                .expect("world inventory covers every answer");
            let forms = table.forms(class)?;
            let answer_tokens = forms[rng.below(forms.len())].clone();
            items.push(QaItem {
                id: items.len(),
                scene_id: scene.id,
                question_tokens: q.words.iter().map(|w| vocab.id(w)).collect::<Result<_>>()?,
                answer_tokens,
                canonical_class: class,
                question_type: qt,
                split: scene_split[scene.id],
                referent: q.referent,
            });
        }
    }

    // Test classes must have been seen in the training pool; move whole
    // scenes over when they were not.
    loop {
        let train_classes: HashSet<usize> = items
            .iter()
            .filter(|i| i.split == Split::TrainPool)
            .map(|i| i.canonical_class)
            .collect();
        let Some(orphan) = items
            .iter()
            .find(|i| i.split == Split::Test && !train_classes.contains(&i.canonical_class))
        else {
            break;
        };
        let sid = orphan.scene_id;
        for it in items.iter_mut().filter(|i| i.scene_id == sid) {
            it.split = Split::TrainPool;
        }
    }

    Ok(Dataset {
        config: config.clone(),
        seed,
        scenes,
        items,
        table,
        vocab,
    })
}

/// All correct token sequences for `item`.
pub fn answer_set(item: &QaItem, table: &ParaphraseTable) -> Result<Vec<Vec<usize>>> {
    Ok(table.forms(item.canonical_class)?.to_vec())
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::TrainPool)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        self.items.iter().filter(|i| i.split == split).map(|i| i.id).collect()
    }

    pub fn scene(&self, item: &QaItem) -> &Scene {
        &self.scenes[item.scene_id]
    }

    pub fn features(&self, item: &QaItem) -> &[f64] {
        &self.scenes[item.scene_id].feature_vector
    }

    /// Features of a scene containing only object `obj` of `scene`.
    pub fn region_feature(&self, scene: &Scene, obj: usize) -> Vec<f64> {
        let seed = mix_seed(&[scene.seed, tag("region"), obj as u64]);
        scene_features(
            &scene.objects[obj..=obj],
            seed,
            self.config.feature_dim,
            self.config.noise_std,
        )
    }

    fn empty_region(&self, scene: &Scene) -> Vec<f64> {
        let seed = mix_seed(&[scene.seed, tag("region"), u64::MAX]);
        scene_features(&[], seed, self.config.feature_dim, self.config.noise_std)
    }

    /// Grounding pair for an answer: the referent's region when there is
    /// one, an empty region for negative existence answers, and the whole
    /// scene for counts.
    pub fn answer_pair(&self, item: &QaItem) -> CaptionPair {
        let scene = self.scene(item);
        let features = match (item.referent, item.question_type) {
            (Some(obj), _) => self.region_feature(scene, obj),
            (None, QuestionType::Exist) => self.empty_region(scene),
            (None, _) => scene.feature_vector.clone(),
        };
        CaptionPair {
            features,
            tokens: item.answer_tokens.clone(),
            classes: vec![item.canonical_class],
        }
    }

    pub fn max_answer_len(&self) -> usize {
        self.table
            .classes()
            .iter()
            .flat_map(|c| c.forms.iter().map(Vec::len))
            .max()
            .unwrap_or(1)
    }
}

/// Samples `count` distinct (object, description template) captions from
/// the given scenes. Each caption concatenates one surface form per
/// described attribute and is paired with the object's region features.
pub fn caption_pairs(dataset: &Dataset, scene_ids: &[usize], rng: &mut Rng, count: usize) -> Result<Vec<CaptionPair>> {
    let slots: Vec<(usize, usize)> = scene_ids
        .iter()
        .flat_map(|&s| (0..dataset.scenes[s].objects.len()).map(move |o| (s, o)))
        .collect();
    let capacity = slots.len() * CAPTION_BUNDLES.len();
    if count > capacity {
        return Err(Error::InvalidArgument(format!(
            "caption_pairs: requested {count} captions but only {capacity} are available"
        )));
    }
    let picks = rng.sample_indices(capacity, count);
    picks
        .into_iter()
        .map(|p| {
            let (sid, obj) = slots[p / CAPTION_BUNDLES.len()];
            let bundle = CAPTION_BUNDLES[p % CAPTION_BUNDLES.len()];
            let scene = &dataset.scenes[sid];
            let o = &scene.objects[obj];
            let mut tokens = Vec::new();
            let mut classes = Vec::new();
            for &kind in bundle {
                let class = dataset
                    .table
                    .class_of(kind, attribute(o, kind))
                    .ok_or_else(|| Error::Config(format!("no class for {kind:?}")))?;
                let forms = dataset.table.forms(class)?;
                tokens.extend_from_slice(&forms[rng.below(forms.len())]);
                classes.push(class);
            }
            Ok(CaptionPair {
                features: dataset.region_feature(scene, obj),
                tokens,
                classes,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    config: TaskConfig,
    vocab: Vocab,
    paraphrase_table: ParaphraseTable,
    scenes: Vec<Scene>,
}

pub const HEADER_FILE: &str = "header.json";
pub const TRAIN_FILE: &str = "train_pool.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Writes `header.json` plus one JSON-lines file per split.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = Header {
        format_version: 1,
        seed: dataset.seed,
        config: dataset.config.clone(),
        vocab: dataset.vocab.clone(),
        paraphrase_table: dataset.table.clone(),
        scenes: dataset.scenes.clone(),
    };
    serde_json::to_writer(BufWriter::new(File::create(dir.join(HEADER_FILE))?), &header)?;
    for (split, name) in [(Split::TrainPool, TRAIN_FILE), (Split::Test, TEST_FILE)] {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        for item in dataset.items.iter().filter(|i| i.split == split) {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let header: Header = serde_json::from_reader(BufReader::new(File::open(dir.join(HEADER_FILE))?))?;
    let mut by_id = BTreeMap::new();
    for name in [TRAIN_FILE, TEST_FILE] {
        for line in BufReader::new(File::open(dir.join(name))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: QaItem = serde_json::from_str(&line)?;
            by_id.insert(item.id, item);
        }
    }
    Ok(Dataset {
        config: header.config,
        seed: header.seed,
        scenes: header.scenes,
        items: by_id.into_values().collect(),
        table: header.paraphrase_table,
        vocab: header.vocab,
    })
}
