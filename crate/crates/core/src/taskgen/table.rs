use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Semantic family an answer class belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Color,
    Shape,
    Size,
    Material,
    Position,
    Count,
    Binary,
    Other,
}

/// One answer meaning and the pool of surface forms it may draw from.
/// `bank[0]` is the canonical form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ClassKind,
    /// Attribute value inside `kind` (e.g. colour index).
    pub value: usize,
    pub bank: Vec<Vec<String>>,
    /// Marks the affirmative binary answer, which receives seven forms
    /// whenever it is paraphrased.
    #[serde(default)]
    pub affirmative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub classes: Vec<ClassSpec>,
    pub paraphrase_fraction: f64,
    pub forms_per_class: usize,
}

pub const AFFIRMATIVE_FORMS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerClass {
    pub name: String,
    pub kind: ClassKind,
    pub value: usize,
    pub forms: Vec<Vec<usize>>,
}

/// `class id -> surface forms`, with a reverse index from token sequence
/// to class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<AnswerClass>", into = "Vec<AnswerClass>")]
pub struct ParaphraseTable {
    classes: Vec<AnswerClass>,
    by_form: HashMap<Vec<usize>, usize>,
    by_key: HashMap<(ClassKind, usize), usize>,
}

impl From<Vec<AnswerClass>> for ParaphraseTable {
    fn from(classes: Vec<AnswerClass>) -> Self {
        let mut by_form = HashMap::new();
        let mut by_key = HashMap::new();
        for (id, c) in classes.iter().enumerate() {
            by_key.insert((c.kind, c.value), id);
            for f in &c.forms {
                by_form.insert(f.clone(), id);
            }
        }
        Self {
            classes,
            by_form,
            by_key,
        }
    }
}

impl From<ParaphraseTable> for Vec<AnswerClass> {
    fn from(t: ParaphraseTable) -> Self {
        t.classes
    }
}

impl ParaphraseTable {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, id: usize) -> Result<&AnswerClass> {
        self.classes.get(id).ok_or(Error::UnknownClass(id))
    }

    pub fn classes(&self) -> &[AnswerClass] {
        &self.classes
    }

    pub fn forms(&self, id: usize) -> Result<&[Vec<usize>]> {
        Ok(&self.class(id)?.forms)
    }

    /// Class whose surface forms contain exactly `tokens`.
    pub fn class_of_form(&self, tokens: &[usize]) -> Option<usize> {
        self.by_form.get(tokens).copied()
    }

    pub fn class_of(&self, kind: ClassKind, value: usize) -> Option<usize> {
        self.by_key.get(&(kind, value)).copied()
    }

    pub fn total_forms(&self) -> usize {
        self.classes.iter().map(|c| c.forms.len()).sum()
    }

    pub fn is_paraphrased(&self, id: usize) -> bool {
        self.classes.get(id).is_some_and(|c| c.forms.len() > 1)
    }
}

/// Assigns surface forms to every class. Exactly
/// `round(paraphrase_fraction * classes)` classes get `forms_per_class`
/// forms (the affirmative class gets seven, and is chosen first); the rest
/// keep only their canonical form. Banks shorter than needed are extended
/// with synthetic `<canonical>_alt<k>` tokens.
pub fn build_paraphrase_table(spec: &TableSpec, vocab: &mut Vocab, rng: &mut Rng) -> Result<ParaphraseTable> {
    let f = spec.paraphrase_fraction;
    if !(0.0..=1.0).contains(&f) || f.is_nan() {
        return Err(Error::Config(format!(
            "paraphrase_fraction must lie in [0, 1], got {f}"
        )));
    }
    if spec.forms_per_class < 2 {
        return Err(Error::Config(format!(
            "forms_per_class must be >= 2, got {}",
            spec.forms_per_class
        )));
    }
    if spec.classes.iter().any(|c| c.bank.is_empty() || c.bank[0].is_empty()) {
        return Err(Error::Config("every class needs a non-empty canonical form".into()));
    }
    let n = spec.classes.len();
    let n_para = (f * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    if let Some(pos) = order.iter().position(|&i| spec.classes[i].affirmative) {
        let yes = order.remove(pos);
        order.insert(0, yes);
    }
    let mut paraphrased = vec![false; n];
    for &i in order.iter().take(n_para) {
        paraphrased[i] = true;
    }

    let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
    let mut classes = Vec::with_capacity(n);
    for (id, c) in spec.classes.iter().enumerate() {
        let want = match (paraphrased[id], c.affirmative) {
            (false, _) => 1,
            (true, true) => AFFIRMATIVE_FORMS,
            (true, false) => spec.forms_per_class,
        };
        let mut words: Vec<Vec<String>> = c.bank.iter().take(want).cloned().collect();
        let stem = c.bank[0].join("_");
        let mut k = 1;
        while words.len() < want {
            words.push(vec![format!("{stem}_alt{k}")]);
            k += 1;
        }
        for w in &words {
            if seen.insert(w.clone(), id).is_some() {
                return Err(Error::Config(format!("surface form `{}` is not unique", w.join(" "))));
            }
        }
        let forms = words
            .iter()
            .map(|w| w.iter().map(|t| vocab.intern(t)).collect())
            .collect();
        classes.push(AnswerClass {
            name: c.name.clone(),
            kind: c.kind,
            value: c.value,
            forms,
        });
    }
    Ok(ParaphraseTable::from(classes))
}
