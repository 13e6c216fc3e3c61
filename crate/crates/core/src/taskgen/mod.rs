//! Synthetic grounded question answering with controllable paraphrase
//! structure.

mod dataset;
mod table;
mod vocab;
pub mod world;

pub use dataset::{
    answer_set, caption_pairs, generate_dataset, read_dataset, scene_features, write_dataset, CaptionPair, Dataset,
    QaItem, QuestionType, Scene, SceneObject, Split, TaskConfig, TypeMix, HEADER_FILE, TEST_FILE, TRAIN_FILE,
};
pub use table::{
    build_paraphrase_table, AnswerClass, ClassKind, ClassSpec, ParaphraseTable, TableSpec, AFFIRMATIVE_FORMS,
};
pub use vocab::{Vocab, BOS, EOS, PAD};
