//! Attribute inventory of the synthetic scenes and the paraphrase banks of
//! every answer class.

use super::table::{ClassKind, ClassSpec};

pub const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];
pub const COLORS: [&str; 5] = ["red", "blue", "green", "yellow", "purple"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 2] = ["metal", "rubber"];
pub const POSITIONS: [&str; 3] = ["left", "middle", "right"];
pub const COUNT_WORDS: [&str; 4] = ["zero", "one", "two", "three"];

/// Per-slot feature block: shape one-hot, colour one-hot, size ±1, material ±1.
pub const SLOT_DIMS: usize = SHAPES.len() + COLORS.len() + 2;
pub const SLOTS: usize = POSITIONS.len();
pub const MIN_FEATURE_DIM: usize = SLOT_DIMS * SLOTS;

fn forms(list: &[&str]) -> Vec<Vec<String>> {
    list.iter()
        .map(|f| f.split_whitespace().map(str::to_string).collect())
        .collect()
}

fn class(name: &str, kind: ClassKind, value: usize, bank: &[&str]) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        kind,
        value,
        bank: forms(bank),
        affirmative: false,
    }
}

/// Every answer class of the world, in a fixed order.
pub fn answer_classes() -> Vec<ClassSpec> {
    let mut out = vec![
        class(
            "red",
            ClassKind::Color,
            0,
            &["red", "crimson", "scarlet", "ruby", "cherry", "reddish", "red colored"],
        ),
        class(
            "blue",
            ClassKind::Color,
            1,
            &["blue", "azure", "navy", "cobalt", "sapphire", "bluish", "blue colored"],
        ),
        class(
            "green",
            ClassKind::Color,
            2,
            &["green", "emerald", "olive", "lime", "jade", "greenish", "green colored"],
        ),
        class(
            "yellow",
            ClassKind::Color,
            3,
            &[
                "yellow",
                "golden",
                "amber",
                "lemon",
                "mustard",
                "yellowish",
                "yellow colored",
            ],
        ),
        class(
            "purple",
            ClassKind::Color,
            4,
            &[
                "purple",
                "violet",
                "lilac",
                "mauve",
                "plum",
                "purplish",
                "purple colored",
            ],
        ),
        class(
            "cube",
            ClassKind::Shape,
            0,
            &[
                "cube",
                "block",
                "box",
                "cubic block",
                "square block",
                "brick",
                "the cube",
            ],
        ),
        class(
            "sphere",
            ClassKind::Shape,
            1,
            &["sphere", "ball", "orb", "globe", "round ball", "bead", "the sphere"],
        ),
        class(
            "cylinder",
            ClassKind::Shape,
            2,
            &[
                "cylinder",
                "tube",
                "can",
                "drum",
                "pipe",
                "round column",
                "the cylinder",
            ],
        ),
        class(
            "small",
            ClassKind::Size,
            0,
            &["small", "tiny", "little", "small sized", "mini", "petite", "not big"],
        ),
        class(
            "large",
            ClassKind::Size,
            1,
            &["large", "big", "huge", "large sized", "giant", "massive", "very big"],
        ),
        class(
            "metal",
            ClassKind::Material,
            0,
            &["metal", "metallic", "steel", "shiny", "iron", "chrome", "made of metal"],
        ),
        class(
            "rubber",
            ClassKind::Material,
            1,
            &[
                "rubber",
                "matte",
                "rubbery",
                "soft",
                "made of rubber",
                "elastic",
                "matte rubber",
            ],
        ),
        class(
            "left",
            ClassKind::Position,
            0,
            &[
                "on the left",
                "to the left",
                "at the left side",
                "left side",
                "on the left side",
                "toward the left",
                "far left of the scene",
            ],
        ),
        class(
            "middle",
            ClassKind::Position,
            1,
            &[
                "in the middle",
                "at the center",
                "in the center",
                "center spot",
                "middle of the scene",
                "right in the middle",
                "at the middle spot",
            ],
        ),
        class(
            "right",
            ClassKind::Position,
            2,
            &[
                "on the right",
                "to the right",
                "at the right side",
                "right side",
                "on the right side",
                "toward the right",
                "far right of the scene",
            ],
        ),
        class(
            "zero",
            ClassKind::Count,
            0,
            &["zero", "none", "no objects", "nothing", "zero objects", "not any", "0"],
        ),
        class(
            "one",
            ClassKind::Count,
            1,
            &[
                "one",
                "single",
                "just one",
                "one object",
                "a single one",
                "exactly one",
                "1",
            ],
        ),
        class(
            "two",
            ClassKind::Count,
            2,
            &["two", "pair", "a pair", "two objects", "exactly two", "couple", "2"],
        ),
        class(
            "three",
            ClassKind::Count,
            3,
            &[
                "three",
                "trio",
                "three objects",
                "exactly three",
                "a trio",
                "triple",
                "3",
            ],
        ),
        class(
            "no",
            ClassKind::Binary,
            0,
            &["no", "nope", "nah", "not really", "negative", "no way", "incorrect"],
        ),
    ];
    let mut yes = class(
        "yes",
        ClassKind::Binary,
        1,
        &["yes", "yeah", "yep", "yup", "sure", "correct", "affirmative"],
    );
    yes.affirmative = true;
    out.push(yes);
    out
}

/// Words used by the question templates.
pub const QUESTION_WORDS: [&str; 19] = [
    "what", "shape", "material", "color", "is", "the", "object", "on", "where", "who", "how", "big", "many", "objects",
    "are", "there", "a", "thing", "things",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banks_are_disjoint_and_deep_enough() {
        let classes = answer_classes();
        let mut all = Vec::new();
        for c in &classes {
            assert!(c.bank.len() >= 7, "{} bank too small", c.name);
            all.extend(c.bank.iter().cloned());
        }
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn position_forms_are_multi_token() {
        for c in answer_classes().iter().filter(|c| c.kind == ClassKind::Position) {
            assert!(c.bank.iter().all(|f| (2..=5).contains(&f.len())), "{}", c.name);
        }
    }
}
