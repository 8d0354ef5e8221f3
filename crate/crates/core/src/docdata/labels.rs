use serde::{Deserialize, Serialize};

/// Begin/intermediate tagging over a set of entity types.
///
/// Class 0 is `O`; entity type `t` owns `B-t = 1 + 2t` and `I-t = 2 + 2t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub entity_types: Vec<String>,
}

/// Label id placed on tokens that carry no supervision.
pub const IGNORE_INDEX: i64 = -100;

impl LabelScheme {
    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Self {
        Self {
            entity_types: types.into_iter().map(Into::into).collect(),
        }
    }

    /// Form-understanding scheme: header, question, answer, other → 7 classes.
    pub fn funsd() -> Self {
        Self::new(["HEADER", "QUESTION", "ANSWER"])
    }

    /// Receipt key-value scheme: company, date, address, total → 9 classes.
    pub fn sroie() -> Self {
        Self::new(["COMPANY", "DATE", "ADDRESS", "TOTAL"])
    }

    pub fn num_classes(&self) -> usize {
        1 + 2 * self.entity_types.len()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t.eq_ignore_ascii_case(name))
    }

    pub fn begin(&self, entity_type: usize) -> usize {
        1 + 2 * entity_type
    }

    pub fn inside(&self, entity_type: usize) -> usize {
        2 + 2 * entity_type
    }

    /// Entity type of a class, `None` for `O`.
    pub fn entity_of(&self, class: usize) -> Option<usize> {
        (class > 0).then(|| (class - 1) / 2)
    }

    pub fn is_begin(&self, class: usize) -> bool {
        class > 0 && class % 2 == 1
    }

    /// Intermediate variant of a class (identity for `O` and `I-*`).
    pub fn to_inside(&self, class: usize) -> usize {
        if self.is_begin(class) {
            class + 1
        } else {
            class
        }
    }

    pub fn name(&self, class: usize) -> String {
        match self.entity_of(class) {
            None => "O".to_string(),
            Some(t) => {
                let prefix = if self.is_begin(class) { "B" } else { "I" };
                format!("{prefix}-{}", self.entity_types[t])
            }
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.num_classes()).map(|c| self.name(c)).collect()
    }
}
