use serde::{Deserialize, Serialize};

use super::parse::join_descriptor_list;
use super::DescriptorError;
use crate::corpus::Sentence;

pub const INPUT_MARKER: &str = "{INPUT}";
pub const EXAMPLE_MARKER: &str = "{EXAMPLE}";
pub const DESCRIPTOR_MARKER: &str = "{DESCRIPTOR}";

pub const DEFAULT_P1_TEMPLATE: &str = "\
Task: List the descriptors that characterize the product review below. \
Descriptors are short phrases naming the product aspects, qualities and \
sentiments the review talks about. Answer with a comma-separated list of \
quoted descriptors.

{EXAMPLE}

Review: {INPUT}
Descriptors:";

pub const DEFAULT_P2_TEMPLATE: &str = "\
Task: Decide whether the descriptor \"{DESCRIPTOR}\" applies to the product \
review below. Answer with a single word: Yes or No.

Review: {INPUT}
Answer (Yes or No):";

/// The single worked example shown before every input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneShotExample {
    pub sentence: String,
    pub descriptors: Vec<String>,
}

impl OneShotExample {
    pub fn render(&self) -> String {
        format!(
            "Review: {}\nDescriptors: {}",
            self.sentence,
            join_descriptor_list(&self.descriptors)
        )
    }
}

/// Plain-text prompt scaffold with `{EXAMPLE}`, `{INPUT}` and (for yes/no
/// prompts) `{DESCRIPTOR}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task_text: String,
    pub one_shot_example: Option<OneShotExample>,
    pub input_slot_marker: String,
}

impl PromptTemplate {
    pub fn new(task_text: impl Into<String>) -> Self {
        Self {
            task_text: task_text.into(),
            one_shot_example: None,
            input_slot_marker: INPUT_MARKER.to_string(),
        }
    }

    pub fn with_example(mut self, example: OneShotExample) -> Self {
        self.one_shot_example = Some(example);
        self
    }

    pub fn default_p1() -> Self {
        Self::new(DEFAULT_P1_TEMPLATE)
    }

    pub fn default_p2() -> Self {
        Self::new(DEFAULT_P2_TEMPLATE)
    }

    /// Candidate-descriptor prompt for one sentence.
    pub fn render_p1(&self, sentence: &Sentence) -> Result<String, DescriptorError> {
        let input_at = self.single_input_slot()?;
        let example_count = self.task_text.matches(EXAMPLE_MARKER).count();
        let example_text = match (&self.one_shot_example, example_count) {
            (_, n) if n > 1 => {
                return Err(DescriptorError::Template(format!(
                    "{EXAMPLE_MARKER} appears {n} times"
                )))
            }
            (Some(_), 0) => {
                return Err(DescriptorError::Template(format!(
                    "template has a one-shot example but no {EXAMPLE_MARKER} slot"
                )))
            }
            (Some(ex), _) => {
                if self.task_text.find(EXAMPLE_MARKER).unwrap() > input_at {
                    return Err(DescriptorError::Template(format!(
                        "{EXAMPLE_MARKER} must come before {}",
                        self.input_slot_marker
                    )));
                }
                ex.render()
            }
            (None, _) => String::new(),
        };
        Ok(self.substitute(&[
            (EXAMPLE_MARKER, &example_text),
            (&self.input_slot_marker, &sentence.text),
        ]))
    }

    /// Yes/no applicability prompt for one (descriptor, sentence) pair.
    pub fn render_p2(
        &self,
        descriptor: &str,
        sentence: &Sentence,
    ) -> Result<String, DescriptorError> {
        self.single_input_slot()?;
        if !self.task_text.contains(DESCRIPTOR_MARKER) {
            return Err(DescriptorError::Template(format!(
                "template has no {DESCRIPTOR_MARKER} slot"
            )));
        }
        let example_text = self
            .one_shot_example
            .as_ref()
            .map(OneShotExample::render)
            .unwrap_or_default();
        Ok(self.substitute(&[
            (EXAMPLE_MARKER, &example_text),
            (DESCRIPTOR_MARKER, descriptor),
            (&self.input_slot_marker, &sentence.text),
        ]))
    }

    fn single_input_slot(&self) -> Result<usize, DescriptorError> {
        let marker = &self.input_slot_marker;
        if marker.is_empty() {
            return Err(DescriptorError::Template("empty input slot marker".into()));
        }
        match self.task_text.matches(marker.as_str()).count() {
            1 => Ok(self.task_text.find(marker.as_str()).unwrap()),
            0 => Err(DescriptorError::Template(format!(
                "no {marker} slot in template"
            ))),
            n => Err(DescriptorError::Template(format!(
                "{marker} appears {n} times"
            ))),
        }
    }

    /// Single left-to-right pass over the scaffold; substituted values are
    /// never rescanned, so marker-like text inside a sentence stays literal.
    fn substitute(&self, slots: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.task_text.len() + 256);
        let mut rest = self.task_text.as_str();
        loop {
            let next = slots
                .iter()
                .filter_map(|(m, v)| rest.find(m).map(|at| (at, *m, *v)))
                .min_by_key(|(at, m, _)| (*at, std::cmp::Reverse(m.len())));
            match next {
                Some((at, m, v)) => {
                    out.push_str(&rest[..at]);
                    out.push_str(v);
                    rest = &rest[at + m.len()..];
                }
                None => {
                    out.push_str(rest);
                    return out;
                }
            }
        }
    }
}
