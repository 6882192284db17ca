//! The autoregressive question protocol for one report.
//!
//! A [`Session`] walks the template depth-first. A negative answer on an
//! existence question skips the subtree below it and records the skipped
//! questions as auto-negated. A positive L2 answer opens one element instance:
//! its attribute questions are asked, then a follow-up asks for another
//! instance while the node's `max_instances` bound allows.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{FindingInstance, StructuredReport, YesNo};
use crate::template::{
    ChoiceMode, FindingClass, Level, QuestionNode, ReportTemplate, NO_SELECTION, YES,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub node_id: String,
    pub level: Level,
    pub instance_index: u32,
    pub is_followup: bool,
    pub text: String,
    pub valid_answers: Vec<String>,
    pub choice_mode: ChoiceMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryRole {
    Ancestor,
    SiblingAttribute,
    PriorInstance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub question_text: String,
    pub answer_text: String,
    pub role: HistoryRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AskedEntry {
    pub question: QuestionInstance,
    pub selections: BTreeSet<String>,
    pub history_len: usize,
}

/// A question skipped because an ancestor was answered negatively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoAnswer {
    pub node_id: String,
    pub instance_index: u32,
    pub value: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("session is finished")]
    Finished,
    #[error("session is not finished")]
    NotFinished,
    #[error("`{got}` (instance {got_instance}) is not the pending question `{expected}`")]
    NotPending {
        expected: String,
        got: String,
        got_instance: u32,
    },
    #[error("`{value}` is not a valid answer to `{node}`; valid answers: {}", valid.join(", "))]
    InvalidAnswer {
        node: String,
        value: String,
        valid: Vec<String>,
    },
    #[error("`{node}` is single-choice but {count} values were selected")]
    MultipleSelections { node: String, count: usize },
    #[error("`{node}` is single-choice and needs exactly one value")]
    EmptySelection { node: String },
    #[error("`{node}`: no selection cannot be combined with other values")]
    ConflictingSelection { node: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cursor {
    Topic {
        l1: usize,
    },
    /// Instance 0 is the element question itself, later instances are
    /// follow-ups.
    Element {
        l1: usize,
        l2: usize,
        instance: u32,
    },
    Attribute {
        l1: usize,
        l2: usize,
        instance: u32,
        l3: usize,
    },
    Done,
}

#[derive(Debug, Clone)]
pub struct Session<'t> {
    template: &'t ReportTemplate,
    patient_id: String,
    image_ref: String,
    asked: Vec<AskedEntry>,
    auto_negated: Vec<AutoAnswer>,
    cursor: Cursor,
}

pub fn start_session<'t>(t: &'t ReportTemplate, patient_id: &str, image_ref: &str) -> Session<'t> {
    let mut s = Session {
        template: t,
        patient_id: patient_id.to_string(),
        image_ref: image_ref.to_string(),
        asked: Vec::new(),
        auto_negated: Vec::new(),
        cursor: Cursor::Done,
    };
    s.cursor = s.topic_from(0);
    s
}

/// Longest possible transcript for a template: every L1 question plus, for
/// every L2 node, each of its instances with all attribute questions.
pub fn max_transcript_len(t: &ReportTemplate) -> usize {
    t.l1_order().len()
        + t.nodes_at(Level::L2)
            .map(|n| n.max_instances.unwrap_or(1) as usize * (1 + n.children.len()))
            .sum::<usize>()
}

impl<'t> Session<'t> {
    pub fn template(&self) -> &'t ReportTemplate {
        self.template
    }

    pub fn image_ref(&self) -> &str {
        &self.image_ref
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == Cursor::Done
    }

    pub fn asked(&self) -> &[AskedEntry] {
        &self.asked
    }

    pub fn auto_negated(&self) -> &[AutoAnswer] {
        &self.auto_negated
    }

    fn l1_node(&self, l1: usize) -> &'t QuestionNode {
        let t = self.template;
        &t.nodes()[&t.l1_order()[l1]]
    }

    fn l2_node(&self, l1: usize, l2: usize) -> &'t QuestionNode {
        &self.template.nodes()[&self.l1_node(l1).children[l2]]
    }

    fn l3_node(&self, l1: usize, l2: usize, l3: usize) -> &'t QuestionNode {
        &self.template.nodes()[&self.l2_node(l1, l2).children[l3]]
    }

    fn topic_from(&self, l1: usize) -> Cursor {
        if l1 < self.template.l1_order().len() {
            Cursor::Topic { l1 }
        } else {
            Cursor::Done
        }
    }

    fn sibling_after(&self, l1: usize, l2: usize) -> Cursor {
        if l2 + 1 < self.l1_node(l1).children.len() {
            Cursor::Element {
                l1,
                l2: l2 + 1,
                instance: 0,
            }
        } else {
            self.topic_from(l1 + 1)
        }
    }

    fn after_instance(&self, l1: usize, l2: usize, instance: u32) -> Cursor {
        if instance + 1 < self.l2_node(l1, l2).max_instances.unwrap_or(1) {
            Cursor::Element {
                l1,
                l2,
                instance: instance + 1,
            }
        } else {
            self.sibling_after(l1, l2)
        }
    }

    /// The pending question, if any.
    pub fn pending(&self) -> Option<QuestionInstance> {
        let (node, instance) = match self.cursor {
            Cursor::Done => return None,
            Cursor::Topic { l1 } => (self.l1_node(l1), 0),
            Cursor::Element { l1, l2, instance } => (self.l2_node(l1, l2), instance),
            Cursor::Attribute {
                l1,
                l2,
                instance,
                l3,
            } => (self.l3_node(l1, l2, l3), instance),
        };
        let is_followup = node.level == Level::L2 && instance > 0;
        let text = if is_followup {
            followup_text(node)
        } else {
            node.text.clone()
        };
        Some(QuestionInstance {
            node_id: node.id.clone(),
            level: node.level,
            instance_index: instance,
            is_followup,
            text,
            valid_answers: node.option_values().map(String::from).collect(),
            choice_mode: node.choice_mode,
        })
    }

    pub fn next_question(&self) -> Result<QuestionInstance, SessionError> {
        self.pending().ok_or(SessionError::Finished)
    }

    /// Validates `selections` against the pending question `q`, logs the
    /// answer and advances the cursor.
    pub fn apply_answer<I, S>(
        &mut self,
        q: &QuestionInstance,
        selections: I,
    ) -> Result<(), SessionError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let pending = self.next_question()?;
        if pending.node_id != q.node_id || pending.instance_index != q.instance_index {
            return Err(SessionError::NotPending {
                expected: pending.node_id,
                got: q.node_id.clone(),
                got_instance: q.instance_index,
            });
        }
        let selections = validate_selections(&pending, selections)?;
        let history_len = self.build_history(&pending).len();
        let positive = selections.contains(YES);

        self.cursor = match self.cursor {
            Cursor::Topic { l1 } => {
                if positive && !self.l1_node(l1).children.is_empty() {
                    Cursor::Element {
                        l1,
                        l2: 0,
                        instance: 0,
                    }
                } else {
                    if !positive {
                        for l2 in &self.l1_node(l1).children {
                            self.negate_subtree(l2);
                        }
                    }
                    self.topic_from(l1 + 1)
                }
            }
            Cursor::Element { l1, l2, instance } => {
                if !positive {
                    if instance == 0 {
                        for l3 in &self.l2_node(l1, l2).children {
                            self.negate(l3, 0);
                        }
                    }
                    self.sibling_after(l1, l2)
                } else if self.l2_node(l1, l2).children.is_empty() {
                    self.after_instance(l1, l2, instance)
                } else {
                    Cursor::Attribute {
                        l1,
                        l2,
                        instance,
                        l3: 0,
                    }
                }
            }
            Cursor::Attribute {
                l1,
                l2,
                instance,
                l3,
            } => {
                if l3 + 1 < self.l2_node(l1, l2).children.len() {
                    Cursor::Attribute {
                        l1,
                        l2,
                        instance,
                        l3: l3 + 1,
                    }
                } else {
                    self.after_instance(l1, l2, instance)
                }
            }
            Cursor::Done => unreachable!("pending question exists"),
        };
        self.asked.push(AskedEntry {
            question: pending,
            selections,
            history_len,
        });
        Ok(())
    }

    fn negate(&mut self, node_id: &str, instance_index: u32) {
        let value = self.template.nodes()[node_id].negative_value().to_string();
        self.auto_negated.push(AutoAnswer {
            node_id: node_id.to_string(),
            instance_index,
            value,
        });
    }

    fn negate_subtree(&mut self, l2: &str) {
        self.negate(l2, 0);
        for l3 in &self.template.nodes()[l2].children {
            self.negate(l3, 0);
        }
    }

    /// Context for question `q`: its ancestors' answers, attribute answers
    /// already given for the same instance, and every question of earlier
    /// instances of the same element, in asking order.
    pub fn build_history(&self, q: &QuestionInstance) -> Vec<HistoryEntry> {
        let t = self.template;
        let Some(node) = t.node(&q.node_id) else {
            return Vec::new();
        };
        let (l1, l2) = match node.level {
            Level::L1 => return Vec::new(),
            Level::L2 => (t.parent(&node.id), Some(node.id.as_str())),
            Level::L3 => {
                let l2 = t.parent(&node.id);
                (l2.and_then(|p| t.parent(p)), l2)
            }
        };
        let k = q.instance_index;
        let mut out = Vec::new();
        for e in &self.asked {
            let asked = &e.question;
            let j = asked.instance_index;
            let is_l1 = l1 == Some(asked.node_id.as_str());
            let is_l2 = l2 == Some(asked.node_id.as_str());
            let is_attr =
                asked.level == Level::L3 && l2.is_some() && t.parent(&asked.node_id) == l2;
            let attribute_question = node.level == Level::L3;
            let role = if is_l1 {
                Some(HistoryRole::Ancestor)
            } else if (is_l2 || is_attr) && j < k {
                Some(HistoryRole::PriorInstance)
            } else if attribute_question && j == k && is_l2 {
                Some(HistoryRole::Ancestor)
            } else if attribute_question && j == k && is_attr {
                Some(HistoryRole::SiblingAttribute)
            } else {
                None
            };
            if let Some(role) = role {
                out.push(HistoryEntry {
                    question_text: asked.text.clone(),
                    answer_text: answer_text(asked, &e.selections),
                    role,
                });
            }
        }
        out
    }

    /// The report implied by the answers so far, with skipped questions
    /// answered negatively.
    pub fn finalize(&self) -> Result<StructuredReport, SessionError> {
        if !self.is_finished() {
            return Err(SessionError::NotFinished);
        }
        let mut report = StructuredReport {
            patient_id: self.patient_id.clone(),
            image_ref: self.image_ref.clone(),
            l1_answers: BTreeMap::new(),
            instances: Vec::new(),
        };
        let mut open: BTreeMap<(&str, u32), usize> = BTreeMap::new();
        for e in &self.asked {
            let q = &e.question;
            let positive = e.selections.contains(YES);
            match q.level {
                Level::L1 => {
                    report
                        .l1_answers
                        .insert(q.node_id.clone(), YesNo::from_bool(positive));
                }
                Level::L2 if positive => {
                    open.insert((&q.node_id, q.instance_index), report.instances.len());
                    report.instances.push(FindingInstance {
                        l2_node: q.node_id.clone(),
                        instance_index: q.instance_index,
                        attribute_answers: BTreeMap::new(),
                    });
                }
                Level::L2 => {}
                Level::L3 => {
                    let parent = self.template.parent(&q.node_id).unwrap_or_default();
                    if let Some(&i) = open.get(&(parent, q.instance_index)) {
                        report.instances[i]
                            .attribute_answers
                            .insert(q.node_id.clone(), e.selections.clone());
                    }
                }
            }
        }
        report.canonicalize();
        Ok(report)
    }

    pub fn transcript(&self) -> Vec<TranscriptRecord> {
        self.asked
            .iter()
            .map(|e| TranscriptRecord {
                question: e.question.text.clone(),
                node_id: e.question.node_id.clone(),
                instance_index: e.question.instance_index,
                history_len: e.history_len,
                selections: ordered_selections(&e.question, &e.selections),
            })
            .collect()
    }
}

fn followup_text(node: &QuestionNode) -> String {
    let element = node.subject.as_deref().unwrap_or_default();
    match &node.topic.region {
        Some(r) if node.topic.class != FindingClass::Object => {
            format!("Are there other {element} in the {r}?")
        }
        _ => format!("Are there other {element}?"),
    }
}

fn validate_selections<I, S>(
    q: &QuestionInstance,
    selections: I,
) -> Result<BTreeSet<String>, SessionError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut set = BTreeSet::new();
    for s in selections {
        let s: String = s.into();
        if !q.valid_answers.contains(&s) {
            return Err(SessionError::InvalidAnswer {
                node: q.node_id.clone(),
                value: s,
                valid: q.valid_answers.clone(),
            });
        }
        set.insert(s);
    }
    match q.choice_mode {
        ChoiceMode::Single if set.is_empty() => Err(SessionError::EmptySelection {
            node: q.node_id.clone(),
        }),
        ChoiceMode::Single if set.len() > 1 => Err(SessionError::MultipleSelections {
            node: q.node_id.clone(),
            count: set.len(),
        }),
        ChoiceMode::Multi if set.is_empty() => Ok(BTreeSet::from([NO_SELECTION.to_string()])),
        ChoiceMode::Multi if set.len() > 1 && set.contains(NO_SELECTION) => {
            Err(SessionError::ConflictingSelection {
                node: q.node_id.clone(),
            })
        }
        _ => Ok(set),
    }
}

/// Selections in option order.
fn ordered_selections(q: &QuestionInstance, selections: &BTreeSet<String>) -> Vec<String> {
    q.valid_answers
        .iter()
        .filter(|v| selections.contains(*v))
        .cloned()
        .collect()
}

fn answer_text(q: &QuestionInstance, selections: &BTreeSet<String>) -> String {
    ordered_selections(q, selections).join(", ")
}

/// One line of a session transcript dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub question: String,
    pub node_id: String,
    pub instance_index: u32,
    pub history_len: usize,
    pub selections: Vec<String>,
}

pub fn render_transcript(records: &[TranscriptRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("transcript serializes") + "\n")
        .collect()
}
