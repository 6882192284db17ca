//! The structured-report template: a three-level question forest built from
//! the term combinations observed in a corpus.
//!
//! * L1 asks whether any finding of a class exists in a body region.
//! * L2 asks whether a specific element exists (and, through follow-ups, how
//!   many instances of it).
//! * L3 asks for the attributes of one element instance along one dimension.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexicon::{Category, Corpus, CorpusError, FindingCode};

pub const FORMAT_VERSION: u32 = 1;
pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const NO_SELECTION: &str = "no selection";

/// Placeholder for the region component of region-free ids.
const NO_REGION: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L1, Level::L2, Level::L3];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.index() + 1)
    }
}

/// Finding class of an L1 topic. Variants are declared in label order so the
/// derived ordering is lexicographic by label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingClass {
    AbnormalRegion,
    Disease,
    Object,
    Sign,
}

impl FindingClass {
    pub const ALL: [FindingClass; 4] = [
        FindingClass::AbnormalRegion,
        FindingClass::Disease,
        FindingClass::Object,
        FindingClass::Sign,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FindingClass::AbnormalRegion => "abnormal_region",
            FindingClass::Disease => "disease",
            FindingClass::Object => "object",
            FindingClass::Sign => "sign",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            FindingClass::AbnormalRegion => "abnormal regions",
            FindingClass::Disease => "diseases",
            FindingClass::Object => "foreign objects",
            FindingClass::Sign => "signs",
        }
    }

    /// Class of a finding headed by a term of `category`. Anatomy elements
    /// describe abnormal regions.
    pub fn of_element(category: Category) -> Option<FindingClass> {
        match category {
            Category::Anatomy => Some(FindingClass::AbnormalRegion),
            Category::Disease => Some(FindingClass::Disease),
            Category::Sign => Some(FindingClass::Sign),
            Category::Object => Some(FindingClass::Object),
            _ => None,
        }
    }
}

impl fmt::Display for FindingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Topic {
    pub class: FindingClass,
    pub region: Option<String>,
}

impl Topic {
    fn region_key(&self) -> &str {
        self.region.as_deref().unwrap_or(NO_REGION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Degree,
    Descriptive,
    Positional,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::Degree,
        Dimension::Descriptive,
        Dimension::Positional,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Dimension::Degree => "degree",
            Dimension::Descriptive => "descriptive",
            Dimension::Positional => "positional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerOption {
    pub value: String,
    pub is_no_selection: bool,
}

impl AnswerOption {
    fn plain(value: &str) -> Self {
        AnswerOption {
            value: value.to_string(),
            is_no_selection: false,
        }
    }

    fn no_selection() -> Self {
        AnswerOption {
            value: NO_SELECTION.to_string(),
            is_no_selection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionNode {
    pub id: String,
    pub level: Level,
    pub topic: Topic,
    pub subject: Option<String>,
    pub attribute_dimension: Option<Dimension>,
    pub text: String,
    pub choice_mode: ChoiceMode,
    pub options: Vec<AnswerOption>,
    pub children: Vec<String>,
    pub max_instances: Option<u32>,
}

impl QuestionNode {
    pub fn option_values(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.value.as_str())
    }

    pub fn has_option(&self, value: &str) -> bool {
        self.options.iter().any(|o| o.value == value)
    }

    /// The value that stands for a negative answer: `no` on existence
    /// questions, the no-selection option on attribute questions.
    pub fn negative_value(&self) -> &str {
        match self.level {
            Level::L3 => NO_SELECTION,
            _ => NO,
        }
    }
}

pub fn l1_id(topic: &Topic) -> String {
    format!("L1/{}/{}", topic.class, topic.region_key())
}

pub fn l2_id(topic: &Topic, element: &str) -> String {
    format!("L2/{}/{}/{}", topic.class, topic.region_key(), element)
}

pub fn l3_id(topic: &Topic, element: &str, dimension: Dimension) -> String {
    format!(
        "L3/{}/{}/{}/{}",
        topic.class,
        topic.region_key(),
        element,
        dimension.label()
    )
}

/// Renders the fixed question phrasing for a node.
pub fn question_text(node: &QuestionNode) -> String {
    let region = node.topic.region.as_deref();
    match node.level {
        Level::L1 => match (node.topic.class, region) {
            (FindingClass::Object, _) | (_, None) => {
                format!("Are there any {}?", node.topic.class.plural())
            }
            (class, Some(r)) => format!("Are there any {} in the {}?", class.plural(), r),
        },
        Level::L2 => {
            let element = node.subject.as_deref().unwrap_or_default();
            match (node.topic.class, region) {
                (FindingClass::Object, _) | (_, None) => format!("Is there {element}?"),
                (_, Some(r)) => format!("Is there {element} in the {r}?"),
            }
        }
        Level::L3 => match node.attribute_dimension {
            Some(Dimension::Degree) => "What is the degree?".to_string(),
            Some(Dimension::Descriptive) => "What are the descriptive attributes?".to_string(),
            Some(Dimension::Positional) | None => "Where is it located?".to_string(),
        },
    }
}

/// A finding projected onto the template's axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifiedFinding {
    pub topic: Topic,
    pub element: String,
    /// Distinct values per dimension, indexed by `Dimension as usize`.
    pub values: [BTreeSet<String>; 3],
}

/// Maps a parsed finding onto topic, element and per-dimension values.
///
/// The first location of a non-anatomy element is its primary site, which the
/// topic already names; remaining locations join the positional dimension
/// together with positional attributes. An anatomy element is its own site,
/// so all of its locations are positional.
pub fn classify_finding(f: &FindingCode) -> ClassifiedFinding {
    let class = FindingClass::of_element(f.element.category)
        .expect("finding codes are headed by element categories");
    let region = match class {
        FindingClass::Object => None,
        _ => f.element.body_region.clone(),
    };
    let mut values: [BTreeSet<String>; 3] = Default::default();
    for attr in &f.attributes {
        let dim = match attr.category {
            Category::AttrDegree => Dimension::Degree,
            Category::AttrDescriptive => Dimension::Descriptive,
            _ => Dimension::Positional,
        };
        values[dim as usize].insert(attr.name.clone());
    }
    let skip = usize::from(class != FindingClass::AbnormalRegion);
    for loc in f.locations.iter().skip(skip) {
        values[Dimension::Positional as usize].insert(loc.name.clone());
    }
    ClassifiedFinding {
        topic: Topic { class, region },
        element: f.element.name.clone(),
        values,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("cannot build a template from an empty corpus")]
    EmptyCorpus,
    #[error("corpus does not match its vocabulary: {0}")]
    Vocabulary(#[from] CorpusError),
    #[error(
        "observed value `{value}` for `{node}` collides with the reserved no-selection option"
    )]
    ReservedValue { node: String, value: String },
    #[error("unsupported template format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("malformed template file: {0}")]
    Malformed(String),
    #[error("node key `{key}` does not match node id `{id}`")]
    KeyMismatch { key: String, id: String },
    #[error("`{parent}` lists child `{child}` which is not a node")]
    UnknownChild { parent: String, child: String },
    #[error("node `{0}` is not reachable from any root")]
    Orphan(String),
    #[error("node `{0}` is reachable along more than one path (cycle or shared child)")]
    Cycle(String),
    #[error("root list entry `{0}` is not an L1 node")]
    BadRoot(String),
    #[error("node `{id}`: {detail}")]
    Invalid { id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportTemplate {
    nodes: BTreeMap<String, QuestionNode>,
    l1_order: Vec<String>,
    vocab_fingerprint: String,
    format_version: u32,
    parent: HashMap<String, String>,
    preorder: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    format_version: u32,
    vocab_fingerprint: String,
    l1_order: Vec<String>,
    nodes: BTreeMap<String, QuestionNode>,
}

#[derive(Default)]
struct ElementAcc {
    values: [BTreeSet<String>; 3],
    multi: [bool; 3],
    max_instances: u32,
}

pub fn build_template(corpus: &Corpus) -> Result<ReportTemplate, TemplateError> {
    if corpus.records.is_empty() {
        return Err(TemplateError::EmptyCorpus);
    }
    corpus.validate()?;

    let mut topics: BTreeMap<Topic, BTreeMap<String, ElementAcc>> = BTreeMap::new();
    for record in &corpus.records {
        let mut per_record: BTreeMap<(Topic, String), u32> = BTreeMap::new();
        for finding in &record.findings {
            let c = classify_finding(finding);
            let acc = topics
                .entry(c.topic.clone())
                .or_default()
                .entry(c.element.clone())
                .or_default();
            for dim in Dimension::ALL {
                let vals = &c.values[dim as usize];
                if vals.len() >= 2 {
                    acc.multi[dim as usize] = true;
                }
                acc.values[dim as usize].extend(vals.iter().cloned());
            }
            *per_record.entry((c.topic, c.element)).or_default() += 1;
        }
        for ((topic, element), n) in per_record {
            let acc = topics
                .get_mut(&topic)
                .and_then(|t| t.get_mut(&element))
                .expect("accumulated above");
            acc.max_instances = acc.max_instances.max(n);
        }
    }

    let mut nodes = BTreeMap::new();
    let mut l1_order = Vec::new();
    for (topic, elements) in &topics {
        let l1 = l1_id(topic);
        let mut l2_children = Vec::new();
        for (element, acc) in elements {
            let l2 = l2_id(topic, element);
            let mut l3_children = Vec::new();
            for dim in Dimension::ALL {
                let vals = &acc.values[dim as usize];
                if vals.is_empty() {
                    continue;
                }
                let id = l3_id(topic, element, dim);
                if vals.contains(NO_SELECTION) {
                    return Err(TemplateError::ReservedValue {
                        node: id,
                        value: NO_SELECTION.into(),
                    });
                }
                let mut options: Vec<AnswerOption> =
                    vals.iter().map(|v| AnswerOption::plain(v)).collect();
                options.push(AnswerOption::no_selection());
                let choice_mode = if acc.multi[dim as usize] {
                    ChoiceMode::Multi
                } else {
                    ChoiceMode::Single
                };
                insert_node(
                    &mut nodes,
                    QuestionNode {
                        id: id.clone(),
                        level: Level::L3,
                        topic: topic.clone(),
                        subject: Some(element.clone()),
                        attribute_dimension: Some(dim),
                        text: String::new(),
                        choice_mode,
                        options,
                        children: Vec::new(),
                        max_instances: None,
                    },
                );
                l3_children.push(id);
            }
            insert_node(
                &mut nodes,
                QuestionNode {
                    id: l2.clone(),
                    level: Level::L2,
                    topic: topic.clone(),
                    subject: Some(element.clone()),
                    attribute_dimension: None,
                    text: String::new(),
                    choice_mode: ChoiceMode::Single,
                    options: binary_options(),
                    children: l3_children,
                    max_instances: Some(acc.max_instances.max(1)),
                },
            );
            l2_children.push(l2);
        }
        insert_node(
            &mut nodes,
            QuestionNode {
                id: l1.clone(),
                level: Level::L1,
                topic: topic.clone(),
                subject: None,
                attribute_dimension: None,
                text: String::new(),
                choice_mode: ChoiceMode::Single,
                options: binary_options(),
                children: l2_children,
                max_instances: None,
            },
        );
        l1_order.push(l1);
    }

    ReportTemplate::from_parts(
        nodes,
        l1_order,
        corpus.vocabulary.fingerprint(),
        FORMAT_VERSION,
    )
}

fn insert_node(nodes: &mut BTreeMap<String, QuestionNode>, mut node: QuestionNode) {
    node.text = question_text(&node);
    nodes.insert(node.id.clone(), node);
}

fn binary_options() -> Vec<AnswerOption> {
    vec![AnswerOption::plain(YES), AnswerOption::plain(NO)]
}

impl ReportTemplate {
    /// Assembles and validates a template from its stored parts.
    pub fn from_parts(
        nodes: BTreeMap<String, QuestionNode>,
        l1_order: Vec<String>,
        vocab_fingerprint: String,
        format_version: u32,
    ) -> Result<Self, TemplateError> {
        if format_version != FORMAT_VERSION {
            return Err(TemplateError::Version {
                found: format_version.into(),
            });
        }
        for (key, node) in &nodes {
            if key != &node.id {
                return Err(TemplateError::KeyMismatch {
                    key: key.clone(),
                    id: node.id.clone(),
                });
            }
            validate_node(node)?;
            for child in &node.children {
                if !nodes.contains_key(child) {
                    return Err(TemplateError::UnknownChild {
                        parent: node.id.clone(),
                        child: child.clone(),
                    });
                }
            }
        }

        let mut parent = HashMap::new();
        let mut preorder = Vec::with_capacity(nodes.len());
        let mut stack: Vec<&str> = l1_order.iter().rev().map(String::as_str).collect();
        for root in &l1_order {
            match nodes.get(root) {
                Some(n) if n.level == Level::L1 => {}
                _ => return Err(TemplateError::BadRoot(root.clone())),
            }
        }
        let mut visited = BTreeSet::new();
        while let Some(id) = stack.pop() {
            if !visited.insert(id) {
                return Err(TemplateError::Cycle(id.to_string()));
            }
            preorder.push(id.to_string());
            let node = &nodes[id];
            for child in node.children.iter().rev() {
                let c = &nodes[child];
                let expected = match node.level {
                    Level::L1 => Level::L2,
                    _ => Level::L3,
                };
                if node.level == Level::L3 || c.level != expected {
                    return Err(TemplateError::Invalid {
                        id: node.id.clone(),
                        detail: format!("child `{child}` has level {}", c.level),
                    });
                }
                let same_branch =
                    c.topic == node.topic && (node.level == Level::L1 || c.subject == node.subject);
                if !same_branch {
                    return Err(TemplateError::Invalid {
                        id: node.id.clone(),
                        detail: format!("child `{child}` belongs to a different branch"),
                    });
                }
                parent.insert(child.clone(), node.id.clone());
                stack.push(child);
            }
        }
        if let Some(orphan) = nodes.keys().find(|k| !visited.contains(k.as_str())) {
            return Err(TemplateError::Orphan(orphan.clone()));
        }

        Ok(ReportTemplate {
            nodes,
            l1_order,
            vocab_fingerprint,
            format_version,
            parent,
            preorder,
        })
    }

    pub fn node(&self, id: &str) -> Option<&QuestionNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> &BTreeMap<String, QuestionNode> {
        &self.nodes
    }

    pub fn l1_order(&self) -> &[String] {
        &self.l1_order
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.parent.get(id).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes in canonical order: each L1 followed by its L2 nodes, each L2
    /// followed by its L3 nodes.
    pub fn canonical_nodes(&self) -> impl Iterator<Item = &QuestionNode> {
        self.preorder.iter().map(|id| &self.nodes[id])
    }

    /// Position of a node in canonical order.
    pub fn canonical_index(&self) -> HashMap<&str, usize> {
        self.preorder
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn nodes_at(&self, level: Level) -> impl Iterator<Item = &QuestionNode> {
        self.canonical_nodes().filter(move |n| n.level == level)
    }

    /// Every option value used anywhere in the template, sorted.
    pub fn answer_vocabulary(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .nodes
            .values()
            .flat_map(|n| n.option_values())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    /// Canonical bytes: sorted keys, fixed ordering, trailing newline.
    pub fn serialize(&self) -> Vec<u8> {
        let file = TemplateFile {
            format_version: self.format_version,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            l1_order: self.l1_order.clone(),
            nodes: self.nodes.clone(),
        };
        let value = serde_json::to_value(&file).expect("template is always serializable");
        let mut bytes = serde_json::to_vec_pretty(&value).expect("json value serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, TemplateError> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| TemplateError::Malformed(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| TemplateError::Malformed("missing format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(TemplateError::Version { found: version });
        }
        let file: TemplateFile =
            serde_json::from_value(value).map_err(|e| TemplateError::Malformed(e.to_string()))?;
        Self::from_parts(
            file.nodes,
            file.l1_order,
            file.vocab_fingerprint,
            file.format_version,
        )
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.serialize()))
    }
}

fn validate_node(node: &QuestionNode) -> Result<(), TemplateError> {
    let invalid = |detail: &str| TemplateError::Invalid {
        id: node.id.clone(),
        detail: detail.to_string(),
    };
    let values: Vec<&str> = node.option_values().collect();
    let distinct: BTreeSet<&str> = values.iter().copied().collect();
    if distinct.len() != values.len() || values.iter().any(|v| v.is_empty()) {
        return Err(invalid("options must be distinct and non-empty"));
    }
    match node.level {
        Level::L1 | Level::L2 => {
            if node.options != binary_options() || node.choice_mode != ChoiceMode::Single {
                return Err(invalid(
                    "existence questions take exactly [yes, no], single-choice",
                ));
            }
            if node.attribute_dimension.is_some() {
                return Err(invalid("existence questions have no attribute dimension"));
            }
        }
        Level::L3 => {
            let no_sel = node.options.iter().filter(|o| o.is_no_selection).count();
            let last_is_no_sel = node
                .options
                .last()
                .is_some_and(|o| o.is_no_selection && o.value == NO_SELECTION);
            if no_sel != 1 || !last_is_no_sel || node.options.len() < 2 {
                return Err(invalid(
                    "attribute questions need observed options plus a final no-selection option",
                ));
            }
            if node.attribute_dimension.is_none() || !node.children.is_empty() {
                return Err(invalid(
                    "attribute questions need a dimension and no children",
                ));
            }
        }
    }
    match (node.level, node.max_instances) {
        (Level::L2, Some(n)) if n >= 1 => {}
        (Level::L2, _) => return Err(invalid("L2 nodes need max_instances >= 1")),
        (_, Some(_)) => return Err(invalid("only L2 nodes carry max_instances")),
        _ => {}
    }
    match (node.level, &node.subject) {
        (Level::L1, None) | (Level::L2 | Level::L3, Some(_)) => Ok(()),
        _ => Err(invalid("subject must be set exactly on L2/L3 nodes")),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub questions: usize,
    pub unique_answers: usize,
    pub paths: usize,
    pub mean_options: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateStats {
    /// Indexed by `Level::index()`.
    pub levels: [LevelStats; 3],
    pub l2_topics: BTreeMap<FindingClass, usize>,
}

impl TemplateStats {
    pub fn level(&self, level: Level) -> &LevelStats {
        &self.levels[level.index()]
    }

    pub fn total_paths(&self) -> usize {
        self.levels.iter().map(|l| l.paths).sum()
    }
}

pub fn template_stats(t: &ReportTemplate) -> TemplateStats {
    let mut stats = TemplateStats::default();
    for level in Level::ALL {
        let mut answers = BTreeSet::new();
        let s = &mut stats.levels[level.index()];
        for node in t.nodes_at(level) {
            s.questions += 1;
            s.paths += node.options.len();
            answers.extend(node.option_values());
            if level == Level::L2 {
                *stats.l2_topics.entry(node.topic.class).or_default() += 1;
            }
        }
        s.unique_answers = answers.len();
        if s.questions > 0 {
            s.mean_options = s.paths as f64 / s.questions as f64;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Vocabulary;

    const VOCAB: &str = "\
infiltrate,disease,respiratory system
pneumonia,disease,respiratory system
opacity,sign,respiratory system
lung,anatomy,respiratory system
upper lobe,anatomy,respiratory system
spine,anatomy,skeletal system
left,attr_positional,
right,attr_positional,
patchy,attr_descriptive,
mild,attr_degree,
severe,attr_degree,
catheter,object,
";

    fn corpus(text: &str) -> Corpus {
        Corpus::parse(text, Vocabulary::parse(VOCAB).unwrap()).unwrap()
    }

    #[test]
    fn single_example_code() {
        let t = build_template(&corpus(
            "p1 | a | infiltrate/lung/upper lobe/left/patchy/mild\n",
        ))
        .unwrap();
        let stats = template_stats(&t);
        assert_eq!(stats.level(Level::L1).questions, 1);
        assert_eq!(stats.level(Level::L2).questions, 1);
        assert_eq!(stats.level(Level::L3).questions, 3);

        let l2 = t.node("L2/disease/respiratory system/infiltrate").unwrap();
        assert_eq!(l2.max_instances, Some(1));
        assert_eq!(
            l2.children,
            [
                "L3/disease/respiratory system/infiltrate/degree",
                "L3/disease/respiratory system/infiltrate/descriptive",
                "L3/disease/respiratory system/infiltrate/positional",
            ]
        );
        let values = |id: &str| {
            t.node(id)
                .unwrap()
                .option_values()
                .map(String::from)
                .collect::<Vec<_>>()
        };
        assert_eq!(values(&l2.children[0]), ["mild", NO_SELECTION]);
        assert_eq!(values(&l2.children[1]), ["patchy", NO_SELECTION]);
        // two co-occurring positional values make the question multi-choice
        assert_eq!(
            values(&l2.children[2]),
            ["left", "upper lobe", NO_SELECTION]
        );
        assert_eq!(
            t.node(&l2.children[0]).unwrap().choice_mode,
            ChoiceMode::Single
        );
        assert_eq!(
            t.node(&l2.children[2]).unwrap().choice_mode,
            ChoiceMode::Multi
        );
    }

    #[test]
    fn single_positional_value_stays_single_choice() {
        let t = build_template(&corpus("p1 | a | infiltrate/lung/left/patchy/mild\n")).unwrap();
        for n in t.nodes_at(Level::L3) {
            assert_eq!(n.choice_mode, ChoiceMode::Single, "{}", n.id);
        }
    }

    #[test]
    fn all_normal_corpus_gives_empty_template() {
        let t = build_template(&corpus("p1 | a | normal\np2 | b | normal\n")).unwrap();
        assert!(t.is_empty());
        let stats = template_stats(&t);
        assert_eq!(stats, TemplateStats::default());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(build_template(&corpus("")), Err(TemplateError::EmptyCorpus));
    }

    #[test]
    fn instances_and_choice_modes() {
        let t = build_template(&corpus(
            "p1 | a | opacity/lung/mild;opacity/lung/severe\n\
             p2 | b | opacity/lung/upper lobe/left\n",
        ))
        .unwrap();
        let l2 = t.node("L2/sign/respiratory system/opacity").unwrap();
        assert_eq!(l2.max_instances, Some(2));
        let degree = t.node("L3/sign/respiratory system/opacity/degree").unwrap();
        assert_eq!(degree.choice_mode, ChoiceMode::Single);
        assert_eq!(degree.options.len(), 3);
        let pos = t
            .node("L3/sign/respiratory system/opacity/positional")
            .unwrap();
        assert_eq!(pos.choice_mode, ChoiceMode::Multi);
    }

    #[test]
    fn question_phrasing() {
        let t = build_template(&corpus(
            "p1 | a | pneumonia/lung/mild;catheter;spine/left\n",
        ))
        .unwrap();
        let text = |id: &str| t.node(id).unwrap().text.clone();
        assert_eq!(
            text("L2/disease/respiratory system/pneumonia"),
            "Is there pneumonia in the respiratory system?"
        );
        assert_eq!(
            text("L1/disease/respiratory system"),
            "Are there any diseases in the respiratory system?"
        );
        assert_eq!(text("L1/object/-"), "Are there any foreign objects?");
        assert_eq!(text("L2/object/-/catheter"), "Is there catheter?");
        assert_eq!(
            text("L1/abnormal_region/skeletal system"),
            "Are there any abnormal regions in the skeletal system?"
        );
        assert_eq!(
            text("L3/disease/respiratory system/pneumonia/degree"),
            "What is the degree?"
        );
        // an anatomy element keeps all of its locations as positional values
        assert!(t
            .node("L3/abnormal_region/skeletal system/spine/positional")
            .unwrap()
            .has_option("left"));
    }

    #[test]
    fn canonical_ordering() {
        let t = build_template(&corpus(
            "p1 | a | pneumonia/lung;infiltrate/lung/mild;catheter;opacity/lung\n",
        ))
        .unwrap();
        assert_eq!(
            t.l1_order(),
            [
                "L1/disease/respiratory system",
                "L1/object/-",
                "L1/sign/respiratory system"
            ]
        );
        let order: Vec<&str> = t.canonical_nodes().map(|n| n.id.as_str()).collect();
        assert_eq!(
            order,
            [
                "L1/disease/respiratory system",
                "L2/disease/respiratory system/infiltrate",
                "L3/disease/respiratory system/infiltrate/degree",
                "L2/disease/respiratory system/pneumonia",
                "L1/object/-",
                "L2/object/-/catheter",
                "L1/sign/respiratory system",
                "L2/sign/respiratory system/opacity",
            ]
        );
    }

    #[test]
    fn serialization_is_canonical() {
        let c = corpus("p1 | a | infiltrate/lung/upper lobe/left/patchy/mild;catheter\n");
        let t = build_template(&c).unwrap();
        let bytes = t.serialize();
        let back = ReportTemplate::deserialize(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.serialize(), bytes);
        assert_eq!(build_template(&c).unwrap().serialize(), bytes);
    }

    #[test]
    fn orphan_child_is_named() {
        let c = corpus("p1 | a | infiltrate/lung/mild\n");
        let text = String::from_utf8(build_template(&c).unwrap().serialize()).unwrap();
        let edited = text.replace(
            "\"L3/disease/respiratory system/infiltrate/degree\"\n",
            "\"L3/disease/respiratory system/infiltrate/degree\",\n\"L3/ghost\"\n",
        );
        assert_ne!(edited, text);
        let err = ReportTemplate::deserialize(edited.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("L3/ghost"), "{err}");
    }

    #[test]
    fn unreachable_node_is_an_orphan() {
        let c = corpus("p1 | a | infiltrate/lung/mild\n");
        let t = build_template(&c).unwrap();
        let mut nodes = t.nodes().clone();
        nodes
            .get_mut("L2/disease/respiratory system/infiltrate")
            .unwrap()
            .children
            .clear();
        let err =
            ReportTemplate::from_parts(nodes, t.l1_order().to_vec(), String::new(), 1).unwrap_err();
        assert_eq!(
            err,
            TemplateError::Orphan("L3/disease/respiratory system/infiltrate/degree".into())
        );
    }

    #[test]
    fn version_mismatch() {
        let c = corpus("p1 | a | catheter\n");
        let text = String::from_utf8(build_template(&c).unwrap().serialize()).unwrap();
        let edited = text.replace("\"format_version\": 1", "\"format_version\": 9");
        assert_eq!(
            ReportTemplate::deserialize(edited.as_bytes()),
            Err(TemplateError::Version { found: 9 })
        );
    }

    #[test]
    fn reserved_value_collision() {
        let vocab = format!("{VOCAB}no selection,attr_descriptive,\n");
        let c = Corpus::parse(
            "p1 | a | opacity/lung/no selection\n",
            Vocabulary::parse(&vocab).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            build_template(&c),
            Err(TemplateError::ReservedValue { .. })
        ));
    }

    #[test]
    fn stats_identities() {
        let t = build_template(&corpus(
            "p1 | a | infiltrate/lung/upper lobe/left/patchy/mild;catheter\n\
             p2 | b | opacity/lung/severe;pneumonia/lung/right\n",
        ))
        .unwrap();
        let s = template_stats(&t);
        assert_eq!(s.level(Level::L1).paths, 2 * s.level(Level::L1).questions);
        assert_eq!(s.level(Level::L2).paths, 2 * s.level(Level::L2).questions);
        assert_eq!(s.level(Level::L1).unique_answers, 2);
        assert_eq!(
            s.l2_topics.values().sum::<usize>(),
            s.level(Level::L2).questions
        );
        let l3_paths: usize = t.nodes_at(Level::L3).map(|n| n.options.len()).sum();
        assert_eq!(s.level(Level::L3).paths, l3_paths);
    }
}
