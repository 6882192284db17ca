//! Structured reports, metric paths, hierarchical consistency and
//! patient-grouped dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Corpus, PatientRecord};
use crate::template::{
    classify_finding, l2_id, ChoiceMode, Level, ReportTemplate, NO, NO_SELECTION, YES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn as_str(self) -> &'static str {
        match self {
            YesNo::Yes => YES,
            YesNo::No => NO,
        }
    }

    pub fn from_bool(b: bool) -> Self {
        if b {
            YesNo::Yes
        } else {
            YesNo::No
        }
    }
}

/// One occurrence of an element together with its attribute answers, keyed
/// by L3 node id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingInstance {
    pub l2_node: String,
    pub instance_index: u32,
    pub attribute_answers: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub patient_id: String,
    pub image_ref: String,
    pub l1_answers: BTreeMap<String, YesNo>,
    pub instances: Vec<FindingInstance>,
}

impl StructuredReport {
    /// A report answering every L1 question with `no`.
    pub fn all_negative(t: &ReportTemplate, patient_id: &str, image_ref: &str) -> Self {
        StructuredReport {
            patient_id: patient_id.to_string(),
            image_ref: image_ref.to_string(),
            l1_answers: t
                .l1_order()
                .iter()
                .map(|id| (id.clone(), YesNo::No))
                .collect(),
            instances: Vec::new(),
        }
    }

    /// Sorts instances by (L2 node id, instance index).
    pub fn canonicalize(&mut self) {
        self.instances
            .sort_by(|a, b| (&a.l2_node, a.instance_index).cmp(&(&b.l2_node, b.instance_index)));
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.patient_id, &self.image_ref)
    }

    pub fn instances_of<'a>(&'a self, l2: &'a str) -> impl Iterator<Item = &'a FindingInstance> {
        self.instances.iter().filter(move |i| i.l2_node == l2)
    }
}

/// A position in the report combined with one answer option.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Path {
    pub node_id: String,
    pub answer_value: String,
}

impl Path {
    pub fn new(node_id: impl Into<String>, answer_value: impl Into<String>) -> Self {
        Path {
            node_id: node_id.into(),
            answer_value: answer_value.into(),
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.node_id, self.answer_value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MissingL1Answer { l1: String },
    UnknownL1 { node: String },
    UnknownInstanceNode { node: String },
    PositiveUnderNegative { l1: String, l2: String },
    DuplicateInstance { l2: String, index: u32 },
    InstanceOutOfRange { l2: String, index: u32, max: u32 },
    InstanceGap { l2: String, index: u32 },
    UnknownAttribute { l2: String, node: String },
    MissingAttribute { l2: String, node: String },
    InvalidValue { node: String, value: String },
    EmptySelection { node: String },
    MultipleOnSingle { node: String },
    NoSelectionMixed { node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            MissingL1Answer { l1 } => write!(f, "{l1}: no answer"),
            UnknownL1 { node } => write!(f, "{node}: answered as L1 but is not an L1 node"),
            UnknownInstanceNode { node } => write!(f, "{node}: instance of a non-L2 node"),
            PositiveUnderNegative { l1, l2 } => {
                write!(f, "{l2}: instance present while {l1} is answered no")
            }
            DuplicateInstance { l2, index } => write!(f, "{l2}: duplicate instance {index}"),
            InstanceOutOfRange { l2, index, max } => {
                write!(f, "{l2}: instance {index} exceeds max_instances {max}")
            }
            InstanceGap { l2, index } => {
                write!(f, "{l2}: instance {index} present without its predecessor")
            }
            UnknownAttribute { l2, node } => {
                write!(f, "{l2}: `{node}` is not one of its attributes")
            }
            MissingAttribute { l2, node } => write!(f, "{l2}: attribute {node} unanswered"),
            InvalidValue { node, value } => write!(f, "{node}: `{value}` is not an option"),
            EmptySelection { node } => write!(f, "{node}: empty selection"),
            MultipleOnSingle { node } => {
                write!(f, "{node}: several values on a single-choice question")
            }
            NoSelectionMixed { node } => write!(f, "{node}: no selection combined with values"),
        }
    }
}

impl Violation {
    /// Node ids named by the violation.
    pub fn nodes(&self) -> Vec<&str> {
        use Violation::*;
        match self {
            PositiveUnderNegative { l1, l2 } => vec![l1, l2],
            UnknownAttribute { l2, node } | MissingAttribute { l2, node } => vec![l2, node],
            MissingL1Answer { l1 } => vec![l1],
            DuplicateInstance { l2, .. }
            | InstanceOutOfRange { l2, .. }
            | InstanceGap { l2, .. } => vec![l2],
            UnknownL1 { node }
            | UnknownInstanceNode { node }
            | InvalidValue { node, .. }
            | EmptySelection { node }
            | MultipleOnSingle { node }
            | NoSelectionMixed { node } => vec![node],
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("patient `{patient_id}` has no image `{image_ref}`")]
    UnknownImage {
        patient_id: String,
        image_ref: String,
    },
    #[error("patient `{patient_id}`: finding `{code}` has no question `{node}` in the template")]
    MissingNode {
        patient_id: String,
        code: String,
        node: String,
    },
    #[error("patient `{patient_id}`: finding `{code}` needs option `{value}` which `{node}` does not offer")]
    MissingOption {
        patient_id: String,
        code: String,
        node: String,
        value: String,
    },
    #[error(
        "patient `{patient_id}`: finding `{code}` selects several values on single-choice `{node}`"
    )]
    SingleChoiceOverflow {
        patient_id: String,
        code: String,
        node: String,
    },
    #[error("patient `{patient_id}`: more than {max} instances of `{node}`")]
    TooManyInstances {
        patient_id: String,
        node: String,
        max: u32,
    },
    #[error("inconsistent report for `{patient_id}`/`{image_ref}`: {}", violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Inconsistent {
        patient_id: String,
        image_ref: String,
        violations: Vec<Violation>,
    },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub fn populate_gold_report(
    t: &ReportTemplate,
    rec: &PatientRecord,
    image_ref: &str,
) -> Result<StructuredReport, ReportError> {
    if !rec.image_refs.iter().any(|i| i == image_ref) {
        return Err(ReportError::UnknownImage {
            patient_id: rec.patient_id.clone(),
            image_ref: image_ref.to_string(),
        });
    }
    let mut report = StructuredReport::all_negative(t, &rec.patient_id, image_ref);
    let mut counts: HashMap<String, u32> = HashMap::new();
    for finding in &rec.findings {
        let c = classify_finding(finding);
        let l2 = l2_id(&c.topic, &c.element);
        let missing = |node: &str| ReportError::MissingNode {
            patient_id: rec.patient_id.clone(),
            code: finding.raw.clone(),
            node: node.to_string(),
        };
        let l2_node = t.node(&l2).ok_or_else(|| missing(&l2))?;
        let l1 = t.parent(&l2).ok_or_else(|| missing(&l2))?;
        report.l1_answers.insert(l1.to_string(), YesNo::Yes);

        let index = counts.entry(l2.clone()).or_default();
        let max = l2_node.max_instances.unwrap_or(1);
        if *index >= max {
            return Err(ReportError::TooManyInstances {
                patient_id: rec.patient_id.clone(),
                node: l2,
                max,
            });
        }

        let mut attribute_answers = BTreeMap::new();
        let mut covered = [false; 3];
        for child in &l2_node.children {
            let node = t.node(child).ok_or_else(|| missing(child))?;
            let dim = node
                .attribute_dimension
                .expect("L3 nodes carry a dimension");
            covered[dim as usize] = true;
            let values = &c.values[dim as usize];
            for v in values {
                if !node.has_option(v) {
                    return Err(ReportError::MissingOption {
                        patient_id: rec.patient_id.clone(),
                        code: finding.raw.clone(),
                        node: child.clone(),
                        value: v.clone(),
                    });
                }
            }
            if node.choice_mode == ChoiceMode::Single && values.len() > 1 {
                return Err(ReportError::SingleChoiceOverflow {
                    patient_id: rec.patient_id.clone(),
                    code: finding.raw.clone(),
                    node: child.clone(),
                });
            }
            let selection = if values.is_empty() {
                BTreeSet::from([NO_SELECTION.to_string()])
            } else {
                values.clone()
            };
            attribute_answers.insert(child.clone(), selection);
        }
        // a value in a dimension the template never asks about
        if let Some((vals, _)) = c
            .values
            .iter()
            .zip(covered)
            .find(|(v, asked)| !asked && !v.is_empty())
        {
            return Err(ReportError::MissingOption {
                patient_id: rec.patient_id.clone(),
                code: finding.raw.clone(),
                node: l2.clone(),
                value: vals.iter().next().cloned().unwrap_or_default(),
            });
        }
        report.instances.push(FindingInstance {
            l2_node: l2,
            instance_index: *index,
            attribute_answers,
        });
        *index += 1;
    }
    report.canonicalize();
    Ok(report)
}

/// Gold reports for every image of every record, in corpus order.
pub fn populate_gold_reports(
    t: &ReportTemplate,
    corpus: &Corpus,
) -> Result<Vec<StructuredReport>, ReportError> {
    let mut out = Vec::new();
    for rec in &corpus.records {
        for image in &rec.image_refs {
            out.push(populate_gold_report(t, rec, image)?);
        }
    }
    Ok(out)
}

/// Every (node, option) pair in canonical node order, then option order.
pub fn enumerate_paths(t: &ReportTemplate) -> Vec<Path> {
    t.canonical_nodes()
        .flat_map(|n| n.option_values().map(|v| Path::new(&n.id, v)))
        .collect()
}

/// The folded set of answered paths of a consistent report.
pub fn positive_paths(
    r: &StructuredReport,
    t: &ReportTemplate,
) -> Result<BTreeSet<Path>, ReportError> {
    let violations = check_consistency(r, t);
    if !violations.is_empty() {
        return Err(ReportError::Inconsistent {
            patient_id: r.patient_id.clone(),
            image_ref: r.image_ref.clone(),
            violations,
        });
    }
    Ok(fold_paths(r, t))
}

/// Path folding without the consistency pre-check.
pub(crate) fn fold_paths(r: &StructuredReport, t: &ReportTemplate) -> BTreeSet<Path> {
    let mut by_l3: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    let mut present: BTreeSet<&str> = BTreeSet::new();
    for inst in &r.instances {
        present.insert(&inst.l2_node);
        for (node, values) in &inst.attribute_answers {
            by_l3
                .entry(node)
                .or_default()
                .extend(values.iter().map(String::as_str));
        }
    }
    let mut paths = BTreeSet::new();
    for node in t.canonical_nodes() {
        match node.level {
            Level::L1 => {
                let answer = r.l1_answers.get(&node.id).copied().unwrap_or(YesNo::No);
                paths.insert(Path::new(&node.id, answer.as_str()));
            }
            Level::L2 => {
                let answer = YesNo::from_bool(present.contains(node.id.as_str()));
                paths.insert(Path::new(&node.id, answer.as_str()));
            }
            Level::L3 => match by_l3.get(node.id.as_str()) {
                Some(values) if !values.is_empty() => {
                    paths.extend(values.iter().map(|v| Path::new(&node.id, *v)));
                }
                _ => {
                    paths.insert(Path::new(&node.id, NO_SELECTION));
                }
            },
        }
    }
    paths
}

pub fn check_consistency(r: &StructuredReport, t: &ReportTemplate) -> Vec<Violation> {
    let mut out = Vec::new();
    for l1 in t.l1_order() {
        if !r.l1_answers.contains_key(l1) {
            out.push(Violation::MissingL1Answer { l1: l1.clone() });
        }
    }
    for node in r.l1_answers.keys() {
        if t.node(node).map(|n| n.level) != Some(Level::L1) {
            out.push(Violation::UnknownL1 { node: node.clone() });
        }
    }

    let mut indices: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for inst in &r.instances {
        let l2 = &inst.l2_node;
        let Some(node) = t.node(l2).filter(|n| n.level == Level::L2) else {
            out.push(Violation::UnknownInstanceNode { node: l2.clone() });
            continue;
        };
        if let Some(l1) = t.parent(l2) {
            if r.l1_answers.get(l1) == Some(&YesNo::No) {
                out.push(Violation::PositiveUnderNegative {
                    l1: l1.to_string(),
                    l2: l2.clone(),
                });
            }
        }
        let max = node.max_instances.unwrap_or(1);
        if inst.instance_index >= max {
            out.push(Violation::InstanceOutOfRange {
                l2: l2.clone(),
                index: inst.instance_index,
                max,
            });
        }
        if !indices.entry(l2).or_default().insert(inst.instance_index) {
            out.push(Violation::DuplicateInstance {
                l2: l2.clone(),
                index: inst.instance_index,
            });
        }
        for child in &node.children {
            if !inst.attribute_answers.contains_key(child) {
                out.push(Violation::MissingAttribute {
                    l2: l2.clone(),
                    node: child.clone(),
                });
            }
        }
        for (key, values) in &inst.attribute_answers {
            let Some(l3) = t.node(key).filter(|_| node.children.contains(key)) else {
                out.push(Violation::UnknownAttribute {
                    l2: l2.clone(),
                    node: key.clone(),
                });
                continue;
            };
            if values.is_empty() {
                out.push(Violation::EmptySelection { node: key.clone() });
            }
            for v in values {
                if !l3.has_option(v) {
                    out.push(Violation::InvalidValue {
                        node: key.clone(),
                        value: v.clone(),
                    });
                }
            }
            if l3.choice_mode == ChoiceMode::Single && values.len() > 1 {
                out.push(Violation::MultipleOnSingle { node: key.clone() });
            }
            if values.len() > 1 && values.contains(NO_SELECTION) {
                out.push(Violation::NoSelectionMixed { node: key.clone() });
            }
        }
    }
    for (l2, set) in indices {
        for &i in &set {
            if i > 0 && !set.contains(&(i - 1)) {
                out.push(Violation::InstanceGap {
                    l2: l2.to_string(),
                    index: i,
                });
            }
        }
    }
    out
}

/// One JSON object per line, keys sorted.
pub fn render_reports(reports: &[StructuredReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let value = serde_json::to_value(r).expect("reports serialize");
        out.push_str(&serde_json::to_string(&value).expect("json value serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_reports(text: &str) -> Result<Vec<StructuredReport>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Parse {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.label() == s.trim())
            .ok_or_else(|| format!("unknown split `{}`", s.trim()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("{patients} patient(s) cannot fill {splits} non-empty split(s)")]
    TooFewPatients { patients: usize, splits: usize },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Patient → split. Images inherit their patient's split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.assignment.get(patient_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    pub fn render(&self) -> String {
        self.assignment
            .iter()
            .map(|(p, s)| format!("{p},{s}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, SplitError> {
        let mut assignment = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |detail: String| SplitError::Parse {
                line: i + 1,
                detail,
            };
            let (patient, split) = line
                .rsplit_once(',')
                .ok_or_else(|| parse_err("expected `patient_id,split`".into()))?;
            let split = split.parse().map_err(parse_err)?;
            if assignment
                .insert(patient.trim().to_string(), split)
                .is_some()
            {
                return Err(parse_err(format!("duplicate patient `{}`", patient.trim())));
            }
        }
        Ok(SplitAssignment { assignment })
    }
}

/// Largest-remainder allocation of `n` items to the given ratios, then every
/// positive-ratio bucket is topped up to one item from the largest bucket.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let targets = ratios.map(|r| r * n as f64);
    let mut counts = targets.map(|t| t.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - counts[a] as f64;
        let rb = targets[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

pub fn make_splits(
    corpus: &Corpus,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(ratios));
    }
    let mut patients: Vec<&str> = corpus.patient_ids().into_iter().collect();
    let splits = ratios.iter().filter(|&&r| r > 0.0).count();
    if patients.len() < splits.max(1) {
        return Err(SplitError::TooFewPatients {
            patients: patients.len(),
            splits,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let counts = allocate(patients.len(), ratios);
    let mut assignment = BTreeMap::new();
    let mut it = patients.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for p in it.by_ref().take(n) {
            assignment.insert(p.to_string(), split);
        }
    }
    Ok(SplitAssignment { assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Vocabulary;
    use crate::template::build_template;

    const VOCAB: &str = "\
infiltrate,disease,respiratory system
opacity,sign,respiratory system
lung,anatomy,respiratory system
upper lobe,anatomy,respiratory system
left,attr_positional,
patchy,attr_descriptive,
mild,attr_degree,
severe,attr_degree,
catheter,object,
";

    fn corpus(text: &str) -> Corpus {
        Corpus::parse(text, Vocabulary::parse(VOCAB).unwrap()).unwrap()
    }

    const CORPUS: &str = "\
p1 | a1 | infiltrate/lung/upper lobe/left/patchy/mild
p2 | b1,b2 | opacity/lung/mild;opacity/lung/severe;catheter
p3 | c1 | normal
";

    #[test]
    fn normal_record_is_all_negative() {
        let c = corpus(CORPUS);
        let t = build_template(&c).unwrap();
        let r = populate_gold_report(&t, &c.records[2], "c1").unwrap();
        assert!(r.instances.is_empty());
        assert!(r.l1_answers.values().all(|&a| a == YesNo::No));
        assert_eq!(r.l1_answers.len(), t.l1_order().len());
        assert_eq!(fold_paths(&r, &t).len(), t.len());
    }

    #[test]
    fn example_code_report() {
        let c = corpus(CORPUS);
        let t = build_template(&c).unwrap();
        let r = populate_gold_report(&t, &c.records[0], "a1").unwrap();
        assert_eq!(r.instances.len(), 1);
        let a = &r.instances[0].attribute_answers;
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(
            a["L3/disease/respiratory system/infiltrate/degree"],
            set(&["mild"])
        );
        assert_eq!(
            a["L3/disease/respiratory system/infiltrate/descriptive"],
            set(&["patchy"])
        );
        assert_eq!(
            a["L3/disease/respiratory system/infiltrate/positional"],
            set(&["left", "upper lobe"])
        );
        let paths = positive_paths(&r, &t).unwrap();
        let degree = "L3/disease/respiratory system/infiltrate/degree";
        assert!(paths.contains(&Path::new(degree, "mild")));
        assert!(!paths.contains(&Path::new(degree, NO_SELECTION)));
    }

    #[test]
    fn repeated_elements_become_indexed_instances() {
        let c = corpus(CORPUS);
        let t = build_template(&c).unwrap();
        let r = populate_gold_report(&t, &c.records[1], "b2").unwrap();
        let idx: Vec<u32> = r
            .instances_of("L2/sign/respiratory system/opacity")
            .map(|i| i.instance_index)
            .collect();
        assert_eq!(idx, [0, 1]);
        assert!(check_consistency(&r, &t).is_empty());
        assert!(matches!(
            populate_gold_report(&t, &c.records[1], "zz"),
            Err(ReportError::UnknownImage { .. })
        ));
    }

    #[test]
    fn template_mismatch_is_an_error() {
        let t = build_template(&corpus("p1 | a | opacity/lung/mild\n")).unwrap();
        let other = corpus("p9 | z | opacity/lung/severe\n");
        assert!(matches!(
            populate_gold_report(&t, &other.records[0], "z"),
            Err(ReportError::MissingOption { .. })
        ));
        let other = corpus("p9 | z | catheter\n");
        assert!(matches!(
            populate_gold_report(&t, &other.records[0], "z"),
            Err(ReportError::MissingNode { .. })
        ));
    }

    #[test]
    fn positive_under_negative_names_both_nodes() {
        let c = corpus(CORPUS);
        let t = build_template(&c).unwrap();
        let mut r = populate_gold_report(&t, &c.records[0], "a1").unwrap();
        r.l1_answers
            .insert("L1/disease/respiratory system".into(), YesNo::No);
        let v = check_consistency(&r, &t);
        assert_eq!(
            v,
            [Violation::PositiveUnderNegative {
                l1: "L1/disease/respiratory system".into(),
                l2: "L2/disease/respiratory system/infiltrate".into(),
            }]
        );
        assert!(positive_paths(&r, &t).is_err());
    }

    #[test]
    fn structural_violations() {
        let c = corpus(CORPUS);
        let t = build_template(&c).unwrap();
        let mut r = populate_gold_report(&t, &c.records[1], "b1").unwrap();
        let degree = "L3/sign/respiratory system/opacity/degree".to_string();
        let opacity: Vec<usize> = (0..r.instances.len())
            .filter(|&i| r.instances[i].l2_node.contains("opacity"))
            .collect();
        r.instances[opacity[0]]
            .attribute_answers
            .insert(degree.clone(), ["mild", "severe"].map(String::from).into());
        r.instances[opacity[1]].instance_index = 5;
        let v = check_consistency(&r, &t);
        assert!(v.contains(&Violation::MultipleOnSingle { node: degree }));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::InstanceOutOfRange { index: 5, .. })));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::InstanceGap { index: 5, .. })));
    }

    #[test]
    fn paths_enumeration() {
        let t = build_template(&corpus("p1 | a | catheter\n")).unwrap();
        let paths = enumerate_paths(&t);
        assert_eq!(paths.len(), 4);
        assert_eq!(paths[0], Path::new("L1/object/-", YES));
        assert_eq!(paths[1], Path::new("L1/object/-", NO));
    }

    #[test]
    fn reports_file_round_trip() {
        let c = corpus(CORPUS);
        let t = build_template(&c).unwrap();
        let reports = populate_gold_reports(&t, &c).unwrap();
        assert_eq!(reports.len(), 4);
        let text = render_reports(&reports);
        assert_eq!(parse_reports(&text).unwrap(), reports);
    }

    fn numbered_corpus(n: usize) -> Corpus {
        let text: String = (0..n)
            .map(|i| format!("p{i:03} | i{i} | normal\n"))
            .collect();
        corpus(&text)
    }

    #[test]
    fn ten_patient_split() {
        let s = make_splits(&numbered_corpus(10), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(Split::ALL.map(|x| s.count(x)), [8, 1, 1]);
        assert_eq!(
            s,
            make_splits(&numbered_corpus(10), [0.8, 0.1, 0.1], 3).unwrap()
        );
        assert_eq!(SplitAssignment::parse(&s.render()).unwrap(), s);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            make_splits(&numbered_corpus(10), [0.5, 0.1, 0.1], 0),
            Err(SplitError::BadRatios(_))
        ));
        assert!(matches!(
            make_splits(&numbered_corpus(2), [0.8, 0.1, 0.1], 0),
            Err(SplitError::TooFewPatients {
                patients: 2,
                splits: 3
            })
        ));
    }

    #[test]
    fn allocation_within_one_of_target() {
        for n in 3..200 {
            let counts = allocate(n, [0.8, 0.1, 0.1]);
            assert_eq!(counts.iter().sum::<usize>(), n);
            if n >= 10 {
                for (c, r) in counts.iter().zip([0.8, 0.1, 0.1]) {
                    assert!((*c as f64 - r * n as f64).abs() <= 1.0, "n={n} {counts:?}");
                }
            }
        }
    }
}
