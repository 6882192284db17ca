//! Path-level scoring of predicted reports against gold reports.
//!
//! Every report contributes one binary observation per template path. Paths
//! that are never gold-positive nor predicted-positive are unsupported and do
//! not enter the macro averages; per-path ratios with a zero denominator are
//! zero. Instances of an element are aligned before scoring so that the
//! finding-level F1 does not depend on the order instances were predicted in.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{
    check_consistency, enumerate_paths, fold_paths, FindingInstance, Path, StructuredReport,
    Violation,
};
use crate::template::{FindingClass, Level, ReportTemplate};

/// Largest instance list searched exhaustively; larger ones are matched
/// greedily.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 6;

/// Micro counts over the items of one element: its existence plus every
/// selected attribute value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MatchCounts {
    pub fn f1<F: Float>(&self) -> F {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Pairs of (predicted position, gold position) into the instance lists given
/// to [`match_instances`], sorted by predicted position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceAlignment {
    pub pairs: Vec<(usize, usize)>,
    pub counts: MatchCounts,
}

impl InstanceAlignment {
    pub fn f1<F: Float>(&self) -> F {
        self.counts.f1()
    }
}

fn items(inst: &FindingInstance) -> BTreeSet<(&str, &str)> {
    inst.attribute_answers
        .iter()
        .flat_map(|(node, values)| values.iter().map(move |v| (node.as_str(), v.as_str())))
        .collect()
}

/// Aligns predicted and gold instances of one element so that the finding's
/// micro F1 is maximal. Ties prefer the order-preserving pairing, then the
/// lexicographically smallest one.
pub fn match_instances(pred: &[FindingInstance], gold: &[FindingInstance]) -> InstanceAlignment {
    let p_items: Vec<_> = pred.iter().map(items).collect();
    let g_items: Vec<_> = gold.iter().map(items).collect();
    // tp + fp and tp + fn are fixed, so maximal F1 is maximal tp
    let weight: Vec<Vec<u64>> = p_items
        .iter()
        .map(|p| {
            g_items
                .iter()
                .map(|g| p.intersection(g).count() as u64 + 1)
                .collect()
        })
        .collect();
    let pred_total: u64 = p_items.iter().map(|p| p.len() as u64 + 1).sum();
    let gold_total: u64 = g_items.iter().map(|g| g.len() as u64 + 1).sum();

    let mut pairs = if pred.len().max(gold.len()) <= EXHAUSTIVE_MATCH_LIMIT {
        exhaustive(&weight, pred.len(), gold.len())
    } else {
        greedy(&weight, pred.len(), gold.len())
    };
    pairs.sort_unstable();
    let tp: u64 = pairs.iter().map(|&(p, g)| weight[p][g]).sum();
    InstanceAlignment {
        pairs,
        counts: MatchCounts {
            tp,
            fp: pred_total - tp,
            fn_: gold_total - tp,
        },
    }
}

/// Enumerates injective maps from the shorter side into the longer side in
/// lexicographic order and keeps the first one with maximal weight.
fn exhaustive(weight: &[Vec<u64>], n_pred: usize, n_gold: usize) -> Vec<(usize, usize)> {
    let pred_short = n_pred <= n_gold;
    let (short, long) = if pred_short {
        (n_pred, n_gold)
    } else {
        (n_gold, n_pred)
    };
    let w = |s: usize, l: usize| {
        if pred_short {
            weight[s][l]
        } else {
            weight[l][s]
        }
    };

    struct Search<'a> {
        w: &'a dyn Fn(usize, usize) -> u64,
        short: usize,
        long: usize,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(u64, Vec<usize>)>,
    }

    fn visit(s: &mut Search, depth: usize, acc: u64) {
        if depth == s.short {
            if s.best.as_ref().is_none_or(|(b, _)| acc > *b) {
                s.best = Some((acc, s.current.clone()));
            }
            return;
        }
        for l in 0..s.long {
            if !s.used[l] {
                s.used[l] = true;
                s.current.push(l);
                let add = (s.w)(depth, l);
                visit(s, depth + 1, acc + add);
                s.current.pop();
                s.used[l] = false;
            }
        }
    }

    let mut search = Search {
        w: &w,
        short,
        long,
        used: vec![false; long],
        current: Vec::with_capacity(short),
        best: None,
    };
    visit(&mut search, 0, 0);
    let (_, assignment) = search.best.unwrap_or_default();
    assignment
        .into_iter()
        .enumerate()
        .map(|(s, l)| if pred_short { (s, l) } else { (l, s) })
        .collect()
}

fn greedy(weight: &[Vec<u64>], n_pred: usize, n_gold: usize) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(u64, usize, usize)> = (0..n_pred)
        .flat_map(|p| (0..n_gold).map(move |g| (p, g)))
        .map(|(p, g)| (weight[p][g], p, g))
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut p_used = vec![false; n_pred];
    let mut g_used = vec![false; n_gold];
    let mut pairs = Vec::new();
    for (_, p, g) in candidates {
        if !p_used[p] && !g_used[g] {
            p_used[p] = true;
            g_used[g] = true;
            pairs.push((p, g));
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl PathCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn is_supported(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    fn add(&mut self, other: &PathCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Group label of the report accuracy over all paths.
const ALL_PATHS: &str = "all";

/// Additive evaluation state; partial results over disjoint report sets merge
/// by [`PathStats::merge`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathStats {
    pub counts: Vec<PathCounts>,
    pub reports: u64,
    /// Reports whose folded path set is exact, per group label.
    pub exact: BTreeMap<String, u64>,
    pub findings: MatchCounts,
}

impl PathStats {
    pub fn merge(&mut self, other: &PathStats) {
        if self.counts.is_empty() {
            self.counts = vec![PathCounts::default(); other.counts.len()];
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.add(b);
        }
        self.reports += other.reports;
        for (k, v) in &other.exact {
            *self.exact.entry(k.clone()).or_default() += v;
        }
        self.findings.add(other.findings);
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate: the gold report list is empty")]
    Empty,
    #[error("duplicate {side} report for `{patient_id}`/`{image_ref}`")]
    Duplicate {
        side: &'static str,
        patient_id: String,
        image_ref: String,
    },
    #[error("predicted and gold reports are not aligned: {0}")]
    Unaligned(String),
    #[error("{side} report `{patient_id}`/`{image_ref}` references unknown nodes: {}", violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    UnknownNode {
        side: &'static str,
        patient_id: String,
        image_ref: String,
        violations: Vec<Violation>,
    },
    #[error("{side} report `{patient_id}`/`{image_ref}` is inconsistent: {}", violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Inconsistent {
        side: &'static str,
        patient_id: String,
        image_ref: String,
        violations: Vec<Violation>,
    },
}

/// Scores one report pair at a time against a fixed template.
pub struct Scorer<'t> {
    template: &'t ReportTemplate,
    paths: Vec<Path>,
    index: HashMap<Path, usize>,
    groups: Vec<Vec<String>>,
}

impl<'t> Scorer<'t> {
    pub fn new(template: &'t ReportTemplate) -> Self {
        let paths = enumerate_paths(template);
        let index = paths
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        let groups = paths
            .iter()
            .map(|p| group_labels(template, &p.node_id))
            .collect();
        Scorer {
            template,
            paths,
            index,
            groups,
        }
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    fn check(&self, side: &'static str, r: &StructuredReport) -> Result<(), MetricsError> {
        let violations = check_consistency(r, self.template);
        if violations.is_empty() {
            return Ok(());
        }
        let unknown = violations.iter().any(|v| {
            matches!(
                v,
                Violation::UnknownL1 { .. }
                    | Violation::UnknownInstanceNode { .. }
                    | Violation::UnknownAttribute { .. }
            )
        });
        let (patient_id, image_ref) = (r.patient_id.clone(), r.image_ref.clone());
        Err(if unknown {
            MetricsError::UnknownNode {
                side,
                patient_id,
                image_ref,
                violations,
            }
        } else {
            MetricsError::Inconsistent {
                side,
                patient_id,
                image_ref,
                violations,
            }
        })
    }

    /// Adds one (prediction, gold) pair to `stats`.
    pub fn observe(
        &self,
        stats: &mut PathStats,
        pred: &StructuredReport,
        gold: &StructuredReport,
    ) -> Result<(), MetricsError> {
        self.check("predicted", pred)?;
        self.check("gold", gold)?;
        if stats.counts.is_empty() {
            stats.counts = vec![PathCounts::default(); self.paths.len()];
        }

        let l2_nodes: BTreeSet<&str> = pred
            .instances
            .iter()
            .chain(&gold.instances)
            .map(|i| i.l2_node.as_str())
            .collect();
        for l2 in l2_nodes {
            let p: Vec<FindingInstance> = pred.instances_of(l2).cloned().collect();
            let g: Vec<FindingInstance> = gold.instances_of(l2).cloned().collect();
            stats.findings.add(match_instances(&p, &g).counts);
        }

        let p_paths = fold_paths(pred, self.template);
        let g_paths = fold_paths(gold, self.template);
        let mut mismatched: BTreeSet<&str> = BTreeSet::new();
        for (i, path) in self.paths.iter().enumerate() {
            let (p, g) = (p_paths.contains(path), g_paths.contains(path));
            let c = &mut stats.counts[i];
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
            if p != g {
                mismatched.extend(self.groups[i].iter().map(String::as_str));
            }
        }
        debug_assert!(p_paths
            .iter()
            .chain(&g_paths)
            .all(|p| self.index.contains_key(p)));
        stats.reports += 1;
        for label in self.group_names() {
            if !mismatched.contains(label.as_str()) {
                *stats.exact.entry(label).or_default() += 1;
            }
        }
        Ok(())
    }

    fn group_names(&self) -> BTreeSet<String> {
        self.groups.iter().flatten().cloned().collect()
    }

    pub fn summarize<F: Float>(&self, stats: &PathStats) -> MetricsResult<F> {
        let reports = stats.reports;
        let exact = |label: &str| stats.exact.get(label).copied().unwrap_or(0);
        let group = |label: &str| -> GroupMetrics<F> {
            let members: Vec<usize> = (0..self.paths.len())
                .filter(|&i| self.groups[i].iter().any(|g| g == label))
                .collect();
            let questions: BTreeSet<&str> = members
                .iter()
                .map(|&i| self.paths[i].node_id.as_str())
                .collect();
            let macro_ = macro_average::<F>(members.iter().map(|&i| &stats.counts[i]));
            GroupMetrics {
                macro_precision: macro_.0,
                macro_recall: macro_.1,
                macro_f1: macro_.2,
                report_accuracy: ratio(exact(label), reports),
                path_count: members.len() as u64,
                supported_path_count: macro_.3,
                question_count: questions.len() as u64,
                mean_answers: ratio(members.len() as u64, questions.len() as u64),
            }
        };
        let overall = group(ALL_PATHS);
        let levels = Level::ALL
            .iter()
            .map(|l| (l.to_string(), group(&l.to_string())))
            .collect();
        let l2_topics = FindingClass::ALL
            .iter()
            .map(|c| topic_label(*c))
            .filter(|label| self.groups.iter().flatten().any(|g| g == label))
            .map(|label| (label.clone(), group(&label)))
            .collect();
        MetricsResult {
            macro_precision: overall.macro_precision,
            macro_recall: overall.macro_recall,
            macro_f1: overall.macro_f1,
            report_accuracy: if self.paths.is_empty() {
                ratio(reports, reports)
            } else {
                overall.report_accuracy
            },
            finding_f1: stats.findings.f1(),
            report_count: reports,
            path_count: overall.path_count,
            supported_path_count: overall.supported_path_count,
            levels,
            l2_topics,
        }
    }
}

fn topic_label(class: FindingClass) -> String {
    format!("L2/{}", class.label())
}

fn group_labels(t: &ReportTemplate, node_id: &str) -> Vec<String> {
    let node = &t.nodes()[node_id];
    let mut labels = vec![ALL_PATHS.to_string(), node.level.to_string()];
    if node.level == Level::L2 {
        labels.push(topic_label(node.topic.class));
    }
    labels
}

fn ratio<F: Float>(num: u64, den: u64) -> F {
    if den == 0 {
        F::zero()
    } else {
        F::from(num).expect("u64 converts") / F::from(den).expect("u64 converts")
    }
}

/// (precision, recall, f1, supported count) averaged over supported paths.
fn macro_average<'a, F: Float>(counts: impl Iterator<Item = &'a PathCounts>) -> (F, F, F, u64) {
    let (mut p, mut r, mut f, mut n) = (F::zero(), F::zero(), F::zero(), 0u64);
    for c in counts.filter(|c| c.is_supported()) {
        p = p + ratio::<F>(c.tp, c.tp + c.fp);
        r = r + ratio::<F>(c.tp, c.tp + c.fn_);
        f = f + ratio::<F>(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        n += 1;
    }
    if n == 0 {
        return (F::zero(), F::zero(), F::zero(), 0);
    }
    let d = F::from(n).expect("u64 converts");
    (p / d, r / d, f / d, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics<F> {
    pub macro_precision: F,
    pub macro_recall: F,
    pub macro_f1: F,
    pub report_accuracy: F,
    pub path_count: u64,
    pub supported_path_count: u64,
    pub question_count: u64,
    pub mean_answers: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult<F> {
    pub macro_precision: F,
    pub macro_recall: F,
    pub macro_f1: F,
    pub report_accuracy: F,
    /// Micro F1 over aligned element instances.
    pub finding_f1: F,
    pub report_count: u64,
    pub path_count: u64,
    pub supported_path_count: u64,
    pub levels: BTreeMap<String, GroupMetrics<F>>,
    pub l2_topics: BTreeMap<String, GroupMetrics<F>>,
}

/// Pairs predictions with gold reports by (patient id, image ref).
pub fn align<'a>(
    preds: &'a [StructuredReport],
    golds: &'a [StructuredReport],
) -> Result<Vec<(&'a StructuredReport, &'a StructuredReport)>, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != golds.len() {
        return Err(MetricsError::Unaligned(format!(
            "{} predictions for {} gold reports",
            preds.len(),
            golds.len()
        )));
    }
    let mut by_key: HashMap<(&str, &str), &StructuredReport> = HashMap::new();
    for p in preds {
        if by_key.insert(p.key(), p).is_some() {
            return Err(MetricsError::Duplicate {
                side: "predicted",
                patient_id: p.patient_id.clone(),
                image_ref: p.image_ref.clone(),
            });
        }
    }
    let mut seen = BTreeSet::new();
    golds
        .iter()
        .map(|g| {
            if !seen.insert(g.key()) {
                return Err(MetricsError::Duplicate {
                    side: "gold",
                    patient_id: g.patient_id.clone(),
                    image_ref: g.image_ref.clone(),
                });
            }
            by_key.get(&g.key()).map(|p| (*p, g)).ok_or_else(|| {
                MetricsError::Unaligned(format!(
                    "no prediction for `{}`/`{}`",
                    g.patient_id, g.image_ref
                ))
            })
        })
        .collect()
}

pub fn compute_metrics<F: Float>(
    preds: &[StructuredReport],
    golds: &[StructuredReport],
    t: &ReportTemplate,
) -> Result<MetricsResult<F>, MetricsError> {
    let pairs = align(preds, golds)?;
    let scorer = Scorer::new(t);
    let mut stats = PathStats::default();
    for (p, g) in pairs {
        scorer.observe(&mut stats, p, g)?;
    }
    Ok(scorer.summarize(&stats))
}

fn pct<F: Float>(v: F) -> String {
    format!("{:.1}", v.to_f64().unwrap_or(f64::NAN) * 100.0)
}

/// Human-readable table with percentages to one decimal.
pub fn render_metrics_text<F: Float>(m: &MetricsResult<F>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "reports          {}", m.report_count);
    let _ = writeln!(out, "report accuracy  {}", pct(m.report_accuracy));
    let _ = writeln!(out, "macro F1         {}", pct(m.macro_f1));
    let _ = writeln!(out, "macro precision  {}", pct(m.macro_precision));
    let _ = writeln!(out, "macro recall     {}", pct(m.macro_recall));
    let _ = writeln!(out, "finding F1       {}", pct(m.finding_f1));
    let _ = writeln!(
        out,
        "supported paths  {} / {}",
        m.supported_path_count, m.path_count
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<22} {:>10} {:>6} {:>6} {:>6} {:>7} {:>12}",
        "group", "report acc", "F1", "prec", "recall", "#paths", "avg #answers"
    );
    let mut row = |label: &str, g: &GroupMetrics<F>| {
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>6} {:>6} {:>6} {:>7} {:>12.1}",
            label,
            pct(g.report_accuracy),
            pct(g.macro_f1),
            pct(g.macro_precision),
            pct(g.macro_recall),
            g.path_count,
            g.mean_answers.to_f64().unwrap_or(f64::NAN)
        );
    };
    for (label, g) in &m.levels {
        row(label, g);
        if label == "L2" {
            for (topic, g) in &m.l2_topics {
                let name = topic.trim_start_matches("L2/");
                row(&format!("  - {name}"), g);
            }
        }
    }
    out
}

/// Machine-readable form; [`parse_metrics`] inverts it exactly.
pub fn render_metrics_json<F: Float + Serialize>(m: &MetricsResult<F>) -> String {
    let value = serde_json::to_value(m).expect("metrics serialize");
    let mut s = serde_json::to_string_pretty(&value).expect("json value serializes");
    s.push('\n');
    s
}

pub fn parse_metrics<F: Float + DeserializeOwned>(
    text: &str,
) -> Result<MetricsResult<F>, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{Corpus, Vocabulary};
    use crate::report::populate_gold_reports;
    use crate::template::build_template;

    fn inst(l2: &str, index: u32, answers: &[(&str, &[&str])]) -> FindingInstance {
        FindingInstance {
            l2_node: l2.into(),
            instance_index: index,
            attribute_answers: answers
                .iter()
                .map(|(k, vs)| (k.to_string(), vs.iter().map(|v| v.to_string()).collect()))
                .collect(),
        }
    }

    #[test]
    fn swapped_instances_are_realigned() {
        let pred = [
            inst("L2/x", 0, &[("deg", &["severe"])]),
            inst("L2/x", 1, &[("deg", &["mild"])]),
        ];
        let gold = [
            inst("L2/x", 0, &[("deg", &["mild"])]),
            inst("L2/x", 1, &[("deg", &["severe"])]),
        ];
        let a = match_instances(&pred, &gold);
        assert_eq!(a.pairs, [(0, 1), (1, 0)]);
        assert_eq!(a.f1::<f64>(), 1.0);
    }

    #[test]
    fn identical_lists_align_identically() {
        let xs = [
            inst("L2/x", 0, &[("deg", &["mild"])]),
            inst("L2/x", 1, &[("deg", &["mild"])]),
            inst("L2/x", 2, &[("deg", &["severe"])]),
        ];
        let a = match_instances(&xs, &xs);
        assert_eq!(a.pairs, [(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.f1::<f32>(), 1.0);
    }

    #[test]
    fn unmatched_instances_count_as_errors() {
        let pred = [inst("L2/x", 0, &[("deg", &["mild"])])];
        let gold: [FindingInstance; 0] = [];
        let a = match_instances(&pred, &gold);
        assert!(a.pairs.is_empty());
        assert_eq!(
            a.counts,
            MatchCounts {
                tp: 0,
                fp: 2,
                fn_: 0
            }
        );
        assert_eq!(a.f1::<f64>(), 0.0);
    }

    #[test]
    fn greedy_beyond_limit() {
        let mk = |vals: &[&str]| -> Vec<FindingInstance> {
            vals.iter()
                .enumerate()
                .map(|(i, v)| inst("L2/x", i as u32, &[("deg", &[v])]))
                .collect()
        };
        let names = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let mut rev = names;
        rev.reverse();
        let a = match_instances(&mk(&names), &mk(&rev));
        assert_eq!(a.pairs.len(), 8);
        assert_eq!(a.f1::<f64>(), 1.0);
    }

    const VOCAB: &str = "\
opacity,sign,chest
lung,anatomy,chest
mild,attr_degree,
severe,attr_degree,
catheter,object,
";

    fn fixture() -> (ReportTemplate, Vec<StructuredReport>) {
        let c = Corpus::parse(
            "p1 | a | opacity/lung/mild;opacity/lung/severe\np2 | b | catheter\np3 | c | normal\n",
            Vocabulary::parse(VOCAB).unwrap(),
        )
        .unwrap();
        let t = build_template(&c).unwrap();
        let golds = populate_gold_reports(&t, &c).unwrap();
        (t, golds)
    }

    #[test]
    fn identity_scores_perfectly() {
        let (t, golds) = fixture();
        let m: MetricsResult<f64> = compute_metrics(&golds, &golds, &t).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_recall, 1.0);
        assert_eq!(m.report_accuracy, 1.0);
        assert_eq!(m.finding_f1, 1.0);
        assert_eq!(m.report_count, 3);
        assert_eq!(m.path_count, enumerate_paths(&t).len() as u64);
        let level_paths: u64 = m.levels.values().map(|g| g.path_count).sum();
        assert_eq!(level_paths, m.path_count);
        assert_eq!(
            m.l2_topics.values().map(|g| g.path_count).sum::<u64>(),
            m.levels["L2"].path_count
        );
    }

    #[test]
    fn permuting_predicted_instances_changes_nothing() {
        let (t, golds) = fixture();
        let mut preds = golds.clone();
        let r = &mut preds[0];
        let (a, b) = (r.instances[0].instance_index, r.instances[1].instance_index);
        r.instances[0].instance_index = b;
        r.instances[1].instance_index = a;
        r.canonicalize();
        let m1: MetricsResult<f64> = compute_metrics(&preds, &golds, &t).unwrap();
        let m2: MetricsResult<f64> = compute_metrics(&golds, &golds, &t).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn all_negative_predictions() {
        let (t, golds) = fixture();
        let preds: Vec<_> = golds
            .iter()
            .map(|g| StructuredReport::all_negative(&t, &g.patient_id, &g.image_ref))
            .collect();
        let m: MetricsResult<f64> = compute_metrics(&preds, &golds, &t).unwrap();
        assert!((m.report_accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(m.macro_f1 < 1.0);
        assert_eq!(m.finding_f1, 0.0);
    }

    #[test]
    fn alignment_errors() {
        let (t, golds) = fixture();
        assert!(matches!(
            compute_metrics::<f64>(&[], &[], &t),
            Err(MetricsError::Empty)
        ));
        assert!(matches!(
            compute_metrics::<f64>(&golds[..2], &golds, &t),
            Err(MetricsError::Unaligned(_))
        ));
        let mut preds = golds.clone();
        preds[2].image_ref = "other".into();
        assert!(matches!(
            compute_metrics::<f64>(&preds, &golds, &t),
            Err(MetricsError::Unaligned(_))
        ));
        let mut preds = golds.clone();
        preds[0].instances[0].l2_node = "L2/ghost".into();
        assert!(matches!(
            compute_metrics::<f64>(&preds, &golds, &t),
            Err(MetricsError::UnknownNode { .. })
        ));
    }

    #[test]
    fn percent_rendering() {
        assert_eq!(pct(0.317f64), "31.7");
        assert_eq!(pct(1.0f32), "100.0");
        let (t, golds) = fixture();
        let m: MetricsResult<f64> = compute_metrics(&golds, &golds, &t).unwrap();
        let text = render_metrics_text(&m);
        assert!(text.contains("report accuracy  100.0"), "{text}");
        let json = render_metrics_json(&m);
        assert_eq!(parse_metrics::<f64>(&json).unwrap(), m);
    }

    #[test]
    fn parallel_merge_matches_sequential() {
        let (t, golds) = fixture();
        let scorer = Scorer::new(&t);
        let preds: Vec<_> = golds
            .iter()
            .map(|g| StructuredReport::all_negative(&t, &g.patient_id, &g.image_ref))
            .collect();
        let mut whole = PathStats::default();
        let mut parts = [PathStats::default(), PathStats::default()];
        for (i, (p, g)) in preds.iter().zip(&golds).enumerate() {
            scorer.observe(&mut whole, p, g).unwrap();
            scorer.observe(&mut parts[i % 2], p, g).unwrap();
        }
        let mut merged = PathStats::default();
        merged.merge(&parts[1]);
        merged.merge(&parts[0]);
        assert_eq!(merged, whole);
        for c in &whole.counts {
            assert_eq!(c.total(), 3);
        }
    }
}
