//! Independent reference implementations and fuzzers for tests.
//!
//! Nothing here calls into the scorer, the path folding or the consistency
//! checker it is meant to cross-check. Enabled by the `testkit` feature.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lexicon::Corpus;
use crate::report::{FindingInstance, StructuredReport, YesNo};
use crate::session::{start_session, QuestionInstance};
use crate::synthgen::{generate, SynthConfig};
use crate::template::{
    build_template, l1_id, l2_id, l3_id, question_text, AnswerOption, ChoiceMode, Dimension,
    FindingClass, Level, QuestionNode, ReportTemplate, Topic, FORMAT_VERSION,
};

const NO_SEL: &str = "no selection";

type PathSet = BTreeSet<(String, String)>;

/// Every (node, option) pair, found by walking the tree from its roots.
pub fn reference_path_universe(t: &ReportTemplate) -> Vec<(String, String)> {
    fn walk(t: &ReportTemplate, id: &str, out: &mut Vec<(String, String)>) {
        let n = &t.nodes()[id];
        for o in &n.options {
            out.push((id.to_string(), o.value.clone()));
        }
        for c in &n.children {
            walk(t, c, out);
        }
    }
    let mut out = Vec::new();
    for root in t.l1_order() {
        walk(t, root, &mut out);
    }
    out
}

/// Folded answered paths of a report, by walking the tree and looking
/// instances up under each element.
pub fn reference_paths(r: &StructuredReport, t: &ReportTemplate) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for l1 in t.l1_order() {
        let yes = matches!(r.l1_answers.get(l1), Some(YesNo::Yes));
        out.insert((l1.clone(), if yes { "yes" } else { "no" }.to_string()));
        for l2 in &t.nodes()[l1].children {
            let instances: Vec<&FindingInstance> =
                r.instances.iter().filter(|i| &i.l2_node == l2).collect();
            let present = !instances.is_empty();
            out.insert((l2.clone(), if present { "yes" } else { "no" }.to_string()));
            for l3 in &t.nodes()[l2].children {
                let mut values: BTreeSet<String> = BTreeSet::new();
                for inst in &instances {
                    if let Some(sel) = inst.attribute_answers.get(l3) {
                        values.extend(sel.iter().cloned());
                    }
                }
                if values.is_empty() {
                    values.insert(NO_SEL.to_string());
                }
                for v in values {
                    out.insert((l3.clone(), v));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGroup {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub report_accuracy: f64,
    pub paths: usize,
    pub supported: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScores {
    pub overall: ReferenceGroup,
    /// Keyed by `L1`, `L2`, `L3`.
    pub levels: BTreeMap<String, ReferenceGroup>,
    /// Keyed by `L2/{class}`.
    pub topics: BTreeMap<String, ReferenceGroup>,
}

/// Naive macro scorer: one pass per path over all report pairs.
pub fn reference_scores(
    preds: &[StructuredReport],
    golds: &[StructuredReport],
    t: &ReportTemplate,
) -> ReferenceScores {
    let pairs: Vec<(&StructuredReport, &StructuredReport)> = golds
        .iter()
        .map(|g| {
            let p = preds
                .iter()
                .find(|p| p.patient_id == g.patient_id && p.image_ref == g.image_ref)
                .expect("every gold report has a prediction");
            (p, g)
        })
        .collect();
    let sets: Vec<(PathSet, PathSet)> = pairs
        .iter()
        .map(|(p, g)| (reference_paths(p, t), reference_paths(g, t)))
        .collect();
    let universe = reference_path_universe(t);

    let group = |keep: &dyn Fn(&QuestionNode) -> bool| -> ReferenceGroup {
        let paths: Vec<&(String, String)> = universe
            .iter()
            .filter(|(n, _)| keep(&t.nodes()[n]))
            .collect();
        let (mut ps, mut rs, mut fs, mut supported) = (0.0, 0.0, 0.0, 0usize);
        for path in &paths {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (p, g) in &sets {
                match (p.contains(*path), g.contains(*path)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            if tp + fp + fn_ == 0 {
                continue;
            }
            supported += 1;
            let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            ps += div(tp, tp + fp);
            rs += div(tp, tp + fn_);
            fs += div(2 * tp, 2 * tp + fp + fn_);
        }
        let exact = sets
            .iter()
            .filter(|(p, g)| {
                paths
                    .iter()
                    .all(|path| p.contains(*path) == g.contains(*path))
            })
            .count();
        let mean = |x: f64| {
            if supported == 0 {
                0.0
            } else {
                x / supported as f64
            }
        };
        ReferenceGroup {
            precision: mean(ps),
            recall: mean(rs),
            f1: mean(fs),
            report_accuracy: if sets.is_empty() {
                0.0
            } else {
                exact as f64 / sets.len() as f64
            },
            paths: paths.len(),
            supported,
        }
    };

    let overall = group(&|_| true);
    let levels = [Level::L1, Level::L2, Level::L3]
        .into_iter()
        .map(|l| (format!("{l}"), group(&|n: &QuestionNode| n.level == l)))
        .collect();
    let classes: BTreeSet<_> = t
        .nodes()
        .values()
        .filter(|n| n.level == Level::L2)
        .map(|n| n.topic.class)
        .collect();
    let topics = classes
        .into_iter()
        .map(|c| {
            (
                format!("L2/{}", c.label()),
                group(&|n: &QuestionNode| n.level == Level::L2 && n.topic.class == c),
            )
        })
        .collect();
    ReferenceScores {
        overall,
        levels,
        topics,
    }
}

/// Best finding F1 over every partial injective pairing, found by brute
/// force. Items are the existence of an instance plus each selected
/// (attribute, value).
pub fn exhaustive_best_f1(pred: &[FindingInstance], gold: &[FindingInstance]) -> f64 {
    fn items(i: &FindingInstance) -> BTreeSet<(String, String)> {
        i.attribute_answers
            .iter()
            .flat_map(|(k, vs)| vs.iter().map(move |v| (k.clone(), v.clone())))
            .collect()
    }
    let p: Vec<_> = pred.iter().map(items).collect();
    let g: Vec<_> = gold.iter().map(items).collect();
    let p_total: usize = p.iter().map(|s| s.len() + 1).sum();
    let g_total: usize = g.iter().map(|s| s.len() + 1).sum();

    fn search(
        i: usize,
        p: &[BTreeSet<(String, String)>],
        g: &[BTreeSet<(String, String)>],
        used: &mut Vec<bool>,
        tp: usize,
        best: &mut usize,
    ) {
        if i == p.len() {
            *best = (*best).max(tp);
            return;
        }
        search(i + 1, p, g, used, tp, best);
        for j in 0..g.len() {
            if !used[j] {
                used[j] = true;
                let gain = p[i].intersection(&g[j]).count() + 1;
                search(i + 1, p, g, used, tp + gain, best);
                used[j] = false;
            }
        }
    }
    let mut best = 0;
    search(0, &p, &g, &mut vec![false; g.len()], 0, &mut best);
    let denom = p_total + g_total;
    if denom == 0 {
        0.0
    } else {
        2.0 * best as f64 / denom as f64
    }
}

/// Violations as (kind, named nodes), recomputed from the definitions with
/// a separate traversal. Order-insensitive comparison is up to the caller.
pub fn reference_violations(
    r: &StructuredReport,
    t: &ReportTemplate,
) -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    let mut push = |kind: &str, nodes: &[&str]| {
        out.push((
            kind.to_string(),
            nodes.iter().map(|s| s.to_string()).collect(),
        ));
    };
    let l1_nodes: BTreeSet<&String> = t.l1_order().iter().collect();
    for l1 in &l1_nodes {
        if !r.l1_answers.contains_key(*l1) {
            push("missing_l1_answer", &[l1]);
        }
    }
    for k in r.l1_answers.keys() {
        if !l1_nodes.contains(k) {
            push("unknown_l1", &[k]);
        }
    }
    let owner_of = |l2: &str| -> Option<&String> {
        t.l1_order()
            .iter()
            .find(|l1| t.nodes()[*l1].children.iter().any(|c| c == l2))
    };
    let mut seen: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for inst in &r.instances {
        let Some(node) = t
            .nodes()
            .get(&inst.l2_node)
            .filter(|n| n.level == Level::L2)
        else {
            push("unknown_instance_node", &[&inst.l2_node]);
            continue;
        };
        if let Some(l1) = owner_of(&inst.l2_node) {
            if matches!(r.l1_answers.get(l1), Some(YesNo::No)) {
                push("positive_under_negative", &[l1, &inst.l2_node]);
            }
        }
        if inst.instance_index >= node.max_instances.unwrap_or(1) {
            push("instance_out_of_range", &[&inst.l2_node]);
        }
        let prior = seen.entry(&inst.l2_node).or_default();
        if prior.contains(&inst.instance_index) {
            push("duplicate_instance", &[&inst.l2_node]);
        }
        prior.push(inst.instance_index);
        for c in &node.children {
            if !inst.attribute_answers.contains_key(c) {
                push("missing_attribute", &[&inst.l2_node, c]);
            }
        }
        for (k, values) in &inst.attribute_answers {
            if !node.children.contains(k) {
                push("unknown_attribute", &[&inst.l2_node, k]);
                continue;
            }
            let l3 = &t.nodes()[k];
            if values.is_empty() {
                push("empty_selection", &[k]);
            }
            for v in values {
                if !l3.options.iter().any(|o| &o.value == v) {
                    push("invalid_value", &[k]);
                }
            }
            if values.len() >= 2 {
                if l3.choice_mode == ChoiceMode::Single {
                    push("multiple_on_single", &[k]);
                }
                if values.iter().any(|v| v == NO_SEL) {
                    push("no_selection_mixed", &[k]);
                }
            }
        }
    }
    for (l2, indices) in seen {
        let distinct: BTreeSet<u32> = indices.into_iter().collect();
        for i in &distinct {
            if *i > 0 && !distinct.contains(&(i - 1)) {
                push("instance_gap", &[l2]);
            }
        }
    }
    out
}

/// Small random synthetic corpus and its template.
pub fn random_fixture(rng: &mut ChaCha8Rng) -> (Corpus, ReportTemplate) {
    let cfg = SynthConfig {
        seed: rng.gen(),
        patient_count: rng.gen_range(6..=12),
        body_regions: rng.gen_range(1..=2),
        zones_per_region: rng.gen_range(1..=2),
        diseases: rng.gen_range(1..=2),
        signs: 1,
        objects: 1,
        abnormal_regions: 1,
        degree_values: rng.gen_range(1..=3),
        descriptive_values: rng.gen_range(1..=3),
        positional_values: rng.gen_range(1..=2),
        max_images: rng.gen_range(1..=2),
        max_findings: rng.gen_range(2..=3),
        max_instances: rng.gen_range(1..=3),
        multi_instance_prob: if rng.gen_bool(0.7) { 0.3 } else { 0.0 },
        multi_value_prob: if rng.gen_bool(0.7) { 0.3 } else { 0.0 },
        normal_prob: 0.3,
        vocabulary_size: None,
    };
    let cfg = SynthConfig {
        max_instances: if cfg.multi_instance_prob > 0.0 {
            cfg.max_instances.max(2)
        } else {
            cfg.max_instances
        },
        ..cfg
    };
    let out = generate(&cfg).expect("small configs are satisfiable");
    let vocab =
        crate::lexicon::Vocabulary::parse(&out.vocabulary).expect("generated vocabulary parses");
    let corpus = Corpus::parse(&out.corpus, vocab).expect("generated corpus parses");
    let t = build_template(&corpus).expect("non-empty corpus builds");
    (corpus, t)
}

fn random_selection(rng: &mut ChaCha8Rng, node: &QuestionNode) -> BTreeSet<String> {
    let values: Vec<&str> = node.options.iter().map(|o| o.value.as_str()).collect();
    let plain: Vec<&str> = values.iter().copied().filter(|v| *v != NO_SEL).collect();
    if node.choice_mode == ChoiceMode::Multi && !plain.is_empty() && rng.gen_bool(0.7) {
        let k = rng.gen_range(1..=plain.len());
        plain
            .choose_multiple(rng, k)
            .map(|s| s.to_string())
            .collect()
    } else {
        BTreeSet::from([values.choose(rng).expect("nodes have options").to_string()])
    }
}

/// A random report satisfying every consistency rule.
pub fn random_consistent_report(
    rng: &mut ChaCha8Rng,
    t: &ReportTemplate,
    patient_id: &str,
    image_ref: &str,
) -> StructuredReport {
    let mut r = StructuredReport {
        patient_id: patient_id.into(),
        image_ref: image_ref.into(),
        l1_answers: BTreeMap::new(),
        instances: Vec::new(),
    };
    for l1 in t.l1_order() {
        let yes = rng.gen_bool(0.5);
        r.l1_answers
            .insert(l1.clone(), if yes { YesNo::Yes } else { YesNo::No });
        if !yes {
            continue;
        }
        for l2 in &t.nodes()[l1].children {
            let node = &t.nodes()[l2];
            let n = rng.gen_range(0..=node.max_instances.unwrap_or(1));
            for k in 0..n {
                r.instances.push(FindingInstance {
                    l2_node: l2.clone(),
                    instance_index: k,
                    attribute_answers: node
                        .children
                        .iter()
                        .map(|c| (c.clone(), random_selection(rng, &t.nodes()[c])))
                        .collect(),
                });
            }
        }
    }
    r.canonicalize();
    r
}

/// A random report that may break any rule: stray answers, unknown nodes,
/// out-of-range or duplicate instances, invalid selections.
pub fn random_report(
    rng: &mut ChaCha8Rng,
    t: &ReportTemplate,
    patient_id: &str,
    image_ref: &str,
) -> StructuredReport {
    let mut r = random_consistent_report(rng, t, patient_id, image_ref);
    let ids: Vec<String> = t.nodes().keys().cloned().collect();
    for _ in 0..rng.gen_range(0..4) {
        match rng.gen_range(0..8) {
            0 => {
                if let Some(k) = r.l1_answers.keys().next().cloned() {
                    r.l1_answers.remove(&k);
                }
            }
            1 => {
                let k = ids.choose(rng).cloned().unwrap_or_else(|| "ghost".into());
                r.l1_answers.insert(k, YesNo::Yes);
            }
            2 => {
                if let Some(k) = t.l1_order().choose(rng) {
                    r.l1_answers.insert(k.clone(), YesNo::No);
                }
            }
            3 => {
                if let Some(i) = r.instances.choose(rng).cloned() {
                    r.instances.push(i);
                }
            }
            4 => {
                if let Some(i) = r.instances.choose_mut(rng) {
                    i.instance_index += rng.gen_range(1..3);
                }
            }
            5 => {
                let l2 = ids.choose(rng).cloned().unwrap_or_default();
                r.instances.push(FindingInstance {
                    l2_node: l2,
                    instance_index: 0,
                    attribute_answers: BTreeMap::new(),
                });
            }
            6 => {
                if let Some(i) = r.instances.choose_mut(rng) {
                    if let Some(k) = i.attribute_answers.keys().next().cloned() {
                        let sel = i.attribute_answers.get_mut(&k).expect("key exists");
                        match rng.gen_range(0..3) {
                            0 => sel.clear(),
                            1 => {
                                sel.insert("bogus".into());
                            }
                            _ => {
                                sel.insert(NO_SEL.into());
                                sel.insert("yes".into());
                            }
                        }
                    }
                }
            }
            _ => {
                if let Some(i) = r.instances.choose_mut(rng) {
                    if let Some(k) = i.attribute_answers.keys().next().cloned() {
                        i.attribute_answers.remove(&k);
                    } else {
                        i.attribute_answers
                            .insert("L3/ghost".into(), BTreeSet::from(["x".into()]));
                    }
                }
            }
        }
    }
    r
}

fn adversarial_selection(rng: &mut ChaCha8Rng, q: &QuestionInstance) -> Vec<String> {
    match rng.gen_range(0..6) {
        0 => vec![],
        1 => vec!["maybe".into()],
        2 => q.valid_answers.clone(),
        3 => vec!["yes".into(), "no".into()],
        _ => {
            let k = rng.gen_range(1..=q.valid_answers.len());
            q.valid_answers.choose_multiple(rng, k).cloned().collect()
        }
    }
}

/// Drives one session with answers that are often invalid; rejected
/// answers are replaced by a random valid one. Returns the finalized report
/// and how many answers were rejected.
pub fn fuzz_session(
    rng: &mut ChaCha8Rng,
    t: &ReportTemplate,
    patient_id: &str,
    image_ref: &str,
) -> (StructuredReport, usize) {
    let mut s = start_session(t, patient_id, image_ref);
    let mut rejected = 0;
    while let Some(q) = s.pending() {
        if s.apply_answer(&q, adversarial_selection(rng, &q)).is_ok() {
            continue;
        }
        rejected += 1;
        let pick = q
            .valid_answers
            .choose(rng)
            .expect("questions have answers")
            .clone();
        s.apply_answer(&q, [pick])
            .expect("a single valid answer is accepted");
    }
    (s.finalize().expect("session finished"), rejected)
}

/// Per-class L1 topic and L2 element counts of the real-data
/// template: 25 topics, 216 elements.
pub const REAL_SHAPE: [(FindingClass, usize, usize); 4] = [
    (FindingClass::Object, 1, 16),
    (FindingClass::Disease, 8, 103),
    (FindingClass::Sign, 8, 65),
    (FindingClass::AbnormalRegion, 8, 32),
];
/// L3 questions and their total option count in the real-data template.
pub const REAL_L3: (usize, usize) = (477, 1988);
/// Distinct L3 answer values, including no selection.
pub const REAL_L3_ANSWERS: usize = 94;

/// A template with the real-data question counts and option totals, built
/// node by node without the corpus builder.
pub fn real_shaped_template() -> ReportTemplate {
    let yes_no = || {
        ["yes", "no"]
            .map(|v| AnswerOption {
                value: v.into(),
                is_no_selection: false,
            })
            .to_vec()
    };
    let node = |id: String, level, topic: &Topic, subject: Option<String>| QuestionNode {
        id,
        level,
        topic: topic.clone(),
        subject,
        attribute_dimension: None,
        text: String::new(),
        choice_mode: ChoiceMode::Single,
        options: yes_no(),
        children: Vec::new(),
        max_instances: None,
    };
    let (l3_total, option_total) = REAL_L3;
    // `wide` nodes get one extra option so the totals land exactly
    let wide = option_total - 4 * l3_total;
    let palette = REAL_L3_ANSWERS - 1;
    let mut nodes = BTreeMap::new();
    let mut l1_order = Vec::new();
    let mut l3_made = 0;
    for (class, topics, elements) in REAL_SHAPE {
        for k in 0..topics {
            let region = (class != FindingClass::Object).then(|| format!("region {k}"));
            let topic = Topic { class, region };
            let mut l1 = node(l1_id(&topic), Level::L1, &topic, None);
            // spread elements over topics, earlier topics taking the remainder
            let mine = elements / topics + usize::from(k < elements % topics);
            for e in 0..mine {
                let element = format!("{class} {k}.{e}");
                let mut l2 = node(
                    l2_id(&topic, &element),
                    Level::L2,
                    &topic,
                    Some(element.clone()),
                );
                l2.max_instances = Some(1);
                for dim in Dimension::ALL {
                    if l3_made == l3_total {
                        break;
                    }
                    let observed = if l3_made < wide { 4 } else { 3 };
                    let mut options: Vec<AnswerOption> = (0..observed)
                        .map(|j| AnswerOption {
                            value: format!("value {}", (l3_made * 3 + j) % palette),
                            is_no_selection: false,
                        })
                        .collect();
                    options.push(AnswerOption {
                        value: NO_SEL.into(),
                        is_no_selection: true,
                    });
                    let mut l3 = node(
                        l3_id(&topic, &element, dim),
                        Level::L3,
                        &topic,
                        Some(element.clone()),
                    );
                    l3.attribute_dimension = Some(dim);
                    l3.options = options;
                    l3.text = question_text(&l3);
                    l2.children.push(l3.id.clone());
                    nodes.insert(l3.id.clone(), l3);
                    l3_made += 1;
                }
                l2.text = question_text(&l2);
                l1.children.push(l2.id.clone());
                nodes.insert(l2.id.clone(), l2);
            }
            l1.text = question_text(&l1);
            l1_order.push(l1.id.clone());
            nodes.insert(l1.id.clone(), l1);
        }
    }
    ReportTemplate::from_parts(nodes, l1_order, String::new(), FORMAT_VERSION)
        .expect("real-shaped template is valid")
}
