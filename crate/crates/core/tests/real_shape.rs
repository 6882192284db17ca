//! Path counts on a template with the real-data question counts.

use reportree::metrics::compute_metrics;
use reportree::report::StructuredReport;
use reportree::template::{template_stats, FindingClass, Level, ReportTemplate};
use reportree::testkit::{real_shaped_template, REAL_L3_ANSWERS};
use reportree::Metrics;

#[test]
fn question_and_path_counts_match_real_data() {
    let t = real_shaped_template();
    let s = template_stats(&t);
    let questions = Level::ALL.map(|l| s.level(l).questions);
    assert_eq!(questions, [25, 216, 477]);
    let topics = FindingClass::ALL.map(|c| s.l2_topics[&c]);
    // abnormal regions, diseases, objects, signs
    assert_eq!(topics, [32, 103, 16, 65]);
    assert_eq!(
        Level::ALL.map(|l| s.level(l).unique_answers),
        [2, 2, REAL_L3_ANSWERS]
    );

    let paths = Level::ALL.map(|l| s.level(l).paths);
    assert_eq!(paths, [50, 432, 1988]);
    assert_eq!(format!("{:.1}", s.level(Level::L3).mean_options), "4.2");

    // the scorer groups agree with the per-level and per-topic counts
    let gold = StructuredReport::all_negative(&t, "p", "i");
    let m: Metrics =
        compute_metrics(std::slice::from_ref(&gold), std::slice::from_ref(&gold), &t).unwrap();
    let group = |k: &str| {
        m.levels
            .get(k)
            .or_else(|| m.l2_topics.get(k))
            .unwrap()
            .path_count
    };
    assert_eq!(
        [
            "L1",
            "L2",
            "L3",
            "L2/disease",
            "L2/sign",
            "L2/abnormal_region",
            "L2/object"
        ]
        .map(group),
        [50, 432, 1988, 206, 130, 64, 32]
    );
    assert_eq!(m.path_count, 50 + 432 + 1988);
}

#[test]
fn real_shape_survives_serialization() {
    let t = real_shaped_template();
    let back = ReportTemplate::deserialize(&t.serialize()).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.fingerprint(), t.fingerprint());
}
