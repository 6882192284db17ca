//! Patient-grouped splits.

use std::collections::BTreeMap;

use proptest::prelude::*;
use reportree::lexicon::{Corpus, Vocabulary};
use reportree::report::{make_splits, populate_gold_reports, Split, SplitAssignment};
use reportree::synthgen::{generate, SynthConfig};
use reportree::template::build_template;

const RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

fn corpus(images_per_patient: &[usize]) -> Corpus {
    let mut text = String::new();
    for (i, &k) in images_per_patient.iter().enumerate() {
        let images: Vec<String> = (0..k).map(|j| format!("p{i}_{j}")).collect();
        text.push_str(&format!("p{i} | {} | normal\n", images.join(",")));
    }
    Corpus::parse(
        &text,
        Vocabulary::parse("lung,anatomy,respiratory system\n").unwrap(),
    )
    .unwrap()
}

fn assert_integrity(c: &Corpus, s: &SplitAssignment) {
    assert_eq!(s.assignment.len(), c.records.len());
    let n = c.records.len() as f64;
    for (split, r) in Split::ALL.into_iter().zip(RATIOS) {
        let got = s.count(split) as f64;
        assert!((got - r * n).abs() <= 1.0, "{split}: {got} vs {}", r * n);
    }
    // image-level view: every image of a patient lands in one split
    let mut image_split: BTreeMap<&str, Split> = BTreeMap::new();
    for rec in &c.records {
        for img in &rec.image_refs {
            image_split.insert(img, s.split_of(&rec.patient_id).unwrap());
        }
    }
    for rec in &c.records {
        let splits: Vec<Split> = rec
            .image_refs
            .iter()
            .map(|i| image_split[i.as_str()])
            .collect();
        assert!(
            splits.windows(2).all(|w| w[0] == w[1]),
            "{} spans splits",
            rec.patient_id
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn patients_never_span_splits(
        images in prop::collection::vec(1usize..=4, 10..400),
        seed in any::<u64>(),
    ) {
        let c = corpus(&images);
        let s = make_splits(&c, RATIOS, seed).unwrap();
        assert_integrity(&c, &s);
        prop_assert_eq!(SplitAssignment::parse(&s.render()).unwrap(), s);
    }
}

#[test]
fn synthetic_reports_follow_their_patient() {
    let out = generate(&SynthConfig::default()).unwrap();
    let c = Corpus::parse(&out.corpus, Vocabulary::parse(&out.vocabulary).unwrap()).unwrap();
    assert!(c.records.iter().any(|r| r.image_refs.len() == 4));
    assert!(c.records.iter().any(|r| r.image_refs.len() == 1));
    let s = make_splits(&c, RATIOS, 11).unwrap();
    assert_integrity(&c, &s);
    assert_eq!(
        [
            s.count(Split::Train),
            s.count(Split::Val),
            s.count(Split::Test)
        ],
        [400, 50, 50]
    );
    let t = build_template(&c).unwrap();
    let mut per_split: BTreeMap<Split, usize> = BTreeMap::new();
    for g in populate_gold_reports(&t, &c).unwrap() {
        *per_split
            .entry(s.split_of(&g.patient_id).unwrap())
            .or_default() += 1;
    }
    let images: usize = c.records.iter().map(|r| r.image_refs.len()).sum();
    assert_eq!(per_split.values().sum::<usize>(), images);
}

#[test]
fn seed_changes_assignment_not_sizes() {
    let c = corpus(&[2; 101]);
    let a = make_splits(&c, RATIOS, 1).unwrap();
    let b = make_splits(&c, RATIOS, 2).unwrap();
    assert_ne!(a, b);
    for split in Split::ALL {
        assert_eq!(a.count(split), b.count(split));
    }
}
