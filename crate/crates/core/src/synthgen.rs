//! Deterministic synthetic corpora for exercising the pipeline without real
//! data.
//!
//! A generated bundle holds a vocabulary, a corpus, one 8×8 grayscale image
//! per image reference and a manifest. The manifest lists every finding, the
//! expected answer frequencies and the image encoding, so tests can recompute
//! ground truth without rerunning the generator.
//!
//! Image layout: element `e` owns cells `e * max_instances ..` in row-major
//! order, one cell per instance. An empty cell is 0; an occupied cell holds
//! the 16-bit code of the instance's attribute tail (everything after the
//! element in its finding code). Codes of one element are ordered by degree
//! first, so brighter cells mean higher degree values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Cursor};
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{ExtendedColorType, ImageBuffer, ImageFormat, Luma};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::write_atomic;
use crate::lexicon::{Category, Corpus, CorpusError, Vocabulary, VocabularyError, NORMAL_SENTINEL};
use crate::template::{classify_finding, l1_id, l2_id, l3_id, Dimension, NO, NO_SELECTION, YES};

pub const GRID: usize = 8;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub patient_count: usize,
    pub body_regions: usize,
    /// Anatomy terms finer than each region's organ.
    pub zones_per_region: usize,
    pub diseases: usize,
    pub signs: usize,
    pub objects: usize,
    pub abnormal_regions: usize,
    pub degree_values: usize,
    pub descriptive_values: usize,
    pub positional_values: usize,
    /// Images per patient are drawn from `1..=max_images`.
    pub max_images: usize,
    /// Distinct elements per abnormal patient are drawn from `1..=max_findings`.
    pub max_findings: usize,
    pub max_instances: usize,
    pub multi_instance_prob: f64,
    pub multi_value_prob: f64,
    pub normal_prob: f64,
    /// Pads the vocabulary with unused terms up to this size.
    pub vocabulary_size: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            patient_count: 500,
            body_regions: 3,
            zones_per_region: 2,
            diseases: 4,
            signs: 4,
            objects: 2,
            abnormal_regions: 2,
            degree_values: 3,
            descriptive_values: 3,
            positional_values: 2,
            max_images: 4,
            max_findings: 3,
            max_instances: 2,
            multi_instance_prob: 0.15,
            multi_value_prob: 0.2,
            normal_prob: 0.3,
            vocabulary_size: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config cannot satisfy coverage: {0}")]
    Impossible(String),
    #[error("generated vocabulary is invalid: {0}")]
    Vocabulary(#[from] VocabularyError),
    #[error("generated corpus is invalid: {0}")]
    Corpus(#[from] CorpusError),
    #[error("image `{name}`: {detail}")]
    Image { name: String, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SynthConfig {
    pub fn element_count(&self) -> usize {
        self.diseases + self.signs + self.objects + self.abnormal_regions
    }

    fn base_vocabulary_size(&self) -> usize {
        self.body_regions * (1 + self.zones_per_region)
            + self.element_count()
            + self.degree_values
            + self.descriptive_values
            + self.positional_values
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("patient_count", self.patient_count),
            ("body_regions", self.body_regions),
            ("zones_per_region", self.zones_per_region),
            ("diseases", self.diseases),
            ("signs", self.signs),
            ("objects", self.objects),
            ("abnormal_regions", self.abnormal_regions),
            ("degree_values", self.degree_values),
            ("descriptive_values", self.descriptive_values),
            ("positional_values", self.positional_values),
            ("max_images", self.max_images),
            ("max_findings", self.max_findings),
            ("max_instances", self.max_instances),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SynthError::InvalidConfig(format!(
                "{name} must be at least 1"
            )));
        }
        for (name, p) in [
            ("multi_instance_prob", self.multi_instance_prob),
            ("multi_value_prob", self.multi_value_prob),
            ("normal_prob", self.normal_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        let cells = self.element_count() * self.max_instances;
        if cells > GRID * GRID {
            return Err(SynthError::InvalidConfig(format!(
                "{} elements × {} instances need {cells} cells, the image has {}",
                self.element_count(),
                self.max_instances,
                GRID * GRID
            )));
        }
        if let Some(n) = self.vocabulary_size {
            if n < self.base_vocabulary_size() {
                return Err(SynthError::InvalidConfig(format!(
                    "vocabulary_size {n} is below the {} terms the config needs",
                    self.base_vocabulary_size()
                )));
            }
        }
        Ok(())
    }
}

struct Element {
    name: String,
    category: Category,
    region: Option<usize>,
}

struct Layout {
    regions: Vec<String>,
    organs: Vec<String>,
    zones: Vec<Vec<String>>,
    elements: Vec<Element>,
    degrees: Vec<String>,
    patterns: Vec<String>,
    sides: Vec<String>,
    fillers: Vec<String>,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix} {i}")).collect()
}

impl Layout {
    fn new(cfg: &SynthConfig) -> Self {
        let regions = names("region", cfg.body_regions);
        let organs = names("organ", cfg.body_regions);
        let zones = organs
            .iter()
            .map(|o| names(&format!("{o} zone"), cfg.zones_per_region))
            .collect();
        let mut elements = Vec::new();
        for (prefix, category, n) in [
            ("disease", Category::Disease, cfg.diseases),
            ("sign", Category::Sign, cfg.signs),
            ("object", Category::Object, cfg.objects),
            ("structure", Category::Anatomy, cfg.abnormal_regions),
        ] {
            for (i, name) in names(prefix, n).into_iter().enumerate() {
                let region = (category != Category::Object).then_some(i % cfg.body_regions);
                elements.push(Element {
                    name,
                    category,
                    region,
                });
            }
        }
        let fillers = names(
            "filler",
            cfg.vocabulary_size
                .unwrap_or(0)
                .saturating_sub(cfg.base_vocabulary_size()),
        );
        Layout {
            regions,
            organs,
            zones,
            elements,
            degrees: names("degree", cfg.degree_values),
            patterns: names("pattern", cfg.descriptive_values),
            sides: names("side", cfg.positional_values),
            fillers,
        }
    }

    fn vocabulary_text(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, category: Category, region: Option<&str>| {
            out.push_str(&format!(
                "{name},{},{}\n",
                category.label(),
                region.unwrap_or("")
            ));
        };
        for (r, region) in self.regions.iter().enumerate() {
            line(&self.organs[r], Category::Anatomy, Some(region));
            for z in &self.zones[r] {
                line(z, Category::Anatomy, Some(region));
            }
        }
        for e in &self.elements {
            line(
                &e.name,
                e.category,
                e.region.map(|r| self.regions[r].as_str()),
            );
        }
        for d in &self.degrees {
            line(d, Category::AttrDegree, None);
        }
        for p in self.patterns.iter().chain(&self.fillers) {
            line(p, Category::AttrDescriptive, None);
        }
        for s in &self.sides {
            line(s, Category::AttrPositional, None);
        }
        out
    }

    fn degree_rank(&self, tail: &[String]) -> usize {
        tail.iter()
            .find_map(|t| self.degrees.iter().position(|d| d == t))
            .map_or(0, |i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Instance {
    locations: Vec<String>,
    positional: Vec<String>,
    descriptive: Vec<String>,
    degree: Option<String>,
}

impl Instance {
    fn tail(&self) -> Vec<String> {
        self.locations
            .iter()
            .chain(&self.positional)
            .chain(&self.descriptive)
            .chain(&self.degree)
            .cloned()
            .collect()
    }

    /// Positional values as the template sees them: locations after the
    /// primary site plus positional attributes.
    fn positional_values(&self, e: &Element) -> usize {
        let skip = usize::from(e.category != Category::Anatomy && !self.locations.is_empty());
        self.locations.len() - skip + self.positional.len()
    }

    fn is_multi_valued(&self, e: &Element) -> bool {
        self.descriptive.len() >= 2 || self.positional_values(e) >= 2
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [String]) -> &'a String {
    &xs[rng.gen_range(0..xs.len())]
}

fn draw_instance(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    layout: &Layout,
    e: &Element,
) -> Instance {
    let mut inst = Instance {
        locations: Vec::new(),
        positional: Vec::new(),
        descriptive: Vec::new(),
        degree: None,
    };
    let located = matches!(e.category, Category::Disease | Category::Sign);
    if let (true, Some(r)) = (located, e.region) {
        inst.locations.push(layout.organs[r].clone());
        if rng.gen_bool(0.5) {
            inst.locations.push(pick(rng, &layout.zones[r]).clone());
        }
    }
    if rng.gen_bool(0.3) {
        inst.positional.push(pick(rng, &layout.sides).clone());
    }
    if rng.gen_bool(0.5) {
        inst.descriptive.push(pick(rng, &layout.patterns).clone());
    }
    if rng.gen_bool(0.6) {
        inst.degree = Some(pick(rng, &layout.degrees).clone());
    }
    if cfg.multi_value_prob > 0.0 && rng.gen_bool(cfg.multi_value_prob) {
        make_multi_valued(rng, layout, e, &mut inst);
    }
    inst
}

/// Gives the instance two values in one dimension if the vocabulary allows.
fn make_multi_valued(
    rng: &mut ChaCha8Rng,
    layout: &Layout,
    e: &Element,
    inst: &mut Instance,
) -> bool {
    if inst.is_multi_valued(e) {
        return true;
    }
    if layout.patterns.len() >= 2 {
        let idx = sample(rng, layout.patterns.len(), 2);
        let mut picked: Vec<String> = idx.iter().map(|i| layout.patterns[i].clone()).collect();
        picked.sort();
        inst.descriptive = picked;
        return true;
    }
    if layout.sides.len() >= 2 {
        let idx = sample(rng, layout.sides.len(), 2);
        let mut picked: Vec<String> = idx.iter().map(|i| layout.sides[i].clone()).collect();
        picked.sort();
        inst.positional = picked;
        return true;
    }
    let zone_room = match (e.category, e.region) {
        (Category::Disease | Category::Sign, Some(r)) => Some(r),
        _ => None,
    };
    if let Some(r) = zone_room {
        inst.locations.truncate(1);
        inst.locations.push(layout.zones[r][0].clone());
        inst.positional = vec![layout.sides[0].clone()];
        return true;
    }
    false
}

struct Patient {
    images: usize,
    normal: bool,
    /// (element index, instances), sorted by element index.
    findings: Vec<(usize, Vec<Instance>)>,
}

impl Patient {
    fn has(&self, e: usize) -> bool {
        self.findings.iter().any(|(x, _)| *x == e)
    }

    fn add(&mut self, e: usize, instances: Vec<Instance>) {
        self.normal = false;
        let at = self.findings.partition_point(|(x, _)| *x < e);
        self.findings.insert(at, (e, instances));
    }
}

/// Per-element image encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellEncoding {
    pub element: String,
    pub l2_node: String,
    pub first_cell: usize,
    pub cells: usize,
    /// Attribute tail (finding code without the element) → cell intensity.
    pub codes: BTreeMap<String, u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub patient_id: String,
    pub image_refs: Vec<String>,
    /// Finding codes in corpus order; empty for normal studies.
    pub findings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub vocab_fingerprint: String,
    pub patients: Vec<ManifestPatient>,
    pub finding_count: usize,
    /// L2 node id → most instances in one patient.
    pub max_instances: BTreeMap<String, u32>,
    /// Node id → answer value → count over reports, one report per image.
    /// L3 values count once per element instance of a report.
    pub answer_frequencies: BTreeMap<String, BTreeMap<String, u64>>,
    pub encoding: Vec<CellEncoding>,
}

impl SynthManifest {
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("json value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub struct SynthOutput {
    pub vocabulary: String,
    pub corpus: String,
    pub manifest: SynthManifest,
    /// Image file name → PGM bytes.
    pub images: BTreeMap<String, Vec<u8>>,
}

pub const VOCABULARY_FILE: &str = "vocabulary.txt";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

impl SynthOutput {
    /// Writes the bundle under `dir`, each file atomically.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir.join(IMAGE_DIR))?;
        write_atomic(dir.join(VOCABULARY_FILE), self.vocabulary.as_bytes())?;
        write_atomic(dir.join(CORPUS_FILE), self.corpus.as_bytes())?;
        for (name, bytes) in &self.images {
            write_atomic(dir.join(IMAGE_DIR).join(name), bytes)?;
        }
        write_atomic(dir.join(MANIFEST_FILE), self.manifest.to_json().as_bytes())?;
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_elements = layout.elements.len();

    let mut patients: Vec<Patient> = (0..cfg.patient_count)
        .map(|_| {
            let images = rng.gen_range(1..=cfg.max_images);
            let mut p = Patient {
                images,
                normal: true,
                findings: Vec::new(),
            };
            if rng.gen_bool(cfg.normal_prob) {
                return p;
            }
            let k = rng.gen_range(1..=cfg.max_findings.min(n_elements));
            let mut chosen = sample(&mut rng, n_elements, k).into_vec();
            chosen.sort_unstable();
            for e in chosen {
                let n = if cfg.max_instances >= 2 && rng.gen_bool(cfg.multi_instance_prob) {
                    rng.gen_range(2..=cfg.max_instances)
                } else {
                    1
                };
                let instances = (0..n)
                    .map(|_| draw_instance(&mut rng, cfg, &layout, &layout.elements[e]))
                    .collect();
                p.add(e, instances);
            }
            p
        })
        .collect();

    if cfg.normal_prob < 1.0 {
        patch_coverage(&mut rng, cfg, &layout, &mut patients)?;
    }

    let width = cfg.patient_count.to_string().len().max(4);
    let vocabulary = layout.vocabulary_text();
    let mut corpus = String::new();
    let mut manifest_patients = Vec::new();
    for (i, p) in patients.iter().enumerate() {
        let patient_id = format!("p{:0width$}", i + 1);
        let image_refs: Vec<String> = (1..=p.images)
            .map(|k| format!("{patient_id}_{k}.pgm"))
            .collect();
        let findings: Vec<String> = p
            .findings
            .iter()
            .flat_map(|(e, insts)| {
                let name = &layout.elements[*e].name;
                insts.iter().map(move |inst| {
                    std::iter::once(name.clone())
                        .chain(inst.tail())
                        .collect::<Vec<_>>()
                        .join("/")
                })
            })
            .collect();
        let codes = if findings.is_empty() {
            NORMAL_SENTINEL.to_string()
        } else {
            findings.join(";")
        };
        corpus.push_str(&format!(
            "{patient_id} | {} | {codes}\n",
            image_refs.join(",")
        ));
        manifest_patients.push(ManifestPatient {
            patient_id,
            image_refs,
            findings,
        });
    }

    let vocab = Vocabulary::parse(&vocabulary)?;
    let parsed = Corpus::parse(&corpus, vocab.clone())?;
    let encoding = build_encoding(cfg, &layout, &patients, &parsed);
    let mut images = BTreeMap::new();
    for (p, record) in patients.iter().zip(&manifest_patients) {
        let bytes = render_image(cfg, &layout, &encoding, p);
        for name in &record.image_refs {
            images.insert(name.clone(), bytes.clone());
        }
    }
    let (max_instances, answer_frequencies) = frequencies(&parsed);
    let manifest = SynthManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        vocab_fingerprint: vocab.fingerprint(),
        finding_count: parsed.finding_count(),
        patients: manifest_patients,
        max_instances,
        answer_frequencies,
        encoding,
    };
    Ok(SynthOutput {
        vocabulary,
        corpus,
        manifest,
        images,
    })
}

/// Ensures every element occurs, some element repeats within a patient and
/// some instance is multi-valued, as far as the probabilities ask for them.
fn patch_coverage(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    layout: &Layout,
    patients: &mut [Patient],
) -> Result<(), SynthError> {
    let mut cursor = 0;
    for e in 0..layout.elements.len() {
        if patients.iter().any(|p| p.has(e)) {
            continue;
        }
        let n = patients.len();
        let slot = (0..n)
            .map(|i| (cursor + i) % n)
            .find(|&i| patients[i].findings.len() < cfg.max_findings)
            .ok_or_else(|| {
                SynthError::Impossible(format!(
                    "{} patients with at most {} elements each cannot cover {} elements",
                    n,
                    cfg.max_findings,
                    layout.elements.len()
                ))
            })?;
        let inst = draw_instance(rng, cfg, layout, &layout.elements[e]);
        patients[slot].add(e, vec![inst]);
        cursor = slot + 1;
    }

    let repeated = |ps: &[Patient]| {
        ps.iter()
            .flat_map(|p| &p.findings)
            .any(|(_, i)| i.len() >= 2)
    };
    if cfg.multi_instance_prob > 0.0 && !repeated(patients) {
        if cfg.max_instances < 2 {
            return Err(SynthError::Impossible(
                "multi_instance_prob > 0 needs max_instances >= 2".into(),
            ));
        }
        let (e, insts) = patients
            .iter_mut()
            .flat_map(|p| p.findings.iter_mut())
            .next()
            .expect("element coverage added findings");
        let extra = draw_instance(rng, cfg, layout, &layout.elements[*e]);
        insts.push(extra);
    }

    let multi = |ps: &[Patient]| {
        ps.iter().flat_map(|p| &p.findings).any(|(e, insts)| {
            insts
                .iter()
                .any(|i| i.is_multi_valued(&layout.elements[*e]))
        })
    };
    if cfg.multi_value_prob > 0.0 && !multi(patients) {
        let done = patients
            .iter_mut()
            .flat_map(|p| p.findings.iter_mut())
            .any(|(e, insts)| make_multi_valued(rng, layout, &layout.elements[*e], &mut insts[0]));
        if !done {
            return Err(SynthError::Impossible(
                "multi_value_prob > 0 but no dimension offers two values".into(),
            ));
        }
    }
    Ok(())
}

fn build_encoding(
    cfg: &SynthConfig,
    layout: &Layout,
    patients: &[Patient],
    corpus: &Corpus,
) -> Vec<CellEncoding> {
    let mut tails: Vec<BTreeSet<(usize, Vec<String>)>> =
        vec![BTreeSet::new(); layout.elements.len()];
    for p in patients {
        for (e, insts) in &p.findings {
            for inst in insts {
                let tail = inst.tail();
                tails[*e].insert((layout.degree_rank(&tail), tail));
            }
        }
    }
    let l2_of: BTreeMap<String, String> = corpus
        .records
        .iter()
        .flat_map(|r| &r.findings)
        .map(|f| {
            let c = classify_finding(f);
            (c.element.clone(), l2_id(&c.topic, &c.element))
        })
        .collect();
    layout
        .elements
        .iter()
        .enumerate()
        .map(|(e, el)| {
            let step = (u16::MAX as usize / (tails[e].len() + 1)).max(1);
            CellEncoding {
                element: el.name.clone(),
                l2_node: l2_of.get(&el.name).cloned().unwrap_or_default(),
                first_cell: e * cfg.max_instances,
                cells: cfg.max_instances,
                codes: tails[e]
                    .iter()
                    .enumerate()
                    .map(|(i, (_, tail))| (tail.join("/"), ((i + 1) * step) as u16))
                    .collect(),
            }
        })
        .collect()
}

fn render_image(
    cfg: &SynthConfig,
    layout: &Layout,
    encoding: &[CellEncoding],
    p: &Patient,
) -> Vec<u8> {
    let mut grid = ImageBuffer::<Luma<u16>, Vec<u16>>::new(GRID as u32, GRID as u32);
    for (e, insts) in &p.findings {
        debug_assert_eq!(encoding[*e].element, layout.elements[*e].name);
        for (k, inst) in insts.iter().enumerate() {
            let cell = e * cfg.max_instances + k;
            let code = encoding[*e].codes[&inst.tail().join("/")];
            grid.put_pixel((cell % GRID) as u32, (cell / GRID) as u32, Luma([code]));
        }
    }
    let mut bytes = Vec::new();
    PnmEncoder::new(Cursor::new(&mut bytes))
        .with_header(
            GraymapHeader {
                encoding: SampleEncoding::Binary,
                height: GRID as u32,
                width: GRID as u32,
                maxwhite: u16::MAX.into(),
            }
            .into(),
        )
        .encode(
            grid.as_raw().as_slice(),
            GRID as u32,
            GRID as u32,
            ExtendedColorType::L16,
        )
        .expect("in-memory PGM encoding succeeds");
    bytes
}

/// Recovers the finding codes drawn in an image, in corpus order.
pub fn decode_image(
    name: &str,
    bytes: &[u8],
    manifest: &SynthManifest,
) -> Result<Vec<String>, SynthError> {
    let err = |detail: String| SynthError::Image {
        name: name.to_string(),
        detail,
    };
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| err(e.to_string()))?
        .to_luma16();
    if img.dimensions() != (GRID as u32, GRID as u32) {
        return Err(err(format!(
            "expected {GRID}×{GRID}, got {:?}",
            img.dimensions()
        )));
    }
    let mut codes = Vec::new();
    for enc in &manifest.encoding {
        let by_value: BTreeMap<u16, &str> =
            enc.codes.iter().map(|(t, v)| (*v, t.as_str())).collect();
        for cell in enc.first_cell..enc.first_cell + enc.cells {
            let v = img.get_pixel((cell % GRID) as u32, (cell / GRID) as u32)[0];
            if v == 0 {
                continue;
            }
            let tail = by_value.get(&v).ok_or_else(|| {
                err(format!(
                    "cell {cell} holds unknown code {v} for `{}`",
                    enc.element
                ))
            })?;
            codes.push(if tail.is_empty() {
                enc.element.clone()
            } else {
                format!("{}/{tail}", enc.element)
            });
        }
    }
    Ok(codes)
}

type Frequencies = BTreeMap<String, BTreeMap<String, u64>>;

fn frequencies(corpus: &Corpus) -> (BTreeMap<String, u32>, Frequencies) {
    let classified: Vec<Vec<_>> = corpus
        .records
        .iter()
        .map(|r| r.findings.iter().map(classify_finding).collect())
        .collect();
    let mut l1 = BTreeSet::new();
    let mut l2 = BTreeSet::new();
    let mut l3: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut max_instances: BTreeMap<String, u32> = BTreeMap::new();
    for findings in &classified {
        let mut per_record: BTreeMap<String, u32> = BTreeMap::new();
        for c in findings {
            l1.insert(l1_id(&c.topic));
            let l2_node = l2_id(&c.topic, &c.element);
            *per_record.entry(l2_node.clone()).or_default() += 1;
            for d in Dimension::ALL {
                if !c.values[d as usize].is_empty() {
                    l3.entry(l2_node.clone())
                        .or_default()
                        .insert(l3_id(&c.topic, &c.element, d));
                }
            }
            l2.insert(l2_node);
        }
        for (node, n) in per_record {
            let m = max_instances.entry(node).or_default();
            *m = (*m).max(n);
        }
    }

    let mut freq: Frequencies = BTreeMap::new();
    let mut bump = |node: &str, value: &str, n: u64| {
        *freq
            .entry(node.to_string())
            .or_default()
            .entry(value.to_string())
            .or_default() += n;
    };
    for (record, findings) in corpus.records.iter().zip(&classified) {
        let reports = record.image_refs.len() as u64;
        let topics: BTreeSet<String> = findings.iter().map(|c| l1_id(&c.topic)).collect();
        let elements: BTreeSet<String> = findings
            .iter()
            .map(|c| l2_id(&c.topic, &c.element))
            .collect();
        for node in &l1 {
            bump(node, if topics.contains(node) { YES } else { NO }, reports);
        }
        for node in &l2 {
            bump(
                node,
                if elements.contains(node) { YES } else { NO },
                reports,
            );
        }
        for c in findings {
            let l2_node = l2_id(&c.topic, &c.element);
            for d in Dimension::ALL {
                let node = l3_id(&c.topic, &c.element, d);
                if !l3.get(&l2_node).is_some_and(|s| s.contains(&node)) {
                    continue;
                }
                let values = &c.values[d as usize];
                if values.is_empty() {
                    bump(&node, NO_SELECTION, reports);
                }
                for v in values {
                    bump(&node, v, reports);
                }
            }
        }
    }
    (max_instances, freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            patient_count: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.vocabulary, b.vocabulary);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.manifest.to_json(), b.manifest.to_json());
        assert_eq!(a.images, b.images);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn images_decode_to_findings() {
        let out = generate(&small()).unwrap();
        for p in &out.manifest.patients {
            for name in &p.image_refs {
                let codes = decode_image(name, &out.images[name], &out.manifest).unwrap();
                assert_eq!(codes, p.findings, "{name}");
            }
        }
    }

    #[test]
    fn coverage_is_patched() {
        let cfg = SynthConfig {
            patient_count: 3,
            multi_instance_prob: 0.01,
            multi_value_prob: 0.01,
            normal_prob: 0.9,
            max_findings: 4,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let corpus = &out.corpus;
        for i in 1..=4 {
            assert!(corpus.contains(&format!("disease {i}")), "{corpus}");
        }
        assert!(out.manifest.max_instances.values().any(|&n| n >= 2));
    }

    #[test]
    fn impossible_configs() {
        let cfg = SynthConfig {
            patient_count: 2,
            max_findings: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(SynthError::Impossible(_))));
        let cfg = SynthConfig {
            max_instances: 1,
            multi_instance_prob: 0.5,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(SynthError::Impossible(_))));
        let cfg = SynthConfig {
            normal_prob: 1.5,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(SynthError::InvalidConfig(_))));
        let cfg = SynthConfig {
            max_instances: 6,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn all_normal() {
        let out = generate(&SynthConfig {
            normal_prob: 1.0,
            ..small()
        })
        .unwrap();
        assert_eq!(out.manifest.finding_count, 0);
        assert!(out.corpus.lines().all(|l| l.ends_with("| normal")));
    }

    #[test]
    fn padded_vocabulary() {
        let out = generate(&SynthConfig {
            vocabulary_size: Some(178),
            ..small()
        })
        .unwrap();
        assert_eq!(out.vocabulary.lines().count(), 178);
        let v = Vocabulary::parse(&out.vocabulary).unwrap();
        assert_eq!(v.render(), out.vocabulary);
    }

    #[test]
    fn bundle_written_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small()).unwrap();
        out.write_to(dir.path()).unwrap();
        let manifest =
            SynthManifest::from_json(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(manifest, out.manifest);
        let images = fs::read_dir(dir.path().join(IMAGE_DIR)).unwrap().count();
        assert_eq!(images, out.images.len());
    }
}
