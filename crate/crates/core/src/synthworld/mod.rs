//! Symbolic image-editing world.
//!
//! A [`Scene`] is a fixed number of regions, each carrying a color, shape and
//! texture. An [`Instruction`] asks for one to three attribute changes; a
//! simulated editor produces an [`EditResult`] that records, for every clause,
//! whether it was executed, executed with the wrong value, or missed, plus any
//! uninstructed changes and a visual artifact level. The rubric in
//! [`score_ground_truth`] turns that hidden record into 1–4 scores.

mod explain;
mod io;
mod vocab;

pub use explain::{verbalize, DefectRecord, Finding};
pub use io::{read_dataset, read_vocab, write_dataset, write_vocab, DatasetError, SCHEMA_VERSION};
pub use vocab::{Vocab, Vocabs, ART_BINS};

use serde::{Deserialize, Serialize};

use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
    Texture,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Shape, Attribute::Texture];

    /// Number of values the attribute can take.
    pub fn cardinality(self) -> usize {
        match self {
            Attribute::Color => 6,
            Attribute::Shape => 5,
            Attribute::Texture => 4,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Texture => "texture",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub color: usize,
    pub shape: usize,
    pub texture: usize,
}

impl Region {
    pub fn get(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Color => self.color,
            Attribute::Shape => self.shape,
            Attribute::Texture => self.texture,
        }
    }

    pub fn set(&mut self, attr: Attribute, value: usize) {
        match attr {
            Attribute::Color => self.color = value,
            Attribute::Shape => self.shape = value,
            Attribute::Texture => self.texture = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub regions: Vec<Region>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clause {
    pub region: usize,
    pub attribute: Attribute,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub clauses: Vec<Clause>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClauseStatus {
    Executed,
    /// The attribute was changed, but to `value` instead of the target.
    WrongValue { value: usize },
    Missed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseOutcome {
    pub clause: Clause,
    #[serde(flatten)]
    pub status: ClauseStatus,
}

/// An uninstructed change: `attribute` of `region` went from `from` to `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverEdit {
    pub region: usize,
    pub attribute: Attribute,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub edited: Scene,
    pub defects: Vec<ClauseOutcome>,
    pub overedits: Vec<OverEdit>,
    pub artifact_level: f64,
}

impl EditResult {
    /// Builds the edited scene from the source and the change record.
    pub fn assemble(
        source: &Scene,
        defects: Vec<ClauseOutcome>,
        overedits: Vec<OverEdit>,
        artifact_level: f64,
    ) -> Self {
        let mut edited = source.clone();
        for d in &defects {
            let c = d.clause;
            match d.status {
                ClauseStatus::Executed => edited.regions[c.region].set(c.attribute, c.target),
                ClauseStatus::WrongValue { value } => edited.regions[c.region].set(c.attribute, value),
                ClauseStatus::Missed => {}
            }
        }
        for o in &overedits {
            edited.regions[o.region].set(o.attribute, o.to);
        }
        Self {
            edited,
            defects,
            overedits,
            artifact_level,
        }
    }

    /// True when `edited` equals `source` with exactly the recorded changes.
    pub fn is_consistent_with(&self, source: &Scene) -> bool {
        let rebuilt = Self::assemble(
            source,
            self.defects.clone(),
            self.overedits.clone(),
            self.artifact_level,
        );
        rebuilt.edited == self.edited
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorQuality {
    pub p_exec: f64,
    pub p_wrong: f64,
    pub p_overedit: f64,
    pub artifact_mean: f64,
}

impl EditorQuality {
    pub fn perfect() -> Self {
        Self {
            p_exec: 1.0,
            p_wrong: 0.0,
            p_overedit: 0.0,
            artifact_mean: 0.0,
        }
    }
}

/// Ground-truth rubric scores, each in 1..=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "if")]
    pub instruction: u8,
    #[serde(rename = "vq")]
    pub visual: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefLabel {
    A,
    B,
    Skip,
}

impl PrefLabel {
    fn flipped(self) -> Self {
        match self {
            PrefLabel::A => PrefLabel::B,
            PrefLabel::B => PrefLabel::A,
            PrefLabel::Skip => PrefLabel::Skip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabels {
    pub instruction: PrefLabel,
    pub visual: PrefLabel,
    /// Whether the IF / VQ label was flipped by annotation noise.
    pub flipped: [bool; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_regions: usize,
    pub max_clauses: usize,
    /// Label flip probability.
    pub eta: f64,
    pub artifact_sd: f64,
    /// (attribute, value) targets that only appear in evaluation instructions.
    pub holdout: Vec<(Attribute, usize)>,
    /// Editor priors: p_exec ~ U(lo, hi), p_overedit ~ U(0, hi),
    /// artifact_mean ~ U(0, hi).
    pub p_exec_range: (f64, f64),
    pub p_overedit_max: f64,
    pub artifact_mean_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_regions: 4,
            max_clauses: 3,
            eta: 0.05,
            artifact_sd: 0.15,
            holdout: vec![
                (Attribute::Color, 5),
                (Attribute::Shape, 4),
                (Attribute::Texture, 3),
            ],
            p_exec_range: (0.3, 1.0),
            p_overedit_max: 0.15,
            artifact_mean_max: 0.8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_regions == 0 {
            return Err("world.n_regions must be positive".into());
        }
        if self.max_clauses == 0 || self.max_clauses > 3 {
            return Err("world.max_clauses must be in 1..=3".into());
        }
        if !(0.0..0.5).contains(&self.eta) {
            return Err("world.eta must be in [0, 0.5)".into());
        }
        for &(a, v) in &self.holdout {
            if v >= a.cardinality() {
                return Err(format!("world.holdout value {v} out of range for {}", a.name()));
            }
        }
        Ok(())
    }

    fn is_holdout(&self, attr: Attribute, value: usize) -> bool {
        self.holdout.iter().any(|&(a, v)| a == attr && v == value)
    }
}

pub fn gen_scene(rng: &mut SeedStream, config: &WorldConfig) -> Scene {
    let regions = (0..config.n_regions)
        .map(|_| Region {
            color: rng.below(Attribute::Color.cardinality()),
            shape: rng.below(Attribute::Shape.cardinality()),
            texture: rng.below(Attribute::Texture.cardinality()),
        })
        .collect();
    Scene { regions }
}

/// Random value of `attr` different from `current`.
pub(crate) fn other_value(rng: &mut SeedStream, attr: Attribute, current: usize) -> usize {
    let v = rng.below(attr.cardinality() - 1);
    if v >= current {
        v + 1
    } else {
        v
    }
}

/// Random value of `attr` different from both `a` and `b`.
pub(crate) fn third_value(rng: &mut SeedStream, attr: Attribute, a: usize, b: usize) -> usize {
    let choices: Vec<usize> = (0..attr.cardinality()).filter(|&v| v != a && v != b).collect();
    choices[rng.below(choices.len())]
}

/// Samples a 1..=max_clauses instruction with distinct (region, attribute)
/// slots and targets that differ from the source. Training instructions avoid
/// every holdout target; evaluation instructions contain at least one.
pub fn gen_instruction(
    rng: &mut SeedStream,
    scene: &Scene,
    config: &WorldConfig,
    split: Split,
) -> Instruction {
    loop {
        let n = 1 + rng.below(config.max_clauses);
        let mut slots: Vec<(usize, Attribute)> = (0..scene.regions.len())
            .flat_map(|r| Attribute::ALL.into_iter().map(move |a| (r, a)))
            .collect();
        rng.shuffle(&mut slots);
        let clauses: Vec<Clause> = slots[..n]
            .iter()
            .map(|&(region, attribute)| Clause {
                region,
                attribute,
                target: other_value(rng, attribute, scene.regions[region].get(attribute)),
            })
            .collect();
        let held = clauses
            .iter()
            .filter(|c| config.is_holdout(c.attribute, c.target))
            .count();
        let ok = match split {
            Split::Train => held == 0,
            Split::Eval => held > 0 || config.holdout.is_empty(),
        };
        if ok {
            return Instruction { clauses };
        }
    }
}

/// Simulated editor. Each clause is executed with probability `p_exec`, set
/// to a wrong value with probability `p_wrong`, and missed otherwise; every
/// uninstructed slot is over-edited with probability `p_overedit`.
pub fn apply_editor(
    scene: &Scene,
    instruction: &Instruction,
    quality: &EditorQuality,
    artifact_sd: f64,
    rng: &mut SeedStream,
) -> EditResult {
    let defects = instruction
        .clauses
        .iter()
        .map(|&clause| {
            let u = rng.uniform();
            let status = if u < quality.p_exec {
                ClauseStatus::Executed
            } else if u < quality.p_exec + quality.p_wrong {
                let src = scene.regions[clause.region].get(clause.attribute);
                ClauseStatus::WrongValue {
                    value: third_value(rng, clause.attribute, src, clause.target),
                }
            } else {
                ClauseStatus::Missed
            };
            ClauseOutcome { clause, status }
        })
        .collect();
    let mut overedits = Vec::new();
    for (r, region) in scene.regions.iter().enumerate() {
        for attr in Attribute::ALL {
            let instructed = instruction
                .clauses
                .iter()
                .any(|c| c.region == r && c.attribute == attr);
            if instructed {
                continue;
            }
            if rng.bernoulli(quality.p_overedit) {
                let from = region.get(attr);
                overedits.push(OverEdit {
                    region: r,
                    attribute: attr,
                    from,
                    to: other_value(rng, attr, from),
                });
            }
        }
    }
    let artifact = (quality.artifact_mean + artifact_sd * rng.normal()).clamp(0.0, 1.0);
    EditResult::assemble(scene, defects, overedits, artifact)
}

/// Maps an artifact level to its visual-quality band (0 = cleanest).
pub fn artifact_band(level: f64) -> u8 {
    if level < 0.1 {
        0
    } else if level < 0.3 {
        1
    } else if level < 0.6 {
        2
    } else {
        3
    }
}

/// The 1–4 rubric. IF: 4 for a complete, exclusive edit; 3 for one minor
/// flaw (a single over-edit, or a single wrong value with nothing missed);
/// 2 for missing clauses, two or more over-edits, or several wrong values;
/// 1 when no clause was executed at all. VQ follows the artifact band.
pub fn score_ground_truth(result: &EditResult) -> Scores {
    let mut executed = 0;
    let mut wrong = 0;
    let mut missed = 0;
    for d in &result.defects {
        match d.status {
            ClauseStatus::Executed => executed += 1,
            ClauseStatus::WrongValue { .. } => wrong += 1,
            ClauseStatus::Missed => missed += 1,
        }
    }
    let over = result.overedits.len();
    let instruction = if executed == 0 {
        1
    } else if wrong == 0 && missed == 0 && over == 0 {
        4
    } else if missed > 0 || over >= 2 || wrong >= 2 {
        2
    } else {
        3
    };
    Scores {
        instruction,
        visual: 4 - artifact_band(result.artifact_level),
    }
}

fn prefer(a: u8, b: u8) -> PrefLabel {
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => PrefLabel::A,
        std::cmp::Ordering::Less => PrefLabel::B,
        std::cmp::Ordering::Equal => PrefLabel::Skip,
    }
}

/// Per-dimension preference labels from ground-truth scores; ties become
/// `Skip`, other labels flip with probability `eta`.
pub fn make_pair(a: &EditResult, b: &EditResult, eta: f64, rng: &mut SeedStream) -> PairLabels {
    let (sa, sb) = (score_ground_truth(a), score_ground_truth(b));
    let mut labels = [prefer(sa.instruction, sb.instruction), prefer(sa.visual, sb.visual)];
    let mut flipped = [false; 2];
    for (label, flip) in labels.iter_mut().zip(flipped.iter_mut()) {
        let draw = rng.bernoulli(eta);
        if draw && *label != PrefLabel::Skip {
            *label = label.flipped();
            *flip = true;
        }
    }
    PairLabels {
        instruction: labels[0],
        visual: labels[1],
        flipped,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene: Scene,
    pub instruction: Instruction,
    pub result_a: EditResult,
    pub result_b: EditResult,
    pub labels: PairLabels,
    pub gt_a: Scores,
    pub gt_b: Scores,
    pub expl_a: Vec<String>,
    pub expl_b: Vec<String>,
}

fn sample_quality(rng: &mut SeedStream, config: &WorldConfig) -> EditorQuality {
    let (lo, hi) = config.p_exec_range;
    let p_exec = lo + (hi - lo) * rng.uniform();
    EditorQuality {
        p_exec,
        p_wrong: (1.0 - p_exec) * 0.6 * rng.uniform(),
        p_overedit: config.p_overedit_max * rng.uniform(),
        artifact_mean: config.artifact_mean_max * rng.uniform(),
    }
}

/// One record: a scene, an instruction and two independently sampled editors.
pub fn gen_record(
    rng: &mut SeedStream,
    config: &WorldConfig,
    split: Split,
    vocabs: &Vocabs,
) -> DatasetRecord {
    let scene = gen_scene(rng, config);
    let instruction = gen_instruction(rng, &scene, config, split);
    let qa = sample_quality(rng, config);
    let qb = sample_quality(rng, config);
    let result_a = apply_editor(&scene, &instruction, &qa, config.artifact_sd, rng);
    let result_b = apply_editor(&scene, &instruction, &qb, config.artifact_sd, rng);
    let labels = make_pair(&result_a, &result_b, config.eta, rng);
    DatasetRecord {
        gt_a: score_ground_truth(&result_a),
        gt_b: score_ground_truth(&result_b),
        expl_a: vocabs.expl_strings(&verbalize(&result_a, vocabs)),
        expl_b: vocabs.expl_strings(&verbalize(&result_b, vocabs)),
        scene,
        instruction,
        result_a,
        result_b,
        labels,
    }
}

/// `n` records drawn from independent per-record streams of `seed`'s split.
pub fn gen_dataset(seed: u64, n: usize, split: Split, config: &WorldConfig) -> Vec<DatasetRecord> {
    let vocabs = Vocabs::new(config.n_regions);
    let name = match split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    let stream = SeedStream::new(seed).split("dataset").split(name);
    (0..n)
        .map(|i| gen_record(&mut stream.split_index(i as u64), config, split, &vocabs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    fn six_sigma(p: f64, n: usize) -> f64 {
        6.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn scene_is_deterministic_and_in_range() {
        let a = gen_scene(&mut SeedStream::new(9), &cfg());
        let b = gen_scene(&mut SeedStream::new(9), &cfg());
        assert_eq!(a, b);
        let mut rng = SeedStream::new(10);
        for _ in 0..1000 {
            let s = gen_scene(&mut rng, &cfg());
            assert_eq!(s.regions.len(), 4);
            for r in &s.regions {
                assert!(r.color < 6 && r.shape < 5 && r.texture < 4);
            }
        }
    }

    #[test]
    fn color_frequencies_are_uniform() {
        let mut rng = SeedStream::new(11);
        let n = 10_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[gen_scene(&mut rng, &cfg()).regions[0].color] += 1;
        }
        let p = 1.0 / 6.0;
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < six_sigma(p, n), "{counts:?}");
        }
    }

    #[test]
    fn instructions_respect_invariants_and_split() {
        let mut rng = SeedStream::new(12);
        let c = cfg();
        for split in [Split::Train, Split::Eval] {
            for _ in 0..2000 {
                let s = gen_scene(&mut rng, &c);
                let ins = gen_instruction(&mut rng, &s, &c, split);
                assert!((1..=3).contains(&ins.clauses.len()));
                let mut seen = std::collections::HashSet::new();
                for cl in &ins.clauses {
                    assert!(seen.insert((cl.region, cl.attribute)));
                    assert_ne!(cl.target, s.regions[cl.region].get(cl.attribute));
                }
                let held = ins.clauses.iter().any(|cl| c.is_holdout(cl.attribute, cl.target));
                assert_eq!(held, split == Split::Eval);
            }
        }
    }

    fn scene_and_instruction(seed: u64) -> (Scene, Instruction) {
        let mut rng = SeedStream::new(seed);
        let s = gen_scene(&mut rng, &cfg());
        let i = gen_instruction(&mut rng, &s, &cfg(), Split::Train);
        (s, i)
    }

    #[test]
    fn perfect_editor_is_defect_free() {
        let (s, ins) = scene_and_instruction(13);
        let r = apply_editor(&s, &ins, &EditorQuality::perfect(), 0.0, &mut SeedStream::new(1));
        assert!(r.defects.iter().all(|d| d.status == ClauseStatus::Executed));
        assert!(r.overedits.is_empty());
        assert_eq!(score_ground_truth(&r), Scores { instruction: 4, visual: 4 });
        assert!(r.is_consistent_with(&s));
    }

    #[test]
    fn null_editor_misses_everything() {
        let (s, ins) = scene_and_instruction(14);
        let q = EditorQuality {
            p_exec: 0.0,
            p_wrong: 0.0,
            p_overedit: 0.0,
            artifact_mean: 0.0,
        };
        let r = apply_editor(&s, &ins, &q, 0.0, &mut SeedStream::new(2));
        assert!(r.defects.iter().all(|d| d.status == ClauseStatus::Missed));
        assert_eq!(r.edited, s);
        assert_eq!(score_ground_truth(&r).instruction, 1);
    }

    #[test]
    fn execution_rate_matches_probability() {
        let (s, ins) = scene_and_instruction(15);
        let q = EditorQuality {
            p_exec: 0.7,
            p_wrong: 0.1,
            p_overedit: 0.05,
            artifact_mean: 0.3,
        };
        let mut rng = SeedStream::new(3);
        let (mut exec, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let r = apply_editor(&s, &ins, &q, 0.15, &mut rng);
            assert!(r.is_consistent_with(&s));
            for d in &r.defects {
                total += 1;
                exec += (d.status == ClauseStatus::Executed) as usize;
            }
        }
        let rate = exec as f64 / total as f64;
        assert!((rate - 0.7).abs() < six_sigma(0.7, total), "{rate}");
    }

    #[test]
    fn visual_quality_thresholds() {
        let mut r = EditResult {
            edited: Scene { regions: vec![] },
            defects: vec![],
            overedits: vec![],
            artifact_level: 0.05,
        };
        for (level, vq) in [(0.05, 4), (0.1, 3), (0.29, 3), (0.3, 2), (0.59, 2), (0.6, 1), (1.0, 1)] {
            r.artifact_level = level;
            assert_eq!(score_ground_truth(&r).visual, vq, "level {level}");
        }
    }

    fn outcome(status: ClauseStatus, region: usize) -> ClauseOutcome {
        ClauseOutcome {
            clause: Clause {
                region,
                attribute: Attribute::Color,
                target: 1,
            },
            status,
        }
    }

    fn over(region: usize) -> OverEdit {
        OverEdit {
            region,
            attribute: Attribute::Shape,
            from: 0,
            to: 1,
        }
    }

    fn if_score(statuses: &[ClauseStatus], n_over: usize) -> u8 {
        let r = EditResult {
            edited: Scene { regions: vec![] },
            defects: statuses.iter().enumerate().map(|(i, &s)| outcome(s, i)).collect(),
            overedits: (0..n_over).map(over).collect(),
            artifact_level: 0.0,
        };
        score_ground_truth(&r).instruction
    }

    #[test]
    fn instruction_rubric_cases() {
        use ClauseStatus::*;
        let w = WrongValue { value: 2 };
        assert_eq!(if_score(&[Executed, Executed], 0), 4);
        assert_eq!(if_score(&[Executed, Executed], 1), 3);
        assert_eq!(if_score(&[Executed, w], 0), 3);
        assert_eq!(if_score(&[Executed, w], 1), 3);
        assert_eq!(if_score(&[Executed, Missed], 0), 2);
        assert_eq!(if_score(&[Executed], 2), 2);
        assert_eq!(if_score(&[Executed, w, w], 0), 2);
        assert_eq!(if_score(&[Missed, Missed], 0), 1);
        assert_eq!(if_score(&[w], 0), 1);
        assert_eq!(if_score(&[Missed, w], 0), 1);
    }

    #[test]
    fn pair_labels_follow_scores() {
        let (s, ins) = scene_and_instruction(16);
        let good = apply_editor(&s, &ins, &EditorQuality::perfect(), 0.0, &mut SeedStream::new(4));
        let q = EditorQuality {
            p_exec: 0.0,
            p_wrong: 0.0,
            p_overedit: 0.0,
            artifact_mean: 0.0,
        };
        let bad = apply_editor(&s, &ins, &q, 0.0, &mut SeedStream::new(5));
        let l = make_pair(&good, &bad, 0.0, &mut SeedStream::new(6));
        assert_eq!(l.instruction, PrefLabel::A);
        assert_eq!(l.visual, PrefLabel::Skip);
        let l = make_pair(&bad, &good, 0.0, &mut SeedStream::new(6));
        assert_eq!(l.instruction, PrefLabel::B);
    }

    #[test]
    fn flip_rate_matches_eta() {
        let c = cfg();
        let mut rng = SeedStream::new(17);
        let (mut flips, mut labeled) = (0usize, 0usize);
        for _ in 0..10_000 {
            let s = gen_scene(&mut rng, &c);
            let ins = gen_instruction(&mut rng, &s, &c, Split::Train);
            let qa = sample_quality(&mut rng, &c);
            let qb = sample_quality(&mut rng, &c);
            let a = apply_editor(&s, &ins, &qa, c.artifact_sd, &mut rng);
            let b = apply_editor(&s, &ins, &qb, c.artifact_sd, &mut rng);
            let l = make_pair(&a, &b, 0.05, &mut rng);
            for (lab, f) in [(l.instruction, l.flipped[0]), (l.visual, l.flipped[1])] {
                if lab != PrefLabel::Skip {
                    labeled += 1;
                    flips += f as usize;
                }
            }
        }
        let rate = flips as f64 / labeled as f64;
        assert!((rate - 0.05).abs() < six_sigma(0.05, labeled), "{rate} over {labeled}");
    }

    #[test]
    fn dataset_is_a_pure_function_of_seed() {
        let a = gen_dataset(3, 50, Split::Train, &cfg());
        let b = gen_dataset(3, 50, Split::Train, &cfg());
        assert_eq!(a, b);
        assert_ne!(a, gen_dataset(4, 50, Split::Train, &cfg()));
    }
}
