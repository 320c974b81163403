//! Diagnose, parse, correct, re-score.
//!
//! The language head verbalizes what is wrong with an edit, the parser turns
//! those tokens back into a [`DefectHypothesis`], a symbolic corrector repairs
//! the named defects, and the reward head alone scores the result before and
//! after.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{overall_score, HiddenState, JrmModel, ModelError, ParamGroup, EOS};
use crate::synthworld::{
    score_ground_truth, Attribute, ClauseStatus, DatasetRecord, DefectRecord, EditResult, Finding, Instruction,
    Scene, Vocabs,
};

#[derive(Debug, Error)]
pub enum CorrectError {
    #[error("malformed explanation: {0}")]
    Malformed(String),
    #[error("self-correction needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, CorrectError>;

/// Artifact level multiplier applied when a hypothesis names an artifact.
pub const ARTIFACT_FACTOR: f64 = 0.5;
pub const THRESHOLDS: [f64; 3] = [3.5, 3.0, 2.5];

/// Parsed explanation. `artifact_band` is `None` when the global section has
/// no band token; `warnings` counts skipped malformed pieces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectHypothesis {
    pub regions: Vec<(usize, Vec<Finding>)>,
    pub overedits: Vec<(usize, Attribute)>,
    pub artifact_band: Option<u8>,
    pub warnings: usize,
}

impl DefectHypothesis {
    pub fn empty() -> Self {
        Self {
            regions: Vec::new(),
            overedits: Vec::new(),
            artifact_band: Some(0),
            warnings: 0,
        }
    }

    pub fn matches(&self, record: &DefectRecord) -> bool {
        self.regions == record.regions
            && self.overedits == record.overedits
            && self.artifact_band == Some(record.artifact_band)
    }

    fn finding(&self, region: usize, attribute: Attribute) -> Option<Finding> {
        let (_, fs) = self.regions.iter().find(|(r, _)| *r == region)?;
        fs.iter().copied().find(|f| match *f {
            Finding::WrongValue { attribute: a, .. } | Finding::Missed { attribute: a } => a == attribute,
            Finding::Ok => false,
        })
    }
}

/// Greedy explanation for one candidate.
pub fn diagnose(
    model: &JrmModel,
    vocabs: &Vocabs,
    scene: &Scene,
    instruction: &Instruction,
    result: &EditResult,
    max_clauses: usize,
) -> Result<Vec<usize>> {
    let (i, s, e) = vocabs.encode_inputs(scene, instruction, result, max_clauses);
    let h = model.encode(&i, &s, &e)?;
    decode(model, &h)
}

fn decode(model: &JrmModel, h: &HiddenState) -> Result<Vec<usize>> {
    Ok(model.decode_greedy(h, model.config().max_seq - 1)?)
}

fn finding_at(toks: &[usize], v: &Vocabs) -> Option<(Finding, usize)> {
    let head = *toks.first()?;
    if head == v.ok() {
        return Some((Finding::Ok, 1));
    }
    let attribute = v.as_attr(*toks.get(1)?)?;
    if head == v.missed() {
        return Some((Finding::Missed { attribute }, 2));
    }
    if head == v.wrong_value() {
        let value = v.as_value(attribute, *toks.get(2)?)?;
        return Some((Finding::WrongValue { attribute, value }, 3));
    }
    None
}

/// Grammar: `(<|bbox_k|> finding+)* <|global|> (CLEAN | OVEREDIT REG_r ATTR_a ...) ART_b <eos>`.
///
/// Reading stops at the first `<eos>`. A region section with any malformed
/// finding is dropped; a repeated region keeps its first section. Both count
/// as one warning, as does every stray token and malformed over-edit triple.
pub fn parse_explanation(tokens: &[usize], vocabs: &Vocabs) -> Result<DefectHypothesis> {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    let toks = &tokens[..end];
    let global = toks
        .iter()
        .position(|&t| t == vocabs.global())
        .ok_or_else(|| CorrectError::Malformed("no <|global|> section".into()))?;

    let mut hyp = DefectHypothesis {
        regions: Vec::new(),
        overedits: Vec::new(),
        artifact_band: None,
        warnings: 0,
    };
    let body = &toks[..global];
    let mut i = 0;
    while i < body.len() {
        let Some(region) = vocabs.as_bbox(body[i]) else {
            hyp.warnings += 1;
            i += 1;
            continue;
        };
        i += 1;
        let start = i;
        while i < body.len() && vocabs.as_bbox(body[i]).is_none() {
            i += 1;
        }
        let section = &body[start..i];
        let mut findings = Vec::new();
        let mut j = 0;
        let mut ok = !section.is_empty();
        while ok && j < section.len() {
            match finding_at(&section[j..], vocabs) {
                Some((f, n)) => {
                    findings.push(f);
                    j += n;
                }
                None => ok = false,
            }
        }
        if !ok || hyp.regions.iter().any(|(r, _)| *r == region) {
            hyp.warnings += 1;
        } else {
            hyp.regions.push((region, findings));
        }
    }

    let tail = &toks[global + 1..];
    let mut i = 0;
    if tail.first() == Some(&vocabs.clean()) {
        i = 1;
    }
    while i < tail.len() {
        let t = tail[i];
        if let Some(b) = vocabs.as_band(t) {
            if hyp.artifact_band.is_none() {
                hyp.artifact_band = Some(b);
            } else {
                hyp.warnings += 1;
            }
            i += 1;
        } else if t == vocabs.overedit() {
            let reg = tail.get(i + 1).and_then(|&x| vocabs.as_reg(x));
            let attr = tail.get(i + 2).and_then(|&x| vocabs.as_attr(x));
            match (reg, attr) {
                (Some(r), Some(a)) => {
                    hyp.overedits.push((r, a));
                    i += 3;
                }
                _ => {
                    hyp.warnings += 1;
                    i += 1 + usize::from(reg.is_some());
                }
            }
        } else {
            hyp.warnings += 1;
            i += 1;
        }
    }
    if hyp.artifact_band.is_none() {
        hyp.warnings += 1;
    }
    Ok(hyp)
}

/// Repairs what the hypothesis names and nothing else: flagged clauses get
/// their instructed value, named over-edits are reverted, and a nonzero
/// artifact band scales the artifact level by [`ARTIFACT_FACTOR`].
pub fn apply_correction(result: &EditResult, hypothesis: &DefectHypothesis, instruction: &Instruction) -> EditResult {
    let mut out = result.clone();
    let EditResult {
        edited,
        defects,
        overedits,
        ..
    } = &mut out;
    for d in defects.iter_mut() {
        let c = d.clause;
        if !instruction.clauses.contains(&c) || hypothesis.finding(c.region, c.attribute).is_none() {
            continue;
        }
        d.status = ClauseStatus::Executed;
        edited.regions[c.region].set(c.attribute, c.target);
    }
    overedits.retain(|o| {
        let named = hypothesis.overedits.contains(&(o.region, o.attribute));
        if named {
            edited.regions[o.region].set(o.attribute, o.from);
        }
        !named
    });
    if hypothesis.artifact_band.is_some_and(|b| b > 0) {
        out.artifact_level *= ARTIFACT_FACTOR;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDelta {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

/// Overall reward-head score of both versions. Only encoder and reward-head
/// parameters are read.
pub fn score_delta(
    model: &JrmModel,
    vocabs: &Vocabs,
    scene: &Scene,
    instruction: &Instruction,
    before: &EditResult,
    after: &EditResult,
    max_clauses: usize,
) -> Result<ScoreDelta> {
    let lm = model.params().group_touches(ParamGroup::LmHead);
    let seq = |r: &EditResult| {
        let (i, s, e) = vocabs.encode_inputs(scene, instruction, r, max_clauses);
        model.layout_tokens(&i, &s, &e)
    };
    let out = model.score_batch(&[seq(before)?, seq(after)?])?;
    debug_assert_eq!(model.params().group_touches(ParamGroup::LmHead), lm);
    let (b, a) = (overall_score(&out[0]), overall_score(&out[1]));
    Ok(ScoreDelta {
        before: b,
        after: a,
        delta: a - b,
    })
}

/// Affine map from raw overall score onto the 1–4 rubric scale, fitted by
/// least squares against the mean ground-truth score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
}

impl Calibration {
    pub fn apply(&self, raw: f64) -> f64 {
        self.scale * raw + self.offset
    }

    pub fn fit(model: &JrmModel, records: &[DatasetRecord], max_clauses: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(CorrectError::TooFewSamples { needed: 1, got: 0 });
        }
        let vocabs = Vocabs::new(model.config().n_regions);
        let mut seqs = Vec::with_capacity(2 * records.len());
        let mut ys = Vec::with_capacity(2 * records.len());
        for r in records {
            for res in [&r.result_a, &r.result_b] {
                let (i, s, e) = vocabs.encode_inputs(&r.scene, &r.instruction, res, max_clauses);
                seqs.push(model.layout_tokens(&i, &s, &e)?);
                let gt = score_ground_truth(res);
                ys.push((gt.instruction as f64 + gt.visual as f64) / 2.0);
            }
        }
        let xs: Vec<f64> = model.score_batch(&seqs)?.iter().map(overall_score).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let scale = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        Ok(Self {
            scale,
            offset: my - scale * mx,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub threshold: f64,
    pub count: usize,
    pub mean_score_delta: Option<f64>,
    pub mean_raw_delta: Option<f64>,
    pub mean_gt_if_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectReport {
    pub n_samples: usize,
    pub parse_failures: usize,
    pub parse_warnings: usize,
    pub exact_diagnoses: usize,
    pub calibration: Calibration,
    pub buckets: Vec<Bucket>,
}

#[derive(Clone, Debug)]
struct Sample {
    calibrated_before: f64,
    raw_delta: f64,
    gt_if_delta: f64,
}

/// Runs the pipeline on both candidates of every record and groups samples by
/// calibrated score before correction (`score < threshold`, nested buckets).
/// An explanation that fails to parse leaves its sample uncorrected.
pub fn self_correct(
    model: &JrmModel,
    records: &[DatasetRecord],
    calibration: Calibration,
    max_clauses: usize,
) -> Result<SelfCorrectReport> {
    let vocabs = Vocabs::new(model.config().n_regions);
    let mut samples = Vec::with_capacity(2 * records.len());
    let (mut failures, mut warnings, mut exact) = (0, 0, 0);
    for r in records {
        for res in [&r.result_a, &r.result_b] {
            let tokens = diagnose(model, &vocabs, &r.scene, &r.instruction, res, max_clauses)?;
            let corrected = match parse_explanation(&tokens, &vocabs) {
                Ok(h) => {
                    warnings += h.warnings;
                    if h.matches(&DefectRecord::of(res)) {
                        exact += 1;
                    }
                    apply_correction(res, &h, &r.instruction)
                }
                Err(_) => {
                    failures += 1;
                    res.clone()
                }
            };
            let d = score_delta(model, &vocabs, &r.scene, &r.instruction, res, &corrected, max_clauses)?;
            let gt = |x: &EditResult| score_ground_truth(x).instruction as f64;
            samples.push(Sample {
                calibrated_before: calibration.apply(d.before),
                raw_delta: d.delta,
                gt_if_delta: gt(&corrected) - gt(res),
            });
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let buckets = THRESHOLDS
        .iter()
        .map(|&threshold| {
            let inside: Vec<&Sample> = samples.iter().filter(|s| s.calibrated_before < threshold).collect();
            let raw: Vec<f64> = inside.iter().map(|s| s.raw_delta).collect();
            let gt: Vec<f64> = inside.iter().map(|s| s.gt_if_delta).collect();
            Bucket {
                threshold,
                count: inside.len(),
                mean_score_delta: mean(&raw).map(|m| m * calibration.scale),
                mean_raw_delta: mean(&raw),
                mean_gt_if_delta: mean(&gt),
            }
        })
        .collect();
    Ok(SelfCorrectReport {
        n_samples: samples.len(),
        parse_failures: failures,
        parse_warnings: warnings,
        exact_diagnoses: exact,
        calibration,
        buckets,
    })
}

pub fn write_report(report: &SelfCorrectReport, path: &Path) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| CorrectError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let text = serde_json::to_string_pretty(report).map_err(|e| io(&e))?;
    std::fs::write(path, text + "\n").map_err(|e| io(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::synthworld::*;

    fn world() -> (WorldConfig, Vocabs) {
        let w = WorldConfig::default();
        let v = Vocabs::new(w.n_regions);
        (w, v)
    }

    fn strs(v: &Vocabs, toks: &[&str]) -> Vec<usize> {
        v.expl_ids(&toks.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn missing_global_is_an_error() {
        let (_, v) = world();
        let toks = strs(&v, &["<|bbox_0|>", "OK", "ART_0", "<eos>"]);
        assert!(matches!(parse_explanation(&toks, &v), Err(CorrectError::Malformed(_))));
    }

    #[test]
    fn defect_free_parses_to_all_ok() {
        let (_, v) = world();
        let h = parse_explanation(&strs(&v, &["<|bbox_1|>", "OK", "<|global|>", "CLEAN", "ART_0", "<eos>"]), &v).unwrap();
        assert_eq!(h.regions, vec![(1, vec![Finding::Ok])]);
        assert!(h.overedits.is_empty());
        assert_eq!(h.artifact_band, Some(0));
        assert_eq!(h.warnings, 0);
    }

    #[test]
    fn duplicate_region_keeps_first() {
        let (_, v) = world();
        let toks = strs(
            &v,
            &["<|bbox_0|>", "MISSED", "ATTR_color", "<|bbox_0|>", "OK", "<|global|>", "CLEAN", "ART_1", "<eos>"],
        );
        let h = parse_explanation(&toks, &v).unwrap();
        assert_eq!(
            h.regions,
            vec![(0, vec![Finding::Missed { attribute: Attribute::Color }])]
        );
        assert_eq!(h.warnings, 1);
    }

    #[test]
    fn malformed_region_is_skipped() {
        let (_, v) = world();
        // value token of the wrong attribute
        let toks = strs(
            &v,
            &[
                "<|bbox_2|>", "WRONG_VALUE", "ATTR_color", "SHAPE_1", "<|bbox_3|>", "OK", "<|global|>", "OVEREDIT",
                "REG_1", "<|global|>", "ART_2", "<eos>",
            ],
        );
        let h = parse_explanation(&toks, &v).unwrap();
        assert_eq!(h.regions, vec![(3, vec![Finding::Ok])]);
        assert!(h.overedits.is_empty());
        assert_eq!(h.artifact_band, Some(2));
        assert_eq!(h.warnings, 3);
    }

    #[test]
    fn tokens_after_eos_are_ignored() {
        let (_, v) = world();
        let mut toks = strs(&v, &["<|global|>", "CLEAN", "ART_0", "<eos>"]);
        toks.extend(strs(&v, &["OVEREDIT", "REG_0", "ATTR_shape"]));
        let h = parse_explanation(&toks, &v).unwrap();
        assert_eq!(h, DefectHypothesis::empty());
    }

    fn sample(seed: u64) -> (Scene, Instruction, EditResult) {
        let w = WorldConfig::default();
        let mut rng = SeedStream::new(seed);
        let scene = gen_scene(&mut rng, &w);
        let instr = gen_instruction(&mut rng, &scene, &w, Split::Train);
        let q = EditorQuality {
            p_exec: 0.3,
            p_wrong: 0.4,
            p_overedit: 0.2,
            artifact_mean: 0.5,
        };
        let r = apply_editor(&scene, &instr, &q, 0.3, &mut rng);
        (scene, instr, r)
    }

    #[test]
    fn empty_hypothesis_is_identity() {
        for seed in 0..50 {
            let (_, instr, r) = sample(seed);
            assert_eq!(apply_correction(&r, &DefectHypothesis::empty(), &instr), r);
        }
    }

    #[test]
    fn oracle_hypothesis_reaches_top_score_and_stays_consistent() {
        let (_, v) = world();
        for seed in 0..200 {
            let (scene, instr, r) = sample(seed);
            let h = parse_explanation(&verbalize(&r, &v), &v).unwrap();
            assert!(h.matches(&DefectRecord::of(&r)));
            let fixed = apply_correction(&r, &h, &instr);
            assert_eq!(score_ground_truth(&fixed).instruction, 4);
            assert!(fixed.is_consistent_with(&scene));
            assert!(fixed.artifact_level <= r.artifact_level);
        }
    }

    #[test]
    fn naming_a_correct_region_changes_nothing() {
        let (_, v) = world();
        for seed in 0..100 {
            let (_, instr, r) = sample(seed);
            let h = parse_explanation(&verbalize(&r, &v), &v).unwrap();
            let once = apply_correction(&r, &h, &instr);
            let mut again = parse_explanation(&verbalize(&r, &v), &v).unwrap();
            // a finding for an uninstructed slot and an over-edit that did not happen
            again.regions.push((
                3,
                vec![Finding::Missed {
                    attribute: Attribute::Texture,
                }],
            ));
            if !instr.clauses.iter().any(|c| c.region == 3 && c.attribute == Attribute::Texture) {
                assert_eq!(apply_correction(&r, &again, &instr), once);
            }
        }
    }

    #[test]
    fn oracle_correction_of_a_real_defect_raises_ground_truth() {
        let (_, v) = world();
        for seed in 0..200 {
            let (_, instr, r) = sample(seed);
            let before = score_ground_truth(&r).instruction;
            let h = parse_explanation(&verbalize(&r, &v), &v).unwrap();
            let after = score_ground_truth(&apply_correction(&r, &h, &instr)).instruction;
            if before < 4 {
                assert!(after > before);
            } else {
                assert_eq!(after, before);
            }
        }
    }
}
