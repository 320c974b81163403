use serde::{Deserialize, Serialize};

use super::{artifact_band, Attribute, ClauseStatus, EditResult, Vocabs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Finding {
    Ok,
    WrongValue { attribute: Attribute, value: usize },
    Missed { attribute: Attribute },
}

/// What an explanation says about a result: per instructed region (in order
/// of first mention) the findings for its clauses, the over-edited slots, and
/// the artifact band.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub regions: Vec<(usize, Vec<Finding>)>,
    pub overedits: Vec<(usize, Attribute)>,
    pub artifact_band: u8,
}

impl DefectRecord {
    pub fn of(result: &EditResult) -> Self {
        let mut regions: Vec<(usize, Vec<Finding>)> = Vec::new();
        for d in &result.defects {
            let c = d.clause;
            let finding = match d.status {
                ClauseStatus::Executed => Finding::Ok,
                ClauseStatus::WrongValue { value } => Finding::WrongValue {
                    attribute: c.attribute,
                    value,
                },
                ClauseStatus::Missed => Finding::Missed {
                    attribute: c.attribute,
                },
            };
            match regions.iter_mut().find(|(r, _)| *r == c.region) {
                Some((_, fs)) => fs.push(finding),
                None => regions.push((c.region, vec![finding])),
            }
        }
        Self {
            regions,
            overedits: result.overedits.iter().map(|o| (o.region, o.attribute)).collect(),
            artifact_band: artifact_band(result.artifact_level),
        }
    }
}

/// Structured explanation tokens:
/// `<|bbox_k|> findings... ... <|global|> (CLEAN | OVEREDIT REG_r ATTR_a ...) ART_b <eos>`.
pub fn verbalize(result: &EditResult, vocabs: &Vocabs) -> Vec<usize> {
    let record = DefectRecord::of(result);
    let mut out = Vec::new();
    for (region, findings) in &record.regions {
        out.push(vocabs.bbox(*region));
        for f in findings {
            match *f {
                Finding::Ok => out.push(vocabs.ok()),
                Finding::WrongValue { attribute, value } => {
                    out.push(vocabs.wrong_value());
                    out.push(vocabs.attr(attribute));
                    out.push(vocabs.value(attribute, value));
                }
                Finding::Missed { attribute } => {
                    out.push(vocabs.missed());
                    out.push(vocabs.attr(attribute));
                }
            }
        }
    }
    out.push(vocabs.global());
    if record.overedits.is_empty() {
        out.push(vocabs.clean());
    }
    for &(region, attribute) in &record.overedits {
        out.push(vocabs.overedit());
        out.push(vocabs.reg(region));
        out.push(vocabs.attr(attribute));
    }
    out.push(vocabs.band(record.artifact_band));
    out.push(vocabs.eos());
    out
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn defect_free_single_clause() {
        let v = Vocabs::new(4);
        let scene = Scene {
            regions: vec![Region { color: 0, shape: 0, texture: 0 }; 4],
        };
        let clause = Clause {
            region: 0,
            attribute: Attribute::Color,
            target: 2,
        };
        let r = EditResult::assemble(
            &scene,
            vec![ClauseOutcome {
                clause,
                status: ClauseStatus::Executed,
            }],
            vec![],
            0.02,
        );
        let toks = v.expl_strings(&verbalize(&r, &v));
        assert_eq!(toks, ["<|bbox_0|>", "OK", "<|global|>", "CLEAN", "ART_0", "<eos>"]);
    }

    #[test]
    fn clauses_on_one_region_share_a_section() {
        let v = Vocabs::new(4);
        let scene = Scene {
            regions: vec![Region { color: 0, shape: 0, texture: 0 }; 4],
        };
        let mk = |region, attribute, status| ClauseOutcome {
            clause: Clause {
                region,
                attribute,
                target: 1,
            },
            status,
        };
        let r = EditResult::assemble(
            &scene,
            vec![
                mk(2, Attribute::Color, ClauseStatus::Missed),
                mk(1, Attribute::Shape, ClauseStatus::Executed),
                mk(2, Attribute::Texture, ClauseStatus::WrongValue { value: 3 }),
            ],
            vec![OverEdit {
                region: 0,
                attribute: Attribute::Color,
                from: 0,
                to: 4,
            }],
            0.7,
        );
        let toks = v.expl_strings(&verbalize(&r, &v));
        assert_eq!(
            toks,
            [
                "<|bbox_2|>",
                "MISSED",
                "ATTR_color",
                "WRONG_VALUE",
                "ATTR_texture",
                "TEXTURE_3",
                "<|bbox_1|>",
                "OK",
                "<|global|>",
                "OVEREDIT",
                "REG_0",
                "ATTR_color",
                "ART_3",
                "<eos>"
            ]
        );
    }
}
