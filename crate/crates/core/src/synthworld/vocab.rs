use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Attribute, EditResult, Instruction, Scene};

/// Number of quantization bins for the artifact level seen by the encoder.
pub const ART_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn value_token(attr: Attribute, v: usize) -> String {
    format!("{}_{v}", attr.name().to_uppercase())
}

/// Encoder-input and explanation vocabularies for a world with `n_regions`
/// regions.
///
/// Input ids 0, 1, 2 are `<pad>`, `<sep>`, `<score>`; explanation id 0 is
/// `<eos>`. The model relies on those positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub n_regions: usize,
    pub input: Vocab,
    pub explanation: Vocab,
}

impl Vocabs {
    pub fn new(n_regions: usize) -> Self {
        let mut input: Vec<String> = vec!["<pad>".into(), "<sep>".into(), "<score>".into()];
        input.extend((0..n_regions).map(|k| format!("REG_{k}")));
        for attr in Attribute::ALL {
            input.extend((0..attr.cardinality()).map(|v| value_token(attr, v)));
        }
        input.extend((0..ART_BINS).map(|q| format!("NOISE_{q}")));

        let mut expl: Vec<String> = vec!["<eos>".into()];
        expl.extend((0..n_regions).map(|k| format!("<|bbox_{k}|>")));
        expl.extend(["OK", "WRONG_VALUE", "MISSED"].map(String::from));
        expl.extend(Attribute::ALL.map(|a| format!("ATTR_{}", a.name())));
        for attr in Attribute::ALL {
            expl.extend((0..attr.cardinality()).map(|v| value_token(attr, v)));
        }
        expl.extend(["<|global|>", "CLEAN", "OVEREDIT"].map(String::from));
        expl.extend((0..n_regions).map(|k| format!("REG_{k}")));
        expl.extend((0..4).map(|b| format!("ART_{b}")));

        Self {
            n_regions,
            input: input.into(),
            explanation: expl.into(),
        }
    }

    fn iid(&self, t: &str) -> usize {
        self.input.id(t).unwrap_or_else(|| panic!("input token {t} missing"))
    }

    fn eid(&self, t: &str) -> usize {
        self.explanation.id(t).unwrap_or_else(|| panic!("explanation token {t} missing"))
    }

    pub fn in_reg(&self, k: usize) -> usize {
        3 + k
    }

    pub fn in_value(&self, attr: Attribute, v: usize) -> usize {
        self.iid(&value_token(attr, v))
    }

    pub fn in_noise(&self, level: f64) -> usize {
        let q = ((level * ART_BINS as f64).floor() as usize).min(ART_BINS - 1);
        self.iid(&format!("NOISE_{q}"))
    }

    pub fn eos(&self) -> usize {
        0
    }
    pub fn bbox(&self, k: usize) -> usize {
        1 + k
    }
    pub fn ok(&self) -> usize {
        self.eid("OK")
    }
    pub fn wrong_value(&self) -> usize {
        self.eid("WRONG_VALUE")
    }
    pub fn missed(&self) -> usize {
        self.eid("MISSED")
    }
    pub fn attr(&self, a: Attribute) -> usize {
        self.eid(&format!("ATTR_{}", a.name()))
    }
    pub fn value(&self, a: Attribute, v: usize) -> usize {
        self.eid(&value_token(a, v))
    }
    pub fn global(&self) -> usize {
        self.eid("<|global|>")
    }
    pub fn clean(&self) -> usize {
        self.eid("CLEAN")
    }
    pub fn overedit(&self) -> usize {
        self.eid("OVEREDIT")
    }
    pub fn reg(&self, k: usize) -> usize {
        self.eid(&format!("REG_{k}"))
    }
    pub fn band(&self, b: u8) -> usize {
        self.eid(&format!("ART_{b}"))
    }

    /// Reverse lookups used by the explanation parser.
    pub fn as_bbox(&self, id: usize) -> Option<usize> {
        (1..=self.n_regions).contains(&id).then(|| id - 1)
    }
    pub fn as_attr(&self, id: usize) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|&a| self.attr(a) == id)
    }
    pub fn as_value(&self, attr: Attribute, id: usize) -> Option<usize> {
        (0..attr.cardinality()).find(|&v| self.value(attr, v) == id)
    }
    pub fn as_reg(&self, id: usize) -> Option<usize> {
        (0..self.n_regions).find(|&k| self.reg(k) == id)
    }
    pub fn as_band(&self, id: usize) -> Option<u8> {
        (0..4u8).find(|&b| self.band(b) == id)
    }

    pub fn expl_strings(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.explanation.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn expl_ids(&self, tokens: &[String]) -> Result<Vec<usize>, String> {
        tokens
            .iter()
            .map(|t| {
                self.explanation
                    .id(t)
                    .ok_or_else(|| format!("unknown explanation token {t:?}"))
            })
            .collect()
    }

    fn scene_tokens(&self, scene: &Scene) -> Vec<usize> {
        let mut out = Vec::with_capacity(scene.regions.len() * 4);
        for (k, r) in scene.regions.iter().enumerate() {
            out.push(self.in_reg(k));
            for attr in Attribute::ALL {
                out.push(self.in_value(attr, r.get(attr)));
            }
        }
        out
    }

    /// Encoder inputs `(instruction, source, edited)` for one candidate. The
    /// instruction is padded to `max_clauses` clauses so every sequence in a
    /// world has the same length; the edited section ends with the quantized
    /// artifact level.
    pub fn encode_inputs(
        &self,
        source: &Scene,
        instruction: &Instruction,
        result: &EditResult,
        max_clauses: usize,
    ) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut instr = Vec::with_capacity(2 * max_clauses);
        for c in &instruction.clauses {
            instr.push(self.in_reg(c.region));
            instr.push(self.in_value(c.attribute, c.target));
        }
        instr.resize(2 * max_clauses.max(instruction.clauses.len()), 0);
        let src = self.scene_tokens(source);
        let mut edited = self.scene_tokens(&result.edited);
        edited.push(self.in_noise(result.artifact_level));
        (instr, src, edited)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids() {
        let v = Vocabs::new(4);
        assert_eq!(v.input.id("<pad>"), Some(0));
        assert_eq!(v.input.id("<sep>"), Some(1));
        assert_eq!(v.input.id("<score>"), Some(2));
        assert_eq!(v.input.id("REG_3"), Some(v.in_reg(3)));
        assert_eq!(v.explanation.id("<eos>"), Some(0));
        assert_eq!(v.explanation.id("<|bbox_2|>"), Some(v.bbox(2)));
        assert_eq!(v.explanation.len(), 37);
    }

    #[test]
    fn reverse_lookups_invert() {
        let v = Vocabs::new(4);
        for a in Attribute::ALL {
            assert_eq!(v.as_attr(v.attr(a)), Some(a));
            for x in 0..a.cardinality() {
                assert_eq!(v.as_value(a, v.value(a, x)), Some(x));
            }
        }
        assert_eq!(v.as_bbox(v.bbox(3)), Some(3));
        assert_eq!(v.as_bbox(v.ok()), None);
        assert_eq!(v.as_band(v.band(2)), Some(2));
    }

    #[test]
    fn noise_bins_cover_unit_interval() {
        let v = Vocabs::new(4);
        assert_eq!(v.in_noise(0.0), v.input.id("NOISE_0").unwrap());
        assert_eq!(v.in_noise(1.0), v.input.id("NOISE_19").unwrap());
        assert_eq!(v.in_noise(0.3), v.input.id("NOISE_6").unwrap());
    }
}
