//! Instruction-format data generation.
//!
//! Raw QA records are rendered through "closed" (yes/no) or "opened"
//! templates. Opened records embed a lettered option list holding the
//! ground truth and distractors drawn from answers sharing the record's
//! attribute.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::records::{AnswerType, Attribute, InstructionRecord, QaRecord};
use crate::error::{Error, Result};

const BUILTIN_RULES: &str = include_str!("../../data/attribute_rules.toml");
const BUILTIN_TEMPLATES: &str = include_str!("../../data/templates.toml");

pub const DEFAULT_DISTRACTORS: usize = 3;
const OPTION_LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Deserialize)]
struct RuleFile {
    #[allow(dead_code)]
    version: u32,
    rule: Vec<Rule>,
}

#[derive(Clone, Debug, Deserialize)]
struct Rule {
    attribute: Attribute,
    keywords: Vec<String>,
}

/// Ordered keyword rules; first match wins.
#[derive(Clone, Debug)]
pub struct AttributeRules {
    rules: Vec<Rule>,
}

fn words(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
        .collect();
    format!(" {} ", cleaned.split_whitespace().collect::<Vec<_>>().join(" "))
}

impl AttributeRules {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_RULES).expect("builtin rule table parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: RuleFile = toml::from_str(text).map_err(|e| Error::Config(format!("attribute rules: {e}")))?;
        Ok(Self { rules: file.rule })
    }

    /// Attribute of a question; the answer is accepted for interface
    /// symmetry but the rules look at the question only.
    pub fn classify(&self, question: &str, _answer: &str) -> Attribute {
        let q = words(question);
        self.rules
            .iter()
            .find(|r| r.keywords.iter().any(|k| q.contains(&words(k))))
            .map_or(Attribute::Other, |r| r.attribute)
    }
}

/// Deduplicated, sorted open-question answers per attribute.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AttributePool {
    pools: BTreeMap<Attribute, BTreeSet<String>>,
}

impl AttributePool {
    pub fn build(records: &[QaRecord]) -> Self {
        let mut pools: BTreeMap<Attribute, BTreeSet<String>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.answer_type == AnswerType::Open) {
            pools.entry(r.attribute).or_default().insert(r.answer.clone());
        }
        Self { pools }
    }

    pub fn get(&self, a: Attribute) -> impl Iterator<Item = &str> {
        self.pools.get(&a).into_iter().flatten().map(String::as_str)
    }

    pub fn contains(&self, a: Attribute, answer: &str) -> bool {
        self.pools.get(&a).is_some_and(|p| p.contains(answer))
    }

    pub fn len(&self, a: Attribute) -> usize {
        self.pools.get(&a).map_or(0, BTreeSet::len)
    }
}

/// Up to `k` distinct wrong answers for an open record, sampled without
/// replacement from its attribute pool. When that pool is too small the
/// remainder comes from the `other` pool. Closed records get none.
pub fn sample_distractors(record: &QaRecord, pools: &AttributePool, k: usize, rng: &mut impl Rng) -> Vec<String> {
    if record.answer_type == AnswerType::Closed || k == 0 {
        return Vec::new();
    }
    let own: Vec<&str> = pools.get(record.attribute).filter(|a| *a != record.answer).collect();
    let mut picked: Vec<String> = own.choose_multiple(rng, k.min(own.len())).map(|s| s.to_string()).collect();
    if picked.len() < k && record.attribute != Attribute::Other {
        let extra: Vec<&str> = pools
            .get(Attribute::Other)
            .filter(|a| *a != record.answer && !picked.iter().any(|p| p == a))
            .collect();
        let need = k - picked.len();
        picked.extend(extra.choose_multiple(rng, need.min(extra.len())).map(|s| s.to_string()));
    }
    picked
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct Template {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    #[allow(dead_code)]
    version: u32,
    #[serde(default)]
    closed: Vec<Template>,
    #[serde(default)]
    opened: Vec<Template>,
}

#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub closed: Vec<Template>,
    pub opened: Vec<Template>,
    /// SHA-256 of the source text.
    pub hash: String,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("builtin templates parse")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| Error::Config(format!("templates: {e}")))?;
        for t in &file.closed {
            if !t.text.contains("{question}") || t.text.contains("{options}") {
                return Err(Error::Config(format!(
                    "closed template `{}` needs {{question}} and no {{options}}",
                    t.id
                )));
            }
        }
        for t in &file.opened {
            if !t.text.contains("{question}") || !t.text.contains("{options}") {
                return Err(Error::Config(format!(
                    "opened template `{}` needs {{question}} and {{options}}",
                    t.id
                )));
            }
        }
        Ok(Self {
            closed: file.closed,
            opened: file.opened,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    fn family(&self, t: AnswerType) -> &[Template] {
        match t {
            AnswerType::Closed => &self.closed,
            AnswerType::Open => &self.opened,
        }
    }

    pub fn find(&self, id: &str) -> Option<(&Template, AnswerType)> {
        self.closed
            .iter()
            .map(|t| (t, AnswerType::Closed))
            .chain(self.opened.iter().map(|t| (t, AnswerType::Open)))
            .find(|(t, _)| t.id == id)
    }
}

/// `A) x B) y ...`
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}) {o}", OPTION_LETTERS[i % OPTION_LETTERS.len()] as char))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders one record through a template chosen uniformly from the family
/// matching its answer type. Open records list the answer and
/// `distractors` in shuffled order.
pub fn render_instruction(
    record: &QaRecord,
    distractors: &[String],
    templates: &TemplateSet,
    rng: &mut impl Rng,
) -> Result<InstructionRecord> {
    let family = templates.family(record.answer_type);
    let template = family.choose(rng).ok_or_else(|| {
        Error::Config(format!(
            "no {} templates configured",
            match record.answer_type {
                AnswerType::Closed => "closed",
                AnswerType::Open => "opened",
            }
        ))
    })?;
    let mut options = Vec::new();
    let mut text = template.text.replace("{question}", record.question.trim());
    if record.answer_type == AnswerType::Open {
        options.push(record.answer.clone());
        options.extend(distractors.iter().cloned());
        options.shuffle(rng);
        text = text.replace("{options}", &format_options(&options));
    }
    Ok(InstructionRecord {
        image: record.image.clone(),
        instruction: text,
        answer: record.answer.clone(),
        template_id: template.id.clone(),
        options,
    })
}

/// Seeds, settings and counts of one generation run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub distractors: usize,
    pub template_sha256: String,
    pub records_in: usize,
    pub records_out: usize,
    pub open: usize,
    pub closed: usize,
}

/// Random stream of record `index`; independent of every other record.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One instruction record per input record, in input order.
pub fn generate_dataset(
    records: &[QaRecord],
    seed: u64,
    k: usize,
    templates: &TemplateSet,
) -> Result<(Vec<InstructionRecord>, Manifest)> {
    let pools = AttributePool::build(records);
    let out = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = record_rng(seed, i);
            let distractors = sample_distractors(r, &pools, k, &mut rng);
            render_instruction(r, &distractors, templates, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let open = records.iter().filter(|r| r.answer_type == AnswerType::Open).count();
    let manifest = Manifest {
        format_version: 1,
        seed,
        distractors: k,
        template_sha256: templates.hash.clone(),
        records_in: records.len(),
        records_out: out.len(),
        open,
        closed: records.len() - open,
    };
    Ok((out, manifest))
}

/// Writes `<out>` (JSON lines) and `<out>.manifest.json`.
pub fn write_dataset(out: &Path, records: &[InstructionRecord], manifest: &Manifest) -> Result<()> {
    super::records::write_text(out, &super::records::to_jsonl(records))?;
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    super::records::write_text(Path::new(&manifest_path), &(json + "\n"))
}

/// Rule broken by a generated record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub message: String,
}

/// Checks generated records against their sources: answers preserved,
/// template family respected, option lists sound and rendered verbatim.
pub fn validate(
    sources: &[QaRecord],
    generated: &[InstructionRecord],
    templates: &TemplateSet,
    k: usize,
) -> Vec<Violation> {
    let pools = AttributePool::build(sources);
    let mut out = Vec::new();
    if sources.len() != generated.len() {
        out.push(Violation {
            index: 0,
            message: format!("{} sources but {} generated records", sources.len(), generated.len()),
        });
    }
    for (i, (src, gen)) in sources.iter().zip(generated).enumerate() {
        let mut fail = |m: String| out.push(Violation { index: i, message: m });
        if gen.answer != src.answer {
            fail(format!("answer changed: `{}` -> `{}`", src.answer, gen.answer));
        }
        if gen.image != src.image {
            fail("image reference changed".into());
        }
        if !gen.instruction.contains(src.question.trim()) {
            fail("question missing from instruction".into());
        }
        match templates.find(&gen.template_id) {
            None => fail(format!("unknown template `{}`", gen.template_id)),
            Some((_, family)) if family != src.answer_type => fail("template family does not match answer type".into()),
            Some(_) => {}
        }
        match src.answer_type {
            AnswerType::Closed => {
                if !gen.options.is_empty() {
                    fail("closed record rendered with options".into());
                }
            }
            AnswerType::Open => {
                let hits = gen.options.iter().filter(|o| **o == src.answer).count();
                if hits != 1 {
                    fail(format!("answer appears {hits} times among options"));
                }
                let distinct: HashSet<&String> = gen.options.iter().collect();
                if distinct.len() != gen.options.len() {
                    fail("duplicate options".into());
                }
                let own_available = pools.len(src.attribute).saturating_sub(1);
                let mut padded = 0;
                for o in gen.options.iter().filter(|o| **o != src.answer) {
                    if pools.contains(src.attribute, o) {
                        continue;
                    }
                    if pools.contains(Attribute::Other, o) {
                        padded += 1;
                    } else {
                        fail(format!("distractor `{o}` is not from the `{}` pool", src.attribute));
                    }
                }
                if padded > 0 && own_available >= k {
                    fail("padded from `other` although the attribute pool was large enough".into());
                }
                if gen.options.len() > k + 1 {
                    fail(format!("{} options for k = {k}", gen.options.len()));
                }
                if !gen.instruction.contains(&format_options(&gen.options)) {
                    fail("rendered option order differs from the options field".into());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, a: &str, t: AnswerType, attr: Attribute) -> QaRecord {
        QaRecord {
            image: "img".into(),
            question: q.into(),
            answer: a.into(),
            answer_type: t,
            attribute: attr,
        }
    }

    #[test]
    fn classify_examples() {
        let rules = AttributeRules::builtin();
        assert_eq!(
            rules.classify("What modality is used to take this image?", "MRI"),
            Attribute::Modality
        );
        assert_eq!(rules.classify("Which organ is abnormal?", "liver"), Attribute::Organ);
        assert_eq!(rules.classify("Where is the abnormality?", "left"), Attribute::Location);
        assert_eq!(rules.classify("What color is the object?", "red"), Attribute::Other);
        // "ct" must not match inside a longer word
        assert_eq!(rules.classify("Does this affect the heart?", "no"), Attribute::Other);
    }

    #[test]
    fn pools_single_and_dedup() {
        let one = [rec("q", "liver", AnswerType::Open, Attribute::Organ)];
        let p = AttributePool::build(&one);
        assert_eq!(p.get(Attribute::Organ).collect::<Vec<_>>(), ["liver"]);

        let dup = [
            rec("q", "liver", AnswerType::Open, Attribute::Organ),
            rec("q2", "liver", AnswerType::Open, Attribute::Organ),
            rec("q3", "yes", AnswerType::Closed, Attribute::Organ),
        ];
        assert_eq!(AttributePool::build(&dup).len(Attribute::Organ), 1);
    }

    #[test]
    fn distractors_forced_choice_and_padding() {
        let recs = [
            rec("q", "a", AnswerType::Open, Attribute::Shape),
            rec("q", "b", AnswerType::Open, Attribute::Shape),
            rec("q", "c", AnswerType::Open, Attribute::Shape),
            rec("q", "z", AnswerType::Open, Attribute::Other),
        ];
        let pools = AttributePool::build(&recs);
        let mut rng = record_rng(1, 0);
        let mut d = sample_distractors(&recs[0], &pools, 2, &mut rng);
        d.sort();
        assert_eq!(d, ["b", "c"]);
        let mut d = sample_distractors(&recs[0], &pools, 3, &mut rng);
        d.sort();
        assert_eq!(d, ["b", "c", "z"]);
    }

    #[test]
    fn closed_records_render_without_options() {
        let t = TemplateSet::builtin();
        let r = rec("Is the lung healthy?", "yes", AnswerType::Closed, Attribute::Pathology);
        let out = render_instruction(&r, &[], &t, &mut record_rng(3, 0)).unwrap();
        assert!(out.options.is_empty());
        assert!(out.instruction.contains("Is the lung healthy?"));
        assert!(!out.instruction.contains("A)"));
    }

    #[test]
    fn empty_family_is_a_config_error() {
        let t = TemplateSet::parse("version = 1\n[[closed]]\nid = \"c\"\ntext = \"{question}\"\n").unwrap();
        let r = rec("q", "a", AnswerType::Open, Attribute::Other);
        assert!(matches!(
            render_instruction(&r, &[], &t, &mut record_rng(0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn template_placeholders_are_checked() {
        assert!(TemplateSet::parse("version = 1\n[[opened]]\nid = \"o\"\ntext = \"{question}\"\n").is_err());
        let t = TemplateSet::builtin();
        assert!(t.closed.len() >= 5 && t.opened.len() >= 5);
        assert_eq!(t.hash.len(), 64);
    }

    #[test]
    fn options_format() {
        assert_eq!(format_options(&["x".into(), "y".into()]), "A) x B) y");
    }
}
