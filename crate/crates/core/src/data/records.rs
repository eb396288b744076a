use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    #[serde(alias = "OPEN", alias = "Open", alias = "opened")]
    Open,
    #[serde(alias = "CLOSED", alias = "Closed")]
    Closed,
}

/// Question attribute used to group candidate answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Modality,
    Plane,
    Shape,
    Size,
    Organ,
    Location,
    Pathology,
    Other,
}

impl Attribute {
    pub const ALL: [Attribute; 8] = [
        Attribute::Modality,
        Attribute::Plane,
        Attribute::Shape,
        Attribute::Size,
        Attribute::Organ,
        Attribute::Location,
        Attribute::Pathology,
        Attribute::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Modality => "modality",
            Attribute::Plane => "plane",
            Attribute::Shape => "shape",
            Attribute::Size => "size",
            Attribute::Organ => "organ",
            Attribute::Location => "location",
            Attribute::Pathology => "pathology",
            Attribute::Other => "other",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Input(format!("unknown attribute `{s}`")))
    }
}

/// One raw image-question-answer triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub image: String,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub attribute: Attribute,
}

/// Input line shape. Accepts the field names of public VQA annotation
/// exports and flags instruction-format lines.
#[derive(Debug, Deserialize)]
struct RawQaLine {
    #[serde(alias = "img_name", alias = "image_name")]
    image: String,
    question: String,
    answer: serde_json::Value,
    answer_type: AnswerType,
    #[serde(default)]
    attribute: Option<Attribute>,
    #[serde(default)]
    instruction: Option<serde_json::Value>,
    #[serde(default)]
    options: Option<serde_json::Value>,
}

/// Instruction-format rendering of a [`QaRecord`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub image: String,
    pub instruction: String,
    pub answer: String,
    pub template_id: String,
    pub options: Vec<String>,
}

fn read_lines<R: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, R)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Reads raw QA records, classifying any record that has no attribute.
/// Lines carrying an `instruction` or `options` field are rejected: these
/// records are the original benchmark format.
pub fn read_qa_records(path: &Path) -> Result<Vec<QaRecord>> {
    let rules = super::datagen::AttributeRules::builtin();
    read_lines::<RawQaLine>(path)?
        .into_iter()
        .map(|(line, raw)| {
            if raw.instruction.is_some() || raw.options.is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "instruction-format record (instruction/options present) where a raw QA record is required"
                        .into(),
                });
            }
            let answer = match raw.answer {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let attribute = raw
                .attribute
                .unwrap_or_else(|| rules.classify(&raw.question, &answer));
            Ok(QaRecord {
                image: raw.image,
                question: raw.question,
                answer,
                answer_type: raw.answer_type,
                attribute,
            })
        })
        .collect()
}

pub fn read_instruction_records(path: &Path) -> Result<Vec<InstructionRecord>> {
    Ok(read_lines(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Serializes one JSON object per line.
pub fn to_jsonl<R: Serialize>(records: &[R]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_slake_style_lines_and_classifies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"img_name":"xmlab1/source.jpg","question":"What modality is used to take this image?","answer":"MRI","answer_type":"OPEN","q_lang":"en"}"#,
                "\n",
                r#"{"image":"a.png","question":"Is it normal?","answer":"no","answer_type":"closed","attribute":"pathology"}"#,
                "\n"
            ),
        )
        .unwrap();
        let recs = read_qa_records(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].attribute, Attribute::Modality);
        assert_eq!(recs[0].answer_type, AnswerType::Open);
        assert_eq!(recs[1].attribute, Attribute::Pathology);
    }

    #[test]
    fn instruction_lines_are_rejected_as_raw_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        fs::write(
            &path,
            r#"{"image":"a","question":"q","answer":"x","answer_type":"open","options":["x","y"]}"#,
        )
        .unwrap();
        assert!(matches!(read_qa_records(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "\n{not json}\n").unwrap();
        assert!(matches!(read_qa_records(&path), Err(Error::Parse { line: 2, .. })));
    }
}
