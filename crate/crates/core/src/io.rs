//! Sample, shot-pool and score files.
//!
//! Samples and shots are newline-delimited JSON; scores are CSV with the
//! header `sample_id,attack,score,label`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::ShotPools;
use crate::error::{Error, Result};
use crate::oracle::{tokenize_sequence, Oracle};
use crate::types::{Label, LabeledSample, MembershipScore, TokenSequence};

/// One line of a samples file. At least one of `tokens` and `text` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, with = "label_field", skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// Accepts `"member"`, `"non-member"`, `1`, `0`, `true`, `false` or null.
mod label_field {
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    use crate::types::Label;

    pub fn serialize<S: Serializer>(label: &Option<Label>, s: S) -> Result<S::Ok, S::Error> {
        match label {
            Some(l) => s.serialize_str(l.as_str()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Label>, D::Error> {
        let v = Value::deserialize(d)?;
        let parsed = match &v {
            Value::Null => return Ok(None),
            Value::String(s) => Label::parse(s),
            Value::Bool(b) => Some(if *b { Label::Member } else { Label::NonMember }),
            Value::Number(n) => match n.as_u64() {
                Some(1) => Some(Label::Member),
                Some(0) => Some(Label::NonMember),
                _ => None,
            },
            _ => None,
        };
        parsed.map(Some).ok_or_else(|| serde::de::Error::custom(format!("unrecognized label {v}")))
    }
}

impl From<&LabeledSample> for SampleRecord {
    fn from(s: &LabeledSample) -> Self {
        Self {
            sample_id: s.sequence.sample_id().to_string(),
            tokens: Some(s.sequence.tokens().to_vec()),
            text: s.sequence.text().map(str::to_string),
            label: s.label,
        }
    }
}

impl SampleRecord {
    /// Uses the stored tokens, or tokenizes the text through `oracle`.
    pub fn resolve(self, oracle: Option<&dyn Oracle>) -> Result<LabeledSample> {
        let sequence = match (self.tokens, self.text) {
            (Some(tokens), text) => {
                let seq = TokenSequence::new(self.sample_id, tokens)?;
                match text {
                    Some(t) => seq.with_text(t),
                    None => seq,
                }
            }
            (None, Some(text)) => {
                let oracle = oracle.ok_or_else(|| {
                    Error::invalid(format!("sample {:?} has only text and no tokenizer is available", self.sample_id))
                })?;
                tokenize_sequence(oracle, &self.sample_id, &text)?
            }
            (None, None) => {
                return Err(Error::Format(format!("sample {:?} has neither tokens nor text", self.sample_id)));
            }
        };
        Ok(LabeledSample {
            sequence,
            label: self.label,
        })
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Parses newline-delimited JSON, skipping blank lines.
pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a samples file; duplicate ids are rejected.
pub fn read_samples(path: &Path, oracle: Option<&dyn Oracle>) -> Result<Vec<LabeledSample>> {
    let records: Vec<SampleRecord> = read_ndjson(path)?;
    let mut seen = std::collections::HashSet::new();
    records
        .into_iter()
        .map(|r| {
            if !seen.insert(r.sample_id.clone()) {
                return Err(Error::Format(format!("{}: duplicate sample_id {:?}", path.display(), r.sample_id)));
            }
            r.resolve(oracle)
        })
        .collect()
}

pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    write_ndjson(path, samples.iter().map(SampleRecord::from))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotRole {
    MemberShot,
    NonmemberShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotRecord {
    pub sample_id: String,
    pub text: String,
    pub role: ShotRole,
}

/// Reads a shot-pool file, tokenizing every shot through `oracle`.
pub fn read_shot_pools(path: &Path, oracle: &dyn Oracle) -> Result<ShotPools> {
    let mut pools = ShotPools::default();
    for r in read_ndjson::<ShotRecord>(path)? {
        let seq = tokenize_sequence(oracle, &r.sample_id, &r.text)?;
        match r.role {
            ShotRole::MemberShot => pools.member.push(seq),
            ShotRole::NonmemberShot => pools.nonmember.push(seq),
        }
    }
    Ok(pools)
}

pub fn write_shot_pools(path: &Path, pools: &ShotPools) -> Result<()> {
    let record = |s: &TokenSequence, role| -> Result<ShotRecord> {
        Ok(ShotRecord {
            sample_id: s.sample_id().to_string(),
            text: s
                .text()
                .ok_or_else(|| Error::invalid(format!("shot {:?} has no text", s.sample_id())))?
                .to_string(),
            role,
        })
    };
    let records = pools
        .member
        .iter()
        .map(|s| record(s, ShotRole::MemberShot))
        .chain(pools.nonmember.iter().map(|s| record(s, ShotRole::NonmemberShot)))
        .collect::<Result<Vec<_>>>()?;
    write_ndjson(path, records)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    sample_id: String,
    attack: String,
    score: f64,
    label: String,
}

pub fn write_scores(path: &Path, scores: &[MembershipScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for s in scores {
        w.serialize(ScoreRow {
            sample_id: s.sample_id.clone(),
            attack: s.attack.clone(),
            score: s.score,
            label: s.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
        })
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<MembershipScore>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    r.deserialize::<ScoreRow>()
        .enumerate()
        .map(|(n, row)| {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let label = match row.label.trim() {
                "" => None,
                s => Some(Label::parse(s).ok_or_else(|| {
                    Error::Format(format!("{}: row {}: unrecognized label {s:?}", path.display(), n + 2))
                })?),
            };
            Ok(MembershipScore {
                sample_id: row.sample_id,
                attack: row.attack,
                score: row.score,
                label,
            })
        })
        .collect()
}
