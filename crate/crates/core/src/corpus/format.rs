use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use super::{Conversation, CorpusError, Language, RecExample, Result, Speaker, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Canonical,
    Durecdial,
    Jddcrec,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(CorpusFormat::Canonical),
            "durecdial" | "durecdial2" => Ok(CorpusFormat::Durecdial),
            "jddcrec" | "jddc" => Ok(CorpusFormat::Jddcrec),
            other => Err(CorpusError::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Field mapping for DuRecDial 2.0 style records.
///
/// Upstream files hold one JSON object per line. The adapter reads:
/// - `conversation`: list of utterance strings, speakers alternating;
/// - `goal_type_list`: one goal/topic label per utterance (e.g.
///   `"Movie recommendation"`), used as the utterance topic;
/// - `user_profile`: flattened into [`Conversation::profile`];
/// - `situation`: stored in [`Conversation::context`] under `situation`.
///
/// The first speaker is taken from an optional per-record `first_speaker`
/// field (`"user"` / `"bot"`), falling back to [`DurecdialOptions::first_speaker`].
/// A leading goal marker such as `[2]` is stripped from utterance text.
#[derive(Debug, Clone)]
pub struct DurecdialOptions {
    pub utterance_key: String,
    pub topic_key: String,
    pub profile_key: String,
    pub situation_key: String,
    pub first_speaker: Speaker,
    /// Forces the language instead of detecting CJK text.
    pub language: Option<Language>,
}

impl Default for DurecdialOptions {
    fn default() -> Self {
        Self {
            utterance_key: "conversation".into(),
            topic_key: "goal_type_list".into(),
            profile_key: "user_profile".into(),
            situation_key: "situation".into(),
            first_speaker: Speaker::User,
            language: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub durecdial: DurecdialOptions,
    /// Domain tag written on every loaded conversation (adapters only).
    pub domain_tag: Option<String>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Conversation>> {
    load_corpus_with(path, format, &LoadOptions::default())
}

pub fn load_corpus_with(
    path: &Path,
    format: CorpusFormat,
    options: &LoadOptions,
) -> Result<Vec<Conversation>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        CorpusFormat::Canonical => parse_canonical(&text),
        CorpusFormat::Durecdial => {
            let tag = options.domain_tag.clone().unwrap_or_else(|| "durecdial".into());
            parse_durecdial(&text, &stem, &tag, &options.durecdial)
        }
        CorpusFormat::Jddcrec => {
            let tag = options.domain_tag.clone().unwrap_or_else(|| "e-commerce".into());
            parse_jddcrec(&text, &tag)
        }
    }
}

fn records(text: &str) -> Result<Vec<(usize, Map<String, Value>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            record: i,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        match value {
            Value::Object(map) => out.push((i, map)),
            _ => {
                return Err(CorpusError::Parse {
                    record: i,
                    field: "<record>".into(),
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus("no records found".into()));
    }
    Ok(out)
}

fn parse_err(record: usize, field: impl Into<String>, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        record,
        field: field.into(),
        message: message.into(),
    }
}

fn get_str<'a>(obj: &'a Map<String, Value>, record: usize, field: &str) -> Result<&'a str> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(parse_err(record, field, "expected a string")),
        None => Err(parse_err(record, field, "missing field")),
    }
}

fn get_any<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<(&'a Value, String)> {
    keys.iter()
        .find_map(|k| obj.get(*k).map(|v| (v, (*k).to_string())))
}

fn string_map(value: &Value, record: usize, field: &str) -> Result<BTreeMap<String, String>> {
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(record, field, "expected an object"))?;
    Ok(obj
        .iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (k.clone(), v)
        })
        .collect())
}

fn optional_map(
    obj: &Map<String, Value>,
    record: usize,
    field: &str,
) -> Result<Option<BTreeMap<String, String>>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => string_map(v, record, field).map(Some),
    }
}

fn parse_label(value: Option<&Value>, record: usize, field: &str) -> Result<Option<u8>> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => match n.as_u64() {
            Some(l @ 0..=1) => Ok(Some(l as u8)),
            _ => Err(parse_err(record, field, format!("label {n} outside {{0,1}}"))),
        },
        Some(Value::Bool(b)) => Ok(Some(*b as u8)),
        Some(_) => Err(parse_err(record, field, "expected 0 or 1")),
    }
}

fn finish(conv: Conversation, record: usize) -> Result<Conversation> {
    conv.validate().map_err(|e| match e {
        CorpusError::Labeling { turn, message, .. } => {
            parse_err(record, format!("utterances[{turn}]"), message)
        }
        other => other,
    })?;
    Ok(conv)
}

/// One JSON object per line:
/// `{id, language, domain_tag, utterances: [{speaker, text, topic?, raw_label?}], profile?, context?}`.
pub fn parse_canonical(text: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (record, obj) in records(text)? {
        let id = get_str(&obj, record, "id")?.to_string();
        let language = Language::parse(get_str(&obj, record, "language")?)
            .ok_or_else(|| parse_err(record, "language", "expected EN or ZH"))?;
        let domain_tag = match obj.get("domain_tag") {
            Some(Value::String(s)) => s.clone(),
            None => String::new(),
            Some(_) => return Err(parse_err(record, "domain_tag", "expected a string")),
        };
        let raw_utts = obj
            .get("utterances")
            .ok_or_else(|| parse_err(record, "utterances", "missing field"))?
            .as_array()
            .ok_or_else(|| parse_err(record, "utterances", "expected an array"))?;
        let mut utterances = Vec::with_capacity(raw_utts.len());
        for (i, u) in raw_utts.iter().enumerate() {
            let path = |f: &str| format!("utterances[{i}].{f}");
            let u = u
                .as_object()
                .ok_or_else(|| parse_err(record, format!("utterances[{i}]"), "expected an object"))?;
            let speaker = match u.get("speaker") {
                Some(Value::String(s)) => parse_speaker(s)
                    .ok_or_else(|| parse_err(record, path("speaker"), format!("unknown speaker `{s}`")))?,
                Some(_) => return Err(parse_err(record, path("speaker"), "expected a string")),
                None => return Err(parse_err(record, path("speaker"), "missing field")),
            };
            let text = match u.get("text") {
                Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
                Some(Value::String(_)) => return Err(parse_err(record, path("text"), "empty text")),
                Some(_) => return Err(parse_err(record, path("text"), "expected a string")),
                None => return Err(parse_err(record, path("text"), "missing field")),
            };
            let topic = match u.get("topic") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(parse_err(record, path("topic"), "expected a string")),
            };
            let raw_label = parse_label(u.get("raw_label"), record, &path("raw_label"))?;
            utterances.push(Utterance {
                speaker,
                text,
                turn_index: i,
                topic,
                raw_label,
            });
        }
        let conv = Conversation {
            id,
            language,
            domain_tag,
            utterances,
            profile: optional_map(&obj, record, "profile")?,
            context: optional_map(&obj, record, "context")?,
        };
        out.push(finish(conv, record)?);
    }
    Ok(out)
}

fn parse_speaker(s: &str) -> Option<Speaker> {
    match s.to_ascii_lowercase().as_str() {
        "user" | "seeker" | "customer" | "q" => Some(Speaker::User),
        "system" | "bot" | "recommender" | "agent" | "waiter" | "a" => Some(Speaker::System),
        _ => None,
    }
}

fn contains_cjk(s: &str) -> bool {
    s.chars().any(|c| ('\u{4E00}'..='\u{9FFF}').contains(&c))
}

fn strip_goal_marker(s: &str) -> &str {
    let t = s.trim_start();
    if let Some(rest) = t.strip_prefix('[') {
        if let Some(end) = rest.find(']') {
            if end > 0 && rest[..end].chars().all(|c| c.is_ascii_digit()) {
                return rest[end + 1..].trim_start();
            }
        }
    }
    s
}

/// See [`DurecdialOptions`] for the field mapping.
pub fn parse_durecdial(
    text: &str,
    id_prefix: &str,
    domain_tag: &str,
    opts: &DurecdialOptions,
) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (record, obj) in records(text)? {
        let utts = obj
            .get(&opts.utterance_key)
            .ok_or_else(|| parse_err(record, &opts.utterance_key, "missing field"))?
            .as_array()
            .ok_or_else(|| parse_err(record, &opts.utterance_key, "expected an array"))?;
        let topics = obj
            .get(&opts.topic_key)
            .ok_or_else(|| parse_err(record, &opts.topic_key, "missing field"))?
            .as_array()
            .ok_or_else(|| parse_err(record, &opts.topic_key, "expected an array"))?;
        if topics.len() != utts.len() {
            return Err(parse_err(
                record,
                &opts.topic_key,
                format!("{} topics for {} utterances", topics.len(), utts.len()),
            ));
        }
        let first = match obj.get("first_speaker") {
            Some(Value::String(s)) => parse_speaker(s)
                .ok_or_else(|| parse_err(record, "first_speaker", format!("unknown speaker `{s}`")))?,
            Some(_) => return Err(parse_err(record, "first_speaker", "expected a string")),
            None => opts.first_speaker,
        };
        let other = match first {
            Speaker::User => Speaker::System,
            Speaker::System => Speaker::User,
        };
        let mut utterances = Vec::with_capacity(utts.len());
        let mut saw_cjk = false;
        for (i, (u, t)) in utts.iter().zip(topics).enumerate() {
            let raw = u.as_str().ok_or_else(|| {
                parse_err(record, format!("{}[{i}]", opts.utterance_key), "expected a string")
            })?;
            let text = strip_goal_marker(raw).trim().to_string();
            if text.is_empty() {
                return Err(parse_err(
                    record,
                    format!("{}[{i}]", opts.utterance_key),
                    "empty text",
                ));
            }
            saw_cjk |= contains_cjk(&text);
            let topic = match t {
                Value::String(s) => s.clone(),
                Value::Null => String::new(),
                _ => {
                    return Err(parse_err(
                        record,
                        format!("{}[{i}]", opts.topic_key),
                        "expected a string",
                    ))
                }
            };
            utterances.push(Utterance {
                speaker: if i % 2 == 0 { first } else { other },
                text,
                turn_index: i,
                topic: Some(topic),
                raw_label: None,
            });
        }
        let language = opts
            .language
            .unwrap_or(if saw_cjk { Language::Zh } else { Language::En });
        let profile = match obj.get(&opts.profile_key) {
            None | Some(Value::Null) => None,
            Some(v) => Some(string_map(v, record, &opts.profile_key)?),
        };
        let context = match obj.get(&opts.situation_key) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(BTreeMap::from([("situation".to_string(), s.clone())])),
            Some(other) => Some(BTreeMap::from([("situation".to_string(), other.to_string())])),
        };
        let id = match obj.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("{id_prefix}-{record}"),
        };
        let conv = Conversation {
            id,
            language,
            domain_tag: domain_tag.to_string(),
            utterances,
            profile,
            context,
        };
        out.push(finish(conv, record)?);
    }
    Ok(out)
}

/// JDDCRec-style records, one JSON object per line:
/// `{session_id, dialog: [{role, text, label?}], profile?, context?}`.
///
/// Accepted aliases: `id` for `session_id`; `utterances` for `dialog`;
/// `speaker` for `role`; `content` for `text`; `recommendability` or
/// `raw_label` for `label`. Roles `Q`/`customer`/`user` are the user side and
/// `A`/`agent`/`waiter`/`system` the system side. Chinese is assumed unless
/// the record sets `language`.
pub fn parse_jddcrec(text: &str, domain_tag: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (record, obj) in records(text)? {
        let id = match get_any(&obj, &["session_id", "id"]) {
            Some((Value::String(s), _)) => s.clone(),
            Some((Value::Number(n), _)) => n.to_string(),
            Some((_, key)) => return Err(parse_err(record, key, "expected a string")),
            None => return Err(parse_err(record, "session_id", "missing field")),
        };
        let (dialog, dialog_key) = get_any(&obj, &["dialog", "utterances"])
            .ok_or_else(|| parse_err(record, "dialog", "missing field"))?;
        let dialog = dialog
            .as_array()
            .ok_or_else(|| parse_err(record, &dialog_key, "expected an array"))?;
        let language = match obj.get("language") {
            Some(Value::String(s)) => Language::parse(s)
                .ok_or_else(|| parse_err(record, "language", "expected EN or ZH"))?,
            _ => Language::Zh,
        };
        let mut utterances = Vec::with_capacity(dialog.len());
        for (i, u) in dialog.iter().enumerate() {
            let at = |f: &str| format!("{dialog_key}[{i}].{f}");
            let u = u
                .as_object()
                .ok_or_else(|| parse_err(record, format!("{dialog_key}[{i}]"), "expected an object"))?;
            let speaker = match get_any(u, &["role", "speaker"]) {
                Some((Value::String(s), key)) => parse_speaker(s)
                    .ok_or_else(|| parse_err(record, at(&key), format!("unknown role `{s}`")))?,
                Some((_, key)) => return Err(parse_err(record, at(&key), "expected a string")),
                None => return Err(parse_err(record, at("role"), "missing field")),
            };
            let text = match get_any(u, &["text", "content"]) {
                Some((Value::String(s), _)) if !s.trim().is_empty() => s.trim().to_string(),
                Some((Value::String(_), key)) => {
                    return Err(parse_err(record, at(&key), "empty text"))
                }
                Some((_, key)) => return Err(parse_err(record, at(&key), "expected a string")),
                None => return Err(parse_err(record, at("text"), "missing field")),
            };
            let raw_label = match get_any(u, &["label", "recommendability", "raw_label"]) {
                Some((v, key)) => parse_label(Some(v), record, &at(&key))?,
                None => None,
            };
            utterances.push(Utterance {
                speaker,
                text,
                turn_index: i,
                topic: None,
                raw_label: if speaker == Speaker::System { raw_label } else { None },
            });
        }
        let conv = Conversation {
            id,
            language,
            domain_tag: domain_tag.to_string(),
            utterances,
            profile: optional_map(&obj, record, "profile")?,
            context: optional_map(&obj, record, "context")?,
        };
        out.push(finish(conv, record)?);
    }
    Ok(out)
}

pub fn write_canonical(path: &Path, conversations: &[Conversation]) -> Result<()> {
    write_lines(path, conversations)
}

pub fn write_examples(path: &Path, examples: &[RecExample]) -> Result<()> {
    write_lines(path, examples)
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).expect("corpus types serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_examples(path: &Path) -> Result<Vec<RecExample>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: RecExample = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            record: i,
            field: "<example>".into(),
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}
