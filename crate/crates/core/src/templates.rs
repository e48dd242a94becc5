//! Cloze-style prompt templates, verbalizers and deterministic rendering.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Tokenizer;
use crate::corpus::{HistoryTurn, Language, RecExample, Speaker};

pub const HISTORY_SLOT: &str = "{history}";
pub const MASK_SLOT: &str = "{mask}";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("unknown template id `{0}`")]
    NotFound(String),
    #[error("template `{id}` is {template}, example is {example}")]
    Language {
        id: String,
        template: Language,
        example: Language,
    },
    #[error("template scaffold needs {needed} tokens, budget is {max}")]
    Render { needed: usize, max: usize },
    #[error("verbalizer answer `{answer}` maps to {pieces} tokens, expected exactly 1")]
    Binding { answer: String, pieces: usize },
    #[error("verbalizer answers `{0}` and `{1}` share one token id")]
    SharedToken(String, String),
    #[error("template registry {path}: {message}")]
    Registry { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardTemplate {
    pub id: String,
    pub language: Language,
    pub body: String,
}

impl HardTemplate {
    pub fn new(id: &str, language: Language, body: &str) -> Result<Self, TemplateError> {
        let t = Self {
            id: id.to_string(),
            language,
            body: body.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let bad = |message: String| TemplateError::Invalid {
            id: self.id.clone(),
            message,
        };
        for slot in [HISTORY_SLOT, MASK_SLOT] {
            let n = self.body.matches(slot).count();
            if n != 1 {
                return Err(bad(format!("{slot} occurs {n} times, expected once")));
            }
        }
        if self.body.replace(HISTORY_SLOT, "").replace(MASK_SLOT, "").trim().is_empty() {
            return Err(bad("body has no text outside its slots".into()));
        }
        Ok(())
    }

    /// Text pieces around the slots, in body order.
    fn segments(&self) -> Vec<Segment<'_>> {
        let mut out = Vec::new();
        let mut rest = self.body.as_str();
        loop {
            let h = rest.find(HISTORY_SLOT);
            let m = rest.find(MASK_SLOT);
            let (at, slot, len) = match (h, m) {
                (Some(h), Some(m)) if h < m => (h, Segment::History, HISTORY_SLOT.len()),
                (Some(h), None) => (h, Segment::History, HISTORY_SLOT.len()),
                (_, Some(m)) => (m, Segment::Mask, MASK_SLOT.len()),
                (None, None) => {
                    out.push(Segment::Text(rest));
                    return out;
                }
            };
            out.push(Segment::Text(&rest[..at]));
            out.push(slot);
            rest = &rest[at + len..];
        }
    }
}

enum Segment<'a> {
    Text(&'a str),
    History,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    /// Answer strings for class 0 and class 1.
    pub class_tokens: [String; 2],
}

impl Default for Verbalizer {
    fn default() -> Self {
        Self {
            class_tokens: ["0".into(), "1".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerBinding {
    pub token_ids: [u32; 2],
}

pub fn bind_verbalizer(v: &Verbalizer, tokenizer: &dyn Tokenizer) -> Result<VerbalizerBinding, TemplateError> {
    let mut ids = [0u32; 2];
    for (slot, answer) in ids.iter_mut().zip(&v.class_tokens) {
        let pieces = tokenizer.encode(answer);
        if pieces.len() != 1 {
            return Err(TemplateError::Binding {
                answer: answer.clone(),
                pieces: pieces.len(),
            });
        }
        *slot = pieces[0];
    }
    if ids[0] == ids[1] {
        return Err(TemplateError::SharedToken(v.class_tokens[0].clone(), v.class_tokens[1].clone()));
    }
    Ok(VerbalizerBinding { token_ids: ids })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub token_ids: Vec<u32>,
    pub mask_position: usize,
    pub dropped_history_turns: usize,
}

pub fn role_word(language: Language, speaker: Speaker) -> &'static str {
    match (language, speaker) {
        (Language::En, Speaker::User) => "User",
        (Language::En, Speaker::System) => "System",
        (Language::Zh, Speaker::User) => "用户",
        (Language::Zh, Speaker::System) => "系统",
    }
}

/// `Role: text` for one history turn.
pub fn history_line(language: Language, turn: &HistoryTurn) -> String {
    format!("{}: {}", role_word(language, turn.speaker), turn.text)
}

/// Keeps the newest turns whose token counts fit in `budget`; returns the
/// index of the first kept turn.
fn fit_newest(lengths: &[usize], budget: usize) -> usize {
    let mut used = 0;
    let mut first = lengths.len();
    for (i, len) in lengths.iter().enumerate().rev() {
        if used + len > budget {
            break;
        }
        used += len;
        first = i;
    }
    first
}

/// Masked-LM prompt: `[CLS] scaffold-with-history-and-[MASK] [SEP]`.
/// Whole oldest turns are dropped until the sequence fits in `max_len`.
pub fn render(
    template: &HardTemplate,
    example: &RecExample,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<RenderedPrompt, TemplateError> {
    render_inner(template, example, tokenizer, max_len, false)
}

/// Left-to-right prompt for causal models: no `[CLS]`/`[SEP]`, and the
/// sequence stops at the mask, which is its last token.
pub fn render_causal(
    template: &HardTemplate,
    example: &RecExample,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<RenderedPrompt, TemplateError> {
    render_inner(template, example, tokenizer, max_len, true)
}

fn render_inner(
    template: &HardTemplate,
    example: &RecExample,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
    causal: bool,
) -> Result<RenderedPrompt, TemplateError> {
    if template.language != example.language {
        return Err(TemplateError::Language {
            id: template.id.clone(),
            template: template.language,
            example: example.language,
        });
    }
    let sp = tokenizer.special();
    let mut segments = template.segments();
    if causal {
        let cut = segments
            .iter()
            .position(|s| matches!(s, Segment::Mask))
            .expect("validated template");
        segments.truncate(cut + 1);
    }
    let encoded: Vec<Option<Vec<u32>>> = segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => Some(tokenizer.encode(t)),
            Segment::Mask => Some(vec![sp.mask]),
            Segment::History => None,
        })
        .collect();
    let specials = if causal { 0 } else { 2 };
    let scaffold: usize = specials + encoded.iter().flatten().map(Vec::len).sum::<usize>();
    if scaffold > max_len {
        return Err(TemplateError::Render {
            needed: scaffold,
            max: max_len,
        });
    }
    let has_history = segments.iter().any(|s| matches!(s, Segment::History));
    let turns: Vec<Vec<u32>> = if has_history {
        example
            .history
            .iter()
            .map(|t| tokenizer.encode(&history_line(template.language, t)))
            .collect()
    } else {
        Vec::new()
    };
    let lengths: Vec<usize> = turns.iter().map(Vec::len).collect();
    let first = fit_newest(&lengths, max_len - scaffold);

    let mut ids = Vec::with_capacity(max_len);
    if !causal {
        ids.push(sp.cls);
    }
    let mut mask_position = 0;
    for (seg, enc) in segments.iter().zip(&encoded) {
        match seg {
            Segment::History => turns[first..].iter().for_each(|t| ids.extend_from_slice(t)),
            Segment::Mask => {
                mask_position = ids.len();
                ids.push(sp.mask);
            }
            Segment::Text(_) => ids.extend_from_slice(enc.as_ref().expect("text encoded")),
        }
    }
    if !causal {
        ids.push(sp.sep);
    }
    Ok(RenderedPrompt {
        token_ids: ids,
        mask_position,
        dropped_history_turns: first,
    })
}

/// Baseline input: `[CLS] u1 [SEP] u2 [SEP] … [SEP]`, dropping oldest
/// utterances to fit. Returns the ids and the number of dropped turns.
pub fn render_concat(example: &RecExample, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<(Vec<u32>, usize), TemplateError> {
    let sp = tokenizer.special();
    if max_len < 2 {
        return Err(TemplateError::Render { needed: 2, max: max_len });
    }
    let turns: Vec<Vec<u32>> = example
        .history
        .iter()
        .map(|t| {
            let mut v = tokenizer.encode(&t.text);
            v.push(sp.sep);
            v
        })
        .collect();
    let lengths: Vec<usize> = turns.iter().map(Vec::len).collect();
    // One slot for [CLS]; an empty history still ends with [SEP].
    let first = fit_newest(&lengths, max_len - 1);
    let mut ids = vec![sp.cls];
    turns[first..].iter().for_each(|t| ids.extend_from_slice(t));
    if ids.len() == 1 {
        ids.push(sp.sep);
    }
    Ok((ids, first))
}

const JDDC_T1: &str = "Assuming that you are an intelligent e-commerce customer service, you can intelligently determine the needs of customers in the process of communicating with customers, and give recommendations when needed.The following is the dialogue history between you and a customer: {history} You will choose? Options: 0: no recommendation; 1: recommendation. Answer: {mask}";

/// The built-in registry. `sentinel-en` is sized for the tiny backbone's
/// closed vocabulary.
pub fn builtin_templates() -> Vec<HardTemplate> {
    let t = |id: &str, lang, body: &str| HardTemplate::new(id, lang, body).expect("built-in template is valid");
    vec![
        t("jddc-t1-zh", Language::Zh, JDDC_T1),
        t(
            "durecdial-t1-en",
            Language::En,
            "You are a conversational assistant chatting with a user about movies, music, food, weather and other topics. Here is the conversation so far: {history} Should you make a recommendation in your next reply? Options: 0: no recommendation; 1: recommendation. Answer: {mask}",
        ),
        t(
            "durecdial-t1-zh",
            Language::Zh,
            "你是一个与用户聊天的对话助手，话题涉及电影、音乐、美食、天气等。以下是目前的对话：{history} 你的下一句回复是否应该进行推荐？选项：0：不推荐；1：推荐。答案：{mask}",
        ),
        t(
            "durecdial-t2-en",
            Language::En,
            "Dialogue: {history} Is this the right moment for the system to recommend something? 0 means no, 1 means yes. {mask}",
        ),
        t(
            "durecdial-t2-zh",
            Language::Zh,
            "对话：{history} 现在是系统进行推荐的合适时机吗？0表示否，1表示是。{mask}",
        ),
        t(
            "sentinel-en",
            Language::En,
            "{history} answer : {mask}",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: Vec<HardTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self {
            templates: builtin_templates(),
        }
    }
}

impl TemplateRegistry {
    pub fn empty() -> Self {
        Self { templates: Vec::new() }
    }

    pub fn templates(&self) -> &[HardTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Result<&HardTemplate, TemplateError> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| TemplateError::NotFound(id.to_string()))
    }

    /// Adds or replaces by id.
    pub fn insert(&mut self, template: HardTemplate) -> Result<(), TemplateError> {
        template.validate()?;
        match self.templates.iter_mut().find(|t| t.id == template.id) {
            Some(slot) => *slot = template,
            None => self.templates.push(template),
        }
        Ok(())
    }

    /// One JSON object per line: `{"id", "language", "body"}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.templates {
            out.push_str(&serde_json::to_string(t).expect("template serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TemplateError> {
        let mut reg = Self::empty();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let t: HardTemplate = serde_json::from_str(line).map_err(|e| TemplateError::Registry {
                path: format!("line {}", i + 1),
                message: e.to_string(),
            })?;
            if reg.get(&t.id).is_ok() {
                return Err(TemplateError::Registry {
                    path: format!("line {}", i + 1),
                    message: format!("duplicate id `{}`", t.id),
                });
            }
            reg.insert(t)?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Registry {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TemplateError> {
        let err = |e: std::io::Error| TemplateError::Registry {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::fs::File::create(path).map_err(err)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{tiny_tokenizer, WordPieceTokenizer};

    fn example(turns: &[(Speaker, &str)]) -> RecExample {
        RecExample {
            conversation_id: "c".into(),
            target_index: turns.len(),
            history: turns
                .iter()
                .map(|(s, t)| HistoryTurn {
                    speaker: *s,
                    text: t.to_string(),
                })
                .collect(),
            label: 0,
            topic: None,
            language: Language::En,
        }
    }

    fn sentinel() -> HardTemplate {
        TemplateRegistry::default().get("sentinel-en").unwrap().clone()
    }

    #[test]
    fn slot_invariants() {
        assert!(HardTemplate::new("x", Language::En, "{history} {mask}").is_err());
        assert!(HardTemplate::new("x", Language::En, "a {history} {history} {mask}").is_err());
        assert!(HardTemplate::new("x", Language::En, "a {history}").is_err());
        for t in builtin_templates() {
            assert_eq!(t.body.matches(HISTORY_SLOT).count(), 1);
            assert_eq!(t.body.matches(MASK_SLOT).count(), 1);
        }
        let reg = TemplateRegistry::default();
        assert!(reg.get("jddc-t1-zh").unwrap().body.starts_with("Assuming that you are an intelligent e-commerce customer service"));
        assert!(matches!(reg.get("nope"), Err(TemplateError::NotFound(_))));
    }

    #[test]
    fn render_without_truncation() {
        let tok = tiny_tokenizer();
        let ex = example(&[(Speaker::User, "hello"), (Speaker::System, "hi")]);
        let r = render(&sentinel(), &ex, &tok, 256).unwrap();
        assert_eq!(r.dropped_history_turns, 0);
        assert_eq!(r.token_ids[r.mask_position], tok.special().mask);
        assert_eq!(
            tok.decode(&r.token_ids),
            "[CLS] user : hello system : hi answer : [MASK] [SEP]"
        );
    }

    #[test]
    fn render_drops_oldest_whole_turns() {
        let tok = tiny_tokenizer();
        // Each turn "user : hello" or "system : hi" is 3 tokens; scaffold is 5.
        let turns: Vec<(Speaker, &str)> = (0..10)
            .map(|i| if i % 2 == 0 { (Speaker::User, "hello") } else { (Speaker::System, "hi") })
            .collect();
        let ex = example(&turns);
        let r = render(&sentinel(), &ex, &tok, 5 + 6 * 3).unwrap();
        assert_eq!(r.dropped_history_turns, 4);
        assert_eq!(r.token_ids.len(), 23);
        assert!(matches!(
            render(&sentinel(), &ex, &tok, 4),
            Err(TemplateError::Render { needed: 5, max: 4 })
        ));
    }

    #[test]
    fn empty_history_and_causal_form() {
        let tok = tiny_tokenizer();
        let ex = example(&[]);
        let r = render(&sentinel(), &ex, &tok, 64).unwrap();
        assert_eq!(r.token_ids[r.mask_position], tok.special().mask);
        let c = render_causal(&sentinel(), &example(&[(Speaker::User, "hi")]), &tok, 64).unwrap();
        assert_eq!(c.mask_position, c.token_ids.len() - 1);
        assert_ne!(c.token_ids[0], tok.special().cls);
    }

    #[test]
    fn concat_baseline_input() {
        let tok = tiny_tokenizer();
        let ex = example(&[(Speaker::User, "hello you"), (Speaker::System, "hi")]);
        let (ids, dropped) = render_concat(&ex, &tok, 64).unwrap();
        assert_eq!(tok.decode(&ids), "[CLS] hello you [SEP] hi [SEP]");
        assert_eq!(dropped, 0);
        let (ids, dropped) = render_concat(&ex, &tok, 4).unwrap();
        assert_eq!(tok.decode(&ids), "[CLS] hi [SEP]");
        assert_eq!(dropped, 1);
        let (ids, _) = render_concat(&example(&[]), &tok, 4).unwrap();
        assert_eq!(tok.decode(&ids), "[CLS] [SEP]");
    }

    #[test]
    fn verbalizer_binding() {
        let tok = tiny_tokenizer();
        let b = bind_verbalizer(&Verbalizer::default(), &tok).unwrap();
        assert_eq!(b.token_ids, [5, 6]);
        let wp = WordPieceTokenizer::from_vocab(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "absolutely", "-", "yes"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            true,
            16,
        )
        .unwrap();
        let v = Verbalizer {
            class_tokens: ["no".into(), "absolutely-yes".into()],
        };
        assert!(matches!(bind_verbalizer(&v, &wp), Err(TemplateError::Binding { pieces: 3, .. })));
        let v = Verbalizer {
            class_tokens: ["zzz".into(), "qqq".into()],
        };
        assert!(matches!(bind_verbalizer(&v, &wp), Err(TemplateError::SharedToken(..))));
    }

    #[test]
    fn registry_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.jsonl");
        TemplateRegistry::default().save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = TemplateRegistry::load(&path).unwrap();
        assert_eq!(back, TemplateRegistry::default());
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
