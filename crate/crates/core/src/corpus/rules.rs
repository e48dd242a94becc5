use std::fmt::Write as _;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Conversation, CorpusError, Result, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchScope {
    #[default]
    Any,
    User,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Case-insensitive substring.
    #[default]
    Keyword,
    /// Regular expression, matched against each utterance.
    Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub pattern: String,
    #[serde(default)]
    pub kind: RuleKind,
    #[serde(default)]
    pub scope: MatchScope,
}

/// Keyword rules for dropping conversations that are unlikely to admit a
/// recommendation. Loaded from TOML:
///
/// ```toml
/// [[rule]]
/// pattern = "退货"
///
/// [[rule]]
/// pattern = "^(refund|return)\\b"
/// kind = "regex"
/// scope = "user"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default, rename = "rule")]
    pub rules: Vec<FilterRule>,
}

impl RuleSet {
    /// Returns, refunds, logistics and invoicing terms in Chinese and English.
    pub fn default_after_sales() -> Self {
        const TERMS: &[&str] = &[
            "退货", "退款", "退换", "换货", "物流", "快递", "发货", "配送", "运单", "发票", "return",
            "refund", "logistics", "shipping", "delivery", "tracking number", "invoice",
        ];
        Self {
            rules: TERMS
                .iter()
                .map(|t| FilterRule {
                    pattern: t.to_string(),
                    kind: RuleKind::Keyword,
                    scope: MatchScope::Any,
                })
                .collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CorpusError::Config(format!("rule file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("rule set serializes")
    }
}

enum Matcher {
    Keyword(String),
    Regex(Regex),
}

impl Matcher {
    fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Keyword(k) => text.to_lowercase().contains(k),
            Matcher::Regex(r) => r.is_match(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Conversations each rule matched, in rule order. A conversation can
    /// count toward several rules.
    pub rule_hits: Vec<(FilterRule, usize)>,
}

impl FilterReport {
    /// Sums two reports produced by the same rule set.
    pub fn merge(&self, other: &FilterReport) -> FilterReport {
        FilterReport {
            input: self.input + other.input,
            kept: self.kept + other.kept,
            dropped: self.dropped + other.dropped,
            rule_hits: self
                .rule_hits
                .iter()
                .zip(&other.rule_hits)
                .map(|((rule, a), (_, b))| (rule.clone(), a + b))
                .collect(),
        }
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.input == 0 {
            0.0
        } else {
            self.kept as f64 / self.input as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rule,pattern,kind,scope,hits\n");
        for (i, (rule, hits)) in self.rule_hits.iter().enumerate() {
            let kind = match rule.kind {
                RuleKind::Keyword => "keyword",
                RuleKind::Regex => "regex",
            };
            let scope = match rule.scope {
                MatchScope::Any => "any",
                MatchScope::User => "user",
                MatchScope::System => "system",
            };
            let _ = writeln!(s, "{i},{},{kind},{scope},{hits}", csv_field(&rule.pattern));
        }
        let _ = writeln!(s, "input,,,,{}", self.input);
        let _ = writeln!(s, "kept,,,,{}", self.kept);
        let _ = writeln!(s, "dropped,,,,{}", self.dropped);
        let _ = writeln!(s, "kept_percent,,,,{:.1}", 100.0 * self.kept_fraction());
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Drops every conversation in which any rule matches an utterance in the
/// rule's scope. An empty rule set is the identity (with a warning).
pub fn rule_based_filter(
    convs: Vec<Conversation>,
    rules: &RuleSet,
) -> Result<(Vec<Conversation>, FilterReport)> {
    let input = convs.len();
    if rules.rules.is_empty() {
        log::warn!("rule-based filter called with no rules; corpus unchanged");
        return Ok((
            convs,
            FilterReport {
                input,
                kept: input,
                dropped: 0,
                rule_hits: vec![],
            },
        ));
    }
    let matchers = rules
        .rules
        .iter()
        .map(|r| match r.kind {
            RuleKind::Keyword => Ok(Matcher::Keyword(r.pattern.to_lowercase())),
            RuleKind::Regex => Regex::new(&r.pattern)
                .map(Matcher::Regex)
                .map_err(|e| CorpusError::Config(format!("bad rule pattern `{}`: {e}", r.pattern))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hits = vec![0usize; matchers.len()];
    let mut kept = Vec::with_capacity(convs.len());
    for conv in convs {
        let mut dropped = false;
        for (i, (rule, m)) in rules.rules.iter().zip(&matchers).enumerate() {
            let fired = conv.utterances.iter().any(|u| {
                let in_scope = match rule.scope {
                    MatchScope::Any => true,
                    MatchScope::User => u.speaker == Speaker::User,
                    MatchScope::System => u.speaker == Speaker::System,
                };
                in_scope && m.matches(&u.text)
            });
            if fired {
                hits[i] += 1;
                dropped = true;
            }
        }
        if !dropped {
            kept.push(conv);
        }
    }
    let report = FilterReport {
        input,
        kept: kept.len(),
        dropped: input - kept.len(),
        rule_hits: rules.rules.iter().cloned().zip(hits).collect(),
    };
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Utterance};

    fn conv(id: &str, texts: &[(Speaker, &str)]) -> Conversation {
        Conversation {
            id: id.into(),
            language: Language::En,
            domain_tag: "shop".into(),
            utterances: texts
                .iter()
                .enumerate()
                .map(|(i, (s, t))| Utterance {
                    speaker: *s,
                    text: t.to_string(),
                    turn_index: i,
                    topic: None,
                    raw_label: None,
                })
                .collect(),
            profile: None,
            context: None,
        }
    }

    #[test]
    fn keyword_rule_drops_conversation() {
        let rules = RuleSet {
            rules: vec![FilterRule {
                pattern: "return shipment".into(),
                kind: RuleKind::Keyword,
                scope: MatchScope::Any,
            }],
        };
        let convs = vec![
            conv("a", &[(Speaker::User, "How do I arrange a Return Shipment?"), (Speaker::System, "ok")]),
            conv("b", &[(Speaker::User, "any phones?"), (Speaker::System, "yes")]),
        ];
        let (kept, report) = rule_based_filter(convs, &rules).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "b");
        assert_eq!(report.rule_hits[0].1, 1);
    }

    #[test]
    fn empty_rules_is_identity() {
        let convs = vec![conv("a", &[(Speaker::System, "refund")])];
        let (kept, report) = rule_based_filter(convs.clone(), &RuleSet::default()).unwrap();
        assert_eq!(kept, convs);
        assert_eq!(report.dropped, 0);
    }

    #[test]
    fn scope_and_regex() {
        let rules = RuleSet::from_toml(
            "[[rule]]\npattern = '^track'\nkind = 'regex'\nscope = 'user'\n",
        )
        .unwrap();
        let convs = vec![
            conv("a", &[(Speaker::User, "track my parcel"), (Speaker::System, "sure")]),
            conv("b", &[(Speaker::User, "hi"), (Speaker::System, "track it online")]),
        ];
        let (kept, _) = rule_based_filter(convs, &rules).unwrap();
        assert_eq!(kept.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn report_for_78_of_100() {
        let rules = RuleSet::default_after_sales();
        let convs: Vec<_> = (0..100)
            .map(|i| {
                let text = if i < 78 { "I want a refund" } else { "show me new phones" };
                conv(&format!("c{i}"), &[(Speaker::User, text), (Speaker::System, "ok")])
            })
            .collect();
        let (kept, report) = rule_based_filter(convs, &rules).unwrap();
        assert_eq!(kept.len(), 22);
        assert_eq!(report.dropped, 78);
        assert!((report.kept_fraction() - 0.22).abs() < 1e-12);
        assert!(report.to_csv().contains("kept_percent,,,,22.0"));
    }

    #[test]
    fn default_rules_round_trip_toml() {
        let rules = RuleSet::default_after_sales();
        assert_eq!(RuleSet::from_toml(&rules.to_toml()).unwrap(), rules);
    }
}
