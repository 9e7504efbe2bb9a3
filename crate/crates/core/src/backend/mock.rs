use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use super::{Backend, BackendError, CompletionRequest};
use crate::category::{Attribute, CategoryConfig, CategoryId, CategorySet};
use crate::template::markers;

/// Venue-name keyword that signals one category of one attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keyword: String,
    pub attribute: Attribute,
    pub category: CategoryId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRules {
    pub rules: Vec<KeywordRule>,
    /// Prediction when no keyword is seen; defaults to the first category.
    #[serde(default)]
    pub fallback: BTreeMap<Attribute, CategoryId>,
}

/// Which analyses the Stage-3 rule reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockEvidence {
    #[default]
    Stage1AndStage2,
    Stage1Only,
}

/// Deterministic oracle that answers prompts built from the shipped stage
/// templates.
///
/// Stages 1 and 2 list the venues named in the narrative with their visit
/// counts. Stage 3 scores each category by summing the visit counts of
/// listed venues whose names contain one of its keywords and answers with a
/// well-formed answer block.
#[derive(Debug, Clone)]
pub struct MockOracle {
    rules: KeywordRules,
    categories: CategoryConfig,
    evidence: MockEvidence,
}

fn stage_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[STAGE-([123])(?: [A-Z ]+)?(?:: *([a-z]+))?\]").unwrap())
}

fn venue_item() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"([^;:]+?) \((\d+) visits?\)").unwrap())
}

fn section<'a>(text: &'a str, begin: &str, end: &str) -> Option<&'a str> {
    let start = text.find(begin)? + begin.len();
    let stop = text[start..].find(end)? + start;
    Some(text[start..stop].trim_matches('\n'))
}

/// Venue names from chronicle lines with their visit counts.
fn venues_in_narrative(narrative: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for line in narrative.lines() {
        let Some((_, rest)) = line.split_once(" mins): ") else {
            continue;
        };
        let name = rest.rsplit_once(" - ").map(|(n, _)| n).unwrap_or(rest).trim();
        if !name.is_empty() {
            *counts.entry(name.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

fn venue_listing(venues: &BTreeMap<String, u32>) -> String {
    if venues.is_empty() {
        return "none".into();
    }
    venues
        .iter()
        .map(|(name, n)| format!("{name} ({n} visit{})", if *n == 1 { "" } else { "s" }))
        .collect::<Vec<_>>()
        .join("; ")
}

fn venues_in_analysis(text: &str) -> Vec<(String, u32)> {
    venue_item()
        .captures_iter(text)
        .map(|c| (c[1].trim().to_string(), c[2].parse().unwrap_or(0)))
        .collect()
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    let hay = haystack.to_lowercase();
    let needle = needle.to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before && after {
            return true;
        }
        from = start + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}

impl MockOracle {
    pub fn new(rules: KeywordRules, categories: CategoryConfig) -> Self {
        MockOracle {
            rules,
            categories,
            evidence: MockEvidence::default(),
        }
    }

    pub fn with_evidence(mut self, evidence: MockEvidence) -> Self {
        self.evidence = evidence;
        self
    }

    /// Oracle using the synthetic generator's planted venue keywords.
    pub fn planted(categories: CategoryConfig) -> Self {
        Self::new(crate::synth::PlantedRules::default().keyword_rules(), categories)
    }

    pub fn rules(&self) -> &KeywordRules {
        &self.rules
    }

    fn stage1(&self, prompt: &str) -> Result<String, BackendError> {
        let narrative = section(prompt, markers::NARRATIVE_BEGIN, markers::NARRATIVE_END)
            .ok_or_else(|| BackendError::Mock("stage 1 prompt has no narrative section".into()))?;
        let venues = venues_in_narrative(narrative);
        let total: u32 = venues.values().sum();
        Ok(format!(
            "Location inventory: {} distinct venues across {} visits: {}.\n\
             Temporal patterns: visits are recorded in chronological order across the narrated weeks.\n\
             Spatial characteristics: the narrative names venues but does not describe distances.\n\
             Sequence observations: {} visit records were observed.",
            venues.len(),
            total,
            venue_listing(&venues),
            total
        ))
    }

    fn stage2(&self, prompt: &str) -> Result<String, BackendError> {
        let narrative = section(prompt, markers::NARRATIVE_BEGIN, markers::NARRATIVE_END)
            .ok_or_else(|| BackendError::Mock("stage 2 prompt has no narrative section".into()))?;
        let venues = venues_in_narrative(narrative);
        Ok(format!(
            "Temporal patterns: the week follows the schedule shown in the narrative.\n\
             Economic patterns: spending and leisure took place at {}.\n\
             Social patterns: activities are spread over the visited venues.\n\
             Spatial patterns: the living environment is characterised by the venues above.\n\
             Stability patterns: {} distinct venues recur over the narrated period.",
            venue_listing(&venues),
            venues.len()
        ))
    }

    fn score(&self, attribute: Attribute, evidence: &str, set: &CategorySet) -> BTreeMap<usize, u32> {
        let mut scores = BTreeMap::new();
        for (name, visits) in venues_in_analysis(evidence) {
            for rule in self.rules.rules.iter().filter(|r| r.attribute == attribute) {
                if contains_word(&name, &rule.keyword) {
                    if let Some(idx) = set.index_of(&rule.category) {
                        *scores.entry(idx).or_insert(0) += visits;
                    }
                }
            }
        }
        scores
    }

    fn stage3(&self, prompt: &str, attribute: Attribute) -> Result<String, BackendError> {
        let set = self.categories.get(attribute);
        let s1 = section(prompt, markers::S1_BEGIN, markers::S1_END)
            .ok_or_else(|| BackendError::Mock("stage 3 prompt has no stage 1 section".into()))?;
        let s2 = section(prompt, markers::S2_BEGIN, markers::S2_END)
            .ok_or_else(|| BackendError::Mock("stage 3 prompt has no stage 2 section".into()))?;
        let evidence = match self.evidence {
            MockEvidence::Stage1AndStage2 => format!("{s1}\n{s2}"),
            MockEvidence::Stage1Only => s1.to_string(),
        };
        let scores = self.score(attribute, &evidence, set);
        let total: u32 = scores.values().sum();
        // highest score wins; ties go to the earlier category
        let best = scores
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(&i, &s)| (i, s));

        let (idx, confidence) = match best {
            Some((idx, s)) if s > 0 => {
                let share = s as f64 / total as f64;
                let c = if share >= 0.9 {
                    5
                } else if share >= 0.7 {
                    4
                } else if share >= 0.5 {
                    3
                } else {
                    2
                };
                (idx, c)
            }
            _ => {
                let fallback = self
                    .rules
                    .fallback
                    .get(&attribute)
                    .and_then(|id| set.index_of(id))
                    .unwrap_or(0);
                (fallback, 1)
            }
        };
        let n = set.categories.len();
        let mut alternatives: Vec<usize> = [idx.checked_sub(1), Some(idx + 1).filter(|&i| i < n)]
            .into_iter()
            .flatten()
            .collect();
        alternatives.sort_by(|a, b| {
            let sa = scores.get(a).copied().unwrap_or(0);
            let sb = scores.get(b).copied().unwrap_or(0);
            sb.cmp(&sa).then_with(|| a.cmp(b))
        });

        let mut out = String::from("Structured assessment based on the stage 1 and stage 2 analyses.\n");
        out.push_str(&format!("PREDICTION: {}\n", set.categories[idx].name));
        out.push_str(&format!("CONFIDENCE: {confidence}\n"));
        if attribute == Attribute::Income {
            let level = 1 + (idx * 9 + (n - 1) / 2) / (n - 1).max(1);
            let level = level.min(10);
            out.push_str(&format!("INDICATORS: {level},{level},{level},{level},{level}\n"));
        }
        out.push_str(&format!(
            "ALTERNATIVES: {}\n",
            alternatives
                .iter()
                .map(|&i| set.categories[i].name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        let evidence_note = if total == 0 {
            "no keyword evidence was found".to_string()
        } else {
            format!("{} of {total} keyword-matched visits support this answer", best.map_or(0, |b| b.1))
        };
        out.push_str(&format!("REASONING: Rule-based oracle; {evidence_note}."));
        Ok(out)
    }
}

impl Backend for MockOracle {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let prompt = request.prompt_text();
        let caps = stage_marker()
            .captures(&prompt)
            .ok_or_else(|| BackendError::Mock("prompt carries no stage marker".into()))?;
        match &caps[1] {
            "1" => self.stage1(&prompt),
            "2" => self.stage2(&prompt),
            _ => {
                let attribute = caps
                    .get(2)
                    .ok_or_else(|| BackendError::Mock("stage 3 marker names no attribute".into()))?
                    .as_str()
                    .parse::<Attribute>()
                    .map_err(|e| BackendError::Mock(e.to_string()))?;
                self.stage3(&prompt, attribute)
            }
        }
    }

    fn describe(&self) -> String {
        format!("mock-oracle({:?})", self.evidence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Message;

    fn oracle() -> MockOracle {
        let rules = KeywordRules {
            rules: vec![
                KeywordRule {
                    keyword: "Luxury".into(),
                    attribute: Attribute::Income,
                    category: CategoryId::new("VeryHigh"),
                },
                KeywordRule {
                    keyword: "Discount".into(),
                    attribute: Attribute::Income,
                    category: CategoryId::new("Low"),
                },
            ],
            fallback: BTreeMap::from([(Attribute::Income, CategoryId::new("Middle"))]),
        };
        MockOracle::new(rules, CategoryConfig::default())
    }

    fn s3_prompt(s1: &str, s2: &str) -> String {
        format!(
            "[STAGE-3 DEMOGRAPHIC INFERENCE: income]\n{}\n{s1}\n{}\n{}\n{s2}\n{}\n",
            markers::S1_BEGIN,
            markers::S1_END,
            markers::S2_BEGIN,
            markers::S2_END
        )
    }

    fn ask(o: &MockOracle, prompt: &str) -> Result<String, BackendError> {
        o.complete(&CompletionRequest::new("mock", vec![Message::user(prompt)], 0.0, 64))
    }

    #[test]
    fn luxury_venues_predict_very_high() {
        let p = s3_prompt(
            "Location inventory: Luxury Marina Club (3 visits); Corner Gas (1 visit).",
            "Stage 2 analysis unavailable.",
        );
        let out = ask(&oracle(), &p).unwrap();
        assert!(out.contains("PREDICTION: Very high\n"), "{out}");
        assert!(out.contains("INDICATORS: 10,10,10,10,10"));
        assert!(out.contains("ALTERNATIVES: High\n"));
    }

    #[test]
    fn deterministic() {
        let p = s3_prompt("Discount Mart (2 visits)", "Discount Mart (2 visits)");
        assert_eq!(ask(&oracle(), &p).unwrap(), ask(&oracle(), &p).unwrap());
        assert!(ask(&oracle(), &p).unwrap().contains("PREDICTION: Low"));
    }

    #[test]
    fn missing_marker_is_an_error() {
        assert!(matches!(ask(&oracle(), "hello there"), Err(BackendError::Mock(_))));
    }

    #[test]
    fn stage1_only_evidence_ignores_stage2() {
        let p = s3_prompt("Stage 1 analysis unavailable.", "Luxury Marina Club (5 visits)");
        let both = ask(&oracle(), &p).unwrap();
        assert!(both.contains("PREDICTION: Very high"));
        let s1_only = ask(&oracle().with_evidence(MockEvidence::Stage1Only), &p).unwrap();
        assert!(s1_only.contains("PREDICTION: Middle"));
        assert!(s1_only.contains("CONFIDENCE: 1"));
    }

    #[test]
    fn keyword_must_be_whole_word() {
        assert!(contains_word("The Luxury Spa", "luxury"));
        assert!(!contains_word("Luxuryland", "luxury"));
        assert!(!contains_word("", "luxury"));
    }

    #[test]
    fn stage1_lists_narrative_venues() {
        let prompt = format!(
            "[STAGE-1 FACTUAL FEATURE EXTRACTION]\n{}\n--- Monday, January 29, 2024 ---\nMonday, January 29 (Weekday) - 09:10-10:14 (63 mins): Bear Wire - Work, Services, DropOff\nMonday, January 29 (Weekday) - 11:00-12:00 (60 mins): Bear Wire - Work, Services, DropOff\n{}",
            markers::NARRATIVE_BEGIN,
            markers::NARRATIVE_END
        );
        let out = ask(&oracle(), &prompt).unwrap();
        assert!(out.contains("Bear Wire (2 visits)"), "{out}");
    }
}
