//! Turns raw Stage-3 responses into canonical predictions.
//!
//! The answer block demanded by the Stage-3 templates is preferred. When it
//! is missing or unusable, the parser falls back to the last sentence that
//! names a category, and otherwise gives up with [`Label::Unparsed`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{Attribute, CategoryConfig, CategoryId, CategorySet};

const UNPARSED: &str = "Unparsed";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Label {
    Category(CategoryId),
    Unparsed,
}

impl Label {
    pub fn category(&self) -> Option<&CategoryId> {
        match self {
            Label::Category(c) => Some(c),
            Label::Unparsed => None,
        }
    }

    pub fn is_unparsed(&self) -> bool {
        matches!(self, Label::Unparsed)
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        if s == UNPARSED {
            Label::Unparsed
        } else {
            Label::Category(CategoryId(s))
        }
    }
}

impl From<Label> for String {
    fn from(l: Label) -> Self {
        match l {
            Label::Category(c) => c.0,
            Label::Unparsed => UNPARSED.to_string(),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Category(c) => write!(f, "{c}"),
            Label::Unparsed => f.write_str(UNPARSED),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Repaired,
    Unparsed,
}

impl fmt::Display for ParseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseStatus::Clean => "clean",
            ParseStatus::Repaired => "repaired",
            ParseStatus::Unparsed => "unparsed",
        })
    }
}

/// The five income indicators, each on a 1-10 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncomeIndicators {
    pub location_economic_levels: u8,
    pub neighborhood_characteristics: u8,
    pub leisure_cost_levels: u8,
    pub shopping_patterns: u8,
    pub commuting_patterns: u8,
}

impl IncomeIndicators {
    pub const NAMES: [&'static str; 5] = [
        "location_economic_levels",
        "neighborhood_characteristics",
        "leisure_cost_levels",
        "shopping_patterns",
        "commuting_patterns",
    ];

    pub fn from_array(v: [u8; 5]) -> Self {
        IncomeIndicators {
            location_economic_levels: v[0],
            neighborhood_characteristics: v[1],
            leisure_cost_levels: v[2],
            shopping_patterns: v[3],
            commuting_patterns: v[4],
        }
    }

    pub fn to_array(&self) -> [u8; 5] {
        [
            self.location_economic_levels,
            self.neighborhood_characteristics,
            self.leisure_cost_levels,
            self.shopping_patterns,
            self.commuting_patterns,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicPrediction {
    pub agent_id: String,
    pub attribute: Attribute,
    pub label: Label,
    pub confidence: Option<u8>,
    pub indicator_scores: Option<IncomeIndicators>,
    pub alternatives: Vec<CategoryId>,
    pub reasoning: String,
    pub parse_status: ParseStatus,
}

impl DemographicPrediction {
    pub fn unparsed(agent_id: &str, attribute: Attribute, reasoning: impl Into<String>) -> Self {
        DemographicPrediction {
            agent_id: agent_id.to_string(),
            attribute,
            label: Label::Unparsed,
            confidence: None,
            indicator_scores: None,
            alternatives: Vec::new(),
            reasoning: reasoning.into(),
            parse_status: ParseStatus::Unparsed,
        }
    }

    /// Canonical answer-block rendering using display names.
    pub fn to_answer_block(&self, set: &CategorySet) -> String {
        let name = |id: &CategoryId| set.get(id).map_or_else(|| id.to_string(), |c| c.name.clone());
        let mut out = String::new();
        match &self.label {
            Label::Category(c) => out.push_str(&format!("PREDICTION: {}\n", name(c))),
            Label::Unparsed => out.push_str("PREDICTION: unknown\n"),
        }
        if let Some(c) = self.confidence {
            out.push_str(&format!("CONFIDENCE: {c}\n"));
        }
        if let Some(ind) = &self.indicator_scores {
            let v = ind.to_array().map(|x| x.to_string());
            out.push_str(&format!("INDICATORS: {}\n", v.join(",")));
        }
        let alts: Vec<String> = self.alternatives.iter().map(name).collect();
        out.push_str(&format!("ALTERNATIVES: {}\n", alts.join(", ")));
        out.push_str(&format!("REASONING: {}", self.reasoning));
        out
    }
}

#[derive(Debug, Error)]
pub enum SynonymError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// Per-attribute synonym phrases keyed by category id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTables {
    pub tables: BTreeMap<Attribute, BTreeMap<String, Vec<String>>>,
}

impl Default for SynonymTables {
    fn default() -> Self {
        let parse = |text: &str| serde_json::from_str(text).expect("bundled synonym table is valid JSON");
        SynonymTables {
            tables: BTreeMap::from([
                (Attribute::Income, parse(include_str!("../data/synonyms/income.json"))),
                (Attribute::Age, parse(include_str!("../data/synonyms/age.json"))),
                (Attribute::Education, parse(include_str!("../data/synonyms/education.json"))),
            ]),
        }
    }
}

impl SynonymTables {
    /// Bundled tables, with any `<attribute>.json` found in `dir` replacing
    /// the bundled one for that attribute.
    pub fn load_dir(dir: &Path) -> Result<Self, SynonymError> {
        let mut tables = Self::default();
        for attribute in Attribute::ALL {
            let path = dir.join(format!("{attribute}.json"));
            if !path.exists() {
                continue;
            }
            let err = |message: String| SynonymError::File {
                path: path.display().to_string(),
                message,
            };
            let text = std::fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
            let table = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
            tables.tables.insert(attribute, table);
        }
        Ok(tables)
    }
}

struct Phrase {
    tokens: Vec<String>,
    category: usize,
}

/// Matches free text against one attribute's categories.
struct Matcher {
    phrases: Vec<Phrase>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Matcher {
    fn new(set: &CategorySet, synonyms: Option<&BTreeMap<String, Vec<String>>>) -> Self {
        let mut phrases = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, c) in set.categories.iter().enumerate() {
            let extra = synonyms.and_then(|s| s.get(c.id.as_str())).into_iter().flatten();
            for text in [c.id.as_str(), c.name.as_str()].into_iter().chain(extra.map(String::as_str)) {
                let tokens = tokenize(text);
                if !tokens.is_empty() && seen.insert((tokens.clone(), i)) {
                    phrases.push(Phrase { tokens, category: i });
                }
            }
        }
        Matcher { phrases }
    }

    /// Categories named in `text`. A phrase occurrence covered by a longer
    /// one ("high" inside "very high") does not count.
    fn categories(&self, text: &str) -> BTreeSet<usize> {
        let tokens = tokenize(text);
        let mut spans: Vec<(usize, usize, usize)> = Vec::new();
        for p in &self.phrases {
            let n = p.tokens.len();
            if n > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - n {
                if tokens[start..start + n] == p.tokens[..] {
                    spans.push((start, start + n, p.category));
                }
            }
        }
        spans
            .iter()
            .filter(|&&(s, e, _)| !spans.iter().any(|&(s2, e2, _)| s2 <= s && e <= e2 && (e2 - s2) > (e - s)))
            .map(|&(_, _, c)| c)
            .collect()
    }
}

fn amount_re() -> &'static str {
    r"(\$)?\s*(\d{1,3}(?:,\d{3})+|\d+(?:\.\d+)?)\s*(k\b|thousand\b|m\b|million\b)?"
}

fn range_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let a = amount_re();
        Regex::new(&format!(r"(?i){a}\s*(?:-|–|—|to)\s*{a}")).unwrap()
    })
}

fn below_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"(?i)(?:<|under|below|less than)\s*{}", amount_re())).unwrap())
}

fn above_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let a = amount_re();
        Regex::new(&format!(r"(?i)(?:(?:>|over|above|more than)\s*{a}|{a}\s*(?:\+|or more|and above|and up))"))
            .unwrap()
    })
}

fn single_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!("(?i){}", amount_re())).unwrap())
}

struct Amount {
    value: f64,
    dollar: bool,
    scale: Option<f64>,
}

fn amount_at(caps: &regex::Captures<'_>, offset: usize) -> Option<Amount> {
    let digits = caps.get(offset + 1)?.as_str().replace(',', "");
    let value: f64 = digits.parse().ok()?;
    let scale = caps.get(offset + 2).map(|m| {
        let s = m.as_str().to_ascii_lowercase();
        if s.starts_with('m') {
            1000.0
        } else {
            1.0
        }
    });
    Some(Amount {
        value,
        dollar: caps.get(offset).is_some(),
        scale,
    })
}

/// Amount in thousands of dollars.
fn thousands(a: &Amount, fallback_scale: Option<f64>) -> f64 {
    match a.scale.or(fallback_scale) {
        Some(s) => a.value * s,
        None if a.value >= 1000.0 => a.value / 1000.0,
        None => a.value,
    }
}

fn is_money(a: &Amount) -> bool {
    a.dollar || a.scale.is_some()
}

/// Dollar expressions in `text` as (lower, upper) ranges in thousands.
fn dollar_ranges(text: &str) -> Vec<(f64, Option<f64>)> {
    let mut out = Vec::new();
    let mut rest = text.to_string();

    let found: Vec<_> = range_re()
        .captures_iter(&rest)
        .filter_map(|c| {
            let a = amount_at(&c, 1)?;
            let b = amount_at(&c, 4)?;
            (is_money(&a) || is_money(&b)).then(|| {
                let scale = b.scale.or(a.scale);
                let lo = thousands(&a, scale);
                let hi = thousands(&b, scale);
                (c.get(0).unwrap().range(), lo.min(hi), hi.max(lo))
            })
        })
        .collect();
    for (range, lo, hi) in found {
        out.push((lo, Some(hi)));
        rest.replace_range(range.clone(), &" ".repeat(range.len()));
    }

    let found: Vec<_> = below_re()
        .captures_iter(&rest)
        .filter_map(|c| {
            let a = amount_at(&c, 1)?;
            is_money(&a).then(|| (c.get(0).unwrap(), thousands(&a, None)))
        })
        .map(|(m, v)| (m.range(), v))
        .collect();
    for (range, v) in found {
        out.push((0.0, Some(v)));
        rest.replace_range(range.clone(), &" ".repeat(range.len()));
    }

    let found: Vec<_> = above_re()
        .captures_iter(&rest)
        .filter_map(|c| {
            let a = amount_at(&c, 1).or_else(|| amount_at(&c, 4))?;
            is_money(&a).then(|| (c.get(0).unwrap().range(), thousands(&a, None)))
        })
        .collect();
    for (range, v) in found {
        out.push((v, None));
        rest.replace_range(range.clone(), &" ".repeat(range.len()));
    }

    let singles: Vec<_> = single_re()
        .captures_iter(&rest)
        .filter_map(|c| {
            let a = amount_at(&c, 1)?;
            is_money(&a).then(|| thousands(&a, None))
        })
        .collect();
    for v in singles {
        out.push((v, Some(v)));
    }
    out
}

/// Normalizes category mentions and parses Stage-3 responses.
pub struct ResponseParser {
    categories: CategoryConfig,
    matchers: BTreeMap<Attribute, Matcher>,
}

impl fmt::Debug for ResponseParser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResponseParser").finish_non_exhaustive()
    }
}

impl Default for ResponseParser {
    fn default() -> Self {
        Self::new(CategoryConfig::default(), &SynonymTables::default())
    }
}

fn field_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s>#*_`-]*(PREDICTION|CONFIDENCE|INDICATORS|ALTERNATIVES|REASONING)[\s*_`]*[:=][\s*_`]*(.*)$")
            .unwrap()
    })
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

fn sentence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?](?:\s+|$)|\n").unwrap())
}

const CUES: [&str; 10] = [
    "most likely",
    "likely",
    "predict",
    "estimate",
    "bracket",
    "falls",
    "conclude",
    "best fit",
    "probably",
    "category",
];

/// Scores found by [`extract_scores`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scores {
    pub confidence: Option<u8>,
    pub indicators: Option<IncomeIndicators>,
    /// True when a value was clamped, truncated or could not be read.
    pub repaired: bool,
}

fn clamp_number(raw: &str, lo: u8, hi: u8) -> Option<(u8, bool)> {
    let v: f64 = raw.parse().ok()?;
    let r = v.round();
    let clamped = r.clamp(lo as f64, hi as f64);
    Some((clamped as u8, clamped != v))
}

fn parse_confidence(value: &str) -> (Option<u8>, bool) {
    match number_re().find(value).and_then(|m| clamp_number(m.as_str(), 1, 5)) {
        Some((v, changed)) => (Some(v), changed),
        None => (None, true),
    }
}

fn parse_indicators(value: &str) -> (Option<IncomeIndicators>, bool) {
    let nums: Vec<(u8, bool)> = number_re()
        .find_iter(value)
        .filter_map(|m| clamp_number(m.as_str(), 1, 10))
        .collect();
    if nums.len() < 5 {
        return (None, true);
    }
    let mut v = [0u8; 5];
    let mut repaired = nums.len() > 5;
    for (slot, (x, changed)) in v.iter_mut().zip(&nums) {
        *slot = *x;
        repaired |= changed;
    }
    (Some(IncomeIndicators::from_array(v)), repaired)
}

/// Reads `CONFIDENCE:` and, for income, `INDICATORS:` lines anywhere in
/// `raw`, clamping into range. The first line of each kind is used.
pub fn extract_scores(raw: &str, attribute: Attribute) -> Scores {
    let mut scores = Scores::default();
    let mut seen_conf = false;
    let mut seen_ind = false;
    for line in raw.lines() {
        let Some(c) = field_re().captures(line) else {
            continue;
        };
        let value = c.get(2).map_or("", |m| m.as_str());
        match c[1].to_ascii_uppercase().as_str() {
            "CONFIDENCE" if !seen_conf => {
                seen_conf = true;
                let (v, r) = parse_confidence(value);
                scores.confidence = v;
                scores.repaired |= r;
            }
            "INDICATORS" if !seen_ind && attribute == Attribute::Income => {
                seen_ind = true;
                let (v, r) = parse_indicators(value);
                scores.indicators = v;
                scores.repaired |= r;
            }
            _ => {}
        }
    }
    scores
}

impl ResponseParser {
    pub fn new(categories: CategoryConfig, synonyms: &SynonymTables) -> Self {
        let matchers = Attribute::ALL
            .into_iter()
            .map(|a| (a, Matcher::new(categories.get(a), synonyms.tables.get(&a))))
            .collect();
        ResponseParser { categories, matchers }
    }

    pub fn categories(&self) -> &CategoryConfig {
        &self.categories
    }

    /// All categories a fragment mentions, by name, synonym or (income
    /// only) dollar range.
    fn mentions(&self, text: &str, attribute: Attribute) -> BTreeSet<usize> {
        let mut found = self.matchers[&attribute].categories(text);
        if attribute == Attribute::Income {
            let set = self.categories.get(attribute);
            for (lo, hi) in dollar_ranges(text) {
                let hits: Vec<usize> = set
                    .categories
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.bounds.is_some_and(|b| b.contains_range(lo, hi)))
                    .map(|(i, _)| i)
                    .collect();
                match hits.as_slice() {
                    [i] => {
                        found.insert(*i);
                    }
                    // a range spanning several brackets names none of them
                    // on its own, but still makes the fragment ambiguous
                    _ => {
                        found.insert(usize::MAX);
                    }
                }
            }
        }
        found
    }

    /// Canonical category for a fragment, or `None` when it names no
    /// category or more than one.
    pub fn normalize_label(&self, text: &str, attribute: Attribute) -> Option<CategoryId> {
        let found = self.mentions(text, attribute);
        match found.len() {
            1 => {
                let i = *found.iter().next()?;
                self.categories.get(attribute).categories.get(i).map(|c| c.id.clone())
            }
            _ => None,
        }
    }

    pub fn parse_bytes(&self, agent_id: &str, raw: &[u8], attribute: Attribute) -> DemographicPrediction {
        self.parse_stage3(agent_id, &String::from_utf8_lossy(raw), attribute)
    }

    /// Never fails; degradation is reported in `parse_status`.
    pub fn parse_stage3(&self, agent_id: &str, raw: &str, attribute: Attribute) -> DemographicPrediction {
        if let Some(p) = self.parse_block(agent_id, raw, attribute) {
            return p;
        }
        if let Some(label) = self.heuristic_label(raw, attribute) {
            let scores = extract_scores(raw, attribute);
            return DemographicPrediction {
                agent_id: agent_id.to_string(),
                attribute,
                label: Label::Category(label),
                confidence: scores.confidence,
                indicator_scores: scores.indicators,
                alternatives: Vec::new(),
                reasoning: raw.trim().to_string(),
                parse_status: ParseStatus::Repaired,
            };
        }
        DemographicPrediction::unparsed(agent_id, attribute, raw.trim())
    }

    fn parse_block(&self, agent_id: &str, raw: &str, attribute: Attribute) -> Option<DemographicPrediction> {
        let lines: Vec<&str> = raw.lines().collect();
        // last PREDICTION line whose value names exactly one category
        let (start, label) = lines.iter().enumerate().rev().find_map(|(i, line)| {
            let c = field_re().captures(line)?;
            if !c[1].eq_ignore_ascii_case("PREDICTION") {
                return None;
            }
            self.normalize_label(c.get(2)?.as_str(), attribute).map(|l| (i, l))
        })?;

        let mut confidence = None;
        let mut indicators = None;
        let mut alternatives = Vec::new();
        let mut reasoning = String::new();
        let (mut seen_conf, mut seen_ind, mut seen_alt) = (false, false, false);
        let mut repaired = false;

        for (i, line) in lines.iter().enumerate().skip(start + 1) {
            let Some(c) = field_re().captures(line) else {
                continue;
            };
            let value = c.get(2).map_or("", |m| m.as_str());
            match c[1].to_ascii_uppercase().as_str() {
                "CONFIDENCE" if !seen_conf => {
                    seen_conf = true;
                    let (v, r) = parse_confidence(value);
                    confidence = v;
                    repaired |= r;
                }
                "INDICATORS" if !seen_ind && attribute == Attribute::Income => {
                    seen_ind = true;
                    let (v, r) = parse_indicators(value);
                    indicators = v;
                    repaired |= r;
                }
                "ALTERNATIVES" if !seen_alt => {
                    seen_alt = true;
                    let (v, r) = self.parse_alternatives(value, attribute, &label);
                    alternatives = v;
                    repaired |= r;
                }
                "REASONING" => {
                    let mut text = value.to_string();
                    for rest in &lines[i + 1..] {
                        text.push('\n');
                        text.push_str(rest);
                    }
                    reasoning = text.trim().to_string();
                    break;
                }
                _ => {}
            }
        }
        if !seen_conf || (attribute == Attribute::Income && !seen_ind) {
            repaired = true;
        }
        Some(DemographicPrediction {
            agent_id: agent_id.to_string(),
            attribute,
            label: Label::Category(label),
            confidence,
            indicator_scores: indicators,
            alternatives,
            reasoning,
            parse_status: if repaired {
                ParseStatus::Repaired
            } else {
                ParseStatus::Clean
            },
        })
    }

    fn parse_alternatives(&self, value: &str, attribute: Attribute, primary: &CategoryId) -> (Vec<CategoryId>, bool) {
        let value = value.trim().trim_end_matches('.');
        if value.is_empty() || ["none", "n/a", "na", "-"].contains(&value.to_ascii_lowercase().as_str()) {
            return (Vec::new(), false);
        }
        let mut out: Vec<CategoryId> = Vec::new();
        let mut repaired = false;
        for piece in value.split([',', ';', '|']) {
            if piece.trim().is_empty() {
                continue;
            }
            match self.normalize_label(piece, attribute) {
                Some(c) if &c != primary && !out.contains(&c) => out.push(c),
                _ => repaired = true,
            }
        }
        (out, repaired)
    }

    fn heuristic_label(&self, raw: &str, attribute: Attribute) -> Option<CategoryId> {
        let sentences: Vec<&str> = sentence_re().split(raw).filter(|s| !s.trim().is_empty()).collect();
        let cue = |s: &str| {
            let lower = s.to_lowercase();
            CUES.iter().any(|c| lower.contains(c))
        };
        sentences
            .iter()
            .rev()
            .filter(|s| cue(s))
            .find_map(|s| self.normalize_label(s, attribute))
            .or_else(|| sentences.iter().rev().find_map(|s| self.normalize_label(s, attribute)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ResponseParser {
        ResponseParser::default()
    }

    fn id(s: &str) -> CategoryId {
        CategoryId::new(s)
    }

    #[test]
    fn clean_income_block() {
        let raw = "PREDICTION: Middle\nCONFIDENCE: 4\nINDICATORS: 5,4,6,5,3\nALTERNATIVES: Low, Upper-middle\nREASONING: steady routine";
        let pred = p().parse_stage3("a", raw, Attribute::Income);
        assert_eq!(pred.label, Label::Category(id("Middle")));
        assert_eq!(pred.confidence, Some(4));
        assert_eq!(pred.indicator_scores.unwrap().to_array(), [5, 4, 6, 5, 3]);
        assert_eq!(pred.alternatives, vec![id("Low"), id("UpperMiddle")]);
        assert_eq!(pred.reasoning, "steady routine");
        assert_eq!(pred.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn prose_falls_back_to_mention() {
        let raw = "Given the venues, the income is most likely upper-middle ($75k-$125k), with frequent dining.";
        let pred = p().parse_stage3("a", raw, Attribute::Income);
        assert_eq!(pred.label, Label::Category(id("UpperMiddle")));
        assert_eq!(pred.confidence, None);
        assert_eq!(pred.indicator_scores, None);
        assert!(pred.alternatives.is_empty());
        assert_eq!(pred.parse_status, ParseStatus::Repaired);
    }

    #[test]
    fn unrelated_text_is_unparsed() {
        let pred = p().parse_stage3("a", "The weather was pleasant.", Attribute::Income);
        assert_eq!(pred.label, Label::Unparsed);
        assert_eq!(pred.parse_status, ParseStatus::Unparsed);
    }

    #[test]
    fn normalization_examples() {
        let parser = p();
        assert_eq!(parser.normalize_label("VERY HIGH (>$200K)", Attribute::Income), Some(id("VeryHigh")));
        assert_eq!(parser.normalize_label("$15k-$35k", Attribute::Income), Some(id("Low")));
        assert_eq!(parser.normalize_label("$35k-$75k", Attribute::Income), Some(id("Middle")));
        assert_eq!(parser.normalize_label("middle to upper-middle", Attribute::Income), None);
        assert_eq!(parser.normalize_label("UpperMiddle", Attribute::Income), Some(id("UpperMiddle")));
        assert_eq!(parser.normalize_label("$40,000 - $60,000", Attribute::Income), Some(id("Middle")));
        assert_eq!(parser.normalize_label("under $15k", Attribute::Income), Some(id("VeryLow")));
        assert_eq!(parser.normalize_label("$250k+", Attribute::Income), Some(id("VeryHigh")));
        // a range spanning brackets is ambiguous
        assert_eq!(parser.normalize_label("$30k-$80k", Attribute::Income), None);
        // whole tokens only
        assert_eq!(parser.normalize_label("highway", Attribute::Income), None);
    }

    #[test]
    fn education_and_age_synonyms() {
        let parser = p();
        assert_eq!(parser.normalize_label("Less than high school", Attribute::Education), Some(id("NoHighSchool")));
        assert_eq!(parser.normalize_label("high school diploma", Attribute::Education), Some(id("HighSchool")));
        assert_eq!(parser.normalize_label("Bachelor's degree", Attribute::Education), Some(id("Bachelors")));
        assert_eq!(parser.normalize_label("a Master's", Attribute::Education), Some(id("Graduate")));
        assert_eq!(parser.normalize_label("25-44", Attribute::Age), Some(id("Age25To44")));
        assert_eq!(parser.normalize_label("65+", Attribute::Age), Some(id("Age65Plus")));
        assert_eq!(parser.normalize_label("Under 25", Attribute::Age), Some(id("Under25")));
    }

    #[test]
    fn confidence_clamped() {
        assert_eq!(extract_scores("CONFIDENCE: 5", Attribute::Age).confidence, Some(5));
        let s = extract_scores("CONFIDENCE: 9", Attribute::Age);
        assert_eq!(s.confidence, Some(5));
        assert!(s.repaired);
        let s = extract_scores("INDICATORS: 10,1,7,3,8", Attribute::Income);
        assert_eq!(s.indicators.unwrap().to_array(), [10, 1, 7, 3, 8]);
        assert!(!s.repaired);
        let s = extract_scores("INDICATORS: 0,11,7,3,8", Attribute::Income);
        assert_eq!(s.indicators.unwrap().to_array(), [1, 10, 7, 3, 8]);
        assert!(s.repaired);
    }

    #[test]
    fn clamped_block_is_repaired() {
        let raw = "PREDICTION: High\nCONFIDENCE: 9\nINDICATORS: 5,4,6,5,3\nALTERNATIVES: Very high";
        let pred = p().parse_stage3("a", raw, Attribute::Income);
        assert_eq!(pred.label, Label::Category(id("High")));
        assert_eq!(pred.confidence, Some(5));
        assert_eq!(pred.parse_status, ParseStatus::Repaired);
    }

    #[test]
    fn block_wins_over_prose() {
        let raw = "I first thought it was most likely low.\nPREDICTION: Very high\nCONFIDENCE: 3\nINDICATORS: 9,9,9,9,9\nALTERNATIVES: High\nREASONING: luxury venues";
        let pred = p().parse_stage3("a", raw, Attribute::Income);
        assert_eq!(pred.label, Label::Category(id("VeryHigh")));
        assert_eq!(pred.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn alternatives_drop_primary_and_duplicates() {
        let raw = "PREDICTION: 25-44\nCONFIDENCE: 2\nALTERNATIVES: 25-44, 45-64, 45-64\nREASONING: x";
        let pred = p().parse_stage3("a", raw, Attribute::Age);
        assert_eq!(pred.alternatives, vec![id("Age45To64")]);
        assert_eq!(pred.parse_status, ParseStatus::Repaired);
    }

    #[test]
    fn canonical_block_round_trips() {
        let raw = "PREDICTION: Middle\nCONFIDENCE: 4\nINDICATORS: 5,4,6,5,3\nALTERNATIVES: Low, Upper-middle\nREASONING: steady\nroutine";
        let parser = p();
        let first = parser.parse_stage3("a", raw, Attribute::Income);
        let again = parser.parse_stage3("a", &first.to_answer_block(&parser.categories().income), Attribute::Income);
        assert_eq!(first, again);
    }

    #[test]
    fn label_serializes_as_string() {
        assert_eq!(serde_json::to_string(&Label::Unparsed).unwrap(), "\"Unparsed\"");
        assert_eq!(serde_json::to_string(&Label::Category(id("Low"))).unwrap(), "\"Low\"");
        let back: Label = serde_json::from_str("\"Unparsed\"").unwrap();
        assert_eq!(back, Label::Unparsed);
    }

    #[test]
    fn synonym_override_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("income.json"), r#"{"VeryHigh": ["loaded"]}"#).unwrap();
        let tables = SynonymTables::load_dir(dir.path()).unwrap();
        let parser = ResponseParser::new(CategoryConfig::default(), &tables);
        assert_eq!(parser.normalize_label("loaded", Attribute::Income), Some(id("VeryHigh")));
        assert_eq!(parser.normalize_label("wealthy", Attribute::Income), None);
    }
}
