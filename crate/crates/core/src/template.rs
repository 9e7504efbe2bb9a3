//! Versioned prompt templates with `{PLACEHOLDER}` substitution.
//!
//! A template file starts with a front-matter block:
//!
//! ```text
//! ---
//! stage: s3
//! attribute: income
//! version: s3-income-v1
//! ---
//! body with {S1_RESPONSE} ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::OnceLock;
use thiserror::Error;

use crate::category::Attribute;

/// Section delimiters shared by the shipped templates and the mock oracle.
pub mod markers {
    pub const NARRATIVE_BEGIN: &str = "BEGIN NARRATIVE";
    pub const NARRATIVE_END: &str = "END NARRATIVE";
    pub const S1_BEGIN: &str = "BEGIN STAGE 1 ANALYSIS";
    pub const S1_END: &str = "END STAGE 1 ANALYSIS";
    pub const S2_BEGIN: &str = "BEGIN STAGE 2 ANALYSIS";
    pub const S2_END: &str = "END STAGE 2 ANALYSIS";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
        })
    }
}

impl FromStr for Stage {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Stage::S1),
            "s2" | "2" => Ok(Stage::S2),
            "s3" | "3" => Ok(Stage::S3),
            other => Err(TemplateError::FrontMatter(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    Narrative,
    S1Response,
    S2Response,
    Categories,
}

impl Placeholder {
    pub fn name(&self) -> &'static str {
        match self {
            Placeholder::Narrative => "NARRATIVE",
            Placeholder::S1Response => "S1_RESPONSE",
            Placeholder::S2Response => "S2_RESPONSE",
            Placeholder::Categories => "CATEGORIES",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "NARRATIVE" => Placeholder::Narrative,
            "S1_RESPONSE" => Placeholder::S1Response,
            "S2_RESPONSE" => Placeholder::S2Response,
            "CATEGORIES" => Placeholder::Categories,
            _ => return None,
        })
    }

    /// The exact placeholder set each stage's body must use.
    pub fn required_for(stage: Stage) -> BTreeSet<Placeholder> {
        match stage {
            Stage::S1 => [Placeholder::Narrative].into(),
            Stage::S2 => [Placeholder::Narrative, Placeholder::S1Response].into(),
            Stage::S3 => [Placeholder::S1Response, Placeholder::S2Response, Placeholder::Categories].into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template front matter: {0}")]
    FrontMatter(String),
    #[error("template `{template}` uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` for stage {stage} must reference exactly {expected}, found {found}")]
    PlaceholderSet {
        template: String,
        stage: Stage,
        expected: String,
        found: String,
    },
    #[error("template `{template}`: no value supplied for {{{name}}}")]
    Unresolved { template: String, name: String },
    #[error("stage {stage} template for {attribute:?} expected, found {found:?}")]
    WrongSlot {
        stage: Stage,
        attribute: Option<Attribute>,
        found: Option<Attribute>,
    },
    #[error("no stage 3 template for {0}")]
    MissingAttribute(Attribute),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Z][A-Z0-9_]*)\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    /// `None` for stage-agnostic templates (S1, S2).
    pub attribute: Option<Attribute>,
    pub version: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let source = source.strip_prefix('\u{feff}').unwrap_or(source);
        let rest = source
            .strip_prefix("---\n")
            .or_else(|| source.strip_prefix("---\r\n"))
            .ok_or_else(|| TemplateError::FrontMatter("missing opening `---`".into()))?;
        let end = rest
            .find("\n---\n")
            .or_else(|| rest.find("\n---\r\n"))
            .ok_or_else(|| TemplateError::FrontMatter("missing closing `---`".into()))?;
        let header = &rest[..end];
        let body_start = rest[end + 1..].find('\n').map(|i| end + 1 + i + 1).unwrap_or(rest.len());
        let body = rest[body_start..].to_string();

        let mut fields = BTreeMap::new();
        for line in header.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| TemplateError::FrontMatter(format!("bad line `{line}`")))?;
            fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| TemplateError::FrontMatter(format!("missing `{k}`")))
        };
        let stage: Stage = get("stage")?.parse()?;
        let attribute = match get("attribute")?.as_str() {
            "any" | "*" => None,
            a => Some(
                a.parse::<Attribute>()
                    .map_err(|e| TemplateError::FrontMatter(e.to_string()))?,
            ),
        };
        let version = get("version")?;
        if version.is_empty() {
            return Err(TemplateError::FrontMatter("empty version".into()));
        }
        let template = PromptTemplate {
            stage,
            attribute,
            version,
            body,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn placeholders(&self) -> Result<BTreeSet<Placeholder>, TemplateError> {
        placeholder_re()
            .captures_iter(&self.body)
            .map(|c| {
                Placeholder::from_name(&c[1]).ok_or_else(|| TemplateError::UnknownPlaceholder {
                    template: self.version.clone(),
                    name: c[1].to_string(),
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let found = self.placeholders()?;
        let expected = Placeholder::required_for(self.stage);
        if found != expected {
            let names = |s: &BTreeSet<Placeholder>| s.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ");
            return Err(TemplateError::PlaceholderSet {
                template: self.version.clone(),
                stage: self.stage,
                expected: names(&expected),
                found: names(&found),
            });
        }
        Ok(())
    }

    /// `version#<first 12 hex digits of sha256(body)>`; changes whenever
    /// the prompt text changes.
    pub fn template_id(&self) -> String {
        let digest = Sha256::digest(self.body.as_bytes());
        format!("{}#{}", self.version, &hex::encode(digest)[..12])
    }

    /// Substitutes placeholders in one pass; substituted values are never
    /// rescanned.
    pub fn render(&self, values: &BTreeMap<Placeholder, &str>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + values.values().map(|v| v.len()).sum::<usize>());
        let mut last = 0;
        for caps in placeholder_re().captures_iter(&self.body) {
            let m = caps.get(0).expect("whole match");
            let name = &caps[1];
            let placeholder = Placeholder::from_name(name).ok_or_else(|| TemplateError::UnknownPlaceholder {
                template: self.version.clone(),
                name: name.to_string(),
            })?;
            let value = values.get(&placeholder).ok_or_else(|| TemplateError::Unresolved {
                template: self.version.clone(),
                name: name.to_string(),
            })?;
            out.push_str(&self.body[last..m.start()]);
            out.push_str(value);
            last = m.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

/// The S1 and S2 templates plus one S3 template per attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub s1: PromptTemplate,
    pub s2: PromptTemplate,
    pub s3: BTreeMap<Attribute, PromptTemplate>,
}

const DEFAULT_S1: &str = include_str!("../data/templates/s1.txt");
const DEFAULT_S2: &str = include_str!("../data/templates/s2.txt");
const DEFAULT_S3_AGE: &str = include_str!("../data/templates/s3_age.txt");
const DEFAULT_S3_INCOME: &str = include_str!("../data/templates/s3_income.txt");
const DEFAULT_S3_EDUCATION: &str = include_str!("../data/templates/s3_education.txt");

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn defaults() -> Self {
        Self::from_sources(
            DEFAULT_S1,
            DEFAULT_S2,
            [
                (Attribute::Age, DEFAULT_S3_AGE),
                (Attribute::Income, DEFAULT_S3_INCOME),
                (Attribute::Education, DEFAULT_S3_EDUCATION),
            ],
        )
        .expect("shipped templates are valid")
    }

    pub fn from_sources<'a>(
        s1: &str,
        s2: &str,
        s3: impl IntoIterator<Item = (Attribute, &'a str)>,
    ) -> Result<Self, TemplateError> {
        let check = |t: PromptTemplate, stage: Stage, attribute: Option<Attribute>| {
            if t.stage != stage || (stage == Stage::S3 && t.attribute != attribute) {
                return Err(TemplateError::WrongSlot {
                    stage,
                    attribute,
                    found: t.attribute,
                });
            }
            Ok(t)
        };
        let s1 = check(PromptTemplate::parse(s1)?, Stage::S1, None)?;
        let s2 = check(PromptTemplate::parse(s2)?, Stage::S2, None)?;
        let mut map = BTreeMap::new();
        for (attribute, src) in s3 {
            map.insert(attribute, check(PromptTemplate::parse(src)?, Stage::S3, Some(attribute))?);
        }
        Ok(TemplateSet { s1, s2, s3: map })
    }

    /// Loads `s1.txt`, `s2.txt` and `s3_<attribute>.txt` from `dir`. Missing
    /// files fall back to the shipped defaults.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str, default: &'static str| -> Result<String, TemplateError> {
            let path = dir.join(name);
            if path.exists() {
                std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            } else {
                Ok(default.to_string())
            }
        };
        let s1 = read("s1.txt", DEFAULT_S1)?;
        let s2 = read("s2.txt", DEFAULT_S2)?;
        let age = read("s3_age.txt", DEFAULT_S3_AGE)?;
        let income = read("s3_income.txt", DEFAULT_S3_INCOME)?;
        let education = read("s3_education.txt", DEFAULT_S3_EDUCATION)?;
        Self::from_sources(
            &s1,
            &s2,
            [
                (Attribute::Age, age.as_str()),
                (Attribute::Income, income.as_str()),
                (Attribute::Education, education.as_str()),
            ],
        )
    }

    pub fn s3(&self, attribute: Attribute) -> Result<&PromptTemplate, TemplateError> {
        self.s3.get(&attribute).ok_or(TemplateError::MissingAttribute(attribute))
    }

    /// Template ids keyed `s1`, `s2`, `s3_<attribute>`.
    pub fn ids(&self) -> BTreeMap<String, String> {
        let mut ids = BTreeMap::new();
        ids.insert("s1".to_string(), self.s1.template_id());
        ids.insert("s2".to_string(), self.s2.template_id());
        for (attribute, t) in &self.s3 {
            ids.insert(format!("s3_{attribute}"), t.template_id());
        }
        ids
    }
}
