//! The three-stage reasoning chain: factual extraction, behavioral analysis,
//! and demographic inference, with the two single-stage ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, CompletionRequest, Message};
use crate::category::{Attribute, CategoryConfig};
use crate::template::{markers, Placeholder, Stage, TemplateError, TemplateSet};

/// Stands in for a removed Stage 1 so Stage 2/3 prompts keep their shape.
pub const S1_SENTINEL: &str = "Stage 1 analysis unavailable.";
/// Stands in for a removed Stage 2 in the Stage 3 prompt.
pub const S2_SENTINEL: &str = "Stage 2 analysis unavailable.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoS1,
    NoS2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoS1, Variant::NoS2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoS1 => "no_s1",
            Variant::NoS2 => "no_s2",
        }
    }

    /// Table label, e.g. `Full-CoT`, `No-S1`.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "Full-CoT",
            Variant::NoS1 => "No-S1",
            Variant::NoS2 => "No-S2",
        }
    }

    pub fn runs(&self, stage: Stage) -> bool {
        !matches!((self, stage), (Variant::NoS1, Stage::S1) | (Variant::NoS2, Stage::S2))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "full_cot" => Ok(Variant::Full),
            "no_s1" | "nos1" => Ok(Variant::NoS1),
            "no_s2" | "nos2" => Ok(Variant::NoS2),
            other => Err(format!("unknown variant `{other}` (expected full, no_s1 or no_s2)")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("narrative is empty")]
    EmptyNarrative,
    #[error("stage {0} response is empty")]
    EmptyResponse(Stage),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Decoding parameters sent with every stage request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            model: "mock-oracle".into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub request_id: String,
    pub prompt: String,
    pub response: Option<String>,
    pub params: DecodingParams,
    pub started_at: DateTime<Utc>,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ChainStatus {
    Completed,
    Failed { stage: Stage, error: String },
}

/// Audit and replay record of one chain for one agent and attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTranscript {
    pub agent_id: String,
    pub attribute: Attribute,
    pub variant: Variant,
    pub template_ids: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub status: ChainStatus,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run_config: serde_json::Value,
}

impl StageTranscript {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn is_complete(&self) -> bool {
        self.status == ChainStatus::Completed
    }

    /// Raw Stage-3 response of a completed chain.
    pub fn final_response(&self) -> Option<&str> {
        if !self.is_complete() {
            return None;
        }
        self.stage(Stage::S3).and_then(|r| r.response.as_deref())
    }
}

/// Builds stage prompts and runs chains against a backend.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    pub templates: TemplateSet,
    pub categories: CategoryConfig,
    pub params: DecodingParams,
    /// Append the narrative to the Stage 3 prompt as well.
    pub include_narrative_in_s3: bool,
}

fn response_or_sentinel<'a>(response: Option<&'a str>, stage: Stage, sentinel: &'a str) -> Result<&'a str, ChainError> {
    match response {
        None => Ok(sentinel),
        Some(r) if r.trim().is_empty() => Err(ChainError::EmptyResponse(stage)),
        Some(r) => Ok(r),
    }
}

impl Orchestrator {
    pub fn new(templates: TemplateSet, categories: CategoryConfig, params: DecodingParams) -> Self {
        Orchestrator {
            templates,
            categories,
            params,
            include_narrative_in_s3: false,
        }
    }

    pub fn build_stage1_prompt(&self, narrative: &str) -> Result<String, ChainError> {
        if narrative.trim().is_empty() {
            return Err(ChainError::EmptyNarrative);
        }
        Ok(self
            .templates
            .s1
            .render(&BTreeMap::from([(Placeholder::Narrative, narrative)]))?)
    }

    /// `s1_response` is `None` when Stage 1 was ablated.
    pub fn build_stage2_prompt(&self, narrative: &str, s1_response: Option<&str>) -> Result<String, ChainError> {
        if narrative.trim().is_empty() {
            return Err(ChainError::EmptyNarrative);
        }
        let s1 = response_or_sentinel(s1_response, Stage::S1, S1_SENTINEL)?;
        Ok(self.templates.s2.render(&BTreeMap::from([
            (Placeholder::Narrative, narrative),
            (Placeholder::S1Response, s1),
        ]))?)
    }

    /// Missing responses are replaced by their sentinels. `narrative` is only
    /// used when `include_narrative_in_s3` is set.
    pub fn build_stage3_prompt(
        &self,
        attribute: Attribute,
        s1_response: Option<&str>,
        s2_response: Option<&str>,
        narrative: Option<&str>,
    ) -> Result<String, ChainError> {
        let template = self.templates.s3(attribute)?;
        let s1 = response_or_sentinel(s1_response, Stage::S1, S1_SENTINEL)?;
        let s2 = response_or_sentinel(s2_response, Stage::S2, S2_SENTINEL)?;
        let categories = self.categories.get(attribute).prompt_listing();
        let mut prompt = template.render(&BTreeMap::from([
            (Placeholder::S1Response, s1),
            (Placeholder::S2Response, s2),
            (Placeholder::Categories, categories.as_str()),
        ]))?;
        if self.include_narrative_in_s3 {
            if let Some(n) = narrative {
                prompt.push_str(&format!(
                    "\n{}\n{n}\n{}\n",
                    markers::NARRATIVE_BEGIN,
                    markers::NARRATIVE_END
                ));
            }
        }
        Ok(prompt)
    }

    fn request(&self, prompt: &str) -> CompletionRequest {
        CompletionRequest::new(
            self.params.model.clone(),
            vec![Message::user(prompt)],
            self.params.temperature,
            self.params.max_tokens,
        )
    }

    pub fn template_ids(&self, attribute: Attribute, variant: Variant) -> BTreeMap<String, String> {
        let mut ids = BTreeMap::new();
        if variant.runs(Stage::S1) {
            ids.insert("s1".into(), self.templates.s1.template_id());
        }
        if variant.runs(Stage::S2) {
            ids.insert("s2".into(), self.templates.s2.template_id());
        }
        if let Ok(t) = self.templates.s3(attribute) {
            ids.insert("s3".into(), t.template_id());
        }
        ids
    }

    /// Runs S1 -> S2 -> S3 (skipping the ablated stage). A backend failure
    /// ends the chain and is recorded in the transcript; only precondition
    /// violations are returned as errors.
    pub fn run_chain(
        &self,
        agent_id: &str,
        narrative: &str,
        attribute: Attribute,
        variant: Variant,
        backend: &dyn Backend,
    ) -> Result<StageTranscript, ChainError> {
        if narrative.trim().is_empty() {
            return Err(ChainError::EmptyNarrative);
        }
        self.templates.s3(attribute)?;
        let mut transcript = StageTranscript {
            agent_id: agent_id.to_string(),
            attribute,
            variant,
            template_ids: self.template_ids(attribute, variant),
            stages: Vec::with_capacity(3),
            status: ChainStatus::Completed,
            run_config: serde_json::Value::Null,
        };
        let mut last_start: Option<DateTime<Utc>> = None;
        let mut responses: BTreeMap<Stage, String> = BTreeMap::new();

        for stage in [Stage::S1, Stage::S2, Stage::S3] {
            if !variant.runs(stage) {
                continue;
            }
            let s1 = responses.get(&Stage::S1).map(String::as_str);
            let s2 = responses.get(&Stage::S2).map(String::as_str);
            let prompt = match stage {
                Stage::S1 => self.build_stage1_prompt(narrative),
                Stage::S2 => self.build_stage2_prompt(narrative, s1),
                Stage::S3 => self.build_stage3_prompt(attribute, s1, s2, Some(narrative)),
            };
            let prompt = match prompt {
                Ok(p) => p,
                Err(e @ ChainError::EmptyResponse(_)) => {
                    transcript.status = ChainStatus::Failed {
                        stage,
                        error: e.to_string(),
                    };
                    return Ok(transcript);
                }
                Err(e) => return Err(e),
            };
            let request = self.request(&prompt);

            let mut started_at = Utc::now();
            if let Some(prev) = last_start {
                if started_at <= prev {
                    started_at = prev + Duration::nanoseconds(1);
                }
            }
            last_start = Some(started_at);
            let clock = Instant::now();
            let outcome = backend.complete(&request);
            let latency_ms = clock.elapsed().as_millis() as u64;

            let mut record = StageRecord {
                stage,
                request_id: request.request_id.clone(),
                prompt,
                response: None,
                params: self.params.clone(),
                started_at,
                latency_ms,
                error: None,
            };
            match outcome {
                Ok(text) => {
                    record.response = Some(text.clone());
                    responses.insert(stage, text);
                    transcript.stages.push(record);
                }
                Err(e) => {
                    tracing::warn!(agent = agent_id, %attribute, %stage, error = %e, "chain aborted");
                    record.error = Some(e.to_string());
                    transcript.stages.push(record);
                    transcript.status = ChainStatus::Failed {
                        stage,
                        error: e.to_string(),
                    };
                    return Ok(transcript);
                }
            }
        }
        Ok(transcript)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, MockOracle};
    use std::sync::Mutex;

    fn orchestrator() -> Orchestrator {
        Orchestrator::new(TemplateSet::defaults(), CategoryConfig::default(), DecodingParams::default())
    }

    const NARRATIVE: &str = "Week of Monday, January 29, 2024\nActivity chronicle:\n--- Monday, January 29, 2024 ---\nMonday, January 29 (Weekday) - 09:10-10:14 (63 mins): Bear Wire - Work, Services, DropOff\nVisiting summary:\nTotal visits: 1";

    #[test]
    fn stage1_embeds_narrative_and_feature_families() {
        let p = orchestrator().build_stage1_prompt(NARRATIVE).unwrap();
        assert!(p.contains(NARRATIVE));
        for family in [
            "Location inventory",
            "Temporal patterns",
            "Spatial characteristics",
            "Sequence observations",
        ] {
            assert!(p.contains(family), "missing {family}");
        }
        assert!(p.contains("without interpretation"));
        assert_eq!(orchestrator().build_stage1_prompt("  \n"), Err(ChainError::EmptyNarrative));
    }

    #[test]
    fn stage2_names_five_dimensions() {
        let o = orchestrator();
        let p = o.build_stage2_prompt(NARRATIVE, Some("S1 FACTS")).unwrap();
        assert!(p.contains(NARRATIVE) && p.contains("S1 FACTS"));
        for dim in [
            "Temporal patterns (work-life structure)",
            "Economic patterns (spending preferences)",
            "Social patterns (lifestyle choices)",
            "Spatial patterns (living environment)",
            "Stability patterns (routine consistency)",
        ] {
            assert!(p.contains(dim), "missing {dim}");
        }
        assert!(p.contains("do not predict"));
        let ablated = o.build_stage2_prompt(NARRATIVE, None).unwrap();
        assert!(ablated.contains(S1_SENTINEL));
        assert!(!ablated.contains("S1 FACTS"));
    }

    #[test]
    fn stage3_income_lists_brackets_and_indicators() {
        let p = orchestrator()
            .build_stage3_prompt(Attribute::Income, Some("A"), Some("B"), None)
            .unwrap();
        assert!(p.contains("Upper-middle $75k-$125k"));
        assert!(p.contains("Very low <$15k"));
        for ind in [
            "Location economic levels",
            "Neighborhood characteristics",
            "Leisure cost levels",
            "Shopping patterns",
            "Commuting patterns",
        ] {
            assert!(p.contains(ind), "missing {ind}");
        }
        assert!(p.contains("PREDICTION:") && p.contains("INDICATORS:"));
        assert!(!p.contains(NARRATIVE));
    }

    #[test]
    fn stage3_age_routes_to_age_categories() {
        let p = orchestrator()
            .build_stage3_prompt(Attribute::Age, Some("A"), Some("B"), None)
            .unwrap();
        for c in &CategoryConfig::default().age.categories {
            assert!(p.contains(&c.display_line()));
        }
        assert!(!p.contains("INDICATORS"));
        assert!(!p.contains("Neighborhood characteristics"));
    }

    #[test]
    fn stage3_can_reappend_narrative() {
        let mut o = orchestrator();
        o.include_narrative_in_s3 = true;
        let p = o
            .build_stage3_prompt(Attribute::Income, Some("A"), Some("B"), Some(NARRATIVE))
            .unwrap();
        assert!(p.contains(NARRATIVE));
    }

    #[test]
    fn full_chain_has_three_ordered_stages() {
        let o = orchestrator();
        let mock = MockOracle::planted(CategoryConfig::default());
        let t = o.run_chain("a1", NARRATIVE, Attribute::Income, Variant::Full, &mock).unwrap();
        assert!(t.is_complete());
        let stages: Vec<_> = t.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Stage::S1, Stage::S2, Stage::S3]);
        assert!(t.stages.windows(2).all(|w| w[0].started_at < w[1].started_at));
        let s3 = &t.stage(Stage::S3).unwrap().prompt;
        assert!(s3.contains(t.stage(Stage::S1).unwrap().response.as_deref().unwrap()));
        assert!(s3.contains(t.stage(Stage::S2).unwrap().response.as_deref().unwrap()));
        assert!(t.final_response().unwrap().contains("PREDICTION:"));
        assert_eq!(t.template_ids.len(), 3);
    }

    #[test]
    fn no_s2_chain_skips_stage_two() {
        let o = orchestrator();
        let mock = MockOracle::planted(CategoryConfig::default());
        let t = o.run_chain("a1", NARRATIVE, Attribute::Income, Variant::NoS2, &mock).unwrap();
        let stages: Vec<_> = t.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Stage::S1, Stage::S3]);
        assert!(t.stage(Stage::S3).unwrap().prompt.contains(S2_SENTINEL));
        assert!(!t.template_ids.contains_key("s2"));
    }

    struct FailOn {
        marker: &'static str,
        calls: Mutex<Vec<String>>,
    }

    impl Backend for FailOn {
        fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
            let p = request.prompt_text();
            self.calls.lock().unwrap().push(p.clone());
            if p.contains(self.marker) {
                Err(BackendError::Exhausted {
                    attempts: 3,
                    last: Box::new(BackendError::Http {
                        status: 503,
                        body: "down".into(),
                    }),
                })
            } else {
                Ok("some analysis".into())
            }
        }

        fn describe(&self) -> String {
            "fail-on".into()
        }
    }

    #[test]
    fn failure_at_s2_aborts_without_s3_call() {
        let backend = FailOn {
            marker: "[STAGE-2",
            calls: Mutex::new(vec![]),
        };
        let t = orchestrator()
            .run_chain("a1", NARRATIVE, Attribute::Income, Variant::Full, &backend)
            .unwrap();
        assert!(matches!(t.status, ChainStatus::Failed { stage: Stage::S2, .. }));
        assert_eq!(backend.calls.lock().unwrap().len(), 2);
        assert!(t.stage(Stage::S3).is_none());
        assert!(t.stage(Stage::S2).unwrap().error.is_some());
        assert_eq!(t.final_response(), None);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("No-S1".parse::<Variant>().unwrap(), Variant::NoS1);
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::Full);
        assert!("s3only".parse::<Variant>().is_err());
    }
}
