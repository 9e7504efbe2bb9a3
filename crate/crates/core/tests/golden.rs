//! Frozen outputs that must not drift between releases. The fixtures were
//! generated once; a change here means previously published samples,
//! cache keys or synthetic datasets can no longer be reproduced.

use serde::Deserialize;
use trajdemo::backend::{CompletionRequest, Message};
use trajdemo::experiment::{dataset_hash, DatasetPaths};
use trajdemo::synth::{self, GeneratorConfig, PlantedRules};
use trajdemo::trajectory::{sample_agents, SAMPLER_VERSION};

#[derive(Deserialize)]
struct SamplerFixture {
    sampler_version: String,
    agent_ids: Vec<String>,
    n: usize,
    seed: u64,
    expected: Vec<String>,
}

#[derive(Deserialize)]
struct Fixtures {
    sampler: SamplerFixture,
    request_id: String,
    synth_n5_seed7_hash: String,
}

fn fixtures() -> Fixtures {
    serde_json::from_str(include_str!("golden/fixtures.json")).unwrap()
}

fn golden_request() -> CompletionRequest {
    CompletionRequest::new(
        "mistral-7b-instruct",
        vec![Message::system("You analyse mobility."), Message::user("Describe the week.")],
        0.0,
        512,
    )
}

#[test]
fn sampler_output_is_frozen() {
    let f = fixtures().sampler;
    assert_eq!(f.sampler_version, SAMPLER_VERSION);
    assert_eq!(sample_agents(&f.agent_ids, f.n, f.seed).unwrap(), f.expected);
}

#[test]
fn sampler_ignores_input_order_and_duplicates() {
    let f = fixtures().sampler;
    let mut shuffled: Vec<String> = f.agent_ids.iter().rev().cloned().collect();
    shuffled.push(f.agent_ids[0].clone());
    assert_eq!(sample_agents(&shuffled, f.n, f.seed).unwrap(), f.expected);
}

#[test]
fn request_id_is_frozen() {
    assert_eq!(golden_request().request_id, fixtures().request_id);
}

#[test]
fn synthetic_dataset_is_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let config = GeneratorConfig { n: 5, ..GeneratorConfig::default() };
    synth::generate(&config, &PlantedRules::default()).unwrap().write_to(dir.path()).unwrap();
    let hash = dataset_hash(&DatasetPaths::in_dir(dir.path())).unwrap();
    assert_eq!(hash, fixtures().synth_n5_seed7_hash);
}
