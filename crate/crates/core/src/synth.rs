//! Labeled synthetic agents whose venue choices encode their demographic
//! brackets through keywords in venue names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{KeywordRule, KeywordRules};
use crate::category::{Attribute, CategoryConfig, CategoryId};
use crate::trajectory::{self, DatasetManifest, DemographicLabel, Poi, PoiCatalog, StayPoint};

pub const STAY_POINTS_FILE: &str = "stay_points.csv";
pub const POIS_FILE: &str = "pois.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATOR_FILE: &str = "generator.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no profile rule for {attribute} bracket `{category}`")]
    Coverage { attribute: Attribute, category: CategoryId },
    #[error("profile rule for {attribute} bracket `{category}` has no venues")]
    EmptyProfile { attribute: Attribute, category: CategoryId },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Write { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VenueTemplate {
    pub stem: String,
    pub activity_types: Vec<String>,
}

impl VenueTemplate {
    fn new(stem: &str, tags: &[&str]) -> Self {
        VenueTemplate {
            stem: stem.to_string(),
            activity_types: tags.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Signature venues of one bracket. Venue names are `"{keyword} {stem}"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRule {
    pub attribute: Attribute,
    pub category: CategoryId,
    pub keyword: String,
    pub tier: String,
    pub venues: Vec<VenueTemplate>,
    /// Inclusive range of signature visits per week.
    pub weekly_visits: (u32, u32),
}

impl ProfileRule {
    pub fn venue_names(&self) -> impl Iterator<Item = String> + '_ {
        self.venues.iter().map(|v| format!("{} {}", self.keyword, v.stem))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRules {
    pub profiles: Vec<ProfileRule>,
    /// Venues carrying no keyword, visited by everyone.
    pub neutral: Vec<VenueTemplate>,
    /// Inclusive range of neutral visits per week.
    pub neutral_weekly_visits: (u32, u32),
}

fn profile(attribute: Attribute, category: &str, keyword: &str, tier: &str, venues: &[(&str, &[&str])]) -> ProfileRule {
    ProfileRule {
        attribute,
        category: CategoryId::new(category),
        keyword: keyword.to_string(),
        tier: tier.to_string(),
        venues: venues.iter().map(|(s, t)| VenueTemplate::new(s, t)).collect(),
        weekly_visits: (2, 4),
    }
}

impl Default for PlantedRules {
    fn default() -> Self {
        use Attribute::*;
        let spending: &[(&str, &[&str])] = &[
            ("Market", &["Shopping", "Groceries"]),
            ("Bistro", &["Dining"]),
            ("Fitness Club", &["Recreation", "Fitness"]),
        ];
        let life: &[(&str, &[&str])] = &[("Lounge", &["Social"]), ("Hall", &["Recreation"])];
        let study: &[(&str, &[&str])] = &[("Center", &["Education"]), ("Reading Room", &["Education", "Leisure"])];
        let profiles = vec![
            profile(Income, "VeryLow", "Dollar", "budget", spending),
            profile(Income, "Low", "Discount", "value", spending),
            profile(Income, "Middle", "Family", "mid-range", spending),
            profile(Income, "UpperMiddle", "Boutique", "upscale", spending),
            profile(Income, "High", "Premier", "premium", spending),
            profile(Income, "VeryHigh", "Luxury", "luxury", spending),
            profile(Age, "Under25", "Campus", "youth", life),
            profile(Age, "Age25To44", "Playgroup", "young-family", life),
            profile(Age, "Age45To64", "Midtown", "established", life),
            profile(Age, "Age65Plus", "Senior", "retired", life),
            profile(Education, "NoHighSchool", "Apprentice", "vocational", study),
            profile(Education, "HighSchool", "Trades", "trade", study),
            profile(Education, "SomeCollege", "Extension", "continuing", study),
            profile(Education, "Bachelors", "Alumni", "graduate-club", study),
            profile(Education, "Graduate", "Research", "academic", study),
        ];
        let neutral = vec![
            VenueTemplate::new("Harbor Park", &["Recreation", "Outdoors"]),
            VenueTemplate::new("Central Library", &["Leisure"]),
            VenueTemplate::new("Maple Pharmacy", &["Services", "Health"]),
            VenueTemplate::new("Northgate Office Tower", &["Work"]),
            VenueTemplate::new("Union Transit Hub", &["Transit"]),
            VenueTemplate::new("Riverside Clinic", &["Health", "Services"]),
            VenueTemplate::new("Oak Street Post Office", &["Services", "DropOff"]),
            VenueTemplate::new("Elm Gas Station", &["Auto", "Services"]),
        ];
        PlantedRules {
            profiles,
            neutral,
            neutral_weekly_visits: (3, 6),
        }
    }
}

impl PlantedRules {
    pub fn profile(&self, attribute: Attribute, category: &CategoryId) -> Option<&ProfileRule> {
        self.profiles
            .iter()
            .find(|p| p.attribute == attribute && &p.category == category)
    }

    /// The keyword table the mock oracle uses to invert this generator.
    pub fn keyword_rules(&self) -> KeywordRules {
        KeywordRules {
            rules: self
                .profiles
                .iter()
                .map(|p| KeywordRule {
                    keyword: p.keyword.clone(),
                    attribute: p.attribute,
                    category: p.category.clone(),
                })
                .collect(),
            fallback: BTreeMap::new(),
        }
    }

    /// Every bracket of every attribute must have a non-empty profile.
    pub fn validate(&self, categories: &CategoryConfig) -> Result<(), SynthError> {
        for attribute in Attribute::ALL {
            for category in categories.get(attribute).ids() {
                let p = self.profile(attribute, category).ok_or_else(|| SynthError::Coverage {
                    attribute,
                    category: category.clone(),
                })?;
                if p.venues.is_empty() || p.weekly_visits.1 == 0 {
                    return Err(SynthError::EmptyProfile {
                        attribute,
                        category: category.clone(),
                    });
                }
            }
        }
        if self.neutral.is_empty() {
            return Err(SynthError::Config("no neutral venues".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("rules serialize");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "category", rename_all = "snake_case")]
pub enum IncomeAssignment {
    /// Agent `i` gets bracket `i mod 6`.
    Balanced,
    Fixed(CategoryId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub seed: u64,
    /// Probability that a signature visit goes to the agent's own bracket.
    /// At 1.0 the bracket venue subsets are fully disjoint.
    pub sigma: f64,
    pub weeks: u32,
    /// Monday of the first generated week (UTC).
    pub start: NaiveDate,
    pub income: IncomeAssignment,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 200,
            seed: 7,
            sigma: 1.0,
            weeks: 2,
            start: NaiveDate::from_ymd_opt(2024, 1, 29).expect("valid date"),
            income: IncomeAssignment::Balanced,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n == 0 {
            return Err(SynthError::Config("n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(SynthError::Config(format!("sigma {} is outside [0, 1]", self.sigma)));
        }
        if self.weeks == 0 {
            return Err(SynthError::Config("weeks must be at least 1".into()));
        }
        if self.start.format("%u").to_string() != "1" {
            return Err(SynthError::Config(format!("start {} is not a Monday", self.start)));
        }
        Ok(())
    }
}

/// Written as `generator.json` next to the data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub config: GeneratorConfig,
    pub rule_hash: String,
    pub rules: PlantedRules,
    /// Stay points emitted per agent.
    pub visit_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub stay_points: Vec<StayPoint>,
    pub catalog: PoiCatalog,
    pub labels: Vec<DemographicLabel>,
    pub manifest: DatasetManifest,
    pub generator: GeneratorManifest,
}

const DAY_END_MINUTE: i64 = 23 * 60 + 30;

struct PlannedVisit {
    poi: usize,
}

/// Generates `config.n` agents. Output is a pure function of the config
/// and the rules.
pub fn generate(config: &GeneratorConfig, rules: &PlantedRules) -> Result<SyntheticDataset, SynthError> {
    config.validate()?;
    let categories = CategoryConfig::default();
    rules.validate(&categories)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // One POI per neutral venue and per signature venue, in rule order.
    let mut pois = Vec::new();
    let mut signature_pois: BTreeMap<(Attribute, CategoryId), Vec<usize>> = BTreeMap::new();
    let mut push_poi = |name: String, tags: &[String], rng: &mut ChaCha8Rng| {
        let id = pois.len();
        pois.push(Poi {
            poi_id: format!("poi_{:04}", id + 1),
            name,
            activity_types: tags.to_vec(),
            lon: round6(-118.40 + rng.random::<f64>() * 0.30),
            lat: round6(33.90 + rng.random::<f64>() * 0.20),
        });
        id
    };
    let neutral: Vec<usize> = rules
        .neutral
        .iter()
        .map(|v| push_poi(v.stem.clone(), &v.activity_types, &mut rng))
        .collect();
    for p in &rules.profiles {
        let ids = p
            .venues
            .iter()
            .zip(p.venue_names())
            .map(|(v, name)| push_poi(name, &v.activity_types, &mut rng))
            .collect();
        signature_pois.insert((p.attribute, p.category.clone()), ids);
    }

    let width = config.n.to_string().len().max(4);
    let income_ids: Vec<CategoryId> = categories.income.ids().cloned().collect();
    let mut labels = Vec::with_capacity(config.n);
    let mut stay_points = Vec::new();
    let mut visit_counts = BTreeMap::new();

    for i in 0..config.n {
        let agent_id = format!("agent_{:0width$}", i + 1);
        let income = match &config.income {
            IncomeAssignment::Balanced => income_ids[i % income_ids.len()].clone(),
            IncomeAssignment::Fixed(c) => {
                if !categories.income.contains(c) {
                    return Err(SynthError::Config(format!("unknown income bracket `{c}`")));
                }
                c.clone()
            }
        };
        let age = pick(&mut rng, &categories.age.ids().cloned().collect::<Vec<_>>());
        let education = pick(&mut rng, &categories.education.ids().cloned().collect::<Vec<_>>());
        let label = DemographicLabel {
            agent_id: agent_id.clone(),
            age_bracket: age,
            income_bracket: income,
            education_level: education,
            sex: None,
        };

        let mut emitted = 0usize;
        for week in 0..config.weeks {
            let mut planned = Vec::new();
            for attribute in Attribute::ALL {
                let own = label.get(attribute);
                let rule = rules.profile(attribute, own).expect("validated coverage");
                let k = rng.random_range(rule.weekly_visits.0..=rule.weekly_visits.1);
                for _ in 0..k {
                    let bracket = if config.sigma >= 1.0 || rng.random::<f64>() < config.sigma {
                        own.clone()
                    } else {
                        let others: Vec<CategoryId> =
                            categories.get(attribute).ids().filter(|c| *c != own).cloned().collect();
                        pick(&mut rng, &others)
                    };
                    let venues = &signature_pois[&(attribute, bracket)];
                    planned.push(PlannedVisit {
                        poi: venues[rng.random_range(0..venues.len())],
                    });
                }
            }
            let k = rng.random_range(rules.neutral_weekly_visits.0..=rules.neutral_weekly_visits.1);
            for _ in 0..k {
                planned.push(PlannedVisit {
                    poi: neutral[rng.random_range(0..neutral.len())],
                });
            }

            // Spread visits over the 7 days, then lay each day out in order.
            let mut by_day: BTreeMap<u32, Vec<PlannedVisit>> = BTreeMap::new();
            for v in planned {
                by_day.entry(rng.random_range(0..7)).or_default().push(v);
            }
            let monday = config.start + Duration::days(7 * week as i64);
            for (day, visits) in by_day {
                let date = monday + Duration::days(day as i64);
                let midnight = Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"));
                let mut minute = rng.random_range(7 * 60..10 * 60) as i64;
                let mut remaining = visits.len() as i64;
                for v in visits {
                    // share what is left of the day (until 23:30) between the remaining visits
                    let budget = (DAY_END_MINUTE - minute) / remaining;
                    let duration = rng.random_range(20..=(budget - 10).clamp(20, 120));
                    let gap = rng.random_range(10..=(budget - duration).clamp(10, 90));
                    remaining -= 1;
                    let start_s = minute * 60 + rng.random_range(0..60) as i64;
                    let end_s = (minute + duration) * 60 + rng.random_range(0..60) as i64;
                    let poi = &pois[v.poi];
                    stay_points.push(StayPoint {
                        agent_id: agent_id.clone(),
                        start_ts: midnight + Duration::seconds(start_s),
                        end_ts: midnight + Duration::seconds(end_s),
                        poi_id: poi.poi_id.clone(),
                        lon: poi.lon,
                        lat: poi.lat,
                    });
                    emitted += 1;
                    minute += duration + gap;
                }
            }
        }
        visit_counts.insert(agent_id, emitted);
        labels.push(label);
    }

    let tags: BTreeSet<String> = pois.iter().flat_map(|p| p.activity_types.iter().cloned()).collect();
    let manifest = DatasetManifest {
        timezone: "UTC".into(),
        activity_tags: tags.into_iter().collect(),
        age_categories: None,
        education_categories: None,
    };
    let catalog = PoiCatalog::from_pois(pois).map_err(|e| SynthError::Config(e.to_string()))?;
    Ok(SyntheticDataset {
        stay_points,
        catalog,
        labels,
        manifest,
        generator: GeneratorManifest {
            config: config.clone(),
            rule_hash: rules.hash(),
            rules: rules.clone(),
            visit_counts,
        },
    })
}

fn pick<T: Clone>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())].clone()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl SyntheticDataset {
    /// Writes the three CSV files, `manifest.json` and `generator.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(|source| SynthError::Io { path, source })
        };
        let write_err = |name: &str, e: &dyn std::fmt::Display| SynthError::Write {
            path: dir.join(name),
            message: e.to_string(),
        };
        trajectory::write_stay_points(create(STAY_POINTS_FILE)?, &self.stay_points)
            .map_err(|e| write_err(STAY_POINTS_FILE, &e))?;
        trajectory::write_poi_catalog(create(POIS_FILE)?, &self.catalog).map_err(|e| write_err(POIS_FILE, &e))?;
        trajectory::write_labels(create(LABELS_FILE)?, &self.labels).map_err(|e| write_err(LABELS_FILE, &e))?;
        serde_json::to_writer_pretty(create(MANIFEST_FILE)?, &self.manifest)
            .map_err(|e| write_err(MANIFEST_FILE, &e))?;
        serde_json::to_writer_pretty(create(GENERATOR_FILE)?, &self.generator)
            .map_err(|e| write_err(GENERATOR_FILE, &e))?;
        Ok(())
    }
}
