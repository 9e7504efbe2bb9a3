//! Stay points, POIs and labels: loading, joining into visits, weekly
//! partitioning and reproducible agent sampling.
//!
//! All CSV readers have matching writers that emit the canonical form of
//! each file (RFC 3339 `Z` timestamps, shortest round-trip floats, minimal
//! quoting), so `write(load(f)) == f` for any canonical input.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, NaiveDate, SecondsFormat, Timelike, Utc};
use chrono_tz::Tz;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{Attribute, Category, CategoryConfig, CategoryError, CategoryId, CategorySet};

pub const STAY_POINT_HEADER: [&str; 6] = ["agent_id", "start_ts", "end_ts", "poi_id", "lon", "lat"];
pub const POI_HEADER: [&str; 5] = ["poi_id", "name", "activity_types", "lon", "lat"];
pub const LABEL_HEADER: [&str; 5] = ["agent_id", "age_bracket", "income_bracket", "education_level", "sex"];

/// Identifier of the agent sampling algorithm; bump on any change.
pub const SAMPLER_VERSION: &str = "chacha8-fisher-yates-v1";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Csv {
        line: u64,
        #[source]
        source: csv::Error,
    },
    #[error("bad header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: u64,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: end_ts must be after start_ts for agent `{agent_id}`")]
    InvalidInterval { line: u64, agent_id: String },
    #[error("line {line}: duplicate poi_id `{poi_id}`")]
    DuplicatePoi { line: u64, poi_id: String },
    #[error("line {line}: poi `{poi_id}` has no activity types")]
    EmptyActivities { line: u64, poi_id: String },
    #[error("line {line}: activity tag `{tag}` is not in the declared vocabulary")]
    UnknownTag { line: u64, tag: String },
    #[error("line {line}: duplicate label row for agent `{agent_id}`")]
    DuplicateLabel { line: u64, agent_id: String },
    #[error("stay point of agent `{agent_id}` references unknown poi `{poi_id}`")]
    UnresolvedPoi { agent_id: String, poi_id: String },
    #[error("cannot sample {requested} agents from a population of {population}")]
    SampleTooLarge { requested: usize, population: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Category(#[from] CategoryError),
}

pub type Result<T, E = TrajectoryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub agent_id: String,
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
    pub poi_id: String,
    pub lon: f64,
    pub lat: f64,
}

impl StayPoint {
    pub fn duration_s(&self) -> i64 {
        (self.end_ts - self.start_ts).num_seconds()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub poi_id: String,
    pub name: String,
    pub activity_types: Vec<String>,
    pub lon: f64,
    pub lat: f64,
}

/// POIs keyed by id, in file order.
#[derive(Debug, Clone, Default)]
pub struct PoiCatalog {
    pois: Vec<Poi>,
    index: HashMap<String, usize>,
}

impl PoiCatalog {
    /// Builds a catalog, rejecting duplicate ids and empty tag lists.
    pub fn from_pois(pois: Vec<Poi>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pois.len());
        for (i, poi) in pois.iter().enumerate() {
            let line = i as u64 + 2;
            if poi.activity_types.is_empty() {
                return Err(TrajectoryError::EmptyActivities {
                    line,
                    poi_id: poi.poi_id.clone(),
                });
            }
            if index.insert(poi.poi_id.clone(), i).is_some() {
                return Err(TrajectoryError::DuplicatePoi {
                    line,
                    poi_id: poi.poi_id.clone(),
                });
            }
        }
        Ok(PoiCatalog { pois, index })
    }

    pub fn get(&self, poi_id: &str) -> Option<&Poi> {
        self.index.get(poi_id).map(|&i| &self.pois[i])
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Poi> {
        self.pois.iter()
    }
}

/// A stay point resolved against its POI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub agent_id: String,
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
    pub poi_id: String,
    pub lon: f64,
    pub lat: f64,
    pub name: String,
    pub activity_types: Vec<String>,
    pub duration_s: i64,
}

/// All visits of one agent whose start falls in one Monday-based week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentWeek {
    pub agent_id: String,
    pub week_start: NaiveDate,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicLabel {
    pub agent_id: String,
    pub age_bracket: CategoryId,
    pub income_bracket: CategoryId,
    pub education_level: CategoryId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
}

impl DemographicLabel {
    pub fn get(&self, attribute: Attribute) -> &CategoryId {
        match attribute {
            Attribute::Age => &self.age_bracket,
            Attribute::Income => &self.income_bracket,
            Attribute::Education => &self.education_level,
        }
    }
}

/// Dataset-level configuration stored next to the CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// IANA timezone name used for week boundaries and clock display.
    #[serde(default = "default_timezone")]
    pub timezone: String,
    /// Allowed activity tags. Empty means unrestricted.
    #[serde(default)]
    pub activity_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_categories: Option<Vec<Category>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education_categories: Option<Vec<Category>>,
}

fn default_timezone() -> String {
    "UTC".to_string()
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            timezone: default_timezone(),
            activity_tags: Vec::new(),
            age_categories: None,
            education_categories: None,
        }
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| TrajectoryError::Manifest(e.to_string()))?;
        manifest.timezone()?;
        manifest.categories()?;
        Ok(manifest)
    }

    pub fn timezone(&self) -> Result<Tz> {
        self.timezone
            .parse::<Tz>()
            .map_err(|e| TrajectoryError::Manifest(format!("timezone `{}`: {e}", self.timezone)))
    }

    pub fn categories(&self) -> Result<CategoryConfig> {
        let mut cfg = CategoryConfig::default();
        if let Some(age) = &self.age_categories {
            cfg.age = CategorySet {
                attribute: Attribute::Age,
                categories: age.clone(),
            };
        }
        if let Some(edu) = &self.education_categories {
            cfg.education = CategorySet {
                attribute: Attribute::Education,
                categories: edu.clone(),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Vocabulary as a set; `None` when unrestricted.
    pub fn tag_vocabulary(&self) -> Option<BTreeSet<String>> {
        if self.activity_tags.is_empty() {
            None
        } else {
            Some(self.activity_tags.iter().cloned().collect())
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| TrajectoryError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_reader<R: Read>(reader: R, expected: &[&str]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|source| TrajectoryError::Csv { line: 1, source })?
        .clone();
    let found: Vec<&str> = headers.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if found != expected {
        return Err(TrajectoryError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(rdr)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn non_empty(line: u64, field: &'static str, value: &str) -> Result<String> {
    if value.is_empty() {
        return Err(TrajectoryError::Field {
            line,
            field,
            message: "must not be empty".into(),
        });
    }
    Ok(value.to_string())
}

fn parse_timestamp(line: u64, field: &'static str, value: &str) -> Result<DateTime<Utc>> {
    let ts = DateTime::parse_from_rfc3339(value).map_err(|e| TrajectoryError::Field {
        line,
        field,
        message: format!("`{value}` is not an RFC 3339 timestamp ({e})"),
    })?;
    if ts.nanosecond() != 0 {
        return Err(TrajectoryError::Field {
            line,
            field,
            message: format!("`{value}` has sub-second precision"),
        });
    }
    Ok(ts.with_timezone(&Utc))
}

fn parse_coord(line: u64, field: &'static str, value: &str, limit: f64) -> Result<f64> {
    let v: f64 = value.parse().map_err(|_| TrajectoryError::Field {
        line,
        field,
        message: format!("`{value}` is not a number"),
    })?;
    if !v.is_finite() || v < -limit || v > limit {
        return Err(TrajectoryError::Field {
            line,
            field,
            message: format!("{v} outside [-{limit}, {limit}]"),
        });
    }
    Ok(v)
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn load_stay_points(path: &Path) -> Result<Vec<StayPoint>> {
    read_stay_points(open(path)?)
}

pub fn read_stay_points<R: Read>(reader: R) -> Result<Vec<StayPoint>> {
    let mut rdr = csv_reader(reader, &STAY_POINT_HEADER)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|source| TrajectoryError::Csv {
            line: source.position().map(|p| p.line()).unwrap_or(0),
            source,
        })?;
        let line = record_line(&record);
        let sp = StayPoint {
            agent_id: non_empty(line, "agent_id", &record[0])?,
            start_ts: parse_timestamp(line, "start_ts", &record[1])?,
            end_ts: parse_timestamp(line, "end_ts", &record[2])?,
            poi_id: non_empty(line, "poi_id", &record[3])?,
            lon: parse_coord(line, "lon", &record[4], 180.0)?,
            lat: parse_coord(line, "lat", &record[5], 90.0)?,
        };
        if sp.end_ts <= sp.start_ts {
            return Err(TrajectoryError::InvalidInterval {
                line,
                agent_id: sp.agent_id,
            });
        }
        out.push(sp);
    }
    Ok(out)
}

pub fn write_stay_points<W: Write>(writer: W, stay_points: &[StayPoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(STAY_POINT_HEADER)?;
    for sp in stay_points {
        w.write_record([
            sp.agent_id.as_str(),
            &format_timestamp(&sp.start_ts),
            &format_timestamp(&sp.end_ts),
            &sp.poi_id,
            &sp.lon.to_string(),
            &sp.lat.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the POI catalog. When `vocabulary` is given every tag must be in it.
pub fn load_poi_catalog(path: &Path, vocabulary: Option<&BTreeSet<String>>) -> Result<PoiCatalog> {
    read_poi_catalog(open(path)?, vocabulary)
}

pub fn read_poi_catalog<R: Read>(reader: R, vocabulary: Option<&BTreeSet<String>>) -> Result<PoiCatalog> {
    let mut rdr = csv_reader(reader, &POI_HEADER)?;
    let mut pois = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|source| TrajectoryError::Csv {
            line: source.position().map(|p| p.line()).unwrap_or(0),
            source,
        })?;
        let line = record_line(&record);
        let poi_id = non_empty(line, "poi_id", &record[0])?;
        let activity_types: Vec<String> = record[2]
            .split('|')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if activity_types.is_empty() {
            return Err(TrajectoryError::EmptyActivities { line, poi_id });
        }
        if let Some(vocab) = vocabulary {
            if let Some(tag) = activity_types.iter().find(|t| !vocab.contains(*t)) {
                return Err(TrajectoryError::UnknownTag {
                    line,
                    tag: tag.clone(),
                });
            }
        }
        if seen.insert(poi_id.clone(), line).is_some() {
            return Err(TrajectoryError::DuplicatePoi { line, poi_id });
        }
        pois.push(Poi {
            poi_id,
            name: non_empty(line, "name", &record[1])?,
            activity_types,
            lon: parse_coord(line, "lon", &record[3], 180.0)?,
            lat: parse_coord(line, "lat", &record[4], 90.0)?,
        });
    }
    PoiCatalog::from_pois(pois)
}

pub fn write_poi_catalog<W: Write>(writer: W, catalog: &PoiCatalog) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POI_HEADER)?;
    for poi in catalog.iter() {
        w.write_record([
            poi.poi_id.as_str(),
            &poi.name,
            &poi.activity_types.join("|"),
            &poi.lon.to_string(),
            &poi.lat.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path, categories: &CategoryConfig) -> Result<Vec<DemographicLabel>> {
    read_labels(open(path)?, categories)
}

pub fn read_labels<R: Read>(reader: R, categories: &CategoryConfig) -> Result<Vec<DemographicLabel>> {
    let mut rdr = csv_reader(reader, &LABEL_HEADER)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let check = |line: u64, field: &'static str, set: &CategorySet, value: &str| {
        let id = CategoryId::new(value);
        if set.contains(&id) {
            Ok(id)
        } else {
            Err(TrajectoryError::Field {
                line,
                field,
                message: format!("`{value}` is not a configured {} category", set.attribute),
            })
        }
    };
    for record in rdr.records() {
        let record = record.map_err(|source| TrajectoryError::Csv {
            line: source.position().map(|p| p.line()).unwrap_or(0),
            source,
        })?;
        let line = record_line(&record);
        let agent_id = non_empty(line, "agent_id", &record[0])?;
        if !seen.insert(agent_id.clone()) {
            return Err(TrajectoryError::DuplicateLabel { line, agent_id });
        }
        let sex = match &record[4] {
            "" => None,
            s => Some(s.to_string()),
        };
        out.push(DemographicLabel {
            agent_id,
            age_bracket: check(line, "age_bracket", &categories.age, &record[1])?,
            income_bracket: check(line, "income_bracket", &categories.income, &record[2])?,
            education_level: check(line, "education_level", &categories.education, &record[3])?,
            sex,
        });
    }
    Ok(out)
}

pub fn write_labels<W: Write>(writer: W, labels: &[DemographicLabel]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LABEL_HEADER)?;
    for l in labels {
        w.write_record([
            l.agent_id.as_str(),
            l.age_bracket.as_str(),
            l.income_bracket.as_str(),
            l.education_level.as_str(),
            l.sex.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// What to do with stay points whose POI is missing from the catalog.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnresolvedPolicy {
    #[default]
    Error,
    Skip,
}

#[derive(Debug, Clone, Default)]
pub struct JoinedVisits {
    /// Per-agent visits sorted by `(start_ts, poi_id)`.
    pub by_agent: BTreeMap<String, Vec<Visit>>,
    /// Stay points dropped under [`UnresolvedPolicy::Skip`].
    pub skipped: usize,
}

impl JoinedVisits {
    pub fn total_visits(&self) -> usize {
        self.by_agent.values().map(Vec::len).sum()
    }
}

pub fn join_visits(
    stay_points: &[StayPoint],
    catalog: &PoiCatalog,
    policy: UnresolvedPolicy,
) -> Result<JoinedVisits> {
    let mut joined = JoinedVisits::default();
    for sp in stay_points {
        let Some(poi) = catalog.get(&sp.poi_id) else {
            match policy {
                UnresolvedPolicy::Error => {
                    return Err(TrajectoryError::UnresolvedPoi {
                        agent_id: sp.agent_id.clone(),
                        poi_id: sp.poi_id.clone(),
                    })
                }
                UnresolvedPolicy::Skip => {
                    tracing::warn!(agent = %sp.agent_id, poi = %sp.poi_id, "skipping stay point with unknown poi");
                    joined.skipped += 1;
                    continue;
                }
            }
        };
        joined.by_agent.entry(sp.agent_id.clone()).or_default().push(Visit {
            agent_id: sp.agent_id.clone(),
            start_ts: sp.start_ts,
            end_ts: sp.end_ts,
            poi_id: sp.poi_id.clone(),
            lon: sp.lon,
            lat: sp.lat,
            name: poi.name.clone(),
            activity_types: poi.activity_types.clone(),
            duration_s: sp.duration_s(),
        });
    }
    for visits in joined.by_agent.values_mut() {
        visits.sort_by(|a, b| a.start_ts.cmp(&b.start_ts).then_with(|| a.poi_id.cmp(&b.poi_id)));
    }
    Ok(joined)
}

/// Monday opening the local week that contains `ts`.
pub fn week_start_of(ts: &DateTime<Utc>, tz: &Tz) -> NaiveDate {
    let local = ts.with_timezone(tz).date_naive();
    local - Duration::days(local.weekday().num_days_from_monday() as i64)
}

/// Splits one agent's sorted visits into non-empty weeks, oldest first.
pub fn partition_weeks(agent_id: &str, visits: &[Visit], tz: &Tz) -> Vec<AgentWeek> {
    let mut weeks: BTreeMap<NaiveDate, Vec<Visit>> = BTreeMap::new();
    for v in visits {
        weeks.entry(week_start_of(&v.start_ts, tz)).or_default().push(v.clone());
    }
    weeks
        .into_iter()
        .map(|(week_start, mut visits)| {
            visits.sort_by(|a, b| a.start_ts.cmp(&b.start_ts).then_with(|| a.poi_id.cmp(&b.poi_id)));
            AgentWeek {
                agent_id: agent_id.to_string(),
                week_start,
                visits,
            }
        })
        .collect()
}

/// Uniform integer in `0..bound` by rejection sampling on 64-bit draws.
fn bounded(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}

/// Samples `n` distinct agents without replacement.
///
/// Ids are de-duplicated and sorted first, then a partial Fisher-Yates
/// shuffle driven by ChaCha8 seeded with `seed` picks the first `n`. The
/// output is a pure function of `(set of ids, n, seed)`.
pub fn sample_agents(agent_ids: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    let mut pool: Vec<String> = agent_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if n > pool.len() {
        return Err(TrajectoryError::SampleTooLarge {
            requested: n,
            population: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = pool.len();
    for i in 0..n {
        let j = i + bounded(&mut rng, (len - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}
