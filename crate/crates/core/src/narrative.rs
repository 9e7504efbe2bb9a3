//! Weekly mobility narratives: the per-visit activity chronicle and the
//! statistics summary, rendered byte-stably in English.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{Datelike, NaiveDate, Timelike, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::trajectory::{AgentWeek, Visit};

/// Separator between weeks in the text handed to the model.
pub const WEEK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NarrativeError {
    #[error("agent week starting {0} has no visits")]
    EmptyWeek(NaiveDate),
    #[error("no weeks to narrate")]
    NoWeeks,
    #[error("week starting {week_start} needs {needed} characters but the budget is {budget}; raise the narrative budget")]
    BudgetTooSmall {
        week_start: NaiveDate,
        needed: usize,
        budget: usize,
    },
}

/// A non-negative value with one decimal, stored as tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Tenths(pub u32);

impl Tenths {
    /// `numerator / denominator` rounded half-up to one decimal.
    pub fn ratio(numerator: u32, denominator: u32) -> Self {
        assert!(denominator > 0);
        let n = numerator as u64 * 10;
        let d = denominator as u64;
        Tenths(((2 * n + d) / (2 * d)) as u32)
    }

    pub fn as_f64(&self) -> f64 {
        self.0 as f64 / 10.0
    }
}

impl fmt::Display for Tenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl Serialize for Tenths {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Tenths {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(Tenths((v * 10.0).round().max(0.0) as u32))
    }
}

/// Visit counts by start hour: Night 00-06, Morning 06-12, Afternoon 12-18, Evening 18-24.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaypartCounts {
    pub night: u32,
    pub morning: u32,
    pub afternoon: u32,
    pub evening: u32,
}

impl DaypartCounts {
    fn add(&mut self, hour: u32) {
        match hour {
            0..=5 => self.night += 1,
            6..=11 => self.morning += 1,
            12..=17 => self.afternoon += 1,
            _ => self.evening += 1,
        }
    }

    pub fn total(&self) -> u32 {
        self.night + self.morning + self.afternoon + self.evening
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitStats {
    /// Multi-tag visits count once per tag.
    pub activity_counts: BTreeMap<String, u32>,
    pub dayparts: DaypartCounts,
    pub weekday_visits: u32,
    pub weekend_visits: u32,
    /// Weekday visits divided by 5.
    pub weekday_avg: Tenths,
    /// Weekend visits divided by 2.
    pub weekend_avg: Tenths,
    pub total_visits: u32,
    pub distinct_venues: u32,
    /// Sum of per-visit whole minutes.
    pub total_duration_min: u64,
}

impl VisitStats {
    pub fn compute(week: &AgentWeek, tz: &Tz) -> Self {
        let mut activity_counts = BTreeMap::new();
        let mut dayparts = DaypartCounts::default();
        let mut weekday_visits = 0;
        let mut weekend_visits = 0;
        let mut venues = std::collections::BTreeSet::new();
        let mut total_duration_min = 0;
        for v in &week.visits {
            let local = v.start_ts.with_timezone(tz);
            dayparts.add(local.hour());
            if is_weekend(local.weekday()) {
                weekend_visits += 1;
            } else {
                weekday_visits += 1;
            }
            for tag in &v.activity_types {
                *activity_counts.entry(tag.clone()).or_insert(0) += 1;
            }
            venues.insert(v.poi_id.as_str());
            total_duration_min += duration_minutes(v.duration_s);
        }
        VisitStats {
            activity_counts,
            dayparts,
            weekday_visits,
            weekend_visits,
            weekday_avg: Tenths::ratio(weekday_visits, 5),
            weekend_avg: Tenths::ratio(weekend_visits, 2),
            total_visits: week.visits.len() as u32,
            distinct_venues: venues.len() as u32,
            total_duration_min,
        }
    }

    /// Activity tags by descending count, ties alphabetical.
    pub fn ranked_activities(&self) -> Vec<(&str, u32)> {
        let mut v: Vec<_> = self.activity_counts.iter().map(|(k, &c)| (k.as_str(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyNarrative {
    pub agent_id: String,
    pub week_start: NaiveDate,
    pub chronicle: String,
    pub summary: String,
    pub stats: VisitStats,
}

impl WeeklyNarrative {
    /// The block for this week as it appears in the model input.
    pub fn render(&self) -> String {
        format!(
            "Week of {}\nActivity chronicle:\n{}\nVisiting summary:\n{}",
            long_date(self.week_start),
            self.chronicle,
            self.summary
        )
    }
}

fn is_weekend(day: Weekday) -> bool {
    matches!(day, Weekday::Sat | Weekday::Sun)
}

/// Whole minutes, floored.
pub fn duration_minutes(duration_s: i64) -> u64 {
    (duration_s.max(0) / 60) as u64
}

fn weekday_name(day: Weekday) -> &'static str {
    match day {
        Weekday::Mon => "Monday",
        Weekday::Tue => "Tuesday",
        Weekday::Wed => "Wednesday",
        Weekday::Thu => "Thursday",
        Weekday::Fri => "Friday",
        Weekday::Sat => "Saturday",
        Weekday::Sun => "Sunday",
    }
}

fn month_name(month: u32) -> &'static str {
    const NAMES: [&str; 12] = [
        "January",
        "February",
        "March",
        "April",
        "May",
        "June",
        "July",
        "August",
        "September",
        "October",
        "November",
        "December",
    ];
    NAMES[(month - 1) as usize]
}

fn long_date(date: NaiveDate) -> String {
    format!(
        "{}, {} {}, {}",
        weekday_name(date.weekday()),
        month_name(date.month()),
        date.day(),
        date.year()
    )
}

/// One chronicle line, e.g.
/// `Monday, January 29 (Weekday) - 09:10-10:14 (63 mins): Bear Wire - Work, Services, DropOff`.
pub fn render_visit_line(visit: &Visit, tz: &Tz) -> String {
    let start = visit.start_ts.with_timezone(tz);
    let end = visit.end_ts.with_timezone(tz);
    let day = start.weekday();
    format!(
        "{}, {} {} ({}) - {:02}:{:02}-{:02}:{:02} ({} mins): {} - {}",
        weekday_name(day),
        month_name(start.month()),
        start.day(),
        if is_weekend(day) { "Weekend" } else { "Weekday" },
        start.hour(),
        start.minute(),
        end.hour(),
        end.minute(),
        duration_minutes(visit.duration_s),
        visit.name,
        visit.activity_types.join(", ")
    )
}

/// Day headers followed by one line per visit in chronological order.
pub fn render_chronicle(week: &AgentWeek, tz: &Tz) -> Result<String, NarrativeError> {
    if week.visits.is_empty() {
        return Err(NarrativeError::EmptyWeek(week.week_start));
    }
    let mut out = String::new();
    let mut current_day: Option<NaiveDate> = None;
    for v in &week.visits {
        let day = v.start_ts.with_timezone(tz).date_naive();
        if current_day != Some(day) {
            out.push_str(&format!("--- {} ---\n", long_date(day)));
            current_day = Some(day);
        }
        out.push_str(&render_visit_line(v, tz));
        out.push('\n');
    }
    out.pop();
    Ok(out)
}

/// Renders the summary text purely from `stats`.
pub fn summary_text(stats: &VisitStats) -> String {
    let activities = stats
        .ranked_activities()
        .iter()
        .map(|(tag, n)| format!("{tag} {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    let d = &stats.dayparts;
    format!(
        "Total visits: {} at {} distinct venues, {} minutes in total\n\
         Activity type frequencies: {}\n\
         Time of day distribution: Night {}, Morning {}, Afternoon {}, Evening {}\n\
         Visits on weekdays: {}, weekends: {}\n\
         Average activities on weekdays: {}, weekends: {}",
        stats.total_visits,
        stats.distinct_venues,
        stats.total_duration_min,
        activities,
        d.night,
        d.morning,
        d.afternoon,
        d.evening,
        stats.weekday_visits,
        stats.weekend_visits,
        stats.weekday_avg,
        stats.weekend_avg
    )
}

pub fn render_summary(week: &AgentWeek, tz: &Tz) -> Result<(String, VisitStats), NarrativeError> {
    if week.visits.is_empty() {
        return Err(NarrativeError::EmptyWeek(week.week_start));
    }
    let stats = VisitStats::compute(week, tz);
    Ok((summary_text(&stats), stats))
}

pub fn narrate_week(week: &AgentWeek, tz: &Tz) -> Result<WeeklyNarrative, NarrativeError> {
    let chronicle = render_chronicle(week, tz)?;
    let (summary, stats) = render_summary(week, tz)?;
    Ok(WeeklyNarrative {
        agent_id: week.agent_id.clone(),
        week_start: week.week_start,
        chronicle,
        summary,
        stats,
    })
}

/// Narrates an agent's weeks, newest first, keeping as many whole weeks as
/// fit in `budget` characters of joined text. Older weeks are dropped first.
pub fn build_narrative(
    weeks: &[AgentWeek],
    tz: &Tz,
    budget: usize,
) -> Result<Vec<WeeklyNarrative>, NarrativeError> {
    if weeks.is_empty() {
        return Err(NarrativeError::NoWeeks);
    }
    let mut ordered: Vec<&AgentWeek> = weeks.iter().collect();
    ordered.sort_by_key(|w| std::cmp::Reverse(w.week_start));

    let mut kept = Vec::new();
    let mut used = 0usize;
    for week in ordered {
        let narrative = narrate_week(week, tz)?;
        let len = narrative.render().chars().count();
        let extra = if kept.is_empty() { len } else { len + WEEK_SEPARATOR.len() };
        if used + extra > budget {
            if kept.is_empty() {
                return Err(NarrativeError::BudgetTooSmall {
                    week_start: week.week_start,
                    needed: len,
                    budget,
                });
            }
            break;
        }
        used += extra;
        kept.push(narrative);
    }
    Ok(kept)
}

/// Joined model input for a list of weekly narratives.
pub fn narrative_text(narratives: &[WeeklyNarrative]) -> String {
    narratives
        .iter()
        .map(WeeklyNarrative::render)
        .collect::<Vec<_>>()
        .join(WEEK_SEPARATOR)
}
