use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Duration, TimeZone, Utc};
use chrono_tz::Tz;
use proptest::prelude::*;

use trajdemo::backend::{CompletionRequest, Message};
use trajdemo::metrics;
use trajdemo::narrative::{duration_minutes, render_summary, render_visit_line};
use trajdemo::parser::{DemographicPrediction, IncomeIndicators, Label, ParseStatus, ResponseParser, SynonymTables};
use trajdemo::trajectory::{
    partition_weeks, read_poi_catalog, read_stay_points, write_poi_catalog, write_stay_points, Poi, PoiCatalog,
    StayPoint, Visit,
};
use trajdemo::{Attribute, CategoryConfig, CategoryId};

const ZONES: [Tz; 4] = [Tz::UTC, Tz::America__New_York, Tz::Asia__Tokyo, Tz::Pacific__Auckland];

fn base() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn stay_point() -> impl Strategy<Value = StayPoint> {
    (
        "[a-z][a-z0-9_]{0,10}",
        0i64..60 * 86_400,
        1i64..6 * 3_600,
        "[a-z0-9]{1,8}",
        -180.0f64..=180.0,
        -90.0f64..=90.0,
    )
        .prop_map(|(agent_id, offset, duration, poi_id, lon, lat)| {
            let start_ts = base() + Duration::seconds(offset);
            StayPoint {
                agent_id,
                start_ts,
                end_ts: start_ts + Duration::seconds(duration),
                poi_id,
                lon,
                lat,
            }
        })
}

fn visit() -> impl Strategy<Value = Visit> {
    (0i64..42 * 86_400, 0i64..4 * 3_600, prop::collection::vec("[A-Z][a-z]{2,8}", 1..4), 0usize..6).prop_map(
        |(offset, duration, tags, venue)| {
            let start_ts = base() + Duration::seconds(offset);
            Visit {
                agent_id: "a1".into(),
                start_ts,
                end_ts: start_ts + Duration::seconds(duration),
                poi_id: format!("p{venue}"),
                lon: 0.0,
                lat: 0.0,
                name: format!("Venue {venue}"),
                activity_types: tags,
                duration_s: duration,
            }
        },
    )
}

fn parser() -> ResponseParser {
    ResponseParser::new(CategoryConfig::default(), &SynonymTables::default())
}

/// Number following `prefix` on the summary line starting with it.
fn field(text: &str, line_prefix: &str, key: &str) -> String {
    let line = text.lines().find(|l| l.starts_with(line_prefix)).expect("summary line");
    let rest = &line[line.find(key).expect("key") + key.len()..];
    rest.trim_start().split(|c: char| c == ',' || c.is_whitespace()).next().unwrap().to_string()
}

fn tenths(numerator: u32, denominator: u32) -> String {
    // independent half-up rounding on floats; values here are far from ties
    // that floats could misrepresent
    let v = (numerator as f64 / denominator as f64 * 10.0 + 0.5 + 1e-9).floor() / 10.0;
    format!("{v:.1}")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn stay_points_round_trip_through_csv(points in prop::collection::vec(stay_point(), 0..30)) {
        let mut buf = Vec::new();
        write_stay_points(&mut buf, &points).unwrap();
        prop_assert_eq!(read_stay_points(buf.as_slice()).unwrap(), points);
    }

    #[test]
    fn poi_catalog_round_trips_through_csv(
        names in prop::collection::vec("[A-Za-z ,\"']{1,20}", 1..10),
        tags in prop::collection::vec(prop::collection::vec("[A-Za-z]{1,8}", 1..4), 10),
    ) {
        let pois: Vec<Poi> = names
            .iter()
            .enumerate()
            .map(|(i, name)| Poi {
                poi_id: format!("p{i}"),
                name: name.trim().to_string(),
                activity_types: tags[i].clone(),
                lon: i as f64 * 0.5,
                lat: -(i as f64) * 0.25,
            })
            .filter(|p| !p.name.is_empty())
            .collect();
        prop_assume!(!pois.is_empty());
        let catalog = PoiCatalog::from_pois(pois.clone()).unwrap();
        let mut buf = Vec::new();
        write_poi_catalog(&mut buf, &catalog).unwrap();
        let back = read_poi_catalog(buf.as_slice(), None).unwrap();
        prop_assert_eq!(back.iter().cloned().collect::<Vec<_>>(), pois);
    }

    #[test]
    fn weeks_partition_visits(mut visits in prop::collection::vec(visit(), 1..60), zone in 0usize..4) {
        let tz = ZONES[zone];
        visits.sort_by_key(|v| v.start_ts);
        let weeks = partition_weeks("a1", &visits, &tz);
        let total: usize = weeks.iter().map(|w| w.visits.len()).sum();
        prop_assert_eq!(total, visits.len());
        for pair in weeks.windows(2) {
            prop_assert!(pair[0].week_start < pair[1].week_start);
        }
        for w in &weeks {
            prop_assert!(!w.visits.is_empty());
            prop_assert_eq!(w.week_start.weekday(), chrono::Weekday::Mon);
            for v in &w.visits {
                let local = v.start_ts.with_timezone(&tz).date_naive();
                prop_assert!(local >= w.week_start && local < w.week_start + Duration::days(7));
            }
            prop_assert!(w.visits.windows(2).all(|p| p[0].start_ts <= p[1].start_ts));
        }
    }

    #[test]
    fn durations_floor_to_whole_minutes(seconds in 0i64..10 * 86_400) {
        let minutes = duration_minutes(seconds);
        prop_assert!(minutes * 60 <= seconds as u64);
        prop_assert!(seconds as u64 - minutes * 60 < 60);
    }

    #[test]
    fn visit_line_shows_floored_minutes(v in visit(), zone in 0usize..4) {
        let line = render_visit_line(&v, &ZONES[zone]);
        let expected = format!("({} mins)", v.duration_s / 60);
        prop_assert!(line.contains(&expected), "{} lacks {}", line, expected);
    }

    #[test]
    fn summary_numerals_agree_with_visits(mut visits in prop::collection::vec(visit(), 1..60), zone in 0usize..4) {
        let tz = ZONES[zone];
        visits.sort_by_key(|v| v.start_ts);
        for week in partition_weeks("a1", &visits, &tz) {
            let (text, _) = render_summary(&week, &tz).unwrap();
            let weekend = week
                .visits
                .iter()
                .filter(|v| matches!(v.start_ts.with_timezone(&tz).weekday(), chrono::Weekday::Sat | chrono::Weekday::Sun))
                .count() as u32;
            let weekday = week.visits.len() as u32 - weekend;
            prop_assert_eq!(field(&text, "Total visits:", "Total visits:"), week.visits.len().to_string());
            prop_assert_eq!(field(&text, "Visits on weekdays", "weekdays:"), weekday.to_string());
            prop_assert_eq!(field(&text, "Visits on weekdays", "weekends:"), weekend.to_string());
            prop_assert_eq!(field(&text, "Average activities", "weekdays:"), tenths(weekday, 5));
            prop_assert_eq!(field(&text, "Average activities", "weekends:"), tenths(weekend, 2));
            let minutes: i64 = week.visits.iter().map(|v| v.duration_s / 60).sum();
            prop_assert_eq!(field(&text, "Total visits:", "venues,"), minutes.to_string());

            let mut tags: BTreeMap<&str, u32> = BTreeMap::new();
            for v in &week.visits {
                for t in &v.activity_types {
                    *tags.entry(t).or_default() += 1;
                }
            }
            let line = text.lines().find(|l| l.starts_with("Activity type frequencies:")).unwrap();
            let listed: u32 = line["Activity type frequencies:".len()..]
                .split(", ")
                .map(|entry| entry.rsplit(' ').next().unwrap().parse::<u32>().unwrap())
                .sum();
            prop_assert_eq!(listed, tags.values().sum::<u32>());
            let dayparts = text.lines().find(|l| l.starts_with("Time of day distribution:")).unwrap();
            let parts: u32 = dayparts
                .split(", ")
                .map(|entry| entry.rsplit(' ').next().unwrap().parse::<u32>().unwrap())
                .sum();
            prop_assert_eq!(parts as usize, week.visits.len());
        }
    }

    #[test]
    fn parser_is_total_with_closed_ranges(raw in ".{0,300}", attr in 0usize..3) {
        let p = parser().parse_stage3("x", &raw, Attribute::ALL[attr]);
        if let Some(c) = p.confidence {
            prop_assert!((1..=5).contains(&c));
        }
        if let Some(ind) = &p.indicator_scores {
            prop_assert!(ind.to_array().iter().all(|v| (1..=10).contains(v)));
        }
        prop_assert_eq!(p.label.is_unparsed(), p.parse_status == ParseStatus::Unparsed);
        if let Label::Category(id) = &p.label {
            prop_assert!(CategoryConfig::default().get(Attribute::ALL[attr]).contains(id));
        }
    }

    #[test]
    fn parser_handles_arbitrary_bytes(raw in prop::collection::vec(any::<u8>(), 0..300), attr in 0usize..3) {
        let p = parser().parse_bytes("x", &raw, Attribute::ALL[attr]);
        prop_assert_eq!(p.label.is_unparsed(), p.parse_status == ParseStatus::Unparsed);
    }

    #[test]
    fn canonical_blocks_parse_back_clean(
        attr in 0usize..3,
        pick in 0usize..6,
        confidence in 1u8..=5,
        indicators in prop::array::uniform5(1u8..=10),
        alt_mask in 0u8..64,
        reasoning in "[a-z ]{0,80}",
    ) {
        let attribute = Attribute::ALL[attr];
        let categories = CategoryConfig::default();
        let set = categories.get(attribute);
        let ids: Vec<CategoryId> = set.ids().cloned().collect();
        let label = ids[pick % ids.len()].clone();
        let alternatives: Vec<CategoryId> = ids
            .iter()
            .enumerate()
            .filter(|(i, id)| alt_mask & (1 << i) != 0 && **id != label)
            .map(|(_, id)| id.clone())
            .collect();
        let original = DemographicPrediction {
            agent_id: "x".into(),
            attribute,
            label: Label::Category(label),
            confidence: Some(confidence),
            indicator_scores: (attribute == Attribute::Income).then(|| IncomeIndicators::from_array(indicators)),
            alternatives,
            reasoning: reasoning.trim().to_string(),
            parse_status: ParseStatus::Clean,
        };
        let block = original.to_answer_block(set);
        let parsed = parser().parse_stage3("x", &block, attribute);
        prop_assert_eq!(&parsed, &original);
        // parsing is idempotent through the canonical rendering
        let again = parser().parse_stage3("x", &parsed.to_answer_block(set), attribute);
        prop_assert_eq!(again, parsed);
    }

    #[test]
    fn metrics_agree_with_counting(
        pairs in prop::collection::vec((prop::option::weighted(0.9, 0usize..6), 0usize..6), 1..50)
    ) {
        let id = |c: usize| CategoryId::new(format!("c{c}"));
        let preds: Vec<Label> = pairs.iter().map(|(p, _)| p.map_or(Label::Unparsed, |c| Label::Category(id(c)))).collect();
        let truths: Vec<CategoryId> = pairs.iter().map(|(_, t)| id(*t)).collect();

        let correct = pairs.iter().filter(|(p, t)| *p == Some(*t)).count();
        let mut classes: Vec<usize> = pairs.iter().map(|(_, t)| *t).chain(pairs.iter().filter_map(|(p, _)| *p)).collect();
        classes.sort();
        classes.dedup();
        let f1s: Vec<f64> = classes
            .iter()
            .map(|&c| {
                let tp = pairs.iter().filter(|(p, t)| *p == Some(c) && *t == c).count() as f64;
                let fp = pairs.iter().filter(|(p, t)| *p == Some(c) && *t != c).count() as f64;
                let fn_ = pairs.iter().filter(|(p, t)| *p != Some(c) && *t == c).count() as f64;
                if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) }
            })
            .collect();
        let acc = metrics::accuracy(&preds, &truths).unwrap();
        let f1 = metrics::macro_f1(&preds, &truths).unwrap();
        prop_assert!((acc - correct as f64 / pairs.len() as f64).abs() <= 1e-12);
        prop_assert!((f1 - f1s.iter().sum::<f64>() / f1s.len() as f64).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
    }

    #[test]
    fn request_id_is_stable_and_sensitive(
        model in "[a-z0-9-]{1,20}",
        system in ".{0,60}",
        user in ".{0,200}",
        temperature in 0.0f64..2.0,
        max_tokens in 1u32..4096,
    ) {
        let build = |m: &str, u: &str, t: f64, k: u32| {
            CompletionRequest::new(m, vec![Message::system(system.clone()), Message::user(u)], t, k)
        };
        let a = build(&model, &user, temperature, max_tokens);
        let b = build(&model, &user, temperature, max_tokens);
        prop_assert_eq!(&a.request_id, &b.request_id);
        prop_assert_eq!(a.request_id.len(), 64);
        prop_assert!(a.request_id.chars().all(|c| c.is_ascii_hexdigit()));
        prop_assert_ne!(&a.request_id, &build(&model, &format!("{user}!"), temperature, max_tokens).request_id);
        prop_assert_ne!(&a.request_id, &build(&model, &user, temperature, max_tokens + 1).request_id);
        prop_assert_ne!(&a.request_id, &build(&format!("{model}x"), &user, temperature, max_tokens).request_id);
        // serialisation does not change the key
        let back: CompletionRequest = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert_eq!(
            CompletionRequest::compute_id(&back.model, &back.messages, back.temperature, back.max_tokens),
            a.request_id
        );
    }
}
