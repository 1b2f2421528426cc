//! Rules that turn raw application columns into feature values: first
//! generation status, years of work experience, institution tiers and award
//! category counts.

use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::AwardCategory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeriveError {
    #[error("unknown education level `{0}`")]
    UnknownEducationLevel(String),
    #[error("work period ends ({end}) before it starts ({start})")]
    InvalidPeriod { start: NaiveDate, end: NaiveDate },
    #[error("cannot read work period `{0}`; expected YYYY-MM-DD/YYYY-MM-DD")]
    MalformedPeriod(String),
    #[error("table row {line}: {reason}")]
    Table { line: usize, reason: String },
}

impl DeriveError {
    pub fn code(&self) -> &'static str {
        match self {
            DeriveError::UnknownEducationLevel(_) => "UnknownEducationLevel",
            DeriveError::InvalidPeriod { .. } => "InvalidPeriod",
            DeriveError::MalformedPeriod(_) => "InvalidPeriod",
            DeriveError::Table { .. } => "ParseError",
        }
    }
}

/// Ordered parental education vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EducationLevel {
    None,
    HighSchool,
    SomeCollege,
    Bachelors,
    Masters,
    Doctorate,
}

impl FromStr for EducationLevel {
    type Err = DeriveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, '\'' | '\u{2019}'))
            .map(|c| if c == '_' || c == '-' { ' ' } else { c })
            .collect();
        let level = match key.split_whitespace().collect::<Vec<_>>().join(" ").as_str() {
            "none" => EducationLevel::None,
            "high school" => EducationLevel::HighSchool,
            "some college" => EducationLevel::SomeCollege,
            "bachelors" | "bachelor" => EducationLevel::Bachelors,
            "masters" | "master" => EducationLevel::Masters,
            "doctorate" | "doctoral" => EducationLevel::Doctorate,
            _ => return Err(DeriveError::UnknownEducationLevel(s.trim().to_string())),
        };
        Ok(level)
    }
}

/// Yes (`Some(true)`) when every reported level is below a bachelor's
/// degree, no when any level reaches it, and `None` when nothing was
/// reported.
pub fn derive_first_generation(levels: &[EducationLevel]) -> Option<bool> {
    if levels.is_empty() {
        return None;
    }
    Some(levels.iter().all(|l| *l < EducationLevel::Bachelors))
}

/// Parses education cells, skipping blanks.
pub fn parse_education_levels<'a>(
    cells: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<EducationLevel>, DeriveError> {
    cells
        .into_iter()
        .filter(|c| !c.trim().is_empty())
        .map(EducationLevel::from_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkPeriod {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl WorkPeriod {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        WorkPeriod { start, end }
    }
}

const DAYS_PER_YEAR: f64 = 365.25;

/// Years between the earliest start and the latest end, in 365.25-day
/// years rounded to one decimal. Overlaps and gaps are not netted out.
pub fn derive_work_experience(periods: &[WorkPeriod]) -> Result<f64, DeriveError> {
    if let Some(bad) = periods.iter().find(|p| p.end < p.start) {
        return Err(DeriveError::InvalidPeriod {
            start: bad.start,
            end: bad.end,
        });
    }
    let (Some(first), Some(last)) = (
        periods.iter().map(|p| p.start).min(),
        periods.iter().map(|p| p.end).max(),
    ) else {
        return Ok(0.0);
    };
    let days = (last - first).num_days() as f64;
    Ok(round_to(days / DAYS_PER_YEAR, 1))
}

/// Parses `2015-06-01/2019-06-01;2020-01-01/2021-01-01`.
pub fn parse_work_history(text: &str) -> Result<Vec<WorkPeriod>, DeriveError> {
    text.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let malformed = || DeriveError::MalformedPeriod(p.to_string());
            let (start, end) = p.split_once('/').ok_or_else(malformed)?;
            let start = NaiveDate::parse_from_str(start.trim(), "%Y-%m-%d").map_err(|_| malformed())?;
            let end = NaiveDate::parse_from_str(end.trim(), "%Y-%m-%d").map_err(|_| malformed())?;
            Ok(WorkPeriod { start, end })
        })
        .collect()
}

pub(crate) fn round_to(value: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (value * scale).round() / scale
}

fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Institution name to tier (4 highest, 1 lowest).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierTable {
    tiers: BTreeMap<String, u8>,
}

impl TierTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tier: u8) {
        self.tiers.insert(normalize_name(name), tier);
    }

    pub fn len(&self) -> usize {
        self.tiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiers.is_empty()
    }

    /// Reads a `name,tier` CSV with a header row.
    pub fn from_csv(text: &str) -> Result<Self, DeriveError> {
        let mut table = TierTable::new();
        for (line, row) in read_table(text, 2)?.into_iter().enumerate() {
            let tier: u8 = row[1].trim().parse().map_err(|_| DeriveError::Table {
                line: line + 2,
                reason: format!("tier `{}` is not an integer", row[1]),
            })?;
            if !(1..=4).contains(&tier) {
                return Err(DeriveError::Table {
                    line: line + 2,
                    reason: format!("tier {tier} outside 1..=4"),
                });
            }
            table.insert(&row[0], tier);
        }
        Ok(table)
    }
}

/// Case- and whitespace-insensitive lookup; unmatched names yield `None`.
pub fn map_institution_tier(institution: &str, tiers: &TierTable) -> Option<u8> {
    tiers.tiers.get(&normalize_name(institution)).copied()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub keyword: String,
    pub category: AwardCategory,
    pub priority: i64,
}

/// Keyword lexicon used to code free-text award fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AwardLexicon {
    entries: Vec<LexiconEntry>,
}

impl AwardLexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self, DeriveError> {
        let mut lexicon = AwardLexicon::default();
        for (i, entry) in entries.into_iter().enumerate() {
            lexicon.push(entry, i + 1)?;
        }
        Ok(lexicon)
    }

    fn push(&mut self, mut entry: LexiconEntry, line: usize) -> Result<(), DeriveError> {
        entry.keyword = normalize_name(&entry.keyword);
        if entry.keyword.is_empty() {
            return Err(DeriveError::Table {
                line,
                reason: "empty keyword".into(),
            });
        }
        if self.entries.iter().any(|e| e.keyword == entry.keyword) {
            return Err(DeriveError::Table {
                line,
                reason: format!("keyword `{}` listed twice", entry.keyword),
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Reads a `keyword,category,priority` CSV with a header row.
    pub fn from_csv(text: &str) -> Result<Self, DeriveError> {
        let mut lexicon = AwardLexicon::default();
        for (i, row) in read_table(text, 3)?.into_iter().enumerate() {
            let line = i + 2;
            let category = AwardCategory::parse(&row[1]).ok_or_else(|| DeriveError::Table {
                line,
                reason: format!("unknown award category `{}`", row[1]),
            })?;
            let priority = row[2].trim().parse().map_err(|_| DeriveError::Table {
                line,
                reason: format!("priority `{}` is not an integer", row[2]),
            })?;
            lexicon.push(
                LexiconEntry {
                    keyword: row[0].clone(),
                    category,
                    priority,
                },
                line,
            )?;
        }
        Ok(lexicon)
    }

    /// Category of the highest-priority keyword found in `text`. Equal
    /// priorities fall back to the longer keyword, then category order.
    pub fn code(&self, text: &str) -> Option<AwardCategory> {
        let haystack = normalize_name(text);
        if haystack.is_empty() {
            return None;
        }
        self.entries
            .iter()
            .filter(|e| haystack.contains(&e.keyword))
            .max_by(|a, b| {
                a.priority
                    .cmp(&b.priority)
                    .then(a.keyword.len().cmp(&b.keyword.len()))
                    .then(b.category.cmp(&a.category))
            })
            .map(|e| e.category)
    }
}

/// Award counts per category across an applicant's text fields.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwardCounts(pub BTreeMap<AwardCategory, u32>);

impl AwardCounts {
    pub fn get(&self, category: AwardCategory) -> u32 {
        self.0.get(&category).copied().unwrap_or(0)
    }
}

pub fn code_awards<'a>(texts: impl IntoIterator<Item = &'a str>, lexicon: &AwardLexicon) -> AwardCounts {
    let mut counts: BTreeMap<AwardCategory, u32> = AwardCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for category in texts.into_iter().filter_map(|t| lexicon.code(t)) {
        *counts.entry(category).or_default() += 1;
    }
    AwardCounts(counts)
}

fn read_table(text: &str, width: usize) -> Result<Vec<Vec<String>>, DeriveError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DeriveError::Table {
            line: i + 2,
            reason: e.to_string(),
        })?;
        if record.len() != width {
            return Err(DeriveError::Table {
                line: i + 2,
                reason: format!("expected {width} fields, found {}", record.len()),
            });
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn levels(cells: &[&str]) -> Vec<EducationLevel> {
        parse_education_levels(cells.iter().copied()).unwrap()
    }

    #[test]
    fn first_generation_rule() {
        assert_eq!(
            derive_first_generation(&levels(&["high school", "some college"])),
            Some(true)
        );
        assert_eq!(
            derive_first_generation(&levels(&["master's", "high school"])),
            Some(false)
        );
        assert_eq!(derive_first_generation(&levels(&["Bachelor's"])), Some(false));
        assert_eq!(derive_first_generation(&[]), None);
    }

    #[test]
    fn unknown_education_level() {
        let err = parse_education_levels(["trade school"]).unwrap_err();
        assert_eq!(err, DeriveError::UnknownEducationLevel("trade school".into()));
    }

    #[test]
    fn work_experience_examples() {
        let one = [WorkPeriod::new(date("2015-06-01"), date("2019-06-01"))];
        assert_eq!(derive_work_experience(&one).unwrap(), 4.0);
        assert_eq!(derive_work_experience(&[]).unwrap(), 0.0);
        // 2014-06-01 -> 2016-01-01 is 579 days; 579 / 365.25 = 1.585...
        let two = [
            WorkPeriod::new(date("2015-01-01"), date("2016-01-01")),
            WorkPeriod::new(date("2014-06-01"), date("2015-03-01")),
        ];
        assert_eq!(derive_work_experience(&two).unwrap(), 1.6);
    }

    #[test]
    fn reversed_period_is_invalid() {
        let bad = [WorkPeriod::new(date("2019-01-01"), date("2018-01-01"))];
        assert!(matches!(
            derive_work_experience(&bad),
            Err(DeriveError::InvalidPeriod { .. })
        ));
    }

    #[test]
    fn work_history_text() {
        let periods = parse_work_history("2015-01-01/2016-01-01; 2014-06-01/2015-03-01").unwrap();
        assert_eq!(periods.len(), 2);
        assert!(parse_work_history("").unwrap().is_empty());
        assert!(parse_work_history("2015-01-01").is_err());
    }

    #[test]
    fn tier_lookup_normalizes() {
        let table = TierTable::from_csv("name,tier\nstate u,4\nPinecrest College,2\n").unwrap();
        assert_eq!(map_institution_tier("State U", &table), Some(4));
        assert_eq!(map_institution_tier("  State U ", &table), Some(4));
        assert_eq!(map_institution_tier("pinecrest   college", &table), Some(2));
        assert_eq!(map_institution_tier("Unlisted College", &table), None);
        assert!(TierTable::from_csv("name,tier\nX,5\n").is_err());
    }

    #[test]
    fn award_coding_examples() {
        let lexicon = AwardLexicon::from_csv("keyword,category,priority\nscholarship,scholastic,1\n").unwrap();
        let counts = code_awards(["Dean's Scholarship", "", ""], &lexicon);
        assert_eq!(counts.get(AwardCategory::Scholastic), 1);
        assert_eq!(counts.0.values().sum::<u32>(), 1);

        let empty = code_awards(["", "", ""], &lexicon);
        assert!(empty.0.values().all(|c| *c == 0));

        let lexicon = AwardLexicon::from_csv("keyword,category,priority\nresearch,research,2\nmusic,arts,1\n").unwrap();
        let counts = code_awards(["research grant for music"], &lexicon);
        assert_eq!(counts.get(AwardCategory::Research), 1);
        assert_eq!(counts.get(AwardCategory::Arts), 0);
    }

    #[test]
    fn lexicon_rejects_duplicates_and_bad_categories() {
        assert!(AwardLexicon::from_csv("keyword,category,priority\nx,arts,1\nX,service,1\n").is_err());
        assert!(AwardLexicon::from_csv("keyword,category,priority\nx,sports,1\n").is_err());
    }

    #[test]
    fn bundled_tables_load() {
        assert_eq!(TierTable::from_csv(crate::fixtures::TIERS).unwrap().len(), 8);
        let lexicon = AwardLexicon::from_csv(crate::fixtures::AWARDS).unwrap();
        assert_eq!(
            lexicon.code("Regional poetry contest"),
            Some(AwardCategory::Competition)
        );
    }

    proptest! {
        #[test]
        fn work_experience_ignores_order(
            raw in proptest::collection::vec((0i64..8000, 0i64..3000), 0..6),
            seed in any::<u64>(),
        ) {
            let base = date("2000-01-01");
            let periods: Vec<WorkPeriod> = raw
                .iter()
                .map(|(s, len)| {
                    let start = base + chrono::Duration::days(*s);
                    WorkPeriod::new(start, start + chrono::Duration::days(*len))
                })
                .collect();
            let mut shuffled = periods.clone();
            let k = if shuffled.is_empty() { 0 } else { (seed as usize) % shuffled.len() };
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(
                derive_work_experience(&periods).unwrap(),
                derive_work_experience(&shuffled).unwrap()
            );
        }
    }
}
