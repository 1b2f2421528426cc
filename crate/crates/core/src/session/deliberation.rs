//! The deliberation flat file: one row per feature with every participant's
//! decision, unsure flag and reason. The CSV and JSON forms carry the same
//! content and convert into each other losslessly.

use serde::{Deserialize, Serialize};

use super::{Inclusion, SessionError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliberationEntry {
    pub participant: String,
    pub decision: Inclusion,
    pub unsure: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliberationRow {
    pub feature: String,
    pub selections: Vec<DeliberationEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliberationFile {
    pub participants: Vec<String>,
    pub features: Vec<DeliberationRow>,
}

fn malformed(reason: impl Into<String>) -> SessionError {
    SessionError::MalformedDeliberationFile(reason.into())
}

impl DeliberationFile {
    fn validate(&self) -> Result<(), SessionError> {
        for row in &self.features {
            let ids: Vec<&str> = row.selections.iter().map(|e| e.participant.as_str()).collect();
            if ids != self.participants.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(malformed(format!(
                    "row `{}` does not list participants in header order",
                    row.feature
                )));
            }
        }
        Ok(())
    }

    pub fn column_count(&self) -> usize {
        1 + 3 * self.participants.len()
    }

    /// RFC 4180 CSV with CRLF line endings.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        let mut header = vec!["feature".to_string()];
        for p in &self.participants {
            header.push(format!("{p}_decision"));
            header.push(format!("{p}_unsure"));
            header.push(format!("{p}_reason"));
        }
        writer.write_record(&header).expect("in-memory write");
        for row in &self.features {
            let mut record = vec![row.feature.clone()];
            for entry in &row.selections {
                record.push(entry.decision.as_str().to_string());
                record.push(entry.unsure.to_string());
                record.push(entry.reason.clone());
            }
            writer.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("file serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let file: DeliberationFile = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn from_csv(text: &str) -> Result<Self, SessionError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
        if header.get(0) != Some("feature") || (header.len() - 1) % 3 != 0 {
            return Err(malformed(
                "header must be `feature` followed by decision/unsure/reason triples",
            ));
        }
        let mut participants = Vec::new();
        for triple in header.iter().skip(1).collect::<Vec<_>>().chunks(3) {
            let pid = triple[0]
                .strip_suffix("_decision")
                .ok_or_else(|| malformed(format!("expected a `_decision` column, found `{}`", triple[0])))?;
            if triple[1] != format!("{pid}_unsure") || triple[2] != format!("{pid}_reason") {
                return Err(malformed(format!("columns for `{pid}` are out of order")));
            }
            participants.push(pid.to_string());
        }
        let mut features = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| malformed(e.to_string()))?;
            let mut selections = Vec::with_capacity(participants.len());
            for (k, pid) in participants.iter().enumerate() {
                let decision = Inclusion::parse(&record[1 + 3 * k])
                    .ok_or_else(|| malformed(format!("bad decision `{}`", &record[1 + 3 * k])))?;
                let unsure = match &record[2 + 3 * k] {
                    "true" => true,
                    "false" => false,
                    other => return Err(malformed(format!("bad unsure flag `{other}`"))),
                };
                selections.push(DeliberationEntry {
                    participant: pid.clone(),
                    decision,
                    unsure,
                    reason: record[3 + 3 * k].to_string(),
                });
            }
            features.push(DeliberationRow {
                feature: record[0].to_string(),
                selections,
            });
        }
        Ok(DeliberationFile { participants, features })
    }
}
