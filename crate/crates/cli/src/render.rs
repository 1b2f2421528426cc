//! Output formatting: compact JSON (the service payload bytes), CSV, and
//! aligned plain-text tables.

use std::io::{self, Write};

use clap::ValueEnum;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        self.rows.push(row);
    }
}

/// What a command produced. `payload` is always the service payload;
/// `table` and `notes` only shape the text and CSV forms.
#[derive(Debug, Clone, Default)]
pub struct Output {
    pub payload: Value,
    pub notes: Vec<String>,
    pub table: Option<Table>,
    /// Pre-rendered text used for CSV and table output (the deliberation
    /// export).
    pub raw: Option<String>,
}

impl Output {
    pub fn new(payload: Value) -> Self {
        Output {
            payload,
            ..Output::default()
        }
    }

    pub fn table(mut self, table: Table) -> Self {
        self.table = Some(table);
        self
    }

    pub fn note(mut self, line: impl Into<String>) -> Self {
        self.notes.push(line.into());
        self
    }
}

fn exact(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            items.iter().map(exact).collect::<Vec<_>>().join("; ")
        }
        other => other.to_string(),
    }
}

fn short(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().unwrap_or(f64::NAN);
            let s = format!("{f:.4}");
            let s = s.trim_end_matches('0').trim_end_matches('.');
            if s == "-0" {
                "0".into()
            } else {
                s.to_string()
            }
        }
        other => exact(other),
    }
}

/// Scalars of a JSON object as `(dotted.key, value)` pairs.
pub fn flatten(v: &Value) -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

fn write_csv(out: &mut dyn Write, headers: &[String], rows: &[Vec<String>]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers).map_err(io::Error::other)?;
    for row in rows {
        w.write_record(row).map_err(io::Error::other)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    out.write_all(&bytes)
}

fn write_aligned(out: &mut dyn Write, headers: &[String], rows: &[Vec<String>]) -> io::Result<()> {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            let w = cell.replace('\n', " ").chars().count();
            if i < widths.len() {
                widths[i] = widths[i].max(w);
            }
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{:<w$}", c.replace('\n', " "), w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(out, "{}", line(headers))?;
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    writeln!(out, "{}", line(&rule))?;
    for row in rows {
        writeln!(out, "{}", line(row))?;
    }
    Ok(())
}

pub fn emit(out: &mut dyn Write, format: Format, output: &Output) -> io::Result<()> {
    match format {
        Format::Json => writeln!(out, "{}", deliberate_server::payload_json(&output.payload)),
        Format::Csv => {
            if let Some(raw) = &output.raw {
                return out.write_all(raw.as_bytes());
            }
            match &output.table {
                Some(t) => {
                    let rows: Vec<Vec<String>> = t.rows.iter().map(|r| r.iter().map(exact).collect()).collect();
                    write_csv(out, &t.headers, &rows)
                }
                None => {
                    let rows: Vec<Vec<String>> = flatten(&output.payload)
                        .into_iter()
                        .map(|(k, v)| vec![k, exact(&v)])
                        .collect();
                    write_csv(out, &["key".into(), "value".into()], &rows)
                }
            }
        }
        Format::Table => {
            if let Some(raw) = &output.raw {
                return out.write_all(raw.as_bytes());
            }
            for note in &output.notes {
                writeln!(out, "{note}")?;
            }
            match &output.table {
                Some(t) => {
                    if !output.notes.is_empty() {
                        writeln!(out)?;
                    }
                    let rows: Vec<Vec<String>> = t.rows.iter().map(|r| r.iter().map(short).collect()).collect();
                    write_aligned(out, &t.headers, &rows)
                }
                None if output.notes.is_empty() => {
                    let pairs = flatten(&output.payload);
                    let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                    for (k, v) in pairs {
                        writeln!(out, "{k:<width$}  {}", short(&v))?;
                    }
                    Ok(())
                }
                None => Ok(()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn render(format: Format, output: &Output) -> String {
        let mut buf = Vec::new();
        emit(&mut buf, format, output).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn formats() {
        let mut t = Table::new(&["group", "rate"]);
        t.push(vec![json!("A, B"), json!(0.123456)]);
        let out = Output::new(json!({"x": 1})).table(t);
        assert_eq!(render(Format::Json, &out), "{\"x\":1}\n");
        assert_eq!(render(Format::Csv, &out), "group,rate\n\"A, B\",0.123456\n");
        assert_eq!(
            render(Format::Table, &out),
            "group  rate\n-----  ------\nA, B   0.1235\n"
        );
    }

    #[test]
    fn key_value_fallback() {
        let out = Output::new(json!({"a": {"b": 2}, "c": "x", "d": [1, 2]}));
        assert_eq!(render(Format::Table, &out), "a.b  2\nc    x\nd    1; 2\n");
        assert_eq!(render(Format::Csv, &out), "key,value\na.b,2\nc,x\nd,1; 2\n");
    }
}
