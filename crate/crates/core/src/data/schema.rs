//! Delimited-text layouts for Criteo, Avazu and generated datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PhnError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub field_count: usize,
    /// Integer-valued fields come first among the feature columns.
    pub integer_field_count: usize,
    pub categorical_field_count: usize,
    pub delimiter: char,
    pub has_header: bool,
    pub label_column: usize,
}

impl Schema {
    /// Tab-separated, no header: label, 13 integer fields, 26 hashed categoricals.
    pub fn criteo() -> Self {
        Self {
            name: "criteo".into(),
            field_count: 39,
            integer_field_count: 13,
            categorical_field_count: 26,
            delimiter: '\t',
            has_header: false,
            label_column: 0,
        }
    }

    /// Comma-separated with a header; the `click` column is the label and the
    /// other 23 columns (including `id`) are categorical fields.
    pub fn avazu() -> Self {
        Self {
            name: "avazu".into(),
            field_count: 23,
            integer_field_count: 0,
            categorical_field_count: 23,
            delimiter: ',',
            has_header: true,
            label_column: 1,
        }
    }

    /// Layout written by the synthetic generator: label then one token per field.
    pub fn synthetic(field_count: usize) -> Self {
        Self {
            name: "synthetic".into(),
            field_count,
            integer_field_count: 0,
            categorical_field_count: field_count,
            delimiter: '\t',
            has_header: false,
            label_column: 0,
        }
    }

    pub fn by_name(name: &str, synthetic_fields: usize) -> Result<Self> {
        match name {
            "criteo" => Ok(Self::criteo()),
            "avazu" => Ok(Self::avazu()),
            "synthetic" => Ok(Self::synthetic(synthetic_fields)),
            other => Err(PhnError::config(
                "format",
                format!("unknown dataset format `{other}` (criteo, avazu, synthetic)"),
            )),
        }
    }

    pub fn column_count(&self) -> usize {
        self.field_count + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_count == 0 {
            return Err(PhnError::config("field_count", "must be positive"));
        }
        if self.integer_field_count + self.categorical_field_count != self.field_count {
            return Err(PhnError::config(
                "field_count",
                "must equal integer + categorical field counts",
            ));
        }
        if self.label_column > self.field_count {
            return Err(PhnError::config("label_column", "outside the column range"));
        }
        Ok(())
    }

    pub fn is_integer_field(&self, field: usize) -> bool {
        field < self.integer_field_count
    }
}

/// One parsed line: binary label plus one token per field. Missing values are
/// kept as empty strings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub label: u8,
    pub tokens: Vec<String>,
}

impl RawRecord {
    pub fn is_missing(&self, field: usize) -> bool {
        self.tokens[field].is_empty()
    }
}

/// Parses one line (without its newline). `line_no` is 1-based and only used
/// in error messages.
pub fn parse_line(line: &str, line_no: usize, schema: &Schema) -> Result<RawRecord> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let columns: Vec<&str> = line.split(schema.delimiter).collect();
    if columns.len() != schema.column_count() {
        return Err(PhnError::Parse {
            line: line_no,
            reason: format!("expected {} columns, found {}", schema.column_count(), columns.len()),
        });
    }
    let label = match columns[schema.label_column] {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(PhnError::Parse {
                line: line_no,
                reason: format!("label must be 0 or 1, found `{other}`"),
            })
        }
    };
    let tokens = columns
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != schema.label_column)
        .map(|(_, c)| c.to_string())
        .collect();
    Ok(RawRecord { label, tokens })
}

/// Inverse of [`parse_line`].
pub fn format_line(record: &RawRecord, schema: &Schema) -> String {
    let mut columns: Vec<&str> = record.tokens.iter().map(String::as_str).collect();
    let label = if record.label == 1 { "1" } else { "0" };
    columns.insert(schema.label_column, label);
    let mut delim = [0u8; 4];
    columns.join(schema.delimiter.encode_utf8(&mut delim))
}

/// A parsed file: optional header line plus records, in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pub schema: Schema,
    pub header: Option<String>,
    pub records: Vec<RawRecord>,
}

impl RawDataset {
    pub fn parse<R: BufRead>(reader: R, schema: &Schema) -> Result<Self> {
        schema.validate()?;
        let mut schema = schema.clone();
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| PhnError::io(format!("reading line {line_no}"), e))?;
            if i == 0 && schema.has_header {
                schema.label_column = locate_label(&line, &schema)?;
                header = Some(line);
                continue;
            }
            if line.is_empty() {
                continue;
            }
            records.push(parse_line(&line, line_no, &schema)?);
        }
        Ok(Self {
            schema,
            header,
            records,
        })
    }

    pub fn read(path: &Path, schema: &Schema) -> Result<Self> {
        let file = File::open(path).map_err(|e| PhnError::io(format!("opening {}", path.display()), e))?;
        Self::parse(BufReader::new(file), schema)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let ctx = |e| PhnError::io("writing dataset", e);
        if let Some(h) = &self.header {
            writeln!(out, "{h}").map_err(ctx)?;
        }
        for r in &self.records {
            writeln!(out, "{}", format_line(r, &self.schema)).map_err(ctx)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PhnError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()
            .map_err(|e| PhnError::io(format!("flushing {}", path.display()), e))
    }
}

fn locate_label(header: &str, schema: &Schema) -> Result<usize> {
    let names: Vec<&str> = header
        .strip_suffix('\r')
        .unwrap_or(header)
        .split(schema.delimiter)
        .collect();
    if names.len() != schema.column_count() {
        return Err(PhnError::Parse {
            line: 1,
            reason: format!("header has {} columns, expected {}", names.len(), schema.column_count()),
        });
    }
    match names.iter().position(|n| *n == "click") {
        Some(i) => Ok(i),
        None if schema.label_column < names.len() => Ok(schema.label_column),
        None => Err(PhnError::Parse {
            line: 1,
            reason: "header has no label column".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn criteo_line() -> String {
        let mut cols = vec!["1".to_string()];
        cols.extend((0..13).map(|i| (i * 3).to_string()));
        cols.extend((0..26).map(|i| format!("{:08x}", 0x1000 + i)));
        cols.join("\t")
    }

    #[test]
    fn table_schemas_have_expected_field_counts() {
        assert_eq!(Schema::criteo().field_count, 39);
        assert_eq!(Schema::avazu().field_count, 23);
        Schema::criteo().validate().unwrap();
        Schema::avazu().validate().unwrap();
    }

    #[test]
    fn criteo_line_splits_into_integer_and_categorical_tokens() {
        let s = Schema::criteo();
        let r = parse_line(&criteo_line(), 1, &s).unwrap();
        assert_eq!(r.label, 1);
        assert_eq!(r.tokens.len(), 39);
        assert_eq!((0..39).filter(|f| s.is_integer_field(*f)).count(), 13);
        assert_eq!(format_line(&r, &s), criteo_line());
    }

    #[test]
    fn missing_token_is_preserved() {
        let s = Schema::criteo();
        let line = criteo_line().replacen("00001005", "", 1);
        let r = parse_line(&line, 3, &s).unwrap();
        assert!(r.is_missing(13 + 5));
        assert_eq!(format_line(&r, &s), line);
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let s = Schema::criteo();
        let err = parse_line("1\ta\tb", 17, &s).unwrap_err();
        assert!(matches!(err, PhnError::Parse { line: 17, .. }), "{err}");
    }

    #[test]
    fn non_binary_label_is_rejected() {
        let s = Schema::criteo();
        let line = criteo_line().replacen('1', "2", 1);
        assert!(matches!(parse_line(&line, 9, &s), Err(PhnError::Parse { line: 9, .. })));
    }

    #[test]
    fn avazu_label_column_found_from_header() {
        let s = Schema::avazu();
        let mut names: Vec<String> = (0..23).map(|i| format!("c{i}")).collect();
        names.insert(4, "click".into());
        let mut row: Vec<String> = (0..23).map(|i| format!("v{i}")).collect();
        row.insert(4, "0".into());
        let text = format!("{}\n{}\n", names.join(","), row.join(","));
        let ds = RawDataset::parse(text.as_bytes(), &s).unwrap();
        assert_eq!(ds.schema.label_column, 4);
        assert_eq!(ds.records[0].tokens.len(), 23);
        let mut out = Vec::new();
        ds.write_to(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
