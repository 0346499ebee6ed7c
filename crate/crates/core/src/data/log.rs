//! Delimited interaction logs and their vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TipsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Column {
    User,
    Item,
    Rating,
    Timestamp,
    Ignore,
}

/// Column layout and delimiter of a log file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogFormat {
    pub delimiter: String,
    pub columns: Vec<Column>,
    #[serde(default)]
    pub header: bool,
}

impl LogFormat {
    /// MovieLens `ratings.dat`: `user::item::rating::timestamp`.
    pub fn movielens() -> Self {
        LogFormat {
            delimiter: "::".into(),
            columns: vec![Column::User, Column::Item, Column::Rating, Column::Timestamp],
            header: false,
        }
    }

    pub fn csv() -> Self {
        LogFormat {
            delimiter: ",".into(),
            columns: vec![Column::User, Column::Item, Column::Timestamp],
            header: false,
        }
    }

    pub fn tsv() -> Self {
        LogFormat {
            delimiter: "\t".into(),
            columns: vec![Column::User, Column::Item, Column::Timestamp],
            header: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delimiter.is_empty() {
            return Err(TipsError::Config("empty delimiter".into()));
        }
        for needed in [Column::User, Column::Item, Column::Timestamp] {
            let n = self.columns.iter().filter(|c| **c == needed).count();
            if n != 1 {
                return Err(TipsError::Config(format!(
                    "log format needs exactly one {needed:?} column, found {n}"
                )));
            }
        }
        Ok(())
    }

    fn position(&self, col: Column) -> usize {
        self.columns.iter().position(|c| *c == col).unwrap_or(0)
    }
}

/// Interactions with contiguous 0-based user/item indices and per-user
/// chronological sequences (ties keep file order).
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    sequences: Vec<Vec<usize>>,
    duplicates_dropped: usize,
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` records in file order.
    pub fn from_records<U, I>(records: impl IntoIterator<Item = (U, I, i64)>) -> Result<Self>
    where
        U: AsRef<str>,
        I: AsRef<str>,
    {
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut seen = HashSet::new();
        let mut interactions = Vec::new();
        let mut duplicates = 0;
        for (u, i, t) in records {
            if t < 0 {
                return Err(TipsError::DataCorruption(format!("negative timestamp {t}")));
            }
            let user = *user_index.entry(u.as_ref().to_string()).or_insert_with(|| {
                user_ids.push(u.as_ref().to_string());
                user_ids.len() - 1
            });
            let item = *item_index.entry(i.as_ref().to_string()).or_insert_with(|| {
                item_ids.push(i.as_ref().to_string());
                item_ids.len() - 1
            });
            let rec = Interaction {
                user,
                item,
                timestamp: t,
            };
            if !seen.insert(rec) {
                duplicates += 1;
                continue;
            }
            interactions.push(rec);
        }
        if duplicates > 0 {
            warn!("dropped {duplicates} duplicate (user, item, timestamp) rows");
        }
        let mut sequences = vec![Vec::new(); user_ids.len()];
        for (idx, rec) in interactions.iter().enumerate() {
            sequences[rec.user].push(idx);
        }
        for seq in &mut sequences {
            // stable: ties keep original line order
            seq.sort_by_key(|&idx| interactions[idx].timestamp);
        }
        Ok(InteractionLog {
            interactions,
            user_ids,
            item_ids,
            sequences,
            duplicates_dropped: duplicates,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_ids.iter().position(|s| s == raw)
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_ids.iter().position(|s| s == raw)
    }

    /// The user's interactions in chronological order.
    pub fn sequence(&self, user: usize) -> impl Iterator<Item = &Interaction> + '_ {
        self.sequences[user].iter().map(move |&i| &self.interactions[i])
    }

    pub fn sequence_len(&self, user: usize) -> usize {
        self.sequences[user].len()
    }

    pub fn time_range(&self) -> Option<(i64, i64)> {
        let min = self.interactions.iter().map(|r| r.timestamp).min()?;
        let max = self.interactions.iter().map(|r| r.timestamp).max()?;
        Some((min, max))
    }

    pub fn stats(&self) -> DatasetStats {
        let (first, last) = self.time_range().unwrap_or((0, 0));
        DatasetStats {
            n_users: self.n_users(),
            n_items: self.n_items(),
            n_interactions: self.len(),
            first_timestamp: first,
            last_timestamp: last,
            time_span_months: (last - first) as f64 / SECONDS_PER_MONTH,
            duplicates_dropped: self.duplicates_dropped,
        }
    }

    /// Writes the log (file order, raw ids) as `user<delim>item<delim>timestamp`.
    pub fn write(&self, path: &Path, delimiter: &str) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 24);
        for rec in &self.interactions {
            out.push_str(&self.user_ids[rec.user]);
            out.push_str(delimiter);
            out.push_str(&self.item_ids[rec.item]);
            out.push_str(delimiter);
            out.push_str(&rec.timestamp.to_string());
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| TipsError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| TipsError::io(path, e))
    }
}

/// Mean Gregorian month.
pub const SECONDS_PER_MONTH: f64 = 365.2425 / 12.0 * 86_400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub first_timestamp: i64,
    pub last_timestamp: i64,
    pub time_span_months: f64,
    pub duplicates_dropped: usize,
}

pub fn load_log(path: &Path, format: &LogFormat) -> Result<InteractionLog> {
    format.validate()?;
    let text = fs::read_to_string(path).map_err(|e| TipsError::io(path, e))?;
    let (pu, pi, pt) = (
        format.position(Column::User),
        format.position(Column::Item),
        format.position(Column::Timestamp),
    );
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && format.header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).collect();
        if fields.len() != format.columns.len() {
            return Err(TipsError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!(
                    "expected {} fields, found {}",
                    format.columns.len(),
                    fields.len()
                ),
            });
        }
        let ts_raw = fields[pt].trim();
        let ts: i64 = ts_raw.parse().map_err(|_| TipsError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("timestamp {ts_raw:?} is not numeric"),
        })?;
        if ts < 0 {
            return Err(TipsError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("negative timestamp {ts}"),
            });
        }
        let (u, i) = (fields[pu].trim(), fields[pi].trim());
        if u.is_empty() || i.is_empty() {
            return Err(TipsError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "empty user or item id".into(),
            });
        }
        records.push((u.to_string(), i.to_string(), ts));
    }
    InteractionLog::from_records(records)
}
