//! Parsers for rating and user-attribute files.
//!
//! Two layouts each: the `::`-delimited MovieLens-1M layout and plain
//! tab-separated values. Any observed rating counts as a positive; duplicate
//! pairs collapse to one interaction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DataError, InteractionDataset};

/// Layout of an interaction file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatingsFormat {
    /// `UserID::MovieID::Rating::Timestamp`
    Ml1m,
    /// `user<TAB>item<TAB>value`; the value column is optional and ignored.
    Tsv { has_header: bool },
}

/// Layout of a user-attribute file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensitiveFormat {
    /// `UserID::Gender::Age::Occupation::Zip`
    Ml1mUsers,
    /// `user<TAB>token`
    Tsv { has_header: bool },
}

/// Maps attribute tokens onto the binary sensitive label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTable {
    pub one: String,
    pub zero: String,
}

impl TokenTable {
    /// MovieLens gender coding: F -> 1, M -> 0.
    pub fn ml1m_gender() -> Self {
        TokenTable { one: "F".into(), zero: "M".into() }
    }

    pub fn binary() -> Self {
        TokenTable { one: "1".into(), zero: "0".into() }
    }

    fn decode(&self, token: &str) -> Option<u8> {
        if token == self.one {
            Some(1)
        } else if token == self.zero {
            Some(0)
        } else {
            None
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Reads an interaction file into a dense dataset. External ids map to dense
/// indices in first-appearance order; the sensitive vector is zero-filled
/// until [`load_sensitive`] labels it.
pub fn load_interactions(path: &Path, format: RatingsFormat) -> Result<InteractionDataset, DataError> {
    let text = fs::read_to_string(path)?;
    let mut user_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut item_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut pairs = Vec::new();

    let skip_first = matches!(format, RatingsFormat::Tsv { has_header: true });
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() || (idx == 0 && skip_first) {
            continue;
        }
        let (user, item) = match format {
            RatingsFormat::Ml1m => {
                let fields: Vec<&str> = raw.split("::").collect();
                if fields.len() != 4 {
                    return Err(parse_err(path, lineno, format!("expected 4 '::' fields, got {}", fields.len())));
                }
                let rating: i64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad rating {:?}", fields[2])))?;
                if !(1..=5).contains(&rating) {
                    return Err(parse_err(path, lineno, format!("rating {rating} outside 1..=5")));
                }
                (fields[0], fields[1])
            }
            RatingsFormat::Tsv { .. } => {
                let fields: Vec<&str> = raw.split('\t').collect();
                if fields.len() < 2 {
                    return Err(parse_err(path, lineno, "expected at least 2 tab-separated fields"));
                }
                (fields[0], fields[1])
            }
        };
        let next_u = user_index.len();
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            user_ids.push(user.to_string());
            next_u
        });
        let next_i = item_index.len();
        let i = *item_index.entry(item.to_string()).or_insert_with(|| {
            item_ids.push(item.to_string());
            next_i
        });
        pairs.push((u, i));
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyDataset(path.display().to_string()));
    }
    let n = user_ids.len();
    InteractionDataset::from_parts(user_ids, item_ids, &pairs, vec![0; n])
}

/// Reads sensitive labels for every user of `ds`. Unknown tokens are parse
/// errors; dataset users absent from the file are a coverage error.
pub fn load_sensitive(
    ds: &InteractionDataset,
    path: &Path,
    format: SensitiveFormat,
    tokens: &TokenTable,
) -> Result<Vec<u8>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut by_external: BTreeMap<&str, u8> = BTreeMap::new();

    let skip_first = matches!(format, SensitiveFormat::Tsv { has_header: true });
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() || (idx == 0 && skip_first) {
            continue;
        }
        let (user, token) = match format {
            SensitiveFormat::Ml1mUsers => {
                let fields: Vec<&str> = raw.split("::").collect();
                if fields.len() != 5 {
                    return Err(parse_err(path, lineno, format!("expected 5 '::' fields, got {}", fields.len())));
                }
                (fields[0], fields[1])
            }
            SensitiveFormat::Tsv { .. } => {
                let fields: Vec<&str> = raw.split('\t').collect();
                if fields.len() < 2 {
                    return Err(parse_err(path, lineno, "expected 2 tab-separated fields"));
                }
                (fields[0], fields[1])
            }
        };
        let label = tokens
            .decode(token)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown attribute token {token:?}")))?;
        by_external.insert(user, label);
    }

    let mut labels = Vec::with_capacity(ds.n_users);
    let mut missing = Vec::new();
    for ext in &ds.user_ids {
        match by_external.get(ext.as_str()) {
            Some(&l) => labels.push(l),
            None => missing.push(ext.clone()),
        }
    }
    if !missing.is_empty() {
        missing.truncate(10);
        return Err(DataError::Coverage(missing));
    }
    Ok(labels)
}

/// Loads interactions and attaches sensitive labels in one step.
pub fn load_dataset(
    ratings: &Path,
    ratings_format: RatingsFormat,
    attributes: &Path,
    attr_format: SensitiveFormat,
    tokens: &TokenTable,
) -> Result<InteractionDataset, DataError> {
    let mut ds = load_interactions(ratings, ratings_format)?;
    ds.sensitive = load_sensitive(&ds, attributes, attr_format, tokens)?;
    Ok(ds)
}
