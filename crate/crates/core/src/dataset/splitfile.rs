//! Plain-text persistence for domain splits.
//!
//! One tab-separated line per assignment: external user id, external item id,
//! role (`train`/`val`/`test`), domain (`S`/`T`). A leading comment records
//! the split seed. Dropped users have no lines, so a reloaded split lists
//! none.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DataError, Domain, DomainSplit, InteractionDataset, UserAssignment};

pub fn write_split(path: &Path, ds: &InteractionDataset, split: &DomainSplit) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&format!("# seed={}\n", split.seed));
    for (&u, a) in &split.users {
        let dom = match a.domain {
            Domain::Source => "S",
            Domain::Target => "T",
        };
        let mut push = |item: usize, role: &str| {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                ds.user_ids[u], ds.item_ids[item], role, dom
            ));
        };
        for &i in &a.train {
            push(i, "train");
        }
        if let Some(i) = a.val {
            push(i, "val");
        }
        if let Some(i) = a.test {
            push(i, "test");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_split(path: &Path, ds: &InteractionDataset) -> Result<DomainSplit, DataError> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| DataError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };

    let user_index: BTreeMap<&str, usize> =
        ds.user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let item_index: BTreeMap<&str, usize> =
        ds.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut seed = None;
    let mut users: BTreeMap<usize, UserAssignment> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("seed=") {
                seed = Some(
                    v.parse::<u64>().map_err(|_| err(lineno, format!("bad seed {v:?}")))?,
                );
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let u = *user_index
            .get(fields[0])
            .ok_or_else(|| err(lineno, format!("unknown user id {:?}", fields[0])))?;
        let i = *item_index
            .get(fields[1])
            .ok_or_else(|| err(lineno, format!("unknown item id {:?}", fields[1])))?;
        let domain = match fields[3] {
            "S" => Domain::Source,
            "T" => Domain::Target,
            other => return Err(err(lineno, format!("unknown domain {other:?}"))),
        };
        let entry = users.entry(u).or_insert_with(|| UserAssignment {
            domain,
            train: Vec::new(),
            val: None,
            test: None,
        });
        if entry.domain != domain {
            return Err(err(lineno, format!("user {:?} listed in both domains", fields[0])));
        }
        match fields[2] {
            "train" => entry.train.push(i),
            "val" => {
                if entry.val.replace(i).is_some() {
                    return Err(err(lineno, format!("user {:?} has two val items", fields[0])));
                }
            }
            "test" => {
                if entry.test.replace(i).is_some() {
                    return Err(err(lineno, format!("user {:?} has two test items", fields[0])));
                }
            }
            other => return Err(err(lineno, format!("unknown role {other:?}"))),
        }
    }
    let seed = seed.ok_or_else(|| err(1, "missing '# seed=' header".into()))?;
    for a in users.values_mut() {
        a.train.sort_unstable();
    }
    Ok(DomainSplit { seed, users, dropped_users: Vec::new() })
}
