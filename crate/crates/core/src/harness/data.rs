//! Interaction logs, 5-core filtering, sliding-window instances and the
//! chronological split.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::catalog::{Catalog, ItemId, TokenId, BOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    #[serde(rename = "user_id")]
    pub user: usize,
    #[serde(rename = "item_id")]
    pub item: ItemId,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionLog {
    pub rows: Vec<Interaction>,
}

impl InteractionLog {
    pub fn read_csv(path: &Path) -> Result<Self, HarnessError> {
        let err = |e: &dyn std::fmt::Display| HarnessError::Validation(format!("{}: {e}", path.display()));
        let mut rdr = csv::Reader::from_path(path).map_err(|e| err(&e))?;
        let headers = rdr.headers().map_err(|e| err(&e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["user_id", "item_id", "timestamp"] {
            return Err(err(&"expected header user_id,item_id,timestamp"));
        }
        let rows = rdr
            .deserialize()
            .collect::<Result<Vec<Interaction>, _>>()
            .map_err(|e| err(&e))?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let err = |e: &dyn std::fmt::Display| HarnessError::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }

    /// Per-user histories ordered by (timestamp, original row order).
    pub fn sequences(&self) -> BTreeMap<usize, Vec<(ItemId, i64)>> {
        let mut by_user: BTreeMap<usize, Vec<(ItemId, i64)>> = BTreeMap::new();
        for r in &self.rows {
            by_user.entry(r.user).or_default().push((r.item, r.timestamp));
        }
        for seq in by_user.values_mut() {
            seq.sort_by_key(|e| e.1);
        }
        by_user
    }
}

/// Iteratively drops users and items with fewer than `k` interactions.
pub fn k_core(log: &InteractionLog, k: usize) -> InteractionLog {
    let mut rows = log.rows.clone();
    loop {
        let mut users: HashMap<usize, usize> = HashMap::new();
        let mut items: HashMap<ItemId, usize> = HashMap::new();
        for r in &rows {
            *users.entry(r.user).or_default() += 1;
            *items.entry(r.item).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| users[&r.user] >= k && items[&r.item] >= k);
        if rows.len() == before {
            return InteractionLog { rows };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub user: usize,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub timestamp: i64,
    pub split: Split,
}

impl Instance {
    /// BOS, then each history title followed by SEP.
    pub fn prompt(&self, catalog: &Catalog) -> Vec<TokenId> {
        let mut p = vec![BOS];
        for &i in &self.history {
            p.extend_from_slice(catalog.item(i).content());
            p.push(SEP);
        }
        p
    }

    /// Target title followed by EOS.
    pub fn target_tokens(&self, catalog: &Catalog) -> Vec<TokenId> {
        catalog.item(self.target).tokens.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub catalog_digest: String,
    pub window: usize,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Longest prompt plus target over all instances, in tokens.
    pub fn max_context(&self, catalog: &Catalog) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|i| i.prompt(catalog).len() + i.target_tokens(catalog).len())
            .max()
            .unwrap_or(1)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string(self).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))
    }
}

/// Sliding windows of `window` items (history `window - 1`, one target) per
/// user, then a global chronological 8:1:1 split on target timestamps.
pub fn make_instances(log: &InteractionLog, window: usize, catalog: &Catalog) -> Result<Dataset, HarnessError> {
    if log.rows.is_empty() {
        return Err(HarnessError::Validation("interaction log is empty after filtering".into()));
    }
    if let Some(r) = log.rows.iter().find(|r| r.item >= catalog.len()) {
        return Err(HarnessError::Validation(format!("item {} not in catalog", r.item)));
    }
    let mut all = Vec::new();
    for (user, seq) in log.sequences() {
        if seq.len() < window {
            continue;
        }
        for end in window - 1..seq.len() {
            all.push(Instance {
                user,
                history: seq[end + 1 - window..end].iter().map(|e| e.0).collect(),
                target: seq[end].0,
                timestamp: seq[end].1,
                split: Split::Train,
            });
        }
    }
    if all.is_empty() {
        return Err(HarnessError::Validation("no user has enough interactions for one window".into()));
    }
    all.sort_by_key(|i| (i.timestamp, i.user));
    let n = all.len();
    let tenth = n / 10;
    let n_train = n - 2 * tenth;
    let mut test: Vec<Instance> = all.split_off(n_train + tenth);
    let mut val: Vec<Instance> = all.split_off(n_train);
    for i in &mut val {
        i.split = Split::Val;
    }
    for i in &mut test {
        i.split = Split::Test;
    }
    Ok(Dataset {
        catalog_digest: catalog.digest(),
        window,
        train: all,
        val,
        test,
    })
}
