//! Chronological leave-one-out splits.

use serde::{Deserialize, Serialize};

use super::log::InteractionLog;
use super::popularity::PopularityIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedItem {
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: usize,
    /// Most recent (at most `max_len`) training items, oldest first.
    pub train: Vec<TimedItem>,
    /// Timestamp of the interaction just before `train[0]`, if any.
    pub prev_timestamp: Option<i64>,
    /// Full (untruncated) training prefix length.
    pub train_len_full: usize,
    pub val: TimedItem,
    pub test: TimedItem,
}

impl UserSplit {
    /// Every item the user touched in the log (train, validation, test).
    pub fn all_items(&self) -> impl Iterator<Item = usize> + '_ {
        self.train
            .iter()
            .map(|t| t.item)
            .chain([self.val.item, self.test.item])
    }

    /// History used to predict the validation item.
    pub fn val_history(&self) -> Vec<TimedItem> {
        self.train.clone()
    }

    /// History used to predict the test item: train followed by val.
    pub fn test_history(&self, max_len: usize) -> Vec<TimedItem> {
        let mut h = self.train.clone();
        h.push(self.val);
        let start = h.len().saturating_sub(max_len);
        h.split_off(start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
    pub max_len: usize,
    pub n_items: usize,
    pub dropped_users: usize,
}

impl SplitSpec {
    /// Popularity index over every training interaction (untruncated
    /// prefixes), needs the source log.
    pub fn popularity_index(&self, log: &InteractionLog) -> PopularityIndex {
        let mut events = Vec::new();
        for split in &self.users {
            events.extend(
                log.sequence(split.user)
                    .take(split.train_len_full)
                    .map(|r| (r.item, r.timestamp)),
            );
        }
        PopularityIndex::build(self.n_items, events)
    }

    pub fn n_train_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }
}

/// Last item is test, second-to-last validation, the rest training
/// (truncated to the `max_len` most recent). Users with fewer than three
/// interactions are dropped and counted.
pub fn make_splits(log: &InteractionLog, max_len: usize) -> SplitSpec {
    let mut users = Vec::new();
    let mut dropped = 0;
    for user in 0..log.n_users() {
        let seq: Vec<TimedItem> = log
            .sequence(user)
            .map(|r| TimedItem {
                item: r.item,
                timestamp: r.timestamp,
            })
            .collect();
        if seq.len() < 3 {
            dropped += 1;
            continue;
        }
        let n = seq.len();
        let full_train = &seq[..n - 2];
        let start = full_train.len().saturating_sub(max_len);
        users.push(UserSplit {
            user,
            train: full_train[start..].to_vec(),
            prev_timestamp: (start > 0).then(|| full_train[start - 1].timestamp),
            train_len_full: full_train.len(),
            val: seq[n - 2],
            test: seq[n - 1],
        });
    }
    SplitSpec {
        users,
        max_len,
        n_items: log.n_items(),
        dropped_users: dropped,
    }
}
