//! Per-user training sequences with normalised gaps, and evaluation cases.

use crate::data::{make_splits, GapNormalizer, InteractionLog, PopularityIndex, SplitSpec, TimedItem};
use crate::error::{Result, TipsError};

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUser {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    /// Normalised gap of each training item to its predecessor.
    pub gaps: Vec<f64>,
    pub val: TimedItem,
    pub val_gap: f64,
    pub test: TimedItem,
    pub test_gap: f64,
    /// Sorted, deduplicated items the user interacted with anywhere.
    pub interacted: Vec<usize>,
}

impl PreparedUser {
    pub fn has_interacted(&self, v: usize) -> bool {
        self.interacted.binary_search(&v).is_ok()
    }

    /// Train followed by validation, truncated to the `max_len` most recent.
    pub fn test_history(&self, max_len: usize) -> (Vec<usize>, Vec<f64>) {
        let mut items = self.items.clone();
        let mut gaps = self.gaps.clone();
        items.push(self.val.item);
        gaps.push(self.val_gap);
        let start = items.len().saturating_sub(max_len);
        (items.split_off(start), gaps.split_off(start))
    }

    /// The whole logged sequence (train, val, test), most recent `max_len`.
    pub fn full_history(&self, max_len: usize) -> (Vec<usize>, Vec<f64>) {
        let (mut items, mut gaps) = self.test_history(max_len + 1);
        items.push(self.test.item);
        gaps.push(self.test_gap);
        let start = items.len().saturating_sub(max_len);
        (items.split_off(start), gaps.split_off(start))
    }
}

/// What training and evaluation need from a log.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub users: Vec<PreparedUser>,
    pub n_items: usize,
    pub max_len: usize,
    pub gap_norm: GapNormalizer,
    pub popularity: PopularityIndex,
    /// First and last training timestamp.
    pub span: (i64, i64),
    pub dropped_users: usize,
}

impl TrainingData {
    pub fn from_log(log: &InteractionLog, max_len: usize) -> Result<Self> {
        let splits = make_splits(log, max_len);
        Self::from_splits(log, &splits)
    }

    pub fn from_splits(log: &InteractionLog, splits: &SplitSpec) -> Result<Self> {
        if splits.users.is_empty() {
            return Err(TipsError::Precondition(
                "no user has the three interactions a split needs".into(),
            ));
        }
        let gap_norm = GapNormalizer::fit_splits(splits);
        let popularity = splits.popularity_index(log);
        let span = popularity
            .span()
            .ok_or_else(|| TipsError::Precondition("empty training data".into()))?;
        let mut users = Vec::with_capacity(splits.users.len());
        for s in &splits.users {
            let mut prev = s.prev_timestamp;
            let mut gaps = Vec::with_capacity(s.train.len());
            for t in &s.train {
                gaps.push(gap_norm.gap(prev, t.timestamp)?);
                prev = Some(t.timestamp);
            }
            let last = s.train.last().map(|t| t.timestamp).or(s.prev_timestamp);
            let val_gap = gap_norm.gap(last, s.val.timestamp)?;
            let test_gap = gap_norm.gap(Some(s.val.timestamp), s.test.timestamp)?;
            let mut interacted: Vec<usize> = log.sequence(s.user).map(|r| r.item).collect();
            interacted.sort_unstable();
            interacted.dedup();
            users.push(PreparedUser {
                user: s.user,
                items: s.train.iter().map(|t| t.item).collect(),
                timestamps: s.train.iter().map(|t| t.timestamp).collect(),
                gaps,
                val: s.val,
                val_gap,
                test: s.test,
                test_gap,
                interacted,
            });
        }
        Ok(TrainingData {
            users,
            n_items: splits.n_items,
            max_len: splits.max_len,
            gap_norm,
            popularity,
            span,
            dropped_users: splits.dropped_users,
        })
    }

    /// Number of `(history → next item)` training instances.
    pub fn n_instances(&self) -> usize {
        self.users.iter().map(|u| u.items.len().saturating_sub(1)).sum()
    }

    /// Next-item validation cases (history = training items).
    pub fn validation_cases(&self) -> Vec<EvalCase> {
        self.users
            .iter()
            .filter(|u| !u.items.is_empty())
            .map(|u| EvalCase {
                user: u.user,
                history: u.items.clone(),
                gaps: u.gaps.clone(),
                positive: u.val.item,
                positive_gap: u.val_gap,
                exclude: u.interacted.clone(),
            })
            .collect()
    }

    /// Next-item test cases (history = training plus validation item).
    pub fn test_cases(&self) -> Vec<EvalCase> {
        self.users
            .iter()
            .map(|u| {
                let (history, gaps) = u.test_history(self.max_len);
                EvalCase {
                    user: u.user,
                    history,
                    gaps,
                    positive: u.test.item,
                    positive_gap: u.test_gap,
                    exclude: u.interacted.clone(),
                }
            })
            .collect()
    }
}

/// One user's ranking task: a history, the held-out positive, and items
/// that may not be drawn as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub history: Vec<usize>,
    pub gaps: Vec<f64>,
    pub positive: usize,
    /// Normalised gap between the last history item and the positive.
    pub positive_gap: f64,
    /// Sorted items excluded from negative sampling (the positive is always
    /// excluded as well).
    pub exclude: Vec<usize>,
}
