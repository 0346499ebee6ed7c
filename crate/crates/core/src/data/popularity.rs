use crate::error::{Result, TipsError};

/// Per-item occurrence times over the training interactions, answering
/// windowed popularity counts over `[t - τ, t]`.
#[derive(Clone, Debug)]
pub struct PopularityIndex {
    times: Vec<Vec<i64>>,
    span: Option<(i64, i64)>,
}

impl PopularityIndex {
    pub fn build(n_items: usize, events: impl IntoIterator<Item = (usize, i64)>) -> Self {
        let mut times = vec![Vec::new(); n_items];
        let mut span: Option<(i64, i64)> = None;
        for (item, t) in events {
            times[item].push(t);
            span = Some(match span {
                None => (t, t),
                Some((lo, hi)) => (lo.min(t), hi.max(t)),
            });
        }
        times.iter_mut().for_each(|v| v.sort_unstable());
        PopularityIndex { times, span }
    }

    pub fn n_items(&self) -> usize {
        self.times.len()
    }

    /// First and last training timestamp.
    pub fn span(&self) -> Option<(i64, i64)> {
        self.span
    }

    pub fn total(&self, item: usize) -> usize {
        self.times.get(item).map_or(0, Vec::len)
    }

    /// Occurrences of `item` with timestamp in `[t - tau, t]`.
    pub fn count(&self, item: usize, t: i64, tau: i64) -> Result<usize> {
        if tau <= 0 {
            return Err(TipsError::Config(format!("popularity window must be positive, got {tau}")));
        }
        Ok(self.count_unchecked(item, t, tau))
    }

    fn count_unchecked(&self, item: usize, t: i64, tau: i64) -> usize {
        let Some(ts) = self.times.get(item) else {
            return 0;
        };
        let lo = t.saturating_sub(tau);
        let start = ts.partition_point(|&x| x < lo);
        let end = ts.partition_point(|&x| x <= t);
        end.saturating_sub(start)
    }

    /// Items ranked by windowed count (descending, ties by ascending index),
    /// keeping only items seen in the window, truncated to `k` after
    /// removing `exclude`. `tau = None` counts over all training data.
    pub fn top_k(&self, t: i64, tau: Option<i64>, k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        if let Some(tau) = tau {
            if tau <= 0 {
                return Err(TipsError::Config(format!(
                    "popularity window must be positive, got {tau}"
                )));
            }
        }
        let mut counted: Vec<(usize, usize)> = (0..self.times.len())
            .filter(|&v| Some(v) != exclude)
            .map(|v| {
                let c = match tau {
                    Some(tau) => self.count_unchecked(v, t, tau),
                    None => self.times[v].len(),
                };
                (v, c)
            })
            .filter(|&(_, c)| c > 0)
            .collect();
        counted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counted.truncate(k);
        Ok(counted.into_iter().map(|(v, _)| v).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: i64 = 86_400;

    fn toy() -> PopularityIndex {
        let events = vec![
            (0, 0),
            (1, DAY),
            (0, 2 * DAY),
            (2, 3 * DAY),
            (1, 3 * DAY),
            (1, 4 * DAY),
            (3, 5 * DAY),
            (0, 6 * DAY),
            (2, 8 * DAY),
            (1, 9 * DAY),
        ];
        PopularityIndex::build(5, events)
    }

    #[test]
    fn absent_item_counts_zero() {
        let idx = toy();
        assert_eq!(idx.count(4, 9 * DAY, DAY).unwrap(), 0);
        assert_eq!(idx.count(99, 9 * DAY, DAY).unwrap(), 0);
    }

    #[test]
    fn full_span_window_is_global_frequency() {
        let idx = toy();
        for v in 0..5 {
            assert_eq!(idx.count(v, 9 * DAY, 9 * DAY).unwrap(), idx.total(v));
        }
    }

    #[test]
    fn window_counts_match_brute_force() {
        let events = vec![
            (0, 0),
            (1, DAY),
            (0, 2 * DAY),
            (2, 3 * DAY),
            (1, 3 * DAY),
            (1, 4 * DAY),
            (3, 5 * DAY),
            (0, 6 * DAY),
            (2, 8 * DAY),
            (1, 9 * DAY),
        ];
        let idx = PopularityIndex::build(5, events.clone());
        let tau = 2 * DAY;
        for t in (0..=10).map(|d| d * DAY) {
            for v in 0..5 {
                let brute = events
                    .iter()
                    .filter(|&&(i, ts)| i == v && ts >= t - tau && ts <= t)
                    .count();
                assert_eq!(idx.count(v, t, tau).unwrap(), brute, "item {v} at {t}");
            }
        }
    }

    #[test]
    fn non_positive_window_rejected() {
        assert!(matches!(toy().count(0, 0, 0), Err(TipsError::Config(_))));
    }

    #[test]
    fn top_k_orders_by_count_then_index() {
        let idx = toy();
        assert_eq!(idx.top_k(9 * DAY, None, 3, None).unwrap(), vec![1, 0, 2]);
        assert_eq!(idx.top_k(9 * DAY, None, 3, Some(1)).unwrap(), vec![0, 2, 3]);
        assert_eq!(idx.top_k(4 * DAY, Some(DAY), 5, None).unwrap(), vec![1, 2]);
        assert!(idx.top_k(100 * DAY, Some(DAY), 5, None).unwrap().is_empty());
    }
}
