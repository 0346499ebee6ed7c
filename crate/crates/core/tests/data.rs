use std::io::Write;

use proptest::prelude::*;

use tips_core::data::{load_log, make_splits, normalize_gaps, GapNormalizer, InteractionLog, LogFormat, PopularityIndex};
use tips_core::TipsError;

fn records() -> impl Strategy<Value = Vec<(u8, u8, i64)>> {
    prop::collection::vec((0u8..12, 0u8..20, 0i64..100_000), 0..80)
}

fn log_of(rows: &[(u8, u8, i64)]) -> InteractionLog {
    InteractionLog::from_records(rows.iter().map(|&(u, i, t)| (format!("u{u}"), format!("i{i}"), t))).unwrap()
}

fn write_tmp(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

proptest! {
    #[test]
    fn write_then_load_round_trips(rows in records()) {
        let log = log_of(&rows);
        let f = tempfile::NamedTempFile::new().unwrap();
        log.write(f.path(), "\t").unwrap();
        let back = load_log(f.path(), &LogFormat::tsv()).unwrap();
        prop_assert_eq!(back, log);
    }

    #[test]
    fn sequences_are_sorted_and_deduplicated(rows in records()) {
        let log = log_of(&rows);
        let mut seen = std::collections::HashSet::new();
        for u in 0..log.n_users() {
            let ts: Vec<i64> = log.sequence(u).map(|r| r.timestamp).collect();
            prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
            for r in log.sequence(u) {
                prop_assert!(seen.insert((r.user, r.item, r.timestamp)));
            }
        }
    }

    #[test]
    fn popularity_monotone_in_window(rows in records(), t in 0i64..120_000, tau in 1i64..50_000, extra in 0i64..50_000) {
        let log = log_of(&rows);
        let idx = PopularityIndex::build(log.n_items(), log.interactions().iter().map(|r| (r.item, r.timestamp)));
        for v in 0..log.n_items() {
            let small = idx.count(v, t, tau).unwrap();
            let large = idx.count(v, t, tau + extra).unwrap();
            prop_assert!(small <= large);
            prop_assert!(large <= idx.total(v));
            let brute = log.interactions().iter().filter(|r| r.item == v && r.timestamp >= t - tau && r.timestamp <= t).count();
            prop_assert_eq!(small, brute);
        }
    }

    #[test]
    fn splits_partition_each_user(rows in records(), max_len in 1usize..6) {
        let log = log_of(&rows);
        let spec = make_splits(&log, max_len);
        let short = (0..log.n_users()).filter(|&u| log.sequence_len(u) < 3).count();
        prop_assert_eq!(spec.dropped_users, short);
        for s in &spec.users {
            let seq: Vec<_> = log.sequence(s.user).collect();
            let n = seq.len();
            prop_assert_eq!(s.train_len_full, n - 2);
            prop_assert!(s.train.len() <= max_len);
            prop_assert_eq!(s.test.item, seq[n - 1].item);
            prop_assert_eq!(s.val.item, seq[n - 2].item);
            let last_train = s.train.last().map_or(i64::MIN, |t| t.timestamp);
            prop_assert!(last_train <= s.val.timestamp && s.val.timestamp <= s.test.timestamp);
            let kept = &seq[n - 2 - s.train.len()..n - 2];
            prop_assert!(kept.iter().zip(&s.train).all(|(a, b)| a.item == b.item && a.timestamp == b.timestamp));
        }
    }
}

#[test]
fn four_items_split_two_one_one() {
    let log = log_of(&[(0, 1, 10), (0, 2, 20), (0, 3, 30), (0, 4, 40), (1, 1, 5), (1, 2, 6)]);
    let spec = make_splits(&log, 50);
    assert_eq!(spec.users.len(), 1);
    assert_eq!(spec.dropped_users, 1);
    let s = &spec.users[0];
    let name = |i: usize| log.item_id(i).to_string();
    assert_eq!(s.train.iter().map(|t| name(t.item)).collect::<Vec<_>>(), ["i1", "i2"]);
    assert_eq!(name(s.val.item), "i3");
    assert_eq!(name(s.test.item), "i4");
}

#[test]
fn shuffled_lines_are_sorted_per_user() {
    let f = write_tmp("a::x::5::300\na::y::3::100\na::z::4::200\n");
    let log = load_log(f.path(), &LogFormat::movielens()).unwrap();
    let items: Vec<&str> = log.sequence(0).map(|r| log.item_id(r.item)).collect();
    assert_eq!(items, ["y", "z", "x"]);
}

#[test]
fn empty_file_gives_empty_log() {
    let f = write_tmp("");
    let log = load_log(f.path(), &LogFormat::movielens()).unwrap();
    assert_eq!(log.n_users(), 0);
    assert!(log.is_empty());
}

#[test]
fn bad_rows_report_line_numbers() {
    let f = write_tmp("1::2::5::100\n1::3::5::oops\n");
    let err = load_log(f.path(), &LogFormat::movielens()).unwrap_err();
    assert!(matches!(err, TipsError::Parse { line: 2, .. }), "{err}");
    let f = write_tmp("1::2::5::100\n\n1::3\n");
    let err = load_log(f.path(), &LogFormat::movielens()).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}

#[test]
fn duplicate_rows_are_dropped() {
    let log = log_of(&[(0, 1, 10), (0, 1, 10), (0, 2, 11)]);
    assert_eq!(log.len(), 2);
    assert_eq!(log.duplicates_dropped(), 1);
}

#[test]
fn window_covering_span_is_global_frequency() {
    let log = log_of(&[(0, 1, 10), (1, 1, 500), (2, 2, 70), (0, 1, 900)]);
    let idx = PopularityIndex::build(log.n_items(), log.interactions().iter().map(|r| (r.item, r.timestamp)));
    let (lo, hi) = idx.span().unwrap();
    for v in 0..log.n_items() {
        assert_eq!(idx.count(v, hi, hi - lo + 1).unwrap(), idx.total(v));
    }
    assert_eq!(idx.count(99, hi, 10).unwrap(), 0);
    assert!(idx.count(0, hi, 0).is_err());
}

#[test]
fn two_day_window_matches_scan() {
    const DAY: i64 = 86_400;
    let rows = [(0, 1, 0), (0, 2, DAY), (1, 1, DAY / 2), (1, 3, 3 * DAY), (2, 1, 4 * DAY), (2, 2, 2 * DAY), (3, 1, 5 * DAY), (3, 3, 5 * DAY + 1), (4, 2, 6 * DAY), (4, 1, 7 * DAY)];
    let log = log_of(&rows);
    let idx = PopularityIndex::build(log.n_items(), log.interactions().iter().map(|r| (r.item, r.timestamp)));
    for t in (0..8 * DAY).step_by((DAY / 4) as usize) {
        for v in 0..log.n_items() {
            let brute = log.interactions().iter().filter(|r| r.item == v && (t - 2 * DAY..=t).contains(&r.timestamp)).count();
            assert_eq!(idx.count(v, t, 2 * DAY).unwrap(), brute);
        }
    }
}

#[test]
fn gap_normalisation_examples() {
    let norm = GapNormalizer::fit([0, 60, 3_600, 86_400]);
    let g = normalize_gaps(&[0, 60, 3_660, 90_060], &norm).unwrap();
    assert_eq!(g[0], 0.0);
    assert!(g[1] < g[2] && g[2] < g[3]);
    let even = normalize_gaps(&[0, 100, 200, 300, 400], &norm).unwrap();
    assert!(even[1..].windows(2).all(|w| w[0] == w[1]));
    assert!(matches!(normalize_gaps(&[10, 5], &norm), Err(TipsError::DataCorruption(_))));
}
