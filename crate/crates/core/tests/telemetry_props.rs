use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use whatif::expressions::parse_reduction;
use whatif::lifecycle::ResourceTree;
use whatif::telemetry::{CheckpointError, CheckpointRegistry, MetricPoint, MetricsStore};
use whatif::time::Timestamp;

fn points() -> impl Strategy<Value = Vec<(u8, u64, i32)>> {
    prop::collection::vec((0u8..3, 0u64..1_000, -1000i32..1000), 0..40)
}

/// Shared buffer so the persisted lines can be read back.
#[derive(Clone, Default)]
struct Sink(Arc<Mutex<Vec<u8>>>);

impl std::io::Write for Sink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

proptest! {
    #[test]
    fn queries_return_exactly_the_accepted_points_in_range(
        input in points(),
        from in 0u64..1_000,
        span in 0u64..1_000,
    ) {
        let store = MetricsStore::new();
        // Model: a point is kept iff it is not older than the newest kept
        // point of the same series.
        let mut model: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
        let mut rejected = 0;
        for (s, at, v) in &input {
            let name = format!("m{s}");
            let value = f64::from(*v) / 8.0;
            let series = model.entry(name.clone()).or_default();
            let keep = series.last().is_none_or(|(t, _)| at >= t);
            if keep {
                series.push((*at, value));
            } else {
                rejected += 1;
            }
            prop_assert_eq!(store.ingest(MetricPoint::new(name, value, Timestamp(*at))), keep);
        }
        prop_assert_eq!(store.rejected(), rejected);
        let to = from + span;
        for (name, series) in &model {
            let want: Vec<(u64, f64)> = series.iter().copied().filter(|(t, _)| *t >= from && *t <= to).collect();
            let got: Vec<(u64, f64)> = store
                .query(name, Timestamp(from), Timestamp(to))
                .unwrap()
                .iter()
                .map(|p| (p.at.as_millis(), p.value))
                .collect();
            prop_assert_eq!(got, want);
        }
        prop_assert!(store.query("never", Timestamp(0), Timestamp(10)).is_err());
    }

    #[test]
    fn persisted_lines_reload_to_the_same_store(input in points()) {
        let sink = Sink::default();
        let store = MetricsStore::with_persistence(Box::new(sink.clone()));
        for (s, at, v) in &input {
            store.ingest(MetricPoint::new(format!("m{s}"), f64::from(*v) / 8.0, Timestamp(*at)));
        }
        store.flush().unwrap();
        let bytes = sink.0.lock().unwrap().clone();
        let back = MetricsStore::load(Cursor::new(bytes)).unwrap();
        prop_assert_eq!(back.names(), store.names());
        for name in store.names() {
            prop_assert_eq!(
                back.query(&name, Timestamp::ZERO, Timestamp::MAX).unwrap(),
                store.query(&name, Timestamp::ZERO, Timestamp::MAX).unwrap()
            );
        }
    }

    #[test]
    fn checkpoints_do_not_change_after_capture(
        before in prop::collection::vec(-100i32..100, 1..10),
        after in prop::collection::vec(-100i32..100, 0..10),
    ) {
        let store = MetricsStore::new();
        let mut t = 0;
        for v in &before {
            t += 100;
            store.ingest(MetricPoint::new("m", f64::from(*v), Timestamp(t)));
        }
        let tree = ResourceTree::new("s");
        let queries = vec![
            ("max".to_string(), parse_reduction("MAX() QUERY(m, 1h, now)").unwrap()),
            ("n".to_string(), parse_reduction("COUNT() QUERY(m, 1h, now)").unwrap()),
        ];
        let mut reg = CheckpointRegistry::default();
        let taken = reg.snapshot_checkpoint("cp", &queries, &tree, &store, Timestamp(t)).unwrap().clone();
        let want_max = before.iter().copied().max().map(f64::from).unwrap();
        prop_assert_eq!(taken.values["max"], want_max);
        prop_assert_eq!(taken.values["n"], before.len() as f64);
        for v in &after {
            t += 100;
            store.ingest(MetricPoint::new("m", f64::from(*v) + 1000.0, Timestamp(t)));
        }
        let again = reg.snapshot_checkpoint("cp", &queries, &tree, &store, Timestamp(t));
        prop_assert!(matches!(again, Err(CheckpointError::Duplicate(_))));
        prop_assert_eq!(reg.get("cp").unwrap(), &taken);
    }
}
