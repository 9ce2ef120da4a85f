use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;

use whatif::dsl::Direction;
use whatif::executors::sim::{EmitSpec, ScriptEntry};
use whatif::executors::{
    ExecEvent, Executor, FaultSpec, JobKind, JobSpec, ProcessCommand, ProcessExecutor, SimBehavior, SimExecutor,
};
use whatif::lifecycle::{FailureMode, FaultKind, Phase};
use whatif::telemetry::MetricsStore;
use whatif::time::Timestamp;

fn service(name: &str, sim: SimBehavior) -> JobSpec {
    JobSpec {
        name: name.into(),
        kind: JobKind::Service,
        host: name.into(),
        sim: Some(sim),
        process: Some(ProcessCommand {
            command: vec!["sleep".into(), "600".into()],
            ..Default::default()
        }),
    }
}

fn emitter(every_ms: u64, duration: Option<u64>, jitter: Option<u64>) -> SimBehavior {
    SimBehavior {
        script: vec![ScriptEntry {
            at: Some(Duration::ZERO),
            every: Some(Duration::from_millis(every_ms)),
            emit: Some(EmitSpec {
                name: "m".into(),
                value: 1.0,
                jitter: 0.5,
            }),
            ..Default::default()
        }],
        duration: duration.map(Duration::from_millis),
        jitter: jitter.map(Duration::from_millis),
    }
}

fn fault(id: &str, kind: FaultKind, targets: &[String]) -> FaultSpec {
    FaultSpec {
        id: id.into(),
        kind,
        targets: targets.to_vec(),
        dst: Vec::new(),
        direction: None,
        duration: (kind != FaultKind::Kill).then(|| Duration::from_secs(60)),
    }
}

/// Final observable state per job: `None` while live, else the terminal
/// phase and failure mode.
type Observed = BTreeMap<String, Option<(Phase, Option<FailureMode>)>>;

fn observe(events: &[ExecEvent], names: &[String]) -> Observed {
    names
        .iter()
        .map(|n| {
            let last = events.iter().rfind(|e| &e.job == n && e.phase.is_terminal());
            (n.clone(), last.map(|e| (e.phase, e.mode)))
        })
        .collect()
}

/// Starts `n` services, kills the `kill` subset and suspends then resumes
/// the `suspend` subset; returns what each executor reported.
fn drive(exec: &mut dyn Executor, n: usize, kill: &[bool], suspend: &[bool], settle: Duration) -> Observed {
    let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let mut events = Vec::new();
    for name in &names {
        exec.start_job(&service(name, SimBehavior::default())).unwrap();
    }
    events.extend(exec.wait(exec.now().saturating_add(Duration::from_millis(1))));
    let pick = |mask: &[bool]| -> Vec<String> {
        names
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(n, _)| n.clone())
            .collect()
    };
    let suspended = pick(suspend);
    if !suspended.is_empty() {
        exec.inject_fault(&fault("sus", FaultKind::Suspend, &suspended))
            .unwrap();
    }
    let killed: Vec<String> = pick(kill).into_iter().filter(|k| !suspended.contains(k)).collect();
    if !killed.is_empty() {
        exec.inject_fault(&fault("kill", FaultKind::Kill, &killed)).unwrap();
    }
    let until = Instant::now() + settle;
    loop {
        let now = exec.now();
        events.extend(exec.wait(now.saturating_add(Duration::from_millis(50))));
        let seen = observe(&events, &names);
        let done = killed.iter().all(|k| seen[k].is_some());
        if done || Instant::now() >= until {
            break;
        }
    }
    if !suspended.is_empty() {
        exec.revoke_fault("sus").unwrap();
    }
    let now = exec.now();
    events.extend(exec.wait(now.saturating_add(Duration::from_millis(100))));
    for name in &names {
        exec.stop_job(name).unwrap();
    }
    observe(&events, &names)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sim_and_process_agree_on_kill_and_suspend(
        n in 1usize..=3,
        kill in prop::collection::vec(any::<bool>(), 3),
        suspend in prop::collection::vec(any::<bool>(), 3),
    ) {
        let store = Arc::new(MetricsStore::new());
        let sim = drive(&mut SimExecutor::new(0, store.clone()), n, &kill, &suspend, Duration::ZERO);
        let process = drive(&mut ProcessExecutor::new(store), n, &kill, &suspend, Duration::from_secs(5));
        prop_assert_eq!(&sim, &process);
        for (i, name) in sim.keys().enumerate() {
            let want = (kill[i] && !suspend[i]).then_some((Phase::Failed, Some(FailureMode::Kill)));
            prop_assert_eq!(sim[name], want);
        }
    }
}

fn run_sim(seed: u64, jobs: &[(u64, Option<u64>, Option<u64>)], horizon: u64) -> (Vec<ExecEvent>, Vec<(u64, f64)>) {
    let store = Arc::new(MetricsStore::new());
    let mut sim = SimExecutor::new(seed, store.clone());
    for (i, (every, duration, jitter)) in jobs.iter().enumerate() {
        let mut spec = service(&format!("j{i}"), emitter(*every, *duration, *jitter));
        spec.kind = JobKind::Call;
        sim.start_job(&spec).unwrap();
    }
    let events = sim.advance_clock(Timestamp(horizon));
    let points = store
        .query("m", Timestamp::ZERO, Timestamp::MAX)
        .unwrap_or_default()
        .into_iter()
        .map(|p| (p.at.as_millis(), p.value))
        .collect();
    (events, points)
}

fn job_shapes() -> impl Strategy<Value = Vec<(u64, Option<u64>, Option<u64>)>> {
    prop::collection::vec(
        (
            100u64..5_000,
            prop::option::of(1_000u64..60_000),
            prop::option::of(1u64..10_000),
        ),
        1..4,
    )
}

proptest! {
    #[test]
    fn sim_is_a_function_of_its_seed(seed in any::<u64>(), jobs in job_shapes()) {
        prop_assert_eq!(run_sim(seed, &jobs, 90_000), run_sim(seed, &jobs, 90_000));
    }

    #[test]
    fn suspension_defers_work_without_losing_it(
        duration in 1_000u64..30_000,
        start in 0u64..30_000,
        length in 1_000u64..30_000,
    ) {
        let store = Arc::new(MetricsStore::new());
        let mut sim = SimExecutor::new(0, store.clone());
        let mut spec = service("c", emitter(500, Some(duration), None));
        spec.kind = JobKind::Call;
        sim.start_job(&spec).unwrap();
        let mut events = sim.advance_clock(Timestamp(start));
        let finished_early = events.iter().any(|e| e.phase.is_terminal());
        if !finished_early {
            let mut f = fault("sus", FaultKind::Suspend, &["c".to_string()]);
            f.duration = Some(Duration::from_millis(length));
            sim.inject_fault(&f).unwrap();
            events.extend(sim.advance_clock(Timestamp(start + length)));
            sim.revoke_fault("sus").unwrap();
        }
        events.extend(sim.advance_clock(Timestamp(start + length + duration + 1_000)));
        let done: Vec<&ExecEvent> = events.iter().filter(|e| e.phase.is_terminal()).collect();
        prop_assert_eq!(done.len(), 1, "{:?}", events);
        prop_assert_eq!(done[0].phase, Phase::Success);
        let expected_end = if finished_early || duration < start {
            duration
        } else {
            duration.max(start + length)
        };
        prop_assert_eq!(done[0].at.as_millis(), expected_end);
        if !finished_early {
            let points = store.query("m", Timestamp::ZERO, Timestamp::MAX).unwrap();
            prop_assert!(points.iter().all(|p| p.at.as_millis() <= start || p.at.as_millis() >= start + length));
        }
    }
}

#[test]
fn partition_direction_table_on_two_nodes() {
    let pairs = [("a", "a"), ("a", "b"), ("b", "a"), ("b", "b")];
    for (direction, dropped) in [
        (Direction::From, vec![("a", "b")]),
        (Direction::To, vec![("b", "a")]),
        (Direction::Both, vec![("a", "b"), ("b", "a")]),
    ] {
        let f = FaultSpec {
            id: "p".into(),
            kind: FaultKind::Partition,
            targets: vec!["a".into()],
            dst: vec!["b".into()],
            direction: Some(direction),
            duration: Some(Duration::from_secs(60)),
        };
        let mut sim = SimExecutor::new(0, Arc::new(MetricsStore::new()));
        for n in ["a", "b"] {
            sim.start_job(&service(n, SimBehavior::default())).unwrap();
        }
        sim.advance_clock(Timestamp(1));
        sim.inject_fault(&f).unwrap();
        for (src, dst) in pairs {
            let want = dropped.contains(&(src, dst));
            assert_eq!(f.drops(src, dst), want, "{direction:?} {src}->{dst}");
            assert_eq!(sim.link_up(src, dst), !want, "{direction:?} {src}->{dst}");
        }
        sim.revoke_fault("p").unwrap();
        assert!(pairs.iter().all(|(s, d)| sim.link_up(s, d)));
    }
}
