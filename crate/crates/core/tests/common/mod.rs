//! Shared fixtures, generators and independent oracles.
#![allow(dead_code)]

use proptest::prelude::*;

use twotsd_core::domain::{
    CommTrends, CompTrends, DeviceId, PerformanceRecord, RawTask, RecordMetrics, ResourceProfile, Task, TaskId,
    TaskType, TimeWindow, Timestamp, Trend, TrustSemantics, TrustState, Verdict,
};
use twotsd_core::memory::{HistoryQuery, HistoryWindow};
use twotsd_core::protocol::{AckBody, ErrorBody, Message, Payload, Sender};
use twotsd_core::semantics::{DeterministicEngine, EngineConfig};
use twotsd_core::teacher::{Candidate, CandidateBundle, Teacher, TeacherConfig};

pub fn dev(s: &str) -> DeviceId {
    DeviceId::new(s).unwrap()
}

// ---------------------------------------------------------------------------
// Oracles

/// Least-squares slope by the textbook sums formula.
pub fn slope_oracle(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let (mut sx, mut sy, mut sxy, mut sxx) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let x = i as f64;
        sx += x;
        sy += y;
        sxy += x * y;
        sxx += x * x;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

pub fn trend_oracle(ys: &[f64], n_min: usize, threshold: f64, floor: f64) -> Trend {
    if ys.len() < n_min || ys.len() < 2 {
        return Trend::Normal;
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let s = slope_oracle(ys) * (ys.len() - 1) as f64 / mean.max(floor);
    if s > threshold {
        Trend::Increasing
    } else if s < -threshold {
        Trend::Decreasing
    } else {
        Trend::Normal
    }
}

/// Filters and orders `log` the slow way.
pub fn query_oracle(log: &[PerformanceRecord], q: &HistoryQuery) -> Vec<PerformanceRecord> {
    let mut hits: Vec<(usize, &PerformanceRecord)> = log
        .iter()
        .enumerate()
        .filter(|(_, r)| r.collaborator() == &q.collaborator && r.task_type() == &q.task_type)
        .collect();
    hits.sort_by_key(|(i, r)| (r.at(), *i));
    let hits: Vec<PerformanceRecord> = hits.into_iter().map(|(_, r)| r.clone()).collect();
    match &q.window {
        HistoryWindow::Interval { from, to } => hits.into_iter().filter(|r| r.at() >= *from && r.at() <= *to).collect(),
        HistoryWindow::LastK(k) => {
            let skip = hits.len().saturating_sub(k.get());
            hits.into_iter().skip(skip).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// The c2 walkthrough

pub const VT: fn() -> TaskType = TaskType::video_transcoding;

pub fn c2_task() -> Task {
    Task::new(TaskId::new("c2").unwrap(), dev("a_i"), VT(), 50.0, 1000.0, 50.0).unwrap()
}

/// Ten satisfied video-transcoding records for `device`; packet loss rises
/// from 1% to 3% when `rising_loss` is set.
pub fn history(device: &str, rising_loss: bool, start_ms: i64) -> Vec<PerformanceRecord> {
    (0..10)
        .map(|i| {
            let loss = if rising_loss { 0.01 + 0.002 * i as f64 } else { 0.01 };
            PerformanceRecord::new(
                dev("a_i"),
                dev(device),
                VT(),
                Timestamp(start_ms + 60_000 * i as i64),
                RecordMetrics {
                    throughput_mbps: 95.0,
                    loss_rate: loss,
                    proc_speed_mbps: 1.25,
                    accuracy: 0.98,
                },
                Verdict::Satisfied,
            )
            .unwrap()
        })
        .collect()
}

/// Teacher memory for the c2 story: a_k clean, a_j with rising loss, a_l
/// trusted but short on storage.
pub fn c2_teacher() -> (Teacher, Timestamp) {
    let t = Teacher::new(
        Box::new(DeterministicEngine::new(EngineConfig::default()).unwrap()),
        TeacherConfig::default(),
    );
    feed_c2(&t);
    (t, Timestamp(700_000))
}

pub fn c2_profiles() -> Vec<ResourceProfile> {
    let at = Timestamp(600_000);
    vec![
        ResourceProfile::new(dev("a_k"), 1.0e10, 200.0, 100.0, at).unwrap(),
        ResourceProfile::new(dev("a_j"), 1.2e10, 200.0, 100.0, at).unwrap(),
        ResourceProfile::new(dev("a_l"), 1.5e10, 20.0, 100.0, at).unwrap(),
    ]
}

pub fn c2_records() -> Vec<PerformanceRecord> {
    let mut all = history("a_k", false, 0);
    all.extend(history("a_j", true, 1_000));
    all.extend(history("a_l", false, 2_000));
    all
}

pub fn feed_c2(t: &Teacher) {
    for p in c2_profiles() {
        t.handle_resource_report(p).unwrap();
    }
    for r in c2_records() {
        t.handle_performance_record(r).unwrap();
    }
}

// ---------------------------------------------------------------------------
// Generators

pub fn arb_name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

pub fn arb_device() -> impl Strategy<Value = DeviceId> {
    arb_name().prop_map(|s| DeviceId::new(s).unwrap())
}

pub fn arb_task_type() -> impl Strategy<Value = TaskType> {
    prop_oneof![
        Just(TaskType::face_recognition()),
        Just(TaskType::video_transcoding()),
        Just(TaskType::text_word_count()),
        arb_name().prop_map(|s| TaskType::new(s).unwrap()),
    ]
}

pub fn arb_ts() -> impl Strategy<Value = Timestamp> {
    (-1_000_000_000i64..4_000_000_000_000).prop_map(Timestamp)
}

fn pos() -> impl Strategy<Value = f64> {
    prop_oneof![1e-6..1e3f64, 1e3..1e12f64]
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

pub fn arb_profile() -> impl Strategy<Value = ResourceProfile> {
    (arb_device(), pos(), 0.0..1e6f64, pos(), arb_ts())
        .prop_map(|(d, c, s, b, t)| ResourceProfile::new(d, c, s, b, t).unwrap())
}

pub fn arb_record() -> impl Strategy<Value = PerformanceRecord> {
    (
        arb_device(),
        arb_device(),
        arb_task_type(),
        arb_ts(),
        (0.0..1e4f64, unit(), 0.0..1e4f64, unit()),
        any::<bool>(),
    )
        .prop_filter("self collaboration", |(o, c, ..)| o != c)
        .prop_map(|(o, c, tt, at, (tp, loss, sp, acc), ok)| {
            PerformanceRecord::new(
                o,
                c,
                tt,
                at,
                RecordMetrics {
                    throughput_mbps: tp,
                    loss_rate: loss,
                    proc_speed_mbps: sp,
                    accuracy: acc,
                },
                if ok { Verdict::Satisfied } else { Verdict::Unsatisfied },
            )
            .unwrap()
        })
}

pub fn arb_task() -> impl Strategy<Value = Task> {
    (
        arb_name(),
        arb_name(),
        arb_task_type(),
        pos(),
        pos(),
        pos(),
        proptest::collection::btree_map(arb_name(), ".{0,12}", 0..3),
    )
        .prop_map(|(id, owner, tt, size, dens, dl, ext)| {
            twotsd_core::domain::validate_task(RawTask {
                task_id: id,
                owner,
                task_type: tt.to_string(),
                size_mb: size,
                density_cpb: dens,
                deadline_s: dl,
                extensions: ext,
            })
            .unwrap()
        })
}

pub fn arb_trend() -> impl Strategy<Value = Trend> {
    prop_oneof![Just(Trend::Increasing), Just(Trend::Decreasing), Just(Trend::Normal)]
}

pub fn arb_trends() -> impl Strategy<Value = (CommTrends, CompTrends)> {
    (arb_trend(), arb_trend(), arb_trend(), arb_trend()).prop_map(|(a, b, c, d)| {
        (
            CommTrends {
                throughput: a,
                loss_rate: b,
            },
            CompTrends {
                accuracy: c,
                proc_speed: d,
            },
        )
    })
}

/// Valid semantics for one device and type; the state is drawn too.
pub fn arb_semantics_for(device: DeviceId, task_type: TaskType) -> impl Strategy<Value = TrustSemantics> {
    (
        prop_oneof![
            Just(TrustState::Trusted),
            Just(TrustState::Untrusted),
            Just(TrustState::InsufficientData)
        ],
        arb_trends(),
        0i64..1_000_000,
        0i64..1_000_000,
        1u64..50,
    )
        .prop_map(move |(state, (comm, comp), a, len, n)| {
            let (comm, comp) = if state == TrustState::InsufficientData {
                (CommTrends::NORMAL, CompTrends::NORMAL)
            } else {
                (comm, comp)
            };
            TrustSemantics::new(
                device.clone(),
                task_type.clone(),
                state,
                comm,
                comp,
                Some(TimeWindow {
                    from: Timestamp(a),
                    to: Timestamp(a + len),
                }),
                Timestamp(a + len),
                n,
            )
            .unwrap()
        })
}

pub fn arb_semantics() -> impl Strategy<Value = TrustSemantics> {
    (arb_device(), arb_task_type()).prop_flat_map(|(d, tt)| arb_semantics_for(d, tt))
}

pub fn arb_bundle() -> impl Strategy<Value = CandidateBundle> {
    (
        arb_name(),
        arb_task_type(),
        proptest::collection::btree_set(arb_device(), 0..5),
        arb_ts(),
    )
        .prop_flat_map(|(id, tt, devices, at)| {
            let sems: Vec<_> = devices
                .into_iter()
                .map(|d| {
                    (arb_trends(), 0i64..1000).prop_map({
                        let tt = tt.clone();
                        move |((comm, comp), a)| {
                            TrustSemantics::new(
                                d.clone(),
                                tt.clone(),
                                TrustState::Trusted,
                                comm,
                                comp,
                                Some(TimeWindow {
                                    from: Timestamp(a),
                                    to: Timestamp(a + 10),
                                }),
                                Timestamp(a + 10),
                                7,
                            )
                            .unwrap()
                        }
                    })
                })
                .collect();
            (Just(id), sems, Just(at))
        })
        .prop_map(|(id, sems, at)| {
            let cands = sems
                .into_iter()
                .map(|semantics| Candidate {
                    semantics,
                    matched: true,
                    stages: vec![],
                })
                .collect();
            CandidateBundle::new(TaskId::new(id).unwrap(), cands, at).unwrap()
        })
}

pub fn arb_payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        arb_profile().prop_map(Payload::ResourceReport),
        arb_record().prop_map(Payload::PerformanceRecord),
        arb_task().prop_map(Payload::TaskRequest),
        arb_bundle().prop_map(Payload::CandidateBundle),
        proptest::option::of(".{0,20}").prop_map(|detail| Payload::Ack(AckBody { detail })),
        (arb_name(), ".{0,20}").prop_map(|(code, message)| Payload::Error(ErrorBody { code, message })),
    ]
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    (
        prop_oneof![Just(Sender::Server), arb_device().prop_map(Sender::Device)],
        any::<u64>(),
        arb_ts(),
        arb_payload(),
    )
        .prop_map(|(sender, msg_id, sent_at, payload)| Message {
            sender,
            msg_id,
            sent_at,
            payload,
        })
}
