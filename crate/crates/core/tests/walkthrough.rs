//! The three-collaborator video transcoding story, end to end.
mod common;

use std::sync::Arc;

use common::*;
use twotsd_core::domain::{Timestamp, Trend, TrustState};
use twotsd_core::matching::Stage;
use twotsd_core::protocol::{Payload, Sender};
use twotsd_core::service::{spawn, Client, Service, ServiceOptions};
use twotsd_core::student::{decide, DecisionPolicy, PolicyKind};
use twotsd_core::teacher::Exclusion;

#[test]
fn teacher_memory_holds_expected_semantics() {
    let (t, _) = c2_teacher();
    let vt = VT();
    let k = t.memory().get_semantics(&vt, &dev("a_k")).unwrap();
    let j = t.memory().get_semantics(&vt, &dev("a_j")).unwrap();
    let l = t.memory().get_semantics(&vt, &dev("a_l")).unwrap();
    for s in [&k, &j, &l] {
        assert_eq!(s.state(), TrustState::Trusted);
        assert_eq!(s.record_count(), 10);
    }
    assert_eq!(k.comm_trends().loss_rate, Trend::Normal);
    assert_eq!(j.comm_trends().loss_rate, Trend::Increasing);
    assert_eq!(j.comm_trends().throughput, Trend::Normal);
    assert_eq!(t.memory().stats().tree_nodes, 1 + 1 + 2 * 3);
}

#[test]
fn bundle_excludes_low_storage_and_student_avoids_rising_loss() {
    let (t, now) = c2_teacher();
    let trace = t.evaluate_request(&c2_task(), now);
    let names: Vec<&str> = trace.bundle.devices().iter().map(|d| d.as_str()).collect();
    assert_eq!(names, vec!["a_j", "a_k"]);
    assert_eq!(trace.retrieved, 3);

    let l = trace
        .assessments
        .iter()
        .find(|a| a.semantics.device().as_str() == "a_l")
        .unwrap();
    assert_eq!(l.excluded, Some(Exclusion::NoMatch(Stage::Storage)));
    // The chain stops at the first failing stage.
    assert_eq!(l.verdict.as_ref().unwrap().stages.len(), 2);

    assert_eq!(decide(&trace.bundle, &DecisionPolicy::default()), Some(dev("a_k")));
    // Ignoring trends, the lexicographically first device wins instead.
    assert_eq!(
        decide(&trace.bundle, &DecisionPolicy::of_kind(PolicyKind::FirstMatch)),
        Some(dev("a_j"))
    );
}

#[test]
fn owner_is_never_offered_to_itself() {
    let (t, now) = c2_teacher();
    let task = twotsd_core::domain::Task::new(
        twotsd_core::domain::TaskId::new("c2b").unwrap(),
        dev("a_k"),
        VT(),
        50.0,
        1000.0,
        50.0,
    )
    .unwrap();
    let trace = t.evaluate_request(&task, now);
    let names: Vec<&str> = trace.bundle.devices().iter().map(|d| d.as_str()).collect();
    assert_eq!(names, vec!["a_j"]);
    assert!(trace
        .assessments
        .iter()
        .any(|a| a.excluded == Some(Exclusion::Owner)));
}

#[test]
fn stale_reports_empty_the_bundle() {
    let (t, now) = c2_teacher();
    let later = Timestamp(now.0 + 301_000);
    let trace = t.evaluate_request(&c2_task(), later);
    assert!(trace.bundle.is_empty());
    assert_eq!(decide(&trace.bundle, &DecisionPolicy::default()), None);
}

#[test]
fn same_story_over_the_wire() {
    let svc = Service::new(
        Arc::new(twotsd_core::teacher::Teacher::new(
            Box::new(
                twotsd_core::semantics::DeterministicEngine::new(twotsd_core::semantics::EngineConfig::default())
                    .unwrap(),
            ),
            Default::default(),
        )),
        ServiceOptions::default(),
    );
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();

    // The service stamps requests with wall-clock time, so reports must be
    // fresh relative to that.
    let wall = Timestamp::now_wall();
    let mut reporter = Client::connect(addr, Sender::Device(dev("a_i"))).unwrap();
    for p in c2_profiles() {
        let resp = reporter.request(Payload::ResourceReport(p.touched(wall)), wall).unwrap();
        assert!(matches!(resp.payload, Payload::Ack(_)), "{resp:?}");
    }
    for r in c2_records() {
        let at = r.at();
        let resp = reporter.request(Payload::PerformanceRecord(r), at).unwrap();
        assert!(matches!(resp.payload, Payload::Ack(_)), "{resp:?}");
    }

    let mut student = Client::connect(addr, Sender::Device(dev("a_i"))).unwrap();
    let resp = student.request(Payload::TaskRequest(c2_task()), wall).unwrap();
    assert_eq!(resp.sender, Sender::Server);
    let Payload::CandidateBundle(bundle) = resp.payload else {
        panic!("expected a bundle, got {:?}", resp.payload)
    };
    assert_eq!(bundle.task_id().as_str(), "c2");
    let names: Vec<&str> = bundle.devices().iter().map(|d| d.as_str()).collect();
    assert_eq!(names, vec!["a_j", "a_k"]);
    assert_eq!(decide(&bundle, &DecisionPolicy::default()), Some(dev("a_k")));

    // Same candidates and trends as the in-process teacher.
    let (t, now) = c2_teacher();
    let local = t.handle_task_request(&c2_task(), now);
    let sems = |b: &twotsd_core::teacher::CandidateBundle| -> Vec<_> {
        b.candidates().iter().map(|c| c.semantics.clone()).collect()
    };
    assert_eq!(sems(&bundle), sems(&local));
    svc.shutdown();
}
