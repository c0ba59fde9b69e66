mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;

use common::*;
use twotsd_core::domain::Timestamp;
use twotsd_core::memory::MemoryModule;
use twotsd_core::protocol::{encode, read_frame, AckBody, Message, Payload, Sender, PROTOCOL_VERSION};
use twotsd_core::semantics::{DeterministicEngine, EngineConfig};
use twotsd_core::service::{spawn, Client, Service, ServiceOptions};
use twotsd_core::teacher::Teacher;

fn service(opts: ServiceOptions) -> Arc<Service> {
    Service::new(
        Arc::new(Teacher::new(
            Box::new(DeterministicEngine::new(EngineConfig::default()).unwrap()),
            Default::default(),
        )),
        opts,
    )
}

fn error_code(m: &Message) -> &str {
    match &m.payload {
        Payload::Error(e) => &e.code,
        other => panic!("expected an error, got {other:?}"),
    }
}

#[test]
fn pipelined_requests_come_back_in_order_with_their_ids() {
    let svc = service(ServiceOptions::default());
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(addr, Sender::Device(dev("a_i"))).unwrap();
    let records = c2_records();
    let mut ids = Vec::new();
    for r in records.iter().cloned() {
        ids.push(c.send(Payload::PerformanceRecord(r), Timestamp(0)).unwrap());
    }
    for id in ids {
        let resp = c.recv().unwrap();
        assert_eq!(resp.msg_id, id);
        assert!(matches!(resp.payload, Payload::Ack(_)));
    }
    assert_eq!(svc.teacher().memory().stats().records, records.len());
    svc.shutdown();
}

#[test]
fn duplicate_records_are_refused() {
    let svc = service(ServiceOptions::default());
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(addr, Sender::Device(dev("a_i"))).unwrap();
    let r = c2_records().remove(0);
    c.request(Payload::PerformanceRecord(r.clone()), Timestamp(0)).unwrap();
    let resp = c.request(Payload::PerformanceRecord(r), Timestamp(0)).unwrap();
    assert_eq!(error_code(&resp), "duplicate_record");
    // The connection stays usable after a domain error.
    let resp = c.request(Payload::ResourceReport(c2_profiles().remove(0)), Timestamp(0)).unwrap();
    assert!(matches!(resp.payload, Payload::Ack(_)));
    svc.shutdown();
}

#[test]
fn server_only_kinds_are_rejected() {
    let svc = service(ServiceOptions::default());
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(addr, Sender::Device(dev("a_i"))).unwrap();
    let resp = c.request(Payload::Ack(AckBody::default()), Timestamp(0)).unwrap();
    assert_eq!(error_code(&resp), "unexpected_kind");
    let resp = c
        .request(
            Payload::CandidateBundle(twotsd_core::teacher::CandidateBundle::empty(
                twotsd_core::domain::TaskId::new("x").unwrap(),
                Timestamp(0),
            )),
            Timestamp(0),
        )
        .unwrap();
    assert_eq!(error_code(&resp), "unexpected_kind");
    svc.shutdown();
}

fn raw_exchange(addr: std::net::SocketAddr, bytes: &[u8]) -> (Message, bool) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(bytes).unwrap();
    let resp = read_frame(&mut s).unwrap().unwrap();
    let mut rest = Vec::new();
    let closed = matches!(s.read_to_end(&mut rest), Ok(0));
    (resp, closed)
}

#[test]
fn bad_frames_get_an_error_and_a_hangup() {
    let svc = service(ServiceOptions::default());
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();

    let mut wrong_version = encode(&Message {
        sender: Sender::Device(dev("a_i")),
        msg_id: 9,
        sent_at: Timestamp(0),
        payload: Payload::Ack(AckBody::default()),
    });
    wrong_version[4] = PROTOCOL_VERSION + 1;
    let (resp, closed) = raw_exchange(addr, &wrong_version);
    assert_eq!(error_code(&resp), "version_mismatch");
    assert!(closed);

    let body = br#"{"kind":"gossip","sender":{"device":"a"},"msg_id":1,"sent_at":0,"payload":{}}"#;
    let mut frame = ((body.len() + 1) as u32).to_be_bytes().to_vec();
    frame.push(PROTOCOL_VERSION);
    frame.extend_from_slice(body);
    let (resp, closed) = raw_exchange(addr, &frame);
    assert_eq!(error_code(&resp), "unknown_kind");
    assert!(closed);

    let mut junk = 5u32.to_be_bytes().to_vec();
    junk.push(PROTOCOL_VERSION);
    junk.extend_from_slice(b"{{{{");
    let (resp, closed) = raw_exchange(addr, &junk);
    assert_eq!(error_code(&resp), "malformed");
    assert!(closed);
    svc.shutdown();
}

#[test]
fn concurrent_clients_all_land() {
    let svc = service(ServiceOptions::default());
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();
    let handles: Vec<_> = ["a_k", "a_j", "a_l", "a_m"]
        .into_iter()
        .map(|d| {
            thread::spawn(move || {
                let mut c = Client::connect(addr, Sender::Device(dev(d))).unwrap();
                for r in history(d, false, 0) {
                    let resp = c.request(Payload::PerformanceRecord(r), Timestamp(0)).unwrap();
                    assert!(matches!(resp.payload, Payload::Ack(_)));
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let stats = svc.teacher().memory().stats();
    assert_eq!(stats.records, 40);
    assert_eq!(stats.leaves, 4);
    assert_eq!(stats.tree_nodes, 1 + 1 + 2 * 4);
    svc.shutdown();
}

#[test]
fn snapshots_follow_writes_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.json");
    let svc = service(ServiceOptions {
        snapshot_path: Some(path.clone()),
        snapshot_every: 5,
    });
    let addr = spawn(Arc::clone(&svc), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(addr, Sender::Device(dev("a_i"))).unwrap();
    for r in history("a_k", false, 0).into_iter().take(4) {
        c.request(Payload::PerformanceRecord(r), Timestamp(0)).unwrap();
    }
    assert!(!path.exists());
    c.request(Payload::ResourceReport(c2_profiles().remove(0)), Timestamp(0))
        .unwrap();
    assert!(path.exists());

    for r in history("a_k", false, 0).into_iter().skip(4) {
        c.request(Payload::PerformanceRecord(r), Timestamp(0)).unwrap();
    }
    svc.save_snapshot().unwrap();
    let reloaded = MemoryModule::load(&path).unwrap();
    assert_eq!(reloaded.stats(), svc.teacher().memory().stats());
    assert_eq!(reloaded.to_snapshot_bytes(), svc.teacher().memory().to_snapshot_bytes());
    svc.shutdown();
}
