//! TCP service mode for the teacher.
//!
//! One thread per connection. Frames on a connection are handled in order
//! and each response carries the request's `msg_id`.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use log::{debug, info, warn};

use crate::domain::Timestamp;
use crate::protocol::{self, AckBody, ErrorBody, Message, Payload, ProtocolError, Sender};
use crate::teacher::Teacher;

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Snapshot target; written after every `snapshot_every` state changes.
    pub snapshot_path: Option<PathBuf>,
    pub snapshot_every: u64,
}

/// Shared state of a running service.
pub struct Service {
    teacher: Arc<Teacher>,
    opts: ServiceOptions,
    writes: AtomicU64,
    stop: AtomicBool,
}

impl Service {
    pub fn new(teacher: Arc<Teacher>, opts: ServiceOptions) -> Arc<Self> {
        Arc::new(Service {
            teacher,
            opts,
            writes: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        })
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    /// Builds the response to one request. Never fails; problems become
    /// `error` messages.
    pub fn handle(&self, msg: Message, now: Timestamp) -> Message {
        let reply = |payload| Message {
            sender: Sender::Server,
            msg_id: msg.msg_id,
            sent_at: now,
            payload,
        };
        let error = |code: &str, message: String| {
            Payload::Error(ErrorBody {
                code: code.to_string(),
                message,
            })
        };
        let payload = match &msg.payload {
            Payload::ResourceReport(p) => match self.teacher.handle_resource_report(p.clone()) {
                Ok(()) => {
                    self.note_write();
                    Payload::Ack(AckBody::default())
                }
                Err(e) => error(e.code(), e.to_string()),
            },
            Payload::PerformanceRecord(r) => match self.teacher.ingest(r.clone()) {
                Ok((id, ts)) => {
                    self.note_write();
                    Payload::Ack(AckBody {
                        detail: Some(format!("record {id} stored; state {}", ts.state().as_str())),
                    })
                }
                Err(e) => error(e.code(), e.to_string()),
            },
            Payload::TaskRequest(task) => {
                Payload::CandidateBundle(self.teacher.handle_task_request(task, now))
            }
            other => error(
                "unexpected_kind",
                format!("server does not accept {} messages", other.kind().as_str()),
            ),
        };
        reply(payload)
    }

    fn note_write(&self) {
        let n = self.writes.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(path) = &self.opts.snapshot_path {
            if self.opts.snapshot_every > 0 && n.is_multiple_of(self.opts.snapshot_every) {
                if let Err(e) = self.teacher.memory().save(path) {
                    warn!("snapshot to {} failed: {e}", path.display());
                }
            }
        }
    }

    pub fn save_snapshot(&self) -> Result<(), crate::memory::MemoryError> {
        match &self.opts.snapshot_path {
            Some(p) => self.teacher.memory().save(p),
            None => Ok(()),
        }
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    fn serve_connection(self: Arc<Self>, stream: TcpStream) {
        let peer = stream.peer_addr().ok();
        let Ok(read_half) = stream.try_clone() else { return };
        let mut reader = BufReader::new(read_half);
        let mut writer = BufWriter::new(stream);
        loop {
            match protocol::read_frame(&mut reader) {
                Ok(Some(msg)) => {
                    let resp = self.handle(msg, Timestamp::now_wall());
                    if protocol::write_frame(&mut writer, &resp).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(ProtocolError::Io(e)) => {
                    debug!("connection {peer:?} io error: {e}");
                    break;
                }
                Err(e) => {
                    // The stream position is unknown after a bad frame, so
                    // report and hang up.
                    let resp = Message {
                        sender: Sender::Server,
                        msg_id: 0,
                        sent_at: Timestamp::now_wall(),
                        payload: Payload::Error(ErrorBody {
                            code: error_code(&e).into(),
                            message: e.to_string(),
                        }),
                    };
                    let _ = protocol::write_frame(&mut writer, &resp);
                    break;
                }
            }
        }
    }

    /// Accepts connections until [`Service::shutdown`] is called.
    pub fn run(self: Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        info!("teacher listening on {}", listener.local_addr()?);
        for conn in listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let svc = Arc::clone(&self);
                    thread::spawn(move || svc.serve_connection(stream));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        Ok(())
    }
}

pub fn error_code(e: &ProtocolError) -> &'static str {
    match e {
        ProtocolError::Malformed(_) => "malformed",
        ProtocolError::UnknownKind(_) => "unknown_kind",
        ProtocolError::VersionMismatch { .. } => "version_mismatch",
        ProtocolError::Io(_) => "io",
    }
}

/// Binds and runs the service on a background thread, returning the bound
/// address.
pub fn spawn(service: Arc<Service>, addr: impl ToSocketAddrs) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || service.run(listener));
    Ok(local)
}

/// Minimal blocking client, one connection.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    sender: Sender,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, sender: Sender) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            sender,
            next_id: 1,
        })
    }

    pub fn send(&mut self, payload: Payload, sent_at: Timestamp) -> Result<u64, ProtocolError> {
        let msg_id = self.next_id;
        self.next_id += 1;
        let msg = Message {
            sender: self.sender.clone(),
            msg_id,
            sent_at,
            payload,
        };
        protocol::write_frame(&mut self.writer, &msg)?;
        Ok(msg_id)
    }

    pub fn recv(&mut self) -> Result<Message, ProtocolError> {
        protocol::read_frame(&mut self.reader)?
            .ok_or_else(|| ProtocolError::Malformed("server closed the connection".into()))
    }

    pub fn request(&mut self, payload: Payload, sent_at: Timestamp) -> Result<Message, ProtocolError> {
        self.send(payload, sent_at)?;
        self.recv()
    }
}
