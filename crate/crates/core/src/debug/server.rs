//! Serving a [`Session`] to any number of clients.
//!
//! One engine thread owns the session and applies requests strictly in
//! arrival order, always between instructions. Client connections only queue
//! requests; the one exception is `pause`, which also raises the session's
//! pause flag so a running `continue` stops at the next boundary.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::Value;
use tungstenite::Message;

use super::protocol::{handle_request, handshake, Reply, Request};
use super::session::Session;
use super::TaskId;

enum Job {
    Connect { client: u64, tx: Sender<String> },
    Line { client: u64, line: String },
    Disconnect { client: u64 },
    Shutdown,
}

/// Handle on a running engine thread. Cheap to clone.
#[derive(Clone)]
pub struct Hub {
    jobs: Sender<Job>,
    pause: Arc<AtomicBool>,
    next_client: Arc<AtomicU64>,
    engine: Arc<Mutex<Option<JoinHandle<Session>>>>,
}

impl Hub {
    /// Move `session` onto its own thread.
    pub fn start(session: Session) -> Hub {
        let (jobs, rx) = mpsc::channel();
        let pause = session.pause_flag();
        let flag = pause.clone();
        let engine = thread::Builder::new()
            .name("ervm-debug-engine".into())
            .spawn(move || run_engine(session, rx, flag))
            .expect("spawn debug engine");
        Hub {
            jobs,
            pause,
            next_client: Arc::default(),
            engine: Arc::new(Mutex::new(Some(engine))),
        }
    }

    /// A new client. Its first message is the handshake.
    pub fn connect(&self) -> Client {
        let client = self.next_client.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        let _ = self.jobs.send(Job::Connect { client, tx });
        Client {
            sender: ClientSender {
                client,
                jobs: self.jobs.clone(),
                pause: self.pause.clone(),
            },
            rx,
        }
    }

    /// Stop the engine after the requests already queued and hand the
    /// session back. `None` if it was already shut down.
    pub fn shutdown(&self) -> Option<Session> {
        let _ = self.jobs.send(Job::Shutdown);
        let handle = self.engine.lock().unwrap().take()?;
        Some(handle.join().expect("debug engine panicked"))
    }
}

fn run_engine(mut session: Session, jobs: Receiver<Job>, pause: Arc<AtomicBool>) -> Session {
    let mut clients: BTreeMap<u64, (Sender<String>, Option<TaskId>)> = BTreeMap::new();
    for job in jobs {
        match job {
            Job::Connect { client, tx } => {
                let _ = tx.send(handshake(&session).to_string());
                clients.insert(client, (tx, None));
            }
            Job::Disconnect { client } => {
                clients.remove(&client);
            }
            Job::Shutdown => break,
            Job::Line { client, line } => {
                let Some((tx, focus)) = clients.get_mut(&client) else {
                    continue;
                };
                let reply = match Request::parse(&line) {
                    Ok(req) => {
                        let r = handle_request(&mut session, focus, &req);
                        if req.cmd == "pause" {
                            pause.store(false, Ordering::Relaxed);
                        }
                        r
                    }
                    Err(e) => Reply::error(&Value::Null, "usage", e),
                };
                if tx.send(reply.response.to_string()).is_err() || reply.close {
                    clients.remove(&client);
                }
                if let Some(stop) = reply.stop {
                    let msg = stop.to_message().to_string();
                    clients.retain(|_, (tx, _)| tx.send(msg.clone()).is_ok());
                }
            }
        }
    }
    session
}

/// The sending half of a [`Client`].
#[derive(Clone)]
pub struct ClientSender {
    client: u64,
    jobs: Sender<Job>,
    pause: Arc<AtomicBool>,
}

impl ClientSender {
    /// Queue one request line. `false` once the engine is gone.
    pub fn send_line(&self, line: &str) -> bool {
        if is_pause(line) {
            self.pause.store(true, Ordering::Relaxed);
        }
        self.jobs
            .send(Job::Line {
                client: self.client,
                line: line.to_string(),
            })
            .is_ok()
    }

    pub fn disconnect(&self) {
        let _ = self.jobs.send(Job::Disconnect { client: self.client });
    }
}

fn is_pause(line: &str) -> bool {
    // Cheap pre-filter before parsing on the connection thread.
    line.contains("pause") && Request::parse(line).is_ok_and(|r| r.cmd == "pause")
}

/// One protocol client: queue requests, receive responses and stop events.
pub struct Client {
    sender: ClientSender,
    rx: Receiver<String>,
}

impl Client {
    pub fn send_line(&self, line: &str) -> bool {
        self.sender.send_line(line)
    }

    /// Next outbound message; `None` once the engine dropped this client.
    pub fn recv(&self) -> Option<String> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, d: Duration) -> Result<String, RecvTimeoutError> {
        self.rx.recv_timeout(d)
    }

    /// Send `req` and wait for its response, handing every other message
    /// (stop events) to `other`.
    pub fn request(&self, req: &Value, mut other: impl FnMut(Value)) -> Option<Value> {
        let id = req.get("id").cloned().unwrap_or(Value::Null);
        if !self.send_line(&req.to_string()) {
            return None;
        }
        loop {
            let msg: Value = serde_json::from_str(&self.recv()?).expect("engine sends JSON");
            if msg.get("ok").is_some() && msg["id"] == id {
                return Some(msg);
            }
            other(msg);
        }
    }

    pub fn split(self) -> (ClientSender, Receiver<String>) {
        (self.sender, self.rx)
    }
}

/// Accept newline-delimited JSON clients on `listener`. Connections close
/// when the hub shuts down; the accept thread lives as long as the listener.
pub fn serve_tcp(listener: TcpListener, hub: Hub) -> JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let hub = hub.clone();
            thread::spawn(move || {
                let _ = tcp_client(stream, &hub);
            });
        }
    })
}

fn tcp_client(stream: TcpStream, hub: &Hub) -> io::Result<()> {
    let (sender, rx) = hub.connect().split();
    let mut out = stream.try_clone()?;
    let writer = thread::spawn(move || {
        for msg in rx {
            if writeln!(out, "{msg}").and_then(|()| out.flush()).is_err() {
                break;
            }
        }
        let _ = out.shutdown(Shutdown::Both);
    });
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if !line.trim().is_empty() && !sender.send_line(&line) {
            break;
        }
    }
    sender.disconnect();
    let _ = writer.join();
    Ok(())
}

/// Accept WebSocket clients on `listener`; each text message is one
/// request, and every outbound message is one text message.
pub fn serve_ws(listener: TcpListener, hub: Hub) -> JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let hub = hub.clone();
            thread::spawn(move || {
                let _ = ws_client(stream, &hub);
            });
        }
    })
}

fn ws_client(stream: TcpStream, hub: &Hub) -> Result<(), Box<dyn std::error::Error>> {
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    // Reads time out so outbound messages are not held up by a quiet client.
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(20)))?;
    let (sender, rx) = hub.connect().split();
    let result = loop {
        match ws.read() {
            Ok(Message::Text(t)) => {
                if !sender.send_line(&t) {
                    break Ok(());
                }
            }
            Ok(Message::Close(_)) => break Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => break Err(e),
        }
        let mut closed = false;
        loop {
            match rx.try_recv() {
                Ok(msg) => ws.send(Message::Text(msg))?,
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    closed = true;
                    break;
                }
            }
        }
        if closed {
            let _ = ws.close(None);
            let _ = ws.flush();
            break Ok(());
        }
    };
    sender.disconnect();
    Ok(result?)
}
