//! Lossy telemetry fan-out. Publishing never blocks: a subscriber whose
//! queue is full loses the message and its drop counter grows.

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender, TrySendError};
use parking_lot::Mutex;

use crate::protocol::{read_frame, write_frame, ClientMessage, Envelope, TelemetryMessage};

pub const DEFAULT_SUBSCRIBER_CAPACITY: usize = 256;

struct Subscriber {
    tx: Sender<Arc<Vec<u8>>>,
    dropped: Arc<AtomicU64>,
}

#[derive(Default)]
pub struct TelemetryBus {
    subscribers: Mutex<Vec<Subscriber>>,
    published: AtomicU64,
    dropped: AtomicU64,
}

pub struct Subscription {
    pub rx: Receiver<Arc<Vec<u8>>>,
    dropped: Arc<AtomicU64>,
}

impl Subscription {
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Next message payload, decoded.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Envelope> {
        let bytes = self.rx.recv_timeout(timeout).ok()?;
        Envelope::from_json(&bytes).ok()
    }
}

impl TelemetryBus {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn subscribe(&self, capacity: usize) -> Subscription {
        let (tx, rx) = bounded(capacity.max(1));
        let dropped = Arc::new(AtomicU64::new(0));
        self.subscribers.lock().push(Subscriber {
            tx,
            dropped: dropped.clone(),
        });
        Subscription { rx, dropped }
    }

    pub fn publish(&self, msg: &TelemetryMessage) {
        let payload = Arc::new(Envelope::new(msg.clone()).to_json());
        self.published.fetch_add(1, Ordering::Relaxed);
        self.subscribers.lock().retain(|s| match s.tx.try_send(payload.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                s.dropped.fetch_add(1, Ordering::Relaxed);
                self.dropped.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
    }

    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    /// Messages lost across all subscribers.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().len()
    }
}

/// TCP endpoint streaming the bus to each connected client. Clients may
/// send `hello` and `ping`; pings are answered with `pong`.
pub struct TelemetryServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TelemetryServer {
    pub fn start(addr: &str, bus: Arc<TelemetryBus>, capacity: usize) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let thread = std::thread::Builder::new()
            .name("telemetry-accept".into())
            .spawn(move || {
                while !stop2.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let sub = bus.subscribe(capacity);
                            let stop = stop2.clone();
                            let _ = std::thread::Builder::new()
                                .name("telemetry-client".into())
                                .spawn(move || serve_client(stream, sub, stop));
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(20))
                        }
                        Err(_) => std::thread::sleep(Duration::from_millis(20)),
                    }
                }
            })?;
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TelemetryServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_client(stream: TcpStream, sub: Subscription, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let (reply_tx, reply_rx) = unbounded::<Vec<u8>>();
    let reader = std::thread::spawn(move || {
        let mut r = BufReader::new(read_half);
        while let Ok(Some(frame)) = read_frame(&mut r) {
            if let Ok(ClientMessage::Ping { nonce }) = serde_json::from_slice(&frame) {
                let pong = Envelope::new(TelemetryMessage::Pong { nonce }).to_json();
                if reply_tx.send(pong).is_err() {
                    break;
                }
            }
        }
    });
    let mut w = BufWriter::new(stream);
    loop {
        if stop.load(Ordering::Acquire) {
            break;
        }
        let payload: Vec<u8> = select! {
            recv(sub.rx) -> m => match m { Ok(p) => p.to_vec(), Err(_) => break },
            recv(reply_rx) -> m => match m { Ok(p) => p, Err(_) => continue },
            default(Duration::from_millis(100)) => continue,
        };
        if write_frame(&mut w, &payload).and_then(|_| w.flush()).is_err() {
            break;
        }
    }
    let _ = w.get_ref().shutdown(std::net::Shutdown::Both);
    let _ = reader.join();
}

/// Minimal blocking client, used by tests and the CLI.
pub struct TelemetryClient {
    stream: BufReader<TcpStream>,
}

impl TelemetryClient {
    pub fn connect(addr: SocketAddr) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream: BufReader::new(stream),
        })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> std::io::Result<()> {
        self.stream.get_ref().set_read_timeout(t)
    }

    pub fn send(&mut self, msg: &ClientMessage) -> std::io::Result<()> {
        let mut s = self.stream.get_ref();
        write_frame(&mut s, &serde_json::to_vec(msg).expect("client message serializes"))
    }

    /// Next message; `Ok(None)` when the server closed the connection.
    pub fn recv(&mut self) -> std::io::Result<Option<Envelope>> {
        match read_frame(&mut self.stream)? {
            Some(bytes) => Envelope::from_json(&bytes)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::SessionState;

    fn msg() -> TelemetryMessage {
        TelemetryMessage::StateChange {
            state: SessionState::Idle,
        }
    }

    #[test]
    fn stalled_subscriber_drops_without_blocking() {
        let bus = TelemetryBus::new();
        let slow = bus.subscribe(4);
        let fast = bus.subscribe(1000);
        for _ in 0..100 {
            bus.publish(&msg());
        }
        assert_eq!(slow.rx.len(), 4);
        assert_eq!(slow.dropped(), 96);
        assert_eq!(fast.rx.len(), 100);
        assert_eq!(fast.dropped(), 0);
        assert_eq!(bus.dropped(), 96);
    }

    #[test]
    fn closed_subscribers_are_pruned() {
        let bus = TelemetryBus::new();
        drop(bus.subscribe(4));
        bus.publish(&msg());
        assert_eq!(bus.subscriber_count(), 0);
    }

    #[test]
    fn tcp_round_trip_and_ping() {
        let bus = TelemetryBus::new();
        let mut server = TelemetryServer::start("127.0.0.1:0", bus.clone(), 64).unwrap();
        let mut client = TelemetryClient::connect(server.addr()).unwrap();
        client.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        client.send(&ClientMessage::Ping { nonce: 9 }).unwrap();
        let pong = client.recv().unwrap().unwrap();
        assert_eq!(pong.message, TelemetryMessage::Pong { nonce: 9 });
        // the subscription exists once the pong arrived
        bus.publish(&msg());
        let got = client.recv().unwrap().unwrap();
        assert_eq!(got.message, msg());
        server.shutdown();
    }
}
