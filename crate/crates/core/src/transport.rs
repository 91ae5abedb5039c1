//! Byte-stream connections for the wire protocol: loopback/remote TCP, or an
//! in-process duplex pipe with the same semantics.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

type CloseFn = Arc<dyn Fn() + Send + Sync>;

/// Closes a connection from outside the threads using it.
#[derive(Clone)]
pub struct Closer {
    both: CloseFn,
    write: CloseFn,
}

impl Closer {
    /// Closes both directions, waking any blocked reader.
    pub fn close(&self) {
        (self.both)()
    }

    /// Signals end of stream to the peer after data already written; reading
    /// continues until the peer closes.
    pub fn close_write(&self) {
        (self.write)()
    }
}

impl fmt::Debug for Closer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Closer")
    }
}

pub struct Connection {
    pub reader: Box<dyn Read + Send>,
    pub writer: Box<dyn Write + Send>,
    pub closer: Closer,
    pub peer: String,
}

impl Connection {
    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "tcp".into());
        let reader = stream.try_clone()?;
        let both = stream.try_clone()?;
        let half = stream.try_clone()?;
        Ok(Connection {
            reader: Box::new(reader),
            writer: Box::new(stream),
            closer: Closer {
                both: Arc::new(move || {
                    let _ = both.shutdown(Shutdown::Both);
                }),
                write: Arc::new(move || {
                    let _ = half.shutdown(Shutdown::Write);
                }),
            },
            peer,
        })
    }
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).finish()
    }
}

#[derive(Default)]
struct PipeState {
    buf: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

impl Pipe {
    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }
}

struct PipeReader(Arc<Pipe>);
struct PipeWriter(Arc<Pipe>);

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        let mut state = self.0.state.lock().unwrap();
        while state.buf.is_empty() && !state.closed {
            state = self.0.ready.wait(state).unwrap();
        }
        let n = out.len().min(state.buf.len());
        for (slot, byte) in out.iter_mut().zip(state.buf.drain(..n)) {
            *slot = byte;
        }
        Ok(n)
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        self.0.close();
    }
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        let mut state = self.0.state.lock().unwrap();
        if state.closed {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        state.buf.extend(data);
        self.0.ready.notify_all();
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.0.close();
    }
}

/// Two connected in-memory endpoints.
pub fn memory_pair(label: &str) -> (Connection, Connection) {
    let up = Arc::new(Pipe::default());
    let down = Arc::new(Pipe::default());
    let both: CloseFn = {
        let (up, down) = (Arc::clone(&up), Arc::clone(&down));
        Arc::new(move || {
            up.close();
            down.close();
        })
    };
    let half = |pipe: &Arc<Pipe>| -> CloseFn {
        let pipe = Arc::clone(pipe);
        Arc::new(move || pipe.close())
    };
    let client = Connection {
        reader: Box::new(PipeReader(Arc::clone(&down))),
        writer: Box::new(PipeWriter(Arc::clone(&up))),
        closer: Closer {
            both: Arc::clone(&both),
            write: half(&up),
        },
        peer: format!("mem:{label}:server"),
    };
    let server = Connection {
        closer: Closer {
            both,
            write: half(&down),
        },
        reader: Box::new(PipeReader(up)),
        writer: Box::new(PipeWriter(down)),
        peer: format!("mem:{label}:client"),
    };
    (client, server)
}

pub enum Listener {
    Tcp(TcpListener),
    Memory(Receiver<Connection>),
}

impl Listener {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Listener::Tcp(listener))
    }

    /// An in-process listener and the connector that reaches it.
    pub fn memory() -> (Self, Connector) {
        let (tx, rx) = mpsc::channel();
        (
            Listener::Memory(rx),
            Connector::Memory(MemoryConnector {
                tx: Arc::new(Mutex::new(tx)),
            }),
        )
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        match self {
            Listener::Tcp(l) => l.local_addr().ok(),
            Listener::Memory(_) => None,
        }
    }

    /// A connector reaching this listener, for tests and the simulator.
    pub fn connector(&self) -> Option<Connector> {
        self.local_addr().map(|a| Connector::Tcp(a.to_string()))
    }

    /// Waits up to `timeout` for one connection.
    pub fn accept_timeout(&self, timeout: Duration) -> io::Result<Option<Connection>> {
        match self {
            Listener::Tcp(listener) => {
                let deadline = Instant::now() + timeout;
                loop {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            stream.set_nonblocking(false)?;
                            return Connection::tcp(stream).map(Some);
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            let now = Instant::now();
                            if now >= deadline {
                                return Ok(None);
                            }
                            thread::sleep((deadline - now).min(Duration::from_millis(5)));
                        }
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            Listener::Memory(rx) => match rx.recv_timeout(timeout) {
                Ok(conn) => Ok(Some(conn)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    thread::sleep(timeout);
                    Ok(None)
                }
            },
        }
    }
}

#[derive(Clone)]
pub struct MemoryConnector {
    tx: Arc<Mutex<Sender<Connection>>>,
}

impl MemoryConnector {
    /// A fresh listener that this connector (and its clones) now reach; the
    /// previous listener stops receiving connections.
    pub fn rebind(&self) -> Listener {
        let (tx, rx) = mpsc::channel();
        *self.tx.lock().unwrap() = tx;
        Listener::Memory(rx)
    }
}

/// How an agent reaches its coordinator.
#[derive(Clone)]
pub enum Connector {
    Tcp(String),
    Memory(MemoryConnector),
}

impl Connector {
    pub fn connect(&self) -> io::Result<Connection> {
        match self {
            Connector::Tcp(addr) => Connection::tcp(TcpStream::connect(addr.as_str())?),
            Connector::Memory(m) => {
                let (client, server) = memory_pair("agent");
                m.tx
                    .lock()
                    .unwrap()
                    .send(server)
                    .map_err(|_| io::Error::from(io::ErrorKind::ConnectionRefused))?;
                Ok(client)
            }
        }
    }
}

impl fmt::Debug for Connector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Connector::Tcp(a) => write!(f, "tcp://{a}"),
            Connector::Memory(_) => f.write_str("memory"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{write_message, Message, MessageReader};

    #[test]
    fn memory_pipe_carries_messages_and_closes() {
        let (listener, connector) = Listener::memory();
        let mut client = connector.connect().unwrap();
        let server = listener
            .accept_timeout(Duration::from_secs(1))
            .unwrap()
            .unwrap();
        write_message(&mut client.writer, &Message::hello("a", None)).unwrap();
        let mut reader = MessageReader::new(server.reader);
        assert_eq!(reader.next_message().unwrap(), Some(Message::hello("a", None)));
        let waiter = thread::spawn(move || reader.next_message().unwrap());
        thread::sleep(Duration::from_millis(20));
        client.closer.close();
        assert_eq!(waiter.join().unwrap(), None);
        assert!(write_message(&mut client.writer, &Message::exhausted("j")).is_err());
    }

    #[test]
    fn tcp_listener_times_out_then_accepts() {
        let listener = Listener::bind("127.0.0.1:0").unwrap();
        assert!(listener
            .accept_timeout(Duration::from_millis(20))
            .unwrap()
            .is_none());
        let connector = listener.connector().unwrap();
        let mut client = connector.connect().unwrap();
        let server = listener
            .accept_timeout(Duration::from_secs(2))
            .unwrap()
            .unwrap();
        write_message(&mut client.writer, &Message::exhausted("j9")).unwrap();
        let mut reader = MessageReader::new(server.reader);
        assert_eq!(reader.next_message().unwrap(), Some(Message::exhausted("j9")));
        server.closer.close();
        let mut r2 = MessageReader::new(client.reader);
        assert_eq!(r2.next_message().unwrap(), None);
    }
}
