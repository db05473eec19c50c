//! Point-to-point message transports.
//!
//! Contract shared by every transport: messages between a fixed ordered pair
//! of ranks arrive reliably and in order, and counters record the exact
//! payload byte count of every message (framing excluded).

use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use crate::error::{Error, Result};

pub const ELEM_BYTES: u64 = std::mem::size_of::<f64>() as u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub payload: Vec<f64>,
    /// How many of the payload elements are zero padding.
    pub padding: usize,
}

impl Message {
    pub fn bytes(&self) -> u64 {
        self.payload.len() as u64 * ELEM_BYTES
    }

    pub fn padding_bytes(&self) -> u64 {
        self.padding as u64 * ELEM_BYTES
    }
}

/// Byte and message counters for one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub padding_sent: u64,
    pub padding_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

impl LinkCounters {
    pub fn merged(self, o: LinkCounters) -> LinkCounters {
        LinkCounters {
            bytes_sent: self.bytes_sent + o.bytes_sent,
            bytes_received: self.bytes_received + o.bytes_received,
            padding_sent: self.padding_sent + o.padding_sent,
            padding_received: self.padding_received + o.padding_received,
            messages_sent: self.messages_sent + o.messages_sent,
            messages_received: self.messages_received + o.messages_received,
        }
    }

    /// Counts accumulated since the `earlier` snapshot.
    pub fn since(self, earlier: LinkCounters) -> LinkCounters {
        LinkCounters {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            padding_sent: self.padding_sent - earlier.padding_sent,
            padding_received: self.padding_received - earlier.padding_received,
            messages_sent: self.messages_sent - earlier.messages_sent,
            messages_received: self.messages_received - earlier.messages_received,
        }
    }

    pub fn record_send(&mut self, msg: &Message) {
        self.bytes_sent += msg.bytes();
        self.padding_sent += msg.padding_bytes();
        self.messages_sent += 1;
    }

    pub fn record_recv(&mut self, msg: &Message) {
        self.bytes_received += msg.bytes();
        self.padding_received += msg.padding_bytes();
        self.messages_received += 1;
    }
}

/// One rank's view of a transport.
pub trait Endpoint: std::marker::Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, dest: usize, msg: Message) -> Result<()>;
    /// Blocks until the next message from `src` arrives.
    fn recv(&mut self, src: usize) -> Result<Message>;
    fn counters(&self) -> LinkCounters;
}

fn link_error(peer: usize, reason: impl Into<String>) -> Error {
    Error::Transport {
        step: 0,
        peer,
        reason: reason.into(),
    }
}

/// In-process endpoint backed by one unbounded channel per ordered pair.
pub struct ChannelEndpoint {
    rank: usize,
    outgoing: Vec<Sender<Message>>,
    incoming: Vec<Receiver<Message>>,
    counters: LinkCounters,
}

/// Fully connected set of `p` channel endpoints.
pub fn channel_mesh(p: usize) -> Vec<ChannelEndpoint> {
    // senders[src][dst], receivers[dst][src]
    let mut senders: Vec<Vec<Sender<Message>>> = (0..p).map(|_| Vec::with_capacity(p)).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Message>>>> =
        (0..p).map(|_| (0..p).map(|_| None).collect()).collect();
    for (src, row) in senders.iter_mut().enumerate() {
        for dst_rx in receivers.iter_mut() {
            let (tx, rx) = channel();
            row.push(tx);
            dst_rx[src] = Some(rx);
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (outgoing, incoming))| ChannelEndpoint {
            rank,
            outgoing,
            incoming: incoming.into_iter().map(|r| r.expect("filled")).collect(),
            counters: LinkCounters::default(),
        })
        .collect()
}

impl Endpoint for ChannelEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.outgoing.len()
    }

    fn send(&mut self, dest: usize, msg: Message) -> Result<()> {
        self.counters.record_send(&msg);
        self.outgoing[dest]
            .send(msg)
            .map_err(|_| link_error(dest, "peer hung up"))
    }

    fn recv(&mut self, src: usize) -> Result<Message> {
        let msg = self.incoming[src]
            .recv()
            .map_err(|_| link_error(src, "peer hung up"))?;
        self.counters.record_recv(&msg);
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}

/// Endpoint speaking a length-prefixed frame over loopback TCP.
///
/// Frame: `u64 element count`, `u64 padding count`, then the elements as
/// little-endian `f64`. A reader thread per peer drains its socket into a
/// channel so that sends never wait on the peer's receive order.
pub struct TcpEndpoint {
    rank: usize,
    size: usize,
    writers: Vec<Option<BufWriter<TcpStream>>>,
    incoming: Vec<Option<Receiver<Result<Message>>>>,
    counters: LinkCounters,
}

fn write_frame<W: Write>(w: &mut W, msg: &Message) -> std::io::Result<()> {
    w.write_all(&(msg.payload.len() as u64).to_le_bytes())?;
    w.write_all(&(msg.padding as u64).to_le_bytes())?;
    for v in &msg.payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Message> {
    let len = read_u64(r)? as usize;
    let padding = read_u64(r)? as usize;
    let mut payload = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        payload.push(f64::from_le_bytes(b));
    }
    Ok(Message { payload, padding })
}

impl TcpEndpoint {
    /// Connect rank `rank` to every peer. Each rank listens on its own
    /// listener; lower ranks accept connections from higher ranks, which dial
    /// the addresses in `addrs` and announce themselves with their rank.
    pub fn establish(rank: usize, listener: TcpListener, addrs: &[SocketAddr]) -> Result<Self> {
        let size = addrs.len();
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        for (peer, addr) in addrs.iter().enumerate().take(rank) {
            let mut s = TcpStream::connect(addr).map_err(|e| link_error(peer, e.to_string()))?;
            s.write_all(&(rank as u64).to_le_bytes())
                .map_err(|e| link_error(peer, e.to_string()))?;
            streams[peer] = Some(s);
        }
        for _ in rank + 1..size {
            let (mut s, _) = listener
                .accept()
                .map_err(|e| link_error(rank, e.to_string()))?;
            let peer = read_u64(&mut s).map_err(|e| link_error(rank, e.to_string()))? as usize;
            if peer <= rank || peer >= size || streams[peer].is_some() {
                return Err(link_error(peer, "unexpected handshake"));
            }
            streams[peer] = Some(s);
        }
        let mut writers = Vec::with_capacity(size);
        let mut incoming = Vec::with_capacity(size);
        for (peer, stream) in streams.into_iter().enumerate() {
            match stream {
                None => {
                    writers.push(None);
                    incoming.push(None);
                }
                Some(s) => {
                    s.set_nodelay(true)
                        .map_err(|e| link_error(peer, e.to_string()))?;
                    let reader = s.try_clone().map_err(|e| link_error(peer, e.to_string()))?;
                    let (tx, rx) = channel();
                    thread::spawn(move || {
                        let mut r = BufReader::new(reader);
                        loop {
                            match read_frame(&mut r) {
                                Ok(m) => {
                                    if tx.send(Ok(m)).is_err() {
                                        break;
                                    }
                                }
                                Err(e) => {
                                    if e.kind() != std::io::ErrorKind::UnexpectedEof {
                                        let _ = tx.send(Err(link_error(peer, e.to_string())));
                                    }
                                    break;
                                }
                            }
                        }
                    });
                    writers.push(Some(BufWriter::new(s)));
                    incoming.push(Some(rx));
                }
            }
        }
        Ok(Self {
            rank,
            size,
            writers,
            incoming,
            counters: LinkCounters::default(),
        })
    }
}

/// Fully connected set of `p` loopback TCP endpoints, one per rank, each
/// established on its own thread.
pub fn tcp_mesh(p: usize) -> Result<Vec<TcpEndpoint>> {
    let listeners: Vec<TcpListener> = (0..p)
        .map(|r| {
            TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).map_err(|e| link_error(r, e.to_string()))
        })
        .collect::<Result<_>>()?;
    let addrs: Vec<SocketAddr> = listeners
        .iter()
        .enumerate()
        .map(|(r, l)| l.local_addr().map_err(|e| link_error(r, e.to_string())))
        .collect::<Result<_>>()?;
    thread::scope(|scope| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, l)| {
                let addrs = &addrs;
                scope.spawn(move || TcpEndpoint::establish(rank, l, addrs))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("establish thread panicked"))
            .collect()
    })
}

impl Endpoint for TcpEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dest: usize, msg: Message) -> Result<()> {
        let w = self.writers[dest]
            .as_mut()
            .ok_or_else(|| link_error(dest, "no link to self"))?;
        write_frame(w, &msg).map_err(|e| link_error(dest, e.to_string()))?;
        self.counters.record_send(&msg);
        Ok(())
    }

    fn recv(&mut self, src: usize) -> Result<Message> {
        let rx = self.incoming[src]
            .as_ref()
            .ok_or_else(|| link_error(src, "no link to self"))?;
        let msg = rx
            .recv()
            .map_err(|_| link_error(src, "connection closed"))??;
        self.counters.record_recv(&msg);
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}

/// Single-threaded message store keyed by (context, src, dst). Used by the
/// deterministic scheduler, where all ranks of possibly several concurrent
/// collectives are advanced from one thread.
#[derive(Debug, Default)]
pub struct Mailbox {
    queues: HashMap<(usize, usize, usize), VecDeque<Message>>,
    counters: HashMap<(usize, usize), LinkCounters>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn post(&mut self, ctx: usize, src: usize, dst: usize, msg: Message) {
        self.counters
            .entry((ctx, src))
            .or_default()
            .record_send(&msg);
        self.queues
            .entry((ctx, src, dst))
            .or_default()
            .push_back(msg);
    }

    pub fn available(&self, ctx: usize, src: usize, dst: usize) -> usize {
        self.queues.get(&(ctx, src, dst)).map_or(0, VecDeque::len)
    }

    pub fn take(&mut self, ctx: usize, src: usize, dst: usize) -> Option<Message> {
        let msg = self.queues.get_mut(&(ctx, src, dst))?.pop_front()?;
        self.counters
            .entry((ctx, dst))
            .or_default()
            .record_recv(&msg);
        Some(msg)
    }

    /// Totals for `rank` across every context.
    pub fn counters(&self, rank: usize) -> LinkCounters {
        self.counters
            .iter()
            .filter(|((_, r), _)| *r == rank)
            .fold(LinkCounters::default(), |acc, (_, c)| acc.merged(*c))
    }

    pub fn context_counters(&self, ctx: usize, rank: usize) -> LinkCounters {
        self.counters.get(&(ctx, rank)).copied().unwrap_or_default()
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(v: &[f64]) -> Message {
        Message {
            payload: v.to_vec(),
            padding: 0,
        }
    }

    fn exercise<E: Endpoint + 'static>(mut eps: Vec<E>) {
        let p = eps.len();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let last = p - 1;
        a.send(last, msg(&[1.0, 2.0])).unwrap();
        a.send(last, msg(&[3.0])).unwrap();
        b.send(last - 1, msg(&[4.0; 3])).unwrap();
        assert_eq!(b.recv(last - 1).unwrap().payload, vec![1.0, 2.0]);
        assert_eq!(b.recv(last - 1).unwrap().payload, vec![3.0]);
        assert_eq!(a.recv(last).unwrap().payload, vec![4.0; 3]);
        assert_eq!(a.counters().bytes_sent, 24);
        assert_eq!(b.counters().bytes_received, 24);
        assert_eq!(a.counters().bytes_received, 24);
    }

    #[test]
    fn channel_fifo_and_counters() {
        exercise(channel_mesh(2));
    }

    #[test]
    fn tcp_fifo_and_counters() {
        exercise(tcp_mesh(3).unwrap());
    }

    #[test]
    fn frame_round_trip() {
        let m = Message {
            payload: vec![1.5, -0.0, f64::MAX],
            padding: 1,
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &m).unwrap();
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn mailbox_contexts_are_separate() {
        let mut mb = Mailbox::new();
        mb.post(0, 0, 1, msg(&[1.0]));
        mb.post(1, 0, 1, msg(&[2.0]));
        assert_eq!(mb.take(1, 0, 1).unwrap().payload, vec![2.0]);
        assert_eq!(mb.take(0, 0, 1).unwrap().payload, vec![1.0]);
        assert!(mb.take(0, 0, 1).is_none());
        assert_eq!(mb.counters(0).bytes_sent, 16);
        assert_eq!(mb.counters(1).bytes_received, 16);
        assert_eq!(mb.context_counters(1, 0).bytes_sent, 8);
    }
}
