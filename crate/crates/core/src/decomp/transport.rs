use std::collections::VecDeque;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::error::CommError;

/// How long a blocking receive waits before reporting a stalled peer.
pub const DEFAULT_RECV_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone)]
pub struct Frame {
    pub tag: u32,
    pub source: u32,
    pub payload: Vec<u8>,
}

/// Point-to-point endpoint owned by one rank.
///
/// Messages between a fixed `(sender, receiver)` pair are delivered in send
/// order. `recv` matches on `(source, tag)`; frames that arrive for other
/// matches are buffered until asked for. Collective operations are built on
/// top of this in [`Comm`](super::Comm).
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, dest: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError>;
    fn recv(&mut self, source: usize, tag: u32) -> Result<Vec<u8>, CommError>;
}

/// Incoming frame queue with out-of-order buffering, shared by the transports.
pub(crate) struct Mailbox {
    rank: usize,
    inbox: Receiver<Frame>,
    pending: VecDeque<Frame>,
    timeout: Duration,
}

impl Mailbox {
    pub(crate) fn new(rank: usize, inbox: Receiver<Frame>, timeout: Duration) -> Self {
        Mailbox {
            rank,
            inbox,
            pending: VecDeque::new(),
            timeout,
        }
    }

    pub(crate) fn take(&mut self, source: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        let matches = |f: &Frame| f.source as usize == source && f.tag == tag;
        if let Some(pos) = self.pending.iter().position(matches) {
            return Ok(self.pending.remove(pos).unwrap().payload);
        }
        loop {
            match self.inbox.recv_timeout(self.timeout) {
                Ok(frame) if matches(&frame) => return Ok(frame.payload),
                Ok(frame) => self.pending.push_back(frame),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(CommError::Timeout {
                        rank: self.rank,
                        from: source,
                        tag,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(CommError::Disconnected {
                        rank: self.rank,
                        peer: source,
                    })
                }
            }
        }
    }
}

/// In-process transport: one execution context per rank, connected by
/// unbounded channels.
pub struct LocalTransport {
    rank: usize,
    peers: Vec<Sender<Frame>>,
    mailbox: Mailbox,
}

impl LocalTransport {
    pub fn create(size: usize) -> Vec<LocalTransport> {
        Self::create_with_timeout(size, DEFAULT_RECV_TIMEOUT)
    }

    pub fn create_with_timeout(size: usize, timeout: Duration) -> Vec<LocalTransport> {
        let (senders, receivers): (Vec<_>, Vec<_>) = (0..size).map(|_| unbounded()).unzip();
        receivers
            .into_iter()
            .enumerate()
            .map(|(rank, rx)| LocalTransport {
                rank,
                peers: senders.clone(),
                mailbox: Mailbox::new(rank, rx, timeout),
            })
            .collect()
    }
}

impl Transport for LocalTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.peers.len()
    }

    fn send(&mut self, dest: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        let frame = Frame {
            tag,
            source: self.rank as u32,
            payload,
        };
        self.peers[dest]
            .send(frame)
            .map_err(|_| CommError::Disconnected {
                rank: self.rank,
                peer: dest,
            })
    }

    fn recv(&mut self, source: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        self.mailbox.take(source, tag)
    }
}
