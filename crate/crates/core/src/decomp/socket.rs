//! Multi-process transport over local TCP sockets.
//!
//! Frames on the wire are `u32 tag | u32 source rank | u64 payload length |
//! payload`, all little-endian. Ranks rendezvous through a [`Coordinator`]
//! whose address is given by `MONC_COORD` (or passed explicitly): each rank
//! registers its listening address, receives the full address table, then
//! connects to every lower rank and accepts connections from every higher one.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Sender};

use super::transport::{Frame, Mailbox, Transport, DEFAULT_RECV_TIMEOUT};
use crate::error::CommError;

pub const COORD_ENV: &str = "MONC_COORD";

const TAG_REGISTER: u32 = 0xFFFF_0001;
const TAG_TABLE: u32 = 0xFFFF_0002;
const TAG_HELLO: u32 = 0xFFFF_0003;

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.tag.to_le_bytes())?;
    w.write_all(&frame.source.to_le_bytes())?;
    w.write_all(&(frame.payload.len() as u64).to_le_bytes())?;
    w.write_all(&frame.payload)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Frame> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    let tag = u32::from_le_bytes(head[0..4].try_into().unwrap());
    let source = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Frame {
        tag,
        source,
        payload,
    })
}

/// Rendezvous point that hands every rank the address table.
pub struct Coordinator {
    listener: TcpListener,
}

impl Coordinator {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        Ok(Coordinator {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn address(&self) -> io::Result<String> {
        Ok(self.listener.local_addr()?.to_string())
    }

    /// Blocks until `size` ranks have registered, then replies to each.
    pub fn serve(self, size: usize) -> Result<(), CommError> {
        let mut table = vec![String::new(); size];
        let mut streams = Vec::with_capacity(size);
        for _ in 0..size {
            let (mut stream, _) = self.listener.accept()?;
            let frame = read_frame(&mut stream)?;
            let rank = frame.source as usize;
            if frame.tag != TAG_REGISTER || rank >= size || !table[rank].is_empty() {
                return Err(CommError::Protocol(format!(
                    "bad registration from rank {rank} (tag {:#x})",
                    frame.tag
                )));
            }
            table[rank] = String::from_utf8_lossy(&frame.payload).into_owned();
            streams.push(stream);
        }
        let payload = table.join("\n").into_bytes();
        for mut s in streams {
            write_frame(
                &mut s,
                &Frame {
                    tag: TAG_TABLE,
                    source: u32::MAX,
                    payload: payload.clone(),
                },
            )?;
        }
        Ok(())
    }
}

pub struct SocketTransport {
    rank: usize,
    size: usize,
    writers: Vec<Option<BufWriter<TcpStream>>>,
    self_tx: Sender<Frame>,
    mailbox: Mailbox,
}

impl SocketTransport {
    pub fn from_env(rank: usize, size: usize) -> Result<Self, CommError> {
        let coord = std::env::var(COORD_ENV).map_err(|_| {
            CommError::Protocol(format!("{COORD_ENV} is not set; no rendezvous address"))
        })?;
        Self::connect(&coord, rank, size)
    }

    pub fn connect(coord: &str, rank: usize, size: usize) -> Result<Self, CommError> {
        Self::connect_with_timeout(coord, rank, size, DEFAULT_RECV_TIMEOUT)
    }

    pub fn connect_with_timeout(
        coord: &str,
        rank: usize,
        size: usize,
        timeout: Duration,
    ) -> Result<Self, CommError> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let me = listener.local_addr()?.to_string();

        let mut c = TcpStream::connect(coord)?;
        write_frame(
            &mut c,
            &Frame {
                tag: TAG_REGISTER,
                source: rank as u32,
                payload: me.into_bytes(),
            },
        )?;
        let table = read_frame(&mut c)?;
        if table.tag != TAG_TABLE {
            return Err(CommError::Protocol("coordinator sent no address table".into()));
        }
        let addrs: Vec<String> = String::from_utf8_lossy(&table.payload)
            .split('\n')
            .map(str::to_owned)
            .collect();
        if addrs.len() != size {
            return Err(CommError::Protocol(format!(
                "address table has {} entries, expected {size}",
                addrs.len()
            )));
        }

        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        for (peer, addr) in addrs.iter().enumerate().take(rank) {
            let mut s = TcpStream::connect(addr)?;
            write_frame(
                &mut s,
                &Frame {
                    tag: TAG_HELLO,
                    source: rank as u32,
                    payload: Vec::new(),
                },
            )?;
            streams[peer] = Some(s);
        }
        for _ in rank + 1..size {
            let (mut s, _) = listener.accept()?;
            let hello = read_frame(&mut s)?;
            let peer = hello.source as usize;
            if hello.tag != TAG_HELLO || peer <= rank || peer >= size || streams[peer].is_some() {
                return Err(CommError::Protocol(format!("unexpected hello from rank {peer}")));
            }
            streams[peer] = Some(s);
        }

        let (tx, rx) = unbounded();
        let mut writers = Vec::with_capacity(size);
        for (peer, s) in streams.into_iter().enumerate() {
            match s {
                Some(s) => {
                    s.set_nodelay(true)?;
                    let reader = s.try_clone()?;
                    let tx = tx.clone();
                    thread::Builder::new()
                        .name(format!("monc-rx-{rank}-{peer}"))
                        .spawn(move || pump(reader, tx))?;
                    writers.push(Some(BufWriter::new(s)));
                }
                None => writers.push(None),
            }
        }
        Ok(SocketTransport {
            rank,
            size,
            writers,
            self_tx: tx,
            mailbox: Mailbox::new(rank, rx, timeout),
        })
    }
}

fn pump(stream: TcpStream, tx: Sender<Frame>) {
    let mut r = BufReader::new(stream);
    while let Ok(frame) = read_frame(&mut r) {
        if tx.send(frame).is_err() {
            break;
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dest: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        let frame = Frame {
            tag,
            source: self.rank as u32,
            payload,
        };
        if dest == self.rank {
            return self.self_tx.send(frame).map_err(|_| CommError::Disconnected {
                rank: self.rank,
                peer: dest,
            });
        }
        let w = self
            .writers
            .get_mut(dest)
            .and_then(Option::as_mut)
            .ok_or(CommError::Disconnected {
                rank: self.rank,
                peer: dest,
            })?;
        write_frame(w, &frame).map_err(CommError::from)
    }

    fn recv(&mut self, source: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        self.mailbox.take(source, tag)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for w in self.writers.iter_mut().flatten() {
            let _ = w.flush();
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
    }
}
