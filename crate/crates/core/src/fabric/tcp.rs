//! Fabric backed by a memory node over TCP.
//!
//! Each channel owns one connection; the node serves a connection in order,
//! so channel FIFO and fences come from TCP ordering. A reader thread per
//! channel collects responses; READ data lands in the caller's slice when the
//! completion is retired by `poll` or `wait`, as on the simulator. Control
//! operations (alloc, free, atomics, snapshot) use a separate connection.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use log::debug;
use parking_lot::{Condvar, Mutex};

use super::{
    Channel, ChannelId, Completion, CompletionStatus, Fabric, FabricError, FabricOp, FabricStats, LatencyModel, LocalSlice, OpId, OpKind,
    RemoteAddr, StatCounters,
};
use crate::clock::{Clock, Nanos};
use crate::memnode::wire::{self, Frame, Opcode, WireError};

impl From<WireError> for FabricError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io(e) => FabricError::Io(e),
            other => FabricError::Protocol(other.to_string()),
        }
    }
}

struct Control {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
}

impl Control {
    fn call(&mut self, mut req: Frame) -> Result<Frame, FabricError> {
        req.request_id = self.next_id;
        self.next_id += 1;
        req.write_to(&mut self.writer)?;
        self.writer.flush()?;
        let resp = wire::read_response(&mut self.reader)?.ok_or(FabricError::Disconnected)?;
        if resp.request_id != req.request_id {
            return Err(FabricError::Protocol(format!(
                "response id {} for request {}",
                resp.request_id, req.request_id
            )));
        }
        match resp.error_code() {
            Some(code) => Err(FabricError::Status(code)),
            None if resp.is_error() => Err(FabricError::Protocol("unknown status code".into())),
            None => Ok(resp),
        }
    }
}

struct Shared {
    addr: SocketAddr,
    control: Mutex<Control>,
    capacity: u64,
    model: LatencyModel,
    clock: Clock,
    stats: StatCounters,
    next_channel: AtomicU32,
}

#[derive(Clone)]
pub struct TcpFabric {
    shared: Arc<Shared>,
}

fn connect(addr: SocketAddr) -> Result<TcpStream, FabricError> {
    let s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// Maps a control-path error status back to the typed error the simulator
/// would raise for the same request.
fn typed(err: FabricError, offset: u64, length: u64) -> FabricError {
    use super::ErrorCode as C;
    match err {
        FabricError::Status(C::OutOfBounds) => FabricError::OutOfBounds { offset, length },
        FabricError::Status(C::RemoteOom) => FabricError::RemoteOom { requested: length },
        FabricError::Status(C::DoubleFree) => FabricError::DoubleFree { offset },
        FabricError::Status(C::Misaligned) => FabricError::Misaligned { offset },
        FabricError::Status(C::BadRequest) => FabricError::InvalidLength(length),
        other => other,
    }
}

impl TcpFabric {
    pub fn connect(addr: impl ToSocketAddrs, model: LatencyModel) -> Result<Self, FabricError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| FabricError::Protocol("no address to connect to".into()))?;
        let stream = connect(addr)?;
        let mut control = Control {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            next_id: 1,
        };
        let pong = control.call(Frame::request(Opcode::Ping, 0, 0, 0))?;
        Ok(TcpFabric {
            shared: Arc::new(Shared {
                addr,
                control: Mutex::new(control),
                capacity: pong.offset,
                model,
                clock: Clock::new_wall(),
                stats: StatCounters::default(),
                next_channel: AtomicU32::new(0),
            }),
        })
    }

    pub fn ping(&self) -> Result<u64, FabricError> {
        Ok(self.shared.control.lock().call(Frame::request(Opcode::Ping, 0, 0, 0))?.offset)
    }

    fn atomic(&self, op: Opcode, addr: RemoteAddr, words: &[u64]) -> Result<u64, FabricError> {
        let payload: Vec<u8> = words.iter().flat_map(|w| w.to_be_bytes()).collect();
        let resp = self
            .shared
            .control
            .lock()
            .call(Frame::with_payload(op, 0, addr.offset, payload))
            .map_err(|e| typed(e, addr.offset, 8))?;
        let prev: [u8; 8] = resp
            .payload
            .as_slice()
            .try_into()
            .map_err(|_| FabricError::Protocol("atomic response is not 8 bytes".into()))?;
        Ok(u64::from_be_bytes(prev))
    }
}

impl Fabric for TcpFabric {
    fn open_channel(&self) -> Result<Box<dyn Channel>, FabricError> {
        let s = &self.shared;
        Ok(Box::new(TcpChannel::open(
            s.next_channel.fetch_add(1, Ordering::Relaxed),
            self.shared.clone(),
        )?))
    }

    fn remote_alloc(&self, size: u64) -> Result<RemoteAddr, FabricError> {
        if size == 0 {
            return Err(FabricError::InvalidLength(0));
        }
        let resp = self
            .shared
            .control
            .lock()
            .call(Frame::request(Opcode::Alloc, 0, 0, size))
            .map_err(|e| typed(e, 0, size))?;
        Ok(RemoteAddr::new(resp.offset))
    }

    fn remote_free(&self, addr: RemoteAddr) -> Result<(), FabricError> {
        self.shared
            .control
            .lock()
            .call(Frame::request(Opcode::Free, 0, addr.offset, 0))
            .map_err(|e| typed(e, addr.offset, 0))?;
        Ok(())
    }

    fn atomic_cas(&self, addr: RemoteAddr, expected: u64, desired: u64) -> Result<u64, FabricError> {
        let prev = self.atomic(Opcode::Cas, addr, &[expected, desired])?;
        self.shared.stats.record(OpKind::AtomicCas { expected, desired }, 8);
        Ok(prev)
    }

    fn atomic_fadd(&self, addr: RemoteAddr, delta: u64) -> Result<u64, FabricError> {
        let prev = self.atomic(Opcode::Fadd, addr, &[delta])?;
        self.shared.stats.record(OpKind::AtomicFadd { delta }, 8);
        Ok(prev)
    }

    fn snapshot(&self, path: &Path) -> Result<(), FabricError> {
        let p = path
            .to_str()
            .ok_or_else(|| FabricError::Protocol("snapshot path is not UTF-8".into()))?;
        self.shared
            .control
            .lock()
            .call(Frame::with_payload(Opcode::Snapshot, 0, 0, p.as_bytes().to_vec()))?;
        Ok(())
    }

    fn capacity(&self) -> u64 {
        self.shared.capacity
    }

    fn max_transfer_bytes(&self) -> u64 {
        self.shared.model.max_transfer_bytes()
    }

    fn model(&self) -> &LatencyModel {
        &self.shared.model
    }

    fn clock(&self) -> Clock {
        self.shared.clock.clone()
    }

    fn stats(&self) -> FabricStats {
        self.shared.stats.snapshot()
    }
}

#[derive(Default)]
struct Inbox {
    frames: VecDeque<Frame>,
    closed: bool,
}

struct PendingOp {
    op_id: OpId,
    kind: OpKind,
    local: LocalSlice,
    signaled: bool,
    truncated: bool,
}

pub struct TcpChannel {
    id: ChannelId,
    shared: Arc<Shared>,
    stream: TcpStream,
    writer: BufWriter<TcpStream>,
    inbox: Arc<(Mutex<Inbox>, Condvar)>,
    reader: Option<std::thread::JoinHandle<()>>,
    next_op: OpId,
    pending: VecDeque<PendingOp>,
    ready: VecDeque<Completion>,
}

impl TcpChannel {
    fn open(id: ChannelId, shared: Arc<Shared>) -> Result<Self, FabricError> {
        let stream = connect(shared.addr)?;
        let inbox: Arc<(Mutex<Inbox>, Condvar)> = Arc::default();
        let reader = {
            let inbox = inbox.clone();
            let mut r = BufReader::with_capacity(1 << 16, stream.try_clone()?);
            std::thread::Builder::new().name(format!("fabric-ch{id}")).spawn(move || {
                loop {
                    match wire::read_response(&mut r) {
                        Ok(Some(f)) => {
                            inbox.0.lock().frames.push_back(f);
                            inbox.1.notify_all();
                        }
                        Ok(None) => break,
                        Err(e) => {
                            debug!("channel {id} reader stopped: {e}");
                            break;
                        }
                    }
                }
                inbox.0.lock().closed = true;
                inbox.1.notify_all();
            })?
        };
        Ok(TcpChannel {
            id,
            shared,
            writer: BufWriter::with_capacity(1 << 16, stream.try_clone()?),
            stream,
            inbox,
            reader: Some(reader),
            next_op: 1,
            pending: VecDeque::new(),
            ready: VecDeque::new(),
        })
    }

    fn retire_frame(&mut self, f: Frame) -> Result<(), FabricError> {
        let p = self
            .pending
            .pop_front()
            .ok_or_else(|| FabricError::Protocol(format!("unexpected response {}", f.request_id)))?;
        if p.op_id != f.request_id {
            return Err(FabricError::Protocol(format!(
                "response {} out of order, expected {}",
                f.request_id, p.op_id
            )));
        }
        let status = if f.is_error() {
            CompletionStatus::RemoteError
        } else if p.truncated {
            CompletionStatus::Truncated
        } else {
            CompletionStatus::Ok
        };
        if !f.is_error() {
            match p.kind {
                OpKind::Read => {
                    p.local.land(&f.payload);
                }
                OpKind::AtomicCas { .. } | OpKind::AtomicFadd { .. } => {
                    let prev: [u8; 8] = f
                        .payload
                        .as_slice()
                        .try_into()
                        .map_err(|_| FabricError::Protocol("atomic response is not 8 bytes".into()))?;
                    p.local.land(&u64::from_be_bytes(prev).to_le_bytes());
                }
                OpKind::Write => {}
            }
        }
        if p.signaled {
            self.ready.push_back(Completion {
                op_id: p.op_id,
                status,
                completed_at: self.shared.clock.now(),
            });
        }
        Ok(())
    }

    /// Retires whatever has arrived. With `block`, waits for at least one
    /// response first.
    fn pump(&mut self, block: bool) -> Result<(), FabricError> {
        let frames: Vec<Frame> = {
            let (lock, cv) = &*self.inbox;
            let mut inbox = lock.lock();
            if block {
                while inbox.frames.is_empty() && !inbox.closed {
                    cv.wait(&mut inbox);
                }
                if inbox.frames.is_empty() {
                    return Err(FabricError::Disconnected);
                }
            }
            inbox.frames.drain(..).collect()
        };
        for f in frames {
            self.retire_frame(f)?;
        }
        Ok(())
    }
}

impl Channel for TcpChannel {
    fn id(&self) -> ChannelId {
        self.id
    }

    fn submit(&mut self, op: FabricOp) -> Result<OpId, FabricError> {
        op.validate(self.shared.capacity, self.shared.model.max_transfer_bytes())?;
        let op_id = self.next_op;
        let truncated = (op.local.len as u64) < op.length;
        let addr = op.remote.offset;
        let frame = match op.kind {
            // A short source buffer has nothing to send; a PING keeps the
            // response stream aligned with the pending queue.
            OpKind::Write if truncated => Frame::request(Opcode::Ping, op_id, 0, 0),
            OpKind::Write => Frame::with_payload(Opcode::Write, op_id, addr, op.local.to_vec()),
            OpKind::Read => Frame::request(Opcode::Read, op_id, addr, op.length),
            OpKind::AtomicCas { expected, desired } => {
                let mut p = expected.to_be_bytes().to_vec();
                p.extend_from_slice(&desired.to_be_bytes());
                Frame::with_payload(Opcode::Cas, op_id, addr, p)
            }
            OpKind::AtomicFadd { delta } => Frame::with_payload(Opcode::Fadd, op_id, addr, delta.to_be_bytes().to_vec()),
        };
        frame.write_to(&mut self.writer)?;
        self.writer.flush()?;
        self.next_op += 1;
        self.shared.stats.record(op.kind, op.length);
        self.pending.push_back(PendingOp {
            op_id,
            kind: op.kind,
            local: op.local,
            signaled: op.signaled,
            truncated,
        });
        Ok(op_id)
    }

    fn poll(&mut self, max: usize) -> Vec<Completion> {
        if let Err(e) = self.pump(false) {
            debug!("channel {} poll: {e}", self.id);
        }
        let n = max.min(self.ready.len());
        self.ready.drain(..n).collect()
    }

    fn wait(&mut self, op_id: OpId) -> Result<Completion, FabricError> {
        loop {
            if let Some(i) = self.ready.iter().position(|c| c.op_id == op_id) {
                return Ok(self.ready.remove(i).unwrap());
            }
            if !self.pending.iter().any(|p| p.op_id == op_id) {
                return Err(FabricError::UnknownOp(op_id));
            }
            self.pump(true)?;
        }
    }

    fn fence(&mut self) {
        // The node executes a connection's requests in order.
        self.shared.stats.record_fence();
    }

    fn drain(&mut self) -> Result<(), FabricError> {
        while !self.pending.is_empty() {
            self.pump(true)?;
        }
        Ok(())
    }

    fn outstanding(&self) -> usize {
        self.pending.len() + self.ready.len()
    }

    fn completion_time(&self, op_id: OpId) -> Option<Nanos> {
        self.ready.iter().find(|c| c.op_id == op_id).map(|c| c.completed_at)
    }
}

impl Drop for TcpChannel {
    fn drop(&mut self) {
        // Let posted writes reach the node before the connection goes away.
        let _ = self.drain();
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
