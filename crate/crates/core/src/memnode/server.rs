use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, info, warn};
use parking_lot::Mutex;

use super::wire::{self, Frame, Opcode, WireError, MAX_PAYLOAD};
use crate::fabric::region::RemoteRegion;
use crate::fabric::{ErrorCode, FabricError};

/// Smallest region a memory node will serve.
pub const MIN_CAPACITY: u64 = 1 << 20;

#[derive(Clone, Debug)]
pub struct MemnodeConfig {
    pub bind: String,
    pub capacity_bytes: u64,
    /// Base directory for relative SNAPSHOT paths.
    pub snapshot_dir: Option<PathBuf>,
    /// Snapshot file to load at startup instead of starting empty.
    pub restore: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum MemnodeError {
    #[error("capacity {0} is below the 1 MiB minimum")]
    CapacityTooSmall(u64),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("restoring snapshot: {0}")]
    Restore(FabricError),
}

struct Server {
    region: RemoteRegion,
    snapshot_dir: Option<PathBuf>,
}

impl Server {
    fn handle(&self, req: &Frame) -> Frame {
        let Some(op) = Opcode::from_u8(req.opcode) else {
            return Frame::error(req.opcode & !wire::ERROR_BIT, req.request_id, ErrorCode::BadRequest);
        };
        match self.execute(op, req) {
            Ok((offset, payload)) => Frame {
                opcode: op as u8,
                request_id: req.request_id,
                offset,
                length: payload.len() as u64,
                payload,
            },
            Err(e) => {
                debug!("request {} {:?} failed: {e}", req.request_id, op);
                Frame::error(op as u8, req.request_id, e.code())
            }
        }
    }

    fn execute(&self, op: Opcode, req: &Frame) -> Result<(u64, Vec<u8>), FabricError> {
        let r = &self.region;
        let word = |p: &[u8], i: usize| u64::from_be_bytes(p[i * 8..i * 8 + 8].try_into().unwrap());
        match op {
            Opcode::Alloc => Ok((r.alloc(req.length)?, Vec::new())),
            Opcode::Free => {
                r.free(req.offset)?;
                Ok((req.offset, Vec::new()))
            }
            Opcode::Read => {
                if req.length > MAX_PAYLOAD {
                    return Err(FabricError::Oversized {
                        length: req.length,
                        max: MAX_PAYLOAD,
                    });
                }
                Ok((req.offset, r.read_vec(req.offset, req.length)?))
            }
            Opcode::Write => {
                r.write(req.offset, &req.payload)?;
                Ok((req.offset, Vec::new()))
            }
            Opcode::Cas => {
                if req.payload.len() != 16 {
                    return Err(FabricError::InvalidLength(req.length));
                }
                let prev = r.cas(req.offset, word(&req.payload, 0), word(&req.payload, 1))?;
                Ok((req.offset, prev.to_be_bytes().to_vec()))
            }
            Opcode::Fadd => {
                if req.payload.len() != 8 {
                    return Err(FabricError::InvalidLength(req.length));
                }
                let prev = r.fadd(req.offset, word(&req.payload, 0))?;
                Ok((req.offset, prev.to_be_bytes().to_vec()))
            }
            Opcode::Ping => Ok((r.capacity(), Vec::new())),
            Opcode::Snapshot => {
                let rel = std::str::from_utf8(&req.payload).map_err(|_| FabricError::Protocol("snapshot path is not UTF-8".into()))?;
                let path = match &self.snapshot_dir {
                    Some(d) => d.join(rel),
                    None => PathBuf::from(rel),
                };
                r.snapshot(&path)?;
                info!("snapshot written to {}", path.display());
                Ok((req.offset, Vec::new()))
            }
        }
    }

    fn serve_connection(&self, stream: TcpStream) -> Result<(), WireError> {
        stream.set_nodelay(true)?;
        let mut reader = BufReader::with_capacity(1 << 16, stream.try_clone()?);
        let mut writer = BufWriter::with_capacity(1 << 16, stream);
        // A frame cut short by a dropped connection is discarded unexecuted:
        // read_request only returns complete frames.
        while let Some(req) = wire::read_request(&mut reader)? {
            self.handle(&req).write_to(&mut writer)?;
            if reader.buffer().is_empty() {
                writer.flush()?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

/// A running memory node. Dropping the handle does not stop it; call
/// [`MemnodeHandle::shutdown`].
pub struct MemnodeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl MemnodeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes live connections and joins the accept thread.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    /// Blocks until the node is shut down from elsewhere.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MemnodeHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_inner();
        }
    }
}

/// Binds and starts serving on background threads.
pub fn spawn(config: MemnodeConfig) -> Result<MemnodeHandle, MemnodeError> {
    let region = match &config.restore {
        Some(p) => RemoteRegion::restore(p).map_err(MemnodeError::Restore)?,
        None => {
            if config.capacity_bytes < MIN_CAPACITY {
                return Err(MemnodeError::CapacityTooSmall(config.capacity_bytes));
            }
            RemoteRegion::new(config.capacity_bytes)
        }
    };
    let bind_err = |source| MemnodeError::Bind {
        addr: config.bind.clone(),
        source,
    };
    let addrs: Vec<_> = config.bind.to_socket_addrs().map_err(bind_err)?.collect();
    let listener = TcpListener::bind(&addrs[..]).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    info!("memnode serving {} bytes on {addr}", region.capacity());

    let server = Arc::new(Server {
        region,
        snapshot_dir: config.snapshot_dir,
    });
    let stop = Arc::new(AtomicBool::new(false));
    let conns = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let (stop, conns) = (stop.clone(), conns.clone());
        std::thread::Builder::new()
            .name("memnode-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().push(c);
                    }
                    let server = server.clone();
                    std::thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = server.serve_connection(stream) {
                            debug!("connection {peer:?} closed: {e}");
                        }
                    });
                }
            })
            .expect("spawn accept thread")
    };
    Ok(MemnodeHandle {
        addr,
        stop,
        conns,
        acceptor: Some(acceptor),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> Server {
        Server {
            region: RemoteRegion::new(MIN_CAPACITY),
            snapshot_dir: None,
        }
    }

    #[test]
    fn ping_reports_capacity() {
        let r = server().handle(&Frame::request(Opcode::Ping, 42, 0, 0));
        assert_eq!((r.opcode, r.request_id, r.offset), (Opcode::Ping as u8, 42, MIN_CAPACITY));
    }

    #[test]
    fn read_past_end_is_remote_error() {
        let r = server().handle(&Frame::request(Opcode::Read, 1, MIN_CAPACITY - 4, 16));
        assert_eq!(r.error_code(), Some(ErrorCode::OutOfBounds));
        assert!(r.payload.is_empty());
    }

    #[test]
    fn unknown_opcode_is_rejected() {
        let r = server().handle(&Frame {
            opcode: 9,
            request_id: 1,
            offset: 0,
            length: 0,
            payload: vec![],
        });
        assert_eq!(r.error_code(), Some(ErrorCode::BadRequest));
    }

    #[test]
    fn rejects_small_capacity() {
        let cfg = MemnodeConfig {
            bind: "127.0.0.1:0".into(),
            capacity_bytes: 1024,
            snapshot_dir: None,
            restore: None,
        };
        assert!(matches!(spawn(cfg), Err(MemnodeError::CapacityTooSmall(1024))));
    }
}
