//! Application-level checkpoints with selective update.
//!
//! A checkpoint file holds the object table, the bytes of local objects and
//! the bytes of remote objects. Objects not written since the previous
//! checkpoint are stored as references to the file that already holds their
//! bytes, so each checkpoint only writes what changed.
//!
//! File layout, little-endian:
//!
//! ```text
//! header   "DLCK" | version u32 | epoch u64 | unix millis u64 | crc32 u32
//! section  tag [4] | body length u64 | body | crc32(body) u32
//! ```
//!
//! Sections, in order: `META` (object table), `LOCL` (local blobs), `RMOT`
//! (remote blobs). A blob is `id u64 | home u64 | length u64 | kind u8`
//! followed by the bytes (kind 0) or by `path | file offset u64 | crc32 u32`
//! naming where the bytes live (kind 1).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Clock;
use crate::fabric::{split_transfer, FabricError, FabricOp, MemoryRegion};
use crate::placement::{Location, ObjectDescriptor, ObjectId};
use crate::runtime::{Runtime, RuntimeError};

pub const MAGIC: &[u8; 4] = b"DLCK";
pub const VERSION: u32 = 1;
/// Iterations between checkpoints unless configured otherwise.
pub const DEFAULT_INTERVAL: u64 = 5;

const HEADER_LEN: u64 = 28;
const SECTION_HEAD: u64 = 12;
const NONE: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} is not a checkpoint file")]
    BadMagic(PathBuf),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch in section {section} of {path}")]
    Checksum { path: PathBuf, section: String },
    #[error("malformed section {section}: {msg}")]
    Malformed { section: String, msg: String },
    #[error("object {object} refers to {path}, which cannot be read: {source}")]
    BrokenChain {
        object: ObjectId,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("runtime to recover into already holds objects")]
    NotEmpty,
    #[error("checkpoint writer thread panicked")]
    WriterPanicked,
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// True when iteration `i` ends a checkpoint interval of `every` iterations.
pub fn is_due(i: u64, every: u64) -> bool {
    every > 0 && (i + 1).is_multiple_of(every)
}

/// Where the bytes of an object live on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlobRef {
    pub path: PathBuf,
    pub offset: u64,
    pub len: u64,
    pub crc: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum BlobData {
    Inline(Vec<u8>),
    Ref(BlobRef),
}

#[derive(Clone, Debug)]
struct Blob {
    id: ObjectId,
    home: u64,
    data: BlobData,
}

/// One object table row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntryMeta {
    pub desc: ObjectDescriptor,
    pub tag: Option<String>,
    /// Payload offset of the remote home at checkpoint time.
    pub home: Option<u64>,
}

/// What one checkpoint wrote.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointSummary {
    pub epoch: u64,
    pub path: PathBuf,
    /// Objects whose bytes were written into this file.
    pub fresh: Vec<ObjectId>,
    /// Objects stored as references to earlier files.
    pub carried: Vec<ObjectId>,
    pub fresh_bytes: u64,
    pub file_bytes: u64,
}

/// Completes when the checkpoint file is durable.
#[must_use = "wait on the ticket to learn whether the checkpoint succeeded"]
pub struct CheckpointTicket {
    pub epoch: u64,
    handle: JoinHandle<Result<CheckpointSummary>>,
}

impl CheckpointTicket {
    pub fn is_done(&self) -> bool {
        self.handle.is_finished()
    }

    pub fn wait(self) -> Result<CheckpointSummary> {
        self.handle.join().map_err(|_| CheckpointError::WriterPanicked)?
    }
}

#[derive(Debug, Default)]
struct Shared {
    busy: bool,
    /// Latest on-disk location of each object's bytes.
    known: BTreeMap<ObjectId, BlobRef>,
}

/// Metadata entries and the blobs to write, each flagged fresh or carried.
type Captured = (Vec<EntryMeta>, Vec<(bool, Blob)>);

/// Takes successive checkpoints of one runtime.
#[derive(Debug, Default)]
pub struct Checkpointer {
    epoch: u64,
    shared: Arc<Mutex<Shared>>,
}

impl Checkpointer {
    pub fn new() -> Self {
        Checkpointer::default()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_busy(&self) -> bool {
        self.shared.lock().busy
    }

    /// Captures the runtime at an iteration boundary and writes the file on a
    /// background thread. Pending demotions are completed first so remote
    /// bytes are current. Returns `None` if the previous checkpoint is still
    /// being written; its changes then go into the next one.
    pub fn checkpoint_async(&mut self, rt: &mut Runtime, path: &Path) -> Result<Option<CheckpointTicket>> {
        {
            let mut sh = self.shared.lock();
            if sh.busy {
                return Ok(None);
            }
            sh.busy = true;
        }
        let captured = self.capture(rt);
        let (metas, blobs) = match captured {
            Ok(c) => c,
            Err(e) => {
                self.shared.lock().busy = false;
                return Err(e);
            }
        };
        self.epoch += 1;
        let epoch = self.epoch;
        let path = std::path::absolute(path)?;
        let shared = self.shared.clone();
        let iteration = rt.iteration();
        let handle = std::thread::spawn(move || {
            let res = write_file(&path, epoch, iteration, &metas, &blobs);
            let mut sh = shared.lock();
            match &res {
                Ok((summary, refs)) => {
                    sh.known = refs.clone();
                    log::debug!(
                        "checkpoint {epoch}: {} fresh, {} carried",
                        summary.fresh.len(),
                        summary.carried.len()
                    );
                }
                // Nothing on disk can be trusted as a base; the next one is full.
                Err(_) => sh.known.clear(),
            }
            sh.busy = false;
            res.map(|(s, _)| s)
        });
        Ok(Some(CheckpointTicket { epoch, handle }))
    }

    /// Synchronous checkpoint.
    pub fn checkpoint(&mut self, rt: &mut Runtime, path: &Path) -> Result<CheckpointSummary> {
        while self.is_busy() {
            std::thread::yield_now();
        }
        self.checkpoint_async(rt, path)?.expect("not busy").wait()
    }

    fn capture(&mut self, rt: &mut Runtime) -> Result<Captured> {
        rt.flush()?;
        let dirty: std::collections::BTreeSet<ObjectId> = rt.take_epoch_dirty().into_iter().collect();
        let known = self.shared.lock().known.clone();
        let fabric = rt.fabric().clone();
        // Private clock: snapshot reads are not charged to the application.
        let mut ch = fabric.open_channel_with_clock(Clock::new_virtual())?;
        let mut metas = Vec::new();
        let mut blobs = Vec::new();
        for desc in rt.descriptors() {
            let id = desc.object_id;
            let h = rt.handle_of(id).expect("live object");
            let local = desc.location == Location::Local;
            let home = rt.payload_addr(id);
            metas.push(EntryMeta {
                desc: desc.clone(),
                tag: rt.object_tag(h)?.map(str::to_owned),
                home: home.map(|a| a.offset),
            });
            let data = match known.get(&id) {
                Some(r) if !dirty.contains(&id) => BlobData::Ref(r.clone()),
                _ if local => BlobData::Inline(rt.local_bytes(id).expect("local").to_vec()),
                _ => {
                    let home = home.expect("remote objects have a home");
                    let buf = MemoryRegion::new(desc.size as usize);
                    let mut ops = Vec::new();
                    for (o, n) in split_transfer(desc.size, fabric.max_transfer_bytes()) {
                        ops.push(ch.submit(FabricOp::read(home.add(o), buf.slice(o as usize, n as usize)))?);
                    }
                    for op in ops {
                        let c = ch.wait(op)?;
                        if c.status != crate::fabric::CompletionStatus::Ok {
                            return Err(FabricError::RemoteError(op).into());
                        }
                    }
                    BlobData::Inline(buf.to_vec())
                }
            };
            blobs.push((
                local,
                Blob {
                    id,
                    home: home.map_or(NONE, |a| a.offset),
                    data,
                },
            ));
        }
        Ok((metas, blobs))
    }
}

// ---- encoding ----

fn put_u32(v: &mut Vec<u8>, x: u32) {
    v.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(v: &mut Vec<u8>, x: u64) {
    v.extend_from_slice(&x.to_le_bytes());
}

fn put_str(v: &mut Vec<u8>, s: &str) {
    put_u32(v, s.len() as u32);
    v.extend_from_slice(s.as_bytes());
}

fn location_code(l: Location) -> u8 {
    match l {
        Location::Local => 0,
        Location::Remote => 1,
        Location::RemoteCached => 2,
    }
}

fn encode_meta(iteration: u64, metas: &[EntryMeta]) -> Vec<u8> {
    let mut v = Vec::new();
    put_u64(&mut v, iteration);
    put_u64(&mut v, metas.len() as u64);
    for m in metas {
        let d = &m.desc;
        for x in [
            d.object_id,
            d.size,
            d.read_count,
            d.write_count,
            d.alloc_iteration,
            d.free_iteration.unwrap_or(NONE),
        ] {
            put_u64(&mut v, x);
        }
        v.push(location_code(d.location));
        put_u64(&mut v, m.home.unwrap_or(NONE));
        match &m.tag {
            Some(t) => {
                v.push(1);
                put_str(&mut v, t);
            }
            None => v.push(0),
        }
    }
    v
}

/// Encodes blobs; returns the body and, per blob, the body offset of its
/// inline bytes.
fn encode_blobs(blobs: &[&Blob]) -> (Vec<u8>, Vec<Option<u64>>) {
    let mut v = Vec::new();
    let mut offs = Vec::new();
    put_u64(&mut v, blobs.len() as u64);
    for b in blobs {
        put_u64(&mut v, b.id);
        put_u64(&mut v, b.home);
        match &b.data {
            BlobData::Inline(bytes) => {
                put_u64(&mut v, bytes.len() as u64);
                v.push(0);
                offs.push(Some(v.len() as u64));
                v.extend_from_slice(bytes);
            }
            BlobData::Ref(r) => {
                put_u64(&mut v, r.len);
                v.push(1);
                put_str(&mut v, &r.path.to_string_lossy());
                put_u64(&mut v, r.offset);
                put_u32(&mut v, r.crc);
                offs.push(None);
            }
        }
    }
    (v, offs)
}

type Written = (CheckpointSummary, BTreeMap<ObjectId, BlobRef>);

fn write_file(path: &Path, epoch: u64, iteration: u64, metas: &[EntryMeta], blobs: &[(bool, Blob)]) -> Result<Written> {
    let meta = encode_meta(iteration, metas);
    let local: Vec<&Blob> = blobs.iter().filter(|(l, _)| *l).map(|(_, b)| b).collect();
    let remote: Vec<&Blob> = blobs.iter().filter(|(l, _)| !*l).map(|(_, b)| b).collect();
    let (lbody, loffs) = encode_blobs(&local);
    let (rbody, roffs) = encode_blobs(&remote);

    let mut summary = CheckpointSummary {
        epoch,
        path: path.to_owned(),
        fresh: Vec::new(),
        carried: Vec::new(),
        fresh_bytes: 0,
        file_bytes: 0,
    };
    let mut refs = BTreeMap::new();
    let lbase = HEADER_LEN + SECTION_HEAD + meta.len() as u64 + 4 + SECTION_HEAD;
    let rbase = lbase + lbody.len() as u64 + 4 + SECTION_HEAD;
    for (list, offs, base) in [(&local, &loffs, lbase), (&remote, &roffs, rbase)] {
        for (b, off) in list.iter().zip(offs) {
            let r = match (&b.data, off) {
                (BlobData::Inline(bytes), Some(o)) => {
                    summary.fresh.push(b.id);
                    summary.fresh_bytes += bytes.len() as u64;
                    BlobRef {
                        path: path.to_owned(),
                        offset: base + o,
                        len: bytes.len() as u64,
                        crc: crc32fast::hash(bytes),
                    }
                }
                (BlobData::Ref(r), _) => {
                    summary.carried.push(b.id);
                    r.clone()
                }
                _ => unreachable!("inline blobs have offsets"),
            };
            refs.insert(b.id, r);
        }
    }
    summary.fresh.sort_unstable();
    summary.carried.sort_unstable();

    let mut w = BufWriter::new(File::create(path)?);
    let mut head = Vec::with_capacity(HEADER_LEN as usize);
    head.extend_from_slice(MAGIC);
    put_u32(&mut head, VERSION);
    put_u64(&mut head, epoch);
    let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
    put_u64(&mut head, millis);
    let crc = crc32fast::hash(&head);
    put_u32(&mut head, crc);
    w.write_all(&head)?;
    for (tag, body) in [(b"META", &meta), (b"LOCL", &lbody), (b"RMOT", &rbody)] {
        w.write_all(tag)?;
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(body)?;
        w.write_all(&crc32fast::hash(body).to_le_bytes())?;
    }
    let f = w.into_inner().map_err(|e| e.into_error())?;
    f.sync_all()?;
    summary.file_bytes = f.metadata()?.len();
    Ok((summary, refs))
}

// ---- decoding ----

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> CheckpointError {
        CheckpointError::Malformed {
            section: self.section.into(),
            msg: format!("{msg} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}

/// Parsed checkpoint file.
#[derive(Clone, Debug)]
pub struct CheckpointFile {
    pub epoch: u64,
    pub timestamp_ms: u64,
    pub iteration: u64,
    pub entries: Vec<EntryMeta>,
    blobs: BTreeMap<ObjectId, Blob>,
}

impl CheckpointFile {
    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        if buf.len() < HEADER_LEN as usize || &buf[..4] != MAGIC {
            return Err(CheckpointError::BadMagic(path.to_owned()));
        }
        let sum = |section: &str| CheckpointError::Checksum {
            path: path.to_owned(),
            section: section.into(),
        };
        let stored = u32::from_le_bytes(buf[24..28].try_into().unwrap());
        if crc32fast::hash(&buf[..24]) != stored {
            return Err(sum("header"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let epoch = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let timestamp_ms = u64::from_le_bytes(buf[16..24].try_into().unwrap());

        let mut pos = HEADER_LEN as usize;
        let mut bodies = Vec::new();
        for tag in ["META", "LOCL", "RMOT"] {
            let mut c = Cursor {
                buf: &buf,
                pos,
                section: "file",
            };
            let t = c.take(4)?;
            if t != tag.as_bytes() {
                return Err(c.err(&format!("expected section {tag}")));
            }
            let len = c.u64()? as usize;
            let body = c.take(len)?;
            let crc = c.u32()?;
            if crc32fast::hash(body) != crc {
                return Err(sum(tag));
            }
            bodies.push(body);
            pos = c.pos;
        }

        let mut c = Cursor {
            buf: bodies[0],
            pos: 0,
            section: "META",
        };
        let iteration = c.u64()?;
        let n = c.u64()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let mut d = ObjectDescriptor::new(c.u64()?, c.u64()?);
            d.read_count = c.u64()?;
            d.write_count = c.u64()?;
            d.alloc_iteration = c.u64()?;
            d.free_iteration = Some(c.u64()?).filter(|&x| x != NONE);
            d.location = match c.u8()? {
                0 => Location::Local,
                1 => Location::Remote,
                2 => Location::RemoteCached,
                _ => return Err(c.err("bad location")),
            };
            let home = Some(c.u64()?).filter(|&x| x != NONE);
            let tag = if c.u8()? == 1 { Some(c.str()?) } else { None };
            entries.push(EntryMeta { desc: d, tag, home });
        }

        let mut blobs = BTreeMap::new();
        for (body, section) in [(bodies[1], "LOCL"), (bodies[2], "RMOT")] {
            let mut c = Cursor {
                buf: body,
                pos: 0,
                section,
            };
            let n = c.u64()?;
            for _ in 0..n {
                let id = c.u64()?;
                let home = c.u64()?;
                let len = c.u64()?;
                let data = match c.u8()? {
                    0 => BlobData::Inline(c.take(len as usize)?.to_vec()),
                    1 => {
                        let p = PathBuf::from(c.str()?);
                        BlobData::Ref(BlobRef {
                            path: p,
                            offset: c.u64()?,
                            len,
                            crc: c.u32()?,
                        })
                    }
                    _ => return Err(c.err("bad blob kind")),
                };
                blobs.insert(id, Blob { id, home, data });
            }
        }
        Ok(CheckpointFile {
            epoch,
            timestamp_ms,
            iteration,
            entries,
            blobs,
        })
    }

    /// Objects whose bytes live in this file.
    pub fn inline_objects(&self) -> Vec<ObjectId> {
        self.blobs
            .values()
            .filter(|b| matches!(b.data, BlobData::Inline(_)))
            .map(|b| b.id)
            .collect()
    }

    /// Objects stored as references, with the file each one points to.
    pub fn references(&self) -> Vec<(ObjectId, BlobRef)> {
        self.blobs
            .values()
            .filter_map(|b| match &b.data {
                BlobData::Ref(r) => Some((b.id, r.clone())),
                BlobData::Inline(_) => None,
            })
            .collect()
    }

    /// Bytes of one object, following a reference if needed.
    pub fn object_bytes(&self, id: ObjectId) -> Result<Vec<u8>> {
        let b = self.blobs.get(&id).ok_or_else(|| CheckpointError::Malformed {
            section: "META".into(),
            msg: format!("object {id} has no blob"),
        })?;
        match &b.data {
            BlobData::Inline(v) => Ok(v.clone()),
            BlobData::Ref(r) => {
                let chain = |e| CheckpointError::BrokenChain {
                    object: id,
                    path: r.path.clone(),
                    source: e,
                };
                let mut f = File::open(&r.path).map_err(chain)?;
                f.seek(SeekFrom::Start(r.offset)).map_err(chain)?;
                let mut v = vec![0; r.len as usize];
                f.read_exact(&mut v).map_err(chain)?;
                if crc32fast::hash(&v) != r.crc {
                    return Err(CheckpointError::Checksum {
                        path: r.path.clone(),
                        section: format!("blob of object {id}"),
                    });
                }
                Ok(v)
            }
        }
    }
}

/// Rebuilds the checkpointed objects in an empty runtime. Object ids are
/// kept; remote objects get new homes on the runtime's memory node.
pub fn recover(path: &Path, rt: &mut Runtime) -> Result<CheckpointFile> {
    if rt.live_objects() > 0 {
        return Err(CheckpointError::NotEmpty);
    }
    let file = CheckpointFile::read(path)?;
    for e in &file.entries {
        let bytes = file.object_bytes(e.desc.object_id)?;
        if bytes.len() as u64 != e.desc.size {
            return Err(CheckpointError::Malformed {
                section: "RMOT".into(),
                msg: format!("object {} has {} bytes, table says {}", e.desc.object_id, bytes.len(), e.desc.size),
            });
        }
        let local = e.desc.location == Location::Local;
        let mut desc = e.desc.clone();
        desc.location = if local { Location::Local } else { Location::Remote };
        if local {
            rt.restore_object(desc, e.tag.clone(), Some(bytes), None)?;
        } else {
            rt.restore_object(desc, e.tag.clone(), None, Some(&bytes))?;
        }
    }
    rt.restore_finish()?;
    rt.set_iteration(file.iteration);
    Ok(file)
}

/// Copies a checkpoint into `out` with every reference replaced by the bytes.
pub fn materialize(path: &Path, out: &Path) -> Result<CheckpointSummary> {
    let file = CheckpointFile::read(path)?;
    let mut blobs = Vec::new();
    for e in &file.entries {
        let id = e.desc.object_id;
        let data = BlobData::Inline(file.object_bytes(id)?);
        let home = file.blobs.get(&id).map_or(NONE, |b| b.home);
        blobs.push((e.desc.location == Location::Local, Blob { id, home, data }));
    }
    let out = std::path::absolute(out)?;
    Ok(write_file(&out, file.epoch, file.iteration, &file.entries, &blobs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval() {
        assert!(!is_due(0, 5));
        assert!(is_due(4, 5));
        assert!(is_due(9, 5));
        assert!(!is_due(3, 0));
    }
}
