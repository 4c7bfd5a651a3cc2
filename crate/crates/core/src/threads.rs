//! Worker threads sharing fabric channels.
//!
//! Threads are grouped into clusters of `cluster_size`. Each cluster has one
//! fabric channel driven by a dispatcher thread; workers post operations to
//! the cluster's queue and get their own completions back on a private
//! queue. The remote-object cache is split into equal per-thread partitions.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TryRecvError};
use log::warn;
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{Completion, Fabric, FabricError, FabricOp, OpId};
use crate::placement::ObjectId;

pub const DEFAULT_CLUSTER_SIZE: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ThreadsError {
    #[error("thread count must be at least 1")]
    NoThreads,
    #[error("cluster size {cluster_size} must be between 1 and the thread count {threads}")]
    BadClusterSize { threads: usize, cluster_size: usize },
    #[error("thread {0} is not part of the pool")]
    UnknownThread(usize),
    #[error("object {0} is not registered as shared")]
    NotShared(ObjectId),
    #[error("thread {thread} already holds the lock on object {object}")]
    Reentrant { object: ObjectId, thread: usize },
    #[error("thread {thread} does not hold the lock on object {object}")]
    NotHeld { object: ObjectId, thread: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadPoolConfig {
    pub threads: usize,
    pub cluster_size: usize,
}

impl Default for ThreadPoolConfig {
    fn default() -> Self {
        ThreadPoolConfig {
            threads: 1,
            cluster_size: 1,
        }
    }
}

impl ThreadPoolConfig {
    /// Builds a config, clamping the default cluster size to the thread count.
    pub fn new(threads: usize, cluster_size: usize) -> Result<Self, ThreadsError> {
        let c = ThreadPoolConfig { threads, cluster_size };
        c.validate()?;
        Ok(c)
    }

    pub fn with_threads(threads: usize) -> Result<Self, ThreadsError> {
        ThreadPoolConfig::new(threads, DEFAULT_CLUSTER_SIZE.min(threads.max(1)))
    }

    pub fn validate(&self) -> Result<(), ThreadsError> {
        if self.threads == 0 {
            return Err(ThreadsError::NoThreads);
        }
        if self.cluster_size == 0 || self.cluster_size > self.threads {
            return Err(ThreadsError::BadClusterSize {
                threads: self.threads,
                cluster_size: self.cluster_size,
            });
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.threads.div_ceil(self.cluster_size)
    }

    pub fn cluster_of(&self, thread: usize) -> usize {
        thread / self.cluster_size
    }

    /// `(start, len)` of each thread's slice of a `half`-byte buffer. Every
    /// thread gets `half / threads`; the remainder goes to the last one.
    pub fn partitions(&self, half: u64) -> Vec<(u64, u64)> {
        let t = self.threads as u64;
        let each = half / t;
        (0..t)
            .map(|i| {
                let len = if i == t - 1 { half - each * (t - 1) } else { each };
                (i * each, len)
            })
            .collect()
    }
}

enum Request {
    Submit {
        thread: usize,
        op: FabricOp,
        reply: Sender<Result<OpId, FabricError>>,
    },
    Fence,
    Drain {
        reply: Sender<Result<(), FabricError>>,
    },
}

#[derive(Default)]
struct Mailbox {
    queue: Mutex<VecDeque<Completion>>,
    ready: Condvar,
}

impl Mailbox {
    fn push(&self, c: Completion) {
        self.queue.lock().push_back(c);
        self.ready.notify_all();
    }
}

struct Dispatcher {
    channel: Box<dyn crate::fabric::Channel>,
    rx: Receiver<Request>,
    mailboxes: Arc<Vec<Mailbox>>,
    owner: HashMap<OpId, usize>,
    order: VecDeque<OpId>,
}

impl Dispatcher {
    fn route(&mut self, c: Completion) {
        match self.owner.remove(&c.op_id) {
            Some(t) => self.mailboxes[t].push(c),
            None => warn!("completion for unknown op {}", c.op_id),
        }
        self.order.retain(|&o| o != c.op_id);
    }

    fn reap(&mut self) -> bool {
        let cs = self.channel.poll(usize::MAX);
        let any = !cs.is_empty();
        for c in cs {
            self.route(c);
        }
        any
    }

    fn wait_oldest(&mut self) -> Result<(), FabricError> {
        if let Some(&op) = self.order.front() {
            let c = self.channel.wait(op)?;
            self.route(c);
        }
        Ok(())
    }

    fn handle(&mut self, req: Request) {
        match req {
            Request::Submit { thread, op, reply } => {
                let signaled = op.signaled;
                let r = self.channel.submit(op);
                if let (Ok(id), true) = (&r, signaled) {
                    self.owner.insert(*id, thread);
                    self.order.push_back(*id);
                }
                let _ = reply.send(r);
            }
            Request::Fence => self.channel.fence(),
            Request::Drain { reply } => {
                // Unsignaled ops never complete visibly, so drain the channel itself.
                let r = self.channel.drain();
                self.reap();
                let _ = reply.send(r);
            }
        }
    }

    fn shutdown(&mut self) {
        if let Err(e) = self.channel.drain() {
            warn!("cluster channel failed while draining: {e}");
        }
        self.reap();
    }

    fn run(mut self) {
        loop {
            if self.order.is_empty() {
                match self.rx.recv() {
                    Ok(req) => self.handle(req),
                    Err(_) => return self.shutdown(),
                }
                continue;
            }
            match self.rx.try_recv() {
                Ok(req) => self.handle(req),
                Err(TryRecvError::Empty) => {
                    // Nobody is posting: drive the channel forward.
                    if !self.reap() {
                        if let Err(e) = self.wait_oldest() {
                            warn!("cluster channel failed: {e}");
                            return;
                        }
                    }
                }
                Err(TryRecvError::Disconnected) => return self.shutdown(),
            }
        }
    }
}

/// Cluster dispatchers plus per-thread completion queues.
pub struct Pool {
    config: ThreadPoolConfig,
    queues: Vec<Sender<Request>>,
    mailboxes: Arc<Vec<Mailbox>>,
    dispatchers: Vec<JoinHandle<()>>,
}

impl Pool {
    pub fn new(config: ThreadPoolConfig, fabric: &dyn Fabric) -> Result<Self, anyhow::Error> {
        config.validate()?;
        let mailboxes: Arc<Vec<Mailbox>> = Arc::new((0..config.threads).map(|_| Mailbox::default()).collect());
        let mut queues = Vec::new();
        let mut dispatchers = Vec::new();
        for c in 0..config.clusters() {
            let (tx, rx) = unbounded();
            let d = Dispatcher {
                channel: fabric.open_channel()?,
                rx,
                mailboxes: mailboxes.clone(),
                owner: HashMap::new(),
                order: VecDeque::new(),
            };
            dispatchers.push(std::thread::Builder::new().name(format!("cluster-{c}")).spawn(move || d.run())?);
            queues.push(tx);
        }
        Ok(Pool {
            config,
            queues,
            mailboxes,
            dispatchers,
        })
    }

    pub fn config(&self) -> ThreadPoolConfig {
        self.config
    }

    fn queue(&self, thread: usize) -> Result<&Sender<Request>, ThreadsError> {
        if thread >= self.config.threads {
            return Err(ThreadsError::UnknownThread(thread));
        }
        Ok(&self.queues[self.config.cluster_of(thread)])
    }

    /// Posts `op` on the thread's cluster channel. Operations from one thread
    /// reach the channel in the order they were posted.
    pub fn submit_via_cluster(&self, thread: usize, op: FabricOp) -> anyhow::Result<OpId> {
        let (tx, rx) = bounded(1);
        self.queue(thread)?
            .send(Request::Submit { thread, op, reply: tx })
            .map_err(|_| FabricError::Disconnected)?;
        Ok(rx.recv().map_err(|_| FabricError::Disconnected)??)
    }

    /// Orders the thread's cluster channel.
    pub fn fence(&self, thread: usize) -> anyhow::Result<()> {
        self.queue(thread)?.send(Request::Fence).map_err(|_| FabricError::Disconnected)?;
        Ok(())
    }

    /// Blocks until everything posted to the thread's cluster has completed.
    pub fn drain_cluster(&self, thread: usize) -> anyhow::Result<()> {
        let (tx, rx) = bounded(1);
        self.queue(thread)?
            .send(Request::Drain { reply: tx })
            .map_err(|_| FabricError::Disconnected)?;
        Ok(rx.recv().map_err(|_| FabricError::Disconnected)??)
    }

    /// Completions delivered to `thread` so far, oldest first.
    pub fn completions(&self, thread: usize) -> Vec<Completion> {
        self.mailboxes[thread].queue.lock().drain(..).collect()
    }

    /// Blocks until the completion of `op_id` posted by `thread` arrives.
    pub fn wait(&self, thread: usize, op_id: OpId) -> Completion {
        let mb = &self.mailboxes[thread];
        let mut q = mb.queue.lock();
        loop {
            if let Some(i) = q.iter().position(|c| c.op_id == op_id) {
                return q.remove(i).unwrap();
            }
            mb.ready.wait(&mut q);
        }
    }

    /// Runs `f(thread_id)` on every worker thread and returns their results
    /// in thread order.
    pub fn run<R: Send>(&self, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..self.config.threads)
                .map(|t| {
                    s.spawn({
                        let f = &f;
                        move || f(t)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

impl Drop for Pool {
    fn drop(&mut self) {
        self.queues.clear();
        for d in self.dispatchers.drain(..) {
            let _ = d.join();
        }
    }
}

struct LockCell {
    holder: Mutex<Option<usize>>,
    released: Condvar,
}

/// Non-reentrant per-object locks for objects shared between pool threads.
#[derive(Default)]
pub struct SharedLocks {
    cells: RwLock<HashMap<ObjectId, Arc<LockCell>>>,
}

impl SharedLocks {
    pub fn new() -> Self {
        SharedLocks::default()
    }

    pub fn register(&self, object: ObjectId) {
        self.cells.write().entry(object).or_insert_with(|| {
            Arc::new(LockCell {
                holder: Mutex::new(None),
                released: Condvar::new(),
            })
        });
    }

    fn cell(&self, object: ObjectId) -> Result<Arc<LockCell>, ThreadsError> {
        self.cells.read().get(&object).cloned().ok_or(ThreadsError::NotShared(object))
    }

    pub fn lock(&self, object: ObjectId, thread: usize) -> Result<(), ThreadsError> {
        let cell = self.cell(object)?;
        let mut h = cell.holder.lock();
        if *h == Some(thread) {
            return Err(ThreadsError::Reentrant { object, thread });
        }
        while h.is_some() {
            cell.released.wait(&mut h);
        }
        *h = Some(thread);
        Ok(())
    }

    pub fn try_lock(&self, object: ObjectId, thread: usize) -> Result<bool, ThreadsError> {
        let cell = self.cell(object)?;
        let mut h = cell.holder.lock();
        match *h {
            Some(t) if t == thread => Err(ThreadsError::Reentrant { object, thread }),
            Some(_) => Ok(false),
            None => {
                *h = Some(thread);
                Ok(true)
            }
        }
    }

    pub fn unlock(&self, object: ObjectId, thread: usize) -> Result<(), ThreadsError> {
        let cell = self.cell(object)?;
        let mut h = cell.holder.lock();
        if *h != Some(thread) {
            return Err(ThreadsError::NotHeld { object, thread });
        }
        *h = None;
        cell.released.notify_one();
        Ok(())
    }
}
