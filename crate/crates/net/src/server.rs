//! Threaded TCP server.
//!
//! Each connection gets a reader thread that cuts the byte stream into
//! fragments and forwards them to a single dispatcher thread. The dispatcher
//! owns the reassembly pool and the selector, so every admission and
//! placement decision is made by one serialized owner. Each accelerator slot
//! has a worker thread that runs one request at a time and writes the
//! response back on the originating connection.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use offrac_core::accelerators::{execute, fragment_count, AcceleratorKind};
use offrac_core::engine::Nanos;
use offrac_core::policies::{QueueView, SelectorPolicy};
use offrac_core::protocol::{decode_header, Fragment, ResponseHeader, Status, REQUEST_HEADER_BYTES};
use offrac_core::reassembly::{Admission, AssembledRequest, PoolStats, ReassemblyError, ReassemblyPool, TraceOp};

use crate::config::{ConfigError, ServerConfig};

type Writer = Arc<Mutex<TcpStream>>;

enum Event {
    Open { conn: u32, writer: Writer },
    Fragment { conn: u32, fragment: Fragment, at: Instant },
    Malformed { conn: u32 },
    Closed { conn: u32 },
    SlotProgress,
    Shutdown,
}

struct Job {
    request: AssembledRequest,
    writer: Option<Writer>,
    enqueued_at: Instant,
}

/// What the dispatcher can see of a slot's queue.
struct SlotShared {
    waiting_bytes: AtomicU64,
    running_bytes: AtomicU64,
    completed: AtomicU64,
}

struct SlotHandle {
    type_id: u16,
    capacity_bytes: u64,
    shared: Arc<SlotShared>,
    jobs: Sender<Job>,
}

impl SlotHandle {
    fn queued_bytes(&self) -> u64 {
        self.shared.waiting_bytes.load(Ordering::Acquire) + self.shared.running_bytes.load(Ordering::Acquire)
    }

    /// Same admission rule as the simulator's slot queue: an empty queue
    /// takes anything, otherwise the request must fit.
    fn try_enqueue(&self, job: Job) -> Result<(), Job> {
        let bytes = job.request.total_bytes();
        let waiting = self.shared.waiting_bytes.load(Ordering::Acquire);
        if waiting > 0 && waiting + bytes > self.capacity_bytes {
            return Err(job);
        }
        self.shared.waiting_bytes.fetch_add(bytes, Ordering::AcqRel);
        if let Err(mpsc::SendError(job)) = self.jobs.send(job) {
            self.shared.waiting_bytes.fetch_sub(bytes, Ordering::AcqRel);
            return Err(job);
        }
        Ok(())
    }
}

/// Summary returned when the server shuts down.
#[derive(Debug, Clone, Default)]
pub struct ServerReport {
    pub stats: PoolStats,
    /// Pool operations in order, if tracing was enabled.
    pub trace: Vec<TraceOp>,
    /// Requests completed by each slot.
    pub slot_completed: Vec<u64>,
    pub connections: u32,
    pub unknown_accelerator: u64,
    pub malformed: u64,
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    events: Sender<Event>,
    listener: Option<JoinHandle<()>>,
    dispatcher: Option<JoinHandle<ServerReport>>,
    workers: Vec<JoinHandle<()>>,
    readers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    slots: Vec<Arc<SlotShared>>,
}

impl Server {
    /// Binds the listener and starts all threads.
    pub fn start(config: ServerConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let listener = TcpListener::bind(&config.listen)?;
        let addr = listener.local_addr()?;
        let (events, inbox) = mpsc::channel();
        let start = Instant::now();

        let mut handles = Vec::new();
        let mut workers = Vec::new();
        let mut slots = Vec::new();
        for spec in &config.accelerators {
            for _ in 0..spec.instances {
                let (jobs, queue) = mpsc::channel();
                let shared = Arc::new(SlotShared {
                    waiting_bytes: AtomicU64::new(0),
                    running_bytes: AtomicU64::new(0),
                    completed: AtomicU64::new(0),
                });
                let worker = SlotWorker {
                    kind: spec.kind,
                    fragment_bytes: config.fragment_bytes,
                    shared: shared.clone(),
                    events: events.clone(),
                };
                workers.push(
                    thread::Builder::new()
                        .name(format!("slot-{}", slots.len()))
                        .spawn(move || worker.run(queue))?,
                );
                handles.push(SlotHandle {
                    type_id: spec.type_id,
                    capacity_bytes: spec.queue_capacity_bytes,
                    shared: shared.clone(),
                    jobs,
                });
                slots.push(shared);
            }
        }

        let mut pool = ReassemblyPool::new(&config.pool);
        if config.record_trace {
            pool.record_trace();
        }
        let dispatcher = Dispatcher {
            pool,
            selector: SelectorPolicy::new(config.selector),
            types: config.accelerators.iter().map(|a| a.type_id).collect(),
            slots: handles,
            writers: HashMap::new(),
            skipping: HashMap::new(),
            start,
            report: ServerReport::default(),
        };
        let dispatcher = thread::Builder::new()
            .name("dispatcher".into())
            .spawn(move || dispatcher.run(inbox))?;

        let stop = Arc::new(AtomicBool::new(false));
        let readers = Arc::new(Mutex::new(Vec::new()));
        let acceptor = Acceptor {
            listener,
            stop: stop.clone(),
            events: events.clone(),
            readers: readers.clone(),
            fragment_bytes: config.fragment_bytes as usize,
        };
        let listener = thread::Builder::new()
            .name("listener".into())
            .spawn(move || acceptor.run())?;

        Ok(Self {
            addr,
            stop,
            events,
            listener: Some(listener),
            dispatcher: Some(dispatcher),
            workers,
            readers,
            slots,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests completed so far by each slot.
    pub fn slot_completed(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.completed.load(Ordering::Acquire)).collect()
    }

    /// Blocks until the listener exits, which only happens after
    /// [`Server::shutdown`] is called from another handle or the listener
    /// fails.
    pub fn wait(mut self) -> ServerReport {
        if let Some(l) = self.listener.take() {
            let _ = l.join();
        }
        self.finish()
    }

    /// Stops accepting, closes every connection and joins all threads.
    pub fn shutdown(mut self) -> ServerReport {
        self.stop.store(true, Ordering::Release);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(l) = self.listener.take() {
            let _ = l.join();
        }
        self.finish()
    }

    fn finish(&mut self) -> ServerReport {
        let _ = self.events.send(Event::Shutdown);
        let report = self
            .dispatcher
            .take()
            .and_then(|d| d.join().ok())
            .unwrap_or_default();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        let readers: Vec<_> = self.readers.lock().map(|mut r| r.drain(..).collect()).unwrap_or_default();
        for r in readers {
            let _ = r.join();
        }
        ServerReport {
            slot_completed: self.slot_completed(),
            ..report
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.dispatcher.is_some() {
            self.stop.store(true, Ordering::Release);
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            if let Some(l) = self.listener.take() {
                let _ = l.join();
            }
            self.finish();
        }
    }
}

struct Acceptor {
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    events: Sender<Event>,
    readers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    fragment_bytes: usize,
}

impl Acceptor {
    fn run(self) {
        let next_id = AtomicU32::new(0);
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::Acquire) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let _ = stream.set_nodelay(true);
            let Ok(writer) = stream.try_clone() else { continue };
            let conn = next_id.fetch_add(1, Ordering::Relaxed);
            if self
                .events
                .send(Event::Open {
                    conn,
                    writer: Arc::new(Mutex::new(writer)),
                })
                .is_err()
            {
                break;
            }
            let events = self.events.clone();
            let fragment_bytes = self.fragment_bytes;
            let spawned = thread::Builder::new()
                .name(format!("conn-{conn}"))
                .spawn(move || read_connection(conn, stream, fragment_bytes, &events));
            if let (Ok(handle), Ok(mut readers)) = (spawned, self.readers.lock()) {
                readers.retain(|h| !h.is_finished());
                readers.push(handle);
            }
        }
    }
}

/// Reads requests back to back. The header is read whole, then the request
/// is consumed in reads of at most `fragment_bytes`, each becoming one
/// fragment; the first fragment carries the header.
fn read_connection(conn: u32, mut stream: TcpStream, fragment_bytes: usize, events: &Sender<Event>) {
    let _ = read_requests(conn, &mut stream, fragment_bytes, events);
    let _ = events.send(Event::Closed { conn });
}

fn read_requests(conn: u32, stream: &mut TcpStream, fragment_bytes: usize, events: &Sender<Event>) -> io::Result<()> {
    loop {
        let mut first = vec![0u8; REQUEST_HEADER_BYTES];
        stream.read_exact(&mut first)?;
        let at = Instant::now();
        let Ok(header) = decode_header(&first) else {
            let _ = events.send(Event::Malformed { conn });
            return Ok(());
        };
        let total = header.total_bytes() as usize;
        let first_len = total.min(fragment_bytes);
        first.resize(first_len, 0);
        stream.read_exact(&mut first[REQUEST_HEADER_BYTES..])?;
        send(events, conn, Fragment::first(conn, first), at)?;
        let mut remaining = total - first_len;
        while remaining > 0 {
            let mut chunk = vec![0u8; remaining.min(fragment_bytes)];
            stream.read_exact(&mut chunk)?;
            remaining -= chunk.len();
            send(events, conn, Fragment::continuation(conn, chunk), Instant::now())?;
        }
    }
}

fn send(events: &Sender<Event>, conn: u32, fragment: Fragment, at: Instant) -> io::Result<()> {
    events
        .send(Event::Fragment { conn, fragment, at })
        .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "dispatcher stopped"))
}

fn respond(writer: &Writer, header: ResponseHeader, payload: &[u8]) {
    let mut buf = Vec::with_capacity(header.encode().len() + payload.len());
    buf.extend_from_slice(&header.encode());
    buf.extend_from_slice(payload);
    if let Ok(mut w) = writer.lock() {
        let _ = w.write_all(&buf);
    }
}

struct Dispatcher {
    pool: ReassemblyPool,
    selector: SelectorPolicy,
    types: BTreeSet<u16>,
    slots: Vec<SlotHandle>,
    writers: HashMap<u32, Writer>,
    /// Bytes still to arrive for requests rejected before reaching the pool.
    skipping: HashMap<u32, u64>,
    start: Instant,
    report: ServerReport,
}

impl Dispatcher {
    fn run(mut self, inbox: Receiver<Event>) -> ServerReport {
        while let Ok(event) = inbox.recv() {
            match event {
                Event::Open { conn, writer } => {
                    self.report.connections += 1;
                    self.writers.insert(conn, writer);
                }
                Event::Fragment { conn, fragment, at } => self.on_fragment(conn, fragment, at),
                Event::Malformed { conn } => {
                    self.report.malformed += 1;
                    if let Some(w) = self.writers.remove(&conn) {
                        respond(&w, ResponseHeader::error(Status::Malformed, 0), &[]);
                        if let Ok(s) = w.lock() {
                            let _ = s.shutdown(Shutdown::Both);
                        }
                    }
                }
                Event::Closed { conn } => {
                    self.pool.garbage_collect(conn);
                    self.writers.remove(&conn);
                    self.skipping.remove(&conn);
                }
                Event::SlotProgress => {}
                Event::Shutdown => break,
            }
            self.dispatch();
        }
        for w in self.writers.values() {
            if let Ok(s) = w.lock() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        self.report.stats = self.pool.stats();
        self.report.trace = self.pool.take_trace();
        self.report
    }

    fn on_fragment(&mut self, conn: u32, fragment: Fragment, at: Instant) {
        let now = Nanos(at.duration_since(self.start).as_nanos() as u64);
        if fragment.is_first {
            let header = decode_header(&fragment.payload[..REQUEST_HEADER_BYTES]).expect("reader validated the header");
            if !self.types.contains(&header.accelerator_id) {
                self.report.unknown_accelerator += 1;
                self.reply(conn, ResponseHeader::error(Status::UnknownAccelerator, header.accelerator_id));
                let rest = header.total_bytes() - fragment.len() as u64;
                if rest > 0 {
                    self.skipping.insert(conn, rest);
                }
                return;
            }
            match self.pool.offer_first_fragment(&fragment, now) {
                Ok(Admission::Accepted(_)) => {}
                Ok(Admission::Dropped) => {
                    self.reply(conn, ResponseHeader::error(Status::DroppedNoBuffer, header.accelerator_id))
                }
                Err(_) => self.reply(conn, ResponseHeader::error(Status::Malformed, header.accelerator_id)),
            }
        } else if let Some(rest) = self.skipping.get_mut(&conn) {
            *rest = rest.saturating_sub(fragment.len() as u64);
            if *rest == 0 {
                self.skipping.remove(&conn);
            }
        } else {
            // Continuations of dropped requests come back as orphans, which
            // the pool counts and discards.
            match self.pool.offer_continuation(&fragment, now) {
                Ok(_) | Err(ReassemblyError::Orphan(_)) => {}
                Err(_) => self.reply(conn, ResponseHeader::error(Status::Malformed, 0)),
            }
        }
    }

    fn reply(&self, conn: u32, header: ResponseHeader) {
        if let Some(w) = self.writers.get(&conn) {
            respond(w, header, &[]);
        }
    }

    fn dispatch(&mut self) {
        let slots = &self.slots;
        let selector = &mut self.selector;
        let writers = &self.writers;
        self.pool.dispatch_complete(|request| {
            let views: Vec<QueueView> = slots
                .iter()
                .map(|s| QueueView {
                    accelerator_id: s.type_id,
                    queued_bytes: s.queued_bytes(),
                })
                .collect();
            let pick = selector
                .pick_accelerator_queue(request.header.accelerator_id, &views)
                .expect("unknown accelerators never reach the pool");
            let writer = writers.get(&request.connection_id).cloned();
            slots[pick]
                .try_enqueue(Job {
                    request,
                    writer,
                    enqueued_at: Instant::now(),
                })
                .map_err(|job| job.request)
        });
    }
}

struct SlotWorker {
    kind: AcceleratorKind,
    fragment_bytes: u64,
    shared: Arc<SlotShared>,
    events: Sender<Event>,
}

impl SlotWorker {
    fn run(self, queue: Receiver<Job>) {
        // End of the previous modeled service. A request that was already
        // waiting starts there rather than when the worker woke, so sleep
        // overshoot does not accumulate across back-to-back requests.
        let mut last_deadline: Option<Instant> = None;
        while let Ok(Job {
            request,
            writer,
            enqueued_at,
        }) = queue.recv()
        {
            let bytes = request.total_bytes();
            self.shared.running_bytes.store(bytes, Ordering::Release);
            self.shared.waiting_bytes.fetch_sub(bytes, Ordering::AcqRel);
            let _ = self.events.send(Event::SlotProgress);

            let result = match self.kind.service_time_per_fragment() {
                Some(per) => {
                    let frags = fragment_count(bytes, self.fragment_bytes);
                    let start = last_deadline.map_or(Instant::now(), |d| d.max(enqueued_at));
                    let deadline = start + Duration::from_nanos(per.0 * frags);
                    thread::sleep(deadline.saturating_duration_since(Instant::now()));
                    last_deadline = Some(deadline);
                    Ok(Vec::new())
                }
                None => execute(&self.kind, &request.payload, &request.header.parameters),
            };
            let accel = request.header.accelerator_id;
            if let Some(w) = &writer {
                match result {
                    Ok(out) => respond(w, ResponseHeader::ok(accel, out.len() as u32), &out),
                    Err(_) => respond(w, ResponseHeader::error(Status::Malformed, accel), &[]),
                }
            }

            self.shared.running_bytes.store(0, Ordering::Release);
            self.shared.completed.fetch_add(1, Ordering::AcqRel);
            let _ = self.events.send(Event::SlotProgress);
        }
    }
}
