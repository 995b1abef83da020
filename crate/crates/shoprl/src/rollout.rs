//! On-policy collection through a master/worker scoring pool.
//!
//! The master owns the environment sessions and the buffer. Each round it
//! batches one score request per live stream, hands them to the worker pool
//! (round-robin by stream id), applies the selected actions, and records
//! transitions. Workers are stateless scorers over an immutable snapshot, so
//! the collected buffer is bit-identical for any worker count.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::actions::{self, Decoding, QuerySource};
use crate::env::{Catalog, InstructionSampler, Session};
use crate::error::ShopError;
use crate::model::{encode_context, SeqModel};
use crate::nn::ParamSet;
use crate::ppo::Transition;
use crate::scalar::Scalar;
use crate::text::Vocabulary;
pub use crate::wire::{ScoreRequest, ScoreResponse};

/// Transitions grouped by stream, in collection order, with the bootstrap
/// value`V(next observation)` for a stream whose last episode is unfinished.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub streams: Vec<StreamRollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRollout {
    pub transitions: Vec<Transition>,
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.streams.iter().map(|s| s.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct CollectStats {
    pub transitions: usize,
    /// Final rewards of the episodes that finished during collection.
    pub episode_rewards: Vec<f64>,
}

/// A stateless scorer over an immutable parameter snapshot.
pub trait ScoreWorker<S: Scalar>: Send + Sync {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ShopError>;
    fn refresh(&self, params: &ParamSet<S>) -> Result<(), ShopError>;
}

/// In-process whole-model replica.
pub struct LocalWorker<S: Scalar> {
    model: RwLock<Arc<SeqModel<S>>>,
    vocab: Arc<Vocabulary>,
}

impl<S: Scalar> LocalWorker<S> {
    pub fn new(model: Arc<SeqModel<S>>, vocab: Arc<Vocabulary>) -> Self {
        LocalWorker { model: RwLock::new(model), vocab }
    }
}

impl<S: Scalar> ScoreWorker<S> for LocalWorker<S> {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ShopError> {
        let model = self.model.read().unwrap().clone();
        let (set, value) = actions::score_action_set_with_value(
            &model,
            &self.vocab,
            &request.context,
            &request.actions,
            QuerySource::Sample(request.query_seed),
        )?;
        Ok(ScoreResponse { stream_id: request.stream_id, set, value })
    }

    fn refresh(&self, params: &ParamSet<S>) -> Result<(), ShopError> {
        let mut guard = self.model.write().unwrap();
        let mut model = (**guard).clone();
        model.params = params.clone();
        *guard = Arc::new(model);
        Ok(())
    }
}

/// Remote replica reached over the frame protocol.
pub struct SocketWorker {
    conn: Mutex<std::net::TcpStream>,
    arch_hash: u64,
}

impl SocketWorker {
    pub fn connect(addr: &str, arch_hash: u64) -> Result<Self, ShopError> {
        let stream = std::net::TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        Ok(SocketWorker { conn: Mutex::new(stream), arch_hash })
    }
}

impl ScoreWorker<f32> for SocketWorker {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ShopError> {
        let mut conn = self.conn.lock().unwrap();
        crate::wire::write_frame(&mut conn, crate::wire::KIND_SCORE_REQUEST, &crate::wire::encode_request(request))?;
        let (kind, payload) = crate::wire::read_frame(&mut conn)?;
        match kind {
            crate::wire::KIND_SCORE_RESPONSE => crate::wire::decode_response(&payload),
            crate::wire::KIND_ERROR => Err(ShopError::Worker(
                String::from_utf8_lossy(&payload).into_owned(),
            )),
            k => Err(ShopError::Format(format!("unexpected frame kind {k}"))),
        }
    }

    fn refresh(&self, params: &ParamSet<f32>) -> Result<(), ShopError> {
        let mut conn = self.conn.lock().unwrap();
        let flat = params.to_f32_flat();
        crate::wire::write_frame(
            &mut conn,
            crate::wire::KIND_REFRESH,
            &crate::wire::encode_refresh(self.arch_hash, &flat),
        )?;
        let (kind, payload) = crate::wire::read_frame(&mut conn)?;
        match kind {
            crate::wire::KIND_ACK => Ok(()),
            crate::wire::KIND_ERROR => Err(ShopError::Worker(
                String::from_utf8_lossy(&payload).into_owned(),
            )),
            k => Err(ShopError::Format(format!("unexpected frame kind {k}"))),
        }
    }
}

pub struct WorkerPool<S: Scalar> {
    workers: Vec<Arc<dyn ScoreWorker<S>>>,
    timeout: Duration,
    collecting: AtomicBool,
}

impl<S: Scalar> WorkerPool<S> {
    pub fn new(workers: Vec<Arc<dyn ScoreWorker<S>>>) -> Self {
        WorkerPool { workers, timeout: Duration::from_secs(30), collecting: AtomicBool::new(false) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    /// Mark a collection in flight; refusing a second entry also refuses
    /// snapshot refreshes until [`end_collect`](Self::end_collect).
    pub fn begin_collect(&self) -> Result<(), ShopError> {
        if self.collecting.swap(true, Ordering::SeqCst) {
            return Err(ShopError::Contract("a collection is already in flight".into()));
        }
        Ok(())
    }

    pub fn end_collect(&self) {
        self.collecting.store(false, Ordering::SeqCst);
    }

    /// Push new parameters to every worker. All workers hold the new
    /// snapshot on return; a partial refresh aborts with the worker index.
    pub fn refresh_snapshot(&self, params: &ParamSet<S>) -> Result<(), ShopError> {
        if self.collecting.load(Ordering::SeqCst) {
            return Err(ShopError::Contract(
                "snapshot refresh rejected: collection in flight".into(),
            ));
        }
        let mut failed = Vec::new();
        for (i, worker) in self.workers.iter().enumerate() {
            if let Err(e) = worker.refresh(params) {
                failed.push(format!("worker {i}: {e}"));
            }
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(ShopError::Worker(format!("partial snapshot refresh: {}", failed.join("; "))))
        }
    }

    /// Deterministic round-robin dispatch by stream id; responses are
    /// consolidated in request order regardless of completion order. A
    /// failed or timed-out request is retried once on the next worker.
    pub fn dispatch(&self, requests: &[ScoreRequest]) -> Result<Vec<ScoreResponse>, ShopError> {
        let n = self.workers.len();
        if n == 0 {
            return Err(ShopError::Contract("no workers registered".into()));
        }
        let (tx, rx) = mpsc::channel::<(usize, Result<ScoreResponse, ShopError>)>();
        for (w_idx, worker) in self.workers.iter().enumerate() {
            let mine: Vec<(usize, ScoreRequest)> = requests
                .iter()
                .enumerate()
                .filter(|(_, r)| (r.stream_id as usize) % n == w_idx)
                .map(|(pos, r)| (pos, r.clone()))
                .collect();
            if mine.is_empty() {
                continue;
            }
            let worker = Arc::clone(worker);
            let tx = tx.clone();
            std::thread::spawn(move || {
                for (pos, req) in mine {
                    let result = worker.score(&req);
                    if tx.send((pos, result)).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);

        let deadline = Instant::now() + self.timeout;
        let mut out: Vec<Option<ScoreResponse>> = vec![None; requests.len()];
        let mut pending = requests.len();
        while pending > 0 {
            let budget = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(budget) {
                Ok((pos, Ok(resp))) => {
                    out[pos] = Some(resp);
                    pending -= 1;
                }
                Ok((pos, Err(_))) => {
                    // First failure: retry on the next worker in the ring.
                    let req = &requests[pos];
                    let retry_on = ((req.stream_id as usize) % n + 1) % n;
                    match self.workers[retry_on].score(req) {
                        Ok(resp) => {
                            out[pos] = Some(resp);
                            pending -= 1;
                        }
                        Err(e) => {
                            return Err(ShopError::Worker(format!(
                                "request for stream {} failed twice: {e}",
                                req.stream_id
                            )));
                        }
                    }
                }
                Err(_) => break,
            }
        }
        // Requests that never answered within the deadline get one retry.
        for pos in 0..out.len() {
            if out[pos].is_none() {
                let req = &requests[pos];
                let retry_on = ((req.stream_id as usize) % n + 1) % n;
                match self.workers[retry_on].score(req) {
                    Ok(resp) => out[pos] = Some(resp),
                    Err(e) => {
                        return Err(ShopError::Worker(format!(
                            "request for stream {} timed out and retry failed: {e}",
                            req.stream_id
                        )));
                    }
                }
            }
        }
        Ok(out.into_iter().map(|o| o.unwrap()).collect())
    }
}

/// Serves score and refresh frames over a local TCP socket: one process-level
/// worker replica, shared by however many connections the master opens.
pub struct ScoringServer {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl ScoringServer {
    pub fn spawn(
        bind_addr: &str,
        model: SeqModel<f32>,
        vocab: Arc<Vocabulary>,
    ) -> Result<Self, ShopError> {
        let listener = std::net::TcpListener::bind(bind_addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(RwLock::new(Arc::new(model)));
        let accept_stop = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut conns: Vec<std::thread::JoinHandle<()>> = Vec::new();
            while !accept_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((conn, _)) => {
                        conn.set_nodelay(true).ok();
                        conn.set_read_timeout(Some(Duration::from_millis(50))).ok();
                        let shared = shared.clone();
                        let vocab = vocab.clone();
                        let stop = accept_stop.clone();
                        conns.push(std::thread::spawn(move || {
                            serve_connection(conn, shared, vocab, stop);
                        }));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
            for c in conns {
                let _ = c.join();
            }
        });
        Ok(ScoringServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> String {
        self.addr.to_string()
    }
}

impl Drop for ScoringServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_connection(
    mut conn: std::net::TcpStream,
    shared: Arc<RwLock<Arc<SeqModel<f32>>>>,
    vocab: Arc<Vocabulary>,
    stop: Arc<AtomicBool>,
) {
    use crate::wire;
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let (kind, payload) = match wire::read_frame(&mut conn) {
            Ok(frame) => frame,
            Err(ShopError::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                continue;
            }
            Err(_) => return,
        };
        let reply = match kind {
            wire::KIND_SCORE_REQUEST => match wire::decode_request(&payload) {
                Ok(request) => {
                    let model = shared.read().unwrap().clone();
                    match actions::score_action_set_with_value(
                        &model,
                        &vocab,
                        &request.context,
                        &request.actions,
                        QuerySource::Sample(request.query_seed),
                    ) {
                        Ok((set, value)) => (
                            wire::KIND_SCORE_RESPONSE,
                            wire::encode_response(&ScoreResponse {
                                stream_id: request.stream_id,
                                set,
                                value,
                            }),
                        ),
                        Err(e) => (wire::KIND_ERROR, e.to_string().into_bytes()),
                    }
                }
                Err(e) => (wire::KIND_ERROR, e.to_string().into_bytes()),
            },
            wire::KIND_REFRESH => match wire::decode_refresh(&payload) {
                Ok((hash, flat)) => {
                    let current = shared.read().unwrap().clone();
                    if hash != current.cfg.arch_hash() {
                        (wire::KIND_ERROR, b"architecture hash mismatch".to_vec())
                    } else {
                        match ParamSet::from_f32_flat(
                            crate::model::parameter_specs(&current.cfg),
                            &flat,
                        ) {
                            Ok(params) => {
                                let mut model = (*current).clone();
                                model.params = params;
                                *shared.write().unwrap() = Arc::new(model);
                                (wire::KIND_ACK, Vec::new())
                            }
                            Err(e) => (wire::KIND_ERROR, e.to_string().into_bytes()),
                        }
                    }
                }
                Err(e) => (wire::KIND_ERROR, e.to_string().into_bytes()),
            },
            wire::KIND_SHUTDOWN => {
                let _ = wire::write_frame(&mut conn, wire::KIND_ACK, &[]);
                stop.store(true, Ordering::SeqCst);
                return;
            }
            k => (wire::KIND_ERROR, format!("unexpected frame kind {k}").into_bytes()),
        };
        if wire::write_frame(&mut conn, reply.0, &reply.1).is_err() {
            return;
        }
    }
}

struct StreamState {
    session: Session,
    prev_obs: Option<Vec<String>>,
    rng: ChaCha8Rng,
    sampler: InstructionSampler,
}

pub struct RolloutCoordinator<S: Scalar> {
    catalog: Arc<Catalog>,
    vocab: Arc<Vocabulary>,
    pool: WorkerPool<S>,
    master: Arc<SeqModel<S>>,
    streams: Vec<StreamState>,
    horizon: usize,
}

impl<S: Scalar> RolloutCoordinator<S> {
    /// Streams own their rng and instruction sampler (namespaced per stream)
    /// so the collected data depends only on the seed, never on scheduling.
    pub fn new(
        catalog: Arc<Catalog>,
        vocab: Arc<Vocabulary>,
        model: Arc<SeqModel<S>>,
        pool: WorkerPool<S>,
        n_streams: usize,
        horizon: usize,
        goal_namespace: u32,
        seed: u64,
    ) -> Self {
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let streams = (0..n_streams)
            .map(|i| {
                let rng = ChaCha8Rng::seed_from_u64(seeder.next_u64());
                let mut sampler =
                    InstructionSampler::new(goal_namespace + i as u32, seeder.next_u64());
                let instruction = sampler.sample(&catalog);
                StreamState {
                    session: Session::reset(catalog.clone(), instruction, horizon),
                    prev_obs: None,
                    rng,
                    sampler,
                }
            })
            .collect();
        RolloutCoordinator { catalog, vocab, pool, master: model, streams, horizon }
    }

    pub fn pool(&self) -> &WorkerPool<S> {
        &self.pool
    }

    pub fn snapshot(&self) -> &Arc<SeqModel<S>> {
        &self.master
    }

    /// Install new parameters on the master and every worker.
    pub fn refresh_snapshot(&mut self, params: &ParamSet<S>) -> Result<(), ShopError> {
        self.pool.refresh_snapshot(params)?;
        let mut model = (*self.master).clone();
        model.params = params.clone();
        self.master = Arc::new(model);
        Ok(())
    }

    fn context_for(&self, stream: &StreamState) -> crate::model::ContextEncoding {
        let obs = stream.session.observe();
        let prev = if self.master.cfg.obs_history >= 2 {
            stream.prev_obs.as_deref()
        } else {
            None
        };
        encode_context(
            &self.vocab,
            &stream.session.instruction().goal_text,
            prev,
            &obs.text,
            self.master.cfg.context_limit,
        )
    }

    /// Collect `steps_per_stream` lockstep rounds across all streams.
    /// Episodes that finish mid-collection reset with a freshly sampled
    /// instruction.
    pub fn collect(
        &mut self,
        steps_per_stream: usize,
        selection: Decoding,
    ) -> Result<(RolloutBuffer, CollectStats), ShopError> {
        self.pool.begin_collect()?;
        let result = self.collect_inner(steps_per_stream, selection);
        self.pool.end_collect();
        result
    }

    fn collect_inner(
        &mut self,
        steps_per_stream: usize,
        selection: Decoding,
    ) -> Result<(RolloutBuffer, CollectStats), ShopError> {
        let mut rollouts: Vec<StreamRollout> = (0..self.streams.len())
            .map(|_| StreamRollout { transitions: Vec::with_capacity(steps_per_stream), bootstrap_value: 0.0 })
            .collect();
        let mut stats = CollectStats::default();

        for _round in 0..steps_per_stream {
            let mut requests = Vec::with_capacity(self.streams.len());
            for i in 0..self.streams.len() {
                let context = self.context_for(&self.streams[i]);
                let actions = self.streams[i].session.observe().actions;
                let query_seed = self.streams[i].rng.next_u64();
                requests.push(ScoreRequest { stream_id: i as u32, context, actions, query_seed });
            }
            let responses = self.pool.dispatch(&requests)?;

            for (i, response) in responses.into_iter().enumerate() {
                let stream = &mut self.streams[i];
                let idx = actions::select(&response.set, selection, &mut stream.rng);
                let action = response.set.actions[idx].clone();
                let cur_obs = stream.session.observe();
                let step = stream.session.step(&action)?;
                rollouts[i].transitions.push(Transition {
                    context: requests[i].context.clone(),
                    action_index: idx,
                    action_set: response.set.actions,
                    logprob_old: response.set.probs[idx].ln(),
                    value_old: response.value,
                    reward: step.reward,
                    done: step.done,
                });
                stats.transitions += 1;
                if step.done {
                    stats.episode_rewards.push(step.reward);
                    let instruction = stream.sampler.sample(&self.catalog);
                    stream.session = Session::reset(self.catalog.clone(), instruction, self.horizon);
                    stream.prev_obs = None;
                } else {
                    stream.prev_obs = Some(cur_obs.text);
                }
            }
        }

        // Bootstrap values for streams whose last episode is still open,
        // computed on the master's copy of the collection snapshot.
        for (i, rollout) in rollouts.iter_mut().enumerate() {
            let open = rollout.transitions.last().map(|t| !t.done).unwrap_or(false);
            rollout.bootstrap_value = if open {
                let ctx = self.context_for(&self.streams[i]);
                self.master.estimate_value(&ctx).to_f64_c()
            } else {
                0.0
            };
        }

        Ok((RolloutBuffer { streams: rollouts }, stats))
    }
}
