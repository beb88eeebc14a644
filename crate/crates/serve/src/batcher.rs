use std::collections::{HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use prodcat::catalog::Product;
use prodcat::config::ServeSettings;
use prodcat::models::{Classifier, Prediction};
use tokio::sync::oneshot;

use crate::stats::Stats;

/// A frozen model that answers a batch at once.
pub trait BatchPredictor: Send + Sync + 'static {
    fn num_classes(&self) -> usize;

    /// Top-`k` for every product, in input order.
    fn predict_batch(&self, products: &[&Product], k: usize) -> prodcat::Result<Vec<Vec<Prediction>>>;
}

impl<C: Classifier + 'static> BatchPredictor for C {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn predict_batch(&self, products: &[&Product], k: usize) -> prodcat::Result<Vec<Vec<Prediction>>> {
        self.predict_topk_batch(products, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatcherConfig {
    pub poll_interval: Duration,
    pub max_batch: usize,
    pub k: usize,
    pub queue_capacity: usize,
    pub request_timeout: Duration,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        (&ServeSettings::default()).into()
    }
}

impl From<&ServeSettings> for BatcherConfig {
    fn from(s: &ServeSettings) -> Self {
        BatcherConfig {
            poll_interval: s.poll_interval,
            max_batch: s.max_batch,
            k: s.k,
            queue_capacity: s.queue_capacity,
            request_timeout: s.request_timeout,
        }
    }
}

impl BatcherConfig {
    pub fn validate(&self) -> prodcat::Result<()> {
        if self.poll_interval.is_zero() || self.request_timeout.is_zero() {
            return Err(prodcat::Error::Config("poll_interval and request_timeout must be > 0".into()));
        }
        if self.max_batch == 0 || self.k == 0 || self.queue_capacity == 0 {
            return Err(prodcat::Error::Config("max_batch, k and queue_capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why a whole batch failed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("batch {batch_id} failed: {message}")]
pub struct BatchError {
    pub batch_id: u64,
    pub message: String,
}

pub type Reply = Result<Vec<Prediction>, BatchError>;
pub type Ticket = oneshot::Receiver<Reply>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnqueueError {
    #[error("queue is full; retry after {retry_after:?}")]
    Overloaded { retry_after: Duration },
    #[error("request id {0:?} is already in flight")]
    Duplicate(String),
    #[error("k must be in 1..={max}, got {k}")]
    InvalidK { k: usize, max: usize },
    #[error("service is shutting down")]
    ShuttingDown,
}

struct Pending {
    id: String,
    product: Product,
    k: usize,
    reply: oneshot::Sender<Reply>,
}

#[derive(Default)]
struct Queue {
    items: VecDeque<Pending>,
    in_flight: HashSet<String>,
    shutdown: bool,
}

struct Shared {
    queue: Mutex<Queue>,
    wake: Condvar,
    stats: Stats,
    predictor: Arc<dyn BatchPredictor>,
    config: BatcherConfig,
}

/// Bounded FIFO plus the thread that drains it.
pub struct Batcher {
    shared: Arc<Shared>,
    drain: Mutex<Option<JoinHandle<()>>>,
}

impl Batcher {
    /// A batcher whose drain thread is not running yet; see [`Batcher::spawn_drain`].
    pub fn new(predictor: Arc<dyn BatchPredictor>, config: BatcherConfig) -> prodcat::Result<Self> {
        config.validate()?;
        Ok(Batcher {
            shared: Arc::new(Shared {
                queue: Mutex::new(Queue::default()),
                wake: Condvar::new(),
                stats: Stats::default(),
                predictor,
                config,
            }),
            drain: Mutex::new(None),
        })
    }

    pub fn start(predictor: Arc<dyn BatchPredictor>, config: BatcherConfig) -> prodcat::Result<Self> {
        let b = Self::new(predictor, config)?;
        b.spawn_drain();
        Ok(b)
    }

    /// Starts the drain thread. Calling it again has no effect.
    pub fn spawn_drain(&self) {
        let mut slot = self.drain.lock().unwrap();
        if slot.is_none() {
            let shared = Arc::clone(&self.shared);
            let handle = std::thread::Builder::new()
                .name("prodcat-drain".into())
                .spawn(move || drain_loop(&shared))
                .expect("spawn drain thread");
            *slot = Some(handle);
        }
    }

    pub fn config(&self) -> &BatcherConfig {
        &self.shared.config
    }

    pub fn num_classes(&self) -> usize {
        self.shared.predictor.num_classes()
    }

    pub fn stats(&self) -> &Stats {
        &self.shared.stats
    }

    pub fn queue_depth(&self) -> usize {
        self.shared.queue.lock().unwrap().items.len()
    }

    /// Appends a request; the ticket resolves when its batch completes.
    pub fn enqueue(&self, id: String, product: Product, k: Option<usize>) -> Result<Ticket, EnqueueError> {
        let cfg = &self.shared.config;
        let k = k.unwrap_or(cfg.k);
        let max = self.num_classes();
        if k == 0 || k > max {
            return Err(EnqueueError::InvalidK { k, max });
        }
        let mut q = self.shared.queue.lock().unwrap();
        if q.shutdown {
            return Err(EnqueueError::ShuttingDown);
        }
        if q.in_flight.contains(&id) {
            return Err(EnqueueError::Duplicate(id));
        }
        if q.items.len() >= cfg.queue_capacity {
            self.shared.stats.rejected();
            return Err(EnqueueError::Overloaded {
                retry_after: cfg.poll_interval,
            });
        }
        let (tx, rx) = oneshot::channel();
        q.in_flight.insert(id.clone());
        q.items.push_back(Pending {
            id,
            product,
            k,
            reply: tx,
        });
        self.shared.stats.accepted();
        if q.items.len() >= cfg.max_batch {
            self.shared.wake.notify_one();
        }
        Ok(rx)
    }

    /// Stops accepting requests, answers what is queued and joins the drain thread.
    pub fn shutdown(&self) {
        self.shared.queue.lock().unwrap().shutdown = true;
        self.shared.wake.notify_all();
        if let Some(h) = self.drain.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

impl Drop for Batcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn drain_loop(shared: &Shared) {
    let cfg = &shared.config;
    let mut next_tick = Instant::now() + cfg.poll_interval;
    loop {
        let batch: Vec<Pending> = {
            let mut q = shared.queue.lock().unwrap();
            loop {
                if q.items.len() >= cfg.max_batch {
                    break q.items.drain(..cfg.max_batch).collect();
                }
                let now = Instant::now();
                if now >= next_tick {
                    while next_tick <= now {
                        next_tick += cfg.poll_interval;
                    }
                    if !q.items.is_empty() {
                        break q.items.drain(..).collect();
                    }
                }
                if q.shutdown {
                    if q.items.is_empty() {
                        return;
                    }
                    let n = q.items.len().min(cfg.max_batch);
                    break q.items.drain(..n).collect();
                }
                q = shared.wake.wait_timeout(q, next_tick - now).unwrap().0;
            }
        };
        run_batch(shared, batch);
    }
}

fn run_batch(shared: &Shared, batch: Vec<Pending>) {
    let n = batch.len();
    let batch_id = shared.stats.batch_started(n);
    let kmax = batch.iter().map(|p| p.k).max().unwrap_or(1);
    let products: Vec<&Product> = batch.iter().map(|p| &p.product).collect();
    let result = catch_unwind(AssertUnwindSafe(|| shared.predictor.predict_batch(&products, kmax)));
    let outcome = match result {
        Ok(Ok(rows)) if rows.len() == n => Ok(rows),
        Ok(Ok(rows)) => Err(format!("model returned {} rows for {n} requests", rows.len())),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err("inference panicked".to_string()),
    };
    let ok = outcome.is_ok();
    if let Err(msg) = &outcome {
        log::error!("batch {batch_id} of {n} failed: {msg}");
    }
    // Release ids and count the batch before anyone can observe the replies.
    {
        let mut q = shared.queue.lock().unwrap();
        for p in &batch {
            q.in_flight.remove(&p.id);
        }
    }
    shared.stats.batch_finished(ok, n);
    match outcome {
        Ok(rows) => {
            for (p, mut row) in batch.into_iter().zip(rows) {
                row.truncate(p.k);
                let _ = p.reply.send(Ok(row));
            }
        }
        Err(message) => {
            for p in batch {
                let _ = p.reply.send(Err(BatchError {
                    batch_id,
                    message: message.clone(),
                }));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ranks classes starting from the product id's length; products with
    /// id `boom` make the batch fail and `panic` makes it panic.
    struct Toy {
        classes: usize,
    }

    impl BatchPredictor for Toy {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn predict_batch(&self, products: &[&Product], k: usize) -> prodcat::Result<Vec<Vec<Prediction>>> {
            if products.iter().any(|p| p.id == "boom") {
                return Err(prodcat::Error::InvalidArgument("boom".into()));
            }
            if products.iter().any(|p| p.id == "panic") {
                panic!("model bug");
            }
            Ok(products
                .iter()
                .map(|p| {
                    let first = p.id.len() % self.classes;
                    (0..k)
                        .map(|j| {
                            let c = (first + j) % self.classes;
                            Prediction {
                                class: c,
                                label: format!("c{c}"),
                                probability: 1.0 / (j + 2) as f64,
                            }
                        })
                        .collect()
                })
                .collect())
        }
    }

    fn config(poll_ms: u64, max_batch: usize) -> BatcherConfig {
        BatcherConfig {
            poll_interval: Duration::from_millis(poll_ms),
            max_batch,
            queue_capacity: 8 * max_batch.max(1024),
            ..Default::default()
        }
    }

    fn toy() -> Arc<dyn BatchPredictor> {
        Arc::new(Toy { classes: 5 })
    }

    #[test]
    fn default_config_is_valid() {
        let c = BatcherConfig::default();
        assert_eq!(c.poll_interval, Duration::from_millis(300));
        assert_eq!(c.max_batch, 1024);
        assert_eq!(c.k, 3);
        assert_eq!(c.queue_capacity, 8192);
        assert!(Batcher::new(toy(), c).is_ok());
    }

    #[test]
    fn queued_requests_drain_in_full_batches_then_remainder() {
        let b = Batcher::new(toy(), config(50, 1024)).unwrap();
        let tickets: Vec<Ticket> = (0..2500)
            .map(|i| b.enqueue(format!("r{i}"), Product::new(format!("p{i}")), None).unwrap())
            .collect();
        b.spawn_drain();
        for t in tickets {
            assert_eq!(t.blocking_recv().unwrap().unwrap().len(), 3);
        }
        assert_eq!(b.stats().recent_batches(), vec![1024, 1024, 452]);
    }

    #[test]
    fn single_request_answers_after_one_tick() {
        let b = Batcher::start(toy(), config(30, 8)).unwrap();
        let started = Instant::now();
        let t = b.enqueue("only".into(), Product::new("x"), Some(1)).unwrap();
        let reply = t.blocking_recv().unwrap().unwrap();
        assert_eq!(reply.len(), 1);
        assert!(started.elapsed() < Duration::from_millis(30 + 500));
        assert_eq!(b.stats().recent_batches(), vec![1]);
    }

    #[test]
    fn full_batch_flushes_early() {
        let b = Batcher::start(toy(), config(5_000, 4)).unwrap();
        let started = Instant::now();
        let tickets: Vec<Ticket> = (0..4)
            .map(|i| b.enqueue(format!("r{i}"), Product::new("x"), None).unwrap())
            .collect();
        for t in tickets {
            t.blocking_recv().unwrap().unwrap();
        }
        assert!(started.elapsed() < Duration::from_secs(2));
    }

    #[test]
    fn duplicates_overload_and_bad_k() {
        let mut c = config(50, 2);
        c.queue_capacity = 2;
        let b = Batcher::new(toy(), c).unwrap();
        let _t = b.enqueue("a".into(), Product::new("x"), None).unwrap();
        assert_eq!(
            b.enqueue("a".into(), Product::new("y"), None).unwrap_err(),
            EnqueueError::Duplicate("a".into())
        );
        let _u = b.enqueue("b".into(), Product::new("x"), None).unwrap();
        assert!(matches!(
            b.enqueue("c".into(), Product::new("x"), None),
            Err(EnqueueError::Overloaded { .. })
        ));
        assert!(matches!(
            b.enqueue("d".into(), Product::new("x"), Some(6)),
            Err(EnqueueError::InvalidK { k: 6, max: 5 })
        ));
        assert_eq!(b.stats().snapshot().rejected, 1);
        b.spawn_drain();
        _t.blocking_recv().unwrap().unwrap();
        // Once answered, the id may be reused.
        let again = b.enqueue("a".into(), Product::new("x"), None).unwrap();
        again.blocking_recv().unwrap().unwrap();
    }

    #[test]
    fn failures_answer_whole_batch_and_loop_continues() {
        let b = Batcher::new(toy(), config(20, 16)).unwrap();
        let ok = b.enqueue("fine".into(), Product::new("x"), None).unwrap();
        let bad = b.enqueue("bad".into(), Product::new("boom"), None).unwrap();
        b.spawn_drain();
        let e1 = ok.blocking_recv().unwrap().unwrap_err();
        let e2 = bad.blocking_recv().unwrap().unwrap_err();
        assert_eq!(e1.batch_id, e2.batch_id);
        let p = b.enqueue("p".into(), Product::new("panic"), None).unwrap();
        assert!(p.blocking_recv().unwrap().unwrap_err().message.contains("panicked"));
        let after = b.enqueue("after".into(), Product::new("x"), None).unwrap();
        assert!(after.blocking_recv().unwrap().is_ok());
        let s = b.stats().snapshot();
        assert_eq!((s.failed, s.succeeded), (3, 1));
    }

    #[test]
    fn shutdown_answers_pending_requests() {
        let b = Batcher::new(toy(), config(10_000, 64)).unwrap();
        let t = b.enqueue("x".into(), Product::new("x"), None).unwrap();
        b.spawn_drain();
        b.shutdown();
        assert!(t.blocking_recv().unwrap().is_ok());
        assert_eq!(
            b.enqueue("y".into(), Product::new("x"), None).unwrap_err(),
            EnqueueError::ShuttingDown
        );
    }
}
