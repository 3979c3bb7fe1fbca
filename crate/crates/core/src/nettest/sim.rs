use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, SimConfig};
use super::fec::{fec_decode, fec_encode, Shard};
use crate::cluster::ClusterPath;
use crate::dht::{uniform_positions, DhtError, Overlay};
use crate::rng::{seeded, SimRng};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event queue exceeded its cap of {0}")]
    QueueOverflow(usize),
    #[error("node {0} is not live")]
    DeadNode(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dht(#[from] DhtError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageKind {
    Data,
    /// `scope`: depth of the subtree the receiver must cover, or `None` for
    /// a leaf-level copy that is not forwarded.
    Broadcast { id: u64, scope: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Deliver {
        src: usize,
        dst: usize,
        shard: Shard,
        kind: MessageKind,
        sent_at: f64,
    },
    /// One stabilization round over every live node.
    Timer,
    Churn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub sequence: u64,
    pub action: Action,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.sequence.cmp(&other.sequence))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub events: u64,
    pub frames_sent: u64,
    pub shards_sent: u64,
    pub shards_lost: u64,
    pub frames_delivered: u64,
    /// Frames that lost two or more shards in flight.
    pub frames_undecodable: u64,
    pub shards_to_dead: u64,
    pub broadcast_messages: u64,
    pub duplicates_dropped: u64,
    pub joins: u64,
    pub leaves: u64,
    pub fails: u64,
    pub stabilize_rounds: u64,
    pub delivery_latency_sum: f64,
    pub last_event_time: f64,
}

impl SimMetrics {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn delivery_rate(&self) -> f64 {
        if self.frames_sent == 0 {
            0.0
        } else {
            self.frames_delivered as f64 / self.frames_sent as f64
        }
    }

    /// Associative merge of two independent runs.
    pub fn merge(&mut self, o: &SimMetrics) {
        self.events += o.events;
        self.frames_sent += o.frames_sent;
        self.shards_sent += o.shards_sent;
        self.shards_lost += o.shards_lost;
        self.frames_delivered += o.frames_delivered;
        self.frames_undecodable += o.frames_undecodable;
        self.shards_to_dead += o.shards_to_dead;
        self.broadcast_messages += o.broadcast_messages;
        self.duplicates_dropped += o.duplicates_dropped;
        self.joins += o.joins;
        self.leaves += o.leaves;
        self.fails += o.fails;
        self.stabilize_rounds += o.stabilize_rounds;
        self.delivery_latency_sum += o.delivery_latency_sum;
        self.last_event_time = self.last_event_time.max(o.last_event_time);
    }

    /// `metric,value` rows in a fixed order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let rows: [(&str, String); 15] = [
            ("events", self.events.to_string()),
            ("frames_sent", self.frames_sent.to_string()),
            ("shards_sent", self.shards_sent.to_string()),
            ("shards_lost", self.shards_lost.to_string()),
            ("frames_delivered", self.frames_delivered.to_string()),
            ("frames_undecodable", self.frames_undecodable.to_string()),
            ("shards_to_dead", self.shards_to_dead.to_string()),
            ("broadcast_messages", self.broadcast_messages.to_string()),
            ("duplicates_dropped", self.duplicates_dropped.to_string()),
            ("joins", self.joins.to_string()),
            ("leaves", self.leaves.to_string()),
            ("fails", self.fails.to_string()),
            ("stabilize_rounds", self.stabilize_rounds.to_string()),
            ("delivery_latency_sum", format!("{:?}", self.delivery_latency_sum)),
            ("last_event_time", format!("{:?}", self.last_event_time)),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

/// A reassembled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub frame_id: u64,
    pub src: usize,
    pub dst: usize,
    pub sent_at: f64,
    pub arrived_at: f64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BroadcastReport {
    /// Distinct live nodes holding the payload, the source included.
    pub reached: usize,
    pub messages: u64,
    /// Copies received per node, duplicates included; the source counts once.
    pub receipts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChurnOutcome {
    pub joined: usize,
    pub left: usize,
    pub failed: usize,
}

struct BroadcastState {
    payload: Vec<u8>,
    /// Live membership when the broadcast started.
    members: Vec<(usize, ClusterPath)>,
    report: BroadcastReport,
}

/// Single-threaded discrete-event simulation around one overlay.
pub struct Simulator {
    pub config: SimConfig,
    pub overlay: Overlay,
    pub now: f64,
    pub metrics: SimMetrics,
    pub deliveries: Vec<Delivery>,
    queue: BinaryHeap<Reverse<SimEvent>>,
    sequence: u64,
    next_frame: u64,
    next_broadcast: u64,
    rng: SimRng,
    partial: HashMap<(u64, usize), Vec<Shard>>,
    complete: HashSet<(u64, usize)>,
    broadcasts: BTreeMap<u64, BroadcastState>,
    trace: Option<Vec<String>>,
}

impl Simulator {
    /// Build a uniform random overlay of `config.nodes` nodes.
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let ov_cfg = config.overlay_config(config.nodes, config.seed);
        let overlay = Overlay::random(ov_cfg, config.link_model(), config.nodes, &mut rng);
        Ok(Self::with_rng(config, overlay, rng))
    }

    pub fn from_overlay(config: SimConfig, overlay: Overlay) -> Result<Self, SimError> {
        config.validate()?;
        let rng = seeded(crate::rng::derive(config.seed, 0x51u64));
        Ok(Self::with_rng(config, overlay, rng))
    }

    fn with_rng(config: SimConfig, overlay: Overlay, rng: SimRng) -> Self {
        Self {
            config,
            overlay,
            now: 0.0,
            metrics: SimMetrics::default(),
            deliveries: Vec::new(),
            queue: BinaryHeap::new(),
            sequence: 0,
            next_frame: 0,
            next_broadcast: 0,
            rng,
            partial: HashMap::new(),
            complete: HashSet::new(),
            broadcasts: BTreeMap::new(),
            trace: None,
        }
    }

    /// Record one line per processed event.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    /// Overlay and random stream together, for callers that need both.
    pub fn parts(&mut self) -> (&mut Overlay, &mut SimRng) {
        (&mut self.overlay, &mut self.rng)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, delay: f64, action: Action) -> Result<(), SimError> {
        if self.queue.len() >= self.config.event_cap {
            return Err(SimError::QueueOverflow(self.config.event_cap));
        }
        let ev = SimEvent {
            time: self.now + delay.max(0.0),
            sequence: self.sequence,
            action,
        };
        self.sequence += 1;
        self.queue.push(Reverse(ev));
        Ok(())
    }

    /// Start periodic stabilization, plus churn when the schedule is non-zero.
    pub fn start_maintenance(&mut self) -> Result<(), SimError> {
        let period = self.config.epoch_length;
        if !self.config.churn.is_static() {
            self.schedule(period, Action::Churn)?;
        }
        self.schedule(period, Action::Timer)
    }

    /// Process every event with time ≤ `until`.
    pub fn run(&mut self, until: f64) -> Result<SimMetrics, SimError> {
        while let Some(Reverse(ev)) = self.queue.peek() {
            if ev.time > until {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            self.metrics.events += 1;
            self.metrics.last_event_time = ev.time;
            if let Some(t) = self.trace.as_mut() {
                t.push(describe(&ev));
            }
            self.process(ev.action)?;
        }
        Ok(self.metrics.clone())
    }

    fn process(&mut self, action: Action) -> Result<(), SimError> {
        match action {
            Action::Deliver {
                src,
                dst,
                shard,
                kind,
                sent_at,
            } => self.on_shard(src, dst, shard, kind, sent_at),
            Action::Timer => {
                self.overlay.stabilize_round(&mut self.rng);
                self.overlay.advance_epoch();
                self.metrics.stabilize_rounds += 1;
                self.schedule(self.config.epoch_length, Action::Timer)
            }
            Action::Churn => {
                let schedule = self.config.churn;
                self.churn_step(schedule.join_rate, schedule.leave_rate, schedule.fail_rate)?;
                self.schedule(self.config.epoch_length, Action::Churn)
            }
        }
    }

    /// Fire-and-forget: shards are lost independently, survivors arrive
    /// after one link latency.
    pub fn send(&mut self, src: usize, dst: usize, payload: &[u8]) -> Result<u64, SimError> {
        self.send_kind(src, dst, payload, MessageKind::Data)
    }

    fn send_kind(&mut self, src: usize, dst: usize, payload: &[u8], kind: MessageKind) -> Result<u64, SimError> {
        for n in [src, dst] {
            if n >= self.overlay.nodes.len() || !self.overlay.is_alive(n) {
                return Err(SimError::DeadNode(n));
            }
        }
        let frame_id = self.next_frame;
        self.next_frame += 1;
        let frame = fec_encode(payload, self.config.shards, frame_id).expect("shards validated");
        let (a, b) = (self.overlay.nodes[src].id.position, self.overlay.nodes[dst].id.position);
        let latency = self.overlay.link.latency(&a, &b, &mut self.rng);
        self.metrics.frames_sent += 1;
        let mut lost = 0;
        for shard in frame.shards {
            self.metrics.shards_sent += 1;
            if self.config.loss > 0.0 && self.rng.random::<f64>() < self.config.loss {
                self.metrics.shards_lost += 1;
                lost += 1;
                continue;
            }
            let sent_at = self.now;
            self.schedule(
                latency,
                Action::Deliver {
                    src,
                    dst,
                    shard,
                    kind: kind.clone(),
                    sent_at,
                },
            )?;
        }
        if lost > 1 {
            self.metrics.frames_undecodable += 1;
        }
        Ok(frame_id)
    }

    fn on_shard(&mut self, src: usize, dst: usize, shard: Shard, kind: MessageKind, sent_at: f64) -> Result<(), SimError> {
        if !self.overlay.is_alive(dst) {
            self.metrics.shards_to_dead += 1;
            return Ok(());
        }
        let key = (shard.frame_id, dst);
        if self.complete.contains(&key) {
            return Ok(());
        }
        let k = shard.k;
        let got = self.partial.entry(key).or_default();
        got.push(shard);
        if got.len() < k {
            return Ok(());
        }
        let shards = self.partial.remove(&key).expect("present");
        let Ok(payload) = fec_decode(&shards) else {
            return Ok(());
        };
        self.complete.insert(key);
        self.metrics.frames_delivered += 1;
        self.metrics.delivery_latency_sum += self.now - sent_at;
        match kind {
            MessageKind::Data => {
                self.deliveries.push(Delivery {
                    frame_id: key.0,
                    src,
                    dst,
                    sent_at,
                    arrived_at: self.now,
                    payload,
                });
                Ok(())
            }
            MessageKind::Broadcast { id, scope } => self.on_broadcast(dst, id, scope),
        }
    }

    fn on_broadcast(&mut self, at: usize, id: u64, scope: Option<usize>) -> Result<(), SimError> {
        let state = self.broadcasts.get_mut(&id).expect("known broadcast");
        let count = state.report.receipts.entry(at).or_insert(0);
        *count += 1;
        if *count > 1 {
            self.metrics.duplicates_dropped += 1;
            return Ok(());
        }
        state.report.reached += 1;
        match scope {
            Some(depth) => self.forward(at, id, depth),
            None => Ok(()),
        }
    }

    /// Cover the subtree `C_scope(at)`: one contact per sibling cluster at each
    /// deeper level, then every other member of `at`'s own leaf.
    fn forward(&mut self, at: usize, id: u64, scope: usize) -> Result<(), SimError> {
        let own = self.overlay.nodes[at].id.cluster_path.clone();
        let state = &self.broadcasts[&id];
        let mut sends: Vec<(usize, Option<usize>)> = Vec::new();
        let depth = own.depth();
        for level in scope..=depth {
            let here = own.truncated(level);
            // Members whose path ends exactly at this prefix.
            for (addr, path) in &state.members {
                if *addr != at && path == &here {
                    sends.push((*addr, None));
                }
            }
            if level == depth {
                break;
            }
            let mine = own.truncated(level + 1);
            let mut siblings: BTreeMap<ClusterPath, Vec<usize>> = BTreeMap::new();
            for (addr, path) in &state.members {
                if path.depth() > level && path.starts_with(&here) {
                    let child = path.truncated(level + 1);
                    if child != mine {
                        siblings.entry(child).or_default().push(*addr);
                    }
                }
            }
            for (_, members) in siblings {
                sends.push((self.contact(at, &members), Some(level + 1)));
            }
        }
        let payload = self.broadcasts[&id].payload.clone();
        for (dst, scope) in sends {
            if !self.overlay.is_alive(dst) {
                continue;
            }
            self.broadcasts.get_mut(&id).expect("known").report.messages += 1;
            self.metrics.broadcast_messages += 1;
            self.send_kind(at, dst, &payload, MessageKind::Broadcast { id, scope })?;
        }
        Ok(())
    }

    /// Prefer a routing-table entry inside the cluster, else its nearest member.
    fn contact(&self, at: usize, members: &[usize]) -> usize {
        let node = &self.overlay.nodes[at];
        let from_table = node
            .table
            .entries()
            .filter(|e| members.contains(&e.peer.addr) && self.overlay.is_alive(e.peer.addr))
            .min_by(|a, b| {
                a.indicators
                    .latency_ewma
                    .total_cmp(&b.indicators.latency_ewma)
                    .then(a.key().value().cmp(&b.key().value()))
            })
            .map(|e| e.peer.addr);
        from_table.unwrap_or_else(|| {
            let p = node.id.position;
            *members
                .iter()
                .min_by(|&&a, &&b| {
                    let da = self.overlay.link.base_latency(&p, &self.overlay.nodes[a].id.position);
                    let db = self.overlay.link.base_latency(&p, &self.overlay.nodes[b].id.position);
                    da.total_cmp(&db).then(
                        self.overlay.nodes[a].id.key.value().cmp(&self.overlay.nodes[b].id.key.value()),
                    )
                })
                .expect("non-empty sibling cluster")
        })
    }

    /// Start a hierarchical flood from `src` and run until it settles.
    pub fn broadcast(&mut self, src: usize, payload: &[u8]) -> Result<BroadcastReport, SimError> {
        if !self.overlay.is_alive(src) {
            return Err(SimError::DeadNode(src));
        }
        let id = self.next_broadcast;
        self.next_broadcast += 1;
        let members = self
            .overlay
            .live_addrs()
            .into_iter()
            .map(|a| (a, self.overlay.nodes[a].id.cluster_path.clone()))
            .collect();
        self.broadcasts.insert(
            id,
            BroadcastState {
                payload: payload.to_vec(),
                members,
                report: BroadcastReport::default(),
            },
        );
        self.on_broadcast(src, id, Some(0))?;
        let horizon = self.flood_horizon();
        self.run(self.now + horizon)?;
        Ok(self.broadcasts[&id].report.clone())
    }

    pub fn broadcast_report(&self, id: u64) -> Option<&BroadcastReport> {
        self.broadcasts.get(&id).map(|s| &s.report)
    }

    /// Upper bound on the time a flood needs to settle.
    fn flood_horizon(&self) -> f64 {
        let field = &self.overlay.link.field;
        let slowest = field
            .grid
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, &v| m.min(v))
            * field.base;
        let diameter = self.config.side * std::f64::consts::SQRT_2;
        let per_hop = diameter / slowest + self.overlay.link.jitter;
        per_hop * (self.overlay.tree.depth() + 3) as f64
    }

    /// One epoch of Poisson-sampled joins, graceful leaves and silent fails.
    pub fn churn_step(&mut self, join_rate: f64, leave_rate: f64, fail_rate: f64) -> Result<ChurnOutcome, SimError> {
        let joins = poisson(join_rate, &mut self.rng);
        let leaves = poisson(leave_rate, &mut self.rng);
        let fails = poisson(fail_rate, &mut self.rng);
        let mut out = ChurnOutcome::default();
        for _ in 0..joins {
            if self.join_random()?.is_some() {
                out.joined += 1;
            }
        }
        for _ in 0..leaves {
            let live = self.overlay.live_addrs();
            if live.len() <= 1 {
                break;
            }
            let victim = *live.choose(&mut self.rng).expect("non-empty");
            self.overlay.leave(victim)?;
            self.metrics.leaves += 1;
            out.left += 1;
        }
        for _ in 0..fails {
            let live = self.overlay.live_addrs();
            if live.len() <= 1 {
                break;
            }
            let victim = *live.choose(&mut self.rng).expect("non-empty");
            self.overlay.fail(victim)?;
            self.metrics.fails += 1;
            out.failed += 1;
        }
        Ok(out)
    }

    /// Join a node at a fresh uniform position via a random live bootstrap.
    pub fn join_random(&mut self) -> Result<Option<usize>, SimError> {
        let live = self.overlay.live_addrs();
        let bootstrap = live.choose(&mut self.rng).copied();
        for _ in 0..16 {
            let p = uniform_positions(1, self.config.side, self.overlay.config.bits, &mut self.rng)[0];
            match self.overlay.join(p, bootstrap, &mut self.rng) {
                Ok(addr) => {
                    self.metrics.joins += 1;
                    return Ok(Some(addr));
                }
                Err(DhtError::DuplicateKey(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(None)
    }

    /// Silently fail `round(fraction · live)` distinct random nodes.
    pub fn fail_fraction(&mut self, fraction: f64) -> Result<Vec<usize>, SimError> {
        let live = self.overlay.live_addrs();
        let count = ((fraction * live.len() as f64).round() as usize).min(live.len().saturating_sub(1));
        let mut victims: Vec<usize> = live.choose_multiple(&mut self.rng, count).copied().collect();
        victims.sort_unstable();
        for &v in &victims {
            self.overlay.fail(v)?;
            self.metrics.fails += 1;
        }
        Ok(victims)
    }
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as usize
}

fn describe(ev: &SimEvent) -> String {
    match &ev.action {
        Action::Deliver { src, dst, shard, kind, .. } => {
            let tag = match kind {
                MessageKind::Data => "data".to_string(),
                MessageKind::Broadcast { id, .. } => format!("bcast{id}"),
            };
            format!(
                "{:?},{},deliver,{src},{dst},{},{},{tag}",
                ev.time, ev.sequence, shard.frame_id, shard.index
            )
        }
        Action::Timer => format!("{:?},{},timer", ev.time, ev.sequence),
        Action::Churn => format!("{:?},{},churn", ev.time, ev.sequence),
    }
}
