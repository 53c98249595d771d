//! Simulated collectives among M in-process workers, with a cost ledger.
//!
//! Reductions always combine contributions in worker-id order, so results
//! are bitwise reproducible regardless of which worker arrives first. Two
//! front ends share the same reduction kernels and cost formulas:
//!
//! * [`WorkerGroup`] takes every worker's contribution in one call and is
//!   what the trainer uses to step workers in lockstep on one thread.
//! * [`SharedGroup`] hands out one [`Endpoint`] per worker for use from
//!   separate threads. Each collective is a rendezvous; a worker that never
//!   arrives, or workers that call different collectives in the same round,
//!   surface as [`Error::Protocol`] after a configurable timeout.
//!
//! Wire cost is accounted in bits. Ring all-reduce moves `2(M-1)/M` of the
//! payload per worker in `2(M-1)` steps; the tree variant moves the same
//! volume in `2·ceil(log2 M)` steps; all-gather moves `(M-1)` payloads per
//! worker in `M-1` steps. Simulated time is
//! `steps · latency + bytes_per_worker / bandwidth`.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bitpack::PackedBuffer;
use crate::budget::{ceil_log2, FLOAT_BITS, HEADER_BITS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub bandwidth_bytes_per_sec: f64,
    pub latency_sec_per_step: f64,
}

impl LinkProfile {
    pub fn new(bandwidth_bytes_per_sec: f64, latency_sec_per_step: f64) -> Result<Self> {
        let p = Self { bandwidth_bytes_per_sec, latency_sec_per_step };
        p.validate()?;
        Ok(p)
    }

    /// Ethernet link of the given speed in Gbit/s.
    pub fn ethernet_gbps(gbps: f64, latency_sec_per_step: f64) -> Result<Self> {
        Self::new(gbps * 1e9 / 8.0, latency_sec_per_step)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.bandwidth_bytes_per_sec) || !ok(self.latency_sec_per_step) {
            return Err(Error::config(format!(
                "link bandwidth and latency must be positive, got {} B/s and {} s",
                self.bandwidth_bytes_per_sec, self.latency_sec_per_step
            )));
        }
        Ok(())
    }

    /// Seconds to complete `cost` among `workers` over this link.
    pub fn seconds(&self, cost: WireCost, workers: usize) -> f64 {
        cost.steps as f64 * self.latency_sec_per_step
            + cost.bytes_per_worker(workers) / self.bandwidth_bytes_per_sec
    }
}

impl Default for LinkProfile {
    /// 10 Gbit/s Ethernet with 50 µs per step.
    fn default() -> Self {
        Self { bandwidth_bytes_per_sec: 1.25e9, latency_sec_per_step: 5e-5 }
    }
}

/// Algorithm assumed for all-reduce cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllReduceModel {
    #[default]
    Ring,
    Tree,
}

/// Link plus the constants used to charge local encode/decode work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub link: LinkProfile,
    #[serde(default)]
    pub allreduce: AllReduceModel,
    #[serde(default)]
    pub encode_sec_per_coord: f64,
    #[serde(default)]
    pub decode_sec_per_coord: f64,
}

impl CostModel {
    pub fn new(link: LinkProfile) -> Self {
        Self { link, allreduce: AllReduceModel::Ring, encode_sec_per_coord: 0.0, decode_sec_per_coord: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        if !(self.encode_sec_per_coord >= 0.0 && self.decode_sec_per_coord >= 0.0) {
            return Err(Error::config("encode/decode cost per coordinate must be >= 0"));
        }
        Ok(())
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::new(LinkProfile::default())
    }
}

/// Steps and total bits moved by one collective, summed over all workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WireCost {
    pub steps: u64,
    pub wire_bits: u64,
}

impl WireCost {
    pub fn bytes_per_worker(&self, workers: usize) -> f64 {
        self.wire_bits as f64 / 8.0 / workers as f64
    }
}

/// Ring all-reduce of `payload_bits` per worker.
pub fn ring_allreduce_cost(workers: usize, payload_bits: u64) -> WireCost {
    let m = workers as u64;
    if m <= 1 {
        return WireCost::default();
    }
    WireCost { steps: 2 * (m - 1), wire_bits: 2 * (m - 1) * payload_bits }
}

/// Binary-tree reduce followed by broadcast.
pub fn tree_allreduce_cost(workers: usize, payload_bits: u64) -> WireCost {
    let m = workers as u64;
    if m <= 1 {
        return WireCost::default();
    }
    WireCost { steps: 2 * u64::from(ceil_log2(m)), wire_bits: 2 * (m - 1) * payload_bits }
}

pub fn allreduce_cost(model: AllReduceModel, workers: usize, payload_bits: u64) -> WireCost {
    match model {
        AllReduceModel::Ring => ring_allreduce_cost(workers, payload_bits),
        AllReduceModel::Tree => tree_allreduce_cost(workers, payload_bits),
    }
}

/// Ring all-gather; `payload_bits[m]` is worker m's contribution.
pub fn allgather_cost(payload_bits: &[u64]) -> WireCost {
    let m = payload_bits.len() as u64;
    if m <= 1 {
        return WireCost::default();
    }
    WireCost { steps: m - 1, wire_bits: (m - 1) * payload_bits.iter().sum::<u64>() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Encode,
    Communicate,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Encode => "encode",
            Phase::Communicate => "communicate",
            Phase::Decode => "decode",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Collective {
    AllReduceSum,
    AllReduceMax,
    AllReduceMin,
    AllGather,
    /// Local work, no communication.
    Local,
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Collective::AllReduceSum => "allreduce-sum",
            Collective::AllReduceMax => "allreduce-max",
            Collective::AllReduceMin => "allreduce-min",
            Collective::AllGather => "allgather",
            Collective::Local => "local",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub iteration: u64,
    pub phase: Phase,
    pub collective: Collective,
    pub workers: usize,
    /// Bits contributed by each worker (the payload being reduced).
    pub payload_bits: u64,
    /// Bits moved over all links, summed over workers.
    pub wire_bits: u64,
    pub steps: u64,
    pub sim_seconds: f64,
}

impl LedgerEntry {
    pub fn bytes_per_worker(&self) -> f64 {
        if self.workers == 0 {
            return 0.0;
        }
        self.wire_bits as f64 / 8.0 / self.workers as f64
    }
}

/// Append-only record of every collective and local phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn for_iteration(&self, iteration: u64) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.iteration == iteration)
    }

    /// Payload bits each worker contributed during `iteration`.
    pub fn payload_bits(&self, iteration: u64) -> u64 {
        self.for_iteration(iteration)
            .filter(|e| e.phase == Phase::Communicate)
            .map(|e| e.payload_bits)
            .sum()
    }

    pub fn sim_seconds(&self, iteration: u64) -> f64 {
        self.for_iteration(iteration).map(|e| e.sim_seconds).sum()
    }

    pub fn total_sim_seconds(&self) -> f64 {
        self.entries.iter().map(|e| e.sim_seconds).sum()
    }

    pub fn total_wire_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.wire_bits).sum()
    }

    /// `iteration,phase,collective,bytes,steps,sim_seconds`, bytes per worker.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,phase,collective,bytes,steps,sim_seconds")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{:e}",
                e.iteration,
                e.phase,
                e.collective,
                e.bytes_per_worker(),
                e.steps,
                e.sim_seconds
            )?;
        }
        Ok(())
    }
}

// Reduction kernels shared by both front ends. Order is worker-id order.

fn check_lengths<T>(contributions: &[T], len: impl Fn(&T) -> usize) -> Result<usize> {
    let n = contributions.first().map(&len).unwrap_or(0);
    if let Some(m) = contributions.iter().position(|c| len(c) != n) {
        return Err(Error::contract(format!(
            "worker {m} contributed {} elements, worker 0 contributed {n}",
            len(&contributions[m])
        )));
    }
    Ok(n)
}

fn reduce_sum<C: AsRef<[f64]>>(contributions: &[C]) -> Result<Vec<f64>> {
    let n = check_lengths(contributions, |c| c.as_ref().len())?;
    let mut acc = vec![0.0; n];
    for (m, c) in contributions.iter().enumerate() {
        if let Some(i) = c.as_ref().iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("worker {m} sent a non-finite value at {i}")));
        }
        for (a, &x) in acc.iter_mut().zip(c.as_ref()) {
            *a += x;
        }
    }
    Ok(acc)
}

fn reduce_levels<C: AsRef<[i32]>>(contributions: &[C]) -> Result<Vec<i64>> {
    let n = check_lengths(contributions, |c| c.as_ref().len())?;
    let mut acc = vec![0i64; n];
    for c in contributions {
        for (a, &x) in acc.iter_mut().zip(c.as_ref()) {
            *a += i64::from(x);
        }
    }
    Ok(acc)
}

fn reduce_max(values: &[f64]) -> Result<f64> {
    if let Some(m) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("worker {m} sent a non-finite value")));
    }
    Ok(values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn reduce_min<C: AsRef<[u32]>>(contributions: &[C]) -> Result<Vec<u32>> {
    let n = check_lengths(contributions, |c| c.as_ref().len())?;
    let mut acc = vec![u32::MAX; n];
    for c in contributions {
        for (a, &x) in acc.iter_mut().zip(c.as_ref()) {
            *a = (*a).min(x);
        }
    }
    Ok(acc)
}

fn packed_bits(buf: &PackedBuffer) -> u64 {
    8 * buf.as_bytes().len() as u64
}

/// Lockstep group: every call carries all M contributions.
#[derive(Debug, Clone)]
pub struct WorkerGroup {
    workers: usize,
    cost: CostModel,
    ledger: CostLedger,
    iteration: u64,
}

impl WorkerGroup {
    pub fn new(workers: usize, cost: CostModel) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("a worker group needs at least one worker"));
        }
        cost.validate()?;
        Ok(Self { workers, cost, ledger: CostLedger::new(), iteration: 0 })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    /// Tag subsequent ledger entries with `iteration`.
    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> CostLedger {
        std::mem::take(&mut self.ledger)
    }

    fn check_arity(&self, got: usize) -> Result<()> {
        if got != self.workers {
            return Err(Error::Protocol(format!(
                "{got} contributions for a group of {} workers",
                self.workers
            )));
        }
        Ok(())
    }

    fn charge(&mut self, collective: Collective, payload_bits: u64, cost: WireCost) {
        let entry = LedgerEntry {
            iteration: self.iteration,
            phase: Phase::Communicate,
            collective,
            workers: self.workers,
            payload_bits,
            wire_bits: cost.wire_bits,
            steps: cost.steps,
            sim_seconds: self.cost.link.seconds(cost, self.workers),
        };
        self.ledger.record(entry);
    }

    fn charge_allreduce(&mut self, collective: Collective, payload_bits: u64) {
        let cost = allreduce_cost(self.cost.allreduce, self.workers, payload_bits);
        self.charge(collective, payload_bits, cost);
    }

    /// Record local encode or decode work over `coordinates` coordinates.
    pub fn record_local(&mut self, phase: Phase, coordinates: usize) {
        let per = match phase {
            Phase::Encode => self.cost.encode_sec_per_coord,
            Phase::Decode => self.cost.decode_sec_per_coord,
            Phase::Communicate => 0.0,
        };
        self.ledger.record(LedgerEntry {
            iteration: self.iteration,
            phase,
            collective: Collective::Local,
            workers: self.workers,
            payload_bits: 0,
            wire_bits: 0,
            steps: 0,
            sim_seconds: per * coordinates as f64,
        });
    }

    /// Elementwise sum of real vectors, charged as 32-bit floats.
    pub fn allreduce_sum<C: AsRef<[f64]>>(&mut self, contributions: &[C]) -> Result<Vec<f64>> {
        self.check_arity(contributions.len())?;
        let out = reduce_sum(contributions)?;
        self.charge_allreduce(Collective::AllReduceSum, out.len() as u64 * u64::from(FLOAT_BITS));
        Ok(out)
    }

    /// Exact integer sum of level vectors, charged at `bits_per_level` per
    /// coordinate. The normalizer travels in its own max all-reduce.
    pub fn allreduce_sum_levels<C: AsRef<[i32]>>(
        &mut self,
        contributions: &[C],
        bits_per_level: u32,
    ) -> Result<Vec<i64>> {
        self.check_arity(contributions.len())?;
        let out = reduce_levels(contributions)?;
        self.charge_allreduce(Collective::AllReduceSum, out.len() as u64 * u64::from(bits_per_level));
        Ok(out)
    }

    /// Max of one scalar per worker, charged as a 32-bit float.
    pub fn allreduce_max(&mut self, values: &[f64]) -> Result<f64> {
        self.check_arity(values.len())?;
        let out = reduce_max(values)?;
        self.charge_allreduce(Collective::AllReduceMax, HEADER_BITS);
        Ok(out)
    }

    /// Elementwise min of index vectors, charged at `bits_per_index`.
    pub fn allreduce_min_vec<C: AsRef<[u32]>>(
        &mut self,
        contributions: &[C],
        bits_per_index: u32,
    ) -> Result<Vec<u32>> {
        self.check_arity(contributions.len())?;
        let out = reduce_min(contributions)?;
        self.charge_allreduce(Collective::AllReduceMin, out.len() as u64 * u64::from(bits_per_index));
        Ok(out)
    }

    /// Every worker receives every buffer, in worker-id order.
    pub fn allgather(&mut self, buffers: Vec<PackedBuffer>) -> Result<Vec<PackedBuffer>> {
        self.check_arity(buffers.len())?;
        let sizes: Vec<u64> = buffers.iter().map(packed_bits).collect();
        let per_worker = sizes.iter().copied().max().unwrap_or(0);
        self.charge(Collective::AllGather, per_worker, allgather_cost(&sizes));
        Ok(buffers)
    }
}

enum Contribution {
    Sum(Vec<f64>),
    Levels(Vec<i32>, u32),
    Max(f64),
    Min(Vec<u32>, u32),
    Gather(PackedBuffer),
}

impl Contribution {
    fn kind(&self) -> &'static str {
        match self {
            Contribution::Sum(_) => "allreduce-sum",
            Contribution::Levels(..) => "allreduce-sum-levels",
            Contribution::Max(_) => "allreduce-max",
            Contribution::Min(..) => "allreduce-min",
            Contribution::Gather(_) => "allgather",
        }
    }
}

enum Outcome {
    Sum(Vec<f64>),
    Levels(Vec<i64>),
    Max(f64),
    Min(Vec<u32>),
    Gather(Vec<PackedBuffer>),
    Failed { protocol: bool, message: String },
}

struct Round {
    slots: Vec<Option<Contribution>>,
    arrived: usize,
    collected: usize,
    generation: u64,
    outcome: Option<Arc<Outcome>>,
    poisoned: Option<String>,
    ledger: CostLedger,
}

struct Shared {
    workers: usize,
    cost: CostModel,
    timeout: Duration,
    round: Mutex<Round>,
    cv: Condvar,
}

/// Group whose workers run on their own threads.
#[derive(Clone)]
pub struct SharedGroup {
    shared: Arc<Shared>,
}

impl SharedGroup {
    pub fn new(workers: usize, cost: CostModel, timeout: Duration) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("a worker group needs at least one worker"));
        }
        cost.validate()?;
        let round = Round {
            slots: (0..workers).map(|_| None).collect(),
            arrived: 0,
            collected: 0,
            generation: 0,
            outcome: None,
            poisoned: None,
            ledger: CostLedger::new(),
        };
        Ok(Self {
            shared: Arc::new(Shared { workers, cost, timeout, round: Mutex::new(round), cv: Condvar::new() }),
        })
    }

    pub fn endpoint(&self, worker: usize) -> Result<Endpoint> {
        if worker >= self.shared.workers {
            return Err(Error::config(format!(
                "worker {worker} out of range for a group of {}",
                self.shared.workers
            )));
        }
        Ok(Endpoint { shared: Arc::clone(&self.shared), worker, iteration: 0 })
    }

    pub fn ledger(&self) -> CostLedger {
        self.shared.round.lock().unwrap().ledger.clone()
    }
}

/// One worker's handle on a [`SharedGroup`].
pub struct Endpoint {
    shared: Arc<Shared>,
    worker: usize,
    iteration: u64,
}

impl Endpoint {
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn allreduce_sum(&self, data: &[f64]) -> Result<Vec<f64>> {
        match &*self.exchange(Contribution::Sum(data.to_vec()))? {
            Outcome::Sum(v) => Ok(v.clone()),
            _ => unreachable!("outcome kind follows contribution kind"),
        }
    }

    pub fn allreduce_sum_levels(&self, levels: &[i32], bits_per_level: u32) -> Result<Vec<i64>> {
        match &*self.exchange(Contribution::Levels(levels.to_vec(), bits_per_level))? {
            Outcome::Levels(v) => Ok(v.clone()),
            _ => unreachable!("outcome kind follows contribution kind"),
        }
    }

    pub fn allreduce_max(&self, value: f64) -> Result<f64> {
        match &*self.exchange(Contribution::Max(value))? {
            Outcome::Max(v) => Ok(*v),
            _ => unreachable!("outcome kind follows contribution kind"),
        }
    }

    pub fn allreduce_min_vec(&self, indices: &[u32], bits_per_index: u32) -> Result<Vec<u32>> {
        match &*self.exchange(Contribution::Min(indices.to_vec(), bits_per_index))? {
            Outcome::Min(v) => Ok(v.clone()),
            _ => unreachable!("outcome kind follows contribution kind"),
        }
    }

    pub fn allgather(&self, buffer: PackedBuffer) -> Result<Vec<PackedBuffer>> {
        match &*self.exchange(Contribution::Gather(buffer))? {
            Outcome::Gather(v) => Ok(v.clone()),
            _ => unreachable!("outcome kind follows contribution kind"),
        }
    }

    fn wait<'a>(
        &self,
        mut guard: std::sync::MutexGuard<'a, Round>,
        deadline: Instant,
        mut done: impl FnMut(&Round) -> bool,
        what: &str,
    ) -> Result<std::sync::MutexGuard<'a, Round>> {
        loop {
            if let Some(msg) = &guard.poisoned {
                return Err(Error::Protocol(msg.clone()));
            }
            if done(&guard) {
                return Ok(guard);
            }
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<usize> =
                    guard.slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(m, _)| m).collect();
                let msg = format!(
                    "worker {} timed out after {:?} {what}; workers not arrived: {missing:?}",
                    self.worker, self.shared.timeout
                );
                guard.poisoned = Some(msg.clone());
                self.shared.cv.notify_all();
                return Err(Error::Protocol(msg));
            }
            guard = self.shared.cv.wait_timeout(guard, deadline - now).unwrap().0;
        }
    }

    fn exchange(&self, contribution: Contribution) -> Result<Arc<Outcome>> {
        let shared = &*self.shared;
        let deadline = Instant::now() + shared.timeout;
        let guard = shared.round.lock().unwrap();
        // A previous round may still be handing out its result.
        let mut guard = self.wait(guard, deadline, |r| r.outcome.is_none(), "for the previous round to drain")?;
        if guard.slots[self.worker].is_some() {
            return Err(Error::Protocol(format!("worker {} entered a round twice", self.worker)));
        }
        guard.slots[self.worker] = Some(contribution);
        guard.arrived += 1;
        let generation = guard.generation;
        if guard.arrived == shared.workers {
            let contributions: Vec<Contribution> = guard.slots.iter_mut().map(|s| s.take().unwrap()).collect();
            let outcome = complete(shared, &contributions, self.iteration, &mut guard.ledger);
            guard.outcome = Some(Arc::new(outcome));
            guard.generation += 1;
            shared.cv.notify_all();
        }
        let mut guard = self.wait(guard, deadline, |r| r.generation != generation, "waiting for peers")?;
        let outcome = Arc::clone(guard.outcome.as_ref().expect("outcome set when generation advances"));
        guard.collected += 1;
        if guard.collected == shared.workers {
            guard.outcome = None;
            guard.collected = 0;
            guard.arrived = 0;
            shared.cv.notify_all();
        }
        drop(guard);
        match &*outcome {
            Outcome::Failed { protocol: true, message } => Err(Error::Protocol(message.clone())),
            Outcome::Failed { protocol: false, message } => Err(Error::Contract(message.clone())),
            _ => Ok(outcome),
        }
    }
}

fn complete(shared: &Shared, contributions: &[Contribution], iteration: u64, ledger: &mut CostLedger) -> Outcome {
    let kind = contributions[0].kind();
    if let Some(m) = contributions.iter().position(|c| c.kind() != kind) {
        return Outcome::Failed {
            protocol: true,
            message: format!(
                "collective mismatch: worker 0 called {kind}, worker {m} called {}",
                contributions[m].kind()
            ),
        };
    }
    // Replay through a lockstep group so both front ends charge identically.
    let mut group = WorkerGroup {
        workers: shared.workers,
        cost: shared.cost,
        ledger: CostLedger::new(),
        iteration,
    };
    let result = match &contributions[0] {
        Contribution::Sum(_) => {
            let data: Vec<&[f64]> = contributions
                .iter()
                .map(|c| match c {
                    Contribution::Sum(v) => v.as_slice(),
                    _ => unreachable!(),
                })
                .collect();
            group.allreduce_sum(&data).map(Outcome::Sum)
        }
        Contribution::Levels(_, bits) => {
            let data: Vec<&[i32]> = contributions
                .iter()
                .map(|c| match c {
                    Contribution::Levels(v, _) => v.as_slice(),
                    _ => unreachable!(),
                })
                .collect();
            group.allreduce_sum_levels(&data, *bits).map(Outcome::Levels)
        }
        Contribution::Max(_) => {
            let data: Vec<f64> = contributions
                .iter()
                .map(|c| match c {
                    Contribution::Max(v) => *v,
                    _ => unreachable!(),
                })
                .collect();
            group.allreduce_max(&data).map(Outcome::Max)
        }
        Contribution::Min(_, bits) => {
            let data: Vec<&[u32]> = contributions
                .iter()
                .map(|c| match c {
                    Contribution::Min(v, _) => v.as_slice(),
                    _ => unreachable!(),
                })
                .collect();
            group.allreduce_min_vec(&data, *bits).map(Outcome::Min)
        }
        Contribution::Gather(_) => {
            let data: Vec<PackedBuffer> = contributions
                .iter()
                .map(|c| match c {
                    Contribution::Gather(b) => b.clone(),
                    _ => unreachable!(),
                })
                .collect();
            group.allgather(data).map(Outcome::Gather)
        }
    };
    for e in group.take_ledger().entries() {
        ledger.record(e.clone());
    }
    result.unwrap_or_else(|e| Outcome::Failed {
        protocol: matches!(e, Error::Protocol(_)),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::pack;
    use std::thread;

    fn group(m: usize) -> WorkerGroup {
        WorkerGroup::new(m, CostModel::new(LinkProfile::new(1.25e8, 1e-4).unwrap())).unwrap()
    }

    #[test]
    fn single_worker_is_identity_and_free() {
        let mut g = group(1);
        assert_eq!(g.allreduce_sum(&[vec![1.0, -2.0]]).unwrap(), vec![1.0, -2.0]);
        let e = &g.ledger().entries()[0];
        assert_eq!((e.wire_bits, e.steps, e.sim_seconds), (0, 0, 0.0));
        assert_eq!(g.allreduce_max(&[3.5]).unwrap(), 3.5);
        assert_eq!(g.allgather(vec![pack(&[1], 2).unwrap()]).unwrap().len(), 1);
    }

    #[test]
    fn two_worker_sum() {
        let mut g = group(2);
        assert_eq!(g.allreduce_sum(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn ring_cost_example() {
        // 1 MB payload, M = 4, 125 MB/s, 1e-4 s per step.
        let link = LinkProfile::new(1.25e8, 1e-4).unwrap();
        let cost = ring_allreduce_cost(4, 8 * 1_000_000);
        assert_eq!(cost.steps, 6);
        assert_eq!(cost.bytes_per_worker(4), 1.5e6);
        assert!((link.seconds(cost, 4) - 0.0126).abs() < 1e-15);
    }

    #[test]
    fn max_and_min() {
        let mut g = group(3);
        assert_eq!(g.allreduce_max(&[3.0, 5.0, 4.0]).unwrap(), 5.0);
        assert_eq!(g.allreduce_max(&[2.0, 2.0, 2.0]).unwrap(), 2.0);
        let got = g.allreduce_min_vec(&[vec![1, 0, 3], vec![2, 2, 1], vec![1, 1, 1]], 2).unwrap();
        assert_eq!(got, vec![1, 0, 1]);
        let e = g.ledger().entries().last().unwrap();
        assert_eq!(e.payload_bits, 6);
        assert_eq!(e.wire_bits, 2 * 2 * 6);
    }

    #[test]
    fn mismatched_lengths_and_arity() {
        let mut g = group(2);
        assert!(matches!(g.allreduce_sum(&[vec![1.0], vec![1.0, 2.0]]), Err(Error::Contract(_))));
        assert!(matches!(g.allreduce_sum(&[vec![1.0]]), Err(Error::Protocol(_))));
        assert!(matches!(g.allreduce_min_vec(&[vec![1], vec![]], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn level_sums_are_exact() {
        let mut g = group(3);
        let big = i32::MAX;
        let got = g.allreduce_sum_levels(&[vec![big, -1], vec![big, -1], vec![big, 5]], 32).unwrap();
        assert_eq!(got, vec![3 * i64::from(big), 3]);
    }

    #[test]
    fn allgather_order_and_cost() {
        let mut g = group(3);
        let bufs: Vec<PackedBuffer> = (0..3).map(|m| pack(&[m], 3).unwrap()).collect();
        let got = g.allgather(bufs.clone()).unwrap();
        assert_eq!(got, bufs);
        let e = &g.ledger().entries()[0];
        let each = 8 * bufs[0].as_bytes().len() as u64;
        assert_eq!(e.steps, 2);
        assert_eq!(e.wire_bits, 2 * 3 * each);
        assert_eq!(e.bytes_per_worker(), 2.0 * each as f64 / 8.0);
    }

    #[test]
    fn tree_model_uses_log_steps() {
        assert_eq!(tree_allreduce_cost(8, 100).steps, 6);
        assert_eq!(tree_allreduce_cost(5, 100).steps, 6);
        assert_eq!(tree_allreduce_cost(8, 100).wire_bits, ring_allreduce_cost(8, 100).wire_bits);
    }

    #[test]
    fn local_phases_charge_per_coordinate() {
        let cost = CostModel { encode_sec_per_coord: 1e-9, ..CostModel::default() };
        let mut g = WorkerGroup::new(2, cost).unwrap();
        g.set_iteration(7);
        g.record_local(Phase::Encode, 1000);
        let e = &g.ledger().entries()[0];
        assert_eq!(e.iteration, 7);
        assert_eq!(e.phase, Phase::Encode);
        assert!((e.sim_seconds - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn csv_header_and_rows() {
        let mut g = group(2);
        g.set_iteration(3);
        g.allreduce_sum(&[vec![1.0; 4], vec![2.0; 4]]).unwrap();
        let mut out = Vec::new();
        g.ledger().write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,phase,collective,bytes,steps,sim_seconds");
        assert!(lines.next().unwrap().starts_with("3,communicate,allreduce-sum,16,2,"));
    }

    #[test]
    fn rejects_bad_links() {
        assert!(LinkProfile::new(0.0, 1e-4).is_err());
        assert!(LinkProfile::new(1e9, -1.0).is_err());
        assert!(WorkerGroup::new(0, CostModel::default()).is_err());
    }

    fn run_threads<T: Send + 'static>(
        m: usize,
        timeout: Duration,
        f: impl Fn(Endpoint) -> T + Send + Sync + 'static,
    ) -> (Vec<T>, CostLedger) {
        let group = SharedGroup::new(m, CostModel::new(LinkProfile::new(1.25e8, 1e-4).unwrap()), timeout).unwrap();
        let f = Arc::new(f);
        let handles: Vec<_> = (0..m)
            .map(|w| {
                let ep = group.endpoint(w).unwrap();
                let f = Arc::clone(&f);
                thread::spawn(move || f(ep))
            })
            .collect();
        let out = handles.into_iter().map(|h| h.join().unwrap()).collect();
        (out, group.ledger())
    }

    #[test]
    fn threaded_matches_lockstep() {
        let m = 4;
        let data: Vec<Vec<f64>> = (0..m).map(|w| (0..5).map(|i| (w * 10 + i) as f64 * 0.1).collect()).collect();
        let levels: Vec<Vec<i32>> = (0..m).map(|w| vec![w as i32 - 2, 3, -(w as i32)]).collect();

        let mut lock = group(m);
        let want_sum = lock.allreduce_sum(&data).unwrap();
        let want_max = lock.allreduce_max(&[1.0, 7.0, 3.0, 2.0]).unwrap();
        let want_levels = lock.allreduce_sum_levels(&levels, 4).unwrap();

        let (d, l) = (data.clone(), levels.clone());
        let (results, ledger) = run_threads(m, Duration::from_secs(10), move |mut ep| {
            ep.set_iteration(0);
            let w = ep.worker();
            let sum = ep.allreduce_sum(&d[w]).unwrap();
            let max = ep.allreduce_max([1.0, 7.0, 3.0, 2.0][w]).unwrap();
            let lv = ep.allreduce_sum_levels(&l[w], 4).unwrap();
            (sum, max, lv)
        });
        for (sum, max, lv) in results {
            assert_eq!(sum, want_sum);
            assert_eq!(max, want_max);
            assert_eq!(lv, want_levels);
        }
        assert_eq!(&ledger, lock.ledger());
    }

    #[test]
    fn missing_worker_times_out() {
        let (results, _) = run_threads(2, Duration::from_millis(100), |ep| {
            if ep.worker() == 0 {
                Some(ep.allreduce_max(1.0))
            } else {
                None
            }
        });
        assert!(matches!(results[0], Some(Err(Error::Protocol(_)))));
    }

    #[test]
    fn mismatched_collectives_are_protocol_errors() {
        let (results, _) = run_threads(2, Duration::from_secs(5), |ep| {
            if ep.worker() == 0 {
                ep.allreduce_max(1.0).map(|_| ())
            } else {
                ep.allreduce_sum(&[1.0]).map(|_| ())
            }
        });
        for r in results {
            assert!(matches!(r, Err(Error::Protocol(_))));
        }
    }
}
