//! Reservoir-managed replay memory with optional label poisoning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub x: Vec<f64>,
    /// Stored label; differs from `true_label` when poisoned.
    pub y: usize,
    pub true_label: usize,
    /// Logits at insertion time (DER++ only).
    pub stored_logits: Option<Vec<f64>>,
    pub task_id: usize,
    /// Stream example id, used to test buffer membership.
    pub example_id: usize,
    pub insertion_step: u64,
}

/// Relabel probability `p`, with replacements drawn from `pool`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonConfig {
    pub p: f64,
    pub pool: Vec<usize>,
}

impl PoisonConfig {
    pub fn new(p: f64, pool: Vec<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("poison probability {} outside [0, 1]", p)));
        }
        Ok(Self { p, pool })
    }
}

/// Algorithm R: after the `seen`-th arrival, `draw` uniform in `[0, seen)`
/// selects the slot to overwrite, if any.
pub fn reservoir_slot(seen: u64, capacity: usize, draw: u64) -> Option<usize> {
    if seen <= capacity as u64 {
        Some(seen as usize - 1)
    } else if draw < capacity as u64 {
        Some(draw as usize)
    } else {
        None
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Offers one stream example to the reservoir. Returns the slot written.
    ///
    /// Poisoning happens only when the entry is actually stored.
    pub fn reservoir_insert(&mut self, mut entry: BufferEntry, poison: Option<&PoisonConfig>) -> Option<usize> {
        self.seen += 1;
        if self.capacity == 0 {
            return None;
        }
        let draw = if self.seen > self.capacity as u64 {
            self.rng.random_range(0..self.seen)
        } else {
            0
        };
        let slot = reservoir_slot(self.seen, self.capacity, draw)?;
        if let Some(cfg) = poison {
            self.poison(&mut entry, cfg);
        }
        if slot == self.entries.len() {
            self.entries.push(entry);
        } else {
            self.entries[slot] = entry;
        }
        Some(slot)
    }

    fn poison(&mut self, entry: &mut BufferEntry, cfg: &PoisonConfig) {
        if cfg.p <= 0.0 {
            return;
        }
        let others: Vec<usize> = cfg.pool.iter().copied().filter(|&c| c != entry.y).collect();
        if others.is_empty() {
            return;
        }
        if self.rng.random::<f64>() < cfg.p {
            entry.y = others[self.rng.random_range(0..others.len())];
        }
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample_indices<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.entries.is_empty() {
            return Err(Error::Empty("cannot sample from an empty buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.entries.len())).collect())
    }

    pub fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&BufferEntry>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&BufferDump {
            capacity: self.capacity,
            seen: self.seen,
            entries: self.entries.clone(),
        })?)
    }
}

/// Serialized buffer contents (written next to checkpoints).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferDump {
    pub capacity: usize,
    pub seen: u64,
    pub entries: Vec<BufferEntry>,
}

impl BufferDump {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Replay batch assembled from buffer entries.
#[derive(Clone, Debug)]
pub struct ReplayBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub logits: Option<Tensor>,
}

impl ReplayBatch {
    pub fn from_entries(entries: &[&BufferEntry]) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.x.len());
        let mut xs = Vec::with_capacity(entries.len() * dim);
        let mut ys = Vec::with_capacity(entries.len());
        let mut logits = Vec::new();
        let mut all_logits = true;
        for e in entries {
            xs.extend_from_slice(&e.x);
            ys.push(e.y);
            match &e.stored_logits {
                Some(l) => logits.extend_from_slice(l),
                None => all_logits = false,
            }
        }
        let x = Tensor::matrix(entries.len(), dim, xs)?;
        let logits = if all_logits && !entries.is_empty() {
            let c = logits.len() / entries.len();
            Some(Tensor::matrix(entries.len(), c, logits)?)
        } else {
            None
        };
        Ok(Self { x, y: ys, logits })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}
