//! Exact nearest-neighbor engines.
//!
//! An engine reports, for every row of an embedding table, the sum of
//! squared distances to its `k` nearest other rows and the sum of squared
//! distances to all rows (itself included). Results are bitwise independent
//! of thread count: each row's sums are accumulated sequentially in
//! candidate index order and the neighbor sum is taken over sorted values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::vectors::VectorTable;
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborSums {
    pub knn: f64,
    pub total: f64,
}

pub trait NeighborEngine: Send + Sync {
    fn name(&self) -> &'static str;
    /// Requires `1 <= k < table.len()`.
    fn neighbor_sums(&self, table: &VectorTable, k: usize) -> Vec<NeighborSums>;
}

/// Squared Euclidean distance with eight independent lanes.
#[inline(always)]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            lanes[i] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

/// The `k` smallest values seen so far, ascending.
#[derive(Debug, Clone)]
struct Smallest {
    k: usize,
    values: Vec<f64>,
}

impl Smallest {
    fn new(k: usize) -> Self {
        Smallest {
            k,
            values: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, v: f64) {
        if self.values.len() == self.k {
            if v >= self.values[self.k - 1] {
                return;
            }
            self.values.pop();
        }
        let at = self.values.partition_point(|x| *x <= v);
        self.values.insert(at, v);
    }

    fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Tiled all-pairs scan: targets are split into blocks processed in
/// parallel, and each block sweeps the candidates `block_size` rows at a
/// time so the candidate tile stays cache resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockedEngine {
    pub block_size: usize,
    pub target_block: usize,
}

impl Default for BlockedEngine {
    fn default() -> Self {
        BlockedEngine {
            block_size: 256,
            target_block: 16,
        }
    }
}

impl NeighborEngine for BlockedEngine {
    fn name(&self) -> &'static str {
        "blocked"
    }

    fn neighbor_sums(&self, table: &VectorTable, k: usize) -> Vec<NeighborSums> {
        let m = table.len();
        assert!(k >= 1 && k < m, "k={k} needs 1 <= k < {m}");
        let tb = self.target_block.max(1);
        let mut out = vec![
            NeighborSums {
                knn: 0.0,
                total: 0.0
            };
            m
        ];
        let wide = wide_available();
        out.par_chunks_mut(tb).enumerate().for_each(|(b, slots)| {
            if wide {
                // SAFETY: the CPU supports AVX2, checked above
                #[cfg(target_arch = "x86_64")]
                unsafe {
                    sweep_avx2(table, k, self.block_size.max(1), b * tb, slots)
                }
            } else {
                sweep(table, k, self.block_size.max(1), b * tb, slots)
            }
        });
        out
    }
}

fn wide_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Same code compiled for AVX2. FMA stays off so every lane rounds exactly
/// as in [`sweep`] and results are bitwise identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sweep_avx2(
    table: &VectorTable,
    k: usize,
    block: usize,
    start: usize,
    slots: &mut [NeighborSums],
) {
    sweep(table, k, block, start, slots)
}

/// Fills `slots` for the targets `start..start + slots.len()`.
#[inline(always)]
fn sweep(table: &VectorTable, k: usize, block: usize, start: usize, slots: &mut [NeighborSums]) {
    let m = table.len();
    let mut heaps: Vec<Smallest> = (0..slots.len()).map(|_| Smallest::new(k)).collect();
    let mut totals = vec![0.0f64; slots.len()];
    for c0 in (0..m).step_by(block) {
        let c1 = (c0 + block).min(m);
        for (j, (heap, total)) in heaps.iter_mut().zip(totals.iter_mut()).enumerate() {
            let t = start + j;
            let target = table.row(t);
            for c in c0..c1 {
                let d = squared_distance(target, table.row(c));
                *total += d;
                if c != t {
                    heap.offer(d);
                }
            }
        }
    }
    for ((slot, heap), total) in slots.iter_mut().zip(&heaps).zip(totals) {
        *slot = NeighborSums {
            knn: heap.sum(),
            total,
        };
    }
}

/// Single-threaded row-by-row scan with a full distance row per target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanEngine;

impl ScanEngine {
    pub fn row(&self, table: &VectorTable, t: usize, k: usize) -> NeighborSums {
        let target = table.row(t);
        let mut others = Vec::with_capacity(table.len());
        let mut total = 0.0;
        for c in 0..table.len() {
            let d = squared_distance(target, table.row(c));
            total += d;
            if c != t {
                others.push(d);
            }
        }
        others.select_nth_unstable_by(k - 1, f64::total_cmp);
        let nearest = &mut others[..k];
        nearest.sort_by(f64::total_cmp);
        NeighborSums {
            knn: nearest.iter().sum(),
            total,
        }
    }
}

impl NeighborEngine for ScanEngine {
    fn name(&self) -> &'static str {
        "scan"
    }

    fn neighbor_sums(&self, table: &VectorTable, k: usize) -> Vec<NeighborSums> {
        assert!(
            k >= 1 && k < table.len(),
            "k={k} needs 1 <= k < {}",
            table.len()
        );
        (0..table.len()).map(|t| self.row(table, t, k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSettings {
    #[serde(default = "default_engine")]
    pub backend: String,
    #[serde(default)]
    pub block_size: Option<usize>,
}

fn default_engine() -> String {
    "blocked".into()
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            backend: default_engine(),
            block_size: None,
        }
    }
}

pub type EngineRegistry = Registry<dyn NeighborEngine, EngineSettings>;

pub fn engine_registry() -> EngineRegistry {
    let mut registry = EngineRegistry::new("neighbor engine");
    registry.register("blocked", |s: &EngineSettings| {
        let mut engine = BlockedEngine::default();
        if let Some(b) = s.block_size {
            if b == 0 {
                return Err("block_size must be positive".into());
            }
            engine.block_size = b;
        }
        Ok(Box::new(engine) as Box<dyn NeighborEngine>)
    });
    registry.register("scan", |_: &EngineSettings| {
        Ok(Box::new(ScanEngine) as Box<dyn NeighborEngine>)
    });
    registry
}
