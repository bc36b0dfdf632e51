use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::hawkes::EventSequence;

/// Per-node event counts over consecutive half-open bins
/// `[t0 + i*bin_width, t0 + (i+1)*bin_width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeCountMatrix {
    pub n_nodes: usize,
    pub n_bins: usize,
    pub bin_width: f64,
    pub t0: f64,
    /// Row-major `n_nodes x n_bins`.
    pub counts: Vec<u64>,
}

impl SpikeCountMatrix {
    pub fn zeros(n_nodes: usize, n_bins: usize, bin_width: f64) -> Self {
        SpikeCountMatrix {
            n_nodes,
            n_bins,
            bin_width,
            t0: 0.0,
            counts: vec![0; n_nodes * n_bins],
        }
    }

    /// Build from per-bin count vectors (`bins[i][n]` = count of node `n` in bin `i`).
    pub fn from_bins(bins: &[Vec<u64>], bin_width: f64) -> Result<Self> {
        let n = bins.first().map_or(0, Vec::len);
        let mut m = SpikeCountMatrix::zeros(n, bins.len(), bin_width);
        for (i, b) in bins.iter().enumerate() {
            if b.len() != n {
                return Err(Error::contract("ragged bin vectors"));
            }
            for (node, &c) in b.iter().enumerate() {
                m.set(node, i, c);
            }
        }
        Ok(m)
    }

    pub fn get(&self, node: usize, bin: usize) -> u64 {
        self.counts[node * self.n_bins + bin]
    }

    pub fn set(&mut self, node: usize, bin: usize, v: u64) {
        self.counts[node * self.n_bins + bin] = v;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts of every node in one bin.
    pub fn bin(&self, bin: usize) -> Vec<u64> {
        (0..self.n_nodes).map(|n| self.get(n, bin)).collect()
    }

    /// Bin `bin` as an `N x 1` tensor.
    pub fn bin_column(&self, bin: usize) -> Tensor {
        Tensor::column(self.bin(bin).into_iter().map(|c| c as f64).collect())
    }

    /// Bins `[start, end)` as a new matrix.
    pub fn window(&self, start: usize, end: usize) -> SpikeCountMatrix {
        let mut m = SpikeCountMatrix::zeros(self.n_nodes, end - start, self.bin_width);
        m.t0 = self.t0 + start as f64 * self.bin_width;
        for n in 0..self.n_nodes {
            for i in start..end {
                m.set(n, i - start, self.get(n, i));
            }
        }
        m
    }

    pub fn mean_rate_per_bin(&self) -> Vec<f64> {
        (0..self.n_nodes)
            .map(|n| {
                let s: u64 = (0..self.n_bins).map(|i| self.get(n, i)).sum();
                s as f64 / self.n_bins.max(1) as f64
            })
            .collect()
    }
}

/// Bin a sequence starting at `t = 0`.
///
/// The bin count is `ceil(horizon / bin_width)`, widened if needed so the
/// last event (whose timestamp may equal the horizon) still has a bin.
pub fn bin_events(seq: &EventSequence, bin_width: f64) -> Result<SpikeCountMatrix> {
    if !(bin_width > 0.0) {
        return Err(Error::contract("bin width must be positive"));
    }
    let idx = |t: f64| (t / bin_width).floor() as usize;
    let mut n_bins = (seq.horizon / bin_width).ceil() as usize;
    if let Some(last) = seq.events.last() {
        n_bins = n_bins.max(idx(last.t) + 1);
    }
    let mut m = SpikeCountMatrix::zeros(seq.n_nodes, n_bins, bin_width);
    for e in &seq.events {
        if e.node >= seq.n_nodes || e.t < 0.0 {
            return Err(Error::contract(format!("event {e:?} outside node range or before t = 0")));
        }
        let b = idx(e.t);
        m.counts[e.node * n_bins + b] += 1;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointproc::Event;

    fn seq(events: &[(f64, usize)], horizon: f64) -> EventSequence {
        EventSequence {
            n_nodes: 2,
            horizon,
            events: events.iter().map(|&(t, node)| Event { t, node }).collect(),
        }
    }

    #[test]
    fn same_bin() {
        let m = bin_events(&seq(&[(0.1, 0), (0.9, 0)], 2.0), 1.0).unwrap();
        assert_eq!(m.get(0, 0), 2);
    }

    #[test]
    fn boundary_goes_right() {
        let m = bin_events(&seq(&[(1.0, 1)], 2.0), 1.0).unwrap();
        assert_eq!((m.get(1, 0), m.get(1, 1)), (0, 1));
    }

    #[test]
    fn empty_is_zero_matrix() {
        let m = bin_events(&seq(&[], 3.0), 1.0).unwrap();
        assert_eq!((m.n_bins, m.total()), (3, 0));
    }

    #[test]
    fn event_at_horizon_gets_a_bin() {
        let m = bin_events(&seq(&[(3.0, 0)], 3.0), 1.0).unwrap();
        assert_eq!(m.n_bins, 4);
        assert_eq!(m.get(0, 3), 1);
    }
}
