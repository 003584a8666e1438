//! Three-state Markov packet-loss simulator: GOOD never drops, LOSSY drops
//! with a configurable probability, BURST drops everything. One chain step
//! per packet.

use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GOOD: usize = 0;
pub const LOSSY: usize = 1;
pub const BURST: usize = 2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThreeStateModel {
    /// Row-stochastic transition matrix.
    pub transitions: [[f64; 3]; 3],
    /// Loss probability while in LOSSY.
    pub p_lossy: f64,
}

impl Default for ThreeStateModel {
    fn default() -> Self {
        // Not from any measurement campaign; plausible bursty RTC conditions
        // around 6% average loss.
        Self {
            transitions: [
                [0.95, 0.04, 0.01],
                [0.60, 0.35, 0.05],
                [0.30, 0.20, 0.50],
            ],
            p_lossy: 0.5,
        }
    }
}

/// Per-packet receive flags, true = received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketTrace(pub Vec<bool>);

impl PacketTrace {
    pub fn loss_rate(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|r| !**r).count() as f64 / self.0.len() as f64
    }

    /// Serialized form: one '1' (received) or '0' (lost) per packet, then a
    /// newline.
    pub fn to_file_string(&self) -> String {
        let mut s: String = self.0.iter().map(|r| if *r { '1' } else { '0' }).collect();
        s.push('\n');
        s
    }

    pub fn from_file_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for c in s.trim_end_matches(['\n', '\r']).chars() {
            match c {
                '1' => out.push(true),
                '0' => out.push(false),
                other => {
                    return Err(Error::Format(format!(
                        "trace file: unexpected character {other:?}"
                    )))
                }
            }
        }
        Ok(Self(out))
    }
}

impl ThreeStateModel {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transitions.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::Config(format!(
                    "transition row {i} is not a probability distribution: {row:?}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.p_lossy) {
            return Err(Error::Config(format!(
                "p_lossy must be in [0,1], got {}",
                self.p_lossy
            )));
        }
        Ok(())
    }

    pub fn loss_probabilities(&self) -> [f64; 3] {
        [0.0, self.p_lossy, 1.0]
    }

    pub fn simulate(&self, n_packets: usize, seed: u64) -> Result<PacketTrace> {
        Ok(self.simulate_from(GOOD, n_packets, seed)?.0)
    }

    /// Test hook: choose the start state and observe the state sequence.
    pub fn simulate_from(
        &self,
        start: usize,
        n_packets: usize,
        seed: u64,
    ) -> Result<(PacketTrace, Vec<usize>)> {
        self.validate()?;
        let loss_p = self.loss_probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = start;
        let mut trace = Vec::with_capacity(n_packets);
        let mut states = Vec::with_capacity(n_packets);
        for _ in 0..n_packets {
            state = step(&self.transitions[state], rng.gen::<f64>());
            states.push(state);
            let lost = rng.gen::<f64>() < loss_p[state];
            trace.push(!lost);
        }
        Ok((PacketTrace(trace), states))
    }

    /// Stationary loss rate: pi . l, with pi from power iteration.
    pub fn stationary_loss_rate(&self) -> Result<f64> {
        self.validate()?;
        let pi = self.stationary_distribution()?;
        let l = self.loss_probabilities();
        Ok(pi.iter().zip(l.iter()).map(|(p, l)| p * l).sum())
    }

    pub fn stationary_distribution(&self) -> Result<[f64; 3]> {
        if !self.is_irreducible() {
            return Err(Error::Numerical(
                "no unique stationary distribution: chain is reducible".into(),
            ));
        }
        let mut pi = [1.0 / 3.0; 3];
        for iter in 0..100_000 {
            let mut next = [0.0; 3];
            for i in 0..3 {
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += pi[i] * self.transitions[i][j];
                }
            }
            let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-12 && iter > 2 {
                return Ok(pi);
            }
        }
        Err(Error::Numerical(
            "no unique stationary distribution: power iteration did not converge".into(),
        ))
    }

    fn is_irreducible(&self) -> bool {
        // every state reaches every state along positive-probability edges
        for start in 0..3 {
            let mut seen = [false; 3];
            seen[start] = true;
            for _ in 0..3 {
                for i in 0..3 {
                    if seen[i] {
                        for j in 0..3 {
                            if self.transitions[i][j] > 0.0 {
                                seen[j] = true;
                            }
                        }
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return false;
            }
        }
        true
    }
}

fn step(row: &[f64; 3], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    2
}

/// Counts of maximal runs of lost packets by run length.
pub fn burst_histogram(trace: &PacketTrace) -> std::collections::BTreeMap<usize, usize> {
    let mut out = std::collections::BTreeMap::new();
    let mut run = 0usize;
    for &received in &trace.0 {
        if !received {
            run += 1;
        } else if run > 0 {
            *out.entry(run).or_insert(0) += 1;
            run = 0;
        }
    }
    if run > 0 {
        *out.entry(run).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain_from_good_never_loses() {
        let model = ThreeStateModel {
            transitions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            p_lossy: 0.5,
        };
        let trace = model.simulate(1000, 7).unwrap();
        assert_eq!(trace.loss_rate(), 0.0);
    }

    #[test]
    fn identity_chain_from_burst_loses_everything() {
        let model = ThreeStateModel {
            transitions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            p_lossy: 0.5,
        };
        let (trace, _) = model.simulate_from(BURST, 1000, 7).unwrap();
        assert_eq!(trace.loss_rate(), 1.0);
    }

    #[test]
    fn identity_chain_has_no_stationary_distribution() {
        let model = ThreeStateModel {
            transitions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            p_lossy: 0.5,
        };
        assert!(model.stationary_loss_rate().is_err());
    }

    #[test]
    fn uniform_chain_rate_is_half() {
        let model = ThreeStateModel {
            transitions: [[1.0 / 3.0; 3]; 3],
            p_lossy: 0.5,
        };
        let rate = model.stationary_loss_rate().unwrap();
        assert!((rate - 0.5).abs() < 1e-10);
    }

    #[test]
    fn empirical_matches_stationary_within_one_percent() {
        let model = ThreeStateModel::default();
        let analytic = model.stationary_loss_rate().unwrap();
        let trace = model.simulate(1_000_000, 42).unwrap();
        assert!(
            (trace.loss_rate() - analytic).abs() < 0.01,
            "empirical {} vs analytic {analytic}",
            trace.loss_rate()
        );
    }

    #[test]
    fn seeded_determinism() {
        let model = ThreeStateModel::default();
        let a = model.simulate(10_000, 9).unwrap();
        let b = model.simulate(10_000, 9).unwrap();
        assert_eq!(a, b);
        let c = model.simulate(10_000, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_matrix_rejected() {
        let model = ThreeStateModel {
            transitions: [[0.9, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            p_lossy: 0.5,
        };
        assert!(model.simulate(10, 0).is_err());
    }

    #[test]
    fn burst_histogram_counts_runs() {
        assert!(burst_histogram(&PacketTrace(vec![true; 5])).is_empty());
        // received, lost, lost, received -> one run of length 2
        let h = burst_histogram(&PacketTrace(vec![true, false, false, true]));
        assert_eq!(h.get(&2), Some(&1));
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn trace_file_round_trip() {
        let t = PacketTrace(vec![true, false, true, true, false]);
        let s = t.to_file_string();
        assert_eq!(s, "10110\n");
        assert_eq!(PacketTrace::from_file_str(&s).unwrap(), t);
        assert!(PacketTrace::from_file_str("10x1").is_err());
    }

    #[test]
    fn dwell_times_are_geometric() {
        // state-resolved dwell times have ratio P[s][s]; check the empirical
        // run-length histogram ratio for each state on a long trace
        let model = ThreeStateModel::default();
        let (_, states) = model.simulate_from(GOOD, 500_000, 11).unwrap();
        for s in 0..3 {
            let mut hist = std::collections::BTreeMap::new();
            let mut run = 0usize;
            for &st in &states {
                if st == s {
                    run += 1;
                } else if run > 0 {
                    *hist.entry(run).or_insert(0usize) += 1;
                    run = 0;
                }
            }
            let p_stay = model.transitions[s][s];
            let c1 = *hist.get(&1).unwrap_or(&0) as f64;
            let c2 = *hist.get(&2).unwrap_or(&0) as f64;
            // geometric: P(len=2)/P(len=1) = p_stay
            assert!(
                (c2 / c1 - p_stay).abs() < 0.05,
                "state {s}: ratio {} vs {}",
                c2 / c1,
                p_stay
            );
        }
    }
}
