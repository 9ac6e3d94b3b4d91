//! Plug-in entropy estimates for binary spike sequences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Plug-in (maximum-likelihood) entropy in bits of the empirical distribution.
pub fn plugin_entropy<K: Ord>(samples: impl IntoIterator<Item = K>) -> f64 {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    let mut n = 0usize;
    for s in samples {
        *counts.entry(s).or_default() += 1;
        n += 1;
    }
    entropy_of_counts(counts.values().copied(), n)
}

fn entropy_of_counts(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyReport {
    /// Entropy of the concatenated sequence `(X¹, …, X^T)`.
    pub joint: f64,
    /// `Σ_t H(X^t)`.
    pub marginal_sum: f64,
    /// Total-variation distance between the joint distribution and the product
    /// of its marginals.
    pub dependence: f64,
}

impl EntropyReport {
    pub fn dependent(&self) -> bool {
        self.dependence > 1e-9
    }
}

/// Joint and per-timestep plug-in entropies of a sample of binary sequences.
///
/// `samples[s][t]` is the spike vector at SNN step `t` of sample `s`; every
/// sample must have the same number of steps and each step at most 64 bits.
pub fn temporal_entropy(samples: &[Vec<Vec<u8>>]) -> Result<EntropyReport> {
    let steps = samples.first().map(|s| s.len()).unwrap_or(0);
    if samples.is_empty() || steps == 0 {
        return Err(Error::contract("entropy needs at least one non-empty sample"));
    }
    let mut codes = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() != steps {
            return Err(Error::contract("samples differ in number of steps"));
        }
        let row = s
            .iter()
            .map(|bits| encode(bits))
            .collect::<Result<Vec<u64>>>()?;
        codes.push(row);
    }
    let n = codes.len() as f64;
    let mut joint: BTreeMap<&[u64], usize> = BTreeMap::new();
    for c in &codes {
        *joint.entry(c.as_slice()).or_default() += 1;
    }
    let mut marginals: Vec<BTreeMap<u64, usize>> = vec![BTreeMap::new(); steps];
    for c in &codes {
        for (t, &x) in c.iter().enumerate() {
            *marginals[t].entry(x).or_default() += 1;
        }
    }
    let h_joint = entropy_of_counts(joint.values().copied(), codes.len());
    let marginal_sum = marginals
        .iter()
        .map(|m| entropy_of_counts(m.values().copied(), codes.len()))
        .sum();

    // Product-measure mass outside the joint support is 1 - Σ_{x in supp} q(x).
    let mut abs_diff = 0.0;
    let mut q_on_support = 0.0;
    for (x, &count) in &joint {
        let q: f64 = x.iter().enumerate().map(|(t, v)| marginals[t][v] as f64 / n).product();
        abs_diff += (count as f64 / n - q).abs();
        q_on_support += q;
    }
    let dependence = 0.5 * (abs_diff + (1.0 - q_on_support).max(0.0));
    Ok(EntropyReport {
        joint: h_joint,
        marginal_sum,
        dependence,
    })
}

fn encode(bits: &[u8]) -> Result<u64> {
    if bits.len() > 64 {
        return Err(Error::contract(format!("a step holds {} bits, at most 64 supported", bits.len())));
    }
    bits.iter().enumerate().try_fold(0u64, |acc, (i, &b)| match b {
        0 => Ok(acc),
        1 => Ok(acc | (1 << i)),
        _ => Err(Error::contract(format!("non-binary value {b} in spike sample"))),
    })
}
