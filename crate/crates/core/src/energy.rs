//! Operation-level energy accounting from measured spike rates.
//!
//! Linear layers fed by spikes cost one accumulate (AC) per active input and
//! output; layers fed by real values cost one multiply-accumulate (MAC) per
//! input and output. Attention cores follow their mode: spike-spike products
//! and PSSA's bias-weighted sums are ACs gated by co-activation, softmax
//! attention is all MACs. Threshold comparisons, resets and folded affine
//! terms are not counted. Counts are per sample (one context window).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{count_attention_ops, AttnConfig, AttnMode, PositionalBias};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, LayerPlan, LinearInput, Model, ModelConfig};
use crate::tensor::Tensor;

/// Energy per operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_ac > 0.0 && self.e_mac > self.e_ac) {
            return Err(Error::Validation(format!(
                "energy constants need e_mac > e_ac > 0, got e_mac = {}, e_ac = {}",
                self.e_mac, self.e_ac
            )));
        }
        Ok(())
    }

    pub fn cost(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Ac => self.e_ac,
            OpKind::Mac => self.e_mac,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Ac,
    Mac,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Ac => "AC",
            OpKind::Mac => "MAC",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: OpKind,
    pub count: f64,
    /// Rate of the gating spikes; 1 for real-valued inputs.
    pub spike_rate: f64,
    pub attention: bool,
    pub energy_uj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mode: AttnMode,
    pub energy_model: EnergyModel,
    pub layers: Vec<LayerEnergy>,
    pub ac_count: f64,
    pub mac_count: f64,
    /// Attention cores only; projections are listed as linear layers.
    pub attention_uj: f64,
    pub total_uj: f64,
}

impl EnergyReport {
    fn new(mode: AttnMode, energy_model: EnergyModel, layers: Vec<LayerEnergy>) -> Self {
        let sum = |f: &dyn Fn(&LayerEnergy) -> f64| layers.iter().map(f).sum::<f64>();
        let ac_count = sum(&|l| if l.kind == OpKind::Ac { l.count } else { 0.0 });
        let mac_count = sum(&|l| if l.kind == OpKind::Mac { l.count } else { 0.0 });
        let attention_uj = sum(&|l| if l.attention { l.energy_uj } else { 0.0 });
        let total_uj = sum(&|l| l.energy_uj);
        Self {
            mode,
            energy_model,
            layers,
            ac_count,
            mac_count,
            attention_uj,
            total_uj,
        }
    }

    /// Fixed-width table of the line items and totals.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>4} {:>14} {:>8} {:>12}\n", "layer", "op", "count", "rate", "energy_uJ");
        for l in &self.layers {
            s += &format!(
                "{:<16} {:>4} {:>14.1} {:>8.4} {:>12.6}\n",
                l.name, l.kind, l.count, l.spike_rate, l.energy_uj
            );
        }
        s += &format!("attention total ({}): {:.6} uJ\n", self.mode, self.attention_uj);
        s += &format!(
            "total: {:.6} uJ ({:.0} AC, {:.0} MAC)\n",
            self.total_uj, self.ac_count, self.mac_count
        );
        s
    }
}

/// Synaptic accumulates of a spike-fed linear layer: one per active input and output.
pub fn count_linear_sops(fan_in: usize, fan_out: usize, n_positions: usize, spike_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&spike_rate) {
        return Err(Error::contract(format!("spike rate {spike_rate} outside [0, 1]")));
    }
    Ok(spike_rate * (n_positions * fan_in * fan_out) as f64)
}

/// Dense multiply-accumulates of a linear layer on real-valued input.
pub fn count_linear_macs(fan_in: usize, fan_out: usize, n_positions: usize) -> f64 {
    (n_positions * fan_in * fan_out) as f64
}

/// Fraction of ones per spiking layer over an inference pass on `tokens`.
///
/// `blk{i}/kv` holds the `K ⊙ V` co-activation rate.
pub fn measure_spike_rates(model: &Model, tokens: &Tensor) -> Result<BTreeMap<String, f64>> {
    let mut ctx = ForwardCtx {
        record_rates: true,
        ..ForwardCtx::inference()
    };
    model.clone().predict_with(tokens, &mut ctx)?;
    Ok(ctx.rates.iter().map(|(n, c)| (n.clone(), c.rate())).collect())
}

fn rate(rates: &BTreeMap<String, f64>, name: &str) -> Result<f64> {
    let r = *rates
        .get(name)
        .ok_or_else(|| Error::contract(format!("no spike rate recorded for {name}")))?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::contract(format!("spike rate {r} of {name} outside [0, 1]")));
    }
    Ok(r)
}

/// Energy of one sample given per-layer spike rates.
pub fn energy_from_rates(
    config: &ModelConfig,
    plan: &LayerPlan,
    rates: &BTreeMap<String, f64>,
    em: &EnergyModel,
) -> Result<EnergyReport> {
    em.validate()?;
    let line = |name: String, kind: OpKind, count: f64, spike_rate: f64, attention: bool| LayerEnergy {
        name,
        kind,
        count,
        spike_rate,
        attention,
        energy_uj: count * em.cost(kind) * 1e-6,
    };
    let mut layers = Vec::new();
    for site in &plan.linears {
        layers.push(match &site.input {
            LinearInput::Real => line(
                site.name.clone(),
                OpKind::Mac,
                count_linear_macs(site.fan_in, site.fan_out, site.positions),
                1.0,
                false,
            ),
            LinearInput::Spikes(src) => {
                let r = rate(rates, src)?;
                let count = count_linear_sops(site.fan_in, site.fan_out, site.positions, r)?;
                line(site.name.clone(), OpKind::Ac, count, r, false)
            }
        });
    }
    let (n, t, d) = (config.context_len, config.timesteps(), config.d_model);
    let channels = (t * d) as f64;
    let pairs = (n * (n + 1) / 2) as f64;
    match config.attn_mode {
        AttnMode::Vla => {
            let cfg = AttnConfig {
                snn_timesteps: t,
                ..config.attn_config()
            };
            let macs = count_attention_ops(&cfg, 1).muls as f64;
            for i in 0..config.n_blocks {
                layers.push(line(format!("blk{i}/attn"), OpKind::Mac, macs, 1.0, true));
            }
        }
        AttnMode::Sssa | AttnMode::Tssa => {
            for site in &plan.attention {
                let (rq, rk, rv) = (rate(rates, &site.q)?, rate(rates, &site.k)?, rate(rates, &site.v)?);
                // Q Kᵀ accumulates co-active pairs, A V accumulates A_ij per active value
                let count = pairs * channels * (rq * rk + rv);
                layers.push(line(format!("blk{}/attn", site.block), OpKind::Ac, count, rq * rk + rv, true));
            }
        }
        AttnMode::Pssa => {
            let w = PositionalBias::effective_len(n, config.window) as f64;
            for site in &plan.attention {
                let r = rate(rates, &site.kv)?;
                layers.push(line(format!("blk{}/attn", site.block), OpKind::Ac, w * channels * r, r, true));
            }
        }
    }
    Ok(EnergyReport::new(config.attn_mode, *em, layers))
}

/// Measure spike rates on `tokens` and price one inference per sample.
pub fn estimate_energy(model: &Model, tokens: &Tensor, em: &EnergyModel) -> Result<EnergyReport> {
    if !model.is_folded() {
        return Err(Error::contract(
            "energy accounting needs a folded model; unfolded normalization would be miscounted",
        ));
    }
    let rates = measure_spike_rates(model, tokens)?;
    energy_from_rates(&model.config, &model.layer_plan(), &rates, em)
}
