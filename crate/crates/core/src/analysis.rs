//! Closed-form memory, compression, FLOP and energy accounting.
//!
//! Byte counts follow the convention that substrate weights cost
//! `bits_per_weight / 8` bytes each and every rotation angle costs
//! `bytes_per_angle` bytes (16-bit by default). One MB is `10⁶` bytes; MiB is
//! shown alongside where values are rendered.

use std::fmt::Write as _;

use serde::Serialize;

use crate::butterfly;
use crate::error::{Error, Result};
use crate::ternary::INFO_BITS_PER_WEIGHT;

/// DRAM access energy per bit.
pub const DRAM_PJ_PER_BIT: f64 = 6.4;
pub const DEFAULT_BYTES_PER_ANGLE: f64 = 2.0;
pub const MB: f64 = 1e6;
pub const MIB: f64 = 1024.0 * 1024.0;

fn log2_dims(d_model: usize, d_ff: usize) -> Result<(usize, usize)> {
    match (butterfly::log2_exact(d_model), butterfly::log2_exact(d_ff)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::config(format!("dimensions {d_model} and {d_ff} must both be powers of two"))),
    }
}

/// Full-depth angles of one expert: `d_model/2·log₂d_model + d_ff/2·log₂d_ff`.
pub fn angles_per_expert(d_model: usize, d_ff: usize) -> Result<usize> {
    let (m_in, m_out) = log2_dims(d_model, d_ff)?;
    Ok(d_model / 2 * m_in + d_ff / 2 * m_out)
}

/// Rotation bytes of one expert.
pub fn per_expert_bytes(d_model: usize, d_ff: usize, bytes_per_angle: f64) -> Result<f64> {
    Ok(angles_per_expert(d_model, d_ff)? as f64 * bytes_per_angle)
}

/// Substrate bytes at `bits_per_weight`.
pub fn substrate_bytes(d_model: usize, d_ff: usize, bits_per_weight: f64) -> f64 {
    bits_per_weight / 8.0 * (d_ff * d_model) as f64
}

/// Total butterfly MoE footprint: one substrate plus `n_experts` rotation
/// sets.
pub fn butterfly_memory_bytes(d_model: usize, d_ff: usize, n_experts: usize, bits_per_weight: f64, bytes_per_angle: f64) -> Result<f64> {
    Ok(substrate_bytes(d_model, d_ff, bits_per_weight) + n_experts as f64 * per_expert_bytes(d_model, d_ff, bytes_per_angle)?)
}

/// `N_E · d_ff · d_model · b_precision` for independent dense experts.
pub fn standard_moe_memory_bytes(d_model: usize, d_ff: usize, n_experts: usize, b_precision: u64) -> u64 {
    (n_experts * d_ff * d_model) as u64 * b_precision
}

/// Standard over butterfly bytes at a finite expert count (1.58-bit
/// substrate, 16-bit angles).
pub fn compression_ratio(d_model: usize, d_ff: usize, n_experts: usize, b_precision: u64) -> Result<f64> {
    let bf = butterfly_memory_bytes(d_model, d_ff, n_experts, INFO_BITS_PER_WEIGHT, DEFAULT_BYTES_PER_ANGLE)?;
    Ok(standard_moe_memory_bytes(d_model, d_ff, n_experts, b_precision) as f64 / bf)
}

/// Limit of [`compression_ratio`] as the expert count grows: one dense
/// expert's bytes over one expert's rotation bytes.
pub fn asymptotic_compression(d_model: usize, d_ff: usize, b_precision: u64) -> Result<f64> {
    Ok((d_model * d_ff) as f64 * b_precision as f64 / per_expert_bytes(d_model, d_ff, DEFAULT_BYTES_PER_ANGLE)?)
}

/// Per-token arithmetic of a butterfly MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenFlops {
    /// Multiplies and adds of all Givens rotations (6 per pair).
    pub rotation_flops: u64,
    /// Signed accumulations of the ternary product.
    pub ternary_adds: u64,
    /// Scale multiplications of the ternary product (one per output).
    pub ternary_muls: u64,
}

pub fn flops_per_token(d_model: usize, d_ff: usize, k: usize, layers_in: usize, layers_out: usize) -> TokenFlops {
    let k = k as u64;
    TokenFlops {
        rotation_flops: k * 6 * (layers_in * d_model / 2 + layers_out * d_ff / 2) as u64,
        ternary_adds: k * (d_ff * d_model) as u64,
        ternary_muls: k * d_ff as u64,
    }
}

/// Energy of moving `bytes` from DRAM once.
pub fn dram_energy_joules(bytes: f64) -> f64 {
    bytes * 8.0 * DRAM_PJ_PER_BIT * 1e-12
}

/// Fractional energy saving of the butterfly layer over the standard one.
pub fn energy_reduction(d_model: usize, d_ff: usize, n_experts: usize, b_precision: u64) -> Result<f64> {
    let std = dram_energy_joules(standard_moe_memory_bytes(d_model, d_ff, n_experts, b_precision) as f64);
    let bf = dram_energy_joules(butterfly_memory_bytes(d_model, d_ff, n_experts, INFO_BITS_PER_WEIGHT, DEFAULT_BYTES_PER_ANGLE)?);
    Ok(1.0 - bf / std)
}

/// Largest expert count fitting a memory budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Capacity {
    pub experts: u64,
    /// Set when the budget cannot hold the substrate plus overhead.
    pub warning: Option<String>,
}

pub fn device_capacity(budget_bytes: f64, d_model: usize, d_ff: usize, overhead_bytes: f64) -> Result<Capacity> {
    let fixed = substrate_bytes(d_model, d_ff, INFO_BITS_PER_WEIGHT) + overhead_bytes;
    let per = per_expert_bytes(d_model, d_ff, DEFAULT_BYTES_PER_ANGLE)?;
    if budget_bytes < fixed {
        return Ok(Capacity {
            experts: 0,
            warning: Some(format!("budget of {budget_bytes} bytes is below the {fixed} bytes of substrate and overhead")),
        });
    }
    Ok(Capacity {
        experts: ((budget_bytes - fixed) / per).floor() as u64,
        warning: None,
    })
}

/// A device's usable memory and the expert counts published for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Device {
    pub name: &'static str,
    pub budget_bytes: f64,
    pub published_butterfly: u64,
    pub published_standard: u64,
}

pub const DEVICES: [Device; 3] = [
    Device {
        name: "RPi 5",
        budget_bytes: 8.0 * 1024.0 * MIB,
        published_butterfly: 21_079,
        published_standard: 63,
    },
    Device {
        name: "Jetson Nano",
        budget_bytes: 4.0 * 1024.0 * MIB,
        published_butterfly: 10_540,
        published_standard: 31,
    },
    Device {
        name: "ESP32",
        budget_bytes: 512.0 * 1024.0,
        published_butterfly: 131,
        published_standard: 0,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRow {
    pub device: &'static str,
    pub budget_bytes: f64,
    pub butterfly_experts: u64,
    pub standard_experts: u64,
    pub published_butterfly: u64,
    pub published_standard: u64,
    /// Formula and published counts disagree.
    pub discrepancy: bool,
}

/// Expert capacity per device from the formulas, next to the published
/// counts.
pub fn device_table(d_model: usize, d_ff: usize, b_precision: u64) -> Result<Vec<DeviceRow>> {
    DEVICES
        .iter()
        .map(|d| {
            let butterfly_experts = device_capacity(d.budget_bytes, d_model, d_ff, 0.0)?.experts;
            let standard_experts = (d.budget_bytes / standard_moe_memory_bytes(d_model, d_ff, 1, b_precision) as f64).floor() as u64;
            Ok(DeviceRow {
                device: d.name,
                budget_bytes: d.budget_bytes,
                butterfly_experts,
                standard_experts,
                published_butterfly: d.published_butterfly,
                published_standard: d.published_standard,
                discrepancy: butterfly_experts != d.published_butterfly || standard_experts != d.published_standard,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: &'static str,
    pub scaling: &'static str,
    /// Compression range over the standard layer (low, high).
    pub ratio: (f64, f64),
    /// Footprint range in bytes (high, low) implied by the ratio.
    pub bytes: (f64, f64),
}

/// Compression methods at 64 experts, `d = 512`, `d_ff = 2048`. Baseline
/// rows apply their cited ratios to the standard footprint; the butterfly
/// row is computed.
pub fn comparison_rows() -> Result<Vec<ComparisonRow>> {
    let std = standard_moe_memory_bytes(512, 2048, 64, 4) as f64;
    let cited: [(&'static str, &'static str, f64, f64); 5] = [
        ("Standard MoE", "O(N·d²)", 1.0, 1.0),
        ("QMoE", "O(N·d²)", 10.0, 20.0),
        ("MoQE (2-bit)", "O(N·d²)", 5.0, 5.0),
        ("PuzzleMoE", "O(N·d²) reduced", 2.0, 2.0),
        ("MC", "O(N·d²) reduced", 4.0, 4.0),
    ];
    let mut rows: Vec<ComparisonRow> = cited
        .into_iter()
        .map(|(method, scaling, lo, hi)| ComparisonRow {
            method,
            scaling,
            ratio: (lo, hi),
            bytes: (std / lo, std / hi),
        })
        .collect();
    let bf = butterfly_memory_bytes(512, 2048, 64, INFO_BITS_PER_WEIGHT, DEFAULT_BYTES_PER_ANGLE)?;
    rows.push(ComparisonRow {
        method: "ButterflyMoE",
        scaling: "O(d² + N·d·log d)",
        ratio: (std / bf, std / bf),
        bytes: (bf, bf),
    });
    Ok(rows)
}

fn render_range(lo: f64, hi: f64, unit: &str, digits: usize) -> String {
    if (lo - hi).abs() < 1e-9 * lo.abs().max(1.0) {
        format!("{lo:.digits$}{unit}")
    } else {
        format!("{lo:.digits$}-{hi:.digits$}{unit}")
    }
}

/// Plain-text rendering of [`comparison_rows`].
pub fn comparison_table() -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{:<14} {:<20} {:>14} {:>22}", "method", "scaling", "ratio (64)", "memory").expect("string write");
    for r in comparison_rows()? {
        let ratio = render_range(r.ratio.0, r.ratio.1, "x", 1);
        let mem = if r.bytes.0 > 10.0 * MIB {
            render_range(r.bytes.1 / MIB, r.bytes.0 / MIB, " MiB", 0)
        } else {
            format!("{:.2} MB ({:.2} MiB)", r.bytes.0 / MB, r.bytes.0 / MIB)
        };
        writeln!(out, "{:<14} {:<20} {:>14} {:>22}", r.method, r.scaling, ratio, mem).expect("string write");
    }
    Ok(out)
}

/// Itemised footprint of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub substrate_bytes_info: f64,
    pub substrate_bytes_packed: f64,
    pub per_expert_bytes: f64,
    pub butterfly_bytes: f64,
    pub standard_bytes: u64,
    pub compression_ratio: f64,
    pub asymptotic_ratio: f64,
}

pub fn memory_report(d_model: usize, d_ff: usize, n_experts: usize, b_precision: u64) -> Result<MemoryReport> {
    let butterfly_bytes = butterfly_memory_bytes(d_model, d_ff, n_experts, INFO_BITS_PER_WEIGHT, DEFAULT_BYTES_PER_ANGLE)?;
    let standard_bytes = standard_moe_memory_bytes(d_model, d_ff, n_experts, b_precision);
    Ok(MemoryReport {
        d_model,
        d_ff,
        n_experts,
        substrate_bytes_info: substrate_bytes(d_model, d_ff, INFO_BITS_PER_WEIGHT),
        substrate_bytes_packed: substrate_bytes(d_model, d_ff, crate::ternary::STORED_BITS_PER_WEIGHT),
        per_expert_bytes: per_expert_bytes(d_model, d_ff, DEFAULT_BYTES_PER_ANGLE)?,
        butterfly_bytes,
        standard_bytes,
        compression_ratio: standard_bytes as f64 / butterfly_bytes,
        asymptotic_ratio: asymptotic_compression(d_model, d_ff, b_precision)?,
    })
}
