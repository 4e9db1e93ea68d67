//! Conversions between scenario units (MiB, Mbps, ms) and engine units.
//!
//! One engine time unit is one millisecond. One data unit is `unit_bytes`
//! bytes, declared by the scenario.

pub const MIB: f64 = 1024.0 * 1024.0;

/// Default data unit: one MiB.
pub const DEFAULT_UNIT_BYTES: u64 = 1024 * 1024;

/// Milliseconds needed to push one data unit through a link of `mbps`.
pub fn trans_delay_per_unit(mbps: f64, unit_bytes: u64) -> f64 {
    unit_bytes as f64 * 8.0 / (mbps * 1e6) * 1e3
}

/// MiB to (fractional) data units.
pub fn mib_to_units(mib: f64, unit_bytes: u64) -> f64 {
    mib * MIB / unit_bytes as f64
}

/// MiB to whole data units, never below one.
pub fn mib_to_whole_units(mib: f64, unit_bytes: u64) -> u64 {
    (mib_to_units(mib, unit_bytes).round() as u64).max(1)
}

/// MiB/s throughput to data units per millisecond.
pub fn mibps_to_units_per_ms(mibps: f64, unit_bytes: u64) -> f64 {
    mib_to_units(mibps, unit_bytes) / 1e3
}
