//! Physical NPU core description and its fixed-size memory segmentation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroUnits(&'static str),
    #[error("{0} must be strictly positive")]
    NonPositive(&'static str),
    #[error("{capacity_field} ({capacity} bytes) is not a multiple of {segment_field} ({segment} bytes)")]
    NotDivisible {
        capacity_field: &'static str,
        capacity: u64,
        segment_field: &'static str,
        segment: u64,
    },
    #[error("invalid byte size {0:?}")]
    BadByteSize(String),
}

/// A byte quantity. Deserializes from an integer or a string with a binary
/// suffix (`"128 MiB"`, `"2MiB"`, `"64 GiB"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const fn bytes(self) -> u64 {
        self.0
    }
}

impl FromStr for ByteSize {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let split = t
            .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '_'))
            .unwrap_or(t.len());
        let (num, unit) = t.split_at(split);
        let num = num.replace('_', "");
        let mult = match unit.trim() {
            "" | "B" => 1,
            "KiB" => KIB,
            "MiB" => MIB,
            "GiB" => GIB,
            _ => return Err(ConfigError::BadByteSize(s.to_string())),
        };
        if let Ok(n) = num.parse::<u64>() {
            return n
                .checked_mul(mult)
                .map(ByteSize)
                .ok_or_else(|| ConfigError::BadByteSize(s.to_string()));
        }
        let x: f64 = num
            .parse()
            .map_err(|_| ConfigError::BadByteSize(s.to_string()))?;
        let v = x * mult as f64;
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 {
            return Err(ConfigError::BadByteSize(s.to_string()));
        }
        Ok(ByteSize(v as u64))
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        if b != 0 && b.is_multiple_of(GIB) {
            write!(f, "{} GiB", b / GIB)
        } else if b != 0 && b.is_multiple_of(MIB) {
            write!(f, "{} MiB", b / MIB)
        } else if b != 0 && b.is_multiple_of(KIB) {
            write!(f, "{} KiB", b / KIB)
        } else {
            write!(f, "{b}")
        }
    }
}

impl Serialize for ByteSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.0)
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(ByteSize(n)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Physical NPU core resources.
///
/// Defaults follow a TPUv4-class core: 4 MEs of 128x128, 4 VEs of 128x8
/// lanes, 1050 MHz, 128 MiB SRAM, 64 GiB HBM at 1200 GB/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub num_mes: u32,
    pub num_ves: u32,
    /// Systolic array side length.
    pub me_dim: u32,
    /// Vector lanes processed per cycle by one VE.
    pub ve_width: u32,
    pub freq_hz: u64,
    #[serde(alias = "sram")]
    pub sram_bytes: ByteSize,
    #[serde(alias = "hbm")]
    pub hbm_bytes: ByteSize,
    #[serde(alias = "hbm_bw")]
    pub hbm_bw_bytes_per_s: u64,
    pub sram_segment_bytes: ByteSize,
    pub hbm_segment_bytes: ByteSize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            num_mes: 4,
            num_ves: 4,
            me_dim: 128,
            ve_width: 128 * 8,
            freq_hz: 1_050_000_000,
            sram_bytes: ByteSize(128 * MIB),
            hbm_bytes: ByteSize(64 * GIB),
            hbm_bw_bytes_per_s: 1_200_000_000_000,
            sram_segment_bytes: ByteSize(2 * MIB),
            hbm_segment_bytes: ByteSize(GIB),
        }
    }
}

impl HardwareConfig {
    /// Peak HBM bandwidth expressed per core clock cycle.
    pub fn hbm_bytes_per_cycle(&self) -> f64 {
        self.hbm_bw_bytes_per_s as f64 / self.freq_hz as f64
    }

    pub fn cycles_to_seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.freq_hz as f64
    }

    pub fn total_eus(&self) -> u32 {
        self.num_mes + self.num_ves
    }
}

/// Checks every hardware invariant and hands the config back unchanged.
pub fn validate_hardware(cfg: HardwareConfig) -> Result<HardwareConfig, ConfigError> {
    if cfg.num_mes == 0 {
        return Err(ConfigError::ZeroUnits("num_mes"));
    }
    if cfg.num_ves == 0 {
        return Err(ConfigError::ZeroUnits("num_ves"));
    }
    let positive: [(&'static str, u64); 8] = [
        ("me_dim", cfg.me_dim as u64),
        ("ve_width", cfg.ve_width as u64),
        ("freq_hz", cfg.freq_hz),
        ("sram_bytes", cfg.sram_bytes.0),
        ("hbm_bytes", cfg.hbm_bytes.0),
        ("hbm_bw_bytes_per_s", cfg.hbm_bw_bytes_per_s),
        ("sram_segment_bytes", cfg.sram_segment_bytes.0),
        ("hbm_segment_bytes", cfg.hbm_segment_bytes.0),
    ];
    for (name, v) in positive {
        if v == 0 {
            return Err(ConfigError::NonPositive(name));
        }
    }
    if !cfg.sram_bytes.0.is_multiple_of(cfg.sram_segment_bytes.0) {
        return Err(ConfigError::NotDivisible {
            capacity_field: "sram_bytes",
            capacity: cfg.sram_bytes.0,
            segment_field: "sram_segment_bytes",
            segment: cfg.sram_segment_bytes.0,
        });
    }
    if !cfg.hbm_bytes.0.is_multiple_of(cfg.hbm_segment_bytes.0) {
        return Err(ConfigError::NotDivisible {
            capacity_field: "hbm_bytes",
            capacity: cfg.hbm_bytes.0,
            segment_field: "hbm_segment_bytes",
            segment: cfg.hbm_segment_bytes.0,
        });
    }
    Ok(cfg)
}

/// Number of fixed-size segments each memory is carved into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub sram_segments: u64,
    pub hbm_segments: u64,
    pub sram_segment_bytes: u64,
    pub hbm_segment_bytes: u64,
}

/// Expects a validated config; the divisions are exact.
pub fn segment_layout(cfg: &HardwareConfig) -> SegmentLayout {
    debug_assert_eq!(cfg.sram_bytes.0 % cfg.sram_segment_bytes.0, 0);
    debug_assert_eq!(cfg.hbm_bytes.0 % cfg.hbm_segment_bytes.0, 0);
    SegmentLayout {
        sram_segments: cfg.sram_bytes.0 / cfg.sram_segment_bytes.0,
        hbm_segments: cfg.hbm_bytes.0 / cfg.hbm_segment_bytes.0,
        sram_segment_bytes: cfg.sram_segment_bytes.0,
        hbm_segment_bytes: cfg.hbm_segment_bytes.0,
    }
}
