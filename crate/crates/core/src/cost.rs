//! Parametric accelerator and network cost model.
//!
//! Prefill is compute-bound: latency is flat up to `chunk_size` tokens and
//! linear beyond it. Decode is memory-bound: an iteration costs
//! `a + b * batch + c * kv_tokens`. KV transfers are charged
//! `transfer_fixed + bytes / bandwidth`.

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::error::ConfigError;

/// Layer/hidden geometry used to size the KV cache per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub layers: u64,
    pub hidden: u64,
    pub bytes_per_elem: u64,
}

impl ModelShape {
    pub const OPT_13B: ModelShape = ModelShape {
        layers: 40,
        hidden: 5120,
        bytes_per_elem: 2,
    };

    /// Keys and values for every layer.
    pub const fn kv_bytes_per_token(&self) -> u64 {
        2 * self.layers * self.hidden * self.bytes_per_elem
    }
}

/// The sequential predictor is this many times faster than the main model.
pub const SEQUENTIAL_PREDICTOR_SPEEDUP: f64 = 10.0;

/// Extra fixed cost of bouncing a transfer through host memory.
pub const INDIRECT_BOUNCE_US: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    pub chunk_size: u32,
    pub t_chunk_us: f64,
    pub t_prefill_overhead_us: f64,
    pub decode_a_us: f64,
    pub decode_b_us: f64,
    pub decode_c_us_per_token: f64,
    pub mem_capacity_tokens: u64,
    pub page_size: u32,
    pub swap_penalty_us_per_page: f64,
    pub predictor_parallel_tax: f64,
    pub kv_bytes_per_token: u64,
    pub bandwidth_bytes_per_sec: u64,
    pub transfer_fixed_us: u64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams {
            chunk_size: 512,
            t_chunk_us: 50_000.0,
            t_prefill_overhead_us: 5_000.0,
            decode_a_us: 2_000.0,
            decode_b_us: 150.0,
            decode_c_us_per_token: 0.18,
            mem_capacity_tokens: 160_000,
            page_size: 16,
            swap_penalty_us_per_page: 500.0,
            predictor_parallel_tax: 1.10,
            kv_bytes_per_token: ModelShape::OPT_13B.kv_bytes_per_token(),
            bandwidth_bytes_per_sec: 25_000_000_000,
            transfer_fixed_us: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPreset {
    /// 200 Gbps RoCE through the accelerator's companion NIC.
    Roce200,
    /// 300 GB/s direct accelerator link.
    Nvlink300,
    /// NIC bandwidth plus a bounce copy through host memory.
    Indirect,
}

impl NetworkPreset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "roce200" => Some(NetworkPreset::Roce200),
            "nvlink300" => Some(NetworkPreset::Nvlink300),
            "indirect" => Some(NetworkPreset::Indirect),
            _ => None,
        }
    }

    pub fn apply(self, params: &mut CostModelParams) {
        let (bw, fixed) = match self {
            NetworkPreset::Roce200 => (25_000_000_000, 0),
            NetworkPreset::Nvlink300 => (300_000_000_000, 0),
            NetworkPreset::Indirect => (25_000_000_000, INDIRECT_BOUNCE_US),
        };
        params.bandwidth_bytes_per_sec = bw;
        params.transfer_fixed_us = fixed;
    }
}

impl CostModelParams {
    pub fn with_preset(preset: NetworkPreset) -> Self {
        let mut p = CostModelParams::default();
        preset.apply(&mut p);
        p
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("cost.t_chunk_us", self.t_chunk_us),
            ("cost.decode_a_us", self.decode_a_us),
            ("cost.decode_b_us", self.decode_b_us),
            ("cost.decode_c_us_per_token", self.decode_c_us_per_token),
            (
                "cost.swap_penalty_us_per_page",
                self.swap_penalty_us_per_page,
            ),
            ("cost.predictor_parallel_tax", self.predictor_parallel_tax),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::invalid(
                    key,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if !(self.t_prefill_overhead_us.is_finite() && self.t_prefill_overhead_us >= 0.0) {
            return Err(ConfigError::invalid(
                "cost.t_prefill_overhead_us",
                "must be finite and >= 0",
            ));
        }
        if self.chunk_size == 0 {
            return Err(ConfigError::invalid("cost.chunk_size", "must be >= 1"));
        }
        if self.page_size == 0 {
            return Err(ConfigError::invalid("cost.page_size", "must be >= 1"));
        }
        if self.mem_capacity_tokens == 0
            || !self
                .mem_capacity_tokens
                .is_multiple_of(self.page_size as u64)
        {
            return Err(ConfigError::invalid(
                "cost.mem_capacity_tokens",
                format!(
                    "must be a positive multiple of page_size ({})",
                    self.page_size
                ),
            ));
        }
        if self.bandwidth_bytes_per_sec == 0 {
            return Err(ConfigError::invalid(
                "cost.bandwidth_bytes_per_sec",
                "must be > 0",
            ));
        }
        if self.kv_bytes_per_token == 0 {
            return Err(ConfigError::invalid(
                "cost.kv_bytes_per_token",
                "must be > 0",
            ));
        }
        Ok(())
    }
}

/// Work fed into a prefill forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrefillWork {
    pub tokens: u64,
    pub requests: u64,
}

/// Validated cost model. Every method is a pure function of the params.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    params: CostModelParams,
}

fn us(x: f64) -> SimTime {
    SimTime(x.round() as u64)
}

impl CostModel {
    pub fn new(params: CostModelParams) -> Result<Self, ConfigError> {
        params.validate()?;
        Ok(CostModel { params })
    }

    pub fn params(&self) -> &CostModelParams {
        &self.params
    }

    pub fn chunk_size(&self) -> u32 {
        self.params.chunk_size
    }

    pub fn page_size(&self) -> u32 {
        self.params.page_size
    }

    pub fn capacity_pages(&self) -> u64 {
        self.params.mem_capacity_tokens / self.params.page_size as u64
    }

    fn prefill_us(&self, total_tokens: u64, n_requests: u64, predictor_on: bool) -> f64 {
        let p = &self.params;
        let chunks = (total_tokens as f64 / p.chunk_size as f64).max(1.0);
        let base = p.t_chunk_us * chunks + n_requests as f64 * p.t_prefill_overhead_us;
        if predictor_on {
            base * p.predictor_parallel_tax
        } else {
            base
        }
    }

    /// Latency of one prefill pass over `total_tokens` belonging to
    /// `n_requests` requests. `predictor_on` applies the parallel-mode tax.
    pub fn prefill_latency(
        &self,
        total_tokens: u64,
        n_requests: u64,
        predictor_on: bool,
    ) -> SimTime {
        debug_assert!(total_tokens >= 1);
        us(self.prefill_us(total_tokens, n_requests, predictor_on))
    }

    /// Added once per scheduling round when the predictor runs before the
    /// main model.
    pub fn sequential_predictor_latency(&self) -> SimTime {
        us(self.params.t_chunk_us / SEQUENTIAL_PREDICTOR_SPEEDUP)
    }

    pub fn decode_iter_latency(&self, batch_size: u64, kv_tokens: u64) -> SimTime {
        debug_assert!(batch_size >= 1);
        let p = &self.params;
        us(p.decode_a_us
            + p.decode_b_us * batch_size as f64
            + p.decode_c_us_per_token * kv_tokens as f64)
    }

    /// One continuous-batching iteration mixing prefill and decode work.
    /// Degenerates to the pure functions when either side is empty.
    pub fn mixed_iter_latency(
        &self,
        prefill: PrefillWork,
        decode_batch: u64,
        kv_tokens: u64,
    ) -> SimTime {
        debug_assert!(prefill.tokens > 0 || decode_batch > 0);
        let mut t = SimTime::ZERO;
        if prefill.tokens > 0 {
            t += self.prefill_latency(prefill.tokens, prefill.requests, false);
        }
        if decode_batch > 0 {
            t += self.decode_iter_latency(decode_batch, kv_tokens);
        }
        t
    }

    pub fn kv_bytes(&self, tokens: u64) -> u64 {
        tokens * self.params.kv_bytes_per_token
    }

    /// Request-level KV transfer: fixed setup plus bytes over bandwidth,
    /// rounded up to whole microseconds.
    pub fn transfer_latency(&self, tokens: u64) -> SimTime {
        let bytes = self.kv_bytes(tokens) as u128;
        let bw = self.params.bandwidth_bytes_per_sec as u128;
        let wire = (bytes * 1_000_000).div_ceil(bw) as u64;
        SimTime(self.params.transfer_fixed_us + wire)
    }

    pub fn pages_needed(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.params.page_size as u64)
    }

    pub fn swap_latency(&self, pages: u64) -> SimTime {
        us(pages as f64 * self.params.swap_penalty_us_per_page)
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::new(CostModelParams::default()).expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> CostModel {
        CostModel::default()
    }

    fn zero_c() -> CostModel {
        CostModel::new(CostModelParams {
            t_prefill_overhead_us: 1_000.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn prefill_saturation_point() {
        let m = zero_c();
        assert_eq!(m.prefill_latency(512, 1, false), SimTime(51_000));
        assert_eq!(m.prefill_latency(100, 1, false), SimTime(51_000));
        assert_eq!(m.prefill_latency(1024, 1, false), SimTime(101_000));
        assert_eq!(m.prefill_latency(768, 2, false), SimTime(77_000));
    }

    #[test]
    fn predictor_tax_is_ten_percent() {
        let m = zero_c();
        let off = m.prefill_latency(512, 1, false);
        let on = m.prefill_latency(512, 1, true);
        assert_eq!(on.0 * 10, off.0 * 11);
        assert_eq!(m.sequential_predictor_latency(), SimTime(5_000));
    }

    #[test]
    fn decode_formula() {
        let m = model();
        assert_eq!(m.decode_iter_latency(1, 0), SimTime(2_150));
        // a + 2b + 300c
        assert_eq!(m.decode_iter_latency(2, 300), SimTime(2_354));
        let base = m.decode_iter_latency(8, 10_000).0;
        let doubled = m.decode_iter_latency(8, 20_000).0;
        assert_eq!(doubled - base, 1_800);
    }

    #[test]
    fn heavy_half_batch_calibration() {
        let m = model();
        let light = m.decode_iter_latency(128, 128 * 64).0 as f64;
        let half = m.decode_iter_latency(128, 64 * 512 + 64 * 64).0 as f64;
        let increase = half / light - 1.0;
        assert!(
            increase >= 0.15 && (increase - 0.23).abs() <= 0.10,
            "{increase}"
        );
        // Throughput at fixed batch is inversely proportional to latency.
        assert!(half / light >= 1.10);
    }

    #[test]
    fn mixed_degenerates() {
        let m = model();
        assert_eq!(
            m.mixed_iter_latency(PrefillWork::default(), 8, 800),
            m.decode_iter_latency(8, 800)
        );
        assert_eq!(
            m.mixed_iter_latency(
                PrefillWork {
                    tokens: 700,
                    requests: 3
                },
                0,
                0
            ),
            m.prefill_latency(700, 3, false)
        );
    }

    #[test]
    fn one_heavy_prefill_inflates_light_decode() {
        let m = model();
        let decode_only = m.decode_iter_latency(8, 8 * 60).0;
        let mixed = m
            .mixed_iter_latency(
                PrefillWork {
                    tokens: 512,
                    requests: 1,
                },
                8,
                8 * 60,
            )
            .0;
        assert!(mixed as f64 >= 3.0 * decode_only as f64);
    }

    #[test]
    fn opt13b_kv_geometry() {
        assert_eq!(ModelShape::OPT_13B.kv_bytes_per_token(), 819_200);
        assert_eq!(model().kv_bytes(512), 419_430_400);
    }

    #[test]
    fn transfer_presets() {
        let roce = CostModel::new(CostModelParams::with_preset(NetworkPreset::Roce200)).unwrap();
        let nv = CostModel::new(CostModelParams::with_preset(NetworkPreset::Nvlink300)).unwrap();
        let ind = CostModel::new(CostModelParams::with_preset(NetworkPreset::Indirect)).unwrap();
        // 419,430,400 B / 25e9 B/s = 16,777.216 us; / 300e9 = 1,398.1 us.
        assert_eq!(roce.transfer_latency(512), SimTime(16_778));
        assert_eq!(nv.transfer_latency(512), SimTime(1_399));
        assert_eq!(
            ind.transfer_latency(512),
            SimTime(16_778 + INDIRECT_BOUNCE_US)
        );
    }

    #[test]
    fn pages() {
        let m = model();
        assert_eq!(m.pages_needed(0), 0);
        assert_eq!(m.pages_needed(16), 1);
        assert_eq!(m.pages_needed(17), 2);
        assert_eq!(m.capacity_pages(), 10_000);
    }

    #[test]
    fn validation_names_keys() {
        let bad = CostModelParams {
            bandwidth_bytes_per_sec: 0,
            ..Default::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("bandwidth"));
        let bad = CostModelParams {
            mem_capacity_tokens: 1000,
            page_size: 16,
            ..Default::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("mem_capacity_tokens"));
        let bad = CostModelParams {
            decode_b_us: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decode_throughput_has_diminishing_returns() {
        let m = model();
        let p = m.params();
        let tput = |b: u64| b as f64 / m.decode_iter_latency(b, 0).0 as f64;
        let mut prev_gain = f64::INFINITY;
        for b in 1..256 {
            let gain = tput(b + 1) - tput(b);
            assert!(gain > 0.0);
            assert!(gain <= prev_gain + 1e-12);
            prev_gain = gain;
        }
        assert!(tput(100_000) < 1.0 / p.decode_b_us);
    }

    proptest! {
        #[test]
        fn prefill_throughput_plateaus(tokens in 512u64..100_000) {
            let m = CostModel::new(CostModelParams { t_prefill_overhead_us: 0.0, ..Default::default() }).unwrap();
            let tput = tokens as f64 / m.prefill_latency(tokens, 1, false).0 as f64;
            let peak = 512.0 / m.params().t_chunk_us;
            prop_assert!((tput - peak).abs() / peak < 1e-4);
        }

        #[test]
        fn latencies_are_monotone(t in 1u64..50_000, n in 0u64..64, b in 1u64..512, kv in 0u64..200_000) {
            let m = model();
            prop_assert!(m.prefill_latency(t + 1, n, false) >= m.prefill_latency(t, n, false));
            prop_assert!(m.prefill_latency(t, n + 1, false) >= m.prefill_latency(t, n, false));
            prop_assert!(m.decode_iter_latency(b + 1, kv) > m.decode_iter_latency(b, kv));
            prop_assert!(m.decode_iter_latency(b, kv + 10) > m.decode_iter_latency(b, kv));
            prop_assert!(m.transfer_latency(t + 1) >= m.transfer_latency(t));
        }

        #[test]
        fn transfer_is_subadditive(x in 1u64..20_000, y in 1u64..20_000, fixed in 0u64..5_000) {
            let m = CostModel::new(CostModelParams { transfer_fixed_us: fixed, ..Default::default() }).unwrap();
            let wire = |t: u64| m.transfer_latency(t).0 - fixed;
            let (lhs, rhs) = (wire(x) + wire(y), wire(x + y));
            // Equal up to the two ceilings.
            prop_assert!(lhs >= rhs);
            prop_assert!(lhs - rhs <= 1);
        }
    }
}
