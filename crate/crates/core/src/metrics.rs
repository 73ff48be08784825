//! Per-request CSV rows, run summaries and run-to-run comparison.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cluster::{EpochStats, InstanceReport, RunOutput, SystemKind};
use crate::control::{FlipRecord, RequestRow, Role};
use crate::engine::SimTime;
use crate::error::Error;

/// First line of every `requests.csv`.
pub const CSV_VERSION_LINE: &str = "# requests.csv v1";

/// One line of `requests.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvRow {
    pub id: u32,
    pub arrival_us: u64,
    pub prompt_len: u32,
    pub decode_len: u32,
    pub prefill_wait_us: u64,
    pub ttft_us: u64,
    pub jct_us: u64,
    pub prefill_instance: Option<u32>,
    pub decode_instance: Option<u32>,
    pub predicted_bucket: Option<u32>,
    pub swaps: u32,
    pub rerouted: bool,
}

impl CsvRow {
    pub fn from_row(row: &RequestRow) -> Self {
        CsvRow {
            id: row.id.0,
            arrival_us: row.arrival.0,
            prompt_len: row.prompt_len,
            decode_len: row.decode_len,
            prefill_wait_us: row.prefill_wait().unwrap_or_default().0,
            ttft_us: row.ttft().unwrap_or_default().0,
            jct_us: row.jct().unwrap_or_default().0,
            prefill_instance: row.prefill_instance.map(|i| i.0),
            decode_instance: row.decode_instance.map(|i| i.0),
            predicted_bucket: row.predicted_bucket,
            swaps: row.swaps,
            rerouted: row.rerouted,
        }
    }
}

pub fn write_requests_csv<W: Write>(mut out: W, rows: &[CsvRow]) -> Result<(), Error> {
    writeln!(out, "{CSV_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_requests_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, Error> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Mean, median and 99th percentile (nearest rank) in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub median_us: u64,
    pub p99_us: u64,
}

impl LatencyStats {
    pub fn from_values(values: &[u64]) -> Self {
        if values.is_empty() {
            return LatencyStats::default();
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        LatencyStats {
            mean_us: sum as f64 / v.len() as f64,
            median_us: nearest_rank(&v, 0.50),
            p99_us: nearest_rank(&v, 0.99),
        }
    }
}

/// `sorted` must be non-empty and ascending.
fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Latency figures that depend only on the per-request rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestStats {
    pub requests: usize,
    pub ttft: LatencyStats,
    pub jct: LatencyStats,
    pub prefill_wait: LatencyStats,
    /// First arrival to last completion.
    pub makespan_us: u64,
    pub swapped_requests: usize,
    pub rerouted: usize,
}

impl RequestStats {
    pub fn from_rows(rows: &[CsvRow]) -> Self {
        let pick = |f: fn(&CsvRow) -> u64| rows.iter().map(f).collect::<Vec<_>>();
        let first = rows.iter().map(|r| r.arrival_us).min().unwrap_or(0);
        let last = rows
            .iter()
            .map(|r| r.arrival_us + r.jct_us)
            .max()
            .unwrap_or(0);
        RequestStats {
            requests: rows.len(),
            ttft: LatencyStats::from_values(&pick(|r| r.ttft_us)),
            jct: LatencyStats::from_values(&pick(|r| r.jct_us)),
            prefill_wait: LatencyStats::from_values(&pick(|r| r.prefill_wait_us)),
            makespan_us: last - first,
            swapped_requests: rows.iter().filter(|r| r.swaps > 0).count(),
            rerouted: rows.iter().filter(|r| r.rerouted).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub system: SystemKind,
    pub seed: u64,
    /// Workload fingerprint; only runs with equal fingerprints compare.
    pub fingerprint: String,
    #[serde(flatten)]
    pub requests: RequestStats,
    /// Sum over instance role epochs of last work end minus first work start.
    pub resource_usage_us: u64,
    /// Completed requests per second of resource usage.
    pub perf_per_dollar: f64,
    /// First decode work start to last decode work end over all instances.
    pub decode_makespan_us: u64,
    pub swap_out_events: u64,
    pub swap_out_pages: u64,
    pub swap_in_pages: u64,
    pub flips: usize,
    pub flip_latencies_us: Vec<u64>,
    pub dispatch_fallbacks: u64,
    pub events_fired: u64,
    pub instances: Vec<InstanceReport>,
    pub flip_log: Vec<FlipRecord>,
}

/// Total resource usage of a set of instances.
pub fn resource_usage(instances: &[InstanceReport]) -> SimTime {
    instances
        .iter()
        .flat_map(|i| &i.epochs)
        .fold(SimTime::ZERO, |acc, e| acc + e.usage())
}

fn decode_makespan(instances: &[InstanceReport]) -> SimTime {
    let decode_epochs = instances
        .iter()
        .flat_map(|i| &i.epochs)
        .filter(|e| e.role != Role::Prefill);
    let start = decode_epochs.clone().filter_map(|e| e.first_work).min();
    let end = decode_epochs.filter_map(|e| e.last_work).max();
    match (start, end) {
        (Some(s), Some(e)) => e - s,
        _ => SimTime::ZERO,
    }
}

impl RunSummary {
    pub fn from_output(out: &RunOutput, seed: u64, fingerprint: String) -> Self {
        let rows = csv_rows(out);
        let resource = resource_usage(&out.instances);
        let mut swap = (0, 0, 0);
        for e in out.instances.iter().flat_map(|i| &i.epochs) {
            if let Some(EpochStats::Decode(s)) = &e.stats {
                swap.0 += s.swap_out_events;
                swap.1 += s.swap_out_pages;
                swap.2 += s.swap_in_pages;
            }
        }
        let requests = RequestStats::from_rows(&rows);
        let perf_per_dollar = if resource.0 == 0 {
            0.0
        } else {
            requests.requests as f64 / resource.as_secs_f64()
        };
        RunSummary {
            system: out.system,
            seed,
            fingerprint,
            requests,
            resource_usage_us: resource.0,
            perf_per_dollar,
            decode_makespan_us: decode_makespan(&out.instances).0,
            swap_out_events: swap.0,
            swap_out_pages: swap.1,
            swap_in_pages: swap.2,
            flips: out.flips.len(),
            flip_latencies_us: out.flips.iter().map(|f| f.switch_us).collect(),
            dispatch_fallbacks: out.counters.dispatch_fallbacks,
            events_fired: out.events_fired,
            instances: out.instances.clone(),
            flip_log: out.flips.clone(),
        }
    }

    pub fn mean_ttft_us(&self) -> f64 {
        self.requests.ttft.mean_us
    }

    pub fn mean_jct_us(&self) -> f64 {
        self.requests.jct.mean_us
    }
}

/// Rows in request-id order.
pub fn csv_rows(out: &RunOutput) -> Vec<CsvRow> {
    out.rows.iter().map(CsvRow::from_row).collect()
}

/// `a` measured against baseline `b`; every ratio is a / b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ttft_mean: f64,
    pub ttft_p99: f64,
    pub jct_mean: f64,
    pub jct_p99: f64,
    pub resource_usage: f64,
    pub perf_per_dollar: f64,
}

impl Comparison {
    /// Fractional reduction of mean TTFT relative to the baseline.
    pub fn ttft_improvement(&self) -> f64 {
        1.0 - self.ttft_mean
    }

    pub fn jct_improvement(&self) -> f64 {
        1.0 - self.jct_mean
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> Result<Comparison, Error> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Mismatch(format!(
            "workload fingerprints differ ({} vs {})",
            a.fingerprint, b.fingerprint
        )));
    }
    let (ra, rb) = (&a.requests, &b.requests);
    Ok(Comparison {
        ttft_mean: ratio(ra.ttft.mean_us, rb.ttft.mean_us),
        ttft_p99: ratio(ra.ttft.p99_us as f64, rb.ttft.p99_us as f64),
        jct_mean: ratio(ra.jct.mean_us, rb.jct.mean_us),
        jct_p99: ratio(ra.jct.p99_us as f64, rb.jct.p99_us as f64),
        resource_usage: ratio(a.resource_usage_us as f64, b.resource_usage_us as f64),
        perf_per_dollar: ratio(a.perf_per_dollar, b.perf_per_dollar),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Epoch;
    use crate::control::InstanceId;

    fn epoch(role: Role, start_s: u64, end_s: u64) -> Epoch {
        Epoch {
            role,
            start: SimTime::ZERO,
            end: None,
            first_work: Some(SimTime::from_secs(start_s)),
            last_work: Some(SimTime::from_secs(end_s)),
            busy_us: SimTime::from_secs(end_s - start_s).0,
            stats: None,
        }
    }

    #[test]
    fn resource_usage_adds_prefill_and_decode_time() {
        let instances = vec![
            InstanceReport {
                id: InstanceId(0),
                epochs: vec![epoch(Role::Prefill, 0, 1)],
            },
            InstanceReport {
                id: InstanceId(1),
                epochs: vec![epoch(Role::Decode, 1, 3)],
            },
        ];
        assert_eq!(resource_usage(&instances), SimTime::from_secs(3));
        assert_eq!(decode_makespan(&instances), SimTime::from_secs(2));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let s = LatencyStats::from_values(&[5, 1, 4, 2, 3]);
        assert_eq!(s.mean_us, 3.0);
        assert_eq!(s.median_us, 3);
        assert_eq!(s.p99_us, 5);
        let v: Vec<u64> = (1..=200).collect();
        let s = LatencyStats::from_values(&v);
        assert_eq!(s.median_us, 100);
        assert_eq!(s.p99_us, 198);
        assert_eq!(LatencyStats::from_values(&[]), LatencyStats::default());
    }

    fn row(id: u32, ttft: u64, jct: u64) -> CsvRow {
        CsvRow {
            id,
            arrival_us: id as u64 * 10,
            prompt_len: 100,
            decode_len: 20,
            prefill_wait_us: 0,
            ttft_us: ttft,
            jct_us: jct,
            prefill_instance: Some(0),
            decode_instance: None,
            predicted_bucket: None,
            swaps: 0,
            rerouted: false,
        }
    }

    #[test]
    fn csv_round_trip_keeps_rows() {
        let rows = vec![row(0, 5, 9), row(1, 7, 70)];
        let mut buf = Vec::new();
        write_requests_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(CSV_VERSION_LINE));
        assert_eq!(read_requests_csv(buf.as_slice()).unwrap(), rows);
    }

    fn summary(ttft: u64, jct: u64) -> RunSummary {
        let rows = vec![row(0, ttft, jct)];
        RunSummary {
            system: SystemKind::Disaggregated,
            seed: 0,
            fingerprint: "x".into(),
            requests: RequestStats::from_rows(&rows),
            resource_usage_us: 1_000_000,
            perf_per_dollar: 1.0,
            decode_makespan_us: 0,
            swap_out_events: 0,
            swap_out_pages: 0,
            swap_in_pages: 0,
            flips: 0,
            flip_latencies_us: vec![],
            dispatch_fallbacks: 0,
            events_fired: 0,
            instances: vec![],
            flip_log: vec![],
        }
    }

    #[test]
    fn comparison_ratios() {
        let a = summary(10, 100);
        let c = compare(&a, &a).unwrap();
        assert_eq!(c.ttft_mean, 1.0);
        assert_eq!(c.jct_mean, 1.0);
        assert_eq!(c.perf_per_dollar, 1.0);
        let half = summary(10, 50);
        let c = compare(&half, &a).unwrap();
        assert_eq!(c.jct_improvement(), 0.5);
        let mut other = summary(10, 100);
        other.fingerprint = "y".into();
        assert!(matches!(compare(&a, &other), Err(Error::Mismatch(_))));
    }
}
