//! Request streams: synthetic ShareGPT-like classes and CSV traces.

use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::error::{ConfigError, TraceError};

/// Prompts longer than this are heavy prefills.
pub const HEAVY_PREFILL_THRESHOLD: u32 = 512;
/// Generations longer than this are heavy decodes.
pub const HEAVY_DECODE_THRESHOLD: u32 = 128;

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RequestId(pub u32);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Lifecycle of a request. Variants are ordered; transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Queued,
    Prefilling,
    Transferring,
    Decoding,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival: SimTime,
    pub prompt_len: u32,
    /// Hidden from schedulers; only the simulator uses it to end decoding.
    pub true_decode_len: u32,
    pub sla: Option<SimTime>,
    phase: Phase,
}

impl Request {
    pub fn new(id: RequestId, arrival: SimTime, prompt_len: u32, true_decode_len: u32) -> Self {
        assert!(
            prompt_len >= 1 && true_decode_len >= 1,
            "token counts must be >= 1"
        );
        Request {
            id,
            arrival,
            prompt_len,
            true_decode_len,
            sla: None,
            phase: Phase::Queued,
        }
    }

    pub fn with_sla(mut self, sla: SimTime) -> Self {
        self.sla = Some(sla);
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Move to `to`. Staying in the same phase is allowed (re-sent transfers,
    /// swapped decodes); going backwards is not.
    pub fn advance(&mut self, to: Phase) -> Result<(), Phase> {
        if to < self.phase {
            return Err(self.phase);
        }
        self.phase = to;
        Ok(())
    }

    pub fn is_heavy_prefill(&self) -> bool {
        self.prompt_len > HEAVY_PREFILL_THRESHOLD
    }

    pub fn is_heavy_decode(&self) -> bool {
        self.true_decode_len > HEAVY_DECODE_THRESHOLD
    }

    pub fn class(&self) -> WorkloadClass {
        match (self.is_heavy_prefill(), self.is_heavy_decode()) {
            (false, false) => WorkloadClass::Lpld,
            (false, true) => WorkloadClass::Lphd,
            (true, false) => WorkloadClass::Hpld,
            (true, true) => WorkloadClass::Hphd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WorkloadClass {
    Lpld,
    Lphd,
    Hpld,
    Hphd,
    Mixed,
    Trace,
}

impl WorkloadClass {
    pub const PURE: [WorkloadClass; 4] = [
        WorkloadClass::Lpld,
        WorkloadClass::Lphd,
        WorkloadClass::Hpld,
        WorkloadClass::Hphd,
    ];

    fn heavy_prefill(self) -> bool {
        matches!(self, WorkloadClass::Hpld | WorkloadClass::Hphd)
    }

    fn heavy_decode(self) -> bool {
        matches!(self, WorkloadClass::Lphd | WorkloadClass::Hphd)
    }
}

impl fmt::Display for WorkloadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            WorkloadClass::Lpld => "LPLD",
            WorkloadClass::Lphd => "LPHD",
            WorkloadClass::Hpld => "HPLD",
            WorkloadClass::Hphd => "HPHD",
            WorkloadClass::Mixed => "MIXED",
            WorkloadClass::Trace => "TRACE",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for WorkloadClass {
    type Err = ConfigError;

    /// Case-insensitive class name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LPLD" => Ok(WorkloadClass::Lpld),
            "LPHD" => Ok(WorkloadClass::Lphd),
            "HPLD" => Ok(WorkloadClass::Hpld),
            "HPHD" => Ok(WorkloadClass::Hphd),
            "MIXED" => Ok(WorkloadClass::Mixed),
            "TRACE" => Ok(WorkloadClass::Trace),
            _ => Err(ConfigError::invalid(
                "workload.class",
                format!("unknown class `{s}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Every request arrives at the phase start.
    #[default]
    ClosedLoop,
    Poisson {
        rate_per_sec: f64,
    },
}

/// Log-normal token-length distribution parameterized by its median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub median: f64,
    pub sigma: f64,
}

impl LengthDist {
    pub const fn new(median: f64, sigma: f64) -> Self {
        LengthDist { median, sigma }
    }

    fn validate(&self, key: &str) -> Result<(), ConfigError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(ConfigError::invalid(
                format!("{key}.sigma"),
                format!("must be finite and >= 0, got {}", self.sigma),
            ));
        }
        if !(self.median.is_finite() && self.median > 0.0) {
            return Err(ConfigError::invalid(
                format!("{key}.median"),
                format!("must be finite and > 0, got {}", self.median),
            ));
        }
        Ok(())
    }

    /// Draw an integer length in `(lo, hi]` by rejection, clamping after a
    /// bounded number of attempts.
    fn sample_in<R: Rng + ?Sized>(&self, rng: &mut R, lo: u32, hi: u32) -> u32 {
        const MAX_ATTEMPTS: usize = 10_000;
        let dist = LogNormal::new(self.median.ln(), self.sigma).expect("validated");
        for _ in 0..MAX_ATTEMPTS {
            let x = dist.sample(rng).round();
            if x > lo as f64 && x <= hi as f64 {
                return x as u32;
            }
        }
        (self.median.round() as u32).clamp(lo + 1, hi)
    }
}

/// Per-class length distributions. Defaults approximate ShareGPT: short
/// prompts centred on 18 tokens and generations centred on the 128-token
/// median split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthParams {
    pub light_prompt: LengthDist,
    pub heavy_prompt: LengthDist,
    pub light_decode: LengthDist,
    pub heavy_decode: LengthDist,
    pub max_prompt_len: u32,
    pub max_decode_len: u32,
}

impl Default for LengthParams {
    fn default() -> Self {
        LengthParams {
            light_prompt: LengthDist::new(18.0, 1.0),
            heavy_prompt: LengthDist::new(800.0, 0.45),
            light_decode: LengthDist::new(40.0, 0.8),
            heavy_decode: LengthDist::new(320.0, 0.6),
            max_prompt_len: 2048,
            max_decode_len: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub class: WorkloadClass,
    pub n_requests: usize,
    pub arrival: ArrivalProcess,
    pub lengths: LengthParams,
    /// Weights over LPLD, LPHD, HPLD, HPHD for the Mixed class.
    pub mixture: [f64; 4],
    /// Offset applied to every arrival in this phase.
    pub start_us: u64,
    pub trace: Option<String>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            class: WorkloadClass::Mixed,
            n_requests: 128,
            arrival: ArrivalProcess::ClosedLoop,
            lengths: LengthParams::default(),
            mixture: [0.25; 4],
            start_us: 0,
            trace: None,
        }
    }
}

impl WorkloadSpec {
    pub fn new(class: WorkloadClass, n_requests: usize) -> Self {
        WorkloadSpec {
            class,
            n_requests,
            ..Default::default()
        }
    }

    pub fn validate(&self, key: &str) -> Result<(), ConfigError> {
        if self.class == WorkloadClass::Trace {
            if self.trace.is_none() {
                return Err(ConfigError::invalid(
                    format!("{key}.trace"),
                    "TRACE class requires a trace path",
                ));
            }
            return Ok(());
        }
        if self.n_requests == 0 {
            return Err(ConfigError::invalid(
                format!("{key}.n_requests"),
                "must be >= 1",
            ));
        }
        let l = &self.lengths;
        l.light_prompt
            .validate(&format!("{key}.lengths.light_prompt"))?;
        l.heavy_prompt
            .validate(&format!("{key}.lengths.heavy_prompt"))?;
        l.light_decode
            .validate(&format!("{key}.lengths.light_decode"))?;
        l.heavy_decode
            .validate(&format!("{key}.lengths.heavy_decode"))?;
        if l.max_prompt_len <= HEAVY_PREFILL_THRESHOLD {
            return Err(ConfigError::invalid(
                format!("{key}.lengths.max_prompt_len"),
                format!("must exceed {HEAVY_PREFILL_THRESHOLD}"),
            ));
        }
        if l.max_decode_len <= HEAVY_DECODE_THRESHOLD {
            return Err(ConfigError::invalid(
                format!("{key}.lengths.max_decode_len"),
                format!("must exceed {HEAVY_DECODE_THRESHOLD}"),
            ));
        }
        if let ArrivalProcess::Poisson { rate_per_sec } = self.arrival {
            if !(rate_per_sec.is_finite() && rate_per_sec > 0.0) {
                return Err(ConfigError::invalid(
                    format!("{key}.arrival.rate_per_sec"),
                    "must be finite and > 0",
                ));
            }
        }
        if self.mixture.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.mixture.iter().sum::<f64>() <= 0.0
        {
            return Err(ConfigError::invalid(
                format!("{key}.mixture"),
                "weights must be finite, non-negative and not all zero",
            ));
        }
        Ok(())
    }

    fn sample_class<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mix: Option<&WeightedIndex<f64>>,
    ) -> WorkloadClass {
        match (self.class, mix) {
            (WorkloadClass::Mixed, Some(mix)) => WorkloadClass::PURE[mix.sample(rng)],
            (class, _) => class,
        }
    }
}

/// Generate `spec.n_requests` requests sorted by arrival time. Ids are
/// assigned in arrival order starting at `first_id`.
pub fn generate<R: Rng + ?Sized>(
    spec: &WorkloadSpec,
    first_id: u32,
    rng: &mut R,
) -> Result<Vec<Request>, ConfigError> {
    spec.validate("workload")?;
    if spec.class == WorkloadClass::Trace {
        return Err(ConfigError::invalid(
            "workload.class",
            "TRACE workloads are loaded with load_trace",
        ));
    }
    let mix = match spec.class {
        WorkloadClass::Mixed => Some(
            WeightedIndex::new(spec.mixture)
                .map_err(|e| ConfigError::invalid("workload.mixture", e.to_string()))?,
        ),
        _ => None,
    };
    let interarrival = match spec.arrival {
        ArrivalProcess::ClosedLoop => None,
        ArrivalProcess::Poisson { rate_per_sec } => {
            Some(Exp::new(rate_per_sec).expect("validated rate"))
        }
    };
    let l = &spec.lengths;
    let mut clock = spec.start_us as f64;
    let mut out = Vec::with_capacity(spec.n_requests);
    for i in 0..spec.n_requests {
        let class = spec.sample_class(rng, mix.as_ref());
        let prompt = if class.heavy_prefill() {
            l.heavy_prompt
                .sample_in(rng, HEAVY_PREFILL_THRESHOLD, l.max_prompt_len)
        } else {
            l.light_prompt.sample_in(rng, 0, HEAVY_PREFILL_THRESHOLD)
        };
        let decode = if class.heavy_decode() {
            l.heavy_decode
                .sample_in(rng, HEAVY_DECODE_THRESHOLD, l.max_decode_len)
        } else {
            l.light_decode.sample_in(rng, 0, HEAVY_DECODE_THRESHOLD)
        };
        if let Some(exp) = &interarrival {
            clock += exp.sample(rng) * 1e6;
        }
        let arrival = SimTime(clock.round() as u64);
        out.push(Request::new(
            RequestId(first_id + i as u32),
            arrival,
            prompt,
            decode,
        ));
    }
    Ok(out)
}

/// Generate every phase and concatenate them, re-sorted by arrival with ids
/// reassigned densely in arrival order.
pub fn generate_phases<R: Rng + ?Sized>(
    phases: &[WorkloadSpec],
    rng: &mut R,
) -> Result<Vec<Request>, crate::error::Error> {
    let mut all = Vec::new();
    for (i, spec) in phases.iter().enumerate() {
        spec.validate(&format!("workload.phases[{i}]"))?;
        let mut reqs = match (&spec.class, &spec.trace) {
            (WorkloadClass::Trace, Some(path)) => load_trace(path)?,
            _ => generate(spec, 0, rng)?,
        };
        if spec.class == WorkloadClass::Trace {
            for r in &mut reqs {
                r.arrival += SimTime(spec.start_us);
            }
        }
        all.extend(reqs);
    }
    all.sort_by_key(|r| r.arrival);
    for (i, r) in all.iter_mut().enumerate() {
        r.id = RequestId(i as u32);
    }
    Ok(all)
}

const TRACE_COLUMNS: [&str; 4] = ["arrival_us", "prompt_len", "decode_len", "sla_us"];

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, TraceError> {
    parse_trace(File::open(path)?)
}

/// Parse `arrival_us,prompt_len,decode_len[,sla_us]` rows. Ids follow file
/// order; the result is stably sorted by arrival.
pub fn parse_trace<R: Read>(input: R) -> Result<Vec<Request>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| TraceError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_sla = match cols.len() {
        3 if cols[..] == TRACE_COLUMNS[..3] => false,
        4 if cols[..] == TRACE_COLUMNS[..] => true,
        _ => return Err(TraceError::Header(cols.join(","))),
    };
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(idx as u64 + 2);
            TraceError::Malformed {
                line,
                reason: e.to_string(),
            }
        })?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(idx as u64 + 2);
        let want = if has_sla { 4 } else { 3 };
        if record.len() != want {
            return Err(TraceError::Malformed {
                line,
                reason: format!("expected {want} fields, found {}", record.len()),
            });
        }
        let field = |i: usize| -> Result<u64, TraceError> {
            record[i].parse::<u64>().map_err(|e| TraceError::Malformed {
                line,
                reason: format!("{}: {e}", TRACE_COLUMNS[i]),
            })
        };
        let arrival = field(0)?;
        let prompt = field(1)?;
        let decode = field(2)?;
        for (name, v) in [("prompt_len", prompt), ("decode_len", decode)] {
            if v == 0 || v > u32::MAX as u64 {
                return Err(TraceError::Malformed {
                    line,
                    reason: format!("{name} must be between 1 and {}", u32::MAX),
                });
            }
        }
        let mut req = Request::new(
            RequestId(idx as u32),
            SimTime(arrival),
            prompt as u32,
            decode as u32,
        );
        if has_sla && !record[3].is_empty() {
            req.sla = Some(SimTime(field(3)?));
        }
        out.push(req);
    }
    out.sort_by_key(|r| r.arrival);
    Ok(out)
}

/// Write requests in trace format. The `sla_us` column is emitted only when
/// at least one request carries an SLA.
pub fn export_trace<W: Write>(out: W, requests: &[Request]) -> io::Result<()> {
    let has_sla = requests.iter().any(|r| r.sla.is_some());
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let ncols = if has_sla { 4 } else { 3 };
    w.write_record(&TRACE_COLUMNS[..ncols])?;
    for r in requests {
        let mut row = vec![
            r.arrival.0.to_string(),
            r.prompt_len.to_string(),
            r.true_decode_len.to_string(),
        ];
        if has_sla {
            row.push(r.sla.map(|s| s.0.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()
}

/// Stable fingerprint of a request list; two runs are comparable only when
/// their fingerprints match.
pub fn fingerprint(requests: &[Request]) -> String {
    // FNV-1a over (arrival, prompt, decode).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for r in requests {
        eat(r.arrival.0);
        eat(r.prompt_len as u64);
        eat(r.true_decode_len as u64);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{RngStreams, StreamId};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        RngStreams::new(seed).stream(StreamId::Workload)
    }

    #[test]
    fn single_lpld_request_respects_class() {
        let reqs = generate(&WorkloadSpec::new(WorkloadClass::Lpld, 1), 0, &mut rng(1)).unwrap();
        assert_eq!(reqs.len(), 1);
        assert!(reqs[0].prompt_len <= 512 && reqs[0].true_decode_len <= 128);
        assert_eq!(reqs[0].arrival, SimTime::ZERO);
    }

    #[test]
    fn every_class_respects_thresholds() {
        for class in WorkloadClass::PURE {
            let reqs = generate(&WorkloadSpec::new(class, 2000), 0, &mut rng(3)).unwrap();
            assert!(reqs.iter().all(|r| r.class() == class), "{class}");
            assert!(reqs
                .iter()
                .all(|r| r.prompt_len >= 1 && r.true_decode_len >= 1));
        }
    }

    #[test]
    fn light_prompt_median_is_about_18() {
        let mut reqs = generate(
            &WorkloadSpec::new(WorkloadClass::Lpld, 10_000),
            0,
            &mut rng(5),
        )
        .unwrap();
        reqs.sort_by_key(|r| r.prompt_len);
        let median = reqs[reqs.len() / 2].prompt_len as f64;
        assert!((median - 18.0).abs() <= 18.0 * 0.2, "median {median}");
    }

    #[test]
    fn mixed_heavy_decode_fraction_matches_weights() {
        let n = 10_000;
        let reqs = generate(&WorkloadSpec::new(WorkloadClass::Mixed, n), 0, &mut rng(9)).unwrap();
        let heavy = reqs.iter().filter(|r| r.is_heavy_decode()).count() as f64 / n as f64;
        // LPHD + HPHD weights = 0.5; binomial sd = 0.005.
        assert!((heavy - 0.5).abs() <= 0.02, "fraction {heavy}");
    }

    #[test]
    fn mixed_prompts_span_two_orders_of_magnitude() {
        let reqs = generate(
            &WorkloadSpec::new(WorkloadClass::Mixed, 1000),
            0,
            &mut rng(2),
        )
        .unwrap();
        let min = reqs.iter().map(|r| r.prompt_len).min().unwrap() as f64;
        let max = reqs.iter().map(|r| r.prompt_len).max().unwrap() as f64;
        assert!(max / min >= 100.0, "{min}..{max}");
    }

    #[test]
    fn poisson_arrivals_are_sorted_and_offset() {
        let spec = WorkloadSpec {
            arrival: ArrivalProcess::Poisson { rate_per_sec: 10.0 },
            start_us: 5_000_000,
            ..WorkloadSpec::new(WorkloadClass::Lpld, 500)
        };
        let reqs = generate(&spec, 0, &mut rng(4)).unwrap();
        assert!(reqs.windows(2).all(|w| w[0].arrival <= w[1].arrival));
        assert!(reqs[0].arrival >= SimTime(5_000_000));
        let span = (reqs[499].arrival - reqs[0].arrival).as_secs_f64();
        assert!((span - 50.0).abs() < 10.0, "span {span}");
    }

    #[test]
    fn same_seed_same_requests() {
        let spec = WorkloadSpec::new(WorkloadClass::Mixed, 256);
        assert_eq!(
            generate(&spec, 0, &mut rng(8)).unwrap(),
            generate(&spec, 0, &mut rng(8)).unwrap()
        );
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let mut spec = WorkloadSpec::new(WorkloadClass::Lpld, 1);
        spec.lengths.light_prompt.sigma = -0.1;
        let err = spec.validate("workload").unwrap_err();
        assert!(
            err.to_string()
                .contains("workload.lengths.light_prompt.sigma"),
            "{err}"
        );
    }

    #[test]
    fn phases_only_move_forward() {
        let mut r = Request::new(RequestId(0), SimTime::ZERO, 1, 1);
        r.advance(Phase::Prefilling).unwrap();
        r.advance(Phase::Prefilling).unwrap();
        r.advance(Phase::Decoding).unwrap();
        assert_eq!(r.advance(Phase::Transferring), Err(Phase::Decoding));
        r.advance(Phase::Done).unwrap();
    }

    #[test]
    fn trace_single_row() {
        let reqs = parse_trace("arrival_us,prompt_len,decode_len\n0,18,100\n".as_bytes()).unwrap();
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].class(), WorkloadClass::Lpld);
        assert_eq!((reqs[0].prompt_len, reqs[0].true_decode_len), (18, 100));
    }

    #[test]
    fn trace_is_sorted_stably() {
        let src = "arrival_us,prompt_len,decode_len\n30,1,1\n10,2,2\n30,3,3\n0,4,4\n";
        let reqs = parse_trace(src.as_bytes()).unwrap();
        let ids: Vec<u32> = reqs.iter().map(|r| r.id.0).collect();
        assert_eq!(ids, vec![3, 1, 0, 2]);
    }

    #[test]
    fn trace_errors_name_the_line() {
        let src = "arrival_us,prompt_len,decode_len\n0,18,100\n5,abc,3\n";
        let err = parse_trace(src.as_bytes()).unwrap_err();
        assert!(
            matches!(err, TraceError::Malformed { line: 3, .. }),
            "{err}"
        );

        let src = "arrival_us,prompt_len,decode_len\n0,18,100\n1,2,3\n7,0,3\n";
        let err = parse_trace(src.as_bytes()).unwrap_err();
        assert!(
            matches!(err, TraceError::Malformed { line: 4, .. }),
            "{err}"
        );

        let err = parse_trace("a,b,c\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::Header(_)));
    }

    #[test]
    fn trace_with_sla_column() {
        let src = "arrival_us,prompt_len,decode_len,sla_us\n0,10,10,5000\n1,10,10,\n";
        let reqs = parse_trace(src.as_bytes()).unwrap();
        assert_eq!(reqs[0].sla, Some(SimTime(5000)));
        assert_eq!(reqs[1].sla, None);
        let mut out = Vec::new();
        export_trace(&mut out, &reqs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), src);
    }

    #[test]
    fn trace_round_trip_128_rows() {
        let reqs = generate(
            &WorkloadSpec {
                arrival: ArrivalProcess::Poisson { rate_per_sec: 3.0 },
                ..WorkloadSpec::new(WorkloadClass::Mixed, 128)
            },
            0,
            &mut rng(12),
        )
        .unwrap();
        let mut first = Vec::new();
        export_trace(&mut first, &reqs).unwrap();
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), 129);
        let back = parse_trace(first.as_slice()).unwrap();
        let mut second = Vec::new();
        export_trace(&mut second, &back).unwrap();
        assert_eq!(first, second);
        assert_eq!(fingerprint(&reqs), fingerprint(&back));
    }
}
