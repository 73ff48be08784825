//! Inter-decode-instance scheduling.
//!
//! The default policy partitions decode instances into those with enough
//! free KV for the request's predicted upper bound (alpha) and the rest,
//! samples two distinct alpha members, and keeps the one that ends up with
//! fewer decodes of the request's own class (heavy or light), then the lower
//! heavy:light ratio after accepting the request.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{DecodeLoad, InstanceId};
use crate::prefill::predictor::LengthBucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    /// Two random choices from the alpha set; the one left with the better
    /// heavy/light balance wins.
    #[default]
    PowerOfTwo,
    /// Uniform over all decode instances.
    Random,
    /// Worst case: every predicted-heavy decode goes to the same instance.
    Imbalance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchDecision {
    pub chosen: InstanceId,
    /// Instances that were compared (empty for single-candidate choices).
    pub candidates: Vec<InstanceId>,
    /// The alpha set was empty and the least-loaded instance was used.
    pub fallback: bool,
}

/// heavy:light as a comparable fraction; no light decodes means infinite
/// unless there are no heavy ones either.
fn cmp_ratio(a: (u32, u32), b: (u32, u32)) -> Ordering {
    let (ha, la) = (a.0 as u64, a.1 as u64);
    let (hb, lb) = (b.0 as u64, b.1 as u64);
    match (ha == 0, hb == 0) {
        (true, true) => return Ordering::Equal,
        (true, false) => return Ordering::Less,
        (false, true) => return Ordering::Greater,
        _ => {}
    }
    match (la == 0, lb == 0) {
        (true, true) => ha.cmp(&hb),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => (ha * lb).cmp(&(hb * la)),
    }
}

fn counts_after(load: &DecodeLoad, heavy: bool) -> (u32, u32) {
    if heavy {
        (load.heavy + 1, load.light)
    } else {
        (load.heavy, load.light + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Dispatcher {
    policy: DispatchPolicy,
    round_robin: usize,
}

impl Dispatcher {
    pub fn new(policy: DispatchPolicy) -> Self {
        Dispatcher {
            policy,
            round_robin: 0,
        }
    }

    pub fn policy(&self) -> DispatchPolicy {
        self.policy
    }

    /// Choose a decode instance from `loads` (sorted by id). Returns `None`
    /// when no decode instance is known.
    pub fn dispatch<R: Rng + ?Sized>(
        &mut self,
        prompt_len: u32,
        bucket: Option<LengthBucket>,
        loads: &[DecodeLoad],
        rng: &mut R,
    ) -> Option<DispatchDecision> {
        if loads.is_empty() {
            return None;
        }
        let heavy = bucket.map(|b| b.is_heavy()).unwrap_or(false);
        let decision = match self.policy {
            DispatchPolicy::PowerOfTwo => power_of_two(prompt_len, bucket, heavy, loads, rng),
            DispatchPolicy::Random => DispatchDecision {
                chosen: loads[rng.gen_range(0..loads.len())].id,
                candidates: Vec::new(),
                fallback: false,
            },
            DispatchPolicy::Imbalance => {
                let chosen = if heavy {
                    loads[0].id
                } else {
                    let id = loads[self.round_robin % loads.len()].id;
                    self.round_robin += 1;
                    id
                };
                DispatchDecision {
                    chosen,
                    candidates: Vec::new(),
                    fallback: false,
                }
            }
        };
        Some(decision)
    }
}

fn power_of_two<R: Rng + ?Sized>(
    prompt_len: u32,
    bucket: Option<LengthBucket>,
    heavy: bool,
    loads: &[DecodeLoad],
    rng: &mut R,
) -> DispatchDecision {
    let need = prompt_len as u64 + bucket.map(|b| b.upper() as u64).unwrap_or(1);
    let alpha: Vec<&DecodeLoad> = loads
        .iter()
        .filter(|l| l.free_kv_tokens() >= need)
        .collect();
    match alpha.len() {
        0 => {
            let best = loads
                .iter()
                .max_by(|a, b| {
                    a.free_kv_pages
                        .cmp(&b.free_kv_pages)
                        .then_with(|| b.id.cmp(&a.id))
                })
                .expect("non-empty");
            DispatchDecision {
                chosen: best.id,
                candidates: Vec::new(),
                fallback: true,
            }
        }
        1 => DispatchDecision {
            chosen: alpha[0].id,
            candidates: vec![alpha[0].id],
            fallback: false,
        },
        n => {
            let picked = sample(rng, n, 2);
            let (a, b) = (alpha[picked.index(0)], alpha[picked.index(1)]);
            let (ca, cb) = (counts_after(a, heavy), counts_after(b, heavy));
            let own = |c: (u32, u32)| if heavy { c.0 } else { c.1 };
            let order = own(ca)
                .cmp(&own(cb))
                .then(cmp_ratio(ca, cb))
                .then(a.used_kv_pages.cmp(&b.used_kv_pages))
                .then(a.id.cmp(&b.id));
            let chosen = if order == Ordering::Greater {
                b.id
            } else {
                a.id
            };
            DispatchDecision {
                chosen,
                candidates: vec![a.id, b.id],
                fallback: false,
            }
        }
    }
}

/// Fold one dispatch into a locally held snapshot so later decisions made
/// before the next broadcast account for it.
pub fn record_dispatch(load: &mut DecodeLoad, prompt_pages: u64, bucket: Option<LengthBucket>) {
    load.free_kv_pages = load.free_kv_pages.saturating_sub(prompt_pages);
    load.used_kv_pages += prompt_pages;
    if bucket.map(|b| b.is_heavy()).unwrap_or(false) {
        load.heavy += 1;
    } else {
        load.light += 1;
    }
}
