use crate::prefill::scheduler::PrefillJob;
use crate::workload::RequestId;

/// A contiguous run of one request's prompt tokens inside a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSlice {
    pub request: RequestId,
    pub start: u32,
    pub len: u32,
}

impl ChunkSlice {
    pub fn end(&self) -> u32 {
        self.start + self.len
    }
}

/// A fixed-size unit of prefill work. `slices` total plus `padded` always
/// equals the chunk size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: usize,
    pub slices: Vec<ChunkSlice>,
    pub padded: u32,
}

impl Chunk {
    pub fn real_tokens(&self) -> u32 {
        self.slices.iter().map(|s| s.len).sum()
    }
}

/// Slice and merge the scheduled prompts into `chunk_size` chunks without
/// reordering. Only the last chunk may be padded.
pub fn chunkify(scheduled: &[PrefillJob], chunk_size: u32) -> Vec<Chunk> {
    assert!(chunk_size >= 1, "chunk_size must be >= 1");
    let mut chunks = Vec::new();
    let mut current: Vec<ChunkSlice> = Vec::new();
    let mut room = chunk_size;
    for job in scheduled {
        let mut cursor = 0;
        while cursor < job.prompt_len {
            let len = room.min(job.prompt_len - cursor);
            current.push(ChunkSlice {
                request: job.id,
                start: cursor,
                len,
            });
            cursor += len;
            room -= len;
            if room == 0 {
                chunks.push(Chunk {
                    index: chunks.len(),
                    slices: std::mem::take(&mut current),
                    padded: 0,
                });
                room = chunk_size;
            }
        }
    }
    if !current.is_empty() {
        chunks.push(Chunk {
            index: chunks.len(),
            slices: current,
            padded: room,
        });
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimTime;
    use proptest::prelude::*;

    fn jobs(lens: &[u32]) -> Vec<PrefillJob> {
        lens.iter()
            .enumerate()
            .map(|(i, &l)| PrefillJob {
                id: RequestId(i as u32),
                arrival: SimTime::ZERO,
                prompt_len: l,
            })
            .collect()
    }

    #[test]
    fn sjf_example_packs_into_three_chunks() {
        let chunks = chunkify(&jobs(&[18, 100, 512, 900]), 512);
        assert_eq!(chunks.len(), 3);
        let first: Vec<(u32, u32)> = chunks[0]
            .slices
            .iter()
            .map(|s| (s.request.0, s.len))
            .collect();
        assert_eq!(first, vec![(0, 18), (1, 100), (2, 394)]);
        assert_eq!(chunks[0].padded, 0);
        assert_eq!(chunks[1].padded, 0);
        // 1530 real tokens in 3 * 512 slots.
        assert_eq!(chunks[2].padded, 6);
        assert_eq!(
            chunks[1].slices[0],
            ChunkSlice {
                request: RequestId(2),
                start: 394,
                len: 118
            }
        );
    }

    #[test]
    fn exact_fit_has_no_padding() {
        let chunks = chunkify(&jobs(&[512]), 512);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].padded, 0);
    }

    #[test]
    fn single_token_prompt_pads_the_rest() {
        let chunks = chunkify(&jobs(&[1]), 512);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].padded, 511);
    }

    #[test]
    fn empty_input_has_no_chunks() {
        assert!(chunkify(&[], 512).is_empty());
    }

    proptest! {
        #[test]
        fn slices_reassemble_prompts(lens in prop::collection::vec(1u32..3000, 1..40), chunk in 1u32..1024) {
            let input = jobs(&lens);
            let chunks = chunkify(&input, chunk);
            // Concatenated slices equal the concatenated prompts, in order.
            let mut expected = Vec::new();
            for j in &input {
                expected.push((j.id, j.prompt_len));
            }
            let mut seen: Vec<(RequestId, u32)> = Vec::new();
            let mut cursor = std::collections::BTreeMap::new();
            for c in &chunks {
                prop_assert_eq!(c.real_tokens() + c.padded, chunk);
                for s in &c.slices {
                    let at = cursor.entry(s.request).or_insert(0u32);
                    prop_assert_eq!(*at, s.start);
                    *at += s.len;
                    match seen.last_mut() {
                        Some((id, n)) if *id == s.request => *n += s.len,
                        _ => seen.push((s.request, s.len)),
                    }
                }
            }
            prop_assert_eq!(seen, expected);
            for c in &chunks[..chunks.len() - 1] {
                prop_assert_eq!(c.padded, 0);
            }
            let total: u32 = lens.iter().sum();
            prop_assert_eq!(chunks.len() as u32, total.div_ceil(chunk));
        }
    }
}
