//! Message schedules for the allreduce algorithms.
//!
//! A schedule lists, for every rank and every communication round, which
//! buffer ranges are sent to which peers and which received ranges are
//! reduced into (or copied over) the local buffer. Executors interpret
//! schedules; the algorithms themselves are pure data.

use std::ops::Range;

use crate::error::{Error, Result};

use super::Algorithm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvKind {
    /// Add the received values into the local range.
    Reduce,
    /// Overwrite the local range with the received values.
    Copy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Send {
    pub peer: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recv {
    pub peer: usize,
    pub range: Range<usize>,
    pub kind: RecvKind,
}

/// One rank's work in one round: post all sends, then consume all receives
/// in the listed order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Round {
    pub sends: Vec<Send>,
    pub recvs: Vec<Recv>,
}

impl Round {
    pub fn is_idle(&self) -> bool {
        self.sends.is_empty() && self.recvs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub algo: Algorithm,
    pub p: usize,
    /// Caller's element count.
    pub len: usize,
    /// Element count after zero-padding to the algorithm's granularity.
    pub padded_len: usize,
    /// `programs[rank][round]`.
    pub programs: Vec<Vec<Round>>,
}

impl Schedule {
    pub fn rounds(&self) -> usize {
        self.programs.first().map_or(0, Vec::len)
    }

    /// Rounds in which `rank` sends or receives anything.
    pub fn steps(&self, rank: usize) -> usize {
        self.programs[rank].iter().filter(|r| !r.is_idle()).count()
    }

    /// Elements of `range` that lie in the zero padding.
    pub fn padding_in(&self, range: &Range<usize>) -> usize {
        range.end.saturating_sub(range.start.max(self.len))
    }
}

pub fn build(algo: Algorithm, p: usize, len: usize) -> Result<Schedule> {
    if p == 0 {
        return Err(Error::config("engine.servers", "must be at least 1"));
    }
    match algo {
        Algorithm::Ring => Ok(ring(p, len)),
        Algorithm::HalvingDoubling => {
            if !p.is_power_of_two() {
                return Err(Error::NotPowerOfTwo(p));
            }
            Ok(binary_blocks(p, len, Algorithm::HalvingDoubling))
        }
        Algorithm::BinaryBlocks => Ok(binary_blocks(p, len, Algorithm::BinaryBlocks)),
    }
}

fn round_up(len: usize, multiple: usize) -> usize {
    len.div_ceil(multiple) * multiple
}

fn ring(p: usize, len: usize) -> Schedule {
    let padded_len = round_up(len, p);
    let c = padded_len / p;
    let chunk = |i: usize| i * c..(i + 1) * c;
    let mut programs = vec![Vec::with_capacity(2 * (p - 1)); p];
    for (r, prog) in programs.iter_mut().enumerate() {
        let next = (r + 1) % p;
        let prev = (r + p - 1) % p;
        // Reduce-scatter: after p-1 rounds rank r owns chunk r+1.
        for s in 0..p - 1 {
            prog.push(Round {
                sends: vec![Send {
                    peer: next,
                    range: chunk((r + p - s) % p),
                }],
                recvs: vec![Recv {
                    peer: prev,
                    range: chunk((r + 2 * p - s - 1) % p),
                    kind: RecvKind::Reduce,
                }],
            });
        }
        // Allgather: circulate the owned chunks.
        for s in 0..p - 1 {
            prog.push(Round {
                sends: vec![Send {
                    peer: next,
                    range: chunk((r + 1 + p - s) % p),
                }],
                recvs: vec![Recv {
                    peer: prev,
                    range: chunk((r + p - s) % p),
                    kind: RecvKind::Copy,
                }],
            });
        }
    }
    Schedule {
        algo: Algorithm::Ring,
        p,
        len,
        padded_len,
        programs,
    }
}

/// Power-of-two block sizes in decreasing order summing to `p`.
pub fn blocks(p: usize) -> Vec<usize> {
    (0..usize::BITS)
        .rev()
        .map(|b| 1usize << b)
        .filter(|&q| p & q != 0)
        .collect()
}

/// Range owned by local rank `r` of a `q`-rank block after reduce-scatter.
pub fn owned_after_reduce_scatter(r: usize, q: usize, padded_len: usize) -> Range<usize> {
    let mut seg = 0..padded_len;
    let mut d = 1;
    while d < q {
        let mid = seg.start + (seg.end - seg.start) / 2;
        seg = if r & d == 0 {
            seg.start..mid
        } else {
            mid..seg.end
        };
        d <<= 1;
    }
    seg
}

/// Recursive halving/doubling inside a `q`-rank block: the reduce-scatter
/// rounds and the allgather rounds, in terms of local ranks offset by `base`.
fn hd_block(r: usize, q: usize, base: usize, padded_len: usize) -> (Vec<Round>, Vec<Round>) {
    let mut rs = Vec::new();
    let mut exchanged = Vec::new();
    let mut seg = 0..padded_len;
    let mut d = 1;
    while d < q {
        let peer = base + (r ^ d);
        let mid = seg.start + (seg.end - seg.start) / 2;
        let (keep, give) = if r & d == 0 {
            (seg.start..mid, mid..seg.end)
        } else {
            (mid..seg.end, seg.start..mid)
        };
        rs.push(Round {
            sends: vec![Send {
                peer,
                range: give.clone(),
            }],
            recvs: vec![Recv {
                peer,
                range: keep.clone(),
                kind: RecvKind::Reduce,
            }],
        });
        exchanged.push((peer, keep.clone(), give));
        seg = keep;
        d <<= 1;
    }
    // Allgather retraces the pattern in reverse: send what was received,
    // receive what was sent.
    let ag = exchanged
        .into_iter()
        .rev()
        .map(|(peer, kept, given)| Round {
            sends: vec![Send { peer, range: kept }],
            recvs: vec![Recv {
                peer,
                range: given,
                kind: RecvKind::Copy,
            }],
        })
        .collect();
    (rs, ag)
}

/// Binary blocks: ranks are split into power-of-two blocks, each runs
/// halving/doubling internally, and two extra rounds move partial results
/// from the smaller blocks into the largest block and the final values back.
/// With a single block this is exactly recursive halving/doubling.
fn binary_blocks(p: usize, len: usize, algo: Algorithm) -> Schedule {
    let sizes = blocks(p);
    let big = sizes[0];
    let levels = big.trailing_zeros() as usize;
    let padded_len = round_up(len, big);
    let multi = sizes.len() > 1;
    let total_rounds = 2 * levels + if multi { 2 } else { 0 };
    let mut programs = vec![vec![Round::default(); total_rounds]; p];

    let mut bases = Vec::with_capacity(sizes.len());
    let mut base = 0;
    for &q in &sizes {
        bases.push(base);
        base += q;
    }

    for (&q, &base) in sizes.iter().zip(&bases) {
        let ag_start = levels + if multi { 2 } else { 0 };
        for r in 0..q {
            let (rs, ag) = hd_block(r, q, base, padded_len);
            let prog = &mut programs[base + r];
            for (i, round) in rs.into_iter().enumerate() {
                prog[i] = round;
            }
            for (i, round) in ag.into_iter().enumerate() {
                prog[ag_start + i] = round;
            }
        }
    }

    if multi {
        let fold_in = levels;
        let fold_out = levels + 1;
        let big_owned: Vec<Range<usize>> = (0..big)
            .map(|j| owned_after_reduce_scatter(j, big, padded_len))
            .collect();
        for (&q, &base) in sizes.iter().zip(&bases).skip(1) {
            for r in 0..q {
                let mine = owned_after_reduce_scatter(r, q, padded_len);
                for (j, theirs) in big_owned.iter().enumerate() {
                    if theirs.start >= mine.start && theirs.end <= mine.end {
                        programs[base + r][fold_in].sends.push(Send {
                            peer: j,
                            range: theirs.clone(),
                        });
                        programs[j][fold_in].recvs.push(Recv {
                            peer: base + r,
                            range: theirs.clone(),
                            kind: RecvKind::Reduce,
                        });
                        programs[j][fold_out].sends.push(Send {
                            peer: base + r,
                            range: theirs.clone(),
                        });
                        programs[base + r][fold_out].recvs.push(Recv {
                            peer: j,
                            range: theirs.clone(),
                            kind: RecvKind::Copy,
                        });
                    }
                }
            }
        }
    }

    Schedule {
        algo,
        p,
        len,
        padded_len,
        programs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_decomposition() {
        assert_eq!(blocks(1), vec![1]);
        assert_eq!(blocks(6), vec![4, 2]);
        assert_eq!(blocks(7), vec![4, 2, 1]);
        assert_eq!(blocks(9), vec![8, 1]);
        assert_eq!(blocks(16), vec![16]);
    }

    #[test]
    fn hd_first_round_pairs_neighbours() {
        let s = build(Algorithm::HalvingDoubling, 4, 8).unwrap();
        // rank 0 sends the second half to 1 and keeps the first half.
        assert_eq!(
            s.programs[0][0].sends,
            vec![Send {
                peer: 1,
                range: 4..8
            }]
        );
        assert_eq!(s.programs[0][0].recvs[0].range, 0..4);
        assert_eq!(
            s.programs[1][0].sends,
            vec![Send {
                peer: 0,
                range: 0..4
            }]
        );
        // distance doubles in the next round
        assert_eq!(s.programs[0][1].sends[0].peer, 2);
        assert_eq!(s.programs[0][1].sends[0].range, 2..4);
        assert_eq!(s.rounds(), 4);
    }

    #[test]
    fn hd_owned_chunks_tile_the_buffer() {
        let p = 8;
        let mut owned: Vec<Range<usize>> = (0..p)
            .map(|r| owned_after_reduce_scatter(r, p, 64))
            .collect();
        owned.sort_by_key(|r| r.start);
        for (i, r) in owned.iter().enumerate() {
            assert_eq!(*r, i * 8..(i + 1) * 8);
        }
    }

    #[test]
    fn step_counts() {
        for p in 1..=9 {
            let ring = build(Algorithm::Ring, p, 100).unwrap();
            assert!((0..p).all(|r| ring.steps(r) == 2 * (p - 1)));
        }
        for p in [2usize, 4, 8, 32] {
            let hd = build(Algorithm::HalvingDoubling, p, 100).unwrap();
            let lg = p.trailing_zeros() as usize;
            assert!((0..p).all(|r| hd.steps(r) == 2 * lg));
            assert_eq!(
                build(Algorithm::BinaryBlocks, p, 100).unwrap().programs,
                hd.programs
            );
        }
        assert_eq!(
            build(Algorithm::HalvingDoubling, 6, 10).unwrap_err(),
            Error::NotPowerOfTwo(6)
        );
        let bb = build(Algorithm::BinaryBlocks, 6, 100).unwrap();
        assert_eq!(bb.rounds(), 2 * 2 + 2);
    }

    #[test]
    fn padding_accounting() {
        let s = build(Algorithm::Ring, 4, 10).unwrap();
        assert_eq!(s.padded_len, 12);
        assert_eq!(s.padding_in(&(9..12)), 2);
        assert_eq!(s.padding_in(&(0..3)), 0);
        assert_eq!(s.padding_in(&(10..12)), 2);
    }
}
