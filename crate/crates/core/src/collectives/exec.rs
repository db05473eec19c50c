//! Schedule executors.

use std::sync::Arc;
use std::thread;

use crate::error::{Error, Result};

use super::schedule::{RecvKind, Schedule};
use super::transport::{Endpoint, LinkCounters, Mailbox, Message};
use super::{ServerTraffic, TrafficReport};

fn apply(buf: &mut [f64], kind: RecvKind, values: &[f64]) {
    match kind {
        RecvKind::Reduce => {
            for (b, v) in buf.iter_mut().zip(values) {
                *b += v;
            }
        }
        RecvKind::Copy => buf.copy_from_slice(values),
    }
}

fn padded(schedule: &Schedule, input: &[f64]) -> Vec<f64> {
    let mut buf = input.to_vec();
    buf.resize(schedule.padded_len, 0.0);
    buf
}

fn check_inputs(schedule: &Schedule, inputs: &[Vec<f64>]) -> Result<()> {
    if inputs.len() != schedule.p {
        return Err(Error::config(
            "engine.servers",
            format!("{} buffers for {} servers", inputs.len(), schedule.p),
        ));
    }
    if let Some(bad) = inputs.iter().find(|b| b.len() != schedule.len) {
        return Err(Error::ShapeMismatch {
            left: vec![schedule.len],
            right: vec![bad.len()],
        });
    }
    Ok(())
}

pub(crate) fn report(schedule: &Schedule, counters: &[LinkCounters]) -> TrafficReport {
    TrafficReport {
        algo: schedule.algo,
        p: schedule.p,
        buffer_bytes: schedule.len as u64 * super::transport::ELEM_BYTES,
        rounds: schedule.rounds(),
        servers: counters
            .iter()
            .enumerate()
            .map(|(r, c)| ServerTraffic {
                bytes_sent: c.bytes_sent,
                bytes_received: c.bytes_received,
                padding_sent: c.padding_sent,
                padding_received: c.padding_received,
                steps: schedule.steps(r),
            })
            .collect(),
        local_strategy: None,
    }
}

#[derive(Debug, Clone)]
struct RankState {
    buf: Vec<f64>,
    round: usize,
    posted: bool,
}

/// One in-flight collective whose ranks are advanced one action at a time
/// against a shared [`Mailbox`]. An action either posts the sends of the
/// rank's current round or, once every expected message is queued, consumes
/// the receives and moves to the next round.
#[derive(Debug, Clone)]
pub struct CollectiveRun {
    schedule: Arc<Schedule>,
    ctx: usize,
    ranks: Vec<RankState>,
}

impl CollectiveRun {
    pub fn new(schedule: Arc<Schedule>, ctx: usize, inputs: &[Vec<f64>]) -> Result<Self> {
        check_inputs(&schedule, inputs)?;
        let ranks = inputs
            .iter()
            .map(|b| RankState {
                buf: padded(&schedule, b),
                round: 0,
                posted: false,
            })
            .collect();
        Ok(Self {
            schedule,
            ctx,
            ranks,
        })
    }

    pub fn context(&self) -> usize {
        self.ctx
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn rank_done(&self, rank: usize) -> bool {
        self.ranks[rank].round == self.schedule.rounds()
    }

    pub fn done(&self) -> bool {
        (0..self.ranks.len()).all(|r| self.rank_done(r))
    }

    /// Whether `advance(rank)` would make progress now.
    pub fn ready(&self, rank: usize, mailbox: &Mailbox) -> bool {
        let st = &self.ranks[rank];
        if st.round == self.schedule.rounds() {
            return false;
        }
        if !st.posted {
            return true;
        }
        let round = &self.schedule.programs[rank][st.round];
        // Count expected messages per peer; FIFO order handles repeats.
        round.recvs.iter().all(|r| {
            let need = round.recvs.iter().filter(|o| o.peer == r.peer).count();
            mailbox.available(self.ctx, r.peer, rank) >= need
        })
    }

    pub fn advance(&mut self, rank: usize, mailbox: &mut Mailbox) -> Result<()> {
        if !self.ready(rank, mailbox) {
            return Err(Error::Transport {
                step: self.ranks[rank].round,
                peer: rank,
                reason: "advanced a rank that is not ready".into(),
            });
        }
        let st = &mut self.ranks[rank];
        let round = &self.schedule.programs[rank][st.round];
        if !st.posted {
            for s in &round.sends {
                mailbox.post(
                    self.ctx,
                    rank,
                    s.peer,
                    Message {
                        payload: st.buf[s.range.clone()].to_vec(),
                        padding: self.schedule.padding_in(&s.range),
                    },
                );
            }
            st.posted = true;
            return Ok(());
        }
        for r in &round.recvs {
            let msg = mailbox
                .take(self.ctx, r.peer, rank)
                .expect("readiness checked");
            if msg.payload.len() != r.range.len() {
                return Err(Error::Transport {
                    step: st.round,
                    peer: r.peer,
                    reason: format!(
                        "expected {} elements, got {}",
                        r.range.len(),
                        msg.payload.len()
                    ),
                });
            }
            apply(&mut st.buf[r.range.clone()], r.kind, &msg.payload);
        }
        st.round += 1;
        st.posted = false;
        Ok(())
    }

    /// Final buffers with padding removed.
    pub fn into_outputs(self) -> Vec<Vec<f64>> {
        let len = self.schedule.len;
        self.ranks
            .into_iter()
            .map(|mut st| {
                st.buf.truncate(len);
                st.buf
            })
            .collect()
    }
}

/// Run a schedule to completion on one thread, sweeping ranks in order.
/// Fully deterministic.
pub fn simulate(
    schedule: &Schedule,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, TrafficReport)> {
    let schedule = Arc::new(schedule.clone());
    let mut run = CollectiveRun::new(schedule.clone(), 0, inputs)?;
    let mut mailbox = Mailbox::new();
    let p = schedule.p;
    while !run.done() {
        let mut progressed = false;
        for rank in 0..p {
            while run.ready(rank, &mailbox) {
                run.advance(rank, &mut mailbox)?;
                progressed = true;
                if !run.ranks[rank].posted {
                    break;
                }
            }
        }
        if !progressed {
            return Err(Error::Deadlock {
                pending: mailbox.pending(),
            });
        }
    }
    let counters: Vec<LinkCounters> = (0..p).map(|r| mailbox.counters(r)).collect();
    Ok((run.into_outputs(), report(&schedule, &counters)))
}

/// Execute one rank's program over a blocking endpoint.
pub fn execute_rank<E: Endpoint + ?Sized>(
    schedule: &Schedule,
    input: &[f64],
    endpoint: &mut E,
) -> Result<Vec<f64>> {
    let rank = endpoint.rank();
    let mut buf = padded(schedule, input);
    for (step, round) in schedule.programs[rank].iter().enumerate() {
        let tag = |e: Error| match e {
            Error::Transport { peer, reason, .. } => Error::Transport { step, peer, reason },
            other => other,
        };
        for s in &round.sends {
            endpoint
                .send(
                    s.peer,
                    Message {
                        payload: buf[s.range.clone()].to_vec(),
                        padding: schedule.padding_in(&s.range),
                    },
                )
                .map_err(tag)?;
        }
        for r in &round.recvs {
            let msg = endpoint.recv(r.peer).map_err(tag)?;
            if msg.payload.len() != r.range.len() {
                return Err(Error::Transport {
                    step,
                    peer: r.peer,
                    reason: format!(
                        "expected {} elements, got {}",
                        r.range.len(),
                        msg.payload.len()
                    ),
                });
            }
            apply(&mut buf[r.range.clone()], r.kind, &msg.payload);
        }
    }
    buf.truncate(schedule.len);
    Ok(buf)
}

/// Per-task, per-rank output buffers.
pub type TaskOutputs = Vec<Vec<Vec<f64>>>;

/// Run every rank on its own thread, each owning one endpoint, executing
/// the tasks one after another in the given order. Returns the outputs of
/// every task and each rank's traffic over the whole call.
pub fn run_threaded_tasks<E: Endpoint>(
    tasks: &[(&Schedule, &[Vec<f64>])],
    endpoints: &mut [E],
) -> Result<(TaskOutputs, Vec<LinkCounters>)> {
    let p = endpoints.len();
    for (schedule, inputs) in tasks {
        check_inputs(schedule, inputs)?;
        if schedule.p != p {
            return Err(Error::config(
                "engine.servers",
                format!("{p} endpoints for {} servers", schedule.p),
            ));
        }
    }
    let results: Vec<Result<(Vec<Vec<f64>>, LinkCounters)>> = thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .iter_mut()
            .map(|ep| {
                scope.spawn(move || {
                    let before = ep.counters();
                    let rank = ep.rank();
                    let outs = tasks
                        .iter()
                        .map(|(schedule, inputs)| execute_rank(schedule, &inputs[rank], ep))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((outs, ep.counters().since(before)))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let mut per_task: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(p); tasks.len()];
    let mut counters = Vec::with_capacity(p);
    for r in results {
        let (outs, c) = r?;
        for (t, o) in outs.into_iter().enumerate() {
            per_task[t].push(o);
        }
        counters.push(c);
    }
    Ok((per_task, counters))
}

/// Single collective on per-rank threads.
pub fn run_threaded<E: Endpoint>(
    schedule: &Schedule,
    inputs: &[Vec<f64>],
    endpoints: &mut [E],
) -> Result<(Vec<Vec<f64>>, TrafficReport)> {
    let (mut outs, counters) = run_threaded_tasks(&[(schedule, inputs)], endpoints)?;
    Ok((outs.pop().expect("one task"), report(schedule, &counters)))
}
