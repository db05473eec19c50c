//! Concurrent allreduces under a sliding window.
//!
//! Tasks are numbered in the order every rank starts them. Rank `r` may start
//! task `i` once it has started task `i-1` and has itself completed task
//! `i-c`. Each task runs in its own communication context of a shared
//! [`Mailbox`], so messages of concurrent collectives never mix.

use std::sync::Arc;

use crate::collectives::exec::{report, CollectiveRun};
use crate::collectives::{LinkCounters, Mailbox, Schedule, TrafficReport};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// The window-`c` dependency relation over `tasks` allreduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelinePlan {
    pub tasks: usize,
    pub window: usize,
}

pub fn pipeline_schedule(tasks: usize, window: usize) -> Result<PipelinePlan> {
    if window == 0 {
        return Err(Error::config(
            "engine.pipeline_window",
            "must be at least 1",
        ));
    }
    Ok(PipelinePlan { tasks, window })
}

impl PipelinePlan {
    /// The task whose completion unblocks task `i`, if any.
    pub fn dependency(&self, i: usize) -> Option<usize> {
        i.checked_sub(self.window)
    }

    /// All `(before, after)` pairs of the relation.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.tasks)
            .filter_map(|i| self.dependency(i).map(|d| (d, i)))
            .collect()
    }
}

/// How the single-thread scheduler picks the next enabled action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interleaving {
    /// Lowest rank first, then lowest task.
    Sweep,
    /// Uniformly random among enabled actions.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Start { task: usize, rank: usize },
    Complete { task: usize, rank: usize },
}

#[derive(Debug, Clone)]
pub struct PipelineTask {
    pub schedule: Arc<Schedule>,
    /// One buffer per rank.
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// `outputs[task][rank]`.
    pub outputs: Vec<Vec<Vec<f64>>>,
    pub reports: Vec<TrafficReport>,
    pub trace: Vec<Event>,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    Start(usize),
    Advance(usize, usize),
}

/// Execute the tasks under `plan`. `rank_orders[r]` overrides the order in
/// which rank `r` starts tasks; by default every rank uses `0..tasks`.
pub fn run_pipeline(
    plan: &PipelinePlan,
    tasks: Vec<PipelineTask>,
    interleaving: Interleaving,
    rank_orders: Option<&[Vec<usize>]>,
) -> Result<PipelineOutcome> {
    if tasks.len() != plan.tasks {
        return Err(Error::config(
            "engine.pipeline_window",
            format!("plan covers {} tasks, got {}", plan.tasks, tasks.len()),
        ));
    }
    let p = tasks.first().map_or(0, |t| t.schedule.p);
    if tasks.iter().any(|t| t.schedule.p != p) {
        return Err(Error::config(
            "engine.servers",
            "tasks disagree on server count",
        ));
    }
    let default_order: Vec<Vec<usize>> = vec![(0..plan.tasks).collect(); p];
    let orders = rank_orders.unwrap_or(&default_order);
    let mut runs = tasks
        .into_iter()
        .enumerate()
        .map(|(ctx, t)| CollectiveRun::new(t.schedule, ctx, &t.inputs))
        .collect::<Result<Vec<_>>>()?;
    let mut mailbox = Mailbox::new();
    let mut started = vec![0usize; p];
    let mut rng = match interleaving {
        Interleaving::Random(seed) => Some(Rng::new(seed)),
        Interleaving::Sweep => None,
    };
    let mut trace = Vec::new();
    let mut enabled = Vec::new();
    loop {
        enabled.clear();
        for rank in 0..p {
            let order = &orders[rank];
            let s = started[rank];
            if s < order.len() {
                let gate = s.checked_sub(plan.window).map(|d| order[d]);
                if gate.is_none_or(|d| runs[d].rank_done(rank)) {
                    enabled.push(Action::Start(rank));
                }
            }
            for &task in &order[..s] {
                if runs[task].ready(rank, &mailbox) {
                    enabled.push(Action::Advance(task, rank));
                }
            }
        }
        if enabled.is_empty() {
            break;
        }
        let pick = match rng.as_mut() {
            Some(r) => enabled[r.below(enabled.len() as u64) as usize],
            None => enabled[0],
        };
        match pick {
            Action::Start(rank) => {
                let task = orders[rank][started[rank]];
                started[rank] += 1;
                trace.push(Event::Start { task, rank });
                if runs[task].rank_done(rank) {
                    trace.push(Event::Complete { task, rank });
                }
            }
            Action::Advance(task, rank) => {
                runs[task].advance(rank, &mut mailbox)?;
                if runs[task].rank_done(rank) {
                    trace.push(Event::Complete { task, rank });
                }
            }
        }
    }
    let finished = (0..p).all(|r| started[r] == orders[r].len()) && runs.iter().all(|r| r.done());
    if !finished {
        let stalled = runs.iter().filter(|r| !r.done()).count();
        return Err(Error::Deadlock {
            pending: mailbox.pending() + stalled,
        });
    }
    let reports = runs
        .iter()
        .map(|run| {
            let counters: Vec<LinkCounters> = (0..p)
                .map(|r| mailbox.context_counters(run.context(), r))
                .collect();
            report(run.schedule(), &counters)
        })
        .collect();
    let outputs = runs.into_iter().map(CollectiveRun::into_outputs).collect();
    Ok(PipelineOutcome {
        outputs,
        reports,
        trace,
    })
}

/// Whether a trace respects `plan`: per rank, starts are in task order and
/// task `i` starts only after the same rank completed task `i - c`.
pub fn trace_admitted(plan: &PipelinePlan, trace: &[Event], p: usize) -> bool {
    let mut next = vec![0usize; p];
    let mut done = vec![vec![false; plan.tasks]; p];
    for ev in trace {
        match *ev {
            Event::Start { task, rank } => {
                if task != next[rank] {
                    return false;
                }
                if let Some(d) = plan.dependency(task) {
                    if !done[rank][d] {
                        return false;
                    }
                }
                next[rank] += 1;
            }
            Event::Complete { task, rank } => done[rank][task] = true,
        }
    }
    true
}
