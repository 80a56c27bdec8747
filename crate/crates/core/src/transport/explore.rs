//! Bounded systematic exploration of interleavings.
//!
//! Depth-first search where every execution is replayed from a fresh
//! simulation along the recorded prefix of choices. With reduction on, each
//! finished execution is scanned for racing event pairs and only the
//! reversals of those races are scheduled as alternatives (source sets),
//! while sleep sets skip interleavings that only reorder independent events.
//! Reduction is only applied to fault-free runs; with faults or with
//! reduction off every interleaving is enumerated.

use std::collections::HashMap;
use std::fmt;

use super::sim::{Actor, Choice, ChoiceContext, Chooser, EventKey, Footprint, Obj, Simulation};
use super::trace::{Termination, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreBudget {
    /// Longest schedule explored; deeper runs are cut and counted as truncated.
    pub max_depth: usize,
    /// Maximum number of executions (including pruned and truncated ones).
    pub max_executions: usize,
    /// Use partial-order reduction. Disabling enumerates every interleaving.
    pub reduction: bool,
}

impl Default for ExploreBudget {
    fn default() -> Self {
        ExploreBudget {
            max_depth: 2_000,
            max_executions: 200_000,
            reduction: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExploreStats {
    /// Executions that ran to an end state and were reported.
    pub executions: usize,
    /// Executions abandoned because every enabled event was asleep.
    pub pruned: usize,
    /// Executions cut at `max_depth`.
    pub truncated: usize,
    /// The search stopped at `max_executions` with work left.
    pub budget_exhausted: bool,
}

impl ExploreStats {
    /// True if every interleaving class was covered.
    pub fn complete(&self) -> bool {
        self.truncated == 0 && !self.budget_exhausted
    }
}

impl fmt::Display for ExploreStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "executions={} pruned={} truncated={} coverage={}",
            self.executions,
            self.pruned,
            self.truncated,
            if self.complete() { "full" } else { "partial" }
        )
    }
}

struct Node {
    enabled: Vec<EventKey>,
    sleep: Vec<EventKey>,
    done: Vec<EventKey>,
    /// Events that must be tried from this state.
    backtrack: Vec<EventKey>,
    chosen: EventKey,
}

struct DfsChooser<'a> {
    nodes: &'a mut Vec<Node>,
    depth: usize,
    max_depth: usize,
    reduction: bool,
    next_sleep: Vec<EventKey>,
}

impl DfsChooser<'_> {
    fn child_sleep(&self, ctx: &ChoiceContext<'_>, node: &Node) -> Vec<EventKey> {
        if !self.reduction {
            return Vec::new();
        }
        node.sleep
            .iter()
            .chain(&node.done)
            .copied()
            .filter(|&x| ctx.independent(x, node.chosen))
            .collect()
    }
}

impl Chooser for DfsChooser<'_> {
    fn choose(&mut self, ctx: &ChoiceContext<'_>) -> Choice {
        let d = self.depth;
        self.depth += 1;
        if d < self.nodes.len() {
            let node = &self.nodes[d];
            assert_eq!(
                node.enabled, ctx.enabled,
                "replay diverged at depth {d}: the simulation is not deterministic"
            );
            let idx = ctx
                .enabled
                .iter()
                .position(|&e| e == node.chosen)
                .expect("chosen event vanished");
            if d + 1 == self.nodes.len() {
                self.next_sleep = self.child_sleep(ctx, node);
            }
            return Choice::Take(idx);
        }
        if d >= self.max_depth {
            return Choice::Stop(Termination::Truncated);
        }
        let sleep = std::mem::take(&mut self.next_sleep);
        let Some(idx) = ctx.enabled.iter().position(|e| !sleep.contains(e)) else {
            return Choice::Stop(Termination::Pruned);
        };
        let backtrack = if self.reduction && ctx.reducible() {
            vec![ctx.enabled[idx]]
        } else {
            ctx.enabled.to_vec()
        };
        let node = Node {
            enabled: ctx.enabled.to_vec(),
            sleep,
            done: Vec::new(),
            backtrack,
            chosen: ctx.enabled[idx],
        };
        self.next_sleep = self.child_sleep(ctx, &node);
        self.nodes.push(node);
        Choice::Take(idx)
    }

    fn wants_footprints(&self) -> bool {
        self.reduction
    }
}

/// Vector clock over actors: for each actor, the index of its latest event
/// that happens before (or is) the clocked event.
type Clock = HashMap<Actor, usize>;

fn covers(clock: &Clock, actor: Actor, i: usize) -> bool {
    clock.get(&actor).is_some_and(|&k| k >= i)
}

fn join(into: &mut Clock, other: &Clock) {
    for (&a, &k) in other {
        let e = into.entry(a).or_insert(k);
        *e = (*e).max(k);
    }
}

/// Finds every pair of racing events in an execution and, for each, makes
/// sure the state before the first event will also try some schedule in
/// which the second event's actor goes first.
fn add_backtracks(nodes: &mut [Node], fps: &[Footprint]) {
    let len = fps.len().min(nodes.len());
    let mut clocks: Vec<Clock> = Vec::with_capacity(len);
    let mut last_of: HashMap<Actor, usize> = HashMap::new();
    let mut accesses: HashMap<Obj, Vec<(usize, bool)>> = HashMap::new();
    for j in 0..len {
        let fj = &fps[j];
        let mut clock = Clock::new();
        if let Some(&p) = last_of.get(&fj.actor) {
            join(&mut clock, &clocks[p]);
        }
        if let Some(c) = fj.creator {
            join(&mut clock, &clocks[c]);
        }
        let mut conflicts: Vec<usize> = Vec::new();
        for &(obj, write) in &fj.access {
            if let Some(list) = accesses.get(&obj) {
                conflicts.extend(
                    list.iter()
                        .filter(|&&(i, w)| (w || write) && fps[i].actor != fj.actor)
                        .map(|&(i, _)| i),
                );
            }
        }
        conflicts.sort_unstable_by(|a, b| b.cmp(a));
        conflicts.dedup();
        for i in conflicts {
            if covers(&clock, fps[i].actor, i) {
                continue;
            }
            let irreversible = fj.creator == Some(i)
                || fj
                    .enabled_by
                    .is_some_and(|q| fps[i].access.contains(&(Obj::Req(q), true)));
            if !irreversible {
                add_race(nodes, fps, &clocks, &clock, i, j);
            }
            join(&mut clock, &clocks[i]);
        }
        clock.insert(fj.actor, j);
        for &(obj, write) in &fj.access {
            accesses.entry(obj).or_default().push((j, write));
        }
        last_of.insert(fj.actor, j);
        clocks.push(clock);
    }
}

fn add_race(
    nodes: &mut [Node],
    fps: &[Footprint],
    clocks: &[Clock],
    clock_j: &Clock,
    i: usize,
    j: usize,
) {
    let clock_of = |k: usize| if k == j { clock_j } else { &clocks[k] };
    let ai = fps[i].actor;
    let v: Vec<usize> = (i + 1..j)
        .filter(|&k| !covers(&clocks[k], ai, i))
        .chain(std::iter::once(j))
        .collect();
    let initials: Vec<EventKey> = v
        .iter()
        .enumerate()
        .filter(|&(pos, &k)| {
            v[..pos]
                .iter()
                .all(|&u| !covers(clock_of(k), fps[u].actor, u))
        })
        .map(|(_, &k)| fps[k].key)
        .collect();
    let node = &mut nodes[i];
    if initials
        .iter()
        .any(|e| node.backtrack.contains(e) || node.done.contains(e))
    {
        return;
    }
    match initials.iter().find(|e| node.enabled.contains(e)) {
        Some(&e) => node.backtrack.push(e),
        None => {
            for &e in &node.enabled {
                if !node.backtrack.contains(&e) {
                    node.backtrack.push(e);
                }
            }
        }
    }
}

fn backtrack(nodes: &mut Vec<Node>) -> bool {
    while let Some(node) = nodes.last_mut() {
        node.done.push(node.chosen);
        let next = node
            .backtrack
            .iter()
            .copied()
            .find(|e| !node.done.contains(e) && !node.sleep.contains(e));
        if let Some(e) = next {
            node.chosen = e;
            return true;
        }
        nodes.pop();
    }
    false
}

/// Explores the schedules of the simulation produced by `build`, calling
/// `visit` with the trace of every execution that reaches an end state.
///
/// `build` must produce the same program set each time.
pub fn explore<O, B, V>(mut build: B, budget: ExploreBudget, mut visit: V) -> ExploreStats
where
    O: fmt::Display + 'static,
    B: FnMut() -> Simulation<O>,
    V: FnMut(Trace<O>),
{
    let mut nodes = Vec::new();
    let mut stats = ExploreStats::default();
    loop {
        let mut chooser = DfsChooser {
            nodes: &mut nodes,
            depth: 0,
            max_depth: budget.max_depth,
            reduction: budget.reduction,
            next_sleep: Vec::new(),
        };
        let mut trace = build().drive(&mut chooser);
        if budget.reduction {
            add_backtracks(&mut nodes, &std::mem::take(&mut trace.footprints));
        }
        match trace.termination {
            Termination::Pruned => stats.pruned += 1,
            Termination::Truncated => stats.truncated += 1,
            _ => {
                stats.executions += 1;
                visit(trace);
            }
        }
        if !backtrack(&mut nodes) {
            break;
        }
        if stats.executions + stats.pruned + stats.truncated >= budget.max_executions {
            stats.budget_exhausted = true;
            break;
        }
    }
    stats
}
