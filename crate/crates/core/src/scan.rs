//! Inclusive associative scans with logarithmic combine depth.
//!
//! The scan runs the classic two-phase tree algorithm over a balanced binary
//! tree whose leaf count is the next power of two of the input length:
//!
//! * **upsweep** combines sibling pairs bottom-up, storing the reduction of
//!   every subtree at its parent;
//! * **downsweep** pushes prefixes top-down (`pref(L) = pref(P)`,
//!   `pref(R) = pref(P) ⊗ val(L)`); the last layer folds the leaf values into
//!   their prefixes directly, so the inclusive result needs no extra pass.
//!
//! Both phases execute `log2(padded length)` layers, so a scan of length `n`
//! performs exactly [`scan_depth(n)`](scan_depth) combine layers.
//!
//! Padding slots and the root prefix are the adjoined identity of the
//! monoid (`None` internally). Combining with it is a copy, never a call to
//! the user operator, so any associative operator works without a
//! hand-written neutral element and padded slots cost nothing.
//!
//! The [`Executor`] decides only *how* the combines of one layer are
//! evaluated. The tree, and therefore the order in which every combine is
//! applied, is fixed by the input length, so the sequential and parallel
//! executors produce bitwise identical results.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// `out[i] = a[0] ⊗ … ⊗ a[i]`
    Forward,
    /// `out[i] = a[i] ⊗ … ⊗ a[n-1]`
    Reverse,
}

/// Strategy for evaluating the independent combines inside one tree layer.
#[derive(Clone)]
pub enum Executor {
    Sequential,
    Parallel(Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Executor::Sequential => write!(f, "Sequential"),
            Executor::Parallel(pool) => write!(f, "Parallel({} threads)", pool.current_num_threads()),
        }
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::Sequential
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor::Sequential
    }

    /// Data-parallel executor backed by a dedicated pool of `threads` workers.
    pub fn parallel(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Settings("thread count must be positive".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Settings(format!("thread pool: {e}")))?;
        Ok(Executor::Parallel(Arc::new(pool)))
    }

    pub fn threads(&self) -> usize {
        match self {
            Executor::Sequential => 1,
            Executor::Parallel(pool) => pool.current_num_threads(),
        }
    }

    pub fn is_parallel(&self) -> bool {
        matches!(self, Executor::Parallel(_))
    }

    /// Evaluates `f(0..n)` and collects the results in index order.
    pub fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Executor::Sequential => (0..n).map(f).collect(),
            Executor::Parallel(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    /// Fallible [`map`](Self::map). The error reported is the one with the
    /// lowest index, independent of the executor.
    pub fn try_map<R, F>(&self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

/// Which phase of the tree a combine belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Upsweep,
    Downsweep,
    Leaf,
}

/// Position of a combine inside the scan tree. Two scans of the same length
/// and direction visit exactly the same set of nodes, which is what allows
/// per-node intermediates from one scan to be replayed in another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub phase: Phase,
    /// Tree level of the value being produced (leaves are level 0).
    pub level: usize,
    pub slot: usize,
}

/// Shape of the combination tree for a given input length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanPlan {
    pub length: usize,
    pub direction: Direction,
    pub padded: usize,
    pub levels: usize,
}

impl ScanPlan {
    pub fn new(length: usize, direction: Direction) -> Result<Self> {
        if length == 0 {
            return Err(Error::EmptyScan);
        }
        let padded = length.next_power_of_two();
        Ok(ScanPlan {
            length,
            direction,
            padded,
            levels: padded.trailing_zeros() as usize,
        })
    }

    /// Combine layers executed: one upsweep and one downsweep layer per level.
    pub fn depth(&self) -> usize {
        2 * self.levels
    }
}

/// Number of combine layers a scan of `length` elements executes,
/// `2·⌈log2(next_pow2(length))⌉`.
pub fn scan_depth(length: usize) -> usize {
    ScanPlan::new(length.max(1), Direction::Forward)
        .map(|p| p.depth())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput<E> {
    pub values: Vec<E>,
    /// Combine layers actually executed (instrumented, not computed).
    pub layers: usize,
}

/// Per-node auxiliary values recorded by [`traced_scan`].
#[derive(Clone, Debug)]
pub struct ScanTrace<X> {
    nodes: HashMap<NodeId, X>,
}

impl<X> ScanTrace<X> {
    pub fn get(&self, node: NodeId) -> Option<&X> {
        self.nodes.get(&node)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Infallible inclusive scan.
pub fn inclusive_scan<E, F>(
    elements: Vec<E>,
    combine: F,
    direction: Direction,
    exec: &Executor,
) -> Result<ScanOutput<E>>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> E + Sync + Send,
{
    try_inclusive_scan(elements, |a, b| Ok(combine(a, b)), direction, exec)
}

/// Inclusive scan with a fallible combine. The first failing combine (in
/// tree order) aborts the scan.
pub fn try_inclusive_scan<E, F>(
    elements: Vec<E>,
    combine: F,
    direction: Direction,
    exec: &Executor,
) -> Result<ScanOutput<E>>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> Result<E> + Sync + Send,
{
    let (out, _) = run(elements, direction, exec, false, |_, a, b| {
        combine(a, b).map(|e| (e, ()))
    })?;
    Ok(out)
}

/// Node-aware scan: `combine` receives the [`NodeId`] it is evaluating.
pub fn node_scan<E, F>(
    elements: Vec<E>,
    combine: F,
    direction: Direction,
    exec: &Executor,
) -> Result<ScanOutput<E>>
where
    E: Clone + Send + Sync,
    F: Fn(NodeId, &E, &E) -> Result<E> + Sync + Send,
{
    let (out, _) = run(elements, direction, exec, false, |node, a, b| {
        combine(node, a, b).map(|e| (e, ()))
    })?;
    Ok(out)
}

/// Node-aware scan whose combine also emits an auxiliary value per node;
/// the auxiliaries are returned keyed by [`NodeId`].
pub fn traced_scan<E, X, F>(
    elements: Vec<E>,
    combine: F,
    direction: Direction,
    exec: &Executor,
) -> Result<(ScanOutput<E>, ScanTrace<X>)>
where
    E: Clone + Send + Sync,
    X: Send,
    F: Fn(NodeId, &E, &E) -> Result<(E, X)> + Sync + Send,
{
    run(elements, direction, exec, true, combine)
}

type Slot<E> = Option<E>;

fn run<E, X, F>(
    elements: Vec<E>,
    direction: Direction,
    exec: &Executor,
    keep_trace: bool,
    combine: F,
) -> Result<(ScanOutput<E>, ScanTrace<X>)>
where
    E: Clone + Send + Sync,
    X: Send,
    F: Fn(NodeId, &E, &E) -> Result<(E, X)> + Sync + Send,
{
    let plan = ScanPlan::new(elements.len(), direction)?;
    let n = plan.length;

    let mut leaves: Vec<Slot<E>> = Vec::with_capacity(plan.padded);
    match direction {
        Direction::Forward => leaves.extend(elements.into_iter().map(Some)),
        Direction::Reverse => leaves.extend(elements.into_iter().rev().map(Some)),
    }
    leaves.resize_with(plan.padded, || None);

    // In reversed index space the suffix scan is a prefix scan of the
    // flipped operator.
    let apply = |node: NodeId, earlier: &E, later: &E| -> Result<(E, X)> {
        match direction {
            Direction::Forward => combine(node, earlier, later),
            Direction::Reverse => combine(node, later, earlier),
        }
    };
    let join = |node: NodeId, a: &Slot<E>, b: &Slot<E>| -> Result<(Slot<E>, Option<X>)> {
        match (a, b) {
            (Some(a), Some(b)) => apply(node, a, b).map(|(e, x)| (Some(e), Some(x))),
            (Some(a), None) => Ok((Some(a.clone()), None)),
            (None, Some(b)) => Ok((Some(b.clone()), None)),
            (None, None) => Ok((None, None)),
        }
    };

    let mut trace = HashMap::new();
    let mut record = |node: NodeId, x: Option<X>| {
        if keep_trace {
            if let Some(x) = x {
                trace.insert(node, x);
            }
        }
    };
    let mut layers = 0usize;

    // Upsweep: up[l] holds the subtree reductions at level l.
    let mut up: Vec<Vec<Slot<E>>> = Vec::with_capacity(plan.levels + 1);
    up.push(leaves);
    for level in 1..=plan.levels {
        let below = &up[level - 1];
        let produced = exec.try_map(below.len() / 2, |i| {
            let node = NodeId { phase: Phase::Upsweep, level, slot: i };
            join(node, &below[2 * i], &below[2 * i + 1])
        })?;
        layers += 1;
        let mut row = Vec::with_capacity(produced.len());
        for (i, (v, x)) in produced.into_iter().enumerate() {
            record(NodeId { phase: Phase::Upsweep, level, slot: i }, x);
            row.push(v);
        }
        up.push(row);
    }

    let inclusive: Vec<Slot<E>> = if plan.levels == 0 {
        up.pop().unwrap_or_default()
    } else {
        // Prefix of the root is the identity.
        let mut prefix: Vec<Slot<E>> = vec![None];
        for level in (1..plan.levels).rev() {
            // Children of the nodes at `level + 1` live at `level`.
            let vals = &up[level];
            let parents = &prefix;
            let produced = exec.try_map(2 * parents.len(), |c| {
                let p = &parents[c / 2];
                if c % 2 == 0 {
                    Ok((p.clone(), None))
                } else {
                    let node = NodeId { phase: Phase::Downsweep, level, slot: c };
                    join(node, p, &vals[c - 1])
                }
            })?;
            layers += 1;
            let mut row = Vec::with_capacity(produced.len());
            for (c, (v, x)) in produced.into_iter().enumerate() {
                record(NodeId { phase: Phase::Downsweep, level, slot: c }, x);
                row.push(v);
            }
            prefix = row;
        }
        // Leaf layer: inclusive(L) = pref(P) ⊗ leaf(L), inclusive(R) = pref(P) ⊗ val(P).
        let leaves = &up[0];
        let pairs = &up[1];
        let parents = &prefix;
        let produced = exec.try_map(n, |c| {
            let p = &parents[c / 2];
            let node = NodeId { phase: Phase::Leaf, level: 0, slot: c };
            if c % 2 == 0 {
                join(node, p, &leaves[c])
            } else {
                join(node, p, &pairs[c / 2])
            }
        })?;
        layers += 1;
        let mut row = Vec::with_capacity(n);
        for (c, (v, x)) in produced.into_iter().enumerate() {
            record(NodeId { phase: Phase::Leaf, level: 0, slot: c }, x);
            row.push(v);
        }
        row
    };

    let mut values: Vec<E> = inclusive
        .into_iter()
        .take(n)
        .map(|v| v.expect("scan slots below the input length are always populated"))
        .collect();
    if direction == Direction::Reverse {
        values.reverse();
    }
    Ok((ScanOutput { values, layers }, ScanTrace { nodes: trace }))
}
