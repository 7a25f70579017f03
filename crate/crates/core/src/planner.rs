//! Static arena layout for every tensor a fusion plan touches.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::graph::TensorId;
use crate::optimizer::FusionPlan;

/// Byte alignment of every tensor offset in the arena.
pub const ALIGN: usize = 16;

/// Live range in unit indices, both ends inclusive. Network inputs are
/// defined at `-1`; network outputs stay live through `plan.units.len()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LifetimeInterval {
    pub tensor: TensorId,
    pub def: isize,
    pub last_use: isize,
    /// Size rounded up to [`ALIGN`].
    pub bytes: usize,
}

impl LifetimeInterval {
    pub fn overlaps(&self, other: &LifetimeInterval) -> bool {
        self.def <= other.last_use && other.def <= self.last_use
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferAssignment {
    /// Byte offset of each tensor in the arena.
    pub offsets: BTreeMap<TensorId, usize>,
    pub intervals: Vec<LifetimeInterval>,
    /// Whether unit `i` writes over its preferred input.
    pub in_place: Vec<bool>,
    /// Tensors with a range of their own: network inputs and outputs.
    pub dedicated: Vec<TensorId>,
    pub arena_bytes: usize,
}

impl BufferAssignment {
    pub fn offset(&self, t: TensorId) -> usize {
        self.offsets[&t]
    }

    pub fn interval(&self, t: TensorId) -> &LifetimeInterval {
        self.intervals
            .iter()
            .find(|i| i.tensor == t)
            .expect("tensor has an interval")
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for iv in &self.intervals {
            let off = self.offsets[&iv.tensor];
            let _ = writeln!(
                out,
                "{}: [{}, {}] bytes {}..{}{}",
                iv.tensor,
                iv.def,
                iv.last_use,
                off,
                off + iv.bytes,
                if self.dedicated.contains(&iv.tensor) {
                    " dedicated"
                } else {
                    ""
                }
            );
        }
        let _ = writeln!(out, "arena {} bytes", self.arena_bytes);
        out
    }
}

fn padded_bytes(elements: usize) -> usize {
    (elements * 4).div_ceil(ALIGN).max(1) * ALIGN
}

/// Scans the schedule once. Inputs first, then unit outputs in definition
/// order.
pub fn compute_lifetimes(plan: &FusionPlan) -> Vec<LifetimeInterval> {
    let end = plan.units.len() as isize;
    let mut intervals: Vec<LifetimeInterval> = Vec::new();
    let mut index: BTreeMap<TensorId, usize> = BTreeMap::new();
    let mut define = |t: TensorId, def: isize, intervals: &mut Vec<LifetimeInterval>| {
        index.insert(t, intervals.len());
        intervals.push(LifetimeInterval {
            tensor: t,
            def,
            last_use: def,
            bytes: padded_bytes(plan.shape(t).element_count()),
        });
    };
    for &t in &plan.inputs {
        define(t, -1, &mut intervals);
    }
    for (u, unit) in plan.units.iter().enumerate() {
        define(unit.output, u as isize, &mut intervals);
    }
    for (u, unit) in plan.units.iter().enumerate() {
        for t in &unit.inputs {
            let iv = &mut intervals[index[t]];
            iv.last_use = iv.last_use.max(u as isize);
        }
    }
    for t in &plan.outputs {
        intervals[index[t]].last_use = end;
    }
    intervals
}

/// Dedicated ranges for network inputs and outputs come first. Each
/// intermediate is then placed, in definition order, at the bottom or top
/// of a scratch window as large as the peak live intermediate size,
/// taking the end opposite to its producer's input so consecutive tensors
/// of a chain never collide. When neither end fits, first-fit above the
/// window. A unit runs in place when its preferred input dies at that
/// unit and neither tensor is dedicated.
pub fn assign_buffers(plan: &FusionPlan) -> BufferAssignment {
    let intervals = compute_lifetimes(plan);
    let by_tensor: BTreeMap<TensorId, LifetimeInterval> =
        intervals.iter().map(|iv| (iv.tensor, *iv)).collect();

    let mut offsets = BTreeMap::new();
    let mut dedicated = Vec::new();
    let mut cursor = 0usize;
    for &t in plan.inputs.iter().chain(&plan.outputs) {
        if let std::collections::btree_map::Entry::Vacant(e) = offsets.entry(t) {
            e.insert(cursor);
            cursor += by_tensor[&t].bytes;
            dedicated.push(t);
        }
    }
    let base = cursor;
    let scratch: Vec<&LifetimeInterval> = intervals
        .iter()
        .filter(|iv| !dedicated.contains(&iv.tensor))
        .collect();
    let window = (0..plan.units.len() as isize)
        .map(|u| {
            scratch
                .iter()
                .filter(|iv| iv.def <= u && u <= iv.last_use)
                .map(|iv| iv.bytes)
                .sum::<usize>()
        })
        .max()
        .unwrap_or(0);
    let top_end = base + window;

    let mut arena = cursor;
    let mut placed: Vec<LifetimeInterval> = Vec::new();
    let mut at_top: BTreeMap<TensorId, bool> = BTreeMap::new();
    let mut in_place = vec![false; plan.units.len()];

    for (u, unit) in plan.units.iter().enumerate() {
        let t = unit.output;
        if offsets.contains_key(&t) {
            continue;
        }
        let iv = by_tensor[&t];
        let alias = unit.in_place_preference.and_then(|i| {
            let src = unit.inputs[i];
            let s = by_tensor[&src];
            let ok = !dedicated.contains(&src)
                && s.last_use == u as isize
                && s.bytes == iv.bytes
                && unit.inputs.iter().filter(|&&x| x == src).count() == 1;
            ok.then_some(src)
        });
        let (offset, top) = if let Some(src) = alias {
            in_place[u] = true;
            (offsets[&src], at_top[&src])
        } else {
            let busy: Vec<(usize, usize)> = placed
                .iter()
                .filter(|p| p.overlaps(&iv))
                .map(|p| (offsets[&p.tensor], offsets[&p.tensor] + p.bytes))
                .collect();
            let prefer_top = unit
                .inputs
                .first()
                .and_then(|src| at_top.get(src))
                .is_some_and(|&top| !top);
            let bottom = lowest_fit(&busy, iv.bytes, base).filter(|&o| o + iv.bytes <= top_end);
            let top = highest_fit(&busy, iv.bytes, base, top_end);
            match (prefer_top, bottom, top) {
                (true, _, Some(o)) => (o, true),
                (_, Some(o), _) => (o, false),
                (false, None, Some(o)) => (o, true),
                _ => (
                    lowest_fit(&busy, iv.bytes, top_end).expect("unbounded fit"),
                    false,
                ),
            }
        };
        offsets.insert(t, offset);
        at_top.insert(t, top);
        placed.push(iv);
        arena = arena.max(offset + iv.bytes);
    }

    BufferAssignment {
        offsets,
        intervals,
        in_place,
        dedicated,
        arena_bytes: arena.max(ALIGN),
    }
}

fn fits(busy: &[(usize, usize)], start: usize, bytes: usize) -> bool {
    busy.iter().all(|&(s, e)| start + bytes <= s || e <= start)
}

fn lowest_fit(busy: &[(usize, usize)], bytes: usize, floor: usize) -> Option<usize> {
    std::iter::once(floor)
        .chain(busy.iter().map(|&(_, e)| e))
        .filter(|&o| o >= floor && fits(busy, o, bytes))
        .min()
}

fn highest_fit(
    busy: &[(usize, usize)],
    bytes: usize,
    floor: usize,
    ceiling: usize,
) -> Option<usize> {
    std::iter::once(ceiling)
        .chain(busy.iter().map(|&(s, _)| s))
        .filter_map(|end| end.checked_sub(bytes))
        .filter(|&o| o >= floor && o + bytes <= ceiling && fits(busy, o, bytes))
        .max()
}
