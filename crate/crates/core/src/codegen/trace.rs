//! Symbolic record of everything the code generator emitted.

use std::fmt::{self, Write as _};

use super::asm::Insn;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    UnitStart {
        unit: usize,
        kind: &'static str,
    },
    /// An elementwise batch of `lanes` elements with `k` reserved
    /// temporaries. The body that follows runs `repeat` times.
    Batch {
        lanes: usize,
        repeat: usize,
        k: usize,
    },
    /// One input block times one output block of a matrix-vector product.
    MatvecBlock {
        inputs: usize,
        outputs: usize,
    },
    MatvecBlockEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceItem {
    Insn {
        offset: usize,
        len: usize,
        insn: Insn,
    },
    Marker(Marker),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub items: Vec<TraceItem>,
}

impl Trace {
    pub fn instructions(&self) -> impl Iterator<Item = (usize, usize, &Insn)> {
        self.items.iter().filter_map(|item| match item {
            TraceItem::Insn { offset, len, insn } => Some((*offset, *len, insn)),
            TraceItem::Marker(_) => None,
        })
    }

    pub fn markers(&self) -> impl Iterator<Item = &Marker> {
        self.items.iter().filter_map(|item| match item {
            TraceItem::Marker(m) => Some(m),
            TraceItem::Insn { .. } => None,
        })
    }

    /// Items belonging to unit `unit`, markers included.
    pub fn unit(&self, unit: usize) -> &[TraceItem] {
        let start = |u: usize| {
            self.items.iter().position(
                |i| matches!(i, TraceItem::Marker(Marker::UnitStart { unit, .. }) if *unit == u),
            )
        };
        let Some(begin) = start(unit) else {
            return &[];
        };
        let end = start(unit + 1).unwrap_or_else(|| {
            // the shared epilogue follows the last unit
            self.items.len()
        });
        &self.items[begin..end]
    }

    pub fn listing(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let _ = match item {
                TraceItem::Insn { offset, insn, .. } => writeln!(out, "{offset:6x}  {insn}"),
                TraceItem::Marker(m) => writeln!(out, "        ; {m}"),
            };
        }
        out
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marker::UnitStart { unit, kind } => write!(f, "unit {unit} {kind}"),
            Marker::Batch { lanes, repeat, k } => write!(f, "batch {lanes} lanes x{repeat} k={k}"),
            Marker::MatvecBlock { inputs, outputs } => write!(f, "block {outputs}x{inputs}"),
            Marker::MatvecBlockEnd => write!(f, "end block"),
        }
    }
}
