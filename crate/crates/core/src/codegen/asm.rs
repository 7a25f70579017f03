//! The x86-64 instruction subset the kernels use: legacy-encoded SSE up to
//! SSE4.1 plus the integer instructions needed for addressing and loops.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gpr {
    Rax = 0,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Gpr {
    pub fn index(self) -> u8 {
        self as u8
    }

    fn low(self) -> u8 {
        self.index() & 7
    }

    fn high(self) -> bool {
        self.index() >= 8
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 16] = [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ];
        NAMES[self.index() as usize]
    }

    fn name32(self) -> &'static str {
        const NAMES: [&str; 16] = [
            "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d",
            "r12d", "r13d", "r14d", "r15d",
        ];
        NAMES[self.index() as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Xmm(pub u8);

impl fmt::Display for Xmm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "xmm{}", self.0)
    }
}

/// `[base + disp]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mem {
    pub base: Gpr,
    pub disp: i32,
}

impl Mem {
    pub fn new(base: Gpr, disp: i32) -> Self {
        Mem { base, disp }
    }

    pub fn offset(self, bytes: i32) -> Self {
        Mem {
            base: self.base,
            disp: self.disp + bytes,
        }
    }
}

impl fmt::Display for Mem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.disp {
            0 => write!(f, "[{}]", self.base.name()),
            d if d < 0 => write!(f, "[{}-{:#x}]", self.base.name(), -(d as i64)),
            d => write!(f, "[{}+{:#x}]", self.base.name(), d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Xmm),
    Mem(Mem),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(x) => x.fmt(f),
            Operand::Mem(m) => m.fmt(f),
        }
    }
}

impl From<Xmm> for Operand {
    fn from(x: Xmm) -> Self {
        Operand::Reg(x)
    }
}

impl From<Mem> for Operand {
    fn from(m: Mem) -> Self {
        Operand::Mem(m)
    }
}

/// Two-operand packed operations `dst = dst op src` (moves: `dst = src`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SseOp {
    Movaps,
    Movups,
    Addps,
    Subps,
    Mulps,
    Divps,
    Minps,
    Maxps,
    Andps,
    Andnps,
    Orps,
    Xorps,
    Cvtps2dq,
    Paddd,
}

impl SseOp {
    /// `(mandatory prefix, opcode after 0F)`.
    fn encoding(self) -> (Option<u8>, u8) {
        match self {
            SseOp::Movaps => (None, 0x28),
            SseOp::Movups => (None, 0x10),
            SseOp::Addps => (None, 0x58),
            SseOp::Mulps => (None, 0x59),
            SseOp::Subps => (None, 0x5C),
            SseOp::Minps => (None, 0x5D),
            SseOp::Divps => (None, 0x5E),
            SseOp::Maxps => (None, 0x5F),
            SseOp::Andps => (None, 0x54),
            SseOp::Andnps => (None, 0x55),
            SseOp::Orps => (None, 0x56),
            SseOp::Xorps => (None, 0x57),
            SseOp::Cvtps2dq => (Some(0x66), 0x5B),
            SseOp::Paddd => (Some(0x66), 0xFE),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            SseOp::Movaps => "movaps",
            SseOp::Movups => "movups",
            SseOp::Addps => "addps",
            SseOp::Subps => "subps",
            SseOp::Mulps => "mulps",
            SseOp::Divps => "divps",
            SseOp::Minps => "minps",
            SseOp::Maxps => "maxps",
            SseOp::Andps => "andps",
            SseOp::Andnps => "andnps",
            SseOp::Orps => "orps",
            SseOp::Xorps => "xorps",
            SseOp::Cvtps2dq => "cvtps2dq",
            SseOp::Paddd => "paddd",
        }
    }

    /// Whether a memory source must be 16-byte aligned.
    pub fn needs_alignment(self) -> bool {
        self != SseOp::Movups
    }
}

/// Operations with an 8-bit immediate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SseImmOp {
    Pshufd,
    Cmpps,
    /// Memory form reads one float into the lane chosen by `imm[5:4]`.
    Insertps,
}

impl SseImmOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            SseImmOp::Pshufd => "pshufd",
            SseImmOp::Cmpps => "cmpps",
            SseImmOp::Insertps => "insertps",
        }
    }
}

/// Stores from an XMM register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreOp {
    Movaps,
    Movups,
    /// Lane 0.
    Movss,
    /// Lanes 0 and 1.
    Movq,
}

impl StoreOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            StoreOp::Movaps => "movaps",
            StoreOp::Movups => "movups",
            StoreOp::Movss => "movss",
            StoreOp::Movq => "movq",
        }
    }
}

/// Scalar loads that zero the untouched upper lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarLoad {
    Movss,
    Movq,
}

impl ScalarLoad {
    pub fn mnemonic(self) -> &'static str {
        match self {
            ScalarLoad::Movss => "movss",
            ScalarLoad::Movq => "movq",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Insn {
    Sse {
        op: SseOp,
        dst: Xmm,
        src: Operand,
    },
    SseImm {
        op: SseImmOp,
        dst: Xmm,
        src: Operand,
        imm: u8,
    },
    Store {
        op: StoreOp,
        dst: Mem,
        src: Xmm,
    },
    LoadScalar {
        op: ScalarLoad,
        dst: Xmm,
        src: Mem,
    },
    /// Stores lane `lane` of `src` as one float.
    Extractps {
        dst: Mem,
        src: Xmm,
        lane: u8,
    },
    /// `mov r32, imm32`, zero-extending into the full register.
    MovImm32 {
        dst: Gpr,
        imm: u32,
    },
    MovImm64 {
        dst: Gpr,
        imm: u64,
    },
    MovReg {
        dst: Gpr,
        src: Gpr,
    },
    Lea {
        dst: Gpr,
        src: Mem,
    },
    AddImm {
        dst: Gpr,
        imm: i32,
    },
    SubImm {
        dst: Gpr,
        imm: i32,
    },
    Push(Gpr),
    Pop(Gpr),
    Call(Gpr),
    Ret,
    /// Jump to absolute code offset `target` if ZF is clear.
    Jnz {
        target: usize,
    },
}

impl Insn {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Insn::Sse { op, .. } => op.mnemonic(),
            Insn::SseImm { op, .. } => op.mnemonic(),
            Insn::Store { op, .. } => op.mnemonic(),
            Insn::LoadScalar { op, .. } => op.mnemonic(),
            Insn::Extractps { .. } => "extractps",
            Insn::MovImm32 { .. } | Insn::MovImm64 { .. } | Insn::MovReg { .. } => "mov",
            Insn::Lea { .. } => "lea",
            Insn::AddImm { .. } => "add",
            Insn::SubImm { .. } => "sub",
            Insn::Push(_) => "push",
            Insn::Pop(_) => "pop",
            Insn::Call(_) => "call",
            Insn::Ret => "ret",
            Insn::Jnz { .. } => "jnz",
        }
    }

    /// Every XMM register the instruction names.
    pub fn xmm_registers(&self) -> Vec<Xmm> {
        let mut regs = Vec::with_capacity(2);
        match *self {
            Insn::Sse { dst, src, .. } | Insn::SseImm { dst, src, .. } => {
                regs.push(dst);
                if let Operand::Reg(r) = src {
                    regs.push(r);
                }
            }
            Insn::Store { src, .. } | Insn::Extractps { src, .. } => regs.push(src),
            Insn::LoadScalar { dst, .. } => regs.push(dst),
            _ => {}
        }
        regs
    }

    /// Memory operand, if any, and whether it is written.
    pub fn memory(&self) -> Option<(Mem, bool)> {
        match *self {
            Insn::Sse {
                src: Operand::Mem(m),
                ..
            }
            | Insn::SseImm {
                src: Operand::Mem(m),
                ..
            }
            | Insn::LoadScalar { src: m, .. } => Some((m, false)),
            Insn::Store { dst, .. } | Insn::Extractps { dst, .. } => Some((dst, true)),
            _ => None,
        }
    }

    /// Whether this is the lane rotation used by the matrix-vector kernel.
    pub fn is_lane_rotation(&self) -> bool {
        matches!(
            self,
            Insn::SseImm {
                op: SseImmOp::Pshufd,
                dst,
                src: Operand::Reg(src),
                imm: ROTATE_LANES,
            } if dst == src
        )
    }

    /// Appends the encoding, assuming the instruction starts at `at`.
    pub fn encode(&self, at: usize, out: &mut Vec<u8>) {
        match *self {
            Insn::Sse { op, dst, src } => {
                let (prefix, opcode) = op.encoding();
                sse(out, prefix, &[opcode], dst.0, src, None);
            }
            Insn::SseImm { op, dst, src, imm } => {
                let (prefix, opcode): (Option<u8>, &[u8]) = match op {
                    SseImmOp::Pshufd => (Some(0x66), &[0x70]),
                    SseImmOp::Cmpps => (None, &[0xC2]),
                    SseImmOp::Insertps => (Some(0x66), &[0x3A, 0x21]),
                };
                sse(out, prefix, opcode, dst.0, src, Some(imm));
            }
            Insn::Store { op, dst, src } => {
                let (prefix, opcode) = match op {
                    StoreOp::Movaps => (None, 0x29),
                    StoreOp::Movups => (None, 0x11),
                    StoreOp::Movss => (Some(0xF3), 0x11),
                    StoreOp::Movq => (Some(0x66), 0xD6),
                };
                sse(out, prefix, &[opcode], src.0, Operand::Mem(dst), None);
            }
            Insn::LoadScalar { op, dst, src } => {
                let opcode = match op {
                    ScalarLoad::Movss => 0x10,
                    ScalarLoad::Movq => 0x7E,
                };
                sse(out, Some(0xF3), &[opcode], dst.0, Operand::Mem(src), None);
            }
            Insn::Extractps { dst, src, lane } => {
                sse(
                    out,
                    Some(0x66),
                    &[0x3A, 0x17],
                    src.0,
                    Operand::Mem(dst),
                    Some(lane),
                );
            }
            Insn::MovImm32 { dst, imm } => {
                if dst.high() {
                    out.push(0x41);
                }
                out.push(0xB8 + dst.low());
                out.extend_from_slice(&imm.to_le_bytes());
            }
            Insn::MovImm64 { dst, imm } => {
                out.push(0x48 | u8::from(dst.high()));
                out.push(0xB8 + dst.low());
                out.extend_from_slice(&imm.to_le_bytes());
            }
            Insn::MovReg { dst, src } => {
                out.push(0x48 | (u8::from(dst.high()) << 2) | u8::from(src.high()));
                out.push(0x8B);
                out.push(0xC0 | (dst.low() << 3) | src.low());
            }
            Insn::Lea { dst, src } => {
                out.push(0x48 | (u8::from(dst.high()) << 2) | u8::from(src.base.high()));
                out.push(0x8D);
                modrm_mem(out, dst.low(), src);
            }
            Insn::AddImm { dst, imm } => alu_imm(out, 0, dst, imm),
            Insn::SubImm { dst, imm } => alu_imm(out, 5, dst, imm),
            Insn::Push(r) => {
                if r.high() {
                    out.push(0x41);
                }
                out.push(0x50 + r.low());
            }
            Insn::Pop(r) => {
                if r.high() {
                    out.push(0x41);
                }
                out.push(0x58 + r.low());
            }
            Insn::Call(r) => {
                if r.high() {
                    out.push(0x41);
                }
                out.extend_from_slice(&[0xFF, 0xD0 | r.low()]);
            }
            Insn::Ret => out.push(0xC3),
            Insn::Jnz { target } => {
                let short = target as i64 - (at as i64 + 2);
                if (-128..=127).contains(&short) {
                    out.extend_from_slice(&[0x75, short as i8 as u8]);
                } else {
                    let near = target as i64 - (at as i64 + 6);
                    out.extend_from_slice(&[0x0F, 0x85]);
                    out.extend_from_slice(&(near as i32).to_le_bytes());
                }
            }
        }
    }
}

/// `pshufd` immediate moving lane `i + 1` into lane `i`.
pub const ROTATE_LANES: u8 = 0x39;

fn sse(
    out: &mut Vec<u8>,
    prefix: Option<u8>,
    opcode: &[u8],
    reg: u8,
    rm: Operand,
    imm: Option<u8>,
) {
    if let Some(p) = prefix {
        out.push(p);
    }
    let rex_r = u8::from(reg >= 8) << 2;
    let rex_b = match rm {
        Operand::Reg(x) => u8::from(x.0 >= 8),
        Operand::Mem(m) => u8::from(m.base.high()),
    };
    if rex_r | rex_b != 0 {
        out.push(0x40 | rex_r | rex_b);
    }
    out.push(0x0F);
    out.extend_from_slice(opcode);
    match rm {
        Operand::Reg(x) => out.push(0xC0 | ((reg & 7) << 3) | (x.0 & 7)),
        Operand::Mem(m) => modrm_mem(out, reg & 7, m),
    }
    if let Some(i) = imm {
        out.push(i);
    }
}

fn modrm_mem(out: &mut Vec<u8>, reg: u8, m: Mem) {
    let base = m.base.low();
    let (mode, disp_len) = if m.disp == 0 && base != 5 {
        (0b00, 0)
    } else if i8::try_from(m.disp).is_ok() {
        (0b01, 1)
    } else {
        (0b10, 4)
    };
    out.push((mode << 6) | (reg << 3) | base);
    if base == 4 {
        out.push(0x24);
    }
    match disp_len {
        1 => out.push(m.disp as i8 as u8),
        4 => out.extend_from_slice(&m.disp.to_le_bytes()),
        _ => {}
    }
}

fn alu_imm(out: &mut Vec<u8>, ext: u8, dst: Gpr, imm: i32) {
    out.push(0x48 | u8::from(dst.high()));
    if let Ok(small) = i8::try_from(imm) {
        out.extend_from_slice(&[0x83, 0xC0 | (ext << 3) | dst.low(), small as u8]);
    } else {
        out.extend_from_slice(&[0x81, 0xC0 | (ext << 3) | dst.low()]);
        out.extend_from_slice(&imm.to_le_bytes());
    }
}

impl fmt::Display for Insn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            Insn::Sse { dst, src, .. } => write!(f, "{m} {dst}, {src}"),
            Insn::SseImm { dst, src, imm, .. } => write!(f, "{m} {dst}, {src}, {imm:#04x}"),
            Insn::Store { dst, src, .. } => write!(f, "{m} {dst}, {src}"),
            Insn::LoadScalar { dst, src, .. } => write!(f, "{m} {dst}, {src}"),
            Insn::Extractps { dst, src, lane } => write!(f, "{m} {dst}, {src}, {lane}"),
            Insn::MovImm32 { dst, imm } => write!(f, "{m} {}, {imm:#x}", dst.name32()),
            Insn::MovImm64 { dst, imm } => write!(f, "{m} {}, {imm:#x}", dst.name()),
            Insn::MovReg { dst, src } => write!(f, "{m} {}, {}", dst.name(), src.name()),
            Insn::Lea { dst, src } => write!(f, "{m} {}, {src}", dst.name()),
            Insn::AddImm { dst, imm } | Insn::SubImm { dst, imm } => {
                write!(f, "{m} {}, {imm}", dst.name())
            }
            Insn::Push(r) | Insn::Pop(r) | Insn::Call(r) => write!(f, "{m} {}", r.name()),
            Insn::Ret => write!(f, "{m}"),
            Insn::Jnz { target } => write!(f, "{m} {target:#x}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(insn: Insn) -> Vec<u8> {
        let mut out = Vec::new();
        insn.encode(0, &mut out);
        out
    }

    #[test]
    fn known_encodings() {
        let x = |i| Xmm(i);
        let addps = Insn::Sse {
            op: SseOp::Addps,
            dst: x(0),
            src: Operand::Reg(x(1)),
        };
        assert_eq!(bytes(addps), [0x0F, 0x58, 0xC1]);
        let movaps = Insn::Sse {
            op: SseOp::Movaps,
            dst: x(9),
            src: Operand::Mem(Mem::new(Gpr::R12, 0x10)),
        };
        assert_eq!(bytes(movaps), [0x45, 0x0F, 0x28, 0x4C, 0x24, 0x10]);
        let pshufd = Insn::SseImm {
            op: SseImmOp::Pshufd,
            dst: x(0),
            src: Operand::Reg(x(0)),
            imm: ROTATE_LANES,
        };
        assert_eq!(bytes(pshufd), [0x66, 0x0F, 0x70, 0xC0, 0x39]);
        assert!(pshufd.is_lane_rotation());
        let movq = Insn::Store {
            op: StoreOp::Movq,
            dst: Mem::new(Gpr::Rdi, 0),
            src: x(2),
        };
        assert_eq!(bytes(movq), [0x66, 0x0F, 0xD6, 0x17]);
        assert_eq!(bytes(Insn::Push(Gpr::R12)), [0x41, 0x54]);
        assert_eq!(
            bytes(Insn::AddImm {
                dst: Gpr::R13,
                imm: 1000
            }),
            [0x49, 0x81, 0xC5, 0xE8, 0x03, 0x00, 0x00]
        );
        assert_eq!(
            bytes(Insn::Lea {
                dst: Gpr::R12,
                src: Mem::new(Gpr::Rsi, 0)
            }),
            [0x4C, 0x8D, 0x26]
        );
    }

    #[test]
    fn rbp_and_r13_bases_need_displacement() {
        let load = Insn::LoadScalar {
            op: ScalarLoad::Movss,
            dst: Xmm(0),
            src: Mem::new(Gpr::R13, 0),
        };
        assert_eq!(bytes(load), [0xF3, 0x41, 0x0F, 0x10, 0x45, 0x00]);
    }

    #[test]
    fn backward_jumps() {
        let mut out = vec![0x90; 10];
        Insn::Jnz { target: 0 }.encode(10, &mut out);
        assert_eq!(&out[10..], [0x75, 0xF4]);
        let mut out = vec![0x90; 300];
        Insn::Jnz { target: 0 }.encode(300, &mut out);
        assert_eq!(&out[300..], [0x0F, 0x85, 0xCE, 0xFE, 0xFF, 0xFF]);
    }

    #[test]
    fn formatting() {
        let insn = Insn::Sse {
            op: SseOp::Mulps,
            dst: Xmm(3),
            src: Operand::Mem(Mem::new(Gpr::Rsi, 32)),
        };
        assert_eq!(insn.to_string(), "mulps xmm3, [rsi+0x20]");
    }
}
