//! PIM command set, DPA dynamic-command encoding and command-stack containers.
//!
//! A [`CommandStack`] is an ordered list of concrete [`PimCommand`]s and
//! [`DpaCommand`]s. A `DYN-LOOP` repeats the next `LE` PIM commands `LB`
//! times; a `DYN-MODI` marks one field of the PIM command that follows it as a
//! virtual operand: on iteration `i` the field takes `value + i * coefficient`.
//!
//! Two on-disk forms are provided: a fixed-width little-endian binary format
//! (used for command-buffer budget accounting) and a line-oriented text form.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! header  : "PIMS" | version:u8 | layer:u32 | op:u8 | module:u32 | count:u32   (18 bytes)
//! 0x01 WR-INP   : gpr:u32                                                    (5 bytes)
//! 0x02 DOT-PROD : row:u32 | col:u32 | width:u32                              (13 bytes)
//! 0x03 RD-OUT   : gpr:u32                                                    (5 bytes)
//! 0x10 DYN-LOOP : lb:u32 (0 = token-derived) | le:u32                        (9 bytes)
//! 0x11 DYN-MODI : target:u8 (0 row, 1 col, 2 gpr) | coefficient:i32          (6 bytes)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PIMS";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 18;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("loop body is empty")]
    EmptyBody,
    #[error("loop bound must be at least 1")]
    ZeroBound,
    #[error("dynamic field position {position} is outside a body of {len} commands")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("command {position} has no {field} field")]
    MissingField { position: usize, field: Field },
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("bad magic or version")]
    BadHeader,
    #[error("unknown opcode 0x{tag:02x} at byte {offset}")]
    UnknownOpcode { tag: u8, offset: usize },
    #[error("unknown op kind {0}")]
    UnknownOpKind(u8),
    #[error("unknown modifier target {0}")]
    UnknownTarget(u8),
    #[error("length prefix says {declared} entries but {trailing} trailing bytes remain")]
    LengthMismatch { declared: u32, trailing: usize },
    #[error("text parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Operand field of a PIM command that a `DYN-MODI` can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    Row,
    Col,
    Gpr,
}

impl Field {
    fn code(self) -> u8 {
        match self {
            Field::Row => 0,
            Field::Col => 1,
            Field::Gpr => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, IsaError> {
        match c {
            0 => Ok(Field::Row),
            1 => Ok(Field::Col),
            2 => Ok(Field::Gpr),
            other => Err(IsaError::UnknownTarget(other)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Field::Row => "row",
            Field::Col => "col",
            Field::Gpr => "gpr",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bank-level PIM command.
///
/// `DotProd` multiplies `width` elements of DRAM row `row`, starting at element
/// `col`, against the global buffer at the same column positions, on every
/// processing unit of the module, accumulating into the out-registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PimCommand {
    WrInp { gpr: u32 },
    DotProd { row: u32, col: u32, width: u32 },
    RdOut { gpr: u32 },
}

impl PimCommand {
    pub fn field(&self, field: Field) -> Option<u32> {
        match (self, field) {
            (PimCommand::WrInp { gpr }, Field::Gpr) | (PimCommand::RdOut { gpr }, Field::Gpr) => Some(*gpr),
            (PimCommand::DotProd { row, .. }, Field::Row) => Some(*row),
            (PimCommand::DotProd { col, .. }, Field::Col) => Some(*col),
            _ => None,
        }
    }

    pub fn has_field(&self, field: Field) -> bool {
        self.field(field).is_some()
    }

    /// Returns a copy with `field` replaced; `None` if the command has no such field.
    pub fn with_field(&self, field: Field, value: u32) -> Option<PimCommand> {
        let mut out = *self;
        match (&mut out, field) {
            (PimCommand::WrInp { gpr }, Field::Gpr) | (PimCommand::RdOut { gpr }, Field::Gpr) => *gpr = value,
            (PimCommand::DotProd { row, .. }, Field::Row) => *row = value,
            (PimCommand::DotProd { col, .. }, Field::Col) => *col = value,
            _ => return None,
        }
        Some(out)
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            PimCommand::WrInp { .. } => "WR-INP",
            PimCommand::DotProd { .. } => "DOT-PROD",
            PimCommand::RdOut { .. } => "RD-OUT",
        }
    }
}

/// Loop bound of a `DYN-LOOP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopBound {
    Fixed(u32),
    /// Resolved by the dispatcher from the request's current token count.
    TokenRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DpaCommand {
    DynLoop { bound: LoopBound, entry: u32 },
    DynModi { target: Field, coefficient: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Entry {
    Pim(PimCommand),
    Dpa(DpaCommand),
}

impl From<PimCommand> for Entry {
    fn from(c: PimCommand) -> Self {
        Entry::Pim(c)
    }
}

impl From<DpaCommand> for Entry {
    fn from(c: DpaCommand) -> Self {
        Entry::Dpa(c)
    }
}

/// Decoder operation a stack implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    QkvGen,
    Qkt,
    Sv,
    Proj,
    Ffn1,
    Ffn2,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [OpKind::QkvGen, OpKind::Qkt, OpKind::Sv, OpKind::Proj, OpKind::Ffn1, OpKind::Ffn2];

    pub fn code(self) -> u8 {
        match self {
            OpKind::QkvGen => 0,
            OpKind::Qkt => 1,
            OpKind::Sv => 2,
            OpKind::Proj => 3,
            OpKind::Ffn1 => 4,
            OpKind::Ffn2 => 5,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, IsaError> {
        OpKind::ALL.get(c as usize).copied().ok_or(IsaError::UnknownOpKind(c))
    }

    pub fn is_attention(self) -> bool {
        matches!(self, OpKind::Qkt | OpKind::Sv)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::QkvGen => "QKV_GEN",
            OpKind::Qkt => "QKT",
            OpKind::Sv => "SV",
            OpKind::Proj => "PROJ",
            OpKind::Ffn1 => "FFN1",
            OpKind::Ffn2 => "FFN2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackMeta {
    pub layer: u32,
    pub op: OpKind,
    pub module: u32,
}

impl Default for StackMeta {
    fn default() -> Self {
        StackMeta { layer: 0, op: OpKind::Qkt, module: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommandStack {
    pub meta: StackMeta,
    pub entries: Vec<Entry>,
}

impl CommandStack {
    pub fn new(meta: StackMeta) -> Self {
        CommandStack { meta, entries: Vec::new() }
    }

    pub fn from_commands(meta: StackMeta, cmds: impl IntoIterator<Item = PimCommand>) -> Self {
        CommandStack { meta, entries: cmds.into_iter().map(Entry::Pim).collect() }
    }

    pub fn push(&mut self, e: impl Into<Entry>) {
        self.entries.push(e.into());
    }

    pub fn extend_from(&mut self, other: &CommandStack) {
        self.entries.extend_from_slice(&other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pim_count(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, Entry::Pim(_))).count()
    }

    pub fn has_dpa(&self) -> bool {
        self.entries.iter().any(|e| matches!(e, Entry::Dpa(_)))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.entries.iter().map(entry_bytes).sum::<usize>()
    }
}

fn entry_bytes(e: &Entry) -> usize {
    match e {
        Entry::Pim(PimCommand::WrInp { .. }) | Entry::Pim(PimCommand::RdOut { .. }) => 5,
        Entry::Pim(PimCommand::DotProd { .. }) => 13,
        Entry::Dpa(DpaCommand::DynLoop { .. }) => 9,
        Entry::Dpa(DpaCommand::DynModi { .. }) => 6,
    }
}

/// Builds a loop-encoded stack.
///
/// `dyn_fields` lists `(body position, target field, coefficient)`. Several
/// modifiers may target the same command as long as they name distinct fields.
pub fn encode_loop(
    meta: StackMeta,
    body: &[PimCommand],
    dyn_fields: &[(usize, Field, i32)],
    bound: LoopBound,
) -> Result<CommandStack, IsaError> {
    if body.is_empty() {
        return Err(IsaError::EmptyBody);
    }
    if bound == LoopBound::Fixed(0) {
        return Err(IsaError::ZeroBound);
    }
    for &(position, field, _) in dyn_fields {
        if position >= body.len() {
            return Err(IsaError::PositionOutOfRange { position, len: body.len() });
        }
        if !body[position].has_field(field) {
            return Err(IsaError::MissingField { position, field });
        }
    }
    let mut stack = CommandStack::new(meta);
    stack.push(DpaCommand::DynLoop { bound, entry: body.len() as u32 });
    for (i, cmd) in body.iter().enumerate() {
        for &(_, target, coefficient) in dyn_fields.iter().filter(|d| d.0 == i) {
            stack.push(DpaCommand::DynModi { target, coefficient });
        }
        stack.push(*cmd);
    }
    Ok(stack)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    LoopOverrun,
    DanglingModifier,
    MissingTarget,
    DuplicateModifier,
    NestedLoop,
    ZeroLoopParam,
    ModifierOutsideLoop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entry {}: {}", self.index, self.message)
    }
}

/// Checks the structural invariants of a stack. An empty result means the
/// stack is well formed.
pub fn validate_stack(stack: &CommandStack) -> Vec<Violation> {
    let mut out = Vec::new();
    let entries = &stack.entries;
    // Remaining PIM commands of the innermost open loop body.
    let mut in_loop: usize = 0;
    let mut pending: Vec<(usize, Field)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match e {
            Entry::Dpa(DpaCommand::DynLoop { bound, entry }) => {
                if !pending.is_empty() {
                    out.push(Violation {
                        index: pending[0].0,
                        kind: ViolationKind::DanglingModifier,
                        message: "dangling modifier: followed by a loop instead of a PIM command".into(),
                    });
                    pending.clear();
                }
                if in_loop > 0 {
                    out.push(Violation {
                        index: i,
                        kind: ViolationKind::NestedLoop,
                        message: "nested loop inside a loop body".into(),
                    });
                }
                if *entry == 0 || *bound == LoopBound::Fixed(0) {
                    out.push(Violation {
                        index: i,
                        kind: ViolationKind::ZeroLoopParam,
                        message: "loop bound and loop entry must be at least 1".into(),
                    });
                }
                let remaining = entries[i + 1..].iter().filter(|e| matches!(e, Entry::Pim(_))).count();
                if (*entry as usize) > remaining {
                    out.push(Violation {
                        index: i,
                        kind: ViolationKind::LoopOverrun,
                        message: format!("loop overruns stack: LE={} but {} PIM commands follow", entry, remaining),
                    });
                }
                in_loop = *entry as usize;
            }
            Entry::Dpa(DpaCommand::DynModi { target, .. }) => {
                if in_loop == 0 {
                    out.push(Violation {
                        index: i,
                        kind: ViolationKind::ModifierOutsideLoop,
                        message: "modifier outside any loop body".into(),
                    });
                }
                if let Some(prev) = pending.last() {
                    if prev.1 == *target || pending.iter().any(|p| p.1 == *target) {
                        out.push(Violation {
                            index: i,
                            kind: ViolationKind::DuplicateModifier,
                            message: format!("second modifier for field {target}"),
                        });
                    }
                }
                pending.push((i, *target));
                if !matches!(entries.get(i + 1), Some(Entry::Pim(_)) | Some(Entry::Dpa(DpaCommand::DynModi { .. }))) {
                    out.push(Violation {
                        index: i,
                        kind: ViolationKind::DanglingModifier,
                        message: "dangling modifier: not followed by a PIM command".into(),
                    });
                    pending.clear();
                }
            }
            Entry::Pim(cmd) => {
                for (idx, field) in pending.drain(..) {
                    if !cmd.has_field(field) {
                        out.push(Violation {
                            index: idx,
                            kind: ViolationKind::MissingTarget,
                            message: format!("{} has no {} field", cmd.mnemonic(), field),
                        });
                    }
                }
                in_loop = in_loop.saturating_sub(1);
            }
        }
    }
    out
}

/// Serializes a stack in the documented binary layout.
pub fn serialize(stack: &CommandStack) -> Vec<u8> {
    let mut buf = Vec::with_capacity(stack.encoded_len());
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&stack.meta.layer.to_le_bytes());
    buf.push(stack.meta.op.code());
    buf.extend_from_slice(&stack.meta.module.to_le_bytes());
    buf.extend_from_slice(&(stack.entries.len() as u32).to_le_bytes());
    for e in &stack.entries {
        match e {
            Entry::Pim(PimCommand::WrInp { gpr }) => {
                buf.push(0x01);
                buf.extend_from_slice(&gpr.to_le_bytes());
            }
            Entry::Pim(PimCommand::DotProd { row, col, width }) => {
                buf.push(0x02);
                buf.extend_from_slice(&row.to_le_bytes());
                buf.extend_from_slice(&col.to_le_bytes());
                buf.extend_from_slice(&width.to_le_bytes());
            }
            Entry::Pim(PimCommand::RdOut { gpr }) => {
                buf.push(0x03);
                buf.extend_from_slice(&gpr.to_le_bytes());
            }
            Entry::Dpa(DpaCommand::DynLoop { bound, entry }) => {
                buf.push(0x10);
                let lb = match bound {
                    LoopBound::Fixed(n) => *n,
                    LoopBound::TokenRows => 0,
                };
                buf.extend_from_slice(&lb.to_le_bytes());
                buf.extend_from_slice(&entry.to_le_bytes());
            }
            Entry::Dpa(DpaCommand::DynModi { target, coefficient }) => {
                buf.push(0x11);
                buf.push(target.code());
                buf.extend_from_slice(&coefficient.to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IsaError> {
        if self.pos + n > self.bytes.len() {
            return Err(IsaError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IsaError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IsaError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self) -> Result<i32, IsaError> {
        Ok(self.u32()? as i32)
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<CommandStack, IsaError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC || r.u8()? != FORMAT_VERSION {
        return Err(IsaError::BadHeader);
    }
    let layer = r.u32()?;
    let op = OpKind::from_code(r.u8()?)?;
    let module = r.u32()?;
    let count = r.u32()?;
    // The smallest record is 5 bytes; reject prefixes that cannot fit.
    let trailing = bytes.len() - r.pos;
    if (count as usize) > trailing / 5 {
        return Err(IsaError::LengthMismatch { declared: count, trailing });
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let offset = r.pos;
        let tag = r.u8()?;
        let e = match tag {
            0x01 => Entry::Pim(PimCommand::WrInp { gpr: r.u32()? }),
            0x02 => Entry::Pim(PimCommand::DotProd { row: r.u32()?, col: r.u32()?, width: r.u32()? }),
            0x03 => Entry::Pim(PimCommand::RdOut { gpr: r.u32()? }),
            0x10 => {
                let lb = r.u32()?;
                let bound = if lb == 0 { LoopBound::TokenRows } else { LoopBound::Fixed(lb) };
                Entry::Dpa(DpaCommand::DynLoop { bound, entry: r.u32()? })
            }
            0x11 => {
                let target = Field::from_code(r.u8()?)?;
                Entry::Dpa(DpaCommand::DynModi { target, coefficient: r.i32()? })
            }
            tag => return Err(IsaError::UnknownOpcode { tag, offset }),
        };
        entries.push(e);
    }
    if r.pos != bytes.len() {
        return Err(IsaError::LengthMismatch { declared: count, trailing: bytes.len() - r.pos });
    }
    Ok(CommandStack { meta: StackMeta { layer, op, module }, entries })
}

/// Renders a stack as text, one entry per line. Fields targeted by a preceding
/// `DYN-MODI` are written as `@va+<value>`.
pub fn to_text(stack: &CommandStack) -> String {
    let mut out = format!("# stack layer={} op={} module={}\n", stack.meta.layer, stack.meta.op, stack.meta.module);
    let mut dynamic: Vec<Field> = Vec::new();
    for e in &stack.entries {
        match e {
            Entry::Dpa(DpaCommand::DynLoop { bound, entry }) => {
                let lb = match bound {
                    LoopBound::Fixed(n) => n.to_string(),
                    LoopBound::TokenRows => "T".to_string(),
                };
                out.push_str(&format!("DYN-LOOP lb={lb} le={entry}\n"));
            }
            Entry::Dpa(DpaCommand::DynModi { target, coefficient }) => {
                out.push_str(&format!("DYN-MODI target={target} coef={coefficient}\n"));
                dynamic.push(*target);
            }
            Entry::Pim(cmd) => {
                out.push_str(&command_text(cmd, &dynamic));
                out.push('\n');
                dynamic.clear();
            }
        }
    }
    out
}

/// Text for a single PIM command; used for expanded-sequence dumps as well.
pub fn command_text(cmd: &PimCommand, dynamic: &[Field]) -> String {
    let v = |f: Field, x: u32| {
        if dynamic.contains(&f) {
            format!("@va+{x}")
        } else {
            x.to_string()
        }
    };
    match cmd {
        PimCommand::WrInp { gpr } => format!("WR-INP gpr={}", v(Field::Gpr, *gpr)),
        PimCommand::DotProd { row, col, width } => {
            format!("DOT-PROD row={} col={} width={}", v(Field::Row, *row), v(Field::Col, *col), width)
        }
        PimCommand::RdOut { gpr } => format!("RD-OUT gpr={}", v(Field::Gpr, *gpr)),
    }
}

pub fn from_text(text: &str) -> Result<CommandStack, IsaError> {
    let mut stack = CommandStack::default();
    let mut modified: Vec<Field> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |msg: String| IsaError::Parse { line: line_no, msg };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let kv = parse_kv(rest.trim().strip_prefix("stack").unwrap_or(""));
            for (k, val) in kv {
                match k {
                    "layer" => stack.meta.layer = val.parse().map_err(|_| err(format!("bad layer {val}")))?,
                    "module" => stack.meta.module = val.parse().map_err(|_| err(format!("bad module {val}")))?,
                    "op" => stack.meta.op = OpKind::from_name(val).ok_or_else(|| err(format!("bad op {val}")))?,
                    _ => {}
                }
            }
            continue;
        }
        let (mnemonic, rest) = line.split_once(' ').unwrap_or((line, ""));
        let kv = parse_kv(rest);
        let get = |key: &str| -> Result<&str, IsaError> {
            kv.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| IsaError::Parse { line: line_no, msg: format!("missing {key}") })
        };
        let num = |key: &str, field: Option<Field>| -> Result<u32, IsaError> {
            let raw = get(key)?;
            let (is_dyn, digits) = match raw.strip_prefix("@va+") {
                Some(d) => (true, d),
                None => (false, raw),
            };
            if let Some(f) = field {
                if is_dyn != modified.contains(&f) {
                    return Err(IsaError::Parse {
                        line: line_no,
                        msg: format!("field {key} dynamic marker disagrees with preceding DYN-MODI"),
                    });
                }
            }
            digits.parse().map_err(|_| IsaError::Parse { line: line_no, msg: format!("bad number {raw}") })
        };
        match mnemonic {
            "DYN-LOOP" => {
                let lb = get("lb")?;
                let bound = if lb == "T" {
                    LoopBound::TokenRows
                } else {
                    LoopBound::Fixed(lb.parse().map_err(|_| err(format!("bad lb {lb}")))?)
                };
                stack.push(DpaCommand::DynLoop { bound, entry: num("le", None)? });
            }
            "DYN-MODI" => {
                let target = match get("target")? {
                    "row" => Field::Row,
                    "col" => Field::Col,
                    "gpr" => Field::Gpr,
                    other => return Err(err(format!("unknown target {other}"))),
                };
                let coefficient: i32 = get("coef")?.parse().map_err(|_| err("bad coef".into()))?;
                stack.push(DpaCommand::DynModi { target, coefficient });
                modified.push(target);
            }
            "WR-INP" => {
                stack.push(PimCommand::WrInp { gpr: num("gpr", Some(Field::Gpr))? });
                modified.clear();
            }
            "RD-OUT" => {
                stack.push(PimCommand::RdOut { gpr: num("gpr", Some(Field::Gpr))? });
                modified.clear();
            }
            "DOT-PROD" => {
                stack.push(PimCommand::DotProd {
                    row: num("row", Some(Field::Row))?,
                    col: num("col", Some(Field::Col))?,
                    width: num("width", None)?,
                });
                modified.clear();
            }
            other => return Err(err(format!("unknown mnemonic {other}"))),
        }
    }
    Ok(stack)
}

fn parse_kv(s: &str) -> Vec<(&str, &str)> {
    s.split_whitespace().filter_map(|tok| tok.split_once('=')).collect()
}

/// Two-head score loop: per iteration one DRAM row is visited and two
/// head segments are multiplied and read out. With `LoopBound::Fixed(2)` this
/// is the LB=2 / LE=4 shape used throughout the tests and examples.
pub fn sample_score_stack(bound: LoopBound) -> CommandStack {
    let body = [
        PimCommand::DotProd { row: 0, col: 0, width: 16 },
        PimCommand::RdOut { gpr: 0 },
        PimCommand::DotProd { row: 0, col: 16, width: 16 },
        PimCommand::RdOut { gpr: 1 },
    ];
    encode_loop(
        StackMeta { layer: 0, op: OpKind::Qkt, module: 0 },
        &body,
        &[(0, Field::Row, 1), (1, Field::Gpr, 2), (2, Field::Row, 1), (3, Field::Gpr, 2)],
        bound,
    )
    .expect("sample body is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stack() -> CommandStack {
        sample_score_stack(LoopBound::Fixed(2))
    }

    #[test]
    fn encode_loop_layout() {
        let s = sample_stack();
        assert_eq!(s.entries[0], Entry::Dpa(DpaCommand::DynLoop { bound: LoopBound::Fixed(2), entry: 4 }));
        assert_eq!(s.pim_count(), 4);
        assert_eq!(s.len(), 9);
        assert!(validate_stack(&s).is_empty());
    }

    #[test]
    fn encode_loop_errors() {
        let m = StackMeta::default();
        assert_eq!(encode_loop(m, &[], &[], LoopBound::Fixed(1)), Err(IsaError::EmptyBody));
        let body = [PimCommand::WrInp { gpr: 3 }];
        assert_eq!(encode_loop(m, &body, &[], LoopBound::Fixed(0)), Err(IsaError::ZeroBound));
        assert_eq!(
            encode_loop(m, &body, &[(1, Field::Gpr, 1)], LoopBound::Fixed(1)),
            Err(IsaError::PositionOutOfRange { position: 1, len: 1 })
        );
        assert!(matches!(
            encode_loop(m, &body, &[(0, Field::Row, 1)], LoopBound::Fixed(1)),
            Err(IsaError::MissingField { .. })
        ));
    }

    #[test]
    fn loop_overrun_is_reported() {
        let mut s = CommandStack::default();
        s.push(DpaCommand::DynLoop { bound: LoopBound::Fixed(2), entry: 3 });
        s.push(PimCommand::WrInp { gpr: 0 });
        s.push(PimCommand::RdOut { gpr: 0 });
        let v = validate_stack(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::LoopOverrun);
        assert_eq!(v[0].index, 0);
        assert!(v[0].message.contains("loop overruns stack"));
    }

    #[test]
    fn modifier_followed_by_modifier_is_dangling() {
        let mut s = CommandStack::default();
        s.push(DpaCommand::DynLoop { bound: LoopBound::Fixed(2), entry: 1 });
        s.push(DpaCommand::DynModi { target: Field::Row, coefficient: 1 });
        s.push(DpaCommand::DynModi { target: Field::Row, coefficient: 1 });
        s.push(PimCommand::DotProd { row: 0, col: 0, width: 4 });
        let v = validate_stack(&s);
        assert!(v.iter().any(|x| x.kind == ViolationKind::DuplicateModifier), "{v:?}");

        let mut s = CommandStack::default();
        s.push(DpaCommand::DynLoop { bound: LoopBound::Fixed(2), entry: 1 });
        s.push(PimCommand::DotProd { row: 0, col: 0, width: 4 });
        s.push(DpaCommand::DynModi { target: Field::Row, coefficient: 1 });
        let v = validate_stack(&s);
        assert!(v.iter().any(|x| x.kind == ViolationKind::DanglingModifier && x.message.contains("dangling")));
    }

    #[test]
    fn modifier_on_missing_field() {
        let mut s = CommandStack::default();
        s.push(DpaCommand::DynLoop { bound: LoopBound::Fixed(2), entry: 1 });
        s.push(DpaCommand::DynModi { target: Field::Row, coefficient: 1 });
        s.push(PimCommand::RdOut { gpr: 0 });
        let v = validate_stack(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::MissingTarget);
        assert_eq!(v[0].index, 1);
    }

    #[test]
    fn empty_stack_is_header_only() {
        let s = CommandStack::default();
        let b = serialize(&s);
        assert_eq!(b.len(), HEADER_BYTES);
        assert_eq!(deserialize(&b).unwrap(), s);
    }

    #[test]
    fn sample_stack_round_trips_byte_identically() {
        let s = sample_stack();
        let b = serialize(&s);
        assert_eq!(b.len(), s.encoded_len());
        let back = deserialize(&b).unwrap();
        assert_eq!(back, s);
        assert_eq!(serialize(&back), b);
    }

    #[test]
    fn deserialize_rejects_bad_input() {
        let s = sample_stack();
        let b = serialize(&s);
        assert!(matches!(deserialize(&b[..b.len() - 2]), Err(IsaError::Truncated(_))));
        let mut bad = b.clone();
        bad[HEADER_BYTES] = 0x7f;
        assert!(matches!(deserialize(&bad), Err(IsaError::UnknownOpcode { tag: 0x7f, .. })));
        let mut bad = b.clone();
        bad[14..18].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(deserialize(&bad), Err(IsaError::LengthMismatch { .. })));
        let mut bad = b.clone();
        bad.push(0);
        assert!(matches!(deserialize(&bad), Err(IsaError::LengthMismatch { .. })));
        assert_eq!(deserialize(b"XXXX"), Err(IsaError::BadHeader));
    }

    #[test]
    fn text_form_round_trips() {
        let s = sample_stack();
        let t = to_text(&s);
        assert!(t.contains("DOT-PROD row=@va+0 col=0 width=16"), "{t}");
        assert!(t.contains("DYN-LOOP lb=2 le=4"));
        assert_eq!(from_text(&t).unwrap(), s);
    }

    #[test]
    fn text_rejects_inconsistent_marker() {
        let t = "DYN-LOOP lb=1 le=1\nDOT-PROD row=@va+0 col=0 width=4\n";
        assert!(matches!(from_text(t), Err(IsaError::Parse { line: 2, .. })));
    }
}
