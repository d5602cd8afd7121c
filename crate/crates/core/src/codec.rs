//! Bit-packed checkpoint format.
//!
//! All integers are little-endian. A file is the magic `NXMI`, a `u16`
//! version (1) and a `u16` tensor count, followed by the tensors. Each tensor
//! is: `u16` name length and UTF-8 name, `u32` rows, `u32` cols, `u8` scheme
//! tag (0 dense, 1 quant, 2 sparse-quant), `u8` bits, `u8` n, `u8` m, `u16`
//! group size, then three sections, each padded to a byte boundary:
//!
//! * scales: one `f32` per row group (absent for dense tensors);
//! * metadata: retained positions inside each group of `n`, `ceil(log2 n)`
//!   bits each, packed low bits first, rows in order and groups left to right
//!   (sparse-quant only);
//! * payload: `bits`-bit two's-complement codes of the retained elements in
//!   row-major order, packed low bits first; dense tensors store raw `f32`.
//!
//! Dense tensors are written with bits 32, n = m = 0 and group size 0.

use std::io::{Read, Write};

use crate::error::{Error, FormatError, Result};
use crate::matrix::Matrix;
use crate::microformer::{Geometry, MicroModel};
use crate::project::{infer_grid, satisfies};
use crate::quantize::{QuantSpec, ScaleSolver};
use crate::search::{EncoderConfig, LayerScheme};
use crate::sparsify::{nxm_project, NxMPattern};

pub const MAGIC: [u8; 4] = *b"NXMI";
pub const VERSION: u16 = 1;

const TAG_DENSE: u8 = 0;
const TAG_QUANT: u8 = 1;
const TAG_SPARSE: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub scheme: LayerScheme,
    pub group_size: usize,
    pub scales: Vec<f32>,
    /// Retained positions, `m` per group, strictly increasing.
    pub positions: Vec<u8>,
    /// Codes of the stored elements (all elements for quant, retained ones
    /// for sparse-quant).
    pub codes: Vec<i32>,
    /// Raw values of a dense tensor.
    pub values: Vec<f32>,
}

impl PackedTensor {
    fn spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(
            self.scheme.bits().expect("quantized scheme"),
            self.group_size,
        )
    }

    fn validate(&self) -> Result<()> {
        let malformed =
            |msg: String| Error::Format(FormatError::Malformed(format!("{}: {msg}", self.name)));
        let len = self.rows * self.cols;
        match self.scheme {
            LayerScheme::Dense => {
                if self.values.len() != len {
                    return Err(malformed(format!(
                        "{} values for {len} elements",
                        self.values.len()
                    )));
                }
            }
            LayerScheme::Quant { .. } | LayerScheme::SparseQuant { .. } => {
                let spec = self.spec()?;
                if self.scales.len() != spec.num_groups(self.rows) {
                    return Err(malformed(format!("{} scales", self.scales.len())));
                }
                if let Some(&s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                    return Err(malformed(format!("non-positive scale {s}")));
                }
                let stored = match self.scheme.pattern() {
                    Some(p) => {
                        p.check_cols(self.cols)?;
                        let groups = self.rows * self.cols / p.n();
                        if self.positions.len() != groups * p.m() {
                            return Err(malformed(format!("{} positions", self.positions.len())));
                        }
                        for g in self.positions.chunks(p.m()) {
                            if g.iter().any(|&i| i as usize >= p.n())
                                || g.windows(2).any(|w| w[0] >= w[1])
                            {
                                return Err(malformed(format!("bad positions {g:?}")));
                            }
                        }
                        groups * p.m()
                    }
                    None => len,
                };
                if self.codes.len() != stored {
                    return Err(malformed(format!(
                        "{} codes, expected {stored}",
                        self.codes.len()
                    )));
                }
                if let Some(c) = self
                    .codes
                    .iter()
                    .find(|&&c| c < spec.qmin() || c > spec.qmax())
                {
                    return Err(malformed(format!("code {c} out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Packs a feasible matrix, inferring the scale of every row group.
pub fn pack(
    name: &str,
    w: &Matrix<f32>,
    scheme: LayerScheme,
    group_size: usize,
) -> Result<PackedTensor> {
    let base = PackedTensor {
        name: name.to_string(),
        rows: w.rows(),
        cols: w.cols(),
        scheme,
        group_size: 0,
        scales: Vec::new(),
        positions: Vec::new(),
        codes: Vec::new(),
        values: Vec::new(),
    };
    let Some(constraint) = scheme.constraint(group_size, ScaleSolver::Max)? else {
        return Ok(PackedTensor {
            values: w.as_slice().to_vec(),
            ..base
        });
    };
    satisfies(w, &constraint).map_err(Error::Infeasible)?;
    let spec = QuantSpec::new(scheme.bits().expect("quantized scheme"), group_size)?;
    let cols = w.cols();
    let mut scales = Vec::new();
    let mut all_codes = Vec::with_capacity(w.len());
    for range in spec.row_groups(w.rows()) {
        let slice = &w.as_slice()[range.start * cols..range.end * cols];
        let (s, codes) = infer_grid(slice, spec, true).ok_or_else(|| {
            Error::Format(FormatError::Malformed(format!(
                "{name}: no scale reproduces rows {}..{} exactly",
                range.start, range.end
            )))
        })?;
        scales.push(s);
        all_codes.extend(codes);
    }
    let (positions, codes) = match scheme.pattern() {
        None => (Vec::new(), all_codes),
        Some(p) => {
            let (_, mask) = nxm_project(w, p)?;
            let mut positions = Vec::with_capacity(w.len() / p.n() * p.m());
            let mut codes = Vec::with_capacity(positions.capacity());
            for (i, &keep) in mask.as_slice().iter().enumerate() {
                if keep {
                    positions.push(((i % cols) % p.n()) as u8);
                    codes.push(all_codes[i]);
                }
            }
            (positions, codes)
        }
    };
    Ok(PackedTensor {
        group_size,
        scales,
        positions,
        codes,
        ..base
    })
}

/// Decodes to a dense matrix with zeros at non-retained positions.
pub fn unpack(t: &PackedTensor) -> Result<Matrix<f32>> {
    t.validate()?;
    if t.scheme == LayerScheme::Dense {
        return Matrix::new(t.rows, t.cols, t.values.clone());
    }
    let spec = t.spec()?;
    let mut data = vec![0.0f32; t.rows * t.cols];
    let scale_of_row: Vec<f32> = spec
        .row_groups(t.rows)
        .into_iter()
        .zip(&t.scales)
        .flat_map(|(r, &s)| std::iter::repeat_n(s, r.len()))
        .collect();
    match t.scheme.pattern() {
        None => {
            for (i, (&c, x)) in t.codes.iter().zip(data.iter_mut()).enumerate() {
                *x = scale_of_row[i / t.cols] * c as f32;
            }
        }
        Some(p) => {
            for (k, (&pos, &c)) in t.positions.iter().zip(&t.codes).enumerate() {
                let group = k / p.m();
                let i = group * p.n() + pos as usize;
                data[i] = scale_of_row[i / t.cols] * c as f32;
            }
        }
    }
    Matrix::new(t.rows, t.cols, data)
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    fn push(&mut self, value: u32, width: u32) {
        for i in 0..width {
            if self.bit == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().expect("byte pushed") |= 1 << self.bit;
            }
            self.bit = (self.bit + 1) % 8;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u32 {
        let mut v = 0;
        for i in 0..width {
            let b = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (b as u32) << i;
            self.pos += 1;
        }
        v
    }
}

fn sign_extend(raw: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((raw << shift) as i32) >> shift
}

fn write_tensor(out: &mut Vec<u8>, t: &PackedTensor) -> Result<()> {
    t.validate()?;
    let name = t.name.as_bytes();
    let too_big = |what: &str| {
        Error::Format(FormatError::Malformed(format!(
            "{}: {what} does not fit the format",
            t.name
        )))
    };
    out.extend(
        u16::try_from(name.len())
            .map_err(|_| too_big("name"))?
            .to_le_bytes(),
    );
    out.extend(name);
    out.extend(
        u32::try_from(t.rows)
            .map_err(|_| too_big("rows"))?
            .to_le_bytes(),
    );
    out.extend(
        u32::try_from(t.cols)
            .map_err(|_| too_big("cols"))?
            .to_le_bytes(),
    );
    let (tag, bits, n, m) = match t.scheme {
        LayerScheme::Dense => (TAG_DENSE, 32, 0, 0),
        LayerScheme::Quant { bits } => (TAG_QUANT, bits, 0, 0),
        LayerScheme::SparseQuant { bits, pattern } => (TAG_SPARSE, bits, pattern.n(), pattern.m()),
    };
    out.push(tag);
    out.push(bits as u8);
    out.push(u8::try_from(n).map_err(|_| too_big("n"))?);
    out.push(u8::try_from(m).map_err(|_| too_big("m"))?);
    out.extend(
        u16::try_from(t.group_size)
            .map_err(|_| too_big("group size"))?
            .to_le_bytes(),
    );
    if t.scheme == LayerScheme::Dense {
        for v in &t.values {
            out.extend(v.to_le_bytes());
        }
        return Ok(());
    }
    for s in &t.scales {
        out.extend(s.to_le_bytes());
    }
    if let Some(p) = t.scheme.pattern() {
        let mut meta = BitWriter::new();
        for &pos in &t.positions {
            meta.push(pos as u32, p.index_bits());
        }
        out.extend(meta.bytes);
    }
    let mut payload = BitWriter::new();
    for &c in &t.codes {
        payload.push(c as u32, bits);
    }
    out.extend(payload.bytes);
    Ok(())
}

/// Serializes tensors in order.
pub fn encode(tensors: &[PackedTensor]) -> Result<Vec<u8>> {
    let count = u16::try_from(tensors.len()).map_err(|_| {
        Error::Format(FormatError::Malformed(format!(
            "{} tensors exceed the format limit",
            tensors.len()
        )))
    })?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(count.to_le_bytes());
    for t in tensors {
        write_tensor(&mut out, t)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(FormatError::Truncated(what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("two bytes"),
        ))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("four bytes"),
        ))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(Error::Format(FormatError::Truncated(what)))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect())
    }

    fn bits(&mut self, count: usize, width: u32, what: &'static str) -> Result<BitReader<'a>> {
        let total = count
            .checked_mul(width as usize)
            .ok_or(Error::Format(FormatError::Truncated(what)))?;
        Ok(BitReader {
            bytes: self.take(total.div_ceil(8), what)?,
            pos: 0,
        })
    }
}

fn read_tensor(c: &mut Cursor<'_>) -> Result<PackedTensor> {
    let name_len = c.u16("tensor name length")? as usize;
    let name = String::from_utf8(c.take(name_len, "tensor name")?.to_vec())
        .map_err(|_| Error::Format(FormatError::Malformed("tensor name is not UTF-8".into())))?;
    let rows = c.u32("rows")? as usize;
    let cols = c.u32("cols")? as usize;
    let tag = c.u8("scheme tag")?;
    let bits = c.u8("bits")? as u32;
    let n = c.u8("n")? as usize;
    let m = c.u8("m")? as usize;
    let group_size = c.u16("group size")? as usize;
    let label = name.clone();
    let malformed = |msg: String| Error::Format(FormatError::Malformed(format!("{label}: {msg}")));
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| malformed("shape overflows".into()))?;
    let scheme = match tag {
        TAG_DENSE if bits == 32 && n == 0 && m == 0 && group_size == 0 => LayerScheme::Dense,
        TAG_QUANT if n == 0 && m == 0 => LayerScheme::Quant { bits },
        TAG_SPARSE => LayerScheme::SparseQuant {
            bits,
            pattern: NxMPattern::new(n, m).map_err(|e| malformed(e.to_string()))?,
        },
        _ => {
            return Err(malformed(format!(
                "bad header (tag {tag}, bits {bits}, n {n}, m {m}, group size {group_size})"
            )))
        }
    };
    scheme.validate().map_err(|e| malformed(e.to_string()))?;
    let mut t = PackedTensor {
        name,
        rows,
        cols,
        scheme,
        group_size,
        scales: Vec::new(),
        positions: Vec::new(),
        codes: Vec::new(),
        values: Vec::new(),
    };
    if scheme == LayerScheme::Dense {
        t.values = c.f32s(len, "dense values")?;
    } else {
        t.scales = c.f32s(t.spec()?.num_groups(rows), "scales")?;
        let stored = match scheme.pattern() {
            Some(p) => {
                if !cols.is_multiple_of(p.n()) {
                    return Err(malformed(format!(
                        "{cols} columns not divisible by {}",
                        p.n()
                    )));
                }
                let count = len / p.n() * p.m();
                let mut r = c.bits(count, p.index_bits(), "metadata")?;
                t.positions = (0..count).map(|_| r.take(p.index_bits()) as u8).collect();
                count
            }
            None => len,
        };
        let mut r = c.bits(stored, bits, "payload")?;
        t.codes = (0..stored)
            .map(|_| sign_extend(r.take(bits), bits))
            .collect();
    }
    t.validate()?;
    Ok(t)
}

/// Parses a whole checkpoint; any defect fails the entire read.
pub fn decode(bytes: &[u8]) -> Result<Vec<PackedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::Format(FormatError::BadMagic(magic)));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(FormatError::UnsupportedVersion(version)));
    }
    let count = c.u16("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut c)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(FormatError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        ))));
    }
    Ok(tensors)
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[PackedTensor]) -> Result<()> {
    w.write_all(&encode(tensors)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<PackedTensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Packs every parameter; compressible weights use their scheme from
/// `config`, everything else is stored dense.
pub fn pack_model(
    model: &MicroModel<f32>,
    config: &EncoderConfig,
    group_size: usize,
) -> Result<Vec<PackedTensor>> {
    config.check_geometry(model.geometry())?;
    let names = model.names();
    let mut schemes = vec![LayerScheme::Dense; names.len()];
    for (_, comp, idx) in model.targets() {
        schemes[idx] = config.get(comp);
    }
    names
        .iter()
        .zip(model.params())
        .zip(schemes)
        .map(|((name, w), scheme)| pack(name, w, scheme, group_size))
        .collect()
}

/// Rebuilds a model, matching tensors to parameters by name.
pub fn unpack_model(tensors: &[PackedTensor], geometry: Geometry) -> Result<MicroModel<f32>> {
    let names = crate::microformer::param_names(&geometry);
    if tensors.len() != names.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, geometry needs {}",
            tensors.len(),
            names.len()
        )));
    }
    let params = names
        .iter()
        .map(|name| {
            let t = tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            unpack(t)
        })
        .collect::<Result<Vec<_>>>()?;
    MicroModel::from_params(geometry, params)
}

/// Scheme of every compressible weight in a checkpoint; all layers must
/// agree.
pub fn config_of(tensors: &[PackedTensor]) -> Result<EncoderConfig> {
    let mut schemes = [None; 6];
    for t in tensors {
        for comp in crate::microformer::Component::ALL {
            if t.name.ends_with(&format!(".{}", comp.name())) {
                let slot = &mut schemes[comp.index()];
                match slot {
                    None => *slot = Some(t.scheme),
                    Some(s) if *s == t.scheme => {}
                    Some(s) => {
                        return Err(Error::Config(format!(
                            "{} uses {} but another layer uses {s}",
                            t.name, t.scheme
                        )))
                    }
                }
            }
        }
    }
    EncoderConfig::new(schemes.map(|s| s.unwrap_or(LayerScheme::Dense)))
}
