//! Heterogeneous compression configurations: exact bit and FLOP accounting,
//! constrained enumeration, the one-shot heuristic and top-K selection.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::microformer::{evaluate, Component, Example, ForwardOptions, Geometry, MicroModel};
use crate::project::{euclidean_project, ConstraintSet};
use crate::quantize::{QuantSpec, ScaleSolver};
use crate::scalar::Scalar;
use crate::sparsify::NxMPattern;

/// Exact rational used by the accounting functions.
pub type Rational = Ratio<i64>;

/// Compression scheme of one component. The derived order puts the bit
/// width first inside each variant, so `Q4 < Q8 < Sparse-Q4 < Sparse-Q8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerScheme {
    Dense,
    Quant { bits: u32 },
    SparseQuant { bits: u32, pattern: NxMPattern },
}

impl LayerScheme {
    pub const Q4: LayerScheme = LayerScheme::Quant { bits: 4 };
    pub const Q8: LayerScheme = LayerScheme::Quant { bits: 8 };
    pub const SPARSE_Q4: LayerScheme = LayerScheme::SparseQuant {
        bits: 4,
        pattern: NxMPattern::four_two(),
    };
    pub const SPARSE_Q8: LayerScheme = LayerScheme::SparseQuant {
        bits: 8,
        pattern: NxMPattern::four_two(),
    };

    /// The default search vocabulary, in order.
    pub const DEFAULT_OPTIONS: [LayerScheme; 4] =
        [Self::Q4, Self::Q8, Self::SPARSE_Q4, Self::SPARSE_Q8];

    pub fn bits(&self) -> Option<u32> {
        match *self {
            LayerScheme::Dense => None,
            LayerScheme::Quant { bits } | LayerScheme::SparseQuant { bits, .. } => Some(bits),
        }
    }

    pub fn pattern(&self) -> Option<NxMPattern> {
        match *self {
            LayerScheme::SparseQuant { pattern, .. } => Some(pattern),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bits() {
            QuantSpec::new(b, 0)?;
        }
        Ok(())
    }

    /// The projection set of this scheme, `None` for dense.
    pub fn constraint(
        &self,
        group_size: usize,
        solver: ScaleSolver,
    ) -> Result<Option<ConstraintSet>> {
        Ok(match *self {
            LayerScheme::Dense => None,
            LayerScheme::Quant { bits } => Some(ConstraintSet::quant(
                QuantSpec::new(bits, group_size)?,
                solver,
            )),
            LayerScheme::SparseQuant { bits, pattern } => Some(ConstraintSet::fused(
                pattern,
                QuantSpec::new(bits, group_size)?,
                solver,
            )),
        })
    }
}

impl fmt::Display for LayerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerScheme::Dense => write!(f, "Dense"),
            LayerScheme::Quant { bits } => write!(f, "Q{bits}"),
            LayerScheme::SparseQuant { bits, pattern } if pattern == NxMPattern::four_two() => {
                write!(f, "Sparse-Q{bits}")
            }
            LayerScheme::SparseQuant { bits, pattern } => write!(f, "Sparse{pattern}-Q{bits}"),
        }
    }
}

impl FromStr for LayerScheme {
    type Err = Error;

    /// Accepts `Dense`, `Q<b>`, `Sparse-Q<b>` and `Sparse<n>:<m>-Q<b>`,
    /// case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown scheme {s:?}"));
        let lower = s.trim().to_ascii_lowercase();
        let bits = |t: &str| {
            t.strip_prefix('q')
                .and_then(|b| b.parse::<u32>().ok())
                .ok_or_else(bad)
        };
        let scheme = if lower == "dense" {
            LayerScheme::Dense
        } else if let Some(rest) = lower.strip_prefix("sparse") {
            let (pat, q) = rest.split_once('-').ok_or_else(bad)?;
            let pattern = if pat.is_empty() {
                NxMPattern::four_two()
            } else {
                let (n, m) = pat.split_once(':').ok_or_else(bad)?;
                NxMPattern::new(n.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)?
            };
            LayerScheme::SparseQuant {
                bits: bits(q)?,
                pattern,
            }
        } else {
            LayerScheme::Quant {
                bits: bits(&lower)?,
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// One scheme per component, shared by every encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncoderConfig {
    schemes: [LayerScheme; 6],
}

impl EncoderConfig {
    /// Schemes in component order: query, key, value, attn_output, ffn1, ffn2.
    pub fn new(schemes: [LayerScheme; 6]) -> Result<Self> {
        for s in &schemes {
            s.validate()?;
        }
        Ok(Self { schemes })
    }

    pub fn uniform(s: LayerScheme) -> Result<Self> {
        Self::new([s; 6])
    }

    pub fn dense() -> Self {
        Self {
            schemes: [LayerScheme::Dense; 6],
        }
    }

    pub fn get(&self, c: Component) -> LayerScheme {
        self.schemes[c.index()]
    }

    pub fn schemes(&self) -> &[LayerScheme; 6] {
        &self.schemes
    }

    /// Rejects patterns that do not divide the column count of a component.
    pub fn check_geometry(&self, g: &Geometry) -> Result<()> {
        for c in Component::ALL {
            if let Some(p) = self.get(c).pattern() {
                p.check_cols(g.component_shape(c).1)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.schemes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for EncoderConfig {
    type Err = Error;

    /// Six comma-separated schemes, or a single scheme applied uniformly.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<LayerScheme> = s.split(',').map(str::parse).collect::<Result<_>>()?;
        match parts.len() {
            1 => Self::uniform(parts[0]),
            6 => Self::new(parts.try_into().expect("six schemes")),
            n => Err(Error::Config(format!("expected 1 or 6 schemes, got {n}"))),
        }
    }
}

/// Whether sparse schemes pay for their position metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum CostMode {
    #[default]
    WithMetadata,
    PayloadOnly,
}

impl FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "metadata" | "with-metadata" => Ok(CostMode::WithMetadata),
            "payload" | "payload-only" => Ok(CostMode::PayloadOnly),
            _ => Err(Error::Config(format!(
                "unknown cost mode {s:?} (expected payload or metadata)"
            ))),
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::WithMetadata => "metadata",
            CostMode::PayloadOnly => "payload",
        })
    }
}

/// Stored bits per original parameter.
pub fn bits_per_param(s: LayerScheme, mode: CostMode) -> Rational {
    match s {
        LayerScheme::Dense => Rational::from_integer(32),
        LayerScheme::Quant { bits } => Rational::from_integer(bits as i64),
        LayerScheme::SparseQuant { bits, pattern } => {
            let per_kept = match mode {
                CostMode::PayloadOnly => bits,
                CostMode::WithMetadata => bits + pattern.index_bits(),
            };
            Rational::new((pattern.m() as u32 * per_kept) as i64, pattern.n() as i64)
        }
    }
}

/// `1 − Σ wᵢ·bitsᵢ / (32·Σ wᵢ)` with component weights `(1,1,1,1,4,4)`.
pub fn compression_ratio(c: &EncoderConfig, mode: CostMode) -> Rational {
    let mut bits = Rational::from_integer(0);
    let mut weight = 0i64;
    for comp in Component::ALL {
        let w = comp.relative_size() as i64;
        bits += bits_per_param(c.get(comp), mode) * w;
        weight += w;
    }
    Rational::from_integer(1) - bits / (32 * weight)
}

/// Fraction of encoder multiply-accumulates removed by sparsity: a component
/// with pattern `n:m` saves `(n − m)/n` of its work; quantization saves none.
pub fn flop_reduction(c: &EncoderConfig) -> Rational {
    let mut saved = Rational::from_integer(0);
    let mut weight = 0i64;
    for comp in Component::ALL {
        let w = comp.relative_size() as i64;
        if let Some(p) = c.get(comp).pattern() {
            saved += Rational::new((p.n() - p.m()) as i64, p.n() as i64) * w;
        }
        weight += w;
    }
    saved / weight
}

/// Dimensions that determine the encoder weight footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
}

impl EncoderShape {
    /// 12 layers, `d = 768`, FFN width 3072.
    pub const fn bert_base() -> Self {
        Self {
            layers: 12,
            model_dim: 768,
            ffn_dim: 3072,
        }
    }

    pub fn component_shape(&self, c: Component) -> (usize, usize) {
        let (d, f) = (self.model_dim, self.ffn_dim);
        match c {
            Component::Ffn1 => (f, d),
            Component::Ffn2 => (d, f),
            _ => (d, d),
        }
    }
}

impl From<&Geometry> for EncoderShape {
    fn from(g: &Geometry) -> Self {
        Self {
            layers: g.layers,
            model_dim: g.model_dim,
            ffn_dim: g.ffn_dim,
        }
    }
}

/// Serialized encoder size in bytes (embeddings and classifier excluded):
/// with-metadata weight bits, one 32-bit scale per row group, and 32-bit
/// biases and layer-norm parameters.
pub fn encoder_bytes(c: &EncoderConfig, shape: EncoderShape, group_size: usize) -> Result<u64> {
    let (d, f) = (shape.model_dim as u64, shape.ffn_dim as u64);
    let mut bits = Rational::from_integer(0);
    for comp in Component::ALL {
        let (rows, cols) = shape.component_shape(comp);
        let scheme = c.get(comp);
        bits += bits_per_param(scheme, CostMode::WithMetadata) * (rows * cols) as i64;
        if let Some(b) = scheme.bits() {
            bits +=
                Rational::from_integer(32 * QuantSpec::new(b, group_size)?.num_groups(rows) as i64);
        }
    }
    // Four attention biases, FFN biases, two layer norms.
    bits += Rational::from_integer(32 * (4 * d + f + d + 4 * d) as i64);
    let per_layer = bits.ceil().to_integer() as u64;
    Ok((per_layer * shape.layers as u64).div_ceil(8))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchParams {
    /// Minimum compression ratio under `mode`.
    pub constraint: f64,
    pub k: usize,
    /// Candidate schemes per component.
    pub options: [Vec<LayerScheme>; 6],
    pub group_size: usize,
    pub mode: CostMode,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            constraint: 0.875,
            k: 10,
            options: std::array::from_fn(|_| LayerScheme::DEFAULT_OPTIONS.to_vec()),
            group_size: 32,
            mode: CostMode::WithMetadata,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.constraint) {
            return Err(Error::Config(format!(
                "constraint {} outside [0, 1]",
                self.constraint
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        for (c, opts) in Component::ALL.iter().zip(&self.options) {
            if opts.is_empty() {
                return Err(Error::Config(format!("no scheme options for {c}")));
            }
            for s in opts {
                s.validate()?;
            }
        }
        Ok(())
    }

    fn threshold(&self) -> Rational {
        Rational::approximate_float(self.constraint).unwrap_or_else(|| Rational::from_integer(1))
    }
}

/// Every assignment of the option sets whose compression ratio reaches the
/// constraint, in lexicographic order.
pub fn enumerate_configs(p: &SearchParams) -> Result<Vec<EncoderConfig>> {
    p.validate()?;
    let options: Vec<Vec<LayerScheme>> = p
        .options
        .iter()
        .map(|o| {
            let mut o = o.clone();
            o.sort();
            o.dedup();
            o
        })
        .collect();
    let threshold = p.threshold();
    let mut out = Vec::new();
    let mut idx = [0usize; 6];
    'outer: loop {
        let schemes = std::array::from_fn(|i| options[i][idx[i]]);
        let config = EncoderConfig { schemes };
        if compression_ratio(&config, p.mode) >= threshold {
            out.push(config);
        }
        for i in (0..6).rev() {
            idx[i] += 1;
            if idx[i] < options[i].len() {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    if out.is_empty() {
        return Err(Error::UnattainableConstraint(p.constraint));
    }
    Ok(out)
}

/// Applies the one-shot projection of `config` to every compressible weight.
pub fn project_model<T: Scalar>(
    model: &MicroModel<T>,
    config: &EncoderConfig,
    group_size: usize,
    solver: ScaleSolver,
) -> Result<MicroModel<T>> {
    config.check_geometry(model.geometry())?;
    let mut out = model.clone();
    for (_, comp, idx) in model.targets() {
        if let Some(cs) = config.get(comp).constraint(group_size, solver)? {
            out.params_mut()[idx] = euclidean_project(&model.params()[idx], &cs)?.value;
        }
    }
    Ok(out)
}

/// Mean validation loss of the one-shot projected model (Max scale solver).
pub fn heuristic_score<T: Scalar>(
    config: &EncoderConfig,
    model: &MicroModel<T>,
    val: &[Example],
    group_size: usize,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let snapshot = project_model(model, config, group_size, ScaleSolver::Max)?;
    Ok(evaluate(
        snapshot.geometry(),
        snapshot.params(),
        val,
        &ForwardOptions::default(),
    )
    .loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredConfig {
    pub config: EncoderConfig,
    pub heuristic: f64,
    pub compression_ratio: f64,
    pub flop_reduction: f64,
}

impl ScoredConfig {
    /// Ratios under the with-metadata cost model.
    pub fn new(config: EncoderConfig, heuristic: f64) -> Self {
        Self::with_mode(config, heuristic, CostMode::WithMetadata)
    }

    pub fn with_mode(config: EncoderConfig, heuristic: f64, mode: CostMode) -> Self {
        let to_f64 = |r: Rational| *r.numer() as f64 / *r.denom() as f64;
        Self {
            config,
            heuristic,
            compression_ratio: to_f64(compression_ratio(&config, mode)),
            flop_reduction: to_f64(flop_reduction(&config)),
        }
    }
}

fn by_heuristic(a: &ScoredConfig, b: &ScoredConfig) -> Ordering {
    a.heuristic
        .total_cmp(&b.heuristic)
        .then_with(|| a.config.cmp(&b.config))
}

/// Keeps the `k` lowest heuristic scores and returns the one with the largest
/// FLOP reduction; ties go to the higher compression ratio, then to the
/// lexicographically smaller configuration.
pub fn select_config(p: &SearchParams, scored: &[ScoredConfig]) -> Result<ScoredConfig> {
    if p.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(by_heuristic);
    ranked.truncate(p.k);
    ranked
        .into_iter()
        .max_by(|a, b| {
            a.flop_reduction
                .total_cmp(&b.flop_reduction)
                .then(a.compression_ratio.total_cmp(&b.compression_ratio))
                .then_with(|| b.config.cmp(&a.config))
        })
        .ok_or(Error::Empty("scored configurations"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    /// Every evaluated configuration, sorted by heuristic.
    pub scored: Vec<ScoredConfig>,
    pub chosen: ScoredConfig,
}

/// Enumerates, scores in parallel, and selects.
pub fn run_search<T: Scalar>(
    model: &MicroModel<T>,
    val: &[Example],
    p: &SearchParams,
) -> Result<SearchOutcome> {
    let configs = enumerate_configs(p)?;
    for c in &configs {
        c.check_geometry(model.geometry())?;
    }
    let mut scored = configs
        .par_iter()
        .map(|c| {
            heuristic_score(c, model, val, p.group_size)
                .map(|h| ScoredConfig::with_mode(*c, h, p.mode))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(by_heuristic);
    let chosen = select_config(p, &scored)?;
    Ok(SearchOutcome { scored, chosen })
}

/// CSV with one row per configuration.
pub fn write_report<W: Write>(w: W, scored: &[ScoredConfig]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
    header.extend(["heuristic", "compression_ratio", "flop_reduction"]);
    out.write_record(&header)?;
    for s in scored {
        let mut row: Vec<String> = s.config.schemes().iter().map(|x| x.to_string()).collect();
        row.push(format!("{:.6}", s.heuristic));
        row.push(format!("{:.6}", s.compression_ratio));
        row.push(format!("{:.6}", s.flop_reduction));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
