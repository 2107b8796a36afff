//! The Lambda layer family with decorrelated positional encodings.
//!
//! One layer turns a feature map `x` (channels x positions) into an output
//! map through an input-dependent linear function. The content path is
//!
//! ```text
//!   Kbar      = softmax_N(K x)          M x N, rows normalized over positions
//!   lambda_c  = Kbar (V x)^T            M x C_out
//!   y_content = lambda_c^T (Q x)        C_out x N
//! ```
//!
//! and the decorrelated positional path, driven by a predefined encoding
//! `P` (C x N), is
//!
//! ```text
//!   lambda_p = A Kbar P^T               C_out x C
//!   y_pos    = (lambda_p . gains) P     C_out x N
//! ```
//!
//! with the output `y = y_content + y_pos`. `gains` are learned per
//! (cos, sin) frequency pair and per output channel, tied within a pair so
//! the induced kernel `sum_k gain_k cos(w_k (m - n))` stays a function of the
//! position difference alone; with unit gains the path reduces to the bare
//! `A Kbar P^T P` chain. Without this per-frequency freedom the path can only
//! realize one fixed kernel (the Gram kernel of `P`), which is not enough to
//! reproduce translation-covariant set predictions such as the centered
//! square; the gains keep the path exactly shift-equivariant for Fourier
//! frequencies while making the kernel learnable.
//!
//! The alternative encoding routes replace the positional path: the sum
//! variants add `P` to the feature map before selected projections, and the
//! coordinate variant appends normalized coordinate channels to `x`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

/// Positional-information routes of the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Content path only.
    None,
    /// Cosine encoding summed into the key, query and value inputs.
    CosineSumQkv,
    /// Cosine encoding summed into the query and value inputs; keys see raw x.
    CosineSumQv,
    /// Cosine encoding through the decorrelated positional path.
    CosineDecor,
    /// Fourier encoding through the decorrelated positional path.
    FourierDecor,
    /// Normalized coordinate channels appended to x before all projections.
    #[serde(rename = "coordconv")]
    CoordConv,
}

impl Encoding {
    pub const ALL: [Encoding; 6] = [
        Encoding::None,
        Encoding::CosineSumQkv,
        Encoding::CosineSumQv,
        Encoding::CosineDecor,
        Encoding::FourierDecor,
        Encoding::CoordConv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Encoding::None => "none",
            Encoding::CosineSumQkv => "cosine_sum_qkv",
            Encoding::CosineSumQv => "cosine_sum_qv",
            Encoding::CosineDecor => "cosine_decor",
            Encoding::FourierDecor => "fourier_decor",
            Encoding::CoordConv => "coordconv",
        }
    }

    pub fn parse(s: &str) -> Option<Encoding> {
        Encoding::ALL.into_iter().find(|e| e.name() == s)
    }

    /// Frequency schedule of the encoding this variant consumes.
    pub fn schedule(&self) -> Option<FreqSchedule> {
        match self {
            Encoding::CosineSumQkv | Encoding::CosineSumQv | Encoding::CosineDecor => {
                Some(FreqSchedule::Cosine)
            }
            Encoding::FourierDecor => Some(FreqSchedule::Fourier),
            Encoding::None | Encoding::CoordConv => None,
        }
    }

    pub fn is_decor(&self) -> bool {
        matches!(self, Encoding::CosineDecor | Encoding::FourierDecor)
    }

    pub fn is_sum(&self) -> bool {
        matches!(self, Encoding::CosineSumQkv | Encoding::CosineSumQv)
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Frequency schedule of a sinusoidal encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqSchedule {
    /// Geometric schedule with base 10000.
    Cosine,
    /// w_k = 2 pi k / (2 C) for k = 1..C/2, C the per-axis channel count.
    Fourier,
}

/// Spatial layout of the position axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Seq { n: usize },
    Grid { h: usize, w: usize },
}

impl Geometry {
    pub fn positions(&self) -> usize {
        match *self {
            Geometry::Seq { n } => n,
            Geometry::Grid { h, w } => h * w,
        }
    }

    /// Coordinate channels appended by the coordconv variant.
    pub fn coord_rows(&self) -> usize {
        match self {
            Geometry::Seq { .. } => 1,
            Geometry::Grid { .. } => 2,
        }
    }
}

/// Variant selector plus all dimensions of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Context size (rows of the key and query matrices).
    pub m: usize,
    /// Positional channels; even, and divisible by 4 for grids.
    pub c_pe: usize,
    pub encoding: Encoding,
    /// Two-pass variant: first pass synthesizes the key matrix.
    pub tt: bool,
    pub geometry: Geometry,
}

impl LambdaConfig {
    pub fn positions(&self) -> usize {
        self.geometry.positions()
    }

    /// Input width the projections see (x plus coordinate rows).
    pub fn c_key(&self) -> usize {
        match self.encoding {
            Encoding::CoordConv => self.c_in + self.geometry.coord_rows(),
            _ => self.c_in,
        }
    }

    /// Sum variants project the encoding when widths differ.
    pub fn needs_pe_proj(&self) -> bool {
        self.encoding.is_sum() && self.c_pe != self.c_in
    }

    pub fn validate(&self) -> Result<(), LambdaError> {
        if self.c_in == 0 || self.c_out == 0 || self.m == 0 || self.positions() == 0 {
            return Err(LambdaError::EmptyDimension);
        }
        if self.encoding.schedule().is_some() {
            validate_pe_channels(self.c_pe, &self.geometry)?;
        }
        Ok(())
    }
}

fn validate_pe_channels(c_pe: usize, geometry: &Geometry) -> Result<(), LambdaError> {
    if c_pe == 0 || c_pe % 2 != 0 {
        return Err(LambdaError::OddPositionalChannels { c_pe });
    }
    if matches!(geometry, Geometry::Grid { .. }) && c_pe % 4 != 0 {
        return Err(LambdaError::GridChannels { c_pe });
    }
    Ok(())
}

/// Stage labels for non-finite detection inside the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Input,
    Keys,
    Values,
    LambdaContent,
    Queries,
    YContent,
    LambdaPos,
    YPos,
    ContextKeys,
    Output,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Input => "x",
            Stage::Keys => "Kx",
            Stage::Values => "Vx",
            Stage::LambdaContent => "lambda_content",
            Stage::Queries => "Qx",
            Stage::YContent => "y_content",
            Stage::LambdaPos => "lambda_pos",
            Stage::YPos => "y_pos",
            Stage::ContextKeys => "context keys",
            Stage::Output => "y",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LambdaError {
    EmptyDimension,
    /// c_pe must be even for (cos, sin) pairing.
    OddPositionalChannels { c_pe: usize },
    /// Grid encodings split channels across two axes, each cos/sin paired.
    GridChannels { c_pe: usize },
    /// The variant consumes an encoding but none was supplied.
    MissingEncoding { encoding: Encoding },
    /// The encoding's shape does not match the config.
    EncodingShape { expected: Vec<usize>, got: Vec<usize> },
    /// A required weight is absent.
    MissingWeights { name: &'static str },
    /// Input feature map has the wrong shape.
    BadInput { expected: Vec<usize>, got: Vec<usize> },
    /// Non-finite value at the named equation stage.
    NonFinite { stage: Stage },
    Tensor(TensorError),
}

impl fmt::Display for LambdaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaError::EmptyDimension => write!(f, "layer dimensions must be positive"),
            LambdaError::OddPositionalChannels { c_pe } => {
                write!(f, "positional channels must be even, got {c_pe}")
            }
            LambdaError::GridChannels { c_pe } => {
                write!(f, "grid encodings need c_pe divisible by 4, got {c_pe}")
            }
            LambdaError::MissingEncoding { encoding } => {
                write!(f, "variant `{encoding}` needs a positional encoding")
            }
            LambdaError::EncodingShape { expected, got } => {
                write!(f, "encoding shape {got:?} does not match {expected:?}")
            }
            LambdaError::MissingWeights { name } => write!(f, "missing weight `{name}`"),
            LambdaError::BadInput { expected, got } => {
                write!(f, "input shape {got:?} does not match {expected:?}")
            }
            LambdaError::NonFinite { stage } => {
                write!(f, "non-finite value at stage `{}`", stage.name())
            }
            LambdaError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for LambdaError {}

impl From<TensorError> for LambdaError {
    fn from(e: TensorError) -> Self {
        LambdaError::Tensor(e)
    }
}

// ---- positional encodings ---------------------------------------------------

/// Predefined encoding matrix `P` with its frequency list.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    /// c_pe x N, rows in (cos, sin) pairs.
    pub p: Tensor,
    /// One frequency per pair; for grids the row-axis pairs come first.
    pub frequencies: Vec<f32>,
    pub schedule: FreqSchedule,
    pub geometry: Geometry,
}

fn axis_frequencies(schedule: FreqSchedule, c_axis: usize) -> Vec<f32> {
    let pairs = c_axis / 2;
    (0..pairs)
        .map(|k| match schedule {
            FreqSchedule::Fourier => {
                2.0 * core::f32::consts::PI * (k as f32 + 1.0) / (2.0 * c_axis as f32)
            }
            FreqSchedule::Cosine => scalar::powf(10000.0, -2.0 * k as f32 / c_axis as f32),
        })
        .collect()
}

/// Rows of a one-axis encoding: P[2k, t] = cos(w_k t), P[2k+1, t] = sin(w_k t).
fn axis_rows(freqs: &[f32], len: usize) -> Vec<f32> {
    let mut rows = vec![0.0f32; freqs.len() * 2 * len];
    for (k, &w) in freqs.iter().enumerate() {
        for t in 0..len {
            let phase = w * t as f32;
            rows[(2 * k) * len + t] = scalar::cos(phase);
            rows[(2 * k + 1) * len + t] = scalar::sin(phase);
        }
    }
    rows
}

/// Build the encoding for one of the sinusoidal variants.
///
/// For grids the first half of the channels encodes the row coordinate
/// (constant along a row of the image) and the second half the column
/// coordinate; each half is cos/sin paired with its own frequency ladder.
pub fn build_encoding(
    encoding: Encoding,
    c_pe: usize,
    geometry: Geometry,
) -> Result<PositionalEncoding, LambdaError> {
    let schedule = encoding
        .schedule()
        .ok_or(LambdaError::MissingEncoding { encoding })?;
    validate_pe_channels(c_pe, &geometry)?;
    let n = geometry.positions();
    let (data, frequencies) = match geometry {
        Geometry::Seq { n } => {
            let freqs = axis_frequencies(schedule, c_pe);
            (axis_rows(&freqs, n), freqs)
        }
        Geometry::Grid { h, w } => {
            let c_axis = c_pe / 2;
            let freqs = axis_frequencies(schedule, c_axis);
            let rows_r = axis_rows(&freqs, h);
            let rows_c = axis_rows(&freqs, w);
            let mut data = vec![0.0f32; c_pe * h * w];
            for ch in 0..c_axis {
                for r in 0..h {
                    for c in 0..w {
                        let p = r * w + c;
                        data[ch * (h * w) + p] = rows_r[ch * h + r];
                        data[(c_axis + ch) * (h * w) + p] = rows_c[ch * w + c];
                    }
                }
            }
            let mut both = freqs.clone();
            both.extend_from_slice(&freqs);
            (data, both)
        }
    };
    Ok(PositionalEncoding {
        p: Tensor::new([c_pe, n], data).expect("encoding shape"),
        frequencies,
        schedule,
        geometry,
    })
}

/// Normalized coordinate rows in [-1, 1] appended by the coordconv variant.
pub fn coordinate_rows(geometry: &Geometry) -> Tensor {
    fn norm(i: usize, len: usize) -> f32 {
        if len <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f32 / (len - 1) as f32
        }
    }
    match *geometry {
        Geometry::Seq { n } => {
            let data: Vec<f32> = (0..n).map(|i| norm(i, n)).collect();
            Tensor::new([1, n], data).expect("coord shape")
        }
        Geometry::Grid { h, w } => {
            let mut data = vec![0.0f32; 2 * h * w];
            for r in 0..h {
                for c in 0..w {
                    data[r * w + c] = norm(r, h);
                    data[h * w + r * w + c] = norm(c, w);
                }
            }
            Tensor::new([2, h * w], data).expect("coord shape")
        }
    }
}

// ---- weights ----------------------------------------------------------------

/// Learnable matrices of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaWeights {
    /// M x C_key
    pub k: Tensor,
    /// C_out x C_key
    pub v: Tensor,
    /// M x C_key
    pub q: Tensor,
    /// C_out x M
    pub a: Tensor,
    /// C_out x C_pe/2 per-pair gains on the positional readout (decor only).
    pub pos_gain: Option<Tensor>,
    /// C_key x C_pe projection of the encoding (sum variants, width mismatch).
    pub pe_proj: Option<Tensor>,
    /// M x C_key (two-pass only)
    pub k2: Option<Tensor>,
    /// (M * C_key) x C_key (two-pass only)
    pub v2: Option<Tensor>,
}

impl LambdaWeights {
    /// Expected shape of every weight the config calls for, in a fixed order.
    pub fn expected_shapes(cfg: &LambdaConfig) -> Vec<(&'static str, Vec<usize>)> {
        let ck = cfg.c_key();
        let mut shapes = vec![
            ("k", vec![cfg.m, ck]),
            ("v", vec![cfg.c_out, ck]),
            ("q", vec![cfg.m, ck]),
            ("a", vec![cfg.c_out, cfg.m]),
        ];
        if cfg.encoding.is_decor() {
            shapes.push(("pos_gain", vec![cfg.c_out, cfg.c_pe / 2]));
        }
        if cfg.needs_pe_proj() {
            shapes.push(("pe_proj", vec![ck, cfg.c_pe]));
        }
        if cfg.tt {
            shapes.push(("k2", vec![cfg.m, ck]));
            shapes.push(("v2", vec![cfg.m * ck, ck]));
        }
        shapes
    }

    pub fn field(&self, name: &str) -> Option<&Tensor> {
        match name {
            "k" => Some(&self.k),
            "v" => Some(&self.v),
            "q" => Some(&self.q),
            "a" => Some(&self.a),
            "pos_gain" => self.pos_gain.as_ref(),
            "pe_proj" => self.pe_proj.as_ref(),
            "k2" => self.k2.as_ref(),
            "v2" => self.v2.as_ref(),
            _ => None,
        }
    }

    pub fn validate(&self, cfg: &LambdaConfig) -> Result<(), LambdaError> {
        cfg.validate()?;
        for (name, shape) in Self::expected_shapes(cfg) {
            let t = self
                .field(name)
                .ok_or(LambdaError::MissingWeights { name: leak_name(name) })?;
            if t.shape() != shape.as_slice() {
                return Err(LambdaError::Tensor(TensorError::ShapeMismatch {
                    op: leak_name(name),
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                }));
            }
        }
        Ok(())
    }
}

fn leak_name(name: &str) -> &'static str {
    // Weight names come from the fixed table in `expected_shapes`.
    match name {
        "k" => "k",
        "v" => "v",
        "q" => "q",
        "a" => "a",
        "pos_gain" => "pos_gain",
        "pe_proj" => "pe_proj",
        "k2" => "k2",
        "v2" => "v2",
        _ => "weight",
    }
}

/// Tape handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LambdaNodes {
    pub k: NodeId,
    pub v: NodeId,
    pub q: NodeId,
    pub a: NodeId,
    pub pos_gain: Option<NodeId>,
    pub pe_proj: Option<NodeId>,
    pub k2: Option<NodeId>,
    pub v2: Option<NodeId>,
}

impl LambdaWeights {
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> LambdaNodes {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LambdaNodes {
            k: put(&self.k),
            v: put(&self.v),
            q: put(&self.q),
            a: put(&self.a),
            pos_gain: self.pos_gain.as_ref().map(&mut put),
            pe_proj: self.pe_proj.as_ref().map(&mut put),
            k2: self.k2.as_ref().map(&mut put),
            v2: self.v2.as_ref().map(&mut put),
        }
    }
}

// ---- forward ----------------------------------------------------------------

fn check_finite(tape: &Tape, id: NodeId, stage: Stage) -> Result<NodeId, LambdaError> {
    if tape.value(id).all_finite() {
        Ok(id)
    } else {
        Err(LambdaError::NonFinite { stage })
    }
}

struct LayerInputs {
    /// Input to the key path (and the two-pass context).
    xk: NodeId,
    /// Input to the query and value paths.
    xqv: NodeId,
    /// Encoding node for the decor path.
    p: Option<NodeId>,
}

fn prepare_inputs(
    tape: &mut Tape,
    x: NodeId,
    w: &LambdaNodes,
    pe: Option<&PositionalEncoding>,
    cfg: &LambdaConfig,
) -> Result<LayerInputs, LambdaError> {
    let n = cfg.positions();
    let expected = [cfg.c_in, n];
    if tape.value(x).shape() != expected {
        return Err(LambdaError::BadInput {
            expected: expected.to_vec(),
            got: tape.value(x).shape().to_vec(),
        });
    }
    check_finite(tape, x, Stage::Input)?;

    let pe_node = match (cfg.encoding.schedule(), pe) {
        (Some(_), Some(enc)) => {
            let expected = [cfg.c_pe, n];
            if enc.p.shape() != expected {
                return Err(LambdaError::EncodingShape {
                    expected: expected.to_vec(),
                    got: enc.p.shape().to_vec(),
                });
            }
            Some(tape.constant(enc.p.clone()))
        }
        (Some(_), None) => {
            return Err(LambdaError::MissingEncoding {
                encoding: cfg.encoding,
            })
        }
        (None, _) => None,
    };

    match cfg.encoding {
        Encoding::None => Ok(LayerInputs {
            xk: x,
            xqv: x,
            p: None,
        }),
        Encoding::CoordConv => {
            let coords = tape.constant(coordinate_rows(&cfg.geometry));
            let xa = tape.concat_rows(x, coords)?;
            Ok(LayerInputs {
                xk: xa,
                xqv: xa,
                p: None,
            })
        }
        Encoding::CosineSumQkv | Encoding::CosineSumQv => {
            let p = pe_node.expect("sum encodings build a pe node");
            let p_in = match w.pe_proj {
                Some(proj) => tape.matmul(proj, p)?,
                None => {
                    if cfg.c_pe != cfg.c_in {
                        return Err(LambdaError::MissingWeights { name: "pe_proj" });
                    }
                    p
                }
            };
            let xs = tape.add(x, p_in)?;
            let xk = if cfg.encoding == Encoding::CosineSumQkv {
                xs
            } else {
                x
            };
            Ok(LayerInputs {
                xk,
                xqv: xs,
                p: None,
            })
        }
        Encoding::CosineDecor | Encoding::FourierDecor => Ok(LayerInputs {
            xk: x,
            xqv: x,
            p: pe_node,
        }),
    }
}

fn forward_with_key(
    tape: &mut Tape,
    inputs: &LayerInputs,
    key: NodeId,
    w: &LambdaNodes,
    cfg: &LambdaConfig,
) -> Result<NodeId, LambdaError> {
    let kx = tape.matmul(key, inputs.xk)?;
    check_finite(tape, kx, Stage::Keys)?;
    let kbar = tape.softmax_axis(kx, 1)?;

    let vx = tape.matmul(w.v, inputs.xqv)?;
    check_finite(tape, vx, Stage::Values)?;
    let vxt = tape.transpose(vx)?;
    let lam_c = tape.matmul(kbar, vxt)?;
    check_finite(tape, lam_c, Stage::LambdaContent)?;

    let qx = tape.matmul(w.q, inputs.xqv)?;
    check_finite(tape, qx, Stage::Queries)?;
    let lam_ct = tape.transpose(lam_c)?;
    let y_content = tape.matmul(lam_ct, qx)?;
    check_finite(tape, y_content, Stage::YContent)?;

    let y = if let Some(p) = inputs.p {
        let akbar = tape.matmul(w.a, kbar)?;
        let pt = tape.transpose(p)?;
        let lam_p = tape.matmul(akbar, pt)?;
        check_finite(tape, lam_p, Stage::LambdaPos)?;
        let gain = w.pos_gain.ok_or(LambdaError::MissingWeights { name: "pos_gain" })?;
        let lam_pg = tape.pair_scale(lam_p, gain)?;
        let y_pos = tape.matmul(lam_pg, p)?;
        check_finite(tape, y_pos, Stage::YPos)?;
        tape.add(y_content, y_pos)?
    } else {
        y_content
    };
    check_finite(tape, y, Stage::Output)?;

    // Guaranteed by construction; cheap sanity while developing.
    debug_assert_eq!(tape.value(y).shape(), [cfg.c_out, cfg.positions()]);
    Ok(y)
}

/// Single-pass layer. `pe` is required for the sinusoidal variants.
pub fn lambda_forward(
    tape: &mut Tape,
    x: NodeId,
    w: &LambdaNodes,
    pe: Option<&PositionalEncoding>,
    cfg: &LambdaConfig,
) -> Result<NodeId, LambdaError> {
    let inputs = prepare_inputs(tape, x, w, pe, cfg)?;
    forward_with_key(tape, &inputs, w.k, w, cfg)
}

/// Two-pass layer: the first pass synthesizes an input-dependent key matrix
/// `Khat[m, c] = sum_n softmax_N(K2 xk)[m, n] (V2 xk)[m*Ck + c, n]`, the
/// second pass is the plain layer with `K` replaced by `Khat`.
pub fn lambda_tt_forward(
    tape: &mut Tape,
    x: NodeId,
    w: &LambdaNodes,
    pe: Option<&PositionalEncoding>,
    cfg: &LambdaConfig,
) -> Result<NodeId, LambdaError> {
    let k2 = w.k2.ok_or(LambdaError::MissingWeights { name: "k2" })?;
    let v2 = w.v2.ok_or(LambdaError::MissingWeights { name: "v2" })?;
    let inputs = prepare_inputs(tape, x, w, pe, cfg)?;

    let k2x = tape.matmul(k2, inputs.xk)?;
    let kbar2 = tape.softmax_axis(k2x, 1)?;
    let v2x = tape.matmul(v2, inputs.xk)?;
    let khat = tape.block_attend(kbar2, v2x)?;
    check_finite(tape, khat, Stage::ContextKeys)?;

    forward_with_key(tape, &inputs, khat, w, cfg)
}

/// Forward dispatch on `cfg.tt`.
pub fn forward(
    tape: &mut Tape,
    x: NodeId,
    w: &LambdaNodes,
    pe: Option<&PositionalEncoding>,
    cfg: &LambdaConfig,
) -> Result<NodeId, LambdaError> {
    if cfg.tt {
        lambda_tt_forward(tape, x, w, pe, cfg)
    } else {
        lambda_forward(tape, x, w, pe, cfg)
    }
}

/// Evaluate the layer on a bare tensor (throwaway tape, no gradients).
pub fn forward_value(
    x: &Tensor,
    w: &LambdaWeights,
    pe: Option<&PositionalEncoding>,
    cfg: &LambdaConfig,
) -> Result<Tensor, LambdaError> {
    let mut tape = Tape::new();
    let nodes = w.insert(&mut tape, false);
    let xid = tape.constant(x.clone());
    let y = forward(&mut tape, xid, &nodes, pe, cfg)?;
    Ok(tape.value(y).clone())
}

// ---- equivariance probe -------------------------------------------------------

/// Position relabelings used by the equivariance probe. Circular semantics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shift {
    /// Columns move right by `s` (mod N).
    Seq(usize),
    /// Rows move down by `dr`, columns right by `dc` (mod H, W).
    Grid { dr: usize, dc: usize },
    /// `perm[i]` is the new position of old position `i`.
    Permutation(Vec<usize>),
}

/// Apply a position relabeling to the columns of a channels x positions map.
pub fn shift_columns(x: &Tensor, shift: &Shift, geometry: &Geometry) -> Tensor {
    let n = geometry.positions();
    assert_eq!(x.shape()[1], n, "shift geometry mismatch");
    let rows = x.shape()[0];
    let dest = |i: usize| -> usize {
        match (shift, geometry) {
            (Shift::Seq(s), _) => (i + s) % n,
            (Shift::Grid { dr, dc }, Geometry::Grid { h, w }) => {
                let (r, c) = (i / w, i % w);
                ((r + dr) % h) * w + ((c + dc) % w)
            }
            (Shift::Grid { dr: _, dc }, Geometry::Seq { .. }) => (i + dc) % n,
            (Shift::Permutation(p), _) => p[i],
        }
    };
    let mut out = vec![0.0f32; rows * n];
    for i in 0..n {
        let j = dest(i);
        for r in 0..rows {
            out[r * n + j] = x.data()[r * n + i];
        }
    }
    Tensor::new([rows, n], out).expect("shift shape")
}

/// Max absolute deviation between layer(shift(x)) and shift(layer(x)).
pub fn equivariance_probe<F>(
    layer: F,
    x: &Tensor,
    shift: &Shift,
    geometry: &Geometry,
) -> Result<f32, LambdaError>
where
    F: Fn(&Tensor) -> Result<Tensor, LambdaError>,
{
    let shifted_in = shift_columns(x, shift, geometry);
    let out_of_shifted = layer(&shifted_in)?;
    let shifted_out = shift_columns(&layer(x)?, shift, geometry);
    Ok(out_of_shifted.max_abs_diff(&shifted_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use alloc::vec;
    use rand::Rng as _;

    fn seq_cfg(encoding: Encoding, c_in: usize, c_out: usize, m: usize, c_pe: usize, n: usize) -> LambdaConfig {
        LambdaConfig {
            c_in,
            c_out,
            m,
            c_pe,
            encoding,
            tt: false,
            geometry: Geometry::Seq { n },
        }
    }

    fn random_tensor(rng: &mut seed::Rng, shape: &[usize], scale: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn random_weights(rng: &mut seed::Rng, cfg: &LambdaConfig) -> LambdaWeights {
        let mut w = LambdaWeights {
            k: Tensor::zeros([1]),
            v: Tensor::zeros([1]),
            q: Tensor::zeros([1]),
            a: Tensor::zeros([1]),
            pos_gain: None,
            pe_proj: None,
            k2: None,
            v2: None,
        };
        for (name, shape) in LambdaWeights::expected_shapes(cfg) {
            let t = random_tensor(rng, &shape, 0.8);
            match name {
                "k" => w.k = t,
                "v" => w.v = t,
                "q" => w.q = t,
                "a" => w.a = t,
                "pos_gain" => w.pos_gain = Some(t),
                "pe_proj" => w.pe_proj = Some(t),
                "k2" => w.k2 = Some(t),
                "v2" => w.v2 = Some(t),
                _ => unreachable!(),
            }
        }
        w
    }

    fn pe_for(cfg: &LambdaConfig) -> Option<PositionalEncoding> {
        cfg.encoding
            .schedule()
            .map(|_| build_encoding(cfg.encoding, cfg.c_pe, cfg.geometry).unwrap())
    }

    #[test]
    fn fourier_frequencies_match_schedule() {
        // c_pe = 8 per axis: w = 2 pi c / 16 for c = 1..4
        let enc = build_encoding(Encoding::FourierDecor, 8, Geometry::Seq { n: 4 }).unwrap();
        let expected: Vec<f32> = (1..=4)
            .map(|c| 2.0 * core::f32::consts::PI * c as f32 / 16.0)
            .collect();
        assert_eq!(enc.frequencies, expected);
    }

    #[test]
    fn encoding_at_origin_is_cos_one_sin_zero() {
        for encoding in [Encoding::CosineDecor, Encoding::FourierDecor] {
            let enc = build_encoding(encoding, 6, Geometry::Seq { n: 5 }).unwrap();
            for k in 0..3 {
                assert_eq!(enc.p.at2(2 * k, 0), 1.0);
                assert_eq!(enc.p.at2(2 * k + 1, 0), 0.0);
            }
        }
    }

    #[test]
    fn encoding_entries_bounded() {
        let enc = build_encoding(Encoding::CosineDecor, 16, Geometry::Grid { h: 8, w: 8 }).unwrap();
        assert!(enc.p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_channels_rejected() {
        let err = build_encoding(Encoding::FourierDecor, 7, Geometry::Seq { n: 4 }).unwrap_err();
        assert!(matches!(err, LambdaError::OddPositionalChannels { c_pe: 7 }));
        let err = build_encoding(Encoding::FourierDecor, 6, Geometry::Grid { h: 4, w: 4 }).unwrap_err();
        assert!(matches!(err, LambdaError::GridChannels { c_pe: 6 }));
    }

    #[test]
    fn fourier_gram_is_stationary_mod_n() {
        // N a multiple of 2 c_pe makes the Gram kernel exactly circulant;
        // brute force over all index pairs at N = 16.
        let n = 16;
        let enc = build_encoding(Encoding::FourierDecor, 8, Geometry::Seq { n }).unwrap();
        let p = &enc.p;
        let gram = |a: usize, b: usize| -> f32 {
            (0..p.shape()[0]).map(|c| p.at2(c, a) * p.at2(c, b)).sum()
        };
        for m in 0..n {
            for j in 0..n {
                for s in 0..n {
                    let d = (gram(m, j) - gram((m + s) % n, (j + s) % n)).abs();
                    assert!(d <= 1e-5, "G not stationary at ({m},{j}) shift {s}: {d}");
                }
            }
        }
    }

    #[test]
    fn zero_value_and_a_give_zero_output() {
        let cfg = seq_cfg(Encoding::FourierDecor, 3, 2, 4, 8, 6);
        let mut rng = seed::rng(11);
        let mut w = random_weights(&mut rng, &cfg);
        w.v = Tensor::zeros([cfg.c_out, cfg.c_in]);
        w.a = Tensor::zeros([cfg.c_out, cfg.m]);
        let pe = pe_for(&cfg).unwrap();
        let x = random_tensor(&mut rng, &[3, 6], 1.0);
        let y = forward_value(&x, &w, Some(&pe), &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_softmax_is_forced() {
        // N = 1: Kbar is the all-ones M x 1 column.
        let cfg = seq_cfg(Encoding::None, 2, 2, 3, 0, 1);
        let mut rng = seed::rng(3);
        let w = random_weights(&mut rng, &cfg);
        let x = random_tensor(&mut rng, &[2, 1], 1.0);

        let mut tape = Tape::new();
        let nodes = w.insert(&mut tape, false);
        let xid = tape.constant(x.clone());
        let kx = tape.matmul(nodes.k, xid).unwrap();
        let kbar = tape.softmax_axis(kx, 1).unwrap();
        assert!(tape.value(kbar).data().iter().all(|&v| v == 1.0));

        // and the full forward agrees with the reference chain
        let y = forward_value(&x, &w, None, &cfg).unwrap();
        assert_eq!(y.shape(), [2, 1]);
    }

    fn widen(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    fn ref_weights(w: &LambdaWeights) -> crate::reference::LayerWeights {
        crate::reference::LayerWeights {
            k: widen(&w.k),
            v: widen(&w.v),
            q: widen(&w.q),
            a: widen(&w.a),
            pos_gain: w.pos_gain.as_ref().map(widen).unwrap_or_default(),
            pe_proj: w.pe_proj.as_ref().map(|t| widen(t)),
            k2: w.k2.as_ref().map(widen).unwrap_or_default(),
            v2: w.v2.as_ref().map(widen).unwrap_or_default(),
        }
    }

    fn ref_path(encoding: Encoding) -> crate::reference::PathKind {
        use crate::reference::PathKind;
        match encoding {
            Encoding::None | Encoding::CoordConv => PathKind::ContentOnly,
            Encoding::CosineSumQkv => PathKind::SumQkv,
            Encoding::CosineSumQv => PathKind::SumQv,
            Encoding::CosineDecor | Encoding::FourierDecor => PathKind::Decor,
        }
    }

    /// Evaluate via the f64 loop oracle, handling coordconv augmentation.
    fn oracle_forward(
        x: &Tensor,
        w: &LambdaWeights,
        pe: Option<&PositionalEncoding>,
        cfg: &LambdaConfig,
    ) -> Vec<f64> {
        use crate::reference as r;
        let n = cfg.positions();
        let coord_rows = if cfg.encoding == Encoding::CoordConv {
            cfg.geometry.coord_rows()
        } else {
            0
        };
        let mut xd = widen(x);
        if coord_rows > 0 {
            xd.extend(widen(&coordinate_rows(&cfg.geometry)));
        }
        let dims = r::LayerDims {
            c_in: cfg.c_in,
            c_out: cfg.c_out,
            m: cfg.m,
            c_pe: cfg.c_pe,
            n,
            coord_rows,
        };
        let rw = ref_weights(w);
        let pd = pe.map(|e| widen(&e.p));
        let path = ref_path(cfg.encoding);
        let khat = cfg
            .tt
            .then(|| r::tt_context_keys(&xd, &rw, pd.as_deref(), dims, path));
        r::lambda_layer(&xd, &rw, pd.as_deref(), dims, path, khat.as_deref())
    }

    #[test]
    fn forward_matches_loop_oracle_for_every_variant() {
        let mut rng = seed::rng(2024);
        for encoding in Encoding::ALL {
            for tt in [false, true] {
                let mut cfg = seq_cfg(encoding, 2, 1, 2, 4, 3);
                cfg.tt = tt;
                let w = random_weights(&mut rng, &cfg);
                let pe = pe_for(&cfg);
                let x = random_tensor(&mut rng, &[2, 3], 1.0);
                let y = forward_value(&x, &w, pe.as_ref(), &cfg).unwrap();
                let want = oracle_forward(&x, &w, pe.as_ref(), &cfg);
                for (a, b) in y.data().iter().zip(&want) {
                    assert!(
                        (*a as f64 - b).abs() < 1e-5,
                        "{encoding} tt={tt}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_matches_oracle_on_grid_sum_with_projection() {
        // c_pe != c_in exercises the learned encoding projection.
        let cfg = LambdaConfig {
            c_in: 3,
            c_out: 2,
            m: 2,
            c_pe: 8,
            encoding: Encoding::CosineSumQkv,
            tt: false,
            geometry: Geometry::Grid { h: 3, w: 4 },
        };
        let mut rng = seed::rng(5);
        let w = random_weights(&mut rng, &cfg);
        assert!(w.pe_proj.is_some());
        let pe = pe_for(&cfg).unwrap();
        let x = random_tensor(&mut rng, &[3, 12], 1.0);
        let y = forward_value(&x, &w, Some(&pe), &cfg).unwrap();
        let want = oracle_forward(&x, &w, Some(&pe), &cfg);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn tt_zero_values_give_uniform_attention() {
        let mut cfg = seq_cfg(Encoding::None, 2, 2, 3, 0, 5);
        cfg.tt = true;
        let mut rng = seed::rng(9);
        let mut w = random_weights(&mut rng, &cfg);
        w.v2 = Some(Tensor::zeros([cfg.m * cfg.c_in, cfg.c_in]));
        let x = random_tensor(&mut rng, &[2, 5], 1.0);

        let mut tape = Tape::new();
        let nodes = w.insert(&mut tape, false);
        let xid = tape.constant(x.clone());
        let k2x = tape.matmul(nodes.k2.unwrap(), xid).unwrap();
        let kbar2 = tape.softmax_axis(k2x, 1).unwrap();
        let v2x = tape.matmul(nodes.v2.unwrap(), xid).unwrap();
        let khat = tape.block_attend(kbar2, v2x).unwrap();
        assert!(tape.value(khat).data().iter().all(|&v| v == 0.0));
        // Khat = 0 makes the second-pass scores zero, so Kbar is uniform.
        let kx = tape.matmul(khat, xid).unwrap();
        let kbar = tape.softmax_axis(kx, 1).unwrap();
        for &v in tape.value(kbar).data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn tt_single_position_matches_oracle() {
        let mut cfg = seq_cfg(Encoding::None, 2, 2, 2, 0, 1);
        cfg.tt = true;
        let mut rng = seed::rng(13);
        let w = random_weights(&mut rng, &cfg);
        let x = random_tensor(&mut rng, &[2, 1], 1.0);
        let y = forward_value(&x, &w, None, &cfg).unwrap();
        let want = oracle_forward(&x, &w, None, &cfg);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_input_is_reported_with_stage() {
        let cfg = seq_cfg(Encoding::None, 2, 2, 2, 0, 3);
        let mut rng = seed::rng(1);
        let w = random_weights(&mut rng, &cfg);
        let mut x = random_tensor(&mut rng, &[2, 3], 1.0);
        x.data_mut()[0] = f32::NAN;
        let err = forward_value(&x, &w, None, &cfg).unwrap_err();
        assert!(matches!(err, LambdaError::NonFinite { stage: Stage::Input }));
    }

    #[test]
    fn overflow_is_reported_at_key_stage() {
        let cfg = seq_cfg(Encoding::None, 2, 2, 2, 0, 3);
        let mut rng = seed::rng(1);
        let mut w = random_weights(&mut rng, &cfg);
        w.k = Tensor::filled([2, 2], f32::MAX);
        let x = Tensor::filled([2, 3], f32::MAX);
        let err = forward_value(&x, &w, None, &cfg).unwrap_err();
        assert!(matches!(err, LambdaError::NonFinite { stage: Stage::Keys }));
    }

    #[test]
    fn content_path_is_permutation_equivariant() {
        let cfg = seq_cfg(Encoding::None, 3, 2, 4, 0, 12);
        let mut rng = seed::rng(21);
        let w = random_weights(&mut rng, &cfg);
        let x = random_tensor(&mut rng, &[3, 12], 1.0);
        let layer = |inp: &Tensor| forward_value(inp, &w, None, &cfg);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let dev = equivariance_probe(layer, &x, &Shift::Permutation(perm), &cfg.geometry)
                .unwrap();
            assert!(dev <= 1e-5, "content permutation deviation {dev}");
        }
    }

    #[test]
    fn fourier_decor_is_circular_shift_equivariant() {
        let n = 16;
        let cfg = seq_cfg(Encoding::FourierDecor, 3, 2, 4, 8, n);
        let mut rng = seed::rng(22);
        let w = random_weights(&mut rng, &cfg);
        let pe = pe_for(&cfg).unwrap();
        let x = random_tensor(&mut rng, &[3, n], 1.0);
        let layer = |inp: &Tensor| forward_value(inp, &w, Some(&pe), &cfg);
        for s in 0..n {
            let dev = equivariance_probe(layer, &x, &Shift::Seq(s), &cfg.geometry).unwrap();
            assert!(dev <= 1e-4, "shift {s} deviation {dev}");
        }
    }

    #[test]
    fn cosine_sum_qkv_leaks_absolute_position() {
        let n = 16;
        let cfg = seq_cfg(Encoding::CosineSumQkv, 8, 4, 6, 8, n);
        let mut rng = seed::rng(23);
        let w = random_weights(&mut rng, &cfg);
        let pe = pe_for(&cfg).unwrap();
        let x = random_tensor(&mut rng, &[8, n], 1.0);
        let layer = |inp: &Tensor| forward_value(inp, &w, Some(&pe), &cfg);
        let dev = equivariance_probe(layer, &x, &Shift::Seq(5), &cfg.geometry).unwrap();
        assert!(dev > 0.01, "expected absolute-position leakage, got {dev}");
    }

    #[test]
    fn tracked_and_untracked_forward_agree_bitwise() {
        let cfg = seq_cfg(Encoding::FourierDecor, 3, 2, 4, 8, 10);
        let mut rng = seed::rng(31);
        let w = random_weights(&mut rng, &cfg);
        let pe = pe_for(&cfg).unwrap();
        let x = random_tensor(&mut rng, &[3, 10], 1.0);

        let run = |trainable: bool| {
            let mut tape = Tape::new();
            let nodes = w.insert(&mut tape, trainable);
            let xid = tape.constant(x.clone());
            let y = forward(&mut tape, xid, &nodes, Some(&pe), &cfg).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(true).data(), run(false).data());
    }
}
