//! Adaptive projection head and attention-weighted normal representation.
//!
//! The head is shared between the query and its neighbor rows. Neighbor rows
//! are mixed by a self-attention block with no value transform and no layer
//! normalization, plus a residual path, then averaged:
//!
//! ```text
//! A        = softmax_rows((M̂ W_q)(M̂ W_k)ᵀ / √D)
//! z_normal = mean_rows(M̂ + A M̂) = Σ_c w_c M̂[c],  w_c = (1 + Σ_r A[r,c]) / K
//! ```
//!
//! so the effective mixing weights always sum to 2.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bank::NeighborSet;
use crate::error::{CapError, Result};
use crate::format::{self, ByteReader};

const MODEL_MAGIC: &[u8; 8] = b"CAPMODL1";
const MODEL_VERSION: u32 = 1;

/// Structure of the projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub enum HeadVariant {
    /// `X Wᵀ`
    #[default]
    #[serde(rename = "l")]
    Linear,
    /// `max(0, X Wᵀ)`
    #[serde(rename = "l-relu")]
    LinearRelu,
    /// `max(0, X W₁ᵀ) W₂ᵀ`
    #[serde(rename = "l-relu-l")]
    LinearReluLinear,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [
        HeadVariant::Linear,
        HeadVariant::LinearRelu,
        HeadVariant::LinearReluLinear,
    ];

    pub fn code(self) -> u8 {
        match self {
            HeadVariant::Linear => 0,
            HeadVariant::LinearRelu => 1,
            HeadVariant::LinearReluLinear => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Linear => "l",
            HeadVariant::LinearRelu => "l-relu",
            HeadVariant::LinearReluLinear => "l-relu-l",
        }
    }

    pub fn matrix_count(self) -> usize {
        match self {
            HeadVariant::LinearReluLinear => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = CapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l" | "linear" => Ok(HeadVariant::Linear),
            "l-relu" | "linear-relu" => Ok(HeadVariant::LinearRelu),
            "l-relu-l" | "linear-relu-linear" => Ok(HeadVariant::LinearReluLinear),
            other => Err(CapError::InvalidConfig(format!("unknown head variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub variant: HeadVariant,
    pub first: Array2<f64>,
    /// Present only for [`HeadVariant::LinearReluLinear`].
    pub second: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
}

/// Names the trainable matrices, in file and gradient order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    HeadFirst,
    HeadSecond,
    Query,
    Key,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::HeadFirst => "head.w1",
            ParamKind::HeadSecond => "head.w2",
            ParamKind::Query => "attention.w_q",
            ParamKind::Key => "attention.w_k",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub head: HeadParams,
    pub attention: Option<AttentionParams>,
    dim: usize,
}

impl ModelParams {
    pub fn new(head: HeadParams, attention: Option<AttentionParams>) -> Result<Self> {
        let dim = head.first.nrows();
        let model = Self {
            head,
            attention,
            dim,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(CapError::Empty("model dimension"));
        }
        if (self.head.variant == HeadVariant::LinearReluLinear) != self.head.second.is_some() {
            return Err(CapError::InvalidConfig(format!(
                "head variant {} expects {} matrices",
                self.head.variant,
                self.head.variant.matrix_count()
            )));
        }
        for kind in self.param_kinds() {
            let m = self.param(kind);
            if m.dim() != (d, d) {
                return Err(CapError::DimensionMismatch {
                    expected: d,
                    actual: if m.nrows() != d { m.nrows() } else { m.ncols() },
                });
            }
            if let Some(index) = m.iter().position(|v| !v.is_finite()) {
                return Err(CapError::NonFinite {
                    what: kind.name(),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = vec![ParamKind::HeadFirst];
        if self.head.second.is_some() {
            kinds.push(ParamKind::HeadSecond);
        }
        if self.attention.is_some() {
            kinds.extend([ParamKind::Query, ParamKind::Key]);
        }
        kinds
    }

    /// Panics if `kind` is not present in this model.
    pub fn param(&self, kind: ParamKind) -> &Array2<f64> {
        match kind {
            ParamKind::HeadFirst => &self.head.first,
            ParamKind::HeadSecond => self.head.second.as_ref().expect("no second head matrix"),
            ParamKind::Query => &self.attention.as_ref().expect("attention disabled").w_q,
            ParamKind::Key => &self.attention.as_ref().expect("attention disabled").w_k,
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> &mut Array2<f64> {
        match kind {
            ParamKind::HeadFirst => &mut self.head.first,
            ParamKind::HeadSecond => self.head.second.as_mut().expect("no second head matrix"),
            ParamKind::Query => &mut self.attention.as_mut().expect("attention disabled").w_q,
            ParamKind::Key => &mut self.attention.as_mut().expect("attention disabled").w_k,
        }
    }

    /// Frobenius norm over all head matrices.
    pub fn head_frobenius(&self) -> f64 {
        let mut sq = self.head.first.iter().map(|v| v * v).sum::<f64>();
        if let Some(second) = &self.head.second {
            sq += second.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    /// Writes the model file. Matrices are stored as 32-bit floats.
    pub fn save<W: Write>(&self, w: &mut W, metadata: &serde_json::Value) -> Result<()> {
        let text = serde_json::to_string(metadata)
            .map_err(|e| CapError::Malformed(format!("metadata encoding: {e}")))?;
        format::write_header(w, MODEL_MAGIC, MODEL_VERSION)?;
        format::write_u8(w, self.head.variant.code())?;
        format::write_u8(w, u8::from(self.attention.is_some()))?;
        format::write_u64(w, self.dim as u64)?;
        for kind in self.param_kinds() {
            format::write_f32s(w, self.param(kind).iter().map(|&v| v as f32))?;
        }
        format::write_metadata(w, &text)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<(Self, serde_json::Value)> {
        let mut reader = ByteReader::from_reader(r)?;
        reader.expect_header(MODEL_MAGIC, MODEL_VERSION)?;
        let code = reader.read_u8("header")?;
        let variant = HeadVariant::from_code(code)
            .ok_or_else(|| CapError::Malformed(format!("unknown head variant code {code}")))?;
        let attention_flag = reader.read_u8("header")?;
        if attention_flag > 1 {
            return Err(CapError::Malformed(format!("attention flag {attention_flag}")));
        }
        let d = reader.read_usize("header")?;
        if d == 0 {
            return Err(CapError::Malformed("model dimension 0".into()));
        }
        let count = format::checked_product(&[d, d], "matrices")?;
        let read_matrix = |reader: &mut ByteReader| -> Result<Array2<f64>> {
            let values = reader.read_f32s(count, "matrices")?;
            Ok(Array2::from_shape_vec((d, d), values.into_iter().map(f64::from).collect())
                .expect("shape checked"))
        };
        let first = read_matrix(&mut reader)?;
        let second = match variant {
            HeadVariant::LinearReluLinear => Some(read_matrix(&mut reader)?),
            _ => None,
        };
        let attention = if attention_flag == 1 {
            let w_q = read_matrix(&mut reader)?;
            let w_k = read_matrix(&mut reader)?;
            Some(AttentionParams { w_q, w_k })
        } else {
            None
        };
        let text = reader.read_metadata()?;
        let metadata = serde_json::from_str(&text)
            .map_err(|e| CapError::Malformed(format!("metadata: {e}")))?;
        let model = Self::new(
            HeadParams {
                variant,
                first,
                second,
            },
            attention,
        )?;
        Ok((model, metadata))
    }
}

/// Identity head matrices and Gaussian attention matrices with standard
/// deviation `1/√D`, deterministic in `seed`.
///
/// Attention entries are drawn in double precision and rounded to f32 so an
/// untrained model survives a trip through the model file unchanged.
pub fn init_model(dim: usize, variant: HeadVariant, attention_enabled: bool, seed: u64) -> ModelParams {
    assert!(dim >= 1, "model dimension must be at least 1");
    let identity = Array2::<f64>::eye(dim);
    let head = HeadParams {
        variant,
        first: identity.clone(),
        second: (variant == HeadVariant::LinearReluLinear).then(|| identity.clone()),
    };
    let attention = attention_enabled.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut draw = || Array2::from_shape_fn((dim, dim), |_| normal.sample(&mut rng) as f32 as f64);
        let w_q = draw();
        let w_k = draw();
        AttentionParams { w_q, w_k }
    });
    ModelParams {
        head,
        attention,
        dim,
    }
}

/// Intermediate values of the head needed for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct HeadTrace {
    /// `X W₁ᵀ` before any activation.
    pub pre: Array2<f64>,
    /// `max(0, pre)` for the two-layer variant.
    pub hidden: Option<Array2<f64>>,
    pub out: Array2<f64>,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn project_traced(head: &HeadParams, input: ArrayView2<'_, f64>) -> HeadTrace {
    let pre = input.dot(&head.first.t());
    match head.variant {
        HeadVariant::Linear => HeadTrace {
            out: pre.clone(),
            pre,
            hidden: None,
        },
        HeadVariant::LinearRelu => HeadTrace {
            out: relu(&pre),
            pre,
            hidden: None,
        },
        HeadVariant::LinearReluLinear => {
            let hidden = relu(&pre);
            let second = head.second.as_ref().expect("two-layer head");
            let out = hidden.dot(&second.t());
            HeadTrace {
                pre,
                hidden: Some(hidden),
                out,
            }
        }
    }
}

/// Applies the projection head to every row of `input`.
pub fn project(head: &HeadParams, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let d = head.first.ncols();
    if input.ncols() != d {
        return Err(CapError::DimensionMismatch {
            expected: d,
            actual: input.ncols(),
        });
    }
    Ok(project_traced(head, input).out)
}

/// Computes the logits and row-softmax without checking shapes.
pub(crate) fn attention_weights(attn: &AttentionParams, m_hat: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let scale = (m_hat.ncols() as f64).sqrt();
    let q = m_hat.dot(&attn.w_q);
    let k = m_hat.dot(&attn.w_k);
    let mut a = q.dot(&k.t());
    a.mapv_inplace(|v| v / scale);
    for (row, mut logits) in a.axis_iter_mut(Axis(0)).enumerate() {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || logits.iter().any(|v| !v.is_finite()) {
            return Err(CapError::NonFiniteLogits { row });
        }
        let mut sum = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in logits.iter_mut() {
            *v /= sum;
        }
    }
    Ok(a)
}

fn uniform_attention(k: usize) -> Array2<f64> {
    Array2::from_elem((k, k), 1.0 / k as f64)
}

fn check_neighbor_matrix(m_hat: ArrayView2<'_, f64>, dim: Option<usize>) -> Result<()> {
    if m_hat.nrows() == 0 {
        return Err(CapError::Empty("neighbor matrix"));
    }
    if let Some(d) = dim {
        if m_hat.ncols() != d {
            return Err(CapError::DimensionMismatch {
                expected: d,
                actual: m_hat.ncols(),
            });
        }
    }
    Ok(())
}

/// Self-attention over the projected neighbor rows.
///
/// Returns the row-stochastic K×K attention matrix and the attended rows `A·M̂`.
pub fn reformed_attention(
    attn: &AttentionParams,
    m_hat: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_neighbor_matrix(m_hat, Some(attn.w_q.nrows()))?;
    let a = attention_weights(attn, m_hat)?;
    let attended = a.dot(&m_hat);
    Ok((a, attended))
}

/// Residual-plus-attention mean of the neighbor rows and the effective weight
/// each neighbor receives. Without attention parameters the attention matrix
/// is uniform and the result is twice the row mean.
pub fn normal_representation(
    m_hat: ArrayView2<'_, f64>,
    attn: Option<&AttentionParams>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (_, z_normal, mix) = mix_neighbors(m_hat, attn)?;
    Ok((z_normal, mix))
}

fn mix_neighbors(
    m_hat: ArrayView2<'_, f64>,
    attn: Option<&AttentionParams>,
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    check_neighbor_matrix(m_hat, attn.map(|a| a.w_q.nrows()))?;
    let k = m_hat.nrows();
    let a = match attn {
        Some(attn) => attention_weights(attn, m_hat)?,
        None => uniform_attention(k),
    };
    let attended = a.dot(&m_hat);
    let z_normal = (&m_hat + &attended).sum_axis(Axis(0)) / k as f64;
    let mix = (a.sum_axis(Axis(0)) + 1.0) / k as f64;
    Ok((a, z_normal, mix))
}

/// Every intermediate of one query's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z: Array1<f64>,
    pub z_hat: Array1<f64>,
    pub m_hat: Array2<f64>,
    pub attention_matrix: Array2<f64>,
    pub z_normal: Array1<f64>,
    /// Raw weights over neighbors; they sum to 2.
    pub mix_weights: Array1<f64>,
}

impl ForwardOutput {
    /// Mixing weights rescaled to sum to 1, for display.
    pub fn display_weights(&self) -> Array1<f64> {
        &self.mix_weights / 2.0
    }
}

/// Head traces kept alongside a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub query: HeadTrace,
    pub neighbors: HeadTrace,
}

pub(crate) fn forward_traced(
    model: &ModelParams,
    z: ArrayView1<'_, f64>,
    m: ArrayView2<'_, f64>,
) -> Result<(ForwardOutput, ForwardTrace)> {
    let d = model.dim();
    if z.len() != d {
        return Err(CapError::DimensionMismatch {
            expected: d,
            actual: z.len(),
        });
    }
    check_neighbor_matrix(m, Some(d))?;
    let z_row = z.insert_axis(Axis(0));
    let query = project_traced(&model.head, z_row);
    let neighbors = project_traced(&model.head, m);
    let (a, z_normal, mix) = mix_neighbors(neighbors.out.view(), model.attention.as_ref())?;
    let out = ForwardOutput {
        z: z.to_owned(),
        z_hat: query.out.row(0).to_owned(),
        m_hat: neighbors.out.clone(),
        attention_matrix: a,
        z_normal,
        mix_weights: mix,
    };
    Ok((out, ForwardTrace { query, neighbors }))
}

pub(crate) fn to_f64_row(v: &[f32]) -> Array1<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub(crate) fn to_f64_matrix(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

/// Projects the query and its neighbors and builds the normal representation.
pub fn forward(model: &ModelParams, z: &[f32], neighbors: &NeighborSet) -> Result<ForwardOutput> {
    let z = to_f64_row(z);
    let m = to_f64_matrix(&neighbors.matrix);
    Ok(forward_traced(model, z.view(), m.view())?.0)
}
