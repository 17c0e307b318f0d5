//! Per-point feature encoders ending in a max pool: plain MLP, multi-scale
//! fusion (MSF), concatenated MLP (CMLP) and the attention variant (TMLP).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{Buffers, Forward, Mode, ParamLayout, Params};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Feed-forward hidden width as a multiple of the attention width.
pub const FF_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Mlp,
    Msf,
    Cmlp,
    Tmlp,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] = [Self::Mlp, Self::Msf, Self::Cmlp, Self::Tmlp];
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Msf => "msf",
            Self::Cmlp => "cmlp",
            Self::Tmlp => "tmlp",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "msf" => Ok(Self::Msf),
            "cmlp" => Ok(Self::Cmlp),
            "tmlp" => Ok(Self::Tmlp),
            _ => Err(Error::InvalidArgument(format!("unknown encoder variant {s:?}"))),
        }
    }
}

/// Encoder architecture.
///
/// `widths` are the per-point layer widths after the 3-D input. For TMLP the
/// attention block sits after the second-to-last layer, whose width must
/// equal `attn_dim`. MSF and CMLP concatenate the max pools of their last
/// `fused_layers` layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub variant: EncoderVariant,
    pub widths: Vec<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub attn_dim: usize,
    #[serde(default)]
    pub ff_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub fused_layers: usize,
}

fn default_heads() -> usize {
    8
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl EncoderSpec {
    /// Full-size widths.
    pub fn full(variant: EncoderVariant) -> Self {
        Self::scaled(variant, 1)
    }

    /// Desk-scale widths: every width divided by 8.
    pub fn toy(variant: EncoderVariant) -> Self {
        Self::scaled(variant, 8)
    }

    fn scaled(variant: EncoderVariant, div: usize) -> Self {
        let w = |v: &[usize]| v.iter().map(|x| x / div).collect::<Vec<_>>();
        let (widths, fused_layers) = match variant {
            EncoderVariant::Mlp => (w(&[64, 128, 256, 1024]), 0),
            EncoderVariant::Msf => (w(&[64, 128, 256, 1024]), 3),
            EncoderVariant::Cmlp => (w(&[64, 128, 256, 512]), 3),
            EncoderVariant::Tmlp => (w(&[64, 128, 1024]), 0),
        };
        let (attn_dim, ff_dim) = if variant == EncoderVariant::Tmlp {
            let d = 128 / div;
            (d, FF_EXPANSION * d)
        } else {
            (0, 0)
        };
        EncoderSpec {
            variant,
            widths,
            heads: default_heads(),
            attn_dim,
            ff_dim,
            dropout_rate: DEFAULT_DROPOUT,
            fused_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("encoder: {m}")));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths must be non-empty and positive, got {:?}", self.widths));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        match self.variant {
            EncoderVariant::Mlp => {}
            EncoderVariant::Msf | EncoderVariant::Cmlp => {
                if self.fused_layers == 0 || self.fused_layers > self.widths.len() {
                    return bad(format!(
                        "fused_layers must lie in 1..={}, got {}",
                        self.widths.len(),
                        self.fused_layers
                    ));
                }
            }
            EncoderVariant::Tmlp => {
                if self.widths.len() < 2 {
                    return bad("TMLP needs at least two layers".into());
                }
                if self.heads == 0 || self.attn_dim == 0 || self.attn_dim % self.heads != 0 {
                    return bad(format!(
                        "attn_dim {} must be a positive multiple of heads {}",
                        self.attn_dim, self.heads
                    ));
                }
                if self.widths[self.widths.len() - 2] != self.attn_dim {
                    return bad(format!(
                        "width before the attention block is {}, expected attn_dim {}",
                        self.widths[self.widths.len() - 2],
                        self.attn_dim
                    ));
                }
                if self.ff_dim == 0 {
                    return bad("ff_dim must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Mlp | EncoderVariant::Tmlp => *self.widths.last().unwrap_or(&0),
            EncoderVariant::Msf | EncoderVariant::Cmlp => {
                let k = self.fused_layers.min(self.widths.len());
                self.widths[self.widths.len() - k..].iter().sum()
            }
        }
    }

    fn attention_after(&self) -> Option<usize> {
        (self.variant == EncoderVariant::Tmlp).then(|| self.widths.len() - 2)
    }

    pub fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::default();
        let mut d_in = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            let prefix = format!("encoder.conv{i}");
            l.linear(&prefix, d_in, w);
            l.batch_norm(&format!("{prefix}.bn"), w);
            d_in = w;
            if self.attention_after() == Some(i) {
                l.extend(mhsa_layout("encoder.mhsa", self.attn_dim, self.ff_dim));
            }
        }
        l
    }
}

/// Parameters of one attention block with width `d` and feed-forward width
/// `ff`.
pub fn mhsa_layout(prefix: &str, d: usize, ff: usize) -> ParamLayout {
    let mut l = ParamLayout::default();
    for name in ["wq", "wk", "wv", "w0"] {
        l.projection(&format!("{prefix}.{name}"), d, d);
    }
    l.norm(&format!("{prefix}.norm1"), d);
    l.linear(&format!("{prefix}.ff1"), d, ff);
    l.linear(&format!("{prefix}.ff2"), ff, d);
    l.norm(&format!("{prefix}.norm2"), d);
    l
}

/// Output of [`mhsa_block`].
pub struct MhsaOutput {
    pub out: Var,
    /// Attention probabilities per item, then per head: `[n×n]` each.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention with add-and-norm and a feed-forward sublayer.
///
/// `a_in` stacks `rows / segment` items of `segment` points each; attention
/// is computed within each item only. No positional encoding is added.
///
/// Keys and values are visited in lexicographic order of their input rows,
/// so every sum over keys runs in the same order for any permutation of the
/// points and the block is exactly permutation-equivariant. Columns of the
/// returned attention matrices follow that sorted order.
pub fn mhsa_block(
    f: &mut Forward<'_, '_>,
    a_in: Var,
    segment: usize,
    prefix: &str,
    heads: usize,
    dropout_rate: f64,
) -> Result<MhsaOutput> {
    let (rows, d) = f.graph.dims(a_in);
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    if segment == 0 || rows % segment != 0 {
        return Err(Error::Shape {
            op: "mhsa_block",
            lhs: vec![rows, d],
            rhs: vec![segment],
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let wq = f.var(&format!("{prefix}.wq"))?;
    let wk = f.var(&format!("{prefix}.wk"))?;
    let wv = f.var(&format!("{prefix}.wv"))?;
    let w0 = f.var(&format!("{prefix}.w0"))?;
    let q = f.graph.matmul(a_in, wq)?;
    let k = f.graph.matmul(a_in, wk)?;
    let v = f.graph.matmul(a_in, wv)?;

    let mut attention = Vec::with_capacity(rows / segment * heads);
    let mut items = Vec::with_capacity(rows / segment);
    for item in 0..rows / segment {
        let start = item * segment;
        let order = sorted_rows(&f.graph.value(a_in)[start * d..(start + segment) * d], d, start);
        let qi = f.graph.slice_rows(q, start, segment)?;
        let ki = f.graph.gather_rows(k, &order)?;
        let vi = f.graph.gather_rows(v, &order)?;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = f.graph.slice_cols(qi, h * dh, dh)?;
            let kh = f.graph.slice_cols(ki, h * dh, dh)?;
            let vh = f.graph.slice_cols(vi, h * dh, dh)?;
            let kt = f.graph.transpose(kh);
            let scores = f.graph.matmul(qh, kt)?;
            let scores = f.graph.scale(scores, scale);
            let probs = f.graph.softmax_rows(scores)?;
            attention.push(probs);
            head_outputs.push(f.graph.matmul(probs, vh)?);
        }
        items.push(f.graph.concat_cols(&head_outputs)?);
    }
    let concat = f.graph.concat_rows(&items)?;
    let z = f.graph.matmul(concat, w0)?;
    let z = f.dropout(z, dropout_rate)?;
    let sum = f.graph.add(a_in, z)?;
    let a_out = f.layer_norm(sum, &format!("{prefix}.norm1"))?;

    let hidden = f.linear(a_out, &format!("{prefix}.ff1"))?;
    let hidden = f.graph.relu(hidden);
    let ff = f.linear(hidden, &format!("{prefix}.ff2"))?;
    let ff = f.dropout(ff, dropout_rate)?;
    let sum = f.graph.add(a_out, ff)?;
    let out = f.layer_norm(sum, &format!("{prefix}.norm2"))?;
    Ok(MhsaOutput { out, attention })
}

/// Row indices (offset by `base`) in lexicographic order of row values.
fn sorted_rows(values: &[f64], d: usize, base: usize) -> Vec<usize> {
    let rows: Vec<&[f64]> = values.chunks_exact(d).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.into_iter().map(|i| i + base).collect()
}

/// Encodes a batch of equal-size clouds stacked row-wise,
/// `[(b·n)×3] → [b×m]`.
pub fn encode_batch(f: &mut Forward<'_, '_>, spec: &EncoderSpec, points: Var, n: usize) -> Result<Var> {
    let (rows, cols) = f.graph.dims(points);
    if cols != 3 || n == 0 || rows % n != 0 {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![rows, cols],
            rhs: vec![n, 3],
        });
    }
    let mut h = points;
    let mut pooled = Vec::new();
    let first_fused = spec.widths.len() - spec.fused_layers.min(spec.widths.len());
    for i in 0..spec.widths.len() {
        h = f.conv_bn_relu(h, &format!("encoder.conv{i}"))?;
        if matches!(spec.variant, EncoderVariant::Msf | EncoderVariant::Cmlp) && i >= first_fused {
            pooled.push(f.graph.segment_max(h, n)?);
        }
        if spec.attention_after() == Some(i) {
            h = mhsa_block(f, h, n, "encoder.mhsa", spec.heads, spec.dropout_rate)?.out;
        }
    }
    match spec.variant {
        EncoderVariant::Mlp | EncoderVariant::Tmlp => f.graph.segment_max(h, n),
        EncoderVariant::Msf | EncoderVariant::Cmlp => f.graph.concat_cols(&pooled),
    }
}

/// Global shape descriptor produced by an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub values: Tensor,
}

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector"));
        }
        Ok(LatentVector {
            values: Tensor::vector(values)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.numel()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }
}

/// Evaluation-mode encoding of a single cloud.
pub fn encode(cloud: &PointCloud, spec: &EncoderSpec, params: &Params, buffers: &Buffers) -> Result<LatentVector> {
    spec.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("encoder input"));
    }
    params.check_layout(&spec.layout())?;
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, params, buffers, Mode::Eval, 0);
    let x = f.graph.constant(vec![cloud.len(), 3], cloud.flat())?;
    let latent = encode_batch(&mut f, spec, x, cloud.len())?;
    LatentVector::new(f.graph.value(latent).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::canonical(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    /// Gives the running statistics non-trivial values so that eval-mode
    /// batch norm is not the identity.
    fn setup(spec: &EncoderSpec, seed: u64) -> (Params, Buffers) {
        let layout = spec.layout();
        let params = Params::init(&layout, 0.3, seed).unwrap();
        let mut buffers = Buffers::new(&layout);
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, &params, &buffers, Mode::Train, seed);
        let cloud = random_cloud(16, seed + 100);
        let x = f.graph.constant(vec![16, 3], cloud.flat()).unwrap();
        encode_batch(&mut f, spec, x, 16).unwrap();
        let stats = f.take_batch_stats();
        buffers.apply(&stats).unwrap();
        (params, buffers)
    }

    #[test]
    fn default_latent_widths() {
        assert_eq!(EncoderSpec::full(EncoderVariant::Mlp).latent_dim(), 1024);
        assert_eq!(EncoderSpec::full(EncoderVariant::Msf).latent_dim(), 1408);
        assert_eq!(EncoderSpec::full(EncoderVariant::Cmlp).latent_dim(), 896);
        assert_eq!(EncoderSpec::full(EncoderVariant::Tmlp).latent_dim(), 1024);
        assert_eq!(EncoderSpec::full(EncoderVariant::Tmlp).attn_dim, 128);
        assert_eq!(EncoderSpec::toy(EncoderVariant::Tmlp).latent_dim(), 128);
        for v in EncoderVariant::ALL {
            EncoderSpec::full(v).validate().unwrap();
            EncoderSpec::toy(v).validate().unwrap();
            assert_eq!(v.to_string().parse::<EncoderVariant>().unwrap(), v);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut spec = EncoderSpec::toy(EncoderVariant::Tmlp);
        spec.heads = 3;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        for v in EncoderVariant::ALL {
            let spec = EncoderSpec::toy(v);
            let (params, buffers) = setup(&spec, 5);
            let cloud = random_cloud(12, 9);
            let base = encode(&cloud, &spec, &params, &buffers).unwrap();
            assert_eq!(base.dim(), spec.latent_dim());
            let mut perm: Vec<usize> = (0..12).collect();
            perm.reverse();
            perm.swap(0, 5);
            let permuted = encode(&cloud.select(&perm), &spec, &params, &buffers).unwrap();
            assert_eq!(base, permuted, "{v}");
            if v != EncoderVariant::Tmlp {
                // attention weights change under duplication, pooled features do not
                let doubled: Vec<usize> = (0..12).chain(0..12).collect();
                let dup = encode(&cloud.select(&doubled), &spec, &params, &buffers).unwrap();
                assert_eq!(base, dup, "{v}");
            }
        }
    }

    #[test]
    fn mhsa_shapes_and_row_sums() {
        let d = 16;
        let layout = mhsa_layout("m", d, 4 * d);
        let params = Params::init(&layout, 0.3, 1).unwrap();
        let buffers = Buffers::default();
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, &params, &buffers, Mode::Eval, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..2 * 10 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = f.graph.constant(vec![20, d], x).unwrap();
        let out = mhsa_block(&mut f, x, 10, "m", 8, 0.1).unwrap();
        assert_eq!(f.graph.shape(out.out), &[20, d]);
        assert_eq!(out.attention.len(), 16);
        for a in out.attention {
            for row in f.graph.value(a).chunks(10) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
