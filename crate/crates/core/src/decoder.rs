//! Multi-patch decoder: K independent generators map seed points, joined
//! with the latent vector, onto 3-D surface patches.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::LatentVector;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{Buffers, Forward, Mode, ParamLayout, Params};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedKind {
    /// 2-D seeds.
    Flat,
    /// 3-D seeds.
    Spatial,
}

impl SeedKind {
    pub fn dim(self) -> usize {
        match self {
            SeedKind::Flat => 2,
            SeedKind::Spatial => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SeedDistribution {
    Uniform { low: f64, high: f64 },
    /// Draws are clamped to [-1, 1].
    Gaussian { mean: f64, std: f64 },
    Zero,
}

impl SeedDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SeedDistribution::Uniform { low, high } => {
                if !(-1.0..=1.0).contains(&low) || !(-1.0..=1.0).contains(&high) || low >= high {
                    return Err(Error::InvalidArgument(format!(
                        "uniform seed range must satisfy -1 <= low < high <= 1, got ({low}, {high})"
                    )));
                }
            }
            SeedDistribution::Gaussian { mean, std } => {
                if !mean.is_finite() || !(std >= 0.0 && std.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "gaussian seed parameters invalid: mean {mean}, std {std}"
                    )));
                }
            }
            SeedDistribution::Zero => {}
        }
        Ok(())
    }

    /// Column label in the style of the seed-distribution ablation table.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SeedDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedDistribution::Uniform { low, high } => write!(f, "uniform({low}:{high})"),
            SeedDistribution::Gaussian { mean, std } => write!(f, "gaussian({mean},{std})"),
            SeedDistribution::Zero => f.write_str("zero"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub surfaces: usize,
    pub seed_kind: SeedKind,
    pub seed_distribution: SeedDistribution,
    pub points_per_surface: usize,
    /// Widths of the three hidden layers of every generator.
    pub conv_widths: [usize; 3],
    /// One generator shared by all surfaces instead of K independent ones.
    #[serde(default)]
    pub share_parameters: bool,
}

impl DecoderSpec {
    /// 16 surfaces × 128 points, hidden widths 513/256/128.
    pub fn full() -> Self {
        DecoderSpec {
            surfaces: 16,
            seed_kind: SeedKind::Flat,
            seed_distribution: SeedDistribution::Uniform { low: 0.0, high: 1.0 },
            points_per_surface: 128,
            conv_widths: [513, 256, 128],
            share_parameters: false,
        }
    }

    /// 16 surfaces × 16 points, hidden widths divided by 8.
    pub fn toy() -> Self {
        DecoderSpec {
            points_per_surface: 16,
            conv_widths: [64, 32, 16],
            ..Self::full()
        }
    }

    pub fn out_points(&self) -> usize {
        self.surfaces * self.points_per_surface
    }

    pub fn validate(&self) -> Result<()> {
        if self.surfaces == 0 || self.points_per_surface == 0 || self.conv_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "decoder sizes must be positive: surfaces {}, points_per_surface {}, widths {:?}",
                self.surfaces, self.points_per_surface, self.conv_widths
            )));
        }
        self.seed_distribution.validate()
    }

    /// The same generators at another output size; `points` must be a
    /// multiple of the surface count.
    pub fn with_resolution(&self, points: usize) -> Result<Self> {
        if points == 0 || points % self.surfaces != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {points} is not a positive multiple of {} surfaces",
                self.surfaces
            )));
        }
        Ok(DecoderSpec {
            points_per_surface: points / self.surfaces,
            ..self.clone()
        })
    }

    fn generator_prefix(&self, surface: usize) -> String {
        if self.share_parameters {
            "decoder.shared".to_string()
        } else {
            format!("decoder.surface{surface}")
        }
    }

    pub fn layout(&self, latent_dim: usize) -> ParamLayout {
        let mut l = ParamLayout::default();
        let generators = if self.share_parameters { 1 } else { self.surfaces };
        for k in 0..generators {
            let prefix = self.generator_prefix(k);
            let mut d_in = latent_dim + self.seed_kind.dim();
            for (i, &w) in self.conv_widths.iter().enumerate() {
                l.linear(&format!("{prefix}.conv{i}"), d_in, w);
                l.batch_norm(&format!("{prefix}.conv{i}.bn"), w);
                d_in = w;
            }
            l.linear(&format!("{prefix}.out"), d_in, 3);
        }
        l
    }
}

/// Seed points for one decoded cloud, `[out_points × s]`, surface-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedBatch {
    pub seeds: Tensor,
}

impl SeedBatch {
    pub fn rows(&self) -> usize {
        self.seeds.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.seeds.shape()[1]
    }
}

/// Draws `out_points` seeds from the configured distribution; the same
/// `rng_seed` gives the same batch bit for bit.
pub fn generate_seeds(spec: &DecoderSpec, rng_seed: u64) -> Result<SeedBatch> {
    spec.validate()?;
    let s = spec.seed_kind.dim();
    let count = spec.out_points() * s;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let data: Vec<f64> = match spec.seed_distribution {
        SeedDistribution::Zero => vec![0.0; count],
        SeedDistribution::Uniform { low, high } => {
            (0..count).map(|_| low + (high - low) * rng.random::<f64>()).collect()
        }
        SeedDistribution::Gaussian { mean, std } => {
            let normal = Normal::new(mean, std).expect("validated");
            (0..count).map(|_| normal.sample(&mut rng).clamp(-1.0, 1.0)).collect()
        }
    };
    Ok(SeedBatch {
        seeds: Tensor::matrix(spec.out_points(), s, data)?,
    })
}

/// Decodes a batch of latents `[b×m]` with one seed batch per item into
/// `[(b·out_points)×3]`: item-major, surface-major within an item.
///
/// The first layer of each generator acts on `[seed, latent]`. Its latent
/// part is the same for every seed of an item, so it is computed once per
/// item and then replicated.
pub fn decode_batch(f: &mut Forward<'_, '_>, spec: &DecoderSpec, latent: Var, seeds: &[SeedBatch]) -> Result<Var> {
    let (b, m) = f.graph.dims(latent);
    let s = spec.seed_kind.dim();
    let pps = spec.points_per_surface;
    if seeds.len() != b {
        return Err(Error::SizeMismatch {
            left: b,
            right: seeds.len(),
        });
    }
    for sb in seeds {
        if sb.rows() != spec.out_points() || sb.dim() != s {
            return Err(Error::Shape {
                op: "decode seeds",
                lhs: sb.seeds.shape().to_vec(),
                rhs: vec![spec.out_points(), s],
            });
        }
    }
    let replicate: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, pps)).collect();
    let mut patches = Vec::with_capacity(spec.surfaces);
    for k in 0..spec.surfaces {
        let prefix = spec.generator_prefix(k);
        let w = f.var(&format!("{prefix}.conv0.weight"))?;
        let (w_rows, _) = f.graph.dims(w);
        if w_rows != s + m {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![w_rows],
                rhs: vec![s + m],
            });
        }
        let bias = f.var(&format!("{prefix}.conv0.bias"))?;
        let w_seed = f.graph.slice_rows(w, 0, s)?;
        let w_latent = f.graph.slice_rows(w, s, m)?;
        let seed_rows: Vec<f64> = seeds
            .iter()
            .flat_map(|sb| sb.seeds.data()[k * pps * s..(k + 1) * pps * s].iter().copied())
            .collect();
        let seed_var = f.graph.constant(vec![b * pps, s], seed_rows)?;
        let from_seed = f.graph.matmul(seed_var, w_seed)?;
        let per_item = f.graph.matmul(latent, w_latent)?;
        let from_latent = f.graph.gather_rows(per_item, &replicate)?;
        let h = f.graph.add(from_seed, from_latent)?;
        let h = f.graph.add_row(h, bias)?;
        let h = f.batch_norm(h, &format!("{prefix}.conv0.bn"))?;
        let mut h = f.graph.relu(h);
        for i in 1..spec.conv_widths.len() {
            h = f.conv_bn_relu(h, &format!("{prefix}.conv{i}"))?;
        }
        let out = f.linear(h, &format!("{prefix}.out"))?;
        patches.push(f.graph.tanh(out));
    }
    let stacked = f.graph.concat_rows(&patches)?;
    // rows are (surface, item, point); reorder to (item, surface, point)
    let order: Vec<usize> = (0..b)
        .flat_map(|i| (0..spec.surfaces).flat_map(move |k| (0..pps).map(move |p| (k * b + i) * pps + p)))
        .collect();
    f.graph.gather_rows(stacked, &order)
}

/// Evaluation-mode decoding of one latent vector.
pub fn decode(
    latent: &LatentVector,
    seeds: &SeedBatch,
    spec: &DecoderSpec,
    params: &Params,
    buffers: &Buffers,
) -> Result<PointCloud> {
    spec.validate()?;
    params.check_layout(&spec.layout(latent.dim()))?;
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, params, buffers, Mode::Eval, 0);
    let z = f.graph.constant(vec![1, latent.dim()], latent.as_slice().to_vec())?;
    let out = decode_batch(&mut f, spec, z, std::slice::from_ref(seeds))?;
    PointCloud::from_flat(f.graph.value(out), crate::geometry::Frame::Canonical)
}

/// Surface that produced output point `index`.
pub fn surface_of(index: usize, spec: &DecoderSpec) -> Result<usize> {
    if index >= spec.out_points() {
        return Err(Error::InvalidArgument(format!(
            "point index {index} out of range for {} points",
            spec.out_points()
        )));
    }
    Ok(index / spec.points_per_surface)
}
