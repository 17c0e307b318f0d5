//! Finite-difference gradient checks of every differentiable layer.

use std::collections::BTreeMap;

use pcc_core::decoder::{decode_batch, generate_seeds, DecoderSpec};
use pcc_core::encoder::{encode_batch, mhsa_layout, EncoderSpec, EncoderVariant};
use pcc_core::nn::{Buffers, Forward, Mode, ParamLayout};
use pcc_core::tensor::gradcheck::{check_sampled, GradCheckReport, DEFAULT_STEP};
use pcc_core::{Graph, Result, Tensor, Var};
use rand::Rng;

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 100;

fn uniform(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn plain(seed: u64, shapes: &[Vec<usize>], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> GradCheckReport {
    let mut rng = super::rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s.clone(), &mut rng)).collect();
    check_sampled(&inputs, DEFAULT_STEP, seed, None, build).unwrap()
}

/// Checks a block that reads named parameters through a [`Forward`] session.
/// Input 0 is the block input; the rest are the layout's parameters, all
/// drawn uniformly so that gains and biases are not at their initial values.
fn layered(
    seed: u64,
    input_shape: Vec<usize>,
    layout: &ParamLayout,
    per_input: Option<usize>,
    build: impl Fn(&mut Forward<'_, '_>, Var) -> Result<Var>,
) -> GradCheckReport {
    let mut rng = super::rng(seed);
    let mut inputs = vec![uniform(input_shape, &mut rng)];
    inputs.extend(layout.params.iter().map(|p| uniform(p.shape.clone(), &mut rng)));
    let names: Vec<String> = layout.params.iter().map(|p| p.name.clone()).collect();
    let buffers = Buffers::default();
    check_sampled(&inputs, DEFAULT_STEP, seed, per_input, |g, vars| {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(vars[1..].iter().copied()).collect();
        let mut f = Forward::with_vars(g, bound, &buffers, Mode::Train, 0);
        build(&mut f, vars[0])
    })
    .unwrap()
}

pub fn matmul(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![4, 5], vec![5, 3]], |g, v| g.matmul(v[0], v[1]))
}

pub fn pointwise_mlp(seed: u64) -> GradCheckReport {
    plain(
        seed,
        &[vec![6, 3], vec![3, 8], vec![8], vec![8, 4], vec![4]],
        |g, v| g.pointwise_mlp(v[0], &[(v[1], v[2]), (v[3], v[4])], true),
    )
}

pub fn softmax(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![4, 6]], |g, v| {
        let x = g.scale(v[0], 3.0);
        g.softmax_rows(x)
    })
}

pub fn layer_norm(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![5, 8], vec![8], vec![8]], |g, v| g.layer_norm(v[0], v[1], v[2]))
}

pub fn batch_norm(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![6, 4], vec![4], vec![4]], |g, v| Ok(g.batch_norm(v[0], v[1], v[2])?.0))
}

pub fn relu(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![5, 5]], |g, v| Ok(g.relu(v[0])))
}

pub fn tanh(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![5, 5]], |g, v| {
        let x = g.scale(v[0], 2.0);
        Ok(g.tanh(x))
    })
}

/// Global max pool and the per-item (segmented) max pool.
pub fn maxpool(seed: u64) -> GradCheckReport {
    plain(seed, &[vec![8, 4]], |g, v| {
        let whole = g.max_over_points(v[0])?;
        let items = g.segment_max(v[0], 4)?;
        g.concat_rows(&[whole, items])
    })
}

/// One attention block with n = 8 points, width 8, 2 heads, train mode
/// without dropout; every input and parameter element is checked.
pub fn mhsa(seed: u64) -> GradCheckReport {
    let d = 8;
    let layout = mhsa_layout("m", d, 4 * d);
    layered(seed, vec![8, d], &layout, None, |f, x| {
        Ok(pcc_core::encoder::mhsa_block(f, x, 8, "m", 2, 0.0)?.out)
    })
}

/// The whole decoder (toy hidden widths, four surfaces) on a batch of two
/// latents in train mode; eight sampled elements per tensor.
pub fn decoder(seed: u64) -> GradCheckReport {
    let spec = DecoderSpec {
        surfaces: 4,
        points_per_surface: 4,
        ..DecoderSpec::toy()
    };
    let m = 16;
    let layout = spec.layout(m);
    let seeds = vec![generate_seeds(&spec, seed).unwrap(), generate_seeds(&spec, seed + 1).unwrap()];
    layered(seed, vec![2, m], &layout, Some(8), |f, z| decode_batch(f, &spec, z, &seeds))
}

/// The TMLP encoder end to end: 8 points per cloud, attention width 8 with
/// 2 heads, batch of two clouds; eight sampled elements per tensor.
pub fn tmlp_encoder(seed: u64) -> GradCheckReport {
    let spec = EncoderSpec {
        variant: EncoderVariant::Tmlp,
        widths: vec![4, 8, 16],
        heads: 2,
        attn_dim: 8,
        ff_dim: 32,
        dropout_rate: 0.0,
        fused_layers: 0,
    };
    spec.validate().unwrap();
    layered(seed, vec![16, 3], &spec.layout(), Some(8), |f, x| encode_batch(f, &spec, x, 8))
}

pub type Layer = (&'static str, fn(u64) -> GradCheckReport);

pub const LAYERS: [Layer; 11] = [
    ("matmul", matmul),
    ("pointwise mlp", pointwise_mlp),
    ("softmax", softmax),
    ("layer norm", layer_norm),
    ("batch norm", batch_norm),
    ("relu", relu),
    ("tanh", tanh),
    ("maxpool", maxpool),
    ("mhsa block", mhsa),
    ("tmlp encoder", tmlp_encoder),
    ("decoder", decoder),
];

/// Worst report over seeds `0..SEEDS`, with the seed that produced it.
pub fn worst_over_seeds(layer: fn(u64) -> GradCheckReport) -> (u64, GradCheckReport) {
    (0..SEEDS)
        .map(|s| (s, layer(s)))
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap()
}
