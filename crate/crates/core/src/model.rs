//! Encoder plus decoder with their parameters and running statistics.

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_batch, generate_seeds, DecoderSpec, SeedBatch};
use crate::encoder::{encode_batch, EncoderSpec, EncoderVariant};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Frame, PointCloud};
use crate::nn::{Buffers, Forward, Mode, ParamLayout, Params};
use crate::tensor::{Graph, Var};

/// Seed used for decoder seeds whenever a fixed, reproducible output is
/// wanted (evaluation, completion).
pub const EVAL_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Toy,
    Full,
}

impl Profile {
    pub fn points(self) -> usize {
        match self {
            Profile::Toy => 256,
            Profile::Full => 2048,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Profile::Toy => 8,
            Profile::Full => 16,
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Profile::Toy => 30,
            Profile::Full => 200,
        }
    }

    pub fn encoder(self, variant: EncoderVariant) -> EncoderSpec {
        match self {
            Profile::Toy => EncoderSpec::toy(variant),
            Profile::Full => EncoderSpec::full(variant),
        }
    }

    pub fn decoder(self) -> DecoderSpec {
        match self {
            Profile::Toy => DecoderSpec::toy(),
            Profile::Full => DecoderSpec::full(),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::Full => "full",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            _ => Err(Error::InvalidArgument(format!("unknown profile {s:?} (expected toy or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Points per input cloud; other sizes are unified by FPS or
    /// replication before encoding.
    pub input_points: usize,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
}

impl ModelSpec {
    pub fn new(profile: Profile, variant: EncoderVariant) -> Self {
        ModelSpec {
            input_points: profile.points(),
            encoder: profile.encoder(variant),
            decoder: profile.decoder(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_points == 0 {
            return Err(Error::InvalidArgument("input_points must be positive".into()));
        }
        self.encoder.validate()?;
        self.decoder.validate()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layout = self.encoder.layout();
        layout.extend(self.decoder.layout(self.encoder.latent_dim()));
        layout
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    pub buffers: Buffers,
}

impl Model {
    /// Gaussian weights, zero biases, unit norm gains.
    pub fn init(spec: ModelSpec, sigma: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let params = Params::init(&layout, sigma, seed)?;
        let buffers = Buffers::new(&layout);
        Ok(Model { spec, params, buffers })
    }

    pub fn from_parts(spec: ModelSpec, params: Params, buffers: Buffers) -> Result<Self> {
        spec.validate()?;
        params.check_layout(&spec.layout())?;
        Ok(Model { spec, params, buffers })
    }

    /// Encodes and decodes row-stacked inputs `[(b·n)×3]`, one seed batch
    /// per item, giving `[(b·out)×3]`.
    pub fn forward(spec: &ModelSpec, f: &mut Forward<'_, '_>, inputs: Var, n: usize, seeds: &[SeedBatch]) -> Result<Var> {
        let latent = encode_batch(f, &spec.encoder, inputs, n)?;
        decode_batch(f, &spec.decoder, latent, seeds)
    }

    /// Evaluation-mode predictions for a batch of inputs with one shared
    /// decoder seed batch.
    pub fn predict(&self, inputs: &[&PointCloud], decoder: &DecoderSpec, seeds: &SeedBatch) -> Result<Vec<PointCloud>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.spec.input_points;
        let mut flat = Vec::with_capacity(inputs.len() * n * 3);
        for cloud in inputs {
            flat.extend(unify(cloud, n)?.flat());
        }
        let mut g = Graph::new();
        g.set_retain_grads(false);
        let mut f = Forward::new(&mut g, &self.params, &self.buffers, Mode::Eval, 0);
        let x = f.graph.constant(vec![inputs.len() * n, 3], flat)?;
        let all_seeds = vec![seeds.clone(); inputs.len()];
        let latent = encode_batch(&mut f, &self.spec.encoder, x, n)?;
        let out = decode_batch(&mut f, decoder, latent, &all_seeds)?;
        let values = f.graph.value(out);
        let m = decoder.out_points() * 3;
        values
            .chunks(m)
            .map(|c| PointCloud::from_flat(c, Frame::Canonical))
            .collect()
    }

    /// Completes one partial cloud, optionally at a different output
    /// resolution. Returns the cloud and the decoder spec used.
    pub fn complete(&self, partial: &PointCloud, resolution: Option<usize>, seed: u64) -> Result<(PointCloud, DecoderSpec)> {
        if partial.is_empty() {
            return Err(Error::EmptyCloud("completion input"));
        }
        let decoder = match resolution {
            Some(r) => self.spec.decoder.with_resolution(r)?,
            None => self.spec.decoder.clone(),
        };
        let seeds = generate_seeds(&decoder, seed)?;
        let mut out = self.predict(&[partial], &decoder, &seeds)?;
        let cloud = out.pop().expect("one input gives one output");
        Ok((cloud.with_frame(partial.frame()), decoder))
    }
}

/// Brings a cloud to exactly `n` points: farthest point sampling when
/// larger, cyclic replication when smaller.
pub fn unify(cloud: &PointCloud, n: usize) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("model input"));
    }
    match cloud.len().cmp(&n) {
        std::cmp::Ordering::Equal => Ok(cloud.clone()),
        std::cmp::Ordering::Greater => farthest_point_sample(cloud, n),
        std::cmp::Ordering::Less => {
            let pts = cloud.points();
            PointCloud::new((0..n).map(|i| pts[i % pts.len()]).collect(), cloud.frame())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::canonical((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    fn small_model() -> Model {
        let mut spec = ModelSpec::new(Profile::Toy, EncoderVariant::Tmlp);
        spec.input_points = 32;
        spec.decoder.points_per_surface = 4;
        Model::init(spec, 0.1, 3).unwrap()
    }

    #[test]
    fn profile_defaults() {
        assert_eq!(Profile::Full.points(), 2048);
        assert_eq!(Profile::Full.batch_size(), 16);
        assert_eq!(Profile::Toy.batch_size(), 8);
        assert_eq!(Profile::Toy.epochs(), 30);
        assert_eq!(Profile::Full.decoder().out_points(), 2048);
        assert_eq!("full".parse::<Profile>().unwrap(), Profile::Full);
        assert!("huge".parse::<Profile>().is_err());
    }

    #[test]
    fn completion_resolution_and_determinism() {
        let model = small_model();
        let partial = cloud(50, 1);
        let (a, _) = model.complete(&partial, None, EVAL_SEED).unwrap();
        let (b, _) = model.complete(&partial, None, EVAL_SEED).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        for r in [32, 128, 256] {
            let (c, spec) = model.complete(&partial, Some(r), EVAL_SEED).unwrap();
            assert_eq!(c.len(), r);
            assert_eq!(spec.out_points(), r);
            assert!(c.in_unit_box());
        }
        assert!(model.complete(&partial, Some(30), EVAL_SEED).is_err());
    }

    #[test]
    fn batched_prediction_matches_single() {
        let model = small_model();
        let inputs = [cloud(32, 4), cloud(32, 5), cloud(32, 6)];
        let seeds = generate_seeds(&model.spec.decoder, 9).unwrap();
        let refs: Vec<&PointCloud> = inputs.iter().collect();
        let batch = model.predict(&refs, &model.spec.decoder, &seeds).unwrap();
        for (c, out) in inputs.iter().zip(&batch) {
            let single = model.predict(&[c], &model.spec.decoder, &seeds).unwrap();
            assert_eq!(&single[0], out);
        }
    }

    #[test]
    fn unify_sizes() {
        let c = cloud(5, 2);
        let up = unify(&c, 12).unwrap();
        assert_eq!(up.len(), 12);
        assert_eq!(up.points()[5], c.points()[0]);
        assert_eq!(unify(&cloud(40, 2), 12).unwrap().len(), 12);
    }
}
