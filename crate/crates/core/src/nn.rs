//! Named parameter storage, batch-norm running statistics and the forward
//! session that binds both to a [`Graph`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_INIT_SIGMA: f64 = 0.02;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Gaussian `N(0, σ²)`.
    Weight,
    /// Zero.
    Bias,
    /// One (normalization gains).
    Gain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// The parameters a model needs: tensors plus batch-norm layers whose
/// running statistics live in [`Buffers`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub params: Vec<ParamDecl>,
    /// `(prefix, width)` of every batch-norm layer.
    pub batch_norms: Vec<(String, usize)>,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) {
        self.params.push(ParamDecl {
            name: name.into(),
            shape,
            kind,
        });
    }

    /// Declares `{prefix}.weight [d_in×d_out]` and `{prefix}.bias [d_out]`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(format!("{prefix}.weight"), vec![d_in, d_out], ParamKind::Weight);
        self.push(format!("{prefix}.bias"), vec![d_out], ParamKind::Bias);
    }

    /// Declares a weight without bias.
    pub fn projection(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.push(name.to_string(), vec![d_in, d_out], ParamKind::Weight);
    }

    /// Declares `{prefix}.gain` and `{prefix}.shift` of a normalization layer.
    pub fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gain"), vec![d], ParamKind::Gain);
        self.push(format!("{prefix}.shift"), vec![d], ParamKind::Bias);
    }

    pub fn batch_norm(&mut self, prefix: &str, d: usize) {
        self.norm(prefix, d);
        self.batch_norms.push((prefix.to_string(), d));
    }

    pub fn extend(&mut self, other: ParamLayout) {
        self.params.extend(other.params);
        self.batch_norms.extend(other.batch_norms);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    /// Weights `N(0, σ²)`, biases zero, gains one; deterministic per seed.
    /// Weights are drawn in declaration order.
    pub fn init(layout: &ParamLayout, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("init sigma must be >= 0, got {sigma}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let mut tensors = BTreeMap::new();
        for decl in &layout.params {
            let numel: usize = decl.shape.iter().product();
            let data = match decl.kind {
                ParamKind::Weight => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
                ParamKind::Bias => vec![0.0; numel],
                ParamKind::Gain => vec![1.0; numel],
            };
            if tensors
                .insert(decl.name.clone(), Tensor::new(decl.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::InvalidArgument(format!("duplicate parameter {}", decl.name)));
            }
        }
        Ok(Params { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Params { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that every declared parameter is present with its shape.
    pub fn check_layout(&self, layout: &ParamLayout) -> Result<()> {
        for decl in &layout.params {
            let t = self.get(&decl.name)?;
            if t.shape() != decl.shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: t.shape().to_vec(),
                    rhs: decl.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Running mean and unbiased variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(d: usize) -> Self {
        RunningStats {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    /// `r ← (1−momentum)·r + momentum·batch`, with the batch variance
    /// converted to its unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats) {
        let correction = if stats.rows > 1 {
            stats.rows as f64 / (stats.rows - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers {
    stats: BTreeMap<String, RunningStats>,
}

impl Buffers {
    pub fn new(layout: &ParamLayout) -> Self {
        Buffers {
            stats: layout
                .batch_norms
                .iter()
                .map(|(name, d)| (name.clone(), RunningStats::new(*d)))
                .collect(),
        }
    }

    pub fn from_map(stats: BTreeMap<String, RunningStats>) -> Self {
        Buffers { stats }
    }

    pub fn get(&self, name: &str) -> Result<&RunningStats> {
        self.stats
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing batch-norm statistics {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RunningStats)> {
        self.stats.iter()
    }

    pub fn apply(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in updates {
            self.stats
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing batch-norm statistics {name}")))?
                .update(s);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
}

/// One forward pass: a graph with parameters bound as leaves.
pub struct Forward<'g, 'b> {
    pub graph: &'g mut Graph,
    vars: BTreeMap<String, Var>,
    buffers: &'b Buffers,
    mode: Mode,
    rng: ChaCha8Rng,
    batch_stats: Vec<(String, BatchStats)>,
}

impl<'g, 'b> Forward<'g, 'b> {
    /// Registers every parameter as a differentiable leaf.
    pub fn new(graph: &'g mut Graph, params: &Params, buffers: &'b Buffers, mode: Mode, seed: u64) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(t)))
            .collect();
        Self::with_vars(graph, vars, buffers, mode, seed)
    }

    /// Uses already-recorded variables as parameters.
    pub fn with_vars(
        graph: &'g mut Graph,
        vars: BTreeMap<String, Var>,
        buffers: &'b Buffers,
        mode: Mode,
        seed: u64,
    ) -> Self {
        Forward {
            graph,
            vars,
            buffers,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let h = self.graph.matmul(x, w)?;
        self.graph.add_row(h, b)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(&format!("{prefix}.gain"))?;
        let shift = self.var(&format!("{prefix}.shift"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, gain, shift)?;
                self.batch_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let r = self.buffers.get(prefix)?;
                self.graph.batch_norm_eval(x, gain, shift, &r.mean, &r.var)
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(&format!("{prefix}.gain"))?;
        let shift = self.var(&format!("{prefix}.shift"))?;
        self.graph.layer_norm(x, gain, shift)
    }

    /// Linear → batch norm → ReLU.
    pub fn conv_bn_relu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, prefix)?;
        let h = self.batch_norm(h, &format!("{prefix}.bn"))?;
        Ok(self.graph.relu(h))
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let train = self.mode == Mode::Train;
        self.graph.dropout(x, rate, train, &mut self.rng)
    }

    /// Batch statistics recorded by train-mode normalization layers.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.batch_stats)
    }

    /// Gradients of every bound parameter after `backward`, zero-filled for
    /// parameters that did not reach the loss.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.graph.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ParamLayout {
        let mut l = ParamLayout::default();
        l.linear("a", 100, 100);
        l.batch_norm("a.bn", 100);
        l
    }

    #[test]
    fn init_kinds_and_determinism() {
        let p = Params::init(&layout(), 0.02, 3).unwrap();
        assert_eq!(p, Params::init(&layout(), 0.02, 3).unwrap());
        assert_ne!(p, Params::init(&layout(), 0.02, 4).unwrap());
        assert!(p.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("a.bn.gain").unwrap().data().iter().all(|&v| v == 1.0));
        let w = p.get("a.weight").unwrap().data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var / 0.02f64.powi(2) - 1.0).abs() < 0.05, "{var}");
        let zero = Params::init(&layout(), 0.0, 3).unwrap();
        assert!(zero.get("a.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(zero.check_layout(&layout()).is_ok());
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let mut r = RunningStats::new(1);
        r.update(&BatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            rows: 2,
        });
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_batch_norm_uses_buffers() {
        let l = layout();
        let p = Params::init(&l, 0.02, 1).unwrap();
        let b = Buffers::new(&l);
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, &p, &b, Mode::Eval, 0);
        let x = f.graph.constant(vec![1, 100], vec![3.0; 100]).unwrap();
        let y = f.batch_norm(x, "a.bn").unwrap();
        let expected = 3.0 / (1.0f64 + 1e-5).sqrt();
        assert!(f.graph.value(y).iter().all(|v| (v - expected).abs() < 1e-12));
        assert!(f.take_batch_stats().is_empty());
    }
}
