//! Residual fully-connected stacks that expose one prediction per depth.
//!
//! The input block maps features to the hidden width; each hidden block is
//! a residual unit `a + relu(bn(W a + b))` (batch norm and the residual
//! path are configurable); the shared output block maps every depth's
//! activations to a scalar mean. A forward pass computes all D+1 per-depth
//! predictions at once.

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LOG_NOISE_VAR_BOUND: f64 = 10.0;

/// Architecture description. `n_hidden` is the number of hidden blocks, so
/// per-depth predictions range over depths `0..=n_hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub width: usize,
    pub n_hidden: usize,
    pub use_batch_norm: bool,
    pub dropout_p: f64,
    pub residual: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.n_hidden == 0 {
            return Err(Error::Param("network dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Param(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// The DUN layout: 10 residual blocks of width 100 with batch norm.
    pub fn dun(input_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            width: 100,
            n_hidden: 10,
            use_batch_norm: true,
            dropout_p: 0.0,
            residual: true,
        }
    }

    /// The MCDO layout: three plain hidden layers with dropout 0.1.
    pub fn mcdo(input_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            width: 100,
            n_hidden: 3,
            use_batch_norm: false,
            dropout_p: 0.1,
            residual: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
}

/// Learned homoscedastic observation noise, shared across depths.
/// `log_var` is clamped to [-10, 10] during optimization.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub log_var: Tensor,
}

impl NoiseModel {
    pub fn log_var_value(&self) -> f64 {
        self.log_var.data()[0]
    }

    pub fn variance(&self) -> f64 {
        self.log_var_value().exp()
    }

    pub fn clamp(&mut self) {
        let v = self.log_var.data()[0].clamp(-LOG_NOISE_VAR_BOUND, LOG_NOISE_VAR_BOUND);
        self.log_var.data_mut()[0] = v;
    }
}

/// Full parameter set: input block, hidden blocks, output block, noise.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub input: Block,
    pub hidden: Vec<Block>,
    pub output: Linear,
    pub noise: NoiseModel,
}

/// Which statistics and stochasticity a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassMode {
    pub bn_batch_stats: bool,
    pub dropout_active: bool,
}

impl PassMode {
    /// Batch statistics and live dropout masks: the training pass.
    pub fn train() -> Self {
        PassMode { bn_batch_stats: true, dropout_active: true }
    }

    /// Running statistics, no dropout: deterministic evaluation.
    pub fn eval() -> Self {
        PassMode { bn_batch_stats: false, dropout_active: false }
    }

    /// Running statistics with live dropout masks: one MC-dropout sample.
    pub fn mc_sample() -> Self {
        PassMode { bn_batch_stats: false, dropout_active: true }
    }
}

/// All intermediate activations and per-depth predictions of one pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
    pub per_depth_outputs: Vec<Tensor>,
}

/// Tape handles for one graph-building forward pass.
pub struct GraphForward {
    /// Parameter leaves in canonical order (matches [`Network::params`]).
    pub param_vars: Vec<Var>,
    /// Leaf for the log noise variance (also last entry of `param_vars`).
    pub log_var: Var,
    /// Activations a_0..a_D.
    pub activations: Vec<Var>,
    /// Output block applied to each depth's activations, shape [n,1] each.
    pub depth_outputs: Vec<Var>,
    /// Batch statistics per batch-norm layer ordinal, when batch stats ran.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

impl Network {
    /// He fan-in initialization for weights, zero biases, unit batch-norm.
    pub fn build<R: Rng>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let linear = |fan_in: usize, fan_out: usize, rng: &mut R| -> Result<Linear> {
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std)
                .collect();
            Ok(Linear {
                w: Tensor::matrix(fan_in, fan_out, data)?,
                b: Tensor::vector(vec![0.0; fan_out]),
            })
        };
        let bn = |width: usize| BatchNorm {
            gamma: Tensor::vector(vec![1.0; width]),
            beta: Tensor::vector(vec![0.0; width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        };
        let block = |fan_in: usize, config: &NetworkConfig, rng: &mut R| -> Result<Block> {
            Ok(Block {
                linear: linear(fan_in, config.width, rng)?,
                bn: config.use_batch_norm.then(|| bn(config.width)),
            })
        };
        let input = block(config.input_dim, config, rng)?;
        let hidden = (0..config.n_hidden)
            .map(|_| block(config.width, config, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = linear(config.width, 1, rng)?;
        Ok(Network {
            config: config.clone(),
            input,
            hidden,
            output,
            noise: NoiseModel { log_var: Tensor::scalar(0.0) },
        })
    }

    /// Number of depths with a prediction (n_hidden + 1).
    pub fn n_depths(&self) -> usize {
        self.config.n_hidden + 1
    }

    /// Named views of every trainable tensor, in canonical order.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let mut block_entries = |prefix: String, b: &Block, out: &mut Vec<(String, &Tensor)>| {
            out.push((format!("{prefix}.w"), &b.linear.w));
            out.push((format!("{prefix}.b"), &b.linear.b));
            if let Some(bn) = &b.bn {
                out.push((format!("{prefix}.bn.gamma"), &bn.gamma));
                out.push((format!("{prefix}.bn.beta"), &bn.beta));
            }
        };
        block_entries("input".into(), &self.input, &mut out);
        for (i, h) in self.hidden.iter().enumerate() {
            block_entries(format!("hidden{i}"), h, &mut out);
        }
        out.push(("output.w".into(), &self.output.w));
        out.push(("output.b".into(), &self.output.b));
        out.push(("log_noise_var".into(), &self.noise.log_var));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.param_entries().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let Network { input, hidden, output, noise, .. } = self;
        for b in std::iter::once(input).chain(hidden.iter_mut()) {
            out.push(&mut b.linear.w);
            out.push(&mut b.linear.b);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut output.w);
        out.push(&mut output.b);
        out.push(&mut noise.log_var);
        out
    }

    /// Total trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "set_params: expected {} values, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Fold fresh batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, stats: &[(usize, BatchStats)]) {
        let mut layers: Vec<&mut BatchNorm> = Vec::new();
        let Network { input, hidden, .. } = self;
        for b in std::iter::once(input).chain(hidden.iter_mut()) {
            if let Some(bn) = &mut b.bn {
                layers.push(bn);
            }
        }
        for (ordinal, st) in stats {
            let bn = &mut layers[*ordinal];
            let unbias = if st.n > 1 { st.n as f64 / (st.n as f64 - 1.0) } else { 1.0 };
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * st.mean[j];
                bn.running_var[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * st.var_biased[j] * unbias;
            }
        }
    }

    /// Build the full forward graph on `tape`, registering every parameter
    /// as a leaf. Callers read gradients back through `param_vars`.
    pub fn forward_graph<R: Rng>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: PassMode,
        rng: &mut R,
    ) -> Result<GraphForward> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("input {:?} vs input_dim {}", x.shape(), self.config.input_dim),
            });
        }
        let xv = tape.constant(x.clone())?;
        let mut param_vars = Vec::new();
        let mut bn_stats = Vec::new();
        let mut bn_ordinal = 0usize;
        let p = self.config.dropout_p;

        let mut apply_block = |tape: &mut Tape,
                               block: &Block,
                               input: Var,
                               residual: bool,
                               param_vars: &mut Vec<Var>,
                               bn_ordinal: &mut usize,
                               bn_stats: &mut Vec<(usize, BatchStats)>,
                               rng: &mut R,
                               depth: usize|
         -> Result<Var> {
            let wrap = |e: Error| Error::Context {
                context: format!("depth {depth}"),
                source: Box::new(e),
            };
            let w = tape.param(block.linear.w.clone()).map_err(wrap)?;
            let b = tape.param(block.linear.b.clone()).map_err(wrap)?;
            param_vars.push(w);
            param_vars.push(b);
            let mut h = tape.matmul(input, w).map_err(wrap)?;
            h = tape.add_bias(h, b).map_err(wrap)?;
            if let Some(bn) = &block.bn {
                let g = tape.param(bn.gamma.clone()).map_err(wrap)?;
                let be = tape.param(bn.beta.clone()).map_err(wrap)?;
                param_vars.push(g);
                param_vars.push(be);
                if mode.bn_batch_stats {
                    let (out, stats) = tape.batch_norm_batch(h, g, be, BN_EPS).map_err(wrap)?;
                    bn_stats.push((*bn_ordinal, stats));
                    h = out;
                } else {
                    h = tape
                        .batch_norm_running(h, g, be, &bn.running_mean, &bn.running_var, BN_EPS)
                        .map_err(wrap)?;
                }
                *bn_ordinal += 1;
            }
            h = tape.relu(h).map_err(wrap)?;
            if mode.dropout_active && p > 0.0 {
                h = tape.dropout(h, p, rng).map_err(wrap)?;
            }
            if residual {
                h = tape.add(input, h).map_err(wrap)?;
            }
            Ok(h)
        };

        // input block is never residual (it changes dimensionality)
        let a0 = apply_block(
            tape, &self.input, xv, false, &mut param_vars, &mut bn_ordinal, &mut bn_stats, rng, 0,
        )?;
        let mut activations = vec![a0];
        for (i, block) in self.hidden.iter().enumerate() {
            let prev = *activations.last().unwrap();
            let a = apply_block(
                tape,
                block,
                prev,
                self.config.residual,
                &mut param_vars,
                &mut bn_ordinal,
                &mut bn_stats,
                rng,
                i + 1,
            )?;
            activations.push(a);
        }

        let wo = tape.param(self.output.w.clone())?;
        let bo = tape.param(self.output.b.clone())?;
        param_vars.push(wo);
        param_vars.push(bo);
        let mut depth_outputs = Vec::with_capacity(activations.len());
        for (i, &a) in activations.iter().enumerate() {
            let out = tape.matmul(a, wo).and_then(|h| tape.add_bias(h, bo)).map_err(|e| {
                Error::Context { context: format!("depth {i}"), source: Box::new(e) }
            })?;
            depth_outputs.push(out);
        }
        let log_var = tape.param(self.noise.log_var.clone())?;
        param_vars.push(log_var);

        Ok(GraphForward { param_vars, log_var, activations, depth_outputs, bn_stats })
    }

    /// Value-level forward pass returning every activation and per-depth
    /// prediction. Batch statistics are computed but never folded back.
    pub fn forward_all_depths<R: Rng>(
        &self,
        x: &Tensor,
        mode: PassMode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let gf = self.forward_graph(&mut tape, x, mode, rng)?;
        Ok(ForwardTrace {
            activations: gf.activations.iter().map(|&v| tape.value(v).clone()).collect(),
            per_depth_outputs: gf.depth_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// One stochastic pass through the full depth with fresh dropout masks.
    pub fn forward_stochastic<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let trace = self.forward_all_depths(x, PassMode::mc_sample(), rng)?;
        Ok(trace.per_depth_outputs.into_iter().next_back().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> NetworkConfig {
        NetworkConfig {
            input_dim: 3,
            width: 8,
            n_hidden: 2,
            use_batch_norm: true,
            dropout_p: 0.0,
            residual: true,
        }
    }

    fn toy_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = NetworkConfig::dun(13);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::build(&cfg, &mut rng).unwrap();
        // input: 13*100 + 100 + 2*100 ; hidden: 10*(100*100 + 100 + 200) ; output: 101 ; noise: 1
        let expected = (13 * 100 + 100 + 200) + 10 * (100 * 100 + 100 + 200) + (100 + 1) + 1;
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn single_hidden_block_when_configured() {
        let mut cfg = toy_config();
        cfg.n_hidden = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::build(&cfg, &mut rng).unwrap();
        assert_eq!(net.hidden.len(), 1);
        assert_eq!(net.n_depths(), 2);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = toy_config();
        let a = Network::build(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Network::build(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (fa, fb) = (a.flatten_params(), b.flatten_params());
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn residual_identity_with_zero_hidden_blocks() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::build(&cfg, &mut rng).unwrap();
        for b in net.hidden.iter_mut() {
            for v in b.linear.w.data_mut() {
                *v = 0.0;
            }
        }
        let x = toy_input(4, 3, 1);
        let trace = net.forward_all_depths(&x, PassMode::eval(), &mut rng).unwrap();
        let a0 = trace.activations[0].data().to_vec();
        for a in &trace.activations[1..] {
            assert_eq!(a.data(), &a0[..]);
        }
        let o0 = trace.per_depth_outputs[0].data().to_vec();
        for o in &trace.per_depth_outputs[1..] {
            assert_eq!(o.data(), &o0[..]);
        }
    }

    #[test]
    fn depth_count_is_n_hidden_plus_one() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::build(&cfg, &mut rng).unwrap();
        let x = toy_input(5, 3, 2);
        let trace = net.forward_all_depths(&x, PassMode::eval(), &mut rng).unwrap();
        assert_eq!(trace.activations.len(), 3);
        assert_eq!(trace.per_depth_outputs.len(), 3);
    }

    #[test]
    fn depth_causality() {
        // zeroing a later block must not change earlier depth outputs
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::build(&cfg, &mut rng).unwrap();
        let x = toy_input(4, 3, 6);
        let before = net.forward_all_depths(&x, PassMode::eval(), &mut rng).unwrap();
        let mut altered = net.clone();
        for v in altered.hidden[1].linear.w.data_mut() {
            *v = 0.0;
        }
        let after = altered.forward_all_depths(&x, PassMode::eval(), &mut rng).unwrap();
        for i in 0..2 {
            assert_eq!(
                before.per_depth_outputs[i].data(),
                after.per_depth_outputs[i].data(),
                "depth {i} changed"
            );
        }
        assert_ne!(before.per_depth_outputs[2].data(), after.per_depth_outputs[2].data());
    }

    #[test]
    fn outputs_finite_after_init() {
        let cfg = NetworkConfig::dun(13);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::build(&cfg, &mut rng).unwrap();
        let x = toy_input(16, 13, 7);
        let trace = net.forward_all_depths(&x, PassMode::eval(), &mut rng).unwrap();
        for o in &trace.per_depth_outputs {
            o.check_finite("test").unwrap();
        }
    }

    #[test]
    fn stochastic_forward_with_zero_dropout_is_deterministic() {
        let mut cfg = toy_config();
        cfg.use_batch_norm = false;
        cfg.dropout_p = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = Network::build(&cfg, &mut rng).unwrap();
        let x = toy_input(4, 3, 11);
        let a = net.forward_stochastic(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = net.forward_all_depths(&x, PassMode::eval(), &mut rng).unwrap();
        assert_eq!(a.data(), b.per_depth_outputs.last().unwrap().data());
    }

    #[test]
    fn stochastic_forward_reproducible_and_varying() {
        let mut cfg = toy_config();
        cfg.use_batch_norm = false;
        cfg.residual = false;
        cfg.dropout_p = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::build(&cfg, &mut rng).unwrap();
        let x = toy_input(3, 3, 13);
        let a = net.forward_stochastic(&x, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = net.forward_stochastic(&x, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a.data(), b.data());

        // empirical variance over many masks is positive
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut vals = Vec::new();
        for _ in 0..1000 {
            vals.push(net.forward_stochastic(&x, &mut rng2).unwrap().data()[0]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var > 0.0);
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        // 5-point batch through the residual stack with batch norm,
        // gaussian likelihood at the deepest output.
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Network::build(&cfg, &mut rng).unwrap();
        let x = toy_input(5, 3, 22);
        let y: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.6).collect();

        let loss_of = |net: &Network, x: &Tensor, y: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let gf = net.forward_graph(&mut tape, x, PassMode::train(), &mut r).unwrap();
            let deepest = *gf.depth_outputs.last().unwrap();
            let ll = tape.gaussian_log_lik(deepest, gf.log_var, y).unwrap();
            let s = tape.sum(ll).unwrap();
            let loss = tape.neg(s).unwrap();
            tape.value(loss).item().unwrap()
        };

        let theta0 = net.flatten_params();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let mut n2 = net.clone();
                n2.set_params(v).unwrap();
                loss_of(&n2, &x, &y)
            },
            &theta0,
            1e-5,
        );

        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let gf = net.forward_graph(&mut tape, &x, PassMode::train(), &mut r).unwrap();
        let deepest = *gf.depth_outputs.last().unwrap();
        let ll = tape.gaussian_log_lik(deepest, gf.log_var, &y).unwrap();
        let s = tape.sum(ll).unwrap();
        let loss = tape.neg(s).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for &pv in &gf.param_vars {
            match tape.grad(pv) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat_n(0.0, tape.value(pv).len())),
            }
        }
        assert_eq!(analytic.len(), theta0.len());
        assert!(
            max_rel_err(&analytic, &fd) < 1e-4,
            "max rel err {}",
            max_rel_err(&analytic, &fd)
        );
    }
}
