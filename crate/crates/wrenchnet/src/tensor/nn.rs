//! MLP building block, Adam, and the learning-rate schedule.
//!
//! Every network component is a two-layer MLP with ReLU, optionally
//! followed by LayerNorm (decoders omit it). Residual wiring lives in the
//! network module, not here, so the MLP stays a plain map.

use rand::Rng;

use super::{
    add_row_bias, layer_norm_forward, matmul, relu, NodeId, Scalar, Tape, Tensor,
};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate decayed geometrically from 1e-3 to 1e-4 over the run.
pub fn lr_schedule(step: u64, total_steps: u64) -> f64 {
    assert!(total_steps > 0, "schedule needs a positive horizon");
    assert!(step <= total_steps, "step beyond schedule horizon");
    1e-3 * 0.1f64.powf(step as f64 / total_steps as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

/// Two-layer MLP: `w2 . relu(w1 . x + b1) + b2`, LayerNorm after when
/// present. Weights are stored input-major: `w1` is `[in x hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub ln: Option<LayerNormParams<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// Glorot-uniform weights, zero biases, identity LayerNorm.
    pub fn init(
        input: usize,
        hidden: usize,
        output: usize,
        normalized: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(rows, cols, |_, _| {
                S::from_f64(rng.random_range(-limit..limit))
            })
        };
        Self {
            w1: glorot(input, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(hidden, output),
            b2: Tensor::zeros(1, output),
            ln: normalized.then(|| LayerNormParams {
                gamma: Tensor::from_fn(1, output, |_, _| S::ONE),
                beta: Tensor::zeros(1, output),
            }),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    /// Walks parameter blocks in declared order with stable names.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        if let Some(ln) = &self.ln {
            f(format!("{prefix}.ln.gamma"), &ln.gamma);
            f(format!("{prefix}.ln.beta"), &ln.beta);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
        if let Some(ln) = &mut self.ln {
            f(format!("{prefix}.ln.gamma"), &mut ln.gamma);
            f(format!("{prefix}.ln.beta"), &mut ln.beta);
        }
    }

    /// Registers the parameters on a tape for a differentiable forward.
    pub fn insert(&self, tape: &mut Tape<S>) -> MlpIds {
        MlpIds {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            ln: self
                .ln
                .as_ref()
                .map(|ln| (tape.leaf(ln.gamma.clone()), tape.leaf(ln.beta.clone()))),
        }
    }
}

/// Tape handles of one MLP's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub ln: Option<(NodeId, NodeId)>,
}

impl MlpIds {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        let h = tape.matmul(x, self.w1);
        let h = tape.add_row_bias(h, self.b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, self.w2);
        let y = tape.add_row_bias(y, self.b2);
        match self.ln {
            Some((gamma, beta)) => tape.layer_norm(y, gamma, beta, LN_EPS),
            None => y,
        }
    }

    /// Parameter ids in the same order as [`Mlp::visit`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.w1, self.b1, self.w2, self.b2];
        if let Some((g, b)) = self.ln {
            out.push(g);
            out.push(b);
        }
        out
    }
}

/// Plain forward pass (shares kernels with the tape path).
pub fn mlp_forward<S: Scalar>(params: &Mlp<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.cols() != params.input_width() {
        return Err(Error::Shape(format!(
            "mlp input width {} does not match declared {}",
            x.cols(),
            params.input_width()
        )));
    }
    let h = relu(&add_row_bias(&matmul(x, &params.w1), &params.b1));
    let y = add_row_bias(&matmul(&h, &params.w2), &params.b2);
    Ok(match &params.ln {
        Some(ln) => layer_norm_forward(&y, &ln.gamma, &ln.beta, LN_EPS).0,
        None => y,
    })
}

/// Adam with bias correction. Moment blocks are keyed by walk position, so
/// the caller must present parameter blocks in a stable order.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Rebuilds optimizer state from checkpointed moments.
    pub fn from_parts(m: Vec<Tensor<S>>, v: Vec<Tensor<S>>, step: u64) -> Self {
        assert_eq!(m.len(), v.len());
        Self { m, v, step }
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    /// One optimizer step over `(name, param, grad)` blocks. A `None`
    /// gradient is treated as zero (the block's edges were absent from the
    /// batch). Non-finite gradients abort, naming the offending block.
    pub fn step(
        &mut self,
        lr: f64,
        blocks: &mut [(String, &mut Tensor<S>, Option<&Tensor<S>>)],
    ) -> Result<()> {
        if self.m.is_empty() {
            for (_, p, _) in blocks.iter() {
                self.m.push(Tensor::zeros(p.rows(), p.cols()));
                self.v.push(Tensor::zeros(p.rows(), p.cols()));
            }
        }
        assert_eq!(self.m.len(), blocks.len(), "block walk changed length");

        for (name, p, g) in blocks.iter() {
            if let Some(g) = g {
                assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter block {name}"
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let b1 = S::from_f64(ADAM_BETA1);
        let b2 = S::from_f64(ADAM_BETA2);
        let one_m_b1 = S::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = S::from_f64(1.0 - ADAM_BETA2);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(ADAM_EPS);
        let lr_s = S::from_f64(lr);

        for (k, (_, p, g)) in blocks.iter_mut().enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                let gi = g.map_or(S::ZERO, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + one_m_b1 * gi;
                let vi = b2 * v.data()[i] + one_m_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi * inv_bc1;
                let vhat = vi * inv_bc2;
                let delta = lr_s * mhat / (vhat.sqrt() + eps);
                p.data_mut()[i] = p.data()[i] - delta;
            }
        }
        Ok(())
    }
}
