//! Parameterised layers shared by both networks. Layers hold [`ParamId`]s;
//! the values live in a [`ParamStore`].

use crate::params::{he_normal, uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
    pub pool_after: bool,
}

/// 3x3 conv + ReLU blocks; every block but the last is followed by a 2x2
/// stride-2 max pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
    pub out_channels: usize,
}

impl Backbone {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut cin = in_channels;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let weight = store.add(
                    format!("{prefix}.conv{i}.weight"),
                    he_normal(&[cout, cin, 3, 3], cin * 9, rng),
                );
                let bias = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[cout]));
                cin = cout;
                ConvBlock {
                    weight,
                    bias,
                    pad: 1,
                    pool_after: i + 1 < channels.len(),
                }
            })
            .collect();
        Self {
            blocks,
            out_channels: cin,
        }
    }

    /// Spatial reduction factor from input to feature map.
    pub fn stride(&self) -> usize {
        1 << self.blocks.iter().filter(|b| b.pool_after).count()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
    ) -> Result<Var> {
        for block in &self.blocks {
            let w = tape.param(store, block.weight);
            let b = tape.param(store, block.bias);
            x = tape.conv2d(x, w, Some(b), 1, block.pad)?;
            x = tape.relu(x);
            if block.pool_after {
                x = tape.max_pool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Zero-initialised, so a fresh head predicts the uniform distribution.
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// LSTM cell with gate order (input, forget, cell, output):
/// `c' = f*c + i*g`, `h' = o*tanh(c')`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add(
            format!("{prefix}.w_input"),
            uniform(&[input_dim, 4 * hidden], bound, rng),
        );
        let w_hidden = store.add(
            format!("{prefix}.w_hidden"),
            uniform(&[hidden, 4 * hidden], bound, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[4 * hidden]));
        Self {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden,
        }
    }

    /// One step over a batch: `x [B,D]`, `h, c [B,H]` to `(h', c')`.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        let from_x = tape.linear(x, wi, Some(b))?;
        let from_h = tape.linear(h, wh, None)?;
        let gates = tape.add(from_x, from_h)?;
        let u = self.hidden;
        let i = tape.narrow(gates, 1, 0, u)?;
        let i = tape.sigmoid(i);
        let f = tape.narrow(gates, 1, u, u)?;
        let f = tape.sigmoid(f);
        let g = tape.narrow(gates, 1, 2 * u, u)?;
        let g = tape.tanh(g);
        let o = tape.narrow(gates, 1, 3 * u, u)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}
