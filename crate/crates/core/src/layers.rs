//! Reusable network layers: seeded initialization plus conv / transposed-conv
//! / batch-norm wrappers that own their parameter ids and record themselves on
//! a tape.

use crate::autodiff::{BufferId, GradTape, NodeId, ParamId, ParamStore};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// He-uniform initialization: U(−b, b) with b = sqrt(6 / fan_in). Draws in
/// row-major element order from the given stream, so layer construction order
/// fully determines every weight.
pub fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.range(-bound, bound)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

/// 2-D convolution layer (weight [Cout,Cin,kh,kw] + optional bias [Cout]).
///
/// The bias is omitted for convs that feed straight into batch norm (the
/// batch-mean subtraction makes such a bias an exact no-op, and BN's beta
/// provides the shift) and for the non-local phi embedding (a phi bias shifts
/// every affinity logit of a row equally, which row-softmax cancels exactly).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.register(
            &format!("{name}.weight"),
            he_uniform(rng, &[cout, cin, k, k], fan_in),
        )?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            cout,
            stride,
            padding,
        })
    }

    /// Bias-free variant, for convs whose output is batch-normalized or
    /// row-softmaxed (where a bias would have exactly zero gradient).
    #[allow(clippy::too_many_arguments)]
    pub fn new_no_bias(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.register(
            &format!("{name}.weight"),
            he_uniform(rng, &[cout, cin, k, k], fan_in),
        )?;
        Ok(Self {
            weight,
            bias: None,
            cout,
            stride,
            padding,
        })
    }

    /// Conv layer with all-zero weight and bias (the non-local w projection).
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        let weight = store.register(&format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]))?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            cout,
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward(&self, tape: &mut GradTape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.weight)?;
        let b = match self.bias {
            Some(id) => tape.param(store, id)?,
            None => tape.leaf(Tensor::zeros(&[self.cout]))?,
        };
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        ids
    }
}

/// Transposed 2-D convolution layer (weight [Cin,Cout,kh,kw] + optional bias
/// [Cout]); the bias is omitted when the output feeds batch norm.
#[derive(Debug, Clone)]
pub struct ConvTranspose2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.register(
            &format!("{name}.weight"),
            he_uniform(rng, &[cin, cout, k, k], fan_in),
        )?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            cout,
            stride,
            padding,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_no_bias(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.register(
            &format!("{name}.weight"),
            he_uniform(rng, &[cin, cout, k, k], fan_in),
        )?;
        Ok(Self {
            weight,
            bias: None,
            cout,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut GradTape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.weight)?;
        let b = match self.bias {
            Some(id) => tape.param(store, id)?,
            None => tape.leaf(Tensor::zeros(&[self.cout]))?,
        };
        tape.conv_transpose2d(x, w, b, self.stride, self.padding)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        ids
    }
}

/// Batch normalization layer with learnable gamma/beta and running-stat
/// buffers updated by exponential moving average in train mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2dLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::ones(&[c]))?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[c]))?;
        let running_mean =
            store.register_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
        let running_var =
            store.register_buffer(&format!("{name}.running_var"), Tensor::ones(&[c]))?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let gamma = tape.param(store, self.gamma)?;
        let beta = tape.param(store, self.beta)?;
        if training {
            let (out, stats) = tape.batchnorm2d_train(x, gamma, beta, self.eps)?;
            // EMA update; running variance uses the unbiased estimate.
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let mom = self.momentum;
            {
                let rm = store.buffer_mut(self.running_mean);
                for (r, m) in rm.value.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - mom) * *r + mom * m;
                }
            }
            {
                let rv = store.buffer_mut(self.running_var);
                for (r, v) in rv.value.data_mut().iter_mut().zip(&stats.var_biased) {
                    *r = (1.0 - mom) * *r + mom * v * unbias;
                }
            }
            Ok(out)
        } else {
            let rm = store.buffer(self.running_mean).value.data().to_vec();
            let rv = store.buffer(self.running_var).value.data().to_vec();
            tape.batchnorm2d_eval(x, gamma, beta, &rm, &rv, self.eps)
        }
    }
}

/// The conv3x3 + BN + ReLU unit the backbone stages and Eq. 4's F_i share.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2dLayer,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        // bias-free conv: BN's mean subtraction would cancel it exactly
        let conv = Conv2dLayer::new_no_bias(store, rng, &format!("{name}.conv"), cin, cout, 3, 1, 1)?;
        let bn = BatchNorm2dLayer::new(store, &format!("{name}.bn"), cout)?;
        Ok(Self { conv, bn })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.push(self.bn.gamma);
        ids.push(self.bn.beta);
        ids
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let h = self.conv.forward(tape, store, x)?;
        let h = self.bn.forward(tape, store, h, training)?;
        tape.relu(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_uniform_within_bound_and_seeded() {
        let mut rng = Rng::seed(3);
        let t = he_uniform(&mut rng, &[4, 3, 3, 3], 27);
        let bound = (6.0 / 27.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let mut rng2 = Rng::seed(3);
        let t2 = he_uniform(&mut rng2, &[4, 3, 3, 3], 27);
        assert!(t.bitwise_eq(&t2));
    }

    #[test]
    fn batchnorm_updates_running_stats_in_train_only() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2dLayer::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

        let mut tape = GradTape::new();
        let xi = tape.leaf(x.clone()).unwrap();
        bn.forward(&mut tape, &mut store, xi, false).unwrap();
        assert_eq!(store.buffer(bn.running_mean).value.data(), &[0.0]);

        let mut tape = GradTape::new();
        let xi = tape.leaf(x).unwrap();
        bn.forward(&mut tape, &mut store, xi, true).unwrap();
        // batch mean 2.5, biased var 1.25 -> unbiased 1.25*4/3
        let rm = store.buffer(bn.running_mean).value.data()[0];
        let rv = store.buffer(bn.running_var).value.data()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * 1.25 * 4.0 / 3.0)).abs() < 1e-12);
    }
}
