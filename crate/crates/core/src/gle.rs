//! The global-local embedding module: a non-local block that lets every
//! spatial position attend to every other (the "global" half), followed by two
//! 3x3 conv + BN + ReLU layers that re-sharpen local structure (the "local"
//! half). Modules preserve shape, so k of them stack in sequence.

use crate::autodiff::{GradTape, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, ConvBnRelu};
use crate::rng::Rng;

/// Largest H*W the non-local affinity accepts; the affinity matrix is
/// (H*W)^2 per batch element, so this caps it at 4096^2 doubles.
pub const NONLOCAL_POSITION_CAP: usize = 4096;

/// All-pairs attention with residual projection.
///
/// theta, phi, g embed the input down to `c_emb` channels with 1x1 convs; the
/// affinity between positions i and j is softmax_j(theta_i . phi_j); w
/// projects the attended features back to `c` channels and is added to the
/// input, so a zero-initialized w makes the whole block start as the identity.
#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    pub c: usize,
    pub c_emb: usize,
    pub theta: Conv2dLayer,
    pub phi: Conv2dLayer,
    pub g: Conv2dLayer,
    pub w: Conv2dLayer,
}

impl NonLocalBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize) -> Result<Self> {
        if c == 0 || c % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "non-local block needs an even positive channel count, got {c}"
            )));
        }
        let c_emb = c / 2;
        let theta = Conv2dLayer::new(store, rng, &format!("{name}.theta"), c, c_emb, 1, 1, 0)?;
        // phi carries no bias: a per-channel shift of phi adds the same value
        // to every logit of an affinity row, which row-softmax cancels exactly
        let phi = Conv2dLayer::new_no_bias(store, rng, &format!("{name}.phi"), c, c_emb, 1, 1, 0)?;
        let g = Conv2dLayer::new(store, rng, &format!("{name}.g"), c, c_emb, 1, 1, 0)?;
        // zero-init: the residual path starts as the identity
        let w = Conv2dLayer::new_zeroed(store, &format!("{name}.w"), c_emb, c, 1)?;
        Ok(Self {
            c,
            c_emb,
            theta,
            phi,
            g,
            w,
        })
    }

    /// y_i = sum_j softmax_j(theta_i . phi_j) g_j, reprojected and added to x.
    pub fn forward(&self, tape: &mut GradTape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.c {
            return Err(Error::ShapeMismatch {
                op: "nonlocal_forward",
                detail: format!(
                    "expected [N,{},H,W] input, got {shape:?}",
                    self.c
                ),
            });
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let m = h * w;
        if m > NONLOCAL_POSITION_CAP {
            return Err(Error::MemoryGuard {
                m,
                cap: NONLOCAL_POSITION_CAP,
            });
        }

        // 1x1 embeddings, flattened to [N, C_emb, M]
        let theta = self.theta.forward(tape, store, x)?;
        let theta = tape.reshape(theta, vec![n, self.c_emb, m])?;
        let phi = self.phi.forward(tape, store, x)?;
        let phi = tape.reshape(phi, vec![n, self.c_emb, m])?;
        let g = self.g.forward(tape, store, x)?;
        let g = tape.reshape(g, vec![n, self.c_emb, m])?;

        // affinity: row i holds the weights position i assigns to every j
        let theta_t = tape.transpose_last2(theta)?; // [N, M, C_emb]
        let logits = tape.matmul_batched(theta_t, phi)?; // [N, M, M]
        let affinity = tape.softmax_rows(logits)?;

        // attend: [N, M, M] x [N, M, C_emb] -> [N, M, C_emb]
        let g_t = tape.transpose_last2(g)?;
        let y = tape.matmul_batched(affinity, g_t)?;
        let y = tape.transpose_last2(y)?; // [N, C_emb, M]
        let y = tape.reshape(y, vec![n, self.c_emb, h, w])?;

        // residual re-projection back to C channels
        let projected = self.w.forward(tape, store, y)?;
        tape.add(projected, x)
    }

    /// Forward that additionally returns the affinity node (for tests and
    /// diagnostics that inspect attention rows).
    pub fn forward_with_affinity(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = tape.value(x).shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let m = h * w;
        let theta = self.theta.forward(tape, store, x)?;
        let theta = tape.reshape(theta, vec![n, self.c_emb, m])?;
        let phi = self.phi.forward(tape, store, x)?;
        let phi = tape.reshape(phi, vec![n, self.c_emb, m])?;
        let theta_t = tape.transpose_last2(theta)?;
        let logits = tape.matmul_batched(theta_t, phi)?;
        let affinity = tape.softmax_rows(logits)?;
        let out = self.forward(tape, store, x)?;
        Ok((out, affinity))
    }
}

/// One global-local embedding module: non-local block, then F1 and F2
/// (3x3 conv + BN + ReLU each), all at constant channel count.
#[derive(Debug, Clone)]
pub struct GleModule {
    pub nonlocal: NonLocalBlock,
    pub f1: ConvBnRelu,
    pub f2: ConvBnRelu,
}

impl GleModule {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize) -> Result<Self> {
        let nonlocal = NonLocalBlock::new(store, rng, &format!("{name}.nonlocal"), c)?;
        let f1 = ConvBnRelu::new(store, rng, &format!("{name}.f1"), c, c)?;
        let f2 = ConvBnRelu::new(store, rng, &format!("{name}.f2"), c, c)?;
        Ok(Self { nonlocal, f1, f2 })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let h = self.nonlocal.forward(tape, store, x)?;
        let h = self.f1.forward(tape, store, h, training)?;
        self.f2.forward(tape, store, h, training)
    }
}

/// k global-local embedding modules applied in sequence.
#[derive(Debug, Clone)]
pub struct GleStack {
    pub modules: Vec<GleModule>,
}

impl GleStack {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, k: usize, c: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig(
                "a GLE stack needs k >= 1 modules".into(),
            ));
        }
        let mut modules = Vec::with_capacity(k);
        for i in 0..k {
            modules.push(GleModule::new(store, rng, &format!("{name}.{i}"), c)?);
        }
        Ok(Self { modules })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let mut h = x;
        for module in &self.modules {
            h = module.forward(tape, store, h, training)?;
        }
        Ok(h)
    }

    /// Every parameter id of the stack, in registration order.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = Vec::new();
        for module in &self.modules {
            for layer in [
                &module.nonlocal.theta,
                &module.nonlocal.phi,
                &module.nonlocal.g,
                &module.nonlocal.w,
            ] {
                ids.extend(layer.param_ids());
            }
            ids.extend(module.f1.param_ids());
            ids.extend(module.f2.param_ids());
        }
        debug_assert!(ids.iter().all(|id| id.0 < store.len()));
        ids
    }
}
