//! Behavior of the non-local block and the global-local embedding module:
//! identity start, uniform-affinity oracle, permutation equivariance, shape
//! preservation, and end-to-end gradients.

mod support;

use std::cell::RefCell;

use gle_core::autodiff::{gradient_check, GradTape, ParamStore};
use gle_core::gle::{GleModule, GleStack, NonLocalBlock};
use gle_core::rng::Rng;
use gle_core::{Error, Tensor};
use support::*;

fn make_block(c: usize, seed: u64) -> (ParamStore, NonLocalBlock) {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(seed);
    let block = NonLocalBlock::new(&mut store, &mut rng, "nl", c).unwrap();
    (store, block)
}

#[test]
fn rejects_odd_channel_count() {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(1);
    assert!(NonLocalBlock::new(&mut store, &mut rng, "nl", 5).is_err());
    assert!(NonLocalBlock::new(&mut store, &mut rng, "nl", 0).is_err());
}

#[test]
fn zero_w_makes_block_the_identity_bitwise() {
    let (store, block) = make_block(4, 2);
    let mut rng = Rng::seed(3);
    let x = rand_tensor(&mut rng, &[2, 4, 5, 5], -2.0, 2.0);
    let mut tape = GradTape::new();
    let xi = tape.leaf(x.clone()).unwrap();
    let y = block.forward(&mut tape, &store, xi).unwrap();
    assert!(tape.value(y).bitwise_eq(&x), "fresh block must be identity");
}

#[test]
fn single_position_input_attends_to_itself() {
    let (mut store, block) = make_block(2, 4);
    // make w nonzero so the block actually does something
    let wid = store.id_by_name("nl.w.weight").unwrap();
    store.param_mut(wid).value.data_mut().fill(0.5);
    let mut rng = Rng::seed(5);
    let x = rand_tensor(&mut rng, &[1, 2, 1, 1], -1.0, 1.0);
    let mut tape = GradTape::new();
    let xi = tape.leaf(x.clone()).unwrap();
    let (y, affinity) = block.forward_with_affinity(&mut tape, &store, xi).unwrap();
    // the single affinity row softmaxes to exactly [1.0]
    assert_eq!(tape.value(affinity).shape(), &[1, 1, 1]);
    assert!((tape.value(affinity).data()[0] - 1.0).abs() < 1e-15);
    // so the output is w(g(x)) + x
    let g_w = store.param(store.id_by_name("nl.g.weight").unwrap());
    let g_b = store.param(store.id_by_name("nl.g.bias").unwrap());
    let gx = naive_conv2d(&x, &g_w.value, g_b.value.data(), 1, 0);
    let w_w = store.param(wid);
    let w_b = store.param(store.id_by_name("nl.w.bias").unwrap());
    let wgx = naive_conv2d(&gx, &w_w.value, w_b.value.data(), 1, 0);
    for ((got, base), proj) in tape.value(y).data().iter().zip(x.data()).zip(wgx.data()) {
        assert!((got - (base + proj)).abs() < 1e-12);
    }
}

#[test]
fn zero_theta_phi_gives_uniform_affinity_spatial_mean() {
    let (mut store, block) = make_block(4, 6);
    // zero theta and phi: every logit row is constant, softmax is uniform 1/M
    // (phi has no bias parameter; see NonLocalBlock::new)
    for name in ["nl.theta.weight", "nl.theta.bias", "nl.phi.weight"] {
        let id = store.id_by_name(name).unwrap();
        store.param_mut(id).value.data_mut().fill(0.0);
    }
    // non-trivial w so the attended features reach the output
    let wid = store.id_by_name("nl.w.weight").unwrap();
    let numel = store.param(wid).value.numel();
    let mut wrng = Rng::seed(7);
    for i in 0..numel {
        store.param_mut(wid).value.data_mut()[i] = wrng.range(-0.5, 0.5);
    }

    let mut rng = Rng::seed(8);
    let x = rand_tensor(&mut rng, &[1, 4, 3, 4], -1.0, 1.0);
    let mut tape = GradTape::new();
    let xi = tape.leaf(x.clone()).unwrap();
    let (y, affinity) = block.forward_with_affinity(&mut tape, &store, xi).unwrap();

    let m = 12;
    for &a in tape.value(affinity).data() {
        assert!((a - 1.0 / m as f64).abs() < 1e-12, "affinity not uniform: {a}");
    }

    // hand-rolled oracle: y position-wise equals the spatial mean of g(x)
    let g_w = store.param(store.id_by_name("nl.g.weight").unwrap());
    let g_b = store.param(store.id_by_name("nl.g.bias").unwrap());
    let gx = naive_conv2d(&x, &g_w.value, g_b.value.data(), 1, 0);
    let c_emb = 2;
    let mut mean_map = vec![0.0; c_emb];
    for ce in 0..c_emb {
        let plane = &gx.data()[ce * m..(ce + 1) * m];
        mean_map[ce] = plane.iter().sum::<f64>() / m as f64;
    }
    // w(mean) + x, broadcast over positions
    let w_w = store.param(wid);
    let w_b = store.param(store.id_by_name("nl.w.bias").unwrap());
    for c in 0..4 {
        let mut proj = w_b.value.data()[c];
        for ce in 0..c_emb {
            proj += w_w.value.data()[c * c_emb + ce] * mean_map[ce];
        }
        for pos in 0..m {
            let got = tape.value(y).data()[c * m + pos];
            let want = x.data()[c * m + pos] + proj;
            assert!(
                (got - want).abs() < 1e-10,
                "channel {c} pos {pos}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn affinity_rows_sum_to_one() {
    let (mut store, block) = make_block(4, 9);
    // random nonzero theta/phi so logits vary
    let mut wrng = Rng::seed(10);
    for name in ["nl.theta.weight", "nl.phi.weight"] {
        let id = store.id_by_name(name).unwrap();
        let n = store.param(id).value.numel();
        for i in 0..n {
            store.param_mut(id).value.data_mut()[i] = wrng.range(-1.0, 1.0);
        }
    }
    let mut rng = Rng::seed(11);
    for _ in 0..10 {
        let h = 1 + rng.below(5) as usize;
        let w = 1 + rng.below(5) as usize;
        let x = rand_tensor(&mut rng, &[2, 4, h, w], -3.0, 3.0);
        let mut tape = GradTape::new();
        let xi = tape.leaf(x).unwrap();
        let (_, affinity) = block.forward_with_affinity(&mut tape, &store, xi).unwrap();
        let m = h * w;
        for row in tape.value(affinity).data().chunks_exact(m) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
        }
    }
}

/// Permuting the H*W positions of the input (same permutation on every
/// channel) must permute the output identically: attention has no positional
/// structure and 1x1 convs are position-independent.
#[test]
fn nonlocal_is_permutation_equivariant() {
    let (mut store, block) = make_block(4, 12);
    let mut wrng = Rng::seed(13);
    for (_, p) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        let id = store.id_by_name(&p).unwrap();
        let n = store.param(id).value.numel();
        for i in 0..n {
            store.param_mut(id).value.data_mut()[i] = wrng.range(-0.5, 0.5);
        }
    }
    let mut rng = Rng::seed(14);
    let (h, w) = (3, 3);
    let m = h * w;
    for case in 0..20 {
        let x = rand_tensor(&mut rng, &[1, 4, h, w], -1.0, 1.0);
        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);

        let permute = |t: &Tensor| -> Tensor {
            let mut out = vec![0.0; t.numel()];
            for c in 0..4 {
                for (dst, &src) in perm.iter().enumerate() {
                    out[c * m + dst] = t.data()[c * m + src];
                }
            }
            Tensor::from_vec(t.shape().to_vec(), out).unwrap()
        };

        let run = |input: Tensor| -> Tensor {
            let mut tape = GradTape::new();
            let xi = tape.leaf(input).unwrap();
            let y = block.forward(&mut tape, &store, xi).unwrap();
            tape.value(y).clone()
        };

        let y_then_perm = permute(&run(x.clone()));
        let perm_then_y = run(permute(&x));
        let diff = y_then_perm.max_abs_diff(&perm_then_y).unwrap();
        assert!(diff < 1e-10, "case {case}: equivariance violated by {diff}");
    }
}

#[test]
fn memory_guard_refuses_oversized_affinity() {
    let (store, block) = make_block(2, 15);
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 65, 64])).unwrap();
    match block.forward(&mut tape, &store, x) {
        Err(Error::MemoryGuard { m, cap }) => {
            assert_eq!(m, 65 * 64);
            assert_eq!(cap, 4096);
        }
        other => panic!("expected memory guard error, got {other:?}"),
    }
}

#[test]
fn gle_module_preserves_shape() {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(16);
    let module = GleModule::new(&mut store, &mut rng, "gle.0", 32).unwrap();
    let x = rand_tensor(&mut rng, &[2, 32, 7, 7], -1.0, 1.0);
    let mut tape = GradTape::new();
    let xi = tape.leaf(x).unwrap();
    let y = module.forward(&mut tape, &mut store, xi, true).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 32, 7, 7]);
}

#[test]
fn stack_of_one_equals_single_module_bitwise() {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(17);
    let stack = GleStack::new(&mut store, &mut rng, "gle", 1, 8).unwrap();
    let x = rand_tensor(&mut rng, &[1, 8, 4, 4], -1.0, 1.0);

    let mut tape = GradTape::new();
    let xi = tape.leaf(x.clone()).unwrap();
    let y_stack = stack.forward(&mut tape, &mut store.clone(), xi, false).unwrap();

    let mut tape2 = GradTape::new();
    let xi2 = tape2.leaf(x).unwrap();
    let y_single = stack.modules[0]
        .forward(&mut tape2, &mut store.clone(), xi2, false)
        .unwrap();
    assert!(tape.value(y_stack).bitwise_eq(tape2.value(y_single)));
}

#[test]
fn stack_k2_and_k3_preserve_shape() {
    for k in [2usize, 3] {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(18 + k as u64);
        let stack = GleStack::new(&mut store, &mut rng, "gle", k, 4).unwrap();
        assert_eq!(stack.modules.len(), k);
        let x = rand_tensor(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
        let mut tape = GradTape::new();
        let xi = tape.leaf(x).unwrap();
        let y = stack.forward(&mut tape, &mut store, xi, true).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 6, 6]);
    }
}

#[test]
fn gradcheck_gle_module_input() {
    // gradient w.r.t. the input through the full module
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(19);
    let module = GleModule::new(&mut store, &mut rng, "gle.0", 4).unwrap();
    // give w nonzero weights so the attention path carries gradient
    let wid = store.id_by_name("gle.0.nonlocal.w.weight").unwrap();
    let n = store.param(wid).value.numel();
    for i in 0..n {
        store.param_mut(wid).value.data_mut()[i] = rng.range(-0.5, 0.5);
    }
    let x = rand_tensor(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
    let store_cell = RefCell::new(store);
    let err = gradient_check(
        |tape, ids| {
            let mut store = store_cell.borrow_mut();
            let y = module.forward(tape, &mut store, ids[0], true)?;
            let mut wrng = Rng::seed(77);
            let weights = rand_tensor(&mut wrng, tape.value(y).shape(), 0.5, 1.5);
            let wi = tape.leaf(weights)?;
            let p = tape.mul(y, wi)?;
            tape.sum_all(p)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "module input gradient error {err}");
}

#[test]
fn gradcheck_stack_all_parameters() {
    // gradient w.r.t. every parameter of a k=1 stack on a 1x4x6x6 input
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(20);
    let stack = GleStack::new(&mut store, &mut rng, "gle", 1, 4).unwrap();
    let wid = store.id_by_name("gle.0.nonlocal.w.weight").unwrap();
    let n = store.param(wid).value.numel();
    for i in 0..n {
        store.param_mut(wid).value.data_mut()[i] = rng.range(-0.5, 0.5);
    }
    let x = rand_tensor(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);

    let param_ids = stack.param_ids(&store);
    let param_values: Vec<Tensor> = param_ids
        .iter()
        .map(|id| store.param(*id).value.clone())
        .collect();
    let store_cell = RefCell::new(store);
    let err = gradient_check(
        |tape, ids| {
            for (pid, node) in param_ids.iter().zip(ids) {
                tape.bind_param(*pid, *node)?;
            }
            let mut store = store_cell.borrow_mut();
            let xi = tape.leaf(x.clone())?;
            let y = stack.forward(tape, &mut store, xi, true)?;
            let mut wrng = Rng::seed(78);
            let weights = rand_tensor(&mut wrng, tape.value(y).shape(), 0.5, 1.5);
            let wi = tape.leaf(weights)?;
            let p = tape.mul(y, wi)?;
            tape.sum_all(p)
        },
        &param_values,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "stack parameter gradient error {err}");
}
