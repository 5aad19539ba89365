//! `gle gradcheck`: finite-difference verification of every differentiable
//! op and the composed network, printing the max relative error per op and
//! exiting nonzero if any exceeds the tolerance.

use crate::{CliError, CliResult};
use clap::Args;
use gle_core::autodiff::{gradient_check, GradTape, NodeId, ParamStore};
use gle_core::network::{build_network, BackboneKind, NetworkConfig};
use gle_core::rng::Rng;
use gle_core::{Result, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Args)]
pub struct GradcheckArgs {
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Fault fixture: negate backward gradients to prove the check trips
    #[arg(long)]
    pub inject_sign_error: bool,
}

type DriverFn = Box<dyn Fn(&mut GradTape, &[NodeId]) -> Result<NodeId>>;

struct Driver {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: DriverFn,
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.range(lo, hi))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("driver tensor")
}

/// Values bounded away from zero so ReLU's kink never sits within eps of a
/// sample point.
fn rand_tensor_offset(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let magnitude = rng.range(0.25, 1.0);
            if rng.range(-1.0, 1.0) < 0.0 {
                -magnitude
            } else {
                magnitude
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("driver tensor")
}

fn drivers(inject_sign_error: bool) -> Vec<Driver> {
    let mut rng = Rng::seed(2024);
    let mut list: Vec<Driver> = Vec::new();

    list.push(Driver {
        name: "add",
        inputs: vec![
            rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.add(xs[0], xs[1])?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "sub",
        inputs: vec![
            rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.sub(xs[0], xs[1])?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "mul",
        inputs: vec![
            rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.mul(xs[0], xs[1])?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "scale",
        inputs: vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        f: Box::new(|tape, xs| {
            let y = tape.scale(xs[0], 1.7)?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "relu",
        inputs: vec![rand_tensor_offset(&mut rng, &[4, 6])],
        f: Box::new(|tape, xs| {
            let y = tape.relu(xs[0])?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "softmax_rows",
        inputs: vec![rand_tensor(&mut rng, &[5, 7], -2.0, 2.0)],
        f: Box::new(|tape, xs| {
            let y = tape.softmax_rows(xs[0])?;
            let w = tape.mul(y, y)?; // weight the rows so gradients are nonzero
            tape.sum_all(w)
        }),
    });
    list.push(Driver {
        name: "matmul_batched",
        inputs: vec![
            rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.matmul_batched(xs[0], xs[1])?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "conv2d",
        inputs: vec![
            rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5),
            rand_tensor(&mut rng, &[4], -0.5, 0.5),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.conv2d(xs[0], xs[1], xs[2], 1, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        }),
    });
    list.push(Driver {
        name: "conv2d_stride2",
        inputs: vec![
            rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 2, 4, 4], -0.5, 0.5),
            rand_tensor(&mut rng, &[3], -0.5, 0.5),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.conv2d(xs[0], xs[1], xs[2], 2, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        }),
    });
    list.push(Driver {
        name: "conv_transpose2d",
        inputs: vec![
            rand_tensor(&mut rng, &[2, 4, 4, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[4, 3, 4, 4], -0.5, 0.5),
            rand_tensor(&mut rng, &[3], -0.5, 0.5),
        ],
        f: Box::new(|tape, xs| {
            let y = tape.conv_transpose2d(xs[0], xs[1], xs[2], 2, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        }),
    });
    // A plain sum of squares is nearly constant for normalized outputs
    // (sum(y^2) ~ gamma^2 * N), which starves the input gradient; weighting
    // by a fourth random input keeps the loss generic.
    list.push(Driver {
        name: "batchnorm2d_train",
        inputs: vec![
            rand_tensor(&mut rng, &[3, 4, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[4], 0.5, 1.5),
            rand_tensor(&mut rng, &[4], -0.5, 0.5),
            rand_tensor(&mut rng, &[3, 4, 3, 3], -1.0, 1.0),
        ],
        f: Box::new(|tape, xs| {
            let (y, _) = tape.batchnorm2d_train(xs[0], xs[1], xs[2], 1e-5)?;
            let weighted = tape.mul(y, xs[3])?;
            tape.sum_all(weighted)
        }),
    });
    list.push(Driver {
        name: "maxpool2",
        inputs: vec![rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0)],
        f: Box::new(|tape, xs| {
            let y = tape.maxpool2(xs[0])?;
            tape.sum_all(y)
        }),
    });
    list.push(Driver {
        name: "reshape",
        inputs: vec![rand_tensor(&mut rng, &[2, 6], -1.0, 1.0)],
        f: Box::new(|tape, xs| {
            let y = tape.reshape(xs[0], vec![3, 4])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        }),
    });
    list.push(Driver {
        name: "transpose_last2",
        inputs: vec![rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        f: Box::new(|tape, xs| {
            let y = tape.transpose_last2(xs[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        }),
    });

    // The composed network, both modes: d(sum of heatmaps)/d(image) through
    // backbone, GLE stack, decoder, and head.
    let config = NetworkConfig {
        input_size: 16,
        backbone: BackboneKind::Toy,
        width_multiplier: 0.125,
        k: 1,
        ..NetworkConfig::default()
    };
    let (net, mut store) = build_network(&config, 61).expect("toy network");
    let wid = store
        .id_by_name("gle.0.nonlocal.w.weight")
        .expect("nonlocal w");
    let shape = store.param(wid).value.shape().to_vec();
    store.param_mut(wid).value = rand_tensor(&mut rng, &shape, -0.3, 0.3);
    let net = Rc::new(net);
    let store: Rc<RefCell<ParamStore>> = Rc::new(RefCell::new(store));
    let image = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);

    for (name, training) in [("network_toy_eval", false), ("network_toy_train", true)] {
        let net = Rc::clone(&net);
        let store = Rc::clone(&store);
        list.push(Driver {
            name,
            inputs: vec![image.clone()],
            f: Box::new(move |tape, xs| {
                let y = net.forward(tape, &mut store.borrow_mut(), xs[0], training)?;
                tape.sum_all(y)
            }),
        });
    }

    if inject_sign_error {
        list.push(Driver {
            name: "fault_fixture",
            inputs: vec![rand_tensor(&mut rng, &[3, 3], 0.5, 1.5)],
            f: Box::new(|tape, xs| {
                tape.inject_backward_sign_fault();
                let y = tape.mul(xs[0], xs[0])?;
                tape.sum_all(y)
            }),
        });
    }

    list
}

pub fn run(args: &GradcheckArgs) -> CliResult {
    if !(args.eps > 0.0) || !(args.tol > 0.0) {
        return Err(CliError::msg(
            "config",
            format!("--eps and --tol must be positive, got {} / {}", args.eps, args.tol),
        ));
    }
    crate::sayln!("gradcheck: eps = {:e}, tol = {:e}", args.eps, args.tol);

    let mut failures = 0usize;
    for driver in drivers(args.inject_sign_error) {
        let err = gradient_check(&driver.f, &driver.inputs, args.eps)?;
        let ok = err <= args.tol;
        crate::sayln!(
            "op {}: max_rel_err = {:.3e} {}",
            driver.name,
            err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::msg(
            "gradcheck",
            format!("{failures} op(s) exceeded tolerance {:e}", args.tol),
        ));
    }
    crate::sayln!("all ops within tolerance");
    Ok(())
}
