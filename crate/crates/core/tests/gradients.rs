//! Every differentiable op against central finite differences in f64, on 20
//! random instances each.

use avae_core::gradcheck::{op_checks, OpCheck};

const INSTANCES: u64 = 20;

fn run(name: &str) {
    let check: OpCheck = op_checks().into_iter().find(|c| c.name == name).expect("known op");
    let worst = check.worst(INSTANCES);
    assert!(worst < check.tolerance, "{name}: worst relative error {worst:e} >= {:e}", check.tolerance);
}

macro_rules! op_tests {
    ($($name:ident),* $(,)?) => {
        $(#[test] fn $name() { run(stringify!($name)); })*
    };
}

op_tests!(
    conv2d,
    conv_transpose2d,
    linear,
    elu,
    sigmoid,
    batch_norm_train,
    batch_norm_eval,
    affine_matrix_rotation,
    affine_matrix_rsst,
    affine_matrix_full6,
    affine_inverse,
    affine_grid,
    grid_sample,
    elbo,
    avae_pipeline,
);

#[test]
fn every_op_is_covered() {
    assert_eq!(op_checks().len(), 15);
}
