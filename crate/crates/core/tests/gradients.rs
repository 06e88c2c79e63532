mod common;

use bitturbo_core::Tensor;
use common::{gradient_cases, grad_check, masked, ste_grads};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    let mut failed = Vec::new();
    for case in gradient_cases() {
        let err = grad_check(&*case.build, &case.inputs).unwrap();
        if err > common::GRAD_TOL {
            failed.push(format!("{}: {:e}", case.name, err));
        }
    }
    assert!(failed.is_empty(), "{:?}", failed);
}

fn latent() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..4, 1usize..9).prop_flat_map(|(b, c, h)| {
        prop::collection::vec(
            prop_oneof![-3.0..3.0f64, Just(1.0), Just(-1.0), Just(0.0)],
            b * c * h,
        )
        .prop_map(move |d| Tensor::new(vec![b, c, h], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sign_ste_backward_is_masked_identity(r in latent()) {
        let (gq, gx) = ste_grads(&r, false);
        prop_assert_eq!(gx, masked(&gq, &r));
    }

    #[test]
    fn ternary_ste_backward_is_masked_identity(r in latent()) {
        let (gq, gx) = ste_grads(&r, true);
        prop_assert_eq!(gx, masked(&gq, &r));
    }
}
