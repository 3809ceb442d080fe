use proptest::prelude::*;

use rdmpc::constraints::{structurally_empty, tighten, ConstraintForm, ConstraintKind, ScalarConstraint};
use rdmpc::setalg::{tube_radius, TubeProfile};

fn keep_out(point: [f64; 2], threshold: f64) -> ScalarConstraint {
    ScalarConstraint {
        kind: ConstraintKind::Obstacle,
        form: ConstraintForm::MinDistance {
            point: point.to_vec(),
            threshold,
        },
        lipschitz: 1.0,
        offset: 0.0,
        target: Some(0),
    }
}

fn keep_in(point: [f64; 2], threshold: f64) -> ScalarConstraint {
    ScalarConstraint {
        kind: ConstraintKind::Neighbor,
        form: ConstraintForm::MaxDistance {
            point: point.to_vec(),
            threshold,
        },
        lipschitz: 1.0,
        offset: 0.0,
        target: Some(1),
    }
}

proptest! {
    #[test]
    fn tightened_margin_guards_every_perturbation(
        z in prop::array::uniform3(-5.0..5.0f64),
        c in prop::array::uniform2(-5.0..5.0f64),
        threshold in 0.1..3.0f64,
        tau in 0.0..0.6f64,
        dir in 0.0..std::f64::consts::TAU,
        s in 0.0..=1.0f64,
    ) {
        let profile = TubeProfile::new(0.1, 8.5883).unwrap();
        let rho = tube_radius(&profile, tau).unwrap();
        let set = [keep_out(c, threshold), keep_in(c, threshold + 3.0)];
        let tight = tighten(&set, tau, &profile).unwrap();
        let moved = [z[0] + s * rho * dir.cos(), z[1] + s * rho * dir.sin(), z[2]];
        for (orig, t) in set.iter().zip(&tight) {
            prop_assert_eq!(t.kind, orig.kind);
            prop_assert!((orig.margin(&z) - t.margin(&z) - rho).abs() < 1e-12);
            if t.margin(&z) >= 0.0 {
                prop_assert!(orig.margin(&moved) >= -1e-12);
            }
        }
    }

    #[test]
    fn zero_offset_is_identity(z in prop::array::uniform3(-5.0..5.0f64), c in prop::array::uniform2(-5.0..5.0f64)) {
        let profile = TubeProfile::new(0.1, 8.5883).unwrap();
        let set = [keep_out(c, 1.0)];
        let tight = tighten(&set, 0.0, &profile).unwrap();
        prop_assert_eq!(tight[0].margin(&z), set[0].margin(&z));
    }
}

#[test]
fn neighbor_ring_collapses_under_long_tubes() {
    let profile = TubeProfile::new(0.1, 8.5883).unwrap();
    let set = [keep_in([0.0, 0.0], 1.99)];
    assert!(!structurally_empty(&tighten(&set, 0.1, &profile).unwrap()));
    assert!(structurally_empty(&tighten(&set, 0.6, &profile).unwrap()));
}

#[test]
fn negative_offset_time_is_rejected() {
    let profile = TubeProfile::new(0.1, 1.0).unwrap();
    assert!(tighten(&[keep_out([0.0, 0.0], 1.0)], -0.1, &profile).is_err());
}
