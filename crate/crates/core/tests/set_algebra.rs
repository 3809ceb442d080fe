use proptest::prelude::*;

use rdmpc::setalg::{minkowski_add, pontryagin_diff, tube_radius, Ball, BallSet, TubeProfile};

fn ball(c: (f64, f64), r: f64) -> Ball {
    Ball::from_slice(&[c.0, c.1], r).unwrap()
}

proptest! {
    #[test]
    fn difference_then_sum_stays_inside(
        ca in (-5.0..5.0f64, -5.0..5.0f64),
        cb in (-5.0..5.0f64, -5.0..5.0f64),
        ra in 0.0..5.0f64,
        rb in 0.0..5.0f64,
        dir in 0.0..std::f64::consts::TAU,
        s in 0.0..=1.0f64,
        t in 0.0..=1.0f64,
    ) {
        let a = ball(ca, ra);
        let b = ball(cb, rb);
        if let BallSet::Ball(d) = pontryagin_diff(&a, &b).unwrap() {
            let back = minkowski_add(&d, &b).unwrap();
            // the round trip reproduces A up to rounding
            prop_assert!((back.radius() - ra).abs() < 1e-12);
            prop_assert!((back.center()[0] - ca.0).abs() < 1e-9 && (back.center()[1] - ca.1).abs() < 1e-9);
            let p = [
                d.center()[0] + s * d.radius() * dir.cos() + t * rb * (dir + 1.0).cos() + cb.0,
                d.center()[1] + s * d.radius() * dir.sin() + t * rb * (dir + 1.0).sin() + cb.1,
            ];
            prop_assert!(a.contains(&p, 1e-9));
        } else {
            prop_assert!(rb > ra);
        }
    }

    #[test]
    fn sum_radius_is_additive(ra in 0.0..10.0f64, rb in 0.0..10.0f64) {
        let s = minkowski_add(&ball((1.0, -2.0), ra), &ball((0.5, 0.5), rb)).unwrap();
        prop_assert_eq!(s.radius(), ra + rb);
        prop_assert_eq!(s.center().as_slice(), &[1.5, -1.5]);
    }

    #[test]
    fn three_ball_identity(r in prop::array::uniform3(0.0..5.0f64)) {
        let mut r = r;
        r.sort_by(|x, y| y.total_cmp(x));
        let s: Vec<Ball> = r.iter().map(|ri| Ball::origin(3, *ri).unwrap()).collect();
        let left = minkowski_add(
            pontryagin_diff(&s[0], &s[1]).unwrap().ball().unwrap(),
            pontryagin_diff(&s[1], &s[2]).unwrap().ball().unwrap(),
        ).unwrap();
        let right = pontryagin_diff(
            &minkowski_add(&s[0], &s[1]).unwrap(),
            &minkowski_add(&s[1], &s[2]).unwrap(),
        ).unwrap();
        let right = right.ball().unwrap();
        prop_assert!((left.radius() - right.radius()).abs() <= 1e-12);
        prop_assert!((left.center() - right.center()).amax() <= 1e-12);
    }

    #[test]
    fn tube_is_nondecreasing_and_dominates_linear_growth(
        w in 0.0..1.0f64,
        l in 0.0..20.0f64,
        t1 in 0.0..1.0f64,
        dt in 0.0..1.0f64,
    ) {
        let p = TubeProfile::new(w, l).unwrap();
        let r1 = tube_radius(&p, t1).unwrap();
        let r2 = tube_radius(&p, t1 + dt).unwrap();
        prop_assert!(r2 >= r1);
        prop_assert!(r1 >= w * t1 * (1.0 - 1e-12));
    }
}

#[test]
fn tube_of_reference_constants() {
    let p = TubeProfile::new(0.1, 8.5883).unwrap();
    assert_eq!(tube_radius(&p, 0.0).unwrap(), 0.0);
    // (0.1 / 8.5883)(e^{0.85883} − 1)
    let expected = 0.1 / 8.5883 * (0.85883f64.exp() - 1.0);
    assert!((tube_radius(&p, 0.1).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn empty_difference_when_subtrahend_is_wider() {
    assert!(pontryagin_diff(&ball((0.0, 0.0), 1.0), &ball((0.0, 0.0), 1.5)).unwrap().is_empty());
}
