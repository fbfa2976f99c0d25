use fsid_core::layers::Parameter;
use fsid_core::optim::{lr_at, Adam, AdamConfig};
use fsid_core::Tensor;
use proptest::prelude::*;

fn param(v: f64) -> Parameter {
    Parameter {
        name: "theta".into(),
        tensor: Tensor::parameter(&[1], vec![v]).unwrap(),
    }
}

/// Scalar Adam written out from the textbook recurrence.
fn reference_quadratic(theta0: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for t in 1..=steps {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        theta -= lr * mh / (vh.sqrt() + eps);
    }
    theta
}

fn run_quadratic(theta0: f64, lr: f64, steps: usize) -> f64 {
    let p = [param(theta0)];
    let mut opt = Adam::new(&p, AdamConfig::default());
    for _ in 0..steps {
        p[0].tensor.mul(&p[0].tensor).unwrap().sum().backward().unwrap();
        opt.step(&p, lr).unwrap();
        p[0].tensor.zero_grad();
    }
    assert_eq!(opt.steps(), steps as u64);
    p[0].tensor.item()
}

#[test]
fn quadratic_converges_like_the_reference() {
    let got = run_quadratic(1.0, 0.1, 200);
    assert!(got.abs() < 0.05, "theta = {got}");
    assert!((got - reference_quadratic(1.0, 0.1, 200)).abs() < 1e-12);
}

#[test]
fn first_step_moves_by_about_lr() {
    let p = [param(1.0)];
    p[0].tensor.mul(&Tensor::scalar(0.5).reshape(&[1]).unwrap()).unwrap().sum().backward().unwrap();
    let mut opt = Adam::new(&p, AdamConfig::default());
    opt.step(&p, 2e-4).unwrap();
    assert!((1.0 - p[0].tensor.item() - 2e-4).abs() < 1e-10);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let p = [param(0.7)];
    p[0].tensor.scale(0.0).sum().backward().unwrap();
    let mut opt = Adam::new(&p, AdamConfig::default());
    opt.step(&p, 0.1).unwrap();
    assert_eq!(p[0].tensor.item(), 0.7);
}

#[test]
fn missing_gradient_is_an_error_and_counts_no_step() {
    let p = [param(0.7)];
    let mut opt = Adam::new(&p, AdamConfig::default());
    assert!(opt.step(&p, 0.1).is_err());
    assert_eq!(opt.steps(), 0);
    assert_eq!(p[0].tensor.item(), 0.7);
}

#[test]
fn schedule_examples() {
    assert_eq!(lr_at(0.0, 2e-4, 100.0), 2e-4);
    assert!((lr_at(50.0, 2e-4, 100.0) - 1.5e-4).abs() < 1e-18);
    assert!((lr_at(100.0, 2e-4, 100.0) - 1e-4).abs() < 1e-18);
}

proptest! {
    #[test]
    fn schedule_is_non_increasing(a in 0.0f64..1000.0, d in 0.0f64..100.0) {
        prop_assert!(lr_at(a + d, 2e-4, 100.0) <= lr_at(a, 2e-4, 100.0));
    }

    #[test]
    fn schedule_halves_at_each_boundary(k in 0u32..10) {
        let got = lr_at(100.0 * k as f64, 2e-4, 100.0);
        prop_assert!((got - 2e-4 / 2f64.powi(k as i32)).abs() < 1e-18);
        // approaching the boundary from inside the previous window lands on the same value
        if k > 0 {
            let before = lr_at(100.0 * k as f64 - 1e-9, 2e-4, 100.0);
            prop_assert!((before - got).abs() < 1e-10 * 2e-4);
        }
    }

    #[test]
    fn schedule_is_linear_within_a_window(k in 0u32..5, a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let base = 100.0 * k as f64;
        let mid = lr_at(base + (a + b) / 2.0, 1.0, 100.0);
        let avg = (lr_at(base + a, 1.0, 100.0) + lr_at(base + b, 1.0, 100.0)) / 2.0;
        prop_assert!((mid - avg).abs() < 1e-12);
    }
}
