use cmtc_tensor::{Adam, AdamConfig, ParamStore64, Tape64, Tensor64};

/// Scalar Adam written out longhand, independent of the tensor optimizer.
fn scalar_adam(x0: f64, steps: usize, lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut traj = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        x -= lr * m_hat / (v_hat.sqrt() + eps);
        traj.push(x);
    }
    traj
}

#[test]
fn trajectory_on_square_matches_scalar_oracle() {
    let lr = 0.05;
    let want = scalar_adam(1.3, 10, lr);

    let mut store = ParamStore64::new();
    let id = store.add("x", Tensor64::scalar(1.3)).unwrap();
    let mut adam = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &store,
    );
    for (step, expected) in want.iter().enumerate() {
        store.zero_grad();
        let mut tape = Tape64::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        store.pull_grads(&tape);
        adam.step(&mut store).unwrap();
        let got = store.value(id).item();
        assert!((got - expected).abs() < 1e-10, "step {step}: {got} vs {expected}");
    }
    assert_eq!(adam.steps(), 10);
}
