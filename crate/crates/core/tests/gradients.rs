mod common;

use common::{central_difference, image, net, relative_error, ARCHS};
use da_core::attacks::{Ensemble, GradientModel};
use da_core::net::cross_entropy;

#[test]
fn input_gradient_matches_finite_differences() {
    for t in 0..20u64 {
        let arch = ARCHS[t as usize % ARCHS.len()];
        let (c, hw, classes) = (1 + (t as usize % 2), 4 + (t as usize % 3), 2 + (t as usize % 4));
        let m = net(arch, c, hw, classes, 100 + t);
        let x = image(&[c, hw, hw], t);
        let label = t as usize % classes;
        let (loss, g) = m.loss_and_input_gradient(&x, label).unwrap();
        assert!((loss - m.loss(x.data(), label)).abs() < 1e-12);
        let fd = central_difference(x.data(), 1e-5, |p| m.loss(p, label));
        let err = relative_error(g.data(), &fd);
        assert!(err < 1e-5, "{arch} case {t}: relative error {err:e}");
    }
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    for (t, arch) in ARCHS.iter().enumerate() {
        let mut m = net(arch, 1, 5, 3, t as u64);
        let x = image(&[1, 5, 5], 40 + t as u64);
        let label = t % 3;
        let mut grads = m.zero_gradients();
        m.accumulate_parameter_gradient(x.data(), label, &mut grads);
        let n_params = m.parameters().len();
        for p in 0..n_params {
            let theta = m.parameters()[p].data().to_vec();
            let mut fd = Vec::with_capacity(theta.len());
            for i in 0..theta.len() {
                let mut at = |v: f64| {
                    m.parameters_mut()[p].data_mut()[i] = v;
                    m.loss(x.data(), label)
                };
                let up = at(theta[i] + 1e-5);
                let down = at(theta[i] - 1e-5);
                at(theta[i]);
                fd.push((up - down) / 2e-5);
            }
            let err = relative_error(grads[p].data(), &fd);
            assert!(err < 1e-5, "{arch} parameter {p}: relative error {err:e}");
        }
    }
}

#[test]
fn ensemble_gradient_matches_finite_differences() {
    let members = [net("mlp:5", 1, 4, 3, 1), net("cnn:2,4", 1, 4, 3, 2), net("linear", 1, 4, 3, 3)];
    let e = Ensemble::new(members.iter().collect(), vec![0.5, 0.3, 0.2]).unwrap();
    let x = image(&[1, 4, 4], 8);
    let (_, g) = e.loss_and_gradient(x.data(), 2);
    let fd = central_difference(x.data(), 1e-5, |p| cross_entropy(&e.logits(p), 2));
    assert!(relative_error(&g, &fd) < 1e-5);
}
