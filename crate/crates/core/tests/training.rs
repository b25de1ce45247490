use da_core::net::{accuracy, architecture, load_model, pgd_accuracy, save_model, train, RingsSpec, TrainConfig, TrainingMode};

#[test]
fn adversarial_training_buys_robustness() {
    let data = RingsSpec { n: 800, classes: 4, hw: 10, noise: 0.05, contrast: 0.4, jitter: 0.15 }.generate(4).unwrap();
    let (tr, te) = data.split_at(600).unwrap();
    let specs = architecture("mlp:32", data.image_shape(), 4).unwrap();
    let hyper = TrainConfig { lr: 0.05, epochs: 20, batch: 16, seed: 2, warmup: 5 };
    let eps = 16.0 / 255.0;
    let normal = train(&specs, &tr, &hyper, TrainingMode::Normal).unwrap();
    let robust = train(&specs, &tr, &hyper, TrainingMode::Adversarial { epsilon: eps, steps: 5 }).unwrap();
    let (an, ar) = (accuracy(&normal, &te), accuracy(&robust, &te));
    let (pn, pr) = (pgd_accuracy(&normal, &te, eps, 10, 0), pgd_accuracy(&robust, &te, eps, 10, 0));
    eprintln!("clean {an} {ar}, pgd {pn} {pr}");
    assert!(an > 0.9 && ar > 0.6);
    assert!(pr > pn + 0.2, "pgd accuracy normal {pn}, robust {pr}");
}

#[test]
fn training_is_deterministic_and_files_round_trip() {
    let data = RingsSpec { n: 120, classes: 3, hw: 6, noise: 0.05, contrast: 1.0, jitter: 0.08 }.generate(1).unwrap();
    let specs = architecture("cnn:2+2,8", data.image_shape(), 3).unwrap();
    let hyper = TrainConfig { lr: 0.05, epochs: 3, batch: 8, seed: 9, warmup: 0 };
    let a = train(&specs, &data, &hyper, TrainingMode::Normal).unwrap();
    let b = train(&specs, &data, &hyper, TrainingMode::Normal).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&a, &dir.path().join("a.dakm")).unwrap();
    save_model(&b, &dir.path().join("b.dakm")).unwrap();
    let bytes = |n| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(bytes("a.dakm"), bytes("b.dakm"));
    let back = load_model(&dir.path().join("a.dakm")).unwrap();
    for i in 0..data.len() {
        assert_eq!(back.logits(data.pixels(i)), a.logits(data.pixels(i)));
    }
}
