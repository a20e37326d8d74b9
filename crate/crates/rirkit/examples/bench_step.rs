fn main() {
    use rirkit::init::InitKind;
    use rirkit::model::{build_network, spec_by_name, ModelKind};
    use rirkit::ops::{softmax_cross_entropy, Mode};
    use rirkit::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let spec = spec_by_name("tiny", 10).unwrap();
    let mut model: rirkit::model::Model<f32> =
        build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
    let batch = Tensor::from_vec(
        &[100, 3, 32, 32],
        (0..100 * 3 * 1024).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();

    let t0 = std::time::Instant::now();
    for _ in 0..5 {
        model.forward(&batch, Mode::Eval).unwrap();
    }
    println!("forward eval: {:.1} ms/batch", t0.elapsed().as_millis() as f64 / 5.0);

    let t0 = std::time::Instant::now();
    for _ in 0..5 {
        let (logits, trace) = model.forward_traced(&batch, Mode::Train).unwrap();
        let (_, gl) = softmax_cross_entropy(&logits, &labels).unwrap();
        model.backward(&trace, &gl).unwrap();
    }
    println!("fwd+bwd train: {:.1} ms/batch", t0.elapsed().as_millis() as f64 / 5.0);
}
