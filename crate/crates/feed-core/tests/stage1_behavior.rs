//! Behavioral checks of the trained stage-1 model: where the sensitive
//! signal lands, content round-trips through the transform, boundary cases
//! of the adversarial terms, and divergence reporting.

use feed_core::data::{generate_synthetic, normalize_features, SynthSpec};
use feed_core::disentangle::{
    adversarial_losses, encode, predict_sensitive, train_disentangler, DisentangleModel,
    LatentDims, Stage1Arch, Stage1Error, Stage1Hyper,
};
use feed_core::transform::transform_example;
use feed_core::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn dims() -> LatentDims {
    LatentDims {
        feature: 20,
        semantic: 12,
        content: 8,
        style: 4,
        sensitive: 4,
    }
}

fn trained_and_untrained() -> (DisentangleModel, DisentangleModel, Vec<feed_core::data::Example>) {
    let spec = SynthSpec::default_demo();
    let data = generate_synthetic(&spec, 1500, 7).unwrap();
    let (train, held, _) = normalize_features(&data[..2], &data[2..]).unwrap();
    let untrained = DisentangleModel::new(dims(), &Stage1Arch::default(), 77);
    let mut trained = DisentangleModel::new(dims(), &Stage1Arch::default(), 77);
    let hp = Stage1Hyper {
        seed: 7,
        ..Default::default()
    };
    train_disentangler(&mut trained, &train, &hp).unwrap();
    (trained, untrained, held[0].examples.clone())
}

fn mean_abs_corr(latents: &[Vec<f64>], z: &[f64]) -> f64 {
    let k = latents[0].len();
    let n = latents.len() as f64;
    let mz = z.iter().sum::<f64>() / n;
    let vz: f64 = z.iter().map(|v| (v - mz) * (v - mz)).sum();
    let mut total = 0.0;
    for j in 0..k {
        let col: Vec<f64> = latents.iter().map(|l| l[j]).collect();
        let mc = col.iter().sum::<f64>() / n;
        let vc: f64 = col.iter().map(|v| (v - mc) * (v - mc)).sum();
        let cov: f64 = col.iter().zip(z).map(|(c, zv)| (c - mc) * (zv - mz)).sum();
        if vc > 1e-12 && vz > 1e-12 {
            total += (cov / (vc.sqrt() * vz.sqrt())).abs();
        }
    }
    total / k as f64
}

#[test]
fn sensitive_latent_carries_more_z_than_content() {
    let (trained, _, held) = trained_and_untrained();
    let mut contents = Vec::new();
    let mut sensitives = Vec::new();
    let mut zs = Vec::new();
    for ex in held.iter().take(800) {
        let b = encode(&trained, &ex.x).unwrap();
        contents.push(b.content);
        sensitives.push(b.sensitive);
        zs.push(ex.z as f64);
    }
    let c_corr = mean_abs_corr(&contents, &zs);
    let a_corr = mean_abs_corr(&sensitives, &zs);
    assert!(
        a_corr > c_corr,
        "sensitive |corr| {a_corr:.3} should exceed content |corr| {c_corr:.3}"
    );
}

#[test]
fn transform_content_roundtrip_improves_with_training() {
    let (trained, untrained, held) = trained_and_untrained();
    let drift = |model: &DisentangleModel| -> f64 {
        let mut rng = StdRng::seed_from_u64(5);
        let mut total = 0.0;
        for ex in held.iter().take(200) {
            let before = encode(model, &ex.x).unwrap();
            let t = transform_example(model, ex, &mut rng).unwrap();
            let after = encode(model, &t.x).unwrap();
            total += before
                .content
                .iter()
                .zip(&after.content)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        total / 200.0
    };
    let trained_drift = drift(&trained);
    let untrained_drift = drift(&untrained);
    assert!(
        trained_drift <= untrained_drift,
        "content drift: trained {trained_drift:.4} vs untrained {untrained_drift:.4}"
    );
}

#[test]
fn suppressed_discriminator_contributes_zero_fake_terms() {
    // Push both discriminator output biases far negative: D(anything) clamps
    // to about 1e-7, so each fake term log(1 - D(fake)) is about zero and
    // each real term is log(1e-7).
    let (_, mut model, held) = trained_and_untrained();
    for name in ["disc_inner.b1", "disc_outer.b1"] {
        let mut bias = model.disc_params.get(name).unwrap().detached();
        for v in bias.data_mut() {
            *v = -60.0;
        }
        model.disc_params.insert(name.to_string(), bias);
    }
    let batch = &held[..32];
    let mut rng = StdRng::seed_from_u64(3);
    let (disc_obj, gen_obj) = adversarial_losses(&model, batch, &mut rng, false).unwrap();
    // Four pairs: fake terms ~0, real terms ~ln(1e-7).
    let expected = 4.0 * (1e-7f64).ln();
    assert!(
        (disc_obj - expected).abs() < 1e-3,
        "disc objective {disc_obj} vs {expected}"
    );
    assert!(gen_obj.abs() < 1e-5, "fake-side terms should vanish, got {gen_obj}");
}

#[test]
fn exact_tie_predicts_positive_class() {
    let mut model = DisentangleModel::new(dims(), &Stage1Arch::default(), 3);
    let names: Vec<String> = model
        .model_params
        .names()
        .filter(|n| n.starts_with("sensitive_clf"))
        .cloned()
        .collect();
    for name in names {
        let shape = model.model_params.get(&name).unwrap().shape().to_vec();
        model.model_params.insert(name, Tensor::zeros(shape));
    }
    let (z, p) = predict_sensitive(&model, &[0.3, -0.1, 0.2, 0.5]).unwrap();
    assert_eq!(z, 1);
    assert_eq!(p, 0.5);
}

#[test]
fn divergence_reports_last_good_step() {
    // The sigmoid/softmax clamps and Adam's scale invariance make runaway
    // learning rates self-limiting, so inject non-finite features to hit the
    // abort path deterministically.
    let spec = SynthSpec::default_demo();
    let mut data = generate_synthetic(&spec, 64, 1).unwrap();
    for ex in &mut data[0].examples {
        for v in &mut ex.x {
            *v = f64::INFINITY;
        }
    }
    let mut model = DisentangleModel::new(dims(), &Stage1Arch::default(), 9);
    let hp = Stage1Hyper {
        steps: 5,
        batch: 192,
        seed: 1,
        ..Default::default()
    };
    match train_disentangler(&mut model, &data, &hp) {
        Err(Stage1Error::Diverged { step, last_good }) => {
            assert_eq!(step, 0);
            assert_eq!(last_good, None);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
