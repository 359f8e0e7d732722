// scratch diagnostic: recon quality and transform probes
use feed_core::data::*;
use feed_core::disentangle::*;
use feed_core::meta::*;
use feed_core::transform::*;
use rand::SeedableRng;

fn probe_accuracy(examples: &[Example], seed: u64) -> f64 {
    let n = examples.len();
    let (train, test) = examples.split_at(n * 4 / 5);
    let ds = DomainDataset::new("probe".into(), train[0].x.len(), train.to_vec()).unwrap();
    let mut clf = ClassifierParams::new(train[0].x.len(), 16, seed);
    let hp = ErmHyper { steps: 300, batch: 64, lr: 3e-3, snapshot_every: 0, seed };
    let duals = DualState::new(0.0, 0.0, 0.05, 0.05, 0.0).unwrap();
    train_erm(&mut clf, &[ds], &hp, false, &duals, FairnessVariant::Signed).unwrap();
    accuracy(&clf, test).unwrap()
}

fn trial(label: &str, dims: LatentDims, arch: &Stage1Arch, hp: &Stage1Hyper) {
    let spec = SynthSpec::default_demo();
    let data = generate_synthetic(&spec, 2000, 1).unwrap();
    let (norm, applied, _) = normalize_features(&data[..2], &data[2..]).unwrap();
    let mut model = DisentangleModel::new(dims, arch, 42);
    let hist = train_disentangler(&mut model, &norm, hp).unwrap();
    let held = &applied[0];
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let aug = augment_batch(&model, &held.examples, &mut rng).unwrap();
    let content: Vec<Example> = aug.iter().map(|t| Example::new(t.x.clone(), t.z, t.y)).collect();
    let leak: Vec<Example> = aug.iter().zip(&held.examples)
        .map(|(t, o)| Example::new(t.x.clone(), o.z, if o.z == 1 {1} else {0})).collect();
    let planted: Vec<Example> = aug.iter()
        .map(|t| Example::new(t.x.clone(), t.z, if t.z == 1 {1} else {0})).collect();
    println!("{label}: feat={:.2} | y(x')={:.3} zleak={:.3} z'={:.3}",
        hist.last().unwrap().recon.feature,
        probe_accuracy(&content, 4), probe_accuracy(&leak, 2), probe_accuracy(&planted, 3));
}

fn main() {
    let d = LatentDims { feature: 20, semantic: 12, content: 8, style: 4, sensitive: 4 };
    let base = Stage1Hyper { beta_sensitive: 20.0, steps: 2500, lr_model: 2e-3, lr_disc: 2e-3, beta_adversarial: 0.02, seed: 9, ..Default::default() };
    let lin = Stage1Arch { decoder_hidden: vec![], encoder_hidden: vec![], ..Default::default() };
    trial("linear 2500    ", d, &lin, &base);
    trial("mlp 2500       ", d, &Stage1Arch::default(), &base);
    let short = Stage1Hyper { steps: 800, ..base.clone() };
    trial("linear 800     ", d, &lin, &short);
}
