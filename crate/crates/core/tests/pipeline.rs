use ctrlgen::config::ExperimentConfig;
use ctrlgen::eval::{evaluate, EvalSettings};
use ctrlgen::formats;
use ctrlgen::model::prior_sample;
use ctrlgen::synth::{generate_dataset, measure_properties, Origin};
use ctrlgen::trainer::run_training;
use ctrlgen::*;

fn tiny_arch() -> Architecture {
    Architecture { encoder_hidden: vec![24], decoder_hidden: vec![24], ..Architecture::default() }
}

#[test]
fn dataset_files_round_trip_with_exact_labels() {
    let res = Resolution::default();
    let split = generate_dataset(90, &RangeSpec::desk(), res, 7, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.cgds");
    formats::save_dataset(&path, &split.train, res).unwrap();
    let (r, back) = formats::load_dataset(&path).unwrap();
    assert_eq!(r, res);
    assert_eq!(back, split.train);
    for s in &back {
        assert_eq!(s.origin, Origin::Original);
        assert_eq!(s.label, measure_properties(&s.pixels, res));
    }
}

#[test]
fn checkpoint_reproduces_generations() {
    let res = Resolution::default();
    let split = generate_dataset(60, &RangeSpec::desk(), res, 1, 16).unwrap();
    let mut pool = ReplayDataset::new(split.train, res, 4).unwrap();
    let cfg = TrainConfig { iterations: 6, seed: 1, ..TrainConfig::default() };
    let model = run_training(&mut pool, tiny_arch(), &cfg).unwrap().model;
    let back = formats::decode_checkpoint(&formats::encode_checkpoint(&model)).unwrap();
    let ys = vec![PropertyVector::new(vec![0.1, 0.4, 0.6]); 3];
    let zs: Vec<Vec<f64>> = (0..3).map(|i| prior_sample(6, i).unwrap()).collect();
    assert_eq!(model.generate_batch(&ys, &zs).unwrap(), back.generate_batch(&ys, &zs).unwrap());
}

#[test]
fn config_drives_a_short_experiment() {
    let cfg: ExperimentConfig = "\
[dataset]
n = 80
seed = 3
[model]
kind = pcvae
encoder_hidden = 16
decoder_hidden = 16
[training]
iterations = 4
grid_y = 2
grid_z = 2
"
    .parse()
    .unwrap();
    assert_eq!(cfg.training.seed, 3);
    let d = &cfg.dataset;
    let split = generate_dataset(d.n, &d.ranges, d.resolution, cfg.seed, d.split_ratio).unwrap();
    let mut pool = ReplayDataset::new(split.train, d.resolution, cfg.training.capacity_factor).unwrap();
    let out = run_training(&mut pool, cfg.model.clone(), &cfg.training).unwrap();
    assert_eq!(out.log.iterations.len(), 4);
    assert_eq!(pool.generated_len(), 4 * 2 * 2);
    pool.verify_labels().unwrap();

    let s = EvalSettings { n_targets: 10, n_z: 2, grid_y: 3, grid_z: 3, sigma_p: 0.1 };
    let report = evaluate(&out.model, &split.test, &d.ranges, TargetMode::Ood, &s, cfg.seed).unwrap();
    assert_eq!(report.mse_ood.len(), 3);
    assert!(report.mse_id.iter().chain(&report.mse_ood).all(|v| v.is_finite() && *v >= 0.0));
    assert!(report.disetg1 >= 0.0 && report.disetg2 >= 0.0 && report.recon_error >= 0.0);
}
