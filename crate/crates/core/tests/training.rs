use vqknet::config::RunConfig;
use vqknet::data_io::{generate_synthetic, SyntheticSpec};
use vqknet::losses::LabelVector;
use vqknet::model::{forward, ModelConfig};
use vqknet::trainer::{adam_update, AdamConfig, Checkpoint, TrainConfig, Trainer};

// Trajectories of x ← x − lr·Adam(∇ Σx²) from x = (1.5, −0.7), lr 0.1,
// produced by torch.optim.Adam / torch.optim.AdamW in float64.
const ADAM_PLAIN: [[f64; 2]; 5] = [
    [1.4000000003333333, -0.6000000007142856],
    [1.3002390622922801, -0.5006944197516024],
    [1.2009028705180997, -0.40274348194213877],
    [1.1021989364677947, -0.3070016552080005],
    [1.0043581694516794, -0.21455164228255624],
];
const ADAM_L2_01: [[f64; 2]; 5] = [
    [1.4000000003174604, -0.600000000680272],
    [1.3002390622600846, -0.5006944196816794],
    [1.2009028704691824, -0.4027434818348986],
    [1.1021989364018254, -0.3070016550629322],
    [1.004358169368419, -0.21455164210060224],
];
const ADAMW_01: [[f64; 2]; 5] = [
    [1.3850000003333331, -0.5930000007142857],
    [1.271436997395958, -0.4878406380747989],
    [1.1595201600808838, -0.3852381941889064],
    [1.0494831665363598, -0.2861171966181292],
    [0.9415856399836011, -0.19164064618373472],
];

fn run_adam(cfg: AdamConfig) -> Vec<[f64; 2]> {
    let mut x = [1.5, -0.7];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    (1..=5)
        .map(|step| {
            let g = [2.0 * x[0], 2.0 * x[1]];
            adam_update(&mut x, &g, &mut m, &mut v, step, &cfg);
            x
        })
        .collect()
}

#[test]
fn adam_matches_reference_trajectories() {
    let cases = [
        (AdamConfig::new(0.1, 0.0), ADAM_PLAIN),
        (AdamConfig::new(0.1, 0.1), ADAM_L2_01),
        (
            AdamConfig {
                decoupled: true,
                ..AdamConfig::new(0.1, 0.1)
            },
            ADAMW_01,
        ),
    ];
    for (cfg, want) in cases {
        for (got, want) in run_adam(cfg).iter().zip(want) {
            for i in 0..2 {
                assert!((got[i] - want[i]).abs() < 1e-12, "{cfg:?}: {got:?} vs {want:?}");
            }
        }
    }
}

fn small_setup(seed: u64) -> (ModelConfig, TrainConfig, vqknet::data_io::SyntheticDataset) {
    let spec = SyntheticSpec {
        train_videos: 12,
        test_videos: 4,
        min_segments: 20,
        max_segments: 28,
        feature_dim: 8,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, seed).unwrap();
    let model = ModelConfig {
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
        hidden_dim: 8,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 4,
        min_shared_pairs: 1,
        segments: 16,
        learning_rate: 1e-5,
        seed,
        ..TrainConfig::default()
    };
    (model, train, data)
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let (model, train, data) = small_setup(3);
    let mut trainer = Trainer::new(model, train, &data.train_videos(), &data.classes).unwrap();
    let batches = trainer.next_epoch_batches().unwrap();
    let (feats, labels) = &batches[0];
    let refs: Vec<&LabelVector> = labels.iter().collect();
    let before = trainer.step_on(feats, &refs).unwrap().total;
    let after = trainer.batch_loss(feats, &refs).unwrap().total;
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bit_for_bit() {
    let (model, train, data) = small_setup(4);
    let videos = data.train_videos();
    let mut trainer = Trainer::new(model, train, &videos, &data.classes).unwrap();
    trainer.run_epoch(None).unwrap();
    let ckpt = trainer.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vqkc");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
    for v in data.test_videos() {
        let a = forward(&v.features, &ckpt.params, &ckpt.model, ckpt.train.mode).unwrap();
        let b = forward(&v.features, &loaded.params, &loaded.model, loaded.train.mode).unwrap();
        for (x, y) in [(&a.tcam, &b.tcam), (&a.s, &b.s), (&a.tcam_suppressed, &b.tcam_suppressed)] {
            let same = x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same);
        }
    }
}

#[test]
fn checkpoint_rejects_mismatched_shapes_and_trailing_bytes() {
    let (model, train, data) = small_setup(5);
    let trainer = Trainer::new(model, train, &data.train_videos(), &data.classes).unwrap();
    let mut bytes = trainer.checkpoint().to_bytes();
    bytes.push(0);
    assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("trailing"));

    let mut other = trainer.checkpoint();
    other.model.hidden_dim += 1;
    let err = Checkpoint::from_bytes(&other.to_bytes()).unwrap_err().to_string();
    assert!(err.contains("expected"), "{err}");
}

#[test]
fn nonfinite_features_are_reported_by_term() {
    let (model, train, data) = small_setup(6);
    let trainer = Trainer::new(model, train, &data.train_videos(), &data.classes).unwrap();
    let mut f = data.train[0].video.features.clone();
    f.data_mut()[0] = f64::NAN;
    let label = data.train[0].video.label.clone().unwrap();
    let err = trainer.batch_loss(&[f], &[&label]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-finite loss in term"), "{msg}");
}

#[test]
fn synthetic_run_config_is_consistent() {
    let cfg = RunConfig::synthetic();
    cfg.validate().unwrap();
    assert_eq!(cfg.model.num_classes, cfg.synth.num_classes);
    assert_eq!(cfg.model.feature_dim, cfg.synth.feature_dim);
}
