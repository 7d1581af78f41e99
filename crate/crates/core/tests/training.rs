use sharp_mil::bagsim::{self, GenConfig, Split};
use sharp_mil::train::{self, Aggregator, Hyper, ModelConfig, SmilModel};

#[test]
fn attention_ranks_fakes_above_reals() {
    let cfg = GenConfig::default();
    let tr = bagsim::generate_split(&cfg, Split::Train).unwrap();
    let te = bagsim::generate_split(&cfg, Split::Test).unwrap();
    let hp = Hyper::default();
    let model = SmilModel::init(
        ModelConfig::new(cfg.d, vec![1, 2, 3], Aggregator::SmilWeighted),
        hp.seed,
    )
    .unwrap();
    let (model, history) = train::train(model, &tr.train_view(), None, &hp).unwrap();
    assert_eq!(history.len(), hp.epochs);
    assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
    let m = train::evaluate(&model, &te).unwrap();
    let att = m.attention_auc_pos.unwrap();
    assert!(att > 0.5, "attention AUC {att}");
    assert!(m.bag_accuracy.unwrap() > 0.9, "{m:?}");
}

#[test]
fn training_ignores_instance_labels() {
    let cfg = GenConfig {
        n_bags: 60,
        m: 8,
        d: 4,
        fake_hi: 7,
        ..GenConfig::default()
    };
    let ds = bagsim::generate(&cfg).unwrap();
    let mut scrambled = ds.clone();
    for b in &mut scrambled.bags {
        b.instance_labels.reverse();
    }
    let hp = Hyper {
        epochs: 2,
        batch: 8,
        frames_per_step: 5,
        ..Hyper::default()
    };
    let init =
        || SmilModel::init(ModelConfig::new(4, vec![1, 2], Aggregator::SmilUnit), 3).unwrap();
    let (a, ha) = train::train(init(), &ds.train_view(), None, &hp).unwrap();
    let (b, hb) = train::train(init(), &scrambled.train_view(), None, &hp).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn saved_model_evaluates_identically() {
    let cfg = GenConfig {
        n_bags: 50,
        n_test: 30,
        m: 8,
        d: 4,
        fake_hi: 7,
        ..GenConfig::default()
    };
    let tr = bagsim::generate(&cfg).unwrap();
    let te = bagsim::generate_split(&cfg, Split::Test).unwrap();
    let hp = Hyper {
        epochs: 2,
        batch: 10,
        frames_per_step: 5,
        lr: 1e-3,
        ..Hyper::default()
    };
    let model = SmilModel::init(ModelConfig::new(4, vec![1, 3], Aggregator::Max), 1).unwrap();
    let (model, _) = train::train(model, &tr.train_view(), None, &hp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    train::save_model(&model, &path).unwrap();
    let back = train::load_model(&path).unwrap();
    assert_eq!(
        train::evaluate(&back, &te).unwrap(),
        train::evaluate(&model, &te).unwrap()
    );
    std::fs::write(&path, &std::fs::read(&path).unwrap()[..100]).unwrap();
    assert!(train::load_model(&path).is_err());
}
