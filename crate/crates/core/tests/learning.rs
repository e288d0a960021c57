use gt360_core::data::synthetic::{eye_contact_dataset, gaze_dataset};
use gt360_core::data::SampleLabel;
use gt360_core::eval::ec_prf;
use gt360_core::eyecontact::{EcConfig, EcModel, EcTrainOptions};
use gt360_core::gazenet::{GazeModel, GazeNetConfig};
use gt360_core::train::{run_stage, ImageSource, TrainConfig, TrainItem};

#[test]
fn eye_contact_stand_in_beats_majority_baseline() {
    let model_cfg = EcConfig::default();
    let mut model = EcModel::new(model_cfg, 1).unwrap();
    let prep = |n, seed| -> Vec<_> {
        eye_contact_dataset(n, 160, 0.4, seed)
            .iter()
            .map(|s| (model_preprocess(&model, s), s.label == SampleLabel::EC))
            .collect()
    };
    let train = prep(240, 1);
    let test = prep(80, 2);
    let history = model.train(
        &train,
        &EcTrainOptions {
            epochs: 12,
            ..Default::default()
        },
    );
    assert!(history.last().unwrap() < &history[0], "{history:?}");

    let truths: Vec<bool> = test.iter().map(|t| t.1).collect();
    let preds: Vec<bool> = test
        .iter()
        .map(|(x, _)| model.predict_preprocessed(x) >= 0.5)
        .collect();
    let f1 = ec_prf(&preds, &truths).unwrap().f1;
    // predicting the majority class (no eye contact) gives F1 = 0 for the EC class;
    // predicting EC everywhere gives 2p/(1+p) with p the EC share
    let p = truths.iter().filter(|&&t| t).count() as f64 / truths.len() as f64;
    let baseline = 2.0 * p / (1.0 + p);
    assert!(f1 > baseline + 0.1, "F1 {f1} vs all-EC baseline {baseline}");
}

fn model_preprocess(
    model: &EcModel,
    s: &gt360_core::data::synthetic::SyntheticScene,
) -> gt360_core::nn::Mat {
    model.preprocess(&s.image, &s.head).unwrap()
}

#[test]
fn augmented_pretraining_reduces_heatmap_loss() {
    let mut model = GazeModel::new(GazeNetConfig::desk(), 2).unwrap();
    let items: Vec<TrainItem> = gaze_dataset(48, 224, 1.0, 3)
        .into_iter()
        .enumerate()
        .map(|(i, s)| TrainItem {
            sample: s.to_sample(format!("s{i}.png"), "synthetic"),
            image: ImageSource::Memory(s.image),
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        lr: 3e-3,
        ..TrainConfig::pretrain()
    };
    assert!(cfg.augment);
    let report = run_stage(&mut model, &items, &cfg, 4, None).unwrap();
    let first = report.epochs[0].loss_hm;
    let last = report.epochs.last().unwrap().loss_hm;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(report.steps, 6 * 6);
}
