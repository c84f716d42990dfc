use std::fs;
use std::path::Path;

use motionseg::dataset::{generate_split, Dataset, Split};
use motionseg::eval::evaluate;
use motionseg::model::{input_tensors, Model};
use motionseg::synth::{SceneConfig, ShapeKind};
use motionseg::train::{prepare_dataset, train_with, TrainConfig, TrainState, LOG_FILE};
use motionseg::visualize::{activations, contrast, foreground_cells};

fn train_on(config: &TrainConfig, data: &Dataset, out: &Path) -> Model {
    let samples = prepare_dataset(data, &config.model, &config.supervision).unwrap();
    let (state, _) = train_with(config, &samples, TrainState::new(config).unwrap(), out, |_| {}).unwrap();
    state.model
}

fn logged_totals(out: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(out.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap() as usize, v["total"].as_f64().unwrap())
        })
        .collect()
}

/// One default-config run on 50 camouflage samples backs three checks:
/// the loss falls, the training split is segmented, and the flow stream
/// separates camouflaged objects better than the appearance stream.
#[test]
fn default_config_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("train");
    generate_split(&SceneConfig::default(), Split::Train, 50, &data_dir).unwrap();
    let data = Dataset::open(&data_dir).unwrap();
    let config = TrainConfig {
        iterations: 500,
        checkpoint_interval: 500,
        log_interval: 50,
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let model = train_on(&config, &data, &out);

    let totals = logged_totals(&out);
    let (first, last) = (totals[0], *totals.last().unwrap());
    assert_eq!((first.0, last.0), (1, 500));
    assert!(last.1 < first.1, "loss did not fall: {totals:?}");

    let result = evaluate(&model, &data).unwrap();
    assert!(result.mask.ap50 > 0.5, "{result}");

    let camouflaged: Vec<usize> = (0..data.len()).filter(|&i| data.annotations_of(i).all(|a| a.delta_e < 5.0)).collect();
    assert!(!camouflaged.is_empty());
    let (mut flow_wins, mut total) = (0, 0);
    for &i in camouflaged.iter().take(10) {
        let sample = data.load(i).unwrap();
        let acts = activations(&model, &sample).unwrap();
        let fg = foreground_cells(&sample, acts.grid.0, acts.grid.1);
        let (ci, cf) = (contrast(&acts.image, &fg), contrast(&acts.flow, &fg));
        flow_wins += usize::from(cf > ci);
        total += 1;
    }
    assert_eq!(flow_wins, total, "flow heatmap contrast higher on only {flow_wins}/{total} camouflaged samples");
}

#[test]
fn single_square_converges_to_one_detection() {
    let scene = SceneConfig {
        min_instances: 1,
        max_instances: 1,
        shapes: vec![ShapeKind::Rectangle],
        min_size: 20,
        max_size: 20,
        camouflage: false,
        ..SceneConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("square");
    generate_split(&scene, Split::Train, 1, &data_dir).unwrap();
    let data = Dataset::open(&data_dir).unwrap();
    let config = TrainConfig {
        iterations: 300,
        batch_size: 1,
        checkpoint_interval: 300,
        ..TrainConfig::default()
    };
    let model = train_on(&config, &data, &dir.path().join("run"));
    let sample = data.load(0).unwrap();
    let gt = sample.instances[0].bbox;
    assert_eq!((gt.width(), gt.height()), (20.0, 20.0));
    let (image, flow) = input_tensors(&sample.frame_t, &sample.flow, model.config.flow_input);
    let dets = model.predict(&image, &flow).unwrap();
    assert_eq!(dets.len(), 1, "scores {:?}", dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let iou = dets[0].bbox.iou(&gt);
    assert!(iou > 0.8, "box IoU {iou}");
}
