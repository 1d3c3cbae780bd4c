use candle_core::DType;

use mimicforge_core::synthetic::natural_image;
use mimicforge_diffcore::conditions::{TrainConfig, TrainingSample};
use mimicforge_diffcore::schedule::{NoiseSchedule, ScheduleConfig};
use mimicforge_diffcore::train::Trainer;
use mimicforge_diffcore::unet::{Model, ModelConfig};
use mimicforge_core::ImageBuf;

const STEPS: u64 = 10_000;

#[test]
fn dropout_rates_over_prepared_steps() {
    let model = Model::new(
        ModelConfig {
            widths: [8, 8, 8],
            time_dim: 4,
        },
        DType::F32,
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let tr = Trainer::new(model, cfg, NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()).unwrap();
    let samples = vec![TrainingSample {
        source: natural_image(8, 8, 1),
        mask: ImageBuf::filled(8, 8, 1, 1.0),
        reference: natural_image(8, 8, 2),
        depth: Some(natural_image(8, 8, 3).to_gray()),
    }];
    let (mut refs, mut depths) = (0usize, 0usize);
    for step in 0..STEPS {
        let prep = tr.prepare_step(step, &samples).unwrap();
        refs += prep.plan.ref_dropped as usize;
        depths += prep.depth_dropped();
        assert_eq!(prep.references.is_empty(), prep.plan.ref_dropped);
    }
    let ref_rate = refs as f64 / STEPS as f64;
    let depth_rate = depths as f64 / STEPS as f64;
    assert!((ref_rate - 0.1).abs() <= 0.01, "reference dropout {ref_rate}");
    assert!((depth_rate - 0.5).abs() <= 0.02, "depth dropout {depth_rate}");
}
