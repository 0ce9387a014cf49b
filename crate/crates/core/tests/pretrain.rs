use wbm_core::backbones::MambaConfig;
use wbm_core::pipeline::{prepare, PipelineConfig, Split};
use wbm_core::pretrain::{pretrain, ModelConfig, OptimizerConfig, PretrainConfig, TrainConfig};
use wbm_core::synthgen::{generate_cohort, GeneratorConfig};

#[test]
fn fifty_steps_beat_chance_and_repeat_exactly() {
    let cohort = generate_cohort(&GeneratorConfig {
        n_subjects: 60,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let data = prepare(&cohort.measurements, &PipelineConfig::default(), 2).unwrap();
    let train = data.normalized_in(Split::Train);
    let n = 16;
    let cfg = PretrainConfig {
        model: ModelConfig {
            dim: 16,
            layers: 2,
            heads: 4,
            mamba: MambaConfig {
                head_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        },
        optimizer: OptimizerConfig {
            warmup_steps: 5,
            ..Default::default()
        },
        train: TrainConfig {
            batch_size: n,
            epochs: 100,
            max_steps: Some(50),
            ..Default::default()
        },
        ..Default::default()
    };
    let a = pretrain(&train, &cfg, 4, None).unwrap();
    assert_eq!(a.log.len(), 50);
    let tail: f64 = a.log[45..].iter().map(|r| r.infonce).sum::<f64>() / 5.0;
    let chance = (n as f64).ln();
    assert!(tail < chance, "final InfoNCE {tail} vs chance {chance}");
    assert!(a.log.iter().all(|r| r.total.is_finite() && r.lr > 0.0));

    let b = pretrain(&train, &cfg, 4, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
}
