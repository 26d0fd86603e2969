//! Statistical properties of the generator as seen by the default network.

use incft::config::RunConfig;
use incft::data::{generate_corpus, GeneratorConfig};
use incft::experiment::{initial_phase, make_inter_plan, unit_images, ExperimentConfig, SplitMode};
use incft::optim::accuracy;

#[test]
fn one_round_is_enough_to_classify_another_round() {
    let corpus = generate_corpus(&GeneratorConfig {
        speckle_sigma: 0.1,
        session_shift_px: 0.0,
        sessions_count: 1,
        rounds_per_session: 2,
        ..GeneratorConfig::fast_profile()
    })
    .unwrap();
    let train = unit_images(&corpus, SplitMode::IntraSession, 1, &[1]).unwrap();
    let test = unit_images(&corpus, SplitMode::IntraSession, 1, &[2]).unwrap();
    let config = ExperimentConfig {
        epochs_initial: 10,
        batch_size: 8,
        ..ExperimentConfig::default()
    };
    let (spec, params, _) = initial_phase(&config, [1, 64, 64], 5, 3, &train).unwrap();
    let acc = accuracy(&spec, &params, &test).unwrap();
    assert!(acc >= 0.9, "held-out round accuracy {acc}");
}

#[test]
fn vanilla_inter_session_accuracy_does_not_rise_with_shift() {
    let base = RunConfig::fast_profile(SplitMode::InterSession);
    let plan = make_inter_plan(7).unwrap();
    let mut means = Vec::new();
    for shift in [0.0, 4.0, 8.0] {
        let mut sum = 0.0;
        for seed in 1..=5u64 {
            let corpus = generate_corpus(&GeneratorConfig {
                seed,
                session_shift_px: shift,
                ..base.corpus.clone()
            })
            .unwrap();
            let train = unit_images(&corpus, SplitMode::InterSession, 1, &plan.train_units).unwrap();
            let eval = unit_images(&corpus, SplitMode::InterSession, 1, &[plan.eval_unit]).unwrap();
            let (spec, params, _) = initial_phase(&base.experiment, [1, 64, 64], 5, seed, &train).unwrap();
            sum += accuracy(&spec, &params, &eval).unwrap();
        }
        means.push(sum / 5.0);
    }
    assert!(means[0] >= means[1] && means[1] >= means[2], "mean accuracy at shift 0/4/8: {means:?}");
}
