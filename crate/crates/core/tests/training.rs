use advseg::adversarial::{adversarial_loss, batch_objective, input_gradient, perturbation, Example};
use advseg::checkpoint::Checkpoint;
use advseg::config::RunConfig;
use advseg::crf::CrfSettings;
use advseg::fcn::{FcnConfig, PositionPrior};
use advseg::model::{Model, Variant};
use advseg::selftest::tiny_architectures;
use advseg::synth::{generate, GenSpec};
use advseg::train::{self, evaluate, train_epoch, AdvConfig, EvalPlan, Prepared, TrainState};
use advseg::Tensor;

const SIDE: usize = 16;

fn small_data(seed: u64, count: usize) -> Prepared {
    let spec = GenSpec {
        seed,
        count,
        size: SIDE,
        center_jitter: 2.0,
        semi_axis_min: 2.5,
        semi_axis_max: 4.5,
        contrast_gap: 0.3,
        noise_sigma: 0.05,
        ..GenSpec::default()
    };
    let samples = generate(&spec).unwrap();
    let (tr, te) = samples.split_at(count / 2);
    train::prepare(tr, te, true).unwrap()
}

fn crf() -> CrfSettings {
    CrfSettings { steps_train: 3, steps_test: 4, ..CrfSettings::default() }
}

fn model(variant: Variant, data: &Prepared) -> Model {
    Model::with_configs(variant, tiny_architectures(SIDE), data.prior.clone(), crf()).unwrap()
}

fn config(variant: Variant, epsilon: f64, epochs: usize) -> AdvConfig {
    AdvConfig { variant, epsilon, epochs, batch_size: 4, seed: 21, ..AdvConfig::default() }
}

fn run(variant: Variant, epsilon: f64, epochs: usize, data: &Prepared) -> (TrainState, Vec<train::EpochRecord>) {
    let m = model(variant, data);
    let cfg = config(variant, epsilon, epochs);
    let mut state = TrainState::new(m.init_params(cfg.seed).unwrap());
    let recs = train::train(&m, &cfg, &mut state, &data.train, &data.test, EvalPlan::default(), |_, _| Ok(())).unwrap();
    (state, recs)
}

#[test]
fn zero_radius_adversarial_runs_match_clean_runs_bit_for_bit() {
    let data = small_data(1, 6);
    for adv in [Variant::AdvFcn, Variant::AdvFcnCrf, Variant::AdvMultiFcn, Variant::AdvMultiFcnCrf] {
        let (sa, ra) = run(adv, 0.0, 2, &data);
        let (sc, rc) = run(adv.clean(), 0.0, 2, &data);
        assert_eq!(sa, sc, "{adv}");
        assert_eq!(ra, rc, "{adv}");
    }
}

#[test]
fn positive_radius_changes_the_trajectory() {
    let data = small_data(1, 6);
    let (sa, _) = run(Variant::AdvFcn, 0.5, 1, &data);
    let (sc, _) = run(Variant::Fcn, 0.5, 1, &data);
    assert_ne!(sa.params, sc.params);
}

#[test]
fn resume_from_checkpoint_reproduces_uninterrupted_run() {
    let data = small_data(2, 8);
    let variant = Variant::AdvMultiFcnCrf;
    let m = model(variant, &data);
    let cfg = config(variant, 0.1, 4);

    let mut straight = TrainState::new(m.init_params(cfg.seed).unwrap());
    let full = train::train(&m, &cfg, &mut straight, &data.train, &data.test, EvalPlan::default(), |_, _| Ok(())).unwrap();

    let mut first = TrainState::new(m.init_params(cfg.seed).unwrap());
    let half = AdvConfig { epochs: 2, ..cfg.clone() };
    train::train(&m, &half, &mut first, &data.train, &data.test, EvalPlan::default(), |_, _| Ok(())).unwrap();
    let ck = Checkpoint {
        variant,
        architectures: m.configs.clone(),
        config: RunConfig { architectures: Some(tiny_architectures(SIDE)), crf: crf(), ..RunConfig::default() },
        dataset_checksum: "test".into(),
        state: first,
        norm: data.norm.clone(),
        prior: data.prior.clone(),
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
    let resumed_model = back.model().unwrap();
    let mut resumed = back.state;
    let rest = train::train(&resumed_model, &cfg, &mut resumed, &data.train, &data.test, EvalPlan::default(), |_, _| Ok(()))
        .unwrap();

    assert_eq!(resumed, straight);
    assert_eq!(rest, full[2..]);
}

#[test]
fn preset_checkpoint_round_trips_bit_exactly() {
    let data = small_data(3, 4);
    let prior = advseg::fcn::PositionPrior::uniform(40, 0.2).unwrap();
    let m = Model::new(Variant::MultiFcnCrf, prior.clone(), CrfSettings::default()).unwrap();
    let mut state = TrainState::new(m.init_params(5).unwrap());
    for (i, t) in state.v.values_mut().enumerate() {
        t.data_mut()[0] = (i as f64 + 0.1).sqrt();
    }
    state.step = 9;
    let ck = Checkpoint {
        variant: Variant::MultiFcnCrf,
        architectures: FcnConfig::presets().to_vec(),
        config: RunConfig::default(),
        dataset_checksum: "x".into(),
        state,
        norm: advseg::synth::NormStats {
            mean: advseg::Tensor::full(&[1, 40, 40], 0.3),
            std: advseg::Tensor::full(&[1, 40, 40], data.norm.std.data()[0]),
        },
        prior,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.afcr");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn tiny_fcn_fits_its_training_set() {
    let data = small_data(4, 8);
    let m = model(Variant::Fcn, &data);
    let cfg = AdvConfig { learning_rate: 0.01, ..config(Variant::Fcn, 0.0, 400) };
    let mut state = TrainState::new(m.init_params(cfg.seed).unwrap());
    let mut best = 0.0f64;
    for _ in 0..cfg.epochs {
        train_epoch(&m, &cfg, &mut state, &data.train).unwrap();
        if state.epoch % 25 == 0 {
            best = best.max(evaluate(&m, &state.params, &data.train).unwrap().0.dice());
            if best > 0.95 {
                break;
            }
        }
    }
    assert!(best > 0.95, "train dice {best}");
}

#[test]
fn zero_radius_zero_lambda_objective_is_twice_clean() {
    let data = small_data(6, 8);
    for variant in [Variant::AdvFcn, Variant::AdvFcnCrf, Variant::AdvMultiFcnCrf] {
        let m = model(variant, &data);
        let params = m.init_params(2).unwrap();
        let batch: Vec<&Example> = data.train.iter().take(4).collect();
        let o = batch_objective(&m, &params, &batch, 0.0, 0.0).unwrap();
        assert_eq!(o.total(), 2.0 * o.clean, "{variant}");
    }
}

#[test]
fn zero_network_with_uniform_prior_has_no_input_gradient() {
    let data = small_data(6, 4);
    for variant in [Variant::Fcn, Variant::FcnCrf] {
        let m = Model::with_configs(variant, tiny_architectures(SIDE), PositionPrior::uniform(SIDE, 0.5).unwrap(), crf()).unwrap();
        let mut params = m.init_params(1).unwrap();
        params.values_mut().for_each(|t| t.data_mut().fill(0.0));
        let g = input_gradient(&m, &params, &data.test[0]).unwrap();
        assert_eq!(g.shape(), data.test[0].input.shape());
        assert_eq!(g.max_abs(), 0.0, "{variant}");
    }
}

#[test]
fn perturbation_raises_held_out_loss_on_a_trained_model() {
    let data = small_data(9, 24);
    let m = model(Variant::Fcn, &data);
    let cfg = AdvConfig { learning_rate: 0.01, ..config(Variant::Fcn, 0.0, 60) };
    let mut state = TrainState::new(m.init_params(cfg.seed).unwrap());
    for _ in 0..cfg.epochs {
        train_epoch(&m, &cfg, &mut state, &data.train).unwrap();
    }
    let mut raised = 0;
    for ex in &data.test {
        let r = perturbation(&input_gradient(&m, &state.params, ex).unwrap(), 0.05).unwrap();
        let clean = adversarial_loss(&m, &state.params, &[ex], &[Tensor::zeros(r.shape())]).unwrap();
        let adv = adversarial_loss(&m, &state.params, &[ex], &[r]).unwrap();
        raised += (adv >= clean) as usize;
    }
    let rate = raised as f64 / data.test.len() as f64;
    assert!(rate >= 0.9, "adversarial >= clean on {rate:.2} of held-out samples");
}

#[test]
fn objective_is_finite_across_radii() {
    let data = small_data(6, 4);
    let m = model(Variant::AdvFcnCrf, &data);
    let params = m.init_params(3).unwrap();
    let batch: Vec<&Example> = data.train.iter().take(2).collect();
    for eps in [0.0, 0.05, 0.1, 0.5, 1.0] {
        let o = batch_objective(&m, &params, &batch, eps, 0.5).unwrap();
        assert!(o.total().is_finite() && o.adversarial.is_finite(), "eps {eps}");
    }
}
