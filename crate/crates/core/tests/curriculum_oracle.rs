//! Curriculum mechanics against brute force, plus warmup behaviour on the
//! default synthetic data.

use std::collections::BTreeSet;

use subshift_core::curriculum::{
    discover_split, pooled_order, run_variant, sort_orders, stage_subset, standard_stage_subset, warmup_erm, Direction,
};
use subshift_core::dro::{train_erm, Phase};
use subshift_core::{
    generate, ground_truth_split, Architecture, CurriculumSchedule, DataConfig, Matrix, Model, SplitSource,
    TrainConfig, Variant,
};
use subshift_core::{Dataset, Split};

fn small_data(n: usize, seed: u64) -> Dataset {
    generate(&DataConfig {
        n_train: n,
        n_val: 20,
        n_test: 20,
        seed,
        ..DataConfig::default()
    })
    .unwrap()
    .train
}

fn brute_force_order(indices: &[usize], losses: &[f64], hardest_first: bool) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = indices.iter().map(|&i| (losses[i], i)).collect();
    keyed.sort_by(|a, b| {
        let c = a.0.partial_cmp(&b.0).unwrap();
        let c = if hardest_first { c.reverse() } else { c };
        c.then(a.1.cmp(&b.1))
    });
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[test]
fn stage_subsets_match_brute_force_with_ties() {
    let train = small_data(200, 1);
    let split = ground_truth_split(&train).unwrap();
    let warm = warmup_erm(
        Architecture::mlp1(train.n_features(), 8, 2),
        &train,
        &TrainConfig::default(),
    )
    .unwrap();
    // Coarse rounding forces many ties.
    let rounded: Vec<f64> = warm.losses.iter().map(|l| (l * 4.0).round() / 4.0).collect();
    for losses in [&warm.losses, &rounded] {
        for rate in [0.2, 0.25, 0.5, 1.0] {
            let schedule = CurriculumSchedule {
                rate,
                ..CurriculumSchedule::default()
            };
            let big_k = schedule.n_stages();
            let order = sort_orders(losses, &split, Direction::HardestFirst).unwrap();
            let b = brute_force_order(&split.bias_confirming, losses, true);
            let c = brute_force_order(&split.bias_conflicting, losses, false);
            let mut previous = BTreeSet::new();
            for k in 1..=big_k {
                let n = split.bias_conflicting.len() * k / big_k;
                let s = stage_subset(&split, &order, k, &schedule).unwrap();
                assert_eq!(s.confirming, b[..n]);
                assert_eq!(s.conflicting, c[..n]);
                let set: BTreeSet<usize> = s.indices().into_iter().collect();
                assert_eq!(set.len(), 2 * n);
                assert!(previous.is_subset(&set));
                previous = set;
            }
            let conflicting: BTreeSet<usize> = split.bias_conflicting.iter().copied().collect();
            assert!(conflicting.is_subset(&previous));
        }
    }
}

#[test]
fn easy_first_variant_only_changes_confirming_order() {
    let train = small_data(200, 2);
    let split = ground_truth_split(&train).unwrap();
    let losses: Vec<f64> = (0..train.len()).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
    let hard = sort_orders(&losses, &split, Direction::HardestFirst).unwrap();
    let easy = sort_orders(&losses, &split, Direction::EasiestFirst).unwrap();
    assert_eq!(hard.conflicting, easy.conflicting);
    let mut reversed_check = easy.confirming.clone();
    reversed_check.sort();
    let mut h = hard.confirming.clone();
    h.sort();
    assert_eq!(reversed_check, h);
    assert_ne!(hard.confirming, easy.confirming);

    // Selecting everything is order-invariant.
    let tiny = Split::new(vec![0, 1, 2], vec![3, 4, 5]).unwrap();
    let losses = [0.1, 0.9, 0.5, 0.2, 0.3, 0.4];
    let schedule = CurriculumSchedule {
        rate: 1.0,
        ..CurriculumSchedule::default()
    };
    let a = stage_subset(
        &tiny,
        &sort_orders(&losses, &tiny, Direction::HardestFirst).unwrap(),
        1,
        &schedule,
    )
    .unwrap();
    let b = stage_subset(
        &tiny,
        &sort_orders(&losses, &tiny, Direction::EasiestFirst).unwrap(),
        1,
        &schedule,
    )
    .unwrap();
    let sa: BTreeSet<usize> = a.indices().into_iter().collect();
    let sb: BTreeSet<usize> = b.indices().into_iter().collect();
    assert_eq!(sa, sb);
}

#[test]
fn standard_curriculum_first_stage_is_globally_easiest() {
    let losses = [0.4, 0.1, 0.9, 0.1, 0.3, 0.8, 0.2, 0.7, 0.6, 0.5];
    let pooled = pooled_order(&losses);
    assert_eq!(standard_stage_subset(&pooled, 1, 5), vec![1, 3]);
    assert_eq!(standard_stage_subset(&pooled, 5, 5).len(), 10);
}

#[test]
fn epoch_accounting_and_single_stage() {
    let train = small_data(200, 3);
    let arch = Architecture::mlp1(train.n_features(), 8, 2);
    let config = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    for (rate, stage_epochs, final_epochs) in [(0.2, 3, 4), (0.5, 2, 1), (1.0, 1, 2)] {
        let schedule = CurriculumSchedule {
            rate,
            stage_epochs,
            final_epochs: Some(final_epochs),
        };
        for variant in [Variant::Main, Variant::EasyFirstConfirming, Variant::StandardCurriculum] {
            let run = run_variant(variant, arch, &train, SplitSource::GroundTruth, &schedule, &config).unwrap();
            let k = schedule.n_stages();
            assert_eq!(run.log.epochs.len(), k * stage_epochs + final_epochs);
            assert_eq!(run.log.epochs_in(|p| matches!(p, Phase::Stage(_))), k * stage_epochs);
            assert_eq!(run.log.epochs_in(|p| p == Phase::Final), final_epochs);
            assert_eq!(run.log.epochs_in(|p| p == Phase::Warmup), 0);
            assert_eq!(run.manifest.stages.len(), k);
            assert_eq!(
                run.manifest.stages.iter().map(|s| s.steps).sum::<usize>() + run.manifest.final_steps,
                run.log.total_steps()
            );
            if rate == 1.0 && variant == Variant::Main {
                let s = &run.manifest.stages[0];
                assert_eq!(s.n, run.split.bias_conflicting.len());
                assert_eq!(s.subset_size, 2 * s.n);
            }
        }
    }
}

#[test]
fn auto_final_epochs_fill_the_budget() {
    let train = small_data(400, 4);
    let arch = Architecture::linear(train.n_features(), 2);
    let config = TrainConfig {
        batch_size: 20,
        max_steps: 500,
        ..TrainConfig::default()
    };
    let run = run_variant(
        Variant::Main,
        arch,
        &train,
        SplitSource::GroundTruth,
        &CurriculumSchedule::default(),
        &config,
    )
    .unwrap();
    assert!(run.manifest.final_epochs >= 1);
    assert!(run.log.total_steps() <= config.max_steps);
    let per_epoch = run.manifest.final_steps / run.manifest.final_epochs;
    assert!(run.log.total_steps() + per_epoch > config.max_steps);
}

#[test]
fn final_model_is_not_the_warmup_model() {
    let train = small_data(200, 5);
    let arch = Architecture::mlp1(train.n_features(), 8, 2);
    let schedule = CurriculumSchedule {
        rate: 1.0,
        stage_epochs: 1,
        final_epochs: Some(1),
    };
    let config = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        batch_size: 16,
        ..TrainConfig::default()
    };
    // With a zero learning rate the final model still holds its own init.
    let run = run_variant(
        Variant::Main,
        arch,
        &train,
        SplitSource::GroundTruth,
        &schedule,
        &config,
    )
    .unwrap();
    assert_ne!(run.model.params().to_flat(), run.warmup.model.params().to_flat());
    let fresh = warmup_erm(arch, &train, &config).unwrap();
    assert_ne!(run.model.params().to_flat(), fresh.model.params().to_flat());
}

fn accuracy_on(model: &Model, train: &Dataset, indices: &[usize]) -> f64 {
    let sub = train.subset(indices);
    let pred = model.predict(sub.features()).unwrap();
    pred.iter().zip(sub.labels()).filter(|(p, y)| p == y).count() as f64 / indices.len() as f64
}

#[test]
fn warmup_fits_confirming_samples_first() {
    for seed in 0..3 {
        let train = generate(&DataConfig {
            seed,
            ..DataConfig::default()
        })
        .unwrap()
        .train;
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let warm = warmup_erm(Architecture::mlp1(train.n_features(), 16, 2), &train, &config).unwrap();
        assert_eq!(warm.log.total_steps(), train.len().div_ceil(config.batch_size));
        assert_eq!(warm.losses.len(), train.len());
        assert!(warm.losses.iter().all(|l| l.is_finite() && *l >= 0.0));

        let truth = ground_truth_split(&train).unwrap();
        let b = accuracy_on(&warm.model, &train, &truth.bias_confirming);
        let c = accuracy_on(&warm.model, &train, &truth.bias_conflicting);
        assert!(b > c, "seed {seed}: D_B accuracy {b} vs D_C accuracy {c}");

        // A well-fit warmup also uses the core block, so it gets part of the
        // minority right; what it does flag should still be mostly minority.
        let found = discover_split(&warm.model, &train).unwrap();
        let precision = overlap(&found, &truth) as f64 / found.bias_conflicting.len() as f64;
        assert!(precision > 0.5, "seed {seed}: precision {precision}");
    }
}

fn overlap(found: &Split, truth: &Split) -> usize {
    let x: BTreeSet<usize> = found.bias_conflicting.iter().copied().collect();
    truth.bias_conflicting.iter().filter(|i| x.contains(i)).count()
}

#[test]
fn discovery_recovers_minority_when_spurious_block_dominates() {
    for seed in 0..3 {
        let train = generate(&DataConfig {
            seed,
            d_core: 2,
            ..DataConfig::default()
        })
        .unwrap()
        .train;
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let warm = warmup_erm(Architecture::mlp1(train.n_features(), 16, 2), &train, &config).unwrap();
        let found = discover_split(&warm.model, &train).unwrap();
        let truth = ground_truth_split(&train).unwrap();
        let inter = overlap(&found, &truth);
        let union = found.bias_conflicting.len() + truth.bias_conflicting.len() - inter;
        let jaccard = inter as f64 / union as f64;
        assert!(jaccard > 0.5, "seed {seed}: jaccard {jaccard}");
    }
}

#[test]
fn erm_fits_separable_gaussians() {
    let n = 1000;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let noise = generate(&DataConfig {
        n_train: n,
        n_val: 2,
        n_test: 2,
        mu_core: 0.0,
        sigma_core: 0.5,
        mu_spur: 0.0,
        sigma_spur: 0.5,
        d_core: 2,
        d_spur: 1,
        d_noise: 0,
        ..DataConfig::default()
    })
    .unwrap()
    .train;
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        let row = noise.features().row(i);
        rows.push(vec![3.0 * sign + row[0], 3.0 * sign + row[1]]);
        labels.push(y);
    }
    let train = Dataset::new(Matrix::from_rows(&rows).unwrap(), labels.clone(), labels).unwrap();
    for arch in [Architecture::linear(2, 2), Architecture::mlp1(2, 4, 2)] {
        let mut model = Model::init(arch, 0).unwrap();
        let config = TrainConfig {
            batch_size: 32,
            ..TrainConfig::default()
        };
        train_erm(&mut model, &train, &config, 5, 1).unwrap();
        let all: Vec<usize> = (0..n).collect();
        assert!(accuracy_on(&model, &train, &all) > 0.99);
    }
}
