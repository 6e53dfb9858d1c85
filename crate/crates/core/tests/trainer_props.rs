use fkt::align::{self, AlignmentSwitches};
use fkt::augment::AugmentedPool;
use fkt::dataset::{generate_synthetic, Domain, EmbeddingDataset, SplitSpec, SyntheticTaskSpec};
use fkt::network::{init_params, supervised_loss_value, AdamConfig, NetworkDims, OptimizerState};
use fkt::trainer::{
    self, augment_task, init_model, objective, pretrain, pretrain_model, step_a, step_b, train,
    train_from, AblationFlags, Hyperparams, Task, TrainMode,
};
use ndarray::Array2;

fn small_hp(seed: u64) -> Hyperparams {
    Hyperparams {
        hidden: 16,
        feature: 8,
        cls_hidden: 12,
        pretrain_epochs: 20,
        pretrain_lr: 1e-3,
        epochs: 4,
        seed,
        ..Default::default()
    }
}

fn small_task(seed: u64) -> Task {
    let spec = SyntheticTaskSpec {
        class_count: 4,
        dim: 6,
        per_class_source: 25,
        per_class_target: 20,
        minority: vec![0, 1],
        shots: Some(2),
        seed,
        ..Default::default()
    };
    let (s, t) = generate_synthetic(&spec).unwrap();
    Task::new(&s, &t, &SplitSpec::new(vec![0, 1], 2, 4).unwrap(), seed).unwrap()
}

fn real_pool(task: &Task) -> AugmentedPool {
    AugmentedPool::real_only(
        task.source.embeddings().to_owned(),
        task.source_labels.clone(),
    )
}

#[test]
fn zero_pretrain_epochs_is_a_no_op() {
    let task = small_task(1);
    let hp = Hyperparams {
        pretrain_epochs: 0,
        ..small_hp(1)
    };
    let mut model = init_model(&task, &hp).unwrap();
    let before = (model.generator.clone(), model.classifier.clone());
    let losses = pretrain_model(&task, &mut model, &hp).unwrap();
    assert!(losses.is_empty());
    assert_eq!((model.generator, model.classifier), before);
}

#[test]
fn pretraining_separates_a_linear_toy() {
    // class = sign of the first coordinate; a linear boundary separates it
    let z = Array2::from_shape_fn((40, 2), |(i, j)| {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        if j == 0 {
            side * (0.5 + (i as f64) * 0.03)
        } else {
            ((i * 7) % 11) as f64 * 0.2 - 1.0
        }
    });
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let dims = NetworkDims {
        input: 2,
        hidden: 8,
        feature: 4,
        cls_hidden: 8,
        classes: 2,
    };
    let (mut g, mut c) = init_params(&dims, 3).unwrap();
    let (g0, c0) = (g.clone(), c.clone());
    pretrain(z.view(), &labels, &mut g, &mut c, 500, 1e-3).unwrap();
    let logits = c.logits(g.features(z.view()).view());
    let correct = logits
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(r, &y)| fkt::network::argmax(*r) == y)
        .count();
    assert_eq!(correct, 40);

    let (mut g2, mut c2) = (g0, c0);
    pretrain(z.view(), &labels, &mut g2, &mut c2, 500, 1e-3).unwrap();
    assert_eq!((g2, c2), (g, c));
}

#[test]
fn step_a_descends_and_leaves_prototypes_alone() {
    let task = small_task(2);
    let hp = small_hp(2);
    let mut model = init_model(&task, &hp).unwrap();
    let rows: Vec<usize> = (0..40).collect();
    let batch = AugmentedPool::real_only(
        task.source.embeddings().select(ndarray::Axis(0), &rows),
        rows.iter().map(|&r| task.source_labels[r]).collect(),
    );
    let protos = model.prototypes.clone();
    let mut opt = OptimizerState::new(
        &model.generator,
        &model.classifier,
        AdamConfig::with_lr(1e-3),
    );
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(
            step_a(
                &batch,
                &mut model.generator,
                &mut model.classifier,
                &mut opt,
            )
            .unwrap()
            .0,
        );
    }
    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(model.prototypes, protos);
}

#[test]
fn step_a_with_zero_gradient_is_a_fixed_point() {
    let dims = NetworkDims {
        input: 3,
        hidden: 4,
        feature: 2,
        cls_hidden: 3,
        classes: 2,
    };
    let (g, mut c) = init_params(&dims, 5).unwrap();
    c.w2.fill(0.0);
    c.b2[0] = 1000.0;
    let (mut g1, mut c1) = (g.clone(), c.clone());
    let pool = AugmentedPool::real_only(Array2::from_elem((4, 3), 0.5), vec![0; 4]);
    let mut opt = OptimizerState::new(&g, &c, AdamConfig::default());
    let (loss, _) = step_a(&pool, &mut g1, &mut c1, &mut opt).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!((g1, c1), (g, c));
}

fn pseudo_for(
    task: &Task,
    model: &fkt::network::ModelState,
    pool: &AugmentedPool,
) -> align::PseudoLabels {
    let feats = model.generator.features(pool.embeddings.view());
    let protos =
        align::amended_prototypes(feats.view(), &pool.labels, &pool.provenance, task.classes());
    let tf = model.generator.features(task.target.embeddings());
    align::pseudo_labels(tf.view(), &protos, 10.0, None).unwrap()
}

#[test]
fn step_b_freezes_classifier_and_reports_its_objective() {
    let task = small_task(3);
    let hp = small_hp(3);
    let mut model = init_model(&task, &hp).unwrap();
    pretrain_model(&task, &mut model, &hp).unwrap();
    let pool = augment_task(&task, &hp, AblationFlags::full()).unwrap();
    let pseudo = pseudo_for(&task, &model, &pool);
    let both = AlignmentSwitches {
        intra: true,
        inter: true,
    };
    let snapshot = model.clone();
    let mut opt = OptimizerState::new(&model.generator, &model.classifier, AdamConfig::default());
    let out = step_b(
        &pool,
        task.target.embeddings(),
        &pseudo,
        &mut model.generator,
        &model.classifier,
        &mut opt,
        0.1,
        both,
    )
    .unwrap();
    assert_eq!(model.classifier, snapshot.classifier);
    assert_ne!(model.generator, snapshot.generator);

    // independent recomputation at the pre-step parameters
    let m_s = supervised_loss_value(
        pool.embeddings.view(),
        &pool.labels,
        &snapshot.generator,
        &snapshot.classifier,
    );
    let sf = snapshot.generator.features(pool.embeddings.view());
    let tf = snapshot.generator.features(task.target.embeddings());
    let st = align::amended_prototypes(sf.view(), &pool.labels, &pool.provenance, task.classes());
    let tt = align::target_prototypes(tf.view(), &pseudo, task.classes());
    let m_c = align::class_mmd(&st, &tt).unwrap().value;
    let m_d = align::interclass_divergence(&st, &tt)
        .unwrap()
        .unwrap()
        .value;
    let want = m_s + 0.1 * (m_c - m_d);
    assert!(
        (out.objective - want).abs() < 1e-9,
        "{} vs {want}",
        out.objective
    );
}

#[test]
fn step_b_degenerates_to_step_a_on_the_generator() {
    let task = small_task(4);
    let hp = small_hp(4);
    let mut model = init_model(&task, &hp).unwrap();
    pretrain_model(&task, &mut model, &hp).unwrap();
    let pool = augment_task(&task, &hp, AblationFlags::full()).unwrap();
    let pseudo = pseudo_for(&task, &model, &pool);
    let tz = task.target.embeddings();
    let fresh = |m: &fkt::network::ModelState| {
        OptimizerState::new(&m.generator, &m.classifier, AdamConfig::default())
    };

    let (mut ga, mut ca) = (model.generator.clone(), model.classifier.clone());
    step_a(&pool, &mut ga, &mut ca, &mut fresh(&model)).unwrap();

    let both = AlignmentSwitches {
        intra: true,
        inter: true,
    };
    let none = AlignmentSwitches {
        intra: false,
        inter: false,
    };
    let mut g0 = model.generator.clone();
    step_b(
        &pool,
        tz,
        &pseudo,
        &mut g0,
        &model.classifier,
        &mut fresh(&model),
        0.0,
        both,
    )
    .unwrap();
    let mut g1 = model.generator.clone();
    step_b(
        &pool,
        tz,
        &pseudo,
        &mut g1,
        &model.classifier,
        &mut fresh(&model),
        0.1,
        none,
    )
    .unwrap();
    assert_eq!(g0, ga);
    assert_eq!(g1, g0);

    let obj = objective(
        &pool,
        tz,
        &pseudo,
        &model.generator,
        &model.classifier,
        0.0,
        both,
    )
    .unwrap();
    assert_eq!(obj.terms.m_c, None);
}

#[test]
fn global_mode_builds_graphs_once() {
    let task = small_task(5);
    let hp = small_hp(5);
    let mut model = init_model(&task, &hp).unwrap();
    let report = train_from(&task, &mut model, &hp, AblationFlags::full()).unwrap();
    assert_eq!(report.graph_builds, 2);
    assert_eq!(report.epochs.len(), hp.epochs);
    assert!(report
        .epochs
        .iter()
        .all(|e| e.m_c.is_some() && e.m_d.is_some()));

    let mut model = init_model(&task, &hp).unwrap();
    let report = train_from(&task, &mut model, &hp, AblationFlags::source_only()).unwrap();
    assert_eq!(report.graph_builds, 0);
}

#[test]
fn episodic_mode_rebuilds_graphs_per_episode() {
    let task = small_task(6);
    let hp = Hyperparams {
        mode: TrainMode::Episodic,
        episodes_per_epoch: Some(3),
        epochs: 2,
        episode: trainer::EpisodeSpec {
            p: 3,
            q: 2,
            e_t: 16,
        },
        ..small_hp(6)
    };
    let mut model = init_model(&task, &hp).unwrap();
    let report = train_from(&task, &mut model, &hp, AblationFlags::full()).unwrap();
    assert_eq!(report.graph_builds, 2 * 3 * 2);
    assert!(report.final_metrics.is_some());
    assert!(model.prototypes.is_complete());
}

#[test]
fn source_only_equals_step_a_on_real_rows() {
    let task = small_task(7);
    let hp = small_hp(7);
    let mut model = init_model(&task, &hp).unwrap();
    pretrain_model(&task, &mut model, &hp).unwrap();

    let mut via_train = model.clone();
    train_from(&task, &mut via_train, &hp, AblationFlags::source_only()).unwrap();

    let pool = real_pool(&task);
    let mut opt = OptimizerState::new(
        &model.generator,
        &model.classifier,
        AdamConfig::with_lr(hp.lr),
    );
    for _ in 0..hp.epochs {
        step_a(&pool, &mut model.generator, &mut model.classifier, &mut opt).unwrap();
    }
    assert_eq!(via_train.generator, model.generator);
    assert_eq!(via_train.classifier, model.classifier);
}

#[test]
fn lambda_zero_without_augmentation_continues_pretraining() {
    let task = small_task(8);
    let hp = Hyperparams {
        lambda: 0.0,
        ..small_hp(8)
    };
    let mut model = init_model(&task, &hp).unwrap();
    pretrain_model(&task, &mut model, &hp).unwrap();

    let mut trained = model.clone();
    train_from(&task, &mut trained, &hp, AblationFlags::without_cda()).unwrap();

    let (mut g, mut c) = (model.generator.clone(), model.classifier.clone());
    pretrain(
        task.source.embeddings(),
        &task.source_labels,
        &mut g,
        &mut c,
        hp.epochs,
        1e-3,
    )
    .unwrap();
    assert_eq!(trained.generator, g);
    assert_eq!(trained.classifier, c);
}

#[test]
fn training_is_reproducible() {
    let spec = SyntheticTaskSpec {
        class_count: 3,
        dim: 4,
        per_class_source: 20,
        per_class_target: 15,
        minority: vec![2],
        shots: Some(1),
        seed: 9,
        ..Default::default()
    };
    let (s, t) = generate_synthetic(&spec).unwrap();
    let split = SplitSpec::new(vec![2], 1, 3).unwrap();
    let hp = small_hp(9);
    let (m1, r1) = train(&s, &t, &split, &hp, AblationFlags::full()).unwrap();
    let (m2, r2) = train(&s, &t, &split, &hp, AblationFlags::full()).unwrap();
    assert_eq!(r1.to_jsonl(), r2.to_jsonl());
    assert_eq!(m1.to_text(), m2.to_text());
    assert_eq!(r1.pretrain_losses.len(), hp.pretrain_epochs);
    let line: serde_json::Value =
        serde_json::from_str(r1.to_jsonl().lines().last().unwrap()).unwrap();
    for key in ["epoch", "m_s", "m_c", "m_d", "a_f", "a_m", "a_o", "wall_ms"] {
        assert!(line.get(key).is_some(), "missing {key}");
    }
    assert_eq!(line["wall_ms"], 0);
}

#[test]
fn evaluation_is_read_only_and_count_consistent() {
    let task = small_task(10);
    let hp = small_hp(10);
    let mut model = init_model(&task, &hp).unwrap();
    train_from(&task, &mut model, &hp, AblationFlags::full()).unwrap();
    let before = model.clone();
    let m = fkt::eval::evaluate(
        &model,
        &task.target,
        &task.split.minority_mask(),
        &hp.eval_options(),
    )
    .unwrap();
    assert_eq!(model, before);
    assert_eq!(m.correct_f + m.correct_m, m.correct_total);
    assert_eq!(m.n_f + m.n_m, task.target.len());
    assert_eq!(
        m.a_o,
        100.0 * m.correct_total as f64 / task.target.len() as f64
    );
    for v in [m.a_f.unwrap(), m.a_m.unwrap(), m.a_o] {
        assert!((0.0..=100.0).contains(&v));
    }
}

#[test]
fn mismatched_domains_are_rejected() {
    let task = small_task(11);
    let wrong =
        EmbeddingDataset::new(Domain::Target, Array2::zeros((3, 5)), vec![None; 3], 4).unwrap();
    assert!(Task::new(&task.source, &wrong, &task.split, 0).is_err());
}
