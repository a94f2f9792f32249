//! Scratch harness for sizing the acceptance experiments. Not part of the
//! test suite.

use wordprism_core::config::RunConfig;
use wordprism_core::analysis::{sample_tokens, separability_report};
use wordprism_core::meta::{apply_projection_override, make_baseline, BaselineKind, ProjectionOverride};
use wordprism_core::synth::{self, ClassificationSpec, RotatedSpec, SyntheticSpec, TaggingSpec};
use wordprism_core::train::{evaluate, train, HeadKind, TrainConfig};

fn tagging_bundle(seed: u64) -> synth::SyntheticBundle {
    synth::generate(&SyntheticSpec::Tagging(TaggingSpec {
        num_facets: 3,
        dim: 10,
        designated_facet: 0,
        vocab_per_tag: 12,
        sentence_len: 8,
        train_sentences: 30,
        val_sentences: 10,
        test_sentences: 10,
        separation: 2.0,
        noise: 0.4,
        distractor_scale: 1.0,
        seed,
    }))
    .unwrap()
}

fn criterion4() {
    println!("=== criterion 4 sizing: tagging, orthogonal vs unconstrained ===");
    let bundle = tagging_bundle(77);
    for beta in [0.001, 0.01, 0.1, 0.3, 0.5] {
        for lr in [0.001] {
            let mut max_err: f64 = 0.0;
            let mut final_errs = Vec::new();
            for seed in 0..3u64 {
                let init = make_baseline(BaselineKind::Prism, &bundle.facets, None, seed).unwrap();
                let cfg = TrainConfig {
                    learning_rate: lr,
                    beta_retraction: beta,
                    max_epochs: 100,
                    batch_size: 8,
                    seed,
                    freeze: init.freeze,
                    ..TrainConfig::default()
                };
                let run = train(
                    &bundle.facets,
                    &init.config,
                    init.params.clone(),
                    HeadKind::WindowTagger { window: 2 },
                    &cfg,
                    &bundle.train,
                    &bundle.val,
                )
                .unwrap();
                max_err = max_err.max(run.max_step_ortho_error);
                final_errs.push(run.history.last().unwrap().ortho_errors.clone());
            }
            println!("beta={beta} lr={lr}: max_step_err={max_err:.3e}");
        }
    }
    // Unconstrained drift.
    for seed in 0..5u64 {
        let mut init = make_baseline(BaselineKind::Prism, &bundle.facets, None, seed).unwrap();
        apply_projection_override(&mut init, ProjectionOverride::Unconstrained).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.001,
            max_epochs: 100,
            batch_size: 8,
            seed,
            freeze: init.freeze,
            ..TrainConfig::default()
        };
        let run = train(
            &bundle.facets,
            &init.config,
            init.params.clone(),
            HeadKind::WindowTagger { window: 2 },
            &cfg,
            &bundle.train,
            &bundle.val,
        )
        .unwrap();
        let last = run.history.last().unwrap();
        let max_final = last.ortho_errors.iter().cloned().fold(0.0f64, f64::max);
        println!(
            "unconstrained seed {seed}: final max ortho err {max_final:.3e}, val {:.3}",
            last.val_metric
        );
    }
}

fn criterion8() {
    println!("=== criterion 8 sizing: informative-facet classification ===");
    let spec = SyntheticSpec::Classification(ClassificationSpec {
        num_facets: 3,
        dim: 8,
        informative_facet: 0,
        vocab_per_class: 15,
        tokens_per_example: 5,
        train_examples: 40,
        val_examples: 20,
        test_examples: 20,
        margin: 2.0,
        noise: 0.3,
        distractor_scale: 1.0,
        distractor_prototypes: 4,
        seed: 99,
    });
    let bundle = synth::generate(&spec).unwrap();
    for lr in [0.003, 0.01] {
        for seed in 0..5u64 {
            let init = make_baseline(BaselineKind::Prism, &bundle.facets, None, seed).unwrap();
            let cfg = TrainConfig {
                learning_rate: lr,
                beta_retraction: 0.5,
                max_epochs: 200,
                batch_size: 8,
                seed,
                freeze: init.freeze,
                ..TrainConfig::default()
            };
            let run = train(
                &bundle.facets,
                &init.config,
                init.params.clone(),
                HeadKind::PooledClassifier,
                &cfg,
                &bundle.train,
                &bundle.val,
            )
            .unwrap();
            let train_acc = evaluate(
                &bundle.facets,
                &run.final_params,
                &init.config,
                &run.final_head,
                HeadKind::PooledClassifier,
                &bundle.train,
            )
            .unwrap();
            println!(
                "lr={lr} seed {seed}: train_acc(final)={train_acc:.3} alphas={:?} max_step_err={:.2e}",
                run.final_params.alphas, run.max_step_ortho_error
            );
        }
    }
}

fn criterion5() {
    println!("=== criterion 5 sizing: rotated facets, orthogonal vs unconstrained AMI ===");
    let spec = SyntheticSpec::Rotated(RotatedSpec {
        num_facets: 3,
        dim: 20,
        vocab_size: 120,
        tokens_per_example: 5,
        train_examples: 60,
        val_examples: 20,
        test_examples: 20,
        offset_scale: 4.0,
        seed: 55,
    });
    let bundle = synth::generate(&spec).unwrap();
    let tokens = sample_tokens(&bundle.facets, 100).unwrap();
    let kseeds = [0u64, 1, 2, 3, 4];

    // AMI at initialization (identity projections).
    let init = make_baseline(BaselineKind::Prism, &bundle.facets, None, 0).unwrap();
    let at_init = separability_report(&init.params, &init.config, &bundle.facets, &tokens, &kseeds)
        .unwrap();
    println!("init AMI: {:.4} +- {:.4}", at_init.report.mean, at_init.report.std);

    for train_seed in 0..5u64 {
        let mut amis = Vec::new();
        for unconstrained in [false, true] {
            let mut init = make_baseline(BaselineKind::Prism, &bundle.facets, None, train_seed).unwrap();
            if unconstrained {
                apply_projection_override(&mut init, ProjectionOverride::Unconstrained).unwrap();
            }
            let cfg = TrainConfig {
                learning_rate: 0.001,
                beta_retraction: 0.5,
                max_epochs: 150,
                batch_size: 8,
                seed: train_seed,
                freeze: init.freeze,
                ..TrainConfig::default()
            };
            let run = train(
                &bundle.facets,
                &init.config,
                init.params.clone(),
                HeadKind::PooledClassifier,
                &cfg,
                &bundle.train,
                &bundle.val,
            )
            .unwrap();
            let out = separability_report(
                &run.params,
                &init.config,
                &bundle.facets,
                &tokens,
                &kseeds,
            )
            .unwrap();
            let acc = evaluate(
                &bundle.facets,
                &run.params,
                &init.config,
                &run.head,
                HeadKind::PooledClassifier,
                &bundle.train,
            )
            .unwrap();
            amis.push((out.report.mean, acc));
        }
        println!(
            "seed {train_seed}: orth AMI {:.4} (acc {:.2}) vs unconstrained AMI {:.4} (acc {:.2}) -> {}",
            amis[0].0,
            amis[0].1,
            amis[1].0,
            amis[1].1,
            if amis[0].0 >= amis[1].0 { "ORTH>=UNC" } else { "UNC WINS" }
        );
    }
}

fn toy_separable() {
    println!("=== train example: separable toy set, single facet ===");
    let spec = SyntheticSpec::Classification(ClassificationSpec {
        num_facets: 1,
        dim: 6,
        informative_facet: 0,
        vocab_per_class: 12,
        tokens_per_example: 4,
        train_examples: 40,
        val_examples: 20,
        test_examples: 20,
        margin: 1.0,
        noise: 0.4,
        distractor_scale: 1.0,
        distractor_prototypes: 0,
        seed: 7,
    });
    let bundle = synth::generate(&spec).unwrap();
    let init = make_baseline(BaselineKind::Prism, &bundle.facets, None, 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.001,
        beta_retraction: 0.5,
        max_epochs: 200,
        batch_size: 8,
        seed: 1,
        freeze: init.freeze,
        ..TrainConfig::default()
    };
    let run = train(
        &bundle.facets,
        &init.config,
        init.params.clone(),
        HeadKind::PooledClassifier,
        &cfg,
        &bundle.train,
        &bundle.val,
    )
    .unwrap();
    let acc = evaluate(
        &bundle.facets,
        &run.params,
        &init.config,
        &run.head,
        HeadKind::PooledClassifier,
        &bundle.train,
    )
    .unwrap();
    println!("train acc {acc:.3} best epoch {}", run.best_epoch);
}

fn main() {
    let _ = RunConfig::from_json("{}");
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if which == "all" || which == "c4" {
        criterion4();
    }
    if which == "all" || which == "c8" {
        criterion8();
    }
    if which == "all" || which == "c5" {
        criterion5();
    }
    if which == "all" || which == "toy" {
        toy_separable();
    }
}
