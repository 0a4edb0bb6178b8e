use seqal::corpus::{generate_synthetic, SentenceBlock, SplitSizes, SynthSpec, TaskKind};
use seqal::experiment::{run_passive, ExperimentConfig};
use seqal::model::{FeatureConfig, Tagger, TrainConfig, Vocab};
use seqal::strategies::StrategyKind;

#[test]
fn training_nll_decreases_each_epoch() {
    let corpus = generate_synthetic(&SynthSpec {
        n_sentences: SplitSizes { train: 50, val: 0, test: 0 },
        entity_rate: 0.5,
        ..SynthSpec::default()
    })
    .unwrap();
    let blocks: Vec<&SentenceBlock> = corpus.train.iter().collect();
    for seed in 0..3 {
        let tagger = Tagger::new(
            corpus.scheme.clone(),
            FeatureConfig::default(),
            Vocab::from_blocks(&corpus.train),
            seed,
        )
        .unwrap();
        let (_, history) = tagger
            .train_logged(&blocks, &TrainConfig::for_task(TaskKind::ProductExtraction), seed)
            .unwrap();
        assert_eq!(history.len(), 3);
        assert!(history.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {history:?}");
    }
}

#[test]
fn role_training_nll_decreases() {
    let corpus = generate_synthetic(&SynthSpec {
        task: TaskKind::RoleLabeling,
        n_sentences: SplitSizes { train: 50, val: 0, test: 0 },
        entity_rate: 0.8,
        ..SynthSpec::default()
    })
    .unwrap();
    let blocks: Vec<&SentenceBlock> = corpus.train.iter().collect();
    let tagger = Tagger::new(
        corpus.scheme.clone(),
        FeatureConfig::default(),
        Vocab::from_blocks(&corpus.train),
        1,
    )
    .unwrap();
    let (_, history) = tagger
        .train_logged(&blocks, &TrainConfig::for_task(TaskKind::RoleLabeling), 1)
        .unwrap();
    assert!(history.windows(2).all(|w| w[1] < w[0]), "{history:?}");
}

#[test]
fn passive_baseline_learns_default_corpus() {
    let corpus = generate_synthetic(&SynthSpec::default()).unwrap();
    let config = ExperimentConfig::new(TaskKind::ProductExtraction, StrategyKind::Random);
    let a = run_passive(&corpus, &config).unwrap();
    assert!(a.test.f1 >= 0.8, "passive f1 {}", a.test.f1);
    let b = run_passive(&corpus, &config).unwrap();
    assert_eq!(a.test, b.test);
    assert_eq!(a.val_f1, b.val_f1);
}
