use gesa::ablation::run_ablation;
use gesa::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gesa::synth::gen_dataset;
use gesa::train::{evaluate, prepare_all, train};
use gesa::{build_vocab, AblationSet, ModelConfig, ModelParams, RunConfig, TrainConfig};

fn small() -> RunConfig {
    RunConfig {
        model: ModelConfig { hidden: 16, head_size: 4, heads: 2, layers: 1, entity_embed_dim: 8, ..ModelConfig::desk() },
        train: TrainConfig { epochs: 3, batch_size: 8, threads: 2, ..TrainConfig::default() },
    }
}

#[test]
fn training_lowers_the_loss_and_checkpoints_reproduce_predictions() {
    let cfg = small();
    let train_data = gen_dataset(64, 3, 4, 1, 1).unwrap();
    let dev_data = gen_dataset(16, 3, 4, 1, 2).unwrap();
    let vocab = build_vocab(&train_data);
    let train_ex = prepare_all(&train_data, &vocab, &cfg.model).unwrap();
    let dev_ex = prepare_all(&dev_data, &vocab, &cfg.model).unwrap();
    let params = ModelParams::init(&cfg.model, vocab.len(), 0);
    let mut epochs = 0;
    let out = train(params, &train_ex, &dev_ex, &cfg.model, &cfg.train, &mut |_, _| {
        epochs += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs, out.log.len());
    assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    assert_eq!(out.steps, 3 * 8);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint { config: cfg.clone(), vocab: vocab.clone(), params: out.params.clone() };
    save_checkpoint(&path, &ck, Some("test run")).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    let (a, pa) = evaluate(&out.params, &dev_ex, &cfg.model, 1).unwrap();
    let dev_back = prepare_all(&dev_data, &back.vocab, &back.config.model).unwrap();
    let (b, pb) = evaluate(&back.params, &dev_back, &back.config.model, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn ablation_table_starts_with_the_full_model() {
    let mut cfg = small();
    cfg.train.epochs = 1;
    let train_data = gen_dataset(16, 2, 3, 1, 3).unwrap();
    let dev_data = gen_dataset(8, 2, 3, 1, 4).unwrap();
    let local: AblationSet = "LOCAL_E2E".parse().unwrap();
    let table = run_ablation(std::slice::from_ref(&local), &cfg, &train_data, &dev_data, &[0, 1]).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.full().name, "FULL");
    assert_eq!(table.rows[1].ablations, local);
    assert_eq!(table.rows[1].per_seed.len(), 2);
    let text = table.to_string();
    assert!(text.lines().count() == 3 && text.contains("LOCAL_E2E"));
}
