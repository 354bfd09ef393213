use uad_core::dataset::{build_manifest, split_protocol, Label, Manifest, ProtocolId, ProtocolSplit, SplitPart, SynthConfig};
use uad_core::eval::score_split;
use uad_core::parallel::Execution;
use uad_core::trainer::{load_examples, train, Checkpoint, Example, Model, TrainConfig, Variant};

/// 32 training samples (8 live) and small dev/test parts on disjoint identities.
fn small() -> (Manifest, ProtocolSplit) {
    let manifest = build_manifest(&SynthConfig { num_ids: 6, frames_per_video: 3, seed: 2, ..Default::default() }).unwrap();
    let mut split = split_protocol(&manifest, ProtocolId::P1, None).unwrap();
    let pick = |ids: std::ops::Range<u32>, lives: usize, spoofs: usize| -> Vec<String> {
        let of = |label: Label, n: usize| {
            let ids = ids.clone();
            manifest.records.iter().filter(move |r| ids.contains(&r.identity_id) && r.label == label).take(n)
        };
        of(Label::Live, lives).chain(of(Label::Spoof, spoofs)).map(|r| r.sample_id.clone()).collect()
    };
    split.train = pick(0..3, 8, 24);
    split.eval = pick(3..4, 2, 10);
    split.test = pick(4..6, 4, 16);
    (manifest, split)
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, seed, ..Default::default() }
}

#[test]
fn same_seed_gives_identical_traces() {
    let (m, split) = small();
    assert_eq!(split.train.len(), 32);
    let a = train(&m, &split, &config(7)).unwrap();
    let b = train(&m, &split, &config(7)).unwrap();
    assert_eq!(a.trace.to_text(), b.trace.to_text());
    assert_eq!(a.trace.epochs.len(), 2);
}

#[test]
fn sequential_and_parallel_runs_agree_bitwise() {
    let (m, split) = small();
    let seq = train(&m, &split, &TrainConfig { execution: Execution::Sequential, ..config(7) }).unwrap();
    let par = train(&m, &split, &TrainConfig { execution: Execution::Parallel, ..config(7) }).unwrap();
    assert_eq!(seq.trace, par.trace);
}

#[test]
fn lambda_changes_the_trace() {
    let (m, split) = small();
    let with = train(&m, &split, &config(7)).unwrap();
    let without = train(&m, &split, &TrainConfig { lambda: 0.0, ..config(7) }).unwrap();
    assert_ne!(with.trace.to_text(), without.trace.to_text());
    // λ = 0 leaves the total equal to the classification term
    assert!(without.trace.epochs.iter().all(|e| e.total == e.cls));
}

fn batch_of(m: &Manifest, split: &ProtocolSplit, cfg: &TrainConfig) -> Vec<Example> {
    load_examples(m, &split.train[..4], cfg).unwrap()
}

#[test]
fn fusion_gets_no_gradient_without_the_ufm_term() {
    let (m, split) = small();
    let cfg = TrainConfig { variant: Variant::WoUkm, ..config(1) };
    let (model, store) = Model::new(&cfg, 32).unwrap();
    let examples = batch_of(&m, &split, &cfg);
    let batch: Vec<&Example> = examples.iter().collect();
    let out = model.batch(&store, &batch).unwrap();
    assert_eq!(out.ufm, 0.0);
    for id in model.fusion.params() {
        assert!(out.grads.get(id).is_none_or(|g| g.as_slice().iter().all(|&v| v == 0.0)));
    }

    // the full variant does train the fusion block
    let full = TrainConfig { variant: Variant::Full, ..cfg };
    let (model, store) = Model::new(&full, 32).unwrap();
    let out = model.batch(&store, &batch).unwrap();
    assert!(model.fusion.params().iter().any(|&id| out.grads.get(id).is_some_and(|g| g.as_slice().iter().any(|&v| v != 0.0))));
}

#[test]
fn checkpoint_round_trip_reproduces_scores_bitwise() {
    let (m, split) = small();
    let outcome = train(&m, &split, &TrainConfig { epochs: 1, ..config(5) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, outcome.best.config);
    assert_eq!(loaded.rng, outcome.best.rng);

    let before = score_split(&outcome.best, &m, &split, SplitPart::Test, Execution::Parallel).unwrap();
    let after = score_split(&loaded, &m, &split, SplitPart::Test, Execution::Parallel).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.len(), split.test.len());

    // the restored rng continues the same stream
    use rand::Rng;
    let (mut a, mut b) = (outcome.best.rng.restore().unwrap(), loaded.rng.restore().unwrap());
    assert_eq!(a.random::<u64>(), b.random::<u64>());
}

#[test]
fn corrupt_and_mismatched_checkpoints_are_rejected() {
    let (m, split) = small();
    let outcome = train(&m, &split, &TrainConfig { epochs: 1, ..config(5) }).unwrap();
    let mut bytes = Vec::new();
    outcome.best.write_to(&mut bytes).unwrap();
    assert_eq!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).unwrap_err().kind(), "format");
    assert_eq!(Checkpoint::read_from(&mut &b"NOTACKPT........"[..]).unwrap_err().kind(), "format");

    let other = build_manifest(&SynthConfig { num_ids: 6, frames_per_video: 3, seed: 9, ..Default::default() }).unwrap();
    let err = score_split(&outcome.best, &other, &split, SplitPart::Test, Execution::Parallel).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn scoring_handles_empty_parts_and_unknown_ids() {
    let (m, mut split) = small();
    let outcome = train(&m, &split, &TrainConfig { epochs: 1, ..config(5) }).unwrap();
    split.test.clear();
    assert!(score_split(&outcome.best, &m, &split, SplitPart::Test, Execution::Parallel).unwrap().is_empty());
    split.test.push("no-such-sample".into());
    let err = score_split(&outcome.best, &m, &split, SplitPart::Test, Execution::Parallel).unwrap_err();
    assert_eq!(err.kind(), "lookup");
}

#[test]
fn empty_train_part_is_a_contract_error() {
    let (m, mut split) = small();
    split.train.clear();
    assert_eq!(train(&m, &split, &config(1)).unwrap_err().kind(), "contract");
}
