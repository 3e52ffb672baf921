use langgrasp_core::autonet::{build_forward, Vocabulary, init_params, ArchConfig, ForwardMode, Graph, ModelParams};
use langgrasp_core::synthgen::{generate_dataset, DatasetConfig};
use langgrasp_core::training::{
    epochs_to_convergence, train, train_stage1, train_stage2, Checkpoint, EpochRecord, MapLosses, TrainConfig, TrainData,
    TrainLog, TrainMode, TrainState,
};
use proptest::prelude::*;

fn corpus(n_train: usize, seed: u64) -> (TrainData, ArchConfig) {
    let (data, arch, _) = corpus_vocab(n_train, seed);
    (data, arch)
}

fn corpus_vocab(n_train: usize, seed: u64) -> (TrainData, ArchConfig, Vocabulary) {
    let ds = generate_dataset(&DatasetConfig {
        seed,
        n_train,
        n_val: 4,
        n_test_seen: 4,
        n_test_unseen: 4,
        ..DatasetConfig::default()
    })
    .unwrap();
    let vocab = ds.manifest.vocabulary.clone();
    let data = TrainData::from_split(&ds, "train", &vocab).unwrap();
    let arch = ArchConfig::new(vocab.len());
    (data, arch, vocab)
}

/// Keeps one fixed expression per scene so a run can memorize the set.
fn single_expression(mut data: TrainData) -> TrainData {
    for item in &mut data.items {
        item.expressions.truncate(1);
    }
    data
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        unk_rate: 0.0,
        ..TrainConfig::default()
    }
}

fn head_bytes(p: &ModelParams) -> Vec<(String, Vec<u64>)> {
    p.names()
        .iter()
        .zip(p.tensors())
        .filter(|(n, _)| n.starts_with("head_") || n.starts_with("refine."))
        .map(|(n, t)| (n.clone(), t.values.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_stage1_epochs_is_a_no_op() {
    let (data, arch) = corpus(4, 1);
    let p = init_params(&arch, 0).unwrap();
    let cfg = TrainConfig { stage1_epochs: 0, ..TrainConfig::default() };
    let (after, log) = train_stage1(&data, p.clone(), &arch, &cfg).unwrap();
    assert_eq!(after, p);
    assert!(log.records.is_empty());
}

#[test]
fn stage1_leaves_grasp_heads_byte_identical() {
    let (data, arch) = corpus(200, 2);
    let p = init_params(&arch, 3).unwrap();
    let cfg = TrainConfig { stage1_epochs: 1, ..TrainConfig::default() };
    let (after, log) = train_stage1(&data, p.clone(), &arch, &cfg).unwrap();
    assert_eq!(head_bytes(&after), head_bytes(&p));
    assert_ne!(after.get("enc1.weight"), p.get("enc1.weight"));
    assert_eq!(log.records.len(), 1);
    assert_eq!(log.records[0].stage, 1);
    assert!(log.records[0].val_top1.is_none());
}

#[test]
fn empty_data_is_rejected() {
    let (_, arch) = corpus(2, 4);
    let p = init_params(&arch, 0).unwrap();
    let cfg = TrainConfig::default();
    assert!(train_stage1(&TrainData::default(), p.clone(), &arch, &cfg).is_err());
    assert!(train_stage2(&TrainData::default(), p, &arch, None, &cfg).is_err());
}

#[test]
fn stage1_overfits_masks_on_ten_scenes() {
    let (data, arch) = corpus(10, 5);
    let data = single_expression(data);
    let cfg = TrainConfig { stage1_epochs: 150, ..overfit_config() };
    let (_, log) = train_stage1(&data, init_params(&arch, 6).unwrap(), &arch, &cfg).unwrap();
    let iou: Vec<f64> = log.records.iter().map(|r| r.train_mask_iou).collect();
    // 5-epoch window means never fall back over the last stretch of the run
    let windows: Vec<f64> = iou.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let tail = &windows[windows.len() - 30..];
    for pair in tail.windows(2) {
        assert!(pair[1] >= pair[0] - 0.02, "window mean fell: {pair:?}");
    }
    assert!(*iou.last().unwrap() >= 0.9, "final mask IoU {}", iou.last().unwrap());
}

#[test]
fn stage2_overfits_total_loss_on_ten_scenes() {
    let (data, arch) = corpus(10, 7);
    let data = single_expression(data);
    let mut cfg = TrainConfig { stage2_epochs: 200, ..overfit_config() };
    cfg.loss.alpha = 20.0;
    let (_, log) = train_stage2(&data, init_params(&arch, 8).unwrap(), &arch, None, &cfg).unwrap();
    let first = log.records[0].total_loss;
    let best = log.records.iter().map(|r| r.total_loss).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.1 * first, "loss {first} -> {best}");
    assert!(log.records.iter().all(|r| r.stage == 2));
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let (data, arch, vocab) = corpus_vocab(6, 9);
    let cfg = TrainConfig { stage1_epochs: 1, stage2_epochs: 1, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let mut st = TrainState::new(init_params(&arch, 10).unwrap());
        train(&mut st, &arch, &data, None, &cfg, |_| Ok(())).unwrap();
        let path = dir.path().join(format!("run{run}.gmtc"));
        Checkpoint::new(arch.clone(), vocab.clone(), st, Some(cfg), data.scene_ids()).save(&path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (data, arch, vocab) = corpus_vocab(6, 11);
    let cfg = TrainConfig { stage1_epochs: 2, stage2_epochs: 2, ..TrainConfig::default() };
    let mut full = TrainState::new(init_params(&arch, 12).unwrap());
    train(&mut full, &arch, &data, None, &cfg, |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.gmtc");
    let mut first = TrainState::new(init_params(&arch, 12).unwrap());
    // stop after epoch 3, inside stage II
    let short = TrainConfig { stage2_epochs: 1, ..cfg };
    train(&mut first, &arch, &data, None, &short, |s| {
        Checkpoint::new(arch.clone(), vocab.clone(), s.clone(), Some(cfg), vec![]).save(&path)
    })
    .unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().state;
    assert_eq!(resumed.epoch, 3);
    train(&mut resumed, &arch, &data, None, &cfg, |_| Ok(())).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.log, full.log);
}

#[test]
fn single_stage_runs_without_pooling() {
    let (data, arch) = corpus(4, 13);
    let plain = ArchConfig { mask_pooling: false, ..arch.clone() };
    let p = init_params(&plain, 14).unwrap();
    // with pooling disabled the grasp branch reads the fused features directly,
    // i.e. the mask is taken as identically one
    let item = &data.items[0];
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, &plain, &p, &item.image, &item.expressions[0].tokens, ForwardMode::NO_POOLING).unwrap();
    assert_eq!(g.value(nodes.pooled), g.value(nodes.fused));

    let cfg = TrainConfig { stage1_epochs: 1, stage2_epochs: 1, mode: TrainMode::SingleStage, ..TrainConfig::default() };
    let mut st = TrainState::new(p);
    train(&mut st, &plain, &data, None, &cfg, |_| Ok(())).unwrap();
    assert_eq!(st.log.records.len(), 2);
    assert!(st.log.records.iter().all(|r| r.stage == 2));
    // the pooled architecture is refused for single-stage training
    let mut st = TrainState::new(init_params(&arch, 14).unwrap());
    assert!(train(&mut st, &arch, &data, None, &cfg, |_| Ok(())).is_err());
}

#[test]
fn fraction_subsets_are_nested() {
    let (data, _) = corpus(40, 15);
    let ids = |f: f64| data.fraction(f, 3).unwrap().scene_ids();
    let sets: Vec<Vec<String>> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|f| ids(*f)).collect();
    for pair in sets.windows(2) {
        assert!(pair[0].iter().all(|id| pair[1].contains(id)));
        assert!(pair[0].len() < pair[1].len());
    }
    assert_eq!(sets[4].len(), 40);
    assert_eq!(sets[0].len(), 8);
}

fn log_of(vals: &[f64]) -> TrainLog {
    TrainLog {
        records: vals
            .iter()
            .enumerate()
            .map(|(i, v)| EpochRecord {
                epoch: i + 1,
                stage: 2,
                total_loss: 0.0,
                mask_loss: 0.0,
                map_losses: MapLosses::default(),
                train_mask_iou: 0.0,
                val_top1: Some(*v),
            })
            .collect(),
    }
}

/// Direct scan: the first epoch e such that none of the next `patience`
/// scores beats the best score seen so far by `tol`.
fn scan_oracle(vals: &[f64], patience: usize, tol: f64) -> usize {
    'outer: for e in 0..vals.len() {
        if e + patience >= vals.len() {
            break;
        }
        let mut best = vals[..=e].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in &vals[e + 1..=e + patience] {
            if v - best >= tol {
                continue 'outer;
            }
            best = best.max(*v);
        }
        return e + 1;
    }
    vals.len()
}

proptest! {
    #[test]
    fn convergence_matches_scan_oracle(vals in prop::collection::vec(0.0f64..1.0, 1..40), patience in 1usize..6) {
        let log = log_of(&vals);
        prop_assert_eq!(epochs_to_convergence(&log, patience, 0.01).unwrap(), scan_oracle(&vals, patience, 0.01));
    }
}

#[test]
fn convergence_examples() {
    let mut flat: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
    flat.extend([0.5; 6]);
    assert_eq!(epochs_to_convergence(&log_of(&flat), 3, 1e-3).unwrap(), 10);
    let rising: Vec<f64> = (1..=12).map(|i| i as f64 * 0.05).collect();
    assert_eq!(epochs_to_convergence(&log_of(&rising), 3, 1e-3).unwrap(), 12);
}
