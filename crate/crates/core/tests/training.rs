use smlw_core::data::{stratified_split, synth_generate, PatchSet, Split, SynthConfig};
use smlw_core::gradcheck::check_gradients;
use smlw_core::model::{MixerKind, ModelSpec, SpectralVit};
use smlw_core::params::{Binding, ParameterStore};
use smlw_core::tensor::Tensor;
use smlw_core::training::{
    label_smoothing_ce, summarize, train, write_history_csv, Metrics, MultiSeedReport, TrainConfig,
};
use smlw_core::Error;

fn micro(mixer: MixerKind) -> SpectralVit {
    SpectralVit::new(ModelSpec::new([1, 1, 1, 1], [8, 8, 8, 8], mixer, 5, 6, 3)).unwrap()
}

fn sets() -> (PatchSet, PatchSet) {
    let cfg = SynthConfig {
        classes: 3,
        bands: 6,
        height: 12,
        width: 12,
        sigma: 0.02,
        seed: 3,
    };
    let (mut cube, gt) = synth_generate(&cfg).unwrap();
    cube.normalize_per_band();
    let split = stratified_split(&gt, 0.4, 0.1, 0).unwrap();
    (
        PatchSet::build(&cube, &gt, &split.train, 5, Split::Train).unwrap(),
        PatchSet::build(&cube, &gt, &split.val, 5, Split::Val).unwrap(),
    )
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut store = ParameterStore::<f64>::new();
    let z = [0.3, -1.2, 2.0, 0.1, 0.0, 0.5, -0.7, 1.1, 0.9, -0.2, 0.4, 0.6];
    store.insert("logits", Tensor::from_f64(&[3, 4], &z).unwrap());
    let labels = [2usize, 0, 3];
    let loss_of = |p: &ParameterStore<f64>| {
        let mut b = Binding::new(p, true);
        let v = b.param("logits")?;
        let l = label_smoothing_ce(&mut b.tape, v, &labels, 0.1)?;
        Ok::<_, Error>((b.tape.value(l).item(), b.gradients(l)?))
    };
    let (_, grads) = loss_of(&store).unwrap();
    let report = check_gradients(&store, &grads, |p| loss_of(p).map(|r| r.0), 1e-5, None, 0).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn training_reduces_loss() {
    let (tr, val) = sets();
    let model = micro(MixerKind::Ssa);
    let mut p = model.init::<f32>(0);
    let out = train(&model, &mut p, &tr, Some(&val), &quick(12)).unwrap();
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(out.kept_epoch, 12);
    assert!(out.history.iter().all(|r| r.val_oa.is_some()));
}

#[test]
fn verify_mode_training_is_deterministic() {
    let (tr, _) = sets();
    let model = micro(MixerKind::CsaCnn);
    let run = || {
        let mut p = model.init::<f64>(5);
        let out = train(&model, &mut p, &tr, None, &quick(2)).unwrap();
        (
            out.history.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>(),
            p,
        )
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    for ((_, a), (_, b)) in p1.iter().zip(p2.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_updates_running_statistics() {
    let (tr, _) = sets();
    let model = micro(MixerKind::Cnn);
    let mut p = model.init::<f32>(1);
    train(&model, &mut p, &tr, None, &quick(1)).unwrap();
    let rv = p.get("stages.0.blocks.0.cn.bn.running_var").unwrap();
    assert!(rv.data().iter().any(|&v| v != 1.0));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let (tr, _) = sets();
    let model = micro(MixerKind::Csa);
    let mut p = model.init::<f32>(2);
    let out = train(&model, &mut p, &tr, None, &quick(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.smlw");
    out.checkpoint.save(&path).unwrap();
    let back = ParameterStore::<f32>::load(&path).unwrap();
    assert_eq!(back.len(), out.checkpoint.len());
    for ((na, a), (nb, b)) in back.iter().zip(out.checkpoint.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn nan_loss_names_epoch_and_batch() {
    let (tr, _) = sets();
    let model = micro(MixerKind::Ssa);
    let mut p = model.init::<f32>(0);
    p.get_mut("head.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train(&model, &mut p, &tr, None, &quick(3)).unwrap_err();
    assert!(
        matches!(&err, Error::Numeric(m) if m.contains("epoch 1") && m.contains("batch 0")),
        "{err}"
    );
}

#[test]
fn best_val_keeps_highest_epoch() {
    let (tr, val) = sets();
    let model = micro(MixerKind::Ssa);
    let mut p = model.init::<f32>(0);
    let cfg = TrainConfig {
        best_val: true,
        ..quick(4)
    };
    let out = train(&model, &mut p, &tr, Some(&val), &cfg).unwrap();
    let best = out.history.iter().map(|r| r.val_oa.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(out.history[out.kept_epoch - 1].val_oa.unwrap(), best);
}

#[test]
fn history_csv_layout() {
    let (tr, _) = sets();
    let model = micro(MixerKind::Ssa);
    let mut p = model.init::<f32>(0);
    let out = train(&model, &mut p, &tr, None, &quick(2)).unwrap();
    let mut buf = Vec::new();
    write_history_csv(&out.history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_oa");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(','));
}

#[test]
fn metrics_json_keys() {
    let m = Metrics::from_confusion(vec![vec![3, 1], vec![0, 4]])
        .unwrap()
        .with_seed(9);
    let v: serde_json::Value = serde_json::to_value(&m).unwrap();
    for key in ["oa", "aa", "kappa", "per_class", "confusion", "seed"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["seed"], 9);
}

#[test]
fn kappa_is_one_exactly_for_diagonal_confusion() {
    let diag = Metrics::from_confusion(vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
    assert_eq!(diag.kappa, 1.0);
    let off = Metrics::from_confusion(vec![vec![5, 0, 0], vec![0, 2, 1], vec![0, 0, 7]]).unwrap();
    assert!(off.kappa < 1.0);
}

#[test]
fn multi_seed_summary_matches_recomputation() {
    let report = MultiSeedReport::collect(&[1, 2, 3, 4, 5], |seed| {
        let hit = seed + 5;
        Metrics::from_confusion(vec![vec![hit, 10 - hit.min(10)], vec![1, 9]])
    })
    .unwrap();
    assert_eq!(report.runs.len(), 5);
    let oas: Vec<f64> = report.runs.iter().map(|m| m.oa).collect();
    let mean = oas.iter().sum::<f64>() / 5.0;
    let std = (oas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert_eq!(report.oa, summarize(&oas));
    assert_eq!((report.oa.mean, report.oa.std), (mean, std));
    assert_eq!(report.runs[2].seed, Some(3));
}
