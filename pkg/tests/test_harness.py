import dataclasses
import math

import numpy as np
import pytest

from metalabel.data import Dataset, make_synthetic, split_dataset
from metalabel.engine import Tensor
from metalabel.harness import (
    ConfigError,
    METRICS_COLUMNS,
    TrainConfig,
    baseline_ce,
    build_dataset,
    clone_extractor,
    derive_seeds,
    evaluate,
    lr_at,
    read_metrics_csv,
    run_experiment,
    warmup_phase,
    write_metrics_csv,
)
from metalabel.nn import Mlp, init_mlp


def small_config(**kw) -> TrainConfig:
    base = dict(
        seed=0, n=480, dims=6, classes=3, center_scale=3.0,
        train_frac=0.75, meta_frac=0.125, test_frac=0.125,
        noise_kind="feature-dependent", noise_ratio=0.4,
        hidden=[8, 6], batch_size=32, warmup_epochs=3, total_epochs=10,
        lr_schedule=[[0, 1e-2], [6, 1e-3]], meta_lr=1e-2, oracle_epochs=15,
    )
    base.update(kw)
    return TrainConfig(**base)


def rows_equal(a, b) -> bool:
    fields = [f.name for f in dataclasses.fields(a) if f.name != "wall_time"]
    return all(getattr(a, f) == getattr(b, f)
               or (isinstance(getattr(a, f), float)
                   and math.isnan(getattr(a, f)) and math.isnan(getattr(b, f)))
               for f in fields)


# -- configuration --------------------------------------------------------------


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        small_config(warmup_epochs=10, total_epochs=10)
    with pytest.raises(ConfigError):
        small_config(lr_schedule=[[5, 1e-2]])
    with pytest.raises(ConfigError):
        small_config(lr_schedule=[[0, 1e-2], [0, 1e-3]])
    with pytest.raises(ConfigError):
        small_config(noise_kind="salt-and-pepper")
    with pytest.raises(ConfigError):
        small_config(noise_ratio=1.2)
    with pytest.raises(ConfigError):
        small_config(train_frac=0.9)  # fractions no longer sum to 1
    with pytest.raises(ConfigError):
        small_config(unlabeled_fraction=1.0)


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = small_config(unlabeled_fraction=0.25)
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg
    raw = cfg.to_dict()
    raw["extra"] = 1
    with pytest.raises(ConfigError, match="extra"):
        TrainConfig.from_dict(raw)
    raw = cfg.to_dict()
    raw["noise"]["ratioo"] = 0.4
    del raw["noise"]["ratio"]
    with pytest.raises(ConfigError, match="ratioo"):
        TrainConfig.from_dict(raw)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"schema_version": 2})


def test_config_hash_tracks_content():
    a, b = small_config(), small_config()
    assert a.config_hash() == b.config_hash()
    c = small_config(seed=1)
    assert a.config_hash() != c.config_hash()


def test_lr_schedule_lookup():
    sched = [[0, 1e-2], [6, 1e-3], [8, 1e-4]]
    assert lr_at(sched, 0) == 1e-2
    assert lr_at(sched, 5) == 1e-2
    assert lr_at(sched, 6) == 1e-3
    assert lr_at(sched, 9) == 1e-4


# -- evaluation -----------------------------------------------------------------


def fixture_dataset() -> Dataset:
    # 10-row hand fixture over 2 classes in 2 dims
    x = np.array([[3.0, 0.0]] * 5 + [[0.0, 3.0]] * 5)
    y = np.array([0] * 5 + [1] * 5)
    split = np.array(["train"] * 4 + ["meta"] * 3 + ["test"] * 3, dtype="<U5")
    return Dataset(x, y, y.copy(), np.ones(10, bool), split, 2)


def test_evaluate_perfect_predictor():
    ds = fixture_dataset()
    net = Mlp([(Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))])
    assert evaluate(net, ds, "test") == 1.0
    assert evaluate(net, ds, "meta") == 1.0
    assert evaluate(net, ds, "train") == 1.0


def test_evaluate_constant_predictor_on_balanced_classes():
    ds = make_synthetic(400, classes=4, dims=6, seed=0)
    ds = split_dataset(ds, 0.8, 0.1, 0.1, seed=1)
    zero = Mlp([(Tensor(np.zeros((6, 4))), Tensor(np.zeros((1, 4))))])
    assert evaluate(zero, ds, "test") == pytest.approx(0.25, abs=1e-12)


def test_evaluate_matches_hand_count():
    ds = fixture_dataset()
    # flip one test row's clean label; the predictor now misses 1 of 3
    y = ds.y_clean.copy()
    y[-1] = 0
    ds = Dataset(ds.x, y, y.copy(), ds.labeled, ds.split, 2)
    net = Mlp([(Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))])
    assert evaluate(net, ds, "test") == pytest.approx(2 / 3)


def test_evaluate_rejects_empty_split():
    ds = make_synthetic(100, classes=2, dims=3, seed=0)
    ds = split_dataset(ds, 0.9, 0.1, 0.0, seed=0)
    net = init_mlp([3, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        evaluate(net, ds, "test")


# -- warm-up --------------------------------------------------------------------


def test_warmup_zero_epochs_returns_initialization():
    cfg = small_config(warmup_epochs=0, noise_ratio=0.0, noise_kind="uniform")
    ds = build_dataset(cfg)
    theta = warmup_phase(cfg, ds)
    init = init_mlp([cfg.dims] + cfg.hidden + [cfg.classes],
                    np.random.default_rng(derive_seeds(cfg.seed)["init"]))
    for (w, b), (wi, bi) in zip(theta.layers, init.layers):
        assert np.array_equal(w.value, wi.value)
        assert np.array_equal(b.value, bi.value)


def test_warmup_is_deterministic():
    cfg = small_config(noise_ratio=0.2)
    ds = build_dataset(cfg)
    a, b = warmup_phase(cfg, ds), warmup_phase(cfg, ds)
    for (wa, _), (wb, _) in zip(a.layers, b.layers):
        assert np.array_equal(wa.value, wb.value)


def test_warmup_fits_clean_separable_blobs():
    cfg = small_config(noise_ratio=0.0, noise_kind="uniform", warmup_epochs=30,
                       total_epochs=31, center_scale=6.0)
    ds = build_dataset(cfg)
    theta = warmup_phase(cfg, ds)
    assert evaluate(theta, ds, "train") >= 0.95


def test_warmup_requires_labeled_rows():
    cfg = small_config()
    ds = build_dataset(cfg)
    all_unlabeled = Dataset(ds.x, ds.y_clean, ds.y_noisy,
                            ds.split != "train", ds.split, ds.n_classes)
    with pytest.raises(ValueError):
        warmup_phase(cfg, all_unlabeled)


def test_clone_extractor_shape():
    net = init_mlp([6, 8, 5, 3], np.random.default_rng(0))
    ext = clone_extractor(net)
    assert ext.n_features == 5
    assert len(ext.layers) == 2


# -- full runs --------------------------------------------------------------------


def test_run_experiment_is_deterministic():
    cfg = small_config()
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert len(a.log) == len(b.log)
    assert all(rows_equal(x, y) for x, y in zip(a.log, b.log))
    assert a.best_epoch == b.best_epoch
    for (wa, ba), (wb, bb) in zip(a.theta_best.layers, b.theta_best.layers):
        assert np.array_equal(wa.value, wb.value)
        assert np.array_equal(ba.value, bb.value)


def test_epoch_accounting_and_phases():
    cfg = small_config()
    res = run_experiment(cfg)
    assert len(res.log) == cfg.total_epochs
    assert [r.epoch for r in res.log] == list(range(cfg.total_epochs))
    phases = [r.phase for r in res.log]
    assert phases[:cfg.warmup_epochs] == ["warmup"] * cfg.warmup_epochs
    assert phases[cfg.warmup_epochs:] == ["phase2"] * (cfg.total_epochs - cfg.warmup_epochs)


def test_model_selection_invariant():
    cfg = small_config(seed=3)
    res = run_experiment(cfg)
    metas = [r.meta_acc for r in res.log]
    assert res.best_meta_acc == max(metas)
    assert res.best_epoch == int(np.argmax(metas))  # earliest epoch wins ties


def test_zero_meta_lr_freezes_labels():
    cfg = small_config(meta_lr=0.0)
    res = run_experiment(cfg)
    p2 = [r for r in res.log if r.phase == "phase2"]
    assert all(r.label_diff_mean == 0.0 for r in p2)
    assert all(r.label_diff_var == 0.0 for r in p2)


def test_phase2_does_no_harm_on_clean_data():
    # enough rows that one test sample is well under the 0.01 allowance
    cfg = small_config(n=1000, noise_ratio=0.0, noise_kind="uniform",
                       warmup_epochs=5, total_epochs=20,
                       lr_schedule=[[0, 1e-2], [10, 1e-3]])
    res = run_experiment(cfg)
    warm_end = res.log[cfg.warmup_epochs - 1].test_acc
    assert res.log[-1].test_acc >= warm_end - 0.01


def test_meta_data_cleanliness_is_load_bearing():
    cfg = small_config(noise_ratio=0.6, total_epochs=14, seed=5)
    clean_ds = build_dataset(cfg)
    rng = np.random.default_rng(99)
    poisoned = clean_ds.copy()
    meta_rows = poisoned.indices("meta")
    flips = rng.integers(1, poisoned.n_classes, size=meta_rows.size)
    bad = (poisoned.y_clean[meta_rows] + flips) % poisoned.n_classes
    poisoned.y_clean[meta_rows] = bad
    poisoned.y_noisy[meta_rows] = bad
    res_clean = run_experiment(cfg, dataset=clean_ds)
    res_poisoned = run_experiment(cfg, dataset=poisoned)
    assert res_poisoned.test_acc_selected < res_clean.test_acc_selected


def test_phase2_batch_count_per_epoch(monkeypatch):
    import metalabel.harness as hmod

    calls = []
    real = hmod.meta_step

    def counting(*args, **kw):
        calls.append(1)
        return real(*args, **kw)

    monkeypatch.setattr(hmod, "meta_step", counting)
    cfg = small_config(warmup_epochs=3, total_epochs=4)  # exactly one phase-2 epoch
    run_experiment(cfg)
    n_train = round(0.75 * cfg.n)
    assert len(calls) == math.ceil(n_train / cfg.batch_size)


def test_method_matches_baseline_on_clean_default_config():
    cfg = TrainConfig(seed=0, noise_kind="uniform", noise_ratio=0.0)
    ds = build_dataset(cfg)
    method = run_experiment(cfg, dataset=ds)
    base = baseline_ce(cfg, dataset=ds)
    assert abs(method.test_acc_selected - base.test_acc_final) <= 0.01


def test_unlabeled_mode_completes_without_guard_firing():
    cfg = small_config(unlabeled_fraction=0.5)
    res = run_experiment(cfg)
    assert len(res.log) == cfg.total_epochs
    ds = build_dataset(cfg)
    assert int((~ds.labeled).sum()) == round(0.5 * ds.indices("train").size)


def test_batch_size_must_fit_meta_split():
    cfg = small_config(batch_size=100)  # meta split has 60 rows
    with pytest.raises(ConfigError, match="meta split"):
        run_experiment(cfg)


def test_baseline_is_deterministic_and_tagged():
    cfg = small_config()
    a = baseline_ce(cfg)
    b = baseline_ce(cfg)
    assert all(rows_equal(x, y) for x, y in zip(a.log, b.log))
    assert all(r.phase == "baseline" for r in a.log)
    assert len(a.log) == cfg.total_epochs


def test_run_abort_carries_epoch_context():
    cfg = small_config()

    def boom(row):
        raise KeyboardInterrupt  # not caught by the context wrapper

    with pytest.raises(KeyboardInterrupt):
        run_experiment(cfg, on_epoch=boom)


# -- metrics CSV ------------------------------------------------------------------


def test_metrics_csv_roundtrip(tmp_path):
    cfg = small_config(total_epochs=6, warmup_epochs=2)
    res = run_experiment(cfg)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(res.log, str(path))
    header = path.read_text().splitlines()[0]
    assert header == ",".join(METRICS_COLUMNS)
    back = read_metrics_csv(str(path))
    assert all(rows_equal(x, y) for x, y in zip(res.log, back))
    assert [r.wall_time for r in back] == [r.wall_time for r in res.log]


# -- checkpoint / resume ------------------------------------------------------------


def test_checkpoint_resume_is_bit_exact(tmp_path):
    cfg = small_config(seed=7)
    ds = build_dataset(cfg)
    cp = str(tmp_path / "checkpoint.json")

    class Stop(Exception):
        pass

    def stop_mid_run(row):
        if row.epoch == 5:
            raise Stop

    with pytest.raises(Stop):
        run_experiment(cfg, dataset=ds, checkpoint_path=cp, on_epoch=stop_mid_run)
    resumed = run_experiment(cfg, dataset=ds, checkpoint_path=cp, resume=True)
    straight = run_experiment(cfg, dataset=ds)

    assert len(resumed.log) == len(straight.log)
    assert all(rows_equal(a, b) for a, b in zip(resumed.log, straight.log))
    assert resumed.best_epoch == straight.best_epoch
    assert resumed.test_acc_selected == straight.test_acc_selected
    for (wa, ba), (wb, bb) in zip(resumed.theta_final.layers,
                                  straight.theta_final.layers):
        assert np.array_equal(wa.value, wb.value)
        assert np.array_equal(ba.value, bb.value)
    assert np.array_equal(resumed.labeler.weight.value,
                          straight.labeler.weight.value)


def test_resume_requires_checkpoint(tmp_path):
    cfg = small_config()
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg, checkpoint_path=str(tmp_path / "nope.json"), resume=True)


def test_checkpoint_rejects_other_config(tmp_path):
    from metalabel.harness import load_checkpoint

    cfg = small_config(total_epochs=6, warmup_epochs=2)
    cp = str(tmp_path / "c.json")
    run_experiment(cfg, checkpoint_path=cp)
    with pytest.raises(ValueError):
        load_checkpoint(cp, small_config(seed=123, total_epochs=6, warmup_epochs=2))