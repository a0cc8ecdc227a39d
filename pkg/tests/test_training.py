"""Optimizer, combined loss, training loop, checkpoints, gradient checks."""

import numpy as np
import pytest

from bundlegen import autodiff as ad
from bundlegen import data as bgdata
from bundlegen import training as tr
from bundlegen.errors import CheckpointError, ConfigError, TrainingError


def small_split(seed=3, users=30, items=60, bundles=20, cats=2):
    cfg = bgdata.SyntheticConfig(users, items, bundles, cats, 0.1, (3, 6), (2, 4), seed)
    ds = bgdata.generate_synthetic(cfg)
    return bgdata.split(ds, seed=seed)


def small_config(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("embed_dim", 8)
    kw.setdefault("d_model", 16)
    kw.setdefault("max_len", 20)
    kw.setdefault("k_range", (2, 6))
    kw.setdefault("batch_users", 8)
    kw.setdefault("batch_p", 8)
    kw.setdefault("batch_q", 8)
    kw.setdefault("patience", 0)
    return tr.TrainConfig(**kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(alpha=1.5).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(n_heads=5).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(learning_rate=0).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(k_range=(1, 4)).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(instruction_mode="bogus").validate()
    tr.TrainConfig().validate()


def test_adam_matches_handrolled_oracle_on_quadratic():
    # minimize f(w) = w^2 from w=1; oracle follows the reference update rule
    w = ad.parameter(np.array([1.0]))
    opt = tr.Adam({"w": w}, lr=0.1)
    w_ref, m_ref, v_ref = 1.0, 0.0, 0.0
    for t in range(1, 11):
        opt.zero_grad()
        ad.sumsq(w).backward()
        opt.step()
        g = 2.0 * w_ref
        m_ref = 0.9 * m_ref + 0.1 * g
        v_ref = 0.999 * v_ref + 0.001 * g * g
        w_ref -= 0.1 * (m_ref / (1 - 0.9**t)) / (np.sqrt(v_ref / (1 - 0.999**t)) + 1e-8)
        assert w.value[0] == pytest.approx(w_ref, abs=1e-12)


def test_combined_loss_values_and_regularizer():
    params = {"a": ad.parameter(np.array([1.0, 2.0])), "b": ad.parameter(np.zeros(3))}
    total = tr.combined_loss(
        ad.constant(2.0), ad.constant(1.0), ad.constant(3.0), params, 0.0
    )
    assert total.item() == pytest.approx(6.0)
    total = tr.combined_loss(
        ad.constant(0.0), ad.constant(0.0), ad.constant(0.0), params, 0.5
    )
    assert total.item() == pytest.approx(0.5 * 5.0)
    rng = np.random.default_rng(0)
    params = {f"p{i}": ad.parameter(rng.normal(size=(4, 3))) for i in range(3)}
    lam = 0.37
    total = tr.combined_loss(
        ad.constant(0.0), ad.constant(0.0), ad.constant(0.0), params, lam
    )
    oracle = lam * sum(float(np.sum(p.value**2)) for p in params.values())
    assert total.item() == pytest.approx(oracle, abs=1e-10)


def test_combined_loss_rejects_nonfinite_naming_component():
    with pytest.raises(TrainingError, match="generation"):
        tr.combined_loss(
            ad.constant(1.0), ad.constant(np.nan), ad.constant(0.0), {}, 0.0
        )


def test_zero_params_regularizer_is_zero():
    params = {"z": ad.parameter(np.zeros(5))}
    total = tr.combined_loss(
        ad.constant(1.0), ad.constant(1.0), ad.constant(1.0), params, 123.0
    )
    assert total.item() == pytest.approx(3.0)


def test_train_zero_epochs_returns_init_state():
    split = small_split()
    cfg = small_config(epochs=1)
    state = tr.TrainState(split, cfg)
    before = state.snapshot_params()
    # epochs already satisfied: train() with epoch == config.epochs is a no-op
    state.epoch = cfg.epochs
    state = tr.train(split, cfg, state=state)
    for k, v in state.snapshot_params().items():
        assert np.array_equal(v, before[k])


def test_train_deterministic_same_seed():
    split = small_split()
    cfg = small_config(epochs=2, seed=11)
    s1 = tr.train(split, cfg)
    s2 = tr.train(split, cfg)
    for k in s1.params:
        assert np.array_equal(s1.params[k].value, s2.params[k].value)
    assert s1.history_rows == s2.history_rows


def test_loss_decreases_on_small_run():
    split = small_split()
    cfg = small_config(epochs=12, seed=5)
    state = tr.train(split, cfg)
    first = state.history_rows[0][4]
    last = np.mean([r[4] for r in state.history_rows[-3:]])
    assert last < first


def test_lambda_shrinks_parameter_norm_after_50_epochs():
    split = small_split(users=20, items=40, bundles=12)
    norms = {}
    for lam in (0.0, 1e-2):
        cfg = small_config(epochs=50, seed=2, lambda_reg=lam, d_model=8, batch_users=16)
        state = tr.train(split, cfg)
        norms[lam] = sum(
            float(np.sum(p.value**2)) for p in state.params.values()
        )
    assert norms[1e-2] < norms[0.0]


def test_checkpoint_roundtrip_exact(tmp_path):
    split = small_split()
    cfg = small_config(epochs=2, seed=9)
    state = tr.train(split, cfg)
    path = tmp_path / "ck.bin"
    tr.save_checkpoint(state, path)
    ckpt = tr.load_checkpoint(path)
    assert ckpt.version == tr.CHECKPOINT_VERSION
    assert ckpt.config == state.config
    assert ckpt.epoch == state.epoch
    restored = tr.state_from_checkpoint(ckpt, split)
    for k in state.params:
        assert np.array_equal(restored.params[k].value, state.params[k].value)
        assert np.array_equal(restored.adam.m[k], state.adam.m[k])
        assert np.array_equal(restored.adam.v[k], state.adam.v[k])
    assert restored.adam.t == state.adam.t
    assert restored.rng.bit_generator.state == state.rng.bit_generator.state


def test_checkpoint_truncated_file_clean_error(tmp_path):
    split = small_split()
    cfg = small_config(epochs=1)
    state = tr.train(split, cfg)
    path = tmp_path / "ck.bin"
    tr.save_checkpoint(state, path)
    data = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        tr.load_checkpoint(tmp_path / "cut.bin")


def test_checkpoint_bad_magic_and_version(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        tr.load_checkpoint(p)
    split = small_split()
    state = tr.train(split, small_config(epochs=1))
    good = tmp_path / "good.bin"
    tr.save_checkpoint(state, good)
    blob = bytearray(good.read_bytes())
    blob[8] = 99  # version field
    bad = tmp_path / "badver.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="99"):
        tr.load_checkpoint(bad)


def test_resume_equals_uninterrupted(tmp_path):
    split = small_split()
    cfg_full = small_config(epochs=4, seed=13)
    full = tr.train(split, cfg_full)

    cfg_half = small_config(epochs=2, seed=13)
    half = tr.train(split, cfg_half)
    path = tmp_path / "half.bin"
    tr.save_checkpoint(half, path)
    resumed = tr.state_from_checkpoint(tr.load_checkpoint(path), split)
    resumed.config = cfg_full
    resumed = tr.train(split, cfg_full, state=resumed)

    for k in full.params:
        assert np.array_equal(full.params[k].value, resumed.params[k].value), k
    assert full.adam.t == resumed.adam.t


def test_save_is_bit_identical_across_runs(tmp_path):
    split = small_split()
    cfg = small_config(epochs=2, seed=21)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    tr.save_checkpoint(tr.train(split, cfg), a)
    tr.save_checkpoint(tr.train(split, cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_gradient_check_tiny_model():
    # 20 items, d=8, d_model=8, 1 block, 1 head: the gradient-suite shape
    cfg = bgdata.SyntheticConfig(15, 20, 8, 2, 0.1, (3, 5), (2, 3), seed=4)
    ds = bgdata.generate_synthetic(cfg)
    split = bgdata.split(ds, seed=4)
    tcfg = tr.TrainConfig(
        epochs=1, embed_dim=8, d_model=8, n_blocks=1, n_heads=1,
        max_len=12, k_range=(2, 4), batch_users=4, batch_p=4, batch_q=4,
        patience=0, seed=0,
    )
    state = tr.TrainState(split, tcfg)
    report = tr.gradient_check(state, epsilon=1e-4)
    assert report["quadratic"]["analytic"] == pytest.approx(6.0, abs=1e-6)
    assert report["quadratic"]["numeric"] == pytest.approx(6.0, abs=1e-6)
    for name in ("clustering", "generation", "ranking_cosine", "combined_r0"):
        assert report[name]["max_rel_err"] < 1e-3, (name, report[name])


def test_write_loss_csv(tmp_path):
    rows = [(1, 0.5, 4.0, 0.7, 5.2), (2, 0.4, 3.0, 0.6, 4.0)]
    path = tmp_path / "loss.csv"
    tr.write_loss_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,L_C,L_G,L_R,total"
    assert lines[1].startswith("1,0.5,4,0.7,5.2")
