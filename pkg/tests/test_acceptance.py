"""Acceptance suite: one test per release criterion, each printing PASS/FAIL.

Criteria 1-5 and 9-10 are cheap; criteria 6-8 share a module-scoped fixture
that trains the planted-structure dataset over five seeds (plus five
ablation trainings), which dominates the suite's runtime.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from bundlegen import autodiff as ad
from bundlegen import data as bgdata
from bundlegen import evaluation as bgeval
from bundlegen import generator as bggen
from bundlegen import itemgraph as bgig
from bundlegen import retrieval as bgret
from bundlegen import training as bgtrain


def report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name} failed: {detail}"


# -- criterion 1: co-occurrence sparse == dense oracle, 50 random Z ---------


def test_criterion_1_cooccurrence_oracle():
    start = time.time()
    rng = np.random.default_rng(101)
    for _ in range(50):
        n_users = int(rng.integers(5, 51))
        n_items = int(rng.integers(5, 81))
        Z = sp.csr_matrix(
            (rng.random((n_users, n_items)) < rng.uniform(0.05, 0.5)).astype(np.int64)
        )
        C = bgig.build_cooccurrence(Z)
        dense = Z.toarray().T @ Z.toarray()
        assert np.array_equal(C.toarray(), dense)
    elapsed = time.time() - start
    report("1 (co-occurrence oracle)", elapsed < 5.0, f"elapsed {elapsed:.2f}s")


# -- criterion 2: propagation == dense normalized-adjacency powers ----------


def test_criterion_2_propagation_oracle():
    start = time.time()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(5, 31))
        Z = sp.csr_matrix((rng.random((n + 5, n)) < 0.25).astype(np.int64))
        C = bgig.build_cooccurrence(Z)
        graph = bgig.ItemGraph(C)
        r0 = rng.normal(size=(n, 6))
        layers = bgig.propagate(graph, ad.parameter(r0), 3)

        A = (C.toarray() > 0).astype(float)
        np.fill_diagonal(A, 0.0)
        deg = A.sum(axis=1)
        dinv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
        A_hat = dinv[:, None] * A * dinv[None, :]
        iso = np.flatnonzero(deg == 0)
        A_hat[iso, iso] = 1.0
        ref = r0
        for ours in layers[1:]:
            ref = A_hat @ ref
            worst = max(worst, float(np.max(np.abs(ours.value - ref))))
    elapsed = time.time() - start
    report(
        "2 (propagation oracle)",
        worst < 1e-10 and elapsed < 10.0,
        f"max abs err {worst:.2e}, elapsed {elapsed:.2f}s",
    )


# -- criterion 3: gradient suite on the tiny model --------------------------


def test_criterion_3_gradient_suite():
    start = time.time()
    cfg_ds = bgdata.SyntheticConfig(15, 20, 8, 2, 0.1, (3, 5), (2, 3), seed=4)
    split = bgdata.split(bgdata.generate_synthetic(cfg_ds), seed=4)
    tcfg = bgtrain.TrainConfig(
        epochs=1, embed_dim=8, d_model=8, n_blocks=1, n_heads=1,
        max_len=12, k_range=(2, 4), batch_users=4, batch_p=4, batch_q=4,
        patience=0, seed=0,
    )
    state = bgtrain.TrainState(split, tcfg)
    rep = bgtrain.gradient_check(state, epsilon=1e-4)
    elapsed = time.time() - start
    worst = max(
        rep[name]["max_rel_err"]
        for name in ("clustering", "generation", "ranking_cosine", "combined_r0")
    )
    report(
        "3 (gradient suite)",
        worst < 1e-3 and elapsed < 60.0,
        f"max rel err {worst:.2e} over "
        f"{sum(rep[n]['n_params'] for n in ('clustering', 'generation', 'ranking_cosine'))} "
        f"params, elapsed {elapsed:.1f}s",
    )


# -- criterion 4: metric fixtures and DCG oracle -----------------------------


def test_criterion_4_metric_fixtures():
    start = time.time()
    assert bgeval.recall_at_k([3, 1, 7], {1}, 2) == 1.0
    assert bgeval.recall_at_k([3, 1, 7], {1, 9}, 2) == 0.5
    assert bgeval.ndcg_at_k([9, 4], {4}, 2) == pytest.approx(
        1.0 / np.log2(3.0), abs=1e-12
    )
    assert abs(bgeval.ndcg_at_k([9, 4], {4}, 2) - 0.630930) < 1e-6
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 25))
        ranked = rng.permutation(n).tolist()
        truth = set(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
        k = int(rng.integers(1, n + 1))
        dcg = sum(
            1.0 / np.log2(r + 1)
            for r, b in enumerate(ranked[:k], start=1)
            if b in truth
        )
        ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(truth)) + 1))
        worst = max(worst, abs(bgeval.ndcg_at_k(ranked, truth, k) - dcg / ideal))
    elapsed = time.time() - start
    report(
        "4 (metric fixtures)",
        worst < 1e-12 and elapsed < 5.0,
        f"max abs err {worst:.2e}, elapsed {elapsed:.2f}s",
    )


# -- criterion 5: similarity properties --------------------------------------


def test_criterion_5_similarity_properties():
    start = time.time()
    rng = np.random.default_rng(505)
    for _ in range(1000):
        a = set(rng.choice(40, size=int(rng.integers(1, 10)), replace=False).tolist())
        b = set(rng.choice(40, size=int(rng.integers(1, 10)), replace=False).tolist())
        j = bgret.jaccard(sorted(a), sorted(b))
        assert 0.0 <= j <= 1.0
        assert j == pytest.approx(bgret.jaccard(sorted(b), sorted(a)))
        assert bgret.jaccard(sorted(a), sorted(a)) == 1.0
        u = rng.normal(size=4)
        v = rng.normal(size=4)
        assert -1.0 - 1e-12 <= bgret.cosine(u, v) <= 1.0 + 1e-12
        alpha = float(rng.random())
        yj1, yj2 = sorted(rng.random(2))
        yc1, yc2 = sorted(rng.uniform(-1, 1, 2))
        assert bgret.combined_score(alpha, yj1, yc1) <= bgret.combined_score(
            alpha, yj2, yc2
        ) + 1e-12

    # endpoint behavior on a concrete catalog
    Y = (rng.random((25, 15)) < 0.3).astype(np.int64)
    Y[Y.sum(axis=1) == 0, 0] = 1
    r_hat = rng.normal(size=(15, 6))
    r_hat /= np.linalg.norm(r_hat, axis=1, keepdims=True)
    catalog = bgret.BundleCatalog(sp.csr_matrix(Y), ad.constant(r_hat))
    ok = True
    for _ in range(50):
        query = rng.choice(15, size=int(rng.integers(1, 6)), replace=False)
        yj = bgret.jaccard_all(catalog, query)
        yc = bgret.cosine_all(
            catalog.embedding_values, r_hat[query].mean(axis=0)
        )
        top1 = bgret.rank_topk(query, catalog, 1.0, 25, r_hat_value=r_hat)
        expect = np.lexsort((np.arange(25), -yj))
        ok &= [sb.bundle_id for sb in top1] == expect.tolist()
        top0 = bgret.rank_topk(query, catalog, 0.0, 25, r_hat_value=r_hat)
        expect = np.lexsort((np.arange(25), -yc))
        ok &= [sb.bundle_id for sb in top0] == expect.tolist()
    elapsed = time.time() - start
    report("5 (similarity properties)", ok and elapsed < 5.0, f"elapsed {elapsed:.2f}s")


# -- criteria 6-8: planted-structure training over five seeds ---------------

PLANTED = bgdata.SyntheticConfig(
    num_users=200, num_items=500, num_bundles=120, num_categories=8,
    noise_rate=0.1, seed=7,
)
SEEDS = (0, 1, 2, 3, 4)
ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def planted_train_config(seed, **overrides):
    kw = dict(epochs=100, seed=seed)
    kw.update(overrides)
    return bgtrain.TrainConfig(**kw)


@pytest.fixture(scope="module")
def planted_runs():
    """Train the planted dataset for all seeds; cache everything 6-8 needs."""
    ds = bgdata.generate_synthetic(PLANTED)
    split = bgdata.split(ds, seed=PLANTED.seed)
    runs = []
    for seed in SEEDS:
        cfg = planted_train_config(seed)
        untrained = bgeval.evaluate(
            bgtrain.TrainState(split, cfg), split, ks=[5]
        ).metrics["R@5"]
        state = bgtrain.train(split, cfg)
        full = bgeval.evaluate(state, split, ks=[5]).metrics["R@5"]
        wo_gen = bgeval.evaluate(
            state, split, ks=[5], query_mode="history"
        ).metrics["R@5"]
        grid = {
            a: bgeval.evaluate(state, split, ks=[5], alpha=a).metrics["R@5"]
            for a in ALPHA_GRID
        }
        cfg_rand = planted_train_config(seed, instruction_mode="random")
        state_rand = bgtrain.train(split, cfg_rand)
        wo_inst = bgeval.evaluate(state_rand, split, ks=[5]).metrics["R@5"]
        runs.append(
            dict(seed=seed, untrained=untrained, full=full, wo_gen=wo_gen,
                 wo_inst=wo_inst, grid=grid)
        )
        print(
            f"\nplanted seed {seed}: full={full:.3f} untrained={untrained:.3f} "
            f"woInst={wo_inst:.3f} woGen={wo_gen:.3f}"
        )
    return runs


def test_criterion_6_planted_end_to_end(planted_runs):
    mean_full = float(np.mean([r["full"] for r in planted_runs]))
    mean_untrained = float(np.mean([r["untrained"] for r in planted_runs]))
    ok = mean_full >= 0.5 and mean_full >= 5.0 * mean_untrained
    report(
        "6 (planted end-to-end)",
        ok,
        f"mean R@5 {mean_full:.3f} vs untrained {mean_untrained:.3f} "
        f"({mean_full / max(mean_untrained, 1e-9):.1f}x)",
    )


def test_criterion_7_ablation_directions(planted_runs):
    inst_wins = sum(r["wo_inst"] < r["full"] for r in planted_runs)
    gen_wins = sum(r["wo_gen"] < r["full"] for r in planted_runs)
    ok = inst_wins >= 4 and gen_wins >= 4
    report(
        "7 (ablation directions)",
        ok,
        f"w/o Inst degrades in {inst_wins}/5 seeds, w/o Gen in {gen_wins}/5",
    )


def test_criterion_8_alpha_combination(planted_runs):
    wins = 0
    for r in planted_runs:
        grid = r["grid"]
        best = max(grid.values())
        interior = max(grid[a] for a in ALPHA_GRID[1:-1])
        best_endpoint = max(grid[ALPHA_GRID[0]], grid[ALPHA_GRID[-1]])
        if interior >= best - 1e-12 or interior >= best_endpoint - 0.01:
            wins += 1
    report("8 (alpha combination)", wins >= 4, f"interior-or-tie in {wins}/5 seeds")


# -- criterion 9: real-data smoke test (runs only when files are present) ----


def test_criterion_9_real_data_smoke(tmp_path):
    steam_dir = os.environ.get("BUNDLEGEN_STEAM_DIR", "")
    if not steam_dir or not Path(steam_dir).is_dir():
        print(
            "\nACCEPTANCE 9 (real-data smoke): SKIP - reference-table numbers "
            "need the original datasets; set BUNDLEGEN_STEAM_DIR to run the "
            "end-to-end smoke test"
        )
        pytest.skip("public Steam files not supplied")
    ds = bgdata.load_dataset_dir(steam_dir)
    split = bgdata.split(ds, seed=0)
    cfg = bgtrain.TrainConfig(epochs=1, seed=0, patience=0)
    state = bgtrain.train(split, cfg)
    rep = bgeval.evaluate(state, split, ks=[1, 2])
    table = bgeval.report_table(rep)
    report("9 (real-data smoke)", "R" in table, "pipeline ran end-to-end")


# -- criterion 10: determinism and resume ------------------------------------


def test_criterion_10_determinism_and_resume(tmp_path):
    cfg_ds = bgdata.SyntheticConfig(40, 80, 24, 2, 0.1, (3, 6), (2, 4), seed=6)
    split = bgdata.split(bgdata.generate_synthetic(cfg_ds), seed=6)
    cfg = bgtrain.TrainConfig(
        epochs=3, seed=17, embed_dim=8, d_model=16, max_len=20,
        k_range=(2, 6), batch_users=8, batch_p=8, batch_q=8, patience=0,
    )
    a_path, b_path = tmp_path / "a.bin", tmp_path / "b.bin"
    bgtrain.save_checkpoint(bgtrain.train(split, cfg), a_path)
    bgtrain.save_checkpoint(bgtrain.train(split, cfg), b_path)
    identical = a_path.read_bytes() == b_path.read_bytes()

    cfg_half = bgtrain.TrainConfig(
        epochs=2, seed=17, embed_dim=8, d_model=16, max_len=20,
        k_range=(2, 6), batch_users=8, batch_p=8, batch_q=8, patience=0,
    )
    half = bgtrain.train(split, cfg_half)
    half_path = tmp_path / "half.bin"
    bgtrain.save_checkpoint(half, half_path)
    resumed = bgtrain.state_from_checkpoint(bgtrain.load_checkpoint(half_path), split)
    resumed.config = cfg
    resumed = bgtrain.train(split, cfg, state=resumed)
    full = bgtrain.train(split, cfg)
    resume_ok = all(
        np.array_equal(full.params[k].value, resumed.params[k].value)
        for k in full.params
    )
    report(
        "10 (determinism & resume)",
        identical and resume_ok,
        f"bit-identical={identical}, resume-equal={resume_ok}",
    )
