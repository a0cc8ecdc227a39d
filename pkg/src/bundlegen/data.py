"""Interaction data: loading, validation, splitting, synthesis, statistics.

Three binary matrices describe the world: X (user-bundle), Y (bundle-item),
Z (user-item). IDs are re-indexed to contiguous 0-based ranges at load time
and all matrices are kept sparse.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from bundlegen.errors import ConfigError, ParseError, ValidationError

log = logging.getLogger(__name__)

UB_FILENAME = "user_bundle.txt"
BI_FILENAME = "bundle_item.txt"
UI_FILENAME = "user_item.txt"


@dataclass(frozen=True)
class InteractionDataset:
    num_users: int
    num_bundles: int
    num_items: int
    X: sp.csr_matrix  # |U| x |B|
    Y: sp.csr_matrix  # |B| x |V|
    Z: sp.csr_matrix  # |U| x |V|


@dataclass(frozen=True)
class DatasetSplit:
    train: InteractionDataset
    val: dict  # user -> sorted np.ndarray of held-out bundle ids
    test: dict
    seed: int
    ratios: tuple = (7, 1, 2)


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int
    num_items: int
    num_bundles: int
    num_categories: int
    noise_rate: float
    interactions_per_user: tuple = (3, 7)
    items_per_bundle: tuple = (2, 4)
    seed: int = 0


@dataclass(frozen=True)
class DatasetStats:
    ui_density: float
    ub_density: float
    avg_items_per_bundle: float
    avg_bundles_per_item: float
    avg_history_len: float


def _read_pairs(path):
    """Parse a whitespace-separated id-pair file; 1-based line numbers in errors."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected two ids, got {line!r}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: non-integer token in {line!r}"
                ) from None
            pairs.append((a, b))
    return pairs


def _contiguous(*id_iterables):
    ids = sorted(set().union(*id_iterables))
    return {orig: new for new, orig in enumerate(ids)}


def _binary_csr(pairs, row_map, col_map, shape):
    if pairs:
        rows = np.array([row_map[a] for a, _ in pairs], dtype=np.int64)
        cols = np.array([col_map[b] for _, b in pairs], dtype=np.int64)
        data = np.ones(len(pairs), dtype=np.int64)
        mat = sp.coo_matrix((data, (rows, cols)), shape=shape)
        mat.sum_duplicates()
        mat.data[:] = 1  # duplicate lines collapse to a single entry
        return mat.tocsr()
    return sp.csr_matrix(shape, dtype=np.int64)


def load_interactions(ub_path, bi_path, ui_path) -> InteractionDataset:
    """Load the three pair files into a contiguously re-indexed dataset.

    Duplicated lines collapse to single entries. Any bundle referenced
    anywhere without at least one item in the bundle-item file is rejected.
    """
    ub = _read_pairs(ub_path)
    bi = _read_pairs(bi_path)
    ui = _read_pairs(ui_path)

    user_map = _contiguous((u for u, _ in ub), (u for u, _ in ui))
    bundle_map = _contiguous((b for _, b in ub), (b for b, _ in bi))
    item_map = _contiguous((i for _, i in bi), (i for _, i in ui))

    bundles_with_items = {b for b, _ in bi}
    empty = sorted(set(bundle_map) - bundles_with_items)
    if empty:
        raise ValidationError(
            f"bundle(s) with no items in {bi_path}: {empty[:10]}"
            + (" ..." if len(empty) > 10 else "")
        )

    nu, nb, ni = len(user_map), len(bundle_map), len(item_map)
    X = _binary_csr(ub, user_map, bundle_map, (nu, nb))
    Y = _binary_csr(bi, bundle_map, item_map, (nb, ni))
    Z = _binary_csr(ui, user_map, item_map, (nu, ni))
    return InteractionDataset(nu, nb, ni, X, Y, Z)


def load_dataset_dir(directory) -> InteractionDataset:
    d = Path(directory)
    return load_interactions(d / UB_FILENAME, d / BI_FILENAME, d / UI_FILENAME)


def export_interactions(ds: InteractionDataset, directory):
    """Write the three pair files (sorted, contiguous ids); round-trips exactly."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, mat in ((UB_FILENAME, ds.X), (BI_FILENAME, ds.Y), (UI_FILENAME, ds.Z)):
        coo = mat.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = [f"{coo.row[i]} {coo.col[i]}\n" for i in order]
        (d / name).write_text("".join(lines), encoding="utf-8")
    return d


def _allocate(n, ratios):
    """Largest-remainder allocation of n interactions to (train, val, test)."""
    if n < 3:
        return 1, 0, n - 1
    total = sum(ratios)
    quotas = [r * n / total for r in ratios]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    leftover = n - sum(counts)
    # stable tie-break: larger remainder first, then train before val before test
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in range(leftover):
        counts[order[i % 3]] += 1
    return tuple(counts)


def split(ds: InteractionDataset, ratios=(7, 1, 2), seed=0) -> DatasetSplit:
    """Per-user stratified split of the user-bundle interactions.

    Each user's bundles are shuffled (deterministic in seed) and cut close
    to the requested ratios; users with fewer than 3 interactions keep one
    in train and send the rest to test.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError(f"invalid split ratios {ratios!r}")
    rng = np.random.default_rng(seed)
    X = ds.X.tocsr()
    train_rows, train_cols = [], []
    val, test = {}, {}
    for u in range(ds.num_users):
        bundles = X.indices[X.indptr[u] : X.indptr[u + 1]]
        n = len(bundles)
        if n == 0:
            continue
        perm = rng.permutation(n)
        shuffled = bundles[perm]
        n_tr, n_va, n_te = _allocate(n, ratios)
        train_rows.extend([u] * n_tr)
        train_cols.extend(shuffled[:n_tr])
        if n_va:
            val[u] = np.sort(shuffled[n_tr : n_tr + n_va])
        if n_te:
            test[u] = np.sort(shuffled[n_tr + n_va :])
    X_train = sp.csr_matrix(
        (
            np.ones(len(train_rows), dtype=np.int64),
            (np.array(train_rows, dtype=np.int64), np.array(train_cols, dtype=np.int64)),
        ),
        shape=X.shape,
    )
    train = InteractionDataset(
        ds.num_users, ds.num_bundles, ds.num_items, X_train, ds.Y, ds.Z
    )
    return DatasetSplit(train=train, val=val, test=test, seed=seed, ratios=tuple(ratios))


def user_history(train: InteractionDataset, u) -> np.ndarray:
    """Items a user touched directly (Z) or through their train bundles (X∘Y)."""
    if not 0 <= u < train.num_users:
        raise KeyError(f"unknown user id {u}")
    direct = train.Z.indices[train.Z.indptr[u] : train.Z.indptr[u + 1]]
    bundles = train.X.indices[train.X.indptr[u] : train.X.indptr[u + 1]]
    via_bundles = [
        train.Y.indices[train.Y.indptr[b] : train.Y.indptr[b + 1]] for b in bundles
    ]
    return np.union1d(direct, np.concatenate(via_bundles) if via_bundles else [])


def category_assignments(cfg: SyntheticConfig):
    """Deterministic category labels for items and bundles (contiguous blocks)."""
    item_cat = (np.arange(cfg.num_items) * cfg.num_categories) // cfg.num_items
    bundle_cat = (np.arange(cfg.num_bundles) * cfg.num_categories) // cfg.num_bundles
    return item_cat, bundle_cat


# Categories split into themes of roughly this many items (franchise-sized
# sub-pools); bundles and user tastes live at theme granularity, categories
# group related themes.
THEME_TARGET_SIZE = 20

# Share of non-noise bundle adoptions that wander across the whole category
# instead of staying on the user's theme (impulse buys); item ownership has
# no such spread, so the owned-item signal is the sharper one.
CATEGORY_ADOPTION_SPREAD = 0.15


def theme_assignments(cfg: SyntheticConfig):
    """Theme labels for items and bundles; themes subdivide categories."""
    item_cat, bundle_cat = category_assignments(cfg)
    item_theme = np.zeros(cfg.num_items, dtype=np.int64)
    bundle_theme = np.zeros(cfg.num_bundles, dtype=np.int64)
    next_theme = 0
    for c in range(cfg.num_categories):
        items = np.flatnonzero(item_cat == c)
        bundles = np.flatnonzero(bundle_cat == c)
        n_themes = max(1, round(len(items) / THEME_TARGET_SIZE))
        local = (np.arange(len(items)) * n_themes) // len(items)
        item_theme[items] = next_theme + local
        if len(bundles):
            local_b = (np.arange(len(bundles)) * n_themes) // len(bundles)
            bundle_theme[bundles] = next_theme + local_b
        next_theme += n_themes
    return item_theme, bundle_theme


def _sample_distinct(rng, pool_main, pool_noise, count, noise_rate):
    """Draw `count` distinct ids, each from pool_noise with prob noise_rate.

    Falls over to the noise pool once the main pool is exhausted, so the
    request can always be satisfied when the union is large enough.
    """
    chosen = []
    seen = set()
    main_set = {int(x) for x in pool_main}
    while len(chosen) < count:
        use_noise = main_set <= seen or rng.random() < noise_rate
        pool = pool_noise if use_noise else pool_main
        cand = int(pool[rng.integers(len(pool))])
        if cand not in seen:
            seen.add(cand)
            chosen.append(cand)
    return chosen


def generate_synthetic(cfg: SyntheticConfig) -> InteractionDataset:
    """Planted-structure dataset: themed items, bundles, and users.

    Items and bundles are partitioned into categories, and each category
    into franchise-like themes of ~20 items. A bundle draws its items from
    its own theme (hence its own category) with probability 1 - noise_rate
    per item. Each user follows one theme: bundle adoptions and directly
    owned items come from that theme at the same noise level. Ownership is
    sampled independently of bundle membership, so held-out bundles are
    predictable through item correlations rather than verbatim overlap.
    """
    _validate_synthetic(cfg)
    rng = np.random.default_rng(cfg.seed)
    item_cat, bundle_cat = category_assignments(cfg)
    item_theme, bundle_theme = theme_assignments(cfg)
    n_themes = int(item_theme.max()) + 1
    all_items = np.arange(cfg.num_items)
    all_bundles = np.arange(cfg.num_bundles)
    items_by_theme = [np.flatnonzero(item_theme == t) for t in range(n_themes)]
    bundles_by_theme = [np.flatnonzero(bundle_theme == t) for t in range(n_themes)]
    bundles_by_cat = [
        np.flatnonzero(bundle_cat == c) for c in range(cfg.num_categories)
    ]
    theme_cat = np.zeros(n_themes, dtype=np.int64)
    theme_cat[item_theme] = item_cat

    # Bundles of a theme are dealt from a shuffled theme pool, so sibling
    # bundles barely overlap (como base-game vs. DLC collections); noise
    # swaps individual slots for uniform items afterwards.
    ib_lo, ib_hi = cfg.items_per_bundle
    bundle_items = [None] * cfg.num_bundles
    for t in range(n_themes):
        pool = items_by_theme[t][rng.permutation(len(items_by_theme[t]))]
        cursor = 0
        for b in bundles_by_theme[t]:
            size = int(rng.integers(ib_lo, ib_hi + 1))
            picked = set()
            while len(picked) < size:
                if rng.random() < cfg.noise_rate:
                    cand = int(all_items[rng.integers(cfg.num_items)])
                else:
                    cand = int(pool[cursor % len(pool)])
                    cursor += 1
                picked.add(cand)
            bundle_items[int(b)] = sorted(picked)

    iu_lo, iu_hi = cfg.interactions_per_user
    x_rows, x_cols, z_rows, z_cols = [], [], [], []
    for u in range(cfg.num_users):
        pref = int(rng.integers(n_themes))
        n_b = int(rng.integers(iu_lo, iu_hi + 1))
        n_b = min(n_b, cfg.num_bundles)
        theme_pool = bundles_by_theme[pref]
        cat_pool = bundles_by_cat[theme_cat[pref]]
        theme_set = {int(b) for b in theme_pool}
        cat_set = {int(b) for b in cat_pool}
        adopted = []
        seen = set()
        while len(adopted) < n_b:
            r = rng.random()
            if r < cfg.noise_rate:
                pool = all_bundles
            elif r < cfg.noise_rate + (1 - cfg.noise_rate) * CATEGORY_ADOPTION_SPREAD:
                pool = cat_pool if not cat_set <= seen else all_bundles
            elif not theme_set <= seen:
                pool = theme_pool
            elif not cat_set <= seen:
                pool = cat_pool
            else:
                pool = all_bundles
            cand = int(pool[rng.integers(len(pool))])
            if cand not in seen:
                seen.add(cand)
                adopted.append(cand)
        x_rows.extend([u] * len(adopted))
        x_cols.extend(adopted)

        n_i = int(rng.integers(iu_lo, iu_hi + 1))
        n_i = min(n_i, cfg.num_items)
        items = sorted(
            _sample_distinct(rng, items_by_theme[pref], all_items, n_i, cfg.noise_rate)
        )
        z_rows.extend([u] * len(items))
        z_cols.extend(items)

    y_rows = [b for b in range(cfg.num_bundles) for _ in bundle_items[b]]
    y_cols = [i for b in range(cfg.num_bundles) for i in bundle_items[b]]

    def as_csr(rows, cols, shape):
        return sp.csr_matrix(
            (
                np.ones(len(rows), dtype=np.int64),
                (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)),
            ),
            shape=shape,
        )

    return InteractionDataset(
        cfg.num_users,
        cfg.num_bundles,
        cfg.num_items,
        as_csr(x_rows, x_cols, (cfg.num_users, cfg.num_bundles)),
        as_csr(y_rows, y_cols, (cfg.num_bundles, cfg.num_items)),
        as_csr(z_rows, z_cols, (cfg.num_users, cfg.num_items)),
    )


def _validate_synthetic(cfg: SyntheticConfig):
    if not 0.0 <= cfg.noise_rate <= 1.0:
        raise ConfigError(f"noise_rate must be in [0, 1], got {cfg.noise_rate}")
    for name in ("num_users", "num_items", "num_bundles", "num_categories"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.num_categories > min(cfg.num_items, cfg.num_bundles):
        raise ConfigError("num_categories exceeds num_items or num_bundles")
    for name in ("interactions_per_user", "items_per_bundle"):
        lo, hi = getattr(cfg, name)
        if not (1 <= lo <= hi):
            raise ConfigError(f"{name} range {lo}..{hi} is invalid")
    item_theme, _ = theme_assignments(cfg)
    min_theme = int(np.bincount(item_theme).min())
    if cfg.items_per_bundle[1] > min_theme:
        raise ConfigError(
            f"items_per_bundle max {cfg.items_per_bundle[1]} exceeds smallest "
            f"item theme size {min_theme}"
        )


def stats(ds: InteractionDataset) -> DatasetStats:
    """Density and average-size statistics over the full dataset."""
    if ds.num_users == 0 or ds.num_bundles == 0 or ds.num_items == 0:
        raise ValidationError("stats on an empty dataset")
    hist = ((ds.Z + ds.X @ ds.Y) > 0).sum(axis=1)
    return DatasetStats(
        ui_density=ds.Z.nnz / (ds.num_users * ds.num_items),
        ub_density=ds.X.nnz / (ds.num_users * ds.num_bundles),
        avg_items_per_bundle=ds.Y.nnz / ds.num_bundles,
        avg_bundles_per_item=ds.Y.nnz / ds.num_items,
        avg_history_len=float(np.mean(hist)),
    )


def stats_json(ds: InteractionDataset) -> str:
    payload = asdict(stats(ds))
    payload.update(
        num_users=ds.num_users, num_bundles=ds.num_bundles, num_items=ds.num_items
    )
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
