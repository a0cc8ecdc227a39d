"""Joint optimization of the clustering, generation, and ranking losses.

One epoch shuffles the users, and for each mini-batch of users builds fresh
instructive bundles (a generation step), samples item triples (clustering)
and bundle triples (ranking), and applies one Adam update to the summed
loss plus L2 regularization. Everything is seeded and single-threaded, so
runs are bit-reproducible and resumable from checkpoints.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from bundlegen import autodiff as ad
from bundlegen import data as bgdata
from bundlegen import evaluation as bgeval
from bundlegen import generator as bggen
from bundlegen import itemgraph as bgig
from bundlegen import kernels
from bundlegen import retrieval as bgret
from bundlegen.errors import CheckpointError, ConfigError, TrainingError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BGENCKPT"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    lambda_reg: float = 1e-5
    epochs: int = 100
    batch_users: int = 8
    batch_p: int = 64
    batch_q: int = 16
    embed_dim: int = 32
    n_layers: int = 2
    d_model: int = 32
    n_blocks: int = 1
    n_heads: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    max_len: int = 30
    temperature: float = 1.0
    alpha: float = 0.95
    k_range: tuple = (8, 16)
    seed: int = 0
    patience: int = 15
    min_epochs: int = 35
    eval_k: int = 5
    instruction_mode: str = "knn"
    instructions_per_user: int = 2

    def validate(self):
        positive = (
            "learning_rate", "epochs", "batch_users", "batch_p", "batch_q",
            "embed_dim", "d_model", "max_len", "temperature", "eval_k",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("n_layers", "n_blocks", "n_heads"):
            if getattr(self, name) not in (1, 2, 3, 4):
                raise ConfigError(f"{name} must be in {{1, 2, 3, 4}}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        lo, hi = self.k_range
        if not 2 <= lo <= hi:
            raise ConfigError(f"k_range {self.k_range} is invalid (min is 2)")
        if hi + 1 > self.max_len:
            raise ConfigError("k_range max must leave room for [sob] in max_len")
        if self.instruction_mode not in ("knn", "random"):
            raise ConfigError(f"unknown instruction_mode {self.instruction_mode!r}")
        if self.instructions_per_user < 1:
            raise ConfigError("instructions_per_user must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.min_epochs < 0:
            raise ConfigError("min_epochs must be >= 0")
        return self


class Adam:
    """Adam with bias correction; updates run through the kernel backend."""

    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            grad = p.grad if p.grad is not None else np.zeros_like(p.value)
            kernels.adam_step(
                p.value.ravel(), grad.ravel(),
                self.m[name].ravel(), self.v[name].ravel(),
                self.t, self.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class TrainState:
    """Everything training touches: parameters, optimizer, rng, bookkeeping."""

    def __init__(self, split: bgdata.DatasetSplit, config: TrainConfig):
        config.validate()
        self.config = config
        self.split = split
        train = split.train
        self.rng = np.random.default_rng(config.seed)

        C = bgig.build_cooccurrence(train.Z)
        self.graph = bgig.ItemGraph(C)
        self.index = bgig.ItemEmbeddingIndex(
            self.graph, config.embed_dim, config.n_layers, self.rng
        )
        self.generator = bggen.GeneratorModel(
            train.num_items,
            d_model=config.d_model,
            n_blocks=config.n_blocks,
            n_heads=config.n_heads,
            d_ff=config.d_ff or None,
            max_len=config.max_len,
            temperature=config.temperature,
            rng=self.rng,
        )
        self.catalog = bgret.BundleCatalog(train.Y, self.index.r_hat)
        self.triple_sampler = bgig.TripleSampler(self.graph)
        self.histories = {
            u: bgdata.user_history(train, u) for u in range(train.num_users)
        }

        self.params = {"r0": self.index.r0}
        self.params.update(
            {f"gen.{k}": v for k, v in self.generator.params.items()}
        )
        self.adam = Adam(self.params, config.learning_rate)
        self.epoch = 0
        self.best_params = None
        self.best_metric = -np.inf
        self.best_epoch = 0
        self.epochs_since_best = 0
        self.history_rows = []  # (epoch, L_C, L_G, L_R, total)

    def refresh(self):
        self.index.refresh()
        self.catalog.refresh(self.index.r_hat)

    def snapshot_params(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_param_values(self, values: dict):
        for k, p in self.params.items():
            p.value[...] = values[k]
        self.refresh()


def combined_loss(l_c, l_g, l_r, params, lambda_reg) -> ad.Tensor:
    """Sum of the three losses plus lambda * sum of squared parameters."""
    for name, t in (("clustering", l_c), ("generation", l_g), ("ranking", l_r)):
        if not np.isfinite(t.value):
            raise TrainingError(f"{name} loss is not finite: {t.value}")
    total = ad.add(ad.add(l_g, l_c), l_r)
    if lambda_reg > 0:
        reg = ad.add_n([ad.sumsq(params[k]) for k in sorted(params)])
        total = ad.add(total, ad.scale(reg, lambda_reg))
    return total


def _random_instruction(state: TrainState, history, rng):
    """Ablation instruction: k uniformly random items instead of a cluster."""
    n = len(history)
    if n < 3:
        return None
    k_lo = max(2, state.config.k_range[0])
    k_hi = min(state.config.k_range[1], n - 1)
    if k_hi < k_lo:
        return None
    k = int(rng.integers(k_lo, k_hi + 1))
    items = rng.choice(state.split.train.num_items, size=k, replace=False)
    return bggen.InstructiveBundle(items=items.tolist(), anchor=int(items[0]))


def _make_instruction(state: TrainState, u, rng):
    history = state.histories[u]
    if state.config.instruction_mode == "random":
        return _random_instruction(state, history, rng)
    return bggen.build_instruction(
        state.index, history, state.config.k_range, rng, user=u
    )


def _chunked(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def train_epoch(state: TrainState) -> dict:
    """One pass over the users; returns the epoch's mean loss components."""
    cfg = state.config
    rng = state.rng
    X_train = state.split.train.X
    users = np.array(
        [u for u in range(state.split.train.num_users) if len(state.histories[u])],
        dtype=np.int64,
    )
    order = users[rng.permutation(len(users))]
    sums = {"L_C": 0.0, "L_G": 0.0, "L_R": 0.0, "total": 0.0}
    n_chunks = 0
    for chunk in _chunked(order, cfg.batch_users):
        state.refresh()

        lg_terms = []
        for u in chunk:
            for _ in range(cfg.instructions_per_user):
                inst = _make_instruction(state, u, rng)
                if inst is None:
                    break
                lg_terms.append(
                    bggen.generation_loss(
                        state.generator, state.histories[u], inst, rng=rng
                    )
                )
        if lg_terms:
            l_g = ad.scale(ad.add_n(lg_terms), 1.0 / len(lg_terms))
        else:
            l_g = ad.constant(0.0)

        triples = state.triple_sampler.sample(cfg.batch_p, rng)
        l_c = bgig.clustering_loss(state.index.r_hat, triples)

        btriples = bgret.sample_bundle_triples(X_train, cfg.batch_q, rng)
        queries = {}
        for u in np.unique(btriples.user):
            hist = state.histories[int(u)]
            if len(hist) == 0:
                queries[int(u)] = np.array([], dtype=np.int64)
                continue
            pseudo = bggen.generate(state.generator, hist).items
            queries[int(u)] = np.asarray(pseudo if pseudo else hist, dtype=np.int64)
        l_r = bgret.recommendation_loss(
            state.index.r_hat, state.catalog, btriples, queries, cfg.alpha
        )

        total = combined_loss(l_c, l_g, l_r, state.params, cfg.lambda_reg)
        state.adam.zero_grad()
        total.backward()
        state.adam.step()

        sums["L_C"] += l_c.item()
        sums["L_G"] += l_g.item()
        sums["L_R"] += l_r.item()
        sums["total"] += total.item()
        n_chunks += 1
    return {k: v / max(n_chunks, 1) for k, v in sums.items()}


def train(
    split: bgdata.DatasetSplit,
    config: TrainConfig,
    state: TrainState | None = None,
    checkpoint_path=None,
) -> TrainState:
    """Run (or resume) training up to config.epochs with early stopping.

    Early stopping tracks validation R@eval_k with the configured patience
    and restores the best parameters at the end. When ``checkpoint_path``
    is given, the state is saved after every epoch, so a divergence abort
    leaves the last completed epoch on disk.
    """
    if state is None:
        state = TrainState(split, config)
    use_val = state.config.patience > 0 and len(split.val) > 0
    while state.epoch < state.config.epochs:
        losses = train_epoch(state)
        state.epoch += 1
        state.history_rows.append(
            (state.epoch, losses["L_C"], losses["L_G"], losses["L_R"], losses["total"])
        )
        stop = False
        if use_val and state.epoch >= state.config.min_epochs:
            state.refresh()
            report = bgeval.evaluate(
                state, split, ks=[state.config.eval_k], part="val"
            )
            metric = report.metrics[f"R@{state.config.eval_k}"]
            if metric > state.best_metric + 1e-12:
                state.best_metric = metric
                state.best_epoch = state.epoch
                state.best_params = state.snapshot_params()
                state.epochs_since_best = 0
            else:
                state.epochs_since_best += 1
                if state.epochs_since_best >= state.config.patience:
                    stop = True
        log.info(
            "epoch %d: L_C=%.4f L_G=%.4f L_R=%.4f total=%.4f%s",
            state.epoch, losses["L_C"], losses["L_G"], losses["L_R"],
            losses["total"],
            f" val R@{state.config.eval_k}={state.best_metric:.4f}" if use_val else "",
        )
        if checkpoint_path is not None:
            save_checkpoint(state, checkpoint_path)
        if stop:
            log.info(
                "early stop at epoch %d (best epoch %d)",
                state.epoch, state.best_epoch,
            )
            break
    if state.best_params is not None:
        state.load_param_values(state.best_params)
    state.refresh()
    return state


def write_loss_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,L_C,L_G,L_R,total\n")
        for epoch, l_c, l_g, l_r, total in rows:
            fh.write(f"{epoch},{l_c:.10g},{l_g:.10g},{l_r:.10g},{total:.10g}\n")


# ---------------------------------------------------------------------------
# Gradient verification


def _max_rel_err(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _fd_gradient(loss_fn, tensor, epsilon):
    """Central finite differences of loss_fn w.r.t. every tensor entry."""
    flat = tensor.value.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = loss_fn()
        flat[i] = orig - epsilon
        lo = loss_fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * epsilon)
    return grad.reshape(tensor.value.shape)


def gradient_check(state: TrainState, epsilon: float = 1e-4) -> dict:
    """Analytic vs central-difference gradients for each loss path.

    Uses fixed batches drawn from the state's data. Intended for tiny
    models (the sweep is per-coordinate). Returns max relative errors.
    """
    rng_seed = state.config.seed + 7919
    report = {}

    # sanity: d/dw w^2 at w=3 is 6
    w = ad.parameter(3.0)
    sq = ad.sumsq(w)
    sq.backward()
    fd = _fd_gradient(lambda: float(w.value) ** 2, w, 1e-6)
    report["quadratic"] = {
        "analytic": float(w.grad),
        "numeric": float(fd),
        "max_rel_err": _max_rel_err(np.array([w.grad]), np.array([fd])),
    }

    triples = state.triple_sampler.sample(8, np.random.default_rng(rng_seed))

    def clustering_forward():
        r_hat = state.index.refresh()
        return bgig.clustering_loss(r_hat, triples)

    loss = clustering_forward()
    state.adam.zero_grad()
    loss.backward()
    analytic = state.index.r0.grad.copy()
    numeric = _fd_gradient(lambda: clustering_forward().item(), state.index.r0, epsilon)
    report["clustering"] = {
        "max_rel_err": _max_rel_err(analytic, numeric),
        "n_params": analytic.size,
    }

    rng = np.random.default_rng(rng_seed + 1)
    gen_user = next(
        (u for u in sorted(state.histories) if len(state.histories[u]) >= 3), None
    )
    if gen_user is None:
        raise TrainingError("gradient_check needs a user with history >= 3 items")
    state.index.refresh()
    inst = bggen.build_instruction(
        state.index, state.histories[gen_user], state.config.k_range, rng
    )

    def generation_forward():
        return bggen.generation_loss(
            state.generator, state.histories[gen_user], inst
        )

    loss = generation_forward()
    state.adam.zero_grad()
    loss.backward()
    worst = 0.0
    total_params = 0
    for name in sorted(state.generator.params):
        p = state.generator.params[name]
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.value)
        numeric = _fd_gradient(lambda: generation_forward().item(), p, epsilon)
        worst = max(worst, _max_rel_err(analytic, numeric))
        total_params += p.value.size
    report["generation"] = {"max_rel_err": worst, "n_params": total_params}

    btriples = bgret.sample_bundle_triples(
        state.split.train.X, 8, np.random.default_rng(rng_seed + 2)
    )
    queries = {
        int(u): state.histories[int(u)] for u in np.unique(btriples.user)
    }

    def ranking_forward():
        r_hat = state.index.refresh()
        state.catalog.refresh(r_hat)
        return bgret.recommendation_loss(
            r_hat, state.catalog, btriples, queries, state.config.alpha
        )

    loss = ranking_forward()
    state.adam.zero_grad()
    loss.backward()
    analytic = state.index.r0.grad.copy()
    numeric = _fd_gradient(lambda: ranking_forward().item(), state.index.r0, epsilon)
    report["ranking_cosine"] = {
        "max_rel_err": _max_rel_err(analytic, numeric),
        "n_params": analytic.size,
    }

    def combined_forward():
        r_hat = state.index.refresh()
        state.catalog.refresh(r_hat)
        l_c = bgig.clustering_loss(r_hat, triples)
        l_g = generation_forward()
        l_r = bgret.recommendation_loss(
            r_hat, state.catalog, btriples, queries, state.config.alpha
        )
        return combined_loss(l_c, l_g, l_r, state.params, state.config.lambda_reg)

    loss = combined_forward()
    state.adam.zero_grad()
    loss.backward()
    analytic = state.index.r0.grad.copy()
    numeric = _fd_gradient(lambda: combined_forward().item(), state.index.r0, epsilon)
    report["combined_r0"] = {
        "max_rel_err": _max_rel_err(analytic, numeric),
        "n_params": analytic.size,
    }
    return report


# ---------------------------------------------------------------------------
# Checkpointing


def _config_to_kv(config: TrainConfig) -> dict:
    kv = {}
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            kv[f"cfg.{key}"] = ",".join(str(v) for v in value)
        else:
            kv[f"cfg.{key}"] = repr(value)
    return kv


def _config_from_kv(kv: dict) -> TrainConfig:
    kwargs = {}
    for field_name, f in TrainConfig.__dataclass_fields__.items():
        raw = kv[f"cfg.{field_name}"]
        if field_name == "k_range":
            kwargs[field_name] = tuple(int(v) for v in raw.split(","))
        elif f.type in ("int", int):
            kwargs[field_name] = int(raw)
        elif f.type in ("float", float):
            kwargs[field_name] = float(raw)
        else:
            kwargs[field_name] = raw.strip("'\"")
    return TrainConfig(**kwargs)


def _write_block(fh, payload: bytes):
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_block(fh, what) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(fh, 8, f"{what} length"))
    return _read_exact(fh, n, what)


def save_checkpoint(state: TrainState, path):
    """Binary snapshot: magic, version, kv block, named float64 tensors."""
    kv = _config_to_kv(state.config)
    kv["epoch"] = str(state.epoch)
    kv["adam_t"] = str(state.adam.t)
    kv["best_metric"] = repr(state.best_metric)
    kv["best_epoch"] = str(state.best_epoch)
    kv["epochs_since_best"] = str(state.epochs_since_best)
    kv["has_best"] = "1" if state.best_params is not None else "0"
    kv["rng_state"] = json.dumps(state.rng.bit_generator.state, sort_keys=True)

    tensors = {}
    for name, p in state.params.items():
        tensors[f"param.{name}"] = p.value
        tensors[f"adam.m.{name}"] = state.adam.m[name]
        tensors[f"adam.v.{name}"] = state.adam.v[name]
    if state.best_params is not None:
        for name, value in state.best_params.items():
            tensors[f"best.{name}"] = value

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        kv_payload = "".join(
            f"{k}={kv[k]}\n" for k in sorted(kv)
        ).encode("utf-8")
        _write_block(fh, kv_payload)
        fh.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    epoch: int
    adam_t: int
    rng_state: dict
    kv: dict
    tensors: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported "
                f"(this build reads version {CHECKPOINT_VERSION})"
            )
        kv = {}
        for line in _read_block(fh, "config").decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            kv[key] = value
        (n_tensors,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            name = _read_block(fh, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor ndim"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, "tensor shape"))[0]
                for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 8, f"tensor {name} data")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return Checkpoint(
        version=version,
        config=_config_from_kv(kv),
        epoch=int(kv["epoch"]),
        adam_t=int(kv["adam_t"]),
        rng_state=json.loads(kv["rng_state"]),
        kv=kv,
        tensors=tensors,
    )


def state_from_checkpoint(ckpt: Checkpoint, split: bgdata.DatasetSplit) -> TrainState:
    """Rebuild a TrainState and overwrite it with checkpoint contents."""
    state = TrainState(split, ckpt.config)
    for name, p in state.params.items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        if ckpt.tensors[key].shape != p.value.shape:
            raise CheckpointError(
                f"tensor {key} shape {ckpt.tensors[key].shape} does not match "
                f"model shape {p.value.shape}; wrong dataset or config?"
            )
        p.value[...] = ckpt.tensors[key]
        state.adam.m[name][...] = ckpt.tensors[f"adam.m.{name}"]
        state.adam.v[name][...] = ckpt.tensors[f"adam.v.{name}"]
    state.adam.t = ckpt.adam_t
    state.epoch = ckpt.epoch
    state.best_metric = float(ckpt.kv["best_metric"])
    state.best_epoch = int(ckpt.kv["best_epoch"])
    state.epochs_since_best = int(ckpt.kv["epochs_since_best"])
    if ckpt.kv.get("has_best") == "1":
        state.best_params = {
            name: ckpt.tensors[f"best.{name}"].copy() for name in state.params
        }
    state.rng.bit_generator.state = ckpt.rng_state
    state.refresh()
    return state
