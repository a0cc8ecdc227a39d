"""Pseudo-bundle generation.

An encoder-decoder transformer reads a user's item history (as a set: no
positional signal on the encoder side) and emits an item sequence delimited
by start/end pseudo tokens. During training the targets are instructive
bundles: an anchor item from the history followed by its nearest cluster
neighbors. At inference the decoder runs greedily with duplicate masking
until it emits the end token or hits the step cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bundlegen import autodiff as ad
from bundlegen.itemgraph import knn_cluster


class Vocabulary:
    """Items plus the reserved [pad], [sob], [eob] tokens.

    Item ids map to token ids unchanged; the three reserved tokens sit
    directly above the item range, so they can never collide.
    """

    def __init__(self, num_items: int):
        self.num_items = num_items
        self.pad = num_items
        self.sob = num_items + 1
        self.eob = num_items + 2
        self.size = num_items + 3

    def encode(self, item_id: int) -> int:
        if not 0 <= item_id < self.num_items:
            raise ValueError(f"item id {item_id} out of range")
        return item_id

    def decode(self, token_id: int) -> int:
        if not 0 <= token_id < self.num_items:
            raise ValueError(f"token id {token_id} is not an item")
        return token_id

    def is_item(self, token_id: int) -> bool:
        return 0 <= token_id < self.num_items


@dataclass
class InstructiveBundle:
    """Ordered cluster of correlated items built around one history item."""

    items: list
    anchor: int
    source_user: int = -1


@dataclass
class PseudoBundle:
    """Items the generator proposed for a user; ``terminated`` tells whether
    the end token fired before the step cap."""

    items: list
    terminated: bool

    def as_array(self) -> np.ndarray:
        return np.asarray(self.items, dtype=np.int64)


def build_instruction(index, history, k_range, rng, user=-1):
    """Sample an instructive bundle from a user's history.

    Picks a uniform anchor from the history, a uniform size k with
    1 < k < len(history) clipped to k_range, and returns the anchor
    followed by its k-1 nearest neighbors (ascending distance). Returns
    None when the history is too small to satisfy 1 < k < n.
    """
    hist = np.asarray(sorted(history), dtype=np.int64)
    n = len(hist)
    if n < 3:
        return None
    k_lo = max(2, k_range[0])
    k_hi = min(k_range[1], n - 1)
    if k_hi < k_lo:
        return None
    anchor = int(hist[rng.integers(n)])
    k = int(rng.integers(k_lo, k_hi + 1))
    neighbors = knn_cluster(index.r_hat_value, anchor, k - 1)
    return InstructiveBundle(
        items=[anchor] + neighbors.tolist(), anchor=anchor, source_user=user
    )


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class GeneratorModel:
    """Encoder-decoder over the item vocabulary, parameters on the tape.

    The encoder has no positional encoding (histories are sets); the
    decoder adds learned positions to its prefix. Output logits are scaled
    by 1/temperature before the softmax.
    """

    def __init__(
        self,
        num_items: int,
        d_model: int = 32,
        n_blocks: int = 1,
        n_heads: int = 2,
        d_ff: int | None = None,
        max_len: int = 30,
        temperature: float = 1.0,
        rng=None,
    ):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if rng is None:
            rng = np.random.default_rng(0)
        self.vocab = Vocabulary(num_items)
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.d_ff = d_ff if d_ff is not None else 4 * d_model
        self.max_len = max_len
        self.temperature = temperature

        b = 1.0 / np.sqrt(d_model)
        p = {}
        p["tok_emb"] = _uniform(rng, (self.vocab.size, d_model), b)
        p["pos_emb"] = _uniform(rng, (max_len, d_model), b)
        for i in range(n_blocks):
            for attn in (f"enc{i}.attn", f"dec{i}.self", f"dec{i}.cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    p[f"{attn}.{w}"] = _uniform(rng, (d_model, d_model), b)
            p[f"enc{i}.ffn.w1"] = _uniform(rng, (d_model, self.d_ff), b)
            p[f"enc{i}.ffn.b1"] = np.zeros(self.d_ff)
            p[f"enc{i}.ffn.w2"] = _uniform(rng, (self.d_ff, d_model), b)
            p[f"enc{i}.ffn.b2"] = np.zeros(d_model)
            p[f"dec{i}.ffn.w1"] = _uniform(rng, (d_model, self.d_ff), b)
            p[f"dec{i}.ffn.b1"] = np.zeros(self.d_ff)
            p[f"dec{i}.ffn.w2"] = _uniform(rng, (self.d_ff, d_model), b)
            p[f"dec{i}.ffn.b2"] = np.zeros(d_model)
            for ln in (f"enc{i}.ln1", f"enc{i}.ln2", f"dec{i}.ln1",
                       f"dec{i}.ln2", f"dec{i}.ln3"):
                p[f"{ln}.g"] = np.ones(d_model)
                p[f"{ln}.b"] = np.zeros(d_model)
        p["out_proj"] = _uniform(rng, (d_model, self.vocab.size), b)
        self.params = {name: ad.parameter(val) for name, val in p.items()}

    def param_items(self):
        return sorted(self.params.items())

    def _mha(self, prefix, x_q, x_kv, causal):
        p = self.params
        q = ad.split_heads(ad.matmul(x_q, p[f"{prefix}.wq"]), self.n_heads)
        k = ad.split_heads(ad.matmul(x_kv, p[f"{prefix}.wk"]), self.n_heads)
        v = ad.split_heads(ad.matmul(x_kv, p[f"{prefix}.wv"]), self.n_heads)
        out = ad.merge_heads(ad.attention(q, k, v, causal=causal))
        return ad.matmul(out, p[f"{prefix}.wo"])

    def _ffn(self, prefix, x):
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, prefix, x):
        p = self.params
        return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    def encode_tokens(self, tokens: np.ndarray) -> ad.Tensor:
        x = ad.gather_rows(self.params["tok_emb"], tokens)
        for i in range(self.n_blocks):
            x = self._ln(f"enc{i}.ln1", ad.add(x, self._mha(f"enc{i}.attn", x, x, False)))
            x = self._ln(f"enc{i}.ln2", ad.add(x, self._ffn(f"enc{i}.ffn", x)))
        return x

    def decode_logits(self, memory: ad.Tensor, prefix: np.ndarray) -> ad.Tensor:
        """Temperature-scaled logits for every prefix position."""
        if len(prefix) == 0 or prefix[0] != self.vocab.sob:
            raise ValueError("decoder prefix must start with the [sob] token")
        if len(prefix) > self.max_len:
            raise ValueError(
                f"prefix length {len(prefix)} exceeds max context {self.max_len}"
            )
        positions = np.arange(len(prefix))
        x = ad.add(
            ad.gather_rows(self.params["tok_emb"], prefix),
            ad.gather_rows(self.params["pos_emb"], positions),
        )
        for i in range(self.n_blocks):
            x = self._ln(f"dec{i}.ln1", ad.add(x, self._mha(f"dec{i}.self", x, x, True)))
            x = self._ln(
                f"dec{i}.ln2", ad.add(x, self._mha(f"dec{i}.cross", x, memory, False))
            )
            x = self._ln(f"dec{i}.ln3", ad.add(x, self._ffn(f"dec{i}.ffn", x)))
        logits = ad.matmul(x, self.params["out_proj"])
        return ad.scale(logits, 1.0 / self.temperature)


def truncate_history(history, max_len, rng=None):
    """Cap a history at max_len items: seeded uniform sample when an rng is
    given (training), else the first max_len by ascending item id."""
    hist = np.asarray(sorted(history), dtype=np.int64)
    if len(hist) <= max_len:
        return hist
    if rng is None:
        return hist[:max_len]
    picked = rng.choice(len(hist), size=max_len, replace=False)
    return hist[np.sort(picked)]


def encode_history(model: GeneratorModel, history, rng=None) -> ad.Tensor:
    """Encoder memory for a user's history set; one row per kept item."""
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    tokens = truncate_history(history, model.max_len, rng)
    return model.encode_tokens(tokens)


def decode_step(model: GeneratorModel, memory: ad.Tensor, prefix) -> np.ndarray:
    """Next-token probability vector over the whole vocabulary."""
    prefix = np.asarray(prefix, dtype=np.int64)
    logits = model.decode_logits(memory, prefix).value[-1]
    mx = logits.max()
    e = np.exp(logits - mx)
    return e / e.sum()


def generation_loss(model: GeneratorModel, history, inst: InstructiveBundle,
                    rng=None) -> ad.Tensor:
    """Teacher-forced cross-entropy over the instruction plus [eob].

    Step t conditions on [sob] + items[:t] and predicts items[t]; the final
    step predicts [eob]. The loss is averaged over the k+1 steps.
    """
    items = np.asarray(inst.items, dtype=np.int64)
    if len(items) + 1 > model.max_len:
        raise ValueError(
            f"instruction of size {len(items)} does not fit max context "
            f"{model.max_len}"
        )
    memory = encode_history(model, history, rng)
    prefix = np.concatenate(([model.vocab.sob], items))
    targets = np.concatenate((items, [model.vocab.eob]))
    logits = model.decode_logits(memory, prefix)
    return ad.cross_entropy_logits(logits, targets)


def generate(model: GeneratorModel, history) -> PseudoBundle:
    """Greedy decode with duplicate masking.

    At each step the argmax runs over the not-yet-emitted items plus [eob]
    ([pad] and [sob] never compete); decoding stops at [eob] or after
    max_len items.
    """
    memory = encode_history(model, history)
    vocab = model.vocab
    prefix = [vocab.sob]
    items = []
    banned = np.zeros(vocab.size, dtype=bool)
    banned[vocab.pad] = True
    banned[vocab.sob] = True
    for _ in range(model.max_len):
        probs = decode_step(model, memory, prefix)
        probs[banned] = -1.0
        token = int(np.argmax(probs))
        if token == vocab.eob:
            return PseudoBundle(items=items, terminated=True)
        items.append(token)
        banned[token] = True
        if len(prefix) == model.max_len:
            break
        prefix.append(token)
    return PseudoBundle(items=items, terminated=False)
