"""Self-attention document classifier whose attention weights become graph edges.

Scaled dot-product scores pass through ReLU and are divided by the sentence
count instead of a softmax; heads are concatenated, projected, pushed through
one ReLU layer, mean-pooled and classified.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedstore import EmbeddedDocument
from .evalstats import compute_metrics


@dataclass(frozen=True)
class AttnConfig:
    heads: int = 4
    layers: int = 1
    d_model: int = 384
    K: int = 2
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class AttentionMatrix:
    """Head-aggregated attention for one document; non-negative, not normalized."""

    doc_id: str
    A: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float32)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValueError(f"attention matrix for {self.doc_id!r} must be square and non-empty")
        if not np.isfinite(A).all():
            raise ValueError(f"attention matrix for {self.doc_id!r} has non-finite entries")
        if (A < 0).any():
            raise ValueError(f"attention matrix for {self.doc_id!r} has negative entries")
        object.__setattr__(self, "A", A)

    @property
    def n(self) -> int:
        return self.A.shape[0]


class AttnModel:
    """Parameter container; per layer and head: query/key/value projections."""

    def __init__(self, cfg: AttnConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA77]))

        def weight(rows, cols):
            s = math.sqrt(6.0 / (rows + cols))  # keeps ReLU pre-activations healthy at init
            return Tensor(rng.uniform(-s, s, size=(rows, cols)).astype(np.float32), requires_grad=True)

        def bias(cols):
            return Tensor(np.zeros((1, cols), dtype=np.float32), requires_grad=True)

        self.layers = []
        for _ in range(cfg.layers):
            layer = {
                "wq": [weight(cfg.d_model, cfg.d_head) for _ in range(cfg.heads)],
                "wk": [weight(cfg.d_model, cfg.d_head) for _ in range(cfg.heads)],
                "wv": [weight(cfg.d_model, cfg.d_head) for _ in range(cfg.heads)],
                "wo": weight(cfg.d_model, cfg.d_model),
                "bo": bias(cfg.d_model),
                "wf": weight(cfg.d_model, cfg.d_model),
                "bf": bias(cfg.d_model),
            }
            self.layers.append(layer)
        self.w_cls = weight(cfg.d_model, cfg.K)
        self.b_cls = bias(cfg.K)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            for h in range(self.cfg.heads):
                params += [layer["wq"][h], layer["wk"][h], layer["wv"][h]]
            params += [layer["wo"], layer["bo"], layer["wf"], layer["bf"]]
        params += [self.w_cls, self.b_cls]
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for li, layer in enumerate(self.layers):
            for h in range(self.cfg.heads):
                named[f"layer{li}.head{h}.wq"] = layer["wq"][h]
                named[f"layer{li}.head{h}.wk"] = layer["wk"][h]
                named[f"layer{li}.head{h}.wv"] = layer["wv"][h]
            named[f"layer{li}.wo"] = layer["wo"]
            named[f"layer{li}.bo"] = layer["bo"]
            named[f"layer{li}.wf"] = layer["wf"]
            named[f"layer{li}.bf"] = layer["bf"]
        named["cls.w"] = self.w_cls
        named["cls.b"] = self.b_cls
        return named

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters().items():
            value = state[name]
            if value.shape != tensor.data.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape} != {tensor.data.shape}")
            tensor.data = value.astype(np.float32).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}


def relu_attention(q: Tensor, k: Tensor, n: int) -> Tensor:
    """relu(Q K^T / sqrt(d_head)) / n — ReLU in place of softmax, length-normalized."""
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    d_head = q.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_head))
    return ad.scale(ad.relu(scores), 1.0 / n)


def forward(model: AttnModel, x: Tensor | np.ndarray) -> tuple[Tensor, list[list[Tensor]]]:
    """Run the classifier on one document's embedding rows.

    Returns (logits 1 x K, per-layer list of per-head attention matrices).
    """
    cfg = model.cfg
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[1] != cfg.d_model:
        raise ValueError(f"input dim {h.shape[1]} != d_model {cfg.d_model}")
    n = h.shape[0]
    all_attn: list[list[Tensor]] = []
    for layer in model.layers:
        heads_attn = []
        heads_out = []
        for hi in range(cfg.heads):
            q = ad.matmul(h, layer["wq"][hi])
            k = ad.matmul(h, layer["wk"][hi])
            v = ad.matmul(h, layer["wv"][hi])
            attn = relu_attention(q, k, n)
            heads_attn.append(attn)
            heads_out.append(ad.matmul(attn, v))
        concat = _concat_cols(heads_out)
        projected = ad.add(ad.matmul(concat, layer["wo"]), layer["bo"])
        h = ad.relu(ad.add(ad.matmul(projected, layer["wf"]), layer["bf"]))
        all_attn.append(heads_attn)
    pooled = ad.mean_rows(h)
    logits = ad.add(ad.matmul(pooled, model.w_cls), model.b_cls)
    return logits, all_attn


def _concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    out = np.hstack([t.data for t in tensors])
    widths = [t.shape[1] for t in tensors]

    def back(c: np.ndarray):
        grads = []
        offset = 0
        for w in widths:
            grads.append(np.ascontiguousarray(c[:, offset : offset + w]))
            offset += w
        return tuple(grads)

    return ad._record(out, tuple(tensors), back)


def classify(model: AttnModel, doc: EmbeddedDocument) -> int:
    with ad.no_grad():
        logits, _ = forward(model, doc.X)
    return int(np.argmax(logits.data[0]))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_f1: float


def train(
    train_docs: Sequence[EmbeddedDocument],
    val_docs: Sequence[EmbeddedDocument],
    cfg: AttnConfig,
) -> tuple[AttnModel, list[EpochRecord]]:
    """Adam + cross-entropy with early stopping on validation macro-F1.

    Deterministic for a fixed cfg.seed; returns the best-validation checkpoint.
    """
    if not train_docs or not val_docs:
        raise ValueError("empty training or validation split")
    for doc in list(train_docs) + list(val_docs):
        if doc.d != cfg.d_model:
            raise ValueError(f"document {doc.id!r} has d={doc.d}, expected {cfg.d_model}")
    present = {doc.label for doc in train_docs}
    missing = sorted(set(range(cfg.K)) - present)
    if missing:
        raise ValueError(f"classes {missing} absent from training data")

    model = AttnModel(cfg)
    params = model.parameters()
    state = ad.AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F]))

    history: list[EpochRecord] = []
    best_f1 = -1.0
    best_state = model.state()
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_docs))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_docs[i] for i in order[start : start + cfg.batch_size]]
            ad.zero_grads(params)
            with ad.tape() as t:
                total = None
                for doc in batch:
                    logits, _ = forward(model, doc.X)
                    loss = ad.cross_entropy(logits, doc.label)
                    total = loss if total is None else ad.add(total, loss)
                batch_loss = ad.scale(total, 1.0 / len(batch))
                ad.backward(batch_loss, on=t)
            ad.adam_step(params, state)
            loss_sum += batch_loss.item() * len(batch)

        preds = [classify(model, doc) for doc in val_docs]
        metrics = compute_metrics(preds, [doc.label for doc in val_docs], cfg.K)
        history.append(EpochRecord(epoch, loss_sum / len(train_docs), metrics.macro_f1))

        if metrics.macro_f1 > best_f1:
            best_f1 = metrics.macro_f1
            best_state = model.state()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    model.load_state(best_state)
    return model, history


def extract_attention(model: AttnModel, doc: EmbeddedDocument) -> AttentionMatrix:
    """Evaluation-mode forward; last layer's heads averaged elementwise."""
    if doc.d != model.cfg.d_model:
        raise ValueError(f"document {doc.id!r} has d={doc.d}, expected {model.cfg.d_model}")
    with ad.no_grad():
        _, all_attn = forward(model, doc.X)
    heads = [t.data.astype(np.float64) for t in all_attn[-1]]
    mean = (sum(heads) / len(heads)).astype(np.float32)
    return AttentionMatrix(doc_id=doc.id, A=mean)
