"""Graph attention network classifier over document graphs.

Single-head layers: LeakyReLU-scored neighbourhood softmax (self-loops
included), ELU node activation, average-pool readout, softmax classification.
Edge weights ride along in the data model but do not enter the attention score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evalstats import compute_metrics
from .graphgen import DocumentGraph

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GatConfig:
    layers: int = 2
    hidden: int = 64
    keep_prob: float = 0.8
    lr: float = 0.001
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    K: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.layers <= 3:
            raise ValueError("layers must lie in [1, 3]")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


class GatModel:
    """Per layer: weight matrix W (in x out) and a scoring vector split into
    source/target halves; plus a linear classifier on the pooled readout."""

    def __init__(self, cfg: GatConfig, feat_dim: int):
        self.cfg = cfg
        self.feat_dim = feat_dim
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6A7]))

        def weight(rows, cols):
            s = 1.0 / math.sqrt(rows)
            return Tensor(rng.uniform(-s, s, size=(rows, cols)).astype(np.float32), requires_grad=True)

        self.layers = []
        in_dim = feat_dim
        for _ in range(cfg.layers):
            self.layers.append(
                {
                    "w": weight(in_dim, cfg.hidden),
                    "a_src": weight(cfg.hidden, 1),
                    "a_dst": weight(cfg.hidden, 1),
                }
            )
            in_dim = cfg.hidden
        self.w_cls = weight(cfg.hidden, cfg.K)
        self.b_cls = Tensor(np.zeros((1, cfg.K), dtype=np.float32), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params += [layer["w"], layer["a_src"], layer["a_dst"]]
        params += [self.w_cls, self.b_cls]
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for li, layer in enumerate(self.layers):
            named[f"layer{li}.w"] = layer["w"]
            named[f"layer{li}.a_src"] = layer["a_src"]
            named[f"layer{li}.a_dst"] = layer["a_dst"]
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


def neighborhood_mask(n: int, edges: Sequence[tuple[int, int, float]]) -> np.ndarray:
    """Boolean attention mask: the undirected edges plus a self-loop per node."""
    mask = np.eye(n, dtype=bool)
    for i, j, *_ in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
        mask[i, j] = True
        mask[j, i] = True
    return mask


def gat_layer(
    h: Tensor, edges: Sequence[tuple[int, int, float]], w: Tensor, a_src: Tensor, a_dst: Tensor
) -> tuple[Tensor, Tensor]:
    """One attention layer; returns (new node features, attention coefficients)."""
    n = h.shape[0]
    mask = neighborhood_mask(n, edges)
    wh = ad.matmul(h, w)
    scores = ad.add(ad.matmul(wh, a_src), ad.transpose(ad.matmul(wh, a_dst)))
    attn = ad.softmax_rows(ad.leaky_relu(scores, LEAKY_SLOPE), mask=mask)
    return ad.elu(ad.matmul(attn, wh)), attn


def readout(h: Tensor) -> Tensor:
    """Average pooling over nodes."""
    if h.shape[0] < 1:
        raise ValueError("readout requires at least one node")
    return ad.mean_rows(h)


def forward(
    model: GatModel,
    graph: DocumentGraph,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Returns (logits 1 x K, per-layer attention coefficient matrices)."""
    feats = np.vstack([node.feat for node in graph.nodes])
    if feats.shape[1] != model.feat_dim:
        raise ValueError(f"graph {graph.doc_id!r}: feature dim {feats.shape[1]} != {model.feat_dim}")
    h = Tensor(feats)
    coefficients = []
    for layer in model.layers:
        h, attn = gat_layer(h, graph.edges, layer["w"], layer["a_src"], layer["a_dst"])
        coefficients.append(attn)
        if train and model.cfg.keep_prob < 1.0:
            if dropout_rng is None:
                raise ValueError("training forward requires a dropout rng")
            h = ad.dropout(h, model.cfg.keep_prob, dropout_rng)
    logits = ad.add(ad.matmul(readout(h), model.w_cls), model.b_cls)
    return logits, coefficients


def predict(model: GatModel, graph: DocumentGraph) -> tuple[int, np.ndarray]:
    """Evaluation-mode class index and softmax probabilities."""
    with ad.no_grad():
        logits, _ = forward(model, graph, train=False)
        probs = ad.softmax_rows(logits).data[0]
    return int(np.argmax(probs)), probs


def train_gat(
    train_graphs: Sequence[DocumentGraph],
    val_graphs: Sequence[DocumentGraph],
    cfg: GatConfig,
) -> tuple[GatModel, list]:
    """Adam + cross-entropy with early stopping on validation macro-F1."""
    from .attnmodel import EpochRecord

    if not train_graphs or not val_graphs:
        raise ValueError("empty training or validation split")
    dims = {g.nodes[0].feat.shape[0] for g in list(train_graphs) + list(val_graphs)}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions: {sorted(dims)}")
    present = {g.label for g in train_graphs}
    missing = sorted(set(range(cfg.K)) - present)
    if missing:
        raise ValueError(f"classes {missing} absent from training data")

    model = GatModel(cfg, feat_dim=dims.pop())
    params = model.parameters()
    state = ad.AdamState(lr=cfg.lr)
    seq = np.random.SeedSequence([cfg.seed, 0xD0])
    shuffle_rng = np.random.default_rng(seq.spawn(1)[0])
    dropout_rng = np.random.default_rng(seq.spawn(1)[0])

    history: list[EpochRecord] = []
    best_f1 = -1.0
    best_state = model.state()
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_graphs))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_graphs[i] for i in order[start : start + cfg.batch_size]]
            ad.zero_grads(params)
            with ad.tape() as t:
                total = None
                for g in batch:
                    logits, _ = forward(model, g, train=True, dropout_rng=dropout_rng)
                    loss = ad.cross_entropy(logits, g.label)
                    total = loss if total is None else ad.add(total, loss)
                batch_loss = ad.scale(total, 1.0 / len(batch))
                ad.backward(batch_loss, on=t)
            ad.adam_step(params, state)
            loss_sum += batch_loss.item() * len(batch)

        preds = [predict(model, g)[0] for g in val_graphs]
        metrics = compute_metrics(preds, [g.label for g in val_graphs], cfg.K)
        history.append(EpochRecord(epoch, loss_sum / len(train_graphs), metrics.macro_f1))

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
