"""Two-stage training: extractor pretraining under the graph-conv head,
then end-to-end training of the full token-transformer model.

Everything here is deterministic given (seed, config, corpus): parameter
init consumes one seeded generator in a fixed order, epoch shuffles come
from the same generator, and checkpoints serialize to canonical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import Sample, class_counts
from .errors import CheckpointError, ContractError, TrainingAbort
from .features import extract, init_backbone
from .graphs import build_knn_graph, link_markers, normalized_laplacian
from .metrics import ConfusionMatrix, confusion_matrix, fscores_from_confusion
from .pretrain import init_gcn, pretrain_forward, pretrain_step
from .tensor import Tape, Tensor
from .tokens import init_tokenizer, tokenize
from .transformer import (
    class_weights_from_counts,
    classify,
    encode,
    init_encoder,
    init_head,
    node_loss,
)

CHECKPOINT_MAGIC = b"cellgraph-ckpt v1\n"


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grad_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint container: text header + named little-endian float64 tensors
#
# Byte layout:
#   magic line            b"cellgraph-ckpt v1\n"
#   header length line    ASCII decimal + b"\n"
#   header                canonical JSON (sorted keys): format_version,
#                         config, config_digest, step, rng_state, tensors
#                         (ordered list of {name, shape})
#   b"\n"
#   data                  float64 little-endian, concatenated in tensor
#                         table order


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, config: dict, params: dict[str, Tensor], step: int = 0,
                    rng_state: dict | None = None) -> None:
    names = sorted(params)
    header = {
        "format_version": 1,
        "config": config,
        "config_digest": config_digest(config),
        "step": step,
        "rng_state": rng_state,
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(str(len(blob)).encode() + b"\n")
        f.write(blob)
        f.write(b"\n")
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, Tensor]
    step: int
    rng_state: dict | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        length = int(f.readline().strip())
        header = json.loads(f.read(length).decode())
        if f.read(1) != b"\n":
            raise CheckpointError(f"{path}: malformed header terminator")
        params: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: truncated tensor '{entry['name']}'")
            params[entry["name"]] = Tensor(
                np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), requires_grad=True
            )
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return Checkpoint(
        config=header["config"],
        params=params,
        step=header["step"],
        rng_state=header["rng_state"],
    )


def check_shapes(loaded: dict[str, Tensor], expected: dict[str, Tensor], subset: str = "") -> None:
    """Fail loudly, listing every offending name/shape pair."""
    problems = []
    for name, p in expected.items():
        if subset and not name.startswith(subset):
            continue
        if name not in loaded:
            problems.append(f"missing '{name}' (need {p.data.shape})")
        elif loaded[name].data.shape != p.data.shape:
            problems.append(
                f"'{name}': checkpoint {loaded[name].data.shape} vs model {p.data.shape}"
            )
    if problems:
        raise CheckpointError("incompatible checkpoint: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# model assembly and forward passes


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All learnable state for the full model, keyed by dotted names."""
    params: dict[str, Tensor] = {}
    params.update(init_backbone(cfg, rng))
    params.update(init_tokenizer(cfg, rng))
    params.update(init_encoder(cfg, rng))
    params.update(init_head(cfg, rng))
    return params


def init_pretrain_model(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    params.update(init_backbone(cfg, rng))
    params.update(init_gcn(cfg, rng))
    return params


def model_forward(sample: Sample, params: dict[str, Tensor], cfg: ModelConfig):
    """Image in, per-node class posteriors out."""
    fmap, _ = extract(Tensor(sample.image), params, cfg)
    g = build_knn_graph(sample.centroids, cfg.knn)
    lm = link_markers(normalized_laplacian(g), cfg.link_dim)
    toks = tokenize(g, fmap, lm, params, cfg)
    return classify(encode(toks, params, cfg), g.n, params)


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(snapshot[name].copy(), requires_grad=True) for name in params}


def _maybe_flip(sample: Sample, rng: np.random.Generator, enabled: bool) -> Sample:
    if not enabled:
        return sample
    size = sample.image.shape[2]
    out = sample
    if rng.random() < 0.5:  # horizontal
        out = Sample(
            image=out.image[:, :, ::-1].copy(),
            centroids=np.stack([size - 1 - out.centroids[:, 0], out.centroids[:, 1]], axis=1),
            labels=out.labels,
            mask=out.mask[:, ::-1].copy(),
            seed=out.seed,
        )
    if rng.random() < 0.5:  # vertical
        out = Sample(
            image=out.image[:, ::-1, :].copy(),
            centroids=np.stack([out.centroids[:, 0], size - 1 - out.centroids[:, 1]], axis=1),
            labels=out.labels,
            mask=out.mask[::-1, :].copy(),
            seed=out.seed,
        )
    return out


# ---------------------------------------------------------------------------
# stage 1: extractor pretraining


@dataclass
class RunResult:
    params: dict[str, Tensor]  # final parameters
    best_params: dict[str, np.ndarray]  # snapshot selected on validation
    history: list[dict] = field(default_factory=list)
    seed: int = 0


def _val_pretrain_loss(val, params, tcfg, weights) -> float:
    losses = [pretrain_forward(s, params, tcfg, weights)[0].item() for s in val]
    return float(np.mean(losses))


def run_pretrain(tcfg: TrainConfig, train: list[Sample], val: list[Sample], seed: int,
                 epochs: int | None = None) -> RunResult:
    """Train extractor + GCN; the best-validation-loss snapshot is kept."""
    cfg = tcfg.model
    epochs = tcfg.pretrain_epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    params = init_pretrain_model(cfg, rng)
    weights = class_weights_from_counts(class_counts(train, cfg.num_classes))
    opt = Adam(params, tcfg.pretrain_lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)

    best = _snapshot(params)
    best_val = _val_pretrain_loss(val, params, tcfg, weights) if val else np.inf
    history: list[dict] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        pending = 0
        for idx in order:
            sample = _maybe_flip(train[idx], rng, tcfg.augment_flips)
            report = pretrain_step(sample, params, tcfg, weights)
            step += 1
            if not np.isfinite(report.total):
                raise TrainingAbort(step, seed)
            epoch_losses.append(report.total)
            pending += 1
            if pending == tcfg.batch_accum:
                opt.step(1.0 / pending)
                opt.zero_grad()
                pending = 0
        if pending:
            opt.step(1.0 / pending)
            opt.zero_grad()
        val_loss = _val_pretrain_loss(val, params, tcfg, weights) if val else np.inf
        history.append({
            "epoch": epoch + 1,
            "step": step,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
        })
        if val_loss < best_val:
            best_val = val_loss
            best = _snapshot(params)
    return RunResult(params=params, best_params=best, history=history, seed=seed)


def evaluate_gcn(params: dict[str, Tensor], tcfg: TrainConfig, samples: list[Sample]) -> "EvalReport":
    """Node predictions from the pretraining classifier itself."""
    if not samples:
        raise ContractError("empty evaluation split")
    preds, labels = [], []
    for s in samples:
        _, logits = _gcn_logits(s, params, tcfg)
        preds.append(logits.argmax(axis=1))
        labels.append(s.labels)
    _, per_class, favg, cm = _report(np.concatenate(preds), np.concatenate(labels), tcfg.model.num_classes)
    return EvalReport(per_class=per_class, f_avg=favg, confusion=cm)


def _gcn_logits(sample: Sample, params, tcfg: TrainConfig):
    from . import tensor as T
    from .features import bilinear_sample, edge_midpoints, sinusoidal_position_codes
    from .pretrain import gcn_forward

    cfg = tcfg.model
    fmap, _ = extract(Tensor(sample.image), params, cfg)
    g = build_knn_graph(sample.centroids, tcfg.gcn_edges)
    z = bilinear_sample(fmap, g.centroids)
    codes = sinusoidal_position_codes(g.centroids, cfg.width)
    nodes = T.linear(T.concat([z, Tensor(codes)], axis=1), params["gcn.node_in.w"], params["gcn.node_in.b"])
    if g.num_edges:
        ze = bilinear_sample(fmap, edge_midpoints(g.centroids, g.edge_list))
        edges = T.linear(ze, params["gcn.edge_in.w"], params["gcn.edge_in.b"])
    else:
        edges = Tensor(np.zeros((0, cfg.width)))
    _, logits = gcn_forward(nodes, edges, g.edge_list, params)
    return g, logits.data


# ---------------------------------------------------------------------------
# stage 2: end-to-end training


def run_finetune(tcfg: TrainConfig, train: list[Sample], val: list[Sample], seed: int,
                 init_from: dict[str, Tensor] | None = None,
                 epochs: int | None = None) -> RunResult:
    """Train the full model; ``init_from`` supplies pretrained extractor
    weights (only ``backbone.*`` entries transfer).  The snapshot with the
    best validation F_avg is kept."""
    cfg = tcfg.model
    epochs = tcfg.finetune_epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    params = init_model(cfg, rng)
    if init_from is not None:
        check_shapes(init_from, params, subset="backbone.")
        for name in params:
            if name.startswith("backbone."):
                params[name] = Tensor(init_from[name].data.copy(), requires_grad=True)
    weights = class_weights_from_counts(class_counts(train, cfg.num_classes))
    opt = Adam(params, tcfg.finetune_lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)

    best = _snapshot(params)
    best_favg = -1.0
    history: list[dict] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        pending = 0
        for idx in order:
            sample = _maybe_flip(train[idx], rng, tcfg.augment_flips)
            with Tape() as tape:
                probs = model_forward(sample, params, cfg)
                loss = node_loss(probs, _onehot(sample.labels, cfg.num_classes),
                                 weights, cfg.focal_gamma)
                tape.backward(loss)
            step += 1
            if not np.isfinite(loss.item()):
                raise TrainingAbort(step, seed)
            epoch_losses.append(loss.item())
            pending += 1
            if pending == tcfg.batch_accum:
                opt.step(1.0 / pending)
                opt.zero_grad()
                pending = 0
        if pending:
            opt.step(1.0 / pending)
            opt.zero_grad()

        val_loss, val_favg = _val_metrics(val, params, tcfg, weights) if val else (np.inf, np.nan)
        history.append({
            "epoch": epoch + 1,
            "step": step,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "val_f_avg": val_favg,
        })
        if val and val_favg > best_favg:
            best_favg = val_favg
            best = _snapshot(params)
    if not val:
        best = _snapshot(params)
    return RunResult(params=params, best_params=best, history=history, seed=seed)


def _val_metrics(val, params, tcfg: TrainConfig, weights):
    cfg = tcfg.model
    losses, preds, labels = [], [], []
    for s in val:
        probs = model_forward(s, params, cfg)
        losses.append(node_loss(probs, _onehot(s.labels, cfg.num_classes),
                                weights, cfg.focal_gamma).item())
        preds.append(probs.data.argmax(axis=1))
        labels.append(s.labels)
    _, _, favg, _ = _report(np.concatenate(preds), np.concatenate(labels), cfg.num_classes)
    return float(np.mean(losses)), favg


@dataclass
class EvalReport:
    per_class: np.ndarray
    f_avg: float
    confusion: ConfusionMatrix


def _report(preds, labels, num_classes):
    cm = confusion_matrix(preds, labels, num_classes)
    per_class, favg = fscores_from_confusion(cm)
    return preds, per_class, favg, cm


def evaluate(params: dict[str, Tensor], cfg: ModelConfig, samples: list[Sample]) -> EvalReport:
    """Deterministic forward pass over a split; classification report."""
    if not samples:
        raise ContractError("empty evaluation split")
    preds, labels = [], []
    for s in samples:
        probs = model_forward(s, params, cfg)
        preds.append(probs.data.argmax(axis=1))
        labels.append(s.labels)
    _, per_class, favg, cm = _report(np.concatenate(preds), np.concatenate(labels), cfg.num_classes)
    return EvalReport(per_class=per_class, f_avg=favg, confusion=cm)


def params_from_best(result: RunResult) -> dict[str, Tensor]:
    return _restore(result.params, result.best_params)


# ---------------------------------------------------------------------------
# hyperparameter sweeps


def sweep(tcfg: TrainConfig, splits, axis: str, values, seeds=None,
          pretrain_epochs: int | None = None, finetune_epochs: int | None = None):
    """Mean per-class F and F_avg per setting over seeds.

    axis "layers" varies encoder depth (pretraining is shared per seed and
    the full model is retrained); axis "edges" varies the neighbor count of
    the pretraining graph and scores the pretraining classifier itself.
    """
    import dataclasses as _dc

    train, val, test = splits
    seeds = tuple(seeds) if seeds is not None else tcfg.seeds
    rows = []
    if axis == "layers":
        pretrained = {
            seed: run_pretrain(tcfg, train, val, seed, epochs=pretrain_epochs)
            for seed in seeds
        }
        for v in values:
            scores = []
            for seed in seeds:
                cfg_v = _dc.replace(tcfg, model=_dc.replace(tcfg.model, encoder_layers=int(v)))
                ft = run_finetune(cfg_v, train, val, seed,
                                  init_from=params_from_best(pretrained[seed]),
                                  epochs=finetune_epochs)
                rep = evaluate(params_from_best(ft), cfg_v.model, test)
                scores.append((rep.per_class, rep.f_avg))
            rows.append(_sweep_row(v, scores))
    elif axis == "edges":
        for v in values:
            scores = []
            for seed in seeds:
                cfg_v = _dc.replace(tcfg, gcn_edges=int(v))
                pre = run_pretrain(cfg_v, train, val, seed, epochs=pretrain_epochs)
                rep = evaluate_gcn(params_from_best(pre), cfg_v, test)
                scores.append((rep.per_class, rep.f_avg))
            rows.append(_sweep_row(v, scores))
    else:
        raise ContractError(f"unknown sweep axis '{axis}' (use 'layers' or 'edges')")
    return rows


def _sweep_row(value, scores):
    per_class = np.mean([np.asarray(s[0], dtype=np.float64) for s in scores], axis=0)
    favg = float(np.mean([s[1] for s in scores]))
    return {"value": value, "per_class": per_class.tolist(), "f_avg": favg}
