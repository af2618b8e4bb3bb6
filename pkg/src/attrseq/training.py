"""Adam optimization, per-order training, and the order ensemble.

A member is one model trained under one attribute emission order. The
ensemble trains ten members (six named order policies plus four random
ones), each from its own seed, and records them in a JSON manifest. Members
are fully independent, so they can be trained in worker processes without
affecting the results.

Per-sample losses are averaged over sequence length, and batch gradients
are averaged over the batch, so the logged loss is comparable across orders
with different sequence-length distributions.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as jmodel
from .context import ExemplarIndex, knn, max_fuse
from .data import AttributeVocab, OrderSpec, Sample, build_orders, labels_to_sequence
from .errors import ContractError, DataFileError, TrainingDiverged
from .numerics import Array, Rng

MANIFEST_VERSION = 1


@dataclass
class AdamState:
    """First/second-moment accumulators, one pair per named parameter tensor."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Array] = None
    v: dict[str, Array] = None

    @classmethod
    def for_params(cls, params: jmodel.ModelParams, learning_rate: float = 1e-4) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m={name: np.zeros_like(a) for name, a in params.opt_arrays()},
            v={name: np.zeros_like(a) for name, a in params.opt_arrays()},
        )


def adam_step(state: AdamState, params: jmodel.ModelParams, grads: dict[str, Array]) -> None:
    """Bias-corrected Adam update, applied to the parameter tensors in place."""
    named = params.opt_arrays()
    if set(grads) != {name for name, _ in named}:
        raise ContractError("adam_step: gradient keys do not match parameter tensors")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named:
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in tensor {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(grads: dict[str, Array], threshold: float) -> float:
    """Scale all gradients so their joint L2 norm is at most threshold."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > threshold and total > 0:
        scale = threshold / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    learning_rate: float = 1e-4
    dropout: bool = True
    clip: bool = False
    clip_threshold: float = 5.0
    context_refresh_every: int = 1
    val_fraction: float = 0.0  # > 0 holds out a slice and enables early stopping
    patience: int = 5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("TrainConfig: epochs must be >= 0 and batch_size >= 1")
        if self.context_refresh_every < 1:
            raise ContractError("TrainConfig: context_refresh_every must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("TrainConfig: val_fraction must lie in [0, 1)")
        if self.patience < 1:
            raise ContractError("TrainConfig: patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
            "learning_rate": self.learning_rate, "dropout": self.dropout,
            "clip": self.clip, "clip_threshold": self.clip_threshold,
            "context_refresh_every": self.context_refresh_every,
            "val_fraction": self.val_fraction, "patience": self.patience,
        }


def encode_context_vectors(params: jmodel.ModelParams, config: jmodel.ModelConfig,
                           samples: list[Sample]) -> Array:
    """Context vector of every sample under the current encoder (no tapes kept).

    Samples share the region count, so the sweep is batched: one matrix
    product per step for the whole pool.
    """
    from .numerics import sigmoid

    X = np.stack([s.regions for s in samples])  # (N, m, d_region)
    if params.encoder is None:
        return np.mean(X @ params.projection.W_p.T + params.projection.b_p, axis=1)
    e = params.encoder
    d = config.d
    n = len(samples)
    h = np.zeros((n, d))
    c = np.zeros((n, d))
    for t in range(config.m):
        pre = X[:, t] @ e.Wx.T + h @ e.Wh.T + e.b
        f = sigmoid(pre[:, :d])
        i = sigmoid(pre[:, d:2 * d])
        o = sigmoid(pre[:, 2 * d:3 * d])
        g = np.tanh(pre[:, 3 * d:])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


def neighbor_table(samples: list[Sample], k: int, exclude_self: bool) -> list[list[int]]:
    """Top-k neighbor indices per sample in global-feature space (fixed per run)."""
    index = ExemplarIndex(ids=[s.id for s in samples],
                          features=np.stack([s.global_feature for s in samples]))
    by_id = {s.id: i for i, s in enumerate(samples)}
    table = []
    for s in samples:
        ids = knn(index, s.global_feature, k, exclude_id=s.id if exclude_self else None)
        table.append([by_id[i] for i in ids])
    return table


def sample_loss_and_grads(params: jmodel.ModelParams, config: jmodel.ModelConfig,
                          sample: Sample, target_seq: list[int],
                          exemplar_zs: list[Array], rng: Rng | None, dropout: bool):
    """Forward and backward for one sample; returns (loss, grads)."""
    enc = jmodel.encode(params, config, sample.regions, want_tape=True)
    z_star, fuse_tape = max_fuse(enc.z, exemplar_zs)
    dec = jmodel.decode_train(params, config, enc.H, enc.z, z_star, target_seq,
                              rng=rng, train=dropout)
    dlogits = jmodel.softmax_xent_grads(dec.logits, dec.targets)
    grads = jmodel.backward_full(params, config, enc, fuse_tape, dec, dlogits)
    return dec.mean_loss, grads


@dataclass
class MemberResult:
    params: jmodel.ModelParams
    loss_log: list[tuple[int, float]]
    order: OrderSpec
    val_log: list[tuple[int, float]] | None = None
    stopped_early: bool = False


def train_member(train_samples: list[Sample], vocab: AttributeVocab, order: OrderSpec,
                 train_config: TrainConfig, model_config: jmodel.ModelConfig) -> MemberResult:
    """Train one order-specific model from scratch.

    Every epoch refreshes the exemplar context cache (on the configured
    cadence), then sweeps shuffled mini-batches with teacher forcing. The
    whole run is a pure function of its arguments; equal seeds reproduce the
    loss log and the parameters bit for bit.

    With val_fraction > 0 a held-out slice is carved off (it also leaves the
    exemplar pool), validation loss is tracked, training stops after
    `patience` epochs without improvement, and the best-validation
    parameters are restored.
    """
    if len(order.permutation) != model_config.n_attr or vocab.n_attr != model_config.n_attr:
        raise ContractError("train_member: order/vocab/model attribute counts disagree")

    val_samples: list[Sample] = []
    if train_config.val_fraction > 0:
        # separate stream so the main seed's draw order is unchanged at fraction 0
        split = Rng(train_config.seed + 7919).permutation(len(train_samples))
        n_val = max(1, int(round(train_config.val_fraction * len(train_samples))))
        val_idx = {int(i) for i in split[:n_val]}
        if len(val_idx) >= len(train_samples):
            raise ContractError("train_member: val_fraction leaves no training data")
        val_samples = [train_samples[i] for i in sorted(val_idx)]
        train_samples = [s for i, s in enumerate(train_samples) if i not in val_idx]

    rng = Rng(train_config.seed)
    params = jmodel.init_params(model_config, rng)
    adam = AdamState.for_params(params, train_config.learning_rate)
    targets = [labels_to_sequence(s.labels, order) for s in train_samples]
    val_targets = [labels_to_sequence(s.labels, order) for s in val_samples]

    use_context = model_config.context_enabled and model_config.k > 0
    neighbors = neighbor_table(train_samples, model_config.k, exclude_self=True) if use_context else None
    val_neighbors = None
    if use_context and val_samples:
        pool = ExemplarIndex(ids=[s.id for s in train_samples],
                             features=np.stack([s.global_feature for s in train_samples]))
        by_id = {s.id: i for i, s in enumerate(train_samples)}
        val_neighbors = [[by_id[i] for i in knn(pool, s.global_feature, model_config.k)]
                         for s in val_samples]
    context_cache: Array | None = None

    n = len(train_samples)
    loss_log: list[tuple[int, float]] = []
    val_log: list[tuple[int, float]] = []
    best_val = np.inf
    best_snapshot = None
    bad_epochs = 0
    stopped_early = False
    for epoch in range(1, train_config.epochs + 1):
        if use_context and (epoch - 1) % train_config.context_refresh_every == 0:
            context_cache = encode_context_vectors(params, model_config, train_samples)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_config.batch_size):
            batch = perm[start:start + train_config.batch_size]
            batch_grads = params.zero_grads()
            for i in batch:
                exemplar_zs = [context_cache[j] for j in neighbors[i]] if use_context else []
                loss, grads = sample_loss_and_grads(
                    params, model_config, train_samples[i], targets[i],
                    exemplar_zs, rng, train_config.dropout)
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, sample {train_samples[i].id}")
                epoch_loss += loss
                for name, g in grads.items():
                    batch_grads[name] += g
            inv = 1.0 / len(batch)
            for g in batch_grads.values():
                g *= inv
            if train_config.clip:
                clip_global_norm(batch_grads, train_config.clip_threshold)
            adam_step(adam, params, batch_grads)
        loss_log.append((epoch, epoch_loss / n))

        if val_samples:
            val_loss = _validation_loss(params, model_config, val_samples, val_targets,
                                        val_neighbors, context_cache)
            val_log.append((epoch, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best_snapshot = {name: arr.copy() for name, arr in params.opt_arrays()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= train_config.patience:
                    stopped_early = True
                    break
    if best_snapshot is not None:
        for name, arr in params.opt_arrays():
            arr[:] = best_snapshot[name]
    return MemberResult(params=params, loss_log=loss_log, order=order,
                        val_log=val_log or None, stopped_early=stopped_early)


def _validation_loss(params, model_config, val_samples, val_targets, val_neighbors,
                     context_cache) -> float:
    total = 0.0
    for i, sample in enumerate(val_samples):
        exemplar_zs = [context_cache[j] for j in val_neighbors[i]] \
            if val_neighbors is not None and context_cache is not None else []
        enc = jmodel.encode(params, model_config, sample.regions, want_tape=False)
        z_star, _ = max_fuse(enc.z, exemplar_zs)
        dec = jmodel.decode_train(params, model_config, enc.H, enc.z, z_star,
                                  val_targets[i], train=False)
        total += dec.mean_loss
    return total / len(val_samples)


def write_loss_log(path: str | Path, loss_log: list[tuple[int, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in loss_log:
            fh.write(f"{epoch},{loss!r}\n")


def read_loss_log(path: str | Path) -> list[tuple[int, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "epoch,loss":
            raise DataFileError(f"unexpected loss log header in {path}: {header!r}")
        for line in fh:
            epoch, loss = line.strip().split(",")
            rows.append((int(epoch), float(loss)))
    return rows


@dataclass
class EnsembleSpec:
    """Order/seed pairs, one per member; seeds must be distinct."""

    members: list[tuple[OrderSpec, int]]

    def __post_init__(self):
        seeds = [seed for _, seed in self.members]
        if len(set(seeds)) != len(seeds):
            raise ContractError("EnsembleSpec: member seeds must be distinct")

    @classmethod
    def standard(cls, vocab: AttributeVocab, base_seed: int, n_random: int = 4) -> "EnsembleSpec":
        """Ten members: the built order list paired with seeds base_seed + index."""
        orders = build_orders(vocab, n_random=n_random, base_seed=base_seed)
        return cls(members=[(order, base_seed + i) for i, order in enumerate(orders)])


def _member_filename(index: int) -> str:
    return f"member-{index:02d}.ckpt"


def _train_member_job(args):
    (index, train_samples, vocab, order, train_config, model_config, out_dir) = args
    result = train_member(train_samples, vocab, order, train_config, model_config)
    ckpt = Path(out_dir) / _member_filename(index)
    jmodel.save_checkpoint(result.params, model_config, ckpt,
                           extra={"order": order_to_dict(order), "train_seed": train_config.seed})
    write_loss_log(Path(out_dir) / f"member-{index:02d}-loss.csv", result.loss_log)
    return {
        "index": index,
        "kind": order.kind,
        "order_seed": order.seed,
        "permutation": list(order.permutation),
        "train_seed": train_config.seed,
        "checkpoint": ckpt.name,
        "final_loss": result.loss_log[-1][1] if result.loss_log else None,
        "sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest(),
        "status": "ok",
    }


def order_to_dict(order: OrderSpec) -> dict:
    return {"kind": order.kind, "permutation": list(order.permutation), "seed": order.seed}


def order_from_dict(record: dict) -> OrderSpec:
    return OrderSpec(kind=record["kind"], permutation=tuple(record["permutation"]),
                     seed=record.get("seed"))


def train_ensemble(train_samples: list[Sample], vocab: AttributeVocab, spec: EnsembleSpec,
                   train_config: TrainConfig, model_config: jmodel.ModelConfig,
                   out_dir: str | Path, workers: int = 1,
                   train_data_path: str | None = None, vocab_path: str | None = None) -> dict:
    """Train every member and write checkpoints plus a manifest under out_dir.

    Members are independent; with workers > 1 they are trained in separate
    processes with identical results. A member failure is recorded in its
    manifest entry instead of aborting the others.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, (order, seed) in enumerate(spec.members):
        member_cfg = TrainConfig(**{**train_config.to_dict(), "seed": seed})
        jobs.append((i, train_samples, vocab, order, member_cfg, model_config, str(out_dir)))

    entries: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_member_job, job) for job in jobs]
            for job, fut in zip(jobs, futures):
                entries.append(_entry_or_failure(job, fut.result, job[3], job[4].seed))
    else:
        for job in jobs:
            entries.append(_entry_or_failure(job, lambda j=job: _train_member_job(j), job[3], job[4].seed))

    entries.sort(key=lambda e: e["index"])
    manifest = {
        "version": MANIFEST_VERSION,
        "complete": all(e["status"] == "ok" for e in entries),
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "train_data": train_data_path,
        "vocab": vocab_path,
        "members": entries,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _entry_or_failure(job, run, order: OrderSpec, seed: int) -> dict:
    try:
        return run()
    except Exception as exc:  # member isolation: record, keep going
        return {
            "index": job[0],
            "kind": order.kind,
            "order_seed": order.seed,
            "permutation": list(order.permutation),
            "train_seed": seed,
            "checkpoint": None,
            "final_loss": None,
            "sha256": None,
            "status": f"failed: {exc}",
        }


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"manifest not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFileError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataFileError(f"unsupported manifest version in {path}")
    return manifest
