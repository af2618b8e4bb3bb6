"""The full network: region encoder, context fusion, attentive decoder, head.

Data flow for one image
-----------------------
1. The encoder LSTM reads the m region feature vectors top-down and emits a
   summary vector per region (H) plus the final context vector z = H[-1].
2. z is fused with the context vectors of the image's nearest training
   exemplars by element-wise max into z_star (context module).
3. The decoder LSTM starts from hidden state z_star and emits attribute
   tokens until the stop token. Each step is conditioned on the previous
   prediction's embedding and on a context input: the attention-weighted
   combination of H when attention is on, the constant z otherwise.
4. A linear head maps each decoder state to scores over all attributes plus
   the stop class; training uses softmax cross-entropy under teacher
   forcing, inference decodes greedily with already-emitted attributes
   masked out.

The module also owns parameter initialization, the gradient assembly for
the whole network (backward_full), and checkpoint serialization.

Checkpoint format: an 8-byte little-endian header length, a JSON header
(format name, version, config, tensor directory with shapes and byte
offsets), then the raw tensor payload as little-endian float64, row-major,
in directory order. Round-trips are byte-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cells
from .attention import AttendTape, AttentionParams, attend, attend_backward, init_attention_params
from .cells import CellState, DecoderCellParams, EncoderCellParams, StepTape
from .context import FuseTape, max_fuse_backward
from .data import validate_sequence
from .errors import CheckpointError, ContractError
from .numerics import Array, Rng, log_softmax, require_finite, softmax

CHECKPOINT_FORMAT = "attrseq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_attr: int
    d_region: int
    d: int = 512
    m: int = 6
    embed_dim: int | None = None
    attn_width: int | None = None
    k: int = 2
    attention_enabled: bool = True
    context_enabled: bool = True
    encoder_enabled: bool = True
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = min(self.d, 128)
        if self.attn_width is None:
            self.attn_width = self.d
        for name in ("n_attr", "d_region", "d", "m", "embed_dim", "attn_width"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig: {name} must be >= 1")
        if self.k < 0:
            raise ContractError("ModelConfig: k must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("ModelConfig: dropout_rate must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return self.n_attr + 1

    @property
    def stop_token(self) -> int:
        return self.n_attr

    def to_dict(self) -> dict:
        return {
            "n_attr": self.n_attr,
            "d_region": self.d_region,
            "d": self.d,
            "m": self.m,
            "embed_dim": self.embed_dim,
            "attn_width": self.attn_width,
            "k": self.k,
            "attention_enabled": self.attention_enabled,
            "context_enabled": self.context_enabled,
            "encoder_enabled": self.encoder_enabled,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ModelConfig":
        try:
            return cls(**record)
        except TypeError as exc:
            raise ContractError(f"ModelConfig: bad config record ({exc})") from exc


@dataclass
class LinearEncoderParams:
    """Shared linear projection used when the recurrent encoder is bypassed."""

    W_p: Array
    b_p: Array

    def named_arrays(self):
        yield "W_p", self.W_p
        yield "b_p", self.b_p


@dataclass
class PredictionHead:
    W_y: Array
    b_y: Array

    def named_arrays(self):
        yield "W_y", self.W_y
        yield "b_y", self.b_y


@dataclass
class ModelParams:
    """Every learned tensor, grouped by subnetwork.

    Exactly one of (encoder, projection) is set, matching
    config.encoder_enabled; attention is set iff attention is enabled.
    """

    encoder: EncoderCellParams | None
    projection: LinearEncoderParams | None
    decoder: DecoderCellParams
    attention: AttentionParams | None
    embedding: Array  # (n_attr + 1) x embed_dim; last row is the stop token
    head: PredictionHead

    def named_arrays(self) -> list[tuple[str, Array]]:
        """Checkpoint-facing per-gate tensors (views over the stacked storage)."""
        out = []
        if self.encoder is not None:
            out.extend((f"encoder.{n}", a) for n, a in self.encoder.named_arrays())
        if self.projection is not None:
            out.extend((f"projection.{n}", a) for n, a in self.projection.named_arrays())
        out.extend((f"decoder.{n}", a) for n, a in self.decoder.named_arrays())
        if self.attention is not None:
            out.extend((f"attention.{n}", a) for n, a in self.attention.named_arrays())
        out.append(("embedding.table", self.embedding))
        out.extend((f"head.{n}", a) for n, a in self.head.named_arrays())
        return out

    def opt_arrays(self) -> list[tuple[str, Array]]:
        """Stacked storage tensors; the layout gradients and Adam operate on."""
        out = []
        if self.encoder is not None:
            e = self.encoder
            out.extend((("encoder.Wx", e.Wx), ("encoder.Wh", e.Wh), ("encoder.b", e.b)))
        if self.projection is not None:
            out.extend((("projection.W_p", self.projection.W_p),
                        ("projection.b_p", self.projection.b_p)))
        dec = self.decoder
        out.extend((("decoder.Wz", dec.Wz), ("decoder.Wh", dec.Wh),
                    ("decoder.Wy", dec.Wy), ("decoder.b", dec.b)))
        if self.attention is not None:
            out.extend((f"attention.{n}", a) for n, a in self.attention.named_arrays())
        out.append(("embedding.table", self.embedding))
        out.extend((f"head.{n}", a) for n, a in self.head.named_arrays())
        return out

    def zero_grads(self) -> dict[str, Array]:
        return {name: np.zeros_like(arr) for name, arr in self.opt_arrays()}

    def validate_finite(self) -> None:
        for name, arr in self.opt_arrays():
            require_finite(arr, name)


def per_gate_grads(params: ModelParams, grads: dict[str, Array]) -> dict[str, Array]:
    """Gradients re-keyed by the per-gate (checkpoint) tensor names."""
    out = dict(grads)
    if params.encoder is not None:
        view = EncoderCellParams(Wx=out.pop("encoder.Wx"), Wh=out.pop("encoder.Wh"),
                                 b=out.pop("encoder.b"))
        out.update((f"encoder.{n}", a) for n, a in view.named_arrays())
    view = DecoderCellParams(Wz=out.pop("decoder.Wz"), Wh=out.pop("decoder.Wh"),
                             Wy=out.pop("decoder.Wy"), b=out.pop("decoder.b"))
    out.update((f"decoder.{n}", a) for n, a in view.named_arrays())
    return out


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Fresh parameters; the draw order is fixed so a seed pins every tensor."""
    r = 1.0 / np.sqrt(config.d)
    encoder = projection = None
    if config.encoder_enabled:
        encoder = cells.init_encoder_params(config.d, config.d_region, rng)
    else:
        projection = LinearEncoderParams(
            W_p=rng.uniform(-r, r, (config.d, config.d_region)),
            b_p=np.zeros(config.d),
        )
    decoder = cells.init_decoder_params(config.d, config.embed_dim, rng)
    attention = None
    if config.attention_enabled:
        attention = init_attention_params(config.d, config.attn_width, rng)
    embedding = rng.uniform(-r, r, (config.n_classes, config.embed_dim))
    head = PredictionHead(
        W_y=rng.uniform(-r, r, (config.n_classes, config.d)),
        b_y=np.zeros(config.n_classes),
    )
    return ModelParams(encoder=encoder, projection=projection, decoder=decoder,
                       attention=attention, embedding=embedding, head=head)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class EncodeTrace:
    H: Array            # (m x d) region summaries
    z: Array            # (d,) context vector
    cell_tapes: list[StepTape] | None
    regions: Array | None  # kept only in linear-projection mode


def encode(params: ModelParams, config: ModelConfig, regions: Array,
           want_tape: bool = False) -> EncodeTrace:
    """Run the encoder over a region sequence."""
    regions = np.asarray(regions, dtype=np.float64)
    if regions.shape != (config.m, config.d_region):
        raise ContractError(
            f"encode: regions shaped {regions.shape}, expected ({config.m}, {config.d_region})")
    require_finite(regions, "regions")
    if params.encoder is not None:
        state = CellState.zeros(config.d)
        H = np.empty((config.m, config.d))
        tapes = [] if want_tape else None
        for t in range(config.m):
            state, tape = cells.encoder_step(params.encoder, state, regions[t])
            H[t] = state.h
            if want_tape:
                tapes.append(tape)
        return EncodeTrace(H=H, z=state.h, cell_tapes=tapes, regions=None)
    H = regions @ params.projection.W_p.T + params.projection.b_p
    return EncodeTrace(H=H, z=H.mean(axis=0), cell_tapes=None,
                       regions=regions if want_tape else None)


@dataclass
class DecodeStep:
    cell_tape: StepTape
    att_tape: AttendTape | None
    input_token: int | None   # None for the zero start input
    drop_mask: Array | None
    h_out: Array              # post-dropout state fed to the head


@dataclass
class DecodeTrace:
    targets: list[int]
    logits: Array             # (L x n_classes)
    losses: Array             # (L,) per-step cross-entropy
    steps: list[DecodeStep] = field(repr=False, default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(self.losses.mean())


def _step_context(params, config, h_prev, H, z):
    if config.attention_enabled:
        z_t, weights, tape = attend(params.attention, h_prev, H)
        return z_t, weights, tape
    return z, None, None


def decode_train(params: ModelParams, config: ModelConfig, H: Array, z: Array,
                 z_star: Array, target_seq: list[int], rng: Rng | None = None,
                 train: bool = True) -> DecodeTrace:
    """Teacher-forced decode of a target sequence; returns logits, losses, tapes.

    Step t consumes the embedding of target token t-1 (the zero vector at the
    first step) and is scored against target token t. Dropout, when active,
    is applied to the decoder state right before the head; masks are drawn
    from rng and recorded for the backward pass.
    """
    validate_sequence(target_seq, config.n_attr)
    use_dropout = train and config.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ContractError("decode_train: dropout is active but no rng was supplied")

    state = CellState(h=np.asarray(z_star, dtype=np.float64), c=np.zeros(config.d))
    L = len(target_seq)
    logits = np.empty((L, config.n_classes))
    losses = np.empty(L)
    steps: list[DecodeStep] = []
    keep = 1.0 - config.dropout_rate
    for t, target in enumerate(target_seq):
        z_in, _, att_tape = _step_context(params, config, state.h, H, z)
        input_token = None if t == 0 else target_seq[t - 1]
        y_in = np.zeros(config.embed_dim) if input_token is None else params.embedding[input_token]
        state, cell_tape = cells.decoder_step(params.decoder, state, z_in, y_in)
        if use_dropout:
            mask = (rng.random(config.d) < keep).astype(np.float64)
            h_out = state.h * mask / keep
        else:
            mask = None
            h_out = state.h
        step_logits = params.head.W_y @ h_out + params.head.b_y
        logits[t] = step_logits
        losses[t] = -log_softmax(step_logits)[target]
        steps.append(DecodeStep(cell_tape=cell_tape, att_tape=att_tape,
                                input_token=input_token, drop_mask=mask, h_out=h_out))
    return DecodeTrace(targets=list(target_seq), logits=logits, losses=losses, steps=steps)


def decode_greedy(params: ModelParams, config: ModelConfig, H: Array, z: Array,
                  z_star: Array, collect_attention: bool = False):
    """Greedy inference; returns (sequence ending in stop, attention weights or None).

    Already-emitted attributes are masked to -inf so the output is a set;
    after n_attr emissions only the stop class remains unmasked, which bounds
    the sequence length by n_attr + 1.
    """
    state = CellState(h=np.asarray(z_star, dtype=np.float64), c=np.zeros(config.d))
    emitted: list[int] = []
    attention_rows = [] if collect_attention else None
    mask = np.zeros(config.n_classes)
    while len(emitted) < config.n_attr:
        z_in, weights, _ = _step_context(params, config, state.h, H, z)
        if collect_attention and weights is not None:
            attention_rows.append(weights)
        y_in = np.zeros(config.embed_dim) if not emitted else params.embedding[emitted[-1]]
        state, _ = cells.decoder_step(params.decoder, state, z_in, y_in)
        step_logits = params.head.W_y @ state.h + params.head.b_y + mask
        token = int(np.argmax(step_logits))
        if token == config.stop_token:
            break
        emitted.append(token)
        mask[token] = -np.inf
    seq = emitted + [config.stop_token]
    att = np.asarray(attention_rows) if collect_attention and attention_rows else None
    return seq, att


def softmax_xent_grads(logits: Array, targets: list[int]) -> Array:
    """Per-step logit gradients of the sequence-averaged cross-entropy."""
    L = len(targets)
    grads = np.empty_like(logits)
    for t in range(L):
        p = softmax(logits[t])
        p[targets[t]] -= 1.0
        grads[t] = p / L
    return grads


# ---------------------------------------------------------------------------
# full backward


def backward_full(params: ModelParams, config: ModelConfig, enc: EncodeTrace,
                  fuse_tape: FuseTape, dec: DecodeTrace, dlogits: Array) -> dict[str, Array]:
    """Gradients for every tensor given upstream logit gradients.

    The encoder receives gradient through three routes: the attention path
    into every summary vector, the constant-context path into z when
    attention is off, and the decoder-initialization path through the query
    branch of the max fusion.
    """
    if dlogits.shape != dec.logits.shape:
        raise ContractError(f"backward_full: dlogits shaped {dlogits.shape} vs logits {dec.logits.shape}")
    grads = params.zero_grads()
    grad_H = np.zeros((config.m, config.d))
    grad_z_const = np.zeros(config.d)
    keep = 1.0 - config.dropout_rate

    grad_h_next = np.zeros(config.d)
    grad_c_next = np.zeros(config.d)
    for t in range(len(dec.steps) - 1, -1, -1):
        step = dec.steps[t]
        dlog = dlogits[t]
        grads["head.W_y"] += np.outer(dlog, step.h_out)
        grads["head.b_y"] += dlog
        dh = params.head.W_y.T @ dlog
        if step.drop_mask is not None:
            dh = dh * step.drop_mask / keep
        dh = dh + grad_h_next
        cell_grads, grad_h_prev, grad_c_prev, grad_z_in, grad_y = cells.decoder_backward(
            params.decoder, step.cell_tape, dh, grad_c_next)
        for name, g in cell_grads.items():
            grads[f"decoder.{name}"] += g
        if config.attention_enabled:
            att_grads, grad_query, gH = attend_backward(params.attention, step.att_tape, grad_z_in)
            for name, g in att_grads.items():
                grads[f"attention.{name}"] += g
            grad_H += gH
            grad_h_prev = grad_h_prev + grad_query
        else:
            grad_z_const += grad_z_in
        if step.input_token is not None:
            grads["embedding.table"][step.input_token] += grad_y
        grad_h_next, grad_c_next = grad_h_prev, grad_c_prev

    # grad_h_next now sits on the decoder's initial hidden state z_star
    grad_z = max_fuse_backward(fuse_tape, grad_h_next) + grad_z_const

    if params.encoder is not None:
        grad_H[config.m - 1] += grad_z  # z is the final summary vector
        carried_h = np.zeros(config.d)
        carried_c = np.zeros(config.d)
        for t in range(config.m - 1, -1, -1):
            dh_t = grad_H[t] + carried_h
            cell_grads, carried_h, carried_c, _ = cells.encoder_backward(
                params.encoder, enc.cell_tapes[t], dh_t, carried_c)
            for name, g in cell_grads.items():
                grads[f"encoder.{name}"] += g
    else:
        grad_H += grad_z / config.m  # z = mean of projected regions
        grads["projection.W_p"] += grad_H.T @ enc.regions
        grads["projection.b_p"] += grad_H.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# checkpoints


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dr, e, a, c = config.d, config.d_region, config.embed_dim, config.attn_width, config.n_classes
    shapes: dict[str, tuple[int, ...]] = {}
    if config.encoder_enabled:
        for g in cells.GATES:
            shapes[f"encoder.W_{g}x"] = (d, dr)
        for g in cells.GATES:
            shapes[f"encoder.W_{g}h"] = (d, d)
        for g in cells.GATES:
            shapes[f"encoder.b_{g}"] = (d,)
    else:
        shapes["projection.W_p"] = (d, dr)
        shapes["projection.b_p"] = (d,)
    for g in cells.GATES:
        shapes[f"decoder.W_{g}z"] = (d, d)
    for g in cells.GATES:
        shapes[f"decoder.W_{g}h"] = (d, d)
    for g in cells.GATES:
        shapes[f"decoder.W_{g}y"] = (d, e)
    for g in cells.GATES:
        shapes[f"decoder.b_{g}"] = (d,)
    if config.attention_enabled:
        shapes["attention.W_a"] = (a, 2 * d)
        shapes["attention.b_a"] = (a,)
        shapes["attention.v_a"] = (a,)
    shapes["embedding.table"] = (c, e)
    shapes["head.W_y"] = (c, d)
    shapes["head.b_y"] = (c,)
    return shapes


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str | Path,
                    extra: dict | None = None) -> None:
    """Write params/config (plus optional JSON-serializable metadata) to path."""
    tensors = params.named_arrays()
    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "tensors": directory,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    params, config, _ = load_checkpoint_with_meta(path)
    return params, config


def load_checkpoint_with_meta(path: str | Path) -> tuple[ModelParams, ModelConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"corrupt checkpoint (too short): {path}")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"corrupt checkpoint (truncated header): {path}")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {path} ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a recognized checkpoint file: {path}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig.from_dict(header["config"])
    expected = _expected_shapes(config)
    listed = {entry["name"]: entry for entry in header["tensors"]}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise CheckpointError(f"checkpoint tensor set mismatch: missing {missing}, unexpected {extra}")
    payload = raw[8 + header_len:]
    total = sum(int(np.prod(e["shape"])) for e in listed.values()) * 8
    if len(payload) != total:
        raise CheckpointError(f"corrupt checkpoint (payload {len(payload)} bytes, expected {total}): {path}")
    arrays: dict[str, Array] = {}
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if shape != expected[name]:
            raise CheckpointError(f"checkpoint tensor {name} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[name] = np.ascontiguousarray(arr)
    params = _params_from_arrays(config, arrays)
    params.validate_finite()
    return params, config, header.get("extra", {})


def _params_from_arrays(config: ModelConfig, arrays: dict[str, Array]) -> ModelParams:
    def fields(prefix: str) -> dict[str, Array]:
        return {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

    encoder = EncoderCellParams.from_gates(**fields("encoder")) if config.encoder_enabled else None
    projection = None if config.encoder_enabled else LinearEncoderParams(**fields("projection"))
    attention = AttentionParams(**fields("attention")) if config.attention_enabled else None
    return ModelParams(
        encoder=encoder,
        projection=projection,
        decoder=DecoderCellParams.from_gates(**fields("decoder")),
        attention=attention,
        embedding=arrays["embedding.table"],
        head=PredictionHead(**fields("head")),
    )
