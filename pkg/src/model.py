"""
Tiny Frozen Transformer for SoLA Desk
Pre-LN, single-head causal attention, GELU feed-forward, last-token classifier.

Edited layers are FFN projections (``blocks.{i}.ffn.w_out`` by default,
``blocks.{i}.ffn.w_in`` also supported). The first edited layer is the master
decision layer: the last-token residual entering its FFN sub-block is the
routing query, read before any adapter contributes.

Activations are row-major ``(batch, seq, features)``; a weight ``W`` of shape
(d_out, d_in) is applied as ``x @ W.T``.
"""

import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from types import MappingProxyType
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import erf, logsumexp

from .adapters import LoraGrads, LoraModule, apply_delta
from .errors import ConfigError, ParameterError, ShapeError, SolaIndexError, StateError
from .numerics import (DEFAULT_INIT_STD, Mat, SeededRng, check_finite, gaussian_init,
                       mat_from_json, mat_to_json, softmax)
from .routing import Decision
from .utils import load_json, save_json

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
MASK_FILL = -1e9
LAYER_KINDS = ("w_in", "w_out")
TRAIN_STREAM = 1
_LAYER_PATTERN = re.compile(r"^blocks\.(\d+)\.ffn\.(w_in|w_out)$")
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def layer_name(block: int, kind: str = "w_out") -> str:
    return f"blocks.{block}.ffn.{kind}"


def parse_layer(name: str) -> Tuple[int, str]:
    """Split an edited-layer identifier into (block index, projection kind)."""
    match = _LAYER_PATTERN.match(name)
    if not match:
        raise ConfigError(f"Unsupported edited layer '{name}'. Expected blocks.<i>.ffn.w_in|w_out")
    return int(match.group(1)), match.group(2)


@dataclass
class ModelConfig:
    """Architecture plus the edited-layer designation."""

    vocab: int = 64
    seq_len: int = 16
    d_model: int = 32
    n_blocks: int = 4
    ffn_hidden: int = 64
    n_classes: int = 8
    edited_layers: List[str] = field(default_factory=lambda: [layer_name(2), layer_name(3)])
    seed: int = 0
    init_std: float = DEFAULT_INIT_STD

    def __post_init__(self):
        self.edited_layers = list(self.edited_layers)
        for name in ("vocab", "seq_len", "d_model", "n_blocks", "ffn_hidden", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if not self.edited_layers:
            raise ConfigError("edited_layers must not be empty")
        positions = []
        for layer in self.edited_layers:
            block, kind = parse_layer(layer)
            if block >= self.n_blocks:
                raise ConfigError(f"Edited layer '{layer}' is outside the {self.n_blocks}-block model")
            positions.append((block, LAYER_KINDS.index(kind)))
        if any(a >= b for a, b in zip(positions, positions[1:])):
            raise ConfigError(f"edited_layers must be distinct and in forward order, got {self.edited_layers}")

    @property
    def master_layer(self) -> str:
        return self.edited_layers[0]

    @property
    def master_block(self) -> int:
        return parse_layer(self.master_layer)[0]

    def layer_shape(self, name: str) -> Tuple[int, int]:
        """(d, k) of the frozen weight behind an edited layer."""
        _, kind = parse_layer(name)
        if kind == "w_out":
            return (self.d_model, self.ffn_hidden)
        return (self.ffn_hidden, self.d_model)

    def edited_layer_shapes(self) -> Dict[str, Tuple[int, int]]:
        return {name: self.layer_shape(name) for name in self.edited_layers}

    def with_edited_layers(self, layers: Sequence[str]) -> "ModelConfig":
        return replace(self, edited_layers=list(layers))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**dict(data))


class LabeledSet(NamedTuple):
    tokens: np.ndarray  # (N, seq_len) int64
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.labels.shape[0])


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every weight name and shape, in construction order."""
    d, f = config.d_model, config.ffn_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.tok": (config.vocab, d),
        "embed.pos": (config.seq_len, d),
    }
    for i in range(config.n_blocks):
        p = f"blocks.{i}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.w_q": (d, d), f"{p}.attn.w_k": (d, d),
            f"{p}.attn.w_v": (d, d), f"{p}.attn.w_o": (d, d),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.ffn.w_in": (f, d), f"{p}.ffn.b_in": (f,),
            f"{p}.ffn.w_out": (d, f), f"{p}.ffn.b_out": (d,),
        })
    shapes.update({
        "ln_f.gain": (d,), "ln_f.bias": (d,),
        "head.w": (config.n_classes, d), "head.b": (config.n_classes,),
    })
    return shapes


class BaseModel:
    """
    Frozen base transformer f_base.

    All weight arrays are read-only copies; the model exposes no way to update them.
    """

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray],
                 meta: Optional[Dict[str, Any]] = None):
        shapes = param_shapes(config)
        missing = sorted(set(shapes) - set(weights))
        unexpected = sorted(set(weights) - set(shapes))
        if missing or unexpected:
            raise ShapeError(f"Weight names do not match config (missing={missing}, unexpected={unexpected})")
        self.config = config
        self.meta: Dict[str, Any] = dict(meta or {})
        self._weights: Dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.array(weights[name], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise ShapeError(f"Weight '{name}' has {arr.size} values, expected shape {shape}")
            arr = check_finite(arr.reshape(shape), name)
            arr.flags.writeable = False
            self._weights[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._weights[name]

    @property
    def weights(self) -> Mapping[str, np.ndarray]:
        return MappingProxyType(self._weights)

    @property
    def num_parameters(self) -> int:
        return sum(w.size for w in self._weights.values())

    def with_edited_layers(self, layers: Sequence[str]) -> "BaseModel":
        """Same frozen weights with a different edited-layer designation."""
        return BaseModel(self.config.with_edited_layers(layers), self._weights, self.meta)


class _TrainingWeights:
    """Mutable stand-in for a BaseModel used only inside ``train_base``."""

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        self.config = config
        self._weights = {name: np.array(w, dtype=np.float64) for name, w in weights.items()}


@dataclass
class ForwardTrace:
    """Everything one forward pass produced (batched internally, B = 1 for routed inference)."""

    tokens: np.ndarray
    hidden: List[np.ndarray] = field(default_factory=list)
    queries: Optional[np.ndarray] = None
    batch_logits: Optional[np.ndarray] = None
    decision: Optional[Decision] = None
    active_lora_id: Optional[int] = None
    layer_decisions: Dict[str, Decision] = field(default_factory=dict)
    cache: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def batch_size(self) -> int:
        return int(self.tokens.shape[0])

    def _require_single(self) -> None:
        if self.batch_size != 1:
            raise StateError(f"Trace holds a batch of {self.batch_size}; single-sequence accessor used")

    @property
    def query_vector(self) -> np.ndarray:
        self._require_single()
        return self.queries[0]

    @property
    def logits(self) -> np.ndarray:
        self._require_single()
        return self.batch_logits[0]

    @property
    def hidden_states(self) -> List[Mat]:
        self._require_single()
        return [h[0] for h in self.hidden]

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))


class Router(Protocol):
    """Called once at the master layer with the partially filled trace."""

    def __call__(self, trace: ForwardTrace) -> Tuple[Decision, Optional[LoraModule]]:
        ...


def build_base(config: ModelConfig, rng: Optional[SeededRng] = None) -> BaseModel:
    """
    Randomly initialize a model: Gaussian weights (std ``config.init_std``),
    layer-norm gains 1, all biases 0. Deterministic per seed.
    """
    rng = rng or SeededRng(config.seed)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            weights[name] = np.ones(shape, dtype=np.float64)
        elif leaf in ("bias", "b_in", "b_out", "b"):
            weights[name] = np.zeros(shape, dtype=np.float64)
        else:
            weights[name] = gaussian_init(rng, shape[0], shape[1], config.init_std)
    model = BaseModel(config, weights)
    logger.info(f"✅ Built base model: {model.num_parameters} parameters, "
                f"edited layers {config.edited_layers}")
    return model


# ---------------------------------------------------------------- primitives

def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, inv_std = cache
    g = dy * gain
    dx = inv_std * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=(0, 1)), dy.sum(axis=(0, 1))


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u / _SQRT2))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u / _SQRT2)) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def _causal_mask(seq_len: int) -> np.ndarray:
    return np.triu(np.full((seq_len, seq_len), MASK_FILL), k=1)


def _weight_grad(dout: np.ndarray, xin: np.ndarray) -> np.ndarray:
    """Gradient of ``xin @ W.T`` w.r.t. W, summed over batch and sequence."""
    return np.tensordot(dout, xin, axes=([0, 1], [0, 1]))


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != config.seq_len:
        raise ShapeError(f"Expected token sequences of length {config.seq_len}, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ShapeError(f"Token ids must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= config.vocab):
        raise SolaIndexError(f"Token id out of range for vocab {config.vocab}")
    return arr


def _check_labels(config: ModelConfig, labels) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= config.n_classes):
        raise SolaIndexError(f"Label out of range for {config.n_classes} classes")
    return arr


# ---------------------------------------------------------------- forward

def _adapt(trace: ForwardTrace, edited: Sequence[str], module: Optional[LoraModule],
           name: str, x_in: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name not in edited:
        return out
    if trace.decision is not None:
        trace.layer_decisions[name] = trace.decision
    if module is None:
        return out
    if name not in module:
        raise StateError(f"LoRA module {module.lora_id} has no factors for edited layer '{name}'")
    lead = x_in.shape[:-1]
    columns = x_in.reshape(-1, x_in.shape[-1]).T
    delta = apply_delta(module[name], columns).T
    return out + delta.reshape(*lead, -1)


def _run(model, tokens: np.ndarray, adapter: Optional[LoraModule],
         router: Optional[Router]) -> ForwardTrace:
    config, weights = model.config, model._weights
    edited = config.edited_layers
    scale = 1.0 / math.sqrt(config.d_model)
    mask = _causal_mask(config.seq_len)

    x = weights["embed.tok"][tokens] + weights["embed.pos"]
    trace = ForwardTrace(tokens=tokens, hidden=[x])
    active = adapter
    if adapter is not None:
        trace.active_lora_id = adapter.lora_id

    blocks = []
    for i in range(config.n_blocks):
        p = f"blocks.{i}"
        a, ln1 = _layer_norm(x, weights[f"{p}.ln1.gain"], weights[f"{p}.ln1.bias"])
        q = a @ weights[f"{p}.attn.w_q"].T
        k = a @ weights[f"{p}.attn.w_k"].T
        v = a @ weights[f"{p}.attn.w_v"].T
        probs = softmax((q @ k.swapaxes(-1, -2)) * scale + mask, axis=-1)
        o = probs @ v
        x1 = x + o @ weights[f"{p}.attn.w_o"].T

        if i == config.master_block:
            trace.queries = x1[:, -1, :].copy()
            if router is not None:
                trace.decision, active = router(trace)
                trace.active_lora_id = active.lora_id if active is not None else None

        f, ln2 = _layer_norm(x1, weights[f"{p}.ln2.gain"], weights[f"{p}.ln2.bias"])
        u = f @ weights[f"{p}.ffn.w_in"].T + weights[f"{p}.ffn.b_in"]
        u = _adapt(trace, edited, active, f"{p}.ffn.w_in", f, u)
        g = _gelu(u)
        h = g @ weights[f"{p}.ffn.w_out"].T + weights[f"{p}.ffn.b_out"]
        h = _adapt(trace, edited, active, f"{p}.ffn.w_out", g, h)
        x = x1 + h
        trace.hidden.append(x)
        blocks.append({"a": a, "ln1": ln1, "q": q, "k": k, "v": v, "probs": probs,
                       "o": o, "f": f, "ln2": ln2, "u": u, "g": g})

    z, lnf = _layer_norm(x, weights["ln_f.gain"], weights["ln_f.bias"])
    last = z[:, -1, :]
    trace.batch_logits = last @ weights["head.w"].T + weights["head.b"]
    trace.cache = {"blocks": blocks, "lnf": lnf, "last": last, "active": active}
    return trace


def forward(model: BaseModel, tokens, adapter: Optional[LoraModule] = None,
            router: Optional[Router] = None) -> ForwardTrace:
    """
    Forward pass of one sequence.

    Args:
        model: Frozen base model
        tokens: ``seq_len`` token ids
        adapter: Module forced active at every edited layer (edit-time training)
        router: Master-layer router choosing the module at inference

    Returns:
        ForwardTrace: hidden states, query vector, logits and routing decision

    Raises:
        ShapeError: Wrong sequence length
        SolaIndexError: Token id outside the vocabulary
    """
    if adapter is not None and router is not None:
        raise ParameterError("Pass either a forced adapter or a router, not both")
    arr = _check_tokens(model.config, tokens)
    if arr.shape[0] != 1:
        raise ShapeError("forward() takes a single sequence; use forward_batch() for batches")
    return _run(model, arr, adapter, router)


def forward_batch(model: BaseModel, tokens, adapter: Optional[LoraModule] = None) -> ForwardTrace:
    """Unrouted forward pass over a (batch, seq_len) token array."""
    return _run(model, _check_tokens(model.config, tokens), adapter, None)


def evaluate_accuracy(model: BaseModel, tokens, labels, batch_size: int = 256) -> float:
    """Unrouted accuracy of the base model."""
    tokens = _check_tokens(model.config, tokens)
    labels = _check_labels(model.config, labels)
    if not len(labels):
        return 0.0
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits = forward_batch(model, tokens[start:start + batch_size]).batch_logits
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[start:start + batch_size]))
    return correct / len(labels)


# ---------------------------------------------------------------- backward

def batch_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a batch of logit rows."""
    rows = np.arange(len(labels))
    return float(np.mean(logsumexp(logits, axis=1) - logits[rows, labels]))


def _cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    grad = softmax(logits, axis=-1)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def _lora_backward(lora: Dict[str, LoraGrads], module: Optional[LoraModule], name: str,
                   dout: np.ndarray, xin: np.ndarray, dxin: np.ndarray) -> np.ndarray:
    if module is None or name not in module:
        return dxin
    factors = module[name]
    xa = xin @ factors.a.T
    dxa = dout @ factors.b
    lora[name] = LoraGrads(a=np.tensordot(dxa, xin, axes=([0, 1], [0, 1])),
                           b=np.tensordot(dout, xa, axes=([0, 1], [0, 1])))
    return dxin + dxa @ factors.a


def _backward(model, trace: ForwardTrace, dlogits: np.ndarray, module: Optional[LoraModule],
              with_base: bool):
    """
    Reverse-mode pass from logit gradients.

    With ``with_base`` every base weight gets a gradient (base training only);
    otherwise the pass stops below the lowest edited block and only the
    module's factors receive gradients.
    """
    config, weights = model.config, model._weights
    cache = trace.cache
    scale = 1.0 / math.sqrt(config.d_model)
    grads: Dict[str, np.ndarray] = {}
    lora: Dict[str, LoraGrads] = {}

    if with_base:
        grads["head.w"] = dlogits.T @ cache["last"]
        grads["head.b"] = dlogits.sum(axis=0)
    dz = np.zeros_like(trace.hidden[-1])
    dz[:, -1, :] = dlogits @ weights["head.w"]
    dx, grads["ln_f.gain"], grads["ln_f.bias"] = _layer_norm_backward(dz, weights["ln_f.gain"], cache["lnf"])

    lowest = 0 if with_base else min(parse_layer(n)[0] for n in config.edited_layers)
    for i in reversed(range(lowest, config.n_blocks)):
        p, c = f"blocks.{i}", cache["blocks"][i]

        dg = dx @ weights[f"{p}.ffn.w_out"]
        dg = _lora_backward(lora, module, f"{p}.ffn.w_out", dx, c["g"], dg)
        du = dg * _gelu_grad(c["u"])
        df = du @ weights[f"{p}.ffn.w_in"]
        df = _lora_backward(lora, module, f"{p}.ffn.w_in", du, c["f"], df)
        dx_ln2, dgain2, dbias2 = _layer_norm_backward(df, weights[f"{p}.ln2.gain"], c["ln2"])
        dx1 = dx + dx_ln2
        if with_base:
            grads[f"{p}.ffn.w_out"] = _weight_grad(dx, c["g"])
            grads[f"{p}.ffn.b_out"] = dx.sum(axis=(0, 1))
            grads[f"{p}.ffn.w_in"] = _weight_grad(du, c["f"])
            grads[f"{p}.ffn.b_in"] = du.sum(axis=(0, 1))
            grads[f"{p}.ln2.gain"], grads[f"{p}.ln2.bias"] = dgain2, dbias2
        elif i == lowest:
            break

        do = dx1 @ weights[f"{p}.attn.w_o"]
        dprobs = do @ c["v"].swapaxes(-1, -2)
        dv = c["probs"].swapaxes(-1, -2) @ do
        dscores = c["probs"] * (dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ c["k"]
        dk = dscores.swapaxes(-1, -2) @ c["q"]
        da = dq @ weights[f"{p}.attn.w_q"] + dk @ weights[f"{p}.attn.w_k"] + dv @ weights[f"{p}.attn.w_v"]
        dx_ln1, dgain1, dbias1 = _layer_norm_backward(da, weights[f"{p}.ln1.gain"], c["ln1"])
        if with_base:
            grads[f"{p}.attn.w_o"] = _weight_grad(dx1, c["o"])
            grads[f"{p}.attn.w_q"] = _weight_grad(dq, c["a"])
            grads[f"{p}.attn.w_k"] = _weight_grad(dk, c["a"])
            grads[f"{p}.attn.w_v"] = _weight_grad(dv, c["a"])
            grads[f"{p}.ln1.gain"], grads[f"{p}.ln1.bias"] = dgain1, dbias1
        dx = dx1 + dx_ln1

    if with_base:
        dtok = np.zeros_like(weights["embed.tok"])
        np.add.at(dtok, trace.tokens, dx)
        grads["embed.tok"] = dtok
        grads["embed.pos"] = dx.sum(axis=0)
    return grads, lora


def backward_lora(model: BaseModel, trace: ForwardTrace, label, active_lora: LoraModule) -> Dict[str, LoraGrads]:
    """
    Exact gradients of the cross-entropy w.r.t. the active module's factors.

    Base weights never receive a gradient through this API.

    Raises:
        StateError: If the trace was not produced with ``active_lora`` forced active
    """
    if trace.active_lora_id != active_lora.lora_id or trace.cache.get("active") is not active_lora:
        raise StateError(f"Trace was produced with LoRA {trace.active_lora_id}, "
                         f"not with module {active_lora.lora_id}")
    labels = _check_labels(model.config, label)
    if len(labels) != trace.batch_size:
        raise ShapeError(f"{len(labels)} labels for a batch of {trace.batch_size}")
    _, lora = _backward(model, trace, _cross_entropy_grad(trace.batch_logits, labels),
                        active_lora, with_base=False)
    return lora


# ---------------------------------------------------------------- training

def train_base(model: BaseModel, dataset: LabeledSet, epochs: int, lr: float,
               batch_size: int = 64, seed: Optional[int] = None) -> BaseModel:
    """
    Full-parameter mini-batch SGD on the base task; returns a new frozen model.

    The training report (accuracy, epochs, lr) is stored in ``meta``.

    Raises:
        ParameterError: Empty dataset or invalid epochs / lr / batch size
        SolaIndexError: Label outside ``n_classes``
    """
    config = model.config
    tokens, labels = dataset
    tokens = _check_tokens(config, tokens)
    labels = _check_labels(config, labels)
    if len(labels) == 0 or len(labels) != len(tokens):
        raise ParameterError(f"Training set must be non-empty and aligned "
                             f"({len(tokens)} sequences, {len(labels)} labels)")
    if epochs < 0 or lr < 0 or batch_size < 1:
        raise ParameterError(f"Invalid training parameters: epochs={epochs}, lr={lr}, batch_size={batch_size}")

    state = _TrainingWeights(config, model.weights)
    rng = SeededRng(config.seed if seed is None else seed).child(TRAIN_STREAM)
    n = len(labels)
    logger.info(f"Training base model: {n} sequences, {epochs} epochs, lr {lr}, batch {batch_size}")
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            trace = _run(state, tokens[idx], None, None)
            total += batch_loss(trace.batch_logits, labels[idx]) * len(idx)
            grads, _ = _backward(state, trace, _cross_entropy_grad(trace.batch_logits, labels[idx]),
                                 None, with_base=True)
            for name, grad in grads.items():
                state._weights[name] -= lr * grad
        logger.debug(f"Epoch {epoch + 1}/{epochs}: mean loss {total / n:.4f}")

    trained = BaseModel(config, state._weights, dict(model.meta))
    accuracy = evaluate_accuracy(trained, tokens, labels)
    trained.meta.update({"train_accuracy": accuracy, "epochs": int(epochs), "lr": float(lr),
                         "batch_size": int(batch_size)})
    logger.info(f"✅ Base model trained: train accuracy {accuracy:.1%}")
    return trained


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: BaseModel, path) -> None:
    save_json({
        "config": model.config.to_dict(),
        "weights": {name: mat_to_json(w) for name, w in model.weights.items()},
        "meta": model.meta,
    }, path)


def load_checkpoint(path) -> BaseModel:
    data = load_json(path)
    config = ModelConfig.from_dict(data["config"])
    weights = {name: mat_from_json(w) for name, w in data["weights"].items()}
    return BaseModel(config, weights, data.get("meta", {}))
