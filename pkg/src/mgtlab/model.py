"""Transformer blocks with soft manifold gating (mHC) and signed delta gating (DDL).

Four block variants share one sublayer implementation:

``standard``   Post-LN residual block, ``LN(X + F(X))``.
``mhc_only``   ``X + F(LN X) * sigmoid(LN(X W_gate))``.
``ddl_only``   ``X + beta * (F(LN X) - alpha X)``.
``mgt_full``   ``X + beta * (F(LN X) * gate - alpha X)``.

with ``beta = lam * tanh(X W_beta + b_beta) + eps``.  A depth-``L`` model
stacks ``L`` layers, each an attention block followed by an FFN block.

Parameters live in a flat ``dict[str, Tensor]`` keyed
``block{i}.{attn|ffn}.{param}`` plus ``embed.*`` and ``final_ln.*``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, InvalidConfigurationError, NumericalError
from .tensor import Tensor

VARIANTS = ("standard", "mhc_only", "ddl_only", "mgt_full")
SUBLAYERS = ("attn", "ffn")
LN_EPS = 1e-5
CHECKPOINT_FORMAT = "mgt-lab-params/1"

_HAS_MHC = {"standard": False, "mhc_only": True, "ddl_only": False, "mgt_full": True}
_HAS_DDL = {"standard": False, "mhc_only": False, "ddl_only": True, "mgt_full": True}


def has_mhc(variant: str) -> bool:
    return _HAS_MHC[variant]


def has_ddl(variant: str) -> bool:
    return _HAS_DDL[variant]


@dataclass
class ModelConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 16
    seq_len: int = 17
    variant: str = "mgt_full"
    lam: float = 1.0
    epsilon: float = 0.0
    alpha_init: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("width", "heads", "ffn_mult", "vocab", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigurationError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 0:
            raise InvalidConfigurationError(f"model.depth must be >= 0, got {self.depth}")
        if self.width % self.heads:
            raise InvalidConfigurationError(
                f"model.heads={self.heads} does not divide model.width={self.width}")
        if self.width < 2:
            raise InvalidConfigurationError("model.width must be >= 2 for layer norm")
        if self.variant not in VARIANTS:
            raise InvalidConfigurationError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.lam > 0:
            raise InvalidConfigurationError(f"model.lam must be positive, got {self.lam}")
        for name in ("lam", "epsilon", "alpha_init"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidConfigurationError(f"model.{name} must be finite")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)


@dataclass
class MGTBlockParams:
    """Tensors of one block, referencing entries of the model's flat parameter dict."""

    kind: str
    ln_gain: Tensor
    ln_bias: Tensor
    sublayer: dict
    heads: int = 1
    gate_w: Optional[Tensor] = None
    gate_ln_gain: Optional[Tensor] = None
    gate_ln_bias: Optional[Tensor] = None
    beta_w: Optional[Tensor] = None
    beta_b: Optional[Tensor] = None
    alpha: Optional[Tensor] = None
    lam: float = 1.0
    epsilon: float = 0.0


@dataclass
class LayerTrace:
    """Detached post-update snapshot of one block."""

    layer_index: int
    sublayer: str
    hidden_state: np.ndarray
    beta_values: Optional[np.ndarray] = None
    gate_values: Optional[np.ndarray] = None


# -- initialisation -------------------------------------------------------------


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *path])


_KIND_CODE = {"attn": 0, "ffn": 1}


def _block_shapes(cfg: ModelConfig, kind: str) -> dict:
    D, H = cfg.width, cfg.ffn_mult * cfg.width
    shapes = {"ln_gain": (D,), "ln_bias": (D,)}
    if kind == "attn":
        shapes.update(wq=(D, D), wk=(D, D), wv=(D, D), wo=(D, D))
    else:
        shapes.update(w1=(D, H), b1=(H,), w2=(H, D), b2=(D,))
    if has_mhc(cfg.variant):
        shapes.update(gate_w=(D, D), gate_ln_gain=(D,), gate_ln_bias=(D,))
    if has_ddl(cfg.variant):
        shapes.update(beta_w=(D, D), beta_b=(D,), alpha=())
    return shapes


def init_params(cfg: ModelConfig) -> dict:
    """Deterministic parameters for ``cfg``.

    Each tensor draws from its own seeded stream, so embeddings agree
    across depths and sublayer weights agree across variants for one seed.
    The DDL gate starts at zero (``beta == epsilon``), which with
    ``epsilon = 0`` makes every DDL block an exact identity.
    """
    D, V, S = cfg.width, cfg.vocab, cfg.seq_len
    s = cfg.seed
    p = {
        "embed.token": _rng(s, 0, 0).normal(0.0, 1.0 / math.sqrt(D), (V, D)),
        "embed.position": _rng(s, 0, 1).normal(0.0, 1.0 / math.sqrt(D), (S, D)),
        "final_ln.gain": np.ones(D),
        "final_ln.bias": np.zeros(D),
    }
    for i in range(cfg.depth):
        for kind in SUBLAYERS:
            prefix = f"block{i}.{kind}."
            for j, (name, shape) in enumerate(_block_shapes(cfg, kind).items()):
                r = _rng(s, 1, i, _KIND_CODE[kind], j)
                if name in ("ln_gain", "gate_ln_gain"):
                    arr = np.ones(shape)
                elif name in ("ln_bias", "gate_ln_bias", "b1", "b2", "beta_w", "beta_b"):
                    arr = np.zeros(shape)
                elif name == "alpha":
                    arr = np.array(cfg.alpha_init)
                elif name in ("wo", "w2", "gate_w"):
                    arr = r.normal(0.0, 0.02, shape)
                else:
                    arr = r.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
                p[prefix + name] = arr
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in p.items()}


def count_parameters(params: dict) -> int:
    return int(sum(t.size for t in params.values()))


def parameter_count(cfg: ModelConfig) -> int:
    """Size of :func:`init_params` for ``cfg`` without allocating anything."""
    D = cfg.width
    total = cfg.vocab * D + cfg.seq_len * D + 2 * D
    for kind in SUBLAYERS:
        per_block = sum(int(np.prod(shape)) for shape in _block_shapes(cfg, kind).values())
        total += cfg.depth * per_block
    return total


def block_params(params: dict, cfg: ModelConfig, layer: int, kind: str) -> MGTBlockParams:
    prefix = f"block{layer}.{kind}."
    get = lambda n: params.get(prefix + n)  # noqa: E731
    sub_names = ("wq", "wk", "wv", "wo") if kind == "attn" else ("w1", "b1", "w2", "b2")
    return MGTBlockParams(
        kind=kind, ln_gain=get("ln_gain"), ln_bias=get("ln_bias"),
        sublayer={n: get(n) for n in sub_names}, heads=cfg.heads,
        gate_w=get("gate_w"), gate_ln_gain=get("gate_ln_gain"), gate_ln_bias=get("gate_ln_bias"),
        beta_w=get("beta_w"), beta_b=get("beta_b"), alpha=get("alpha"),
        lam=cfg.lam, epsilon=cfg.epsilon,
    )


# -- sublayers ----------------------------------------------------------------------


def attention_sublayer(X: Tensor, params, heads: Optional[int] = None, causal: bool = True,
                       return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over ``(..., S, D)``."""
    sub = params.sublayer if isinstance(params, MGTBlockParams) else params
    h = heads if heads is not None else (params.heads if isinstance(params, MGTBlockParams) else 1)
    *lead, S, D = X.shape
    if D % h:
        raise InvalidConfigurationError(f"width {D} not divisible by heads {h}")
    dh = D // h
    n = len(lead)
    split = (*range(n), n + 1, n, n + 2)           # (..., S, h, dh) -> (..., h, S, dh)
    key_t = (*range(n), n, n + 2, n + 1)           # (..., h, S, dh) -> (..., h, dh, S)

    def heads_of(w):
        return T.transpose(T.reshape(T.matmul(X, w), (*lead, S, h, dh)), split)

    q, k, v = heads_of(sub["wq"]), heads_of(sub["wk"]), heads_of(sub["wv"])
    scores = T.scale(T.matmul(q, T.transpose(k, key_t)), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, causal=causal)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), split), (*lead, S, D))
    out = T.matmul(ctx, sub["wo"])
    return (out, weights) if return_weights else out


def ffn_sublayer(X: Tensor, params) -> Tensor:
    sub = params.sublayer if isinstance(params, MGTBlockParams) else params
    hidden = T.gelu(T.add(T.matmul(X, sub["w1"]), sub["b1"]))
    return T.add(T.matmul(hidden, sub["w2"]), sub["b2"])


def sublayer_forward(X: Tensor, params: MGTBlockParams) -> Tensor:
    if params.kind == "attn":
        return attention_sublayer(X, params)
    return ffn_sublayer(X, params)


# -- gating and update ----------------------------------------------------------------


def mhc_project(V_raw: Tensor, X_l: Tensor, params: MGTBlockParams, return_gate: bool = False):
    """Soft tangent-space gate: ``V_raw * sigmoid(LN(X_l W_gate))``."""
    if V_raw.shape != X_l.shape:
        raise ContractError(f"mhc_project shapes differ: {V_raw.shape} vs {X_l.shape}")
    gate = T.sigmoid(T.layer_norm(T.matmul(X_l, params.gate_w), params.gate_ln_gain,
                                  params.gate_ln_bias, LN_EPS))
    out = T.mul(V_raw, gate)
    return (out, gate) if return_gate else out


def ddl_gate(X_l: Tensor, params: MGTBlockParams) -> Tensor:
    """Signed step size ``lam * tanh(X_l W_beta + b_beta) + eps`` per token and feature."""
    pre = T.add(T.matmul(X_l, params.beta_w), params.beta_b)
    beta = T.scale(T.tanh(pre), params.lam)
    if params.epsilon != 0.0:
        beta = T.add(beta, Tensor(params.epsilon))
    return beta


def mgt_update(X_l: Tensor, V_mhc: Tensor, beta: Tensor, alpha) -> Tensor:
    """Erase-and-write update ``X_l + beta * (V_mhc - alpha * X_l)``."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(float(alpha))
    return T.add(X_l, T.mul(beta, T.sub(V_mhc, T.mul(alpha, X_l))))


def _snapshot(t: Optional[Tensor]) -> Optional[np.ndarray]:
    return None if t is None else t.data.copy()


def standard_block_forward(X_l: Tensor, params: MGTBlockParams, layer_index: int = 0):
    """Post-LN residual block ``LN(X + F(X))``."""
    out = T.layer_norm(T.add(X_l, sublayer_forward(X_l, params)), params.ln_gain, params.ln_bias, LN_EPS)
    return out, LayerTrace(layer_index, params.kind, _snapshot(out))


def mgt_block_forward(X_l: Tensor, params: MGTBlockParams, variant: str = "mgt_full", layer_index: int = 0):
    """One block of the requested variant; returns ``(X_next, LayerTrace)``."""
    if X_l.ndim < 2:
        raise ContractError(f"block input must be (..., S, D), got {X_l.shape}")
    try:
        if variant == "standard":
            out, trace = standard_block_forward(X_l, params, layer_index)
        else:
            v_raw = sublayer_forward(T.layer_norm(X_l, params.ln_gain, params.ln_bias, LN_EPS), params)
            gate = None
            if has_mhc(variant):
                v, gate = mhc_project(v_raw, X_l, params, return_gate=True)
            else:
                v = v_raw
            beta = None
            if has_ddl(variant):
                beta = ddl_gate(X_l, params)
                out = mgt_update(X_l, v, beta, params.alpha)
            else:
                out = T.add(X_l, v)
            trace = LayerTrace(layer_index, params.kind, _snapshot(out), _snapshot(beta), _snapshot(gate))
    except NumericalError as exc:
        raise NumericalError(f"layer {layer_index} ({params.kind}): {exc}", layer=layer_index) from exc
    if not np.isfinite(out.data).all():
        raise NumericalError(f"layer {layer_index} produced non-finite output", layer=layer_index)
    return out, trace


# -- full model ----------------------------------------------------------------------


def _as_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise ContractError(f"tokens must be (S,) or (B, S), got shape {ids.shape}")
    if ids.shape[-1] > cfg.seq_len:
        raise InvalidConfigurationError(f"sequence length {ids.shape[-1]} exceeds model.seq_len={cfg.seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ContractError(f"token ids must lie in [0, {cfg.vocab})")
    return ids


def embed_tokens(tokens, cfg: ModelConfig, params: dict) -> Tensor:
    ids = _as_tokens(tokens, cfg)
    S = ids.shape[-1]
    return T.add(T.embedding(params["embed.token"], ids),
                 T.embedding(params["embed.position"], np.arange(S)))


def forward_model(tokens, cfg: ModelConfig, params: dict, return_embedded: bool = False):
    """Embedding, ``cfg.depth`` attention/FFN block pairs, final LN and tied head.

    Returns ``(logits, traces)`` with logits ``(..., S, V)`` and one trace
    per block (``2 * depth``).  With ``return_embedded`` the pre-block state
    is appended as a third element.
    """
    X = embed_tokens(tokens, cfg, params)
    X0 = X
    traces = []
    for i in range(cfg.depth):
        for kind in SUBLAYERS:
            X, tr = mgt_block_forward(X, block_params(params, cfg, i, kind), cfg.variant, i)
            traces.append(tr)
    Xn = T.layer_norm(X, params["final_ln.gain"], params["final_ln.bias"], LN_EPS)
    logits = T.matmul(Xn, T.transpose(params["embed.token"], (1, 0)))
    if return_embedded:
        return logits, traces, X0
    return logits, traces


def layer_states(traces: list, embedded) -> list:
    """Hidden states after each layer (attention+FFN pair), led by the embedded input."""
    X0 = embedded.data if isinstance(embedded, Tensor) else np.asarray(embedded)
    return [X0] + [t.hidden_state for t in traces if t.sublayer == SUBLAYERS[-1]]


# -- checkpoints ----------------------------------------------------------------------


def save_params(params: dict, path, cfg: Optional[ModelConfig] = None) -> None:
    """Write a JSON map of named arrays with shape headers (atomic replace)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg) if cfg is not None else None,
        "arrays": {name: {"shape": list(t.shape), "data": [float(x) for x in t.data.reshape(-1)]}
                   for name, t in params.items()},
    }
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, config_or_None)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {doc.get('format')!r}")
    params = {}
    for name, entry in doc["arrays"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(arr, requires_grad=True, name=name)
    cfg = ModelConfig(**doc["config"]) if doc.get("config") else None
    return params, cfg


__all__ = [
    "VARIANTS", "ModelConfig", "MGTBlockParams", "LayerTrace", "init_params", "block_params",
    "attention_sublayer", "ffn_sublayer", "mhc_project", "ddl_gate", "mgt_update",
    "mgt_block_forward", "standard_block_forward", "forward_model", "embed_tokens",
    "layer_states", "count_parameters", "parameter_count", "save_params", "load_params", "has_mhc", "has_ddl",
]
