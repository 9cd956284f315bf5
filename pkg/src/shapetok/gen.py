"""Toy autoregressive shape-token generator.

A small decoder-only transformer predicts code tokens one at a time after a
conditioning prefix ``[class or NULL, bbox (optional), BOS]``. The class is
replaced by NULL on a seeded 10% of training steps so the same network also
models the unconditional distribution used by classifier-free guidance.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diff as D
from .net import _Init, attention, layer_norm, linear, mlp
from .train import Adam
from .vq import TokenSequence

P_DROP = 0.10
BBOX_JITTER = 0.10
_NEG = -1e9


@dataclass(frozen=True)
class GenConfig:
    K: int
    n_latent: int
    n_classes: int
    width: int = 64
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 4
    use_bbox: bool = True
    p_drop: float = P_DROP
    bbox_jitter: float = BBOX_JITTER

    def __post_init__(self):
        if self.K < 2 or self.n_latent < 1 or self.n_classes < 1:
            raise ValueError("need K >= 2, n_latent >= 1, n_classes >= 1")
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must be in [0, 1)")

    # vocabulary: codes 0..K-1, then BOS, then NULL
    @property
    def bos(self) -> int:
        return self.K

    @property
    def null(self) -> int:
        return self.K + 1

    @property
    def prefix_len(self) -> int:
        return 3 if self.use_bbox else 2

    @property
    def seq_len(self) -> int:
        return self.prefix_len + self.n_latent

    def to_json(self) -> dict:
        return asdict(self)


def init_gen(cfg: GenConfig, seed: int = 0) -> dict:
    W, r = cfg.width, cfg.mlp_ratio
    it = _Init([seed, 0x6E])
    it.out["gen/tok"] = it.rng.normal(scale=0.5, size=(cfg.K + 2, W))
    it.out["gen/cls"] = it.rng.normal(scale=0.5, size=(cfg.n_classes, W))
    it.out["gen/pos"] = it.rng.normal(scale=0.1, size=(cfg.seq_len, W))
    if cfg.use_bbox:
        it.linear("gen/bbox/fc1", 3, W)
        it.linear("gen/bbox/fc2", W, W)
    for i in range(cfg.layers):
        it.attn(f"gen/l{i}/sa", W)
        it.mlp(f"gen/l{i}/mlp", W, r)
    it.ln("gen/out/ln", W)
    # zero read-out: uniform next-token distribution at init
    it.out["gen/out/w"] = np.zeros((W, cfg.K))
    it.out["gen/out/b"] = np.zeros(cfg.K)
    return it.out


def unit_bbox(dims) -> np.ndarray:
    d = np.asarray(dims, dtype=np.float64)
    if d.shape != (3,) or np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ValueError(f"bbox needs three positive dims, got {dims}")
    return d / d.max()


def perturb_bbox(dims, rng, jitter: float = BBOX_JITTER) -> np.ndarray:
    """Scale each dim by Uniform(1 - jitter, 1 + jitter), then re-normalize to max 1."""
    return unit_bbox(np.asarray(dims, dtype=np.float64) * rng.uniform(1 - jitter, 1 + jitter, size=3))


def make_prefix(label, bbox, params, cfg: GenConfig) -> D.Tensor:
    """Condition embeddings (B, prefix_len, W).

    ``label`` is an int (or None for NULL) or a length-B sequence of them;
    ``bbox`` a 3-vector or (B, 3), required when the model uses bbox tokens.
    """
    labels = [label] if label is None or np.isscalar(label) else list(label)
    B = len(labels)
    for lb in labels:
        if lb is not None and not 0 <= int(lb) < cfg.n_classes:
            raise ValueError(f"unknown class label {lb}")
    null_row = D.gather(params["gen/tok"], np.full(B, cfg.null, dtype=float))
    cls_rows = D.gather(params["gen/cls"], np.array([0 if lb is None else int(lb) for lb in labels], float))
    is_null = np.array([[lb is None] for lb in labels], dtype=np.float64)
    cond = null_row * D.Tensor(is_null) + cls_rows * D.Tensor(1.0 - is_null)
    parts = [D.reshape(cond, (B, 1, cfg.width))]
    if cfg.use_bbox:
        if bbox is None:
            raise ValueError("this generator needs a bbox condition")
        bb = np.broadcast_to(np.asarray(bbox, dtype=np.float64), (B, 3))
        emb = linear(params, "gen/bbox/fc2", D.gelu(linear(params, "gen/bbox/fc1", D.Tensor(bb))))
        parts.append(D.reshape(emb, (B, 1, cfg.width)))
    bos = D.gather(params["gen/tok"], np.full(B, cfg.bos, dtype=float))
    parts.append(D.reshape(bos, (B, 1, cfg.width)))
    return D.concat(parts, axis=1)


def _causal_bias(n: int) -> D.Tensor:
    return D.Tensor(np.triu(np.full((n, n), _NEG), k=1))


def logits(prefix: D.Tensor, tokens: np.ndarray, params, cfg: GenConfig) -> D.Tensor:
    """Next-token logits (B, n_tokens + 1, K) for the positions from BOS onward."""
    tok = np.asarray(tokens, dtype=np.float64).reshape(prefix.shape[0], -1)
    B, t = tok.shape
    x = prefix
    if t:
        x = D.concat([x, D.gather(params["gen/tok"], tok)], axis=1)
    n = x.shape[1]
    x = x + params["gen/pos"][:n]
    bias = _causal_bias(n)
    for i in range(cfg.layers):
        h = layer_norm(params, f"gen/l{i}/sa/ln_q", x)
        x = x + attention(params, f"gen/l{i}/sa", h, h, cfg.heads, bias)
        x = x + mlp(params, f"gen/l{i}/mlp", x)
    h = layer_norm(params, "gen/out/ln", x[:, cfg.prefix_len - 1:])
    return linear(params, "gen/out", h)


def sequence_loss(params, cfg: GenConfig, tokens: np.ndarray, labels, bboxes) -> D.Tensor:
    """Mean next-token cross-entropy over the n_latent code positions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.n_latent:
        raise ValueError(f"expected sequences of length {cfg.n_latent}, got shape {tokens.shape}")
    B = len(tokens)
    lg = logits(make_prefix(labels, bboxes, params, cfg), tokens[:, :-1], params, cfg)
    target = np.zeros((B * cfg.n_latent, cfg.K))
    target[np.arange(B * cfg.n_latent), tokens.reshape(-1)] = 1.0
    return D.cross_entropy(D.reshape(lg, (B * cfg.n_latent, cfg.K)), target)


def condition_dropped(seed: int, step: int, p: float = P_DROP) -> bool:
    return bool(np.random.default_rng([seed, step, 0xD0]).random() < p)


@dataclass
class GenModel:
    cfg: GenConfig
    params: D.ModelParams

    @classmethod
    def create(cls, cfg: GenConfig, seed: int = 0) -> "GenModel":
        return cls(cfg, D.ModelParams.from_arrays(init_gen(cfg, seed)))

    def to_state(self) -> tuple[dict, dict]:
        return self.cfg.to_json(), {k[len("gen/"):]: v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, config: dict, arrays: dict) -> "GenModel":
        return cls(GenConfig(**config), D.ModelParams.from_arrays({f"gen/{k}": v for k, v in arrays.items()}))


def train_ar(sequences: Sequence[TokenSequence], labels: Sequence[int], bboxes, cfg: GenConfig,
             steps: int = 1000, seed: int = 0, lr: float = 1e-3, batch_size: int = 8,
             model: GenModel | None = None) -> tuple[GenModel, list]:
    """Fit the generator; returns the model and the per-step loss history."""
    if not sequences:
        raise ValueError("empty token dataset")
    for s in sequences:
        if len(s) != cfg.n_latent:
            raise ValueError(f"sequence length {len(s)} != n_latent {cfg.n_latent}")
        if s.K != cfg.K:
            raise ValueError(f"sequence K={s.K} != generator K={cfg.K}")
    toks = np.stack([s.indices for s in sequences])
    labels = np.asarray(labels, dtype=np.int64)
    bbs = None if bboxes is None else np.stack([unit_bbox(b) for b in bboxes])
    model = model or GenModel.create(cfg, seed)
    opt = Adam(lr)
    history = []
    for step in range(steps):
        rng = np.random.default_rng([seed, step, 0x6B])
        idx = np.arange(len(toks)) if len(toks) <= batch_size else rng.choice(len(toks), batch_size, replace=False)
        lab = [None] * len(idx) if condition_dropped(seed, step, cfg.p_drop) else labels[idx].tolist()
        bb = None
        if cfg.use_bbox:
            bb = np.stack([perturb_bbox(bbs[i], rng, cfg.bbox_jitter) for i in idx])
        model.params.zero_grad()
        loss = sequence_loss(model.params, cfg, toks[idx], lab, bb)
        D.backward(loss, model.params)
        opt.step(model.params)
        history.append(loss.item())
    return model, history


def cfg_logits(l_cond, l_uncond, s: float):
    """Classifier-free guidance: l_uncond + s * (l_cond - l_uncond)."""
    a, b = np.asarray(l_cond, dtype=np.float64), np.asarray(l_uncond, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    if s == 1:
        return a.copy()
    if s == 0:
        return b.copy()
    return b + s * (a - b)


def sample(model: GenModel, label, bbox=None, s: float = 1.0, temperature: float = 1.0,
           seed: int = 0) -> TokenSequence:
    """Draw ``n_latent`` tokens; ``temperature == 0`` is greedy argmax."""
    cfg, P = model.cfg, model.params
    rng = np.random.default_rng(seed)
    bb = None if bbox is None else unit_bbox(bbox)
    out: list[int] = []
    with D.no_grad():
        pc = make_prefix(label, bb, P, cfg)
        pu = make_prefix(None, bb, P, cfg) if s != 1 else None
        for _ in range(cfg.n_latent):
            t = np.array([out])
            lc = logits(pc, t, P, cfg).data[0, -1]
            lg = lc if pu is None else cfg_logits(lc, logits(pu, t, P, cfg).data[0, -1], s)
            if temperature <= 0:
                k = int(np.argmax(lg))
            else:
                z = lg / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                k = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), cfg.K - 1))
            out.append(k)
    return TokenSequence(np.array(out), cfg.K, provenance="generated")
