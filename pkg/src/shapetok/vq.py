"""Discrete bottleneck: codebook, Sinkhorn assignment, straight-through quantization.

Also owns the binary token file format::

    b"CUBE" | u8 version=2 | u32 n_latent | u32 K | n_latent x u32 index   (little-endian)
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import diff as D

EPS_OT = 0.05
OT_ITERS = 50
COMMITMENT = 0.25
DEAD_CODE_STEPS = 2000

TOKEN_MAGIC = b"CUBE"
TOKEN_VERSION = 2


class TokenFormatError(ValueError):
    pass


@dataclass
class Codebook:
    embeddings: D.Tensor                      # (K, code_dim), trainable
    usage: np.ndarray = None                  # assignment counts per code
    last_used: np.ndarray = None              # step each code was last assigned

    def __post_init__(self):
        K = self.embeddings.shape[0]
        if K < 2:
            raise ValueError("codebook needs at least two codes")
        if self.usage is None:
            self.usage = np.zeros(K)
        if self.last_used is None:
            self.last_used = np.zeros(K)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def lookup(self, indices) -> np.ndarray:
        return self.embeddings.data[np.asarray(indices, dtype=np.int64)]

    def record(self, indices, step: int) -> None:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        np.add.at(self.usage, idx, 1)
        self.last_used[idx] = step

    def revive_dead(self, recent: np.ndarray, step: int, rng, patience: int = DEAD_CODE_STEPS) -> np.ndarray:
        """Re-seed codes unused for ``patience`` steps with random recent latents."""
        dead = np.nonzero(step - self.last_used >= patience)[0]
        if len(dead) and len(recent):
            pick = rng.integers(len(recent), size=len(dead))
            self.embeddings.data[dead] = recent[pick]
            self.last_used[dead] = step
        return dead


@dataclass
class TokenSequence:
    indices: np.ndarray
    K: int
    provenance: str = "encoded"   # "encoded" | "generated"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.K):
            raise ValueError("token index out of range")

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        return (isinstance(other, TokenSequence) and self.K == other.K
                and np.array_equal(self.indices, other.indices))

    def to_bytes(self) -> bytes:
        head = TOKEN_MAGIC + struct.pack("<BII", TOKEN_VERSION, len(self.indices), self.K)
        return head + self.indices.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, provenance: str = "encoded") -> "TokenSequence":
        if len(buf) < 13 or buf[:4] != TOKEN_MAGIC:
            raise TokenFormatError("bad token file magic")
        version, n, K = struct.unpack("<BII", buf[4:13])
        if version != TOKEN_VERSION:
            raise TokenFormatError(f"unsupported token file version {version}")
        if len(buf) != 13 + 4 * n:
            raise TokenFormatError(f"token file truncated: expected {n} indices")
        idx = np.frombuffer(buf[13:], dtype="<u4").astype(np.int64)
        return cls(idx, K, provenance)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, provenance: str = "encoded") -> "TokenSequence":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), provenance)


# -------------------------------------------------------------- assignment

def sinkhorn_plan(cost: np.ndarray, eps: float = EPS_OT, iters: int = OT_ITERS,
                  tol: float = 1e-6) -> np.ndarray:
    """Entropic OT plan between uniform marginals (rows 1/n, columns 1/K).

    Log-domain alternating row/column normalization. Warns (and returns the
    current plan) if the row marginals are still off by more than ``tol``.
    """
    C = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, K = C.shape
    M = -C / eps
    log_a, log_b = -np.log(n), -np.log(K)
    f = np.zeros(n)
    g = np.zeros(K)
    for _ in range(iters):
        f = log_a - logsumexp(M + g[None, :], axis=1)
        g = log_b - logsumexp(M + f[:, None], axis=0)
    plan = np.exp(M + f[:, None] + g[None, :])
    err = np.abs(plan.sum(axis=1) - 1.0 / n).max()
    if err > tol:
        warnings.warn(f"sinkhorn did not converge: row marginal error {err:.2e}", RuntimeWarning)
    return plan


def sq_distances(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return ((z[:, None, :] - codes[None, :, :]) ** 2).sum(-1)


def assign_ot(z: np.ndarray, codes: np.ndarray, eps: float = EPS_OT, iters: int = OT_ITERS) -> np.ndarray:
    cost = sq_distances(z, codes)
    m = cost.mean()
    cost = cost / m if m > 0 else cost
    return np.argmax(sinkhorn_plan(cost, eps, iters), axis=1)


def assign_nearest(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. lowest index on ties
    return np.argmin(sq_distances(z, codes), axis=1)


@dataclass
class VQOutput:
    indices: np.ndarray
    embeddings: D.Tensor           # decoder-facing quantized latents (straight-through)
    codebook_loss: D.Tensor
    commitment_loss: D.Tensor

    @property
    def loss(self) -> D.Tensor:
        return self.codebook_loss + self.commitment_loss


def quantize_train(z: D.Tensor, codebook: Codebook, eps: float = EPS_OT, iters: int = OT_ITERS,
                   straight_through: bool = True, beta: float = COMMITMENT) -> VQOutput:
    """OT-assigned quantization of ``z`` (..., code_dim) with VQ losses.

    With ``straight_through=False`` the decoder-facing output is the raw
    codebook lookup (its true, piecewise-constant derivative), which is what
    finite-difference checks need.
    """
    shape = z.shape
    if z.data.size == 0:
        raise ValueError("empty batch")
    if shape[-1] != codebook.dim:
        raise ValueError(f"latent dim {shape[-1]} != code dim {codebook.dim}")
    flat = D.reshape(z, (-1, shape[-1]))
    idx = D.frozen(assign_ot(flat.data, codebook.embeddings.data, eps, iters))
    e = D.gather(codebook.embeddings, idx)
    cb = D.l2(D.stop_gradient(flat), e)
    commit = D.scale(D.l2(flat, D.stop_gradient(e)), beta)
    q = D.straight_through(flat, D.stop_gradient(e)) if straight_through else e
    return VQOutput(idx.reshape(shape[:-1]), D.reshape(q, shape), cb, commit)


def quantize_infer(z, codebook: Codebook) -> TokenSequence:
    """Nearest-code tokens for a single shape's latents (n_latent, code_dim)."""
    zz = np.asarray(z.data if isinstance(z, D.Tensor) else z, dtype=np.float64)
    return TokenSequence(assign_nearest(zz.reshape(-1, codebook.dim), codebook.embeddings.data), codebook.K)


# ------------------------------------------------------------- bottleneck

SHORTCUT, QUANTIZE = "shortcut", "quantize"


def shortcut_coin(seed: int, step: int, p: float = 0.5) -> str:
    """Per-step Bernoulli draw deciding whether training skips quantization."""
    rng = np.random.default_rng([seed, step, 0x5C])
    return SHORTCUT if rng.random() < p else QUANTIZE


@dataclass
class BottleneckOutput:
    decoder_input: D.Tensor           # (B, n_latent, width)
    path: str
    down: D.Tensor | None = None      # (B, n_latent, code_dim) pre-quantization
    vq: VQOutput | None = None
    tokens: np.ndarray | None = None  # (B, n_latent)


def _lin(params, name, x):
    y = x @ params[f"{name}/w"]
    b = params.get(f"{name}/b")
    return y if b is None else y + b


def bottleneck_forward(latents: D.Tensor, codebook: Codebook, params, mode: str = "train",
                       coin: str = QUANTIZE, straight_through: bool = True) -> BottleneckOutput:
    """Route encoder latents to the decoder.

    Training with ``coin == "shortcut"`` feeds a full-width linear projection of
    the continuous latents and leaves the quantizer untouched. Otherwise the
    latents are down-projected, quantized (OT assignment in training, nearest
    code at inference) and up-projected.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" and coin == SHORTCUT:
        raise ValueError("the shortcut path is training-only")
    if coin == SHORTCUT:
        return BottleneckOutput(_lin(params, "shortcut", latents), SHORTCUT)
    down = _lin(params, "vq/down", latents)
    if mode == "train":
        out = quantize_train(down, codebook, straight_through=straight_through)
        return BottleneckOutput(_lin(params, "vq/up", out.embeddings), QUANTIZE, down, out, out.indices)
    B, n = down.shape[:2]
    idx = np.stack([quantize_infer(down.data[b], codebook).indices for b in range(B)])
    e = D.Tensor(codebook.lookup(idx))
    return BottleneckOutput(_lin(params, "vq/up", e), QUANTIZE, down, None, idx)


def tokens_to_decoder_input(tokens: TokenSequence, codebook: Codebook, params) -> D.Tensor:
    e = D.Tensor(codebook.lookup(tokens.indices)[None])
    return _lin(params, "vq/up", e)
