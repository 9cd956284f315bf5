"""Self-distillation regularizer for the encoder latents.

A teacher copy of the encoder (plus prototype head) tracks the student by
EMA. The student sees a random subset of its latent queries masked, the
teacher sees all of them, and the loss is the per-token cross-entropy
between the teacher's centered/sharpened prototype distribution and the
student's.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diff as D
from .net import NetConfig, encode, linear

PAPER_LAMBDA_SSL = 0.0005


@dataclass(frozen=True)
class SSLConfig:
    lam: float = PAPER_LAMBDA_SSL
    mask_ratio: float = 0.3
    n_prototypes: int = 256
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    m_ema: float = 0.99
    m_center: float = 0.9

    def __post_init__(self):
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.tau_teacher > self.tau_student:
            raise ValueError("teacher temperature must not exceed the student's")
        if not 0 <= self.m_ema <= 1:
            raise ValueError("m_ema must be in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


def init_head(cfg: NetConfig, scfg: SSLConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 0x551])
    W, P = cfg.width, scfg.n_prototypes
    out = {}
    for i, (a, b) in enumerate([(W, W), (W, W), (W, P)]):
        out[f"ssl/fc{i}/w"] = rng.normal(scale=1.0 / np.sqrt(a), size=(a, b))
        out[f"ssl/fc{i}/b"] = np.zeros(b)
    return out


def prototype_scores(latents: D.Tensor, params) -> D.Tensor:
    h = D.gelu(linear(params, "ssl/fc0", latents))
    h = D.gelu(linear(params, "ssl/fc1", h))
    return linear(params, "ssl/fc2", h)


def teacher_paths(params) -> list[str]:
    return [k for k in params if k.startswith("enc/") or k.startswith("ssl/")]


def make_teacher(student: D.ModelParams) -> D.ModelParams:
    return D.ModelParams.from_arrays({k: student[k].data.copy() for k in teacher_paths(student)})


def teacher_update(student, teacher, m_ema: float):
    """In place: theta_t <- m * theta_t + (1 - m) * theta_s."""
    if set(teacher) - set(student):
        raise KeyError(f"teacher has parameters the student lacks: {sorted(set(teacher) - set(student))[:3]}")
    for k, t in teacher.items():
        s = student[k].data
        if s.shape != t.data.shape:
            raise ValueError(f"shape mismatch at {k}")
        t.data[...] = m_ema * t.data + (1.0 - m_ema) * s
    return teacher


def query_mask(batch: int, n_latent: int, ratio: float, rng) -> np.ndarray:
    """Exactly ``round(ratio * n_latent)`` masked queries per sample."""
    k = int(round(ratio * n_latent))
    mask = np.zeros((batch, n_latent), dtype=bool)
    for b in range(batch):
        mask[b, rng.choice(n_latent, size=k, replace=False)] = True
    return mask


@dataclass
class SSLResult:
    loss: D.Tensor
    teacher_mean: np.ndarray       # batch mean of raw teacher scores, for the center update
    teacher_entropy: float


def teacher_targets(points, teacher, cfg: NetConfig, scfg: SSLConfig, center) -> tuple[np.ndarray, np.ndarray]:
    with D.no_grad():
        t = prototype_scores(encode(points, teacher, cfg), teacher).data
    z = (t - center) / scfg.tau_teacher
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), t.reshape(-1, t.shape[-1]).mean(axis=0)


def ssl_loss(points, student, teacher, cfg: NetConfig, scfg: SSLConfig, center, seed) -> SSLResult:
    """Cross-entropy between teacher and masked-student prototype distributions.

    ``teacher`` is read without recording a graph, so nothing flows back into
    it or into ``center``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    pt, tmean = teacher_targets(pts, teacher, cfg, scfg, center)
    mask = query_mask(pts.shape[0], cfg.n_latent, scfg.mask_ratio, np.random.default_rng(seed))
    s = prototype_scores(encode(pts, student, cfg, mask=mask), student)
    loss = D.cross_entropy(D.scale(s, 1.0 / scfg.tau_student), pt)
    ent = float(-(pt * np.log(np.maximum(pt, 1e-300))).sum(-1).mean())
    return SSLResult(loss, tmean, ent)


def update_center(center: np.ndarray, teacher_mean: np.ndarray, m_center: float) -> np.ndarray:
    return m_center * center + (1.0 - m_center) * teacher_mean


def latent_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of mean-pooled, unit-normalized latent token sets."""
    va, vb = np.asarray(a).reshape(-1, np.shape(a)[-1]).mean(0), np.asarray(b).reshape(-1, np.shape(b)[-1]).mean(0)
    return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
