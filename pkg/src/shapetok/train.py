"""Tokenizer training: losses for both stages, Adam, the fit loop, checkpoints.

Stage 1 supervises occupancy logits with BCE. Stage 2 starts from a stage-1
model, adds a tsdf head and fits truncated signed distances with L1, an
Eikonal penalty and REPA feature alignment. Both stages carry the SSL
regularizer and, on quantized steps, the VQ losses.

Every random draw inside a step comes from a generator keyed on
``(seed, step, stream)``, so a run resumed from a checkpoint replays exactly
what the uninterrupted run would have done.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diff as D
from .geom import SIGMA_NEAR, ShapeSpec, s_iou, sample_field, surface_points, v_iou
from .net import NetConfig, add_head, decode, encode, init_params, linear
from .ssl import SSLConfig, init_head, make_teacher, ssl_loss, teacher_update, update_center
from .vq import (QUANTIZE, SHORTCUT, Codebook, TokenSequence, assign_nearest, bottleneck_forward,
                 quantize_infer, shortcut_coin, tokens_to_decoder_input)

STAGES = ("occupancy", "tsdf")
HEAD_FOR_STAGE = {"occupancy": "occ", "tsdf": "tsdf"}

# per-step random streams
_BATCH, _SSL, _REVIVE = 0xBA, 0x55, 0xDC


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``model`` holds the state from before the failing step."""

    def __init__(self, msg, model):
        super().__init__(msg)
        self.model = model


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "occupancy"
    lam_ssl: float = 0.0005
    lam_eik: float = 0.01
    lam_repa: float = 0.1
    w_codebook: float = 1.0
    w_commitment: float = 1.0
    lr: float = 3e-4
    batch_size: int = 1
    steps: int = 1000
    seed: int = 0
    n_uniform: int = 512
    n_near: int = 512
    n_eikonal: int = 128
    eik_h: float = 1e-3
    clip: float = 1.0
    shortcut_p: float = 0.5
    sigma_near: float = SIGMA_NEAR
    cold_start: bool = False
    ssl: SSLConfig = field(default_factory=SSLConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for k in ("lam_ssl", "lam_eik", "lam_repa", "w_codebook", "w_commitment", "lr"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.stage == "tsdf" and self.n_eikonal > self.n_near:
            raise ValueError("n_eikonal cannot exceed n_near")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "ssl" in d:
            d["ssl"] = SSLConfig(**d["ssl"])
        return cls(**d)


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8, clip=1.0):
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, b1, b2, eps, clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: D.ModelParams) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        grads = params.grads()
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        s = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k] * s
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------------- model

@dataclass
class Tokenizer:
    """Everything a training run owns: student, EMA teacher, codebook, SSL center, optimizer."""

    cfg: NetConfig
    params: D.ModelParams
    teacher: D.ModelParams
    codebook: Codebook
    center: np.ndarray
    scfg: SSLConfig = field(default_factory=SSLConfig)
    opt: Adam = field(default_factory=Adam)
    seed: int = 0
    step: int = 0
    gen_config: dict | None = None
    gen_arrays: dict | None = None

    @classmethod
    def create(cls, cfg: NetConfig, seed: int = 0, scfg: SSLConfig | None = None,
               heads=("occ",), lr: float = 3e-4) -> "Tokenizer":
        scfg = scfg or SSLConfig()
        arrays = init_params(cfg, seed, heads)
        arrays.update(init_head(cfg, scfg, seed))
        params = D.ModelParams.from_arrays(arrays)
        return cls(cfg, params, make_teacher(params), Codebook(params["vq/codebook"]),
                   np.zeros(scfg.n_prototypes), scfg, Adam(lr), seed)

    @property
    def heads(self) -> list[str]:
        return sorted({k.split("/")[1] for k in self.params if k.startswith("head/")})

    # -- inference ---------------------------------------------------------

    def _surface(self, source, seed=0) -> np.ndarray:
        if isinstance(source, ShapeSpec):
            return surface_points(source, self.cfg.n_points, [seed, 0xE1])
        return np.asarray(source, dtype=np.float64)

    def latents(self, source, seed=0) -> D.Tensor:
        with D.no_grad():
            return encode(self._surface(source, seed), self.params, self.cfg)

    def tokenize(self, source, seed=0) -> TokenSequence:
        """Nearest-code tokens of one shape (a ShapeSpec or an (Np, 3) point set)."""
        with D.no_grad():
            down = linear(self.params, "vq/down", self.latents(source, seed))
        return quantize_infer(down.data[0], self.codebook)

    def decoder_input(self, source, path: str = QUANTIZE, seed=0) -> D.Tensor:
        with D.no_grad():
            if isinstance(source, TokenSequence):
                if source.K != self.codebook.K:
                    raise ValueError(f"token K={source.K} does not match codebook K={self.codebook.K}")
                if len(source) != self.cfg.n_latent:
                    raise ValueError(f"expected {self.cfg.n_latent} tokens, got {len(source)}")
                return tokens_to_decoder_input(source, self.codebook, self.params)
            lat = self.latents(source, seed)
            if path == SHORTCUT:
                return linear(self.params, "shortcut", lat)
            return bottleneck_forward(lat, self.codebook, self.params, "infer").decoder_input

    def field(self, source, path: str = QUANTIZE, head: str | None = None, seed=0,
              chunk: int = 16384) -> Callable[[np.ndarray], np.ndarray]:
        """Callable points (M, 3) -> signed values, negative inside.

        Occupancy logits are negated so both heads share the sign convention
        of a signed distance; the surface is the zero level set either way.
        """
        head = head or ("tsdf" if "tsdf" in self.heads else "occ")
        x = self.decoder_input(source, path, seed)
        sign = -1.0 if head == "occ" else 1.0

        def f(points):
            p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
            out = np.empty(len(p))
            with D.no_grad():
                for s in range(0, len(p), chunk):
                    out[s:s + chunk] = decode(x, p[s:s + chunk], self.params, self.cfg, head).values.data[0]
            return sign * out

        return f

    def occupancy(self, source, path: str = QUANTIZE, head: str | None = None, seed=0):
        f = self.field(source, path, head, seed)
        return lambda p: f(p) <= 0

    # -- checkpoint --------------------------------------------------------

    def to_checkpoint(self, train_cfg: TrainConfig | None = None) -> "Checkpoint":
        arrays = {}
        for k, p in self.params.items():
            arrays[f"student/{k}"] = p.data
        for k, p in self.teacher.items():
            arrays[f"teacher/{k}"] = p.data
        for k in self.opt.m:
            arrays[f"adam/m/{k}"] = self.opt.m[k]
            arrays[f"adam/v/{k}"] = self.opt.v[k]
        arrays["state/codebook_usage"] = self.codebook.usage
        arrays["state/codebook_last_used"] = self.codebook.last_used
        arrays["state/ssl_center"] = self.center
        for k, a in (self.gen_arrays or {}).items():
            arrays[f"gen/{k}"] = a
        o = self.opt
        config = {
            "net": self.cfg.to_json(), "ssl": self.scfg.to_json(),
            "train": train_cfg.to_json() if train_cfg else None,
            "seed": self.seed, "step": self.step,
            "adam": {"lr": o.lr, "b1": o.b1, "b2": o.b2, "eps": o.eps, "clip": o.clip, "t": o.t},
            "gen": self.gen_config,
        }
        return Checkpoint(config, {k: np.array(v, dtype=np.float64) for k, v in arrays.items()})

    @classmethod
    def from_checkpoint(cls, ck: "Checkpoint") -> "Tokenizer":
        c, a = ck.config, ck.arrays

        def group(prefix):
            return {k[len(prefix):]: v.copy() for k, v in a.items() if k.startswith(prefix)}

        params = D.ModelParams.from_arrays(group("student/"))
        teacher = D.ModelParams.from_arrays(group("teacher/"))
        ad = c["adam"]
        opt = Adam(ad["lr"], ad["b1"], ad["b2"], ad["eps"], ad["clip"])
        opt.t = ad["t"]
        opt.m, opt.v = group("adam/m/"), group("adam/v/")
        cb = Codebook(params["vq/codebook"], a["state/codebook_usage"].copy(),
                      a["state/codebook_last_used"].copy())
        gen = group("gen/") or None
        return cls(NetConfig.from_json(c["net"]), params, teacher, cb, a["state/ssl_center"].copy(),
                   SSLConfig(**c["ssl"]), opt, c["seed"], c["step"], c.get("gen"), gen)


def prepare_stage2(model: Tokenizer, seed: int | None = None, lr: float | None = None) -> Tokenizer:
    """Warm start for tsdf fine-tuning.

    All stage-1 weights, the teacher, codebook and SSL center carry over; the
    occupancy head is kept for evaluation. A zero-initialized tsdf head and a
    fresh REPA projection are added, and the optimizer restarts.
    """
    seed = model.seed if seed is None else seed
    arrays = model.params.arrays()
    new = {}
    if "head/tsdf/w" not in arrays:
        add_head(new, model.cfg, "tsdf", zero=True)
    if "repa/fc1/w" not in arrays:
        new.update(init_repa(model.cfg, seed))
    for k, v in new.items():
        model.params[k] = D.Tensor(v, requires_grad=True, name=k)
    model.opt = Adam(model.opt.lr if lr is None else lr, clip=model.opt.clip)
    return model


def init_repa(cfg: NetConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 0xEA])
    W, C = cfg.width, cfg.code_dim
    return {"repa/fc1/w": rng.normal(scale=1 / np.sqrt(W), size=(W, W)), "repa/fc1/b": np.zeros(W),
            "repa/fc2/w": rng.normal(scale=1 / np.sqrt(W), size=(W, C)), "repa/fc2/b": np.zeros(C)}


# --------------------------------------------------------------------- batches

@dataclass
class Batch:
    surface: np.ndarray     # (B, Np, 3) encoder input
    queries: np.ndarray     # (B, M, 3); uniform first, then near-surface
    occupancy: np.ndarray   # (B, M) 0/1
    tsdf: np.ndarray        # (B, M)
    n_uniform: int
    shapes: np.ndarray      # (B,) dataset indices


def make_batch(specs: Sequence[ShapeSpec], cfg: NetConfig, tcfg: TrainConfig, step: int) -> Batch:
    rng = np.random.default_rng([tcfg.seed, step, _BATCH])
    idx = rng.integers(len(specs), size=tcfg.batch_size)
    surf, q, occ, tsdf = [], [], [], []
    for i in idx:
        spec = specs[i]
        surf.append(surface_points(spec, cfg.n_points, rng))
        fb = sample_field(spec, tcfg.n_uniform, tcfg.n_near, tcfg.sigma_near, cfg.tau, rng)
        q.append(fb.points)
        occ.append(fb.occupancy.astype(np.float64))
        tsdf.append(fb.tsdf)
    return Batch(np.stack(surf), np.stack(q), np.stack(occ), np.stack(tsdf), tcfg.n_uniform, idx)


# ---------------------------------------------------------------------- losses

@dataclass
class LossOutput:
    total: D.Tensor
    parts: dict          # name -> unweighted Tensor
    weights: dict        # name -> weight used in total
    path: str
    tokens: np.ndarray | None = None
    down: np.ndarray | None = None
    ssl_mean: np.ndarray | None = None

    def values(self) -> dict:
        return {k: v.item() for k, v in self.parts.items()}


def eikonal_penalty(f_plus: D.Tensor, f_minus: D.Tensor, h: float) -> D.Tensor:
    """mean((|grad f| - 1)^2) from central differences.

    ``f_plus``/``f_minus`` hold field values at x +/- h e_i, with the three
    axes on dimension 1: shape (B, 3, E).
    """
    g = D.scale(f_plus - f_minus, 0.5 / h)
    norm = D.sqrt(D.sum(D.square(g), axis=1) + 1e-12)
    return D.mean(D.square(norm - 1.0))


def cosine_distance(a: D.Tensor, b: D.Tensor, eps: float = 1e-12) -> D.Tensor:
    """mean(1 - cos) over the last axis."""
    dot = D.sum(a * b, axis=-1)
    na = D.sqrt(D.sum(D.square(a), axis=-1) + eps)
    nb = D.sqrt(D.sum(D.square(b), axis=-1) + eps)
    return D.mean(1.0 - dot / (na * nb))


def repa_projection(params, features: D.Tensor) -> D.Tensor:
    return linear(params, "repa/fc2", D.gelu(linear(params, "repa/fc1", features)))


def _compose(parts: dict, weights: dict) -> D.Tensor:
    total = None
    for k, v in parts.items():
        term = D.scale(v, weights[k])
        total = term if total is None else total + term
    return total


def _shared_terms(batch, model, tcfg, step, bo, parts, weights):
    """SSL and VQ terms common to both stages. Returns the SSL teacher mean."""
    tmean = None
    if tcfg.lam_ssl > 0:
        r = ssl_loss(batch.surface, model.params, model.teacher, model.cfg, tcfg.ssl, model.center,
                     [tcfg.seed, step, _SSL])
        parts["ssl"], weights["ssl"] = r.loss, tcfg.lam_ssl
        tmean = r.teacher_mean
    if bo.path == QUANTIZE:
        parts["vq_codebook"], weights["vq_codebook"] = bo.vq.codebook_loss, tcfg.w_codebook
        parts["vq_commitment"], weights["vq_commitment"] = bo.vq.commitment_loss, tcfg.w_commitment
    return tmean


def _forward(batch, model, coin, straight_through):
    lat = encode(batch.surface, model.params, model.cfg)
    return bottleneck_forward(lat, model.codebook, model.params, "train", coin, straight_through)


def loss_stage1(batch: Batch, model: Tokenizer, tcfg: TrainConfig, coin: str, step: int = 0,
                straight_through: bool = True) -> LossOutput:
    if tcfg.stage != "occupancy":
        raise ValueError(f"loss_stage1 called with stage={tcfg.stage!r}")
    bo = _forward(batch, model, coin, straight_through)
    dec = decode(bo.decoder_input, batch.queries, model.params, model.cfg, "occ")
    parts = {"bce": D.bce_with_logits(dec.values, batch.occupancy)}
    weights = {"bce": 1.0}
    tmean = _shared_terms(batch, model, tcfg, step, bo, parts, weights)
    return LossOutput(_compose(parts, weights), parts, weights, bo.path, bo.tokens,
                      None if bo.down is None else bo.down.data, tmean)


def _eikonal_queries(batch: Batch, n: int, h: float) -> np.ndarray:
    x = batch.queries[:, batch.n_uniform:batch.n_uniform + n]          # (B, E, 3)
    offs = np.concatenate([np.eye(3), -np.eye(3)]) * h                  # +x +y +z -x -y -z
    return (x[:, None, :, :] + offs[None, :, None, :]).reshape(len(x), -1, 3)


def _repa_target(bo, model: Tokenizer, lat_down=None) -> np.ndarray:
    if bo.path == QUANTIZE:
        return model.codebook.lookup(bo.tokens)
    down = lat_down.reshape(-1, model.cfg.code_dim)
    idx = assign_nearest(down, model.codebook.embeddings.data)
    return model.codebook.lookup(idx).reshape(lat_down.shape)


def loss_stage2(batch: Batch, model: Tokenizer, tcfg: TrainConfig, coin: str, step: int = 0,
                straight_through: bool = True) -> LossOutput:
    if tcfg.stage != "tsdf":
        raise ValueError(f"loss_stage2 called with stage={tcfg.stage!r}")
    if "head/tsdf/w" not in model.params or "repa/fc1/w" not in model.params:
        raise ValueError("model is not prepared for the tsdf stage (see prepare_stage2)")
    P, cfg = model.params, model.cfg
    lat = encode(batch.surface, P, cfg)
    bo = bottleneck_forward(lat, model.codebook, P, "train", coin, straight_through)
    B, M = batch.queries.shape[:2]
    E = min(tcfg.n_eikonal, batch.queries.shape[1] - batch.n_uniform)
    q = np.concatenate([batch.queries, _eikonal_queries(batch, E, tcfg.eik_h)], axis=1)
    dec = decode(bo.decoder_input, q, P, cfg, "tsdf")
    f = dec.values[:, :M]
    fe = D.reshape(dec.values[:, M:], (B, 6, E))
    parts = {"l1": D.l1(f, batch.tsdf)}
    weights = {"l1": 1.0}
    if E and tcfg.lam_eik > 0:
        parts["eikonal"] = eikonal_penalty(fe[:, :3], fe[:, 3:], tcfg.eik_h)
        weights["eikonal"] = tcfg.lam_eik
    if tcfg.lam_repa > 0:
        down = None
        if bo.path == SHORTCUT:
            with D.no_grad():
                down = linear(P, "vq/down", lat).data
        target = D.stop_gradient(_repa_target(bo, model, down))
        parts["repa"] = cosine_distance(repa_projection(P, dec.repa_features), target)
        weights["repa"] = tcfg.lam_repa
    tmean = _shared_terms(batch, model, tcfg, step, bo, parts, weights)
    return LossOutput(_compose(parts, weights), parts, weights, bo.path, bo.tokens,
                      None if bo.down is None else bo.down.data, tmean)


LOSSES = {"occupancy": loss_stage1, "tsdf": loss_stage2}


# ------------------------------------------------------------------- training

@dataclass
class StepRecord:
    step: int
    path: str
    total: float
    parts: dict
    grad_norm: float
    sinkhorn_warnings: int = 0
    revived: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def train_step(model: Tokenizer, specs: Sequence[ShapeSpec], tcfg: TrainConfig) -> StepRecord:
    """One optimizer step. On a non-finite loss the model is left untouched."""
    step = model.step
    batch = make_batch(specs, model.cfg, tcfg, step)
    coin = shortcut_coin(tcfg.seed, step, tcfg.shortcut_p)
    model.params.zero_grad()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            out = LOSSES[tcfg.stage](batch, model, tcfg, coin, step)
        except D.NonFiniteError as e:
            raise TrainingDiverged(f"non-finite loss at step {step}: {e}", model) from e
    D.backward(out.total, model.params)
    grads = model.params.grads()
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(f"non-finite gradient at step {step}", model)
    model.opt.lr = tcfg.lr
    norm = model.opt.step(model.params)
    teacher_update(model.params, model.teacher, tcfg.ssl.m_ema)
    if out.ssl_mean is not None:
        model.center = update_center(model.center, out.ssl_mean, tcfg.ssl.m_center)
    revived = 0
    if out.tokens is not None:
        model.codebook.record(out.tokens, step)
        rng = np.random.default_rng([tcfg.seed, step, _REVIVE])
        revived = len(model.codebook.revive_dead(out.down.reshape(-1, model.cfg.code_dim), step, rng))
    model.step = step + 1
    n_warn = sum(issubclass(w.category, RuntimeWarning) and "sinkhorn" in str(w.message) for w in caught)
    return StepRecord(step, out.path, out.total.item(), out.values(), norm, n_warn, revived)


@dataclass
class FitResult:
    model: Tokenizer
    history: list


def fit(specs: Sequence[ShapeSpec], tcfg: TrainConfig, cfg: NetConfig | None = None,
        model: Tokenizer | None = None, steps: int | None = None,
        callback: Callable[[Tokenizer, StepRecord], None] | None = None) -> FitResult:
    """Run ``steps`` (default ``tcfg.steps``) optimizer steps.

    Stage ``tsdf`` needs a stage-1 ``model`` unless ``tcfg.cold_start`` is set.
    """
    if not specs:
        raise ValueError("empty dataset")
    if model is None:
        if tcfg.stage == "tsdf" and not tcfg.cold_start:
            raise ValueError("stage 'tsdf' needs a stage-1 model or cold_start=True")
        model = Tokenizer.create(cfg or NetConfig(), tcfg.seed, tcfg.ssl, lr=tcfg.lr)
    if tcfg.stage == "tsdf" and "head/tsdf/w" not in model.params:
        prepare_stage2(model)
    history = []
    for _ in range(tcfg.steps if steps is None else steps):
        rec = train_step(model, specs, tcfg)
        history.append(rec)
        if callback is not None:
            callback(model, rec)
    return FitResult(model, history)


# ------------------------------------------------------------------ evaluation

def evaluate_shape(model: Tokenizer, spec: ShapeSpec, n: int = 100_000, seed: int = 0,
                   paths=(QUANTIZE, SHORTCUT), head: str | None = None) -> dict:
    """V-IoU and S-IoU of the reconstruction of ``spec`` along each bottleneck path."""
    out = {}
    for path in paths:
        occ = model.occupancy(spec, path, head, seed)
        out[path] = {"v_iou": v_iou(occ, spec, n, seed), "s_iou": s_iou(occ, spec, n, seed)}
    return out


# ------------------------------------------------------------------ checkpoint

CKPT_MAGIC = b"CUBC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict
    version: int = CKPT_VERSION

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True).encode()
        out = [CKPT_MAGIC, struct.pack("<BI", self.version, len(cfg)), cfg,
               struct.pack("<I", len(self.arrays))]
        for name, a in self.arrays.items():
            a = np.ascontiguousarray(a, dtype="<f8")
            nb = name.encode()
            out.append(struct.pack("<I", len(nb)) + nb)
            out.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
            out.append(a.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointError("not a checkpoint: bad magic")
        pos = 4

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError(f"checkpoint truncated at byte {pos}")
            b = buf[pos:pos + n]
            pos += n
            return b

        version, n = struct.unpack("<BI", take(5))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = json.loads(take(n).decode())
        (count,) = struct.unpack("<I", take(4))
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", take(4))
            name = take(ln).decode()
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            size = int(np.prod(shape)) if rank else 1
            arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if pos != len(buf):
            raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint")
        return cls(config, arrays, version)

    def train_config(self) -> TrainConfig | None:
        t = self.config.get("train")
        return None if t is None else TrainConfig.from_json(t)


def save_checkpoint(obj, path, train_cfg: TrainConfig | None = None) -> Checkpoint:
    ck = obj.to_checkpoint(train_cfg) if isinstance(obj, Tokenizer) else obj
    Path(path).write_bytes(ck.to_bytes())
    return ck


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def with_stage(tcfg: TrainConfig, stage: str, **kw) -> TrainConfig:
    return replace(tcfg, stage=stage, **kw)
