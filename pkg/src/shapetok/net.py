"""Perceiver-style point encoder and cross-attention field decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diff as D
from .geom import TAU
from .pmpe import PEConfig, embed_points


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 3
    n_latent: int = 16
    code_dim: int = 8
    codebook_size: int = 256
    pe: PEConfig = field(default_factory=lambda: PEConfig(20))
    tau: float = TAU
    mlp_ratio: int = 4
    shortcut_bias: bool = True
    n_points: int = 1024

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.n_latent < 1:
            raise ValueError("n_latent must be >= 1")
        if self.code_dim > self.width:
            raise ValueError("code_dim must not exceed width")

    @property
    def in_dim(self) -> int:
        return 3 + 3 * self.pe.L

    def to_json(self) -> dict:
        d = asdict(self)
        d["pe"] = {"L": self.pe.L, "beta": self.pe.beta}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["pe"] = PEConfig(**d["pe"])
        return cls(**d)

    @classmethod
    def tiny(cls, **kw) -> "NetConfig":
        base = dict(width=16, heads=2, encoder_layers=2, decoder_layers=2, n_latent=4, code_dim=4,
                    codebook_size=16, pe=PEConfig(10), n_points=32)
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper_scale(cls) -> "NetConfig":
        """Reported full-size architecture; not runnable at desk scale."""
        return cls(width=768, heads=12, encoder_layers=13, decoder_layers=24, n_latent=512,
                   code_dim=32, codebook_size=16384, pe=PEConfig(128), n_points=8192)


# the July update doubled latent length and quadrupled input density
PAPER_N_LATENT_V2 = 1024
PAPER_N_POINTS_V2 = 32768


# ------------------------------------------------------------------- init

class _Init:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.out = {}

    def linear(self, name, fan_in, fan_out, bias=True, gain=1.0):
        self.out[f"{name}/w"] = self.rng.normal(scale=gain / np.sqrt(fan_in), size=(fan_in, fan_out))
        if bias:
            self.out[f"{name}/b"] = np.zeros(fan_out)

    def ln(self, name, width):
        self.out[f"{name}/g"] = np.ones(width)
        self.out[f"{name}/b"] = np.zeros(width)

    def attn(self, name, width, cross=False):
        self.ln(f"{name}/ln_q", width)
        if cross:
            self.ln(f"{name}/ln_kv", width)
        for k in ("wq", "wk", "wv"):
            self.linear(f"{name}/{k}", width, width, bias=False)
        self.linear(f"{name}/wo", width, width, gain=0.5)

    def mlp(self, name, width, ratio):
        self.ln(f"{name}/ln", width)
        self.linear(f"{name}/fc1", width, ratio * width)
        self.linear(f"{name}/fc2", ratio * width, width, gain=0.5)


def init_params(cfg: NetConfig, seed: int = 0, heads=("occ",)) -> dict:
    """Fresh arrays for encoder, bottleneck projections, decoder and output heads."""
    W, r = cfg.width, cfg.mlp_ratio
    it = _Init(seed)
    it.linear("enc/in", cfg.in_dim, W)
    it.out["enc/queries"] = it.rng.normal(size=(cfg.n_latent, W))
    it.out["enc/mask_token"] = it.rng.normal(size=(W,))
    it.attn("enc/xattn", W, cross=True)
    it.mlp("enc/xmlp", W, r)
    for i in range(cfg.encoder_layers):
        it.attn(f"enc/sa{i}", W)
        it.mlp(f"enc/mlp{i}", W, r)
    it.linear("vq/down", W, cfg.code_dim)
    it.linear("vq/up", cfg.code_dim, W)
    it.out["vq/codebook"] = it.rng.normal(scale=1.0 / np.sqrt(cfg.code_dim),
                                          size=(cfg.codebook_size, cfg.code_dim))
    it.linear("shortcut", W, W, bias=cfg.shortcut_bias)
    it.linear("dec/in", cfg.in_dim, W)
    for i in range(cfg.decoder_layers):
        it.attn(f"dec/l{i}/sa", W)
        it.mlp(f"dec/l{i}/lmlp", W, r)
        it.attn(f"dec/l{i}/xattn", W, cross=True)
        it.mlp(f"dec/l{i}/qmlp", W, r)
    for h in heads:
        add_head(it.out, cfg, h, it.rng)
    return it.out


def add_head(arrays: dict, cfg: NetConfig, head: str, rng=None, zero: bool = False) -> None:
    W = cfg.width
    arrays[f"head/{head}/ln/g"] = np.ones(W)
    arrays[f"head/{head}/ln/b"] = np.zeros(W)
    if zero or rng is None:
        arrays[f"head/{head}/w"] = np.zeros((W, 1))
    else:
        arrays[f"head/{head}/w"] = rng.normal(scale=1.0 / np.sqrt(W), size=(W, 1))
    arrays[f"head/{head}/b"] = np.zeros(1)


# ----------------------------------------------------------------- layers

def linear(p, name, x):
    y = x @ p[f"{name}/w"]
    b = p.get(f"{name}/b")
    return y if b is None else y + b


def layer_norm(p, name, x):
    return D.layernorm(x) * p[f"{name}/g"] + p[f"{name}/b"]


def _heads(x, H):
    B, n, W = x.shape
    return D.transpose(D.reshape(x, (B, n, H, W // H)), (0, 2, 1, 3))


def attention(p, name, xq, xkv, H, bias=None):
    """Multi-head attention; ``xq`` (B, n, W), ``xkv`` (B, m, W)."""
    B, n, W = xq.shape
    q = _heads(xq @ p[f"{name}/wq/w"], H)
    k = _heads(xkv @ p[f"{name}/wk/w"], H)
    v = _heads(xkv @ p[f"{name}/wv/w"], H)
    s = D.scale(q @ D.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(W // H))
    if bias is not None:
        s = s + bias
    o = D.softmax(s, axis=-1) @ v
    o = D.reshape(D.transpose(o, (0, 2, 1, 3)), (B, n, W))
    return linear(p, f"{name}/wo", o)


def self_block(p, name, x, H):
    h = layer_norm(p, f"{name}/ln_q", x)
    return attention(p, name, h, h, H)


def cross_block(p, name, xq, xkv, H):
    return attention(p, name, layer_norm(p, f"{name}/ln_q", xq), layer_norm(p, f"{name}/ln_kv", xkv), H)


def mlp(p, name, x):
    h = layer_norm(p, f"{name}/ln", x)
    return linear(p, f"{name}/fc2", D.gelu(linear(p, f"{name}/fc1", h)))


# ---------------------------------------------------------------- encoder

def encode(points, params, cfg: NetConfig, mask=None) -> D.Tensor:
    """Surface points (B, Np, 3) -> latent tokens (B, n_latent, width).

    ``mask`` (B, n_latent) bool marks query tokens that are replaced by the
    learned mask token and get no direct view of the points; they are filled
    in only through self-attention with the visible tokens.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    B = pts.shape[0]
    x_in = linear(params, "enc/in", D.Tensor(embed_points(pts, cfg.pe)))
    q = D.reshape(params["enc/queries"], (1, cfg.n_latent, cfg.width))
    q = q + D.Tensor(np.zeros((B, 1, 1)))
    xa = cross_block(params, "enc/xattn", q, x_in, cfg.heads)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(B, cfg.n_latent, 1)
        keep = D.Tensor(1.0 - m)
        q = q * keep + D.Tensor(m) * params["enc/mask_token"]
        xa = xa * keep
    x = q + xa
    x = x + mlp(params, "enc/xmlp", x)
    for i in range(cfg.encoder_layers):
        x = x + self_block(params, f"enc/sa{i}", x, cfg.heads)
        x = x + mlp(params, f"enc/mlp{i}", x)
    return x


# ---------------------------------------------------------------- decoder

@dataclass
class DecodeOutput:
    values: D.Tensor            # (B, M) logits or tsdf values
    repa_features: D.Tensor     # (B, n_latent, width), latent stream entering the last layer


def decode(latents: D.Tensor, queries, params, cfg: NetConfig, head: str = "occ") -> DecodeOutput:
    """Latent tokens (B, n, width) + query points (B, M, 3) -> per-query values.

    ``head="occ"`` returns occupancy logits; ``head="tsdf"`` returns
    ``tau * tanh(.)``, which always lies in [-tau, tau].
    """
    if f"head/{head}/w" not in params:
        raise KeyError(f"model has no '{head}' head")
    qp = np.asarray(queries, dtype=np.float64)
    if qp.ndim == 2:
        qp = qp[None]
    L = latents
    q = linear(params, "dec/in", D.Tensor(embed_points(qp, cfg.pe)))
    feats = L
    for i in range(cfg.decoder_layers):
        if i == cfg.decoder_layers - 1:
            feats = L
        L = L + self_block(params, f"dec/l{i}/sa", L, cfg.heads)
        L = L + mlp(params, f"dec/l{i}/lmlp", L)
        q = q + cross_block(params, f"dec/l{i}/xattn", q, L, cfg.heads)
        q = q + mlp(params, f"dec/l{i}/qmlp", q)
    h = layer_norm(params, f"head/{head}/ln", q)
    out = D.reshape(linear(params, f"head/{head}", h), qp.shape[:2])
    if head == "tsdf":
        out = D.scale(D.tanh(out), cfg.tau)
    return DecodeOutput(out, feats)
