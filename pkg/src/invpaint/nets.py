"""Model zoo: denoising teacher, one-step generator, inversion network,
discriminator heads, and checkpoint serialization.

All four roles share one small conv encoder-decoder backbone with residual
blocks, a sinusoidal timestep embedding, and an additive class embedding.
The generator and inverter reuse the backbone with the timestep pinned to
the noisiest level. Discriminator heads score intermediate teacher features
(one 1x1 conv + pooled linear score per tap).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream, fnv1a64

CKPT_MAGIC = b"IVFL"
CKPT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    base_channels: int = 16
    emb_width: int = 32
    n_classes: int = 4
    nonlin: str = "silu"  # or "relu"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.nonlin not in ("silu", "relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlin!r}")
        if min(self.in_channels, self.base_channels, self.emb_width,
               self.n_classes, self.timesteps) <= 0:
            raise ValueError("all config widths must be positive")


@dataclass(frozen=True)
class DiscConfig:
    head_width: int = 8
    n_heads: int = 3


def _act(cfg: BackboneConfig, x):
    return T.silu(x) if cfg.nonlin == "silu" else T.relu(x)


def _he(rng: RngStream, shape, fan_in) -> np.ndarray:
    return (rng.normal(shape, dtype=np.float32) * np.sqrt(2.0 / fan_in)).astype(
        np.float32
    )


def _conv_p(params, rng, name, o, c, k=3, zero=False):
    if zero:
        w = np.zeros((o, c, k, k), dtype=np.float32)
    else:
        w = _he(rng, (o, c, k, k), c * k * k)
    params[f"{name}.w"] = T.param(w, name=f"{name}.w")
    params[f"{name}.b"] = T.param(np.zeros(o, dtype=np.float32), name=f"{name}.b")


def _lin_p(params, rng, name, i, o, zero=False):
    w = np.zeros((i, o), dtype=np.float32) if zero else _he(rng, (i, o), i)
    params[f"{name}.w"] = T.param(w, name=f"{name}.w")
    params[f"{name}.b"] = T.param(np.zeros(o, dtype=np.float32), name=f"{name}.b")


def _res_p(params, rng, name, c, e):
    _conv_p(params, rng, f"{name}.c1", c, c)
    _conv_p(params, rng, f"{name}.c2", c, c)
    _lin_p(params, rng, f"{name}.emb", e, c)


def init_backbone(cfg: BackboneConfig, rng: RngStream) -> dict:
    p: dict[str, T.Tensor] = {}
    cb, e = cfg.base_channels, cfg.emb_width
    _lin_p(p, rng, "emb.t", e, e)
    _lin_p(p, rng, "emb.cls", cfg.n_classes, e)
    _conv_p(p, rng, "conv_in", cb, cfg.in_channels)
    _res_p(p, rng, "enc1", cb, e)
    _conv_p(p, rng, "down", 2 * cb, cb)
    _res_p(p, rng, "enc2", 2 * cb, e)
    _res_p(p, rng, "mid", 2 * cb, e)
    _conv_p(p, rng, "up", cb, 2 * cb)
    _res_p(p, rng, "dec", cb, e)
    _conv_p(p, rng, "conv_out", cfg.in_channels, cb, zero=True)
    return p


def param_count(params: dict) -> int:
    return sum(p.size for p in params.values())


def _conv(params, name, x, stride=1):
    y = T.conv2d(x, params[f"{name}.w"], stride=stride, pad=1)
    o = params[f"{name}.b"].shape[0]
    return T.add(y, T.reshape(params[f"{name}.b"], (1, o, 1, 1)))


def _lin(params, name, x):
    return T.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def _res(params, cfg, name, h, emb):
    c = params[f"{name}.c1.w"].shape[0]
    t1 = _conv(params, f"{name}.c1", _act(cfg, h))
    bias = T.reshape(_lin(params, f"{name}.emb", emb), (-1, c, 1, 1))
    t2 = _act(cfg, T.add(t1, bias))
    return T.add(h, _conv(params, f"{name}.c2", t2))


def _timestep_features(cfg: BackboneConfig, t, batch: int, dtype) -> np.ndarray:
    half = cfg.emb_width // 2
    ts = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (batch,))
    frac = ts / cfg.timesteps
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = frac[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < cfg.emb_width:
        feats = np.pad(feats, ((0, 0), (0, cfg.emb_width - feats.shape[1])))
    return feats.astype(dtype)


def _cond_onehot(cfg: BackboneConfig, cond, batch: int, dtype) -> np.ndarray:
    ids = np.broadcast_to(np.atleast_1d(np.asarray(cond)), (batch,))
    oh = np.zeros((batch, cfg.n_classes), dtype=dtype)
    oh[np.arange(batch), ids.astype(np.int64)] = 1.0
    return oh


def backbone_forward(params: dict, cfg: BackboneConfig, z, t, cond,
                     want_taps: bool = False):
    """Noise prediction with the same shape as z; optionally the tap list
    (post-enc1, post-enc2, bottleneck) for discriminator heads."""
    z = T.as_tensor(z)
    if z.data.ndim != 4 or z.shape[1] != cfg.in_channels:
        raise T.ShapeError(
            f"backbone expects (N,{cfg.in_channels},H,W), got {z.shape}"
        )
    n = z.shape[0]
    dtype = z.dtype
    tf = T.Tensor(_timestep_features(cfg, t, n, dtype))
    emb = _act(cfg, T.add(_lin(params, "emb.t", tf),
                          T.matmul(T.Tensor(_cond_onehot(cfg, cond, n, dtype)),
                                   params["emb.cls.w"])))
    h0 = _conv(params, "conv_in", z)
    h1 = _res(params, cfg, "enc1", h0, emb)
    h2 = _conv(params, "down", h1, stride=2)
    h3 = _res(params, cfg, "enc2", h2, emb)
    h4 = _res(params, cfg, "mid", h3, emb)
    h5 = T.add(_conv(params, "up", T.upsample_nearest(h4, 2)), h1)
    h6 = _res(params, cfg, "dec", h5, emb)
    out = _conv(params, "conv_out", h6)
    if want_taps:
        return out, [h1, h3, h4]
    return out


_ALPHA_BAR_CACHE: dict = {}


def _alpha_bar(cfg: BackboneConfig) -> np.ndarray:
    key = (cfg.timesteps, cfg.beta_start, cfg.beta_end)
    ab = _ALPHA_BAR_CACHE.get(key)
    if ab is None:
        betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps,
                            dtype=np.float64)
        ab = _ALPHA_BAR_CACHE[key] = np.cumprod(1.0 - betas)
    return ab


def denoiser_forward(params, cfg, z_t, t, cond, want_taps=False):
    """Noise prediction ε̂ with a v-parameterized head.

    The backbone predicts the bounded combination v = √ᾱ·ε − √(1−ᾱ)·z0
    and ε̂ = √ᾱ·v̂ + √(1−ᾱ)·z_t is recovered in closed form. Both the ε
    and x0 readouts then stay well-conditioned at the ends of the
    schedule, where a direct ε head would need near-exact cancellation
    against z_t to keep x0 = (z_t − √(1−ᾱ)·ε̂)/√ᾱ finite.
    """
    out = backbone_forward(params, cfg, z_t, t, cond, want_taps)
    v = out[0] if want_taps else out
    ab = _alpha_bar(cfg)[np.asarray(t)]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (v.data.ndim - 1))
    a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
    eps = T.add(T.mul(v, a.astype(v.dtype)),
                T.mul(T.as_tensor(z_t), s.astype(v.dtype)))
    return (eps, out[1]) if want_taps else eps


def generator_forward(params, cfg, eps, cond):
    """One-step generation; timestep pinned to the noisiest level."""
    return backbone_forward(params, cfg, eps, cfg.timesteps - 1, cond)


def inverter_forward(params, cfg, z0_m, cond):
    """One-step inversion of a masked image latent to a noise latent."""
    return backbone_forward(params, cfg, z0_m, cfg.timesteps - 1, cond)


def init_from_generator(gen_params: dict, gen_cfg: BackboneConfig,
                        inv_cfg: BackboneConfig) -> dict:
    """Exact weight copy; configs must be identical."""
    if gen_cfg != inv_cfg:
        raise ValueError(
            f"inverter config must match generator config: {inv_cfg} != {gen_cfg}"
        )
    return {k: T.param(p.data.copy(), name=k) for k, p in gen_params.items()}


# -- discriminator heads ----------------------------------------------


def tap_channels(cfg: BackboneConfig) -> list[int]:
    cb = cfg.base_channels
    return [cb, 2 * cb, 2 * cb]


def init_disc(dcfg: DiscConfig, teacher_cfg: BackboneConfig,
              rng: RngStream) -> dict:
    chans = tap_channels(teacher_cfg)
    if dcfg.n_heads != len(chans):
        raise ValueError(f"head count {dcfg.n_heads} != tap count {len(chans)}")
    p: dict[str, T.Tensor] = {}
    for k, c in enumerate(chans):
        p[f"head{k}.conv.w"] = T.param(
            _he(rng, (dcfg.head_width, c, 1, 1), c), name=f"head{k}.conv.w"
        )
        p[f"head{k}.conv.b"] = T.param(
            np.zeros(dcfg.head_width, dtype=np.float32), name=f"head{k}.conv.b"
        )
        _lin_p(p, rng, f"head{k}.lin", dcfg.head_width, 1)
    return p


def disc_heads_forward(params: dict, dcfg: DiscConfig, taps) -> list:
    """One (N,) score tensor per head."""
    if len(taps) != dcfg.n_heads:
        raise ValueError(f"got {len(taps)} taps for {dcfg.n_heads} heads")
    scores = []
    for k, tap in enumerate(taps):
        w = params[f"head{k}.conv.w"]
        b = params[f"head{k}.conv.b"]
        y = T.conv2d(tap, w, stride=1, pad=0)
        y = T.add(y, T.reshape(b, (1, dcfg.head_width, 1, 1)))
        y = T.relu(y)
        pooled = T.tmean(y, axes=(2, 3))  # (N, width)
        s = _lin(params, f"head{k}.lin", pooled)  # (N, 1)
        scores.append(T.reshape(s, (-1,)))
    return scores


# -- bundle and checkpoint io -----------------------------------------


@dataclass
class ModelBundle:
    teacher_cfg: BackboneConfig
    gen_cfg: BackboneConfig
    disc_cfg: DiscConfig
    sched_T: int
    beta_start: float
    beta_end: float
    step: int = 0
    teacher: dict | None = None
    generator: dict | None = None
    inverter: dict | None = None
    disc: dict | None = None

    def config_dict(self) -> dict:
        return {
            "teacher_cfg": asdict(self.teacher_cfg),
            "gen_cfg": asdict(self.gen_cfg),
            "disc_cfg": asdict(self.disc_cfg),
            "sched_T": self.sched_T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    def config_hash(self) -> int:
        canon = json.dumps(self.config_dict(), sort_keys=True).encode()
        return fnv1a64(canon)


def _flatten_bundle(bundle: ModelBundle) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for group in ("teacher", "generator", "inverter", "disc"):
        params = getattr(bundle, group)
        if params is None:
            continue
        for k, p in params.items():
            out[f"{group}/{k}"] = p.data.astype("<f4")
    cfg_bytes = json.dumps(bundle.config_dict(), sort_keys=True).encode()
    out["meta/config_utf8"] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype("<f4")
    out["meta/step"] = np.array([bundle.step], dtype="<f4")
    return out


def save_checkpoint(bundle: ModelBundle, path) -> None:
    tensors = _flatten_bundle(bundle)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQI", CKPT_VERSION, bundle.config_hash(), len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


class CheckpointError(ValueError):
    pass


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, want_hash, count = struct.unpack("<IQI", _read_exact(f, 16))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, nlen).decode()
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            n_el = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(f, 4 * n_el), dtype="<f4")
            tensors[name] = data.reshape(shape)
        if f.read(1):
            raise CheckpointError("trailing bytes after last tensor")

    cfg_bytes = tensors.pop("meta/config_utf8").astype(np.uint8).tobytes()
    cfg = json.loads(cfg_bytes.decode())
    bundle = ModelBundle(
        teacher_cfg=BackboneConfig(**cfg["teacher_cfg"]),
        gen_cfg=BackboneConfig(**cfg["gen_cfg"]),
        disc_cfg=DiscConfig(**cfg["disc_cfg"]),
        sched_T=cfg["sched_T"],
        beta_start=cfg["beta_start"],
        beta_end=cfg["beta_end"],
        step=int(tensors.pop("meta/step")[0]),
    )
    if bundle.config_hash() != want_hash:
        raise CheckpointError(
            f"config hash mismatch: header {want_hash:#x}, "
            f"recomputed {bundle.config_hash():#x}"
        )
    groups: dict[str, dict] = {}
    for name, arr in tensors.items():
        group, key = name.split("/", 1)
        groups.setdefault(group, {})[key] = T.param(arr.copy(), name=key)
    for group in ("teacher", "generator", "inverter", "disc"):
        setattr(bundle, group, groups.get(group))
    return bundle
