"""Conditional 3D U-Net that predicts the noise in x_t, plus test doubles.

Level ``i`` of the encoder runs at ``dims / 2**i`` with ``base_channels[i]``
feature maps; every level except the first opens with a stride-2
convolution.  The decoder mirrors it with stride-2 transposed convolutions
and concatenated skips.  Self-attention sits at the deepest level.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import Graph, ShapeError, Tensor
from .rng import philox
from .schedule import NoiseSchedule, linear_schedule


@dataclass(frozen=True)
class DenoiserSpec:
    in_channels: int = 2
    out_channels: int = 1
    base_channels: tuple = (8, 16, 32)
    blocks_per_level: int = 2
    time_embed_dim: int = 32
    attention: bool = True
    heads: int = 2
    head_channels: int = 8

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        chans = self.base_channels
        if not chans or any(b <= a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"base_channels must be strictly increasing, got {chans}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if min(self.in_channels, self.out_channels, self.blocks_per_level, self.heads,
               self.head_channels) < 1:
            raise ValueError("channel, block and head counts must be positive")

    @property
    def levels(self):
        return len(self.base_channels)

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def to_meta(self):
        meta = {f"spec.{k}": v for k, v in asdict(self).items()}
        meta["spec.base_channels"] = ",".join(str(c) for c in self.base_channels)
        return meta

    @classmethod
    def from_meta(cls, meta):
        kw = {}
        for name, f in cls.__dataclass_fields__.items():
            raw = meta.get(f"spec.{name}")
            if raw is None:
                continue
            if name == "base_channels":
                kw[name] = tuple(int(c) for c in raw.split(","))
            elif f.type == "bool":
                kw[name] = raw == "True"
            else:
                kw[name] = int(raw)
        return cls(**kw)


PAPER_SPEC = DenoiserSpec(base_channels=(16, 32, 64), heads=8, head_channels=64)


def norm_groups(channels, max_groups=8):
    return max(g for g in range(1, min(max_groups, channels) + 1) if channels % g == 0)


@dataclass
class DenoiserParams:
    spec: DenoiserSpec
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        return DenoiserParams(self.spec, {k: Tensor(t.data.copy(), True, k)
                                          for k, t in self.tensors.items()})

    def load_arrays(self, arrays):
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"parameter {k}: shape {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)


# ----------------------------------------------------------------------------
# initialization

class _Init:
    def __init__(self, seed):
        self.rng = philox(seed, 0x1A17)
        self.tensors = {}

    def add(self, name, arr):
        self.tensors[name] = Tensor(arr, requires_grad=True, name=name)

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        self.add(name, np.zeros(shape))

    def conv(self, name, cin, cout, k):
        self.uniform(f"{name}.w", (cout, cin, k, k, k), cin * k ** 3)
        self.zeros(f"{name}.b", (cout,))

    def conv_t(self, name, cin, cout, k):
        self.uniform(f"{name}.w", (cin, cout, k, k, k), cin * k ** 3)
        self.zeros(f"{name}.b", (cout,))

    def linear(self, name, cin, cout, bias=True):
        self.uniform(f"{name}.w", (cout, cin), cin)
        if bias:
            self.zeros(f"{name}.b", (cout,))

    def norm(self, name, c):
        self.add(f"{name}.gamma", np.ones(c))
        self.zeros(f"{name}.beta", (c,))

    def resblock(self, name, cin, cout, tdim):
        self.norm(f"{name}.norm1", cin)
        self.conv(f"{name}.conv1", cin, cout, 3)
        self.linear(f"{name}.temb", tdim, cout)
        self.norm(f"{name}.norm2", cout)
        self.conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            self.conv(f"{name}.skip", cin, cout, 1)


def init_params(spec: DenoiserSpec, seed=0) -> DenoiserParams:
    """Fan-in uniform weights, zero biases, and a zero output head."""
    ini = _Init(seed)
    ch = spec.base_channels
    td = spec.time_embed_dim
    ini.linear("time.fc1", td, td)
    ini.linear("time.fc2", td, td)
    ini.conv("in_conv", spec.in_channels, ch[0], 3)
    cur = ch[0]
    for i, c in enumerate(ch):
        if i:
            ini.conv(f"down{i}.downsample", cur, cur, 3)
        for j in range(spec.blocks_per_level):
            ini.resblock(f"down{i}.res{j}", cur, c, td)
            cur = c
    if spec.attention:
        inner = spec.heads * spec.head_channels
        ini.norm("mid.attn.norm", cur)
        for p in "qkv":
            ini.linear(f"mid.attn.{p}", cur, inner, bias=False)
        ini.linear("mid.attn.out", inner, cur)
    for i in reversed(range(spec.levels)):
        c = ch[i]
        for j in range(spec.blocks_per_level):
            ini.resblock(f"up{i}.res{j}", cur + c if j == 0 else c, c, td)
            cur = c
        if i:
            ini.conv_t(f"up{i}.upsample", c, ch[i - 1], 2)
            cur = ch[i - 1]
    ini.norm("out.norm", cur)
    ini.zeros("out.conv.w", (spec.out_channels, cur, 3, 3, 3))
    ini.zeros("out.conv.b", (spec.out_channels,))
    return DenoiserParams(spec, ini.tensors)


# ----------------------------------------------------------------------------
# forward

def timestep_embedding(t, dim):
    """Sinusoidal features: ``dim/2`` sines followed by ``dim/2`` cosines."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _conv(g, p, name, x, stride=1):
    return g.conv3d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride)


def _norm(g, p, name, x):
    c = x.shape[1]
    return g.group_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], groups=norm_groups(c), eps=1e-5)


def _norm_act(g, p, name, x):
    return g.silu(_norm(g, p, name, x))


def _resblock(g, p, name, x, temb_act):
    h = _conv(g, p, f"{name}.conv1", _norm_act(g, p, f"{name}.norm1", x))
    tproj = g.linear(temb_act, p[f"{name}.temb.w"], p[f"{name}.temb.b"])
    n, c = tproj.shape
    # the shift goes after the norm: a per-channel group would cancel it
    h = g.add(_norm(g, p, f"{name}.norm2", h), g.reshape(tproj, shape=(n, c, 1, 1, 1)))
    h = _conv(g, p, f"{name}.conv2", g.silu(h))
    skip = x
    if f"{name}.skip.w" in p.tensors:
        skip = _conv(g, p, f"{name}.skip", x)
    return g.add(h, skip)


def _attention(g, p, spec, x):
    n, c = x.shape[:2]
    npos = int(np.prod(x.shape[2:]))
    heads, hc = spec.heads, spec.head_channels
    h = g.group_norm(x, p["mid.attn.norm.gamma"], p["mid.attn.norm.beta"],
                     groups=norm_groups(c), eps=1e-5)
    tokens = g.transpose(g.reshape(h, shape=(n, c, npos)), axes=(0, 2, 1))

    def split(name):
        y = g.linear(tokens, p[f"mid.attn.{name}.w"])
        return g.transpose(g.reshape(y, shape=(n, npos, heads, hc)), axes=(0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = g.scale(g.bmm(q, g.transpose(k, axes=(0, 1, 3, 2))), factor=1.0 / np.sqrt(hc))
    ctx = g.bmm(g.softmax(scores, axis=-1), v)
    ctx = g.reshape(g.transpose(ctx, axes=(0, 2, 1, 3)), shape=(n, npos, heads * hc))
    out = g.linear(ctx, p["mid.attn.out.w"], p["mid.attn.out.b"])
    out = g.reshape(g.transpose(out, axes=(0, 2, 1)), shape=x.shape)
    return g.add(x, out)


def check_dims(spec, dims):
    if any(d % spec.divisor for d in dims):
        raise ShapeError(f"spatial dims {tuple(dims)} must be divisible by {spec.divisor}")


def forward(g: Graph, params: DenoiserParams, x_t, condition, t):
    """Predicted noise for a batch.

    ``x_t`` is ``(N, C_x, D, H, W)``, ``condition`` is ``(N, C_c, D, H, W)``
    and ``t`` holds one timestep per sample.
    """
    spec = params.spec
    p = params.tensors
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    condition = condition if isinstance(condition, Tensor) else Tensor(condition)
    if x_t.shape[0] != condition.shape[0] or x_t.shape[2:] != condition.shape[2:]:
        raise ShapeError(f"x_t {x_t.shape} and condition {condition.shape} do not align")
    if x_t.shape[1] + condition.shape[1] != spec.in_channels:
        raise ShapeError(f"expected {spec.in_channels} input channels, got "
                         f"{x_t.shape[1]} + {condition.shape[1]}")
    check_dims(spec, x_t.shape[2:])
    n = x_t.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))

    emb = Tensor(timestep_embedding(tt, spec.time_embed_dim))
    temb = g.linear(g.silu(g.linear(emb, p["time.fc1.w"], p["time.fc1.b"])),
                    p["time.fc2.w"], p["time.fc2.b"])
    temb_act = g.silu(temb)

    h = _conv(g, params, "in_conv", g.concat(x_t, condition, axis=1))
    skips = []
    for i in range(spec.levels):
        if i:
            h = _conv(g, params, f"down{i}.downsample", h, stride=2)
        for j in range(spec.blocks_per_level):
            h = _resblock(g, params, f"down{i}.res{j}", h, temb_act)
        skips.append(h)
    if spec.attention:
        h = _attention(g, params, spec, h)
    for i in reversed(range(spec.levels)):
        for j in range(spec.blocks_per_level):
            if j == 0:
                h = g.concat(h, skips[i], axis=1)
            h = _resblock(g, params, f"up{i}.res{j}", h, temb_act)
        if i:
            h = g.conv_transpose3d(h, p[f"up{i}.upsample.w"], p[f"up{i}.upsample.b"], stride=2)
    h = _norm_act(g, params, "out.norm", h)
    return _conv(g, params, "out.conv", h)


def predict_noise(params, x_t, condition, t):
    """Inference-only forward pass returning an array."""
    return forward(Graph(record=False), params, x_t, condition, t).data


class NetworkDenoiser:
    """Adapts the network to the ``denoiser(x_t, condition, t)`` protocol.

    Single-channel volumes may be passed without a channel axis.
    """

    def __init__(self, params):
        self.params = params

    def __call__(self, x_t, condition, t):
        x = np.asarray(x_t, dtype=np.float64)
        c = np.asarray(condition, dtype=np.float64)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if c.ndim == 3:
            c = c[None]
        out = predict_noise(self.params, x[None], c[None], t)[0]
        return out[0] if squeeze else out


def oracle_denoiser(stored_eps):
    """Denoiser that ignores its inputs and returns ``stored_eps``."""
    stored = np.array(stored_eps, dtype=np.float64)

    def denoise(x_t, condition, t):
        if np.shape(x_t) != stored.shape:
            raise ShapeError(f"oracle holds shape {stored.shape}, called with {np.shape(x_t)}")
        return stored

    return denoise


def clean_target_oracle(x0, schedule: NoiseSchedule):
    """Denoiser returning the exact noise component of x_t relative to ``x0``."""
    x0 = np.array(x0, dtype=np.float64)

    def denoise(x_t, condition, t):
        if np.shape(x_t) != x0.shape:
            raise ShapeError(f"oracle holds shape {x0.shape}, called with {np.shape(x_t)}")
        ab = schedule.alpha_bar[t]
        return (np.asarray(x_t) - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return denoise


# ----------------------------------------------------------------------------
# checkpoints

SECTION = "denoiser"


def save_checkpoint(path, params, schedule, extra_meta=None, extra_tensors=None,
                    section=SECTION):
    meta = dict(params.spec.to_meta())
    meta.update({f"schedule.{k}": repr(v) for k, v in schedule.params().items()})
    meta.update(extra_meta or {})
    tensors = dict(params.arrays())
    tensors.update(extra_tensors or {})
    checkpoint.save(path, section, meta, tensors)


def load_checkpoint(path, section=SECTION):
    """Return ``(params, schedule, meta, extra_tensors)``."""
    _, meta, tensors = checkpoint.load(path, section)
    spec = DenoiserSpec.from_meta(meta)
    params = init_params(spec, 0)
    missing = [k for k in params.names() if k not in tensors]
    if missing:
        raise checkpoint.CheckpointError(f"checkpoint lacks parameters {missing[:3]}")
    params.load_arrays(tensors)
    sched = linear_schedule(int(meta["schedule.T"]), float(meta["schedule.beta_start"]),
                            float(meta["schedule.beta_end"]))
    extra = {k: v for k, v in tensors.items() if k not in params.tensors}
    return params, sched, meta, extra
