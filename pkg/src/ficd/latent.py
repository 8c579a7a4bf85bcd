"""Latent variant: a plain convolutional autoencoder plus diffusion on its codes.

The autoencoder is trained first on PET reconstruction and then frozen.
Condition and target volumes are both encoded, the codes are concatenated
channelwise, and the ordinary trainer runs on them.  With ``loss_mode=ficd``
the image constraint is the l1 between the estimated and true latent codes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .autodiff import Graph, ShapeError, Tensor, backward
from .diffusion import SampleConfig, mc_sample
from .losses import image_loss_g
from .model import DenoiserParams, DenoiserSpec, NetworkDenoiser, _conv, _Init
from .rng import philox
from .trainer import (AdamState, TrainConfig, TrainPair, _stack, adam_step, eval_timesteps,
                      train_for_steps, train_step, x0_estimates)
from .volume import TRAIN, Volume3

SECTION = "autoencoder"


@dataclass(frozen=True)
class AutoencoderSpec:
    channels: tuple = (8, 16, 32)
    latent_channels: int = 4
    # optional b*tanh(z/b) on the encoder output keeps codes in (-b, b);
    # the default leaves them raw
    code_bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1 or self.latent_channels < 1:
            raise ValueError("autoencoder channel counts must be positive")
        if self.code_bound is not None:
            if not self.code_bound > 0:
                raise ValueError("code_bound must be positive or None")
            object.__setattr__(self, "code_bound", float(self.code_bound))

    @property
    def factor(self):
        return 2 ** len(self.channels)

    def latent_dims(self, dims):
        check_divisible(self, dims)
        return (self.latent_channels,) + tuple(d // self.factor for d in dims)

    def to_meta(self):
        return {"ae.channels": ",".join(map(str, self.channels)),
                "ae.latent_channels": str(self.latent_channels),
                "ae.code_bound": "none" if self.code_bound is None else repr(self.code_bound)}

    @classmethod
    def from_meta(cls, meta):
        return cls(tuple(int(c) for c in meta["ae.channels"].split(",")),
                   int(meta["ae.latent_channels"]),
                   None if meta["ae.code_bound"] == "none" else float(meta["ae.code_bound"]))


class AutoencoderParams(DenoiserParams):
    pass


def check_divisible(spec, dims):
    if any(d % spec.factor for d in dims):
        raise ShapeError(f"volume dims {tuple(dims)} must be divisible by {spec.factor}")


def latent_denoiser_spec(ae: AutoencoderSpec, base_channels=(16, 32)) -> DenoiserSpec:
    """Denoiser for codes: noisy code and condition code in, noise out."""
    c = ae.latent_channels
    return DenoiserSpec(in_channels=2 * c, out_channels=c, base_channels=base_channels,
                        attention=False)


def init_autoencoder(spec: AutoencoderSpec, seed=0) -> AutoencoderParams:
    ini = _Init(seed)
    cur = 1
    for i, c in enumerate(spec.channels):
        ini.conv(f"enc{i}", cur, c, 3)
        cur = c
    ini.conv("enc.out", cur, spec.latent_channels, 1)
    ini.conv("dec.in", spec.latent_channels, cur, 1)
    rev = spec.channels[::-1]
    for i, c in enumerate(rev):
        nxt = rev[i + 1] if i + 1 < len(rev) else rev[-1]
        ini.conv_t(f"dec{i}", c, nxt, 2)
    ini.zeros("dec.out.w", (1, rev[-1], 3, 3, 3))
    ini.zeros("dec.out.b", (1,))
    return AutoencoderParams(spec, ini.tensors)


def encode_g(g, ae, x):
    h = x
    for i in range(len(ae.spec.channels)):
        h = g.silu(_conv(g, ae, f"enc{i}", h, stride=2))
    z = _conv(g, ae, "enc.out", h)
    b = ae.spec.code_bound
    if b is None:
        return z
    return g.scale(g.tanh(g.scale(z, factor=1.0 / b)), factor=b)


def decode_g(g, ae, z):
    h = g.silu(_conv(g, ae, "dec.in", z))
    for i in range(len(ae.spec.channels)):
        h = g.silu(g.conv_transpose3d(h, ae[f"dec{i}.w"], ae[f"dec{i}.b"], stride=2))
    return _conv(g, ae, "dec.out", h)


def _volume_batch(v):
    arr = v.voxels if isinstance(v, Volume3) else np.asarray(v, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None, None]
    elif arr.ndim == 4:
        arr = arr[:, None]
    return arr


def encode(ae, v):
    """Latent code ``(C, lx, ly, lz)`` of one volume (or a batch of them)."""
    x = _volume_batch(v)
    check_divisible(ae.spec, x.shape[2:])
    z = encode_g(Graph(record=False), ae, Tensor(x)).data
    return z[0] if np.ndim(v.voxels if isinstance(v, Volume3) else v) == 3 else z


def decode(ae, z):
    """Decoded volume; a single code gives a raw :class:`Volume3`."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 4
    if z.ndim not in (4, 5) or z.shape[-4] != ae.spec.latent_channels:
        raise ShapeError(f"expected codes with {ae.spec.latent_channels} channels, got {z.shape}")
    out = decode_g(Graph(record=False), ae, Tensor(z[None] if single else z)).data[:, 0]
    return Volume3(out[0]) if single else out


# ----------------------------------------------------------------------------
# autoencoder training

@dataclass
class AEConfig:
    epochs: int = 100
    batch_size: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None


def reconstruction_loss(ae, volumes):
    x = _stack(list(volumes))
    g = Graph(record=False)
    return image_loss_g(g, Tensor(x), decode_g(g, ae, encode_g(g, ae, Tensor(x)))).item()


def train_autoencoder(volumes, cfg: AEConfig, spec=AutoencoderSpec(), params=None):
    """l1 reconstruction training; returns ``(params, per-step losses)``."""
    if not len(volumes):
        raise ValueError("autoencoder dataset is empty")
    check_divisible(spec, np.shape(volumes[0]))
    ae = params if params is not None else init_autoencoder(spec, cfg.seed)
    state = AdamState.zeros(ae)
    losses = []
    for epoch in range(cfg.epochs):
        order = philox(cfg.seed, epoch + 1).permutation(len(volumes))
        for b in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and len(losses) >= cfg.max_steps:
                return ae, losses
            x = Tensor(_stack([volumes[i] for i in order[b:b + cfg.batch_size]]))
            g = Graph()
            loss = image_loss_g(g, x, decode_g(g, ae, encode_g(g, ae, x)))
            backward(g, loss, leaves=ae.values())
            adam_step(ae, {k: t.grad for k, t in ae.tensors.items()}, state, cfg)
            losses.append(loss.item())
    return ae, losses


def save_autoencoder(path, ae):
    checkpoint.save(path, SECTION, ae.spec.to_meta(), ae.arrays())


def load_autoencoder(path):
    _, meta, tensors = checkpoint.load(path, SECTION)
    ae = init_autoencoder(AutoencoderSpec.from_meta(meta))
    ae.load_arrays(tensors)
    return ae


def fingerprint(params):
    """SHA-256 over names and raw bytes; equal iff weights are bitwise equal."""
    h = hashlib.sha256()
    for k in sorted(params.tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.tensors[k].data).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# diffusion on codes

def encode_pairs(ae, pairs):
    """Image :class:`TrainPair` list -> latent pairs (condition code, target code)."""
    return [TrainPair(encode(ae, p.condition), encode(ae, p.target)) for p in pairs]


def latent_train(ae, latent_pairs, cfg: TrainConfig, steps, params=None):
    """Diffusion training on frozen-encoder codes (weights never enter the graph)."""
    return train_for_steps(latent_pairs, cfg, steps, params)


def latent_train_step(latent_params, batch, rng, cfg, sched=None, state=None):
    return train_step(latent_params, batch, rng, cfg, sched, state)


def latent_sample(ae, latent_params, condition, cfg: SampleConfig):
    """Encode the condition, run the reverse chain on codes, decode."""
    cond_vol = condition if isinstance(condition, Volume3) else Volume3(condition, TRAIN)
    zc = encode(ae, cond_vol)
    z = mc_sample(NetworkDenoiser(latent_params), zc, cfg)
    out = decode(ae, z)
    return Volume3(np.clip(out.voxels, -1.0, 1.0), TRAIN, cond_vol.stored_min, cond_vol.stored_max)


def evaluate_latent(ae, latent_params, latent_pairs, image_pairs, sched, timesteps=None, seed=12345):
    """Mean l1 of the code estimate and of its decoded image."""
    timesteps = eval_timesteps(sched, 8) if timesteps is None else np.asarray(timesteps)
    zl1, il1 = [], []
    for i, (lp, ip) in enumerate(zip(latent_pairs, image_pairs)):
        z_hat, z0 = x0_estimates(latent_params, lp, sched, timesteps, seed, i)
        zl1.append(float(np.mean(np.abs(z_hat - z0))))
        img = decode(ae, z_hat)
        il1.append(float(np.mean(np.abs(img - ip.target[None]))))
    return {"latent_l1": float(np.mean(zl1)), "image_l1": float(np.mean(il1))}


def compare_latent_objectives(ae, train_pairs, heldout_pairs, cfg: TrainConfig, steps,
                              seeds=(0, 1, 2), base_channels=(16, 32)):
    """FIC-LDM (``ficd``) vs plain LDM (``noise_only``) at matched steps."""
    sched = cfg.schedule()
    ts = eval_timesteps(sched, cfg.eval_timesteps)
    ltrain = encode_pairs(ae, train_pairs)
    lheld = encode_pairs(ae, heldout_pairs)
    model = latent_denoiser_spec(ae.spec, base_channels)
    results = []
    for seed in seeds:
        row = {"seed": seed}
        for mode in ("ficd", "noise_only"):
            run_cfg = replace(cfg, seed=seed, loss_mode=mode, model=model)
            params, _ = latent_train(ae, ltrain, run_cfg, steps)
            row[mode] = evaluate_latent(ae, params, lheld, heldout_pairs, sched, ts)
        results.append(row)
    return results
