"""Training loop for the conditional denoiser.

Each step draws one timestep and one noise volume per sample, corrupts the
target, predicts the noise and minimizes the selected objective:

* ``ficd``        noise MSE + l1 between the estimated and true clean image
* ``noise_only``  noise MSE alone (the image term is still reported)
* ``ficd_s``      noise MSE + global and CTX-masked l1 on SUVr targets
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Graph, Tensor, backward
from .diffusion import corrupt
from .losses import LossReport, image_loss_g, masked_l1_g, noise_loss_g, suvr_map, suvr_to_train
from .metrics import psnr, ssim3d
from .model import DenoiserParams, DenoiserSpec, forward, init_params, predict_noise
from .rng import philox
from .schedule import NoiseSchedule, linear_schedule
from .volume import TRAIN, normalize

log = logging.getLogger(__name__)

LOSS_MODES = ("ficd", "noise_only", "ficd_s")
MODE_ALIASES = {"ddpm": "noise_only", "ficd-s": "ficd_s", "noise-only": "noise_only"}
CSV_COLUMNS = ("step", "l_noise", "l_image", "l_total", "psnr", "ssim", "l1")


class NumericError(RuntimeError):
    pass


def canonical_mode(mode):
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    return mode


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_mode: str = "ficd"
    T: int = 1000
    beta_start: float = 0.0005
    beta_end: float = 0.0195
    seed: int = 0
    log_every: int = 1
    max_steps: int | None = None
    eval_timesteps: int = 8
    model: DenoiserSpec = field(default_factory=DenoiserSpec)

    def __post_init__(self):
        self.loss_mode = canonical_mode(self.loss_mode)
        if self.epochs < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("epochs, batch_size and log_every must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)


def desk_config(**overrides) -> TrainConfig:
    """Small-volume defaults that train in minutes on one CPU."""
    base = TrainConfig(epochs=1000, batch_size=2, learning_rate=1e-3, T=200)
    return replace(base, **overrides)


@dataclass
class TrainPair:
    condition: np.ndarray
    target: np.ndarray
    ctx: np.ndarray | None = None


def prepare_pairs(raw_pairs, mode="ficd"):
    """Turn ``(mri, pet, masks)`` tuples into train-range arrays.

    For ``ficd_s`` the PET volume is treated as an SUV map: it is divided by
    the cerebellar mean and passed through the fixed SUVr mapping.
    """
    mode = canonical_mode(mode)
    out = []
    for mri, pet, masks in raw_pairs:
        cond = normalize(mri, TRAIN).voxels
        if mode == "ficd_s":
            target = suvr_to_train(suvr_map(pet, masks["cerebellum"]))
            out.append(TrainPair(cond, target, masks["ctx"].voxels))
        else:
            out.append(TrainPair(cond, normalize(pet, TRAIN).voxels))
    return out


# ----------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: DenoiserParams):
        return cls({k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t.data) for k, t in params.tensors.items()})


def adam_step(params: DenoiserParams, grads, state: AdamState, cfg: TrainConfig):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data = t.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


# ----------------------------------------------------------------------------
# one step

def _coef(values, t):
    return np.asarray(values)[t].reshape(-1, 1, 1, 1, 1)


def _stack(arrays):
    """Batch volumes; single-channel ``(D, H, W)`` items gain a channel axis."""
    out = np.stack(arrays)
    return out[:, None] if out.ndim == 4 else out


def build_losses(g, params, batch, t, eps, sched, mode):
    """Graph for one batch; returns ``(objective, terms, eps_hat)``."""
    x0 = _stack([p.target for p in batch])
    cond = _stack([p.condition for p in batch])
    x_t = corrupt(x0, eps, t, sched)
    eps_hat = forward(g, params, x_t, cond, t)
    ab = _coef(sched.alpha_bar, t)
    x0_hat = g.add(Tensor(x_t / np.sqrt(ab)), g.mul(eps_hat, Tensor(-np.sqrt(1.0 - ab) / np.sqrt(ab))))
    ln = noise_loss_g(g, Tensor(eps), eps_hat)
    li = image_loss_g(g, Tensor(x0), x0_hat)
    terms = {"l_noise": ln, "l_image": li}
    if mode == "ficd":
        objective = g.add(ln, li)
    elif mode == "noise_only":
        objective = ln
    else:
        ctx = _stack([p.ctx for p in batch])
        lctx = masked_l1_g(g, Tensor(x0), x0_hat, ctx)
        terms["l_suvr_ctx"] = lctx
        objective = g.add(g.add(ln, li), lctx)
    return objective, terms, eps_hat


def train_step(params, batch, rng, cfg: TrainConfig, sched=None, state=None):
    """One optimizer step; returns the batch :class:`LossReport`."""
    sched = sched or cfg.schedule()
    state = state if state is not None else AdamState.zeros(params)
    n = len(batch)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(_stack([p.target for p in batch]).shape)
    g = Graph()
    objective, terms, eps_hat = build_losses(g, params, batch, t, eps, sched, cfg.loss_mode)
    if not np.isfinite(objective.item()):
        bad = [i for i in range(n) if not np.all(np.isfinite(eps_hat.data[i]))] or list(range(n))
        raise NumericError(f"non-finite loss at batch index {bad[0]} (t={int(t[bad[0]])})")
    backward(g, objective, leaves=params.values())
    adam_step(params, {k: p.grad for k, p in params.tensors.items()}, state, cfg)
    ln, li = terms["l_noise"].item(), terms["l_image"].item()
    if cfg.loss_mode == "ficd_s":
        lc = terms["l_suvr_ctx"].item()
        return LossReport(ln, li, ln + li + lc, l_suvr=li, l_suvr_ctx=lc)
    return LossReport(ln, li, ln + li)


# ----------------------------------------------------------------------------
# evaluation of the clean-image estimate

def eval_timesteps(sched, count):
    return np.unique(np.linspace(1, sched.T, count).round().astype(int))


def x0_estimates(params, pair, sched, timesteps, seed=12345, index=0):
    """``(x0_hat, x0)`` of shape ``(len(timesteps), C, ...)`` for one pair."""
    target = _stack([pair.target])[0]
    cond = _stack([pair.condition])[0]
    k = len(timesteps)
    eps = philox(seed, index).standard_normal((k,) + target.shape)
    x0 = np.broadcast_to(target, (k,) + target.shape)
    x_t = corrupt(x0, eps, timesteps, sched)
    eps_hat = predict_noise(params, x_t, np.broadcast_to(cond, (k,) + cond.shape), timesteps)
    ab = _coef(sched.alpha_bar, timesteps)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), x0


def evaluate_x0(params, pairs, sched, timesteps=None, seed=12345):
    """Mean l1 (train range), PSNR and SSIM (eval range) of the x0 estimate.

    Every pair is corrupted at each of ``timesteps`` with noise from a fixed
    stream, so two models are scored on identical inputs.  Multi-channel
    targets (latent codes) get the l1 score only.
    """
    timesteps = eval_timesteps(sched, 8) if timesteps is None else np.asarray(timesteps)
    l1s, psnrs, ssims = [], [], []
    for i, pair in enumerate(pairs):
        x0_hat, x0 = x0_estimates(params, pair, sched, timesteps, seed, i)
        for est, ref in zip(x0_hat, x0):
            l1s.append(float(np.mean(np.abs(est - ref))))
            if est.shape[0] != 1:
                continue
            a = np.clip((est[0] + 1.0) / 2.0, 0.0, 1.0)
            b = np.clip((ref[0] + 1.0) / 2.0, 0.0, 1.0)
            p = psnr(a, b)
            psnrs.append(p if np.isfinite(p) else 100.0)
            ssims.append(ssim3d(a, b, window=min(7, *a.shape)))
    out = {"l1": float(np.mean(l1s))}
    if psnrs:
        out.update(psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)))
    return out


# ----------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    params: DenoiserParams
    state: AdamState
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def csv_text(self):
        return format_curves(self.epochs)


def format_curves(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row["step"]] + [f"{row[c]:.12g}" for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def _config_meta(cfg):
    meta = {f"train.{k}": v for k, v in vars(cfg).items() if k != "model"}
    return {k: repr(v) for k, v in meta.items()}


def save_state(path, result: TrainResult, cfg: TrainConfig, epoch):
    sched = cfg.schedule()
    meta = dict(result.params.spec.to_meta())
    meta.update({f"schedule.{k}": repr(v) for k, v in sched.params().items()})
    meta.update(_config_meta(cfg))
    meta["state.epoch"] = str(epoch)
    meta["state.adam_step"] = str(result.state.step)
    meta["state.global_step"] = str(len(result.steps))
    tensors = dict(result.params.arrays())
    for k in result.params.names():
        tensors[f"adam.m.{k}"] = result.state.m[k]
        tensors[f"adam.v.{k}"] = result.state.v[k]
    checkpoint.save(path, "denoiser", meta, tensors)


def load_state(path):
    """Return ``(params, state, epoch)`` from a training checkpoint."""
    _, meta, tensors = checkpoint.load(path, "denoiser")
    spec = DenoiserSpec.from_meta(meta)
    params = init_params(spec, 0)
    params.load_arrays(tensors)
    state = AdamState({k: tensors[f"adam.m.{k}"].copy() for k in params.names()},
                      {k: tensors[f"adam.v.{k}"].copy() for k in params.names()},
                      int(meta.get("state.adam_step", 0)))
    return params, state, int(meta.get("state.epoch", -1))


def train_loop(dataset, cfg: TrainConfig, checkpoint_path=None, eval_pairs=None,
               params=None, resume_from=None):
    """Train for ``cfg.epochs`` epochs (or until ``cfg.max_steps``).

    Epoch ``e`` draws its shuffle and all per-step randomness from the
    stream ``(seed, e + 1)``, so a run resumed from the checkpoint of epoch
    ``e - 1`` reproduces the uninterrupted losses exactly.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    sched = cfg.schedule()
    start = 0
    if resume_from is not None:
        params, state, last = load_state(resume_from)
        start = last + 1
    else:
        params = params if params is not None else init_params(cfg.model, cfg.seed)
        state = AdamState.zeros(params)
    result = TrainResult(params, state)
    if resume_from is not None:
        result.steps = [None] * state.step
    eval_pairs = eval_pairs if eval_pairs is not None else dataset
    ts = eval_timesteps(sched, cfg.eval_timesteps)
    for epoch in range(start, cfg.epochs):
        rng = philox(cfg.seed, epoch + 1)
        order = rng.permutation(len(dataset))
        reports = []
        for b in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and len(result.steps) >= cfg.max_steps:
                break
            batch = [dataset[i] for i in order[b:b + cfg.batch_size]]
            rep = train_step(params, batch, rng, cfg, sched, state)
            result.steps.append(rep)
            reports.append(rep)
            if len(result.steps) % cfg.log_every == 0:
                log.debug("step %d: %s", len(result.steps), rep)
        if not reports:
            break
        metrics = evaluate_x0(params, eval_pairs, sched, ts)
        row = {"step": len(result.steps),
               "l_noise": float(np.mean([r.l_noise for r in reports])),
               "l_image": float(np.mean([r.l_image for r in reports])),
               "l_total": float(np.mean([r.l_total for r in reports])),
               "psnr": float("nan"), "ssim": float("nan"), **metrics}
        result.epochs.append(row)
        log.info("epoch %d step %d l_total %.5f l1 %.5f", epoch, row["step"], row["l_total"], row["l1"])
        if checkpoint_path is not None:
            save_state(checkpoint_path, result, cfg, epoch)
    return result


def train_for_steps(pairs, cfg: TrainConfig, steps, params=None):
    """Run exactly ``steps`` optimizer steps (no per-epoch evaluation)."""
    sched = cfg.schedule()
    params = params if params is not None else init_params(cfg.model, cfg.seed)
    state = AdamState.zeros(params)
    reports = []
    epoch = 0
    while len(reports) < steps:
        rng = philox(cfg.seed, epoch + 1)
        order = rng.permutation(len(pairs))
        for b in range(0, len(order), cfg.batch_size):
            if len(reports) >= steps:
                break
            batch = [pairs[i] for i in order[b:b + cfg.batch_size]]
            reports.append(train_step(params, batch, rng, cfg, sched, state))
        epoch += 1
    return params, reports


def compare_objectives(train_pairs, heldout_pairs, cfg: TrainConfig, steps, seeds=(0, 1, 2),
                       modes=("ficd", "noise_only")):
    """Paired runs: identical seeds, data and initialization, different loss."""
    sched = cfg.schedule()
    ts = eval_timesteps(sched, cfg.eval_timesteps)
    results = []
    for seed in seeds:
        row = {"seed": seed}
        for mode in modes:
            run_cfg = replace(cfg, seed=seed, loss_mode=mode)
            params, _ = train_for_steps(train_pairs, run_cfg, steps)
            row[mode] = evaluate_x0(params, heldout_pairs, sched, ts)
        results.append(row)
    return results


def write_curves(path, result: TrainResult):
    Path(path).write_text(result.csv_text(), encoding="utf-8")
