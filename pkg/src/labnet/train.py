"""Toy-scale supervised training and finite-difference gradient checking."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .dsp import DspConfig
from .kernels import Tape
from .model import LABNet, ModelConfig, spec_features
from .params import load_params, save_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    lr_decay: float = 0.98          # per epoch
    clip_norm: float = 5.0
    epochs: int = 100
    batch_size: int = 4
    segment_seconds: float = 4.0
    alpha: float = 1.0              # compressed-magnitude MSE weight
    beta: float = 1.0               # compressed-complex MSE weight
    channel_range: tuple[int, int] = (1, 6)
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.segment_seconds <= 0:
            raise ValueError("segment_seconds must be positive")
        lo, hi = self.channel_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid channel range {self.channel_range}")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** epoch


# --------------------------------------------------------------------- loss


def compressed_loss(est_mag_c, est_phase, target_spec, p, alpha=1.0, beta=1.0):
    """Loss on compressed quantities: ``alpha * MSE(mag) + beta * mean |complex diff|^2``."""
    tgt_mag_c, tgt_c = dsp.compress(target_spec, p)
    mag_term = torch.mean((est_mag_c - tgt_mag_c) ** 2)
    est_c = torch.polar(est_mag_c, est_phase)
    cplx_term = torch.mean((est_c - tgt_c).abs() ** 2)
    return alpha * mag_term + beta * cplx_term


def spectral_loss(est_spec, target_spec, p, alpha=1.0, beta=1.0):
    """Compress both complex spectra, then compare as in :func:`compressed_loss`."""
    mag_c, _ = dsp.compress(est_spec, p)
    return compressed_loss(mag_c, torch.angle(est_spec), target_spec, p, alpha, beta)


def mask_loss(model: LABNet, noisy_spec, target_spec, p, alpha=1.0, beta=1.0):
    """Forward a ``(B, C, F, T)`` noisy batch and score the masked reference spectrum.

    Phase stays the noisy reference phase; Griffin-Lim is not part of training.
    """
    mask = model(spec_features(noisy_spec, p))                  # (B, T, F)
    ref = noisy_spec[:, 0]
    mag_c = mask.transpose(-1, -2) * ref.abs() ** p
    return compressed_loss(mag_c, torch.angle(ref), target_spec, p, alpha, beta)


# --------------------------------------------------------------------- optimiser


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float):
    """Scale all gradients by a common factor so their global norm is at most ``max_norm``.

    Returns the clipped gradients and the norm before clipping.
    """
    norm = math.sqrt(sum(float(torch.sum(g.double() ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            lr, (b1, b2), eps, wd = group["lr"], group["betas"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["m"], state["v"]
                m.mul_(b1).add_(p.grad, alpha=1 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                denom = (v.sqrt() / math.sqrt(1 - b2 ** t)).add_(eps)
                p.mul_(1 - lr * wd)
                p.addcdiv_(m, denom, value=-lr / (1 - b1 ** t))
        return loss


def optimizer_step(model: torch.nn.Module, grads: dict[str, torch.Tensor], opt: AdamW,
                   clip_norm: float) -> dict:
    """Clip, install and apply one gradient update; non-finite gradients are rejected."""
    if not all(torch.isfinite(g).all() for g in grads.values()):
        bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
        log.warning("rejecting step: non-finite gradient in %s", bad[0])
        return {"applied": False, "grad_norm": float("nan"), "bad": bad}
    grads, norm = clip_gradients(grads, clip_norm)
    for name, p in model.named_parameters():
        p.grad = grads[name].detach().clone()
    opt.step()
    opt.zero_grad(set_to_none=True)
    return {"applied": True, "grad_norm": norm}


# --------------------------------------------------------------------- data


def augment(noisy: np.ndarray, clean: np.ndarray, rng: np.random.Generator,
            channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick a random reference and ``channels - 1`` other microphones in random order.

    Returns ``(noisy[idx], clean[idx[0]])`` so the target always matches input channel 0.
    """
    c_max = noisy.shape[0]
    if not 1 <= channels <= c_max:
        raise ValueError(f"cannot draw {channels} of {c_max} channels")
    ref = int(rng.integers(c_max))
    others = [c for c in range(c_max) if c != ref]
    idx = [ref] + [others[i] for i in rng.permutation(len(others))[: channels - 1]]
    return noisy[idx], clean[idx[0]]


def draw_channels(rng: np.random.Generator, channel_range) -> int:
    lo, hi = channel_range
    return int(rng.integers(lo, hi + 1))


def _segment(rec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    total = rec.noisy.shape[1]
    start = int(rng.integers(0, total - n + 1)) if total > n else 0
    x, y = rec.noisy[:, start:start + n], rec.reverberant_clean[:, start:start + n]
    if x.shape[1] < n:
        pad = ((0, 0), (0, n - x.shape[1]))
        x, y = np.pad(x, pad), np.pad(y, pad)
    return x, y


def make_batch(recs, rng, cfg: TrainConfig, dsp_cfg: DspConfig, dtype=torch.float32):
    """One training batch sharing a channel count drawn from ``cfg.channel_range``."""
    n = int(round(cfg.segment_seconds * dsp_cfg.sample_rate))
    c_max = min(r.channels for r in recs)
    channels = min(draw_channels(rng, cfg.channel_range), c_max)
    xs, ys = [], []
    for rec in recs:
        x, y = _segment(rec, n, rng)
        x, y = augment(x, y, rng, channels)
        xs.append(x)
        ys.append(y)
    x = torch.as_tensor(np.stack(xs), dtype=dtype)
    y = torch.as_tensor(np.stack(ys), dtype=dtype)
    return dsp.stft(x, dsp_cfg), dsp.stft(y, dsp_cfg)


def _fixed_batch(recs, channels: int, dsp_cfg: DspConfig, dtype=torch.float32):
    x = torch.as_tensor(np.stack([r.noisy[:channels] for r in recs]), dtype=dtype)
    y = torch.as_tensor(np.stack([r.reverberant_clean[0] for r in recs]), dtype=dtype)
    return dsp.stft(x, dsp_cfg), dsp.stft(y, dsp_cfg)


# --------------------------------------------------------------------- training loop


def _as_recordings(items):
    """Accept recordings or manifest entries (loaded on demand)."""
    from .roomsim import load_recording

    return [load_recording(it) if isinstance(it, dict) else it for it in items]


@dataclass
class TrainResult:
    model: LABNet
    history: list[dict]
    best_valid: float


def _save_checkpoint(out: Path, model, opt, epoch, history, best_valid):
    save_params(model, out / "last.labnet")
    arrays = {}
    for i, p in enumerate(model.parameters()):
        state = opt.state.get(p, {})
        if state:
            arrays[f"m{i}"] = state["m"].numpy()
            arrays[f"v{i}"] = state["v"].numpy()
            arrays[f"step{i}"] = np.array(state["step"])
    np.savez(out / "last.opt.npz", **arrays)
    (out / "last.json").write_text(json.dumps({"epoch": epoch, "best_valid": best_valid,
                                               "history": history}))


def _load_checkpoint(out: Path, opt, model):
    meta = json.loads((out / "last.json").read_text())
    with np.load(out / "last.opt.npz") as arrays:
        for i, p in enumerate(model.parameters()):
            if f"m{i}" in arrays:
                opt.state[p] = {"step": int(arrays[f"step{i}"]),
                                "m": torch.from_numpy(arrays[f"m{i}"].copy()),
                                "v": torch.from_numpy(arrays[f"v{i}"].copy())}
    return meta


def train_toy(train_recs, model_cfg: ModelConfig, cfg: TrainConfig,
              valid_recs=None, dsp_cfg: DspConfig = DspConfig(), out_dir=None,
              resume: bool = False, epochs: int | None = None) -> TrainResult:
    """Train LABNet on in-memory recordings.

    Each epoch draws its shuffling, segments, channel counts and permutations from
    an RNG seeded with ``(cfg.seed, epoch)``, so a run resumed from its checkpoint
    follows the uninterrupted trajectory.  ``epochs`` stops early (for resumption
    tests) without changing the schedule.
    """
    if not train_recs:
        raise ValueError("training set is empty")
    train_recs = _as_recordings(train_recs)
    valid_recs = _as_recordings(valid_recs) if valid_recs else None
    torch.manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    model = LABNet(model_cfg, dsp_cfg)
    history, best_valid, start = [], math.inf, 0
    opt = AdamW(model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    if resume:
        if not out or not (out / "last.json").exists():
            raise FileNotFoundError(f"no checkpoint to resume in {out_dir}")
        model.load_state_dict(load_params(out / "last.labnet").state_dict())
        meta = _load_checkpoint(out, opt, model)
        history, best_valid, start = meta["history"], meta["best_valid"], meta["epoch"] + 1

    p = dsp_cfg.compress_exp
    valid_batch = None
    if valid_recs:
        valid_batch = _fixed_batch(valid_recs, min(cfg.channel_range[1],
                                                   min(r.channels for r in valid_recs)), dsp_cfg)
    stop = cfg.epochs if epochs is None else min(cfg.epochs, epochs)
    for epoch in range(start, stop):
        rng = np.random.default_rng([cfg.seed, epoch])
        for group in opt.param_groups:
            group["lr"] = cfg.lr(epoch)
        order = rng.permutation(len(train_recs))
        losses = []
        model.train()
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_recs[j] for j in order[i:i + cfg.batch_size]]
            x, y = make_batch(batch, rng, cfg, dsp_cfg)
            tape = Tape(dict(model.named_parameters()))
            with tape:
                loss = mask_loss(model, x, y, p, cfg.alpha, cfg.beta)
            if not torch.isfinite(loss):
                last = [h["train_loss"] for h in history[-3:]]
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; last finite "
                                       f"epoch losses {last}")
            optimizer_step(model, tape.backward(loss), opt, cfg.clip_norm)
            losses.append(float(loss.detach()))
        record = {"epoch": epoch, "lr": cfg.lr(epoch), "train_loss": float(np.mean(losses))}
        if valid_batch is not None:
            model.eval()
            with torch.no_grad():
                record["valid_loss"] = float(mask_loss(model, *valid_batch, p, cfg.alpha, cfg.beta))
        history.append(record)
        log.info("epoch %d %s", epoch, record)
        score = record.get("valid_loss", record["train_loss"])
        if score < best_valid:
            best_valid = score
            if out:
                save_params(model, out / "best.labnet")
        if out:
            _save_checkpoint(out, model, opt, epoch, history, best_valid)
            with open(out / "curves.jsonl", "a" if epoch > 0 else "w") as fh:
                fh.write(json.dumps(record) + "\n")
    model.eval()
    return TrainResult(model, history, best_valid)


# --------------------------------------------------------------------- gradient check


class ActivationSigns:
    """Records which side of zero every PReLU input falls on during a forward pass.

    Two passes with equal signatures lie on the same linear piece of every
    activation, so a finite difference between them sees no kink.
    """

    def __init__(self, model: torch.nn.Module):
        from .model import PReLU

        self._masks: list[torch.Tensor] = []
        self._handles = [m.register_forward_hook(self._hook)
                         for m in model.modules() if isinstance(m, PReLU)]

    def _hook(self, module, inputs, output):
        self._masks.append((inputs[0] >= 0).reshape(-1))

    def __call__(self) -> torch.Tensor:
        """Signature of the passes since the previous call."""
        sig = torch.cat(self._masks) if self._masks else torch.zeros(0, dtype=torch.bool)
        self._masks = []
        return sig

    def close(self):
        for h in self._handles:
            h.remove()


def check_gradients(loss_fn, params: dict[str, torch.Tensor], eps: float = 1e-5,
                    per_tensor: int = 20, seed: int = 0, floor_ratio: float = 1e-3,
                    kink_probe=None, max_tries: int = 20) -> dict[str, float]:
    """Worst relative error between tape gradients and central differences, per tensor.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` equal to
    ``floor_ratio`` times the RMS of the whole analytic gradient, so entries whose
    true gradient is below finite-difference resolution do not dominate.

    ``kink_probe`` (e.g. :class:`ActivationSigns`) returns a signature of the
    piecewise-linear regions visited since it was last called.  Entries whose
    perturbed evaluations change that signature straddle a kink, where the loss
    has no derivative, and are replaced by another draw.
    """
    tape = Tape(params)
    with tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    flat_all = torch.cat([g.reshape(-1) for g in grads.values()])
    floor = floor_ratio * float(flat_all.pow(2).mean().sqrt())
    gen = np.random.default_rng(seed)
    worst = {}
    with torch.no_grad():
        if kink_probe is not None:
            kink_probe()
        loss_fn()
        base = kink_probe() if kink_probe is not None else None
        for name, p in params.items():
            flat = p.view(-1)
            candidates = iter(gen.permutation(flat.numel()))
            err, checked, skipped = 0.0, 0, 0
            while checked < min(per_tensor, flat.numel()) and skipped < max_tries * per_tensor:
                i = next(candidates, None)
                if i is None:
                    break
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                sig_up = kink_probe() if kink_probe is not None else None
                flat[i] = orig - eps
                down = float(loss_fn())
                sig_down = kink_probe() if kink_probe is not None else None
                flat[i] = orig
                if base is not None and not (torch.equal(sig_up, base) and torch.equal(sig_down, base)):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * eps)
                analytic = float(grads[name].view(-1)[i])
                err = max(err, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
                checked += 1
            if skipped:
                log.debug("%s: %d entries straddled a kink", name, skipped)
            worst[name] = err
    return worst


def toy_problem(model_cfg: ModelConfig, channels: int = 2, frames: int = 4, seed: int = 0,
                dsp_cfg: DspConfig = DspConfig()):
    """A float64 model plus random noisy/target spectra for gradient checks."""
    model = LABNet(model_cfg, dsp_cfg).double()
    gen = torch.Generator().manual_seed(seed)
    n = (frames - 1) * dsp_cfg.hop
    x = torch.randn(1, channels, n, generator=gen, dtype=torch.float64) * 0.1
    y = torch.randn(1, n, generator=gen, dtype=torch.float64) * 0.1
    return model, dsp.stft(x, dsp_cfg), dsp.stft(y, dsp_cfg)


def grad_check(model_cfg: ModelConfig = ModelConfig(hidden=8), eps: float = 1e-5,
               per_tensor: int = 20, channels: int = 2, seed: int = 0) -> float:
    """Worst relative gradient error over a random subset of every parameter tensor."""
    model, x, y = toy_problem(model_cfg, channels, seed=seed)
    p = model.dsp.compress_exp
    params = dict(model.named_parameters())
    probe = ActivationSigns(model)
    try:
        worst = check_gradients(lambda: mask_loss(model, x, y, p), params, eps, per_tensor,
                                seed, kink_probe=probe)
    finally:
        probe.close()
    return max(worst.values())
