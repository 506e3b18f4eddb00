"""LABNet: shared per-channel encoder, three-stage dual-path/cross-channel
processing and a mask decoder for the reference (first) channel.

Hidden tensors are channels-last inside the network: ``(B, C, T, F', D)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import dsp
from .dsp import DspConfig
from .kernels import (BiGRUFreq, CausalConv2d, CausalConvTranspose2d, ContractError, ConvGLU,
                      LayerNorm, Linear, MultiHeadAttention, StreamState, TimeGRU,
                      assign_state_keys)

AGGREGATORS = ("cca", "tac")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 16            # D
    freq_hidden: int = 24       # per-direction width of the frequency Bi-GRU
    time_hidden: int = 32       # width of the temporal GRU
    kernel_t: int = 2
    kernel_f: int = 5
    enc_layers: int = 2         # each halves the frequency axis (257 -> 129 -> 65)
    heads: int = 4
    aggregator: str = "cca"
    stage1: bool = True
    stage2: bool = True
    stage3: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.kernel_f % 2 == 0:
            raise ValueError("kernel_f must be odd")

    def reduced_bins(self, n_freqs: int) -> int:
        f = n_freqs
        for _ in range(self.enc_layers):
            f = (f - 1) // 2 + 1
        return f


ABLATIONS = {
    "full": {},
    "no-stage1": {"stage1": False},
    "no-stage2": {"stage2": False},
    "no-stage3": {"stage3": False},
    "tac": {"aggregator": "tac"},
}


def ablated(cfg: ModelConfig, name: str) -> ModelConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return ModelConfig(**{**asdict(cfg), **ABLATIONS[name]})


class PReLU(nn.Module):
    def __init__(self, d, dim=-1):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.full((d,), 0.25))

    def forward(self, x):
        shape = [1] * x.ndim
        shape[self.dim] = -1
        return torch.where(x >= 0, x, self.weight.view(shape) * x)


# --------------------------------------------------------------------- blocks


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        k = (cfg.kernel_t, cfg.kernel_f)
        dims = [3] + [cfg.hidden] * cfg.enc_layers
        self.convs = nn.ModuleList(CausalConv2d(a, b, k, stride_f=2, gen=gen)
                                   for a, b in zip(dims[:-1], dims[1:]))
        self.acts = nn.ModuleList(PReLU(cfg.hidden, dim=1) for _ in range(cfg.enc_layers))

    def forward(self, x, state=None):
        for conv, act in zip(self.convs, self.acts):
            x = act(conv(x, state))
        return x


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        k = (cfg.kernel_t, cfg.kernel_f)
        self.deconvs = nn.ModuleList(CausalConvTranspose2d(cfg.hidden, cfg.hidden, k, 2, gen)
                                     for _ in range(cfg.enc_layers))
        self.acts = nn.ModuleList(PReLU(cfg.hidden, dim=1) for _ in range(cfg.enc_layers))
        self.head = Linear(cfg.hidden, 1, gen)

    def forward(self, h, state=None):
        """``(B, T, F', D)`` hidden -> ``(B, T, F)`` mask in (0, 1)."""
        x = h.permute(0, 3, 1, 2)
        for deconv, act in zip(self.deconvs, self.acts):
            x = act(deconv(x, state))
        return torch.sigmoid(self.head(x.permute(0, 2, 3, 1)).squeeze(-1))


class DPR(nn.Module):
    """Frequency Bi-GRU, temporal GRU and ConvGLU, each pre-normed with a residual."""

    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        d = cfg.hidden
        self.norm_f = LayerNorm(d)
        self.freq = BiGRUFreq(d, cfg.freq_hidden, d, gen)
        self.norm_t = LayerNorm(d)
        self.time = TimeGRU(d, cfg.time_hidden, gen)
        self.time_proj = Linear(cfg.time_hidden, d, gen)
        self.norm_g = LayerNorm(d)
        self.glu = ConvGLU(d, gen)

    def forward(self, h, state=None):
        n, t, f, d = h.shape
        z = self.freq(self.norm_f(h).reshape(n * t, f, d))
        h = h + z.reshape(n, t, f, d)
        z = self.norm_t(h).transpose(1, 2).reshape(n * f, t, d)
        z = self.time_proj(self.time(z, state))
        h = h + z.reshape(n, f, t, d).transpose(1, 2)
        return h + self.glu(self.norm_g(h))


class CCA(nn.Module):
    """Cross-channel attention: the reference channel queries all channels."""

    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        d = cfg.hidden
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.q = Linear(d, d, gen)
        self.k = Linear(d, d, gen)
        self.v = Linear(d, d, gen)
        self.attn = MultiHeadAttention(d, cfg.heads, gen)

    def forward(self, h_all):
        """``(B, C, T, F', D)`` -> ``(B, T, F', D)``."""
        ref = h_all[:, 0]
        q = self.q(self.norm_q(ref)).unsqueeze(-2)
        kv = self.norm_kv(h_all).permute(0, 2, 3, 1, 4)  # (B, T, F', C, D)
        out = self.attn(q, self.k(kv), self.v(kv)).squeeze(-2)
        return out + ref


class TAC(nn.Module):
    """Transform-average-concatenate aggregation collapsed onto the reference channel."""

    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        d = cfg.hidden
        self.norm = LayerNorm(d)
        self.transform = Linear(d, d, gen)
        self.act_t = PReLU(d)
        self.average = Linear(d, d, gen)
        self.act_a = PReLU(d)
        self.concat = Linear(2 * d, d, gen)

    def forward(self, h_all):
        ref = h_all[:, 0]
        p = self.act_t(self.transform(self.norm(h_all)))
        a = self.act_a(self.average(p.mean(dim=1)))
        return self.concat(torch.cat([p[:, 0], a], dim=-1)) + ref


def _aggregator(cfg, gen):
    return CCA(cfg, gen) if cfg.aggregator == "cca" else TAC(cfg, gen)


class ThreeStage(nn.Module):
    """Channel-wise processing, pair-wise alignment and post refinement.

    Disabled stages pass the reference path through unchanged.
    """

    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        if cfg.stage1:
            self.dpr1 = DPR(cfg, gen)
            self.agg1 = _aggregator(cfg, gen)
        if cfg.stage2:
            self.pair = Linear(2 * cfg.hidden, cfg.hidden, gen)
            self.dpr2 = DPR(cfg, gen)
            self.agg2 = _aggregator(cfg, gen)
        if cfg.stage3:
            self.dpr3 = DPR(cfg, gen)

    def forward(self, h_e, state=None):
        b, c, t, f, d = h_e.shape
        if self.cfg.stage1:
            h_s1 = self.dpr1(h_e.reshape(b * c, t, f, d), state).reshape(b, c, t, f, d)
            h_r = self.agg1(h_s1)
        else:
            h_s1, h_r = h_e, h_e[:, 0]
        if self.cfg.stage2:
            # concatenation order (fused reference, channel) is part of the weight layout
            pairs = torch.cat([h_r.unsqueeze(1).expand(b, c, t, f, d), h_s1], dim=-1)
            h_p = self.dpr2(self.pair(pairs).reshape(b * c, t, f, d), state)
            h_s2 = self.agg2(h_p.reshape(b, c, t, f, d))
        else:
            h_s2 = h_r
        return self.dpr3(h_s2, state) if self.cfg.stage3 else h_s2


class LABNet(nn.Module):
    """Feature tensor ``(B, C, 3, T, F)`` -> reference-channel mask ``(B, T, F)``.

    All channel paths share weights, so the parameter set is independent of ``C``.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), dsp_cfg: DspConfig = DspConfig()):
        super().__init__()
        self.config = cfg
        self.dsp = dsp_cfg
        self.n_freqs = dsp_cfg.n_freqs
        self.n_reduced = cfg.reduced_bins(self.n_freqs)
        if 2 ** cfg.enc_layers * (self.n_reduced - 1) + 1 != self.n_freqs:
            raise ValueError(f"{self.n_freqs} bins cannot be halved {cfg.enc_layers} times exactly")
        gen = torch.Generator().manual_seed(cfg.seed)
        self.encoder = Encoder(cfg, gen)
        self.stages = ThreeStage(cfg, gen)
        self.decoder = Decoder(cfg, gen)
        assign_state_keys(self)

    def encode(self, feats, state=None):
        b, c, m, t, f = feats.shape
        h = self.encoder(feats.reshape(b * c, m, t, f), state)
        return h.reshape(b, c, *h.shape[1:]).permute(0, 1, 3, 4, 2)  # (B, C, T, F', D)

    def forward(self, feats, state: StreamState | None = None):
        if feats.shape[1] < 1:
            raise ContractError("at least one channel is required")
        return self.decoder(self.stages(self.encode(feats, state), state), state)


# --------------------------------------------------------------------- pipeline


def spec_features(spec: torch.Tensor, p: float, prev_phase=None) -> torch.Tensor:
    """``(..., F, T)`` complex -> ``(..., 3, T, F)`` (compressed magnitude, time PD, freq PD)."""
    mag_c, _ = dsp.compress(spec, p)
    pd_t, pd_f = dsp.phase_features(spec, prev_phase)
    return torch.stack([mag_c, pd_t, pd_f], dim=-3).transpose(-1, -2)


def _check_recording(noisy) -> torch.Tensor:
    noisy = dsp._as_tensor(noisy)
    if noisy.ndim == 1:
        noisy = noisy.unsqueeze(0)
    if noisy.ndim != 2:
        raise dsp.InputError(f"expected (channels, samples) audio, got shape {tuple(noisy.shape)}")
    if noisy.shape[0] < 1:
        raise dsp.InputError("at least one channel is required")
    return noisy.to(torch.float32)


def extract_features(noisy, cfg: DspConfig = DspConfig()) -> torch.Tensor:
    """``(C, N)`` waveforms (channel 0 = reference) -> feature tensor ``(C, 3, T, F)``."""
    if isinstance(noisy, (list, tuple)):
        lengths = {len(ch) for ch in noisy}
        if len(lengths) != 1:
            raise dsp.InputError(f"channels have unequal lengths {sorted(lengths)}")
        noisy = torch.stack([dsp._as_tensor(ch).to(torch.float32) for ch in noisy])
    noisy = _check_recording(noisy)
    return spec_features(dsp.stft(noisy, cfg), cfg.compress_exp)


def masked_reference(spec_ref: torch.Tensor, mask_tf: torch.Tensor, p: float) -> torch.Tensor:
    """Decompressed estimated magnitude ``(..., F, T)`` from a ``(..., T, F)`` mask."""
    mag_c, _ = dsp.compress(spec_ref, p)
    return dsp.decompress(mask_tf.transpose(-1, -2) * mag_c, p)


@torch.no_grad()
def enhance(noisy, model: LABNet, cfg: DspConfig | None = None, mask_override=None) -> torch.Tensor:
    """Enhance the reference channel of a ``(C, N)`` recording; returns ``(N,)``."""
    cfg = cfg or model.dsp
    noisy = _check_recording(noisy)
    n = noisy.shape[-1]
    spec = dsp.stft(noisy, cfg)
    if mask_override is None:
        mask = model(spec_features(spec, cfg.compress_exp).unsqueeze(0))[0]
    else:
        mask = torch.as_tensor(mask_override, dtype=torch.float32).expand(spec.shape[-1], spec.shape[-2])
    est_mag = masked_reference(spec[0], mask, cfg.compress_exp)
    est = dsp.griffin_lim(est_mag, torch.angle(spec[0]), cfg.gla_iters, cfg)
    return dsp.istft(est, cfg, length=n)


# --------------------------------------------------------------------- streaming


class _GLAStage:
    """One Griffin-Lim round on a frame stream; emits frame t once frame t+1 arrives."""

    def __init__(self, cfg: DspConfig):
        self.cfg = cfg
        self.win = dsp.window(cfg)
        self.env = (self.win[: cfg.hop] ** 2 + self.win[cfg.hop:] ** 2)
        self.frames: list[tuple[torch.Tensor, torch.Tensor]] = []  # (mag, time-domain frame)
        self.count = 0

    def push(self, mag, phase):
        frame = torch.fft.irfft(torch.polar(mag, phase), n=self.cfg.win_len) * self.win
        self.frames.append((mag, frame))
        self.count += 1
        if self.count < 2:
            return None
        t = self.count - 2  # frame being re-analysed
        hop = self.cfg.hop
        prev = self.frames[-3][1] if len(self.frames) >= 3 else None
        cur, nxt = self.frames[-2][1], self.frames[-1][1]
        head = cur[:hop] + (prev[hop:] if prev is not None else 0.0)
        head_env = self.env if t > 0 else self.win[:hop] ** 2
        head = head / head_env.clamp_min(dsp.ENV_FLOOR)
        tail = (cur[hop:] + nxt[:hop]) / self.env
        seg = torch.cat([head, tail]) * self.win
        phase_new = torch.angle(torch.fft.rfft(seg, n=self.cfg.win_len))
        mag_t = self.frames[-2][0]
        self.frames = self.frames[-2:]
        return mag_t, phase_new


class StreamingEnhancer:
    """Hop-in/hop-out LABNet enhancement.

    The output is the offline :func:`enhance` result delayed by exactly
    ``cfg.latency_samples`` (64 ms with the default configuration); the first
    ``latency_samples // hop`` blocks are warm-up silence.
    """

    def __init__(self, model: LABNet, channels: int, cfg: DspConfig | None = None):
        self.model = model
        self.cfg = cfg or model.dsp
        self.channels = channels
        if self.cfg.latency_samples % self.cfg.hop:
            raise ContractError("latency must be a whole number of hops")
        self.reset()

    def reset(self):
        cfg = self.cfg
        self.state = StreamState(self.channels)
        self.buffer = torch.zeros(self.channels, 0)
        self.prev_phase = None
        self.gla = [_GLAStage(cfg) for _ in range(cfg.gla_iters)]
        self.win = dsp.window(cfg)
        self.env = self.win[: cfg.hop] ** 2 + self.win[cfg.hop:] ** 2
        self.last_frame = None
        self.n_final = 0
        self.ready: list[torch.Tensor] = []
        self.blocks_in = 0
        self.delay_blocks = cfg.latency_samples // cfg.hop

    @torch.no_grad()
    def process(self, block) -> torch.Tensor:
        cfg = self.cfg
        block = dsp._as_tensor(block).to(torch.float32)
        if block.ndim == 1:
            block = block.unsqueeze(0)
        if block.shape[0] != self.channels:
            raise ContractError(f"stream was initialised with {self.channels} channels, got "
                                f"{block.shape[0]}; call reset() with a new enhancer")
        if block.shape[1] != cfg.hop:
            raise ContractError(f"blocks must hold exactly {cfg.hop} samples")
        if not torch.isfinite(block).all():
            raise dsp.InputError("block contains non-finite samples")
        self.buffer = torch.cat([self.buffer, block], dim=1)[:, -cfg.win_len:]
        self.blocks_in += 1
        if self.buffer.shape[1] == cfg.win_len:
            self._analyse(self.buffer)
        out_index = self.blocks_in - 1 - self.delay_blocks
        if out_index < 0:
            return torch.zeros(cfg.hop)
        return self.ready[out_index]

    def _analyse(self, seg):
        cfg = self.cfg
        spec = torch.fft.rfft(seg * self.win, n=cfg.win_len).unsqueeze(-1)  # (C, F, 1)
        feats = spec_features(spec, cfg.compress_exp, self.prev_phase)
        self.prev_phase = dsp.safe_angle(spec[..., 0])
        mask = self.model(feats.unsqueeze(0), self.state)[0]  # (1, F)
        mag = masked_reference(spec[0], mask, cfg.compress_exp)[:, 0]
        item = (mag, torch.angle(spec[0, :, 0]))
        for stage in self.gla:
            item = stage.push(*item)
            if item is None:
                return
        self._synthesise(*item)

    def _synthesise(self, mag, phase):
        cfg = self.cfg
        frame = torch.fft.irfft(torch.polar(mag, phase), n=cfg.win_len) * self.win
        if self.last_frame is None:
            env = self.win[: cfg.hop] ** 2
            out = frame[: cfg.hop] / env.clamp_min(dsp.ENV_FLOOR)
        else:
            out = (frame[: cfg.hop] + self.last_frame[cfg.hop:]) / self.env
        self.last_frame = frame
        self.ready.append(out)


def enhance_stream(noisy, model: LABNet, cfg: DspConfig | None = None, flush: bool = True):
    """Run :class:`StreamingEnhancer` over a whole ``(C, N)`` recording.

    Returns the raw stream output (including warm-up); with ``flush`` the input
    is padded with enough silence to drain the pipeline.
    """
    cfg = cfg or model.dsp
    noisy = _check_recording(noisy)
    c, n = noisy.shape
    extra = cfg.latency_samples + cfg.hop if flush else 0
    total = -(-(n + extra) // cfg.hop) * cfg.hop
    padded = torch.nn.functional.pad(noisy, (0, total - n))
    streamer = StreamingEnhancer(model, c, cfg)
    out = [streamer.process(padded[:, i:i + cfg.hop]) for i in range(0, total, cfg.hop)]
    return torch.cat(out)
