"""Neural layers used by LABNet.

Functional kernels operate on plain ``torch.Tensor``s; the thin ``nn.Module``
wrappers below own the parameters and, for layers with memory along time,
read/write a :class:`StreamState` so that chunked evaluation matches a single
offline pass.  Reverse-mode gradients come from torch autograd; :class:`Tape`
exposes them per named parameter.

Weight conventions (fixed so that serialized weights are unambiguous):

* ``Linear.weight`` is ``(D_in, D_out)`` and ``y = x @ W + b``.
* GRU weights stack gates in (reset, update, candidate) order:
  ``w_ih (3H, D_in)``, ``w_hh (3H, H)``, ``b_ih (3H,)``, ``b_hh (3H,)`` with
  ``r = sig(W_ir x + b_ir + W_hr h + b_hr)``, ``z = sig(W_iz x + b_iz + W_hz h + b_hz)``,
  ``n = tanh(W_in x + b_in + r * (W_hn h + b_hn))``, ``h' = (1 - z) * n + z * h``.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class ContractError(RuntimeError):
    """A caller violated an operation's preconditions (shapes, call order)."""


# --------------------------------------------------------------------- functional


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = x @ weight
    return y if bias is None else y + bias


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def gru_seq(x, h0, w_ih, w_hh, b_ih, b_hh, reverse=False):
    """Run a GRU over ``x`` of shape ``(N, L, D_in)`` from ``h0`` ``(N, H)``.

    Returns the output sequence ``(N, L, H)`` and the final hidden state.
    """
    if reverse:
        x = x.flip(1)
    out, h_last = torch.gru(x, h0.unsqueeze(0).contiguous(), [w_ih, w_hh, b_ih, b_hh],
                            True, 1, 0.0, False, False, True)
    if reverse:
        out = out.flip(1)
    return out, h_last.squeeze(0)


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """One GRU step; the reference formulation the fused kernel must reproduce."""
    gi = x @ w_ih.T + b_ih
    gh = h @ w_hh.T + b_hh
    i_r, i_z, i_n = gi.chunk(3, -1)
    h_r, h_z, h_n = gh.chunk(3, -1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def conv2d_causal(x, weight, bias=None, stride_f=1, history=None):
    """Convolution over ``(N, D_in, T, F)`` causal in time, 'same'-padded in frequency.

    ``history`` holds the ``k_t - 1`` frames preceding ``x``; zeros when omitted.
    Returns the output and the history to carry into the next chunk.
    """
    k_t, k_f = weight.shape[-2:]
    if history is None:
        history = x.new_zeros(x.shape[0], x.shape[1], k_t - 1, x.shape[3])
    xp = torch.cat([history, x], dim=2)
    new_history = xp[:, :, xp.shape[2] - (k_t - 1):]
    y = F.conv2d(xp, weight, bias, stride=(1, stride_f), padding=(0, (k_f - 1) // 2))
    return y, new_history


def conv_transpose2d_causal(x, weight, bias=None, stride_f=1, history=None):
    """Transposed convolution upsampling frequency by ``stride_f``, causal in time.

    ``weight`` is ``(D_in, D_out, k_t, k_f)``.  For ``k_f = 2p + 1`` and stride 2,
    ``F`` input bins map to ``2F - 1`` output bins.
    """
    k_t, k_f = weight.shape[-2:]
    if history is None:
        history = x.new_zeros(x.shape[0], x.shape[1], k_t - 1, x.shape[3])
    xp = torch.cat([history, x], dim=2)
    new_history = xp[:, :, xp.shape[2] - (k_t - 1):]
    y = F.conv_transpose2d(xp, weight, bias, stride=(1, stride_f), padding=(0, (k_f - 1) // 2))
    # output frame t of the padded input sits at t + k_t - 1; later frames are tails
    return y[:, :, k_t - 1:k_t - 1 + x.shape[2]], new_history


def conv_glu(x, w_a, b_a, w_b, b_b):
    """Pointwise gated unit over the last axis: ``(x W_a + b_a) * sig(x W_b + b_b)``."""
    return linear(x, w_a, b_a) * torch.sigmoid(linear(x, w_b, b_b))


def mha(q, k, v, heads, w_o=None, b_o=None):
    """Multi-head scaled dot-product attention over ``(..., L, D)`` inputs.

    ``q`` is ``(..., L_q, D)``; ``k`` and ``v`` are ``(..., L_k, D)``.  Heads are
    contiguous slices of ``D``; the concatenated heads pass through the output
    projection when one is given.
    """
    d = q.shape[-1]
    if d % heads:
        raise ContractError(f"mha: model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-2, -3)  # (..., H, L, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ vh).transpose(-2, -3).reshape(*q.shape[:-1], d)
    if w_o is not None:
        out = linear(out, w_o, b_o)
    return out


# --------------------------------------------------------------------- state


class StreamState:
    """Per-module memory carried across chunks of a stream.

    Buffers are keyed by the owning module's qualified name.  A fresh state is
    equivalent to the all-zero initial condition used offline.
    """

    def __init__(self, channels: int | None = None):
        self.channels = channels
        self.buffers: dict[str, torch.Tensor] = {}
        self.frames_seen = 0

    def reset(self):
        self.buffers.clear()
        self.frames_seen = 0


class Stateful(nn.Module):
    """Mixin giving a module a key under which it stores stream state."""

    state_key = ""

    def load_state(self, state: StreamState | None):
        return None if state is None else state.buffers.get(self.state_key)

    def save_state(self, state: StreamState | None, value: torch.Tensor):
        if state is not None:
            state.buffers[self.state_key] = value.detach()


def assign_state_keys(root: nn.Module):
    for name, module in root.named_modules():
        if isinstance(module, Stateful):
            module.state_key = name


# --------------------------------------------------------------------- modules


def _uniform(t, bound, gen):
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


class Linear(nn.Module):
    def __init__(self, d_in, d_out, gen=None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.empty(d_out))
        bound = 1.0 / math.sqrt(d_in)
        _uniform(self.weight, bound, gen)
        _uniform(self.bias, bound, gen)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class GRU(nn.Module):
    """Unidirectional GRU parameters (see module docstring for the layout)."""

    def __init__(self, d_in, hidden, gen=None):
        super().__init__()
        self.hidden = hidden
        self.w_ih = nn.Parameter(torch.empty(3 * hidden, d_in))
        self.w_hh = nn.Parameter(torch.empty(3 * hidden, hidden))
        self.b_ih = nn.Parameter(torch.empty(3 * hidden))
        self.b_hh = nn.Parameter(torch.empty(3 * hidden))
        bound = 1.0 / math.sqrt(hidden)
        for p in self.parameters():
            _uniform(p, bound, gen)

    def forward(self, x, h0=None, reverse=False):
        if h0 is None:
            h0 = x.new_zeros(x.shape[0], self.hidden)
        return gru_seq(x, h0, self.w_ih, self.w_hh, self.b_ih, self.b_hh, reverse=reverse)


class TimeGRU(GRU, Stateful):
    """GRU along time whose last hidden state persists across stream chunks."""

    def forward(self, x, state=None):
        y, h_last = super().forward(x, self.load_state(state))
        self.save_state(state, h_last)
        return y


class BiGRUFreq(nn.Module):
    """Bidirectional GRU along the frequency axis of every frame, projected to ``d_out``.

    Input ``(N, L_f, D_in)`` where each row is one frame, so frames never mix.
    """

    def __init__(self, d_in, hidden, d_out, gen=None):
        super().__init__()
        self.fwd = GRU(d_in, hidden, gen)
        self.bwd = GRU(d_in, hidden, gen)
        self.proj = Linear(2 * hidden, d_out, gen)

    def forward(self, x):
        yf, _ = self.fwd(x)
        yb, _ = self.bwd(x, reverse=True)
        return self.proj(torch.cat([yf, yb], dim=-1))


class CausalConv2d(Stateful):
    def __init__(self, d_in, d_out, kernel=(2, 5), stride_f=1, gen=None):
        super().__init__()
        self.stride_f = stride_f
        self.weight = nn.Parameter(torch.empty(d_out, d_in, *kernel))
        self.bias = nn.Parameter(torch.empty(d_out))
        bound = 1.0 / math.sqrt(d_in * kernel[0] * kernel[1])
        _uniform(self.weight, bound, gen)
        _uniform(self.bias, bound, gen)

    def forward(self, x, state=None):
        y, hist = conv2d_causal(x, self.weight, self.bias, self.stride_f, self.load_state(state))
        self.save_state(state, hist)
        return y


class CausalConvTranspose2d(Stateful):
    def __init__(self, d_in, d_out, kernel=(2, 5), stride_f=2, gen=None):
        super().__init__()
        self.stride_f = stride_f
        self.weight = nn.Parameter(torch.empty(d_in, d_out, *kernel))
        self.bias = nn.Parameter(torch.empty(d_out))
        bound = 1.0 / math.sqrt(d_in * kernel[0] * kernel[1])
        _uniform(self.weight, bound, gen)
        _uniform(self.bias, bound, gen)

    def forward(self, x, state=None):
        y, hist = conv_transpose2d_causal(x, self.weight, self.bias, self.stride_f,
                                          self.load_state(state))
        self.save_state(state, hist)
        return y


class ConvGLU(nn.Module):
    def __init__(self, d, gen=None):
        super().__init__()
        self.value = Linear(d, d, gen)
        self.gate = Linear(d, d, gen)

    def forward(self, x):
        return conv_glu(x, self.value.weight, self.value.bias, self.gate.weight, self.gate.bias)


class MultiHeadAttention(nn.Module):
    """Attention with learned output projection; input projections live with the caller."""

    def __init__(self, d, heads, gen=None):
        super().__init__()
        if d % heads:
            raise ContractError(f"hidden dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.out = Linear(d, d, gen)

    def forward(self, q, k, v):
        return mha(q, k, v, self.heads, self.out.weight, self.out.bias)


# --------------------------------------------------------------------- gradients


class Tape:
    """Collects gradients of a scalar loss with respect to named parameters.

    Usage::

        tape = Tape(dict(model.named_parameters()))
        with tape:
            loss = objective(model(x))
        grads = tape.backward(loss)

    A tape can be replayed once; parameters that took no part in the forward
    pass receive zero gradients.
    """

    def __init__(self, params: dict[str, torch.Tensor]):
        self.params = params
        self._recorded = False
        self._consumed = False
        self._grad_mode = None

    def __enter__(self):
        self._grad_mode = torch.is_grad_enabled()
        torch.set_grad_enabled(True)
        for p in self.params.values():
            p.requires_grad_(True)
        self._recorded = True
        return self

    def __exit__(self, *exc):
        torch.set_grad_enabled(self._grad_mode)
        return False

    def backward(self, loss, loss_grad=None) -> dict[str, torch.Tensor]:
        if not self._recorded or loss is None or loss.grad_fn is None:
            raise ContractError("backward called without a recorded forward pass")
        if self._consumed:
            raise ContractError("tape already replayed")
        self._consumed = True
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        grads = torch.autograd.grad(loss, tensors, grad_outputs=loss_grad, allow_unused=True)
        return {n: torch.zeros_like(t) if g is None else g
                for n, t, g in zip(names, tensors, grads)}
