"""Selective state-space sequence modeling.

Continuous dynamics h'(t) = A h(t) + B x(t), y(t) = C h(t) + D x(t) with
diagonal negative-real A, discretized by zero-order hold and driven by
input-dependent (B, C, delta) projections. The recurrence runs in both
sequence directions inside the bidirectional block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class SSMParams:
    """Per-direction state-space parameters.

    A is stored as a_log with A = -exp(a_log), which keeps every entry
    strictly negative (decaying state). delta comes out of a softplus and is
    therefore strictly positive.
    """

    a_log: Tensor          # [d_inner, n_state]
    d_skip: Tensor         # [d_inner]
    b_c_proj: Tensor       # [d_inner, dt_rank + 2 * n_state]
    dt_proj: Tensor        # [dt_rank, d_inner]
    dt_bias: Tensor        # [d_inner]
    dt_rank: int

    @property
    def n_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]


@dataclass
class DirectionParams:
    conv_kernel: Tensor    # [d_inner, k_conv]
    conv_bias: Tensor      # [d_inner]
    ssm: SSMParams


@dataclass
class MambaBlockParams:
    """Bidirectional block: shared in/out projections and gate, independent
    per-direction conv + SSM parameters."""

    pre_norm: Tensor       # [d_model]
    in_proj: Tensor        # [d_model, 2 * d_inner]
    forward_dir: DirectionParams
    backward_dir: DirectionParams
    out_proj: Tensor       # [d_inner, d_model]

    @property
    def d_model(self) -> int:
        return self.pre_norm.shape[0]

    @property
    def d_inner(self) -> int:
        return self.out_proj.shape[0]


def default_dt_rank(d_model: int) -> int:
    return math.ceil(d_model / 16)


def init_ssm_params(rng: np.random.Generator, d_inner: int, n_state: int, dt_rank: int,
                    dtype=np.float32) -> SSMParams:
    # S4D-real style A: channel-constant spectrum 1..n_state
    a_log = np.log(np.arange(1, n_state + 1, dtype=np.float64))
    a_log = np.broadcast_to(a_log, (d_inner, n_state)).astype(dtype)

    bound = 1.0 / math.sqrt(d_inner)
    b_c_proj = rng.uniform(-bound, bound, size=(d_inner, dt_rank + 2 * n_state)).astype(dtype)

    dt_scale = dt_rank**-0.5
    dt_proj = rng.uniform(-dt_scale, dt_scale, size=(dt_rank, d_inner)).astype(dtype)
    # bias chosen so softplus(dt_bias) lands log-uniformly in [1e-3, 0.1]
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(0.1), size=d_inner))
    dt_bias = (dt + np.log(-np.expm1(-dt))).astype(dtype)

    return SSMParams(
        a_log=Tensor(a_log, requires_grad=True),
        d_skip=Tensor(np.ones(d_inner, dtype=dtype), requires_grad=True),
        b_c_proj=Tensor(b_c_proj, requires_grad=True),
        dt_proj=Tensor(dt_proj, requires_grad=True),
        dt_bias=Tensor(dt_bias, requires_grad=True),
        dt_rank=dt_rank,
    )


def _init_direction(rng: np.random.Generator, d_inner: int, n_state: int, dt_rank: int,
                    k_conv: int, dtype) -> DirectionParams:
    bound = 1.0 / math.sqrt(k_conv)
    kernel = rng.uniform(-bound, bound, size=(d_inner, k_conv)).astype(dtype)
    return DirectionParams(
        conv_kernel=Tensor(kernel, requires_grad=True),
        conv_bias=Tensor(np.zeros(d_inner, dtype=dtype), requires_grad=True),
        ssm=init_ssm_params(rng, d_inner, n_state, dt_rank, dtype=dtype),
    )


def init_mamba_block(rng: np.random.Generator, d_model: int, expand_factor: int = 2,
                     n_state: int = 16, dt_rank: Optional[int] = None, k_conv: int = 4,
                     dtype=np.float32) -> MambaBlockParams:
    d_inner = expand_factor * d_model
    if dt_rank is None:
        dt_rank = default_dt_rank(d_model)
    b_in = 1.0 / math.sqrt(d_model)
    b_out = 1.0 / math.sqrt(d_inner)
    return MambaBlockParams(
        pre_norm=Tensor(np.ones(d_model, dtype=dtype), requires_grad=True),
        in_proj=Tensor(rng.uniform(-b_in, b_in, size=(d_model, 2 * d_inner)).astype(dtype), requires_grad=True),
        forward_dir=_init_direction(rng, d_inner, n_state, dt_rank, k_conv, dtype),
        backward_dir=_init_direction(rng, d_inner, n_state, dt_rank, k_conv, dtype),
        out_proj=Tensor(rng.uniform(-b_out, b_out, size=(d_inner, d_model)).astype(dtype), requires_grad=True),
    )


# -- discretization -----------------------------------------------------------


def discretize(delta: Tensor, a: Tensor, b: Tensor, exact: bool = True):
    """Zero-order-hold discretization for diagonal A.

    a_bar = exp(delta * a); b_bar = ((exp(delta * a) - 1) / a) * b elementwise.
    With exact=False, b_bar falls back to the first-order simplification
    delta * b used by common selective-scan implementations.

    delta: [B, L, d_inner], a: [d_inner, n_state], b: [B, L, n_state].
    Returns (a_bar, b_bar), both [B, L, d_inner, n_state].
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    bsz, length, d_inner = delta.shape
    n_state = a.shape[1]
    d4 = T.reshape(delta, (bsz, length, d_inner, 1))
    b4 = T.reshape(b, (bsz, length, 1, n_state))
    da = T.mul(d4, a)
    a_bar = T.exp(da)
    if exact:
        b_bar = T.mul(T.div(T.expm1(da), a), b4)
    else:
        b_bar = T.mul(d4, b4)
    return a_bar, b_bar


# -- the scan -----------------------------------------------------------------


def _scan_sequential(a_bar: np.ndarray, u: np.ndarray) -> np.ndarray:
    bsz, length = a_bar.shape[:2]
    h = np.empty_like(u)
    state = np.zeros_like(u[:, 0])
    for t in range(length):
        state = a_bar[:, t] * state + u[:, t]
        h[:, t] = state
    return h


def _scan_blelloch(a_bar: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Work-efficient parallel prefix over the affine maps h -> a*h + u.

    combine(p, q) applies p first: (a, b) = (a_q * a_p, a_q * b_p + b_q).
    The down-sweep leaves the exclusive prefix at each slot; one final
    application of the local map yields the inclusive states.
    """
    length = a_bar.shape[1]
    size = 1 if length == 1 else 1 << (length - 1).bit_length()
    shape = (a_bar.shape[0], size) + a_bar.shape[2:]
    aw = np.ones(shape, dtype=a_bar.dtype)
    bw = np.zeros(shape, dtype=u.dtype)
    aw[:, :length] = a_bar
    bw[:, :length] = u

    step = 1
    while step < size:
        hi = np.arange(2 * step - 1, size, 2 * step)
        lo = hi - step
        bw[:, hi] = aw[:, hi] * bw[:, lo] + bw[:, hi]
        aw[:, hi] = aw[:, hi] * aw[:, lo]
        step *= 2

    aw[:, size - 1] = 1.0
    bw[:, size - 1] = 0.0
    step = size // 2
    while step >= 1:
        hi = np.arange(2 * step - 1, size, 2 * step)
        lo = hi - step
        ta = aw[:, lo].copy()
        tb = bw[:, lo].copy()
        aw[:, lo] = aw[:, hi]
        bw[:, lo] = bw[:, hi]
        bw[:, hi] = ta * bw[:, hi] + tb
        aw[:, hi] = ta * aw[:, hi]
        step //= 2

    return a_bar * bw[:, :length] + u


def scan_affine(a_bar: Tensor, u: Tensor, method: str = "sequential") -> Tensor:
    """Recurrence h_t = a_bar_t * h_{t-1} + u_t with h_0 = 0, over axis 1.

    `method` selects the forward algorithm (sequential recurrence or the
    associative Blelloch scan); both compute the same states. The adjoint is
    a single reverse recurrence either way.
    """
    if a_bar.shape != u.shape:
        raise ValueError(f"scan_affine: shape mismatch {a_bar.shape} vs {u.shape}")
    if method == "sequential":
        h = _scan_sequential(a_bar.data, u.data)
    elif method == "associative":
        h = _scan_blelloch(a_bar.data, u.data)
    else:
        raise ValueError(f"scan_affine: unknown method {method!r}")

    def vjp(g):
        length = g.shape[1]
        da = np.empty_like(a_bar.data)
        du = np.empty_like(u.data)
        carry = np.zeros_like(g[:, 0])
        for t in range(length - 1, -1, -1):
            lam = g[:, t] + carry
            du[:, t] = lam
            da[:, t] = lam * (h[:, t - 1] if t > 0 else 0.0)
            carry = a_bar.data[:, t] * lam
        return (da, du)

    return T._node(h, (a_bar, u), vjp)


def selective_scan(x: Tensor, delta: Tensor, b_seq: Tensor, c_seq: Tensor,
                   params: SSMParams, method: str = "sequential",
                   exact_zoh: bool = True) -> Tensor:
    """Run the discretized state recurrence and project states to outputs.

    x, delta: [B, L, d_inner]; b_seq, c_seq: [B, L, n_state].
    y_t = <c_t, h_t> + d_skip * x_t with h_t = a_bar_t * h_{t-1} + b_bar_t * x_t.
    """
    bsz, length, d_inner = x.shape
    n_state = params.n_state
    if delta.shape != x.shape:
        raise ValueError(f"selective_scan: delta shape {delta.shape} != x shape {x.shape}")
    if b_seq.shape != (bsz, length, n_state) or c_seq.shape != (bsz, length, n_state):
        raise ValueError(
            f"selective_scan: B/C shapes {b_seq.shape}/{c_seq.shape} incompatible with "
            f"(batch={bsz}, length={length}, n_state={n_state})"
        )
    a = T.neg(T.exp(params.a_log))
    a_bar, b_bar = discretize(delta, a, b_seq, exact=exact_zoh)
    u = T.mul(b_bar, T.reshape(x, (bsz, length, d_inner, 1)))
    h = scan_affine(a_bar, u, method=method)
    y = T.tsum(T.mul(h, T.reshape(c_seq, (bsz, length, 1, n_state))), axis=-1)
    return T.add(y, T.mul(x, params.d_skip))


def input_dependent_params(tokens: Tensor, params: SSMParams):
    """Token-wise (delta, B, C) via linear projection; delta through softplus."""
    proj = T.matmul(tokens, params.b_c_proj)
    r = params.dt_rank
    n = params.n_state
    dt_in = proj[..., :r]
    b_seq = proj[..., r : r + n]
    c_seq = proj[..., r + n :]
    delta = T.softplus(T.add(T.matmul(dt_in, params.dt_proj), params.dt_bias))
    return delta, b_seq, c_seq


# -- the bidirectional block ----------------------------------------------------


def _direction_output(x: Tensor, d: DirectionParams, method: str, exact_zoh: bool) -> Tensor:
    xa = T.silu(T.depthwise_causal_conv1d(x, d.conv_kernel, d.conv_bias))
    delta, b_seq, c_seq = input_dependent_params(xa, d.ssm)
    return selective_scan(xa, delta, b_seq, c_seq, d.ssm, method=method, exact_zoh=exact_zoh)


def mamba_block_forward(tokens: Tensor, params: MambaBlockParams,
                        method: str = "sequential", exact_zoh: bool = True) -> Tensor:
    """Pre-norm bidirectional block with gated fusion and residual.

    Forward branch scans the sequence as-is; the backward branch scans the
    reversed sequence with its own parameters and is re-reversed. The two
    outputs are summed, gated by silu of the shared gate path, projected
    back to d_model, and added to the input.
    """
    d_inner = params.d_inner
    u = T.rms_norm(tokens, params.pre_norm)
    xz = T.matmul(u, params.in_proj)
    x = xz[..., :d_inner]
    z = xz[..., d_inner:]
    y_f = _direction_output(x, params.forward_dir, method, exact_zoh)
    y_b = T.flip(_direction_output(T.flip(x, axis=1), params.backward_dir, method, exact_zoh), axis=1)
    y = T.mul(T.add(y_f, y_b), T.silu(z))
    return T.add(tokens, T.matmul(y, params.out_proj))
