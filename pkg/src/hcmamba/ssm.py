"""State-space sequence models: ZOH discretization and the S6 selective scan.

Two evaluation routes exist for a fixed discrete SSM, the sequential
recurrence and the causal convolution with the kernel
``K = (C B̄, C Ā B̄, ..., C Ā^{L-1} B̄)``; they must agree to round-off.

The selective scan used inside the network is a single fused autodiff node
(:func:`selective_scan_core`) whose state sequence is materialised time-major
so both the forward and the adjoint recurrences are one numpy op per step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, linear, matmul, softplus, stack, tsum
from .errors import DimensionError, DomainError

SERIES_THRESHOLD = 1e-8


@dataclass
class ContinuousSSM:
    """Diagonal continuous system ``h' = A h + B x``, ``y = C h + D x``."""

    A: np.ndarray  # [N] diagonal, strictly negative
    B: np.ndarray  # [N]
    C: np.ndarray  # [N]
    D: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        self.B = np.broadcast_to(np.asarray(self.B, dtype=np.float64), self.A.shape).copy()
        self.C = np.broadcast_to(np.asarray(self.C, dtype=np.float64), self.A.shape).copy()
        if self.A.ndim != 1 or self.A.size < 1:
            raise DimensionError(f"state diagonal must be a non-empty vector, got shape {self.A.shape}")
        if np.any(self.A >= 0):
            raise DomainError("diagonal of A must be strictly negative")

    @property
    def state_size(self) -> int:
        return self.A.size


@dataclass
class DiscreteSSM:
    A_bar: np.ndarray  # [N]
    B_bar: np.ndarray  # [N]
    C: np.ndarray  # [N]
    D: float = 0.0
    delta: float | None = None

    def __post_init__(self):
        self.A_bar = np.atleast_1d(np.asarray(self.A_bar, dtype=np.float64))
        shape = self.A_bar.shape
        self.B_bar = np.broadcast_to(np.asarray(self.B_bar, dtype=np.float64), shape).copy()
        self.C = np.broadcast_to(np.asarray(self.C, dtype=np.float64), shape).copy()

    @property
    def state_size(self) -> int:
        return self.A_bar.size

    @property
    def stable(self) -> bool:
        return bool(np.all(np.abs(self.A_bar) < 1))


def zoh_input_factor(a, delta):
    """``(exp(delta*a) - 1) / a`` elementwise.

    For ``|delta*a| < SERIES_THRESHOLD`` the series ``delta * (1 + delta*a/2)``
    is used; its truncation error is below 1e-16 relative there, and it covers
    ``a = 0``.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = delta * a
    small = np.abs(z) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    return np.where(small, delta * (1.0 + 0.5 * z), np.expm1(z) / safe_a)


def discretize_zoh(ssm: ContinuousSSM, delta: float) -> DiscreteSSM:
    """Zero-order hold: ``Ā = exp(ΔA)``, ``B̄ = (ΔA)^{-1}(exp(ΔA) - I) ΔB``."""
    if not delta > 0:
        raise DomainError(f"step size must be positive, got {delta}")
    A_bar = np.exp(delta * ssm.A)
    B_bar = zoh_input_factor(ssm.A, delta) * ssm.B
    return DiscreteSSM(A_bar=A_bar, B_bar=B_bar, C=ssm.C.copy(), D=ssm.D, delta=float(delta))


def _check_sequence(x: Tensor) -> None:
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D sequence, got shape {x.shape}")
    if x.shape[0] == 0:
        raise DomainError("empty sequence")


def scan_recurrent(ssm: DiscreteSSM, x) -> Tensor:
    """``h_t = Ā h_{t-1} + B̄ x_t``, ``y_t = C·h_t + D x_t`` with ``h_0 = 0``.

    Written with elementary tensor ops so it is differentiable in ``x`` and
    serves as an independent reference for the fused selective scan.
    """
    x = as_tensor(x)
    _check_sequence(x)
    dtype = x.dtype
    a_bar = Tensor(ssm.A_bar, dtype=dtype)
    b_bar = Tensor(ssm.B_bar, dtype=dtype)
    c = Tensor(ssm.C, dtype=dtype)
    h = Tensor(np.zeros(ssm.state_size), dtype=dtype)
    ys = []
    for t in range(x.shape[0]):
        xt = x[t]
        h = a_bar * h + b_bar * xt
        ys.append(tsum(c * h) + ssm.D * xt)
    return stack(ys)


def ssm_kernel(ssm: DiscreteSSM, length: int) -> np.ndarray:
    """``K[k] = Σ_n C_n Ā_n^k B̄_n`` for ``k < length``."""
    powers = ssm.A_bar[None, :] ** np.arange(length)[:, None]
    return powers @ (ssm.C * ssm.B_bar)


def scan_convolutional(ssm: DiscreteSSM, x) -> Tensor:
    """Causal convolution ``y = x * K + D x`` through a lower-triangular Toeplitz matrix."""
    x = as_tensor(x)
    _check_sequence(x)
    L = x.shape[0]
    kernel = ssm_kernel(ssm, L)
    lag = np.arange(L)[:, None] - np.arange(L)[None, :]
    toeplitz = np.where(lag >= 0, kernel[np.clip(lag, 0, None)], 0.0)
    toeplitz[np.diag_indices(L)] += ssm.D
    y = matmul(Tensor(toeplitz, dtype=x.dtype), x.reshape(L, 1))
    return y.reshape(L)


# -- selective scan ---------------------------------------------------------

def selective_scan_core(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                        D: Tensor) -> Tensor:
    """Fused S6 recurrence with input-dependent parameters.

    Shapes: ``u, delta: [..., L, E]``; ``B, C: [..., L, N]``; ``A: [E, N]``;
    ``D: [E]``. Per channel ``e`` and step ``t``::

        h_t = exp(delta_t A_e) * h_{t-1} + delta_t B_t u_t
        y_t = C_t · h_t + D_e u_t

    The input term uses ``B̄_t = delta_t B_t`` (the small-step form of the ZOH
    input integral).
    """
    *lead, L, E = u.shape
    N = A.shape[-1]
    if L < 1:
        raise DomainError("empty sequence")
    if delta.shape != u.shape:
        raise DimensionError(f"delta shape {delta.shape} != input shape {u.shape}")
    if B.shape != (*lead, L, N) or C.shape != (*lead, L, N):
        raise DimensionError(f"B {B.shape} / C {C.shape} must be {(*lead, L, N)}")
    if A.shape != (E, N) or D.shape != (E,):
        raise DimensionError(f"A {A.shape} must be {(E, N)} and D {D.shape} must be {(E,)}")

    # contiguous time-major copies so each step slice is one block of memory
    ut = np.ascontiguousarray(np.moveaxis(u.data, -2, 0))      # [L, ..., E]
    dt = np.ascontiguousarray(np.moveaxis(delta.data, -2, 0))
    Bt = np.ascontiguousarray(np.moveaxis(B.data, -2, 0))      # [L, ..., N]
    Ct = np.ascontiguousarray(np.moveaxis(C.data, -2, 0))
    Ad = A.data
    du = dt * ut
    dA = dt[..., None] * Ad                                     # [L, ..., E, N]
    np.exp(dA, out=dA)
    hs = du[..., None] * Bt[..., None, :]                       # input term, then states
    tmp = np.empty_like(hs[0])
    for t in range(1, L):
        np.multiply(dA[t], hs[t - 1], out=tmp)
        hs[t] += tmp
    y = (hs @ Ct[..., :, None])[..., 0] + D.data * ut
    out = np.moveaxis(y, 0, -2)

    def backward(g):
        gt = np.ascontiguousarray(np.moveaxis(g, -2, 0))
        gD = (gt * ut).reshape(-1, E).sum(axis=0) if D.requires_grad else None
        dh = gt[..., None] * Ct[..., None, :]                   # direct term, then adjoints
        for t in range(L - 2, -1, -1):
            np.multiply(dA[t + 1], dh[t + 1], out=tmp)
            dh[t] += tmp
        gC = (gt[..., None, :] @ hs)[..., 0, :]                 # [L, ..., N]
        # d/d(delta*A); reuses dA's buffer since the tape runs this once
        s = dA
        s[0] = 0.0
        s[1:] *= dh[1:]
        s[1:] *= hs[:-1]
        gA = (np.einsum("ben,be->en", s.reshape(-1, E, N), dt.reshape(-1, E))
              if A.requires_grad else None)
        gdelta = np.einsum("...en,en->...e", s, Ad)
        gdu = (dh @ Bt[..., :, None])[..., 0]                   # d/d(delta*u)
        gB = (du[..., None, :] @ dh)[..., 0, :]
        gdelta += gdu * ut
        gu = gt * D.data + gdu * dt
        return (np.moveaxis(gu, 0, -2), np.moveaxis(gdelta, 0, -2), gA,
                np.moveaxis(gB, 0, -2), np.moveaxis(gC, 0, -2), gD)
    return Tensor.from_op(out, (u, delta, A, B, C, D), backward, "selective_scan")


@dataclass
class SelectiveProjection:
    """Input-dependent parameter maps for one scan direction.

    ``x_proj: [E, R + 2N]`` produces the low-rank step features, ``B_t`` and
    ``C_t``; ``dt_proj: [R, E]`` plus ``dt_bias: [E]`` lift the step features
    to one step size per channel (passed through softplus).
    """

    x_proj: Tensor
    dt_proj: Tensor
    dt_bias: Tensor

    @property
    def rank(self) -> int:
        return self.dt_proj.shape[-2]

    @property
    def state_size(self) -> int:
        return (self.x_proj.shape[-1] - self.rank) // 2


def selective_parameters(x: Tensor, proj: SelectiveProjection) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(delta, B, C)`` for input ``x: [..., L, E]``.

    Projection weights may carry leading batch axes (e.g. one slice per scan
    direction) that broadcast against ``x``'s leading axes.
    """
    r, n = proj.rank, proj.state_size
    feats = matmul(x, proj.x_proj)
    dt_low = feats[..., :r]
    Bm = feats[..., r:r + n]
    Cm = feats[..., r + n:]
    bias = proj.dt_bias
    if bias.ndim > 1:  # per-direction bias [K, E] -> [K, 1, E]
        bias = bias.reshape(*bias.shape[:-1], 1, bias.shape[-1])
    delta = softplus(linear(dt_low, proj.dt_proj, bias))
    return delta, Bm, Cm


def selective_scan(x, proj: SelectiveProjection, A, D) -> Tensor:
    """S6 scan of ``x: [B, L, E]`` with selectivity from ``proj``; returns [B, L, E]."""
    x, A, D = as_tensor(x), as_tensor(A), as_tensor(D)
    if x.ndim < 2 or x.shape[-1] != A.shape[0]:
        raise DimensionError(f"input {x.shape} does not match A {A.shape}")
    if proj.x_proj.shape[-2] != x.shape[-1]:
        raise DimensionError(f"x_proj {proj.x_proj.shape} does not accept {x.shape[-1]} features")
    delta, Bm, Cm = selective_parameters(x, proj)
    return selective_scan_core(x, delta, A, Bm, Cm, D)


def init_state_matrix(channels: int, state_size: int) -> np.ndarray:
    """``log`` of the positive magnitudes of A: ``A[e, n] = -(n + 1)``."""
    return np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1)))


def init_dt_bias(channels: int, rng: np.random.Generator, dt_min: float = 1e-3,
                 dt_max: float = 1e-1) -> np.ndarray:
    """Bias whose softplus is log-uniform in ``[dt_min, dt_max]``."""
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
    return dt + np.log(-np.expm1(-dt))  # inverse softplus


__all__ = [
    "ContinuousSSM", "DiscreteSSM", "discretize_zoh", "zoh_input_factor", "scan_recurrent",
    "scan_convolutional", "ssm_kernel", "selective_scan_core", "SelectiveProjection",
    "selective_parameters", "selective_scan", "init_state_matrix", "init_dt_bias",
]
