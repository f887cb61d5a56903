"""Selective state-space layer: discretization, input-dependent parameters
and the sequential scan.

Each of the ``d_inner`` channels runs its own diagonal linear recurrence
with ``state_dim`` states::

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t = <C_t, h_t> + D * x_t

``scan_naive`` spells this out one channel/state pair at a time and is the
reference every faster path is tested against.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, current_tape, exp, linear, ops, record, scale, softplus
from .numerics.ops import saved


class ScanDirection(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


def discretize(A, B, delta):
    """Zero-order hold on ``A``, Euler step on ``B``.

    Returns ``(exp(delta * A), delta * B)`` with numpy broadcasting.
    """
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("discretize: step size delta must be positive")
    return np.exp(delta * np.asarray(A)), delta * np.asarray(B)


@dataclass
class StepParams:
    """Per-timestep discretized parameters for ``L`` steps."""

    Abar: np.ndarray  # (L, d_inner, state_dim)
    Bbar: np.ndarray  # (L, d_inner, state_dim)
    C: np.ndarray  # (L, state_dim)

    @classmethod
    def from_selective(cls, delta, A, B, C) -> "StepParams":
        """Build step parameters from ``delta (L, Di)``, ``A (Di, N)``,
        ``B (L, N)`` and ``C (L, N)``."""
        delta, A, B, C = (np.asarray(v) for v in (delta, A, B, C))
        Abar, Bbar = discretize(A[None], B[:, None, :], delta[:, :, None])
        return cls(Abar, Bbar, C)

    def __len__(self) -> int:
        return self.Abar.shape[0]

    def reversed(self) -> "StepParams":
        return StepParams(self.Abar[::-1], self.Bbar[::-1], self.C[::-1])


def scan_naive(x, steps: StepParams, D_skip) -> np.ndarray:
    """Literal recurrence from ``h_0 = 0``, one scalar at a time, in float64."""
    x = np.asarray(x, dtype=np.float64)
    L, Di = x.shape
    N = steps.C.shape[1]
    Abar = np.asarray(steps.Abar, dtype=np.float64).tolist()
    Bbar = np.asarray(steps.Bbar, dtype=np.float64).tolist()
    C = np.asarray(steps.C, dtype=np.float64).tolist()
    Dk = np.asarray(D_skip, dtype=np.float64).tolist()
    xs = x.tolist()
    h = [[0.0] * N for _ in range(Di)]
    y = [[0.0] * Di for _ in range(L)]
    for t in range(L):
        for d in range(Di):
            acc = 0.0
            for n in range(N):
                h[d][n] = Abar[t][d][n] * h[d][n] + Bbar[t][d][n] * xs[t][d]
                acc += C[t][n] * h[d][n]
            y[t][d] = acc + Dk[d] * xs[t][d]
    return np.array(y)


def scan(x, steps: StepParams, D_skip, direction: ScanDirection = ScanDirection.FORWARD) -> np.ndarray:
    """Sequential scan vectorized over channels and states.

    The backward direction runs the same recurrence from the last step to
    the first, which equals reverse(scan(reverse(x), reversed steps)).
    """
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    Abar = np.asarray(steps.Abar, dtype=dtype)
    Bbar = np.asarray(steps.Bbar, dtype=dtype)
    C = np.asarray(steps.C, dtype=dtype)
    D = np.asarray(D_skip, dtype=dtype)
    L, Di = x.shape
    order = range(L) if direction is ScanDirection.FORWARD else range(L - 1, -1, -1)
    h = np.zeros(Abar.shape[1:], dtype=dtype)
    y = np.empty_like(x)
    for t in order:
        h = Abar[t] * h + Bbar[t] * x[t][:, None]
        y[t] = h @ C[t]
    return y + D * x


# ---------------------------------------------------------------- selective

@dataclass
class SsmParams:
    """Learnable selective SSM parameters for one scan direction.

    ``A = -exp(A_log)`` keeps the continuous system stable; ``delta`` comes
    from a rank-``dt_rank`` bottleneck plus bias through softplus.
    """

    A_log: Tensor  # (Di, N)
    dt_down: Tensor  # (Di, R)
    dt_up: Tensor  # (R, Di)
    dt_bias: Tensor  # (Di,)
    B_proj: Tensor  # (Di, N)
    C_proj: Tensor  # (Di, N)
    D_skip: Tensor  # (Di,)

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "A_log": self.A_log,
            "dt_down": self.dt_down,
            "dt_up": self.dt_up,
            "dt_bias": self.dt_bias,
            "B_proj": self.B_proj,
            "C_proj": self.C_proj,
            "D_skip": self.D_skip,
        }

    @classmethod
    def init(
        cls,
        d_inner: int,
        state_dim: int,
        rng: np.random.Generator,
        dtype=np.float32,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ) -> "SsmParams":
        rank = math.ceil(d_inner / 16)
        A_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d_inner, 1)))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
        dt_bias = dt + np.log(-np.expm1(-dt))  # softplus^-1
        bound = 1.0 / math.sqrt(d_inner)

        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        return cls(
            A_log=t(A_log),
            dt_down=t(rng.uniform(-bound, bound, size=(d_inner, rank))),
            dt_up=t(rng.uniform(-(rank**-0.5), rank**-0.5, size=(rank, d_inner))),
            dt_bias=t(dt_bias),
            B_proj=t(rng.uniform(-bound, bound, size=(d_inner, state_dim))),
            C_proj=t(rng.uniform(-bound, bound, size=(d_inner, state_dim))),
            D_skip=t(np.ones(d_inner)),
        )


def selectivize(x: Tensor, params: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-step ``(delta, B, C)`` from features ``x[..., L, Di]``."""
    delta = softplus(linear(linear(x, params.dt_down), params.dt_up, params.dt_bias))
    return delta, linear(x, params.B_proj), linear(x, params.C_proj)


def continuous_A(params: SsmParams) -> Tensor:
    return scale(exp(params.A_log), -1.0)


def ssm_forward(u: Tensor, params: SsmParams, direction: ScanDirection) -> Tensor:
    delta, B, C = selectivize(u, params)
    return selective_scan(
        u, delta, continuous_A(params), B, C, params.D_skip,
        reverse=direction is ScanDirection.BACKWARD,
    )


# ------------------------------------------------------- fused scan primitive

def _forward_chunks(u, delta, A, B, C, chunk, checkpoints):
    Bt, L, Di = u.shape
    N = A.shape[1]
    h = np.zeros((Bt, Di, N), dtype=u.dtype)
    y = np.empty_like(u)
    du = delta * u
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        if checkpoints is not None:
            checkpoints.append(saved(h.copy()))
        dA = np.exp(delta[:, s:e, :, None] * A)
        dBu = du[:, s:e, :, None] * B[:, s:e, None, :]
        hs = np.empty_like(dA)
        prev = h
        for i in range(e - s):
            np.multiply(dA[:, i], prev, out=hs[:, i])
            hs[:, i] += dBu[:, i]
            prev = hs[:, i]
        h = hs[:, -1]
        y[:, s:e] = (hs @ C[:, s:e, :, None])[..., 0]
    return y


def _backward_chunks(u, delta, A, B, C, Dk, gy, checkpoints, chunk):
    Bt, L, Di = u.shape
    gu = gy * Dk
    gD = (gy * u).sum(axis=(0, 1))
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.empty_like(B)
    gC = np.empty_like(C)
    du = delta * u
    carry = np.zeros((Bt, Di, A.shape[1]), dtype=u.dtype)
    starts = list(range(0, L, chunk))
    for c in reversed(range(len(starts))):
        s = starts[c]
        e = min(s + chunk, L)
        T = e - s
        dA = np.exp(delta[:, s:e, :, None] * A)
        dBu = du[:, s:e, :, None] * B[:, s:e, None, :]
        hprev = np.empty_like(dA)
        hs = np.empty_like(dA)
        prev = checkpoints[c]
        for i in range(T):
            hprev[:, i] = prev
            np.multiply(dA[:, i], prev, out=hs[:, i])
            hs[:, i] += dBu[:, i]
            prev = hs[:, i]
        gh = gy[:, s:e, :, None] * C[:, s:e, None, :]
        for i in range(T - 1, -1, -1):
            gh[:, i] += carry
            carry = gh[:, i] * dA[:, i]
        gC[:, s:e] = (gy[:, s:e, None, :] @ hs)[..., 0, :]
        ghB = (gh @ B[:, s:e, :, None])[..., 0]
        gu[:, s:e] += ghB * delta[:, s:e]
        gdelta[:, s:e] += ghB * u[:, s:e]
        gB[:, s:e] = (du[:, s:e, None, :] @ gh)[..., 0, :]
        gdA = gh * hprev * dA
        gdelta[:, s:e] += (gdA * A).sum(-1)
        gA += (gdA * delta[:, s:e, :, None]).sum(axis=(0, 1))
    return gu, gdelta, gA, gB, gC, gD


def selective_scan(
    u: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    D_skip: Tensor,
    reverse: bool = False,
    chunk: int = 64,
) -> Tensor:
    """Differentiable selective scan over axis -2.

    ``u, delta: [..., L, Di]``; ``A: [Di, N]``; ``B, C: [..., L, N]``;
    ``D_skip: [Di]``. Only chunk-boundary states are kept for the reverse
    pass; states inside a chunk are recomputed there, so saved memory is
    ``O(L/chunk * Di * N)`` instead of ``O(L * Di * N)``.
    """
    lead = u.shape[:-2]
    L, Di = u.shape[-2:]
    N = A.shape[1]
    if delta.shape != u.shape or A.shape != (Di, N) or D_skip.shape != (Di,):
        raise ops.ShapeError(
            f"selective_scan: u {u.shape}, delta {delta.shape}, A {A.shape}, D {D_skip.shape}"
        )
    if B.shape != lead + (L, N) or C.shape != lead + (L, N):
        raise ops.ShapeError(f"selective_scan: B {B.shape} / C {C.shape} vs u {u.shape}")

    def flat(a, width):
        a = a.reshape((-1, L, width))
        return a[:, ::-1] if reverse else a

    ud, dd, Bd, Cd = flat(u.data, Di), flat(delta.data, Di), flat(B.data, N), flat(C.data, N)
    Ad, Dk = A.data, D_skip.data
    if reverse:
        ud, dd, Bd, Cd = (np.ascontiguousarray(a) for a in (ud, dd, Bd, Cd))
    needs_grad = current_tape() is not None and any(
        t.requires_grad for t in (u, delta, A, B, C, D_skip)
    )
    ckpts: list[np.ndarray] | None = [] if needs_grad else None
    y = _forward_chunks(ud, dd, Ad, Bd, Cd, chunk, ckpts) + Dk * ud
    if reverse:
        y = y[:, ::-1]
    y = np.ascontiguousarray(y).reshape(u.shape)

    def backward(g):
        gf = g.reshape((-1, L, Di))
        if reverse:
            gf = gf[:, ::-1]
        gu, gdelta, gA, gB, gC, gD = _backward_chunks(ud, dd, Ad, Bd, Cd, Dk, gf, ckpts, chunk)
        if reverse:
            gu, gdelta, gB, gC = (a[:, ::-1] for a in (gu, gdelta, gB, gC))
        return (
            np.ascontiguousarray(gu).reshape(u.shape),
            np.ascontiguousarray(gdelta).reshape(u.shape),
            gA,
            np.ascontiguousarray(gB).reshape(B.shape),
            np.ascontiguousarray(gC).reshape(C.shape),
            gD,
        )

    return record(y, (u, delta, A, B, C, D_skip), backward)
