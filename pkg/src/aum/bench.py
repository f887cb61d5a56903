"""Time and peak memory versus token count: AuM block vs self-attention block.

Each cell runs ``warmup`` untimed iterations and then ``reps`` timed ones;
the median is reported. Peak memory is the engine's allocation high-water
mark over one forward+backward pass. Cells that exceed the memory budget
are recorded as DNF, as is every larger token count for that model.
"""

from __future__ import annotations

import csv
import gc
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import numerics as nx
from .encoder import AumBlockWeights, BlockVariant, ModelConfig, TokenSequence, block_forward
from .numerics import OutOfMemory, Tape, Tensor

DEFAULT_MEMORY_LIMIT = 2 * 1024**3


@dataclass(frozen=True)
class BenchModel:
    label: str
    kind: str  # "aum" or "attn"
    embed_dim: int
    heads: int = 0


MODELS = {
    "aum-s": BenchModel("AuM-S", "aum", 384),
    "aum-b": BenchModel("AuM-B", "aum", 768),
    "attn-s": BenchModel("Attn-S", "attn", 384, heads=6),
    "attn-b": BenchModel("Attn-B", "attn", 768, heads=12),
}


# ------------------------------------------------------- attention baseline

@dataclass
class AttentionWeights:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    qkv_W: Tensor  # (D, 3D)
    qkv_b: Tensor
    out_W: Tensor
    out_b: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_W1: Tensor  # (D, 4D)
    mlp_b1: Tensor
    mlp_W2: Tensor  # (4D, D)
    mlp_b2: Tensor
    heads: int

    @classmethod
    def init(cls, D: int, heads: int, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4):
        if D % heads:
            raise ValueError(f"embed dim {D} not divisible by {heads} heads")

        def p(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        def unif(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return p(rng.uniform(-b, b, size=shape))

        H = mlp_ratio * D
        return cls(
            p(np.ones(D)), p(np.zeros(D)),
            unif(D, (D, 3 * D)), p(np.zeros(3 * D)),
            unif(D, (D, D)), p(np.zeros(D)),
            p(np.ones(D)), p(np.zeros(D)),
            unif(D, (D, H)), p(np.zeros(H)),
            unif(H, (H, D)), p(np.zeros(D)),
            heads,
        )

    def parameters(self) -> list[Tensor]:
        return [v for k, v in vars(self).items() if isinstance(v, Tensor)]


def attention_block_forward(tokens: Tensor, w: AttentionWeights, eps: float = 1e-5) -> Tensor:
    """Pre-norm multi-head softmax attention followed by a GELU MLP, both
    residual. ``tokens`` is ``(n, D)`` or ``(B, n, D)``; the full
    ``(heads, n, n)`` score matrix is materialized."""
    squeeze = tokens.ndim == 2
    x = nx.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    B, n, D = x.shape
    H = w.heads
    if D % H:
        raise ValueError(f"embed dim {D} not divisible by {H} heads")
    dh = D // H
    qkv = nx.linear(nx.layer_norm(x, w.ln1_gamma, w.ln1_beta, eps), w.qkv_W, w.qkv_b)

    def heads(i):
        part = nx.slice_along(qkv, i * D, (i + 1) * D, -1)
        return nx.transpose(nx.reshape(part, (B, n, H, dh)), (0, 2, 1, 3))

    q, k, v = heads(0), heads(1), heads(2)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    o = nx.matmul(nx.softmax(scores), v)
    o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B, n, D))
    x = nx.add(x, nx.linear(o, w.out_W, w.out_b))
    h = nx.gelu(nx.linear(nx.layer_norm(x, w.ln2_gamma, w.ln2_beta, eps), w.mlp_W1, w.mlp_b1))
    x = nx.add(x, nx.linear(h, w.mlp_W2, w.mlp_b2))
    return nx.reshape(x, (n, D)) if squeeze else x


# ------------------------------------------------------------ measurement

@dataclass
class ScalingRow:
    model: str
    tokens: int
    fwd_ms: float
    fwdbwd_ms: float
    peak_bytes: int
    status: str = "ok"


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    environment: str = ""
    exponents: dict[str, float] = field(default_factory=dict)

    def model_rows(self, model: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.model == model]

    def cell(self, model: str, tokens: int) -> ScalingRow:
        for r in self.rows:
            if r.model == model and r.tokens == tokens:
                return r
        raise KeyError((model, tokens))


def _stack(spec: BenchModel, depth: int, rng: np.random.Generator, dtype):
    if spec.kind == "attn":
        blocks = [AttentionWeights.init(spec.embed_dim, spec.heads, rng, dtype) for _ in range(depth)]

        def fwd(x):
            for w in blocks:
                x = attention_block_forward(x, w)
            return x

        params = [p for w in blocks for p in w.parameters()]
    else:
        cfg = ModelConfig(embed_dim=spec.embed_dim, state_dim=16, expand=2, conv_kernel=4,
                          n_mels=16, target_frames=16, depth=depth)
        blocks = [AumBlockWeights.init(cfg, BlockVariant.FOBI, rng, dtype) for _ in range(depth)]

        def fwd(x):
            ts = TokenSequence(x, 0)
            for w in blocks:
                ts = block_forward(ts, w, BlockVariant.FOBI)
            return ts.tokens

        params = [p for w in blocks for p in w.named_tensors().values()]
    return fwd, params


def _fwdbwd(fwd, x, params):
    with Tape() as tape:
        y = nx.sum_all(fwd(x))
    tape.backward(y)
    for p in params:
        p.grad = None


def _median_ms(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        gc.collect()
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _pin_single_cpu() -> str:
    if hasattr(os, "sched_getaffinity"):
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[0]})
        return f"pinned to cpu {cpus[0]}"
    return "cpu pinning unavailable"


def measure(
    models,
    token_counts,
    reps: int = 3,
    warmup: int = 2,
    depth: int = 1,
    memory_limit: int | None = DEFAULT_MEMORY_LIMIT,
    seed: int = 0,
    dtype=np.float32,
) -> ScalingReport:
    """Sweep ``token_counts`` for each model name in :data:`MODELS`."""
    token_counts = list(token_counts)
    if any(b <= a for a, b in zip(token_counts, token_counts[1:])):
        raise ValueError(f"token counts must be strictly increasing: {token_counts}")
    if reps < 3:
        raise ValueError("need at least 3 timed repetitions per cell")
    specs = [MODELS[m.lower()] for m in models]
    rows: list[ScalingRow] = []
    with threadpool_limits(limits=1):
        busy = [i for i in threadpool_info() if i.get("num_threads", 1) > 1]
        if busy:
            raise RuntimeError(f"refusing to time with active thread pools: {busy}")
        pin = _pin_single_cpu()
        for spec in specs:
            rng = np.random.default_rng(seed)
            fwd, params = _stack(spec, depth, rng, dtype)
            dnf = False
            for n in token_counts:
                if dnf:
                    rows.append(ScalingRow(spec.label, n, math.nan, math.nan, 0, "DNF"))
                    continue
                x = Tensor(rng.standard_normal((1, n, spec.embed_dim)).astype(dtype))
                try:
                    with nx.budget(memory_limit):
                        with nx.peak_tracking() as peak:
                            _fwdbwd(fwd, x, params)
                        fwd_ms = _median_ms(lambda: fwd(x), reps, warmup)
                        fb_ms = _median_ms(lambda: _fwdbwd(fwd, x, params), reps, warmup)
                except (OutOfMemory, MemoryError):
                    dnf = True
                    for p in params:
                        p.grad = None
                    gc.collect()
                    rows.append(ScalingRow(spec.label, n, math.nan, math.nan, 0, "DNF"))
                    continue
                rows.append(ScalingRow(spec.label, n, fwd_ms, fb_ms, int(peak["peak"])))
    env = (
        f"threads=1 ({pin}); precision={np.dtype(dtype).name}; depth={depth}; "
        f"reps={reps} (+{warmup} warmup, median); "
        f"memory_limit={memory_limit}; {platform.machine()} {platform.python_implementation()}"
    )
    report = ScalingReport(rows, env)
    for spec in specs:
        ok = [r for r in report.model_rows(spec.label) if r.status == "ok"]
        if len(ok) >= 3:
            report.exponents[spec.label] = fit_exponent(ok)
    return report


def fit_exponent(rows, field_name: str = "fwd_ms") -> float:
    """Least-squares slope of log(time) against log(tokens)."""
    pts = [(r.tokens, getattr(r, field_name)) for r in rows if r.status == "ok"]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 completed token counts to fit, got {len(pts)}")
    n, t = np.log(np.array(pts, dtype=np.float64)).T
    return float(np.polyfit(n, t, 1)[0])


def fit_exponents(report: ScalingReport, field_name: str = "fwd_ms") -> dict[str, float]:
    labels = dict.fromkeys(r.model for r in report.rows)
    return {m: fit_exponent(report.model_rows(m), field_name) for m in labels}


# ------------------------------------------------------------------ output

CSV_FIELDS = ["model", "tokens", "fwd_ms", "fwdbwd_ms", "peak_bytes", "status"]


def write_csv(report: ScalingReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in report.rows:
            fmt = (lambda v: "" if math.isnan(v) else f"{v:.3f}")
            w.writerow([r.model, r.tokens, fmt(r.fwd_ms), fmt(r.fwdbwd_ms), r.peak_bytes, r.status])


def read_csv(path) -> list[ScalingRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            def num(v):
                return float(v) if v else math.nan

            rows.append(ScalingRow(rec["model"], int(rec["tokens"]), num(rec["fwd_ms"]),
                                   num(rec["fwdbwd_ms"]), int(rec["peak_bytes"]), rec["status"]))
    return rows


def summary(report: ScalingReport) -> str:
    lines = ["# fitted log-log slopes (time vs tokens)"]
    for field_name in ("fwd_ms", "fwdbwd_ms"):
        for model in dict.fromkeys(r.model for r in report.rows):
            try:
                slope = fit_exponent(report.model_rows(model), field_name)
                lines.append(f"{model} {field_name} slope={slope:.3f}")
            except ValueError as exc:
                lines.append(f"{model} {field_name} slope=n/a ({exc})")
    lines.append(f"# {report.environment}")
    return "\n".join(lines)


def write_gnuplot(report: ScalingReport, path) -> None:
    """One whitespace-separated block per model, blank-line separated."""
    with open(path, "w") as fh:
        for model in dict.fromkeys(r.model for r in report.rows):
            fh.write(f"# {model}\n# tokens fwd_ms fwdbwd_ms peak_bytes\n")
            for r in report.model_rows(model):
                if r.status == "ok":
                    fh.write(f"{r.tokens} {r.fwd_ms:.3f} {r.fwdbwd_ms:.3f} {r.peak_bytes}\n")
            fh.write("\n\n")
