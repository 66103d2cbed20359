"""Self-check suite behind ``ggnet verify``.

Every check reports the measured quantity, its tolerance and the margin
between them, so a report shows how close each invariant is to failing.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .bd import bd_forward, boundary_gt
from .ggb import ChannelGGBParams, SpatialGGBParams, channel_attention, channel_ggb, spatial_attention, spatial_ggb
from .losses import dice_bce, total_loss
from .metrics import evaluate_pair
from .tensor import Tensor, gradcheck

GRAD_TOL = 1e-3
ROW_TOL = 1e-6
DIST_TOL = 1e-9
LOSS_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    @property
    def margin(self) -> float:
        return self.tolerance - self.measured

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<32} measured={self.measured:.3e}  tol={self.tolerance:.1e}  margin={self.margin:+.3e}{extra}"


def _distinct(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2 + 0.5) * spacing).reshape(shape)


def _spatial_params(rng, c, scale=0.5):
    return SpatialGGBParams(*(Tensor(rng.normal(0, scale, (c, c, 1, 1))) for _ in range(5)))


def _channel_params(rng, c, r):
    return ChannelGGBParams(Tensor(rng.normal(size=(c // r, c))), Tensor(rng.normal(size=(c, c // r))), r)


# -- gradient fidelity -----------------------------------------------------------


def _op_cases(rng) -> dict[str, tuple[Callable, list]]:
    a, b = _distinct(rng, (3, 4)), rng.normal(size=(3, 4))
    x = _distinct(rng, (2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    probe = Tensor(rng.normal(size=(2, 4, 4)))
    probe_up = Tensor(rng.normal(size=(2, 3, 6)))
    return {
        "add": (lambda a, b: (a + b * b).sum(), [a, b]),
        "sub": (lambda a, b: ((a - b) * (a - b)).sum(), [a, b]),
        "mul": (lambda a, b: (a * b).sum(), [a, b]),
        "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [a, b]),
        "pow": (lambda a: ((a * a + 1.0) ** 1.5).sum(), [a]),
        "exp": (lambda a: T.exp(a).sum(), [a]),
        "log": (lambda b: T.log(b * b + 1.0).sum(), [b]),
        "relu": (lambda a, b: (T.relu(a) * b).sum(), [a, b]),
        "sigmoid": (lambda a, b: (T.sigmoid(a) * b).sum(), [a, b]),
        "clamp": (lambda a, b: (T.clamp(a, -0.3, 0.3) * b).sum(), [a, b]),
        "sum_mean": (lambda a, b: (T.mean(a, axis=0) * T.tsum(b, axis=0)).sum(), [a, b]),
        "reshape_transpose": (lambda a, b: (a.reshape(4, 3).transpose(1, 0) * b).sum(), [a, b]),
        "expand": (lambda a, b: (T.expand(a.sum(axis=0, keepdims=True), a.shape) * b).sum(), [a, b]),
        "concat": (lambda a, b: (T.concat([a, b], axis=1) ** 2).sum(), [a, b]),
        "getitem": (lambda a, b: (a[1:, :2] * b[:-1, 2:]).sum(), [a, b]),
        "matmul": (lambda a, b: (T.matmul(a, b.transpose(1, 0)) ** 2).sum(), [a, b]),
        "softmax": (lambda a, b: (T.softmax(a, -1) * b).sum(), [a, b]),
        "conv2d": (lambda x, w: (T.conv2d(x, w, padding=2, dilation=2) * probe).sum(), [x, w]),
        "maxpool2d": (lambda x: (T.maxpool2d(x) * probe).sum(), [x]),
        "resize_bilinear": (lambda x: (T.resize_bilinear(x, (3, 6)) * probe_up).sum(), [x]),
    }


def _block_cases(rng) -> dict[str, tuple[Callable, list]]:
    c = 2
    sp = _spatial_params(rng, c, 0.7)
    ch = _channel_params(rng, 4, 2)
    out_s = Tensor(rng.normal(size=(c, 2, 2)))
    out_c = Tensor(rng.normal(size=(4, 2, 2)))
    out_b = Tensor(rng.normal(size=(1, 3, 3)))
    g = (rng.random((1, 3, 3)) > 0.5).astype(float)
    sizes = [(1, 2, 2), (1, 2, 2), (1, 1, 2), (1, 1, 1)]
    masks = [(rng.random(s) > 0.5).astype(float) for s in sizes]
    bounds = [(rng.random(s) > 0.5).astype(float) for s in sizes]
    fm = (rng.random((1, 2, 2)) > 0.5).astype(float)

    def loss_fn(*ts):
        return total_loss([(ts[2 * i], ts[2 * i + 1]) for i in range(4)], ts[-1], masks, bounds, fm)

    loss_args = []
    for s in sizes:
        loss_args += [rng.uniform(0.1, 0.9, s), rng.normal(size=s)]
    loss_args.append(rng.uniform(0.1, 0.9, (1, 2, 2)))
    return {
        "spatial_ggb": (
            lambda x, g, *ws: (spatial_ggb(x, g, SpatialGGBParams(*ws)) * out_s).sum(),
            [rng.normal(size=(c, 2, 2)), rng.normal(size=(c, 2, 2))]
            + [getattr(sp, k).data for k in ("w_theta", "w_phi", "w_mu", "w_eta", "w_rho")],
        ),
        "channel_ggb": (
            lambda y, g, w1, w2: (channel_ggb(y, g, ChannelGGBParams(w1, w2, 2)) * out_c).sum(),
            [rng.normal(0, 0.5, (4, 2, 2)), rng.normal(0, 0.5, (4, 2, 2)), ch.w_fc1.data, ch.w_fc2.data],
        ),
        "bd_forward": (
            lambda f, w: (bd_forward(f, w).boundary * out_b).sum() + (bd_forward(f, w).seg ** 2).sum(),
            [_distinct(rng, (2, 3, 3), 0.3), np.array([[[[1.0]], [[0.5]]]])],
        ),
        "dice_bce": (lambda p: dice_bce(p, g), [rng.uniform(0.1, 0.9, (1, 3, 3))]),
        "total_loss": (loss_fn, loss_args),
    }


def check_gradients(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for group, cases in (("grad", _op_cases(rng)), ("grad", _block_cases(rng))):
        for name, (fn, args) in cases.items():
            err = gradcheck(fn, [np.asarray(a, dtype=np.float64) for a in args])
            out.append(CheckResult(f"{group}:{name}", err < GRAD_TOL, err, GRAD_TOL))
    return out


# -- attention normalisation and residual identities --------------------------------


def check_attention_rows(instances: int = 100, seed: int = 1) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        c = int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(1, 5, size=2))
        scale = float(rng.uniform(0.1, 5.0))
        x, g = Tensor(rng.normal(0, scale, (c, h, w))), Tensor(rng.normal(0, scale, (c, h, w)))
        maps = spatial_attention(x, g, _spatial_params(rng, c))
        maps.update(channel_attention(x, g, _channel_params(rng, c, 1)))
        for name in ("s_x", "s_g", "s_m", "s_z", "s_ghat", "s_q"):
            m = maps[name].data
            dev = float(np.abs(m.sum(axis=-1) - 1.0).max())
            if m.min() < 0:
                dev = math.inf
            worst[name] = max(worst.get(name, 0.0), dev)
    return [
        CheckResult(f"softmax_row_sums:{k}", v <= ROW_TOL, v, ROW_TOL, f"{instances} instances")
        for k, v in worst.items()
    ]


def check_residuals(seed: int = 2) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x, g = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
    p = _spatial_params(rng, 3)
    p.w_mu = Tensor(np.zeros((3, 3, 1, 1)))
    dev_s = float(np.abs(spatial_ggb(x, g, p).data - x.data).max())
    y, g1 = Tensor(rng.normal(size=(1, 3, 3))), Tensor(rng.normal(size=(1, 3, 3)))
    dev_c = float(np.abs(channel_ggb(y, g1, _channel_params(rng, 1, 1)).data - 2 * y.data).max())
    return [
        CheckResult("residual:spatial_zero_mu", dev_s == 0.0, dev_s, 0.0, "bitwise"),
        CheckResult("residual:channel_single", dev_c == 0.0, dev_c, 0.0, "bitwise"),
    ]


# -- metrics, loss transcription, boundary machinery -----------------------------------


def _brute_force_distances(pred, gt):
    def pts(m):
        b = boundary_gt(m)
        return np.argwhere(b > 0).astype(np.float64)

    bp, bg = pts(pred), pts(gt)
    if len(bp) == 0 or len(bg) == 0:
        return None, None
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    pg, gp = d.min(axis=1), d.min(axis=0)
    return max(pg.max(), gp.max()), (pg.mean() + gp.mean()) / 2


def check_metrics(pairs: int = 200, seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    overlap_bad, dist_err, ident_err = 0, 0.0, 0.0
    for _ in range(pairs):
        dens = rng.uniform(0.05, 0.95, 2)
        pred, gt = rng.random((16, 16)) < dens[0], rng.random((16, 16)) < dens[1]
        rec = evaluate_pair(pred, gt)
        tp = int((pred & gt).sum())
        fp = int((pred & ~gt).sum())
        fn = int((~pred & gt).sum())
        tn = pred.size - tp - fp - fn
        want = {"accuracy": (tp + tn) / pred.size}
        if tp + fp + fn:
            want["dice"] = 2 * tp / (2 * tp + fp + fn)
            want["jaccard"] = tp / (tp + fp + fn)
        if tp + fn:
            want["recall"] = tp / (tp + fn)
        if tp + fp:
            want["precision"] = tp / (tp + fp)
        overlap_bad += sum(rec[k] != v for k, v in want.items())
        hd, ab = _brute_force_distances(pred, gt)
        if hd is not None:
            dist_err = max(dist_err, abs(rec["hd"] - hd), abs(rec["abd"] - ab))
        j = rec["jaccard"]
        ident_err = max(ident_err, abs(rec["dice"] - 2 * j / (1 + j)))
    return [
        CheckResult("metrics:overlap_exact", overlap_bad == 0, float(overlap_bad), 0.0, f"{pairs} pairs"),
        CheckResult("metrics:distances", dist_err <= DIST_TOL, dist_err, DIST_TOL, f"{pairs} pairs"),
        CheckResult("metrics:dice_jaccard_identity", ident_err <= 1e-12, ident_err, 1e-12),
    ]


def check_loss_transcription(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    sizes = [(1, 8, 8), (1, 4, 4), (1, 2, 2), (1, 1, 1)]
    layers = [(rng.uniform(0.01, 0.99, s), rng.normal(size=s)) for s in sizes]
    masks = [(rng.random(s) > 0.5).astype(float) for s in sizes]
    bounds = [(rng.random(s) > 0.7).astype(float) for s in sizes]
    final, fm = rng.uniform(0.01, 0.99, (1, 16, 16)), (rng.random((1, 16, 16)) > 0.5).astype(float)
    masks[-1][:] = 1.0

    def seg(p, g):
        p, g = p.ravel(), g.ravel()
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        dice = 1 - 2 * (p @ g) / (p @ p + g @ g)
        return dice - np.mean(g * np.log(pc) + (1 - g) * np.log(1 - pc))

    want = seg(final, fm) + sum(
        1.0 * seg(s, m) + 10.0 * np.sum((d - b) ** 2) / d.size for (s, d), m, b in zip(layers, masks, bounds)
    )
    got = total_loss([(Tensor(s), Tensor(d)) for s, d in layers], Tensor(final), masks, bounds, fm).item()
    err = abs(got - want)
    return CheckResult("loss:straight_line", err <= LOSS_TOL, err, LOSS_TOL)


def check_boundary_machinery() -> list[CheckResult]:
    m = np.zeros((5, 5), np.uint8)
    m[1:4, 1:4] = 1
    rim = m.copy()
    rim[2, 2] = 0
    bad_rim = int((boundary_gt(m) != rim).sum())
    f = np.zeros((1, 6, 6))
    f[0, :, 3:] = 1.0
    expect = np.zeros((6, 6))
    expect[:, 2] = -1.0
    e = bd_forward(Tensor(f), Tensor(np.ones((1, 1, 1, 1)))).boundary.data[0]
    bad_edge = int((e != expect).sum())
    return [
        CheckResult("boundary:square_rim", bad_rim == 0, float(bad_rim), 0.0, "mismatched pixels"),
        CheckResult("boundary:step_edge", bad_edge == 0, float(bad_edge), 0.0, "mismatched pixels"),
    ]


# -- driver -------------------------------------------------------------------------


@contextlib.contextmanager
def corrupted_softmax() -> Iterator[None]:
    """Test hook: drop softmax's normalisation for the duration of the block."""
    original = T.softmax

    def unnormalised(a, axis=-1):
        return T.exp(a)

    T.softmax = unnormalised
    try:
        with np.errstate(all="ignore"):
            yield
    finally:
        T.softmax = original


FAULTS = {"softmax": corrupted_softmax}


def run_checks(fault: str | None = None) -> tuple[list[CheckResult], float]:
    ctx = FAULTS[fault]() if fault else contextlib.nullcontext()
    start = time.perf_counter()
    with ctx:
        results = check_gradients()
        results += check_attention_rows()
        results += check_residuals()
        results += check_metrics()
        results.append(check_loss_transcription())
        results += check_boundary_machinery()
    return results, time.perf_counter() - start


def report(results: list[CheckResult], elapsed: float) -> str:
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s"
    if failed:
        summary += "; failed: " + ", ".join(failed)
    return "\n".join(lines + [summary])
