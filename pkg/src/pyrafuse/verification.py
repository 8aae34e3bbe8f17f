"""Gradient verification suite: every op and composite against central
finite differences, across multiple seeds, in float64.

Inputs are sampled away from kinks and ties (|x| margins for relu/absolute,
top-2 gaps for max pooling) so the symmetric difference quotient is valid at
the probe step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .detector import detection_loss, render_targets
from .engine import Tensor, grad_check
from .neck import (
    DrParams,
    FeaturePyramid,
    NeckConfig,
    NeckParams,
    ScaParams,
    SsaParams,
    dr_forward,
    fuse_base,
    neck_forward,
    sca_forward,
    ssa_forward,
)
from .scenes import Instance

OP_TOLERANCE = 1e-6
COMPOSITE_TOLERANCE = 1e-4
N_SEEDS = 10
FD_STEP = 1e-4


@dataclass
class SuiteEntry:
    check: str
    seed: int
    param: str
    max_rel_err: float
    ok: bool
    note: str = ""


@dataclass
class SuiteReport:
    entries: list[SuiteEntry] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(e.ok for e in self.entries)

    def worst_by_check(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for e in self.entries:
            worst[e.check] = max(worst.get(e.check, 0.0), e.max_rel_err)
        return worst

    def format(self) -> str:
        lines = []
        seen = []
        for e in self.entries:
            if e.check not in seen:
                seen.append(e.check)
        for check in seen:
            errs = [e for e in self.entries if e.check == check]
            worst = max(e.max_rel_err for e in errs)
            ok = all(e.ok for e in errs)
            lines.append(f"{check:<24s} seeds={len(set(e.seed for e in errs)):<3d} "
                         f"max_rel_err={worst:.3e}  {'ok' if ok else 'FAIL'}")
        lines.append(f"total: {len(self.entries)} entries, "
                     f"{'all ok' if self.passed else 'FAILURES PRESENT'} "
                     f"({self.elapsed_s:.1f}s)")
        return "\n".join(lines)


def _margin(arr: np.ndarray, margin: float = 0.02) -> np.ndarray:
    """Push values away from zero so relu/abs kinks sit outside the FD step."""
    sign = np.where(arr >= 0, 1.0, -1.0)
    return sign * (np.abs(arr) + margin)


def _gap_channels(arr: np.ndarray, gap: float = 0.05) -> np.ndarray:
    """Ensure a clear per-position channel argmax for max pooling."""
    idx = np.argmax(arr, axis=1)[:, None]
    bumped = arr.copy()
    np.put_along_axis(bumped, idx, np.take_along_axis(arr, idx, axis=1) + gap, axis=1)
    return bumped


def _t(rng: np.random.Generator, shape, transform=None) -> Tensor:
    data = rng.normal(size=shape)
    if transform is not None:
        data = transform(data)
    return Tensor(data, dtype=np.float64, requires_grad=True)


def _const(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _weighted_sum(out: Tensor, w: Tensor) -> Tensor:
    return E.reduce_sum(E.mul(out, w))


def _op_checks(rng: np.random.Generator) -> list[tuple[str, callable, dict]]:
    """Each entry: (name, build, params). Build closes over params so the FD
    sweep sees perturbed data."""
    checks = []

    a = _t(rng, (2, 3, 4))
    b = _t(rng, (3, 1))
    w = _const(rng, (2, 3, 4))
    checks.append(("add", lambda: _weighted_sum(E.add(a, b), w), {"a": a, "b": b}))

    a2, b2 = _t(rng, (2, 3)), _t(rng, (2, 3))
    w2 = _const(rng, (2, 3))
    checks.append(("sub", lambda: _weighted_sum(E.sub(a2, b2), w2), {"a": a2, "b": b2}))

    a3, b3 = _t(rng, (3, 1, 4)), _t(rng, (2, 4))
    w3 = _const(rng, (3, 2, 4))
    checks.append(("mul", lambda: _weighted_sum(E.mul(a3, b3), w3), {"a": a3, "b": b3}))

    a4 = _t(rng, (2, 5))
    w4 = _const(rng, (2, 5))
    checks.append(("scale", lambda: _weighted_sum(E.scale(a4, -1.7), w4), {"a": a4}))
    checks.append(("neg", lambda: _weighted_sum(E.neg(a4), w4), {"a": a4}))

    ma, mb = _t(rng, (3, 4)), _t(rng, (4, 2))
    mw = _const(rng, (3, 2))
    checks.append(("matmul", lambda: _weighted_sum(E.matmul(ma, mb), mw),
                   {"a": ma, "b": mb}))

    cx, cw, cb = _t(rng, (2, 3, 5, 5)), _t(rng, (4, 3, 3, 3)), _t(rng, (4,))
    cwt = _const(rng, (2, 4, 5, 5))
    checks.append(("conv2d_s1", lambda: _weighted_sum(
        E.conv2d(cx, cw, cb, stride=1, padding=1), cwt),
        {"x": cx, "w": cw, "b": cb}))

    dx, dw, db = _t(rng, (1, 3, 6, 6)), _t(rng, (2, 3, 4, 4)), _t(rng, (2,))
    dwt = _const(rng, (1, 2, 3, 3))
    checks.append(("conv2d_s2", lambda: _weighted_sum(
        E.conv2d(dx, dw, db, stride=2, padding=1), dwt),
        {"x": dx, "w": dw, "b": db}))

    gx = _t(rng, (2, 3, 4, 5))
    gw = _const(rng, (2, 3, 1, 1))
    checks.append(("global_avg_pool", lambda: _weighted_sum(E.global_avg_pool(gx), gw),
                   {"x": gx}))

    px = _t(rng, (2, 4, 3, 3))
    pw = _const(rng, (2, 1, 3, 3))
    checks.append(("channel_pool_avg", lambda: _weighted_sum(
        E.channel_pool(px, "avg"), pw), {"x": px}))

    qx = _t(rng, (2, 4, 3, 3), transform=_gap_channels)
    checks.append(("channel_pool_max", lambda: _weighted_sum(
        E.channel_pool(qx, "max"), pw), {"x": qx}))

    sx = _t(rng, (2, 5, 3))
    sw = _const(rng, (2, 5, 3))
    checks.append(("softmax", lambda: _weighted_sum(E.softmax(sx, axis=1), sw), {"x": sx}))

    ux = _t(rng, (1, 2, 3, 4))
    uw = _const(rng, (1, 2, 5, 7))
    checks.append(("bilinear_up", lambda: _weighted_sum(
        E.bilinear_resize(ux, 5, 7), uw), {"x": ux}))

    vx = _t(rng, (1, 2, 6, 5))
    vw = _const(rng, (1, 2, 3, 3))
    checks.append(("bilinear_down", lambda: _weighted_sum(
        E.bilinear_resize(vx, 3, 3), vw), {"x": vx}))

    rx = _t(rng, (3, 4), transform=_margin)
    rw = _const(rng, (3, 4))
    checks.append(("relu", lambda: _weighted_sum(E.relu(rx), rw), {"x": rx}))

    gx2 = _t(rng, (2, 5))
    gw2 = _const(rng, (2, 5))
    checks.append(("sigmoid", lambda: _weighted_sum(E.sigmoid(gx2), gw2), {"x": gx2}))

    c1, c2, c3 = _t(rng, (2, 2, 3)), _t(rng, (2, 1, 3)), _t(rng, (2, 4, 3))
    cw3 = _const(rng, (2, 7, 3))
    checks.append(("concat", lambda: _weighted_sum(
        E.concat([c1, c2, c3], axis=1), cw3), {"a": c1, "b": c2, "c": c3}))

    tx = _t(rng, (2, 3, 4))
    tw = _const(rng, (3,))
    checks.append(("reduce_sum", lambda: _weighted_sum(
        E.reduce_sum(tx, axis=(0, 2)), tw), {"x": tx}))
    tw2 = _const(rng, (2, 1, 4))
    checks.append(("reduce_mean", lambda: _weighted_sum(
        E.reduce_mean(tx, axis=1, keepdims=True), tw2), {"x": tx}))

    hx = _t(rng, (2, 6))
    hw = _const(rng, (3, 4))
    checks.append(("reshape", lambda: _weighted_sum(E.reshape(hx, (3, 4)), hw), {"x": hx}))

    nx = _t(rng, (2, 5, 3))
    nw = _const(rng, (2, 2, 3))
    checks.append(("narrow", lambda: _weighted_sum(E.narrow(nx, 1, 1, 2), nw), {"x": nx}))

    ax = _t(rng, (3, 4), transform=_margin)
    aw = _const(rng, (3, 4))
    checks.append(("absolute", lambda: _weighted_sum(E.absolute(ax), aw), {"x": ax}))

    zx = _t(rng, (3, 4), transform=lambda v: np.abs(v) + 0.5)
    zw = _const(rng, (3, 4))
    checks.append(("sqrt", lambda: _weighted_sum(E.sqrt(zx), zw), {"x": zx}))
    checks.append(("reciprocal", lambda: _weighted_sum(E.reciprocal(zx), zw), {"x": zx}))
    checks.append(("log", lambda: _weighted_sum(E.log(zx), zw), {"x": zx}))

    # Mix of inside/outside values, all kept > 10*FD_STEP away from the bounds
    # so the subgradient at the clip boundary never meets the probe step.
    def _off_bounds(v, lo=-0.75, hi=0.85):
        v = 2.0 * v
        for bound in (lo, hi):
            near = np.abs(v - bound) < 0.02
            v = np.where(near, bound + np.where(v >= bound, 0.02, -0.02), v)
        return v

    clx = _t(rng, (3, 4), transform=_off_bounds)
    clw = _const(rng, (3, 4))
    checks.append(("clip", lambda: _weighted_sum(E.clip(clx, -0.75, 0.85), clw), {"x": clx}))

    return checks


def _pyramid(rng: np.random.Generator, channels: int = 4) -> FeaturePyramid:
    shapes = [(1, channels, 4, 4), (1, channels, 3, 3), (1, channels, 2, 2)]
    return FeaturePyramid([_t(rng, s) for s in shapes], [4, 8, 16])


def _composite_checks(rng: np.random.Generator) -> list[tuple[str, callable, dict]]:
    checks = []

    pyr = _pyramid(rng)
    fw = _const(rng, (1, 4, 4, 4))
    params = {f"level{i}": t for i, t in enumerate(pyr.levels)}
    checks.append(("fuse_base", lambda: _weighted_sum(fuse_base(pyr, 0), fw), params))

    inputs = [_t(rng, (1, 4, 3, 3)) for _ in range(3)]
    sca = ScaParams(3, 4, 2, rng, dtype=np.float64)
    sw = _const(rng, (1, 4, 3, 3))
    sca_params = dict(sca.named_tensors("sca"))
    sca_params.update({f"x{i}": t for i, t in enumerate(inputs)})
    checks.append(("sca_forward", lambda: _weighted_sum(
        sca_forward(inputs, sca)[0], sw), sca_params))

    sinputs = [_t(rng, (1, 4, 4, 4)) for _ in range(3)]
    ssa = SsaParams(3, 3, rng, dtype=np.float64)
    ssw = _const(rng, (1, 4, 4, 4))
    ssa_params = dict(ssa.named_tensors("ssa"))
    ssa_params.update({f"x{i}": t for i, t in enumerate(sinputs)})
    checks.append(("ssa_forward", lambda: _weighted_sum(
        ssa_forward(sinputs, ssa)[0], ssw), ssa_params))

    v = _t(rng, (1, 4, 3, 3))
    dr = DrParams(4, 2, rng, dtype=np.float64)
    # zero-init transform_up blocks upstream grads; displace it for the check
    dr.up_w.data = rng.normal(size=dr.up_w.shape) * 0.5
    dr.up_b.data = rng.normal(size=dr.up_b.shape) * 0.1
    dw = _const(rng, (1, 4, 3, 3))
    dr_params = dict(dr.named_tensors("dr"))
    dr_params["v"] = v
    checks.append(("dr_forward", lambda: _weighted_sum(dr_forward(v, dr), dw), dr_params))

    cfg = NeckConfig(n_levels=3, channels=4, squeeze_ratio=2, ssa_kernel=3, dr_ratio=2)
    neck = NeckParams(cfg, rng, dtype=np.float64)
    for level in neck.levels:
        level.dr.up_w.data = rng.normal(size=level.dr.up_w.shape) * 0.5
        level.dr.up_b.data = rng.normal(size=level.dr.up_b.shape) * 0.1
    npyr = _pyramid(rng)
    nweights = [_const(rng, s.shape) for s in npyr.levels]

    def neck_loss():
        refined = neck_forward(npyr, neck)
        total = None
        for lvl, wt in zip(refined.levels, nweights):
            term = E.reduce_sum(E.mul(lvl, wt))
            total = term if total is None else E.add(total, term)
        return total

    neck_params = dict(neck.named_tensors())
    neck_params.update({f"p{i}": t for i, t in enumerate(npyr.levels)})
    checks.append(("neck_forward", neck_loss, neck_params))

    instances = [
        [Instance(0, np.zeros((3, 2)), bbox=(2.0, 3.0, 5.0, 4.0), area=20),
         Instance(1, np.zeros((3, 2)), bbox=(8.0, 6.0, 6.0, 7.0), area=42)],
    ]
    targets, n_pos = render_targets(instances, image_size=16, num_classes=2)

    def _offset_from(tgt: np.ndarray):
        # L1 terms kink where prediction equals target; keep a clear margin
        def build(noise):
            return tgt + np.where(noise >= 0, 1.0, -1.0) * (np.abs(noise) + 0.05)
        return build

    heat_logits = [_t(rng, t["heat"].shape) for t in targets]
    sizes = [_t(rng, t["size"].shape, transform=_offset_from(t["size"])) for t in targets]
    offsets = [_t(rng, t["offset"].shape, transform=_offset_from(t["offset"]))
               for t in targets]

    def loss_build():
        from .detector import LevelOutput
        level_outs = [LevelOutput(heat=E.sigmoid(hl), size=sz, offset=off)
                      for hl, sz, off in zip(heat_logits, sizes, offsets)]
        return detection_loss(level_outs, targets, n_pos)

    loss_params = {}
    for i, (hl, sz, off) in enumerate(zip(heat_logits, sizes, offsets)):
        loss_params[f"heat{i}"] = hl
        loss_params[f"size{i}"] = sz
        loss_params[f"offset{i}"] = off
    checks.append(("detection_loss", loss_build, loss_params))

    return checks


def run_gradient_suite(n_seeds: int = N_SEEDS,
                       op_tolerance: float = OP_TOLERANCE,
                       composite_tolerance: float = COMPOSITE_TOLERANCE,
                       step: float = FD_STEP) -> SuiteReport:
    report = SuiteReport()
    start = time.perf_counter()
    for seed in range(n_seeds):
        for kind, factory, tol in (("op", _op_checks, op_tolerance),
                                   ("composite", _composite_checks, composite_tolerance)):
            rng = np.random.default_rng(10_000 + seed)
            for name, build, params in factory(rng):
                result = grad_check(build, params, step=step, tolerance=tol)
                for entry in result.entries:
                    report.entries.append(SuiteEntry(
                        check=name, seed=seed, param=entry.name,
                        max_rel_err=entry.max_rel_err, ok=entry.ok, note=entry.note))
    report.elapsed_s = time.perf_counter() - start
    return report
