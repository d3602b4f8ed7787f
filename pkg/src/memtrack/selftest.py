"""Fast oracle and invariant checks behind ``memtrack selftest``."""

from __future__ import annotations

import math
import traceback
from typing import Callable

import numpy as np

from .autodiff import Graph, grad_check, ops
from .config import TrackerConfig
from .evaluation import memory_footprint, ope, precision_curve, success_curve, trapezoid_auc
from .geometry import Box3D, build_correspondences, iou3d, move_box, move_points
from .kernels import farthest_point_sample, fps_numpy, knn_graph, knn_numpy
from .objectives import build_transitions, mcc_loss


def _check_gradients() -> str:
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    worst = max(
        grad_check(lambda g, x, y: ops.sum(ops.sigmoid(x @ y)), [a, b]),
        grad_check(lambda g, x: ops.sum(ops.softmax(x, axis=1, temperature=0.5) * x), [a]),
        grad_check(lambda g, x, ga, be: ops.sum(ops.layer_norm(x, ga, be) * x),
                   [a, rng.normal(size=4), rng.normal(size=4)]),
        grad_check(lambda g, x, y: ops.sum(ops.cosine_similarity_matrix(x, y)), [a, rng.normal(size=(5, 4))]),
    )
    assert worst < 1e-3, f"relative gradient error {worst:.2e}"
    return f"max rel err {worst:.1e}"


def _check_cycle_algebra() -> str:
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, f = rng.normal(size=(4, 6)), rng.normal(size=(9, 6))
        m = build_transitions(Graph().constant(x), Graph().constant(f), 0.1)
        for w in (m.token_to_point, m.point_to_token, m.cycle):
            assert np.allclose(w.data.sum(axis=1), 1, atol=1e-6)
    # one token; half of the points foreground with identical features -> log 2
    g = Graph()
    m = build_transitions(g.constant(np.ones((1, 3))), g.constant(np.ones((4, 3))), 0.1)
    _, fg, _ = mcc_loss(g, [m], [np.array([0, 1])])
    assert abs(float(fg.data) - math.log(2)) < 1e-9
    return "row sums and L_fg anchor ok"


def _check_geometry() -> str:
    a = Box3D((0, 0, 0), 0.0, (2, 2, 2))
    b = Box3D((0, 0, 0), math.pi / 4, (2, 2, 2))
    v = iou3d(a, b)
    assert abs(v - 1 / math.sqrt(2)) < 1e-9, v
    assert iou3d(a, a) == 1.0
    rng = np.random.default_rng(2)
    pts = [rng.normal(size=(30, 3)) for _ in range(3)]
    boxes = [Box3D(rng.normal(size=3), rng.uniform(-3, 3), (2, 3, 1.5)) for _ in range(3)]
    masks = [np.ones(30, bool)] * 3
    c1 = build_correspondences(pts, boxes, masks, 0.5)
    yaw, t = 0.7, np.array([3.0, -1.0, 0.2])
    c2 = build_correspondences([move_points(p, yaw, t) for p in pts], [move_box(x, yaw, t) for x in boxes],
                               masks, 0.5)
    assert c1.triples() == c2.triples()
    assert np.allclose(c1.dist, c2.dist, atol=1e-9)
    return f"45-degree IoU {v:.4f}"


def _check_metrics() -> str:
    rng = np.random.default_rng(3)
    boxes = [Box3D(rng.normal(size=3), 0.0, (1, 2, 1)) for _ in range(20)]
    pred = [move_box(b, rng.normal(0, 0.3), rng.normal(0, 0.8, 3)) for b in boxes]
    r = ope(pred, boxes)
    s = 100 * trapezoid_auc(*success_curve(r.ious))
    p = 100 * trapezoid_auc(*precision_curve(r.errors))
    assert abs(s - r.success) < 0.1 and abs(p - r.precision) < 0.1
    assert ope(boxes, boxes).precision == 100.0
    return f"success {r.success:.2f} vs grid {s:.2f}"


def _check_kernels() -> str:
    pts = np.random.default_rng(4).normal(size=(200, 3))
    assert np.array_equal(farthest_point_sample(pts, 50), fps_numpy(pts, 50))
    assert np.array_equal(knn_graph(pts, 8), knn_numpy(pts, 8))
    return "dispatch matches numpy reference"


def _check_footprint() -> str:
    rows = memory_footprint(TrackerConfig(), [1, 3, 8])
    assert all(r.token == 4096 for r in rows)
    assert rows[1].point_baseline == 49152 and rows[2].ratio == 32
    return "K*D constant"


CHECKS: dict[str, Callable[[], str]] = {
    "gradients": _check_gradients,
    "cycle-algebra": _check_cycle_algebra,
    "geometry": _check_geometry,
    "metrics": _check_metrics,
    "kernels": _check_kernels,
    "footprint": _check_footprint,
}


def run_selftest(write=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            detail = fn()
            write(f"PASS {name}: {detail}")
        except Exception as e:  # report every failing check, keep going
            ok = False
            write(f"FAIL {name}: {e!r}")
            write(traceback.format_exc().rstrip())
    return ok
