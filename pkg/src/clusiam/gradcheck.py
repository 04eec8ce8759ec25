"""Finite-difference verification of every loss surface.

Each case packs the tensors that receive gradient into one point and holds
everything else (cluster centers, stop-gradient targets, predictor weights)
as constants, so the checked function has exactly the training-time gradient
semantics. Detached occurrences are frozen snapshots: perturbing them must
not change the loss value, matching their analytic zero gradient.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, Tape, Tensor, finite_diff_check
from .losses import focal_center_loss, instance_loss, inter_view_loss

B, D, M = 3, 5, 4  # batch rows, feature dim, cluster count for the checks
TAU = 0.05


def _split_rows(tape: Tape, point: Tensor, parts: int) -> list[Tensor]:
    n = point.shape[0] // parts
    out = []
    for k in range(parts):
        sel = np.zeros((n, point.shape[0]))
        sel[np.arange(n), k * n + np.arange(n)] = 1.0
        out.append(tape.matmul(tape.constant(sel), point))
    return out


def _rand_centers(rng) -> np.ndarray:
    return rng.normal(size=(M, D))


def _rand_labels(rng) -> np.ndarray:
    labels = rng.integers(0, M, size=B)
    labels[rng.integers(0, B)] = -1  # keep an unlabeled row in the mix
    return labels


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    passed: bool
    n_points: int


def _case_instance(rng):
    target = rng.normal(size=(B, D))

    def fn(tape, point):
        return instance_loss(tape, point, tape.constant(target), stop_grad=False)

    return fn, rng.normal(size=(B, D))


def _case_instance_no_stopgrad(rng):
    def fn(tape, point):
        z, x2 = _split_rows(tape, point, 2)
        return instance_loss(tape, z, x2, stop_grad=False)

    return fn, rng.normal(size=(2 * B, D))


def _case_inter_view(rng):
    centers = _rand_centers(rng)
    labels = _rand_labels(rng)

    def fn(tape, point):
        return inter_view_loss(tape, point, centers, labels)

    return fn, rng.normal(size=(B, D))


def _case_intra_view(rng):
    c1, c2 = _rand_centers(rng), _rand_centers(rng)
    labels = _rand_labels(rng)

    def fn(tape, point):
        x1, x2 = _split_rows(tape, point, 2)
        a = focal_center_loss(tape, x1, c1, labels, TAU)
        b = focal_center_loss(tape, x2, c2, labels, TAU)
        return tape.add(a, b)

    return fn, rng.normal(size=(2 * B, D))


def _case_reduced_intra(rng):
    centers = _rand_centers(rng)
    labels = _rand_labels(rng)

    def fn(tape, point):
        return focal_center_loss(tape, point, centers, labels, TAU)

    return fn, rng.normal(size=(B, D))


def _case_total(rng):
    c1, c2 = _rand_centers(rng), _rand_centers(rng)
    labels = _rand_labels(rng)
    w = rng.normal(size=(D, D))
    b = rng.normal(size=D)
    point = rng.normal(size=(2 * B, D))
    x2_frozen = point[B:].copy()  # stop-gradient target: constant snapshot

    def fn(tape, p):
        x1, x2 = _split_rows(tape, p, 2)
        z = tape.add(tape.matmul(x1, tape.constant(w)), tape.constant(b))
        inst = instance_loss(tape, z, tape.constant(x2_frozen), stop_grad=False)
        inter = inter_view_loss(tape, z, c2, labels)
        intra = tape.add(
            focal_center_loss(tape, x1, c1, labels, TAU),
            focal_center_loss(tape, x2, c2, labels, TAU),
        )
        return tape.add(tape.add(inst, inter), intra)

    return fn, point


def _case_total_symmetric(rng):
    c1, c2 = _rand_centers(rng), _rand_centers(rng)
    labels = _rand_labels(rng)
    w1 = rng.normal(size=(D, D))
    b1 = rng.normal(size=D)
    w2 = rng.normal(size=(D, D))
    b2 = rng.normal(size=D)
    point = rng.normal(size=(2 * B, D))
    x1_frozen = point[:B].copy()
    x2_frozen = point[B:].copy()

    def fn(tape, p):
        x1, x2 = _split_rows(tape, p, 2)
        z1 = tape.add(tape.matmul(x1, tape.constant(w1)), tape.constant(b1))
        z2 = tape.add(tape.matmul(x2, tape.constant(w2)), tape.constant(b2))
        inst = tape.add(
            instance_loss(tape, z1, tape.constant(x2_frozen), stop_grad=False),
            instance_loss(tape, z2, tape.constant(x1_frozen), stop_grad=False),
        )
        inter = tape.add(
            inter_view_loss(tape, z1, c2, labels),
            inter_view_loss(tape, z2, c1, labels),
        )
        intra = tape.add(
            focal_center_loss(tape, x1, c1, labels, TAU),
            focal_center_loss(tape, x2, c2, labels, TAU),
        )
        return tape.add(tape.add(inst, inter), intra)

    return fn, point


CASES = {
    "instance": _case_instance,
    "instance_no_stopgrad": _case_instance_no_stopgrad,
    "inter_view": _case_inter_view,
    "intra_view": _case_intra_view,
    "reduced_intra": _case_reduced_intra,
    "total": _case_total,
    "total_symmetric": _case_total_symmetric,
}


def run_case(name: str, n_points: int = 100, tol: float = 1e-4, seed: int = 1234) -> CaseResult:
    name_key = zlib.crc32(name.encode())  # stable across interpreter runs
    rng = np.random.default_rng(np.random.SeedSequence((seed, name_key)))
    worst = 0.0
    for _ in range(n_points):
        fn, point = CASES[name](rng)
        report: GradCheckReport = finite_diff_check(fn, point, tol=tol)
        worst = max(worst, report.max_rel_error)
    return CaseResult(name=name, max_rel_error=worst, passed=worst <= tol, n_points=n_points)


def run_suite(n_points: int = 100, tol: float = 1e-4, seed: int = 1234) -> list[CaseResult]:
    return [run_case(name, n_points=n_points, tol=tol, seed=seed) for name in CASES]
