"""Prediction-level distillation: transport-plan-weighted keypoint alignment.

The loss couples student keypoints to teacher keypoints through an unbalanced
OT plan whose teacher-side marginal carries the ensemble confidence weights;
uncertain teacher keypoints receive less mass and therefore pull the student
less.  Gradients treat the plan as locally constant (envelope treatment): at
the entropic optimum the partial derivative through the plan vanishes to first
order, and the frozen-plan gradient is exact for the surrogate actually
descended.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .geometry import KeypointSet
from .sinkhorn import (
    SinkhornConfig,
    TransportPlan,
    cost_matrix,
    default_config,
    sinkhorn_unbalanced,
)

# distances below this are treated as coincident points: zero subgradient
_COINCIDENT = 1e-12


@dataclass(frozen=True)
class PredictionLossResult:
    loss: float
    plan: TransportPlan
    gradient: np.ndarray  # (M, 2), d loss / d student keypoint coordinates


def _loss_and_gradient(P: np.ndarray, student: np.ndarray, teacher: np.ndarray):
    diff = student[:, None, :] - teacher[None, :, :]  # (M, N, 2)
    dist = np.sqrt((diff ** 2).sum(-1))
    loss = float((P * dist).sum())
    safe = np.where(dist < _COINCIDENT, 1.0, dist)
    unit = np.where((dist < _COINCIDENT)[:, :, None], 0.0, diff / safe[:, :, None])
    grad = (P[:, :, None] * unit).sum(axis=1)
    return loss, grad


def prediction_loss(student: KeypointSet, teacher: KeypointSet,
                    alpha_s: np.ndarray, alpha_t: np.ndarray,
                    cfg: SinkhornConfig | None = None,
                    warm_start: TransportPlan | None = None) -> PredictionLossResult:
    """Solve the plan, then evaluate sum_ij pi_ij * |k_s_i - k_t_j| on it.

    gradient[i] = sum_j pi_ij * (k_s_i - k_t_j) / |k_s_i - k_t_j|, with the
    j-term zero when the points coincide (minimum-norm subgradient).
    """
    M, N = len(student), len(teacher)
    a = np.asarray(alpha_s, dtype=float).reshape(-1)
    b = np.asarray(alpha_t, dtype=float).reshape(-1)
    if a.shape[0] != M or b.shape[0] != N:
        raise DimensionMismatch(
            f"weights {a.shape[0]}x{b.shape[0]} vs sets {M}x{N}")
    C = cost_matrix(student, teacher)
    if cfg is None:
        cfg = default_config(C)
    plan = sinkhorn_unbalanced(C, a, b, cfg, warm_start=warm_start)
    loss, grad = _loss_and_gradient(plan.entries, student.points, teacher.points)
    return PredictionLossResult(loss=loss, plan=plan, gradient=grad)


def uniform_ot_baseline_loss(student: KeypointSet, teacher: KeypointSet,
                             existence: np.ndarray | None = None,
                             cfg: SinkhornConfig | None = None,
                             warm_start: TransportPlan | None = None
                             ) -> PredictionLossResult:
    """Existence-only weighting (the confidence blend with lambda = 0).

    Without explicit existence scores the teacher marginal is uniform 1/N.
    """
    N = len(teacher)
    b = (np.full(N, 1.0 / N) if existence is None
         else np.asarray(existence, dtype=float).reshape(-1))
    a = np.full(len(student), 1.0 / len(student))
    return prediction_loss(student, teacher, a, b, cfg, warm_start=warm_start)
