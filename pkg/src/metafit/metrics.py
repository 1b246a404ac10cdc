"""Evaluation metrics: joint-position errors and rank correlation."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import AlignmentDegenerateError, InvalidInputError, UndefinedCorrelationError


def _check_joints(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidInputError("joint arrays must both be (J, 3)")
    return pred, gt


def mpjpe(pred_joints, gt_joints):
    """Mean Euclidean distance between corresponding joints."""
    pred, gt = _check_joints(pred_joints, gt_joints)
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def similarity_align(pred_joints, gt_joints):
    """Optimal similarity transform (scale, rotation, translation) of pred onto gt.

    Solves the orthogonal Procrustes problem in the least-squares sense and
    returns the aligned copy of ``pred_joints``.

    Raises
    ------
    AlignmentDegenerateError
        If either point set is a single repeated point (no scale/rotation
        is identifiable).
    """
    pred, gt = _check_joints(pred_joints, gt_joints)
    if pred.shape[0] < 3:
        raise InvalidInputError("alignment needs at least 3 joints")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    ss_p = float(np.sum(p0 * p0))
    ss_g = float(np.sum(g0 * g0))
    if ss_p <= 0.0 or ss_g <= 0.0:
        raise AlignmentDegenerateError("degenerate point set: all joints coincide")
    H = p0.T @ g0
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    scale = float(np.trace(np.diag(S) @ D)) / ss_p
    return scale * p0 @ R.T + mu_g


def pa_mpjpe(pred_joints, gt_joints):
    """MPJPE after optimal similarity alignment of pred onto gt."""
    pred, gt = _check_joints(pred_joints, gt_joints)
    aligned = similarity_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned - gt, axis=1)))


def spearman(a, b):
    """Spearman rank correlation with average ranks for ties.

    Raises
    ------
    UndefinedCorrelationError
        If either input is constant.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("inputs must be 1-d arrays of equal length")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("rank correlation undefined for constant input")
    ra = rankdata(a)
    rb = rankdata(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    return float(np.sum(ra * rb) / np.sqrt(np.sum(ra * ra) * np.sum(rb * rb)))


def uncertainty_correlation(records):
    """Spearman correlation between per-task mean final sigma and mpjpe.

    ``records`` are fit-run records carrying ``mean_final_sigma`` and
    ``mpjpe`` attributes; at least 10 are required.
    """
    if len(records) < 10:
        raise InvalidInputError("need at least 10 records")
    sigmas = np.array([r.mean_final_sigma for r in records])
    errors = np.array([r.mpjpe for r in records])
    return spearman(sigmas, errors)
