"""Relation-masked bidirectional pixel affinities and the dense distillation loss.

Feature maps from the two modalities are compared cell-by-cell: a cosine
similarity matrix between all spatial positions drives a masked softmax in
each direction (student->teacher and teacher->student), the two directed
affinities are merged with a probabilistic union, and the result weights the
pairwise feature distances that make up the distillation loss.

Conventions used throughout:

* feature maps are ``[C, H, W]`` tensors; positions are flattened row-major
  so matrices are ``[H*W, H*W]`` with rows indexing student positions and
  columns indexing teacher positions;
* ``relation`` is a binary matrix in the same layout; a zero entry removes
  the pair from every affinity and from the loss;
* a row (or column) whose relation entries are all zero yields an all-zero
  affinity row (no distillation path), never NaN.

``dense_loss_reference`` is an intentionally slow scalar re-implementation
used to cross-check the vectorized path; it shares no tensor code with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import Tensor

from .errors import ContractViolation

Direction = Literal["teacher_given_student", "student_given_teacher"]

COSINE_EPS = 1e-8


def _flatten_positions(feat: Tensor) -> Tensor:
    """[C, H, W] -> [H*W, C] with row-major position order."""
    if feat.ndim != 3:
        raise ContractViolation(f"expected [C, H, W] feature map, got shape {tuple(feat.shape)}")
    return feat.reshape(feat.shape[0], -1).transpose(0, 1)


def cosine_similarity_matrix(feat_student: Tensor, feat_teacher: Tensor) -> Tensor:
    """All-pairs cosine similarity between two [C, H, W] feature maps.

    Zero vectors get an epsilon-stabilized denominator and therefore a
    similarity of exactly 0 against everything.
    """
    if feat_student.shape[0] != feat_teacher.shape[0]:
        raise ContractViolation(
            f"channel mismatch: {feat_student.shape[0]} vs {feat_teacher.shape[0]}"
        )
    vs = _flatten_positions(feat_student)
    vt = _flatten_positions(feat_teacher)
    ns = vs.norm(dim=1).clamp_min(COSINE_EPS)
    nt = vt.norm(dim=1).clamp_min(COSINE_EPS)
    return (vs @ vt.transpose(0, 1)) / (ns[:, None] * nt[None, :])


def directed_affinity(sim: Tensor, relation: Tensor, direction: Direction) -> Tensor:
    """Masked softmax of a similarity matrix along one modality axis.

    ``teacher_given_student`` normalizes each row (a distribution over
    teacher positions for every student position); ``student_given_teacher``
    normalizes each column. Entries with relation 0 are exactly 0, and a
    fully masked row/column comes back all-zero.
    """
    if sim.shape != relation.shape:
        raise ContractViolation(f"shape mismatch: {tuple(sim.shape)} vs {tuple(relation.shape)}")
    if direction == "teacher_given_student":
        axis = 1
    elif direction == "student_given_teacher":
        axis = 0
    else:
        raise ContractViolation(f"unknown direction {direction!r}")
    # Shift by the axis max before exponentiating. The softmax value is
    # invariant to the shift, so detaching it leaves gradients unchanged.
    shift = sim.amax(dim=axis, keepdim=True).detach()
    weights = torch.exp(sim - shift) * relation
    denom = weights.sum(dim=axis, keepdim=True)
    return weights / torch.where(denom > 0, denom, torch.ones_like(denom))


def path_probability(a: Tensor, b: Tensor) -> Tensor:
    """Probabilistic union ``a + b - a*b`` of two directed affinities.

    Both inputs must already be aligned to (student, teacher) indexing with
    entries in [0, 1].
    """
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    for name, m in (("a", a), ("b", b)):
        if bool((m < 0).any()) or bool((m > 1).any()):
            raise ContractViolation(f"{name} has entries outside [0, 1]")
    return (a + b - a * b).clamp(0.0, 1.0)


def pairwise_feature_distance(feat_student: Tensor, feat_teacher: Tensor, norm: str = "l2") -> Tensor:
    """[H*W, H*W] matrix of channel-wise vector distances between positions."""
    vs = _flatten_positions(feat_student)
    vt = _flatten_positions(feat_teacher)
    if vs.shape[1] != vt.shape[1]:
        raise ContractViolation(f"channel mismatch: {vs.shape[1]} vs {vt.shape[1]}")
    if norm == "l1":
        return torch.cdist(vs, vt, p=1)
    if norm == "l2":
        # Gram-matrix expansion; sqrt is masked so coincident vectors give an
        # exact 0 with a zero subgradient instead of NaN.
        sq = (vs * vs).sum(1)[:, None] + (vt * vt).sum(1)[None, :] - 2.0 * (vs @ vt.transpose(0, 1))
        sq = sq.clamp_min(0.0)
        positive = sq > 0
        return torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))) * positive
    raise ContractViolation(f"unknown norm {norm!r}")


@dataclass
class AffinityField:
    """Similarity, both directed affinities, and their union for one scale.

    ``a_student_given_teacher`` is stored in the same (student, teacher)
    orientation as everything else: entry (i, j) is the affinity of student
    position i given teacher position j, i.e. columns are normalized.
    """

    similarity: Tensor
    a_teacher_given_student: Tensor
    a_student_given_teacher: Tensor
    path_prob: Tensor


def compute_affinity_field(
    feat_student: Tensor,
    feat_teacher: Tensor,
    relation: Tensor,
    bidirectional: bool = True,
    detach_affinity: bool = False,
) -> AffinityField:
    """Build the full affinity field between two same-scale feature maps.

    With ``bidirectional=False`` the union is replaced by the
    teacher-given-student direction alone. ``detach_affinity=True`` blocks
    gradients from flowing into the student features through the affinity
    weights (they still flow through the distance term of the loss).
    """
    sim = cosine_similarity_matrix(feat_student, feat_teacher)
    a_ts = directed_affinity(sim, relation, "teacher_given_student")
    a_st = directed_affinity(sim, relation, "student_given_teacher")
    path = path_probability(a_ts, a_st) if bidirectional else a_ts
    if detach_affinity:
        a_ts = a_ts.detach()
        a_st = a_st.detach()
        path = path.detach()
    return AffinityField(sim, a_ts, a_st, path)


def dense_distillation_loss(
    feat_student: Tensor,
    feat_teacher: Tensor,
    path_prob: Tensor,
    norm: str = "l2",
) -> Tensor:
    """Path-probability-weighted sum of cross-position feature distances.

    The double sum is divided by the number of pairs with positive path
    probability so the magnitude stays comparable across scales; with no
    active pair the loss is 0.
    """
    if not bool(torch.isfinite(feat_student).all()) or not bool(torch.isfinite(feat_teacher).all()):
        raise ContractViolation("non-finite feature values")
    dist = pairwise_feature_distance(feat_student, feat_teacher, norm=norm)
    if dist.shape != path_prob.shape:
        raise ContractViolation(
            f"path probability shape {tuple(path_prob.shape)} does not match {tuple(dist.shape)}"
        )
    active = (path_prob > 0).sum()
    if int(active) == 0:
        return (feat_student.sum() * 0.0) + (feat_teacher.sum() * 0.0)
    return (path_prob * dist).sum() / active


def scale_distillation_loss(
    feat_student: Tensor,
    feat_teacher: Tensor,
    relation: Tensor,
    bidirectional: bool = True,
    detach_affinity: bool = False,
    norm: str = "l2",
) -> Tensor:
    """Affinity field plus loss for a single scale."""
    field = compute_affinity_field(
        feat_student, feat_teacher, relation,
        bidirectional=bidirectional, detach_affinity=detach_affinity,
    )
    return dense_distillation_loss(feat_student, feat_teacher, field.path_prob, norm=norm)


def add_loss_all_scales(
    student_levels: dict[int, Tensor],
    teacher_levels: dict[int, Tensor],
    relations: dict[int, Tensor],
    bidirectional: bool = True,
    detach_affinity: bool = False,
    norm: str = "l2",
) -> Tensor:
    """Mean of the per-scale dense distillation losses.

    Scales are processed independently; there are no cross-scale terms.
    """
    if set(student_levels) != set(teacher_levels):
        raise ContractViolation(
            f"stage taps differ: {sorted(student_levels)} vs {sorted(teacher_levels)}"
        )
    if set(relations) != set(student_levels):
        raise ContractViolation(
            f"relations cover {sorted(relations)}, expected {sorted(student_levels)}"
        )
    losses = [
        scale_distillation_loss(
            student_levels[l], teacher_levels[l], relations[l],
            bidirectional=bidirectional, detach_affinity=detach_affinity, norm=norm,
        )
        for l in sorted(student_levels)
    ]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Brute-force reference path
# ---------------------------------------------------------------------------

def dense_loss_reference(
    feat_student,
    feat_teacher,
    relation,
    bidirectional: bool = True,
    norm: str = "l2",
):
    """Scalar double-loop re-derivation of the affinities and the loss.

    Everything is computed with plain Python floats from first principles:
    per-position cosine similarities, per-row and per-column masked softmax
    normalizers, the union, and the distance-weighted sum. Returns
    ``(loss, a_teacher_given_student, a_student_given_teacher, path_prob)``
    with the matrices as float64 numpy arrays.

    Used for verification only; O((H*W)^2 * C) in pure Python.
    """
    fs = np.asarray(feat_student.detach().cpu().numpy() if isinstance(feat_student, Tensor) else feat_student, dtype=np.float64)
    ft = np.asarray(feat_teacher.detach().cpu().numpy() if isinstance(feat_teacher, Tensor) else feat_teacher, dtype=np.float64)
    rel = np.asarray(relation.detach().cpu().numpy() if isinstance(relation, Tensor) else relation, dtype=np.float64)
    c = fs.shape[0]
    n = fs.shape[1] * fs.shape[2]
    vs = fs.reshape(c, n).T
    vt = ft.reshape(c, n).T

    def cos(u, v):
        du = math.sqrt(sum(x * x for x in u))
        dv = math.sqrt(sum(x * x for x in v))
        num = sum(x * y for x, y in zip(u, v))
        return num / (max(du, COSINE_EPS) * max(dv, COSINE_EPS))

    sim = [[cos(vs[i], vt[j]) for j in range(n)] for i in range(n)]

    a_ts = [[0.0] * n for _ in range(n)]
    for i in range(n):
        denom = sum(math.exp(sim[i][k]) * rel[i][k] for k in range(n))
        if denom > 0:
            for j in range(n):
                a_ts[i][j] = math.exp(sim[i][j]) * rel[i][j] / denom
    a_st = [[0.0] * n for _ in range(n)]
    for j in range(n):
        denom = sum(math.exp(sim[k][j]) * rel[k][j] for k in range(n))
        if denom > 0:
            for i in range(n):
                a_st[i][j] = math.exp(sim[i][j]) * rel[i][j] / denom

    loss = 0.0
    count = 0
    for i in range(n):
        for j in range(n):
            a = a_ts[i][j]
            b = a_st[i][j]
            p = a + b - a * b if bidirectional else a
            if norm == "l2":
                d = math.sqrt(sum((x - y) ** 2 for x, y in zip(vs[i], vt[j])))
            else:
                d = sum(abs(x - y) for x, y in zip(vs[i], vt[j]))
            if p > 0:
                count += 1
            loss += p * d
    loss = loss / count if count else 0.0
    path = [[a_ts[i][j] + a_st[i][j] - a_ts[i][j] * a_st[i][j] if bidirectional else a_ts[i][j]
             for j in range(n)] for i in range(n)]
    return loss, np.array(a_ts), np.array(a_st), np.array(path)


def random_oracle_instance(seed: int, cells: int = 4, channels: int = 8, min_active: float = 0.3):
    """Seeded random (features, relation) pair for oracle checks.

    The relation mask is redrawn until at least ``min_active`` of its entries
    are ones, so the instance always has distillation paths.
    """
    rng = np.random.default_rng(seed)
    fs = rng.standard_normal((channels, cells, cells))
    ft = rng.standard_normal((channels, cells, cells))
    n = cells * cells
    while True:
        rel = (rng.random((n, n)) < 0.6).astype(np.float64)
        if rel.mean() >= min_active:
            break
    return fs, ft, rel


def oracle_check(seed: int, cells: int = 4, channels: int = 8) -> dict:
    """Compare the vectorized loss against the brute-force reference.

    Returns a JSON-ready dict with both loss values, their relative
    deviation, and the max elementwise deviation across the affinity
    matrices and the path probability.
    """
    fs, ft, rel = random_oracle_instance(seed, cells=cells, channels=channels)
    ts = torch.tensor(fs, dtype=torch.float64)
    tt = torch.tensor(ft, dtype=torch.float64)
    trel = torch.tensor(rel, dtype=torch.float64)

    field = compute_affinity_field(ts, tt, trel)
    vec_loss = float(dense_distillation_loss(ts, tt, field.path_prob))
    ref_loss, ref_ts, ref_st, ref_path = dense_loss_reference(fs, ft, rel)

    dev = max(
        float(np.abs(field.a_teacher_given_student.numpy() - ref_ts).max()),
        float(np.abs(field.a_student_given_teacher.numpy() - ref_st).max()),
        float(np.abs(field.path_prob.numpy() - ref_path).max()),
    )
    rel_err = abs(vec_loss - ref_loss) / max(abs(ref_loss), 1e-12)
    return {
        "seed": seed,
        "cells": cells,
        "channels": channels,
        "vectorized_loss": vec_loss,
        "bruteforce_loss": ref_loss,
        "loss_relative_error": rel_err,
        "max_affinity_deviation": dev,
    }
