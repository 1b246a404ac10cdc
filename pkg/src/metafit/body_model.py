"""Articulated kinematic chain with shape-dependent bone lengths.

The skeleton is a rooted tree of 3-DOF axis-angle joints. Joint positions
are produced by composing per-joint rotations down the chain and stretching
each unit rest direction by a bone length that depends linearly on a
10-dimensional shape vector. The root stays pinned at the origin; a
weak-perspective camera (see :mod:`metafit.energy`) handles placement in
the image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateShapeError, InvalidInputError

NUM_SHAPE_COEFFS = 10

# Below this rotation angle the Rodrigues formula switches to a 2nd-order
# Taylor expansion to avoid the 0/0 at the identity.
SMALL_ANGLE = 1e-8


def _skew_batch(v):
    """Skew-symmetric matrices for an (..., 3) stack of vectors."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_batch(v):
    """Rotation matrices for an (N, 3) stack of axis-angle vectors.

    Uses ``R = I + a K + b K^2`` with ``a = sin(t)/t`` and
    ``b = (1 - cos(t))/t^2`` on the unnormalized skew ``K``; below
    ``SMALL_ANGLE`` the coefficients switch to their series values so the
    map stays continuous through zero.
    """
    theta = np.linalg.norm(v, axis=-1)
    theta_sq = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta_sq / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta_sq / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = _skew_batch(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _rodrigues_jacobian_batch(v):
    """Derivatives of the Rodrigues map for an (N, 3) stack.

    Returns (N, 3, 3, 3); entry ``[n, i]`` is dR/dv_i. Away from zero this
    is the closed form ``((v_i [v]x + [v x (I - R) e_i]x) / |v|^2) R``; the
    small-angle branch uses the first-order expansion of the same map.
    """
    R = _rodrigues_batch(v)
    theta_sq = np.einsum("...i,...i->...", v, v)
    small = theta_sq < SMALL_ANGLE**2
    K = _skew_batch(v)
    eye = np.eye(3)

    # cross[n, i] = v_n x (I - R_n) e_i
    ImR_cols = (eye - R).transpose(0, 2, 1)
    crossed = np.cross(v[:, None, :], ImR_cols)
    numer = v[:, :, None, None] * K[:, None, :, :] + _skew_batch(crossed)
    safe = np.where(small, 1.0, theta_sq)
    out = (numer / safe[:, None, None, None]) @ R[:, None, :, :]

    if np.any(small):
        Ki = _skew_batch(eye)  # (3, 3, 3)
        first = Ki[None] + 0.5 * (
            np.einsum("iab,nbc->niac", Ki, K) + np.einsum("nab,ibc->niac", K, Ki)
        )
        out = np.where(small[:, None, None, None], first, out)
    return out


def _check_axis_angle(axis_angle):
    v = np.asarray(axis_angle, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise InvalidInputError(f"axis-angle must be a finite 3-vector, got {axis_angle!r}")
    return v


def rodrigues(axis_angle):
    """Convert an axis-angle 3-vector to a 3x3 rotation matrix.

    The direction of ``axis_angle`` is the rotation axis and its norm the
    rotation angle in radians. Angles below ``SMALL_ANGLE`` use the series
    expansion of the rotation so the map is continuous at zero.

    Raises
    ------
    InvalidInputError
        If the input is not a finite 3-vector.
    """
    v = _check_axis_angle(axis_angle)
    return _rodrigues_batch(v[None])[0]


def rodrigues_jacobian(axis_angle):
    """Derivative of the Rodrigues rotation with respect to its 3 inputs.

    Returns an array ``dR`` of shape (3, 3, 3) with ``dR[i]`` the derivative
    of the rotation matrix with respect to component ``i``.
    """
    v = _check_axis_angle(axis_angle)
    return _rodrigues_jacobian_batch(v[None])[0]


@dataclass(frozen=True)
class KinematicTree:
    """Skeleton topology, rest geometry, and shape basis.

    Attributes
    ----------
    joint_count : int
        Number of joints J.
    parent : (J,) int array
        Parent index per joint; ``parent[0] == -1`` marks the root and
        ``parent[j] < j`` for every other joint (topological order).
    rest_offset : (J, 3) array
        Unit bone direction in the parent frame. The root entry is unused
        by forward kinematics but still must have unit norm.
    base_length : (J,) array
        Nonnegative bone lengths in model units.
    shape_basis : (J, 10) array
        Linear map from shape coefficients to bone-length deltas.
    names : tuple of str, optional
        Joint names for bookkeeping; not serialized.
    """

    joint_count: int
    parent: np.ndarray
    rest_offset: np.ndarray
    base_length: np.ndarray
    shape_basis: np.ndarray
    names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        J = int(self.joint_count)
        parent = np.asarray(self.parent, dtype=int)
        offset = np.asarray(self.rest_offset, dtype=float)
        length = np.asarray(self.base_length, dtype=float)
        basis = np.asarray(self.shape_basis, dtype=float)
        if parent.shape != (J,) or offset.shape != (J, 3) or length.shape != (J,):
            raise InvalidInputError("tree arrays do not match joint_count")
        if basis.shape != (J, NUM_SHAPE_COEFFS):
            raise InvalidInputError(f"shape_basis must be (J, {NUM_SHAPE_COEFFS})")
        if parent[0] != -1:
            raise InvalidInputError("parent[0] must be -1 (root)")
        if J > 1 and not np.all((parent[1:] >= 0) & (parent[1:] < np.arange(1, J))):
            raise InvalidInputError("parent indices must form a topologically ordered tree")
        norms = np.linalg.norm(offset, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InvalidInputError("every rest_offset must have unit norm")
        if np.any(length < 0) or not np.all(np.isfinite(length)):
            raise InvalidInputError("base lengths must be finite and nonnegative")
        # Worst case of base + B.beta over the box |beta|_inf <= 3 must stay
        # positive, so every shape in the supported range yields a valid bone.
        worst = length - 3.0 * np.abs(basis).sum(axis=1)
        if np.any(worst <= 0):
            raise DegenerateShapeError(
                "shape_basis admits nonpositive bone lengths within |beta|_inf <= 3"
            )
        for name, arr in (
            ("parent", parent),
            ("rest_offset", offset),
            ("base_length", length),
            ("shape_basis", basis),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "joint_count", J)

    def children(self):
        """List of child index lists, one per joint."""
        out = [[] for _ in range(self.joint_count)]
        for j in range(1, self.joint_count):
            out[self.parent[j]].append(j)
        return out

    def to_json_dict(self):
        return {
            "joint_count": self.joint_count,
            "parent": self.parent.tolist(),
            "rest_offset": self.rest_offset.tolist(),
            "base_length": self.base_length.tolist(),
            "shape_basis": self.shape_basis.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc):
        try:
            return cls(
                joint_count=doc["joint_count"],
                parent=np.asarray(doc["parent"]),
                rest_offset=np.asarray(doc["rest_offset"]),
                base_length=np.asarray(doc["base_length"]),
                shape_basis=np.asarray(doc["shape_basis"]),
            )
        except KeyError as exc:
            raise InvalidInputError(f"tree document missing field {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class FitParams:
    """Pose, shape, and camera parameters of one fit.

    ``theta`` holds 3J axis-angle values (radians), ``beta`` the 10 shape
    coefficients, and ``camera`` the weak-perspective triple ``[s, tx, ty]``.

    The flat optimization vector interleaves nothing: entries ``0..3J-1``
    are pose and ``3J..3J+2`` camera. Shape is indexed separately and never
    enters the flat vector (it is excluded from the active set).
    """

    theta: np.ndarray
    beta: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        camera = np.asarray(self.camera, dtype=float)
        if theta.ndim != 1 or theta.size % 3 != 0 or theta.size == 0:
            raise InvalidInputError("theta must be a flat 3J vector")
        if beta.shape != (NUM_SHAPE_COEFFS,):
            raise InvalidInputError(f"beta must have {NUM_SHAPE_COEFFS} entries")
        if camera.shape != (3,):
            raise InvalidInputError("camera must be [s, tx, ty]")
        for name, arr in (("theta", theta), ("beta", beta), ("camera", camera)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def joint_count(self):
        return self.theta.size // 3

    @property
    def flat_size(self):
        """Size of the pose+camera optimization vector (75 for J = 24)."""
        return self.theta.size + 3

    def flat(self):
        """Flat pose+camera vector; beta is carried separately."""
        return np.concatenate([self.theta, self.camera])

    def replace_flat(self, vec):
        """New FitParams with pose+camera taken from ``vec``, beta kept."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.flat_size,):
            raise InvalidInputError(f"flat vector must have {self.flat_size} entries")
        n = self.theta.size
        return FitParams(theta=vec[:n], beta=self.beta, camera=vec[n:])

    def is_finite(self):
        return bool(
            np.all(np.isfinite(self.theta))
            and np.all(np.isfinite(self.beta))
            and np.all(np.isfinite(self.camera))
        )


def bone_lengths(tree, beta):
    """Bone lengths for a given shape: ``base_length + shape_basis @ beta``.

    Raises
    ------
    DegenerateShapeError
        If any resulting length is not strictly positive.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (NUM_SHAPE_COEFFS,):
        raise InvalidInputError(f"beta must have {NUM_SHAPE_COEFFS} entries")
    lengths = tree.base_length + tree.shape_basis @ beta
    if np.any(lengths <= 0):
        raise DegenerateShapeError(f"nonpositive bone length for beta={beta.tolist()}")
    return lengths


def _check_dims(tree, params):
    if params.theta.size != 3 * tree.joint_count:
        raise InvalidInputError(
            f"theta has {params.theta.size} entries, tree needs {3 * tree.joint_count}"
        )


def forward_kinematics(tree, params):
    """3D joint positions for the given pose and shape.

    The root sits at the origin. Every other joint is placed at
    ``parent_position + R_global[j] @ (length_j * rest_offset[j])`` where
    ``R_global[j]`` composes the rotations along the chain from the root
    down to and including joint ``j``.
    """
    _check_dims(tree, params)
    J = tree.joint_count
    lengths = bone_lengths(tree, params.beta)
    theta = params.theta.reshape(J, 3)
    if not np.all(np.isfinite(theta)):
        raise InvalidInputError("theta contains non-finite values")
    locals_ = _rodrigues_batch(theta)
    positions = np.zeros((J, 3))
    globals_ = np.empty((J, 3, 3))
    globals_[0] = locals_[0]
    bones = lengths[:, None] * tree.rest_offset
    for j in range(1, J):
        p = tree.parent[j]
        globals_[j] = globals_[p] @ locals_[j]
        positions[j] = positions[p] + globals_[j] @ bones[j]
    return positions


def _ancestor_mask(tree):
    """Boolean (J, J) matrix: entry [k, j] is True when k lies on the chain
    from the root down to j (inclusive). Cached on the tree."""
    cached = getattr(tree, "_ancestor_mask_cache", None)
    if cached is not None:
        return cached
    J = tree.joint_count
    mask = np.zeros((J, J), dtype=bool)
    for j in range(J):
        k = j
        while k != -1:
            mask[k, j] = True
            k = tree.parent[k]
    mask.setflags(write=False)
    object.__setattr__(tree, "_ancestor_mask_cache", mask)
    return mask


def fk_jacobian(tree, params):
    """Joint positions plus derivatives with respect to pose and shape.

    Returns
    -------
    positions : (J, 3) array
    d_theta : (J, 3, 3J) array
        ``d_theta[j, :, 3k + c]`` is the derivative of joint ``j`` with
        respect to pose component ``c`` of joint ``k``.
    d_beta : (J, 3, 10) array

    Notes
    -----
    For joint ``j`` in the subtree of ``k`` the derivative has the closed
    form ``A_kc @ (p_j - p_anchor(k))`` where ``A_kc`` conjugates the local
    Rodrigues derivative into the world frame and the anchor is ``k``'s
    parent position (the subtree rotates rigidly about it).
    """
    _check_dims(tree, params)
    J = tree.joint_count
    lengths = bone_lengths(tree, params.beta)
    theta = params.theta.reshape(J, 3)
    if not np.all(np.isfinite(theta)):
        raise InvalidInputError("theta contains non-finite values")
    bones = lengths[:, None] * tree.rest_offset

    locals_ = _rodrigues_batch(theta)
    dlocals = _rodrigues_jacobian_batch(theta)

    positions = np.zeros((J, 3))
    globals_ = np.empty((J, 3, 3))
    anchors = np.zeros((J, 3))  # parent position of each joint, root -> origin
    globals_[0] = locals_[0]
    for j in range(1, J):
        p = tree.parent[j]
        globals_[j] = globals_[p] @ locals_[j]
        positions[j] = positions[p] + globals_[j] @ bones[j]
        anchors[j] = positions[p]

    # A[k, c] = Rg_parent(k) @ dR_k/dv_c @ Rg_k^T  (world-frame generator).
    parent_globals = np.empty((J, 3, 3))
    parent_globals[0] = np.eye(3)
    parent_globals[1:] = globals_[tree.parent[1:]]
    A = np.einsum("kab,kcbd,ked->kcae", parent_globals, dlocals, globals_)

    mask = _ancestor_mask(tree)
    # lever[k, j] = p_j - anchor_k for j in subtree(k), zero elsewhere.
    lever = np.where(mask[:, :, None], positions[None, :, :] - anchors[:, None, :], 0.0)
    d_theta = np.einsum("kcae,kje->jakc", A, lever).reshape(J, 3, 3 * J)

    # Shape only stretches bones: d p_j / d beta_m sums the rotated unit
    # offsets of every non-root bone on the chain to j.
    units = np.einsum("kab,kb->ka", globals_, tree.rest_offset)
    chain = mask.copy()
    chain[0, :] = False  # root bone never enters FK
    d_beta = np.einsum("kj,ka,km->jam", chain, units, tree.shape_basis)

    return positions, d_theta, d_beta


# Default 24-joint humanoid: pelvis root, three-segment spine, neck and
# head, clavicle + three-segment arms, four-segment legs. Rest offsets all
# lie in the image (x-y) plane so a zero pose faces the camera head-on.
#
# Distal segments (forearms, hands, shins, feet, head) are near-zero-length
# stubs. Their joints barely move any keypoint, so their gradients sit just
# above the caching threshold at the start of a fit and sink below it once
# the strongly observed parameters converge; they are the weakly observed
# degrees of freedom that selective caching exists to freeze.
_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])

_DEFAULT_JOINTS = [
    # name, parent, offset direction, base length
    ("pelvis", -1, _Y, 1.0),
    ("spine1", 0, _Y, 0.30),
    ("spine2", 1, _Y, 0.30),
    ("chest", 2, _Y, 3.00),
    ("neck", 3, _Y, 0.0050),
    ("head", 4, _Y, 0.0018),
    ("l_clavicle", 3, _X, 0.0045),
    ("l_shoulder", 6, _X, 0.0030),
    ("l_elbow", 7, _X, 0.0018),
    ("l_wrist", 8, _X, 0.0010),
    ("r_clavicle", 3, -_X, 0.0045),
    ("r_shoulder", 10, -_X, 0.0030),
    ("r_elbow", 11, -_X, 0.0018),
    ("r_wrist", 12, -_X, 0.0010),
    ("l_hip", 0, (_X - _Y) / np.sqrt(2.0), 5.00),
    ("l_knee", 14, -_Y, 0.0050),
    ("l_ankle", 15, -_Y, 0.0025),
    ("l_foot", 16, -_Y, 0.0012),
    ("r_hip", 0, (-_X - _Y) / np.sqrt(2.0), 5.00),
    ("r_knee", 18, -_Y, 0.0050),
    ("r_ankle", 19, -_Y, 0.0025),
    ("r_foot", 20, -_Y, 0.0012),
    ("l_hand", 9, _X, 0.0005),
    ("r_hand", 13, -_X, 0.0005),
]

DEFAULT_TREE_SEED = 20240611


def default_tree():
    """The built-in 24-joint humanoid with a reproducible shape basis.

    The shape basis is drawn once from a fixed seed, scaled to each bone's
    base length, and kept well inside the positivity margin required over
    ``|beta|_inf <= 3``. The same tree is produced on every call.
    """
    names = tuple(j[0] for j in _DEFAULT_JOINTS)
    parent = np.array([j[1] for j in _DEFAULT_JOINTS])
    offset = np.array([np.asarray(j[2], dtype=float) for j in _DEFAULT_JOINTS])
    length = np.array([j[3] for j in _DEFAULT_JOINTS])
    # Topological reorder is not needed: the table above already satisfies
    # parent[j] < j except for the two hands, which do too (22 > 9, 23 > 13).
    rng = np.random.default_rng(DEFAULT_TREE_SEED)
    basis = rng.normal(0.0, 1.0, size=(len(names), NUM_SHAPE_COEFFS))
    # Row scale: 3-sigma shape stays within ~30% of the base length.
    basis *= (0.03 * length / np.sqrt(NUM_SHAPE_COEFFS))[:, None]
    basis[0] = 0.0  # root bone never enters FK
    return KinematicTree(
        joint_count=len(names),
        parent=parent,
        rest_offset=offset,
        base_length=length,
        shape_basis=basis,
        names=names,
    )
