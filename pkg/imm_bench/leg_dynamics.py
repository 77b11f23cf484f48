import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, model_validator
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

COULOMB_SMOOTHING = 0.01  # rad/s, width of the tanh used in place of sign(qd)


class InvalidArgumentError(ValueError):
    """Raised when a state or model argument has the wrong shape or is not finite"""


class SingularDynamicsError(RuntimeError):
    """Raised when the joint-space mass matrix cannot be factorized"""


class BaseTransform(BaseModel):
    position: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.32])
    rpy: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])


class LegModel(BaseModel):
    """
    Parameters of a serial chain of revolute joints ending in a point foot.

    Link i hangs off joint i. Its frame has its origin on the joint axis and
    the next joint (or the foot, for the last link) sits at
    link_lengths[i] * link_directions[i] in that frame.
    """

    n_dof: int
    link_lengths: List[float]
    link_masses: List[float]
    link_com_offsets: List[List[float]]
    link_inertias: List[List[List[float]]]
    joint_axes: List[List[float]]
    link_directions: Optional[List[List[float]]] = None
    base_transform: BaseTransform = Field(default_factory=BaseTransform)
    gravity: List[float] = Field(default_factory=lambda: [0.0, 0.0, -9.81])
    viscous_friction: Optional[List[float]] = None
    coulomb_friction: Optional[List[float]] = None

    _axes: np.ndarray = PrivateAttr()
    _link_vectors: np.ndarray = PrivateAttr()
    _masses: np.ndarray = PrivateAttr()
    _coms: np.ndarray = PrivateAttr()
    _inertias: np.ndarray = PrivateAttr()
    _gravity: np.ndarray = PrivateAttr()
    _viscous: np.ndarray = PrivateAttr()
    _coulomb: np.ndarray = PrivateAttr()
    _base_rotation: np.ndarray = PrivateAttr()
    _base_position: np.ndarray = PrivateAttr()
    _spatial_inertias: List[np.ndarray] = PrivateAttr()
    _tree_transforms: List[np.ndarray] = PrivateAttr()
    _axis_skews: np.ndarray = PrivateAttr()
    _axis_skews_sq: np.ndarray = PrivateAttr()
    _moves: np.ndarray = PrivateAttr()

    @model_validator(mode="after")
    def check_dimensions(self) -> "LegModel":
        n = self.n_dof
        if n < 1:
            raise ValueError("n_dof must be at least 1")

        per_joint = {
            "link_lengths": self.link_lengths,
            "link_masses": self.link_masses,
            "link_com_offsets": self.link_com_offsets,
            "link_inertias": self.link_inertias,
            "joint_axes": self.joint_axes,
            "link_directions": self.link_directions,
            "viscous_friction": self.viscous_friction,
            "coulomb_friction": self.coulomb_friction,
        }
        for name, values in per_joint.items():
            if len(values) != n:
                raise ValueError(f"{name} has {len(values)} entries, expected n_dof={n}")

        if any(m <= 0 for m in self.link_masses):
            raise ValueError("link_masses must be positive")
        for i, axis in enumerate(self.joint_axes):
            if len(axis) != 3 or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ValueError(f"joint_axes[{i}] must be a unit 3-vector")
        for i, direction in enumerate(self.link_directions):
            if len(direction) != 3 or abs(np.linalg.norm(direction) - 1.0) > 1e-9:
                raise ValueError(f"link_directions[{i}] must be a unit 3-vector")
        for i, inertia in enumerate(self.link_inertias):
            arr = np.asarray(inertia, dtype=float)
            if arr.shape != (3, 3):
                raise ValueError(f"link_inertias[{i}] must be 3x3")
            if not np.allclose(arr, arr.T, atol=1e-12):
                raise ValueError(f"link_inertias[{i}] must be symmetric")
            if np.linalg.eigvalsh(arr).min() < -1e-12:
                raise ValueError(f"link_inertias[{i}] must be positive semidefinite")
        if len(self.gravity) != 3:
            raise ValueError("gravity must be a 3-vector")
        self._build_cache()
        return self

    def model_post_init(self, __context) -> None:
        # Runs before the after-validator, so optional per-joint lists get their defaults here
        n = self.n_dof
        if self.link_directions is None:
            self.link_directions = [[0.0, 0.0, -1.0] for _ in range(n)]
        if self.viscous_friction is None:
            self.viscous_friction = [0.0] * n
        if self.coulomb_friction is None:
            self.coulomb_friction = [0.0] * n

    def _build_cache(self) -> None:
        self._axes = np.asarray(self.joint_axes, dtype=float)
        self._link_vectors = np.asarray(self.link_lengths, dtype=float)[:, None] * np.asarray(
            self.link_directions, dtype=float
        )
        self._masses = np.asarray(self.link_masses, dtype=float)
        self._coms = np.asarray(self.link_com_offsets, dtype=float)
        self._inertias = np.asarray(self.link_inertias, dtype=float)
        self._gravity = np.asarray(self.gravity, dtype=float)
        self._viscous = np.asarray(self.viscous_friction, dtype=float)
        self._coulomb = np.asarray(self.coulomb_friction, dtype=float)
        self._base_rotation = Rotation.from_euler("xyz", self.base_transform.rpy).as_matrix()
        self._base_position = np.asarray(self.base_transform.position, dtype=float)
        self._axis_skews = _skew_stack(self._axes)
        self._axis_skews_sq = self._axis_skews @ self._axis_skews
        # _moves[i, j] is 1 when joint j moves link i
        self._moves = np.tri(self.n_dof)

        self._spatial_inertias = [
            spatial_inertia(self._masses[i], self._coms[i], self._inertias[i]) for i in range(self.n_dof)
        ]
        # Fixed part of each parent-to-link transform; the joint rotation is applied per call
        self._tree_transforms = [rot(self._base_rotation.T) @ xlt(self._base_position)]
        for i in range(1, self.n_dof):
            self._tree_transforms.append(xlt(self._link_vectors[i - 1]))


@dataclass
class JointReading:
    t: float
    q: np.ndarray
    qd: np.ndarray
    tau_m: np.ndarray


@dataclass
class DynamicsTerms:
    M: np.ndarray
    C: np.ndarray
    g: np.ndarray
    tau_f: np.ndarray


@dataclass
class FootState:
    position: np.ndarray
    velocity: np.ndarray
    J: np.ndarray
    Jdot: np.ndarray


# Spatial algebra helpers (6-vectors ordered angular then linear)

def skew(r: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])


def rot(E: np.ndarray) -> np.ndarray:
    X = np.zeros((6, 6))
    X[:3, :3] = E
    X[3:, 3:] = E
    return X


def xlt(r: np.ndarray) -> np.ndarray:
    X = np.eye(6)
    X[3:, :3] = -skew(r)
    return X


def crm(v: np.ndarray) -> np.ndarray:
    w = skew(v[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = w
    out[3:, :3] = skew(v[3:])
    out[3:, 3:] = w
    return out


def crf(v: np.ndarray) -> np.ndarray:
    return -crm(v).T


def spatial_inertia(mass: float, com: np.ndarray, inertia: np.ndarray) -> np.ndarray:
    """
    Rigid-body spatial inertia about the link frame origin
    """
    c = skew(com)
    out = np.zeros((6, 6))
    out[:3, :3] = inertia + mass * c @ c.T
    out[:3, 3:] = mass * c
    out[3:, :3] = mass * c.T
    out[3:, 3:] = mass * np.eye(3)
    return out


def rod_inertia(mass: float, length: float, radius: float, direction: np.ndarray) -> np.ndarray:
    """
    Inertia about the COM of a solid cylinder lying along `direction`
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    axial = 0.5 * mass * radius * radius
    transverse = mass * (3.0 * radius * radius + length * length) / 12.0
    return transverse * np.eye(3) + (axial - transverse) * np.outer(d, d)


def _check_vector(name: str, value, n: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise InvalidArgumentError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def _skew_stack(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _joint_rotations(model: LegModel, q: np.ndarray) -> np.ndarray:
    # Rodrigues about each joint axis, all joints at once
    s = np.sin(q)[:, None, None]
    c = np.cos(q)[:, None, None]
    return np.eye(3) + s * model._axis_skews + (1.0 - c) * model._axis_skews_sq


def _chain(model: LegModel, q: np.ndarray):
    """
    World-frame kinematics: link rotations, joint axes, joint origins
    (one extra entry for the foot) and link COMs.
    """
    n = model.n_dof
    local = _joint_rotations(model, q)
    R = np.empty((n, 3, 3))
    o = np.empty((n + 1, 3))

    parent_R = model._base_rotation
    o[0] = model._base_position
    for i in range(n):
        R[i] = parent_R @ local[i]
        o[i + 1] = o[i] + R[i] @ model._link_vectors[i]
        parent_R = R[i]
    parents = np.concatenate([model._base_rotation[None], R[:-1]])
    z = np.einsum("iab,ib->ia", parents, model._axes)
    com = o[:n] + np.einsum("iab,ib->ia", R, model._coms)
    return local, R, z, o, com


def _link_jacobians(model: LegModel, z: np.ndarray, o: np.ndarray, com: np.ndarray) -> np.ndarray:
    """
    COM Jacobian columns of every link, Jv[i, j] = z_j x (com_i - o_j) for j <= i
    """
    n = model.n_dof
    Jv = np.cross(z[None, :, :], com[:, None, :] - o[None, :n, :])
    return Jv * model._moves[:, :, None]


def _column_rates(cols: np.ndarray, z: np.ndarray, w: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """
    Time derivative of Jacobian columns cols[..., j] = z_j x (p - o_j) of a point
    fixed on the chain, given the link angular velocities w.

    Uses d(col_j)/dq_k = z_min(j,k) x col_max(j,k).
    """
    weighted = cols * qd[:, None]
    tail = np.flip(np.cumsum(np.flip(weighted, -2), axis=-2), -2) - weighted
    return np.cross(w, cols) + np.cross(z, tail)


def _angular_quadratic(model: LegModel, z: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """
    sum_i Jw_i^T X_i Jw_i for per-link vectors[i, k] = X_i z_k
    """
    mask = model._moves
    return np.einsum("ij,ik,ja,ika->jk", mask, mask, z, vectors)


def _world_inertias(model: LegModel, R: np.ndarray) -> np.ndarray:
    return R @ model._inertias @ R.transpose(0, 2, 1)


def mass_matrix_partials(model: LegModel, q) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns M(q) assembled from link Jacobians and dM with dM[k] = dM/dq_k
    """
    n = model.n_dof
    q = _check_vector("q", q, n)
    _, R, z, o, com = _chain(model, q)
    mask = model._moves
    Jv = _link_jacobians(model, z, o, com)
    Jw = mask[:, :, None] * z[None, :, :]
    Iw = _world_inertias(model, R)
    M = np.einsum("i,ija,ika->jk", model._masses, Jv, Jv) + _angular_quadratic(
        model, z, np.einsum("iab,kb->ika", Iw, z)
    )

    idx = np.arange(n)
    lo = np.minimum.outer(idx, idx)
    hi = np.maximum.outer(idx, idx)
    dJv = np.cross(z[lo], Jv[:, hi])
    dJw = np.cross(z[:, None, :], z[None, :, :]) * np.triu(np.ones((n, n)), 1)[:, :, None]
    dJw = dJw[None] * mask[:, None, :, None]
    axes = _skew_stack(z)
    dIw = (axes[None] @ Iw[:, None] - Iw[:, None] @ axes[None]) * mask[:, :, None, None]

    linear = np.einsum("i,ikja,ila->kjl", model._masses, dJv, Jv)
    angular = np.einsum("ikja,iab,ilb->kjl", dJw, Iw, Jw)
    dM = (
        linear
        + linear.transpose(0, 2, 1)
        + angular
        + angular.transpose(0, 2, 1)
        + np.einsum("ija,ikab,ilb->kjl", Jw, dIw, Jw)
    )
    return M, dM


def coriolis_matrix(model: LegModel, q, qd) -> np.ndarray:
    """
    Coriolis/centrifugal matrix with dM/dt = C + C^T
    """
    return dynamics_terms(model, q, qd).C


def _link_transforms(model: LegModel, q: np.ndarray) -> List[np.ndarray]:
    local = _joint_rotations(model, q)
    return [rot(local[i].T) @ model._tree_transforms[i] for i in range(model.n_dof)]


def _motion_subspaces(model: LegModel) -> List[np.ndarray]:
    return [np.concatenate([model._axes[i], np.zeros(3)]) for i in range(model.n_dof)]


def inverse_dynamics(model: LegModel, q, qd, qdd) -> np.ndarray:
    """
    Recursive Newton-Euler: joint torques for the given motion, gravity included
    """
    n = model.n_dof
    q = _check_vector("q", q, n)
    qd = _check_vector("qd", qd, n)
    qdd = _check_vector("qdd", qdd, n)
    Xup = _link_transforms(model, q)
    S = _motion_subspaces(model)
    a_grav = np.concatenate([np.zeros(3), model._gravity])

    v = [None] * n
    a = [None] * n
    f = [None] * n
    for i in range(n):
        vJ = S[i] * qd[i]
        if i == 0:
            v[i] = vJ
            a[i] = Xup[i] @ (-a_grav) + S[i] * qdd[i]
        else:
            v[i] = Xup[i] @ v[i - 1] + vJ
            a[i] = Xup[i] @ a[i - 1] + S[i] * qdd[i] + crm(v[i]) @ vJ
        inertia = model._spatial_inertias[i]
        f[i] = inertia @ a[i] + crf(v[i]) @ inertia @ v[i]

    tau = np.zeros(n)
    for i in reversed(range(n)):
        tau[i] = S[i] @ f[i]
        if i > 0:
            f[i - 1] = f[i - 1] + Xup[i].T @ f[i]
    return tau


def mass_matrix(model: LegModel, q) -> np.ndarray:
    """
    Composite-rigid-body algorithm
    """
    n = model.n_dof
    q = _check_vector("q", q, n)
    Xup = _link_transforms(model, q)
    S = _motion_subspaces(model)
    IC = [inertia.copy() for inertia in model._spatial_inertias]
    for i in reversed(range(1, n)):
        IC[i - 1] = IC[i - 1] + Xup[i].T @ IC[i] @ Xup[i]

    H = np.zeros((n, n))
    for i in range(n):
        F = IC[i] @ S[i]
        H[i, i] = S[i] @ F
        j = i
        while j > 0:
            F = Xup[j].T @ F
            j -= 1
            H[i, j] = H[j, i] = S[j] @ F
    return H


def gravity_torque(model: LegModel, q) -> np.ndarray:
    zeros = np.zeros(model.n_dof)
    return inverse_dynamics(model, q, zeros, zeros)


def friction_torque(model: LegModel, qd) -> np.ndarray:
    qd = _check_vector("qd", qd, model.n_dof)
    return model._viscous * qd + model._coulomb * np.tanh(qd / COULOMB_SMOOTHING)


def leg_state(model: LegModel, q, qd) -> Tuple[DynamicsTerms, FootState]:
    """
    Dynamics terms and foot kinematics from one pass over the chain.

    C = sum_i m_i Jv_i^T dJv_i/dt + Jw_i^T I_i dJw_i/dt + Jw_i^T [w_i]x I_i Jw_i
    """
    n = model.n_dof
    q = _check_vector("q", q, n)
    qd = _check_vector("qd", qd, n)
    _, R, z, o, com = _chain(model, q)
    w = np.cumsum(z * qd[:, None], axis=0)
    m = model._masses

    Jv = _link_jacobians(model, z, o, com)
    Jv_dot = _column_rates(Jv, z, w, qd)
    Iw = _world_inertias(model, R)
    Iz = np.einsum("iab,kb->ika", Iw, z)
    IJw_dot = np.einsum("iab,kb->ika", Iw, np.cross(w, z))

    M = np.einsum("i,ija,ika->jk", m, Jv, Jv) + _angular_quadratic(model, z, Iz)
    C = (
        np.einsum("i,ija,ika->jk", m, Jv, Jv_dot)
        + _angular_quadratic(model, z, IJw_dot)
        + _angular_quadratic(model, z, np.cross(w[:, None, :], Iz))
    )
    g = -np.einsum("i,ija,a->j", m, Jv, model._gravity)
    tau_f = model._viscous * qd + model._coulomb * np.tanh(qd / COULOMB_SMOOTHING)

    foot_cols = np.cross(z, o[n] - o[:n])
    foot_dot = _column_rates(foot_cols, z, w, qd)
    foot = FootState(position=o[n].copy(), velocity=foot_cols.T @ qd, J=foot_cols.T.copy(), Jdot=foot_dot.T.copy())
    return DynamicsTerms(M=0.5 * (M + M.T), C=C, g=g, tau_f=tau_f), foot


def dynamics_terms(model: LegModel, q, qd) -> DynamicsTerms:
    terms, _ = leg_state(model, q, qd)
    return terms


def _foot_columns(model: LegModel, q: np.ndarray):
    _, _, z, o, _ = _chain(model, q)
    return np.cross(z, o[model.n_dof] - o[: model.n_dof]), z, o


def contact_jacobian(model: LegModel, q) -> Tuple[np.ndarray, np.ndarray]:
    """
    Linear Jacobian of the foot point in the world frame and the foot position
    """
    n = model.n_dof
    q = _check_vector("q", q, n)
    cols, _, o = _foot_columns(model, q)
    return cols.T.copy(), o[n].copy()


def jacobian_dot(model: LegModel, q, qd) -> np.ndarray:
    return foot_kinematics(model, q, qd).Jdot


def foot_kinematics(model: LegModel, q, qd) -> FootState:
    n = model.n_dof
    q = _check_vector("q", q, n)
    qd = _check_vector("qd", qd, n)
    cols, z, o = _foot_columns(model, q)
    w = np.cumsum(z * qd[:, None], axis=0)
    return FootState(
        position=o[n].copy(), velocity=cols.T @ qd, J=cols.T.copy(), Jdot=_column_rates(cols, z, w, qd).T.copy()
    )


def forward_dynamics(model: LegModel, q, qd, tau_m, f_ext) -> np.ndarray:
    """
    Solve M qdd = tau_m + J^T f_ext - C qd - g - tau_f for qdd
    """
    n = model.n_dof
    q = _check_vector("q", q, n)
    qd = _check_vector("qd", qd, n)
    tau_m = _check_vector("tau_m", tau_m, n)
    f_ext = _check_vector("f_ext", f_ext, 3)

    M = mass_matrix(model, q)
    J, _ = contact_jacobian(model, q)
    bias = inverse_dynamics(model, q, qd, np.zeros(n))
    rhs = tau_m + J.T @ f_ext - bias - friction_torque(model, qd)
    try:
        factor = cho_factor(M)
    except LinAlgError as e:
        logger.error(f"Failed to factorize mass matrix at q={q}: {e}")
        raise SingularDynamicsError(f"Mass matrix is not positive definite at q={q}") from e
    return cho_solve(factor, rhs)


def generalized_momentum(model: LegModel, q, qd) -> np.ndarray:
    qd = _check_vector("qd", qd, model.n_dof)
    return mass_matrix(model, q) @ qd


def kinetic_energy(model: LegModel, q, qd) -> float:
    qd = _check_vector("qd", qd, model.n_dof)
    return 0.5 * float(qd @ mass_matrix(model, q) @ qd)


def potential_energy(model: LegModel, q) -> float:
    q = _check_vector("q", q, model.n_dof)
    _, _, _, _, com = _chain(model, q)
    return -float(np.sum(model._masses * (com @ model._gravity)))


def with_mismatch(model: LegModel, mass_scale: float = 1.0) -> LegModel:
    """
    Copy of `model` with every link mass and inertia scaled by `mass_scale`
    """
    if mass_scale <= 0:
        raise InvalidArgumentError(f"mass_scale must be positive, got {mass_scale}")
    data = model.model_dump()
    data["link_masses"] = [m * mass_scale for m in model.link_masses]
    data["link_inertias"] = (np.asarray(model.link_inertias) * mass_scale).tolist()
    return LegModel(**data)


def default_leg() -> LegModel:
    """
    3-DoF leg: hip roll, hip pitch, knee pitch. Hip offset along +y, thigh and
    calf hanging along -z at q = 0.
    """
    lengths = [0.08, 0.21, 0.21]
    masses = [0.6, 1.0, 0.2]
    radii = [0.03, 0.025, 0.015]
    directions = [[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [0.0, 0.0, -1.0]]
    return LegModel(
        n_dof=3,
        link_lengths=lengths,
        link_masses=masses,
        link_com_offsets=[(0.5 * l * np.asarray(d)).tolist() for l, d in zip(lengths, directions)],
        link_inertias=[rod_inertia(m, l, r, d).tolist() for m, l, r, d in zip(masses, lengths, radii, directions)],
        joint_axes=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        link_directions=directions,
        base_transform=BaseTransform(position=[0.0, 0.0, 0.32], rpy=[0.0, 0.0, 0.0]),
    )


def pendulum(mass: float = 1.0, length: float = 1.0) -> LegModel:
    """
    One revolute joint about +y with a point mass at the tip of a link along +x
    """
    return LegModel(
        n_dof=1,
        link_lengths=[length],
        link_masses=[mass],
        link_com_offsets=[[length, 0.0, 0.0]],
        link_inertias=[np.zeros((3, 3)).tolist()],
        joint_axes=[[0.0, 1.0, 0.0]],
        link_directions=[[1.0, 0.0, 0.0]],
        base_transform=BaseTransform(position=[0.0, 0.0, 0.0], rpy=[0.0, 0.0, 0.0]),
    )
