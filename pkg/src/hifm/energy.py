"""Energy functions with analytic value/gradient/Hessian.

Three families are provided:

* ``QuadraticEnergy``: V(y) = 1/2 (y - y*)^T A (y - y*) with PSD A.
* ``LennardJonesEnergy``: sum over particle pairs of the standard
  4 eps ((sigma/r)^12 - (sigma/r)^6) potential.
* ``FormationEnergy``: V(y) = 1/4 sum_{(i,j) in E} (||y_i - y_j||^2 - d_ij^2)^2
  over an undirected edge set with target distances d_ij.

Finite-difference oracles, rigid-motion utilities, the center-of-mass
projector and the descent diagnostic ``generator_lv`` live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError
from .linalg import validate_sym_matrix

COINCIDENT_R = 1e-12  # pair-distance guard for Lennard-Jones


class Energy:
    """Base interface: value(y), gradient(y), hessian(y) on R^dim."""

    kind = "abstract"
    dim = 0

    def value(self, y: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check_input(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.dim,):
            raise ValidationError(
                f"configuration has shape {y.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(y)):
            raise ValidationError("configuration has non-finite entries")
        return y


@dataclass
class QuadraticEnergy(Energy):
    """Quadratic bowl 1/2 (y - center)^T matrix (y - center), matrix PSD."""

    matrix: np.ndarray
    center: np.ndarray | None = None
    kind: str = field(default="quadratic", init=False)

    def __post_init__(self):
        self.matrix = validate_sym_matrix(self.matrix)
        n = self.matrix.shape[0]
        if self.center is None:
            self.center = np.zeros(n)
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.shape != (n,):
            raise ValidationError("center length does not match matrix dim")
        if np.min(np.linalg.eigvalsh(self.matrix)) < -1e-10:
            raise ValidationError("quadratic matrix must be PSD")
        self.dim = n

    def value(self, y):
        y = self._check_input(y)
        d = y - self.center
        return 0.5 * float(d @ (self.matrix @ d))

    def gradient(self, y):
        y = self._check_input(y)
        return self.matrix @ (y - self.center)

    def hessian(self, y):
        self._check_input(y)
        return self.matrix.copy()


class ParticleEnergy(Energy):
    """Shared shape handling for stacked m x spatial_dim configurations."""

    def _positions(self, y: np.ndarray) -> np.ndarray:
        return y.reshape(self.m, self.spatial_dim)


@dataclass
class LennardJonesEnergy(ParticleEnergy):
    """All-pairs Lennard-Jones cluster of m identical particles."""

    m: int
    spatial_dim: int = 3
    epsilon: float = 1.0
    sigma: float = 1.0
    kind: str = field(default="lennard_jones", init=False)

    def __post_init__(self):
        if self.m < 2:
            raise ValidationError("need at least two particles")
        if self.spatial_dim not in (2, 3):
            raise ValidationError("spatial_dim must be 2 or 3")
        if self.epsilon <= 0 or self.sigma <= 0:
            raise ValidationError("epsilon and sigma must be positive")
        self.dim = self.m * self.spatial_dim

    def _pair_terms(self, y):
        pos = self._positions(y)
        diffs = pos[:, None, :] - pos[None, :, :]
        r2 = np.sum(diffs * diffs, axis=-1)
        iu = np.triu_indices(self.m, k=1)
        r = np.sqrt(r2[iu])
        if np.any(r < COINCIDENT_R):
            raise DomainError("coincident particles in Lennard-Jones energy")
        return pos, diffs, iu, r

    def value(self, y):
        y = self._check_input(y)
        _, _, _, r = self._pair_terms(y)
        s6 = (self.sigma / r) ** 6
        return float(np.sum(4.0 * self.epsilon * (s6 * s6 - s6)))

    def gradient(self, y):
        y = self._check_input(y)
        pos, diffs, iu, r = self._pair_terms(y)
        s6 = (self.sigma / r) ** 6
        # du/dr = (24 eps / r) (s6 - 2 s6^2)
        dudr = 24.0 * self.epsilon * (s6 - 2.0 * s6 * s6) / r
        grad = np.zeros_like(pos)
        unit = diffs[iu] / r[:, None]
        contrib = dudr[:, None] * unit
        np.add.at(grad, iu[0], contrib)
        np.add.at(grad, iu[1], -contrib)
        return grad.reshape(-1)

    def hessian(self, y):
        y = self._check_input(y)
        pos, diffs, iu, r = self._pair_terms(y)
        s6 = (self.sigma / r) ** 6
        dudr = 24.0 * self.epsilon * (s6 - 2.0 * s6 * s6) / r
        d2u = 24.0 * self.epsilon * (26.0 * s6 * s6 - 7.0 * s6) / (r * r)
        d = self.spatial_dim
        hess = np.zeros((self.dim, self.dim))
        eye = np.eye(d)
        for k in range(len(r)):
            i, j = iu[0][k], iu[1][k]
            u = diffs[i, j] / r[k]
            outer = np.outer(u, u)
            block = d2u[k] * outer + (dudr[k] / r[k]) * (eye - outer)
            bi, bj = i * d, j * d
            hess[bi:bi + d, bi:bi + d] += block
            hess[bj:bj + d, bj:bj + d] += block
            hess[bi:bi + d, bj:bj + d] -= block
            hess[bj:bj + d, bi:bi + d] -= block
        return hess


@dataclass
class FormationEnergy(ParticleEnergy):
    """Distance-constraint energy over an undirected graph of m agents.

    ``edges`` is a list of index pairs (i, j) with i < j; ``distances``
    holds the target distance for each edge. The energy vanishes exactly
    when every edge constraint is satisfied.
    """

    m: int
    spatial_dim: int
    edges: list[tuple[int, int]]
    distances: np.ndarray
    kind: str = field(default="formation", init=False)

    def __post_init__(self):
        if self.spatial_dim not in (2, 3):
            raise ValidationError("spatial_dim must be 2 or 3")
        self.dim = self.m * self.spatial_dim
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if len(self.edges) != len(self.distances):
            raise ValidationError("edge and distance counts differ")
        seen = set()
        for (i, j) in self.edges:
            if not (0 <= i < j < self.m):
                raise ValidationError(f"bad edge ({i}, {j}) for m={self.m}")
            if (i, j) in seen:
                raise ValidationError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
        if np.any(self.distances <= 0):
            raise ValidationError("target distances must be positive")

    def _edge_errors(self, pos):
        ei = np.array([e[0] for e in self.edges], dtype=int)
        ej = np.array([e[1] for e in self.edges], dtype=int)
        rij = pos[ei] - pos[ej]
        err = np.sum(rij * rij, axis=1) - self.distances ** 2
        return ei, ej, rij, err

    def value(self, y):
        y = self._check_input(y)
        _, _, _, err = self._edge_errors(self._positions(y))
        return 0.25 * float(np.sum(err ** 2))

    def gradient(self, y):
        y = self._check_input(y)
        pos = self._positions(y)
        ei, ej, rij, err = self._edge_errors(pos)
        grad = np.zeros_like(pos)
        contrib = err[:, None] * rij
        np.add.at(grad, ei, contrib)
        np.add.at(grad, ej, -contrib)
        return grad.reshape(-1)

    def hessian(self, y):
        y = self._check_input(y)
        pos = self._positions(y)
        ei, ej, rij, err = self._edge_errors(pos)
        d = self.spatial_dim
        hess = np.zeros((self.dim, self.dim))
        eye = np.eye(d)
        for k in range(len(self.edges)):
            i, j = ei[k], ej[k]
            block = 2.0 * np.outer(rij[k], rij[k]) + err[k] * eye
            bi, bj = i * d, j * d
            hess[bi:bi + d, bi:bi + d] += block
            hess[bj:bj + d, bj:bj + d] += block
            hess[bi:bi + d, bj:bj + d] -= block
            hess[bj:bj + d, bi:bi + d] -= block
        return hess


def formation_from_positions(y1: np.ndarray, m: int,
                             spatial_dim: int) -> FormationEnergy:
    """Complete-graph formation energy whose constraints y1 satisfies exactly.

    Target distances are the observed pairwise distances of ``y1``, so the
    sample is a global minimum of the returned energy by construction.
    """
    pos = np.asarray(y1, dtype=np.float64).reshape(m, spatial_dim)
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    dists = np.array([np.linalg.norm(pos[i] - pos[j]) for (i, j) in edges])
    if np.any(dists <= 0):
        raise DomainError("coincident agents give a zero target distance")
    return FormationEnergy(m=m, spatial_dim=spatial_dim, edges=edges,
                           distances=dists)


def fd_gradient(energy: Energy, y: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate step h*(1+|y_k|)."""
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    y = np.asarray(y, dtype=np.float64)
    grad = np.zeros_like(y)
    for k in range(len(y)):
        step = h * (1.0 + abs(y[k]))
        yp = y.copy()
        ym = y.copy()
        yp[k] += step
        ym[k] -= step
        grad[k] = (energy.value(yp) - energy.value(ym)) / (2.0 * step)
    return grad


def fd_hessian(energy: Energy, y: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences on the analytic gradient, symmetrized."""
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    hess = np.zeros((n, n))
    for k in range(n):
        step = h * (1.0 + abs(y[k]))
        yp = y.copy()
        ym = y.copy()
        yp[k] += step
        ym[k] -= step
        hess[:, k] = (energy.gradient(yp) - energy.gradient(ym)) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def generator_lv(energy: Energy, y: np.ndarray, b: np.ndarray) -> float:
    """Descent diagnostic -||grad V||^2 + 1/2 tr(hess V . B^2).

    Non-positive everywhere when B = 0; where it vanishes the configuration
    sits in the stochastically stable set.
    """
    b = validate_sym_matrix(b)
    g = energy.gradient(y)
    h = energy.hessian(y)
    if b.shape[0] != len(g):
        raise ValidationError("diffusion matrix dim does not match energy dim")
    return -float(g @ g) + 0.5 * float(np.trace(h @ b @ b))


def apply_rigid_motion(y: np.ndarray, rotation: np.ndarray,
                       translation: np.ndarray, spatial_dim: int) -> np.ndarray:
    """Rotate then translate every particle block of a stacked configuration."""
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    if rotation.shape != (spatial_dim, spatial_dim):
        raise ValidationError("rotation shape does not match spatial_dim")
    if np.linalg.norm(rotation.T @ rotation - np.eye(spatial_dim)) > 1e-8:
        raise ValidationError("rotation matrix is not orthogonal")
    y = np.asarray(y, dtype=np.float64)
    if y.size % spatial_dim != 0:
        raise ValidationError("configuration length not divisible by spatial_dim")
    pos = y.reshape(-1, spatial_dim)
    return (pos @ rotation.T + translation).reshape(-1)


def zero_com_project(y: np.ndarray, spatial_dim: int) -> np.ndarray:
    """Remove the per-axis mean over particles; linear and idempotent."""
    y = np.asarray(y, dtype=np.float64)
    if y.size % spatial_dim != 0:
        raise ValidationError("configuration length not divisible by spatial_dim")
    pos = y.reshape(-1, spatial_dim)
    return (pos - pos.mean(axis=0)).reshape(-1)
