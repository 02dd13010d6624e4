"""From a Hessian to the spectral data that defines a conditional flow.

The pipeline is: ``analyze`` splits the eigenvalues into null and
hyperbolic parts, ``rescale_condition`` maps the nonzero eigenvalues
affinely so that alpha_max / alpha_min hits a chosen condition number c,
``hyperbolize`` optionally replaces the zeros with alpha_min, and
``diffusion_coeffs`` picks per-direction diffusion strengths beta_i so
the stationary variances are controlled by gamma. ``build_flow_spec``
composes the whole thing into an immutable `FlowSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .linalg import EigenPair, eigh_sym, subspace_projector, validate_sym_matrix

ZERO_TOL = 1e-8


@dataclass(frozen=True)
class Spectrum:
    """Eigenbasis plus the null/hyperbolic bookkeeping of a PSD Hessian.

    ``null_mask`` always refers to the directions that were classified as
    zero in the *raw* Hessian; ``hyperbolize`` rewrites eigenvalues but
    keeps this mask so projections can still target the true hyperbolic
    subspace.
    """

    eig: EigenPair
    null_mask: np.ndarray
    alpha_min: float | None
    alpha_max: float

    @property
    def dim(self) -> int:
        return self.eig.dim

    @property
    def alphas(self) -> np.ndarray:
        return self.eig.eigvals

    @property
    def degenerate(self) -> bool:
        return self.alpha_min is None

    def null_projector(self) -> np.ndarray:
        return subspace_projector(self.eig, self.null_mask)

    def hyperbolic_projector(self) -> np.ndarray:
        return subspace_projector(self.eig, ~self.null_mask)


@dataclass(frozen=True)
class FlowFlags:
    finite: bool = True
    project: bool = False
    hyperbolize: bool = False
    isotropize: bool = False


@dataclass(frozen=True)
class FlowSpec:
    """Everything defining one conditional probability path.

    Attributes
    ----------
    y1 : target configuration.
    spectrum : processed `Spectrum` (after rescale / hyperbolize).
    beta : per-eigendirection diffusion, zero wherever alpha is zero.
    sigma0 : per-eigendirection prior standard deviation.
    kappa : interpolant rate exponent.
    gamma : stationary maximum variance used to choose beta.
    flags : mode switches (finite / project / hyperbolize / isotropize).
    """

    y1: np.ndarray
    spectrum: Spectrum
    beta: np.ndarray
    sigma0: np.ndarray
    kappa: float
    gamma: float
    flags: FlowFlags = field(default_factory=FlowFlags)

    def __post_init__(self):
        dim = self.spectrum.dim
        for name in ("y1", "beta", "sigma0"):
            arr = getattr(self, name)
            if arr.shape != (dim,):
                raise ValidationError(f"{name} length does not match dim {dim}")
        if np.any(self.beta[self.spectrum.alphas == 0.0] != 0.0):
            raise ValidationError("beta must vanish on zero-alpha directions")
        if np.any(self.sigma0 <= 0):
            raise ValidationError("prior standard deviations must be positive")
        if self.kappa <= 0:
            raise ValidationError("kappa must be positive")

    @property
    def dim(self) -> int:
        return self.spectrum.dim

    @property
    def alphas(self) -> np.ndarray:
        return self.spectrum.alphas

    @property
    def basis(self) -> np.ndarray:
        return self.spectrum.eig.eigvecs

    @property
    def alpha_min(self) -> float:
        return self.spectrum.alpha_min

    @property
    def rate(self) -> float:
        """Interpolant decay rate kappa * alpha_min."""
        return self.kappa * self.spectrum.alpha_min


def analyze(a: np.ndarray, zero_tol: float = ZERO_TOL) -> Spectrum:
    """Eigendecompose a PSD Hessian and classify its null directions.

    Eigenvalues with ``|alpha| <= zero_tol * max(1, alpha_max)`` are stored
    as exactly zero; anything below the negated threshold means the input
    is not the Hessian of a minimum and is rejected.
    """
    a = validate_sym_matrix(a)
    eig = eigh_sym(a)
    alpha_max = float(eig.eigvals[-1])
    thresh = zero_tol * max(1.0, alpha_max)
    if eig.eigvals[0] < -thresh:
        raise ValidationError(
            f"eigenvalue {eig.eigvals[0]:.3e} below -{thresh:.3e}: "
            "matrix is not the Hessian of a minimum")
    null_mask = np.abs(eig.eigvals) <= thresh
    alphas = np.where(null_mask, 0.0, eig.eigvals)
    nonzero = alphas[~null_mask]
    alpha_min = float(nonzero.min()) if nonzero.size else None
    alpha_max = float(nonzero.max()) if nonzero.size else 0.0
    return Spectrum(eig=EigenPair(eigvals=alphas, eigvecs=eig.eigvecs),
                    null_mask=null_mask, alpha_min=alpha_min,
                    alpha_max=alpha_max)


def rescale_condition(s: Spectrum, c: float) -> Spectrum:
    """Affinely rescale the nonzero eigenvalues to condition number c.

    alpha <- a * alpha + b with a = (c - 1) alpha_min / (alpha_max - alpha_min)
    and b = alpha_min (1 - a); alpha_min is preserved and alpha_max lands on
    c * alpha_min exactly. Zero eigenvalues are untouched. A spectrum with
    fewer than two distinct nonzero eigenvalues is returned unchanged.
    """
    if c < 1.0:
        raise ValidationError(f"condition number must be >= 1, got {c}")
    if s.degenerate or s.alpha_max == s.alpha_min:
        return s
    a = (c - 1.0) * s.alpha_min / (s.alpha_max - s.alpha_min)
    b = s.alpha_min * (1.0 - a)
    alphas = s.alphas.copy()
    nz = ~s.null_mask
    alphas[nz] = a * alphas[nz] + b
    # pin the endpoints so the postconditions hold exactly
    alphas[nz & (s.alphas == s.alpha_min)] = s.alpha_min
    alphas[nz & (s.alphas == s.alpha_max)] = c * s.alpha_min
    return Spectrum(eig=EigenPair(eigvals=alphas, eigvecs=s.eig.eigvecs),
                    null_mask=s.null_mask, alpha_min=s.alpha_min,
                    alpha_max=c * s.alpha_min)


def hyperbolize(s: Spectrum) -> Spectrum:
    """Replace every zero eigenvalue with alpha_min.

    The null mask is preserved so later projections still know the
    original nullspace.
    """
    if s.degenerate:
        raise ValidationError("cannot hyperbolize a fully degenerate spectrum")
    alphas = np.where(s.null_mask, s.alpha_min, s.alphas)
    return Spectrum(eig=EigenPair(eigvals=alphas, eigvecs=s.eig.eigvecs),
                    null_mask=s.null_mask, alpha_min=s.alpha_min,
                    alpha_max=s.alpha_max)


def diffusion_coeffs(s: Spectrum, gamma: float,
                     isotropize: bool) -> np.ndarray:
    """Per-direction diffusion beta_i controlled by the target variance gamma.

    isotropize: beta_i = sqrt(2 alpha_i gamma), so every direction with
    alpha_i > 0 has stationary variance beta_i^2 / (2 alpha_i) = gamma.
    Otherwise beta_i = sqrt(2 alpha_min gamma), making gamma the maximum
    stationary variance, attained at alpha_min. Directions whose current
    eigenvalue is zero get beta_i = 0.
    """
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    if s.degenerate:
        return np.zeros(s.dim)
    if isotropize:
        beta = np.sqrt(2.0 * np.maximum(s.alphas, 0.0) * gamma)
    else:
        beta = np.full(s.dim, np.sqrt(2.0 * s.alpha_min * gamma))
    beta[s.alphas == 0.0] = 0.0
    return beta


@dataclass(frozen=True)
class FlowConfig:
    """Knobs for `build_flow_spec`, with the defaults used throughout."""

    c: float = 2.0
    gamma: float = 1e-10
    kappa: float = 1.0
    sigma0: float = 1.0
    flags: FlowFlags = field(default_factory=FlowFlags)
    zero_tol: float = ZERO_TOL


def build_flow_spec(y1: np.ndarray, a: np.ndarray,
                    config: FlowConfig) -> FlowSpec:
    """Compose analyze -> rescale -> (hyperbolize) -> diffusion into a FlowSpec."""
    y1 = np.asarray(y1, dtype=np.float64)
    s = analyze(a, config.zero_tol)
    return flow_spec_from_spectrum(y1, s, config)


def flow_spec_from_spectrum(y1: np.ndarray, s: Spectrum,
                            config: FlowConfig) -> FlowSpec:
    """Same as `build_flow_spec` but starting from an analyzed spectrum."""
    if s.degenerate:
        raise ValidationError(
            "spectrum has no nonzero eigenvalue; flow rate is undefined")
    s = rescale_condition(s, config.c)
    if config.flags.hyperbolize:
        s = hyperbolize(s)
    beta = diffusion_coeffs(s, config.gamma, config.flags.isotropize)
    sigma0 = np.full(s.dim, float(config.sigma0))
    return FlowSpec(y1=np.asarray(y1, dtype=np.float64), spectrum=s,
                    beta=beta, sigma0=sigma0, kappa=config.kappa,
                    gamma=config.gamma, flags=config.flags)


def isotropic_spectrum(dim: int, alpha: float) -> Spectrum:
    """Spectrum of alpha * I without running the eigensolver."""
    if alpha <= 0:
        raise ValidationError("isotropic alpha must be positive")
    eig = EigenPair(eigvals=np.full(dim, float(alpha)), eigvecs=np.eye(dim))
    return Spectrum(eig=eig, null_mask=np.zeros(dim, dtype=bool),
                    alpha_min=float(alpha), alpha_max=float(alpha))


def conjugate_prior(s: Spectrum, y1: np.ndarray, y0_raw: np.ndarray,
                    sigma1: float | np.ndarray,
                    sigma0_raw: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Prior mean/scales that make the path end exactly on the target.

    Returns ``y0 = Pi_null y1 + Pi_hyp y0_raw`` and per-direction scales
    equal to ``sigma1`` on null directions and ``sigma0_raw`` on hyperbolic
    ones, using the original null mask.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    y0_raw = np.asarray(y0_raw, dtype=np.float64)
    if y1.shape != (s.dim,) or y0_raw.shape != (s.dim,):
        raise ValidationError("vector lengths do not match spectrum dim")
    y0 = s.null_projector() @ y1 + s.hyperbolic_projector() @ y0_raw
    sigma1 = np.broadcast_to(np.asarray(sigma1, dtype=np.float64), (s.dim,))
    sigma0_raw = np.broadcast_to(np.asarray(sigma0_raw, dtype=np.float64),
                                 (s.dim,))
    sigma = np.where(s.null_mask, sigma1, sigma0_raw)
    return y0, sigma
