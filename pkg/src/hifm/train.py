"""End-to-end training of the matching loss.

For every batch element the procedure is: build (or reuse) the sample's
FlowSpec, draw a progress value z uniformly on [0, z_max], draw the state
y from the conditional Gaussian at z with a standard-normal prior, form
the raw conditional target (v_y, v_z), and regress the network on it
under the shared finite/projection mode transform. Methods:

* ``hessian_quadratic``   constant Hessian of a quadratic energy
* ``hessian_formation``   per-sample complete-graph formation Hessian
* ``isotropic_data``      A = alpha I with alpha = -ln(eps / ||y1||)
* ``isotropic_interpolant`` A = alpha I with alpha = -ln(eps) / kappa
* ``optimal_transport``   straight-path baseline (no spectrum)

Eigendecompositions are cached per dataset row, since they dominate the
cost and are reused every epoch. Runs are reproducible: one seeded
generator drives batching and sampling in a fixed order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow, model as model_mod
from .data import Dataset, DatasetMeta, KIND_PARTICLES
from .energy import (
    Energy,
    QuadraticEnergy,
    formation_from_positions,
    zero_com_project,
)
from .errors import NumericalError, ValidationError
from .flow import Z_MAX
from .likelihood import IsotropicPrior, Rk45Config, ZeroComPrior, nll
from .model import (
    AdamWState,
    MlpModel,
    MlpParams,
    ModeTransform,
    adamw_init,
    adamw_step,
    loss_and_grad,
)
from .spectrum import (
    FlowConfig,
    FlowFlags,
    FlowSpec,
    build_flow_spec,
    flow_spec_from_spectrum,
    isotropic_spectrum,
)

METHODS = ("hessian_quadratic", "hessian_formation", "isotropic_data",
           "isotropic_interpolant", "optimal_transport")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data itself."""

    method: str = "optimal_transport"
    finite: bool = True
    project: bool = False
    hyperbolize: bool = False
    isotropize: bool = False
    c: float = 2.0
    gamma: float = 1e-10
    kappa: float = 1.0
    sigma_min: float = 1e-5
    eps: float = 1e-2
    batch_size: int = 256
    steps: int = 1000
    seed: int = 0
    z_max: float = Z_MAX
    lr: float = 1e-4
    weight_decay: float = 0.01
    hidden: tuple[int, ...] = (64, 64, 64)
    clamp: float = model_mod.DEFAULT_CLAMP
    sample_y0: bool = False
    eval_every: int = 0
    eval_n: int = 100
    eval_rtol: float = 1e-2
    eval_atol: float = 1e-2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(
                f"unknown method {self.method!r}; choose from {METHODS}")
        if self.c < 1.0:
            raise ValidationError("condition number c must be >= 1")
        if self.gamma <= 0 or self.kappa <= 0:
            raise ValidationError("gamma and kappa must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 < self.z_max < 1.0:
            raise ValidationError("z_max must lie strictly in (0, 1)")

    @property
    def flags(self) -> FlowFlags:
        return FlowFlags(finite=self.finite, project=self.project,
                         hyperbolize=self.hyperbolize,
                         isotropize=self.isotropize)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(c=self.c, gamma=self.gamma, kappa=self.kappa,
                          sigma0=1.0, flags=self.flags)


@dataclass
class TrainLogRow:
    step: int
    loss: float
    eval_nll: float | None
    eval_nfe: float | None
    wall_ms: float
    clamp_count: int


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)

    HEADER = "step,loss,eval_nll,eval_nfe,wall_ms,clamp_count"

    def append(self, row: TrainLogRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValidationError("log steps must increase monotonically")
        self.rows.append(row)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    def eval_points(self) -> list[tuple[int, float, float]]:
        return [(r.step, r.eval_nll, r.eval_nfe) for r in self.rows
                if r.eval_nll is not None]

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for r in self.rows:
                enll = "" if r.eval_nll is None else f"{r.eval_nll:.17g}"
                enfe = "" if r.eval_nfe is None else f"{r.eval_nfe:.17g}"
                fh.write(f"{r.step},{r.loss:.17g},{enll},{enfe},"
                         f"{r.wall_ms:.3f},{r.clamp_count}\n")


def make_flow_spec_for_sample(cfg: TrainConfig, y1: np.ndarray,
                              energy: Energy | None = None,
                              meta: DatasetMeta | None = None) -> FlowSpec | None:
    """Per-sample FlowSpec for the configured method; None marks the OT path."""
    y1 = np.asarray(y1, dtype=np.float64)
    fc = cfg.flow_config()
    if cfg.method == "optimal_transport":
        return None
    if cfg.method == "hessian_quadratic":
        if not isinstance(energy, QuadraticEnergy):
            raise ValidationError(
                "hessian_quadratic requires a quadratic energy")
        return build_flow_spec(y1, energy.hessian(y1), fc)
    if cfg.method == "hessian_formation":
        if meta is None or meta.kind != KIND_PARTICLES:
            raise ValidationError(
                "hessian_formation requires particle metadata")
        formation = formation_from_positions(y1, meta.m, meta.spatial_dim)
        return build_flow_spec(y1, formation.hessian(y1), fc)
    if cfg.method == "isotropic_data":
        alpha = flow.isotropic_alpha_data(y1, cfg.eps)
    else:  # isotropic_interpolant
        alpha = flow.isotropic_alpha_interp(cfg.eps, cfg.kappa)
    return flow_spec_from_spectrum(y1, isotropic_spectrum(len(y1), alpha), fc)


@dataclass
class TrainContext:
    """Loop-lifetime state: the base energy, data metadata, spec cache."""

    energy: Energy | None = None
    meta: DatasetMeta | None = None
    cache: dict = field(default_factory=dict)

    def spec_for(self, cfg: TrainConfig, index: int,
                 y1: np.ndarray) -> FlowSpec | None:
        if index in self.cache:
            return self.cache[index]
        if cfg.method == "hessian_quadratic":
            # the Hessian does not depend on y1: reuse one processed spectrum
            if "shared" not in self.cache:
                self.cache["shared"] = make_flow_spec_for_sample(
                    cfg, y1, self.energy, self.meta)
            shared = self.cache["shared"]
            fs = replace(shared, y1=np.asarray(y1, dtype=np.float64))
        else:
            fs = make_flow_spec_for_sample(cfg, y1, self.energy, self.meta)
        self.cache[index] = fs
        return fs

    @property
    def com_spatial_dim(self) -> int | None:
        if self.meta is not None and self.meta.kind == KIND_PARTICLES:
            return self.meta.spatial_dim
        return None


def _draw_state_and_target(cfg: TrainConfig, fs: FlowSpec | None,
                           y1: np.ndarray, z: float,
                           rng: np.random.Generator,
                           com_sd: int | None):
    """One training tuple (y, target_vy, target_vz) at progress z."""
    if fs is None:  # optimal transport
        eps = rng.standard_normal(len(y1))
        if com_sd is not None:
            eps = zero_com_project(eps, com_sd)
        state = flow.ot_path(y1, z, cfg.sigma_min)
        y = state.mean + np.sqrt(state.var) * eps
        t_vy, t_vz = flow.ot_field(y, z, y1, cfg.sigma_min)
        return y, t_vy, t_vz
    if cfg.sample_y0:
        y0 = rng.standard_normal(fs.dim)
        if com_sd is not None:
            y0 = zero_com_project(y0, com_sd)
        state = flow.mean_cov_z(fs, y0, z)
        noise = fs.basis @ (np.sqrt(state.var) * rng.standard_normal(fs.dim))
        if com_sd is not None:
            y = zero_com_project(state.mean + noise, com_sd)
        else:
            y = state.mean + noise
    else:
        y0 = np.zeros(fs.dim)
        y = flow.sample_path_point(fs, z, rng, com_spatial_dim=com_sd).y
    t = flow.interpolant_time(fs, z)
    t_vy, t_vz = flow.cond_field_time(fs, y, t, y0)
    return y, t_vy, t_vz


def training_step(params: MlpParams, opt: AdamWState, cfg: TrainConfig,
                  batch_indices: np.ndarray, batch_y1: np.ndarray,
                  rng: np.random.Generator, ctx: TrainContext):
    """One optimizer update on a batch of targets.

    Returns (params', opt', loss, clamp_count). A non-finite loss aborts
    with the offending sample's index, z and spectrum summary.
    """
    bsz = len(batch_indices)
    if bsz == 0:
        raise ValidationError("empty training batch")
    dim = batch_y1.shape[1]
    zs = rng.uniform(0.0, cfg.z_max, size=bsz)
    ys = np.zeros((bsz, dim))
    t_vy = np.zeros((bsz, dim))
    t_vz = np.zeros(bsz)
    projectors = np.zeros((bsz, dim, dim)) if cfg.project else None
    specs = []
    for i in range(bsz):
        fs = ctx.spec_for(cfg, int(batch_indices[i]), batch_y1[i])
        specs.append(fs)
        ys[i], t_vy[i], t_vz[i] = _draw_state_and_target(
            cfg, fs, batch_y1[i], float(zs[i]), rng, ctx.com_spatial_dim)
        if cfg.project:
            projectors[i] = (fs.spectrum.hyperbolic_projector()
                             if fs is not None else np.eye(dim))
    bad = np.flatnonzero(~(np.all(np.isfinite(t_vy), axis=1)
                           & np.isfinite(t_vz) & np.all(np.isfinite(ys),
                                                        axis=1)))
    if bad.size:
        i = int(bad[0])
        summary = ("no spectrum" if specs[i] is None else
                   f"alphas in [{specs[i].alphas.min():.3e}, "
                   f"{specs[i].alphas.max():.3e}]")
        raise NumericalError(
            f"non-finite training target at batch sample {i} "
            f"(dataset index {int(batch_indices[i])}, z={zs[i]:.6f}, "
            f"{summary})")
    mode = ModeTransform(finite=cfg.finite, projector=projectors,
                         clamp=cfg.clamp)
    loss, grads, n_clamped = loss_and_grad(params, ys, zs, t_vy, t_vz, mode)
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite loss on batch (indices {batch_indices[:4]}...)")
    opt, params = adamw_step(opt, params, grads)
    return params, opt, loss, n_clamped


def _eval_prior(ctx: TrainContext, dim: int):
    if ctx.com_spatial_dim is not None:
        return ZeroComPrior(m=ctx.meta.m, spatial_dim=ctx.meta.spatial_dim)
    return IsotropicPrior(dim)


def train_loop(cfg: TrainConfig, dataset: Dataset,
               eval_set: Dataset | None = None,
               energy: Energy | None = None):
    """Run cfg.steps optimizer steps; returns (params, TrainLog, context).

    Every ``eval_every`` steps (and at the final step) the mean NLL and NFE
    over the eval set are recorded into the log.
    """
    if dataset.n == 0:
        raise ValidationError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    dim = dataset.dim
    params = model_mod.init([dim + 1, *cfg.hidden, dim + 1], cfg.seed)
    opt = adamw_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ctx = TrainContext(energy=energy, meta=dataset.meta)
    log = TrainLog()
    start = time.perf_counter()
    eval_cfg = Rk45Config(rtol=cfg.eval_rtol, atol=cfg.eval_atol)
    for step_idx in range(1, cfg.steps + 1):
        indices = rng.integers(0, dataset.n, size=cfg.batch_size)
        params, opt, loss, n_clamped = training_step(
            params, opt, cfg, indices, dataset.samples[indices], rng, ctx)
        eval_nll = eval_nfe = None
        do_eval = (eval_set is not None and eval_set.n > 0
                   and cfg.eval_every > 0
                   and (step_idx % cfg.eval_every == 0
                        or step_idx == cfg.steps))
        if do_eval:
            points = eval_set.samples[:cfg.eval_n]
            report = nll(MlpModel(params), points, eval_cfg,
                         _eval_prior(ctx, dim), clamp=cfg.clamp)
            eval_nll = report.mean_nll
            eval_nfe = report.mean_nfe
        log.append(TrainLogRow(
            step=step_idx, loss=loss, eval_nll=eval_nll, eval_nfe=eval_nfe,
            wall_ms=(time.perf_counter() - start) * 1e3,
            clamp_count=n_clamped))
    return params, log, ctx
