"""Command-line entry point wiring the library into reproducible runs.

Subcommands: ``gen-data``, ``hessian``, ``train``, ``nll``, ``sample``,
``check``. Training runs are driven by a flat key=value config file
(flags override file values, unknown keys are rejected) and every run
echoes its resolved config into the output directory so it can be
reproduced. CSV outputs get a rendered PNG figure next to them unless
``--no-figures`` is passed. All commands exit nonzero on error.

Heavy imports happen inside the handlers so ``--threads`` can cap the
BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_TRAIN_SCHEMA: dict[str, tuple] = {
    # key: (type, default) mirroring TrainConfig / Rk45Config plus paths
    "method": (str, "optimal_transport"),
    "finite": (bool, True),
    "project": (bool, False),
    "hyperbolize": (bool, False),
    "isotropize": (bool, False),
    "c": (float, 2.0),
    "gamma": (float, 1e-10),
    "kappa": (float, 1.0),
    "sigma_min": (float, 1e-5),
    "eps": (float, 1e-2),
    "batch_size": (int, 256),
    "steps": (int, 1000),
    "seed": (int, 0),
    "z_max": (float, 1.0 - 1e-4),
    "lr": (float, 1e-4),
    "weight_decay": (float, 0.01),
    "hidden": (str, "64,64,64"),
    "clamp": (float, 1e-3),
    "sample_y0": (bool, False),
    "eval_every": (int, 0),
    "eval_n": (int, 100),
    "eval_rtol": (float, 1e-2),
    "eval_atol": (float, 1e-2),
    "data": (str, ""),
    "eval_data": (str, ""),
    "eval_frac": (float, 0.0),
    "out": (str, "run"),
    "energy": (str, "none"),
    "energy_eigs": (str, "1,25"),
    "figures": (bool, True),
}


def _parse_value(key: str, raw: str):
    typ, _ = _TRAIN_SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"key {key!r}: expected a boolean, got {raw!r}")
    return typ(raw)


def load_run_config(path: str | None, overrides: list[str]) -> dict:
    """Resolve file values then overrides against the schema."""
    values = {k: d for k, (_, d) in _TRAIN_SCHEMA.items()}
    pairs: list[tuple[str, str]] = []
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, raw = line.split("=", 1)
            pairs.append((key.strip(), raw))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        pairs.append((key.strip(), raw))
    for key, raw in pairs:
        if key not in _TRAIN_SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def write_resolved_config(values: dict, path: Path) -> None:
    with open(path, "w") as fh:
        for key in _TRAIN_SCHEMA:
            val = values[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            fh.write(f"{key}={val}\n")


def _build_energy(kind: str, dim: int, eigs: str, meta=None):
    import numpy as np

    from .energy import LennardJonesEnergy, QuadraticEnergy

    if kind in ("none", ""):
        return None
    if kind == "quadratic":
        vals = np.array([float(v) for v in eigs.split(",")])
        if len(vals) != dim:
            raise ValueError(
                f"energy_eigs has {len(vals)} entries for dim {dim}")
        return QuadraticEnergy(matrix=np.diag(vals))
    if kind == "lj":
        if meta is None or meta.m == 0:
            raise ValueError("lj energy needs particle metadata")
        return LennardJonesEnergy(m=meta.m, spatial_dim=meta.spatial_dim)
    raise ValueError(f"unknown energy kind {kind!r}")


def cmd_gen_data(args) -> int:
    import numpy as np

    from .data import LangevinConfig, langevin_generate, preprocess_particles, store
    from .energy import (
        LennardJonesEnergy,
        QuadraticEnergy,
        formation_from_positions,
    )

    y_init = None
    if args.energy == "quadratic":
        eigs = np.array([float(v) for v in args.eigs.split(",")])
        energy = QuadraticEnergy(matrix=np.diag(eigs))
    elif args.energy == "lj":
        energy = LennardJonesEnergy(m=args.m, spatial_dim=args.spatial_dim)
        rng = np.random.default_rng(args.seed + 1)
        # descend from a spread-out start so the chain begins near a minimum
        y = (rng.normal(size=(args.m, args.spatial_dim)) * 0.3
             + rng.normal(size=(args.m, args.spatial_dim)) * 0.01)
        y += np.linspace(0.0, 1.2 * args.m ** (1 / 3) * args.spatial_dim,
                         args.m)[:, None]
        y = y.reshape(-1)
        for eta_d in (1e-4, 1e-3, 5e-3):
            for _ in range(2000):
                g = energy.gradient(y)
                y = y - eta_d * g / max(1.0, np.linalg.norm(g))
        y_init = y
    elif args.energy == "formation":
        rng = np.random.default_rng(args.seed + 1)
        anchor = rng.normal(size=args.m * args.spatial_dim)
        energy = formation_from_positions(anchor, args.m, args.spatial_dim)
        y_init = anchor
    else:
        raise ValueError(f"unknown energy {args.energy!r}")

    cfg = LangevinConfig(eta=args.eta, tau=args.tau, burn_in=args.burn_in,
                         thin=args.thin, n_samples=args.n, seed=args.seed,
                         n_chains=args.chains,
                         refine_steps=args.refine_steps)
    ds = langevin_generate(energy, cfg, y_init=y_init)
    if ds.meta.kind == "particles":
        ds = preprocess_particles(ds)
    store(ds, args.out, fmt=args.format)
    grad_norms = [float(np.linalg.norm(energy.gradient(y)))
                  for y in ds.samples[:min(ds.n, 200)]]
    print(f"wrote {args.out}: n={ds.n}, dim={ds.dim}, "
          f"mean_grad_norm={np.mean(grad_norms):.4e}")
    return 0


def cmd_hessian(args) -> int:
    import numpy as np

    from .data import load
    from .energy import formation_from_positions
    from .spectrum import analyze, hyperbolize, rescale_condition

    ds = load(args.data)
    if not 0 <= args.index < ds.n:
        raise ValueError(f"index {args.index} outside dataset of {ds.n}")
    y1 = ds.samples[args.index]
    if args.energy == "formation":
        if ds.meta.kind != "particles":
            raise ValueError("formation Hessian needs a particle dataset")
        energy = formation_from_positions(y1, ds.meta.m, ds.meta.spatial_dim)
    else:
        energy = _build_energy(args.energy, ds.dim, args.eigs, ds.meta)
        if energy is None:
            raise ValueError("hessian command needs an energy")
    raw = analyze(energy.hessian(y1))
    processed = rescale_condition(raw, args.c)
    if args.hyperbolize:
        processed = hyperbolize(processed)
    with open(args.out, "w") as fh:
        fh.write("index,alpha_raw,alpha_processed,is_null\n")
        for i in range(raw.dim):
            fh.write(f"{i},{raw.alphas[i]:.17g},"
                     f"{processed.alphas[i]:.17g},"
                     f"{int(raw.null_mask[i])}\n")
    if not args.no_figures:
        from .report import spectrum_figure
        spectrum_figure(raw.alphas, processed.alphas, raw.null_mask,
                        Path(args.out).with_suffix(".png"))
    nz = processed.alphas[~processed.null_mask]
    cond = float(nz.max() / nz.min()) if nz.size else float("nan")
    print(f"null_count={int(raw.null_mask.sum())}, "
          f"condition_number={cond:.6g}")
    return 0


def _resolve_energy_for_train(values, ds):
    if values["method"] == "hessian_quadratic":
        if values["energy"] != "quadratic":
            raise ValueError("hessian_quadratic needs energy=quadratic")
        return _build_energy("quadratic", ds.dim, values["energy_eigs"])
    if values["energy"] not in ("none", ""):
        return _build_energy(values["energy"], ds.dim, values["energy_eigs"],
                             ds.meta)
    return None


def cmd_train(args) -> int:
    values = load_run_config(args.config, args.set or [])

    from .data import load, split
    from .model import save
    from .train import TrainConfig, train_loop

    if not values["data"]:
        raise ValueError("config must set data=<dataset path>")
    ds = load(values["data"])
    eval_set = None
    if values["eval_data"]:
        eval_set = load(values["eval_data"])
    elif values["eval_frac"] > 0:
        ds, eval_set = split(ds, 1.0 - values["eval_frac"], values["seed"])

    cfg = TrainConfig(
        method=values["method"], finite=values["finite"],
        project=values["project"], hyperbolize=values["hyperbolize"],
        isotropize=values["isotropize"], c=values["c"],
        gamma=values["gamma"], kappa=values["kappa"],
        sigma_min=values["sigma_min"], eps=values["eps"],
        batch_size=values["batch_size"], steps=values["steps"],
        seed=values["seed"], z_max=values["z_max"], lr=values["lr"],
        weight_decay=values["weight_decay"],
        hidden=tuple(int(h) for h in values["hidden"].split(",") if h),
        clamp=values["clamp"], sample_y0=values["sample_y0"],
        eval_every=values["eval_every"], eval_n=values["eval_n"],
        eval_rtol=values["eval_rtol"], eval_atol=values["eval_atol"])

    out_dir = Path(values["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(values, out_dir / "config.resolved.cfg")

    energy = _resolve_energy_for_train(values, ds)
    params, log, _ = train_loop(cfg, ds, eval_set=eval_set, energy=energy)
    save(params, out_dir / "model.bin")
    log.write_csv(out_dir / "trainlog.csv")
    if values["figures"] and log.rows:
        from .report import training_figure
        training_figure(log, out_dir / "loss_curve.png")
    final = log.rows[-1].loss if log.rows else float("nan")
    print(f"wrote {out_dir}/model.bin and trainlog.csv "
          f"({len(log.rows)} steps, final loss {final:.6g})")
    return 0


def cmd_nll(args) -> int:
    from .data import load
    from .likelihood import IsotropicPrior, Rk45Config, ZeroComPrior, nll
    from .model import MlpModel
    from .model import load as load_model

    ds = load(args.data)
    model = MlpModel(load_model(args.model))
    if ds.meta.kind == "particles":
        prior = ZeroComPrior(m=ds.meta.m, spatial_dim=ds.meta.spatial_dim)
    else:
        prior = IsotropicPrior(ds.dim)
    cfg = Rk45Config(rtol=args.rtol, atol=args.atol)
    points = ds.samples if args.max_samples == 0 else \
        ds.samples[:args.max_samples]
    report = nll(model, points, cfg, prior)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("sample_index,nll,nfe,accepted,rejected,status\n")
            for idx, v, nfe, acc, rej, status in report.rows():
                fh.write(f"{idx},{v:.17g},{nfe},{acc},{rej},{status}\n")
        if not args.no_figures:
            from .report import nll_figure
            nll_figure(report.nll, report.nfe,
                       Path(args.out).with_suffix(".png"))
    print(f"mean_nll={report.mean_nll:.6f}, mean_nfe={report.mean_nfe:.1f}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from .data import Dataset, DatasetMeta, store
    from .likelihood import IsotropicPrior, Rk45Config, ZeroComPrior, sample
    from .model import MlpModel
    from .model import load as load_model

    model = MlpModel(load_model(args.model))
    if args.m > 0:
        prior = ZeroComPrior(m=args.m, spatial_dim=args.spatial_dim)
        meta = DatasetMeta(kind="particles", m=args.m,
                           spatial_dim=args.spatial_dim)
    else:
        prior = IsotropicPrior(model.dim)
        meta = DatasetMeta()
    cfg = Rk45Config(rtol=args.rtol, atol=args.atol)
    draws, mean_nfe = sample(model, prior, cfg,
                             np.random.default_rng(args.seed), n=args.n)
    store(Dataset(samples=draws, meta=meta), args.out)
    print(f"wrote {args.out}: n={args.n}, dim={model.dim}, "
          f"mean_nfe={mean_nfe:.1f}")
    return 0


def cmd_check(args) -> int:
    from .verify import run_all

    ok = run_all(inject_fault=args.inject_fault)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hifm",
        description="Hessian-informed anisotropic flow matching toolkit")
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS worker threads (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate Langevin datasets")
    g.add_argument("--energy", required=True,
                   choices=["quadratic", "lj", "formation"])
    g.add_argument("--m", type=int, default=7)
    g.add_argument("--spatial-dim", type=int, default=3)
    g.add_argument("--eigs", default="1,25",
                   help="quadratic spectrum, comma separated")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--eta", type=float, default=1e-3)
    g.add_argument("--tau", type=float, default=1.0)
    g.add_argument("--burn-in", type=int, default=2000)
    g.add_argument("--thin", type=int, default=20)
    g.add_argument("--chains", type=int, default=32)
    g.add_argument("--refine-steps", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", default="binary", choices=["binary", "csv"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    h = sub.add_parser("hessian", help="spectrum of one sample's Hessian")
    h.add_argument("--data", required=True)
    h.add_argument("--energy", default="formation",
                   choices=["formation", "quadratic"])
    h.add_argument("--eigs", default="1,25")
    h.add_argument("--index", type=int, default=0)
    h.add_argument("--c", type=float, default=2.0)
    h.add_argument("--hyperbolize", action="store_true")
    h.add_argument("--no-figures", action="store_true")
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hessian)

    t = sub.add_parser("train", help="train a vector-field model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("nll", help="negative log-likelihood of a dataset")
    n.add_argument("--model", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--rtol", type=float, default=1e-2)
    n.add_argument("--atol", type=float, default=1e-2)
    n.add_argument("--max-samples", type=int, default=0,
                   help="evaluate only the first k samples (0 = all)")
    n.add_argument("--no-figures", action="store_true")
    n.add_argument("--out", help="per-sample report CSV")
    n.set_defaults(func=cmd_nll)

    s = sub.add_parser("sample", help="draw samples from a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--m", type=int, default=0,
                   help="particle count for a zero-CoM prior (0 = generic)")
    s.add_argument("--spatial-dim", type=int, default=3)
    s.add_argument("--rtol", type=float, default=1e-2)
    s.add_argument("--atol", type=float, default=1e-2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("check", help="run the built-in verification suite")
    c.add_argument("--inject-fault", action="store_true",
                   help="perturb references to demonstrate failure reporting")
    c.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
