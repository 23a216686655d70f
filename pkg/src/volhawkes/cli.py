"""Batch command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 arbitrage violations found by ``noarb``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import tomli_w

from . import backtest as bt
from .config import (
    ExperimentConfig,
    build_grid,
    build_kernel,
    build_model,
    load_config,
    parse_duration,
    to_plain,
)
from .errors import ConfigError, DomainError, StructuralError, VolHawkesError
from .hawkes import intensity_path, simulate_branching, simulate_thinning
from .kernels import KernelMatrix
from .scaling import (
    RoughFactorParams,
    general_limit_matrices,
    hurst_estimate,
    rescale,
    simulate_factor_limit,
    simulate_general_vtilde,
)
from .surface import REPORT_COLUMNS, NoArbBetas, build_arbitrage_free, is_arbitrage_free, sigma_at

log = logging.getLogger("volhawkes")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VIOLATIONS = 0, 1, 2, 3
OUT_ENV = "VOLHAWKES_OUT"


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.12g" % float(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


class _Run:
    """Resolved configuration, seed and output location for one command."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out: Path, threads: int):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.threads = max(1, int(threads))

    def wants(self, name: str) -> bool:
        files = self.cfg.output.files
        return files is None or name in files

    def path(self, name: str) -> Path:
        return self.out / name

    def seeds(self, n: int, stream: int = 0):
        return np.random.SeedSequence([self.seed, stream]).spawn(n)

    def map(self, fn, items):
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        # results come back in submission order, so output does not depend on scheduling
        chunk = max(1, len(items) // (4 * self.threads))
        with ProcessPoolExecutor(max_workers=self.threads) as ex:
            return list(ex.map(fn, items, chunksize=chunk))


def _model(cfg: ExperimentConfig):
    model = build_model(cfg)
    if cfg.noarb is not None and cfg.noarb.build:
        model = build_arbitrage_free(model, NoArbBetas(**cfg.noarb.betas.model_dump()), cfg.noarb.mode)
    return model


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(run: _Run) -> int:
    cfg = run.cfg
    model = _model(cfg)
    g = model.grid
    horizon = parse_duration(cfg.simulation.horizon)
    ss = run.seeds(1)[0]
    if cfg.simulation.method == "thinning":
        ev = simulate_thinning(model.kernel, model.mu, horizon, ss)
    else:
        ev = simulate_branching(model.kernel, model.mu, horizon, ss)
    comps = g.components
    t, c = ev.merged()
    if run.wants("events.csv"):
        write_csv(run.path("events.csv"), ["t", "component", "sign"],
                  ((ti, f"{comps[ci].strike_label}@{comps[ci].maturity:.6g}", comps[ci].sign) for ti, ci in zip(t, c)))
    grid_t = np.linspace(0.0, horizon, cfg.simulation.n_grid)
    if run.wants("surface.csv"):
        sig = sigma_at(g, ev, grid_t).reshape(grid_t.size, -1)
        write_csv(run.path("surface.csv"), ["t", *g.option_labels()], (np.r_[ti, row] for ti, row in zip(grid_t, sig)))
    if run.wants("intensity.csv"):
        lam = intensity_path(ev, model.kernel, model.mu, grid_t)
        write_csv(run.path("intensity.csv"), ["t", *(str(x) for x in comps)], (np.r_[ti, row] for ti, row in zip(grid_t, lam)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# noarb


def cmd_noarb(run: _Run) -> int:
    cfg = run.cfg
    na = cfg.noarb
    if na is None:
        from .config import NoArbConfig

        na = NoArbConfig()
    betas = NoArbBetas(**na.betas.model_dump())
    model = build_model(cfg)
    if na.build:
        model = build_arbitrage_free(model, betas, na.mode)
    if na.perturb is not None:
        p = na.perturb
        d = model.kernel.dim
        if not (0 <= p.row < d and 0 <= p.col < d):
            raise ConfigError(f"noarb.perturb row/col must lie in [0, {d})")
        model = model.with_(kernel=model.kernel.with_entry(p.row, p.col, model.kernel[p.row, p.col].scaled(p.factor)))
    ok, violations = is_arbitrage_free(model, betas, na.mode, rtol=na.rtol)
    if run.wants("noarb_report.csv"):
        write_csv(run.path("noarb_report.csv"), REPORT_COLUMNS, ([v.as_row()[k] for k in REPORT_COLUMNS] for v in violations))
    if not ok:
        log.warning("%d arbitrage violation(s)", len(violations))
        return EXIT_VIOLATIONS
    return EXIT_OK


# ---------------------------------------------------------------------------
# scaling


def _factor_vectors(cfg: ExperimentConfig, grid) -> list[np.ndarray]:
    sc = cfg.scaling
    if sc.vectors is not None:
        return [np.asarray(v, float) for v in sc.vectors]
    kc = cfg.model.kernel
    inv = 1.0 / np.sqrt(np.asarray(grid.maturities))
    if kc.structure == "separable":
        zs = [np.asarray(kc.z, float)]
    elif kc.structure == "semi_separable":
        zs = [np.asarray(f.z, float) for f in kc.factors]
    else:
        raise ConfigError("scaling.vectors is required unless model.kernel is separable or semi_separable")
    out = []
    for z in zs:
        v = np.kron(inv, z)
        out.append(v / np.linalg.norm(v))
    return out


def _hurst_rows(name, paths, t):
    try:
        return [(name, hurst_estimate(paths, t), paths.shape[0], paths.shape[1])]
    except DomainError as e:
        log.warning("hurst estimate for %s skipped: %s", name, e)
        return [(name, float("nan"), paths.shape[0], paths.shape[1])]


def cmd_scaling(run: _Run) -> int:
    cfg = run.cfg
    sc = cfg.scaling
    if sc is None:
        raise ConfigError("missing required section 'scaling'")
    model = _model(cfg)
    g = model.grid
    T = parse_duration(sc.T)
    s_micro, s_macro = run.seeds(2)

    if run.wants("rescaled.csv"):
        ev = simulate_thinning(model.kernel, model.mu, T, s_micro)
        r = rescale(ev, model.kernel, model.mu, T, sc.alpha, sc.n_grid)
        comps = [str(c) for c in g.components]
        opts = g.option_labels()
        rows = []
        for i, ti in enumerate(r.t):
            for name, arr, labs in (("X", r.X, comps), ("Y", r.Y, comps), ("Z", r.Z, comps), ("sigma", r.sigma, opts)):
                rows.extend((ti, f"{name}/{lab}", arr[i, j]) for j, lab in enumerate(labs))
        write_csv(run.path("rescaled.csv"), ["t", "component_id", "value"], rows)

    hurst = []
    if sc.limit == "factor":
        vecs = _factor_vectors(cfg, g)
        params = sc.factors
        if len(params) == 1 and len(vecs) > 1:
            params = params * len(vecs)
        if len(params) != len(vecs):
            raise ConfigError(f"scaling.factors needs {len(vecs)} entries, got {len(params)}")
        factors = [(v, RoughFactorParams(alpha=sc.alpha, **p.model_dump())) for v, p in zip(vecs, params)]
        t, sigma, F, V = simulate_factor_limit(factors, sc.horizon, sc.steps, s_macro, n_paths=sc.n_paths)
        for i in range(len(factors)):
            hurst += _hurst_rows(f"V{i + 1}", V[:, :, i], t)
        series = [(f"sigma/{lab}", sigma[0, :, j]) for j, lab in enumerate(g.option_labels())]
        series += [(f"F{i + 1}", F[0, :, i]) for i in range(F.shape[2])]
    else:
        mats = general_limit_matrices(model.kernel, model.mu, sc.alpha, sc.T_sequence, sc.kappa)
        path = simulate_general_vtilde(mats, sc.horizon, sc.steps, s_macro, n_paths=sc.n_paths)
        t = path.t
        for i in range(mats.n_c):
            hurst += _hurst_rows(f"Vtilde{i + 1}", path.Vtilde[:, :, i], t)
        series = [(f"sigma/{lab}", path.sigma[0, :, j]) for j, lab in enumerate(g.option_labels())]
        series += [(f"Vtilde{i + 1}", path.Vtilde[0, :, i]) for i in range(mats.n_c)]
    if run.wants("factors.csv"):
        rows = [(ti, name, arr[i]) for i, ti in enumerate(t) for name, arr in series]
        write_csv(run.path("factors.csv"), ["t", "component_id", "value"], rows)
    if run.wants("hurst.csv"):
        write_csv(run.path("hurst.csv"), ["factor", "H", "n_paths", "n_samples"], hurst)
    return EXIT_OK


# ---------------------------------------------------------------------------
# backtest and impact


def fill_model(cfg: ExperimentConfig, grid) -> bt.FillModel:
    b = cfg.backtest
    if b.lambda_scale is not None:
        lam = np.asarray(b.lambda_scale, float)
        if lam.size != grid.n_options:
            raise ConfigError(f"backtest.lambda_scale needs {grid.n_options} entries")
    else:
        k = np.tile(grid.moneyness, grid.n_maturities)
        lam = b.lambda_atm / (1.0 + b.lambda_decay * np.abs(k - 1.0))
    return bt.FillModel(lam, b.alpha_fill, b.beta_fill, np.broadcast_to(np.asarray(b.vega, float), lam.shape))


def strategy(cfg: ExperimentConfig, grid) -> bt.QuoteStrategy:
    s = cfg.backtest.strategy
    n = grid.n_options
    traded = None
    if s.traded is not None:
        labels = grid.option_labels()
        traded = []
        for x in s.traded:
            if isinstance(x, int):
                if not 0 <= x < n:
                    raise ConfigError(f"backtest.strategy.traded index {x} out of range")
                traded.append(x)
            else:
                # accept the bare strike label on single-maturity grids
                hits = [i for i, lab in enumerate(labels) if lab == x or lab.split("@")[0] == x]
                if not hits:
                    raise ConfigError(f"backtest.strategy.traded: unknown option {x!r}")
                traded.extend(hits)
    if s.kind == "constant":
        return bt.ConstantSpread(s.c, n, traded)
    return bt.InventoryLinear(s.c0, s.c1, n, traded)


def _setup(cfg_plain):
    cfg = ExperimentConfig.model_validate(cfg_plain)
    model = _model(cfg)
    return cfg, model


def _backtest_worker(job):
    cfg_plain, ss, poisson = job
    cfg, model = _setup(cfg_plain)
    g = model.grid
    kernel = KernelMatrix.zeros(g.dim) if poisson else model.kernel
    b = cfg.backtest
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = bt.run_backtest(
            kernel, model.mu, fill_model(cfg, g), strategy(cfg, g), parse_duration(b.horizon), ss,
            n_grid=b.n_grid, sigma0=g.sigma0.ravel(), tick=g.tick, feedback=b.feedback,
        )
    return r.grid, r.pnl, r.cash, r.inventory


def cmd_backtest(run: _Run) -> int:
    cfg = run.cfg
    if cfg.backtest is None:
        raise ConfigError("missing required section 'backtest'")
    model = _model(cfg)
    g = model.grid
    fill_model(cfg, g)
    strategy(cfg, g)
    plain = to_plain(cfg)
    seeds = run.seeds(cfg.backtest.seeds, stream=1)
    worlds = [("hawkes", False)] + ([("poisson", True)] if cfg.backtest.compare_poisson else [])
    rows = []
    for name, poisson in worlds:
        results = run.map(_backtest_worker, [(plain, s, poisson) for s in seeds])
        for i, (grid_t, pnl, cash, inv) in enumerate(results):
            for j, ti in enumerate(grid_t):
                rows.append((name, i, ti, pnl[j], cash[j], *inv[j]))
    if run.wants("pnl.csv"):
        header = ["model", "seed", "t", "pnl", "cash", *(f"inventory_{lab}" for lab in g.option_labels())]
        write_csv(run.path("pnl.csv"), header, rows)
    return EXIT_OK


def _impact_worker(job):
    cfg_plain, ss, poisson = job
    cfg, model = _setup(cfg_plain)
    g = model.grid
    kernel = KernelMatrix.zeros(g.dim) if poisson else model.kernel
    im = cfg.impact
    horizon = parse_duration(cfg.backtest.horizon)
    T = horizon if im.T is None else parse_duration(im.T)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return bt.impact_diffs(
            kernel, model.mu, fill_model(cfg, g), strategy(cfg, g), horizon, [ss], T, im.alpha, im.n_grid,
            g.sigma0.ravel(), g.tick,
        )[0]


def cmd_impact(run: _Run) -> int:
    cfg = run.cfg
    if cfg.backtest is None:
        raise ConfigError("missing required section 'backtest' (fill model and strategy)")
    if cfg.impact is None:
        raise ConfigError("missing required section 'impact'")
    model = _model(cfg)
    g = model.grid
    fill_model(cfg, g)
    strategy(cfg, g)
    im = cfg.impact
    horizon = parse_duration(cfg.backtest.horizon)
    T = horizon if im.T is None else parse_duration(im.T)
    if not 0 < T <= horizon:
        raise ConfigError("impact.T must lie in (0, backtest.horizon]")
    C0 = np.broadcast_to(np.asarray(im.C0, float), (g.n_options,))
    xi = im.xi_bp * 1e-4 * C0
    plain = to_plain(cfg)
    seeds = run.seeds(im.seeds, stream=2)
    labels = g.option_labels()
    worlds = [("hawkes", False)] + ([("poisson", True)] if im.compare_poisson else [])
    mi_rows, cross_rows = [], []
    for name, poisson in worlds:
        diffs = np.array(run.map(_impact_worker, [(plain, s, poisson) for s in seeds]))
        rep = bt.summarize_impact(diffs, xi, C0, T ** (2 * im.alpha))
        for j, ti in enumerate(rep.t):
            mi_rows.append((name, ti * T, rep.mi_total[j], *rep.mi_point[j], *rep.mi_point_abs[j]))
            cross_rows.extend((name, ti * T, lab, rep.cross_bp[j, o]) for o, lab in enumerate(labels))
    if run.wants("impact.csv"):
        header = ["model", "t", "MI_total", *(f"MI_{lab}" for lab in labels), *(f"MIabs_{lab}" for lab in labels)]
        write_csv(run.path("impact.csv"), header, mi_rows)
    if run.wants("cross_impact.csv"):
        write_csv(run.path("cross_impact.csv"), ["model", "t", "option", "bp"], cross_rows)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "noarb": cmd_noarb,
    "scaling": cmd_scaling,
    "backtest": cmd_backtest,
    "impact": cmd_impact,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volhawkes", description="Hawkes implied-volatility surface toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--out", default=None, help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for seed ensembles")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = cfg.model_copy(update={"seed": seed})
        out = Path(args.out or os.environ.get(OUT_ENV) or cfg.output.directory)
        # validate the model before touching the filesystem
        build_kernel(cfg, build_grid(cfg))
    except (ConfigError, StructuralError, DomainError, ValueError) as e:
        print(f"configuration error:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, seed, out, args.threads)
    try:
        code = COMMANDS[args.command](run)
    except (ConfigError, StructuralError) as e:
        print(f"configuration error:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolHawkesError, ArithmeticError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if run.wants("resolved_config.toml"):
        with open(out / "resolved_config.toml", "wb") as fh:
            tomli_w.dump(to_plain(cfg), fh)
    return code


if __name__ == "__main__":
    sys.exit(main())
