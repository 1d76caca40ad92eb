"""Command-line front end.

Subcommands generate curves and surfaces, run the fitting pipelines and
serialize every artifact with a metadata header (tool version, config hash,
seed) for exact reproduction. Exit codes: 0 success, 1 validation error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, stm, twotls
from .bloch import IntegrationError
from .datasets import LossSurface, SchemaError, config_hash, read_config, \
    read_loss_csv, write_config, write_loss_csv
from .estimator import FitStagePlan, PipelineError, fit_saturation, \
    run_pipeline
from .optim import FitConvergenceError
from .s21 import S21Model, fit_s21, read_iq_csv, synthesize_trace, write_iq_csv
from .units import CONSTANTS, BiasDrive, ResonatorContext, TlsSpecies, \
    input_power_at_chip, photons_from_input_power

# context + model defaults for the amorphous-silicon resonator dataset;
# every key can be overridden by config file or --set
DEFAULTS: dict[str, float] = {
    "omega0": 2.0 * math.pi * 5.1e9,   # rad/s
    "rel_permittivity": 11.5,
    "volume": 2925e-18,                # m^3
    "temperature": 0.02,               # K
    "attenuation_slope": -1.87e-9,     # dB/Hz
    "attenuation_offset": -70.2,       # dB
    "q_total": 4000.0,
    "q_external": 7300.0,
    "tan_delta0": 1.6e-4,
    "n_c": 3.7,
    "p1": 11.0 * CONSTANTS.debye,      # C m
    "gamma1_max": 5.7e6,               # 1/s
    "p2": 110.0 * CONSTANTS.debye,     # C m
    "gamma2_max": 8.0e8,               # 1/s
    "a_loss": 1.8e-8,
    "b_strength": 1.27,
    "c_logspan": 7.8,
    "d_rate": 7.2e3,                   # V/(m s) == 7.2e-3 V/(um s)
    "eb_max": 0.44e6,                  # V/m
    "e_max": 10.0 * CONSTANTS.boltzmann,  # J
    "noise_sigma": 0.0,
    "seed": 0.0,
    "low_rate_cutoff": 3.0e8,          # V/(m s)
    "unsat_power_cutoff": -25.0,       # dBm
    "sat_power_floor": -15.0,          # dBm
    "rho_ref": 1.0,                    # 1/(J m^3), DOS scale for `dos`
    "dos_eta": 3.0,
    "delta0_min_over_emax": math.exp(-7.8),
    "rho1_u_product": 4.06e-2,
}


class CliError(ValueError):
    """Validation problem in arguments or configuration."""


def _parse_grid(spec: str) -> np.ndarray:
    """Grid spec ``min:max:points:{log|linear}``."""
    parts = spec.split(":")
    if len(parts) != 4:
        raise CliError(f"grid spec must be min:max:points:log|linear, "
                       f"got {spec!r}")
    lo, hi, n, kind = parts
    try:
        lo_f, hi_f, n_i = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise CliError(f"malformed grid spec {spec!r}") from exc
    if n_i < 2:
        raise CliError("grid needs at least 2 points")
    if kind == "log":
        if lo_f <= 0 or hi_f <= 0:
            raise CliError("log grids need positive endpoints")
        return np.geomspace(lo_f, hi_f, n_i)
    if kind == "linear":
        return np.linspace(lo_f, hi_f, n_i)
    raise CliError(f"unknown grid kind {kind!r}")


def _resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        loaded = read_config(args.config)
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise CliError(f"unknown config key {key!r}")
        try:
            cfg[key] = float(value)
        except ValueError as exc:
            raise CliError(f"--set {key}: not a number: {value!r}") from exc
    return cfg


def _context(cfg: dict) -> ResonatorContext:
    return ResonatorContext(
        omega0=cfg["omega0"], rel_permittivity=cfg["rel_permittivity"],
        volume=cfg["volume"], temperature=cfg["temperature"],
        attenuation_slope=cfg["attenuation_slope"],
        attenuation_offset=cfg["attenuation_offset"])


def _ensemble(cfg: dict) -> stm.StmEnsemble:
    species = TlsSpecies(dipole=cfg["p1"], gamma1_max=cfg["gamma1_max"])
    return stm.StmEnsemble(species=species, tan_delta0=cfg["tan_delta0"],
                           n_c=cfg["n_c"])


def _params2(cfg: dict) -> twotls.TwoTlsParams:
    return twotls.TwoTlsParams(
        a_loss=cfg["a_loss"], b_strength=cfg["b_strength"],
        c_logspan=cfg["c_logspan"], d_rate=cfg["d_rate"], p2=cfg["p2"],
        gamma2_max=cfg["gamma2_max"])


def _meta(cfg: dict, extra: dict | None = None) -> dict:
    meta = {"tool": "tlsloss", "version": __version__,
            "config_sha256": config_hash(cfg), "seed": int(cfg["seed"])}
    meta.update(extra or {})
    return meta


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _emit(path) -> None:
    print(f"wrote {path}")


def _plot_script(out_dir: Path, csv_name: str, x_col: str, y_col: str,
                 logx: bool, logy: bool, by: str | None = None) -> Path:
    """Write a standalone matplotlib script next to the data; the core never
    imports graphics."""
    path = out_dir / f"plot_{Path(csv_name).stem}.py"
    group = f"for key, sub in df.groupby({by!r}): " \
            f"ax.plot(sub['{x_col}'], sub['{y_col}'], 'o-', label=str(key))" \
        if by else f"ax.plot(df['{x_col}'], df['{y_col}'], 'o-')"
    legend = "ax.legend(title='{0}')".format(by) if by else ""
    path.write_text(f"""#!/usr/bin/env python3
import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv("{csv_name}", comment="#")
fig, ax = plt.subplots()
{group}
ax.set_xlabel("{x_col}")
ax.set_ylabel("{y_col}")
{'ax.set_xscale("log")' if logx else ''}
{'ax.set_yscale("log")' if logy else ''}
{legend}
fig.tight_layout()
plt.show()
""", encoding="utf-8")
    return path


def _chunked_map(fn, arrays: list[np.ndarray], workers: int) -> np.ndarray:
    """Apply ``fn`` to aligned array chunks; output ordering is fixed by the
    chunk index, so worker count never changes the result."""
    n = len(arrays[0])
    workers = max(1, workers)
    bounds = np.linspace(0, n, workers + 1, dtype=int)
    chunks = [tuple(a[lo:hi] for a in arrays)
              for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if workers == 1 or len(chunks) == 1:
        parts = [fn(*c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: fn(*c), chunks))
    return np.concatenate(parts)


# --- subcommand implementations ----------------------------------------------

def _cmd_universal(args) -> int:
    cfg = _resolve_config(args)
    xi = _parse_grid(args.xi)
    vals = [stm.universal_loss_closed_form(float(x)) for x in xi]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for k, v in sorted(_meta(cfg).items()):
            fh.write(f"# {k}: {v}\n")
        fh.write("xi,normalized_loss\n")
        for x, v in zip(xi, vals):
            fh.write(f"{float(x)!r},{v!r}\n")
    _plot_script(out.parent, out.name, "xi", "normalized_loss", True, True)
    _emit(out)
    return 0


def _cmd_bloch_loss(args) -> int:
    cfg = _resolve_config(args)
    xi = _parse_grid(args.xi)
    kernel = stm.default_kernel_table().kernel if args.method == "table" else None
    vals = [stm.loss_with_relaxation(float(x), args.gamma_ratio,
                                     kernel=kernel) for x in xi]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for k, v in sorted(_meta(cfg, {"gamma_ratio": args.gamma_ratio,
                                       "method": args.method}).items()):
            fh.write(f"# {k}: {v}\n")
        fh.write("xi,normalized_loss\n")
        for x, v in zip(xi, vals):
            fh.write(f"{float(x)!r},{v!r}\n")
    _plot_script(out.parent, out.name, "xi", "normalized_loss", True, True)
    _emit(out)
    return 0


def _cmd_surface(args) -> int:
    """Forward-model surface over a (power, bias-rate) grid, optional
    multiplicative Gaussian noise, sidecar JSON and plot script."""
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg["seed"] = float(args.seed)
    if args.noise is not None:
        cfg["noise_sigma"] = float(args.noise)
    ctx = _context(cfg)
    ensemble = _ensemble(cfg)
    params2 = _params2(cfg)
    powers = _parse_grid(args.powers)
    ebdot = _parse_grid(args.ebdot) * 1e6  # V/(um s) -> SI
    kernel = stm.default_kernel_table().kernel

    f0 = ctx.omega0 / (2.0 * math.pi)
    n_of_power = {
        float(p): photons_from_input_power(
            input_power_at_chip(float(p), f0, ctx), cfg["q_total"],
            cfg["q_external"], ctx)
        for p in powers
    }
    rows_pac, rows_eb, rows_n = [], [], []
    for p in powers:
        n_val = n_of_power[float(p)]
        if args.with_saturation:
            rows_pac.append(float(p))
            rows_eb.append(0.0)
            rows_n.append(n_val)
        for eb in ebdot:
            rows_pac.append(float(p))
            rows_eb.append(float(eb))
            rows_n.append(n_val)
    pac = np.array(rows_pac)
    eb = np.array(rows_eb)
    n = np.array(rows_n)

    def forward(eb_c, n_c_arr):
        return twotls.combined_loss_batch(eb_c, n_c_arr, ensemble, params2,
                                          ctx, kernel)

    tan = _chunked_map(forward, [eb, n], args.workers)
    sigma = float(cfg["noise_sigma"])
    if sigma > 0:
        rng = np.random.default_rng(int(cfg["seed"]))
        tan = np.maximum(tan * (1.0 + sigma * rng.standard_normal(tan.shape)),
                         1e-12)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    surface = LossSurface(pac, eb, n, tan)
    csv_path = out_dir / "surface.csv"
    write_loss_csv(surface, csv_path,
                   columns=("ebdot_v_per_um_s", "n_photons", "pac_dbm",
                            "tan_delta"),
                   header_meta=_meta(cfg))
    sidecar = {
        "noise_model": "multiplicative gaussian",
        "noise_sigma": sigma,
        "seed": int(cfg["seed"]),
        "parameters": {k: cfg[k] for k in sorted(cfg)},
        "meta": _meta(cfg),
    }
    _write_json(out_dir / "surface_meta.json", sidecar)
    _plot_script(out_dir, csv_path.name, "ebdot_v_per_um_s", "tan_delta",
                 True, True, by="pac_dbm")
    _emit(csv_path)
    _emit(out_dir / "surface_meta.json")

    if args.s21_traces:
        for p in powers:
            n_val = n_of_power[float(p)]
            tan_s = stm.saturation_loss(n_val, cfg["tan_delta0"], cfg["n_c"])
            model = S21Model.from_quality_factors(
                1.0 / tan_s, cfg["q_external"], 0.0, ctx.omega0)
            trace = synthesize_trace(model, noise_sigma=sigma,
                                     seed=int(cfg["seed"]) + int(round(p)))
            tp = out_dir / f"s21_{p:+.0f}dbm.csv"
            write_iq_csv(trace, tp, header_meta=_meta(cfg, {"pac_dbm": p}))
            _emit(tp)
    return 0


def _cmd_excess(args) -> int:
    cfg = _resolve_config(args)
    params2 = _params2(cfg)
    ebdot = _parse_grid(args.ebdot) * 1e6
    vals = [twotls.excess_loss_unsaturated(float(e), params2) for e in ebdot]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for k, v in sorted(_meta(cfg).items()):
            fh.write(f"# {k}: {v}\n")
        fh.write("ebdot_v_per_um_s,tan_delta2_unsat\n")
        for e, v in zip(ebdot, vals):
            fh.write(f"{float(e) * 1e-6!r},{v!r}\n")
    _plot_script(out.parent, out.name, "ebdot_v_per_um_s",
                 "tan_delta2_unsat", True, True)
    _emit(out)
    return 0


def _cmd_dos(args) -> int:
    cfg = _resolve_config(args)
    ctx = _context(cfg)
    hw0 = CONSTANTS.reduced_planck * ctx.omega0
    e_max = cfg["e_max"]
    delta0_min = cfg["delta0_min_over_emax"] * e_max
    rho2_eq = twotls.power_law_dos(cfg["rho_ref"], hw0, e_max,
                                   eta=cfg["dos_eta"])
    drive = BiasDrive(eb_max=cfg["eb_max"], fb=1.0)
    e0 = min(e_max, hw0 + cfg["p2"] * cfg["eb_max"])
    rho1 = 1.0
    u = cfg["rho1_u_product"] / rho1
    model = twotls.DosModel(rho2_eq=rho2_eq, rho1=rho1, u=u, e_max=e_max,
                            delta0_min=delta0_min, e0=e0)
    gamma1_of = twotls.gamma1_phonon_scaling(
        cfg["d_rate"] / ((delta0_min / e_max) ** 2 * cfg["eb_max"]), e_max)
    energies = _parse_grid(args.energy) * CONSTANTS.boltzmann  # K -> J
    ebdot = float(args.ebdot_value) * 1e6
    vals = [twotls.nonequilibrium_dos(float(e), ebdot, model, drive, gamma1_of)
            for e in energies]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for k, v in sorted(_meta(cfg, {"ebdot_v_per_um_s":
                                       args.ebdot_value}).items()):
            fh.write(f"# {k}: {v}\n")
        fh.write("energy_kelvin,dos_per_j_m3\n")
        for e, v in zip(energies, vals):
            fh.write(f"{float(e) / CONSTANTS.boltzmann!r},{v!r}\n")
    _plot_script(out.parent, out.name, "energy_kelvin", "dos_per_j_m3",
                 True, True)
    _emit(out)
    return 0


def _cmd_fit_s21(args) -> int:
    cfg = _resolve_config(args)
    trace = read_iq_csv(args.infile)
    report = fit_s21(trace, delay_correction_s=args.delay)
    payload = report.as_dict()
    payload["meta"] = _meta(cfg)
    _write_json(args.out, payload)
    _emit(args.out)
    print(f"Qi={report.q_internal:.1f} Qe={report.q_external:.1f} "
          f"phi_deg={math.degrees(report.model.phi):.3f}")
    return 0


def _cmd_fit_saturation(args) -> int:
    cfg = _resolve_config(args)
    surface = read_loss_csv(args.infile)
    plan = _plan_from_cfg(cfg)
    outcome = fit_saturation(surface, plan)
    payload = {"params": outcome.params, "warnings": outcome.warnings,
               "residual_norm": outcome.residual_norm,
               "n_points": outcome.n_points, "meta": _meta(cfg)}
    _write_json(args.out, payload)
    _emit(args.out)
    return 0


def _plan_from_cfg(cfg: dict) -> FitStagePlan:
    return FitStagePlan(low_rate_cutoff=cfg["low_rate_cutoff"],
                        unsat_power_cutoff=cfg["unsat_power_cutoff"],
                        sat_power_floor=cfg["sat_power_floor"],
                        seed=int(cfg["seed"]), e_max=cfg["e_max"],
                        eb_max=cfg["eb_max"], q_total=cfg["q_total"],
                        q_external=cfg["q_external"])


def _cmd_fit_pipeline(args) -> int:
    cfg = _resolve_config(args)
    surface = read_loss_csv(args.infile)
    ctx = _context(cfg)
    plan = _plan_from_cfg(cfg)
    report = run_pipeline(surface, plan, ctx)
    payload = json.loads(report.to_json())
    payload["meta"] = _meta(cfg)
    _write_json(args.out, payload)
    _emit(args.out)
    params = report.parameters()
    print("recovered: " + " ".join(
        f"{k}={params[k]:.4g}" for k in sorted(params)))
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _resolve_config(args)
    ctx = _context(cfg)
    p_chip = input_power_at_chip(args.power_dbm, args.freq, ctx)
    n = photons_from_input_power(p_chip, cfg["q_total"], cfg["q_external"],
                                 ctx)
    payload = {"source_power_dbm": args.power_dbm, "freq_hz": args.freq,
               "chip_power_dbm": p_chip, "n_photons": n, "meta": _meta(cfg)}
    if args.out:
        _write_json(args.out, payload)
        _emit(args.out)
    print(f"chip_power_dbm={p_chip:.4f} n_photons={n:.6g}")
    return 0


def _cmd_ratios(args) -> int:
    cfg = _resolve_config(args)
    ctx = _context(cfg)
    ratios = twotls.consistency_ratios(_ensemble(cfg), _params2(cfg),
                                       e_max=cfg["e_max"], ctx=ctx,
                                       eb_max=cfg["eb_max"])
    payload = {
        "gamma2_over_gamma1": ratios.gamma2_over_gamma1,
        "rho2eq_over_rho1": ratios.rho2eq_over_rho1,
        "rho1_u": ratios.rho1_u,
        "c0_tunneling_strength": ratios.c0_tunneling_strength,
        "meta": _meta(cfg),
    }
    if args.out:
        _write_json(args.out, payload)
        _emit(args.out)
    print(json.dumps({k: payload[k] for k in sorted(payload) if k != "meta"},
                     sort_keys=True))
    return 0


def _cmd_write_config(args) -> int:
    cfg = _resolve_config(args)
    write_config(cfg, args.out, header="tlsloss configuration (SI units)")
    _emit(args.out)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep exit-code contract: usage errors are 1
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tlsloss", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out_required=True):
        if config:
            p.add_argument("--config", help="key = value parameter file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key")
        if out_required:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("universal", help="dissipationless universal loss "
                       "curve vs xi")
    p.add_argument("--xi", default="1e-3:1e4:200:log",
                   help="grid spec min:max:points:{log|linear}")
    common(p)
    p.set_defaults(fn=_cmd_universal)

    p = sub.add_parser("bloch-loss", help="Bloch-dynamics loss curve vs xi")
    p.add_argument("--xi", default="1e-2:1e3:40:log")
    p.add_argument("--gamma-ratio", type=float, default=0.0)
    p.add_argument("--method", choices=("direct", "table"), default="table")
    common(p)
    p.set_defaults(fn=_cmd_bloch_loss)

    p = sub.add_parser("surface", help="forward-model (or synthesize noisy) "
                       "loss surface over a power/bias-rate grid")
    p.add_argument("--powers", default="-60:0:13:linear",
                   help="source powers in dBm")
    p.add_argument("--ebdot", default="1:1e6:31:log",
                   help="bias rates in V/(um s)")
    p.add_argument("--noise", type=float, default=None,
                   help="multiplicative gaussian sigma")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("TLSLOSS_WORKERS", "1")))
    p.add_argument("--with-saturation", action="store_true", default=True)
    p.add_argument("--no-saturation", dest="with_saturation",
                   action="store_false")
    p.add_argument("--s21-traces", action="store_true")
    common(p)
    p.set_defaults(fn=_cmd_surface)

    p = sub.add_parser("excess", help="unsaturated excess-loss curve")
    p.add_argument("--ebdot", default="1e-2:1e5:60:log")
    common(p)
    p.set_defaults(fn=_cmd_excess)

    p = sub.add_parser("dos", help="non-equilibrium DOS vs energy")
    p.add_argument("--energy", default="0.1:20:50:log",
                   help="energies in kelvin")
    p.add_argument("--ebdot-value", type=float, default=1e3,
                   help="bias rate in V/(um s)")
    common(p)
    p.set_defaults(fn=_cmd_dos)

    p = sub.add_parser("fit-s21", help="fit one IQ trace")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--delay", type=float, default=None,
                   help="electrical delay to undo, in seconds")
    common(p)
    p.set_defaults(fn=_cmd_fit_s21)

    p = sub.add_parser("fit-saturation", help="fit the zero-bias power sweep")
    p.add_argument("--in", dest="infile", required=True)
    common(p)
    p.set_defaults(fn=_cmd_fit_saturation)

    p = sub.add_parser("fit-pipeline", help="run the full staged estimation")
    p.add_argument("--in", dest="infile", required=True)
    common(p)
    p.set_defaults(fn=_cmd_fit_pipeline)

    p = sub.add_parser("calibrate", help="source power -> chip power and "
                       "photon number")
    p.add_argument("--power-dbm", type=float, required=True)
    p.add_argument("--freq", type=float, required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("ratios", help="derived two-ensemble consistency "
                       "ratios")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_ratios)

    p = sub.add_parser("write-config", help="dump the resolved configuration")
    common(p)
    p.set_defaults(fn=_cmd_write_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CliError, SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IntegrationError, FitConvergenceError, PipelineError,
            OverflowError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
