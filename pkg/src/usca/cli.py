"""Command-line entry point.

Exit codes: 0 success (and every audit passed), 1 an audit failed,
2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import audit as audits
from . import config as cfgmod
from .bandit import CSV_COLUMNS, make_environment, run_usca, theory_constants
from .env import Domain
from .errors import InputError, ResourceError, UscaError
from .kernels import Eigendecay, KernelSpec

COMMANDS = ("run", "audit-spectral", "audit-sensitivity", "audit-privacy", "audit-approx",
            "audit-geometry", "sweep", "constants")


def _dump(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=audits._jsonable) + "\n")


def _metadata(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    meta = {"command": command, "finished_utc": datetime.now(timezone.utc).isoformat(),
            "elapsed_s": time.perf_counter() - started, **(extra or {})}
    _dump(out / f"{command}.metadata.json", meta)


def _append_csv(path: Path, columns, rows) -> None:
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def _report(out: Path, report: audits.AuditReport) -> int:
    _dump(out / f"audit_{report.name}.json", report.to_dict())
    print(report.verdict())
    return 0 if report.passed else 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--output", help="override output_dir")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--mech-grid", type=int, dest="mech_grid", help="mechanism cells per action axis")
    p.add_argument("--z-cap", type=int, dest="z_cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usca", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS[:-1]:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
    c = sub.add_parser("constants")
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--beta-p", type=float, default=2.0)
    c.add_argument("--C-p", type=float, default=1.0, dest="C_p")
    c.add_argument("--F", type=float, default=1.0)
    c.add_argument("--cpF2", type=float, help="sets C_p so that C_p * F^2 equals this value")
    c.add_argument("--R", type=float, default=1.0)
    c.add_argument("--tau", type=float, default=1.0)
    c.add_argument("--B", type=float, default=1.0)
    c.add_argument("--T", type=int, default=1000, dest="T")
    c.add_argument("--gamma", type=float, default=10.0)
    c.add_argument("--epsilon", type=float, default=1.0)
    c.add_argument("--json", action="store_true")
    return parser


def _load(args) -> dict[str, Any]:
    cfg = cfgmod.load(args.config)
    if args.output:
        cfg["output_dir"] = args.output
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    for key in ("T", "epsilon", "tau", "mech_grid", "z_cap"):
        val = getattr(args, key, None)
        if val is not None:
            cfg["algorithm"][key] = val
    return cfgmod.validate(cfg)


def cmd_constants(args) -> int:
    C_p = args.cpF2 / args.F**2 if args.cpF2 is not None else args.C_p
    tc = theory_constants(args.delta, Eigendecay(args.beta_p, C_p, args.F), args.R, args.tau, args.B,
                          args.T, args.gamma, epsilon=args.epsilon)
    if args.json:
        print(json.dumps(tc.to_dict(), indent=2, sort_keys=True))
    else:
        print(f"N_bar_1 = {tc.N_bar_1:.4g}")
        print(f"beta = {tc.beta:.6g}")
        print(f"beta_1 = {tc.beta_1:.6g}")
        print(f"beta_2 = {tc.beta_2:.6g}")
        print(f"sup_var_bound = {tc.sup_var_bound:.6g}")
        print(f"predicted_error = {tc.predicted_error:.6g}")
    return 0


def cmd_run(cfg, out: Path) -> int:
    alg = cfg["algorithm"]
    env = make_environment(cfg["environment"], cfg["master_seed"])
    res = run_usca(env, alg["T"], alg["epsilon"], alg["tau"], cfg["master_seed"],
                   mech_cells=alg["mech_grid"], z_cap=alg["z_cap"], gamma_trials=alg["gamma_trials"],
                   n_eval=alg["n_eval"])
    record = res.to_dict()
    record["config"] = cfg
    _dump(out / "run_result.json", record)
    _append_csv(out / "regret.csv", CSV_COLUMNS, [res.csv_row()])
    print(f"output={res.output.tolist()} regret={res.regret:.6g} er={res.er_montecarlo:.6g} "
          f"K={res.K} gamma_hat={res.gamma_hat:.4g}")
    return 0


def cmd_audit(name: str, cfg, out: Path) -> int:
    alg, aud, seed = cfg["algorithm"], cfg["audit"], cfg["master_seed"]
    if name == "audit-geometry":
        g = aud["geometry"]
        rep = audits.geometric_audit(g["d"], g["diameter"], g["lipschitz"], g["r"], g["n_mc"], seed,
                                     x_star=g.get("x_star"))
        return _report(out, rep)
    if name == "audit-spectral":
        s = aud["spectral"]
        d = s["feature_dim"]
        lo, hi = s["box"]
        if s["kind"] == "linear":
            dom = Domain.box([(lo, hi)] * d)
            kernel = KernelSpec.linear(d, scale=math.sqrt(d) * max(abs(lo), abs(hi)))
        else:
            eig = s.get("eigenvalues") or [2.0 ** -(j + 1) for j in range(d // 2)]
            dom = Domain.box([(lo, hi)])
            kernel = KernelSpec.mercer(eig, 1)
        rep = audits.spectral_audit(kernel, dom, s["T"], s["tau"], aud["delta"], s["trials"], seed)
        return _report(out, rep)
    env = make_environment(cfg["environment"], seed)
    if name == "audit-sensitivity":
        rep = audits.sensitivity_audit(env, alg["T"], alg["tau"], aud["n_pairs"], seed, z_cap=alg["z_cap"])
    elif name == "audit-privacy":
        rep = audits.privacy_audit(env, alg["T"], alg["tau"], aud["epsilons"], aud["n_pairs"], seed,
                                   cells=alg["mech_grid"], z_cap=alg["z_cap"])
    elif name == "audit-approx":
        rep = audits.approximation_audit(env, aud["T_ladder"], alg["tau"], aud["delta"],
                                         range(aud["seeds"]), z_cap=alg["z_cap"])
    else:
        raise InputError(f"unknown audit {name}")
    return _report(out, rep)


def cmd_sweep(cfg, out: Path, jobs: int) -> int:
    alg, aud, seed = cfg["algorithm"], cfg["audit"], cfg["master_seed"]
    env = make_environment(cfg["environment"], seed)
    path = out / "scaling_cells.csv"
    old: list[dict] = []
    if path.exists():
        with path.open() as fh:
            for r in csv.DictReader(fh):
                old.append({"trial": int(r["trial"]), "T": int(r["T"]), "epsilon": float(r["epsilon"]),
                            "predictor": r["predictor"], "gamma_hat": float(r["gamma_hat"]),
                            "K": int(r["K"]), "sup_var": float(r["sup_var"]), "m": float(r["m"]),
                            "error_rate": float(r["error_rate"])})
    done = {(r["trial"], r["T"]) for r in old}
    rows, _ = audits.scaling_experiment(env, aud["T_ladder"], aud["eps_ladder"], aud["trials"], alg["tau"],
                                        seed, n_eval=alg["n_eval"], cells=alg["mech_grid"],
                                        z_cap=alg["z_cap"], eps_T=aud.get("eps_T"), jobs=jobs, done=done)
    _append_csv(path, audits.SCALING_COLUMNS, rows)
    allrows = old + rows
    rep = audits.summarize_scaling(allrows, aud["T_ladder"], aud["eps_ladder"], eps_T=aud.get("eps_T"))
    rep.config.update({"trials": aud["trials"], "tau": alg["tau"], "seed": seed})
    return _report(out, rep)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    started = time.perf_counter()
    try:
        if args.command == "constants":
            return cmd_constants(args)
        cfg = _load(args)
        out = Path(cfg["output_dir"])
        if args.command == "run":
            code = cmd_run(cfg, out)
        elif args.command == "sweep":
            code = cmd_sweep(cfg, out, args.jobs)
        else:
            code = cmd_audit(args.command, cfg, out)
        _metadata(out, args.command, started)
        return code
    except (InputError, ResourceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UscaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
