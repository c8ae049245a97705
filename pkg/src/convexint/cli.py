"""Command-line front door: configuration, subcommand dispatch, exports and reports.

Configuration is an INI file (sections ``exponents``, ``grid``, ``scheme``,
``step``, ``target``, ``lemmas``, ``mikado``, ``output``); every key has a
default, and the defaults reproduce the worked example ``d = 3, p = 4/3,
p~ = 1, eps = 0.1, eps~ = 0.05, Q = 2, N = 128, n_t = 33``.

Exit codes: 0 when every asserted check passes, 2 for validation or
estimate failures (all :class:`ConstructionError` subclasses and failing
reports), 1 for anything unexpected.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import BudgetExhausted, ConstructionError
from .mikado import DELTA0, VARIANTS, build_blocks, cell_resolution, choose_exponents
from .scheme import (
    SchemeConfig,
    SchemeState,
    Target,
    closeness_report,
    default_target,
    initial_data,
    inductive_report,
    iterate,
    step,
    step_auto,
    telescoping_bound,
)
from .spectral_calculus import divergence, improved_antidivergence, set_workers, std_antidivergence
from .torus_field import GridSpec, dump_fields, load_fields, lp_norm, rescale, write_norm_report
from .verify import (
    EstimateReport,
    TestFunctionFamily,
    check_improved_holder,
    check_mean_value,
    check_mikado_identities,
    weak_residual,
)

log = logging.getLogger("convexint")

EXIT_PASS, EXIT_INTERNAL, EXIT_FAIL = 0, 1, 2
MANIFEST = "manifest.json"

DEFAULTS = {
    "exponents": {"d": "3", "p": "4/3", "p_tilde": "1", "m": "0", "m_tilde": "0", "k": "0",
                  "variant": "transport"},
    "grid": {"N": "128", "n_t": "33", "sizes": ""},
    "scheme": {"eps": "0.1", "eps_tilde": "0.05", "eta": "0.5", "Q": "2", "c": "",
               "lam_policy": "auto", "lam_seed": "4", "lam_budget": "6",
               "norm_mode": "auto", "resolution_factor": "8"},
    "step": {"delta": "0.25", "sigma": "0.25", "lam": ""},
    "target": {"expr": "", "name": ""},
    "lemmas": {"N": "256", "lambdas": "4, 8, 16, 32", "p_list": "1, 2, 4",
               "mean_lambdas": "3, 5, 10", "antidiv_N": "64", "antidiv_samples": "10",
               "antidiv_lambdas": "4, 8, 16"},
    "mikado": {"mu": "16", "quadrature_N": "1048576", "export_N": "64"},
    "output": {"export_fields": "true", "export_times": "0, 0.5, 1", "residual_family": "20"},
}


# ---------------------------------------------------------------------------
# configuration


def _number(text: str) -> float:
    text = text.strip()
    if text.lower() in ("inf", "infinity"):
        return math.inf
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _numbers(text: str) -> List[float]:
    return [_number(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _variant(name: str) -> str:
    name = name.strip().replace("-", "_")
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


_NAMESPACE = {name: getattr(np, name) for name in (
    "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "sinh", "cosh", "tanh", "pi", "arctan")}


def target_from_expr(expr: str, d: int, name: str = "") -> Target:
    """Target density from a numpy expression in ``t`` and ``x1 .. xd``.

    Only the names in a fixed numpy namespace are visible; the time
    derivative is taken by fourth-order differences.
    """
    code = compile(expr, "<target>", "eval")

    def func(t, x):
        env = dict(_NAMESPACE, t=t)
        env.update({f"x{i + 1}": x[i] for i in range(d)})
        return eval(code, {"__builtins__": {}}, env) + 0.0 * x[0]

    return Target(func, None, name=name or expr)


@dataclass
class RunConfig:
    """Parsed configuration: the scheme settings plus harness and output options."""

    d: int
    p: float
    p_tilde: float
    m: int
    m_tilde: int
    k: int
    variant: str
    N: int
    n_t: int
    sizes: Optional[tuple]
    scheme: dict
    step: dict
    target_expr: str
    target_name: str
    lemmas: dict
    mikado: dict
    export_fields: bool
    export_times: List[float]
    residual_family: int
    seed: int = 0
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[str] = None, variant: Optional[str] = None,
             seed: int = 0) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read_dict(DEFAULTS)
        if path is not None:
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            parser.read(path)
        raw = {s: dict(parser[s]) for s in parser.sections()}
        ex, gr, sc, st = parser["exponents"], parser["grid"], parser["scheme"], parser["step"]
        lm, mk, out = parser["lemmas"], parser["mikado"], parser["output"]
        sizes = tuple(int(v) for v in _numbers(gr["sizes"])) or None
        lam_policy = sc["lam_policy"].strip()
        scheme = {
            "eps": _number(sc["eps"]), "eps_tilde": _number(sc["eps_tilde"]),
            "eta": _number(sc["eta"]), "Q": int(sc["Q"]),
            "c": _number(sc["c"]) if sc["c"].strip() else None,
            "lam_policy": "auto" if lam_policy == "auto" else [int(v) for v in _numbers(lam_policy)],
            "lam_seed": int(sc["lam_seed"]), "lam_budget": int(sc["lam_budget"]),
            "norm_mode": sc["norm_mode"].strip(),
            "resolution_factor": _number(sc["resolution_factor"]),
        }
        if scheme["Q"] < 0:
            raise ValueError("Q must be non-negative")
        stepcfg = {"delta": _number(st["delta"]), "sigma": _number(st["sigma"]),
                   "lam": int(_number(st["lam"])) if st["lam"].strip() else None}
        lemmas = {
            "N": int(lm["N"]), "lambdas": [int(v) for v in _numbers(lm["lambdas"])],
            "p_list": _numbers(lm["p_list"]),
            "mean_lambdas": [int(v) for v in _numbers(lm["mean_lambdas"])],
            "antidiv_N": int(lm["antidiv_N"]), "antidiv_samples": int(lm["antidiv_samples"]),
            "antidiv_lambdas": [int(v) for v in _numbers(lm["antidiv_lambdas"])],
        }
        mikado = {"mu": _number(mk["mu"]), "quadrature_N": int(mk["quadrature_N"]),
                  "export_N": int(mk["export_N"])}
        return cls(
            d=int(ex["d"]), p=_number(ex["p"]), p_tilde=_number(ex["p_tilde"]),
            m=int(ex["m"]), m_tilde=int(ex["m_tilde"]), k=int(ex["k"]),
            variant=_variant(variant or ex["variant"]),
            N=int(gr["N"]), n_t=int(gr["n_t"]), sizes=sizes,
            scheme=scheme, step=stepcfg,
            target_expr=parser["target"]["expr"].strip(),
            target_name=parser["target"]["name"].strip(),
            lemmas=lemmas, mikado=mikado,
            export_fields=out.getboolean("export_fields"),
            export_times=_numbers(out["export_times"]),
            residual_family=int(out["residual_family"]),
            seed=int(seed), raw=raw,
        )

    def exponents(self):
        return choose_exponents(self.d, self.p, self.p_tilde, self.m, self.m_tilde, self.k,
                                variant=self.variant)

    def grid(self) -> GridSpec:
        return GridSpec(self.d, self.N, self.n_t, sizes=self.sizes)

    def target(self) -> Target:
        if self.target_expr:
            return target_from_expr(self.target_expr, self.d, self.target_name)
        return default_target()

    def scheme_config(self, workdir: Optional[str] = None) -> SchemeConfig:
        """Validates the exponents (admissibility) before anything is computed."""
        s = self.scheme
        return SchemeConfig(
            self.exponents(), self.grid(), target=self.target(), eps=s["eps"],
            eps_tilde=s["eps_tilde"], eta=s["eta"], Q=s["Q"], c=s["c"],
            lam_policy=s["lam_policy"], lam_seed=s["lam_seed"], lam_budget=s["lam_budget"],
            resolution_factor=s["resolution_factor"], norm_mode=s["norm_mode"],
            workdir=workdir,
        )

    def as_dict(self) -> dict:
        out = {s: dict(sorted(v.items())) for s, v in sorted(self.raw.items())}
        out["exponents"]["variant"] = self.variant
        out["seed"] = self.seed
        return out


# ---------------------------------------------------------------------------
# manifest and exports


def _clean(obj):
    """JSON-safe, deterministic representation (non-finite floats as strings)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_manifest(out_dir: str, manifest: dict) -> str:
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as fh:
        json.dump(_clean(manifest), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, MANIFEST)) as fh:
        return json.load(fh)


def report_summary(rep: EstimateReport) -> dict:
    fails = rep.failures()
    return {"entries": len(rep.entries), "failures": len(fails), "passed": rep.passed,
            "failed_checks": sorted({e.name for e in fails})}


def _save_report(out_dir: str, name: str, rep: EstimateReport) -> dict:
    rel = f"{name}.csv"
    rep.to_csv(os.path.join(out_dir, rel))
    info = report_summary(rep)
    info["csv"] = rel
    return info


def _export_indices(times: np.ndarray, wanted: Sequence[float]) -> List[int]:
    return sorted({int(np.argmin(np.abs(times - t))) for t in wanted})


def export_state(out_dir: str, state: SchemeState, wanted_times: Sequence[float]) -> dict:
    """TORF dumps of ``rho, u, R`` at the sample times closest to ``wanted_times``."""
    grid = state.grid
    if not grid.is_cubic:
        return {"skipped": "TORF dumps need a cubic grid"}
    idx = _export_indices(state.times, wanted_times)
    files = {}
    for name, series, n_comp in (("rho", state.rho, 1), ("u", state.u, grid.d),
                                 ("R", state.R, grid.d)):
        rel = f"{name}_q{state.q}.torf"
        if series is None:
            values = np.zeros((len(idx), n_comp) + (1,) * grid.d)
        else:
            values = np.stack([np.asarray(series[i]) for i in idx])
        dump_fields(os.path.join(out_dir, rel), values, grid, n_components=n_comp, n_t=len(idx))
        files[name] = rel
    return {"files": files, "times": [float(state.times[i]) for i in idx]}


def norm_history(state: SchemeState, p: float) -> list:
    rows = []
    for i, t in enumerate(state.times):
        rows.append((t, f"rho_{state.q}", p, lp_norm(np.asarray(state.rho[i]), p)))
        rows.append((t, f"R_{state.q}", 1.0, lp_norm(np.asarray(state.R[i]), 1)))
    return rows


def _step_record(state: SchemeState) -> dict:
    keep = ("eta", "delta", "sigma", "lam", "mu", "c", "grid_resolved", "substituted",
            "mu_eff", "mu_eff_cell")
    return {k: state.params[k] for k in keep if k in state.params}


# ---------------------------------------------------------------------------
# subcommands


def _print_report(title: str, rep: EstimateReport) -> None:
    print(f"== {title}")
    print(rep.summary())


def _round_trip_inputs(d: int, N: int, count: int, seed: int):
    rng = np.random.default_rng(seed)
    x = GridSpec(d, N).coords()
    for _ in range(count):
        f = np.zeros((N,) * d)
        for _ in range(4):
            k = rng.integers(-3, 4, size=d)
            if not np.any(k):
                k[0] = 1
            phase = rng.uniform(0, 2 * np.pi)
            f += rng.normal() * np.cos(2 * np.pi * sum(ki * xi for ki, xi in zip(k, x)) + phase)
        yield f - np.mean(f)


def lemma_report(cfg: RunConfig) -> EstimateReport:
    """Improved Hoelder rates, the mean-value bound and antidivergence round trips."""
    lm = cfg.lemmas
    d = cfg.d
    rep = EstimateReport()
    x = GridSpec(d, lm["N"]).coords()
    f = 2.0 + np.sin(2 * np.pi * x[0])
    g = np.cos(2 * np.pi * x[0])
    for p in lm["p_list"]:
        rep.extend(check_improved_holder(f, g, lm["lambdas"], p))
    const = np.full_like(f, 3.0)
    rep.extend(check_improved_holder(const, g, lm["lambdas"][:1], 2.0))
    for lam in lm["mean_lambdas"]:
        rep.extend(check_mean_value(np.sin(2 * np.pi * x[0]), g, lam))
        rep.extend(check_mean_value(np.exp(np.sin(2 * np.pi * x[0])), g, lam))
    Na = lm["antidiv_N"]
    xa = GridSpec(d, Na).coords()
    fa = np.broadcast_to(2.0 + np.sin(2 * np.pi * xa[1]), (Na,) * d).copy()
    for n, g0 in enumerate(_round_trip_inputs(d, Na, lm["antidiv_samples"], cfg.seed)):
        scale = lp_norm(g0, 2)
        err = lp_norm(divergence(std_antidivergence(g0)) - g0, 2) / scale
        rep.add("std antidivergence round trip", f"sample={n}", err, 1e-8)
    gcell = np.cos(2 * np.pi * xa[0]) + 0.5 * np.sin(2 * np.pi * (xa[1] + xa[2]))
    norms = []
    for lam in lm["antidiv_lambdas"]:
        u = improved_antidivergence(fa, gcell, lam)
        T = fa * rescale(gcell, lam)
        T = T - np.mean(T)
        err = lp_norm(divergence(u) - T, 2) / lp_norm(T, 2)
        rep.add("improved antidivergence round trip", f"lam={lam}", err, 1e-8)
        norms.append(lp_norm(u, 2))
    for lam, a, b in zip(lm["antidiv_lambdas"][1:], norms, norms[1:]):
        rep.add("improved antidivergence halving", f"lam={lam}", abs(b / a - 0.5) / 0.5, 0.15)
    return rep


def cmd_verify_lemmas(cfg: RunConfig, args) -> int:
    rep = lemma_report(cfg)
    _print_report("lemma checks", rep)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        info = _save_report(args.out, "lemmas", rep)
        write_manifest(args.out, {"command": "verify-lemmas", "config": cfg.as_dict(),
                                  "version": __version__, "report": info})
    return EXIT_PASS if rep.passed else EXIT_FAIL


def cmd_build_mikado(cfg: RunConfig, args) -> int:
    for key in ("d", "p", "p_tilde"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, int(val) if key == "d" else _number(val))
    mu = cfg.mikado["mu"] if args.mu is None else _number(args.mu)
    exps = cfg.exponents()
    blocks = build_blocks(mu, exps)
    rep = check_mikado_identities(exps, mu, N=cfg.mikado["quadrature_N"])
    _print_report(f"Mikado identities (d={exps.d}, mu={mu:g}, {exps.variant})", rep)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        n = cfg.mikado["export_N"]
        grid = GridSpec(exps.d, n)
        files = {}
        for blk in blocks:
            theta = f"Theta_{blk.j}.torf"
            field_ = f"W_{blk.j}.torf"
            dump_fields(os.path.join(args.out, theta), blk.sample(n), grid)
            dump_fields(os.path.join(args.out, field_), blk.field_sample(n), grid,
                        n_components=exps.d)
            files[str(blk.j)] = {"Theta": theta, "W": field_}
        write_manifest(args.out, {
            "command": "build-mikado", "config": cfg.as_dict(), "version": __version__,
            "exponents": exps.as_dict(), "mu": mu,
            "profile": {"delta0": DELTA0, "form": "c * b'(y1) b(y2) ... b(y_{d-1})",
                        "bump": "exp(-1/(t(1-t))) rescaled to [delta0, 1 - delta0]"},
            "export_N": n, "points_per_pipe_needed": cell_resolution(mu, 8, 32),
            "blocks": files, "report": _save_report(args.out, "mikado", rep),
        })
    return EXIT_PASS if rep.passed else EXIT_FAIL


def _scheme_manifest(cfg: RunConfig, config: SchemeConfig, command: str) -> dict:
    return {
        "command": command, "config": cfg.as_dict(), "version": __version__,
        "exponents": config.exponents.as_dict(), "c": config.c, "c_min": config.c_min,
        "target": config.target.name,
        "profile": {"delta0": DELTA0, "space_cutoff": "smoothstep transition of chi_j",
                    "time_cutoff": "smoothstep transition of psi"},
        "test_family": TestFunctionFamily(cfg.d, cfg.residual_family, seed=cfg.seed).describe(),
        "steps": [],
    }


def _finish_state(out_dir: str, cfg: RunConfig, config: SchemeConfig, state: SchemeState,
                  family: TestFunctionFamily, rows: list) -> dict:
    rec = {"q": state.q}
    if state.q:
        rec["params"] = _step_record(state)
        rec["report"] = _save_report(out_dir, f"step_{state.q}", state.report)
    rec["weak_residual"] = weak_residual(state.rho, state.u, state.R, family, state.times,
                                         operator=config.diff_operator)
    rec["max_R_L1"] = float(np.max(state.R_norms()))
    rows.extend(norm_history(state, config.exponents.rho_exponent))
    if cfg.export_fields:
        rec["exports"] = export_state(out_dir, state, cfg.export_times)
    return rec


def _run_scheme(cfg: RunConfig, args, command: str) -> int:
    out = args.out or "convexint-run"
    os.makedirs(out, exist_ok=True)
    config = cfg.scheme_config()
    manifest = _scheme_manifest(cfg, config, command)
    family = TestFunctionFamily(cfg.d, cfg.residual_family, seed=cfg.seed)
    rows: list = []
    status = EXIT_PASS
    try:
        state = initial_data(config.target, config.grid, config.eps_tilde,
                             operator=config.diff_operator)
        manifest["steps"].append(_finish_state(out, cfg, config, state, family, rows))
        if command == "step":
            s = cfg.step
            if s["lam"] is None:
                new = step_auto(state, config.eta, s["delta"], s["sigma"], config.c, config)
            else:
                new = step(state, config.eta, s["delta"], s["sigma"], s["lam"], config.c, config)
            manifest["steps"].append(_finish_state(out, cfg, config, new, family, rows))
        else:
            def on_step(new):
                manifest["steps"].append(_finish_state(out, cfg, config, new, family, rows))
                print(f"step {new.q}: lam={new.params.get('lam')} mu={new.params.get('mu')} "
                      f"report {'PASS' if new.report.passed else 'FAIL'}")

            traj = iterate(config, on_step, start=state)
            for name, rep in (("inductive", inductive_report(traj, config)),
                              ("closeness", closeness_report(traj, config))):
                manifest[name] = _save_report(out, name, rep)
                if not rep.passed:
                    status = EXIT_FAIL
            manifest["telescoping_bound"] = telescoping_bound(traj, config)
    except BudgetExhausted as exc:
        status = EXIT_FAIL
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        if exc.report is not None:
            manifest["error"]["best_report"] = _save_report(out, "best_failing_step", exc.report)
            _print_report("best failing step", exc.report)
    for rec in manifest["steps"][1:]:
        if not rec["report"]["passed"]:
            status = EXIT_FAIL
    write_norm_report(os.path.join(out, "norms.csv"), rows)
    manifest["norm_history"] = "norms.csv"
    manifest["status"] = "pass" if status == EXIT_PASS else "fail"
    write_manifest(out, manifest)
    for rec in manifest["steps"]:
        line = f"q={rec['q']}: max ||R||_1 = {rec['max_R_L1']:.4g}, weak residual {rec['weak_residual']:.3g}"
        if "report" in rec:
            line += f", report {'PASS' if rec['report']['passed'] else 'FAIL'}"
        print(line)
    return status


def cmd_step(cfg: RunConfig, args) -> int:
    return _run_scheme(cfg, args, "step")


def cmd_iterate(cfg: RunConfig, args) -> int:
    return _run_scheme(cfg, args, "iterate")


def cmd_report(cfg: RunConfig, args) -> int:
    """Summarize a finished run and check that every referenced export loads."""
    out = args.out or "convexint-run"
    manifest = read_manifest(out)
    ok = manifest.get("status", "pass") == "pass"
    checked = 0
    for rec in manifest.get("steps", []):
        files = rec.get("exports", {}).get("files", {})
        for rel in files.values():
            load_fields(os.path.join(out, rel))
            checked += 1
        line = f"q={rec['q']}: max ||R||_1 = {rec['max_R_L1']}, weak residual {rec['weak_residual']}"
        if "report" in rec:
            rep = rec["report"]
            line += f", {rep['entries'] - rep['failures']}/{rep['entries']} checks passed"
            if rep["failed_checks"]:
                line += " (failing: " + ", ".join(rep["failed_checks"]) + ")"
        print(line)
    for key in ("report", "inductive", "closeness"):
        if key in manifest:
            rep = manifest[key]
            print(f"{key}: {rep['entries'] - rep['failures']}/{rep['entries']} "
                  f"checks passed")
            ok = ok and rep["passed"]
    for blk in manifest.get("blocks", {}).values():
        for rel in blk.values():
            load_fields(os.path.join(out, rel))
            checked += 1
    print(f"{checked} exported fields load cleanly")
    return EXIT_PASS if ok else EXIT_FAIL


COMMANDS = {
    "verify-lemmas": cmd_verify_lemmas,
    "build-mikado": cmd_build_mikado,
    "step": cmd_step,
    "iterate": cmd_iterate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="FFT worker threads (default: logical cores)")
    common.add_argument("--seed", type=int, default=0, help="seed of the test-function family")
    common.add_argument("--variant", choices=["transport", "strong", "diffusion", "higher-order"],
                        help="theorem variant (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="convexint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "build-mikado":
            p.add_argument("--d", type=int)
            p.add_argument("--p")
            p.add_argument("--p-tilde", dest="p_tilde")
            p.add_argument("--mu")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_FAIL
    set_workers(args.threads)
    try:
        cfg = RunConfig.load(args.config, args.variant, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConstructionError, ValueError, FileNotFoundError, configparser.Error) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # pragma: no cover - reported, not hidden
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
