"""Command-line front end.

Exit codes: 0 success, 2 malformed input or usage, 3 resonance, 4 integrator
failure, 5 Stokes leakage, 6 contraction failure of the realization.
Reports are JSON with a fixed field order and floats written as %.17g.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import MalformedInput, UnfoldError
from .systems import (ZERO, FormalInvariants, UnfoldedParameter, formal_invariants, normalized, parse_system,
                      resonance_values)

REPORT_VERSION = 1


@dataclass
class RunConfig:
    rtol: float = 1e-11
    extraction_tol: float | None = None  # off-triangle leakage bound; default 100 rtol
    resonance_margin: float = 1e-4
    r: float = 0.5
    realize_r: float = 1.0
    safety: float = 0.9
    delta: float | None = None
    c: float = 1.0
    base_radius: float | None = None
    max_nu: int = 20
    realize_tol: float = 1e-12
    fit_samples: int = 256
    ladder: list = field(default_factory=list)
    ray_argument: float = 2 * math.pi
    pair_argument: float | None = None  # eps_bar argument for branch pairs; default pi + gamma
    out_dir: str | None = None
    emit_geometry: bool = False
    seed: int = 0
    workers: int = 1

    def validate(self) -> "RunConfig":
        for name in ("rtol", "resonance_margin", "r", "realize_r", "c", "realize_tol"):
            if not getattr(self, name) > 0:
                raise MalformedInput(f"config: {name} must be positive")
        if self.extraction_tol is not None and not self.extraction_tol > 0:
            raise MalformedInput("config: extraction_tol must be positive")
        if not 0 < self.safety < 1:
            raise MalformedInput("config: safety must lie in (0, 1)")
        lad = [float(m) for m in self.ladder]
        if any(m <= 0 for m in lad) or any(a <= b for a, b in zip(lad, lad[1:])):
            raise MalformedInput("config: ladder moduli must be positive and strictly decreasing")
        self.ladder = lad
        return self

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        data = _read_json(path)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise MalformedInput(f"config: unknown keys {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------- output


def _fmt(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return json.dumps(str(x))  # JSON has no inf/nan literal
    return "%.17g" % x


def to_jsonable(obj):
    """Plain Python structures; complex numbers become [re, im]."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON: insertion order kept, floats as %.17g."""
    obj = to_jsonable(obj) if _level == 0 else obj
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, float):
        return _fmt(obj)
    return json.dumps(obj)


def _read_json(path: str):
    p = Path(path)
    if not p.is_file():
        raise MalformedInput(f"no such file: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: not valid JSON ({exc})") from None


def _emit(report: dict, cfg: RunConfig, name: str, stream=None) -> None:
    text = dumps(report) + "\n"
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text)
    (stream or sys.stdout).write(text)


def _write_csv(cfg: RunConfig, name: str, header: list, rows: list) -> None:
    if not cfg.out_dir:
        return
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------- inputs


def _eps_from(args, cfg: RunConfig) -> UnfoldedParameter:
    if args.eps_modulus is None:
        return ZERO
    if args.eps_modulus < 0:
        raise MalformedInput("--eps-modulus must be nonnegative")
    if args.eps_modulus == 0:
        return ZERO
    return UnfoldedParameter(args.eps_modulus, cfg.ray_argument if args.eps_arg is None else args.eps_arg)


def _load_system(path: str):
    """Parsed system, brought to strictly ordered form; the permutation and rotation are reported."""
    raw = parse_system(_read_json(path))
    sys_n, perm, phi = normalized(raw)
    return sys_n, {"permutation": [p + 1 for p in perm], "rotation": phi}


def _rotate_eps(eps: UnfoldedParameter, phi: float) -> UnfoldedParameter:
    return eps if eps.is_zero or not phi else UnfoldedParameter(eps.modulus, eps.argument + 2 * phi)


def _collection_report(sc, canonical=None) -> dict:
    out = {"C_R": sc.C_R, "C_L": sc.C_L}
    if canonical is not None:
        out["canonical"] = {"C_R": canonical.C_R, "C_L": canonical.C_L}
    for key in ("leakage", "relative_diag_defect", "resonance_margin", "basis_condition"):
        if key in sc.diagnostics:
            out[key] = sc.diagnostics[key]
    return out


# ---------------------------------------------------------------- commands


def cmd_invariants(args, cfg: RunConfig) -> dict:
    sys_n, norm = _load_system(args.system)
    eps = _rotate_eps(_eps_from(args, cfg), norm["rotation"])
    fi = formal_invariants(sys_n, eps)
    report = {"version": REPORT_VERSION, "command": "invariants", "eps": eps.to_dict(), "normalization": norm,
              "lambda": fi.lam}
    if fi.mu is not None:
        report["mu"] = {"L": fi.mu[:, 0], "R": fi.mu[:, 1]}
        report["log_D"] = {"L": fi.log_D("L"), "R": fi.log_D("R")}
        report["Delta"] = {w: fi.delta_table(w) for w in ("L", "R")}
        margins = {}
        for w in ("L", "R"):
            tab = np.abs(1 - fi.delta_table(w))
            np.fill_diagonal(tab, np.inf)
            margins[w] = float(tab.min()) if fi.n > 1 else math.inf
        report["resonance_margins"] = margins
    return report


def cmd_resonances(args, cfg: RunConfig) -> dict:
    sys_n, norm = _load_system(args.system)
    q, j, which = args.pair
    q, j = int(q) - 1, int(j) - 1
    if which not in ("L", "R") or not (0 <= q < sys_n.n and 0 <= j < sys_n.n) or q == j:
        raise MalformedInput("--pair expects two distinct indices and L or R")
    lo, hi = args.m_range
    region = (args.modulus_range[0], args.modulus_range[1], math.pi / 2, 7 * math.pi / 2)

    def fi_fn(par):
        return formal_invariants(sys_n, par)

    roots = resonance_values(fi_fn, (q, j, which), range(lo, hi + 1), region)
    return {"version": REPORT_VERSION, "command": "resonances", "normalization": norm,
            "pair": [q + 1, j + 1, which],
            "roots": [{"eps": par.to_dict(), "tag": [tag[0] + 1, tag[1] + 1, tag[2], tag[3]]} for par, tag in roots]}


def _extract_one(job):
    """Worker body for ladder runs (top level so that it pickles)."""
    from .stokes import canonicalize, extract_stokes

    doc, eps_d, cfg_d = job
    sys_n = parse_system(doc)
    cfg = RunConfig(**cfg_d)
    eps = UnfoldedParameter.from_dict(eps_d)
    sc = extract_stokes(sys_n, eps, rtol=cfg.rtol, r=cfg.r, delta_angle=cfg.delta, c=cfg.c,
                        resonance_margin=cfg.resonance_margin, leak_tol=cfg.extraction_tol,
                        base_radius=cfg.base_radius)
    sc.diagnostics.pop("basis", None)
    sc.diagnostics.pop("raw", None)
    return sc, canonicalize(sc)[0]


def _pmap(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))  # ordered merge


def cmd_stokes(args, cfg: RunConfig) -> dict:
    from .stokes import check_autointersection, summability_gap
    from .geometry import admissible_sector

    sys_n, norm = _load_system(args.system)
    doc = sys_n.to_document()
    cfg_d = asdict(cfg)
    report = {"version": REPORT_VERSION, "command": "stokes", "normalization": norm}
    if not cfg.ladder:
        eps = _rotate_eps(_eps_from(args, cfg), norm["rotation"])
        sc, can = _extract_one((doc, eps.to_dict(), cfg_d))
        report.update({"eps": eps.to_dict(), "collection": _collection_report(sc, can)})
        return report
    S = admissible_sector(formal_invariants(sys_n, ZERO), cfg.safety)
    rot = norm["rotation"]
    ray = [_rotate_eps(UnfoldedParameter(m, cfg.ray_argument), rot) for m in cfg.ladder]
    pair_arg = math.pi + S.gamma if cfg.pair_argument is None else cfg.pair_argument
    bars = [_rotate_eps(UnfoldedParameter(m, pair_arg), rot) for m in cfg.ladder]
    tildes = [S.partner(e) for e in bars]
    jobs = [(doc, e.to_dict(), cfg_d) for e in ray + bars + tildes]
    results = _pmap(_extract_one, jobs, cfg.workers)
    k = len(cfg.ladder)
    family = {m: (results[k + i][1], results[2 * k + i][1]) for i, m in enumerate(cfg.ladder)}
    gap = summability_gap(family)
    entries, rows = [], []
    prev = None
    diffs = []
    n = sys_n.n
    for i, m in enumerate(cfg.ladder):
        sr, cr = results[i]
        (sb, cb), (st, ct) = results[k + i], results[2 * k + i]
        auto = check_autointersection(cb, ct)  # same gauge on both branches
        if prev is not None:
            diffs.append(float(max(np.max(np.abs(cr.C_R - prev.C_R)), np.max(np.abs(cr.C_L - prev.C_L)))))
        prev = cr
        entries.append({"modulus": m, "eps": ray[i].to_dict(), "collection": _collection_report(sr, cr),
                        "eps_bar": bars[i].to_dict(), "eps_tilde": tildes[i].to_dict(),
                        "bar": _collection_report(sb, cb), "tilde": _collection_report(st, ct),
                        "autointersection": auto.to_dict()})
        for a in range(n):
            for b in range(n):
                if a != b:
                    side = "R" if a < b else "L"
                    v = (cr.C_R if a < b else cr.C_L)[a, b]
                    g = abs((ct.C_R if a < b else ct.C_L)[a, b] - (cb.C_R if a < b else cb.C_L)[a, b])
                    rows.append([m, side, a + 1, b + 1, float(v.real), float(v.imag), float(g)])
    report["successive_differences"] = diffs
    _write_csv(cfg, "stokes_ladder", ["modulus", "matrix", "row", "col", "re", "im", "branch_gap"], rows)
    report.update({"ladder": entries, "gap_fit": gap})
    return report


def cmd_riccati_check(args, cfg: RunConfig) -> dict:
    from .geometry import based_loop
    from .riccati import (first_integral_monodromy, first_integrals, projective_distance, projectivize,
                          riccati_flow)
    from .stokes import _default_geometry, extract_stokes
    from .transport import transfer_matrix

    sys_n, norm = _load_system(args.system)
    eps = _rotate_eps(_eps_from(args, cfg), norm["rotation"])
    if eps.is_zero:
        raise MalformedInput("riccati-check needs eps != 0")
    rng = np.random.default_rng(cfg.seed)
    sc = extract_stokes(sys_n, eps, rtol=cfg.rtol, r=cfg.r, base_radius=cfg.base_radius)
    geo, _ = _default_geometry(sys_n, eps, cfg.r, None, cfg.delta, cfg.c)
    W = sc.diagnostics["basis"]
    checks = []
    for which in ("R", "L"):
        path = based_loop(geo, which, base_radius=cfg.base_radius)
        M = transfer_matrix(sys_n, eps, path, cfg.rtol)
        for _ in range(args.samples):
            y = rng.standard_normal(sys_n.n) + 1j * rng.standard_normal(sys_n.n)
            j = int(rng.integers(sys_n.n))
            p0 = projectivize(y, j)
            d_flow = projective_distance(riccati_flow(sys_n, eps, j, p0, path, cfg.rtol), M @ y)
            H = first_integrals(W, j, p0)
            H_end = first_integrals(W, j, riccati_flow(sys_n, eps, j, p0, path.reversed(), cfg.rtol))
            d_int = H_end.distance(first_integral_monodromy(sc, j, H, which), relative=True)
            checks.append({"loop": which, "chart": j + 1, "flow_vs_linear": d_flow, "first_integrals": d_int})
    return {"version": REPORT_VERSION, "command": "riccati-check", "seed": cfg.seed, "eps": eps.to_dict(),
            "normalization": norm, "checks": checks,
            "max_flow_vs_linear": max(c["flow_vs_linear"] for c in checks),
            "max_first_integrals": max(c["first_integrals"] for c in checks)}


def _load_target(args):
    from .stokes import StokesCollection

    fi_doc = _read_json(args.invariants)
    st_doc = _read_json(args.stokes)
    if not isinstance(fi_doc, dict) or not isinstance(st_doc, dict):
        raise MalformedInput("invariants and stokes files must hold JSON objects")
    if "lambda" not in fi_doc:
        raise MalformedInput(f"{args.invariants}: missing 'lambda'")
    fi_doc = dict(fi_doc)
    fi_doc.setdefault("eps", {"modulus": 0.0, "argument": 0.0})
    fi0 = FormalInvariants.from_dict(fi_doc)
    target = StokesCollection.from_dict(st_doc)
    if target.n != fi0.n:
        raise MalformedInput("Stokes matrices and invariants have different sizes")
    if target.leakage() > 1e-12:
        raise MalformedInput("target Stokes matrices must be unipotent upper (C_R) and lower (C_L) triangular")
    return fi0, target


def cmd_realize(args, cfg: RunConfig, roundtrip_mode: bool = False) -> dict:
    from .realize import assemble_system, birkhoff_factorize, fit_polynomial_system, jump_residual, roundtrip
    from .stokes import distance

    fi0, target = _load_target(args)
    eps = _eps_from(args, cfg)
    fi = FormalInvariants.from_model(fi0.lam[:, 0], fi0.lam[:, 1], eps)
    target = type(target)(eps, target.C_R, target.C_L, fi)
    report = {"version": REPORT_VERSION, "command": "roundtrip" if roundtrip_mode else "realize",
              "eps": eps.to_dict()}
    if roundtrip_mode or args.roundtrip:
        res = roundtrip(fi, target, eps, r=cfg.realize_r, max_nu=cfg.max_nu, tol=cfg.realize_tol,
                        rtol=cfg.rtol, ladder=cfg.ladder or None, samples=cfg.fit_samples)
        system = res["system"]
        report.update({"distance": res["distance"], "jump_residual": res["residual"], "fit": res["fit"],
                       "norm_ledger": res["ledger"],
                       "extracted": {"C_R": res["extracted"].C_R, "C_L": res["extracted"].C_L}})
        if "ladder_distance" in res:
            report["ladder_distance"] = res["ladder_distance"]
        print(f"distance {res['distance']:.3e}", file=sys.stderr)
    else:
        _, _, state = birkhoff_factorize(fi, target, eps, max_nu=cfg.max_nu, tol=cfg.realize_tol, r=cfg.realize_r)
        system, info = fit_polynomial_system(state, samples=cfg.fit_samples)
        report.update({"jump_residual": jump_residual(state, seed=cfg.seed), "fit": info,
                       "norm_ledger": state.ledger()})
        rho = info["radius"]
        grid = rho * np.exp(2j * math.pi * np.arange(32) / 32)
        rec = assemble_system(state, grid)
        _write_csv(cfg, "reconstructed_samples", ["x_re", "x_im", "row", "col", "re", "im"],
                   [[x.real, x.imag, a + 1, b + 1, v[a, b].real, v[a, b].imag]
                    for x, v in zip(rec.grid, rec.values) for a in range(fi.n) for b in range(fi.n)])
    report["system"] = system.to_document()
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reconstructed_system.json").write_text(dumps(system.to_document()) + "\n")
    return report


def cmd_analyze(args, cfg: RunConfig) -> dict:
    from .stokes import StokesCollection, log_term_predicates, reducibility_analysis

    family = []
    for path in args.stokes:
        doc = _read_json(path)
        docs = doc if isinstance(doc, list) else [doc]
        family.extend(StokesCollection.from_dict(d) for d in docs)
    if not family:
        raise MalformedInput("no Stokes collections given")
    report = {"version": REPORT_VERSION, "command": "analyze",
              "reducibility": reducibility_analysis(family, tol=args.tol)}
    if args.log_term:
        s, j, which = args.log_term
        report["log_term"] = log_term_predicates(family[0], (int(s), int(j), which))
    return report


def cmd_geometry(args, cfg: RunConfig) -> dict:
    from .geometry import admissible_sector, based_loop, boundary_paths, sector_domains

    sys_n, norm = _load_system(args.system)
    eps = _rotate_eps(_eps_from(args, cfg), norm["rotation"])
    S = admissible_sector(formal_invariants(sys_n, ZERO), cfg.safety)
    doms = sector_domains(eps, S, cfg.r, cfg.c, cfg.delta)
    geo = doms["D"].geometry
    report = {"version": REPORT_VERSION, "command": "geometry", "eps": eps.to_dict(), "sector": S.to_dict(),
              "in_sector": bool(eps.is_zero or S.contains(eps)),
              "in_autointersection": bool(not eps.is_zero and S.in_autointersection(eps)),
              "theta_hat": geo.theta_hat, "delta": geo.delta}
    if cfg.emit_geometry:
        rows = []
        curves = {}
        for nu in (1, 2):
            for (lvl, s), entry in boundary_paths(eps, doms, nu).items():
                curves[f"gamma_{lvl}_{s}"] = entry["path"]
        if not eps.is_zero:
            for which in ("L", "R"):
                curves[f"loop_{which}"] = based_loop(geo, which, base_radius=cfg.base_radius)
        for name, path in curves.items():
            for k, x in enumerate(path.nodes(48)):
                rows.append([name, k, float(x.real), float(x.imag)])
        _write_csv(cfg, "geometry", ["curve", "index", "x_re", "x_im"], rows)
        report["curves"] = sorted(curves)
    return report


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--eps-modulus", type=float, help="|eps|; omit or 0 for eps = 0")
    common.add_argument("--eps-arg", type=float, help="argument of eps on the universal cover (radians)")
    common.add_argument("--ladder", help="comma-separated, strictly decreasing moduli")
    common.add_argument("--emit-geometry", action="store_true", help="write contour polylines as CSV")
    common.add_argument("--out-dir", help="directory for JSON and CSV artifacts")
    common.add_argument("--workers", type=int, help="parallel workers for ladder entries")
    common.add_argument("--seed", type=int, help="seed for randomized checks")

    p = argparse.ArgumentParser(prog="unfoldstokes", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("invariants", "resonances", "stokes", "riccati-check", "geometry"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("system", help="system JSON document")
        if name == "resonances":
            sp.add_argument("--pair", nargs=3, metavar=("Q", "J", "SIDE"), required=True)
            sp.add_argument("--m-range", nargs=2, type=int, default=(1, 3), metavar=("LO", "HI"))
            sp.add_argument("--modulus-range", nargs=2, type=float, default=(1e-6, 0.25), metavar=("LO", "HI"))
        if name == "riccati-check":
            sp.add_argument("--samples", type=int, default=3, help="random starts per loop")
    for name in ("realize", "roundtrip"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("invariants", help="JSON with 'lambda' (and optional 'eps')")
        sp.add_argument("stokes", help="JSON with 'C_R' and 'C_L'")
        if name == "realize":
            sp.add_argument("--roundtrip", action="store_true", help="re-extract and report the distance")
    sp = sub.add_parser("analyze", parents=[common])
    sp.add_argument("stokes", nargs="+", help="Stokes collection JSON files (objects or lists)")
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--log-term", nargs=3, metavar=("S", "J", "SIDE"))
    return p


def _config_from(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.ladder:
        try:
            cfg.ladder = [float(v) for v in args.ladder.split(",") if v.strip()]
        except ValueError:
            raise MalformedInput(f"bad --ladder {args.ladder!r}") from None
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.emit_geometry:
        cfg.emit_geometry = True
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


COMMANDS = {
    "invariants": cmd_invariants,
    "resonances": cmd_resonances,
    "stokes": cmd_stokes,
    "riccati-check": cmd_riccati_check,
    "realize": cmd_realize,
    "roundtrip": lambda a, c: cmd_realize(a, c, roundtrip_mode=True),
    "analyze": cmd_analyze,
    "geometry": cmd_geometry,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        cfg = _config_from(args)
        report = COMMANDS[args.command](args, cfg)
        _emit(report, cfg, args.command.replace("-", "_"))
    except UnfoldError as exc:
        msg = f"error: {exc}"
        pair = getattr(exc, "pair", None)
        if pair is not None:
            msg += f" [blocking pair {pair}]"
        print(msg, file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
