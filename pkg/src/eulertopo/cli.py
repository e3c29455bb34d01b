"""Command-line drivers that write figure data as CSV and JSON.

Usage::

    eulertopo <mode> --m 1 --grid 20x20 --seed 0 --out run/ [--config cfg.json]
                     [--shots N] [--noise paper|none]

Flags override the config file, which overrides the defaults.  Every
JSON output carries the effective configuration under "config" and
``run_config.json`` holds it on its own.  The output directory is not
part of the echoed configuration, so two runs that differ only in
``--out`` produce identical files.

Exit codes: 0 ok, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bloch, invariants, labsim, quench
from .errors import InvalidParameter, NumericalError
from .fileio import complex_matrix, write_csv, write_json

MODES = ("euler", "wilson", "espec", "berry", "dirac", "quench", "labsim", "fragile", "identity-check")

DEFAULTS = {
    "m": 1.0,
    "grid": None,  # mode dependent, see DEFAULT_GRID
    "seed": 0,
    "shots": 3000,
    "noise": "none",
    "detection": {},  # DetectionModel field overrides
    "duration": 2000.0,
    "steps": 400,
    "mle_starts": 5,
    "s_values": [0.0, 0.25, 0.5, 0.75, 1.0],
    "points": 50,
    "h": 1e-3,
    "radius": 0.1,
    "loop_points": 16,
    "tolerance": 1e-6,
}

DEFAULT_GRID = {
    "quench": [64, 64, 64],
    "dirac": [64, 64],
    "berry": [64, 64],
}

CONFIG_KEYS = set(DEFAULTS) | {"mode"}


def parse_grid(text):
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().split("x")
    try:
        sizes = [int(p) for p in parts]
    except (TypeError, ValueError):
        raise InvalidParameter(f"grid must look like NXxNY or NXxNYxNT, got {text!r}") from None
    if len(sizes) not in (2, 3):
        raise InvalidParameter(f"grid must have 2 or 3 sizes, got {text!r}")
    if min(sizes) < 4:
        raise InvalidParameter(f"grid sizes must be >= 4, got {sizes}")
    return sizes


def load_config_file(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidParameter(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidParameter(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidParameter("config file must hold a JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise InvalidParameter(f"unknown config keys: {sorted(unknown)}")
    return data


def effective_config(mode, flags, file_cfg=None):
    """Merge defaults < config file < flags and validate the result."""
    cfg = json.loads(json.dumps(DEFAULTS))
    file_cfg = dict(file_cfg or {})
    if file_cfg.get("mode", mode) != mode:
        raise InvalidParameter(f"config is for mode {file_cfg['mode']!r}, not {mode!r}")
    file_cfg.pop("mode", None)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    cfg["mode"] = mode

    if cfg["grid"] is None:
        cfg["grid"] = DEFAULT_GRID.get(mode, [20, 20])
    cfg["grid"] = parse_grid(cfg["grid"])
    if mode == "quench" and len(cfg["grid"]) == 2:
        cfg["grid"].append(DEFAULT_GRID["quench"][2])
    try:
        cfg["m"] = float(cfg["m"])
        cfg["seed"] = int(cfg["seed"])
        cfg["shots"] = int(cfg["shots"])
        cfg["duration"] = float(cfg["duration"])
        cfg["steps"] = int(cfg["steps"])
        cfg["mle_starts"] = int(cfg["mle_starts"])
        cfg["points"] = int(cfg["points"])
        cfg["h"] = float(cfg["h"])
        cfg["radius"] = float(cfg["radius"])
        cfg["loop_points"] = int(cfg["loop_points"])
        cfg["tolerance"] = float(cfg["tolerance"])
        cfg["s_values"] = [float(s) for s in cfg["s_values"]]
    except (TypeError, ValueError) as exc:
        raise InvalidParameter(f"bad config value: {exc}") from None
    if cfg["noise"] not in ("paper", "none"):
        raise InvalidParameter(f"noise must be 'paper' or 'none', got {cfg['noise']!r}")
    if not isinstance(cfg["detection"], dict):
        raise InvalidParameter("detection overrides must be an object")
    if cfg["steps"] < 1 or cfg["points"] < 1 or cfg["mle_starts"] < 1:
        raise InvalidParameter("steps, points and mle_starts must be positive")
    if cfg["shots"] < 1:
        raise InvalidParameter("shots must be >= 1")
    bloch.check_mass(cfg["m"])
    return cfg


def detection_model(cfg):
    fields = dict(cfg["detection"])
    known = set(labsim.DetectionModel.__dataclass_fields__)
    unknown = set(fields) - known
    if unknown:
        raise InvalidParameter(f"unknown detection fields: {sorted(unknown)}")
    if cfg["noise"] == "none":
        base = {"p_bright_as_dark": 0.0, "p_dark_as_bright": 0.0, "shots": None}
    else:
        base = {"shots": cfg["shots"]}
    base.update(fields)
    return labsim.DetectionModel(**base)


def _grid2(cfg):
    return bloch.BZGrid(cfg["grid"][0], cfg["grid"][1])


# -- commands ------------------------------------------------------------------


def cmd_euler(cfg, out):
    grid = _grid2(cfg)
    KX, KY = grid.mesh()
    n = bloch.n_vec(cfg["m"], KX, KY)
    write_csv(out / "nfield.csv", ["kx", "ky", "nx", "ny", "nz"],
              [(KX[i, j], KY[i, j], *n[i, j]) for i in range(grid.nx) for j in range(grid.ny)])
    xi = invariants.winding_number(n)
    frames = bloch.fix_gauge(bloch.euler_frames(cfg["m"], grid))
    res = {
        "xi_solid_angle": int(round(abs(xi))),
        "xi_signed": xi,
        "xi_direct": invariants.euler_class_direct(n),
        "chern": invariants.chern_of_field(n),
        "orientable": frames.orientable,
        "config": cfg,
    }
    write_json(out / "euler.json", res, "euler")
    return res


def _wilson_rows(spec):
    return [(q, *th, *mod) for q, th, mod in zip(spec.momenta, spec.branches, spec.moduli)]


def cmd_wilson(cfg, out):
    frames = bloch.fix_gauge(bloch.euler_frames(cfg["m"], _grid2(cfg)))
    res = {"config": cfg}
    for direction in ("x", "y"):
        spec = invariants.wilson_spectrum(frames, direction)
        write_csv(out / f"wilson_{direction}.csv",
                  ["momentum", "theta_1", "theta_2", "modulus_1", "modulus_2"], _wilson_rows(spec))
        pair = np.abs(invariants._wrap(spec.branches.sum(axis=1)))
        res[direction] = {
            "winding": invariants.wilson_winding(spec),
            "max_pair_sum": float(pair.max()),
        }
    write_json(out / "wilson.json", res, "wilson")
    return res


def cmd_espec(cfg, out):
    frames = bloch.euler_frames(cfg["m"], _grid2(cfg))
    res = {"config": cfg}
    for cut in ("x", "y"):
        specs = invariants.entanglement_spectrum(frames, cut)
        rows = [(s.momentum, idx, v) for s in specs for idx, v in enumerate(s.eigenvalues)]
        write_csv(out / f"espec_{cut}.csv", ["momentum", "index", "eigenvalue"], rows)
        allv = np.concatenate([s.eigenvalues for s in specs])
        res[cut] = {
            "closest_to_half": float(np.abs(allv - 0.5).min()),
            "count_in_0.4_0.6": int(np.count_nonzero((allv > 0.4) & (allv < 0.6))),
        }
    write_json(out / "espec.json", res, "espec")
    return res


def _perturbed(cfg):
    m = cfg["m"]
    return lambda kx, ky: bloch.perturbed_ham(kx, ky, m=m)


def _find_nodes(cfg):
    return invariants.locate_dirac_nodes(cfg["tolerance"], _perturbed(cfg), scan=cfg["grid"][0])


def cmd_dirac(cfg, out):
    nodes = _find_nodes(cfg)
    write_csv(out / "dirac_nodes.csv", ["kx", "ky", "gap"], [(q.kx, q.ky, q.gap) for q in nodes])
    res = {"count": len(nodes), "nodes": [[q.kx, q.ky, q.gap] for q in nodes], "config": cfg}
    write_json(out / "dirac.json", res, "dirac")
    return res


def _node_free_center(nodes, radius):
    # first high-symmetry point with no node nearby
    for c in labsim.HIGH_SYMMETRY:
        dist = [np.hypot(*bloch.wrap_momentum(np.subtract(c, (q.kx, q.ky)))) for q in nodes]
        if min(dist, default=np.inf) > 3 * radius:
            return (float(c[0]), float(c[1]))
    raise InvalidParameter("no node-free reference loop found")


def cmd_berry(cfg, out):
    ham = _perturbed(cfg)
    nodes = _find_nodes(cfg)
    r, npts = cfg["radius"], cfg["loop_points"]
    loops = [((q.kx, q.ky), True) for q in nodes] + [(_node_free_center(nodes, r), False)]
    rows, recs = [], []
    for center, encloses in loops:
        phase = invariants.berry_phase(invariants.loop_states(ham, center, r, npts))
        rows.append((center[0], center[1], r, int(encloses), phase))
        recs.append({"center": list(center), "encloses_node": encloses, "phase": phase})
    write_csv(out / "berry.csv", ["center_kx", "center_ky", "radius", "encloses_node", "phase"], rows)
    res = {"loops": recs, "config": cfg}
    write_json(out / "berry.json", res, "berry")
    return res


def cmd_fragile(cfg, out):
    nx, ny = cfg["grid"][:2]
    rows, recs = [], []
    for s in cfg["s_values"]:
        spec = invariants.wilson_spectrum_four_band(cfg["m"], s, nx, ny, "x")
        th = invariants.track_branches(spec)
        rows += [(s, q, *t) for q, t in zip(spec.momenta, th)]
        recs.append({
            "s": s,
            "gap_at_zero": invariants.wilson_gap_at_zero(spec),
            "max_abs_theta": float(np.abs(spec.branches).max()),
        })
    write_csv(out / "fragile_wilson.csv", ["s", "momentum", "theta_1", "theta_2", "theta_3"], rows)
    res = {"ladder": recs, "config": cfg}
    write_json(out / "fragile.json", res, "fragile")
    return res


def cmd_identity(cfg, out):
    rng = np.random.default_rng(cfg["seed"])
    ks = rng.uniform(-np.pi, np.pi, size=(cfg["points"], 2))
    h = cfg["h"]
    m = cfg["m"]
    rows = [(kx, ky, invariants.integrand_identity_residual(m, kx, ky, h)) for kx, ky in ks]
    write_csv(out / "identity.csv", ["kx", "ky", "residual"], rows)
    # convergence on the first point
    hs = [8 * h, 4 * h, 2 * h]
    errs = [invariants.integrand_identity_residual(m, *ks[0], hh) for hh in hs]
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    res = {
        "max_residual": float(max(r[2] for r in rows)),
        "convergence": {"h": hs, "residual": errs, "order": slope},
        "config": cfg,
    }
    write_json(out / "identity.json", res, "identity")
    return res


def _tag(target):
    names = {1: "p", -1: "m", 0: "0"}
    return "".join(names[int(round(c))] for c in target)


def cmd_quench(cfg, out):
    nk, nky, nt = cfg["grid"]
    m = cfg["m"]
    grid = bloch.BZGrid(nk, nky)
    a = quench.a_field(m, grid)
    KX, KY = grid.mesh()
    write_csv(out / "afield.csv", ["kx", "ky", "ax", "ay", "az"],
              [(KX[i, j], KY[i, j], *a[i, j]) for i in range(nk) for j in range(nky)])
    field = quench.build_hopf_field(m, nk, nt, nky=nky)
    res = {"patch_chern": {}, "gauss": {}, "chi": {}, "components": {}, "config": cfg}
    for patch in quench.PATCHES:
        res["patch_chern"][patch] = quench.patch_chern(m, patch, grid)
        res["chi"][patch] = quench.hopf_invariant(field, patch)
        total, c1, c2 = quench.patch_linking(field, patch)
        res["gauss"][patch] = total
        res["components"][patch] = [len(c1), len(c2)]
        for target, curves in zip(quench.DEFAULT_TARGETS, (c1, c2)):
            rows = [(ci, *p) for ci, c in enumerate(curves) for p in c.points]
            write_csv(out / f"preimage_{patch}_{_tag(target)}.csv", ["component", "kx", "ky", "t"], rows)
    write_json(out / "linking.json", res, "linking")
    return res


def cmd_labsim(cfg, out):
    grid = _grid2(cfg)
    model = detection_model(cfg)
    schedule = labsim.Schedule(cfg["duration"], cfg["steps"])
    results, u3 = labsim.measure_grid(cfg["m"], grid, schedule, model, cfg["seed"],
                                      mle_starts=cfg["mle_starts"])
    KX, KY = grid.mesh()
    model_rec = {k: getattr(model, k) for k in labsim.DetectionModel.__dataclass_fields__}
    fid_rows = []
    for i in range(grid.nx):
        for j in range(grid.ny):
            r = results[i][j]
            fid_rows.append((i, j, KX[i, j], KY[i, j], r.fidelity, r.prep_fidelity))
            write_json(out / f"rho_{i}_{j}.json", {
                "i": i, "j": j, "kx": KX[i, j], "ky": KY[i, j],
                "rho": complex_matrix(r.rho),
                "psi_real": r.psi_real,
                "fidelity": r.fidelity,
                "prep_fidelity": r.prep_fidelity,
                "counts": {"means": r.counts.means, "shots": r.counts.shots,
                           "seed": cfg["seed"], "model": model_rec},
            }, "rho")
    write_csv(out / "fidelity.csv", ["i", "j", "kx", "ky", "fidelity", "prep_fidelity"], fid_rows)

    fid = np.array([r[4] for r in fid_rows])
    # reconstructed vectors carry arbitrary signs; make them continuous first
    frames = bloch.fix_gauge(bloch.frames_from_top(u3, grid))
    n = frames.top
    xi = invariants.winding_number(n)
    suite = {
        "xi": int(round(abs(xi))),
        "xi_signed": xi,
        "xi_direct": invariants.euler_class_direct(n),
        "chern": invariants.chern_of_field(n),
        "orientable": frames.orientable,
    }
    for direction in ("x", "y"):
        try:
            w = invariants.wilson_winding(invariants.wilson_spectrum(frames, direction))
            suite[f"wilson_winding_{direction}"] = w
        except NumericalError as exc:
            # noisy reconstructions can defeat branch tracking; report, do not abort
            suite[f"wilson_winding_{direction}"] = None
            suite[f"wilson_error_{direction}"] = str(exc)
    res = {
        **suite,
        "mean_fidelity": float(fid.mean()),
        "std_fidelity": float(fid.std()),
        "min_fidelity": float(fid.min()),
        "min_prep_fidelity": float(min(r[5] for r in fid_rows)),
        "config": cfg,
    }
    write_json(out / "summary.json", res, "summary")
    return res


COMMANDS = {
    "euler": cmd_euler,
    "wilson": cmd_wilson,
    "espec": cmd_espec,
    "berry": cmd_berry,
    "dirac": cmd_dirac,
    "quench": cmd_quench,
    "labsim": cmd_labsim,
    "fragile": cmd_fragile,
    "identity-check": cmd_identity,
}


def build_parser():
    p = argparse.ArgumentParser(prog="eulertopo", description="Euler-insulator numerics and simulated measurements")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--m", type=float, help="mass parameter (default 1)")
    p.add_argument("--grid", help="NXxNY or NXxNYxNT")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--shots", type=int, help="shots per tomography basis (with --noise paper)")
    p.add_argument("--noise", choices=("paper", "none"))
    p.add_argument("--duration", type=float, help="adiabatic ramp duration in us")
    p.add_argument("--steps", type=int, help="adiabatic time steps")
    return p


def run(argv=None):
    """Parse, run and return (exit code, result dict or None)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        flags = {k: getattr(args, k) for k in ("m", "grid", "seed", "shots", "noise", "duration", "steps")}
        cfg = effective_config(args.mode, flags, file_cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "run_config.json", cfg, "run_config")
        res = COMMANDS[args.mode](cfg, out)
    except InvalidParameter as exc:
        print(f"eulertopo: invalid configuration: {exc}", file=sys.stderr)
        return 2, None
    except NumericalError as exc:
        print(f"eulertopo: numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3, None
    return 0, res


def main(argv=None):
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
