"""Command line interface: fit, prior-analysis, simulate, summarize.

Configuration is a YAML file merged over the defaults shown by
`nrmpp --print-config`. Any key can be overridden from the environment with
NRMPP_<SECTION>__<KEY>=value (values parsed as YAML), e.g.
NRMPP_CHAIN__N_ITER=500.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .jumps import JumpModel
from .mcmc import ChainConfig, Trace, run_chain
from .mixture import InvGamma, density_estimate
from .nrm import joint_kn_law
from .pointproc import Dpp, Poisson, Region, Sncp, Strauss
from .summaries import coclustering, kn_posterior, point_partition

log = logging.getLogger("nrmpp")

ENV_PREFIX = "NRMPP_"

DEFAULTS = {
    "process": {
        "family": "sncp",
        "region": {"lower": [-15.0], "upper": [15.0]},
        "rate": 0.1,
        "beta": 0.1,
        "gamma_s": 0.5,
        "radius": 1.0,
        "rho": 0.1,
        "alpha_d": 1.0,
        "parametrization": "likelihood",
        "m_landmarks": None,
        "gamma": 1.0,
        "alpha_k": 1.0,
        "lam": 1.0,
        "base": "gaussian",
        "m0": [0.0],
        "s0": 5.0,
    },
    "jumps": {"shape": 2.0, "rate": 2.0},
    "variance_prior": {"a": 2.0, "b": 2.0},
    "chain": {
        "n_iter": 2000,
        "burn_in": 500,
        "thin": 1,
        "algorithm": "conditional",
        "neal_L": 3,
        "mh_step": 0.5,
        "u_step": 0.7,
        "gibbs_bd_steps": 100,
        "mh_repeats": 2,
        "sncp_scheme": "grouped",
    },
    "data": {
        "path": None,
        "synthetic": {"generator": "t_mixture", "n": 200, "df": 3.0, "centers": [-5.0, 5.0],
                      "sd": 1.0, "seed": 0},
    },
    "output": {"dir": "out", "grid": {"min": -15.0, "max": 15.0, "npoints": 301},
               "write_trace": True},
    "prior_analysis": {
        "n": 5,
        "k_jump_shape": 1.0,
        "region": {"lower": [-0.5], "upper": [0.5]},
        "poisson_rate": 1.0,
        "dpp": {"rho": 5.0, "alpha_d": 0.3, "parametrization": "likelihood", "m_landmarks": 200},
        "x": {"min": 0.05, "max": 0.35, "npoints": 7},
    },
    "simulate": {"n": 100},
    "seed": 0,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _env_overrides(environ) -> dict:
    over: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = over
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return over


def load_config(path=None, environ=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, user)
    env = _env_overrides(os.environ if environ is None else environ)
    return _merge(cfg, env)


def _region(spec) -> Region:
    try:
        return Region(tuple(float(v) for v in spec["lower"]), tuple(float(v) for v in spec["upper"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad region {spec!r}") from exc


def build_process(spec: dict):
    fam = spec["family"]
    try:
        if fam == "poisson":
            return Poisson(float(spec["rate"]), _region(spec["region"]))
        if fam == "strauss":
            return Strauss(float(spec["beta"]), float(spec["gamma_s"]), float(spec["radius"]),
                           _region(spec["region"]))
        if fam == "dpp":
            return Dpp(float(spec["rho"]), float(spec["alpha_d"]), _region(spec["region"]),
                       spec["parametrization"], spec["m_landmarks"])
        if fam == "sncp":
            region = _region(spec["region"]) if spec["base"] == "uniform" else None
            return Sncp(float(spec["gamma"]), float(spec["alpha_k"]), float(spec["lam"]),
                        spec["base"], tuple(spec["m0"]), float(spec["s0"]), region)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {fam} process: {exc}") from exc
    raise ConfigError(f"unknown process family {fam!r}")


def build_models(cfg: dict):
    pp = build_process(cfg["process"])
    try:
        jm = JumpModel(float(cfg["jumps"]["shape"]), float(cfg["jumps"]["rate"]))
        vp = InvGamma(float(cfg["variance_prior"]["a"]), float(cfg["variance_prior"]["b"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return pp, jm, vp


def chain_config(cfg: dict, seed: int) -> ChainConfig:
    try:
        return ChainConfig(seed=seed, **cfg["chain"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid chain section: {exc}") from exc


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_dataset(path) -> np.ndarray:
    """Numeric CSV, one observation per row; q is the number of columns."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ValueError(f"cannot read data file {path}: {exc}") from exc
    if not rows:
        raise ValueError(f"data file {path} is empty")
    q = len(rows[0])
    out = np.empty((len(rows), q))
    for i, row in enumerate(rows, start=1):
        if len(row) != q:
            raise ValueError(f"row {i}: expected {q} columns, found {len(row)}")
        for j, cell in enumerate(row, start=1):
            try:
                out[i - 1, j - 1] = float(cell)
            except ValueError:
                raise ValueError(f"parse error at row {i}, column {j}: {cell!r}") from None
    if not np.all(np.isfinite(out)):
        raise ValueError("data contain non-finite values")
    return out


def make_synthetic(spec: dict) -> np.ndarray:
    """Equal-sized components in order: Student t ("t_mixture") or Gaussian
    ("gaussian_mixture") around the given centers."""
    gen = spec.get("generator")
    rng = np.random.default_rng(spec.get("seed", 0))
    n = int(spec.get("n", 200))
    centers = np.asarray(spec.get("centers", [-5.0, 5.0]), float)
    sizes = np.full(len(centers), n // len(centers))
    sizes[: n - sizes.sum()] += 1
    parts = []
    for c, m in zip(centers, sizes):
        if gen == "t_mixture":
            parts.append(c + rng.standard_t(float(spec.get("df", 3.0)), m))
        elif gen == "gaussian_mixture":
            parts.append(c + float(spec.get("sd", 1.0)) * rng.standard_normal(m))
        else:
            raise ValueError(f"unknown synthetic generator {gen!r}")
    return np.concatenate(parts)[:, None]


def _dataset(cfg, explicit=None):
    path = explicit or cfg["data"]["path"]
    if path:
        return load_dataset(path), str(path)
    return make_synthetic(cfg["data"]["synthetic"]), "synthetic"


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _grid(cfg):
    g = cfg["output"]["grid"]
    return np.linspace(float(g["min"]), float(g["max"]), int(g["npoints"]))


class _Staging:
    """Write into a temporary directory and move the files into place only on success."""

    def __init__(self, out: Path):
        self.out = out

    def __enter__(self) -> Path:
        parent = self.out.parent if self.out.parent != Path("") else Path(".")
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".nrmpp-", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.out.mkdir(parents=True, exist_ok=True)
            for f in self.tmp.iterdir():
                os.replace(f, self.out / f.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _trace_records(trace: Trace, chain: int):
    for j in range(len(trace)):
        rec = {"chain": chain, "iteration": int(trace.iterations[j]), "K_n": int(trace.kn[j]),
               "allocations": [int(v) for v in trace.alloc[j]], "u": float(trace.u[j]),
               "total_mass": float(trace.total_mass[j]), "n_atoms": int(trace.n_atoms[j])}
        if trace.is_sncp:
            rec["groups"] = [int(v) for v in trace.groups[j]]
            rec["n_groups"] = int(trace.n_groups[j])
        if trace.measures:
            m = trace.measures[j]
            rec["atoms"] = [[*map(float, loc), float(v), float(s)]
                            for loc, v, s in zip(m.locations, m.variances, m.jumps)]
        yield rec


def read_trace(path) -> Trace:
    """Rebuild a (pooled) Trace from an NDJSON trace file."""
    from .nrm import DiscreteMeasure

    tr = Trace()
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            tr.iterations.append(r["iteration"])
            tr.kn.append(r["K_n"])
            tr.alloc.append(np.asarray(r["allocations"]))
            tr.u.append(r["u"])
            tr.total_mass.append(r["total_mass"])
            tr.n_atoms.append(r["n_atoms"])
            if "groups" in r:
                tr.groups.append(np.asarray(r["groups"]))
                tr.n_groups.append(r["n_groups"])
            if "atoms" in r and r["atoms"]:
                a = np.asarray(r["atoms"], float)
                tr.measures.append(DiscreteMeasure(a[:, :-2], a[:, -2], a[:, -1]))
    if not len(tr):
        raise ValueError(f"trace {path} holds no records")
    return tr


def _pool(traces) -> Trace:
    out = Trace()
    for t in traces:
        for name in ("iterations", "kn", "alloc", "u", "total_mass", "n_atoms", "groups",
                     "n_groups", "measures"):
            getattr(out, name).extend(getattr(t, name))
        out.wall_time += t.wall_time
    return out


def write_summaries(trace: Trace, outdir: Path, grid=None) -> list:
    """coclustering.csv, kn_posterior.csv, density.csv and partition.csv; returns the file names."""
    files = []
    levels = ["component"] + (["group"] if trace.is_sncp else [])
    ccm = coclustering(trace, "component")
    _write_csv(outdir / "coclustering.csv", [f"obs{i}" for i in range(len(ccm))],
               [[f"{v:.6g}" for v in row] for row in ccm])
    files.append("coclustering.csv")
    if trace.is_sncp:
        ccg = coclustering(trace, "group")
        _write_csv(outdir / "coclustering_group.csv", [f"obs{i}" for i in range(len(ccg))],
                   [[f"{v:.6g}" for v in row] for row in ccg])
        files.append("coclustering_group.csv")
    rows = []
    for lev in levels:
        pmf = kn_posterior(trace, lev)
        rows += [[lev, k, f"{p:.6g}"] for k, p in enumerate(pmf) if p > 0]
    _write_csv(outdir / "kn_posterior.csv", ["level", "k", "probability"], rows)
    files.append("kn_posterior.csv")
    part_rows = []
    for lev in levels:
        cands = trace.alloc if lev == "component" else trace.groups
        best = point_partition(coclustering(trace, lev), cands)
        part_rows += [[lev, i, int(b)] for i, b in enumerate(best)]
    _write_csv(outdir / "partition.csv", ["level", "observation", "label"], part_rows)
    files.append("partition.csv")
    if grid is not None and trace.measures and trace.measures[0].locations.shape[1] == 1:
        dens, _ = density_estimate(trace.measures, grid[:, None])
        _write_csv(outdir / "density.csv", ["x", "density"],
                   [[f"{x:.6g}", f"{d:.6g}"] for x, d in zip(grid, dens)])
        files.append("density.csv")
    return files


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(cfg, args) -> int:
    pp, jm, vp = build_models(cfg)
    z, source = _dataset(cfg, args.data)
    if z.shape[1] != pp.dim:
        raise ConfigError(f"data have {z.shape[1]} columns but the process lives in dimension {pp.dim}")
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(args.chains)
    cfgs = [chain_config(cfg, int(s.generate_state(1)[0])) for s in seeds]
    t0 = time.perf_counter()
    out = Path(cfg["output"]["dir"])
    with _Staging(out) as tmp:
        traces = []
        for i, cc in enumerate(cfgs):
            log.info("chain %d: %s sampler, %d iterations", i, cc.algorithm, cc.n_iter)
            traces.append(run_chain(cc, z, pp, jm, vp))
        pooled = _pool(traces)
        files = []
        if cfg["output"]["write_trace"]:
            with open(tmp / "trace.ndjson", "w") as fh:
                for i, tr in enumerate(traces):
                    for rec in _trace_records(tr, i):
                        fh.write(json.dumps(rec) + "\n")
            files.append("trace.ndjson")
        files += write_summaries(pooled, tmp, _grid(cfg))
        rows = [[i, len(t), f"{np.mean(t.kn):.4g}", f"{t.wall_time:.3f}"] for i, t in enumerate(traces)]
        _write_csv(tmp / "summary.csv", ["chain", "saved", "mean_K_n", "wall_time_s"], rows)
        files.append("summary.csv")
        manifest = {"command": "fit", "version": _version(), "seed": cfg["seed"],
                    "chain_seeds": [c.seed for c in cfgs], "data": source, "n": int(len(z)),
                    "wall_time_s": time.perf_counter() - t0, "files": files, "config": cfg}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(files) + 1} files to {out}")
    return 0


def anchor_settings():
    return {
        "I": lambda x: [-x, x],
        "II": lambda x: [-0.3, -0.3 + 2 * x],
        "III": lambda x: [-x, 0.0, x],
    }


def prior_analysis_rows(cfg) -> list:
    pa = cfg["prior_analysis"]
    region = _region(pa["region"])
    n = int(pa["n"])
    jm = JumpModel(float(pa["k_jump_shape"]), 1.0)
    g = pa["x"]
    xs = np.linspace(float(g["min"]), float(g["max"]), int(g["npoints"]))
    d = pa["dpp"]
    procs = {"poisson": Poisson(float(pa["poisson_rate"]), region),
             "dpp": Dpp(float(d["rho"]), float(d["alpha_d"]), region, d["parametrization"],
                        d["m_landmarks"])}
    rows = []
    for setting, fn in anchor_settings().items():
        for name, pp in procs.items():
            if name == "poisson" and setting != "I":
                continue
            for x in xs:
                y = np.asarray(fn(x))[:, None]
                rows.append([f"{name}:{setting}", f"{x:.6g}", len(y), f"{joint_kn_law(pp, jm, n, y):.10g}"])
    return rows


def cmd_prior_analysis(cfg, args) -> int:
    rows = prior_analysis_rows(cfg)
    out = Path(cfg["output"]["dir"])
    with _Staging(out) as tmp:
        _write_csv(tmp / "prior_analysis.csv", ["setting", "x", "k", "value"], rows)
        manifest = {"command": "prior-analysis", "version": _version(), "seed": cfg["seed"],
                    "files": ["prior_analysis.csv"], "config": cfg}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote prior_analysis.csv to {out}")
    return 0


def simulate_dataset(pp, jm, vp, n, rng):
    """Draw a nonempty measure, allocations and observations from the generative model."""
    for _ in range(10000):
        x = pp.simulate(rng)
        if len(x):
            break
    else:
        raise RuntimeError("the process kept producing empty configurations")
    x = np.asarray(x, float).reshape(len(x), -1)
    m = len(x)
    s = jm.sample(0.0, 0, rng, size=m)
    w = vp.sample(rng, m)
    c = rng.choice(m, size=n, p=s / s.sum())
    z = x[c] + np.sqrt(w[c])[:, None] * rng.standard_normal((n, x.shape[1]))
    return z, c, x, w, s


def cmd_simulate(cfg, args) -> int:
    pp, jm, vp = build_models(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(2)[1])
    z, c, x, w, s = simulate_dataset(pp, jm, vp, int(cfg["simulate"]["n"]), rng)
    out = Path(cfg["output"]["dir"])
    with _Staging(out) as tmp:
        with open(tmp / "data.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([[f"{v:.10g}" for v in row] for row in z])
        _write_csv(tmp / "truth.csv", ["observation", "atom"], [[i, int(a)] for i, a in enumerate(c)])
        _write_csv(tmp / "atoms.csv", [f"x{j}" for j in range(x.shape[1])] + ["variance", "jump"],
                   [[*map(float, xi), float(wi), float(si)] for xi, wi, si in zip(x, w, s)])
        manifest = {"command": "simulate", "version": _version(), "seed": cfg["seed"],
                    "n": int(len(z)), "n_atoms": int(len(x)), "K_n": int(len(np.unique(c))),
                    "files": ["data.csv", "truth.csv", "atoms.csv"], "config": cfg}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(z)} observations to {out / 'data.csv'}")
    return 0


def cmd_summarize(cfg, args) -> int:
    out = Path(cfg["output"]["dir"])
    path = Path(args.trace) if args.trace else out / "trace.ndjson"
    trace = read_trace(path)
    with _Staging(out) as tmp:
        files = write_summaries(trace, tmp, _grid(cfg))
        manifest = {"command": "summarize", "version": _version(), "trace": str(path),
                    "files": files, "config": cfg}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(files)} summary files to {out}")
    return 0


COMMANDS = {"fit": cmd_fit, "prior-analysis": cmd_prior_analysis, "simulate": cmd_simulate,
            "summarize": cmd_summarize}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nrmpp", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true", help="print the merged configuration and exit")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", dest="sub_config", help="YAML configuration file")
        s.add_argument("--seed", type=int, help="master seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--chains", type=int, default=1, help="number of independent chains")
        s.add_argument("--data", help="CSV data file (fit only; overrides data.path)")
        s.add_argument("--trace", help="NDJSON trace (summarize only)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "sub_config", None) or args.config)
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        if getattr(args, "out", None):
            cfg["output"]["dir"] = args.out
        if args.print_config:
            sys.stdout.write(yaml.safe_dump(cfg, sort_keys=False))
            return 0
        if args.command is None:
            parser.print_help()
            return 2
        if args.chains < 1:
            raise ConfigError("--chains must be at least 1")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"nrmpp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
