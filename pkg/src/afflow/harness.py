"""Instance generation, runs, independent verification and η-sweeps."""

import hashlib
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from math import prod
from time import perf_counter

import numpy as np

from . import cocycle as cc
from . import correction as cr
from . import doubled as db
from . import flowcore as fc
from . import numkernel as nk
from . import staralg as sa
from .errors import AfflowError, ArtifactMissing, PreconditionError

EXACT_TOL = 1e-8
CSV_COLUMNS = ["eta", "level", "defect_before_lo", "defect_before_hi", "defect_after_hi",
               "sup_dev", "k_norm", "w_dev", "seconds"]


def substream(seed, purpose):
    """Counter-based generator for one purpose ("instance", "haar", "defect", ...)."""
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), zlib.crc32(purpose.encode())])
    return np.random.Generator(np.random.Philox(ss))


def _digest(x):
    return hashlib.sha256(np.ascontiguousarray(x, dtype=complex).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class Instance:
    n: int
    tower_spec: tuple
    H: np.ndarray = field(repr=False)
    eta: float
    seed: int
    frame: np.ndarray = field(repr=False)
    fixed_levels: int = 0

    @property
    def tower(self):
        """A_k = U (M_{d_1...d_k} ⊗ 1) U*, k = 1..depth; the last level is M_N."""
        out, p = [], 1
        for d in self.tower_spec:
            p *= d
            out.append(sa.from_block_partition(self.n, [(p, self.n // p)], self.frame))
        return out

    def block(self, k):
        """The factor U (M_K ⊗ 1) U* in the instance frame."""
        if k < 1 or self.n % k:
            raise PreconditionError("block size must divide n", block=k, n=self.n)
        return sa.from_block_partition(self.n, [(k, self.n // k)], self.frame)

    @property
    def digest(self):
        return _digest(self.H)

    def to_json(self):
        return {
            "n": self.n,
            "tower": list(self.tower_spec),
            "eta": self.eta,
            "seed": self.seed,
            "fixed_levels": self.fixed_levels,
            "H": nk.matrix_to_json(self.H),
            "frame": nk.matrix_to_json(self.frame),
            "digest": self.digest,
            "provenance": {"generator": "gen_instance", "rng": "philox",
                           "substreams": ["frame", "levels", "perturbation"]},
        }

    @classmethod
    def from_json(cls, obj):
        inst = cls(int(obj["n"]), tuple(obj["tower"]), nk.matrix_from_json(obj["H"]),
                   float(obj["eta"]), int(obj["seed"]), nk.matrix_from_json(obj["frame"]),
                   int(obj.get("fixed_levels", 0)))
        if "digest" in obj and obj["digest"] != inst.digest:
            raise PreconditionError("instance digest does not match its Hamiltonian")
        return inst


def parse_tower(text):
    if isinstance(text, str):
        return tuple(int(t) for t in text.split(",") if t.strip())
    return tuple(int(t) for t in text)


def gen_instance(n, tower_spec, eta, seed, fixed_levels=0):
    """H = Σ_k h_k + η V with h_k ∈ A_k ∩ A_{k-1}' and ||V|| = 1.

    Levels 1..fixed_levels get h_k = 0, so at η = 0 the flow fixes
    A_{fixed_levels} pointwise. All draws are independent of η.
    """
    spec = parse_tower(tower_spec)
    if not spec or any(d < 2 for d in spec) or prod(spec) != n:
        raise PreconditionError("tower must be a multiplicative partition of n",
                                n=n, tower=list(spec))
    if not 0 <= fixed_levels <= len(spec):
        raise PreconditionError("fixed_levels out of range", fixed_levels=fixed_levels)
    frame = nk.haar_unitary(substream(seed, "frame"), n)
    inst = Instance(n, spec, np.zeros((n, n), complex), float(eta), int(seed), frame,
                    int(fixed_levels))
    rng = substream(seed, "levels")
    H = np.zeros((n, n), dtype=complex)
    prev = None
    for idx, alg in enumerate(inst.tower, start=1):
        x = nk.random_hermitian(rng, n)
        x = sa.cond_expect(alg, x)
        if prev is not None:
            x = sa.cond_expect(sa.commutant(prev), x)
        if idx > fixed_levels:
            H = H + x
        prev = alg
    V = nk.random_hermitian(substream(seed, "perturbation"), n)
    H = nk.hermitian(H + eta * V)
    return replace(inst, H=H)


def _defect(H, alg, mode, grid, trials, seed):
    flow = fc.InnerFlow(H)
    if mode == "pointwise":
        return fc.pointwise_defect(flow, alg, grid, trials, seed)
    return fc.invariance_defect(flow, alg, grid, trials, seed)


def _targets(inst, mode, block=None, level=None):
    if mode == "tower":
        return [(k, a) for k, a in enumerate(inst.tower, start=1)]
    if mode == "prop_a":
        return [(block, inst.block(block))]
    if mode == "pointwise":
        return [(level, inst.tower[level - 1])]
    raise ValueError(f"unknown mode {mode!r}")


def _exit_code(exc):
    if isinstance(exc, PreconditionError):
        return 2
    return 3


def run(inst, config=cr.DEFAULT_CONFIG, mode="tower", block=None, level=None):
    """Run one driver on an instance and re-measure every target afterwards.

    Always returns a report; failures are recorded with their stage path.
    """
    t0 = perf_counter()
    grid = config.grid
    targets = _targets(inst, mode, block, level)
    report = {
        "mode": mode,
        "block": block,
        "level": level,
        "instance": inst.to_json(),
        "config": config.to_dict(),
        "levels": [],
    }
    before = {}
    for k, alg in targets:
        before[k] = _defect(inst.H, alg, mode, grid, config.trials, config.seed)
    try:
        if mode == "tower":
            cocycle, diag = cr.fix_tower(inst.H, inst.tower, None, config)
        elif mode == "prop_a":
            cocycle, diag = db.fix_prop_a(inst.H, targets[0][1], None, config)
        else:
            cocycle, diag = cr.fix_pointwise(inst.H, targets[0][1], None, config)
    except AfflowError as exc:
        report.update({
            "error": exc.to_dict(),
            "pass": False,
            "exit_code": _exit_code(exc),
            "seconds": perf_counter() - t0,
        })
        for k, _ in targets:
            report["levels"].append({"level": k, "defect_before": before[k].to_dict()})
        return report
    final = cocycle.perturbed_hamiltonian
    checks = {}
    for k, alg in targets:
        after = _defect(final, alg, mode, grid, config.trials, config.seed + 1)
        entry = {"level": k, "defect_before": before[k].to_dict(),
                 "defect_after": after.to_dict()}
        if mode == "pointwise":
            entry["commutator_residual"] = cr.pointwise_residual(final, alg)
        else:
            entry["split_residual"] = cr.invariance_split_residual(final, alg)
        report["levels"].append(entry)
        checks[f"defect_after_level{k}"] = _check(after.upper, EXACT_TOL)
    identity = cc.identity_residual(cocycle, [(0.3, 0.5), (-0.7, 0.2), (1.0, 1.0)])
    checks["cocycle_identity"] = _check(identity, 1e-10 * max(1.0, nk.opnorm(inst.H)))
    checks["w_unitary"] = _check(nk.opnorm(cocycle.w @ nk.dag(cocycle.w) - nk.eye(inst.n)),
                                 1e-10)
    report.update({
        "cocycle": cocycle.to_json(),
        "metrics": cc.metrics(cocycle, grid).to_dict(),
        "diagnostics": _jsonable(diag),
        "checks": checks,
        "pass": all(c["pass"] for c in checks.values()),
        "seconds": perf_counter() - t0,
    })
    report["exit_code"] = 0 if report["pass"] else 3
    return report


def _check(value, threshold):
    value = float(value)
    return {"value": value, "threshold": float(threshold), "pass": bool(value <= threshold)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        if np.iscomplexobj(x):
            return nk.matrix_to_json(x)
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if hasattr(x, "to_dict"):
        return _jsonable(x.to_dict())
    return x


def verify(report, grid_points=129, seed=None):
    """Re-check a report on a finer grid with fresh sampling seeds.

    Every recorded number that can be recomputed is compared; differences
    above 1e-8 are listed under "discrepancies".
    """
    if "instance" not in report:
        raise ArtifactMissing("report has no instance")
    inst = Instance.from_json(report["instance"])
    mode = report["mode"]
    out = {"mode": mode, "grid_points": grid_points, "checks": {}, "discrepancies": []}
    if "cocycle" not in report:
        out["checks"]["run_succeeded"] = {"value": 1.0, "threshold": 0.0, "pass": False}
        out["pass"] = False
        return out
    cfg = report.get("config", {})
    seed = int(cfg.get("seed", 0)) + 7919 if seed is None else int(seed)
    trials = int(cfg.get("trials", 64))
    grid = fc.default_grid(grid_points)
    cocycle = cc.Cocycle.from_json(report["cocycle"])
    checks = out["checks"]
    base_gap = nk.opnorm(cocycle.hamiltonian - inst.H)
    checks["cocycle_base"] = _check(base_gap, 1e-10 * max(1.0, nk.opnorm(inst.H)))
    checks["w_unitary"] = _check(nk.opnorm(cocycle.w @ nk.dag(cocycle.w) - nk.eye(inst.n)),
                                 1e-10)
    final = cocycle.perturbed_hamiltonian
    targets = _targets(inst, mode, report.get("block"), report.get("level"))
    recorded = {e["level"]: e for e in report.get("levels", [])}
    for k, alg in targets:
        after = _defect(final, alg, mode, grid, trials, seed)
        checks[f"defect_after_level{k}"] = _check(after.upper, EXACT_TOL)
        rec = recorded.get(k, {}).get("defect_after")
        if rec is not None and abs(rec["upper"] - after.upper) > EXACT_TOL:
            out["discrepancies"].append({"level": k, "field": "defect_after.upper",
                                         "recorded": rec["upper"], "recomputed": after.upper})
    if "metrics" in report:
        m = cc.metrics(cocycle, fc.default_grid(int(cfg.get("grid_points", 65)))).to_dict()
        for key, val in m.items():
            if abs(report["metrics"][key] - val) > EXACT_TOL:
                out["discrepancies"].append({"field": f"metrics.{key}",
                                             "recorded": report["metrics"][key],
                                             "recomputed": val})
    checks["discrepancies"] = _check(len(out["discrepancies"]), 0)
    out["pass"] = all(c["pass"] for c in checks.values())
    out["exit_code"] = 0 if out["pass"] else 3
    return out


def _sweep_point(args):
    n, tower, eta, seed, config, mode, block, level, fixed = args
    inst = gen_instance(n, tower, eta, seed, fixed)
    t0 = perf_counter()
    rep = run(inst, config, mode, block, level)
    secs = perf_counter() - t0
    rows = []
    m = rep.get("metrics", {})
    for entry in rep["levels"]:
        b = entry["defect_before"]
        a = entry.get("defect_after", {})
        rows.append({
            "eta": eta, "level": entry["level"],
            "defect_before_lo": b["lower"], "defect_before_hi": b["upper"],
            "defect_after_hi": a.get("upper", float("nan")),
            "sup_dev": m.get("sup_dev", float("nan")),
            "k_norm": m.get("k_norm", float("nan")),
            "w_dev": m.get("w_dev", float("nan")),
            "seconds": secs,
        })
    return rows, rep


def workers():
    try:
        return max(1, int(os.environ.get("AFFLOW_WORKERS", "1")))
    except ValueError:
        return 1


def sweep(etas, n=8, tower=(2, 2, 2), seed=7, config=cr.DEFAULT_CONFIG, mode="tower",
          block=None, level=None, fixed_levels=0, max_workers=None):
    """One run per η on instances with matched seeds.

    Returns (rows, reports); rows follow the order of `etas` whatever the
    number of workers (AFFLOW_WORKERS).
    """
    jobs = [(n, parse_tower(tower), float(e), seed, config, mode, block, level, fixed_levels)
            for e in etas]
    count = workers() if max_workers is None else max_workers
    if count > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=count) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    rows = [r for rs, _ in results for r in rs]
    return rows, [rep for _, rep in results]


def write_csv(rows, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=1)


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactMissing("file not found", path=str(path)) from exc
