"""Command-line harness: generate, train, evaluate, verify, bench, plot.

Experiments are described by INI config files with strict schema checking;
a typo in a key or section is an error, never a silently ignored default.
Every artifact is referenced by a 12-hex content hash of the resolved
config, so outputs are self-describing.  CSV is the canonical output
format; SVG plots are hand-rolled vector files with no extra deps.
"""

from __future__ import annotations

import argparse
import configparser
import fcntl
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import particlevi.autodiff as ad
from particlevi import filters as fl
from particlevi import models as mo
from particlevi import objectives as ob
from particlevi.rng import RngStream


class CliError(Exception):
    """Config or precondition problem; exits with status 2."""


# ---------------------------------------------------------------------------
# configuration


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_schedule(raw: str):
    """'10K@0.01 10K@0.001' -> ((0.01, 10000), (0.001, 10000))."""
    segments = raw.replace(",", " ").split()
    out = []
    for seg in segments:
        if "@" not in seg:
            raise ValueError(f"schedule segment {seg!r} is not ITERS@LR")
        left, right = seg.split("@", 1)
        left = left.strip().upper()
        scale = 1
        if left.endswith("K"):
            left, scale = left[:-1], 1_000
        elif left.endswith("M"):
            left, scale = left[:-1], 1_000_000
        iters = int(left) * scale
        lr = float(right)
        if iters < 0 or lr < 0:
            raise ValueError(f"schedule segment {seg!r} must be non-negative")
        out.append((lr, iters))
    return tuple(out)


_MODEL_KEYS = {
    "kind": str,
    "t": int,
    "dx": int,
    "dy": int,
    "dh": int,
    "dim": int,
    "alpha": float,
    "c_mode": str,
    "b_mode": str,
}
_OBJECTIVE_KEYS = {"kind": str, "n": int, "learn_theta": _to_bool, "fix_beta": _to_bool}
_TRAIN_KEYS = {"schedule": parse_schedule, "clip": float, "probe_every": int, "probe_samples": int}
_RUN_KEYS = {"seed": int}
_SECTIONS = {"model": _MODEL_KEYS, "objective": _OBJECTIVE_KEYS, "train": _TRAIN_KEYS, "run": _RUN_KEYS}

# per model kind: which of the optional model keys must / may appear
_KIND_KEYS = {
    "lgssm": {"dx", "dy", "alpha", "c_mode"},
    "sv": {"dim", "b_mode"},
    "dmm": {"dx", "dy", "dh"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    model_kind: str
    t: int
    model: dict
    objective_kind: str
    n: int
    learn_theta: bool
    fix_beta: bool
    schedule: tuple
    clip: float | None
    probe_every: int
    probe_samples: int
    seed: int

    def _model_lines(self):
        lines = [f"model.kind={self.model_kind}", f"model.t={self.t}"]
        lines += [f"model.{k}={self.model[k]!r}" for k in sorted(self.model)]
        lines.append(f"run.seed={self.seed}")
        return lines

    def canonical(self) -> str:
        sched = " ".join(f"{iters}@{lr!r}" for lr, iters in self.schedule)
        lines = self._model_lines() + [
            f"objective.kind={self.objective_kind}",
            f"objective.n={self.n}",
            f"objective.learn_theta={self.learn_theta}",
            f"objective.fix_beta={self.fix_beta}",
            f"train.schedule={sched}",
            f"train.clip={self.clip!r}",
            f"train.probe_every={self.probe_every}",
            f"train.probe_samples={self.probe_samples}",
        ]
        return "\n".join(sorted(lines))

    @property
    def exp_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    @property
    def data_hash(self) -> str:
        # dataset identity: model section + seed only, so every objective
        # trained on the same synthetic data shares one file
        text = "\n".join(sorted(self._model_lines()))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise CliError(f"config file not found: {path}")
    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise CliError(f"{path}: unknown section [{section}]")
        keys = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise CliError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[f"{section}.{key}"] = keys[key](raw)
            except ValueError as exc:
                raise CliError(f"{path}: [{section}] {key}: {exc}") from exc

    def need(name):
        if name not in values:
            raise CliError(f"{path}: missing required key {name}")
        return values[name]

    model_kind = str(need("model.kind")).lower()
    if model_kind not in _KIND_KEYS:
        raise CliError(f"{path}: model.kind must be one of {sorted(_KIND_KEYS)}")
    t = need("model.t")
    if t < 1:
        raise CliError(f"{path}: model.t must be >= 1")
    allowed = _KIND_KEYS[model_kind]
    model = {}
    for key in ("dx", "dy", "dh", "dim", "alpha", "c_mode", "b_mode"):
        if f"model.{key}" in values:
            if key not in allowed:
                raise CliError(f"{path}: model.{key} does not apply to kind {model_kind!r}")
            model[key] = values[f"model.{key}"]
    missing = allowed - set(model)
    if missing:
        raise CliError(f"{path}: model kind {model_kind!r} needs keys {sorted(missing)}")

    objective_kind = str(need("objective.kind")).lower()
    if objective_kind not in ob.KINDS:
        raise CliError(f"{path}: objective.kind must be one of {list(ob.KINDS)}")
    n = need("objective.n")
    if n < 1:
        raise CliError(f"{path}: objective.n must be >= 1")
    fix_beta = values.get("objective.fix_beta", False)
    if fix_beta and model_kind != "lgssm":
        raise CliError(f"{path}: objective.fix_beta applies to the lgssm proposal only")

    seed = values.get("run.seed", 0)
    if seed_override is not None:
        seed = int(seed_override)
    return ExperimentConfig(
        model_kind=model_kind,
        t=t,
        model=model,
        objective_kind=objective_kind,
        n=n,
        learn_theta=values.get("objective.learn_theta", False),
        fix_beta=fix_beta,
        schedule=values.get("train.schedule", ()),
        clip=values.get("train.clip"),
        probe_every=values.get("train.probe_every", 0),
        probe_samples=values.get("train.probe_samples", 8),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# experiment assembly

# rng stream layout per experiment seed
_MODEL_STREAM, _DATA_STREAM, _PROPOSAL_STREAM, _TRAIN_STREAM, _EVAL_STREAM = 1, 2, 3, 4, 5


def build_model(cfg: ExperimentConfig):
    rng = RngStream(cfg.seed).split(_MODEL_STREAM)
    m = cfg.model
    if cfg.model_kind == "lgssm":
        return mo.lgssm_make(m["dx"], m["dy"], m["alpha"], m["c_mode"], rng)
    if cfg.model_kind == "sv":
        return mo.sv_make(m["dim"], m["b_mode"], rng)
    return mo.dmm_make(m["dx"], m["dy"], m["dh"], rng)


def build_objective(cfg: ExperimentConfig, model) -> ob.Objective:
    phi = mo.proposal_init(model, cfg.t, RngStream(cfg.seed).split(_PROPOSAL_STREAM))
    return ob.Objective(cfg.objective_kind, model, phi, cfg.n, learn_theta=cfg.learn_theta)


def data_paths(cfg: ExperimentConfig, out: Path):
    return out / f"data_{cfg.data_hash}.csv", out / f"data_{cfg.data_hash}.json"


def load_dataset(cfg: ExperimentConfig, out: Path) -> mo.Dataset:
    csv_path, _ = data_paths(cfg, out)
    if not csv_path.exists():
        raise CliError(f"dataset missing: {csv_path} (run `generate` first)")
    ys = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    return mo.Dataset(ys=ys, kind=cfg.model_kind, meta={"data_hash": cfg.data_hash})


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _append_row(path: Path, header: str, row: str):
    """Single-line locked append; the header is written once."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        if fh.tell() == 0:
            fh.write(header + "\n")
        fh.write(row + "\n")
        fcntl.flock(fh, fcntl.LOCK_UN)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: ExperimentConfig, out: Path) -> Path:
    model = build_model(cfg)
    ds = mo.generate(model, cfg.t, RngStream(cfg.seed).split(_DATA_STREAM))
    csv_path, meta_path = data_paths(cfg, out)
    header = ",".join(f"y{j}" for j in range(ds.ys.shape[1]))
    rows = "\n".join(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(ds.ys))
    _write_text(csv_path, header + "\n" + rows + "\n")

    meta = {
        "data_hash": cfg.data_hash,
        "seed": cfg.seed,
        "kind": cfg.model_kind,
        "t": cfg.t,
        "options": dict(sorted(cfg.model.items())),
    }
    if cfg.model_kind == "lgssm":
        meta["arrays"] = {
            "a": model.a.tolist(),
            "c": model.c.tolist(),
            "q_diag": model.q_diag.tolist(),
            "r_diag": model.r_diag.tolist(),
        }
        meta["kalman_loglik"] = mo.kalman_loglik(model, ds.ys)
    elif cfg.model_kind == "sv":
        meta["arrays"] = {
            "mu": np.asarray(model.mu).tolist(),
            "phi_logit": np.asarray(model.phi_logit).tolist(),
            "log_q_std": np.asarray(model.log_q_std).tolist(),
            "b_raw": np.asarray(model.b_raw).tolist(),
        }
    _write_text(meta_path, json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(f"wrote {csv_path} and {meta_path}")
    return csv_path


def _load_packed(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"params file missing: {path}")
    with np.load(path) as fh:
        return {k: fh[k] for k in fh.files}


def cmd_train(cfg: ExperimentConfig, out: Path, warm_start: Path | None = None):
    if not cfg.schedule:
        raise CliError("config has no [train] schedule")
    model = build_model(cfg)
    ds = load_dataset(cfg, out)
    obj = build_objective(cfg, model)
    if warm_start is not None:
        obj = ob.apply_params(obj, _load_packed(warm_start))
    freeze = ("phi.beta",) if cfg.fix_beta else ()
    try:
        trained, record = ob.train(
            obj,
            ds,
            list(cfg.schedule),
            RngStream(cfg.seed).split(_TRAIN_STREAM),
            clip=cfg.clip,
            probe_every=cfg.probe_every,
            probe_samples=cfg.probe_samples,
            freeze=freeze,
        )
    except ValueError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return None, 1

    params_path = out / f"params_{cfg.exp_hash}.npz"
    params_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(params_path, **ob.pack_params(trained))
    record.to_csv(out / f"train_{cfg.exp_hash}.csv")
    mean, se = ob.bound_estimate(trained, ds, 64, RngStream(cfg.seed).split(_EVAL_STREAM))
    print(f"config {cfg.exp_hash}: trained {cfg.objective_kind} for {len(record.rows)} iterations")
    print(f"bound {mean:.4f} +- {se:.4f} (64 samples)")
    print(f"wrote {params_path}")
    return trained, 0


_RESULTS_HEADER = "config,objective,n,bound,se,kalman,wall_s,seed"


def cmd_evaluate(cfg: ExperimentConfig, out: Path, params_path: Path | None = None,
                 n_samples: int = 1000, workers: int | None = None) -> int:
    model = build_model(cfg)
    ds = load_dataset(cfg, out)
    obj = build_objective(cfg, model)
    packed = _load_packed(params_path if params_path is not None else out / f"params_{cfg.exp_hash}.npz")
    obj = ob.apply_params(obj, packed)

    t0 = time.perf_counter()
    mean, se = ob.bound_estimate(obj, ds, n_samples, RngStream(cfg.seed).split(_EVAL_STREAM), workers=workers)
    wall = time.perf_counter() - t0
    kal = mo.kalman_loglik(model, ds.ys) if cfg.model_kind == "lgssm" else None
    kal_text = "" if kal is None else repr(kal)
    row = f"{cfg.exp_hash},{cfg.objective_kind},{cfg.n},{mean!r},{se!r},{kal_text},{wall:.3f},{cfg.seed}"
    _append_row(out / "results.csv", _RESULTS_HEADER, row)
    print(f"config {cfg.exp_hash}: bound {mean:.4f} +- {se:.4f} over {n_samples} samples")
    if kal is not None:
        print(f"kalman reference {kal:.4f}")
        if mean > kal + 3.0 * se:
            print(f"FAIL bound {mean:.6f} exceeds kalman {kal:.6f} + 3*SE", file=sys.stderr)
            return 1
    return 0


# ---------------------------------------------------------------------------
# verify suites


def _suite_unbiasedness():
    h = mo.hmm_reference()
    ys = np.zeros((2, 1))
    truth = math.exp(mo.hmm_forward(h, [0, 0]))
    checks = []

    def expectation(run_fn):
        return fl.enumerate_expectation(lambda be: math.exp(float(run_fn(be).log_evidence.data)))

    for n in (2, 3):
        val = expectation(lambda be: fl.run_smc(h, None, ys, fl.FilterConfig(n), backend=be))
        checks.append((f"smc-n{n}", abs(val - truth), 1e-12))
        val = expectation(lambda be: fl.run_mpf(h, None, ys, fl.FilterConfig(n), backend=be))
        checks.append((f"mpf-n{n}", abs(val - truth), 1e-12))
        val = expectation(lambda be: fl.run_tmc(h, None, ys, n, backend=be))
        checks.append((f"tmc-n{n}", abs(val - truth), 1e-12))
        for l_perms in (1, 2):
            val = expectation(lambda be: fl.run_ipf(h, None, ys, n, l_perms, backend=be))
            checks.append((f"ipf-n{n}-l{l_perms}", abs(val - truth), 1e-12))
    return checks


def _verify_cases():
    m = mo.lgssm_make(2, 2, 0.42, "dense", RngStream(1))
    sv = mo.sv_make(2, "triangular", RngStream(3))
    dmm = mo.dmm_make(2, 3, 8, RngStream(4))
    return [
        ("lgssm", m, mo.proposal_init(m, 4), mo.generate(m, 4, RngStream(11))),
        ("sv", sv, mo.proposal_init(sv, 4), mo.generate(sv, 4, RngStream(12))),
        ("dmm", dmm, mo.proposal_init(dmm, 4, RngStream(5)), mo.generate(dmm, 4, RngStream(13))),
    ]


def _suite_identity():
    checks = []
    for name, model, params, data in _verify_cases():
        worst = 0.0
        for seed in range(1, 21):
            run = fl.run_mpf(model, params, data, fl.FilterConfig(4, seed=seed))
            worst = max(worst, fl.mpf_tmc_identity_check(model, run))
        checks.append((f"mpf-tmc-{name}", worst, 1e-9))
    return checks


def _suite_gradients():
    rng = RngStream(17)
    checks = []
    unary = {
        "exp": (ad.exp, 0.0),
        "log": (ad.log, 1.5),
        "sqrt": (ad.sqrt, 1.5),
        "erf": (ad.erf, 0.0),
        "sigmoid": (ad.sigmoid, 0.0),
        "tanh": (ad.tanh, 0.0),
    }
    for name, (op, shift) in unary.items():
        pts = np.abs(rng.split(hash(name) & 0xFFFF).normals(12)) + shift
        err = ad.finite_diff_check(lambda x: op(x).sum(), [pts])
        checks.append((f"op-{name}", err, 1e-5))
    a = rng.split(1).normals(6) + 3.0
    b = rng.split(2).normals(6) + 3.0
    for name, op in (("add", ad.add), ("sub", ad.sub), ("mul", ad.mul), ("div", ad.div)):
        err = ad.finite_diff_check(lambda x, y: op(x, y).sum(), [a, b])
        checks.append((f"op-{name}", err, 1e-5))
    w = rng.split(3).normals(6).reshape(2, 3)
    v = rng.split(4).normals(6).reshape(3, 2)
    checks.append(("op-matmul", ad.finite_diff_check(lambda x, y: (x @ y).sum(), [w, v]), 1e-5))
    checks.append(("op-logsumexp", ad.finite_diff_check(ad.logsumexp, [rng.split(5).normals(8)]), 1e-5))
    checks.append((
        "op-gather",
        ad.finite_diff_check(lambda x: ad.gather_rows(x, np.asarray([1, 0, 1])).sum(), [rng.split(6).normals(6).reshape(3, 2)]),
        1e-5,
    ))

    # biased and unbiased particle gradients coincide at a single particle
    m = mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0))
    data = mo.generate(m, 3, RngStream(7))
    phi = mo.proposal_init(m, 3)
    _, gb = ob.gradient_biased(ob.Objective("vmpf-bg", m, phi, 1), data, RngStream(5))
    _, gu = ob.gradient_unbiased(ob.Objective("vmpf-ug", m, phi, 1), data, RngStream(5))
    gap = max(float(np.max(np.abs(gb[k] - gu[k]))) for k in gb)
    checks.append(("n1-biased-vs-unbiased", gap, 1e-10))
    return checks


def _suite_collapse():
    m = mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0))
    data = mo.generate(m, 3, RngStream(7))
    phi = mo.proposal_init(m, 3)
    phi["beta"][:] = 0.0  # state-independent, so tmc draws the same points
    vals = [
        float(ob.objective_value(ob.Objective(kind, m, phi, 1), data, RngStream(42)).data)
        for kind in ob.KINDS
    ]
    spread = max(vals) - min(vals)
    return [("n1-all-kinds", spread, 1e-12)]


def _suite_bounds():
    m = mo.lgssm_make(2, 2, 0.42, "sparse", RngStream(1))
    data = mo.generate(m, 4, RngStream(9))
    kal = mo.kalman_loglik(m, data.ys)
    phi = mo.proposal_init(m, 4)
    checks = []
    for kind in ("iwvi", "vsmc", "vmpf-bg"):
        mean, se = ob.bound_estimate(ob.Objective(kind, m, phi, 4), data, 200, RngStream(3))
        # signed slack: positive means the bound is below kalman + 3 SE
        checks.append((f"bound-{kind}", kal + 3.0 * se - mean, 0.0))
    return [(name, val, limit, val >= limit) for name, val, limit in checks]


_SUITES = {
    "unbiasedness": _suite_unbiasedness,
    "identity": _suite_identity,
    "gradients": _suite_gradients,
    "collapse": _suite_collapse,
    "bounds": _suite_bounds,
}


def cmd_verify(suite: str, out: Path | None = None) -> int:
    names = list(_SUITES) if suite == "all" else [suite]
    for name in names:
        if name not in _SUITES:
            raise CliError(f"unknown suite {suite!r}; pick from {list(_SUITES)} or 'all'")
    failures = 0
    lines = []
    for name in names:
        for check in _SUITES[name]():
            if len(check) == 4:
                check_name, measured, limit, ok = check
            else:
                check_name, measured, limit = check
                ok = measured <= limit
            status = "PASS" if ok else "FAIL"
            failures += 0 if ok else 1
            print(f"{status} {name}/{check_name} measured={measured:.3e} limit={limit:.3e}")
            lines.append(f"{name},{check_name},{measured!r},{limit!r},{status}")
    if out is not None:
        _write_text(out / f"verify_{suite}.csv", "suite,check,measured,limit,status\n" + "\n".join(lines) + "\n")
    print(f"{'FAIL' if failures else 'PASS'}: {failures} failing check(s)" if failures else "PASS: all checks green")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# bench


def _time_step_ms(run_fn, t_max: int, seed: int) -> float:
    t0 = time.perf_counter()
    run_fn(seed)
    return (time.perf_counter() - t0) * 1e3 / t_max


def _fit_quadratic(ns, ms):
    # weighted by 1/time: timing noise scales with magnitude, and the raw
    # fit would let the largest-N residuals swamp the small-N regime
    design = np.stack([np.square(ns), ns, np.ones_like(ns)], axis=1).astype(np.float64)
    ms = np.asarray(ms, dtype=np.float64)
    coef, *_ = np.linalg.lstsq(design / ms[:, None], np.ones_like(ms), rcond=None)
    return coef  # (quadratic, linear, constant)


def cmd_bench(model_kind: str, n_list, reps: int, t_max: int, out: Path | None = None) -> dict:
    rng = RngStream(0)
    if model_kind == "lgssm":
        model = mo.lgssm_make(5, 5, 0.42, "dense", rng.split(1))
    elif model_kind == "sv":
        model = mo.sv_make(5, "diagonal", rng.split(1))
    elif model_kind == "dmm":
        model = mo.dmm_make(5, 20, 16, rng.split(1))
    else:
        raise CliError(f"unknown bench model {model_kind!r}")
    data = mo.generate(model, t_max, rng.split(2))
    params = mo.proposal_init(model, t_max, rng.split(3))

    runners = {
        "smc": lambda n, seed: fl.run_smc(model, params, data, fl.FilterConfig(n, seed=seed)),
        "mpf": lambda n, seed: fl.run_mpf(model, params, data, fl.FilterConfig(n, seed=seed)),
    }
    # interleave every (algo, n) cell within each rep so slow machine drift
    # lands evenly across cells instead of bending the fitted curve
    cells = [(algo, n) for n in n_list for algo in runners]
    for algo, n in cells:
        runners[algo](n, 0)  # warm caches and the allocator
    samples = {cell: [] for cell in cells}
    for rep in range(1, reps + 1):
        for algo, n in cells:
            samples[(algo, n)].append(_time_step_ms(lambda s: runners[algo](n, s), t_max, rep))

    rows = []
    timings = {"smc": [], "mpf": []}
    for n in n_list:
        smc_ms = float(np.median(samples[("smc", n)]))
        mpf_ms = float(np.median(samples[("mpf", n)]))
        timings["smc"].append(smc_ms)
        timings["mpf"].append(mpf_ms)
        rows.append((n, smc_ms, mpf_ms))
        print(f"n={n:5d}  smc {smc_ms:9.4f} ms/step  mpf {mpf_ms:9.4f} ms/step  ratio {mpf_ms / smc_ms:6.2f}")

    ns = np.asarray(n_list, dtype=np.float64)
    fits = {algo: _fit_quadratic(ns, ms) for algo, ms in timings.items()}
    n_top = ns[-1]
    report = {"model": model_kind, "n": list(n_list), "fits": {}, "timings": timings}
    for algo, (quad, lin, const) in fits.items():
        share = abs(quad) * n_top * n_top / max(abs(lin) * n_top, 1e-300)
        crossover = lin / quad if quad > 0 else math.inf
        report["fits"][algo] = {
            "quadratic": float(quad),
            "linear": float(lin),
            "constant": float(const),
            "quad_share_at_top": float(share),
            "crossover_n": float(crossover),
        }
        print(f"{algo}: {quad:.3e}*N^2 + {lin:.3e}*N + {const:.3e}  "
              f"(N^2 share at N={int(n_top)}: {share:.2f}, crossover N ~ {crossover:.0f})")

    if out is not None:
        body = "\n".join(f"{model_kind},{n},{smc!r},{mpf!r}" for n, smc, mpf in rows)
        _write_text(out / f"bench_{model_kind}.csv", "model,n,smc_ms,mpf_ms\n" + body + "\n")
        fit_rows = "\n".join(
            f"{model_kind},{algo},{f['quadratic']!r},{f['linear']!r},{f['constant']!r},{f['crossover_n']!r}"
            for algo, f in report["fits"].items()
        )
        _write_text(out / f"bench_fit_{model_kind}.csv", "model,algo,quadratic,linear,constant,crossover_n\n" + fit_rows + "\n")
    return report


# ---------------------------------------------------------------------------
# plotting (minimal hand-rolled SVG)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _svg_plot(path: Path, series, title: str, xlabel: str, ylabel: str,
              log_y: bool = False, hline: float | None = None, hline_label: str = ""):
    """series: list of (label, xs, ys).  Writes a standalone SVG."""
    width, height = 640, 420
    ml, mr, mt, mb = 72, 20, 42, 52
    plot_w, plot_h = width - ml - mr, height - mt - mb

    cleaned = []
    for label, xs, ys in series:
        pts = [(float(x), float(y)) for x, y in zip(xs, ys)
               if math.isfinite(x) and math.isfinite(y) and (not log_y or y > 0)]
        if pts:
            cleaned.append((label, pts))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="15">{title}</text>',
        f'<text x="{ml + plot_w / 2}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="18" y="{mt + plot_h / 2}" text-anchor="middle" '
        f'transform="rotate(-90 18 {mt + plot_h / 2})">{ylabel}</text>',
        f'<rect x="{ml}" y="{mt}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>',
    ]

    if cleaned:
        ally = [y for _, pts in cleaned for _, y in pts]
        if hline is not None and (not log_y or hline > 0):
            ally.append(hline)
        allx = [x for _, pts in cleaned for x, _ in pts]
        tr_y = (lambda y: math.log10(y)) if log_y else (lambda y: y)
        ylo, yhi = min(tr_y(y) for y in ally), max(tr_y(y) for y in ally)
        xlo, xhi = min(allx), max(allx)
        if xhi == xlo:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        if yhi == ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        pad = 0.05 * (yhi - ylo)
        ylo, yhi = ylo - pad, yhi + pad

        def sx(x):
            return ml + (x - xlo) / (xhi - xlo) * plot_w

        def sy(y):
            return mt + plot_h - (tr_y(y) - ylo) / (yhi - ylo) * plot_h

        for k in range(5):
            xv = xlo + k * (xhi - xlo) / 4
            yv = ylo + k * (yhi - ylo) / 4
            ylabel_v = 10.0 ** yv if log_y else yv
            parts.append(f'<line x1="{sx(xv):.1f}" y1="{mt + plot_h}" x2="{sx(xv):.1f}" '
                         f'y2="{mt + plot_h + 5}" stroke="black"/>')
            parts.append(f'<text x="{sx(xv):.1f}" y="{mt + plot_h + 18}" text-anchor="middle">{xv:.4g}</text>')
            yy = mt + plot_h - k * plot_h / 4
            parts.append(f'<line x1="{ml - 5}" y1="{yy:.1f}" x2="{ml}" y2="{yy:.1f}" stroke="black"/>')
            parts.append(f'<text x="{ml - 8}" y="{yy + 4:.1f}" text-anchor="end">{ylabel_v:.4g}</text>')

        if hline is not None and (not log_y or hline > 0):
            yy = sy(hline)
            parts.append(f'<line x1="{ml}" y1="{yy:.1f}" x2="{ml + plot_w}" y2="{yy:.1f}" '
                         f'stroke="black" stroke-dasharray="6 4"/>')
            if hline_label:
                parts.append(f'<text x="{ml + plot_w - 4}" y="{yy - 5:.1f}" text-anchor="end">{hline_label}</text>')

        for idx, (label, pts) in enumerate(cleaned):
            color = _PALETTE[idx % len(_PALETTE)]
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            parts.append(f'<text x="{ml + plot_w - 6}" y="{mt + 16 + 15 * idx}" '
                         f'text-anchor="end" fill="{color}">{label}</text>')
    else:
        parts.append(f'<text x="{width / 2}" y="{mt + plot_h / 2}" text-anchor="middle" '
                     f'fill="#888">no data</text>')

    parts.append("</svg>")
    _write_text(path, "\n".join(parts) + "\n")
    print(f"wrote {path}")


def _read_csv_columns(path: Path) -> dict:
    text = Path(path).read_text().strip()
    if not text:
        return {}
    lines = text.splitlines()
    names = lines[0].split(",")
    cols: dict = {name: [] for name in names}
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(names):
            raise CliError(f"{path}:{lineno}: expected {len(names)} cells, got {len(cells)}")
        for name, cell in zip(names, cells):
            cols[name].append(cell)
    return cols


def _floats(cells) -> np.ndarray:
    return np.asarray([float(c) if c else math.nan for c in cells])


def cmd_plot(kind: str, table: Path, out: Path, reference: float | None = None) -> int:
    cols = _read_csv_columns(table)
    stem = Path(table).stem
    path = out / f"plot_{kind}_{stem}.svg"
    if kind == "training":
        series = []
        if cols:
            series.append(("objective", _floats(cols["iter"]), _floats(cols["objective"])))
        _svg_plot(path, series, "bound vs iteration", "iteration", "objective",
                  hline=reference, hline_label="reference" if reference is not None else "")
    elif kind == "variance":
        series = []
        if cols:
            it, gv = _floats(cols["iter"]), _floats(cols["grad_var"])
            keep = np.isfinite(gv)
            series.append(("grad variance", it[keep], gv[keep]))
        _svg_plot(path, series, "gradient variance vs iteration", "iteration",
                  "per-coordinate variance", log_y=True)
    elif kind == "sweep":
        series = []
        hline = reference
        if cols:
            kinds = sorted(set(cols["objective"]))
            n = _floats(cols["n"])
            bound = _floats(cols["bound"])
            for name in kinds:
                keep = np.asarray([k == name for k in cols["objective"]])
                order = np.argsort(n[keep])
                series.append((name, n[keep][order], bound[keep][order]))
            kal = _floats(cols["kalman"])
            if hline is None and np.isfinite(kal).any():
                hline = float(np.nanmean(kal))
        _svg_plot(path, series, "final bound vs N", "particles N", "bound",
                  hline=hline, hline_label="kalman" if hline is not None else "")
    else:
        raise CliError(f"unknown plot kind {kind!r}; pick training, variance, or sweep")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _parse_n_list(raw: str):
    values = [int(v) for v in raw.replace(",", " ").split()]
    if not values or any(v < 1 for v in values):
        raise CliError(f"bad N list: {raw!r}")
    return values


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="particlevi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default="runs", help="output directory")

    add_common(sub.add_parser("generate", help="sample a synthetic dataset"))
    p_train = sub.add_parser("train", help="optimize the configured objective")
    add_common(p_train)
    p_train.add_argument("--warm-start", default=None, help="params .npz to initialize from")
    p_eval = sub.add_parser("evaluate", help="estimate the bound and append to results.csv")
    add_common(p_eval)
    p_eval.add_argument("--params", default=None, help="params .npz (default: this config's)")
    p_eval.add_argument("--samples", type=int, default=1000)
    p_eval.add_argument("--workers", type=int, default=None)

    p_verify = sub.add_parser("verify", help="run an oracle/property suite")
    p_verify.add_argument("suite", help=f"one of {list(_SUITES)} or 'all'")
    p_verify.add_argument("--out", default=None, help="also write a CSV report here")

    p_bench = sub.add_parser("bench", help="time SMC vs MPF across N")
    p_bench.add_argument("--model", default="dmm", help="lgssm, sv, or dmm")
    p_bench.add_argument("--n-list", default="8,16,32,64,128,256,512")
    p_bench.add_argument("--reps", type=int, default=5)
    p_bench.add_argument("--t", type=int, default=10)
    p_bench.add_argument("--out", default=None)

    p_plot = sub.add_parser("plot", help="render a CSV artifact to SVG")
    p_plot.add_argument("kind", help="training, variance, or sweep")
    p_plot.add_argument("--table", required=True, help="input CSV")
    p_plot.add_argument("--out", default="runs")
    p_plot.add_argument("--reference", type=float, default=None, help="horizontal reference line")

    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cmd_generate(load_config(args.config, args.seed), Path(args.out))
            return 0
        if args.command == "train":
            warm = Path(args.warm_start) if args.warm_start else None
            return cmd_train(load_config(args.config, args.seed), Path(args.out), warm)[1]
        if args.command == "evaluate":
            params = Path(args.params) if args.params else None
            return cmd_evaluate(load_config(args.config, args.seed), Path(args.out),
                                params, args.samples, args.workers)
        if args.command == "verify":
            return cmd_verify(args.suite, Path(args.out) if args.out else None)
        if args.command == "bench":
            cmd_bench(args.model, _parse_n_list(args.n_list), args.reps, args.t,
                      Path(args.out) if args.out else None)
            return 0
        if args.command == "plot":
            return cmd_plot(args.kind, Path(args.table), Path(args.out), args.reference)
        raise CliError(f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
