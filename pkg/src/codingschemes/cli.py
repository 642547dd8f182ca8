"""Experiment driver: ``codingschemes [run] <stage> [options]``.

Stages: gen-task, theory-linear, theory-sigmoidal, theory-relu, gp, sample,
analyze, compare.  Artifacts go to ``<root>/<name>/<stage>/`` together with a
``manifest.json``; ``root`` is ``out`` unless the ``CODINGSCHEMES_OUT``
environment variable or ``--out`` says otherwise.  A stage whose manifest
exists is skipped unless ``--force`` is given.

Configuration file grammar
--------------------------
An INI file (Python ``configparser`` syntax: ``[section]`` headers,
``key = value`` lines, ``;`` or ``#`` comments).  Lists are comma
separated; an empty value means "use the default".  Sections and keys::

    [experiment]  name, seed
    [task]        kind (toy | dataset), P, N0, m, ratios, assignment
                  (fixed-ratio | iid), y_plus, y_minus, path, format (idx | csv),
                  classes, labels_path, test_path, test_labels_path, P_test,
                  norm_target, project_dim
    [arch]        nonlinearity (linear | erf-sigmoid | relu; alias sigmoidal),
                  L, N, sigma_a2, sigma_l2, readout_scaling (non-lazy | lazy)
    [theory]      T, codes, hypotheses, outliers, bulk_mode, expectation
    [sampler]     T, steps, thin, chains, anneal_stages, anneal_steps,
                  T_start, safety, exact_null
    [derived]     alpha, alpha0   (written for reference; checked on read)

``codes`` is one code set such as ``110, 011, 101, 111``; ``hypotheses``
lists several sets separated by ``;`` and the lowest-energy accepted one is
kept.  Without either, the sigmoidal stage takes the codes found by a
previous ``analyze`` stage.

Flags override the file: ``--toy P=200 N0=220 ratios=0.5,0.25,0.25 L=2``,
``--dataset PATH classes=0,1,2 P=100``, ``--arch sigmoidal L=1 N=100`` and
the generic ``--set section.key=value``.

Exit codes: 0 success, 1 invalid configuration, 2 numerical
non-convergence, 3 I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, gp_baseline, linear_theory, relu_theory, sampler, sigmoidal_theory, tasks
from .tasks import ValidationError

logger = logging.getLogger(__name__)

ENV_OUT = "CODINGSCHEMES_OUT"
STAGES = ("gen-task", "theory-linear", "theory-sigmoidal", "theory-relu", "gp",
          "sample", "analyze", "compare")
EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGED, EXIT_IO = 0, 1, 2, 3
ALIASES = {"sigmoidal": "erf-sigmoid", "sigmoid": "erf-sigmoid", "erf": "erf-sigmoid"}


class NotConverged(RuntimeError):
    """A stage finished and wrote its artifacts but the solver did not converge."""


# --- configuration ------------------------------------------------------------------

@dataclass
class TaskSpec:
    kind: str = "toy"
    P: int = 100
    N0: Optional[int] = None
    m: Optional[int] = None
    ratios: list = field(default_factory=lambda: [0.5, 0.25, 0.25])
    assignment: str = "fixed-ratio"
    y_plus: float = 1.0
    y_minus: float = 0.0
    path: Optional[str] = None
    format: str = "idx"
    classes: list = field(default_factory=lambda: [0, 1, 2])
    labels_path: Optional[str] = None
    test_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    P_test: int = 1000
    norm_target: Optional[float] = None
    project_dim: Optional[int] = None


@dataclass
class ArchSpec:
    nonlinearity: str = "linear"
    L: int = 1
    N: int = 100
    sigma_a2: Optional[float] = None
    sigma_l2: Optional[list] = None
    readout_scaling: str = "non-lazy"


@dataclass
class TheorySpec:
    T: float = 1e-4
    codes: Optional[list] = None
    hypotheses: Optional[list] = None
    outliers: Optional[int] = None
    bulk_mode: str = "neglected"
    expectation: str = "quadrature"


@dataclass
class SamplerSpec:
    T: float = 1e-4
    steps: int = 20000
    thin: int = 250
    chains: int = 1
    anneal_stages: int = 12
    anneal_steps: int = 3000
    T_start: float = 0.1
    safety: float = 0.3
    exact_null: bool = True


SECTIONS = {"task": TaskSpec, "arch": ArchSpec, "theory": TheorySpec, "sampler": SamplerSpec}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    arch: ArchSpec = field(default_factory=ArchSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)

    # derived metadata
    @property
    def n_classes(self) -> int:
        if self.task.kind == "toy":
            return self.task.m or len(self.task.ratios)
        return len(self.task.classes)

    @property
    def input_dim(self) -> Optional[int]:
        if self.task.kind == "toy":
            return self.task.N0 or int(round(1.1 * self.task.P))
        return self.task.project_dim  # None until the file is read

    @property
    def alpha(self) -> float:
        return self.task.P / self.arch.N

    @property
    def alpha0(self) -> Optional[float]:
        n0 = self.input_dim
        return None if n0 is None else self.task.P / n0

    def to_dict(self) -> dict:
        out = {"name": self.name, "seed": self.seed}
        out.update({k: asdict(getattr(self, k)) for k in SECTIONS})
        out["derived"] = {"alpha": self.alpha, "alpha0": self.alpha0}
        return out

    # on-disk form
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["experiment"] = {"name": self.name, "seed": str(self.seed)}
        for sec in SECTIONS:
            spec = getattr(self, sec)
            cp[sec] = {f.name: _format_value(getattr(spec, f.name)) for f in fields(spec)}
        cp["derived"] = {"alpha": repr(self.alpha),
                         "alpha0": "" if self.alpha0 is None else repr(self.alpha0)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ValidationError(f"config syntax: {exc}") from exc
        cfg = cls()
        errors = []
        unknown = set(cp.sections()) - set(SECTIONS) - {"experiment", "derived"}
        errors += [f"unknown section [{s}]" for s in sorted(unknown)]
        if cp.has_section("experiment"):
            for key, raw in cp["experiment"].items():
                try:
                    cfg.set("experiment", key, raw)
                except ValidationError as exc:
                    errors.append(str(exc))
        for sec in SECTIONS:
            if cp.has_section(sec):
                for key, raw in cp[sec].items():
                    try:
                        cfg.set(sec, key, raw)
                    except ValidationError as exc:
                        errors.append(str(exc))
        if errors:
            raise ValidationError("; ".join(errors))
        if cp.has_section("derived"):
            cfg._check_derived(dict(cp["derived"]))
        return cfg

    def _check_derived(self, derived: dict):
        bad = []
        for key, val in (("alpha", self.alpha), ("alpha0", self.alpha0)):
            raw = derived.get(key, "").strip()
            if not raw:
                continue
            if val is None or not np.isclose(float(raw), val, rtol=1e-12):
                bad.append(f"derived.{key}={raw} disagrees with task/arch ({val})")
        if bad:
            raise ValidationError("; ".join(bad))

    # overrides
    def set(self, section: str, key: str, raw: str):
        if section == "experiment":
            if key == "name":
                self.name = raw.strip()
            elif key == "seed":
                self.seed = _parse("experiment.seed", raw, int)
            else:
                raise ValidationError(f"unknown key experiment.{key}")
            return
        if section not in SECTIONS:
            raise ValidationError(f"unknown section {section!r}")
        spec = getattr(self, section)
        names = {f.name: f for f in fields(spec)}
        if key not in names:
            raise ValidationError(f"unknown key {section}.{key}")
        setattr(spec, key, _coerce(f"{section}.{key}", raw, getattr(SECTIONS[section](), key),
                                   names[key].type))

    def set_pairs(self, pairs, sections=("task", "arch")):
        """Apply ``key=value`` tokens, looking the key up in ``sections`` in order."""
        for tok in pairs:
            if "=" not in tok:
                raise ValidationError(f"expected key=value, got {tok!r}")
            key, raw = tok.split("=", 1)
            key = key.strip()
            if "." in key:
                sec, key = key.split(".", 1)
                self.set(sec, key, raw)
                continue
            if key in ("seed", "name"):
                self.set("experiment", key, raw)
                continue
            for sec in sections:
                if key in {f.name for f in fields(SECTIONS[sec])}:
                    self.set(sec, key, raw)
                    break
            else:
                raise ValidationError(f"unknown key {key!r} (looked in {', '.join(sections)})")

    def validate(self):
        """Raise ValidationError listing every violated field."""
        t, a, th, s = self.task, self.arch, self.theory, self.sampler
        e = []
        if t.kind not in ("toy", "dataset"):
            e.append(f"task.kind must be toy or dataset, got {t.kind!r}")
        if t.P < 1:
            e.append("task.P must be positive")
        if t.kind == "toy":
            r = np.asarray(t.ratios, dtype=float)
            if r.size == 0 or np.any(r <= 0):
                e.append("task.ratios must be positive")
            elif abs(r.sum() - 1) > 1e-9:
                e.append(f"task.ratios must sum to 1 (sum {r.sum():g})")
            if t.m is not None and t.m != r.size:
                e.append(f"task.m={t.m} but {r.size} ratios given")
            if self.input_dim is not None and self.input_dim < t.P:
                e.append(f"task.N0={self.input_dim} must be >= task.P={t.P} for orthogonal inputs")
            if t.assignment not in ("fixed-ratio", "iid"):
                e.append(f"task.assignment must be fixed-ratio or iid, got {t.assignment!r}")
        else:
            if not t.path:
                e.append("task.path is required for dataset tasks")
            if t.format not in ("idx", "csv"):
                e.append(f"task.format must be idx or csv, got {t.format!r}")
            if not t.classes:
                e.append("task.classes must be nonempty")
            if t.P_test < 1:
                e.append("task.P_test must be positive")
        if t.norm_target is not None and t.norm_target <= 0:
            e.append("task.norm_target must be positive")
        if a.nonlinearity not in sampler.NONLINEARITIES:
            e.append(f"arch.nonlinearity must be one of {', '.join(sampler.NONLINEARITIES)}")
        if a.L < 1 or a.N < 1:
            e.append("arch.L and arch.N must be positive")
        if a.sigma_a2 is not None and a.sigma_a2 <= 0:
            e.append("arch.sigma_a2 must be positive")
        if a.sigma_l2 is not None and (len(a.sigma_l2) != a.L or min(a.sigma_l2) <= 0):
            e.append("arch.sigma_l2 needs L positive entries")
        if a.readout_scaling not in ("non-lazy", "lazy"):
            e.append("arch.readout_scaling must be non-lazy or lazy")
        if th.T < 0:
            e.append("theory.T must be nonnegative")
        if th.bulk_mode not in relu_theory.BULK_MODES:
            e.append(f"theory.bulk_mode must be one of {', '.join(relu_theory.BULK_MODES)}")
        if th.expectation not in ("quadrature", "delta"):
            e.append("theory.expectation must be quadrature or delta")
        if th.outliers is not None and th.outliers < 1:
            e.append("theory.outliers must be positive")
        m = self.n_classes
        for codes in ([th.codes] if th.codes else []) + list(th.hypotheses or []):
            for c in codes:
                if len(c) != m or set(c) - {"0", "1"}:
                    e.append(f"code {c!r} is not a {m}-bit pattern")
        if s.T <= 0 or s.T_start < s.T:
            e.append("sampler.T must be positive and sampler.T_start >= sampler.T")
        if s.steps < 0 or s.thin < 1 or s.chains < 1:
            e.append("sampler.steps >= 0, sampler.thin >= 1 and sampler.chains >= 1 required")
        if s.anneal_stages < 0 or s.anneal_steps < 0:
            e.append("sampler.anneal_stages and sampler.anneal_steps must be nonnegative")
        if not 0 < s.safety <= 1:
            e.append("sampler.safety must lie in (0, 1]")
        if e:
            raise ValidationError("invalid configuration: " + "; ".join(e))


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        if v and isinstance(v[0], list):
            return "; ".join(", ".join(map(str, c)) for c in v)
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return str(v)


def _parse(name, raw, kind):
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ValidationError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def _coerce(name: str, raw: str, default, annotation: str):
    raw = raw.strip()
    if raw == "" or raw.lower() == "none":
        if "Optional" in str(annotation):
            return None
        raise ValidationError(f"{name} may not be empty")
    ann = str(annotation)
    if name == "arch.nonlinearity":
        return ALIASES.get(raw, raw)
    if name == "theory.hypotheses":
        return [[c.strip() for c in grp.split(",") if c.strip()] for grp in raw.split(";")
                if grp.strip()]
    if "list" in ann:
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if name in ("task.classes",):
            return [_parse(name, x, int) for x in items]
        if name in ("theory.codes",):
            return items
        return [_parse(name, x, float) for x in items]
    if "bool" in ann:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{name}: expected a boolean, got {raw!r}")
    if "int" in ann:
        return _parse(name, raw, int)
    if "float" in ann:
        return _parse(name, raw, float)
    return raw


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_ini(text)


# --- task and architecture ------------------------------------------------------------

def build_task(cfg: ExperimentConfig) -> tuple:
    """(training Dataset, test Dataset or None), deterministic in the config."""
    t = cfg.task
    if t.kind == "toy":
        d = tasks.make_toy_task(t.P, cfg.input_dim, cfg.n_classes, t.ratios, t.assignment,
                                y_plus=t.y_plus, y_minus=t.y_minus, seed=cfg.seed)
        return d, None
    for p in (t.path, t.test_path):
        if p and not Path(p).exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    d = tasks.load_dataset(t.path, t.format, t.classes, t.P, y_plus=t.y_plus,
                           y_minus=t.y_minus, labels_path=t.labels_path)
    dt = None
    if t.test_path:
        dt = tasks.load_dataset(t.test_path, t.format, t.classes, t.P_test, y_plus=t.y_plus,
                                y_minus=t.y_minus, labels_path=t.test_labels_path)
    d = tasks.preprocess(d, t.norm_target)
    dt = None if dt is None else tasks.preprocess(dt, t.norm_target)
    if t.project_dim:
        d = tasks.random_project(d, t.project_dim, seed=cfg.seed, norm_target=t.norm_target)
        if dt is not None:
            dt = tasks.random_project(dt, t.project_dim, seed=cfg.seed,
                                      norm_target=t.norm_target)
    return d, dt


def build_arch(cfg: ExperimentConfig, d: tasks.Dataset) -> sampler.NetworkArch:
    a = cfg.arch
    kw = {"readout_scaling": a.readout_scaling}
    if a.sigma_a2 is not None:
        kw["sigma_a2"] = a.sigma_a2
    if a.sigma_l2 is not None:
        kw["sigma_l2"] = a.sigma_l2
    return sampler.NetworkArch.for_dataset(d, L=a.L, N=a.N, nonlinearity=a.nonlinearity, **kw)


# --- stage bookkeeping ------------------------------------------------------------------

def output_root(cli_value: Optional[str] = None) -> Path:
    return Path(cli_value or os.environ.get(ENV_OUT) or "out")


def _versions() -> dict:
    import scipy
    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:  # not installed
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "package": pkg}


class Stage:
    """Output directory and manifest of one pipeline stage."""

    def __init__(self, root: Path, cfg: ExperimentConfig, name: str):
        self.cfg = cfg
        self.name = name
        self.dir = root / cfg.name / name
        self.t0 = time.time()
        self.extra = {}

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def done(self) -> bool:
        return self.manifest_path.exists()

    def prepare(self, force: bool):
        if self.done() and not force:
            return False
        self.dir.mkdir(parents=True, exist_ok=True)
        if self.done():
            self.manifest_path.unlink()
        return True

    def finish(self, status: str, d: Optional[tasks.Dataset], results: dict):
        man = {"stage": self.name, "status": status, "config": self.cfg.to_dict(),
               "seed": self.cfg.seed, "dataset_digest": None if d is None else d.digest(),
               "derived": {"alpha": self.cfg.alpha,
                           "alpha0": None if d is None else d.P / d.N0},
               "versions": _versions(), "timing_s": round(time.time() - self.t0, 3),
               "results": results, **self.extra}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(man, indent=1, default=analysis._default))
        os.replace(tmp, self.manifest_path)
        (self.dir / "config.ini").write_text(self.cfg.to_ini())


def read_manifest(root: Path, cfg: ExperimentConfig, stage: str) -> dict:
    path = root / cfg.name / stage / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"stage {stage!r} has no artifacts at {path.parent}")
    return json.loads(path.read_text())


def _class_errors(pred: np.ndarray, Y: np.ndarray, variance=None) -> gp_baseline.ErrorDecomposition:
    bias = np.mean((Y - pred) ** 2, axis=0)
    var = np.zeros_like(bias) if variance is None else np.asarray(variance, dtype=float)
    return gp_baseline.ErrorDecomposition(total=bias + var, bias=bias, variance=var)


# --- stages -------------------------------------------------------------------------------

def stage_gen_task(cfg, st: Stage):
    d, dt = build_task(cfg)
    tasks.save_dataset(d, str(st.dir / "train.npz"))
    res = {"P": d.P, "N0": d.N0, "m": d.m, "class_fractions": d.class_fractions.tolist(),
           "alpha": cfg.alpha, "alpha0": d.P / d.N0}
    if dt is not None:
        tasks.save_dataset(dt, str(st.dir / "test.npz"))
        res["P_test"] = dt.P
    st.finish("ok", d, res)


def stage_theory_linear(cfg, st: Stage):
    d, dt = build_task(cfg)
    a = cfg.arch
    sol = linear_theory.solve_readout_covariance(d, L=a.L, sigma_a2=a.sigma_a2,
                                                 sigma_l2=a.sigma_l2)
    analysis.write_matrix_csv(st.dir / "U.csv", sol.U)
    Ks = linear_theory.training_kernels(sol)
    for l, K in enumerate(Ks, 1):
        analysis.write_matrix_csv(st.dir / f"kernel_train_L{l}.csv", K)
    res = sol.to_dict()
    if dt is not None:
        f = linear_theory.mean_predictor(sol, dt.X)
        var = np.array([np.diag(linear_theory.predictor_variance(sol, x, a.N)) for x in dt.X.T])
        err = _class_errors(f, dt.Y, var.mean(axis=0))
        analysis.write_matrix_csv(st.dir / "predictor_test.csv", f)
        analysis.write_errors_csv(st.dir / "errors.csv", {"theory": err})
        res["errors"] = err.to_dict()
    analysis.write_json(st.dir / "solution.json", res)
    st.finish("ok", d, res)


def _sigmoidal_hypotheses(cfg, root: Path) -> tuple:
    """(list of code sets, sample-based init or None)."""
    th = cfg.theory
    if th.hypotheses:
        return th.hypotheses, None
    if th.codes:
        return [th.codes], None
    man = read_manifest(root, cfg, "analyze")
    codes = [c for c, n in man["results"]["histogram"].items() if "1" in c and n > 0]
    if not codes:
        raise ValidationError("analyze stage found no nonempty codes; set theory.codes")
    return [sorted(codes)], man


def sample_means(chains, d: tasks.Dataset) -> dict:
    """Per-neuron posterior means over the second half of every chain."""
    arch = chains[0].arch
    states = [s for ch in chains for s in ch.states[max(1, len(ch.states) // 2):]]
    states = states or [ch.last for ch in chains]
    acts = [sampler.activations(s, arch, d.X)[-1] for s in states]
    return {"readouts": np.mean([s.A for s in states], axis=0),
            "preacts": np.mean([z for z, _ in acts], axis=0),
            "outputs": np.mean([sampler.network_output(s, arch, d.X) for s in states], axis=0),
            "last_acts": acts[-1][1]}


def stage_theory_sigmoidal(cfg, st: Stage, root: Path):
    d, dt = build_task(cfg)
    th = cfg.theory
    if cfg.arch.L != 1:
        raise tasks.UnsupportedConfiguration("the sigmoidal theory is implemented for L=1")
    hyps, from_samples = _sigmoidal_hypotheses(cfg, root)
    orth = np.allclose(d.input_kernel().K0, np.eye(d.P), atol=1e-8)
    if orth:
        solver = sigmoidal_theory.solve_orthogonal
        kw = {"expectation": th.expectation}
    else:
        solver, kw = sigmoidal_theory.solve_general, {}
        if from_samples is not None and th.T > 0:
            # start at the sampled network: the per-code averages of readouts and modes
            chains, _ = _load_chains(root, cfg)
            sm = sample_means(chains, d)
            ca = analysis.extract_codes(sm["last_acts"], d.labels, m=d.m)
            init, distinct = sigmoidal_theory.init_from_samples(
                d, sm["readouts"], sm["preacts"], sm["outputs"], ca.codes, th.T)
            hyps, kw = [distinct], {"init": init}
    if len(hyps) == 1:
        sol = solver(d, hyps[0], T=th.T, init_seed=cfg.seed, **kw)
        scan = []
    else:
        scan = sigmoidal_theory.scan_hypotheses(d, hyps, solver=solver, T=th.T, **kw)
        sol = scan[0].solution
    analysis.write_matrix_csv(st.dir / "atoms.csv", sol.atoms,
                              header=[f"class{r}" for r in range(d.m)])
    analysis.write_matrix_csv(st.dir / "kernel_train.csv", sigmoidal_theory.kernels(sol))
    res = sol.to_dict()
    res["scan"] = [{"codes": [str(c) for c in h.codes], "accepted": h.accepted,
                    "energy_t": h.solution.energy_t, "converged": h.solution.converged}
                   for h in scan]
    if dt is not None and sol.converged:
        f = sigmoidal_theory.predictor(sol, dt.X)
        err = _class_errors(f, dt.Y)
        analysis.write_matrix_csv(st.dir / "predictor_test.csv", f)
        analysis.write_errors_csv(st.dir / "errors.csv", {"theory": err})
        res["errors"] = err.to_dict()
    analysis.write_json(st.dir / "solution.json", res)
    st.finish("ok" if sol.converged else "not-converged", d, res)
    if not sol.converged:
        raise NotConverged(f"sigmoidal saddle point did not converge (residual {sol.residual:.2e})")


def stage_theory_relu(cfg, st: Stage):
    d, dt = build_task(cfg)
    th = cfg.theory
    if cfg.arch.L != 1:
        raise tasks.UnsupportedConfiguration("the ReLU theory is implemented for L=1")
    kw = {"T": th.T, "bulk_mode": th.bulk_mode, "init_seed": cfg.seed}
    if th.outliers is not None:
        sol = relu_theory.solve(d, th.outliers, **kw)
        tried = {th.outliers: sol}
    else:
        sol, tried = relu_theory.sweep_n(d, **kw)
        if sol is None:
            sol = min(tried.values(), key=lambda s: s.residual)
    analysis.write_matrix_csv(st.dir / "a_bar.csv", sol.a_bar)
    analysis.write_matrix_csv(st.dir / "z_bar.csv", sol.z_bar)
    analysis.write_matrix_csv(st.dir / "kernel_train.csv", relu_theory.kernel(sol))
    res = sol.to_dict()
    res["tried"] = {int(n): {"converged": s.converged, "residual": s.residual}
                    for n, s in tried.items()}
    if dt is not None and sol.converged:
        f = relu_theory.predictor(sol, dt.X)
        err = _class_errors(f, dt.Y)
        analysis.write_matrix_csv(st.dir / "predictor_test.csv", f)
        analysis.write_errors_csv(st.dir / "errors.csv", {"theory": err})
        res["errors"] = err.to_dict()
    analysis.write_json(st.dir / "solution.json", res)
    st.finish("ok" if sol.converged else "not-converged", d, res)
    if not sol.converged:
        raise NotConverged(f"ReLU saddle point did not converge (residual {sol.residual:.2e})")


def stage_gp(cfg, st: Stage):
    d, dt = build_task(cfg)
    a = cfg.arch
    k = gp_baseline.GPKernel(a.nonlinearity, a.L, a.sigma_l2)
    analysis.write_matrix_csv(st.dir / "kernel_train.csv", gp_baseline.gp_kernel(k, d.X))
    res = {"nonlinearity": a.nonlinearity, "L": a.L}
    if dt is not None:
        pred = gp_baseline.gp_predict(k, d, dt.X)
        err = gp_baseline.gp_generalization_error(k, d, dt.X, dt.Y)
        analysis.write_matrix_csv(st.dir / "predictor_test.csv", pred.mean)
        analysis.write_errors_csv(st.dir / "errors.csv", {"gp": err})
        res.update(errors=err.to_dict(), jitter=pred.jitter)
    st.finish("ok", d, res)


def _run_chain(args) -> dict:
    cfg_text, index, chain_dir = args
    cfg = ExperimentConfig.from_ini(cfg_text)
    d, _ = build_task(cfg)
    arch = build_arch(cfg, d)
    s = cfg.sampler
    seed = cfg.seed * 1000 + index
    state = sampler.init_from_prior(arch, seed)
    if s.anneal_stages:
        state, step, M = sampler.annealed_burn_in(state, d, arch, T=s.T, T_start=s.T_start,
                                                  stages=s.anneal_stages, steps=s.anneal_steps,
                                                  safety=s.safety, seed=seed)
    else:
        step, M = sampler.estimate_preconditioner(state, d, arch, s.T, safety=s.safety)
    chain = sampler.langevin_run(state, d, arch, T=s.T, step=step, steps=s.steps, thin=s.thin,
                                 seed=seed + 1, precond=M, checkpoint_dir=chain_dir,
                                 exact_null=s.exact_null)
    return {"chain": index, "dir": str(chain_dir), "checkpoints": len(chain.states),
            "final_loss": float(chain.loss_trace[-1]) if chain.loss_trace.size else None,
            "burn_in_step": sampler.detect_burn_in(chain.loss_trace)}


def stage_sample(cfg, st: Stage, jobs: int = 1):
    d, _ = build_task(cfg)
    build_arch(cfg, d)  # validate shapes early
    text = cfg.to_ini()
    work = [(text, c, st.dir / f"chain_{c}") for c in range(cfg.sampler.chains)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as ex:
            chains = list(ex.map(_run_chain, work))
    else:
        chains = [_run_chain(w) for w in work]
    st.finish("ok", d, {"chains": chains})


def _load_chains(root: Path, cfg) -> list:
    man = read_manifest(root, cfg, "sample")
    return [sampler.load_chain(c["dir"]) for c in man["results"]["chains"]], man


def _samples(chains) -> list:
    """Post-burn-in checkpoints of every chain (the initial state is dropped)."""
    return [s for ch in chains for s in ch.states[1:]] or [ch.last for ch in chains]


def stage_analyze(cfg, st: Stage, root: Path):
    d, dt = build_task(cfg)
    chains, _ = _load_chains(root, cfg)
    arch = chains[0].arch
    samples = _samples(chains)
    last = chains[0].last
    acts = sampler.activations(last, arch, d.X)[-1][1]
    ca = analysis.extract_codes(acts, d.labels, m=d.m)
    summary = analysis.classify_scheme(ca, acts, seed=cfg.seed)
    K = analysis.empirical_kernel([sampler.activations(s, arch, d.X)[-1][1] for s in samples])
    analysis.write_matrix_csv(st.dir / "readouts.csv", last.A,
                              header=[f"class{r}" for r in range(d.m)])
    analysis.write_matrix_csv(st.dir / "activations_train.csv", acts)
    analysis.write_matrix_csv(st.dir / "kernel_train.csv", K)
    analysis.write_histogram_csv(st.dir / "code_histogram.csv", ca.histogram())
    analysis.write_json(st.dir / "code_histogram.json", ca.histogram())
    res = {"histogram": ca.histogram(), "scheme": summary.to_dict(), "samples": len(samples)}
    if dt is not None:
        preds = np.array([sampler.network_output(s, arch, dt.X) for s in samples])
        if len(preds) >= 2:
            err = analysis.generalization_error(preds, dt.Y)
            analysis.write_errors_csv(st.dir / "errors.csv", {"sampler": err})
            res["errors"] = err.to_dict()
        analysis.write_matrix_csv(st.dir / "predictor_test.csv", preds.mean(axis=0))
    st.finish("ok", d, res)


THEORY_STAGE = {"linear": "theory-linear", "erf-sigmoid": "theory-sigmoidal",
                "relu": "theory-relu"}


def stage_compare(cfg, st: Stage, root: Path):
    d, _ = build_task(cfg)
    tname = THEORY_STAGE[cfg.arch.nonlinearity]
    tman = read_manifest(root, cfg, tname)
    sman = read_manifest(root, cfg, "sample")
    aman = read_manifest(root, cfg, "analyze")
    digests = {tname: tman["dataset_digest"], "sample": sman["dataset_digest"],
               "analyze": aman["dataset_digest"], "task": d.digest()}
    if len(set(digests.values())) != 1:
        raise ValidationError(f"dataset hash mismatch between artifacts: {digests}")
    tdir, adir = root / cfg.name / tname, root / cfg.name / "analyze"
    kt_name = "kernel_train_L%d.csv" % cfg.arch.L if tname == "theory-linear" else "kernel_train.csv"
    Kt = np.loadtxt(tdir / kt_name, delimiter=",")
    Ke = np.loadtxt(adir / "kernel_train.csv", delimiter=",")
    analysis.write_matrix_csv(st.dir / "kernel_theory.csv", Kt)
    analysis.write_matrix_csv(st.dir / "kernel_sampler.csv", Ke)
    res = {"kernel_distance": analysis.compare_kernels(Kt, Ke)}
    if tname == "theory-sigmoidal" and (tdir / "atoms.csv").exists():
        atoms = np.loadtxt(tdir / "atoms.csv", delimiter=",", skiprows=1, ndmin=2)
        readouts = np.loadtxt(adir / "readouts.csv", delimiter=",", skiprows=1, ndmin=2)
        cm = analysis.match_clusters(readouts, atoms)
        table = np.column_stack([atoms, cm.centers, cm.rel_errors, cm.fractions,
                                 [b["weight"] for b in tman["results"]["branches"]]])
        hdr = ([f"atom{r}" for r in range(d.m)] + [f"center{r}" for r in range(d.m)]
               + ["rel_error", "fraction", "weight"])
        analysis.write_matrix_csv(st.dir / "atoms_vs_clusters.csv", table, header=hdr)
        res.update(max_center_error=cm.max_rel_error, fractions=cm.fractions.tolist())
    if tname == "theory-relu":
        readouts = np.loadtxt(adir / "readouts.csv", delimiter=",", skiprows=1, ndmin=2)
        n2 = np.sum(readouts ** 2, axis=1)
        res["sampled_outliers"] = int(np.sum(n2 > 10 * np.median(n2)))
        res["theory_outliers"] = int(tman["results"]["n"])
    errors = {}
    for src, man in (("sampler", aman), ("theory", tman)):
        if "errors" in man["results"]:
            errors[src] = man["results"]["errors"]
    gp_path = root / cfg.name / "gp" / "manifest.json"
    if gp_path.exists():
        gman = json.loads(gp_path.read_text())
        if gman["dataset_digest"] != d.digest():
            raise ValidationError("dataset hash mismatch between gp and task")
        if "errors" in gman["results"]:
            errors["gp"] = gman["results"]["errors"]
    if errors:
        analysis.write_errors_csv(st.dir / "errors.csv", {
            k: gp_baseline.ErrorDecomposition(*(np.asarray(v[c]) for c in ("total", "bias", "variance")))
            for k, v in errors.items()})
        res["errors"] = errors
    analysis.write_json(st.dir / "report.json", res)
    st.finish("ok", d, res)


# --- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="codingschemes", description=__doc__.split("\n")[0])
    ap.add_argument("stage", choices=STAGES)
    ap.add_argument("--config", help="INI config file (grammar in the module docstring)")
    ap.add_argument("--toy", nargs="*", metavar="KEY=VALUE", help="toy task, optional overrides")
    ap.add_argument("--dataset", nargs="+", metavar="PATH [KEY=VALUE]",
                    help="dataset file followed by optional task overrides")
    ap.add_argument("--arch", nargs="+", metavar="NONLINEARITY [KEY=VALUE]")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--name")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./out)")
    ap.add_argument("--force", action="store_true", help="recompute and overwrite artifacts")
    ap.add_argument("--jobs", type=int, default=1, help="parallel chains in the sample stage")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.toy is not None:
        cfg.task.kind = "toy"
        cfg.set_pairs(args.toy, ("task", "arch"))
    if args.dataset:
        cfg.task.kind = "dataset"
        cfg.task.path = args.dataset[0]
        cfg.set_pairs(args.dataset[1:], ("task", "arch"))
    if args.arch:
        first, rest = args.arch[0], args.arch[1:]
        if "=" in first:
            rest = args.arch
        else:
            cfg.arch.nonlinearity = ALIASES.get(first, first)
        cfg.set_pairs(rest, ("arch", "task"))
    cfg.set_pairs(args.set, ())
    if args.name:
        cfg.name = args.name
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def run(cfg: ExperimentConfig, stage: str, root: Path, force: bool = False, jobs: int = 1) -> int:
    st = Stage(root, cfg, stage)
    if not st.prepare(force):
        logger.warning("stage %s already has artifacts in %s; use --force to recompute",
                       stage, st.dir)
        return EXIT_OK
    if stage == "gen-task":
        stage_gen_task(cfg, st)
    elif stage == "theory-linear":
        stage_theory_linear(cfg, st)
    elif stage == "theory-sigmoidal":
        stage_theory_sigmoidal(cfg, st, root)
    elif stage == "theory-relu":
        stage_theory_relu(cfg, st)
    elif stage == "gp":
        stage_gp(cfg, st)
    elif stage == "sample":
        stage_sample(cfg, st, jobs)
    elif stage == "analyze":
        stage_analyze(cfg, st, root)
    elif stage == "compare":
        stage_compare(cfg, st, root)
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "run":
        argv = argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return run(cfg, args.stage, output_root(args.out), args.force, args.jobs)
    except (FileNotFoundError, tasks.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, tasks.UnsupportedConfiguration, tasks.CountError,
            tasks.DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NotConverged, sampler.DivergenceError, linear_theory.NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
