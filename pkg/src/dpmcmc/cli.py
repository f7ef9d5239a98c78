"""Command-line experiment runner.

Commands
--------
``run <config>``
    Run one or more chains and write, per chain, ``chain_<c>.csv`` (one row
    per kept iteration), ``marginals_<c>.csv`` (estimated p(X_n = k | y)),
    ``summary_<c>.txt`` and optionally ``paths_<c>.csv``.
``simulate <config>``
    Simulate data from the ``[truth]`` parameters and write ``data.txt``
    plus ``truth.csv`` (x_n and z_n).
``diagnose <chain.csv> --lags 1,5,10``
    Autocorrelations, acceptance rate and histograms of a chain file.

Configuration files are INI-style ``key = value`` sections; ``#`` starts a
comment and ``;`` separates matrix rows::

    [model]
    name = example1            # example1 | example2 | example3 | toy
    prior_var_mu0 = 10         # remaining keys go to the model constructor

    [theta]                    # initial value (defaults: the built-in values)
    phi = 0.1
    trans_matrix = 0.99 0.01; 0.99 0.01
    marginalized = false

    [truth]                    # parameters used by ``simulate`` (same keys)

    [priors]
    phi = normal 0 10 -1 1     # normal mean var [low high]
    sigma2 = invgamma 0.1 0.1
    dirichlet = 1 1; 1 1

    [proposal]                 # PMMH only
    phi = rw 0.05              # rw std | logrw std | logmix w:std w:std ... | grid v v ...
    P_X = logmix 0.9:0.05 0.1:1
    blocks = phi | sigma2 P_X

    [sampler]
    kind = pg                  # pmmh | pg | pg-no-backward | gerlach-gibbs
    N = 20
    iterations = 1000
    burn_in = 100
    thin = 1
    seed = 1
    chains = 1
    update_theta = true
    save_paths = false
    lags = 1, 5, 10

    [data]
    file = series.txt          # one value per line, relative to the config
    outlier_threshold = 8      # robust z-score; omit to keep every row
    outlier_window = 11        # running-median window of the robust z
    # or: simulate = 1000      # simulate this many points from [truth]

Seeding: ``SeedSequence(seed).spawn(chains + 1)``; child 0 drives data
simulation and child ``c + 1`` drives chain ``c``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .models import BUILTIN, ETA_NAMES
from .model import ModelSpec, Theta, simulate
from .samplers import (
    TRANSITIONS,
    ChainState,
    Flat,
    GaussianRW,
    GridMove,
    InverseGamma,
    LogMixtureRW,
    LogRW,
    Normal,
    PriorSpec,
    ProposalSpec,
    gerlach_gibbs_sweep,
    conjugate_update_theta,
    pg_init,
    pg_step,
    pmmh_init,
    pmmh_step,
)
from .kalman import ffbs_continuous

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Series",
    "load_config",
    "ingest_series",
    "autocorrelation",
    "diagnostics",
    "run_experiment",
    "simulate_data",
    "relabel_by_variance",
    "main",
]

SAMPLERS = ("pmmh", "pg", "pg-no-backward", "gerlach-gibbs")

#: Written in place of an autocorrelation that is not defined.
UNDEFINED = "undefined"


class ConfigError(ValueError):
    """Malformed configuration or data file; the message carries the line number."""


# -- configuration -----------------------------------------------------------------


def _line_index(text: str) -> Dict[tuple, int]:
    """(section, key) -> 1-based line number, for error messages."""
    index, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = i
        elif section and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            index[(section, key)] = i
    return index


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run."""

    model: ModelSpec
    theta: Theta
    truth: Theta
    priors: PriorSpec
    proposal: Optional[ProposalSpec]
    sampler: str = "pg"
    N: int = 20
    iterations: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    chains: int = 1
    update_theta: bool = True
    save_paths: bool = False
    lags: Sequence[int] = (1, 5, 10)
    data_file: Optional[Path] = None
    outlier_threshold: Optional[float] = None
    outlier_window: int = 11
    simulate_T: Optional[int] = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; choose from {', '.join(SAMPLERS)}")
        if not self.iterations > self.burn_in >= 0:
            raise ConfigError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")
        if self.sampler != "pmmh" and self.N < 2:
            raise ConfigError("particle Gibbs needs N >= 2")
        if self.N < 1:
            raise ConfigError("N must be positive")
        if self.sampler == "pmmh" and self.proposal is None:
            raise ConfigError("pmmh needs a [proposal] section")
        if self.data_file is not None and self.simulate_T is not None:
            raise ConfigError("[data] takes one of 'file' or 'simulate', not both")

    @property
    def kept(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, index, source: str):
        self.p, self.index, self.source = parser, index, source

    def where(self, section, key=None) -> str:
        line = self.index.get((section, key), self.index.get((section, None)))
        return f"{self.source}, line {line}" if line else self.source

    def fail(self, section, key, msg) -> ConfigError:
        return ConfigError(f"{self.where(section, key)}: [{section}] {key}: {msg}")

    def get(self, section, key, conv, default=None):
        if not self.p.has_option(section, key):
            return default
        raw = self.p.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise self.fail(section, key, f"cannot parse {raw!r} ({exc})") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _floats(s: str) -> List[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def _matrix(s: str) -> np.ndarray:
    rows = [_floats(r) for r in s.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("rows separated by ';' must have equal lengths")
    return np.array(rows)


def _number_or_list(s: str):
    vals = _floats(s)
    if not vals:
        raise ValueError("empty value")
    return vals[0] if len(vals) == 1 else vals


def _lags(s: str) -> List[int]:
    lags = [int(v) for v in s.replace(",", " ").split()]
    if not lags or any(k < 1 for k in lags):
        raise ValueError("lags must be positive integers")
    return lags


def _prior(s: str):
    kind, *args = s.split()
    vals = [float(a) for a in args]
    kind = kind.lower()
    if kind == "normal" and len(vals) in (2, 4):
        return Normal(*vals)
    if kind in ("invgamma", "inverse-gamma") and len(vals) == 2:
        return InverseGamma(*vals)
    if kind == "flat" and len(vals) in (0, 2):
        return Flat(*vals)
    raise ValueError("expected 'normal mean var [low high]', 'invgamma shape scale' or 'flat [low high]'")


def _move(s: str):
    kind, *args = s.split()
    kind = kind.lower()
    if kind == "rw" and len(args) == 1:
        return GaussianRW(float(args[0]))
    if kind == "logrw" and len(args) == 1:
        return LogRW(float(args[0]))
    if kind == "logmix" and args:
        pairs = [tuple(float(v) for v in a.split(":")) for a in args]
        if any(len(p) != 2 for p in pairs):
            raise ValueError("logmix components are weight:std pairs")
        return LogMixtureRW(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))
    if kind == "grid" and args:
        return GridMove(tuple(float(a) for a in args))
    raise ValueError("expected 'rw std', 'logrw std', 'logmix w:std ...' or 'grid v ...'")


def _theta_from(r: _Reader, section: str, base: Theta) -> Theta:
    if not r.p.has_section(section):
        return base
    params = dict(base.params)
    P, alpha, marg = base.trans_matrix, base.dirichlet_alpha, base.marginalized
    for key in r.p.options(section):
        if key == "trans_matrix":
            P = r.get(section, key, _matrix)
        elif key == "dirichlet_alpha":
            alpha = r.get(section, key, _matrix)
        elif key == "marginalized":
            marg = r.get(section, key, _bool)
        elif key in params:
            params[key] = r.get(section, key, float)
        else:
            raise r.fail(section, key, f"unknown parameter; expected one of {sorted(params)}")
    try:
        if marg:
            if alpha is None:
                alpha = np.ones((len(base.trans_matrix),) * 2) if base.trans_matrix is not None else None
            return Theta(params, dirichlet_alpha=alpha, marginalized=True)
        return Theta(params, trans_matrix=P, dirichlet_alpha=alpha)
    except ValueError as exc:
        raise ConfigError(f"{r.where(section)}: [{section}] {exc}") from None


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    """Parse a configuration file; ``seed`` overrides the configured seed."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    r = _Reader(parser, _line_index(text), str(path))

    if not parser.has_option("model", "name"):
        raise ConfigError(f"{path}: [model] section needs a 'name'")
    name = parser.get("model", "name").strip()
    if name not in BUILTIN:
        raise r.fail("model", "name", f"unknown model {name!r}; choose from {', '.join(BUILTIN)}")
    make_model, make_theta, make_priors = BUILTIN[name]
    kwargs = {k: r.get("model", k, _number_or_list) for k in parser.options("model") if k != "name"}
    try:
        model = make_model(**kwargs)
    except TypeError as exc:
        raise r.fail("model", next(iter(kwargs), "name"), str(exc)) from None

    theta = _theta_from(r, "theta", make_theta())
    truth = _theta_from(r, "truth", make_theta())

    priors = make_priors()
    if parser.has_section("priors"):
        params = dict(priors.params)
        dirichlet = priors.dirichlet
        for key in parser.options("priors"):
            if key == "dirichlet":
                dirichlet = r.get("priors", key, _matrix)
            elif key in theta.params:
                params[key] = r.get("priors", key, _prior)
            else:
                raise r.fail("priors", key, "unknown parameter")
        priors = PriorSpec(params, dirichlet=dirichlet, constraint=priors.constraint)

    proposal = None
    if parser.has_section("proposal"):
        moves, blocks = {}, None
        for key in parser.options("proposal"):
            if key == "blocks":
                blocks = [b.split() for b in parser.get("proposal", key).split("|") if b.strip()]
            else:
                name_ = TRANSITIONS if key.lower() == TRANSITIONS.lower() else key
                if name_ != TRANSITIONS and name_ not in theta.params:
                    raise r.fail("proposal", key, "unknown parameter")
                moves[name_] = r.get("proposal", key, _move)
        if blocks is not None:
            blocks = [[TRANSITIONS if b.lower() == TRANSITIONS.lower() else b for b in blk] for blk in blocks]
        try:
            proposal = ProposalSpec(moves, blocks)
        except ValueError as exc:
            raise r.fail("proposal", "blocks", str(exc)) from None

    s = "sampler"
    data_file = r.get("data", "file", str)
    fields = dict(
        sampler=r.get(s, "kind", str.strip, "pg"),
        N=r.get(s, "n", int, 20),
        iterations=r.get(s, "iterations", int, 1000),
        burn_in=r.get(s, "burn_in", int, 0),
        thin=r.get(s, "thin", int, 1),
        seed=seed if seed is not None else r.get(s, "seed", int, 0),
        chains=r.get(s, "chains", int, 1),
        update_theta=r.get(s, "update_theta", _bool, True),
        save_paths=r.get(s, "save_paths", _bool, False),
        lags=r.get(s, "lags", _lags, [1, 5, 10]),
        data_file=None if data_file is None else (path.parent / data_file.strip()),
        outlier_threshold=r.get("data", "outlier_threshold", float),
        outlier_window=r.get("data", "outlier_window", int, 11),
        simulate_T=r.get("data", "simulate", int),
    )
    try:
        return ExperimentConfig(model=model, theta=theta, truth=truth, priors=priors, proposal=proposal,
                                base_dir=path.parent, **fields)
    except ConfigError as exc:
        raise ConfigError(f"{r.where(s)}: [{s}] {exc}") from None


# -- data ----------------------------------------------------------------------------


class Series(NamedTuple):
    values: np.ndarray
    removed: int


def ingest_series(path, outlier_threshold: Optional[float] = None, window: int = 11) -> Series:
    """Read one observation per line (first CSV field); drop robust-z outliers.

    With r the deviation of each value from the running median over
    ``window`` points, a row is dropped when |r - median(r)| / (1.4826
    MAD(r)) exceeds the threshold (1.2533 mean|r - median(r)| when the MAD
    is zero).  ``window=1`` uses the global median
    instead of a running one.  Blank lines and ``#`` comments are skipped; a single
    non-numeric first line is treated as a header.
    """
    values = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            tok = s.split(",")[0].strip()
            try:
                values.append(float(tok))
            except ValueError:
                if i == 1 and not values:
                    continue
                raise ConfigError(f"{path}, line {i}: not a number: {tok!r}") from None
    y = np.array(values, dtype=float)
    if y.size == 0:
        raise ConfigError(f"{path}: no observations")
    if not np.all(np.isfinite(y)):
        raise ConfigError(f"{path}: non-finite observation at line {int(np.flatnonzero(~np.isfinite(y))[0]) + 1}")
    if outlier_threshold is None or math.isinf(outlier_threshold):
        return Series(y, 0)
    r = y - median_filter(y, size=window, mode="nearest") if window > 1 else y
    med = np.median(r)
    dev = np.abs(r - med)
    scale = 1.4826 * np.median(dev)
    if scale == 0:
        # more than half the residuals are tied (e.g. a monotone series); use the mean deviation
        scale = 1.2533 * dev.mean()
    if scale == 0:
        return Series(y, 0)
    keep = np.abs(r - med) / scale <= outlier_threshold
    return Series(y[keep], int((~keep).sum()))


def simulate_data(cfg: ExperimentConfig, T: Optional[int] = None):
    """Simulate (x, z, y) from the truth parameters; T defaults to ``cfg.simulate_T``."""
    T = cfg.simulate_T if T is None else T
    if T is None or T < 1:
        raise ConfigError("simulation needs a positive length ([data] simulate or --length)")
    data_seed = np.random.SeedSequence(cfg.seed).spawn(cfg.chains + 1)[0]
    return simulate(cfg.model, cfg.truth, T, np.random.default_rng(data_seed))


def _load_data(cfg: ExperimentConfig) -> Series:
    if cfg.data_file is not None:
        return ingest_series(cfg.data_file, cfg.outlier_threshold, cfg.outlier_window)
    if cfg.simulate_T is None:
        raise ConfigError("[data] needs 'file' or 'simulate'")
    return Series(simulate_data(cfg).observations[:, 0], 0)


# -- diagnostics ---------------------------------------------------------------------


def autocorrelation(x, lags: Sequence[int]) -> np.ndarray:
    """Lag-k autocorrelations as the correlation of (x_t, x_{t+k}); NaN where undefined.

    Undefined means fewer than two pairs or a constant lagged segment.
    """
    x = np.asarray(x, dtype=float)
    out = np.full(len(lags), np.nan)
    for i, k in enumerate(lags):
        if x.size - k < 2:
            continue
        a, b = x[:-k] - x[:-k].mean(), x[k:] - x[k:].mean()
        den = math.sqrt(float(a @ a) * float(b @ b))
        if den > 0:
            out[i] = float(a @ b) / den
    return out


def _read_chain(chain_csv) -> Dict[str, np.ndarray]:
    with open(chain_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{chain_csv}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise ConfigError(f"{chain_csv}: chain has no rows")
    cols = {}
    for j, name in enumerate(header):
        try:
            cols[name] = np.array([float(r[j]) for r in body])
        except (ValueError, IndexError):
            bad = next(i for i, r in enumerate(body, 2) if len(r) <= j or not _isfloat(r[j]))
            raise ConfigError(f"{chain_csv}, line {bad}: bad value in column {name!r}") from None
    return cols


def _isfloat(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _fmt(v: float) -> str:
    return UNDEFINED if not np.isfinite(v) else f"{v:.6g}"


def diagnostics(chain_csv, lags: Sequence[int] = (1, 5, 10), bins: int = 20, out=None) -> str:
    """Summary of a chain CSV; writes it to ``out`` when given and returns the text.

    Per parameter column: mean, sd, autocorrelation at each lag (or the
    ``undefined`` sentinel) and histogram counts.  Acceptance is read from
    the ``accept_*`` columns.
    """
    cols = _read_chain(chain_csv)
    lines = [f"rows = {len(next(iter(cols.values())))}"]
    acc = [c for c in cols if c.startswith("accept_")]
    if acc:
        flags = np.column_stack([cols[c] for c in acc])
        lines.append(f"acceptance_rate = {flags.mean():.6g}")
        for c in acc:
            lines.append(f"acceptance_rate.{c[len('accept_'):]} = {cols[c].mean():.6g}")
    else:
        lines.append("acceptance_rate = n/a")
    lines.append("")
    lines.append("[autocorrelation]")
    params = [c for c in cols if c != "iteration" and not c.startswith("accept_")]
    for c in params:
        ac = autocorrelation(cols[c], lags)
        lines.append(f"{c}: mean={cols[c].mean():.6g} sd={cols[c].std():.6g} "
                     + " ".join(f"lag{k}={_fmt(v)}" for k, v in zip(lags, ac)))
    lines.append("")
    lines.append("[histogram]")
    for c in params:
        counts, edges = np.histogram(cols[c], bins=bins)
        lines.append(f"{c}: edges={' '.join(f'{e:.6g}' for e in edges)}")
        lines.append(f"{c}: counts={' '.join(str(int(n)) for n in counts)}")
    text = "\n".join(lines) + "\n"
    if out is not None:
        Path(out).write_text(text)
    return text


# -- running -------------------------------------------------------------------------


def _columns(cfg: ExperimentConfig, theta: Theta) -> List[str]:
    cols = ["iteration"] + list(theta.params)
    K = cfg.model.num_states
    if not theta.marginalized and theta.trans_matrix is not None:
        cols += [f"P_{i}_{j}" for i in range(K) for j in range(K)]
    if cfg.sampler == "pmmh":
        cols.append("log_evidence")
        cols += [f"accept_{b}" for b in range(len(cfg.proposal.blocks))]
    return cols


def _row(cfg: ExperimentConfig, state: ChainState) -> List[float]:
    th = state.theta
    row = [state.iteration] + list(th.params.values())
    if not th.marginalized and th.trans_matrix is not None:
        row += list(np.asarray(th.trans_matrix).reshape(-1))
    if cfg.sampler == "pmmh":
        row.append(state.log_evidence)
        row += [int(a) for a in state.accepted]
    return row


def relabel_by_variance(theta: Theta, path: np.ndarray, names: Sequence[str] = ETA_NAMES):
    """Permute state labels so the variances ``names`` increase with the label.

    Returns the relabelled (theta, path).  Used after sampling for models
    whose state labels are not identified.
    """
    v = np.array([theta[n] for n in names])
    order = np.argsort(v, kind="stable")
    if np.all(order == np.arange(order.size)):
        return theta, path
    new_label = np.empty_like(order)
    new_label[order] = np.arange(order.size)
    params = dict(theta.params)
    for i, n in enumerate(names):
        params[n] = float(v[order[i]])
    P = None if theta.trans_matrix is None else np.asarray(theta.trans_matrix)[np.ix_(order, order)]
    W = None if theta.trans_weights is None else np.asarray(theta.trans_weights)[np.ix_(order, order)]
    A = None if theta.dirichlet_alpha is None else np.asarray(theta.dirichlet_alpha)[np.ix_(order, order)]
    if theta.marginalized:
        new = Theta(params, dirichlet_alpha=A, marginalized=True)
    else:
        new = Theta(params, trans_matrix=None if W is not None else P, trans_weights=W, dirichlet_alpha=A)
    return new, new_label[np.asarray(path)]


def _chain(cfg: ExperimentConfig, y: np.ndarray, seed, log=None):
    """Generator of (iteration, ChainState) for one chain."""
    rng = np.random.default_rng(seed)
    model, priors, N = cfg.model, cfg.priors, cfg.N
    if cfg.sampler == "pmmh":
        state = pmmh_init(model, cfg.theta, y, N, rng)
        for _ in range(cfg.iterations):
            state = pmmh_step(state, model, priors, cfg.proposal, y, N, rng)
            yield state
        return
    state = pg_init(model, cfg.theta, y, N, rng)
    tab = None if cfg.update_theta else model.tables(cfg.theta, y.shape[0])
    for i in range(cfg.iterations):
        if cfg.sampler == "gerlach-gibbs":
            theta, z = state.theta, state.z
            if cfg.update_theta:
                if model.conjugate_needs_z:
                    z = ffbs_continuous(model, theta, state.path, y, rng)
                theta = conjugate_update_theta(model, priors, state.path, z, y, rng, theta=theta)
            path = gerlach_gibbs_sweep(state.path, model, theta, y, rng, tables=tab)
            state = ChainState(theta=theta, path=path, z=None, iteration=i + 1)
        else:
            state = pg_step(state, model, priors, y, N, rng, use_backward=cfg.sampler == "pg",
                            update_theta=cfg.update_theta, tables=tab)
        yield state


def run_experiment(config_path, out_dir=None, seed: Optional[int] = None, log=print) -> List[Path]:
    """Run every chain of a configuration; returns the written files."""
    cfg = load_config(config_path, seed=seed)
    out = Path(out_dir) if out_dir is not None else cfg.base_dir / "output"
    out.mkdir(parents=True, exist_ok=True)
    series = _load_data(cfg)
    y = series.values
    if log:
        log(f"{cfg.model.name}: T={y.size}, removed {series.removed} outliers, sampler={cfg.sampler}, N={cfg.N}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains + 1)[1:]
    relabel = cfg.model.name == "example3"
    K, T = cfg.model.num_states, y.size
    written = []
    for c, s in enumerate(seeds):
        t0 = time.perf_counter()
        counts = np.zeros((T, K))
        chain_path, marg_path = out / f"chain_{c}.csv", out / f"marginals_{c}.csv"
        paths_fh = open(out / f"paths_{c}.csv", "w", newline="") if cfg.save_paths else None
        with open(chain_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = None
            for it, state in enumerate(_chain(cfg, y, s)):
                if it < cfg.burn_in or (it - cfg.burn_in) % cfg.thin:
                    continue
                theta, path = state.theta, state.path
                if relabel:
                    theta, path = relabel_by_variance(theta, path)
                    state = ChainState(theta=theta, path=path, log_evidence=state.log_evidence,
                                       iteration=state.iteration, accepted=state.accepted)
                if header is None:
                    header = _columns(cfg, theta)
                    w.writerow(header)
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in _row(cfg, state)])
                counts[np.arange(T), path] += 1
                if paths_fh is not None:
                    paths_fh.write(",".join(map(str, path)) + "\n")
        if paths_fh is not None:
            paths_fh.close()
            written.append(out / f"paths_{c}.csv")
        elapsed = time.perf_counter() - t0
        with open(marg_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n"] + [f"p_state{k}" for k in range(K)])
            for n in range(T):
                w.writerow([n + 1] + [repr(float(v)) for v in counts[n] / cfg.kept])
        summary = out / f"summary_{c}.txt"
        head = (f"model = {cfg.model.name}\nsampler = {cfg.sampler}\nN = {cfg.N}\nT = {T}\n"
                f"outliers_removed = {series.removed}\niterations = {cfg.iterations}\nburn_in = {cfg.burn_in}\n"
                f"thin = {cfg.thin}\nseed = {cfg.seed}\nchain = {c}\nruntime_seconds = {elapsed:.3f}\n")
        summary.write_text(head + diagnostics(chain_path, cfg.lags))
        written += [chain_path, marg_path, summary]
        if log:
            log(f"chain {c}: {cfg.kept} rows in {elapsed:.1f} s -> {chain_path}")
    return written


# -- entry point ---------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmcmc", description="Discrete particle MCMC for switching state-space models.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the chains of a configuration")
    r.add_argument("config")
    s = sub.add_parser("simulate", help="simulate data from the [truth] parameters")
    s.add_argument("config")
    s.add_argument("--length", type=int, help="override [data] simulate")
    for q in (r, s):
        q.add_argument("--seed", type=int, help="override the configured seed")
        q.add_argument("--out-dir", help="output directory (default: <config dir>/output)")
    d = sub.add_parser("diagnose", help="summarise a chain CSV")
    d.add_argument("chain")
    d.add_argument("--lags", type=_lags, default=[1, 5, 10], help="comma-separated lags (default 1,5,10)")
    d.add_argument("--out", help="write the summary here instead of stdout")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            run_experiment(args.config, out_dir=args.out_dir, seed=args.seed)
        elif args.command == "simulate":
            cfg = load_config(args.config, seed=args.seed)
            traj = simulate_data(cfg, args.length)
            out = Path(args.out_dir) if args.out_dir else cfg.base_dir / "output"
            out.mkdir(parents=True, exist_ok=True)
            np.savetxt(out / "data.txt", traj.observations[:, 0], fmt="%.17g")
            z = traj.continuous
            with open(out / "truth.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["n", "x"] + [f"z{j}" for j in range(z.shape[1])])
                for n in range(traj.T):
                    w.writerow([n + 1, int(traj.discrete[n])] + [repr(float(v)) for v in z[n + 1]])
            print(f"wrote {traj.T} observations to {out / 'data.txt'}")
        else:
            text = diagnostics(args.chain, args.lags, out=args.out)
            if args.out is None:
                sys.stdout.write(text)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
