"""Experiment configuration and on-disk formats.

Grid files hold a (F+1) x (G+1) table over truncated ``(f, g)`` states as
CSV, preceded by ``# key: value`` metadata lines. Cells that are not chain
states (``g > min(f, G)``, or ``g = 0`` with ``f > 0``) are left empty. Floats are written with ``repr`` (the
shortest string that round-trips), so parse and emit are exact inverses.

Tabular outputs are CSV with ``#`` metadata lines followed by a header row.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainParams
from .optimizer import EnergyPenalty, OptimConfig
from .pipeline import PipelineConfig

TOOL = "aoii-aloha"
OUTPUT_ENV = "AOII_OUTPUT_DIR"
GRID_KINDS = ("policy", "phi")


class FileFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based, 0 when not tied to a line."""

    def __init__(self, message, path=None, line=0):
        where = f"{path or '<input>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


def fmt(x) -> str:
    """Shortest round-tripping decimal form of a number."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------- grid files


@dataclass
class GridFile:
    """A policy or stationary-distribution table with its provenance header."""

    kind: str
    F: int
    G: int
    N: int
    p_t: float
    grid: np.ndarray  # (F+1, G+1), nan on invalid states
    meta: dict = field(default_factory=dict)  # extra header entries, strings

    def __post_init__(self):
        if self.kind not in GRID_KINDS:
            raise ValueError(f"kind must be one of {GRID_KINDS}, got {self.kind!r}")
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.shape != (self.F + 1, self.G + 1):
            raise ValueError(f"grid shape {self.grid.shape} does not match F={self.F}, G={self.G}")

    @property
    def params(self) -> ChainParams:
        return ChainParams(self.p_t, self.F, self.G, self.N)

    def valid_mask(self) -> np.ndarray:
        f = np.arange(self.F + 1)[:, None]
        g = np.arange(self.G + 1)[None, :]
        return _valid(f, g, self.G)

    def header(self) -> dict:
        head = {"kind": self.kind, "F": fmt(self.F), "G": fmt(self.G), "N": fmt(self.N), "p_t": fmt(self.p_t)}
        head.update({k: str(v) for k, v in self.meta.items() if k not in head})
        return head

    def dumps(self) -> str:
        out = [f"# {TOOL} grid"]
        out += [f"# {k}: {v}" for k, v in self.header().items()]
        out.append(",".join(["f"] + [f"g{g}" for g in range(self.G + 1)]))
        valid = self.valid_mask()
        for f in range(self.F + 1):
            cells = [fmt(self.grid[f, g]) if valid[f, g] else "" for g in range(self.G + 1)]
            out.append(",".join([str(f)] + cells))
        return "\n".join(out) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _valid(f, g, G):
    return ((g >= 1) & (g <= np.minimum(f, G))) | ((f == 0) & (g == 0))


def _meta_int(meta, key, path):
    try:
        return int(meta[key])
    except KeyError:
        raise FileFormatError(f"missing header entry '{key}'", path) from None
    except ValueError:
        raise FileFormatError(f"header entry '{key}' is not an integer: {meta[key]!r}", path) from None


def parse_grid(text: str, path=None) -> GridFile:
    """Inverse of :meth:`GridFile.dumps`; errors carry the offending line number."""
    meta = {}
    lines = text.splitlines()
    n = 0
    while n < len(lines) and lines[n].startswith("#"):
        body = lines[n][1:].strip()
        if ":" in body:
            k, v = body.split(":", 1)
            meta[k.strip()] = v.strip()
        n += 1
    kind = meta.pop("kind", None)
    if kind not in GRID_KINDS:
        raise FileFormatError(f"header 'kind' must be one of {GRID_KINDS}", path, 1)
    F, G, N = (_meta_int(meta, k, path) for k in ("F", "G", "N"))
    try:
        p_t = float(meta["p_t"])
    except (KeyError, ValueError):
        raise FileFormatError("missing or malformed header entry 'p_t'", path) from None
    for k in ("F", "G", "N", "p_t"):
        meta.pop(k, None)
    if n >= len(lines):
        raise FileFormatError("no column header row", path, n + 1)
    expected = ["f"] + [f"g{g}" for g in range(G + 1)]
    if lines[n].split(",") != expected:
        raise FileFormatError(f"column header does not match G={G}", path, n + 1)
    rows = lines[n + 1:]
    if len(rows) != F + 1:
        raise FileFormatError(f"expected {F + 1} grid rows, found {len(rows)}", path, n + 2 + min(len(rows), F + 1))
    grid = np.full((F + 1, G + 1), np.nan)
    for f, line in enumerate(rows):
        lineno = n + 2 + f
        cells = line.split(",")
        if len(cells) != G + 2:
            raise FileFormatError(f"expected {G + 2} fields, found {len(cells)}", path, lineno)
        if cells[0] != str(f):
            raise FileFormatError(f"expected row label {f}, found {cells[0]!r}", path, lineno)
        for g, cell in enumerate(cells[1:]):
            valid = bool(_valid(f, g, G))
            if not valid:
                if cell != "":
                    raise FileFormatError(f"({f},{g}) is not a state and must be empty", path, lineno)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise FileFormatError(f"state ({f},{g}): not a number: {cell!r}", path, lineno) from None
            if not math.isfinite(v):
                raise FileFormatError(f"state ({f},{g}): value must be finite", path, lineno)
            if kind == "policy" and not 0.0 <= v <= 1.0:
                raise FileFormatError(f"state ({f},{g}): probability {v} outside [0, 1]", path, lineno)
            grid[f, g] = v
    if kind == "policy" and grid[0, 0] != 0.0:
        raise FileFormatError("policy must not transmit in state (0,0)", path, n + 2)
    try:
        return GridFile(kind, F, G, N, p_t, grid, meta)
    except ValueError as e:
        raise FileFormatError(str(e), path) from None


def read_grid(path) -> GridFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise FileFormatError(f"cannot read: {e.strerror}", path) from None
    gf = parse_grid(text, path)
    try:
        gf.params
    except ValueError as e:
        raise FileFormatError(str(e), path) from None
    return gf



# ---------------------------------------------------------------- tables


def write_table(path, columns, rows, meta=None) -> Path:
    """CSV with ``# key: value`` provenance lines, then a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (int, float, np.integer, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())
    return path


def read_table(path):
    """``(meta, columns, rows)`` with rows as lists of strings."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]


# ---------------------------------------------------------------- config


def _floats(s):
    return tuple(float(v) for v in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(v) for v in s.replace(",", " ").split())


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# (section, key) -> parser; the key names double as --key=value flags
SCHEMA = {
    ("grid", "N"): _ints,
    ("grid", "p_t"): _floats,
    ("chain", "F"): int,
    ("chain", "G"): int,
    ("optim", "K"): _floats,
    ("optim", "eps"): _floats,
    ("optim", "rho_a"): float,
    ("optim", "alpha_pi"): float,
    ("optim", "alpha_phi"): float,
    ("optim", "max_steps"): int,
    ("optim", "grad_mode"): str,
    ("optim", "seed"): int,
    ("optim", "q_floor"): float,
    ("pipeline", "tau_method"): str,
    ("pipeline", "tau_factors"): _floats,
    ("pipeline", "phase1_steps"): int,
    ("pipeline", "eval_horizon"): int,
    ("pipeline", "eval_seeds"): _ints,
    ("pipeline", "checkpoints"): int,
    ("pipeline", "select"): _bool,
    ("sim", "horizon"): int,
    ("sim", "seeds"): _ints,
    ("flags", "ell_includes_sync_state"): _bool,
    ("flags", "energy_penalty"): _bool,
    ("flags", "energy_K"): float,
    ("flags", "energy_cap"): float,
    ("output", "dir"): str,
    ("run", "workers"): int,
}


@dataclass(frozen=True)
class ExperimentConfig:
    N: tuple = (25,)
    p_t: tuple = (0.05,)
    F: int = 100
    G: int = 50
    optim: OptimConfig = OptimConfig()
    pipeline: PipelineConfig = PipelineConfig()
    horizon: int = 100_000
    seeds: tuple = (0,)
    output_dir: str = ""
    workers: int = 1

    def __post_init__(self):
        if not self.N or not self.p_t:
            raise ValueError("grid needs at least one N and one p_t")
        if not self.seeds:
            raise ValueError("sim.seeds must not be empty")
        if self.horizon < 1:
            raise ValueError("sim.horizon must be >= 1")
        if self.workers < 1:
            raise ValueError("run.workers must be >= 1")
        for cell in self.cells():
            ChainParams(cell[1], self.F, self.G, cell[0])

    def cells(self):
        return [(N, p) for N in self.N for p in self.p_t]

    def params(self, N, p_t) -> ChainParams:
        return ChainParams(p_t, self.F, self.G, N)

    @property
    def include_sync_state(self) -> bool:
        return self.optim.include_sync_state

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "aoii_out")

    def to_dict(self) -> dict:
        """Everything that affects results (the output location does not)."""
        opt = asdict(self.optim)
        return {
            "grid": {"N": list(self.N), "p_t": list(self.p_t)},
            "chain": {"F": self.F, "G": self.G},
            "optim": {k: (list(v) if isinstance(v, tuple) else v) for k, v in opt.items()},
            "pipeline": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.pipeline).items()},
            "sim": {"horizon": self.horizon, "seeds": list(self.seeds)},
        }

    def config_hash(self) -> str:
        return digest(self.to_dict())

    def provenance(self) -> dict:
        return {"tool": f"{TOOL} {__version__}", "config_hash": self.config_hash()}


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _resolve_key(key: str):
    if "." in key:
        section, name = key.split(".", 1)
        if (section, name) in SCHEMA:
            return section, name
        raise KeyError(key)
    hits = [sk for sk in SCHEMA if sk[1] == key]
    if len(hits) != 1:
        raise KeyError(key)
    return hits[0]


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read an INI-style config (optional) and apply ``key=value`` overrides.

    Unknown sections or keys and unparsable values raise ``ValueError``.
    """
    values = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as e:
            raise ValueError(f"{path}: cannot read config: {e.strerror}") from None
        except configparser.Error as e:
            raise ValueError(f"{path}: {e}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                if (section, key) not in SCHEMA:
                    raise ValueError(f"{path}: unknown config key [{section}] {key}")
                values[(section, key)] = raw
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        try:
            values[_resolve_key(key.strip())] = raw
        except KeyError:
            raise ValueError(f"unknown or ambiguous config key {key!r}") from None
    parsed = {}
    for sk, raw in values.items():
        try:
            parsed[sk] = SCHEMA[sk](raw.strip())
        except ValueError as e:
            raise ValueError(f"[{sk[0]}] {sk[1]} = {raw!r}: {e}") from None

    def take(section, names):
        return {n: parsed[(section, n)] for n in names if (section, n) in parsed}

    optim_names = [f.name for f in fields(OptimConfig) if (("optim", f.name) in SCHEMA)]
    opt_kw = take("optim", optim_names)
    flags = {k: v for (s, k), v in parsed.items() if s == "flags"}
    if "ell_includes_sync_state" in flags:
        opt_kw["include_sync_state"] = flags["ell_includes_sync_state"]
    if flags.get("energy_penalty", False):
        opt_kw["energy_penalty"] = EnergyPenalty(flags.get("energy_K", 1e8), flags.get("energy_cap", 0.5))
    pipe_names = [f.name for f in fields(PipelineConfig)]
    pipe_kw = take("pipeline", pipe_names)
    kw = {}
    for (s, k), name in {("grid", "N"): "N", ("grid", "p_t"): "p_t", ("chain", "F"): "F", ("chain", "G"): "G",
                         ("sim", "horizon"): "horizon", ("sim", "seeds"): "seeds", ("output", "dir"): "output_dir",
                         ("run", "workers"): "workers"}.items():
        if (s, k) in parsed:
            kw[name] = parsed[(s, k)]
    return ExperimentConfig(optim=OptimConfig(**opt_kw), pipeline=PipelineConfig(**pipe_kw), **kw)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    o, p = cfg.optim, cfg.pipeline

    def seq(v):
        return ", ".join(fmt(x) for x in v)

    lines = [
        "[grid]", f"N = {seq(cfg.N)}", f"p_t = {seq(cfg.p_t)}", "",
        "[chain]", f"F = {cfg.F}", f"G = {cfg.G}", "",
        "[optim]", f"K = {seq(o.K)}", f"eps = {seq(o.eps)}", f"rho_a = {fmt(o.rho_a)}",
        f"alpha_pi = {fmt(o.alpha_pi)}", f"alpha_phi = {fmt(o.alpha_phi)}", f"max_steps = {o.max_steps}",
        f"grad_mode = {o.grad_mode}", f"seed = {o.seed}", f"q_floor = {fmt(o.q_floor)}", "",
        "[pipeline]", f"tau_method = {p.tau_method}", f"tau_factors = {seq(p.tau_factors)}",
        f"phase1_steps = {p.phase1_steps}", f"eval_horizon = {p.eval_horizon}", f"eval_seeds = {seq(p.eval_seeds)}",
        f"checkpoints = {p.checkpoints}", f"select = {fmt(p.select)}", "",
        "[sim]", f"horizon = {cfg.horizon}", f"seeds = {seq(cfg.seeds)}", "",
        "[flags]", f"ell_includes_sync_state = {fmt(o.include_sync_state)}",
        f"energy_penalty = {fmt(o.energy_penalty is not None)}",
    ]
    if o.energy_penalty is not None:
        lines += [f"energy_K = {fmt(o.energy_penalty.K_e)}", f"energy_cap = {fmt(o.energy_penalty.load_cap)}"]
    lines += ["", "[run]", f"workers = {cfg.workers}", ""]
    if cfg.output_dir:
        lines += ["[output]", f"dir = {cfg.output_dir}", ""]
    return "\n".join(lines)
