"""INI run configurations and the systems they describe.

A config has a ``[system]`` section selecting one of the supported kinds,
an optional ``[run]`` section (seed, threads, format), a ``[params]``
section choosing parameter values, and one section per subcommand.  Map
definitions use the restricted grammar of :mod:`blenderlab.expr`.

Example::

    [system]
    kind = affine
    k = 2
    box = 0:0.2
    slope0 = 0.4
    offset0 = -0.5 + p
    slope1 = 0.4
    offset1 = 0.5

``kind = fiber`` takes ``map0, map1, ...`` with one expression per fiber
coordinate separated by ``;``, plus ``fiber_dim``, ``param_dim``, ``box``
and ``address_depth``.  ``kind = induced-jets`` wraps any other kind given
as ``base`` with jet order ``jet_order``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

import numpy as np

from .affine_ifs import AffineIfsFamily, build_section4_example
from .errors import ConfigError, LabError
from .expr import parse
from .taylor import MIXED_FUNCS
from .skewprod import FiberSystem, Section3Blender, build_section3_blender, from_affine, select
from .symbolic import Alphabet

KINDS = ("section4", "section3", "affine", "fiber", "induced-jets")

DEFAULTS = {
    "run": {"seed": "0", "threads": "1", "format": "csv"},
    "params": {"values": "", "grid": "0", "random": "0"},
    "dimension": {"tol": "1e-9", "depths": ""},
    "pressure": {"s_min": "0", "s_max": "2", "s_count": "21", "depths": ""},
    "scan": {
        "cover_depths": "6, 8, 10, 12",
        "n_atoms": "100000",
        "n_eval": "200",
        "radii": "3e-2, 1e-2, 3e-3, 1e-3",
        "gibbs_depth": "4",
        "positive_fraction_of_x": "0.05",
        "n_params": "64",
    },
    "transversality": {
        "n_pairs": "50",
        "radii": "1e-2, 1e-3, 1e-4",
        "sampler": "auto",
        "count": "0",
        "coding_depth": "0",
        "last_letters": "",
    },
    "density-integral": {
        "p0": "",
        "delta": "0",
        "radii": "1e-1, 1e-2, 1e-3, 1e-4",
        "pair_samples": "100000",
        "p_per_pair": "32",
        "gibbs_depth": "4",
    },
    "jets": {"jet_orders": "1, 2", "n_samples": "1000"},
    "blender-demo": {"occupancy_depths": "1, 5, 10", "occupancy_grid": "256", "cover_depths": "1, 2, 4, 6, 8"},
}

SYSTEM_DEFAULTS = {
    "section4": {"n": "4", "c": "0.21"},
    "section3": {"n": "2", "d": "1", "s": "0"},
    "affine": {"box": "", "domain": "-1:1", "margin": "0.05", "name": "affine"},
    "fiber": {"fiber_dim": "1", "param_dim": "1", "box": "0:0", "address_depth": "1", "domain_margin": "0.05", "name": "fiber"},
    "induced-jets": {"base": "section4", "jet_order": "1"},
}


def _floats(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.replace(";", ",").split(",")]
    except ValueError as exc:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from exc


def _ints(text: str) -> list:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _box(text: str) -> np.ndarray:
    """``lo:hi, lo:hi`` per parameter."""
    rows = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            lo, hi = (float(v) for v in part.split(":"))
        except ValueError as exc:
            raise ConfigError(f"box entries look like lo:hi, got {part!r}") from exc
        if hi < lo:
            raise ConfigError(f"empty box interval {part!r}")
        rows.append([lo, hi])
    if not rows:
        raise ConfigError("box is empty")
    return np.array(rows)


@dataclass
class RunConfig:
    """Resolved configuration: every section with defaults expanded."""

    sections: dict

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        if not cp.has_section("system"):
            raise ConfigError("config needs a [system] section")
        user = {s: dict(cp[s]) for s in cp.sections()}
        kind = user["system"].get("kind", "").strip()
        if kind not in KINDS:
            raise ConfigError(f"system kind must be one of {', '.join(KINDS)}; got {kind!r}")
        sections = {name: dict(vals) for name, vals in DEFAULTS.items()}
        system = dict(SYSTEM_DEFAULTS[kind])
        if kind == "induced-jets":
            base = user["system"].get("base", "section4")
            if base not in KINDS or base == "induced-jets":
                raise ConfigError(f"induced-jets base must be another kind, got {base!r}")
            system.update(SYSTEM_DEFAULTS[base])
        system.update(user.pop("system"))
        sections["system"] = system
        for name, vals in user.items():
            if name not in sections:
                raise ConfigError(f"unknown section [{name}]")
            unknown = set(vals) - set(sections[name])
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
            sections[name].update(vals)
        return cls(sections)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key].strip()

    def getint(self, section, key) -> int:
        try:
            return int(self.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer") from exc

    def getfloat(self, section, key) -> float:
        try:
            return float(self.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number") from exc

    def floats(self, section, key) -> list:
        return _floats(self.get(section, key))

    def ints(self, section, key) -> list:
        return _ints(self.get(section, key))

    def set(self, section: str, key: str, value):
        self.sections[section][key] = str(value)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in sorted(self.sections):
            cp[name] = {k: self.sections[name][k] for k in sorted(self.sections[name])}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def seed(self) -> int:
        seed = self.getint("run", "seed")
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return seed

    @property
    def threads(self) -> int:
        t = self.getint("run", "threads")
        if t < 1:
            raise ConfigError("threads must be at least 1")
        return t


# systems -----------------------------------------------------------------------


def _letter_exprs(sec: dict, prefix: str, k: int) -> list:
    out = []
    for a in range(k):
        key = f"{prefix}{a}"
        if key not in sec:
            raise ConfigError(f"missing {key} for letter {a}")
        out.append(sec[key])
    return out


def _slope_bounds(builder, k: int, box: np.ndarray, margin: float, n: int = 33) -> tuple:
    """Bounds on ``|slope|`` from a grid over the inflated box, padded by a relative 1e-9."""
    w = box[:, 1] - box[:, 0]
    axes = [np.linspace(lo - margin * wi, hi + margin * wi, n if wi > 0 else 1) for (lo, hi), wi in zip(box, w)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.shape[0])
    mags = np.concatenate([np.abs(np.broadcast_to(builder(grid, a)[0], grid.shape[:1])) for a in range(k)])
    lo, hi = float(mags.min()), float(mags.max())
    return lo * (1 - 1e-9), min(hi * (1 + 1e-9), (1 + hi) / 2)


def _affine_family(sec: dict) -> AffineIfsFamily:
    k = int(sec.get("k", "0"))
    if k < 2:
        raise ConfigError("affine systems need k >= 2")
    slopes = [parse(t) for t in _letter_exprs(sec, "slope", k)]
    offsets = [parse(t) for t in _letter_exprs(sec, "offset", k)]
    uses_p = max(max(e.max_index("p") for e in slopes + offsets), 0)
    box = _box(sec["box"]) if sec.get("box", "").strip() else np.zeros((max(uses_p, 1), 2))
    d = box.shape[0]
    if uses_p > d:
        raise ConfigError(f"expressions use p{uses_p} but the box has {d} parameters")
    lo, hi = _box(sec["domain"])[0]

    def env(p):
        return {f"p{i + 1}": p[..., i] for i in range(d)}

    def builder(p, a):
        e = env(np.asarray(p, dtype=float))
        return slopes[a].evaluate(e), offsets[a].evaluate(e)

    margin = float(sec["margin"])
    return AffineIfsFamily(
        Alphabet(k),
        builder,
        box,
        _slope_bounds(builder, k, box, margin),
        margin=margin,
        domain=(lo, hi),
        name=sec["name"],
        meta={"expressions": {"slopes": [str(e) for e in slopes], "offsets": [str(e) for e in offsets]}},
    )


def _fiber_system(sec: dict) -> FiberSystem:
    k = int(sec.get("k", "0"))
    if k < 2:
        raise ConfigError("fiber systems need k >= 2")
    N, d = int(sec["fiber_dim"]), int(sec["param_dim"])
    D = int(sec["address_depth"])
    comps = []
    for text in _letter_exprs(sec, "map", k):
        parts = [parse(t) for t in text.split(";")]
        if len(parts) != N:
            raise ConfigError(f"each map needs {N} component expressions separated by ';'")
        for e in parts:
            if e.max_index("x") > N or e.max_index("p") > d or e.max_index("a") + 1 > D:
                raise ConfigError(f"expression {e} uses variables outside x1..x{N}, p1..p{d}, a0..a{D - 1}")
        comps.append(parts)

    def formula(p_cols, addr, x_cols):
        env = {f"p{i + 1}": p_cols[i] for i in range(d)}
        env.update({f"x{i + 1}": x_cols[i] for i in range(N)})
        addr = np.asarray(addr)
        for j in range(addr.shape[-1]):
            env[f"a{j}"] = addr[..., j].astype(float)
        out = []
        for i in range(N):
            vals = [comps[a][i].evaluate(env, MIXED_FUNCS) for a in range(k)]
            out.append(select(addr[..., 0], vals))
        return out

    return FiberSystem.from_formula(
        formula,
        Alphabet(k),
        N,
        d,
        address_depth=D,
        domain_margin=float(sec["domain_margin"]),
        parameter_box=_box(sec["box"]),
        name=sec["name"],
    )


def build_system(cfg: RunConfig, kind: str | None = None):
    """The system object for ``[system]``: an affine family, a fiber system or a blender."""
    sec = cfg.sections["system"]
    kind = kind or sec["kind"]
    try:
        if kind == "section4":
            return build_section4_example(int(sec["n"]), float(sec["c"]))
        if kind == "section3":
            return build_section3_blender(int(sec["n"]), int(sec["d"]), int(sec["s"]))
        if kind == "affine":
            return _affine_family(sec)
        if kind == "fiber":
            return _fiber_system(sec)
        if kind == "induced-jets":
            from .jets import induced_jet_system

            base = as_fiber(build_system(cfg, sec["base"]))
            return induced_jet_system(base, int(sec["jet_order"]))
    except LabError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [system] entry: {exc}") from exc
    raise ConfigError(f"unknown system kind {kind!r}")


def as_fiber(system) -> FiberSystem:
    if isinstance(system, Section3Blender):
        return system.fiber
    if isinstance(system, AffineIfsFamily):
        return from_affine(system)
    return system


def as_dynamics(system):
    """The object the thermodynamic and measure tools act on."""
    return system.fiber if isinstance(system, Section3Blender) else system


def parameter_values(cfg: RunConfig, system, default: str = "center") -> np.ndarray:
    """Parameters selected by ``[params]``: explicit ``values``, a ``grid`` or seeded ``random`` draws."""
    from .measure_lab import sample_parameters

    box = system.parameter_box
    d = box.shape[0]
    text = cfg.get("params", "values")
    if text:
        rows = []
        for part in text.split(";"):
            vals = _floats(part)
            if len(vals) != d:
                raise ConfigError(f"parameter {part!r} does not have {d} components")
            rows.append(vals)
        return np.array(rows)
    grid, rand = cfg.getint("params", "grid"), cfg.getint("params", "random")
    if grid and rand:
        raise ConfigError("choose one of [params] grid and random")
    if grid:
        if d == 1:
            return sample_parameters(system, grid, cfg.seed, "grid")
        axes = [np.linspace(lo, hi, grid) for lo, hi in box]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    if rand:
        return sample_parameters(system, rand, cfg.seed)
    if default == "random":
        return sample_parameters(system, cfg.getint("scan", "n_params"), cfg.seed)
    return box.mean(axis=1)[None, :]

