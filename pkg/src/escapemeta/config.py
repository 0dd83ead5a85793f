"""Experiment configuration: a sectioned INI file with a validating parser.

Numeric fields accept small arithmetic expressions (``2^-6``, ``sqrt(2)-1``,
``10^-2.5``, ``(1+sqrt(5))/4``).  Lists are comma separated.  Errors carry
the file, line, section and key they refer to.

Example::

    [experiment]
    kind = escape
    name = doubling-fixed-point

    [map]
    family = doubling

    [holes]
    kind = symmetric
    z = 0
    circle = true

    [noise]
    kind = conditionC
    L = 8
    upsilon = 2

    [grid]
    N = 2^15

    [sweep]
    eps = 2^-6, 2^-7, 2^-8

    [acceptance]
    rel_error = <= 0.03
"""
from __future__ import annotations

import ast
import configparser
import hashlib
import io
import math
import operator
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

KINDS = ("escape", "qk", "metastable", "mc", "dump-operator")
FAMILIES = ("doubling", "metastable", "affine")
NOISE_KINDS = ("uniform", "conditionC", "deterministic")
HOLE_KINDS = ("symmetric", "right_sided")
OPS = {"<=": operator.le, "<": operator.lt, ">=": operator.ge, ">": operator.gt, "==": operator.eq, "!=": operator.ne, "~": None}


class ConfigError(ValueError):
    def __init__(self, msg, section=None, key=None, line=None, source=None):
        where = []
        if source:
            where.append(str(source) + (f":{line}" if line else ""))
        if section:
            where.append(f"[{section}]" + (f" {key}" if key else ""))
        super().__init__((" ".join(where) + ": " if where else "") + msg)
        self.section, self.key, self.line = section, key, line


_FUNCS = {"sqrt": math.sqrt, "log": math.log, "exp": math.exp}
_CONSTS = {"pi": math.pi, "e": math.e, "inf": math.inf}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}


def eval_number(text: str) -> float:
    """Evaluate a numeric expression; ``^`` means power.

    Integer literals stay exact so 64-bit seeds survive.
    """
    src = text.strip().replace("^", "**")
    if not src:
        raise ValueError("empty number")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse {text!r}") from exc

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            a, b = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Pow) and abs(b) > 1024:
                raise ValueError(f"exponent too large in {text!r}")
            return _BINOPS[type(node.op)](a, b)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
                and len(node.args) == 1 and not node.keywords:
            return _FUNCS[node.func.id](ev(node.args[0]))
        if isinstance(node, ast.Name) and node.id in _CONSTS:
            return _CONSTS[node.id]
        raise ValueError(f"unsupported expression {text!r}")

    return ev(tree)


def fmt(x) -> str:
    """Canonical text for a value: ``%.17g`` floats, lowercase booleans."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        return "%.17g" % x
    if isinstance(x, (tuple, list)):
        return ", ".join(fmt(v) for v in x)
    return str(x)


@dataclass(frozen=True)
class MapSpec:
    family: str = "doubling"
    c: float = 1.0
    omega: float = 0.0
    pieces: tuple = ()
    circle: bool = False
    expansion_bound: Optional[float] = None


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "deterministic"
    epsilon: Optional[float] = None
    L: int = 1
    upsilon: Optional[float] = None
    placement: str = "midpoint"


@dataclass(frozen=True)
class HoleSpec:
    kind: str = "symmetric"
    z: float = 0.0
    circle: bool = False


@dataclass(frozen=True)
class GridSpec:
    N: int = 4096
    allow_unaligned: bool = False


@dataclass(frozen=True)
class SweepSpec:
    eps: tuple = ()
    ly_steps: int = 50


@dataclass(frozen=True)
class QkSpec:
    eps: tuple = ()
    k_max: int = 10


@dataclass(frozen=True)
class McSpec:
    eps: tuple = ()
    n_traj: int = 1_000_000
    n_steps: int = 500
    seed: int = 0
    c: Optional[float] = None
    n_chains: int = 1000
    burn_in: int = 10_000
    bins: int = 4096


@dataclass(frozen=True)
class MetaSpec:
    c: tuple = ()
    eps: tuple = ()
    N: int = 2 ** 14
    refine_check: bool = True


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "out"
    formats: tuple = ("csv", "json", "dat")


@dataclass(frozen=True)
class Assertion:
    metric: str
    op: str
    value: object
    tol: float = 0.0

    def check(self, metrics: dict) -> tuple[bool, object]:
        if self.metric not in metrics:
            return False, None
        got = metrics[self.metric]
        try:
            if self.op == "~":
                return bool(abs(got - self.value) <= self.tol), got
            return bool(OPS[self.op](got, self.value)), got
        except TypeError:
            return False, got

    def text(self) -> str:
        if self.op == "~":
            return f"~ {self.value!r} +- {self.tol!r}"
        v = repr(self.value) if isinstance(self.value, float) else fmt(self.value)
        return f"{self.op} {v}"


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    name: str
    map: MapSpec = MapSpec()
    noise: NoiseSpec = NoiseSpec()
    holes: Optional[HoleSpec] = None
    grid: GridSpec = GridSpec()
    sweep: SweepSpec = SweepSpec()
    qk: Optional[QkSpec] = None
    mc: Optional[McSpec] = None
    metastable: Optional[MetaSpec] = None
    output: OutputSpec = OutputSpec()
    acceptance: tuple = ()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        mc = self.mc if self.mc is not None else McSpec()
        return replace(self, mc=replace(mc, seed=int(seed)))

    def with_output(self, directory: str) -> "ExperimentConfig":
        return replace(self, output=replace(self.output, directory=str(directory)))

    def serialize(self) -> str:
        return serialize(self)

    def sha256(self) -> str:
        """Digest of the canonical text; the output directory is not part of it."""
        return hashlib.sha256(serialize(self.with_output("")).encode()).hexdigest()


class _Reader:
    """Typed access to one parsed file, tracking line numbers for errors."""

    def __init__(self, text: str, source):
        self.source = source
        self.cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=str(source))
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], source=source) from exc
        self.lines = {}
        sect = None
        for i, raw in enumerate(text.splitlines(), 1):
            s = raw.strip()
            m = re.match(r"\[(.+)\]$", s)
            if m:
                sect = m.group(1).strip()
                self.lines[(sect, None)] = i
            elif sect and "=" in s and not s.startswith(("#", ";")):
                self.lines[(sect, s.split("=", 1)[0].strip())] = i
        self.used = set()

    def err(self, msg, section, key=None):
        return ConfigError(msg, section, key, self.lines.get((section, key)), self.source)

    def has(self, section):
        return self.cp.has_section(section)

    def raw(self, section, key, default=None, required=False):
        if self.cp.has_option(section, key):
            self.used.add((section, key))
            return self.cp.get(section, key).strip()
        if required:
            raise self.err("missing required key", section, key)
        return default

    def number(self, section, key, default=None, required=False, integer=False):
        s = self.raw(section, key, None, required)
        if s is None:
            return default
        try:
            v = eval_number(s)
        except (ValueError, ArithmeticError) as exc:
            raise self.err(str(exc), section, key) from exc
        if integer:
            if isinstance(v, int):
                return v
            if not math.isfinite(v) or float(v) != int(v):
                raise self.err(f"expected an integer, got {s!r}", section, key)
            return int(v)
        return float(v)

    def numbers(self, section, key, default=(), integer=False):
        s = self.raw(section, key)
        if s is None:
            return tuple(default)
        out = []
        for part in s.split(","):
            try:
                v = eval_number(part)
            except (ValueError, ArithmeticError) as exc:
                raise self.err(str(exc), section, key) from exc
            out.append(int(v) if integer else float(v))
        return tuple(out)

    def boolean(self, section, key, default=False):
        s = self.raw(section, key)
        if s is None:
            return default
        low = s.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise self.err(f"expected a boolean, got {s!r}", section, key)

    def choice(self, section, key, options, default=None, required=False):
        s = self.raw(section, key, default, required)
        if s is not None and s not in options:
            raise self.err(f"must be one of {', '.join(options)}; got {s!r}", section, key)
        return s


def _decreasing(r: _Reader, section, key, vals):
    if any(v <= 0 for v in vals):
        raise r.err("eps values must be positive", section, key)
    if any(b >= a for a, b in zip(vals, vals[1:])):
        raise r.err("eps list must be strictly decreasing", section, key)


def _parse_assertion(r: _Reader, key: str, text: str) -> Assertion:
    m = re.match(r"^(<=|>=|==|!=|<|>|~)\s*(.+)$", text)
    if not m:
        raise r.err("expected '<op> value' with op in <=, <, >=, >, ==, !=, ~", "acceptance", key)
    op, rest = m.groups()
    if op == "~":
        if "+-" not in rest:
            raise r.err("'~' needs 'target +- tolerance'", "acceptance", key)
        a, b = rest.split("+-", 1)
        try:
            return Assertion(key, op, eval_number(a), eval_number(b))
        except (ValueError, ArithmeticError) as exc:
            raise r.err(str(exc), "acceptance", key) from exc
    low = rest.strip().lower()
    if low in ("true", "false"):
        return Assertion(key, op, low == "true")
    if re.match(r"^[A-Za-z_]+$", rest.strip()) and rest.strip() not in _CONSTS:
        return Assertion(key, op, rest.strip())
    try:
        return Assertion(key, op, eval_number(rest))
    except (ValueError, ArithmeticError) as exc:
        raise r.err(str(exc), "acceptance", key) from exc


def parse_config(text: str, source="<string>") -> ExperimentConfig:
    r = _Reader(text, source)
    known = {"experiment", "map", "noise", "holes", "grid", "sweep", "qk", "mc", "metastable", "output", "acceptance"}
    for s in r.cp.sections():
        if s not in known:
            raise r.err(f"unknown section; expected one of {', '.join(sorted(known))}", s)
    if not r.has("experiment"):
        raise ConfigError("missing [experiment] section", source=source)
    kind = r.choice("experiment", "kind", KINDS, required=True)
    name = r.raw("experiment", "name", "experiment")

    mp = MapSpec()
    if r.has("map"):
        fam = r.choice("map", "family", FAMILIES, "doubling")
        pieces = ()
        if fam == "affine":
            s = r.raw("map", "pieces", required=True)
            try:
                pieces = tuple(tuple(eval_number(t) for t in p.split()) for p in s.split("|") if p.strip())
            except (ValueError, ArithmeticError) as exc:
                raise r.err(str(exc), "map", "pieces") from exc
            if not pieces or any(len(p) != 4 for p in pieces):
                raise r.err("pieces are 'lo hi slope intercept' groups separated by '|'", "map", "pieces")
        mp = MapSpec(fam, r.number("map", "c", 1.0), r.number("map", "omega", 0.0), pieces,
                     r.boolean("map", "circle", fam == "doubling"), r.number("map", "expansion_bound"))
        if mp.c < 0 or mp.omega < 0:
            raise r.err("c and omega must be non-negative", "map", "c" if mp.c < 0 else "omega")

    ns = NoiseSpec()
    if r.has("noise"):
        nk = r.choice("noise", "kind", NOISE_KINDS, "deterministic")
        ns = NoiseSpec(nk, r.number("noise", "epsilon"), r.number("noise", "L", 1, integer=True),
                       r.number("noise", "upsilon"), r.choice("noise", "placement", ("midpoint", "right"), "midpoint"))
        if ns.L < 1:
            raise r.err("L must be at least 1", "noise", "L")
        if nk == "conditionC" and (ns.upsilon is None or ns.upsilon <= 1):
            raise r.err("conditionC noise needs upsilon > 1", "noise", "upsilon")

    hs = None
    if r.has("holes"):
        hs = HoleSpec(r.choice("holes", "kind", HOLE_KINDS, "symmetric"), r.number("holes", "z", required=True),
                      r.boolean("holes", "circle", mp.circle))
        if not 0.0 <= hs.z <= 1.0:
            raise r.err("hole centre must lie in [0, 1]", "holes", "z")

    gs = GridSpec()
    if r.has("grid"):
        gs = GridSpec(r.number("grid", "N", 4096, integer=True), r.boolean("grid", "allow_unaligned"))
        if gs.N < 2:
            raise r.err("N must be at least 2", "grid", "N")

    sw = SweepSpec()
    if r.has("sweep"):
        eps = r.numbers("sweep", "eps")
        if not eps and r.raw("sweep", "geometric") is not None:
            g = r.numbers("sweep", "geometric")
            if len(g) != 3 or int(g[2]) != g[2] or g[2] < 1:
                raise r.err("geometric = first, ratio, count", "sweep", "geometric")
            eps = tuple(g[0] * g[1] ** i for i in range(int(g[2])))
        _decreasing(r, "sweep", "eps" if r.cp.has_option("sweep", "eps") else "geometric", eps)
        sw = SweepSpec(eps, r.number("sweep", "ly_steps", 50, integer=True))

    qk = None
    if r.has("qk"):
        qeps = r.numbers("qk", "eps")
        _decreasing(r, "qk", "eps", qeps)
        qk = QkSpec(qeps, r.number("qk", "k_max", 10, integer=True))

    mc = None
    if r.has("mc"):
        mc = McSpec(r.numbers("mc", "eps"), r.number("mc", "n_traj", 1_000_000, integer=True),
                    r.number("mc", "n_steps", 500, integer=True), r.number("mc", "seed", 0, integer=True),
                    r.number("mc", "c"), r.number("mc", "n_chains", 1000, integer=True),
                    r.number("mc", "burn_in", 10_000, integer=True), r.number("mc", "bins", 4096, integer=True))
        for key in ("n_traj", "n_steps", "n_chains", "bins"):
            if getattr(mc, key) < 1:
                raise r.err("must be positive", "mc", key)
        if not 0 <= mc.seed < 2 ** 64:
            raise r.err("seed must fit in 64 unsigned bits", "mc", "seed")

    meta = None
    if r.has("metastable"):
        meps = r.numbers("metastable", "eps")
        _decreasing(r, "metastable", "eps", meps)
        meta = MetaSpec(r.numbers("metastable", "c"), meps, r.number("metastable", "N", 2 ** 14, integer=True),
                        r.boolean("metastable", "refine_check", True))
        if not meta.c or any(c < 0 for c in meta.c):
            raise r.err("need a list of non-negative c values", "metastable", "c")

    out = OutputSpec()
    if r.has("output"):
        fm = tuple(s.strip() for s in (r.raw("output", "formats") or "csv, json, dat").split(",") if s.strip())
        out = OutputSpec(r.raw("output", "directory", "out"), fm)

    acc = []
    if r.has("acceptance"):
        for key in r.cp.options("acceptance"):
            acc.append(_parse_assertion(r, key, r.raw("acceptance", key)))

    for s in r.cp.sections():
        for key in r.cp.options(s):
            if (s, key) not in r.used:
                raise r.err("unknown key", s, key)

    cfg = ExperimentConfig(kind, name, mp, ns, hs, gs, sw, qk, mc, meta, out, tuple(acc))
    _cross_check(cfg, r)
    return cfg


def _cross_check(cfg: ExperimentConfig, r: _Reader):
    if cfg.kind in ("escape", "qk", "mc") and cfg.map.family != "metastable" and cfg.holes is None:
        raise r.err("this experiment needs a [holes] section", "experiment", "kind")
    if cfg.kind == "escape" and not cfg.sweep.eps:
        raise r.err("escape experiments need [sweep] eps", "experiment", "kind")
    if cfg.kind == "qk" and (cfg.qk is None or not cfg.qk.eps):
        raise r.err("qk experiments need [qk] eps", "experiment", "kind")
    if cfg.kind == "metastable" and cfg.metastable is None:
        raise r.err("metastable experiments need a [metastable] section", "experiment", "kind")
    if cfg.kind == "mc" and cfg.mc is None:
        raise r.err("mc experiments need an [mc] section", "experiment", "kind")
    if cfg.noise.kind == "conditionC" and cfg.noise.epsilon is not None and cfg.noise.epsilon ** cfg.noise.upsilon >= cfg.noise.epsilon:
        raise r.err("eps**upsilon must be below eps", "noise", "epsilon")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", source=p) from exc
    return parse_config(text, p)


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config(serialize(c)) == c``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = {"kind": cfg.kind, "name": cfg.name}
    m = cfg.map
    sec = {"family": m.family, "circle": fmt(m.circle)}
    if m.family == "metastable":
        sec.update(c=fmt(m.c), omega=fmt(m.omega))
    if m.family == "affine":
        sec["pieces"] = " | ".join(" ".join(fmt(v) for v in p) for p in m.pieces)
    if m.expansion_bound is not None:
        sec["expansion_bound"] = fmt(m.expansion_bound)
    cp["map"] = sec
    n = cfg.noise
    sec = {"kind": n.kind, "L": fmt(n.L), "placement": n.placement}
    if n.epsilon is not None:
        sec["epsilon"] = fmt(n.epsilon)
    if n.upsilon is not None:
        sec["upsilon"] = fmt(n.upsilon)
    cp["noise"] = sec
    if cfg.holes is not None:
        cp["holes"] = {"kind": cfg.holes.kind, "z": fmt(cfg.holes.z), "circle": fmt(cfg.holes.circle)}
    cp["grid"] = {"N": fmt(cfg.grid.N), "allow_unaligned": fmt(cfg.grid.allow_unaligned)}
    if cfg.sweep.eps:
        cp["sweep"] = {"eps": fmt(cfg.sweep.eps), "ly_steps": fmt(cfg.sweep.ly_steps)}
    if cfg.qk is not None:
        cp["qk"] = {"eps": fmt(cfg.qk.eps), "k_max": fmt(cfg.qk.k_max)}
    if cfg.mc is not None:
        mc = cfg.mc
        sec = {f.name: fmt(getattr(mc, f.name)) for f in fields(mc) if f.name not in ("eps", "c")}
        if mc.eps:
            sec["eps"] = fmt(mc.eps)
        if mc.c is not None:
            sec["c"] = fmt(mc.c)
        cp["mc"] = sec
    if cfg.metastable is not None:
        ms = cfg.metastable
        cp["metastable"] = {"c": fmt(ms.c), "eps": fmt(ms.eps), "N": fmt(ms.N), "refine_check": fmt(ms.refine_check)}
    cp["output"] = {"directory": cfg.output.directory, "formats": ", ".join(cfg.output.formats)}
    if cfg.acceptance:
        cp["acceptance"] = {a.metric: a.text() for a in cfg.acceptance}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
