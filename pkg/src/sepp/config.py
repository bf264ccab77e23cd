"""INI run configuration: schema, validation, model construction and echo."""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .catalog import ObservationDomain, Polygon, Rectangle
from .intensity import (
    Constant, EtasPowerLaw, GaussianExponential, GridField, Histogram, IntensityModel,
)

OUTPUT_ENV = "SEPP_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str  # float, int, bool, str, choice, floats, matrix
    default: Any
    help: str
    choices: tuple[str, ...] = ()


def _k(kind, default, help, *choices):
    return Key(kind, default, help, tuple(choices))


MODEL_KEYS = {
    "background": _k("choice", "constant", "background form", "constant", "grid"),
    "nu": _k("float", 1.0, "constant background rate per unit area and time"),
    "grid_x_edges": _k("floats", "", "grid background cell edges in x"),
    "grid_y_edges": _k("floats", "", "grid background cell edges in y"),
    "grid_values": _k("matrix", "", "grid background rates, rows (x cells) separated by ';'"),
    "family": _k("choice", "gaussian_exponential", "triggering family",
                 "none", "gaussian_exponential", "etas", "histogram"),
    "theta": _k("float", 0.5, "Gaussian-exponential offspring mass"),
    "omega": _k("float", 1.0, "Gaussian-exponential time scale"),
    "sigma2": _k("float", 0.01, "Gaussian-exponential spatial variance"),
    "K0": _k("float", 0.1, "ETAS productivity"),
    "alpha": _k("float", 0.0, "ETAS magnitude sensitivity"),
    "c": _k("float", 0.01, "ETAS Omori offset"),
    "p": _k("float", 1.5, "ETAS Omori exponent (> 1)"),
    "d": _k("float", 0.001, "ETAS spatial scale"),
    "q": _k("float", 1.5, "ETAS spatial exponent (> 1)"),
    "M0": _k("float", 0.0, "ETAS reference magnitude"),
    "time_edges": _k("floats", "", "histogram lag bin edges (first 0)"),
    "radius_edges": _k("floats", "", "histogram distance bin edges (first 0)"),
    "cell_values": _k("matrix", "", "histogram cell values, rows (lag bins) separated by ';'"),
    "max_lag": _k("float", math.inf, "triggering truncation lag (inf for none)"),
}

SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": _k("int", 0, "master seed; every random stream derives from it"),
        "output_dir": _k("str", "sepp_out", f"output directory (overridden by ${OUTPUT_ENV})"),
    },
    "domain": {
        "region": _k("choice", "rectangle", "window shape", "rectangle", "polygon"),
        "x0": _k("float", 0.0, "rectangle left edge"),
        "x1": _k("float", 1.0, "rectangle right edge"),
        "y0": _k("float", 0.0, "rectangle bottom edge"),
        "y1": _k("float", 1.0, "rectangle top edge"),
        "vertices": _k("matrix", "", "polygon vertices 'x y; x y; ...'"),
        "t_end": _k("float", 1.0, "end of the observation period T"),
    },
    "catalog": {
        "path": _k("str", "catalog.csv", "event CSV with header t,x,y[,mark]"),
        "policy": _k("choice", "strict", "events outside the domain", "strict", "drop"),
    },
    "model": MODEL_KEYS,
    "simulate": {
        "method": _k("choice", "cluster", "simulation algorithm", "cluster", "ogata"),
        "pad_time": _k("float", math.nan, "burn-in before t = 0 (nan: model default)"),
        "pad_space": _k("float", math.nan, "spatial padding (nan: model default)"),
        "mark_beta": _k("float", math.nan, "Gutenberg-Richter beta for ETAS marks (nan: unmarked)"),
    },
    "fit": {
        "method": _k("choice", "em", "estimation method", "em", "semiparametric", "flp", "misd"),
        "integration": _k("choice", "cubature", "compensator", "cubature", "schoenberg"),
        "tol": _k("float", 1e-6, "relative parameter change for convergence"),
        "ll_tol": _k("float", 1e-6, "log-likelihood change for convergence"),
        "max_iter": _k("int", 500, "maximum EM iterations"),
        "n_p": _k("int", 25, "neighbours for adaptive KDE bandwidths"),
        "eps_loc": _k("float", 1e-6, "bandwidth floor"),
        "bg_init": _k("choice", "unit", "semiparametric starting background (unit: mu = 1, "
                      "data: mu = n / (|X| T))", "unit", "data"),
        "outer_tol": _k("float", 1e-3, "relative background change for outer convergence"),
        "max_outer": _k("int", 30, "maximum outer iterations"),
    },
    "decluster": {
        "mode": _k("choice", "both", "output", "thin", "tree", "both"),
        "refit": _k("bool", True, "fit the model first (else use [model] as given)"),
    },
    "misd": {
        "time_edges": _k("floats", "", "lag bin edges (empty: automatic)"),
        "radius_edges": _k("floats", "", "distance bin edges (empty: automatic)"),
        "background": _k("choice", "constant", "background form", "constant", "grid"),
        "grid_nx": _k("int", 10, "grid background cells in x"),
        "grid_ny": _k("int", 10, "grid background cells in y"),
    },
    "bootstrap": {
        "replicates": _k("int", 1000, "number of bootstrap replicates B"),
        "level": _k("float", 0.95, "interval coverage"),
        "workers": _k("int", 1, "parallel processes"),
        "adaptive": _k("bool", False, "stop once intervals settle"),
        "block": _k("int", 100, "replicates per adaptive block"),
        "refit": _k("bool", True, "fit the model to the catalog before resampling"),
    },
    "diagnose": {
        "k": _k("float", math.nan, "super-thinning rate (nan: n / (|X| T))"),
        "radii": _k("floats", "", "K-function radii (empty: 20 up to a quarter of the window)"),
        "nsim": _k("int", 999, "Monte Carlo envelope simulations"),
        "correction": _k("choice", "none", "K edge correction", "none", "translation"),
        "quadrat_nx": _k("int", 5, "quadrats in x"),
        "quadrat_ny": _k("int", 5, "quadrats in y"),
        "voronoi": _k("bool", True, "compute Voronoi residuals"),
        "resolution": _k("int", 200, "grid resolution for inf / sup of the intensity"),
    },
    "select": {
        "models": _k("str", "", "comma separated names of [model.NAME] sections"),
        "criterion": _k("choice", "AIC", "criterion flagged as best", "AIC", "BIC", "HQ"),
    },
    "plot": {},
}

COMMAND_SECTIONS = {
    "simulate": ("run", "domain", "model", "simulate"),
    "fit": ("run", "domain", "catalog", "model", "fit"),
    "decluster": ("run", "domain", "catalog", "model", "fit", "decluster"),
    "misd": ("run", "domain", "catalog", "fit", "misd"),
    "bootstrap": ("run", "domain", "catalog", "model", "fit", "bootstrap"),
    "diagnose": ("run", "domain", "catalog", "model", "diagnose"),
    "select": ("run", "domain", "catalog", "fit", "select"),
    "plot": ("run", "domain", "plot"),
}


def _parse(section: str, name: str, key: Key, raw: str):
    where = f"[{section}] {name}"
    raw = raw.strip()
    try:
        if key.kind == "float":
            return float(raw)
        if key.kind == "int":
            return int(raw)
        if key.kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key.kind == "choice":
            if raw not in key.choices:
                raise ConfigError(f"{where}: {raw!r} not one of {', '.join(key.choices)}")
            return raw
        if key.kind == "floats":
            return np.array([float(v) for v in raw.replace(",", " ").split()], float)
        if key.kind == "matrix":
            rows = [r for r in raw.split(";") if r.strip()]
            vals = [[float(v) for v in r.replace(",", " ").split()] for r in rows]
            if len({len(r) for r in vals}) > 1:
                raise ConfigError(f"{where}: rows have different lengths")
            return np.array(vals, float).reshape(len(vals), -1) if vals else np.empty((0, 0))
        return raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {key.kind}") from None


def _format(key: Key, value) -> str:
    if key.kind == "float":
        return repr(float(value))
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if key.kind == "matrix":
        return "; ".join(" ".join(repr(float(v)) for v in row) for row in value)
    return str(value)


def _schema_for(section: str) -> dict[str, Key] | None:
    if section in SCHEMA:
        return SCHEMA[section]
    if section.startswith("model."):
        return MODEL_KEYS
    return None


@dataclass
class RunConfig:
    command: str
    values: dict[str, dict[str, Any]]
    source: Path | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.values["run"]["output_dir"])

    def echo(self) -> str:
        """The fully resolved configuration, readable back by :func:`load_config`."""
        lines = [f"# resolved configuration for '{self.command}'"]
        for section, vals in self.values.items():
            schema = _schema_for(section)
            lines.append(f"\n[{section}]")
            for name, key in schema.items():
                lines.append(f"{name} = {_format(key, vals[name])}")
        return "\n".join(lines) + "\n"


def load_config(path: str | Path | None, command: str) -> RunConfig:
    """Read and validate an INI file for ``command``; unknown keys are errors."""
    if command not in COMMAND_SECTIONS:
        raise ConfigError(f"unknown command {command!r}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                       default_section="__none__")
    parser.optionxform = str  # keys are case-sensitive (K0, M0)
    source = None
    if path is not None:
        source = Path(path)
        if not source.is_file():
            raise ConfigError(f"config file {str(source)!r} not found")
        try:
            parser.read(source)
        except configparser.Error as exc:
            raise ConfigError(f"config file: {exc}") from None
    for section in parser.sections():
        schema = _schema_for(section)
        if schema is None:
            raise ConfigError(f"unknown section [{section}]")
        for name in parser[section]:
            if name not in schema:
                raise ConfigError(f"[{section}] {name}: unknown key")
    wanted = list(COMMAND_SECTIONS[command])
    if command == "select":
        raw = parser.get("select", "models", fallback="")
        names = [n.strip() for n in raw.split(",") if n.strip()]
        if len(names) < 2:
            raise ConfigError("[select] models: name at least two [model.NAME] sections")
        for n in names:
            if not parser.has_section(f"model.{n}"):
                raise ConfigError(f"[select] models: no section [model.{n}]")
        wanted += [f"model.{n}" for n in names]
    values: dict[str, dict[str, Any]] = {}
    for section in wanted:
        schema = _schema_for(section)
        given = parser[section] if parser.has_section(section) else {}
        vals = {}
        for name, key in schema.items():
            if name in given:
                vals[name] = _parse(section, name, key, given[name])
            elif key.kind in ("floats", "matrix"):
                vals[name] = _parse(section, name, key, key.default)
            else:
                vals[name] = key.default
        values[section] = vals
    cfg = RunConfig(command, values, source)
    if "catalog" in values and source is not None:
        p = Path(values["catalog"]["path"])
        if not p.is_absolute():
            values["catalog"]["path"] = str((source.parent / p).resolve())
    return cfg


def build_domain(vals: dict[str, Any]) -> ObservationDomain:
    if vals["region"] == "rectangle":
        region = Rectangle(vals["x0"], vals["x1"], vals["y0"], vals["y1"])
    else:
        v = vals["vertices"]
        if v.ndim != 2 or v.shape[1] != 2:
            raise ConfigError("[domain] vertices: need 'x y' pairs separated by ';'")
        region = Polygon(v)
    return ObservationDomain(region, vals["t_end"])


def build_model(vals: dict[str, Any], domain: ObservationDomain, section: str = "model") -> IntensityModel:
    if vals["background"] == "constant":
        bg = Constant(vals["nu"])
    else:
        xe, ye, gv = vals["grid_x_edges"], vals["grid_y_edges"], vals["grid_values"]
        if gv.shape != (xe.size - 1, ye.size - 1):
            raise ConfigError(f"[{section}] grid_values: shape {gv.shape} does not match the edges")
        bg = GridField(xe, ye, gv)
    fam = vals["family"]
    builders: dict[str, Callable[[], Any]] = {
        "none": lambda: None,
        "gaussian_exponential": lambda: GaussianExponential(vals["theta"], vals["omega"], vals["sigma2"]),
        "etas": lambda: EtasPowerLaw(vals["K0"], vals["alpha"], vals["c"], vals["p"],
                                     vals["d"], vals["q"], M0=vals["M0"]),
        "histogram": lambda: Histogram(vals["time_edges"], vals["radius_edges"], vals["cell_values"]),
    }
    try:
        trig = builders[fam]()
        return IntensityModel(bg, trig, vals["max_lag"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def describe_keys() -> str:
    """Every section and key with its default, for ``--help``."""
    out = []
    for section, keys in SCHEMA.items():
        if not keys:
            continue
        out.append(f"[{section}]" + ("  (also [model.NAME] for select)" if section == "model" else ""))
        for name, key in keys.items():
            default = _format(key, key.default) if key.kind not in ("floats", "matrix") else key.default
            choice = f" {{{'|'.join(key.choices)}}}" if key.choices else ""
            out.append(f"  {name} = {default!s:<12} {key.help}{choice}")
    return "\n".join(out)
