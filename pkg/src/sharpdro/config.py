"""Experiment configuration: a nested YAML mapping validated against a fixed schema.

Unknown keys are rejected, missing keys take the defaults below, and the
content hash is computed from the fully-resolved tree so it does not depend
on key order or on which defaults were spelled out.

==============================  ===============  ==========================
key                             type             default
==============================  ===============  ==========================
data.kind                       synthetic|csv    synthetic
data.lambda                     float > 0        1.0
data.max_severity               int >= 0         5
data.mode                       renormalize|clamp renormalize
data.corruption                 gaussian|quantize gaussian
data.sigma_unit                 float > 0        0.6
data.base_levels                int >= 2         16
data.span                       float > 0        8.0
data.n_train                    int >= 1         20000
data.n_test_per_severity        int >= 1         500
data.dim                        int >= 1         10
data.classes                    int >= 2         4
data.class_separation           float > 0        6.0
data.within_class_sigma         float >= 0       1.0
data.seed                       int              0
data.csv_path                   str | null       null
data.label_column               str              label
data.test_fraction              float in (0,1)   0.2
model.hidden_dims               list[int]        [32]
model.activation                tanh|relu        tanh
train.method                    see METHODS      ERM
train.eta_theta                 float > 0        0.03
train.eta_omega                 float >= 0       required for GroupDRO / SharpDROAware
train.rho                       float >= 0       0.05
train.perturb_rule              sign|l2|raw      sign
train.rex_beta                  float >= 0       1.0
train.batch_size                int >= 1         32
train.epochs                    int >= 0         10
train.weight_update             exponentiated|additive  exponentiated
train.momentum                  float >= 0       0.0
train.weight_decay              float >= 0       0.0
train.seed                      int              0
train.reuse_epsilon             bool             false
minimax.dim                     int >= 1         4
minimax.H                       float | matrix   0.5  (scalar means scalar * I)
minimax.a                       float >= 0       0.25
minimax.A                       float | matrix   0.5
minimax.mu                      float > 0        1.0
minimax.sigma                   float >= 0       0.1
minimax.eta_theta               float > 0        0.001
minimax.eta_omega               float >= 0       0.05
minimax.rho                     float >= 0       0.0003
minimax.M                       int >= 1         1
minimax.T                       int >= 1         10000
minimax.seeds                   int >= 1         20
minimax.descent_steps           int >= 1         1000
minimax.mc_samples              int >= 10000     100000
minimax.theta0                  list | null      null  (2, -1, 1.5, -2 repeated)
minimax.force                   bool             false
experiment.methods              list[str]        [GroupDRO, SAM, SharpDROAware]
experiment.seeds                list[int]        [0]
experiment.rhos                 list[float]      [0.01, 0.05, 0.1, 0.5, 1, 2]
experiment.default_eta_omega    float >= 0       0.01
experiment.hist_bins            int >= 1         20
experiment.surface_radius       float >= 0       1.0
experiment.surface_resolution   odd int          11
==============================  ===============  ==========================
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np
import yaml

from .errors import ConfigError

REQUIRED = object()
OPTIONAL = object()


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float, as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
               |[0-9][0-9_]*[eE][-+]?[0-9]+
               |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
               |\.(?:inf|Inf|INF)|[-+]\.(?:inf|Inf|INF)
               |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _num(lo=None, lo_open=False, hi=None, hi_open=False):
    def check(v, key):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"expected a number, got {type(v).__name__}", key)
        v = float(v)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ConfigError(f"must be {'>' if lo_open else '>='} {lo}", key)
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ConfigError(f"must be {'<' if hi_open else '<='} {hi}", key)
        return v
    return check


def _int(lo=None, odd=False):
    def check(v, key):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"expected an integer, got {type(v).__name__}", key)
        if lo is not None and v < lo:
            raise ConfigError(f"must be >= {lo}", key)
        if odd and v % 2 == 0:
            raise ConfigError("must be odd", key)
        return int(v)
    return check


def _choice(*options):
    def check(v, key):
        if v not in options:
            raise ConfigError(f"must be one of {', '.join(options)}; got {v!r}", key)
        return v
    return check


def _bool(v, key):
    if not isinstance(v, bool):
        raise ConfigError(f"expected true/false, got {v!r}", key)
    return v


def _str_or_null(v, key):
    if v is not None and not isinstance(v, str):
        raise ConfigError("expected a string", key)
    return v


def _str(v, key):
    if not isinstance(v, str):
        raise ConfigError("expected a string", key)
    return v


def _list(item):
    def check(v, key):
        if not isinstance(v, list):
            raise ConfigError("expected a list", key)
        return [item(x, f"{key}[{i}]") for i, x in enumerate(v)]
    return check


def _matrix(v, key):
    if isinstance(v, bool):
        raise ConfigError("expected a number or a matrix", key)
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, list) and v and all(isinstance(r, list) for r in v):
        return [[_num()(x, f"{key}[{i}][{j}]") for j, x in enumerate(r)] for i, r in enumerate(v)]
    raise ConfigError("expected a number or a list of rows", key)


def _vector_or_null(v, key):
    if v is None:
        return None
    return _list(_num())(v, key)


_METHODS = ("ERM", "GroupDRO", "REx", "SAM", "SharpDROAware", "SharpDROAgnostic")

SCHEMA = {
    "data": {
        "kind": (_choice("synthetic", "csv"), "synthetic"),
        "lambda": (_num(0, lo_open=True), 1.0),
        "max_severity": (_int(0), 5),
        "mode": (_choice("renormalize", "clamp"), "renormalize"),
        "corruption": (_choice("gaussian", "quantize"), "gaussian"),
        "sigma_unit": (_num(0, lo_open=True), 0.6),
        "base_levels": (_int(2), 16),
        "span": (_num(0, lo_open=True), 8.0),
        "n_train": (_int(1), 20000),
        "n_test_per_severity": (_int(1), 500),
        "dim": (_int(1), 10),
        "classes": (_int(2), 4),
        "class_separation": (_num(0, lo_open=True), 6.0),
        "within_class_sigma": (_num(0), 1.0),
        "seed": (_int(), 0),
        "csv_path": (_str_or_null, None),
        "label_column": (_str, "label"),
        "test_fraction": (_num(0, True, 1, True), 0.2),
    },
    "model": {
        "hidden_dims": (_list(_int(1)), [32]),
        "activation": (_choice("tanh", "relu"), "tanh"),
    },
    "train": {
        "method": (_choice(*_METHODS), "ERM"),
        "eta_theta": (_num(0, lo_open=True), 0.03),
        "eta_omega": (_num(0), OPTIONAL),
        "rho": (_num(0), 0.05),
        "perturb_rule": (_choice("sign", "l2", "raw"), "sign"),
        "rex_beta": (_num(0), 1.0),
        "batch_size": (_int(1), 32),
        "epochs": (_int(0), 10),
        "weight_update": (_choice("exponentiated", "additive"), "exponentiated"),
        "momentum": (_num(0), 0.0),
        "weight_decay": (_num(0), 0.0),
        "seed": (_int(), 0),
        "reuse_epsilon": (_bool, False),
    },
    "minimax": {
        "dim": (_int(1), 4),
        "H": (_matrix, 0.5),
        "a": (_num(0), 0.25),
        "A": (_matrix, 0.5),
        "mu": (_num(0, lo_open=True), 1.0),
        "sigma": (_num(0), 0.1),
        "eta_theta": (_num(0, lo_open=True), 0.001),
        "eta_omega": (_num(0), 0.05),
        "rho": (_num(0), 0.0003),
        "M": (_int(1), 1),
        "T": (_int(1), 10_000),
        "seeds": (_int(1), 20),
        "descent_steps": (_int(1), 1000),
        "mc_samples": (_int(10_000), 100_000),
        "theta0": (_vector_or_null, None),
        "force": (_bool, False),
    },
    "experiment": {
        "methods": (_list(_choice(*_METHODS)), ["GroupDRO", "SAM", "SharpDROAware"]),
        "seeds": (_list(_int()), [0]),
        "rhos": (_list(_num(0)), [0.01, 0.05, 0.1, 0.5, 1.0, 2.0]),
        "default_eta_omega": (_num(0), 0.01),
        "hist_bins": (_int(1), 20),
        "surface_radius": (_num(0), 1.0),
        "surface_resolution": (_int(1, odd=True), 11),
    },
}

WEIGHTED = ("GroupDRO", "SharpDROAware")


def _line_of(text, path):
    """1-based source line of a dotted key, if the YAML node can be found."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for part in path:
        if not isinstance(node, yaml.MappingNode):
            return line
        for k, v in node.value:
            if k.value == part:
                line, node = k.start_mark.line + 1, v
                break
        else:
            return line
    return line


@dataclass(frozen=True)
class ExperimentConfig:
    tree: dict

    def __getitem__(self, section):
        return self.tree[section]

    def canonical(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True, default_flow_style=False)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.tree, sort_keys=True).encode()).hexdigest()

    def override(self, section, **values) -> "ExperimentConfig":
        tree = copy.deepcopy(self.tree)
        for k, v in values.items():
            checker, _ = SCHEMA[section][k]
            tree[section][k] = None if v is None else checker(v, f"{section}.{k}")
        cfg = ExperimentConfig(tree)
        _cross_checks(cfg)
        return cfg

    # -- builders -------------------------------------------------------

    def severity_distribution(self):
        from .datagen import SeverityDistribution

        d = self.tree["data"]
        return SeverityDistribution(d["lambda"], d["max_severity"], d["mode"])

    def corruption(self):
        from .datagen import AdditiveGaussian, Quantize

        d = self.tree["data"]
        if d["corruption"] == "gaussian":
            return AdditiveGaussian(d["sigma_unit"])
        return Quantize(d["base_levels"], d["span"])

    def synthetic_spec(self):
        from .datagen import SyntheticSpec

        d = self.tree["data"]
        return SyntheticSpec(d["classes"], d["dim"], d["class_separation"], d["within_class_sigma"],
                             d["n_train"], d["n_test_per_severity"])

    def model_spec(self, input_dim, num_classes):
        from .autodiff import ModelSpec

        m = self.tree["model"]
        return ModelSpec(input_dim, num_classes, tuple(m["hidden_dims"]), m["activation"])

    def train_config(self, method=None, seed=None, rho=None):
        from .methods import PerturbRule, TrainConfig

        t = self.tree["train"]
        method = method or t["method"]
        eta_omega = t["eta_omega"]
        if eta_omega is None:
            if method in WEIGHTED and method == t["method"]:
                raise ConfigError("required for weighted methods", "train.eta_omega")
            eta_omega = self.tree["experiment"]["default_eta_omega"]
        return TrainConfig(
            method=method, eta_theta=t["eta_theta"], eta_omega=eta_omega,
            perturb=PerturbRule(t["perturb_rule"], t["rho"] if rho is None else rho),
            rex_beta=t["rex_beta"], batch_size=t["batch_size"], epochs=t["epochs"],
            weight_update=t["weight_update"], momentum=t["momentum"],
            weight_decay=t["weight_decay"], seed=t["seed"] if seed is None else seed,
            reuse_epsilon=t["reuse_epsilon"])

    def problem(self):
        from .minimax import QuadraticCoupledProblem

        m = self.tree["minimax"]
        d = m["dim"]

        def mat(v, cols):
            if isinstance(v, float):
                return v * np.eye(d, cols)
            return np.array(v, dtype=np.float64)

        A = mat(m["A"], d)
        return QuadraticCoupledProblem(mat(m["H"], d), m["a"], A, m["mu"], m["sigma"])

    def rates(self, T=None):
        from .minimax import RateParams

        m = self.tree["minimax"]
        return RateParams(m["eta_theta"], m["eta_omega"], m["rho"], m["M"], m["T"] if T is None else T)


def _cross_checks(cfg: ExperimentConfig):
    t, d, m = cfg.tree["train"], cfg.tree["data"], cfg.tree["minimax"]
    if t["method"] in WEIGHTED and t["eta_omega"] is None:
        raise ConfigError(f"required when train.method is {t['method']}", "train.eta_omega")
    if d["kind"] == "csv" and not d["csv_path"]:
        raise ConfigError("required when data.kind is csv", "data.csv_path")
    if m["theta0"] is not None and len(m["theta0"]) != m["dim"]:
        raise ConfigError(f"needs {m['dim']} entries", "minimax.theta0")
    for name in ("H", "A"):
        v = m[name]
        if isinstance(v, list):
            rows = len(v)
            if rows != m["dim"] or any(len(r) != len(v[0]) for r in v):
                raise ConfigError(f"needs {m['dim']} rows of equal length", f"minimax.{name}")
            if name == "H" and len(v[0]) != m["dim"]:
                raise ConfigError("must be square", "minimax.H")


def parse_config(text: str) -> ExperimentConfig:
    """Validate YAML text and fill defaults; raises :class:`ConfigError` naming the key."""
    try:
        raw = yaml.load(text, Loader=_Loader) if text and text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")

    def located(msg, path):
        line = _line_of(text, path)
        where = ".".join(path)
        return ConfigError(msg + (f" (line {line})" if line else ""), where)

    tree = {}
    for section in raw:
        if section not in SCHEMA:
            raise located("unknown section", [str(section)])
    for section, fields in SCHEMA.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise located("expected a mapping", [section])
        for key in given:
            if key not in fields:
                raise located("unknown key", [section, str(key)])
        out = {}
        for key, (checker, default) in fields.items():
            if key in given and given[key] is not None:
                try:
                    out[key] = checker(given[key], f"{section}.{key}")
                except ConfigError as exc:
                    line = _line_of(text, [section, key])
                    raise ConfigError(str(exc) + (f" (line {line})" if line else "")) from None
            elif default is REQUIRED:
                raise located("missing required key", [section, key])
            else:
                out[key] = None if default is OPTIONAL else copy.deepcopy(default)
        tree[section] = out
    cfg = ExperimentConfig(tree)
    _cross_checks(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text)
