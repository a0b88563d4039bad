"""Experiment configuration: YAML (or JSON) text -> validated ExperimentConfig.

Validation collects every problem before failing, each tagged with the
dotted path of the offending key.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from .data import PartitionKind, PartitionSpec
from .dp import DpConfig, OptimizerConfig, OptimizerKind
from .errors import ConfigError
from .gossip import TopologyKind
from .nn import Architecture, DmlConfig, ModelSpec
from .protocols import Method, ProtocolConfig

_REQUIRED = object()


def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _enum_check(enum_cls):
    names = {e.value.lower(): e for e in enum_cls}

    def check(x):
        return isinstance(x, str) and x.lower() in names
    check.choices = [e.value for e in enum_cls]
    return check


# key -> (default, type check, extra range check or None, message)
SCHEMA: Dict[str, Any] = {
    "methods": (_REQUIRED, None, None, None),
    "rounds": (10, _int, lambda v: v >= 1, "must be a positive integer"),
    "seeds": (None, None, None, None),
    "num_runs": (None, _int, lambda v: v >= 1, "must be a positive integer"),
    "output_dir": ("results", lambda x: isinstance(x, str), None, "must be a string"),
    "num_clients": (8, _int, lambda v: v >= 1, "must be a positive integer"),
    "workers": (1, _int, lambda v: v >= 1, "must be a positive integer"),
    "link_time_per_byte": (1e-9, _num, lambda v: v >= 0, "must be >= 0"),
    "debias_in_place": (False, lambda x: isinstance(x, bool), None, "must be a boolean"),
    "weighting": ("uniform", lambda x: x in ("uniform", "size"), None,
                  "must be 'uniform' or 'size'"),
    "topology": (None, _enum_check(TopologyKind), None, None),
    "dml": {
        "alpha": (0.5, _num, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "beta": (0.5, _num, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    },
    "dp": {
        "enabled": (True, lambda x: isinstance(x, bool), None, "must be a boolean"),
        "clip": (1.0, _num, lambda v: v > 0, "must be positive"),
        "noise_multiplier": (1.0, _num, lambda v: v >= 0, "must be >= 0"),
        "batch_size": (250, _int, lambda v: v >= 1, "must be a positive integer"),
        "fixed_denominator": (False, lambda x: isinstance(x, bool), None, "must be a boolean"),
        "delta": (None, _num, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "budget_epsilon": (None, _num, lambda v: v >= 0, "must be >= 0"),
    },
    "optimizer": {
        "kind": ("adam", _enum_check(OptimizerKind), None, None),
        "learning_rate": (1e-3, _num, lambda v: v > 0, "must be positive"),
        "weight_decay": (1e-4, _num, lambda v: v >= 0, "must be >= 0"),
        "adam_beta1": (0.9, _num, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        "adam_beta2": (0.999, _num, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        "adam_eps": (1e-8, _num, lambda v: v > 0, "must be positive"),
    },
    "data": {
        "source": ("synth", lambda x: x in ("synth", "idx", "csv"), None,
                   "must be one of synth, idx, csv"),
        "num_classes": (None, _int, lambda v: v >= 2, "must be an integer >= 2"),
        "synth": {
            "num_classes": (10, _int, lambda v: v >= 2, "must be an integer >= 2"),
            "dim": (10, _int, lambda v: v >= 1, "must be a positive integer"),
            "per_class": (1500, _int, lambda v: v >= 1, "must be a positive integer"),
            "test_per_class": (200, _int, lambda v: v >= 1, "must be a positive integer"),
            "separation": (5.0, _num, lambda v: v >= 0, "must be >= 0"),
            "clusters_per_class": (3, _int, lambda v: v >= 1, "must be a positive integer"),
        },
        "train": {
            "path": (None, lambda x: isinstance(x, str), None, "must be a string"),
            "labels_path": (None, lambda x: isinstance(x, str), None, "must be a string"),
        },
        "test": {
            "path": (None, lambda x: isinstance(x, str), None, "must be a string"),
            "labels_path": (None, lambda x: isinstance(x, str), None, "must be a string"),
        },
        "partition": {
            "kind": ("MajorityClass", _enum_check(PartitionKind), None, None),
            "p_major": (0.8, _num, lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
            "concentration": (0.5, _num, lambda v: v > 0, "must be positive"),
            "per_client_size": (1000, _int, lambda v: v >= 1, "must be a positive integer"),
        },
    },
    "models": {
        "proxy": (None, None, None, None),
        "private": (None, None, None, None),
    },
}

_MODEL_KEYS = {"architecture", "hidden_sizes"}


def _walk(raw: dict, schema: dict, path: str, errors: List[str]) -> dict:
    out = {}
    if not isinstance(raw, dict):
        errors.append(f"{path or '<root>'}: expected a mapping")
        raw = {}
    for key in raw:
        if key not in schema:
            errors.append(f"{path}{key}: unknown key")
    for key, rule in schema.items():
        where = f"{path}{key}"
        if isinstance(rule, dict):
            out[key] = _walk(raw.get(key) or {}, rule, where + ".", errors)
            continue
        default, check, extra, msg = rule
        if key not in raw or raw[key] is None:
            if default is _REQUIRED:
                errors.append(f"{where}: required")
            out[key] = None if default is _REQUIRED else default
            continue
        val = raw[key]
        if check is not None and not check(val):
            choices = getattr(check, "choices", None)
            errors.append(f"{where}: " + (f"must be one of {', '.join(choices)}" if choices
                                          else msg or "invalid value") + f", got {val!r}")
        elif extra is not None and not extra(val):
            errors.append(f"{where}: {msg}, got {val!r}")
        out[key] = val
    return out


def _model_entry(raw, where: str, errors: List[str]) -> Optional[dict]:
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected a mapping with 'architecture'")
        return None
    for key in raw:
        if key not in _MODEL_KEYS:
            errors.append(f"{where}.{key}: unknown key")
    arch = raw.get("architecture")
    if not _enum_check(Architecture)(arch):
        errors.append(f"{where}.architecture: must be one of "
                      f"{', '.join(a.value for a in Architecture)}, got {arch!r}")
        return None
    arch = _canonical(Architecture, arch)
    hidden = raw.get("hidden_sizes")
    if hidden is not None:
        if not (isinstance(hidden, list) and all(_int(h) and h > 0 for h in hidden)):
            errors.append(f"{where}.hidden_sizes: must be a list of positive integers")
            return None
        if arch is Architecture.SOFTMAX and hidden:
            errors.append(f"{where}.hidden_sizes: SoftmaxRegression has no hidden layers")
            return None
    return {"architecture": arch, "hidden_sizes": tuple(hidden or ())}


def _canonical(enum_cls, value):
    return {e.value.lower(): e for e in enum_cls}[value.lower()]


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    num_classes: Optional[int] = None
    synth: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    test: Dict[str, Any] = field(default_factory=dict)
    partition: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    methods: List[Method]
    rounds: int
    seeds: List[int]
    output_dir: str
    num_clients: int
    workers: int
    link_time_per_byte: float
    dml: DmlConfig
    dp: DpConfig
    opt: OptimizerConfig
    topology: Optional[TopologyKind]
    delta: Optional[float]
    budget_epsilon: Optional[float]
    debias_in_place: bool
    weighting: str
    data: DataConfig
    proxy_model: dict
    private_models: List[dict]

    @property
    def num_runs(self) -> int:
        return len(self.seeds)

    def protocol(self, method: Method) -> ProtocolConfig:
        return ProtocolConfig(method=method, rounds=self.rounds, dml=self.dml, dp=self.dp,
                              opt=self.opt, topology=self.topology, delta=self.delta,
                              budget_epsilon=self.budget_epsilon,
                              debias_in_place=self.debias_in_place, weighting=self.weighting)

    def model_specs(self, input_dim: int, num_classes: int):
        proxy = ModelSpec(self.proxy_model["architecture"], input_dim, num_classes,
                          self.proxy_model["hidden_sizes"])
        private = [ModelSpec(m["architecture"], input_dim, num_classes, m["hidden_sizes"])
                   for m in self.private_models]
        return proxy, private

    def partition_spec(self, seed: int) -> PartitionSpec:
        p = self.data.partition
        return PartitionSpec(_canonical(PartitionKind, p["kind"]), p["per_client_size"],
                             self.num_clients, p["p_major"], p["concentration"], seed)


def parse_config(text, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parses and validates a config document.

    ``overrides`` maps dotted keys (``"dp.enabled"``) to values applied on
    top of the document before validation, so command-line flags get the
    same checks as file entries.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"<root>: config is not UTF-8 ({e})") from None
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"<root>: cannot parse config: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a mapping at the top level")
    raw = dict(raw)
    if "method" in raw:
        if "methods" in raw:
            raise ConfigError("method: give either 'method' or 'methods', not both")
        raw["methods"] = raw.pop("method")
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {}) if isinstance(node.get(p, {}), dict) else {}
        node[leaf] = value

    errors: List[str] = []
    vals = _walk(raw, SCHEMA, "", errors)

    methods = vals["methods"]
    if isinstance(methods, str):
        methods = [methods]
    parsed_methods = []
    if methods is not None:
        if not isinstance(methods, list) or not methods:
            errors.append("methods: expected a method name or a nonempty list")
        else:
            check = _enum_check(Method)
            for i, m in enumerate(methods):
                if check(m):
                    parsed_methods.append(_canonical(Method, m))
                else:
                    errors.append(f"methods[{i}]: must be one of {', '.join(check.choices)}, "
                                  f"got {m!r}")

    seeds, num_runs = vals["seeds"], vals["num_runs"]
    if seeds is None:
        seeds = list(range(num_runs or 1))
    elif not (isinstance(seeds, list) and seeds and all(_int(s) and s >= 0 for s in seeds)):
        errors.append("seeds: must be a nonempty list of nonnegative integers")
        seeds = [0]
    elif num_runs is not None and num_runs != len(seeds):
        errors.append(f"num_runs: {num_runs} disagrees with {len(seeds)} seeds")

    models = vals["models"]
    proxy = {"architecture": Architecture.SOFTMAX, "hidden_sizes": ()}
    if models["proxy"] is not None:
        proxy = _model_entry(models["proxy"], "models.proxy", errors) or proxy
    private_raw = models["private"]
    private = [{"architecture": Architecture.MLP, "hidden_sizes": (200, 200)}]
    if private_raw is not None:
        if isinstance(private_raw, dict):
            private_raw = [private_raw]
        if not isinstance(private_raw, list) or not private_raw:
            errors.append("models.private: expected a model or a nonempty list of models")
        else:
            parsed = [_model_entry(m, f"models.private[{i}]", errors)
                      for i, m in enumerate(private_raw)]
            if all(parsed):
                private = parsed

    data = vals["data"]
    if data["source"] in ("idx", "csv"):
        for split in ("train", "test"):
            if not data[split]["path"]:
                errors.append(f"data.{split}.path: required for {data['source']} data")
            if data["source"] == "idx" and not data[split]["labels_path"]:
                errors.append(f"data.{split}.labels_path: required for idx data")
    part = data["partition"]
    if isinstance(part["kind"], str) and part["kind"].lower() == "majorityclass":
        ncls = data["num_classes"] or (data["synth"]["num_classes"]
                                       if data["source"] == "synth" else None)
        if ncls and _num(part["p_major"]) and part["p_major"] < 1.0 / ncls:
            errors.append(f"data.partition.p_major: must be >= 1/{ncls}, got {part['p_major']}")

    dml = dp = opt = None
    topology = None
    try:
        dml = DmlConfig(vals["dml"]["alpha"], vals["dml"]["beta"])
    except (ConfigError, TypeError):
        pass  # already reported by the schema walk
    d = vals["dp"]
    try:
        dp = DpConfig(d["clip"], d["noise_multiplier"], d["batch_size"], d["enabled"],
                      d["fixed_denominator"])
    except (ConfigError, TypeError):
        pass
    o = vals["optimizer"]
    try:
        opt = OptimizerConfig(_canonical(OptimizerKind, o["kind"]), o["learning_rate"],
                              o["weight_decay"], o["adam_beta1"], o["adam_beta2"], o["adam_eps"])
    except (ConfigError, TypeError, KeyError):
        pass
    if vals["topology"] is not None and _enum_check(TopologyKind)(vals["topology"]):
        topology = _canonical(TopologyKind, vals["topology"])
    elif vals["topology"] is not None:
        errors.append(f"topology: must be one of {', '.join(t.value for t in TopologyKind)}, "
                      f"got {vals['topology']!r}")

    # defaults stand in for sections that failed, so topology errors still surface
    for m in parsed_methods:
        if m in (Method.REGULAR, Method.JOINT):
            continue
        try:
            ProtocolConfig(m, dml=dml or DmlConfig(), dp=dp or DpConfig(),
                           opt=opt or OptimizerConfig(), topology=topology)
        except ConfigError as e:
            errors.extend(f"topology: {msg}" for msg in e.errors)

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(
        methods=parsed_methods, rounds=vals["rounds"], seeds=list(seeds),
        output_dir=vals["output_dir"], num_clients=vals["num_clients"],
        workers=vals["workers"], link_time_per_byte=float(vals["link_time_per_byte"]),
        dml=dml, dp=dp, opt=opt, topology=topology, delta=d["delta"],
        budget_epsilon=d["budget_epsilon"], debias_in_place=vals["debias_in_place"],
        weighting=vals["weighting"], data=DataConfig(**data), proxy_model=proxy,
        private_models=private)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    with open(path, "rb") as f:
        return parse_config(f.read(), overrides)
