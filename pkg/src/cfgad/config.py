"""Experiment configuration: flat key=value sections, strictly validated.

Unknown keys or sections are errors that name the offending key, so typos
like "alpa" fail loudly instead of being ignored.
"""

import configparser
from dataclasses import dataclass, field, fields

from .graph import SyntheticSpec, generate_synthetic, load_graph, make_splits
from .pipeline import PipelineConfig


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    n: int = 500
    anomaly_rate: float = 0.05
    feature_dim: int = 8
    mean_normal: tuple = (0.0,)
    mean_anomaly: tuple = (1.0,)
    feature_std: float = 1.0
    intra_normal_p: float = 0.02
    intra_anomaly_p: float = 0.02
    cross_p: float = 0.02
    graph_seed: int | None = None
    edges: str = ""
    features: str = ""
    labels: str = ""
    train_frac: float = 0.01
    val_ratio: int = 1
    test_ratio: int = 2

    def synthetic_spec(self, seed):
        mean_n = self.mean_normal if len(self.mean_normal) > 1 else self.mean_normal[0]
        mean_a = self.mean_anomaly if len(self.mean_anomaly) > 1 else self.mean_anomaly[0]
        return SyntheticSpec(
            n=self.n, anomaly_rate=self.anomaly_rate,
            feature_dim=self.feature_dim, mean_normal=mean_n,
            mean_anomaly=mean_a, feature_std=self.feature_std,
            intra_normal_p=self.intra_normal_p,
            intra_anomaly_p=self.intra_anomaly_p, cross_p=self.cross_p,
            seed=self.graph_seed if self.graph_seed is not None else seed)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seeds: tuple = (0,)
    ablations: tuple = ("full",)
    sweep_p: tuple = ()
    sweep_alpha: tuple = ()
    sweep_gamma: tuple = ()
    out: str = "runs"


def _parse_scalar(text, kind):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "int_or_none":
        return None if text == "" else int(text)
    if kind == "float_or_auto":
        return "auto" if text == "auto" else float(text)
    if kind == "int_or_auto":
        return "auto" if text == "auto" else int(text)
    if kind == "float_or_val":
        return "val" if text == "val" else float(text)
    if kind == "floats":
        return tuple(float(t) for t in text.split(",") if t.strip())
    if kind == "ints":
        return tuple(int(t) for t in text.split(",") if t.strip())
    if kind == "strs":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    return text  # plain string


_DATASET_KEYS = {
    "kind": "str", "n": "int", "anomaly_rate": "float", "feature_dim": "int",
    "mean_normal": "floats", "mean_anomaly": "floats", "feature_std": "float",
    "intra_normal_p": "float", "intra_anomaly_p": "float", "cross_p": "float",
    "graph_seed": "int_or_none", "edges": "str", "features": "str",
    "labels": "str", "train_frac": "float", "val_ratio": "int",
    "test_ratio": "int",
}

_PIPELINE_KEYS = {
    "alpha": "float", "eta": "float_or_auto", "gamma": "float",
    "translate_fraction": "float", "hetero_fraction": "float",
    "seq_len": "int_or_auto", "diffusion_steps": "int", "epochs": "int",
    "lr": "float", "seed": "int", "ablation": "str", "gcn_hidden": "int",
    "gat_hidden": "int", "heads": "int", "head_hidden": "int",
    "pointer_hidden": "int", "pointer_epochs": "int", "pointer_lr": "float",
    "pointer_cell": "str", "pointer_anchor": "float", "ddpm_epochs": "int",
    "ddpm_lr": "float",
    "ddpm_hidden": "int", "time_width": "int", "beta_start": "float",
    "beta_end": "float", "prior_steps": "int_or_auto",
    "high_pass_mode": "str", "hops": "int", "truncation": "str",
    "threshold": "float_or_val", "phi": "float_or_auto",
    "regenerate_every": "int", "ddpm_retrain": "bool",
}

_EXPERIMENT_KEYS = {
    "name": "str", "seeds": "ints", "ablations": "strs", "sweep_p": "floats",
    "sweep_alpha": "floats", "sweep_gamma": "floats", "out": "str",
}

_SECTIONS = {
    "dataset": _DATASET_KEYS,
    "pipeline": _PIPELINE_KEYS,
    "experiment": _EXPERIMENT_KEYS,
}


def parse_config(path):
    """Read an experiment config file, rejecting unknown keys."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")

    values = {"dataset": {}, "pipeline": {}, "experiment": {}}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        known = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown config key '{key}' in section [{section}]")
            try:
                values[section][key] = _parse_scalar(raw, known[key])
            except ValueError as exc:
                raise ValueError(f"bad value for '{key}' in [{section}]: {exc}") from None

    dataset = DatasetConfig(**values["dataset"])
    if dataset.kind not in ("synthetic", "files"):
        raise ValueError(f"dataset kind must be synthetic or files, got {dataset.kind!r}")
    pipeline = PipelineConfig(**values["pipeline"]).validate()
    exp_kwargs = values["experiment"]
    config = ExperimentConfig(dataset=dataset, pipeline=pipeline, **exp_kwargs)
    if not config.seeds:
        raise ValueError("experiment needs at least one seed")
    for ab in config.ablations:
        if ab not in ("full", "two", "ano", "att", "ori"):
            raise ValueError(f"unknown ablation {ab!r} in experiment.ablations")
    return config


def build_graph(dataset, seed):
    """Materialize the dataset for one run and attach splits."""
    if dataset.kind == "synthetic":
        g = generate_synthetic(dataset.synthetic_spec(seed))
    else:
        for name in ("edges", "features", "labels"):
            if not getattr(dataset, name):
                raise ValueError(f"files dataset needs the '{name}' path")
        g = load_graph(dataset.edges, dataset.features, dataset.labels)
    splits = make_splits(g, train_frac=dataset.train_frac,
                         val_test_ratio=(dataset.val_ratio, dataset.test_ratio),
                         seed=seed)
    return g.with_splits(splits)


def default_config_text():
    """A commented template config, used by `cfgad synth` docs and tests."""
    lines = ["[dataset]", "kind = synthetic"]
    for f in fields(DatasetConfig):
        if f.name == "kind":
            continue
        default = getattr(DatasetConfig(), f.name)
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"{f.name} = {'' if default is None else default}")
    lines += ["", "[pipeline]"]
    for f in fields(PipelineConfig):
        lines.append(f"{f.name} = {getattr(PipelineConfig(), f.name)}")
    lines += ["", "[experiment]", "name = experiment", "seeds = 0",
              "ablations = full", "sweep_p =", "sweep_alpha =",
              "sweep_gamma =", "out = runs"]
    return "\n".join(lines) + "\n"
