"""Experiment configuration: a flat, sectioned key=value text format.

Every hyperparameter of a run lives here with an explicit default, so a
config file fully determines an experiment and the serialised form
round-trips exactly (parse(serialise(c)) == c).
"""

import configparser
import dataclasses
import io
from dataclasses import dataclass

TASKS = ("toy_symmetric", "binary_oddeven", "mnist10", "mnist_rot")
KERNELS = ("invariant", "rbf")
SAMPLERS = ("swap", "rotation_only", "affine_full", "elastic", "identity")


@dataclass
class ExperimentConfig:
    # [experiment]
    task: str = "toy_symmetric"
    seed: int = 0
    out_dir: str = "runs/default"
    data_root: str = ""
    n_train: int = 0          # 0 = task default
    n_test: int = 0
    rotate_alpha: float = 0.0  # degrees applied to the dataset images

    # [model]
    kernel: str = "invariant"
    sampler: str = "swap"
    variance: float = 1.0
    lengthscale: float = 1.0
    noise_variance: float = 0.1
    M: int = 750
    S: int = 2
    S_pred: int = 50
    init_alpha_degrees: float = 10.0   # rotation_only halfwidth
    init_halfwidth: float = 0.05       # full-affine per-coefficient halfwidth
    elastic_amplitude: float = 1.0
    elastic_smoothness: float = 3.0
    recog_hidden: int = 128

    # [optimiser]
    lr: float = 1e-3
    lr_bounds: float = 1e-2
    steps: int = 1000
    batch: int = 200
    eval_every: int = 100
    ckpt_every: int = 500

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")

    def to_text(self):
        lines = []
        for section, names in _SECTIONS:
            lines.append(f"[{section}]")
            for name in names:
                lines.append(f"{name} = {getattr(self, name)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys like S_pred are case-sensitive
        parser.read_string(text)
        known = {s: set(names) for s, names in _SECTIONS}
        values = {}
        for section in parser.sections():
            if section not in known:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in known[section]:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                values[key] = _convert(key, raw)
        return cls(**values)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with io.open(path, "r") as fh:
            return cls.from_text(fh.read())


_SECTIONS = (
    ("experiment", ("task", "seed", "out_dir", "data_root", "n_train",
                    "n_test", "rotate_alpha")),
    ("model", ("kernel", "sampler", "variance", "lengthscale",
               "noise_variance", "M", "S", "S_pred", "init_alpha_degrees",
               "init_halfwidth", "elastic_amplitude", "elastic_smoothness",
               "recog_hidden")),
    ("optimiser", ("lr", "lr_bounds", "steps", "batch", "eval_every",
                   "ckpt_every")),
)

_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw
