import json
import logging
import os.path
import re
from dataclasses import asdict, dataclass, fields, replace

from AdversarialTrainer import TrainConfig
from MotionSimulator import SPLIT_TAGS, SimConfig

SECTIONS = ("simulation", "dataset", "training", "metrics", "sweep")
REQUIRED_SECTIONS = ("simulation", "dataset", "training")
PRESETS = ("knee", "wrist")
DATASET_KEYS = ("n_cycles", "family", "seed")
METRIC_KEYS = ("split", "frames")
SWEEP_KEYS = ("shot_counts", "seeds", "channel")
RUN_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class ConfigError(ValueError):
    """Invalid experiment configuration.

    Attributes
    ----------
    key:    str or None
            Offending key, dotted with its section.
    lineno: int or None
            Line of the config file the key appears on.
    """
    def __init__(self, message, key=None, lineno=None):
        self.key = key
        self.lineno = lineno
        if lineno is not None:
            message = "line %d: %s" % (lineno, message)
        super().__init__(message)


@dataclass
class ExperimentConfig:
    """One experiment: simulator, dataset, training, metric and sweep
    options plus where its outputs go.

    Attributes
    ----------
    simulation:     SimConfig
    training:       TrainConfig
    n_cycles:       int
    family:         str
                    sine, ramp or mixed.
    dataset_seed:   int
    preset:         str
                    knee or wrist; simulation keys override the preset.
    eval_split:     str
    eval_frames:    int or None
                    Frame count evaluation cycles are resampled to; None
                    keeps their stored length.
    shot_counts:    tuple of int
    collapse_seeds: tuple of int
    sweep_channel:  str
    run_id:         str
    out_dir:        str
    """
    simulation: SimConfig
    training: TrainConfig
    n_cycles: int
    family: str = "sine"
    dataset_seed: int = 0
    preset: str = "knee"
    eval_split: str = "test"
    eval_frames: int = None
    shot_counts: tuple = (1, 10, 20, 40, 60, 80, 100)
    collapse_seeds: tuple = (0, 1, 2, 3, 4)
    sweep_channel: str = "theta"
    run_id: str = "run"
    out_dir: str = "runs"

    def validate(self):
        """Raises ConfigError naming the first invalid key."""
        try:
            self.simulation.validate()
        except ValueError as err:
            raise ConfigError(str(err), "simulation")
        try:
            self.training.validate()
        except ValueError as err:
            raise ConfigError(str(err), "training")
        if int(self.n_cycles) != self.n_cycles or self.n_cycles < 1:
            raise ConfigError("dataset.n_cycles must be a positive integer",
                              "dataset.n_cycles")
        if self.family not in ("sine", "ramp", "mixed"):
            raise ConfigError("dataset.family must be sine, ramp or mixed",
                              "dataset.family")
        if self.eval_split not in SPLIT_TAGS:
            raise ConfigError("metrics.split must be one of %s"
                              % (SPLIT_TAGS,), "metrics.split")
        if self.eval_frames is not None and (
                int(self.eval_frames) != self.eval_frames or
                self.eval_frames < 3):
            raise ConfigError("metrics.frames must be an integer >= 3",
                              "metrics.frames")
        if not self.shot_counts or any(k < 1 for k in self.shot_counts):
            raise ConfigError("sweep.shot_counts must be positive",
                              "sweep.shot_counts")
        if not self.collapse_seeds:
            raise ConfigError("sweep.seeds must not be empty", "sweep.seeds")
        if not RUN_ID.match(str(self.run_id)):
            raise ConfigError("run_id %r is not a safe directory name"
                              % self.run_id, "run_id")

    def with_seed(self, seed):
        """Copy with the dataset, simulation and training seeds set to
        seed."""
        return replace(self, dataset_seed=seed,
                       simulation=replace(self.simulation, seed=seed),
                       training=replace(self.training, seed=seed))

    def to_dict(self):
        """The effective configuration, every default filled in."""
        simulation = asdict(self.simulation)
        simulation["preset"] = self.preset
        return {"run_id": self.run_id,
                "out_dir": self.out_dir,
                "simulation": simulation,
                "dataset": {"n_cycles": self.n_cycles,
                            "family": self.family,
                            "seed": self.dataset_seed},
                "training": self.training.to_dict(),
                "metrics": {"split": self.eval_split,
                            "frames": self.eval_frames},
                "sweep": {"shot_counts": list(self.shot_counts),
                          "seeds": list(self.collapse_seeds),
                          "channel": self.sweep_channel}}


def find_line(text, key):
    """Line number of the first `"key":` in the config text, or None."""
    match = re.search(r'"%s"\s*:' % re.escape(key), text)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def _check_keys(section, values, allowed, text):
    if not isinstance(values, dict):
        raise ConfigError("section %s must be an object" % section, section,
                          find_line(text, section))
    for key in values:
        if key not in allowed:
            raise ConfigError("unknown key %s.%s" % (section, key),
                              "%s.%s" % (section, key),
                              find_line(text, key))


def _kind(value):
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, (list, tuple)):
        return "list"
    return None


def _check_types(section, values, defaults, text):
    """Raises ConfigError for a value whose JSON type differs from its
    default's. Strings may also be given as numbers; null is left to
    validation."""
    for key, value in values.items():
        expected = _kind(defaults.get(key))
        kind = _kind(value)
        if value is None or expected is None or kind == expected or \
                (expected == "string" and kind == "number"):
            continue
        raise ConfigError("%s.%s must be a %s, not %r"
                          % (section, key, expected, value),
                          "%s.%s" % (section, key), find_line(text, key))


def _build(section, build, text):
    """Runs build(), turning the TypeError or ValueError of a malformed
    value into a ConfigError anchored at the section."""
    try:
        return build()
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError("invalid %s: %s" % (section, err), section,
                          find_line(text, section))


def parse_config(document, text=""):
    """Builds an ExperimentConfig from a decoded config document.

    Parameters
    ----------
    document:   dict
    text:       str
                Raw file text, used to anchor error messages to lines.

    Returns
    -------
    config: ExperimentConfig
    """
    if not isinstance(document, dict):
        raise ConfigError("the config must be a JSON object", lineno=1)
    for key in document:
        if key not in SECTIONS + ("run_id", "out_dir"):
            raise ConfigError("unknown key %s" % key, key,
                              find_line(text, key))
    for section in REQUIRED_SECTIONS:
        if section not in document:
            raise ConfigError("missing required key %s" % section, section,
                              1)

    sim_values = dict(document["simulation"]) if isinstance(
        document["simulation"], dict) else document["simulation"]
    sim_keys = [f.name for f in fields(SimConfig)] + ["preset"]
    _check_keys("simulation", sim_values, sim_keys, text)
    preset = sim_values.pop("preset", "knee")
    if preset not in PRESETS:
        raise ConfigError("simulation.preset must be one of %s"
                          % (PRESETS,), "simulation.preset",
                          find_line(text, "preset"))
    base = asdict(getattr(SimConfig, preset)())
    _check_types("simulation", sim_values, base, text)
    base.update(sim_values)
    simulation = _build("simulation", lambda: SimConfig.from_dict(base),
                        text)

    dataset = document["dataset"]
    _check_keys("dataset", dataset, DATASET_KEYS, text)
    if "n_cycles" not in dataset:
        raise ConfigError("missing required key dataset.n_cycles",
                          "dataset.n_cycles", find_line(text, "dataset"))
    _check_types("dataset", dataset,
                 {"n_cycles": 1, "family": "sine", "seed": 0}, text)

    train_values = document["training"]
    _check_keys("training", train_values,
                [f.name for f in fields(TrainConfig)], text)
    _check_types("training", train_values, TrainConfig().to_dict(), text)
    training = _build("training",
                      lambda: TrainConfig.from_dict(train_values), text)

    metrics = document.get("metrics", {})
    _check_keys("metrics", metrics, METRIC_KEYS, text)
    _check_types("metrics", metrics, {"split": "test", "frames": 0}, text)
    sweep = document.get("sweep", {})
    _check_keys("sweep", sweep, SWEEP_KEYS, text)
    _check_types("sweep", sweep, {"shot_counts": [], "seeds": [],
                                  "channel": "theta"}, text)

    config = ExperimentConfig(
        simulation=simulation,
        training=training,
        n_cycles=dataset["n_cycles"],
        family=dataset.get("family", "sine"),
        dataset_seed=dataset.get("seed", 0),
        preset=preset,
        eval_split=metrics.get("split", "test"),
        eval_frames=metrics.get("frames"),
        shot_counts=tuple(sweep.get("shot_counts",
                                    ExperimentConfig.shot_counts)),
        collapse_seeds=tuple(sweep.get("seeds",
                                       ExperimentConfig.collapse_seeds)),
        sweep_channel=sweep.get("channel", "theta"),
        run_id=document.get("run_id", "run"),
        out_dir=document.get("out_dir", "runs"))
    try:
        config.validate()
    except ConfigError as err:
        leaf = (err.key or "").split(".")[-1]
        raise ConfigError(str(err), err.key,
                          find_line(text, leaf) if leaf else None)
    except (TypeError, ValueError) as err:
        raise ConfigError("invalid value: %s" % err)
    return config


def load_config(path):
    """Reads and validates a JSON experiment config file.

    Parameters
    ----------
    path:   str
            Must have a .json extension.

    Returns
    -------
    config: ExperimentConfig
    """
    if not path.lower().endswith(".json"):
        raise ConfigError("config file %s does not have a .json extension"
                          % path, "path")
    if not os.path.isfile(path):
        raise ConfigError("config file %s cannot be read" % path, "path")
    with open(path) as infile:
        text = infile.read()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("invalid JSON: %s" % err.msg, lineno=err.lineno)
    config = parse_config(document, text)
    logging.info("Config %s loaded (run id %s)" % (path, config.run_id))
    return config
