"""Declarative experiment configuration.

Config files are INI-style ``key = value`` text with section headers.  Every
key has a documented default, so an empty file is a valid experiment; all
validation problems are reported together, not just the first.

Defaults table (one place for every knob):

    [corpus]   kind=synthetic classes=10 train_sets_per_gallery=8
               test_sets_per_gallery=2 images_per_set=20 image_size=16
               noise=0.05 | digits: train_sets_per_gallery=2 images_per_set=100
               test_sets_total=105 image_size=28 | idx: set_size=100
               train_fraction=0.8
    [attack]   kind=fgsm epsilon=0.05 pgd_step_size=epsilon/4 pgd_steps=10
               deepfool_max_iter=50 deepfool_overshoot=0.02
    [training] epochs=20 adv_epochs=20 learning_rate=0.0001 batch_size=64
               early_stop_accuracy=0.995
    [mc]       passes=50
    [voting]   beta=-1.0 tie_break=highest-mean-posterior
    [run]      ratios=0,0.5,0.8,1.0 adversarial_training=true master_seed=0
               output_dir=runs attack_target=baseline
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attacks import AttackConfig, AttackError
from .pipeline import McConfig, PipelineError, TrainConfig
from .voting import VotingConfig, VotingError

OUTPUT_ROOT_ENV = "SETDEFENSE_OUTPUT_ROOT"

_SECTIONS = {
    "corpus": {
        "kind", "classes", "train_sets_per_gallery", "test_sets_per_gallery",
        "images_per_set", "image_size", "noise", "images_path", "labels_path",
        "set_size", "train_fraction", "test_sets_total", "resize_to", "shuffle_sets",
    },
    "attack": {
        "kind", "epsilon", "pgd_step_size", "pgd_steps",
        "deepfool_max_iter", "deepfool_overshoot",
    },
    "training": {"epochs", "adv_epochs", "learning_rate", "batch_size", "early_stop_accuracy"},
    "mc": {"passes"},
    "voting": {"beta", "tie_break"},
    "run": {"ratios", "adversarial_training", "master_seed", "output_dir", "attack_target"},
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class CorpusSpec:
    kind: str = "synthetic"
    classes: int = 10
    train_sets_per_gallery: int = 8
    test_sets_per_gallery: int = 2
    images_per_set: int = 20
    image_size: int = 16
    noise: float = 0.05
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    set_size: int = 100
    train_fraction: float = 0.8
    test_sets_total: int = 105
    resize_to: int = 0  # 0 = keep native size


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec
    attack: AttackConfig
    training: TrainConfig
    adv_epochs: int
    mc: McConfig
    voting: VotingConfig
    ratios: list[float]
    adversarial_training: bool
    master_seed: int
    output_dir: Path
    attack_target: str
    resolved: dict = field(default_factory=dict)  # full key/value echo for manifests

    def adv_training_config(self) -> TrainConfig:
        return TrainConfig(self.adv_epochs, self.training.learning_rate,
                           self.training.batch_size, self.training.early_stop_accuracy)


def _parse_text(text: str, problems: list[str]) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        problems.append(f"unparseable config: {exc}")
        return {}
    values: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        values[section] = {}
        for key, value in parser.items(section):
            if key not in _SECTIONS[section]:
                problems.append(f"unknown key {section}.{key}")
            else:
                values[section][key] = value
    return values


def _get(values, section, key, default, conv, problems, check=None, bound_text=""):
    raw = values.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        parsed = conv(raw)
    except (TypeError, ValueError):
        problems.append(f"{section}.{key} = {raw!r} is not a valid {conv.__name__}")
        return default
    if check is not None and not check(parsed):
        problems.append(f"{section}.{key} = {raw!r} out of range {bound_text}")
        return default
    return parsed


def _boolean(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def resolve_output_dir(output_dir: str) -> Path:
    path = Path(output_dir)
    if not path.is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            path = Path(root) / path
    return path


def validate_text(text: str) -> ExperimentConfig:
    problems: list[str] = []
    values = _parse_text(text, problems)

    corpus = CorpusSpec()
    corpus.kind = _get(values, "corpus", "kind", "synthetic", str, problems,
                       lambda v: v in ("synthetic", "digits", "idx"),
                       "(synthetic, digits, idx)")
    if corpus.kind == "digits":
        corpus.train_sets_per_gallery = 2
        corpus.images_per_set = 100
        corpus.image_size = 28
    corpus.classes = _get(values, "corpus", "classes", corpus.classes, int, problems,
                          lambda v: v >= 2, "(>= 2)")
    corpus.train_sets_per_gallery = _get(values, "corpus", "train_sets_per_gallery",
                                         corpus.train_sets_per_gallery, int, problems,
                                         lambda v: v >= 1, "(>= 1)")
    corpus.test_sets_per_gallery = _get(values, "corpus", "test_sets_per_gallery",
                                        corpus.test_sets_per_gallery, int, problems,
                                        lambda v: v >= 1, "(>= 1)")
    corpus.images_per_set = _get(values, "corpus", "images_per_set", corpus.images_per_set,
                                 int, problems, lambda v: v >= 1, "(>= 1)")
    corpus.image_size = _get(values, "corpus", "image_size", corpus.image_size, int, problems,
                             lambda v: v >= 8, "(>= 8)")
    corpus.noise = _get(values, "corpus", "noise", corpus.noise, float, problems,
                        lambda v: v >= 0, "(>= 0)")
    corpus.images_path = values.get("corpus", {}).get("images_path")
    corpus.labels_path = values.get("corpus", {}).get("labels_path")
    corpus.set_size = _get(values, "corpus", "set_size", corpus.set_size, int, problems,
                           lambda v: v >= 1, "(>= 1)")
    corpus.train_fraction = _get(values, "corpus", "train_fraction", corpus.train_fraction,
                                 float, problems, lambda v: 0 < v < 1, "(0, 1)")
    corpus.test_sets_total = _get(values, "corpus", "test_sets_total", corpus.test_sets_total,
                                  int, problems, lambda v: v >= 10, "(>= 10)")
    corpus.resize_to = _get(values, "corpus", "resize_to", 0, int, problems,
                            lambda v: v == 0 or v >= 8, "(0 or >= 8)")
    if corpus.kind == "idx":
        for key, value in (("images_path", corpus.images_path),
                           ("labels_path", corpus.labels_path)):
            if value is None:
                problems.append(f"corpus.{key} is required for kind=idx")
            elif not Path(value).exists():
                problems.append(f"corpus.{key} = {value!r} does not exist")

    epsilon = _get(values, "attack", "epsilon", 0.05, float, problems,
                   lambda v: v >= 0, "(>= 0)")
    attack_kwargs = dict(
        kind=_get(values, "attack", "kind", "fgsm", str, problems,
                  lambda v: v in ("fgsm", "pgd", "deepfool"), "(fgsm, pgd, deepfool)"),
        epsilon=epsilon,
        pgd_steps=_get(values, "attack", "pgd_steps", 10, int, problems,
                       lambda v: v >= 0, "(>= 0)"),
        deepfool_max_iter=_get(values, "attack", "deepfool_max_iter", 50, int, problems,
                               lambda v: v >= 0, "(>= 0)"),
        deepfool_overshoot=_get(values, "attack", "deepfool_overshoot", 0.02, float, problems,
                                lambda v: v >= 0, "(>= 0)"),
    )
    step_raw = values.get("attack", {}).get("pgd_step_size")
    if step_raw is not None:
        attack_kwargs["pgd_step_size"] = _get(values, "attack", "pgd_step_size", None,
                                              float, problems, lambda v: v >= 0, "(>= 0)")

    training_kwargs = dict(
        epochs=_get(values, "training", "epochs", 20, int, problems, lambda v: v >= 1, "(>= 1)"),
        learning_rate=_get(values, "training", "learning_rate", 0.0001, float, problems,
                           lambda v: v > 0, "(> 0)"),
        batch_size=_get(values, "training", "batch_size", 64, int, problems,
                        lambda v: v >= 1, "(>= 1)"),
        early_stop_accuracy=_get(values, "training", "early_stop_accuracy", 0.995, float,
                                 problems, lambda v: 0 < v <= 1, "(0, 1]"),
    )
    adv_epochs = _get(values, "training", "adv_epochs", 20, int, problems,
                      lambda v: v >= 1, "(>= 1)")
    passes = _get(values, "mc", "passes", 50, int, problems, lambda v: v >= 1, "(>= 1)")
    beta = _get(values, "voting", "beta", -1.0, float, problems,
                lambda v: abs(v) <= 500, "[-500, 500]")
    tie_break = _get(values, "voting", "tie_break", "highest-mean-posterior", str, problems,
                     lambda v: v in ("highest-mean-posterior", "lowest-class-index"),
                     "(highest-mean-posterior, lowest-class-index)")

    ratios_raw = values.get("run", {}).get("ratios", "0, 0.5, 0.8, 1.0")
    ratios: list[float] = []
    for token in ratios_raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            ratio = float(token)
        except ValueError:
            problems.append(f"run.ratios entry {token!r} is not a number")
            continue
        if not (0.0 <= ratio <= 1.0):
            problems.append(f"run.ratios entry {token} out of range [0, 1]")
            continue
        ratios.append(ratio)
    if not ratios:
        problems.append("run.ratios must list at least one ratio")
    adversarial_training = _get(values, "run", "adversarial_training", True, _boolean, problems)
    master_seed = _get(values, "run", "master_seed", 0, int, problems)
    output_dir = values.get("run", {}).get("output_dir", "runs")
    attack_target = _get(values, "run", "attack_target", "baseline", str, problems,
                         lambda v: v in ("baseline", "defended"), "(baseline, defended)")

    try:
        attack = AttackConfig(**attack_kwargs)
    except AttackError as exc:
        problems.append(str(exc))
        attack = AttackConfig()
    try:
        training = TrainConfig(**training_kwargs)
    except PipelineError as exc:
        problems.append(str(exc))
        training = TrainConfig()
    try:
        mc = McConfig(passes=passes, seed=master_seed)
    except PipelineError as exc:
        problems.append(str(exc))
        mc = McConfig()
    try:
        voting = VotingConfig(beta=beta, tie_break=tie_break)
    except VotingError as exc:
        problems.append(str(exc))
        voting = VotingConfig()

    resolved_dir = resolve_output_dir(output_dir)
    try:
        resolved_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        problems.append(f"run.output_dir = {output_dir!r} is not writable: {exc}")

    if problems:
        raise ConfigError(problems)

    config = ExperimentConfig(
        corpus=corpus, attack=attack, training=training, adv_epochs=adv_epochs,
        mc=mc, voting=voting, ratios=ratios, adversarial_training=adversarial_training,
        master_seed=master_seed, output_dir=resolved_dir, attack_target=attack_target,
    )
    config.resolved = _echo(config, output_dir)
    return config


def _echo(config: ExperimentConfig, raw_output_dir: str) -> dict:
    c, a, t = config.corpus, config.attack, config.training
    echo = {
        "corpus.kind": c.kind,
        "corpus.classes": c.classes,
        "corpus.train_sets_per_gallery": c.train_sets_per_gallery,
        "corpus.test_sets_per_gallery": c.test_sets_per_gallery,
        "corpus.images_per_set": c.images_per_set,
        "corpus.image_size": c.image_size,
        "corpus.noise": c.noise,
        "corpus.set_size": c.set_size,
        "corpus.train_fraction": c.train_fraction,
        "corpus.test_sets_total": c.test_sets_total,
        "corpus.resize_to": c.resize_to,
        "attack.kind": a.kind,
        "attack.epsilon": a.epsilon,
        "attack.pgd_step_size": a.step_size,
        "attack.pgd_steps": a.pgd_steps,
        "attack.deepfool_max_iter": a.deepfool_max_iter,
        "attack.deepfool_overshoot": a.deepfool_overshoot,
        "training.epochs": t.epochs,
        "training.adv_epochs": config.adv_epochs,
        "training.learning_rate": t.learning_rate,
        "training.batch_size": t.batch_size,
        "training.early_stop_accuracy": t.early_stop_accuracy,
        "mc.passes": config.mc.passes,
        "voting.beta": config.voting.beta,
        "voting.tie_break": config.voting.tie_break,
        "run.ratios": ", ".join(repr(r) for r in config.ratios),
        "run.adversarial_training": config.adversarial_training,
        "run.master_seed": config.master_seed,
        "run.output_dir": raw_output_dir,
        "run.attack_target": config.attack_target,
    }
    if c.images_path:
        echo["corpus.images_path"] = c.images_path
        echo["corpus.labels_path"] = c.labels_path
    return echo


def validate_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    """Load, default, override and validate a config file."""
    text = Path(path).read_text() if path is not None else ""
    if overrides:
        text = apply_overrides(text, overrides)
    return validate_text(text)


def apply_overrides(text: str, overrides: list[str]) -> str:
    """Merge ``section.key=value`` strings over a config text."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    problems = []
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override {item!r} must look like section.key=value")
            continue
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value.strip())
    if problems:
        raise ConfigError(problems)
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        for key, value in parser.items(section):
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
