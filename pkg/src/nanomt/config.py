"""Experiment and generator configuration files.

Both use a line-oriented key=value format with section headers (INI syntax):
an experiment file drives ``nanomt pretrain``, a generator file drives
``nanomt gen-tasks``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import AdapterConfig
from .data import SyntheticTaskSpec
from .errors import ContractError
from .training import TrainConfig

MODEL_KEYS = ("num_layers", "d_model", "d_ff", "num_heads", "max_len")


@dataclass
class ExperimentConfig:
    manifest: str
    train: TrainConfig
    model_opts: dict = field(default_factory=dict)
    vocab_mode: str = "word"
    max_vocab: int | None = None
    adapters: dict[str, AdapterConfig] = field(default_factory=dict)
    default_adapter: AdapterConfig = field(
        default_factory=lambda: AdapterConfig(bottleneck=8))
    out_dir: str = "."

    def adapter_for(self, task_id: str) -> AdapterConfig:
        return self.adapters.get(task_id, self.default_adapter)


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None)


def load_experiment(path: Path | str) -> ExperimentConfig:
    parser = _parser()
    if not parser.read(path, encoding="utf-8"):
        raise ContractError(f"cannot read config file {path}")
    if "data" not in parser or "manifest" not in parser["data"]:
        raise ContractError(f"{path}: missing [data] manifest entry")

    model_opts: dict = {}
    if "model" in parser:
        for key in MODEL_KEYS:
            if key in parser["model"]:
                model_opts[key] = parser["model"].getint(key)
        if "dropout" in parser["model"]:
            model_opts["dropout"] = parser["model"].getfloat("dropout")

    train_section = parser["train"] if "train" in parser else {}
    train = TrainConfig(
        steps=int(train_section.get("steps", 1000)),
        eval_every=int(train_section.get("eval_every", 100)),
        seed=int(train_section.get("seed", 0)),
        base_lr=float(train_section.get("base_lr", 1.0)),
        warmup=int(train_section.get("warmup", 400)),
        batch_tokens=int(train_section.get("batch_tokens", 1024)),
        select_by=train_section.get("select_by", "loss"),
        temperature=float(parser["data"].get("temperature", 1.0)),
        dev_bleu_cap=int(train_section.get("dev_bleu_cap", 64)),
    )

    adapters: dict[str, AdapterConfig] = {}
    default_adapter = AdapterConfig(bottleneck=8)
    for section in parser.sections():
        if section == "adapter":
            default_adapter = _adapter_from(parser[section])
        elif section.startswith("adapter:"):
            adapters[section.split(":", 1)[1]] = _adapter_from(parser[section])

    out_dir = parser["output"].get("dir", ".") if "output" in parser else "."
    return ExperimentConfig(
        manifest=parser["data"]["manifest"],
        train=train,
        model_opts=model_opts,
        vocab_mode=parser["data"].get("vocab_mode", "word"),
        max_vocab=(parser["data"].getint("max_vocab")
                   if "max_vocab" in parser["data"] else None),
        adapters=adapters,
        default_adapter=default_adapter,
        out_dir=out_dir,
    )


def _adapter_from(section) -> AdapterConfig:
    return AdapterConfig(
        bottleneck=int(section.get("bottleneck", 8)),
        init_scale=float(section.get("init_scale", 0.01)),
    )


def save_experiment(config: ExperimentConfig, path: Path | str) -> Path:
    parser = _parser()
    parser["model"] = {k: str(v) for k, v in config.model_opts.items()}
    parser["data"] = {"manifest": config.manifest,
                      "temperature": repr(config.train.temperature),
                      "vocab_mode": config.vocab_mode}
    if config.max_vocab is not None:
        parser["data"]["max_vocab"] = str(config.max_vocab)
    train = config.train
    parser["train"] = {
        "steps": str(train.steps), "eval_every": str(train.eval_every),
        "seed": str(train.seed), "base_lr": repr(train.base_lr),
        "warmup": str(train.warmup), "batch_tokens": str(train.batch_tokens),
        "select_by": train.select_by, "dev_bleu_cap": str(train.dev_bleu_cap),
    }
    parser["adapter"] = {"bottleneck": str(config.default_adapter.bottleneck),
                         "init_scale": repr(config.default_adapter.init_scale)}
    for task_id, adapter in config.adapters.items():
        parser[f"adapter:{task_id}"] = {
            "bottleneck": str(adapter.bottleneck),
            "init_scale": repr(adapter.init_scale),
        }
    parser["output"] = {"dir": config.out_dir}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def load_generator_spec(path: Path | str) -> list[SyntheticTaskSpec]:
    """Parse a gen-tasks spec: one [family] section plus [task:ID] sections."""
    parser = _parser()
    if not parser.read(path, encoding="utf-8"):
        raise ContractError(f"cannot read generator spec {path}")
    family = parser["family"] if "family" in parser else {}
    base = {
        "content_vocab": int(family.get("content_vocab", 64)),
        "min_len": int(family.get("min_len", 4)),
        "max_len": int(family.get("max_len", 10)),
    }
    specs: list[SyntheticTaskSpec] = []
    for section in parser.sections():
        if not section.startswith("task:"):
            continue
        sec = parser[section]
        specs.append(SyntheticTaskSpec(
            task_id=section.split(":", 1)[1],
            kind=sec.get("kind", "domain"),
            train_size=int(sec.get("train", 2000)),
            dev_size=int(sec.get("dev", 500)),
            test_size=int(sec.get("test", 500)),
            shift_fraction=float(sec.get("shift", 0.0)),
            reorder=sec.getboolean("reorder", fallback=False),
            new_language=sec.getboolean("new_language", fallback=False),
            **base,
        ))
    if not specs:
        raise ContractError(f"{path}: no [task:ID] sections found")
    return specs
