"""Flat ``key = value`` run configuration.

Lines starting with ``#`` (and trailing ``# ...`` comments) are ignored;
dotted keys such as ``dataset.kind`` group related settings. Unknown keys and
unparsable values raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from . import losses as L
from . import model as mdl
from . import schedule as S
from . import synthdata as D
from .autodiff import ContractError

# key -> (type, default); ``None`` default for dataset.seed means "follow seed"
KEYS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "steps": (int, 30000),
    "batch_size": (int, 32),
    "d": (int, 6),
    "k": (int, 4),
    "margin": (float, 1.0),
    "tau": (float, 10.0),
    "beta1_max": (float, 0.1),
    "beta2_max": (float, 100.0),
    "beta3_max": (float, 1e-4),
    "warmup_frac": (float, 0.2),
    "entry_reg": (float, 0.2),
    "entry_dis": (float, 0.3),
    "entry_cons": (float, 0.4),
    "ramp_frac": (float, 0.1),
    "lr": (float, 5e-4),
    "oracle": (str, "auto"),
    "dataset.kind": (str, "torus"),
    "dataset.factors": (str, "circle,circle"),
    "dataset.ambient_dim": (int, 12),
    "dataset.noise": (float, 0.01),
    "dataset.policy": (str, "one"),
    "dataset.seed": (int, None),
    "eval.samples": (int, 10000),
    "eval.bins": (int, 20),
    "eval.levels": (int, 10),
    "def2.pairs": (int, 2000),
    "def2.threshold": (float, 0.2),
    "verify.k": (int, 3),
    "verify.d": (int, 6),
    "verify.steps": (int, 20000),
    "verify.seeds": (int, 10),
}


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def defaults() -> dict:
    return {k: v for k, (_, v) in KEYS.items()}


def _convert(key: str, raw: str):
    kind = KEYS[key][0]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def parse(text: str) -> dict:
    cfg = defaults()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, "unknown config key")
        cfg[key] = _convert(key, raw)
    return cfg


def load(path: str | Path) -> dict:
    return parse(Path(path).read_text())


def dump(cfg: dict) -> str:
    """Canonical text form: every key in sorted order, unset dataset.seed omitted."""
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()) if v is not None)


def content_hash(cfg: dict) -> str:
    """Git-style blob hash of the canonical config text."""
    body = dump(cfg).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def with_seed(cfg: dict, seed: int) -> dict:
    out = dict(cfg)
    out["seed"] = seed
    return out


def dataset_seed(cfg: dict) -> int:
    return cfg["seed"] if cfg["dataset.seed"] is None else cfg["dataset.seed"]


def build_dataset(cfg: dict) -> D.ProductManifold:
    try:
        return D.make_dataset(cfg["dataset.kind"], cfg["dataset.factors"], cfg["dataset.ambient_dim"],
                              cfg["dataset.noise"], dataset_seed(cfg))
    except ContractError as exc:
        raise ConfigError("dataset", str(exc)) from None


def build_train_config(cfg: dict) -> S.TrainConfig:
    """TrainConfig from a parsed config; contract violations name the offending group."""
    if cfg["dataset.policy"] not in D.POLICIES:
        raise ConfigError("dataset.policy", f"must be one of {D.POLICIES}")
    try:
        model = mdl.ModelConfig(input_dim=cfg["dataset.ambient_dim"], latent_dim=cfg["d"],
                                num_subspaces=cfg["k"])
    except (ContractError, ValueError) as exc:
        raise ConfigError("d/k", str(exc)) from None
    try:
        sched = S.BetaSchedule(cfg["steps"], cfg["warmup_frac"], cfg["entry_reg"], cfg["entry_dis"],
                               cfg["entry_cons"], cfg["ramp_frac"], cfg["beta1_max"], cfg["beta2_max"],
                               cfg["beta3_max"])
    except ContractError as exc:
        raise ConfigError("schedule", str(exc)) from None
    try:
        weights = L.LossWeights(cfg["beta1_max"], cfg["beta2_max"], cfg["beta3_max"], cfg["margin"], cfg["tau"])
        return S.TrainConfig(model=model, schedule=sched, seed=cfg["seed"], batch_size=cfg["batch_size"],
                             weights=weights, lr=cfg["lr"], policy=cfg["dataset.policy"], oracle=cfg["oracle"])
    except ContractError as exc:
        raise ConfigError("training", str(exc)) from None
