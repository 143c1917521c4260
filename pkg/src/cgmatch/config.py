"""Run configuration: one flat dataclass, persisted as a sectioned key=value
file so every run is replayable from its resolved config alone."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace

from . import data as data_mod
from . import selection

CGMATCH = "cgmatch"
FIXMATCH = "fixmatch"
SUPERVISED = "supervised"
METHODS = (CGMATCH, FIXMATCH, SUPERVISED)


class ConfigError(ValueError):
    """Invalid or missing configuration; the message names the field."""


@dataclass
class RunConfig:
    # [data]
    kind: str = "blobs"
    k: int = 4
    labels_per_class: int = 4
    n_labeled: int = 20  # moons only; blobs derive it from k * labels_per_class
    n_unlabeled: int = 2000
    n_test: int = 1000
    spread: float = 2.0
    noise: float = 0.1
    dim: int | None = None
    data_seed: int = 1
    path: str | None = None
    sigma_weak: float | None = None
    sigma_strong: float | None = None
    dropout_rho: float = 0.2
    # [nn]
    hidden: tuple[int, ...] = (64, 64)
    # [countgap]
    warmup_window: int = 1000
    # [selection]
    mode: str = selection.GLOBAL_EMA
    ema_momentum: float = 0.999
    clamp: tuple[float, float] | None = None
    fixed_conf: float = 0.95
    # [losses]
    gce_q: float = 0.7
    easy_weight: float = 1.0
    unsup_weight: float = 1.0
    detach_weak_gce: bool = False
    # [training]
    method: str = "cgmatch"
    warmup_iters: int = 2048
    total_iters: int = 20000
    batch_labeled: int = 64
    unlabeled_ratio: int = 7
    lr: float = 0.03
    momentum: float = 0.9
    seed: int = 1
    eval_every: int = 500
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        def need(cond: bool, field_name: str, msg: str) -> None:
            if not cond:
                raise ConfigError(f"{field_name}: {msg}")

        need(self.kind in ("blobs", "moons"), "data.kind", f"unknown kind {self.kind!r}")
        need(self.k >= 2, "data.k", "need at least 2 classes")
        need(self.labels_per_class >= 1, "data.labels_per_class", "must be >= 1")
        need(self.n_labeled >= 2, "data.n_labeled", "must be >= 2")
        need(self.n_unlabeled >= 0, "data.n_unlabeled", "must be >= 0")
        need(self.n_test >= 1, "data.n_test", "must be >= 1")
        need(self.spread > 0, "data.spread", "must be positive")
        need(self.noise >= 0, "data.noise", "must be >= 0")
        need(0.0 <= self.dropout_rho < 1.0, "data.dropout_rho", "must be in [0, 1)")
        need(len(self.hidden) >= 1, "nn.hidden", "need at least one hidden layer")
        need(all(h >= 1 for h in self.hidden), "nn.hidden", "layer widths must be >= 1")
        need(self.warmup_window >= 1, "countgap.warmup_window", "must be >= 1")
        need(self.mode in selection.MODES, "selection.mode", f"unknown mode {self.mode!r}")
        need(0.0 <= self.ema_momentum < 1.0, "selection.ema_momentum", "must be in [0, 1)")
        if self.clamp is not None:
            lo, hi = self.clamp
            need(lo <= hi, "selection.clamp", f"bad range {lo}:{hi}")
        need(0.0 < self.gce_q <= 1.0, "losses.gce_q", "must be in (0, 1]")
        need(self.method in METHODS, "training.method", f"unknown method {self.method!r}")
        need(self.warmup_iters < self.total_iters, "training.warmup_iters", "must be < total_iters")
        need(self.warmup_iters >= 1, "training.warmup_iters", "must be >= 1")
        need(self.batch_labeled >= 1, "training.batch_labeled", "must be >= 1")
        need(self.unlabeled_ratio >= 0, "training.unlabeled_ratio", "must be >= 0")
        need(self.lr > 0, "training.lr", "must be positive")
        need(0.0 <= self.momentum < 1.0, "training.momentum", "must be in [0, 1)")
        need(self.eval_every >= 1, "training.eval_every", "must be >= 1")
        if self.method != SUPERVISED and self.unlabeled_ratio > 0:
            need(self.n_unlabeled >= 1 or self.path is not None, "data.n_unlabeled", "must be >= 1")
        return self


# (section, key) -> dataclass field; parse/format pairs per type tag
_LAYOUT: list[tuple[str, str, str, str]] = [
    ("data", "kind", "kind", "str"),
    ("data", "k", "k", "int"),
    ("data", "labels_per_class", "labels_per_class", "int"),
    ("data", "n_labeled", "n_labeled", "int"),
    ("data", "n_unlabeled", "n_unlabeled", "int"),
    ("data", "n_test", "n_test", "int"),
    ("data", "spread", "spread", "float"),
    ("data", "noise", "noise", "float"),
    ("data", "dim", "dim", "opt_int"),
    ("data", "seed", "data_seed", "int"),
    ("data", "path", "path", "opt_str"),
    ("data", "sigma_weak", "sigma_weak", "opt_float"),
    ("data", "sigma_strong", "sigma_strong", "opt_float"),
    ("data", "dropout_rho", "dropout_rho", "float"),
    ("nn", "hidden", "hidden", "ints"),
    ("countgap", "warmup_window", "warmup_window", "int"),
    ("selection", "mode", "mode", "str"),
    ("selection", "ema_momentum", "ema_momentum", "float"),
    ("selection", "clamp", "clamp", "opt_range"),
    ("selection", "fixed_conf", "fixed_conf", "float"),
    ("losses", "gce_q", "gce_q", "float"),
    ("losses", "easy_weight", "easy_weight", "float"),
    ("losses", "unsup_weight", "unsup_weight", "float"),
    ("losses", "detach_weak_gce", "detach_weak_gce", "bool"),
    ("training", "method", "method", "str"),
    ("training", "warmup_iters", "warmup_iters", "int"),
    ("training", "total_iters", "total_iters", "int"),
    ("training", "batch_labeled", "batch_labeled", "int"),
    ("training", "unlabeled_ratio", "unlabeled_ratio", "int"),
    ("training", "lr", "lr", "float"),
    ("training", "momentum", "momentum", "float"),
    ("training", "seed", "seed", "int"),
    ("training", "eval_every", "eval_every", "int"),
    ("training", "out_dir", "out_dir", "opt_str"),
]


def _parse(kind: str, text: str, where: str):
    text = text.strip()
    if kind.startswith("opt_") and text == "":
        return None
    try:
        if kind in ("int", "opt_int"):
            return int(text)
        if kind in ("float", "opt_float"):
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "ints":
            return tuple(int(p) for p in text.split(",") if p.strip())
        if kind == "opt_range":
            if text == "":
                return None
            lo, hi = text.split(":")
            return (float(lo), float(hi))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind}") from None
    return text  # str / opt_str


def _format(kind: str, value) -> str:
    if value is None:
        return ""
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "opt_range":
        return f"{value[0]!r}:{value[1]!r}"
    if kind in ("float", "opt_float"):
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",))
    parser.read_string(text)
    known = {(s, k) for s, k, _, _ in _LAYOUT}
    for section in parser.sections():
        for key in parser[section]:
            if (section, key) not in known:
                raise ConfigError(f"{section}.{key}: unknown configuration field")
    values = {}
    for section, key, attr, kind in _LAYOUT:
        if parser.has_option(section, key):
            values[attr] = _parse(kind, parser.get(section, key), f"{section}.{key}")
    cfg = base if base is not None else RunConfig()
    return replace(cfg, **values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    from pathlib import Path

    path = Path(path)
    with open(path) as fh:
        cfg = parse_config(fh.read(), base)
    # a relative dataset path means "next to this config file"
    if cfg.path and not Path(cfg.path).is_absolute():
        cfg = replace(cfg, path=str(path.parent / cfg.path))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a config; these win over
    anything read from file."""
    by_key = {(s, k): (attr, kind) for s, k, attr, kind in _LAYOUT}
    values = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        target, text = item.split("=", 1)
        section, key = target.split(".", 1)
        if (section, key) not in by_key:
            raise ConfigError(f"{target}: unknown configuration field")
        attr, kind = by_key[(section, key)]
        values[attr] = _parse(kind, text, target)
    return replace(cfg, **values)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, key, attr, kind in _LAYOUT:
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, _format(kind, getattr(cfg, attr)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def build_dataset(cfg: RunConfig) -> data_mod.Dataset:
    """Load the dataset the config points at, or generate it."""
    if cfg.path:
        return data_mod.load_dataset(cfg.path)
    if cfg.kind == "blobs":
        return data_mod.make_blobs(
            k=cfg.k,
            labels_per_class=cfg.labels_per_class,
            n_unlabeled=cfg.n_unlabeled,
            n_test=cfg.n_test,
            spread=cfg.spread,
            seed=cfg.data_seed,
            dim=cfg.dim,
        )
    return data_mod.make_two_moons(
        n_labeled=cfg.n_labeled,
        n_unlabeled=cfg.n_unlabeled,
        n_test=cfg.n_test,
        noise=cfg.noise,
        seed=cfg.data_seed,
    )


def augment_from_config(cfg: RunConfig, dataset: data_mod.Dataset) -> data_mod.AugmentConfig:
    base = data_mod.default_augment(dataset.feature_scale)
    return data_mod.AugmentConfig(
        sigma_weak=cfg.sigma_weak if cfg.sigma_weak is not None else base.sigma_weak,
        sigma_strong=cfg.sigma_strong if cfg.sigma_strong is not None else base.sigma_strong,
        dropout_rho=cfg.dropout_rho,
    )


def threshold_state_from_config(cfg: RunConfig) -> selection.ThresholdState:
    return selection.ThresholdState(
        mode=cfg.mode,
        momentum=cfg.ema_momentum,
        conf_clamp=cfg.clamp,
        fixed_conf=cfg.fixed_conf if cfg.mode == selection.FIXED else None,
    )


def config_fields() -> list[str]:
    """All override targets in section.key form (for CLI help)."""
    return [f"{s}.{k}" for s, k, _, _ in _LAYOUT]


def same_dataset(a: RunConfig, b: RunConfig) -> bool:
    """True when two configs describe the identical dataset."""
    data_attrs = [attr for section, _, attr, _ in _LAYOUT if section == "data"]
    return all(getattr(a, attr) == getattr(b, attr) for attr in data_attrs)
