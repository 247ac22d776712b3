"""Flat key = value run configuration with a strict schema.

A run config covers the model, trainer, degradation, scales, corpus paths
and output directory.  Files hold one `key = value` per line with optional
``#`` comments; unknown keys and malformed values are rejected with the
offending line number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import DiskCorpus, SyntheticCorpus, split_corpus
from .errors import ConfigError
from .model import SgenConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    levels: int = 3
    base_channels: int = 8
    combiner: str = "sgu"
    lrelu_alpha: float = 0.2
    image_channels: int = 1
    disc_channels: int = 8
    # trainer
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    lam: float = 10.0
    loss_variant: str = "minimax"
    mse_only: bool = False
    seed: int = 0
    val_every: int = 200
    val_count: int = 8
    grid_every: int = 0
    divergence_limit: float = 1e6
    # degradation
    down_factor: int = 4
    noise: str = "gaussian"
    sigma: float = 30.0
    uniform_lo: float = 0.0
    uniform_hi: float = 30.0
    # data
    scales: str = "48x32,64x48,80x64"
    corpus: str = ""
    val_corpus: str = ""
    split: str = "0.8,0.1,0.1"
    synthetic: int = 0
    synthetic_offset: int = 0
    val_images: int = 200
    # artifacts
    out: str = "sgen_out"

    # -- derived objects -------------------------------------------------

    def sgen_config(self) -> SgenConfig:
        return SgenConfig(levels=self.levels, base_channels=self.base_channels,
                          combiner=self.combiner, lrelu_alpha=self.lrelu_alpha,
                          image_channels=self.image_channels,
                          disc_channels=self.disc_channels, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           lam=self.lam, loss_variant=self.loss_variant,
                           mse_only=self.mse_only, seed=self.seed,
                           val_every=self.val_every, val_count=self.val_count,
                           grid_every=self.grid_every,
                           divergence_limit=self.divergence_limit)

    def degradation_spec(self):
        from .data import DegradationSpec

        return DegradationSpec(down_factor=self.down_factor, noise=self.noise,
                               sigma=self.sigma, uniform_lo=self.uniform_lo,
                               uniform_hi=self.uniform_hi)

    def scale_list(self) -> list:
        """Parse "HxW,HxW,..." and check divisibility for model and degradation."""
        out = []
        for part in self.scales.split(","):
            part = part.strip()
            try:
                h, w = (int(v) for v in part.lower().split("x"))
            except ValueError:
                raise ConfigError(f"bad scale {part!r}; scales look like 48x32") from None
            out.append((h, w))
        if not out:
            raise ConfigError("scales is empty")
        need = math.lcm(self.sgen_config().divisor, self.down_factor)
        for h, w in out:
            if h % need or w % need or h < need or w < need:
                raise ConfigError(
                    f"scale {h}x{w} dims must be positive multiples of {need} "
                    f"(lcm of generator divisor and down_factor)")
        return out

    def corpora(self):
        """Build (train, val) corpora from synthetic count or corpus directory."""
        if self.synthetic > 0:
            train = SyntheticCorpus(self.synthetic, offset=self.synthetic_offset,
                                    channels=self.image_channels)
            val = SyntheticCorpus(self.val_images,
                                  offset=self.synthetic_offset + self.synthetic,
                                  channels=self.image_channels)
            return train, val
        if self.corpus:
            disk = DiskCorpus(self.corpus, channels=self.image_channels)
            ratios = self._split_ratios()
            parts = split_corpus(disk, ratios)
            if len(parts[0]) == 0 or len(parts[1]) == 0:
                raise ConfigError(
                    f"corpus {self.corpus} with split {self.split} leaves an empty train/val part")
            return parts[0], parts[1]
        raise ConfigError(
            "no training data: set the 'corpus' key to an image directory "
            "or pass --synthetic COUNT")

    def eval_corpus(self):
        """The held-out corpus used by eval: explicit val_corpus, synthetic ids
        starting at synthetic_offset, or the val split of the corpus directory."""
        if self.val_corpus:
            return DiskCorpus(self.val_corpus, channels=self.image_channels)
        if self.synthetic > 0:
            return SyntheticCorpus(self.synthetic, offset=self.synthetic_offset,
                                   channels=self.image_channels)
        if self.corpus:
            return self.corpora()[1]
        raise ConfigError(
            "no evaluation data: set 'val_corpus' or 'corpus', or pass --synthetic COUNT")

    def _split_ratios(self):
        try:
            ratios = tuple(float(v) for v in self.split.split(","))
        except ValueError:
            raise ConfigError(f"bad split {self.split!r}; expected e.g. 0.8,0.1,0.1") from None
        if len(ratios) != 3:
            raise ConfigError(f"split needs three ratios (train,val,test), got {self.split!r}")
        return ratios


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce(key: str, text: str, where: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}[_FIELD_TYPES[key]]
    if typ is bool:
        flag = _BOOL_WORDS.get(text.lower())
        if flag is None:
            raise ConfigError(f"{where}: {key} wants true/false, got {text!r}")
        return flag
    if typ is str:
        return text
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(f"{where}: {key} wants {typ.__name__}, got {text!r}") from None


def parse_config_file(path) -> dict:
    """Read key = value lines; returns a typed dict of overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {raw!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate config key {key!r}")
        values[key] = _coerce(key, text, where)
    return values


def build_run_config(file_path=None, overrides=None) -> RunConfig:
    """Defaults, then config-file values, then explicit flag overrides."""
    run = RunConfig()
    if file_path:
        run = replace(run, **parse_config_file(file_path))
    if overrides:
        unknown = set(overrides) - set(_FIELD_TYPES)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        run = replace(run, **overrides)
    return run
