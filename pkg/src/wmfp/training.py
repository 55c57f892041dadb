"""Autoencoder pretraining and joint fingerprint fine-tuning of {A, M, D, F}."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import affine_layers, compute_style, map_fingerprint, mapping_network, sample_bits
from .data import ImageDataset, SyntheticSceneSpec
from .fpdecoder import bits_from_logits, decode_logits, fingerprint_decoder
from .generator import StampedDecoder, decode, decoder_network, encode, encoder_network, set_variant, stamp
from .losses import DivergenceError, bce_from_logits, loss_quality
from .optim import AdamW
from .seeding import rng_for

log = logging.getLogger(__name__)

HELDOUT_START = 1_000_000


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    d_phi: int = 16
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda2_start: float = 0.0  # > 0: ramp lambda2 geometrically from this value
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 16
    iterations: int = 2000
    seed: int = 0
    variant: str = "all"
    robust: str = ""
    image_size: int = 32
    train_images: int = 2048
    data_seed: int = 0
    pretrain_iterations: int = 3000
    pretrain_lr: float = 2e-3
    pretrain_seed: int = 0
    log_every: int = 100
    eval_fingerprints: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_phi < 1:
            raise ConfigError("d_phi must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.lambda2_start < 0:
            raise ConfigError("lambda2_start must be non-negative")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.variant not in ("conv-only", "all"):
            raise ConfigError(f"variant must be 'conv-only' or 'all', got {self.variant!r}")
        if self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8")
        from .attacks import KINDS

        for kind in self.robust_kinds:
            if kind not in KINDS:
                raise ConfigError(f"unknown robust attack kind {kind!r}")

    @property
    def robust_kinds(self) -> list:
        return [k.strip() for k in self.robust.split(",") if k.strip()]

    def replace(self, **changes) -> "TrainConfig":
        data = asdict(self)
        data.update(changes)
        return TrainConfig(**data)

    def lambda2_at(self, it: int) -> float:
        """Quality weight at iteration ``it`` (1-based)."""
        if self.lambda2_start <= 0 or self.iterations == 1:
            return self.lambda2
        frac = (it - 1) / (self.iterations - 1)
        return float(self.lambda2_start * (self.lambda2 / self.lambda2_start) ** frac)

    def to_mapping(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            try:
                if isinstance(default, bool):
                    kwargs[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


# Desk-scale fine-tuning preset.  The defaults above are the reference
# settings (lr 1e-4, lambda1 = lambda2 = 1); at 2,000 iterations they trade
# image quality away, so the desk runs use a larger step and a quality
# weight ramped from 20 to 1500 while the bits are learned.
DESK_PRESET = {"learning_rate": 1e-3, "lambda2_start": 20.0, "lambda2": 1500.0}


def desk_config(**changes) -> TrainConfig:
    return TrainConfig(**{**DESK_PRESET, **changes})


def parse_key_values(text: str) -> dict:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("report iterations must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> dict:
        return self.records[-1]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class Pipeline:
    """Everything the distributor keeps: base model, fine-tuned D, M, A and F."""

    encoder: object
    base_decoder: object
    decoder: object
    mapping: object
    affine: object
    fpdecoder: object
    config: TrainConfig

    @property
    def d_phi(self) -> int:
        return self.config.d_phi

    def style(self, bits) -> dict:
        w = map_fingerprint(self.mapping, bits)
        return compute_style(self.affine, w, self.decoder.modulatable_layers())

    def generate(self, z, bits) -> Tensor:
        return decode(self.decoder, self.style(bits), z)

    def stamp(self, phi) -> StampedDecoder:
        style = {k: Tensor(v.data) for k, v in self.style(phi).items()}
        return stamp(self.decoder, style, phi.digest())

    def trainable(self) -> list:
        return (self.affine.parameters() + self.mapping.parameters() + self.decoder.parameters()
                + self.fpdecoder.parameters())


def scene_spec(config: TrainConfig) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(seed=config.data_seed, side=config.image_size)


def training_data(config: TrainConfig) -> ImageDataset:
    return ImageDataset(scene_spec(config), 0, config.train_images)


def heldout_data(config: TrainConfig, count: int) -> ImageDataset:
    return ImageDataset(scene_spec(config), HELDOUT_START, count)


def encode_all(encoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [encode(encoder, Tensor(images[i:i + chunk])).data for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def decode_all(decoder, latents: np.ndarray, style=None, chunk: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(latents), chunk):
        part = style
        if style is not None:
            # per-sample scales are (n, C) and follow the latent chunk; shared ones are (C,)
            part = {k: Tensor(v.data[i:i + chunk]) if v.ndim == 2 else v for k, v in style.items()}
        out.append(decode(decoder, part, Tensor(latents[i:i + chunk])).data)
    return np.concatenate(out)


def pretrain(config: TrainConfig, dataset: Optional[ImageDataset] = None, progress=None):
    """Fit the plain autoencoder for reconstruction under the quality loss."""
    dataset = dataset or training_data(config)
    images = dataset.images
    encoder = encoder_network(rng_for(config.pretrain_seed, "init/encoder"))
    decoder = decoder_network(rng_for(config.pretrain_seed, "init/decoder"), config.variant)
    opt = AdamW(encoder.parameters() + decoder.parameters(), lr=config.pretrain_lr,
                betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)
    rng = rng_for(config.pretrain_seed, "pretrain/data")
    losses = []
    for it in range(config.pretrain_iterations):
        x = Tensor(images[rng.integers(0, len(images), config.batch_size)])
        loss = loss_quality(x, decode(decoder, None, encode(encoder, x)))
        if not np.isfinite(loss.data):
            raise DivergenceError(f"pretraining loss became non-finite at iteration {it}")
        ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if progress and (it + 1) % config.log_every == 0:
            progress(it + 1, float(np.mean(losses[-config.log_every:])))
    encoder.requires_grad_(False)
    decoder.requires_grad_(False)
    return encoder, decoder


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(1.0 / mse))


def evaluate_bits(pipe: Pipeline, latents: np.ndarray, bits: np.ndarray, attack_specs=None, chunk: int = 64):
    """Decode ``latents`` with per-row fingerprints; returns (decoded bits, images)."""
    from .attacks import apply

    decoded, images = [], []
    for i in range(0, len(latents), chunk):
        z = Tensor(latents[i:i + chunk])
        b = bits[i:i + chunk]
        x = pipe.generate(z, b)
        images.append(x.data)
        if attack_specs is not None:
            x = apply(attack_specs[i:i + chunk], x)
        decoded.append(bits_from_logits(decode_logits(pipe.fpdecoder, x).data))
    return np.concatenate(decoded), np.concatenate(images)


def train(config: TrainConfig, base=None, dataset: Optional[ImageDataset] = None,
          progress=None) -> tuple:
    """Joint fine-tuning.  Returns (Pipeline, TrainReport).

    ``base`` is a pretrained (encoder, decoder) pair; when omitted the
    autoencoder is pretrained first.  The encoder is never updated.
    """
    from .attacks import sample_batch_specs, apply

    dataset = dataset or training_data(config)
    if base is None:
        base = pretrain(config, dataset)
    encoder, base_decoder = base
    decoder = set_variant(base_decoder, config.variant).requires_grad_(True)
    s = config.seed
    mapping = mapping_network(config.d_phi, rng_for(s, "init/mapping"))
    affine = affine_layers(decoder, 4 * config.d_phi)
    fpdec = fingerprint_decoder(config.d_phi, rng_for(s, "init/fpdecoder"), config.image_size)
    pipe = Pipeline(encoder, base_decoder, decoder, mapping, affine, fpdec, config)

    images = dataset.images
    latents = encode_all(encoder, images)
    held = heldout_data(config, config.eval_fingerprints)
    held_z = encode_all(encoder, held.images)
    held_bits = sample_bits(rng_for(s, "heldout/fingerprints"), config.eval_fingerprints, config.d_phi)
    held_ref = decode_all(base_decoder, held_z)

    opt = AdamW(pipe.trainable(), lr=config.learning_rate, betas=(config.beta1, config.beta2),
                weight_decay=config.weight_decay)
    rng_data = rng_for(s, "data")
    rng_fp = rng_for(s, "fingerprints")
    rng_attack = rng_for(s, "attacks")
    kinds = config.robust_kinds
    report = TrainReport()
    window = {"loss_phi": [], "loss_quality": []}

    for it in range(1, config.iterations + 1):
        idx = rng_data.integers(0, len(images), config.batch_size)
        x = Tensor(images[idx])
        z = Tensor(latents[idx])
        bits = sample_bits(rng_fp, config.batch_size, config.d_phi)
        x_hat = pipe.generate(z, bits)
        x_in = x_hat
        if kinds:
            x_in = apply(sample_batch_specs(kinds, config.batch_size, rng_attack), x_hat)
        l_phi = bce_from_logits(decode_logits(fpdec, x_in), bits)
        l_q = loss_quality(x, x_hat)
        total = ad.add(ad.mul(l_phi, config.lambda1), ad.mul(l_q, config.lambda2_at(it)))
        if not np.isfinite(total.data):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        ad.backward(total)
        opt.step()
        window["loss_phi"].append(float(l_phi.data))
        window["loss_quality"].append(float(l_q.data))

        if it % config.log_every == 0 or it == config.iterations:
            decoded, gen = evaluate_bits(pipe, held_z, held_bits)
            acc = float(np.mean(decoded == held_bits))
            record = {
                "iteration": it,
                "loss_phi": float(np.mean(window["loss_phi"])),
                "loss_quality": float(np.mean(window["loss_quality"])),
                "bit_accuracy": acc,
                "psnr": psnr(gen, held_ref),
            }
            window = {"loss_phi": [], "loss_quality": []}
            report.append(record)
            if progress:
                progress(record)
            if not all(np.isfinite(v) for k, v in record.items() if k != "psnr"):
                raise DivergenceError(f"non-finite metric at iteration {it}: {record}")
            if it >= config.iterations / 2 and config.iterations >= 2 * config.log_every and acc < 0.45:
                raise DivergenceError(f"bit accuracy {acc:.3f} < 0.45 after half of training (iteration {it})")
    return pipe, report
