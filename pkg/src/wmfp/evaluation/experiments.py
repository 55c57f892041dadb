"""Experiment runners producing EvalReports: capacity, robustness, secrecy."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..attacks import KINDS, STRENGTH_GRID, identity_spec, spec_at
from ..autodiff import Tensor
from ..codec import sample_bits
from ..fpdecoder import bits_from_logits, decode_logits
from ..losses import bce_from_logits
from ..nets import LayerSpec, Network, init_params, run_layers
from ..optim import AdamW
from ..seeding import rng_for, subseed
from ..training import (HELDOUT_START, TrainConfig, decode_all, encode_all, evaluate_bits, heldout_data,
                        scene_spec, train)
from ..data import ImageDataset
from .metrics import attribution_accuracy, proxy_distance, psnr

CSV_HEADER = ("experiment", "model", "attack", "strength", "spec", "d_phi", "accuracy", "psnr", "proxy", "count")

# evaluation images sit past the training monitor's held-out images
EVAL_START = HELDOUT_START + 100_000


class ConfigMismatch(ValueError):
    """Two pipelines that must share a config do not."""


@dataclass
class EvalReport:
    experiment: str
    rows: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add(self, **row) -> dict:
        acc = row.get("accuracy")
        if acc is not None and not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        if row.get("count", 1) <= 0:
            raise ValueError("row count must be positive")
        self.rows.append(row)
        return row

    def select(self, **match) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([self.experiment] + [_cell(r.get(k, "")) for k in CSV_HEADER[1:]])
        return buf.getvalue()

    def to_ndjson(self) -> str:
        lines = [json.dumps({"experiment": self.experiment, "seeds": self.seeds, "extra": self.extra},
                            sort_keys=True)]
        lines += [json.dumps({"experiment": self.experiment, **r}, sort_keys=True, default=_cell) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: Optional[str] = None) -> dict:
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.experiment
        (directory / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (directory / f"{stem}.ndjson").write_text(self.to_ndjson(), encoding="utf-8")
        return {"csv": str(directory / f"{stem}.csv"), "ndjson": str(directory / f"{stem}.ndjson")}


def _cell(v):
    if isinstance(v, float) and v == float("inf"):
        return "inf"
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


# ---------------------------------------------------------------- evaluation sets

@dataclass
class EvalSet:
    images: np.ndarray
    latents: np.ndarray
    bits: np.ndarray
    reference: np.ndarray  # unmodulated base decoder output


def eval_set(pipe, n: int, seed: int, start: int = EVAL_START) -> EvalSet:
    """``n`` held-out images, their latents, ``n`` fresh fingerprints and base outputs."""
    images = ImageDataset(scene_spec(pipe.config), start, n).images
    z = encode_all(pipe.encoder, images)
    bits = sample_bits(rng_for(seed, "eval/fingerprints"), n, pipe.d_phi)
    return EvalSet(images, z, bits, decode_all(pipe.base_decoder, z))


def attack_specs(kind: str, strength, n: int, seed: int) -> list:
    if kind == "none":
        return [identity_spec()] * n
    return [spec_at(kind, strength, subseed(seed, f"eval/{kind}/{i}")) for i in range(n)]


def measure(pipe, data: EvalSet, specs=None) -> dict:
    decoded, generated = evaluate_bits(pipe, data.latents, data.bits, specs)
    return {
        "accuracy": attribution_accuracy(data.bits.astype(np.uint8), decoded),
        "psnr": psnr(generated, data.reference),
        "proxy": proxy_distance(data.reference, generated),
        "count": len(data.bits),
    }


# ---------------------------------------------------------------- capacity

def capacity_sweep(d_phis: Sequence[int], config: TrainConfig, base=None, n_eval: int = 200,
                   eval_seed: int = 0, progress=None, trained: Optional[Mapping] = None) -> tuple:
    """One pipeline per d_phi at the same budget.  Returns (EvalReport, {d_phi: pipeline}).

    ``trained`` may supply already trained pipelines by d_phi; their configs
    must equal ``config`` apart from d_phi.
    """
    for d in d_phis:
        if d < 8:
            raise ValueError(f"capacity sweep needs d_phi >= 8, got {d}")
    report = EvalReport("capacity", seeds={"train": config.seed, "eval": eval_seed})
    pipes = {}
    for d in d_phis:
        if trained and d in trained:
            pipe = trained[d]
            if pipe.config != config.replace(d_phi=d):
                raise ConfigMismatch(f"supplied d_phi={d} pipeline was trained with a different config")
        else:
            pipe, _ = train(config.replace(d_phi=d), base=base, progress=progress)
        pipes[d] = pipe
        report.add(model=f"d{d}", attack="none", strength="", spec="", d_phi=d,
                   **measure(pipe, eval_set(pipe, n_eval, eval_seed)))
    return report, pipes


# ---------------------------------------------------------------- robustness

def robustness_eval(models: Mapping, grid: Optional[Mapping] = None, n: int = 200, seed: int = 0,
                    include_identity: bool = True) -> EvalReport:
    """Accuracy of every model under every (attack, strength) in ``grid``.

    ``models`` maps a label to a Pipeline; all must share d_phi and image size.
    """
    grid = dict(STRENGTH_GRID if grid is None else grid)
    if not grid:
        raise ValueError("attack grid is empty")
    for kind in grid:
        if kind not in KINDS:
            raise ValueError(f"unknown attack kind {kind!r}")
    report = EvalReport("robustness", seeds={"eval": seed})
    for label, pipe in models.items():
        data = eval_set(pipe, n, seed)
        if include_identity:
            report.add(model=label, attack="none", strength="", spec=identity_spec().to_text(), d_phi=pipe.d_phi,
                       **measure(pipe, data))
        for kind, strengths in grid.items():
            for s in strengths:
                specs = attack_specs(kind, s, n, seed)
                row = measure(pipe, data, specs)
                report.add(model=label, attack=kind, strength=s, spec=specs[0].to_text(), d_phi=pipe.d_phi, **row)
    return report


def mid_strength(kind: str):
    levels = STRENGTH_GRID[kind]
    return levels[(len(levels) - 1) // 2 + (1 if len(levels) % 2 == 0 else 0)]


def inversions(values: Sequence[float]) -> int:
    """Count of adjacent increases in a sequence expected to be non-increasing."""
    return sum(1 for a, b in zip(values, values[1:]) if b > a)


# ---------------------------------------------------------------- secrecy

def check_same_config(a: TrainConfig, b: TrainConfig) -> None:
    da, db = a.to_mapping(), b.to_mapping()
    diff = sorted(k for k in da if k != "seed" and da[k] != db[k])
    if diff:
        raise ConfigMismatch(f"pipelines differ in {diff}; the scenario requires identical configs")
    if a.seed == b.seed:
        raise ConfigMismatch("pipelines share a seed; the attacker must use a different one")


def secrecy_scenario2(original, attacker, n: int = 500, seed: int = 0) -> EvalReport:
    """Original F decoding the attacker pipeline's images against the attacker's bits."""
    check_same_config(original.config, attacker.config)
    report = EvalReport("secrecy2", seeds={"eval": seed, "original": original.config.seed,
                                           "attacker": attacker.config.seed})
    data_b = eval_set(attacker, n, subseed(seed, "attacker"))
    images_b = decode_all(attacker.decoder, data_b.latents, attacker.style(data_b.bits))
    decoded = _decode_with(original.fpdecoder, images_b)
    report.add(model="original-F", attack="none", strength="", spec="attacker images", d_phi=original.d_phi,
               accuracy=attribution_accuracy(data_b.bits.astype(np.uint8), decoded), count=n)
    data_a = eval_set(original, n, subseed(seed, "original"))
    report.add(model="original-F", attack="none", strength="", spec="own images", d_phi=original.d_phi,
               **measure(original, data_a))
    guess = rng_for(seed, "secrecy2/random-decoder").integers(0, 2, data_b.bits.shape, dtype=np.uint8)
    report.add(model="random-bits", attack="none", strength="", spec="attacker images", d_phi=original.d_phi,
               accuracy=attribution_accuracy(data_b.bits.astype(np.uint8), guess), count=n)
    return report


def _decode_with(fpdec, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    out = [bits_from_logits(decode_logits(fpdec, Tensor(images[i:i + chunk])).data)
           for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def detector_network(rng) -> Network:
    layers = [
        LayerSpec("det0", "conv", 3, 16, 3, stride=2, padding=1, activation="leaky_relu"),
        LayerSpec("det1", "conv", 16, 32, 3, stride=2, padding=1, activation="leaky_relu"),
        LayerSpec("det2", "conv", 32, 32, 3, stride=2, padding=1, activation="leaky_relu"),
        LayerSpec("det_out", "dense", 32, 1),
    ]
    return Network("detector", layers, init_params(layers, rng))


def train_detector(images: np.ndarray, labels: np.ndarray, seed: int, iterations: int = 600,
                   batch_size: int = 32, lr: float = 1e-3) -> Network:
    net = detector_network(rng_for(seed, "init/detector"))
    opt = AdamW(net.parameters(), lr=lr)
    rng = rng_for(seed, "detector/data")
    for _ in range(iterations):
        idx = rng.integers(0, len(images), batch_size)
        logits = run_layers(net, Tensor(images[idx]))
        ad.backward(bce_from_logits(logits, labels[idx].reshape(-1, 1)))
        opt.step()
    net.requires_grad_(False)
    return net


def detector_accuracy(net: Network, images: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    preds = np.concatenate([bits_from_logits(run_layers(net, Tensor(images[i:i + chunk])).data).reshape(-1)
                            for i in range(0, len(images), chunk)])
    return float(np.mean(preds == labels.astype(np.uint8)))


def _detection_set(pipe, n: int, seed: int, start: int):
    """``n`` fingerprinted and ``n`` plain images from disjoint latents, shuffled."""
    data = eval_set(pipe, 2 * n, seed, start)
    marked = decode_all(pipe.decoder, data.latents[:n], pipe.style(data.bits[:n]))
    plain = data.reference[n:]
    images = np.concatenate([marked, plain])
    labels = np.concatenate([np.ones(n, np.float32), np.zeros(n, np.float32)])
    order = rng_for(seed, "detector/shuffle").permutation(2 * n)
    return images[order], labels[order]


def secrecy_scenario1(pipe_a, pipe_b, n_per_class: int = 500, seed: int = 0, iterations: int = 600) -> EvalReport:
    """Fingerprint detector trained on pipeline A, tested on pipeline B.

    Rows: detector accuracy on its own training set, on fresh A images, on B
    images (transfer), and a shuffled-label control on fresh A images.
    """
    if n_per_class < 500:
        raise ValueError(f"detector needs >= 500 images per class, got {n_per_class}")
    report = EvalReport("secrecy1", seeds={"eval": seed, "a": pipe_a.config.seed, "b": pipe_b.config.seed})
    start = EVAL_START + 200_000
    x_train, y_train = _detection_set(pipe_a, n_per_class, subseed(seed, "a/train"), start)
    x_test, y_test = _detection_set(pipe_a, n_per_class, subseed(seed, "a/test"), start + 2 * n_per_class)
    x_b, y_b = _detection_set(pipe_b, n_per_class, subseed(seed, "b"), start + 4 * n_per_class)
    det = train_detector(x_train, y_train, seed, iterations)
    count = 2 * n_per_class
    report.add(model="detector", attack="none", strength="", spec="A train", d_phi=pipe_a.d_phi,
               accuracy=detector_accuracy(det, x_train, y_train), count=count)
    report.add(model="detector", attack="none", strength="", spec="A fresh", d_phi=pipe_a.d_phi,
               accuracy=detector_accuracy(det, x_test, y_test), count=count)
    report.add(model="detector", attack="none", strength="", spec="B transfer", d_phi=pipe_a.d_phi,
               accuracy=detector_accuracy(det, x_b, y_b), count=count)
    shuffled = rng_for(seed, "detector/labels").permutation(y_train)
    control = train_detector(x_train, shuffled, subseed(seed, "control"), iterations)
    report.add(model="shuffled-control", attack="none", strength="", spec="A fresh", d_phi=pipe_a.d_phi,
               accuracy=detector_accuracy(control, x_test, y_test), count=count)
    return report
