"""Command-line entry point: ``wmfp <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 config error, 3 runtime or
divergence error.  Failures print one line ``wmfp: error=<kind> reason=<text>``
on stderr.  Every run writes ``manifest.json`` (config snapshot, seeds and
artifact hashes) into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 1, 2, 3

log = logging.getLogger("wmfp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, args, config=None, seeds=None, artifacts=()) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "arguments": {k: v for k, v in vars(args).items() if k != "func" and v is not None and not callable(v)},
        "config": config.to_mapping() if config is not None else None,
        "seeds": seeds or {},
        "artifacts": {str(Path(a).relative_to(out) if Path(a).is_relative_to(out) else a): _sha(a)
                      for a in artifacts if Path(a).is_file()},
    }
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _config(args):
    from .training import ConfigError, TrainConfig, parse_key_values

    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_key_values(path.read_text()))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return TrainConfig.from_mapping(values)


def _progress(record):
    log.info("iteration %d loss_phi=%.4f loss_quality=%.5f bit_accuracy=%.4f psnr=%.2f", record["iteration"],
             record["loss_phi"], record["loss_quality"], record["bit_accuracy"], record["psnr"])


def _load_image(path):
    from .data import load_image

    return load_image(path)


def _stamped_path(args) -> Path:
    if getattr(args, "stamped", None):
        return Path(args.stamped)
    return Path(args.pipeline) / "stamped" / f"{args.user}.wmfp"


def _registry(path, d_phi=None):
    from .registry import Registry

    path = Path(path)
    if path.exists() and path.stat().st_size:
        return Registry.open(path, d_phi)
    if d_phi is None:
        raise FileNotFoundError(f"registry {path} does not exist")
    return Registry(d_phi, path)


# ---------------------------------------------------------------- subcommands

def cmd_pretrain(args) -> int:
    from .modelfile import save_base
    from .training import pretrain, training_data

    config = _config(args)
    out = Path(args.out)
    enc, dec = pretrain(config, training_data(config),
                        progress=lambda it, loss: log.info("pretrain %d loss=%.5f", it, loss))
    save_base(enc, dec, out)
    _write_manifest(out, "pretrain", args, config, {"pretrain_seed": config.pretrain_seed,
                                                     "data_seed": config.data_seed},
                    [out / "encoder.wmfp", out / "base_decoder.wmfp"])
    return 0


def cmd_train(args) -> int:
    from .modelfile import load_base, save_pipeline
    from .training import train

    config = _config(args)
    out = Path(args.out)
    base = load_base(args.base) if args.base else None
    pipe, report = train(config, base=base, progress=_progress)
    save_pipeline(pipe, out)
    (out / "report.ndjson").write_text(report.to_ndjson())
    files = [out / f for f in ("encoder.wmfp", "base_decoder.wmfp", "decoder.wmfp", "mapping.wmfp",
                               "affine.wmfp", "fpdecoder.wmfp", "config.txt", "report.ndjson")]
    _write_manifest(out, "train", args, config, {"seed": config.seed, "data_seed": config.data_seed}, files)
    final = report.final
    print(json.dumps({"bit_accuracy": final["bit_accuracy"], "psnr": final["psnr"]}))
    return 0


def cmd_stamp(args) -> int:
    from .modelfile import load_pipeline, save_stamped
    from .registry import RegistryRecord
    from .codec import sample_fingerprint
    from .seeding import subseed

    pipe = load_pipeline(args.pipeline)
    reg = _registry(args.registry, pipe.d_phi)
    out = Path(args.out) if args.out else Path(args.pipeline) / "stamped"
    seed = pipe.config.seed if args.seed is None else args.seed
    if args.user in reg:
        phi = reg.get(args.user).fingerprint
        record = None
    else:
        # the same draw Registry.register would make, so the model hash can go in the record
        for attempt in range(32):
            phi = sample_fingerprint(pipe.d_phi, subseed(seed, f"user/{args.user}/{attempt}"))
            if phi.hex() not in {r.fingerprint.hex() for r in reg}:
                break
        record = True
    path = out / f"{args.user}.wmfp"
    digest = save_stamped(pipe.stamp(phi), path)
    if record:
        reg.add(RegistryRecord(args.user, phi, digest, args.issued_at if args.issued_at is not None
                               else int(__import__("time").time())))
    _write_manifest(out, "stamp", args, pipe.config, {"seed": seed}, [path])
    print(json.dumps({"user_id": args.user, "fingerprint": phi.hex(), "model_hash": digest}))
    return 0


def cmd_generate(args) -> int:
    from . import autodiff as ad
    from .data import ImageDataset, save_image
    from .generator import encode
    from .modelfile import load, load_stamped
    from .training import scene_spec, TrainConfig

    stamped = load_stamped(_stamped_path(args))
    encoder = load(Path(args.pipeline) / "encoder.wmfp")
    config = TrainConfig.from_file(Path(args.pipeline) / "config.txt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = ImageDataset(scene_spec(config.replace(data_seed=args.seed)), args.start, args.count).images
    x = stamped(encode(encoder, ad.Tensor(images))).data
    paths = []
    for i, img in enumerate(x):
        p = out / f"{args.prefix}{i:04d}.{args.format}"
        save_image(img, p)
        paths.append(p)
    _write_manifest(out, "generate", args, config, {"seed": args.seed}, paths)
    return 0


def cmd_decode(args) -> int:
    from .fpdecoder import decode_bits, decode_logits
    from .modelfile import load
    from . import autodiff as ad

    fpdec = load(Path(args.pipeline) / "fpdecoder.wmfp")
    x = _load_image(args.image)
    phi = decode_bits(fpdec, x)
    result = {"image": str(args.image), "fingerprint": phi.hex(), "d_phi": phi.d_phi}
    if args.logits:
        result["logits"] = [float(v) for v in decode_logits(fpdec, ad.Tensor(x)).data.reshape(-1)]
    print(json.dumps(result))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "decode.json").write_text(json.dumps(result) + "\n")
        _write_manifest(out, "decode", args, artifacts=[out / "decode.json"])
    return 0


def cmd_attack(args) -> int:
    from .attacks import AttackSpec, apply
    from .data import save_image
    from . import autodiff as ad

    spec = AttackSpec.from_text(args.spec)
    x = _load_image(args.image)
    y = apply(spec, ad.Tensor(x)).data
    out = Path(args.output)
    save_image(y, out)
    _write_manifest(out.parent, "attack", args, seeds={"attack": spec.seed}, artifacts=[out])
    return 0


def cmd_identify(args) -> int:
    from .modelfile import load

    fpdec = load(Path(args.pipeline) / "fpdecoder.wmfp")
    reg = _registry(args.registry)
    x = _load_image(args.image)
    result = reg.identify(x, fpdec, threshold=args.threshold, with_logits=args.logits).to_dict()
    result["image"] = str(args.image)
    print(json.dumps(result))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "identify.json").write_text(json.dumps(result) + "\n")
        _write_manifest(out, "identify", args, artifacts=[out / "identify.json"])
    return 0


def cmd_eval(args) -> int:
    from .evaluation.experiments import EvalReport, eval_set, measure
    from .modelfile import load_pipeline

    pipe = load_pipeline(args.pipeline)
    report = EvalReport("eval", seeds={"eval": args.seed})
    report.add(model=Path(args.pipeline).name, attack="none", strength="", spec="", d_phi=pipe.d_phi,
               **measure(pipe, eval_set(pipe, args.n, args.seed)))
    paths = report.write(args.out)
    _write_manifest(Path(args.out), "eval", args, pipe.config, report.seeds, paths.values())
    print(report.to_csv(), end="")
    return 0


def cmd_capacity(args) -> int:
    from .evaluation.experiments import capacity_sweep
    from .modelfile import load_base, save_pipeline

    config = _config(args)
    out = Path(args.out)
    base = load_base(args.base) if args.base else None
    d_phis = [int(v) for v in args.d_phi.split(",")]
    report, pipes = capacity_sweep(d_phis, config, base, n_eval=args.n, eval_seed=args.seed, progress=_progress)
    files = list(report.write(out).values())
    if args.save_models:
        for d, pipe in pipes.items():
            save_pipeline(pipe, out / f"d{d}")
    _write_manifest(out, "capacity", args, config, report.seeds, files)
    print(report.to_csv(), end="")
    return 0


def cmd_robust_eval(args) -> int:
    from .attacks import STRENGTH_GRID
    from .evaluation.experiments import robustness_eval
    from .modelfile import load_pipeline

    models = {}
    for item in args.models:
        if "=" not in item:
            raise UsageError(f"--models entries are label=directory, got {item!r}")
        label, path = item.split("=", 1)
        models[label] = load_pipeline(path)
    kinds = args.attacks.split(",") if args.attacks else list(STRENGTH_GRID)
    unknown = [k for k in kinds if k not in STRENGTH_GRID]
    if unknown:
        raise UsageError(f"unknown attack kinds {unknown}")
    report = robustness_eval(models, {k: STRENGTH_GRID[k] for k in kinds}, n=args.n, seed=args.seed)
    files = list(report.write(args.out).values())
    _write_manifest(Path(args.out), "robust-eval", args, seeds=report.seeds, artifacts=files)
    print(report.to_csv(), end="")
    return 0


def cmd_secrecy(args) -> int:
    from .evaluation.experiments import secrecy_scenario1, secrecy_scenario2
    from .modelfile import load_pipeline

    a, b = load_pipeline(args.a), load_pipeline(args.b)
    if args.scenario == 1:
        report = secrecy_scenario1(a, b, n_per_class=args.n, seed=args.seed)
    else:
        report = secrecy_scenario2(a, b, n=args.n, seed=args.seed)
    files = list(report.write(args.out).values())
    _write_manifest(Path(args.out), "secrecy", args, seeds=report.seeds, artifacts=files)
    print(report.to_csv(), end="")
    return 0


def cmd_registry_add(args) -> int:
    reg = _registry(args.registry, args.d_phi)
    record = reg.register(args.user, args.seed, args.model_hash or "", args.issued_at)
    print(record.to_json())
    return 0


def cmd_registry_rebuild(args) -> int:
    from .registry import rebuild

    reg = rebuild(args.registry)
    print(json.dumps({"records": len(reg), "d_phi": reg.d_phi}))
    return 0


def cmd_collision_report(args) -> int:
    from .registry import collision_report

    report = collision_report(args.n_users, args.d_phi, args.p, trials=args.trials, seed=args.seed,
                              threshold=args.threshold)
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "collision_report.json").write_text(text + "\n")
        _write_manifest(out, "collision-report", args, seeds={"monte_carlo": args.seed},
                        artifacts=[out / "collision_report.json"])
    return 0


def cmd_grad_check(args) -> int:
    from .autodiff.gradcheck import op_suite

    rows = op_suite(seed=args.seed, step=args.step, tol=args.tol)
    worst = max(r["max_rel_error"] for r in rows)
    failed = [r for r in rows if r["status"] != "ok"]
    summary = {"cases": len(rows), "max_rel_error": worst, "failed": len(failed), "tol": args.tol}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grad_check.ndjson").write_text("".join(json.dumps(r) + "\n" for r in rows))
    _write_manifest(out, "grad-check", args, seeds={"grad_check": args.seed}, artifacts=[out / "grad_check.ndjson"])
    print(json.dumps(summary))
    if failed:
        raise RuntimeError(f"{len(failed)} gradient checks exceeded tol {args.tol}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wmfp", description="Weight-modulation fingerprinting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def cfg(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    s = sub.add_parser("pretrain", help="pretrain the autoencoder")
    cfg(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="fingerprint fine-tuning")
    cfg(s)
    s.add_argument("--base", help="directory written by pretrain")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("stamp", help="fold a user's fingerprint into the decoder")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--user", required=True)
    s.add_argument("--registry", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--issued-at", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stamp)

    s = sub.add_parser("generate", help="generate images with a stamped decoder")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--user")
    s.add_argument("--stamped")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--format", choices=("ppm", "png"), default="ppm")
    s.add_argument("--prefix", default="image_")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("decode", help="decode fingerprint bits from an image")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--logits", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("attack", help="apply a post-processing attack")
    s.add_argument("--spec", required=True, help='e.g. "jpeg:quality=50,seed=1"')
    s.add_argument("--image", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("identify", help="decode an image and match it against the registry")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--registry", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--threshold", type=int)
    s.add_argument("--logits", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("eval", help="clean attribution accuracy and quality")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("capacity", help="fingerprint-length sweep")
    cfg(s)
    s.add_argument("--base")
    s.add_argument("--d-phi", default="16,32,64,128")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--save-models", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_capacity)

    s = sub.add_parser("robust-eval", help="accuracy curves under attacks")
    s.add_argument("--models", nargs="+", required=True, metavar="LABEL=DIR")
    s.add_argument("--attacks", help="comma list; default all")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_robust_eval)

    s = sub.add_parser("secrecy", help="secrecy scenarios 1 and 2")
    s.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    s.add_argument("--a", required=True, help="original pipeline")
    s.add_argument("--b", required=True, help="independently seeded pipeline")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_secrecy)

    s = sub.add_parser("registry-add", help="register a user")
    s.add_argument("--registry", required=True)
    s.add_argument("--user", required=True)
    s.add_argument("--d-phi", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model-hash")
    s.add_argument("--issued-at", type=int)
    s.set_defaults(func=cmd_registry_add)

    s = sub.add_parser("registry-rebuild", help="validate and compact a registry file")
    s.add_argument("--registry", required=True)
    s.set_defaults(func=cmd_registry_rebuild)

    s = sub.add_parser("collision-report", help="birthday bound and identification rates")
    s.add_argument("--n-users", type=int, required=True)
    s.add_argument("--d-phi", type=int, default=32)
    s.add_argument("--p", type=float, default=0.1)
    s.add_argument("--trials", type=int, default=20000)
    s.add_argument("--threshold", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_collision_report)

    s = sub.add_parser("grad-check", help="finite-difference check of every op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grad_check)
    return p


def _fail(kind: str, exc) -> None:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"wmfp: error={kind} reason={reason}", file=sys.stderr)


def main(argv=None) -> int:
    from .training import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "generate" and not (args.user or args.stamped):
        _fail("usage", "generate needs --user or --stamped")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except Exception as exc:  # runtime, divergence, file format
        _fail("runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
