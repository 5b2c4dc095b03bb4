"""Command line entry point: ``slotvae <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, scenegen, viz
from .config import ConfigError, dump_config, load_config
from .evaluation import evaluate, write_report
from .model import VARIANTS, load_checkpoint
from .training import images_to_tensor, train

log = logging.getLogger("slotvae")


class UsageError(Exception):
    pass


def _revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out: Path, command: str, config: dict, seed, started, outputs) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": [str(p) for p in outputs],
        "revision": _revision(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _data_dir(args) -> str:
    data = args.data or os.environ.get("SLOTVAE_DATA")
    if not data:
        raise UsageError("--data is required (or set SLOTVAE_DATA)")
    return data


def _parse_sets(items) -> dict[str, str]:
    pairs = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    return pairs


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(args) -> int:
    started = _now()
    out = Path(args.out)
    if args.generator == "arrowworld":
        records = scenegen.generate_arrowworld(args.seed, args.n, size=args.size)
    else:
        records = scenegen.generate_multisprite(
            args.seed, args.n, (args.k_min, args.k_max), size=args.size
        )
    manifest = scenegen.write_shards(records, out, generator=args.generator, seed=args.seed)
    write_run_manifest(
        out, "make-dataset", vars(args), args.seed, started, [out / s for s in manifest.shards]
    )
    print(f"wrote {manifest.count} records to {out}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    overrides = _parse_sets(args.set)
    if args.data or os.environ.get("SLOTVAE_DATA"):
        overrides["data"] = _data_dir(args)
    for flag, key in (
        ("variant", "variant"),
        ("steps", "total_steps"),
        ("seed", "seed"),
        ("batch_size", "batch_size"),
        ("out", "out"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides)
    if not cfg.data:
        raise UsageError("--data is required (or set SLOTVAE_DATA)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    result = train(cfg, resume=args.resume)
    write_run_manifest(
        out, "train", cfg.to_dict(), cfg.seed, started, [result["checkpoint"], result["metrics"]]
    )
    print(result["checkpoint"])
    return 0


def _load_model(path):
    model, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_generate(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    gen = torch.Generator().manual_seed(args.seed)
    scene = model.generate_scene(args.n, gen)
    samples = [viz.to_uint8(x) for x in scene.composed]
    ncol = 8
    grid_path = out / "samples.png"
    viz.save_png(viz.grid([samples[i : i + ncol] for i in range(0, len(samples), ncol)]), grid_path)
    panel_path = out / "slots.png"
    viz.save_png(viz.grid(viz.scene_rows(scene)), panel_path)
    write_run_manifest(out, "generate", vars(args), args.seed, started, [grid_path, panel_path])
    print(grid_path)
    return 0


def cmd_reconstruct(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    images, _ = scenegen.load_arrays(_data_dir(args))
    x = images_to_tensor(images[args.start : args.start + args.n], model.slot_attention.init_mu.dtype)
    scene = model.reconstruct(x, torch.Generator().manual_seed(args.seed))
    path = out / "reconstruction.png"
    viz.save_png(viz.grid(viz.scene_rows(scene, inputs=x)), path)
    write_run_manifest(out, "reconstruct", vars(args), args.seed, started, [path])
    print(path)
    return 0


def cmd_traverse(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    images, _ = scenegen.load_arrays(_data_dir(args))
    x = images_to_tensor(images[args.index : args.index + 1], model.slot_attention.init_mu.dtype)
    values = np.linspace(args.low, args.high, args.steps).tolist()
    dims = [int(d) for d in args.dims.split(",")] if args.dims else list(range(min(4, model.cfg.slot_dim)))
    rows = []
    for d in dims:
        frames = model.traverse_latent(x, args.slot, d, values, torch.Generator().manual_seed(args.seed))
        rows.append([viz.to_uint8(f) for f in frames])
    path = out / "traversal.png"
    viz.save_png(viz.grid(rows), path)
    write_run_manifest(out, "traverse", vars(args), args.seed, started, [path])
    print(path)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(
        args.checkpoint,
        _data_dir(args),
        n_gen=args.n_gen,
        n_ari=args.n_ari,
        n_sacc=args.n_sacc,
        seed=args.seed,
        real_features=args.real_features,
        fake_features=args.fake_features,
    )
    path = out / "report.txt"
    write_report(report, path)
    write_run_manifest(out, "eval", vars(args), args.seed, started, [path])
    print(path.read_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slotvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-dataset", help="generate a procedural dataset")
    d.add_argument("--generator", choices=sorted(scenegen.GENERATORS), default="arrowworld")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--k-min", type=int, default=1)
    d.add_argument("--k-max", type=int, default=6)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--resume")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample novel scenes")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="decomposition strips for dataset images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data")
    r.add_argument("--start", type=int, default=0)
    r.add_argument("--n", type=int, default=8)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("traverse", help="latent traversal grid for one slot")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data")
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--slot", type=int, default=0)
    v.add_argument("--dims", help="comma-separated latent dims (default: first 4)")
    v.add_argument("--low", type=float, default=-2.0)
    v.add_argument("--high", type=float, default=2.0)
    v.add_argument("--steps", type=int, default=7)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_traverse)

    e = sub.add_parser("eval", help="ARI-FG, Fréchet distance and S-Acc report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--n-gen", type=int, default=2000)
    e.add_argument("--n-ari", type=int, default=2000)
    e.add_argument("--n-sacc", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--real-features", help="precomputed real embeddings (.npy or text)")
    e.add_argument("--fake-features", help="precomputed generated embeddings (.npy or text)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s"
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        parser.print_usage(sys.stderr)
        print(f"slotvae: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report and exit nonzero
        print(f"slotvae: {type(err).__name__}: {err}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
