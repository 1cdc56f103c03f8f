"""Command-line surface: pretrain, finetune, eval, ablate, gradcheck,
convert, defaults.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric abort. Each failure prints a one-line machine-parsable
reason ``prototransfer: <category>: <message>`` on standard error.
Flag precedence is flags > config file > defaults; ``--threads`` falls
back to the PROTO_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .augment import PRESETS, pipeline_from_preset, pipeline_from_spec
from .checkpoint import save_ptt1
from .config import RunConfig, default_config, defaults_json, load_config
from .data import (
    Dataset,
    load_directory_dataset,
    load_split_file,
    make_synthetic_dataset,
    restrict,
    select_classes,
    write_pgm,
    write_ppm,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GeometryError,
    NumericsError,
    ShapeError,
)
from .evaluation import (
    ADAPTOR_NAMES,
    AblationPoint,
    ablation_sweep,
    evaluate,
    format_markdown,
    umtra_point,
    write_episode_csv,
    write_reports_csv,
)
from .fewshot import FineTuneConfig, proto_tune
from .gradcheck import check_network_gradients
from .network import init_conv4, load_network
from .protoclr import ProtoCLRConfig, train_protoclr


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else default_config()


def _apply_seed(cfg: RunConfig, seed: int | None):
    if seed is not None:
        cfg.data.seed = seed
        cfg.backbone.seed = seed
        cfg.protoclr.seed = seed
        cfg.eval.seed = seed


def _resolve_threads(args_threads: int | None, cfg: RunConfig) -> int:
    if args_threads is not None:
        return args_threads
    env = os.environ.get("PROTO_THREADS", "")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"PROTO_THREADS is not an integer: {env!r}") from e
    return cfg.eval.threads


def _build_dataset(cfg: RunConfig, split: str = "") -> Dataset:
    d = cfg.data
    if d.kind == "synthetic":
        ds = make_synthetic_dataset(
            n_classes=d.n_classes,
            n_per_class=d.n_per_class,
            image_size=d.image_size,
            noise_std=d.noise_std,
            seed=d.seed,
            class_offset=d.class_offset,
            split=split or "synthetic",
        )
    elif d.kind == "directory":
        if not d.root:
            raise ConfigError("data.kind='directory' requires data.root")
        ds = load_directory_dataset(d.root, d.image_size, d.channels, split=split)
        if d.split_file:
            ds = select_classes(ds, load_split_file(d.split_file), split=split)
    else:
        raise ConfigError(f"unknown data.kind {d.kind!r} (expected 'synthetic' or 'directory')")
    if d.restrict_classes or d.restrict_images:
        ds = restrict(
            ds,
            n_classes=d.restrict_classes or None,
            n_images=d.restrict_images or None,
            seed=d.seed,
        )
    return ds


def _build_pipeline(cfg: RunConfig):
    if cfg.augment.transforms:
        return pipeline_from_spec(cfg.augment.transforms, cfg.data.channels, cfg.data.image_size)
    return pipeline_from_preset(cfg.augment.preset, cfg.data.channels, cfg.data.image_size)


def _protoclr_config(cfg: RunConfig) -> ProtoCLRConfig:
    p = cfg.protoclr
    return ProtoCLRConfig(
        batch_size=p.batch_size,
        n_queries=p.n_queries,
        lr=p.lr,
        lr_decay_factor=p.lr_decay_factor,
        lr_decay_period=p.lr_decay_period,
        max_iterations=p.max_iterations,
        patience=p.patience,
        accuracy_window=p.accuracy_window,
        checkpoint_interval=p.checkpoint_interval,
        epoch_shuffle=p.epoch_shuffle,
        seed=p.seed,
    )


def _finetune_config(cfg: RunConfig, epochs: int | None = None, scope: str | None = None) -> FineTuneConfig:
    f = cfg.finetune
    return FineTuneConfig(
        epochs=f.epochs if epochs is None else epochs,
        batch_size=f.batch_size,
        lr=f.lr,
        scope=f.scope if scope is None else scope,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args.config)
    _apply_seed(cfg, args.seed)
    if args.max_iters is not None:
        cfg.protoclr.max_iterations = args.max_iters
    if args.batch_size is not None:
        cfg.protoclr.batch_size = args.batch_size
    if args.n_queries is not None:
        cfg.protoclr.n_queries = args.n_queries
    if args.lr is not None:
        cfg.protoclr.lr = args.lr
    _resolve_threads(args.threads, cfg)  # validated; training itself is sequential
    dataset = _build_dataset(cfg, split="train")
    pipeline = _build_pipeline(cfg)
    net = init_conv4(cfg.data.channels, cfg.data.image_size, seed=cfg.backbone.seed)
    out_dir = Path(args.out)
    net, log = train_protoclr(
        net, dataset, pipeline, _protoclr_config(cfg), out_dir=out_dir, verbose=args.verbose
    )
    final_acc = log.accuracies[-1] if log.accuracies else float("nan")
    print(
        f"pretrain done: iterations={len(log.iterations)} "
        f"final_acc={final_acc:.4f} best_acc={log.best_accuracy:.4f} "
        f"best_iter={log.best_iteration} checkpoint={out_dir / 'best.ptt1'}"
    )
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args.config)
    _apply_seed(cfg, args.seed)
    net = load_network(args.checkpoint)
    dataset = _build_dataset(cfg, split="test")
    from .evaluation import replay_episode

    episode = replay_episode(
        dataset, args.ways, args.shots, args.queries, cfg.eval.seed, args.episode_index
    )
    ft = _finetune_config(cfg, epochs=args.epochs, scope=args.scope)
    ft.seed = cfg.eval.seed
    pred, head, _ = proto_tune(net, episode, ft)
    acc = float(np.mean(pred == episode.query_labels))
    print(f"finetune: {args.ways}-way {args.shots}-shot episode accuracy {acc:.4f} (scope={ft.scope}, epochs={ft.epochs})")
    if args.out:
        save_ptt1(args.out, {"head.weight": head.weight.data, "head.bias": head.bias.data})
        print(f"head saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.config)
    _apply_seed(cfg, args.seed)
    e = cfg.eval
    ways = args.ways if args.ways is not None else e.n_ways
    shots = args.shots if args.shots is not None else e.k_shots
    episodes = args.episodes if args.episodes is not None else e.n_episodes
    queries = args.queries if args.queries is not None else e.q_queries
    adaptor = args.adaptor if args.adaptor is not None else e.adaptor
    threads = _resolve_threads(args.threads, cfg)
    net = load_network(args.checkpoint) if args.checkpoint != "none" else None
    dataset = _build_dataset(cfg, split="test")
    report = evaluate(
        adaptor,
        dataset,
        n_ways=ways,
        k_shots=shots,
        n_episodes=episodes,
        q_queries=queries,
        seed=e.seed,
        network=net,
        threads=threads,
        finetune=_finetune_config(cfg, epochs=args.epochs),
    )
    print(format_markdown([report]))
    print(report.summary())
    if args.out:
        write_reports_csv(args.out, [report], header={"config": cfg.to_dict()})
        print(f"report written to {args.out}")
    if args.episodes_out:
        write_episode_csv(args.episodes_out, report)
    return 0


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from e


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config)
    _apply_seed(cfg, args.seed)
    threads = _resolve_threads(args.threads, cfg)
    dataset = _build_dataset(cfg, split="train")
    pipeline = _build_pipeline(cfg)
    batches = _parse_int_list(args.batch_sizes, "--batch-sizes")
    queries = _parse_int_list(args.queries, "--queries")
    if not batches or not queries:
        raise ConfigError("ablation grid is empty")
    ft_options = {"off": [False], "on": [True], "both": [False, True]}
    if args.finetune not in ft_options:
        raise ConfigError(f"--finetune must be one of {sorted(ft_options)}")
    points = [umtra_point(args.ways)]
    for b in batches:
        for q in queries:
            for ft in ft_options[args.finetune]:
                p = AblationPoint(batch_size=b, n_queries=q, finetune=ft)
                if p not in points:
                    points.append(p)
    reports = ablation_sweep(
        points,
        dataset,
        dataset,
        pipeline,
        seed=cfg.protoclr.seed,
        iterations=args.iterations,
        n_ways=args.ways,
        k_shots=args.shots,
        n_episodes=args.episodes,
        q_queries=cfg.eval.q_queries,
        threads=threads,
        finetune=_finetune_config(cfg),
        verbose=args.verbose,
    )
    print(format_markdown(reports))
    if args.out:
        write_reports_csv(args.out, reports, header={"config": cfg.to_dict()})
        print(f"sweep written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    ok = True
    for s in range(args.seeds):
        result = check_network_gradients(
            seed=args.seed + s,
            image_size=args.image_size,
            n=args.batch,
            q=args.queries,
            samples_per_tensor=args.samples,
            inject_fault=args.inject_fault,
        )
        print(f"seed {args.seed + s}:")
        print(result.format())
        worst = max(worst, result.max_rel)
        ok = ok and result.passed
    print(f"overall max relative error {worst:.6e}")
    if not ok:
        raise NumericsError(f"gradient check failed: max relative error {worst:.6e} > 1e-3")
    return 0


_NATIVE_SUFFIXES = {".pgm", ".ppm", ".ptt1"}
_PIL_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


def _decode_any(path: Path, channels: int) -> np.ndarray:
    from .data import _read_sample

    if path.suffix.lower() in _NATIVE_SUFFIXES:
        return _read_sample(path, channels)
    try:
        from PIL import Image
    except ImportError as e:
        raise DataError(f"{path}: decoding {path.suffix} requires Pillow (pip install Pillow)") from e
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def cmd_convert(args) -> int:
    src = Path(args.src)
    dst = Path(args.dst)
    if not src.is_dir():
        raise DataError(f"source {src} is not a directory")
    class_dirs = sorted(p for p in src.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"source {src} has no class subdirectories")
    from .augment import bilinear_resize

    n_files = 0
    for cdir in class_dirs:
        out_dir = dst / cdir.name
        out_dir.mkdir(parents=True, exist_ok=True)
        files = sorted(
            p for p in cdir.iterdir() if p.suffix.lower() in _NATIVE_SUFFIXES | _PIL_SUFFIXES
        )
        if not files:
            raise DataError(f"class directory {cdir} contains no images")
        for f in files:
            img = _decode_any(f, args.channels)
            if args.size and img.shape[1:] != (args.size, args.size):
                img = bilinear_resize(img, args.size, args.size)
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            out = out_dir / (f.stem + "." + args.format)
            if args.format == "pgm":
                if img.shape[0] != 1:
                    raise DataError(f"{f}: PGM output needs 1 channel, use --channels 1")
                write_pgm(out, img)
            elif args.format == "ppm":
                if img.shape[0] != 3:
                    raise DataError(f"{f}: PPM output needs 3 channels, use --channels 3")
                write_ppm(out, img)
            else:
                save_ptt1(out, {"image": img})
            n_files += 1
    print(f"converted {n_files} images across {len(class_dirs)} classes into {dst}")
    return 0


def cmd_defaults(args) -> int:
    text = defaults_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"defaults written to {args.out}")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prototransfer",
        description="Self-supervised prototypical pre-training and few-shot fine-tuning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def common(p, config_positional=False):
        if config_positional:
            p.add_argument("config", help="JSON run config path")
        else:
            p.add_argument("--config", default=None, help="JSON run config path (default: built-in defaults)")
        p.add_argument("--seed", type=int, default=None, help="master seed overriding all config seeds")
        p.add_argument("--threads", type=int, default=None, help="evaluation parallelism (env PROTO_THREADS as fallback)")
        p.add_argument("--verbose", action="store_true", help="periodic progress lines")

    p = sub.add_parser("pretrain", help="run ProtoCLR pre-training", formatter_class=fmt)
    common(p, config_positional=True)
    p.add_argument("--out", default="runs/pretrain", help="output directory for checkpoints and logs")
    p.add_argument("--max-iters", type=int, default=None, help="override protoclr.max_iterations")
    p.add_argument("--batch-size", type=int, default=None, help="override protoclr.batch_size (N)")
    p.add_argument("--n-queries", type=int, default=None, help="override protoclr.n_queries (Q)")
    p.add_argument("--lr", type=float, default=None, help="override protoclr.lr")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="ProtoTune one episode from a checkpoint", formatter_class=fmt)
    p.add_argument("checkpoint", help="backbone checkpoint (.ptt1)")
    common(p)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--epochs", type=int, default=None, help="override finetune.epochs")
    p.add_argument("--scope", choices=["head", "full"], default=None, help="override finetune.scope")
    p.add_argument("--episode-index", type=int, default=0, help="episode index under the eval seed")
    p.add_argument("--out", default="", help="save the tuned head to this .ptt1 path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="episodic few-shot evaluation", formatter_class=fmt)
    p.add_argument("checkpoint", help="backbone checkpoint (.ptt1), or 'none' for label-only adaptors")
    common(p)
    p.add_argument("--ways", type=int, default=None)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--adaptor", default=None, help=f"one of: {', '.join(ADAPTOR_NAMES)}")
    p.add_argument("--epochs", type=int, default=None, help="fine-tuning epochs for --adaptor prototune")
    p.add_argument("--out", default="", help="write summary CSV here")
    p.add_argument("--episodes-out", default="", help="write per-episode CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="batch-size / query-count ablation sweep", formatter_class=fmt)
    common(p)
    p.add_argument("--batch-sizes", default="5,50", help="comma-separated N values")
    p.add_argument("--queries", default="1,3", help="comma-separated Q values")
    p.add_argument("--finetune", default="off", help="off | on | both")
    p.add_argument("--iterations", type=int, default=300, help="pre-training iterations per grid point")
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--out", default="", help="write sweep CSV here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to check")
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--batch", type=int, default=4, help="prototypes per check batch")
    p.add_argument("--queries", type=int, default=2, help="augmented views per prototype")
    p.add_argument("--samples", type=int, default=40, help="sampled coordinates per large tensor")
    p.add_argument("--inject-fault", default="", help="corrupt this tensor's gradient (must then fail)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("convert", help="convert an image tree to PGM/PPM/PTT1 layout", formatter_class=fmt)
    p.add_argument("src", help="source directory (class subdirectories of images)")
    p.add_argument("dst", help="destination dataset root")
    p.add_argument("--format", choices=["pgm", "ppm", "ptt1"], default="pgm")
    p.add_argument("--channels", type=int, choices=[1, 3], default=1)
    p.add_argument("--size", type=int, default=0, help="resize to this square size (0 = keep)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("defaults", help="print the generated defaults.json", formatter_class=fmt)
    p.add_argument("--out", default="", help="write defaults here instead of stdout")
    p.set_defaults(func=cmd_defaults)

    return parser


def _fail(category: str, exc: Exception, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"prototransfer: {category}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail("config-error", e, 2)
    except (ContractError, GeometryError, ShapeError) as e:
        return _fail("usage-error", e, 2)
    except DataError as e:
        return _fail("data-error", e, 3)
    except OSError as e:
        return _fail("data-error", e, 3)
    except NumericsError as e:
        return _fail("numeric-error", e, 4)


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
