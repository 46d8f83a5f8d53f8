"""Command-line entry point: ``spacetime <verb> [options]``."""

from __future__ import annotations

import os

# BLAS pools size themselves at import, so the cap must be set before numpy loads.
_threads = os.environ.get("SPACETIME_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, load_config  # noqa: E402

log = logging.getLogger("spacetime")

EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 4


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _output(args):
    """Write to ``--out`` when given, else stdout."""
    if getattr(args, "out", None):
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w")
    return sys.stdout


def cmd_train(args) -> int:
    from .training import TrainingDiverged, train

    cfg = _config(args)
    out = Path(args.out)
    try:
        result = train(cfg, out)
    except TrainingDiverged as exc:
        log.error("%s; last good checkpoint kept at %s", exc, out / "checkpoint.json")
        return EXIT_DIVERGED
    losses = result.losses
    if losses:
        print(f"steps\t{len(losses)}\ninitial_loss\t{losses[0]:.6f}\nfinal_loss\t{losses[-1]:.6f}")
    print(f"checkpoint\t{out / 'checkpoint.json'}")
    return 0


def _load_model(args):
    from .training import load_checkpoint

    cfg = load_config(args.config) if args.config else None
    model, cfg = load_checkpoint(args.checkpoint, cfg, override=args.override)
    return model, cfg


def _eval_samples(args, cfg):
    from .synthetic import load_dataset
    from .training import synthetic_split

    if args.data:
        return load_dataset(args.data)
    return synthetic_split(cfg, "eval")


def cmd_eval(args) -> int:
    from .training import evaluate, metric_lines

    model, cfg = _load_model(args)
    samples = _eval_samples(args, cfg)
    lines = metric_lines(evaluate(model, cfg, samples))
    fh = _output(args)
    try:
        fh.write("\n".join(lines) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    if fh is not sys.stdout:
        print("\n".join(ln for ln in lines if ln.startswith("summary")))
    return 0


def cmd_propagate(args) -> int:
    from . import propagation as prop
    from .synthetic import DatasetClip
    from .video_graph import clip_patches

    model, cfg = _load_model(args)
    samples = _eval_samples(args, cfg)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name, clip, truth = (s.name, s.clip, s.truth) if isinstance(s, DatasetClip) else (f"clip_{i:04d}", s[0], s[1])
        emb = model.embeddings(clip_patches(clip, tuple(cfg.grid_shape), cfg.patch_size), cfg)
        soft = prop.propagate_video(emb, truth.label_field(0), cfg.tau, cfg.infer_k, cfg.infer_context,
                                    cfg.infer_radius, tuple(cfg.grid_shape), cfg.topk_mode)
        hard = soft.argmax(axis=2)
        lines = ["frame\tnode\tlabel"]
        lines += [f"{t}\t{n}\t{hard[t, n]}" for t in range(hard.shape[0]) for n in range(hard.shape[1])]
        if out is None:
            print(f"# {name}")
            print("\n".join(lines))
        else:
            (out / f"{name}.tsv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ROW_HEADER, axis_settings, run_ablation

    try:
        axis_settings(args.axis)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    cfg = _config(args)
    fh = _output(args)
    try:
        fh.write(ROW_HEADER + "\n")
        fh.flush()

        def emit(row):
            fh.write(row.line() + "\n")
            fh.flush()

        run_ablation(cfg, args.axis, args.seeds, emit=emit)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_gradcheck

    cfg = _config(args)
    report = run_gradcheck(cfg.seed, corrupt=args.corrupt)
    print("component\tmax_rel_error\tstatus")
    failed = False
    for name, err in report:
        ok = err < THRESHOLD
        failed |= not ok
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
    return EXIT_CHECK_FAILED if failed else 0


def cmd_gen_data(args) -> int:
    from .synthetic import save_dataset
    from .training import synthetic_split

    cfg = _config(args)
    if args.count is not None:
        cfg = cfg.replace(**{"train_clips" if args.split == "train" else "eval_clips": args.count})
    samples = synthetic_split(cfg, args.split, seed=args.seed, num_frames=args.frames)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} clips to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spacetime", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value config file (defaults when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="run the two-phase training schedule")
    common(p)
    p.add_argument("--out", required=True, help="output directory for trace and checkpoint")
    p.set_defaults(func=cmd_train)

    for verb, func, helptext in (
        ("eval", cmd_eval, "score a checkpoint on a dataset"),
        ("propagate", cmd_propagate, "propagate frame-0 labels through each clip"),
    ):
        p = sub.add_parser(verb, help=helptext)
        common(p, seed=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory (default: generate the eval split from the config)")
        p.add_argument("--out", help="output file (eval) or directory (propagate)")
        p.add_argument("--override", action="store_true", help="accept a config whose fingerprint differs")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    common(p)
    p.add_argument("--axis", required=True, help="window, edge-variant, delta or path-length")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per setting")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    common(p)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--count", type=int, help="number of clips (default from config)")
    p.add_argument("--frames", type=int, help="frames per clip (default clip_length + 1)")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
