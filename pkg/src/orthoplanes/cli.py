"""Command-line entry point: ``orthoplanes <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 invalid input (bad config, dataset
or file), 3 numerical failure (divergence or a failed gradient check).
"""
import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, codebook, formats, gradcheck, optim, scenes
from ._validation import InvalidInputError, NumericalError
from .config import PRESETS, RunConfig, load_config
from .decoder import MlpDecoder
from .field import NeuralField
from .renderer import render_image

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag name -> dotted config key
_OVERRIDES = {
    "kind": ("representation.kind", str), "N": ("representation.N", int), "C": ("representation.C", int),
    "K": ("representation.K", int), "mode": ("decoder.mode", str),
    "n_coarse": ("sampling.n_coarse", int), "n_fine": ("sampling.n_fine", int),
    "steps": ("optim.steps", int), "batch_rays": ("optim.batch_rays", int),
    "chunk_rays": ("optim.chunk_rays", int), "lr_features": ("optim.lr_features", float),
    "lr_decoder": ("optim.lr_decoder", float), "lr_final_scale": ("optim.lr_final_scale", float),
    "log_every": ("optim.log_every", int), "eval_every": ("optim.eval_every", int),
    "seed": ("seed", int), "threads": ("threads", int), "data": ("paths.data", str), "out": ("paths.out", str),
}


def _add_run_flags(p, names):
    for name in names:
        key, typ = _OVERRIDES[name]
        flag = "--" + (name if len(name) == 1 else name.replace("_", "-"))
        p.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS, help=f"sets {key}" + (", 0 = all cores (default)" if name == "threads" else ""))


def _run_config(args):
    overrides = {_OVERRIDES[k][0]: v for k, v in vars(args).items() if k in _OVERRIDES}
    if "threads" not in overrides and not getattr(args, "config", None):
        overrides["threads"] = 0  # all cores unless a config file says otherwise
    if overrides.get("threads") == 0:
        overrides["threads"] = os.cpu_count() or 1
    return load_config(getattr(args, "config", None), getattr(args, "preset", None), overrides)


def build_parser():
    p = _Parser(prog="orthoplanes", description="Plane-based radiance fields: bake, fit, render, verify.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="bake the analytic blobs scene into a NeRF-synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=48, help="training views")
    g.add_argument("--test-views", type=int, default=8)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--samples", type=int, default=512, help="oracle samples per ray")
    g.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("fit", help="fit a representation to a dataset (single-scene overfitting)")
    f.add_argument("--config", help="JSON run config")
    f.add_argument("--preset", choices=sorted(PRESETS))
    _add_run_flags(f, _OVERRIDES)
    f.add_argument("--no-eval", action="store_true", help="skip the test-split evaluation")
    f.add_argument("--print-config", action="store_true", help="echo the resolved config and exit")

    for name, help_ in (("render", "render views of a dataset split from a checkpoint"),
                        ("eval", "per-view and mean PSNR of a checkpoint on a dataset split")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--data", required=True)
        r.add_argument("--split", default="test")
        r.add_argument("--config", help="run config (default: config.json next to the checkpoint)")
        r.add_argument("--seed", type=int, default=0)
        if name == "render":
            r.add_argument("--threads", type=int, default=0, help="worker threads, 0 = all cores")
            r.add_argument("--out", required=True)
            r.add_argument("--raw", action="store_true", help="also write float32 .raw images")
        else:
            r.add_argument("--csv", help="also write the table as CSV to this path")

    c = sub.add_parser("gradcheck", help="finite-difference check of every reverse pass")
    c.add_argument("--precision", choices=["standard", "high", "both"], default="both")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", choices=gradcheck.CLASSES, help="negate one class's gradient")

    b = sub.add_parser("bench", help="query time and memory of orthoplanes versus K")
    b.add_argument("--K", type=int, nargs="+", default=[1, 4, 8, 12])
    b.add_argument("--N", type=int, default=64)
    b.add_argument("--C", type=int, default=8)
    b.add_argument("--points", type=int, default=1_000_000)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", help="also write rows as JSON to this path")
    return p


def cmd_gen_scene(args, out):
    if args.views < 1 or args.test_views < 0 or args.resolution < 1 or args.samples < 1:
        raise InvalidInputError("views and samples must be >= 1, test views >= 0, resolution >= 1")
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    res = scenes.bake_dataset(scenes.blobs_scene(), args.views, args.test_views, args.resolution,
                              seed=args.seed, out_dir=root, n_samples=args.samples)
    for split, (manifest, _) in res.items():
        print(f"{root / f'transforms_{split}.json'}\t{len(manifest.frames)} images", file=out)
    return EXIT_OK


def _load_split(path, split):
    m = scenes.load_dataset(path, split)
    return m, optim.RayData.from_views(m.cameras(), m.load_images())


def build_field(cfg, rng=None):
    r = cfg.representation
    rng = np.random.default_rng([cfg.seed, optim.STREAM_INIT]) if rng is None else rng
    K = r.K if r.kind == "orthoplanes" else 1
    rep = codebook.make_representation(r.kind, r.N, r.C, K=K, rng=rng, scale=r.init_scale)
    dec = MlpDecoder.create(r.C, tuple(cfg.decoder.hidden), mode=cfg.decoder.mode, rng=rng, alpha=cfg.decoder.alpha)
    return NeuralField(rep, dec)


def cmd_fit(args, out):
    cfg = _run_config(args)
    if args.print_config:
        print(cfg.to_json(), file=out)
        return EXIT_OK
    if not cfg.paths.data:
        raise InvalidInputError("fit needs --data (or paths.data in the config)")
    if cfg.warp.enabled:
        raise InvalidInputError("warp.enabled: fitting posed articulated captures is not supported by 'fit'")
    _, train = _load_split(cfg.paths.data, "train")
    test = None
    if not args.no_eval and (Path(cfg.paths.data) / "transforms_test.json").exists():
        _, test = _load_split(cfg.paths.data, "test")
    fld = build_field(cfg)
    out_dir = Path(cfg.paths.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())
    t0 = time.perf_counter()
    state = optim.train_sso(train, fld, cfg.train_config(), eval_data=test)
    elapsed = time.perf_counter() - t0
    state.write_trace(out_dir / "trace.csv")
    formats.save_checkpoint(out_dir / "model.opln", fld.rep, fld.decoder)
    last = state.trace[-1] if state.trace else None
    print(f"representation\t{codebook.describe(fld.rep)}\tparams\t{codebook.param_count(fld.rep)}", file=out)
    if last is not None:
        print(f"train_psnr\t{last.psnr:.4f}", file=out)
    if state.evals:
        print(f"test_psnr\t{state.evals[-1][1]:.4f}", file=out)
    print(f"seconds\t{elapsed:.1f}", file=out)
    print(f"checkpoint\t{out_dir / 'model.opln'}", file=out)
    return EXIT_OK


def _load_model(args):
    rep, dec = formats.load_checkpoint(args.checkpoint)
    if dec is None:
        raise InvalidInputError(f"{args.checkpoint}: checkpoint has no decoder")
    cfg_path = args.config or Path(args.checkpoint).with_name("config.json")
    cfg = RunConfig.from_json(Path(cfg_path).read_text()) if Path(cfg_path).exists() else RunConfig()
    return NeuralField(rep, dec), cfg


def _threads(n):
    return n if n > 0 else os.cpu_count() or 1


def cmd_render(args, out):
    fld, cfg = _load_model(args)
    manifest = scenes.load_dataset(args.data, args.split)
    sampling = cfg.sampling_config()
    sampling.perturb = False
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(manifest.cameras()):
        img = render_image(cam, fld, sampling, seed=args.seed, threads=_threads(args.threads))
        formats.write_png(root / f"r_{i}.png", img)
        if args.raw:
            formats.write_raw(root / f"r_{i}.raw", img)
    print(f"{root}\t{len(manifest.frames)} images", file=out)
    return EXIT_OK


def cmd_eval(args, out):
    fld, cfg = _load_model(args)
    _, data = _load_split(args.data, args.split)
    tc = cfg.train_config()
    tc.seed = args.seed
    mean, per_view = optim.evaluate(fld, data, tc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["view", "psnr"])
    for i, v in enumerate(per_view):
        w.writerow([i, repr(float(v))])
    w.writerow(["mean", repr(mean)])
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    print(buf.getvalue(), end="", file=out)
    print(file=out)
    print(f"{'view':>6}  {'psnr':>9}", file=out)
    for i, v in enumerate(per_view):
        print(f"{i:>6}  {v:>9.4f}", file=out)
    print(f"{'mean':>6}  {mean:>9.4f}", file=out)
    return EXIT_OK


def cmd_gradcheck(args, out):
    precisions = ["standard", "high"] if args.precision == "both" else [args.precision]
    ok = True
    for p in precisions:
        rep = gradcheck.run_gradcheck(p, args.instances, args.seed, fault=args.inject_fault)
        print(f"precision={p} tolerance={rep.tolerance:g}", file=out)
        for line in rep.lines():
            print(line, file=out)
        ok &= rep.passed
    print("PASS" if ok else "FAIL", file=out)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_bench(args, out):
    if min(args.K) < 1 or args.N < 2 or args.C < 1 or args.points < 1:
        raise InvalidInputError("bench needs K >= 1, N >= 2, C >= 1 and at least one point")
    rows = bench.run_bench(tuple(args.K), args.N, args.C, args.points, args.seed, args.repeats)
    for line in bench.format_rows(rows):
        print(line, file=out)
    if args.json:
        Path(args.json).write_text(json.dumps(bench.rows_as_dicts(rows), indent=2))
    return EXIT_OK


COMMANDS = {"gen-scene": cmd_gen_scene, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, out)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, formats.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
