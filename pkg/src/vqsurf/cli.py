"""Command-line pipeline: scene generation, VAE pretraining, renderer
training, rendering, evaluation, and benchmarking.

Exit codes: 0 success, 1 usage or config validation, 2 data error,
3 numeric failure. Every run writes a resolved-config snapshot beside its
outputs, and partial outputs are removed on failure so reruns are clean.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="vqsurf", description=__doc__)
    parser.add_argument("--threads", type=int, default=0,
                        help="BLAS/OpenMP thread cap (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="render an analytic scene to a dataset")
    p.add_argument("--spec", help="scene spec JSON (omit for the builtin sphere)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain-vae", help="train the VQ-VAE on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("train", help="train the renderer against a frozen VAE")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", default="",
                   help="comma-separated view ids excluded from training")
    _config_flags(p)

    p = sub.add_parser("render", help="render one view to a PNG")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-model", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view-id")
    p.add_argument("--pose-file", help="novel pose JSON instead of a view id")
    p.add_argument("--path", choices=["compressed", "per-pixel"],
                   default="compressed")
    _config_flags(p)

    p = sub.add_parser("eval", help="PSNR/SSIM of both paths on given views")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-model", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--views", required=True,
                   help="comma-separated view ids to evaluate")
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("bench", help="time compressed vs per-pixel rendering")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-model", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--view-id")
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=3)
    _config_flags(p)
    return parser


def _config_flags(p):
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (JSON literal values)")
    p.add_argument("--seed", type=int, help="override the config seed")


def _resolve_config(args):
    from .training import TrainConfig

    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            data[key] = json.loads(raw)
        except json.JSONDecodeError:
            data[key] = raw
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "holdout", ""):
        data["holdout"] = [v for v in args.holdout.split(",") if v]
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config validation failed: {exc}") from exc


def _snapshot(path: Path, args, config=None, written=None):
    rec = {"command": args.command,
           "args": {k: v for k, v in sorted(vars(args).items())
                    if k not in ("command",)}}
    if config is not None:
        rec["config"] = config.to_dict()
    path.write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")
    if written is not None:
        written.append(path)


def _load_models(args):
    from .renderer import load_scene_model
    from .vq import VqVae

    model = load_scene_model(args.scene_model)
    vae = VqVae.load(args.vae)
    return model, vae


def _cmd_make_scene(args, written):
    from . import scene as scn

    if args.spec:
        try:
            spec = json.loads(Path(args.spec).read_text())
        except OSError as exc:
            raise scn.DataError(f"cannot read scene spec: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise scn.DataError(f"malformed scene spec: {exc}") from exc
    else:
        spec = scn.DEFAULT_SCENE_SPEC
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = scn.make_synthetic_scene(spec, out)
    for v in ds.views:
        written.append(out / "images" / f"{v.view_id}.png")
    written.extend([out / "manifest.json", out / "scene.json"])
    _snapshot(out / "resolved_config.json", args, written=written)
    print(f"wrote {len(ds.views)} views to {out}")
    return EXIT_OK


def _cmd_pretrain_vae(args, written):
    import numpy as np

    from . import scene as scn
    from . import vq as vqm

    config = _resolve_config(args)
    ds = scn.load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "vae.ckpt"
    metrics_path = out / "vae_metrics.jsonl"
    written.extend([ckpt_path, metrics_path])
    rng = np.random.default_rng(config.seed)
    with open(metrics_path, "w") as fh:
        def log(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        vae, _ = vqm.pretrain_vae(
            [v.image for v in ds.views], rng, steps=config.vae_steps,
            lr=config.vae_lr, beta=config.commitment_beta,
            n_q=config.codebook_dim, codebook_size=config.codebook_size,
            channels=config.vae_channels,
            reseed_after=config.vae_reseed_after, progress=log)
    vae.save(ckpt_path)
    util = vqm.codebook_utilization(vae, [v.image for v in ds.views])
    _snapshot(out / "resolved_config.json", args, config, written)
    print(f"vae checkpoint: {ckpt_path} (codebook utilization {util:.3f})")
    return EXIT_OK


def _cmd_train(args, written):
    from . import scene as scn
    from . import training as trn
    from .vq import VqVae

    config = _resolve_config(args)
    ds = scn.load_dataset(args.dataset)
    vae = VqVae.load(args.vae)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written.extend([out / "metrics.jsonl", out / "timings.jsonl",
                    out / "scene_model.ckpt"])
    result = trn.train(ds, vae, config, out)
    _snapshot(out / "resolved_config.json", args, config, written)
    print(f"scene checkpoint: {result['checkpoint']}")
    return EXIT_OK


def _novel_view(pose_file):
    import numpy as np

    from . import scene as scn

    try:
        rec = json.loads(Path(pose_file).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise scn.DataError(f"cannot read pose file {pose_file}: {exc}") from exc
    for key in ("pose", "fx", "fy", "cx", "cy", "height", "width"):
        if key not in rec:
            raise scn.DataError(f"pose file missing field {key!r}")
    return scn.CameraView(
        "novel", rec["fx"], rec["fy"], rec["cx"], rec["cy"],
        np.asarray(rec["pose"]),
        np.zeros((rec["height"], rec["width"], 3)))


def _pick_view(args, ds):
    from . import scene as scn

    if args.pose_file:
        return _novel_view(args.pose_file)
    if args.view_id:
        return ds.get_view(args.view_id)
    raise UsageError("provide --view-id or --pose-file")


def _cmd_render(args, written):
    from . import autodiff as ad
    from . import renderer as rnd
    from . import scene as scn
    from . import vq as vqm

    config = _resolve_config(args)
    ds = scn.load_dataset(args.dataset)
    model, vae = _load_models(args)
    view = _pick_view(args, ds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written.append(out)
    if args.path == "compressed":
        with ad.no_grad():
            grid, _ = rnd.render_feature_grid(
                view, model, ds.t_near, ds.t_far, config.n_coarse,
                config.n_fine, None, factor=config.downsample_factor)
            image = vae.decode(vqm.quantize(grid, vae.book).z_q).data
    else:
        image = rnd.render_rgb_image(view, model, ds.t_near, ds.t_far,
                                     config.n_coarse, config.n_fine)
    scn.save_image(out, image)
    _snapshot(out.with_suffix(".config.json"), args, config, written)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_eval(args, written):
    import numpy as np

    from . import autodiff as ad
    from . import metrics as mtr
    from . import renderer as rnd
    from . import scene as scn
    from . import vq as vqm

    config = _resolve_config(args)
    ds = scn.load_dataset(args.dataset)
    model, vae = _load_models(args)
    view_ids = [v for v in args.views.split(",") if v]
    if not view_ids:
        raise UsageError("eval: --views must name at least one view")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written.append(out)
    per_view = {}
    for view_id in view_ids:
        view = ds.get_view(view_id)
        with ad.no_grad():
            grid, _ = rnd.render_feature_grid(
                view, model, ds.t_near, ds.t_far, config.n_coarse,
                config.n_fine, None, factor=config.downsample_factor)
            compressed = np.clip(
                vae.decode(vqm.quantize(grid, vae.book).z_q).data, 0.0, 1.0)
        per_pixel = rnd.render_rgb_image(view, model, ds.t_near, ds.t_far,
                                         config.n_coarse, config.n_fine)
        per_view[view_id] = {
            "compressed": {"psnr": mtr.psnr(compressed, view.image),
                           "ssim": mtr.ssim(compressed, view.image)},
            "per_pixel": {"psnr": mtr.psnr(per_pixel, view.image),
                          "ssim": mtr.ssim(per_pixel, view.image)},
        }
    summary = {
        "views": per_view,
        "mean": {
            path: {
                metric: sum(v[path][metric] for v in per_view.values())
                / len(per_view)
                for metric in ("psnr", "ssim")
            }
            for path in ("compressed", "per_pixel")
        },
    }
    out.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _snapshot(out.with_suffix(".config.json"), args, config, written)
    print(json.dumps(summary["mean"], sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_bench(args, written):
    from . import metrics as mtr
    from . import scene as scn

    config = _resolve_config(args)
    ds = scn.load_dataset(args.dataset)
    model, vae = _load_models(args)
    view = ds.get_view(args.view_id) if args.view_id else ds.views[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written.append(out)
    report = mtr.bench_render(model, vae, view, ds.t_near, ds.t_far,
                              n_coarse=config.n_coarse, n_fine=config.n_fine,
                              repeats=args.repeats,
                              factor=config.downsample_factor)
    out.write_text(report.to_json() + "\n")
    _snapshot(out.with_suffix(".config.json"), args, config, written)
    print(report.table())
    return EXIT_OK


_COMMANDS = {
    "make-scene": _cmd_make_scene,
    "pretrain-vae": _cmd_pretrain_vae,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    written: list[Path] = []
    try:
        return _COMMANDS[args.command](args, written)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    for path in written:  # remove partial outputs
        try:
            Path(path).unlink(missing_ok=True)
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
