"""Command-line entry point.

Subcommands: gen-data, train, sample, turntable, eval, gradcheck, plot.
Exit codes: 0 success, 1 internal failure, 2 usage/input error.

The HOLOVOX_THREADS environment variable caps the BLAS/OpenMP worker
count; it is applied before numpy is imported, so this module keeps all
heavy imports inside functions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _apply_thread_env() -> None:
    cap = os.environ.get("HOLOVOX_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="holovox",
        description="3D generative diffusion over voxel feature grids, "
                    "trained from posed images via differentiable rendering.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic posed-video dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--size", type=int, required=True, help="square image size in pixels")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", type=str, required=True)

    t = sub.add_parser("train", help="train the full pipeline from a config file")
    t.add_argument("--config", type=str, required=True)
    t.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")

    s = sub.add_parser("sample", help="draw feature grids from a trained model")
    s.add_argument("--ckpt", type=str, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", type=str, required=True)

    tt = sub.add_parser("turntable", help="render a grid from a ring of cameras")
    tt.add_argument("--ckpt", type=str, required=True)
    tt.add_argument("--grid", type=str, required=True)
    tt.add_argument("--views", type=int, required=True)
    tt.add_argument("--out", type=str, required=True)
    tt.add_argument("--size", type=int, default=64)

    e = sub.add_parser("eval", help="held-out-view PSNR against the mean-color baseline")
    e.add_argument("--ckpt", type=str, required=True)
    e.add_argument("--dataset", type=str, required=True)
    e.add_argument("--out", type=str, required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference verification suites")
    gc.add_argument("--full", action="store_true",
                    help="20 random points per check instead of 5")

    pl = sub.add_parser("plot", help="loss curves from a metrics log")
    pl.add_argument("--metrics", type=str, required=True)
    pl.add_argument("--out", type=str, required=True)

    ct = sub.add_parser("config-template", help="print an annotated config template")
    return p


# -- subcommand implementations ----------------------------------------------


def _cmd_gen_data(args) -> int:
    from .dataio import generate_dataset, load_scene_field

    out = Path(args.out)
    written = generate_dataset(out, n_scenes=args.scenes, n_frames=args.frames,
                               image_size=args.size, seed=args.seed)
    for sdir in written:
        scene = load_scene_field(sdir)
        print(f"{sdir.name}: {len(scene.ellipsoids)} ellipsoid(s), "
              f"{args.frames} frames at {args.size}x{args.size}")
    print(f"dataset written to {out}")
    return EXIT_OK


class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / "lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"run directory is locked by {self.path} (another training "
                "process, or a stale lock to delete)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _cmd_train(args) -> int:
    import numpy as np

    from .config import ConfigError, load_run_config
    from .dataio import DatasetError, load_dataset, save_image
    from .renderer import render
    from .trainer import (build_model_state, evaluate_reconstruction, load_state,
                          lr_plateau, reconstruct_grid, save_state, train_step)

    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    try:
        run_cfg = load_run_config(cfg_path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc

    dataset_path = Path(run_cfg.dataset)
    if not dataset_path.exists():
        raise UsageError(f"dataset not found: {dataset_path}")
    try:
        videos = load_dataset(dataset_path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc

    tcfg = run_cfg.train_config()
    run_dir = Path(run_cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "renders").mkdir(exist_ok=True)

    with _RunLock(run_dir):
        if args.resume:
            state, rng = load_state(args.resume, tcfg)
            print(f"resumed from {args.resume} at step {state.step}")
            log_mode = "a"
        else:
            rng = np.random.default_rng(run_cfg.seed)
            state = build_model_state(tcfg, rng)
            log_mode = "w"
        base_lr = tcfg.learning_rate
        history: list[float] = []

        metrics_path = run_dir / "metrics.jsonl"
        with open(metrics_path, log_mode) as log:
            while state.step < tcfg.max_steps:
                video = videos[int(rng.integers(len(videos)))]
                report = train_step(state, video, rng, tcfg)
                history.append(report.total)
                lr = lr_plateau(history, base_lr, factor=tcfg.decay_factor,
                                patience=tcfg.plateau_patience,
                                threshold=tcfg.plateau_threshold,
                                window=tcfg.plateau_window,
                                max_decays=tcfg.max_lr_decays)
                state.optimizer.lr = lr
                if state.step % run_cfg.log_every == 0 or state.step == tcfg.max_steps:
                    entry = {"step": state.step, "photometric": report.photometric,
                             "bootstrap": report.bootstrap, "lr": lr,
                             "t": report.t, "t_prime": report.t_prime}
                    log.write(json.dumps(entry) + "\n")
                    log.flush()
                if run_cfg.checkpoint_every and state.step % run_cfg.checkpoint_every == 0:
                    save_state(run_dir / f"ckpt_{state.step:07d}.ckpt", state, tcfg, rng)
                    save_state(run_dir / "latest.ckpt", state, tcfg, rng)
                if run_cfg.render_every and state.step % run_cfg.render_every == 0:
                    video0 = videos[0]
                    grid = reconstruct_grid(state, video0.frames[: tcfg.n_source_views],
                                            tcfg.grid_resolution)
                    img, cam = video0.frames[-1]
                    out = render(grid, cam, state.render_mlp, tcfg.render)
                    save_image(run_dir / "renders" / f"step_{state.step:07d}.png",
                               out.rgb.data)
            save_state(run_dir / "latest.ckpt", state, tcfg, rng)
            report = evaluate_reconstruction(state, videos, tcfg)
            (run_dir / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True))
            print(f"trained to step {state.step}; mean held-out PSNR "
                  f"{report['mean_psnr']:.2f} dB (mean-color baseline "
                  f"{report['mean_baseline_psnr']:.2f} dB)")
    return EXIT_OK


def _ckpt_train_config(meta: dict):
    from .renderer import RenderConfig
    from .trainer import TrainConfig

    cfg_dict = dict(meta.get("config", {}))
    if not cfg_dict:
        raise UsageError("checkpoint carries no training config")
    render = cfg_dict.pop("render")
    cfg_dict["render"] = RenderConfig(**render)
    cfg_dict["denoiser_channel_mults"] = tuple(cfg_dict["denoiser_channel_mults"])
    return TrainConfig(**cfg_dict)


def _load_ckpt_state(path):
    from .dataio import load_checkpoint
    from .trainer import load_state

    ckpt = Path(path)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    _, meta = load_checkpoint(ckpt)
    tcfg = _ckpt_train_config(meta)
    state, _rng = load_state(ckpt, tcfg)
    return state, tcfg


def _cmd_sample(args) -> int:
    import numpy as np

    from .dataio import save_checkpoint, save_image
    from .geometry import ring_cameras
    from .renderer import render
    from .trainer import sample_generation

    state, tcfg = _load_ckpt_state(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    grids = sample_generation(state, args.n, rng)
    cam = ring_cameras(1, radius=2.7, elevation=0.35, image_size=64,
                       focal=64 * 1.2)[0]
    for i, grid in enumerate(grids):
        save_checkpoint(out / f"grid_{i:03d}.ckpt", {"grid": grid.data.data},
                        {"kind": "feature_grid", "extent": list(grid.extent)})
        view = render(grid, cam, state.render_mlp, tcfg.render)
        save_image(out / f"grid_{i:03d}.png", view.rgb.data)
        print(f"grid_{i:03d}: values in [{grid.data.data.min():+.3f}, "
              f"{grid.data.data.max():+.3f}]")
    return EXIT_OK


def _cmd_turntable(args) -> int:
    from .dataio import CheckpointFormatError, load_checkpoint, save_image
    from .engine import Tensor
    from .geometry import ring_cameras
    from .renderer import render
    from .voxel_grid import FeatureGrid

    state, tcfg = _load_ckpt_state(args.ckpt)
    grid_path = Path(args.grid)
    if not grid_path.is_file():
        raise UsageError(f"grid file not found: {grid_path}")
    arrays, meta = load_checkpoint(grid_path)
    if "grid" not in arrays:
        raise CheckpointFormatError(f"{grid_path}: no 'grid' tensor inside")
    extent = tuple(meta.get("extent", (-1.0, 1.0)))
    grid = FeatureGrid(Tensor(arrays["grid"]), extent=extent)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = ring_cameras(args.views, radius=2.7, elevation=0.35,
                        image_size=args.size, focal=args.size * 1.2)
    for i, cam in enumerate(cams):
        view = render(grid, cam, state.render_mlp, tcfg.render)
        save_image(out / f"frame_{i:03d}.png", view.rgb.data)
    print(f"wrote {args.views} turntable frames to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .dataio import DatasetError, load_dataset
    from .trainer import evaluate_reconstruction

    state, tcfg = _load_ckpt_state(args.ckpt)
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise UsageError(f"dataset not found: {dataset_path}")
    try:
        videos = load_dataset(dataset_path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate_reconstruction(state, videos, tcfg)
    Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    for sid, entry in report["scenes"].items():
        print(f"{sid}: psnr {entry['psnr']:.2f} dB, baseline "
              f"{entry['baseline_psnr']:.2f} dB ({entry['n_targets']} held-out views)")
    print(f"mean psnr {report['mean_psnr']:.2f} dB vs baseline "
          f"{report['mean_baseline_psnr']:.2f} dB")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck_suite

    results = run_gradcheck_suite(full=args.full, progress=print)
    failures = [r for r in results if not r.passed]
    print(f"{len(results) - len(failures)}/{len(results)} checks passed")
    return EXIT_OK if not failures else EXIT_INTERNAL


def _cmd_plot(args) -> int:
    metrics = Path(args.metrics)
    if not metrics.is_file():
        raise UsageError(f"metrics log not found: {metrics}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, photo, boot, lr = [], [], [], []
    for line in metrics.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        steps.append(entry["step"])
        photo.append(entry["photometric"])
        boot.append(entry.get("bootstrap"))
        lr.append(entry.get("lr"))
    if not steps:
        raise UsageError(f"metrics log {metrics} is empty")

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, photo, label="photometric", lw=1.0)
    bs = [(s, b) for s, b in zip(steps, boot) if b is not None]
    if bs:
        ax.plot(*zip(*bs), label="bootstrap", lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right")
    ax2 = ax.twinx()
    ax2.plot(steps, lr, color="gray", ls="--", lw=0.8, label="lr")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    _apply_thread_env()
    parser = _build_parser()
    args = parser.parse_args(argv)

    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "sample": _cmd_sample,
        "turntable": _cmd_turntable,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
        "plot": _cmd_plot,
    }
    if args.command == "config-template":
        from .config import config_template
        print(config_template())
        return EXIT_OK

    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # internal failure
        from .config import ConfigError

        if isinstance(exc, ConfigError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
