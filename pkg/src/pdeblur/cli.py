"""Command-line entry point: synth | train | eval | gradcheck | bench |
ablate | stability.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 runtime
error. Every run writes a manifest of its full effective configuration.
The PDEBLUR_OUT_ROOT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import data_synth, metrics, pde_layer, schedule as sched_mod, toy_net, trainer
from .autograd import Graph, forward_graph, grad_check
from .core import BoundaryMode
from .pde_layer import VelocityMode
from .stencil import available_backends, get_backend

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _out_dir(args, command: str) -> str:
    if getattr(args, "out", None):
        return args.out
    root = os.environ.get("PDEBLUR_OUT_ROOT", "pdeblur_out")
    return os.path.join(root, command)


def _write_manifest(out_dir: str, command: str, effective: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"manifest_version": 1, "command": command, "config": effective}
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True, default=str)


def _parse_size(text: str):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
        return h, w
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 8x8, got {text!r}")


def _parse_schedule(text: str, scale: float) -> "sched_mod.PhaseSchedule":
    if text == "progressive":
        return sched_mod.default_schedule(scale)
    if text.startswith("progressive:"):
        return sched_mod.default_schedule(float(text.split(":", 1)[1]))
    if text.startswith("fixed:"):
        k_str, dt_str = text.split(":", 1)[1].split(",")
        return sched_mod.fixed_schedule(int(k_str), float(dt_str))
    raise ValueError(f"schedule must be 'progressive[:SCALE]' or 'fixed:K,DT', got {text!r}")


def _parse_config_file(path: str) -> dict:
    """Flat key-value grammar: one `key = value` per line, '#' comments."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


_CONFIG_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "optimizer": str,
    "loss": str, "seed": int, "divergence_threshold": float, "grad_clip": float,
    "schedule": str, "scale": float, "pde_layers": int, "depth": int,
    "base_channels": int, "velocity_mode": str, "boundary_mode": str,
}


def _merge_train_settings(args) -> dict:
    """Config-file values first, CLI flags override, defaults last."""
    settings = {
        "epochs": 12, "batch_size": 16, "learning_rate": 2e-3, "optimizer": "adam",
        "loss": "charbonnier", "seed": 0, "divergence_threshold": 1e3,
        "grad_clip": None, "schedule": "progressive:0.2", "scale": 0.2,
        "pde_layers": 5, "depth": 2, "base_channels": 8,
        "velocity_mode": "spatial", "boundary_mode": "replicate",
    }
    if getattr(args, "config", None):
        for key, raw in _parse_config_file(args.config).items():
            if key not in _CONFIG_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            settings[key] = _CONFIG_KEYS[key](raw)
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "seed": args.seed, "schedule": args.schedule,
        "pde_layers": args.pde_layers, "loss": args.loss,
        "optimizer": args.optimizer, "grad_clip": args.grad_clip,
        "divergence_threshold": args.divergence_threshold,
    }
    for key, value in overrides.items():
        if value is not None:
            settings[key] = value
    return settings


def _net_config(settings: dict, data_cfg: data_synth.DatasetConfig) -> toy_net.NetConfig:
    return toy_net.NetConfig(
        depth=settings["depth"],
        base_channels=settings["base_channels"],
        pde_layers=settings["pde_layers"],
        velocity_mode=VelocityMode(settings["velocity_mode"]),
        boundary_mode=BoundaryMode(settings["boundary_mode"]),
        in_channels=data_cfg.channels,
        input_size=(data_cfg.size, data_cfg.size),
    )


def _train_config(settings: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        learning_rate=settings["learning_rate"],
        optimizer=settings["optimizer"],
        loss=settings["loss"],
        schedule=_parse_schedule(settings["schedule"], settings["scale"]),
        divergence_threshold=settings["divergence_threshold"],
        grad_clip=settings["grad_clip"],
        seed=settings["seed"],
    )


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args, "synth")
    cfg = data_synth.DatasetConfig(
        n_train=args.count, n_val=args.count // 8, n_test=args.count // 8,
        size=args.size, seed=args.seed, blur_len_min=args.blur_len_min,
        blur_len_max=args.blur_len_max, noise_sigma_max=args.noise_sigma)
    ds = data_synth.generate_dataset(cfg)
    data_synth.save_dataset(out, ds)
    _write_manifest(out, "synth", cfg.to_dict())
    print(f"wrote {cfg.n_train}/{cfg.n_val}/{cfg.n_test} train/val/test pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    os.makedirs(out, exist_ok=True)
    ds = data_synth.load_dataset(args.data)
    settings = _merge_train_settings(args)
    net_cfg = _net_config(settings, ds.config)
    train_cfg = _train_config(settings)
    model = toy_net.build(net_cfg, seed=train_cfg.seed)
    _write_manifest(out, "train", {**settings, "data": args.data,
                                   "net_config": net_cfg.to_dict()})
    _, log = trainer.train(model, ds.train, train_cfg, run_id=args.run_id,
                           checkpoint_dir=out)
    log.write_csv(os.path.join(out, "runlog.csv"))
    if not os.path.exists(os.path.join(out, "last.ckpt")):  # 0-epoch run
        trainer.save_checkpoint(os.path.join(out, "last.ckpt"), model,
                                None, 0, train_cfg, args.run_id)

    phase = sched_mod.phase_for_epoch(train_cfg.schedule, max(train_cfg.epochs - 1, 0))
    ev = trainer.evaluate(model, ds.val,
                          pde_layer.Discretization(delta_t=phase.delta_t, k=phase.k))
    with open(os.path.join(out, "val_metrics.json"), "w") as f:
        json.dump(ev, f, indent=1, sort_keys=True)
    print(f"status: {log.status}" + (
        f" ({log.divergence_reason})" if log.status == "diverged" else ""))
    print(f"val PSNR restored {ev['psnr_restored']:.3f} dB "
          f"(blurred input {ev['psnr_blurred']:.3f} dB), "
          f"SSIM {ev['ssim_restored']:.4f} [{ev['ssim_mode']}]")
    return EXIT_OK


def _model_macs(model: toy_net.Model, image_shape) -> metrics.MacCounter:
    counter = metrics.MacCounter()
    forward_graph(model.graph, model.params,
                  {"image": np.zeros(image_shape)}, counter=counter)
    return counter


def cmd_eval(args) -> int:
    model, header, _ = trainer.load_checkpoint(args.checkpoint)
    ds = data_synth.load_dataset(args.data)
    tc = header.get("train_config") or {}
    if tc.get("schedule"):
        phases = [sched_mod.Phase(**p) for p in tc["schedule"]["phases"]]
        sched = sched_mod.PhaseSchedule.create(tc["schedule"]["total_time"], phases)
        phase = sched_mod.phase_for_epoch(sched, max(header["epoch_next"] - 1, 0))
        disc = pde_layer.Discretization(delta_t=phase.delta_t, k=phase.k)
    else:
        disc = pde_layer.Discretization(delta_t=0.2, k=5)
    pairs = ds.split(args.split)
    ev = trainer.evaluate(model, pairs, disc, ssim_mode=args.ssim_mode)
    counter = _model_macs(model, (1, ds.config.channels, ds.config.size, ds.config.size))

    out_csv = args.out
    out_dir = os.path.dirname(os.path.abspath(out_csv)) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["run_id", "epoch", "split", "psnr_db", "ssim", "ssim_mode", "gmacs"])
        wr.writerow([header.get("run_id", ""), header["epoch_next"], args.split,
                     f"{ev['psnr_restored']:.6f}", f"{ev['ssim_restored']:.6f}",
                     ev["ssim_mode"], f"{counter.gmacs():.3f}"])
    if args.images:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        model.set_discretization(disc)
        for i, s in enumerate(pairs):
            restored = toy_net.predict(model, s.blurred[None])[0]
            data_synth.write_image(os.path.join(img_dir, f"{i:05d}_restored.ppm"), restored)
            data_synth.write_image(os.path.join(img_dir, f"{i:05d}_blurred.ppm"), s.blurred)
            data_synth.write_image(os.path.join(img_dir, f"{i:05d}_sharp.ppm"), s.sharp)
    _write_manifest(out_dir, "eval", {"checkpoint": args.checkpoint, "data": args.data,
                                      "split": args.split, "ssim_mode": args.ssim_mode})
    print(f"{args.split} PSNR {ev['psnr_restored']:.3f} dB, "
          f"SSIM {ev['ssim_restored']:.4f} [{ev['ssim_mode']}], "
          f"{counter.gmacs():.3f} GMACs/image")
    return EXIT_OK


def build_pde_only_graph(channels: int, height: int, width: int,
                         velocity_mode: VelocityMode, boundary_mode: BoundaryMode,
                         disc: pde_layer.Discretization, seed: int,
                         init_scale: float = 0.5):
    """Single-PDE-node graph plus its parameter dict, for gradient checks."""
    from .autograd import DiscretizationBox

    graph = Graph()
    node = graph.input("image")
    lp = pde_layer.init_params(channels, height, width, mode=velocity_mode,
                               seed=seed, init_scale=init_scale)
    params = {f"pde0.{k}": v for k, v in lp.arrays().items()}
    graph.add("pde_layer", [node], prefix="pde0", velocity_mode=velocity_mode,
              mode=boundary_mode, disc_box=DiscretizationBox(disc))
    return graph, params


def cmd_gradcheck(args) -> int:
    h, w = args.size
    worst = 0.0
    failed = []
    for seed in range(args.seeds):
        graph, params = build_pde_only_graph(
            args.channels, h, w, VelocityMode(args.velocity_mode),
            BoundaryMode(args.boundary_mode),
            pde_layer.Discretization(delta_t=args.delta_t, k=args.k),
            seed=seed, init_scale=args.init_scale)
        rng = np.random.default_rng(1000 + seed)
        image = rng.uniform(-1.0, 1.0, (1, args.channels, h, w))
        report = grad_check(graph, params, {"image": image},
                            epsilon=args.epsilon, tolerance=args.tolerance, seed=seed)
        worst = max(worst, report.worst_rel_err)
        if not report.passed:
            failed.append((seed, report))
        print(f"seed {seed}: {report.summary().splitlines()[0]}")
    if failed:
        print(f"gradcheck FAILED for {len(failed)}/{args.seeds} seeds "
              f"(worst rel err {worst:.3e} > tolerance {args.tolerance:g})")
        return EXIT_VERIFICATION
    print(f"gradcheck PASSED: {args.seeds} seeds, K={args.k}, {h}x{w}, "
          f"{args.channels} channels, worst rel err {worst:.3e}")
    return EXIT_OK


def cmd_bench(args) -> int:
    h, w = args.size
    shape = (args.batch, args.channels, h, w)
    ks = [int(p) for p in args.k_list.split(",")]
    vmode = VelocityMode(args.velocity_mode)
    backends = list(available_backends()) if args.compare_backends else [None]

    rows = []
    rng = np.random.default_rng(0)
    image = rng.uniform(0.0, 1.0, shape)
    lp = pde_layer.init_params(args.channels, h, w, mode=vmode, seed=0, init_scale=0.3)
    for k in ks:
        disc = pde_layer.Discretization(delta_t=1.0 / k, k=k)
        row = {"k": k, "macs": metrics.pde_layer_macs(shape, k, vmode),
               "gmacs": metrics.pde_layer_macs(shape, k, vmode) / 1e9}
        for backend_name in backends:
            backend = get_backend(backend_name)
            import pdeblur.stencil as st
            saved = (st.step_forward, st.step_adjoint, st.BACKEND)
            st.step_forward, st.step_adjoint, st.BACKEND = (
                backend.step_forward, backend.step_adjoint, backend.NAME)
            try:
                pde_layer.forward(image, lp, disc)  # warmup
                t0 = time.perf_counter()
                for _ in range(args.reps):
                    pde_layer.forward(image, lp, disc)
                ms = (time.perf_counter() - t0) / args.reps * 1e3
            finally:
                st.step_forward, st.step_adjoint, st.BACKEND = saved
            label = f"time_{backend.NAME}_ms" if args.compare_backends else "time_ms"
            row[label] = round(ms, 4)
        rows.append(row)

    fieldnames = list(rows[0].keys())
    wr = csv.DictWriter(sys.stdout, fieldnames=fieldnames)
    wr.writeheader()
    wr.writerows(rows)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
        with open(args.out, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=fieldnames)
            wr.writeheader()
            wr.writerows(rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args, "ablate")
    os.makedirs(out, exist_ok=True)
    ds = data_synth.load_dataset(args.data)
    values = [int(p) for p in args.values.split(",")]
    rows = []
    for value in values:
        if args.axis == "k":
            pde_layers = 0 if value == 0 else args.pde_layers
            sched = (sched_mod.fixed_schedule(1, 1.0) if value == 0
                     else sched_mod.progressive_schedule_to(value, args.scale))
        else:
            pde_layers = value
            sched = (sched_mod.fixed_schedule(1, 1.0) if value == 0
                     else sched_mod.default_schedule(args.scale))
        net_cfg = toy_net.NetConfig(
            pde_layers=pde_layers, in_channels=ds.config.channels,
            input_size=(ds.config.size, ds.config.size))
        train_cfg = trainer.TrainConfig(epochs=args.epochs, seed=args.seed,
                                        schedule=sched)
        model = toy_net.build(net_cfg, seed=args.seed)
        _, log = trainer.train(model, ds.train, train_cfg,
                               run_id=f"{args.axis}{value}")
        phase = sched_mod.phase_for_epoch(sched, max(args.epochs - 1, 0))
        ev = trainer.evaluate(model, ds.val,
                              pde_layer.Discretization(delta_t=phase.delta_t, k=phase.k))
        rows.append({
            "axis": args.axis, "value": value, "status": log.status,
            "val_psnr": f"{ev['psnr_restored']:.6f}",
            "val_ssim": f"{ev['ssim_restored']:.6f}",
            "ssim_mode": ev["ssim_mode"],
            "max_grad_norm": f"{log.max_grad_norm():.6g}",
        })
        print(f"{args.axis}={value}: {log.status}, val PSNR {ev['psnr_restored']:.3f} dB")
    path = os.path.join(out, "ablate.csv")
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        wr.writeheader()
        wr.writerows(rows)
    _write_manifest(out, "ablate", vars(args))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_stability(args) -> int:
    out = _out_dir(args, "stability")
    ds = data_synth.load_dataset(args.data)
    net_cfg = toy_net.NetConfig(in_channels=ds.config.channels,
                                input_size=(ds.config.size, ds.config.size))
    base = trainer.TrainConfig(epochs=args.epochs, seed=args.seed,
                               schedule=sched_mod.default_schedule(args.scale))
    report = trainer.stability_experiment(ds.train, ds.val, net_cfg, base, out_dir=out)
    _write_manifest(out, "stability", vars(args))
    print("\n".join(report.summary_lines()))
    print("note: optimizer moments carry across phase transitions (never reset)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdeblur", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blur dataset")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur-len-min", type=float, default=3.0)
    p.add_argument("--blur-len-max", type=float, default=9.0)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy deblurring network")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--schedule", help="progressive[:SCALE] or fixed:K,DT")
    p.add_argument("--pde-layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["charbonnier", "l1"])
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--divergence-threshold", type=float)
    p.add_argument("--run-id", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--ssim-mode", default="block8", choices=["gaussian11", "block8"])
    p.add_argument("--images", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the PDE layer")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--size", type=_parse_size, default=(8, 8))
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--delta-t", type=float, default=0.2)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--velocity-mode", default="spatial", choices=["spatial", "uniform"])
    p.add_argument("--boundary-mode", default="replicate",
                   choices=["replicate", "periodic", "zeropad"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="MAC/time table over iteration counts")
    p.add_argument("--k-list", default="1,3,5,7")
    p.add_argument("--size", type=_parse_size, default=(32, 32))
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--velocity-mode", default="spatial", choices=["spatial", "uniform"])
    p.add_argument("--compare-backends", action="store_true",
                   help="time every available stencil backend")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="sweep iteration count K or PDE layer count")
    p.add_argument("--axis", required=True, choices=["k", "layers"])
    p.add_argument("--values", required=True, help="comma-separated list, 0 = baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.2)
    p.add_argument("--pde-layers", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stability", help="direct (fixed K=5) vs progressive comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.2)
    p.set_defaults(func=cmd_stability)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
