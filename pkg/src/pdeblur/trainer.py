"""Training loop with progressive phase transitions, divergence detection,
checkpointing, and the direct-vs-progressive stability harness.

Determinism contract: batch order is derived from (seed, epoch), optimizer
moments are serialized in checkpoints, and phase (K, dt) is re-queried from
the schedule every epoch, so resuming from a checkpoint reproduces the
uninterrupted run bit-for-bit on one platform.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, pde_layer, toy_net
from .autograd import backward_graph, forward_graph
from .metrics import GradNormRecord
from .schedule import PhaseSchedule, default_schedule, phase_for_epoch

CHECKPOINT_VERSION = 1
RUNLOG_COLUMNS = ("run_id", "epoch", "step", "k", "delta_t", "loss",
                  "grad_norm", "wall_ms", "status")


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 2e-3
    optimizer: str = "adam"  # or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sgd_momentum: float = 0.9
    loss: str = "charbonnier"  # or "l1"
    charbonnier_eps: float = 1e-3
    schedule: PhaseSchedule = field(default_factory=lambda: default_schedule(0.2))
    divergence_threshold: float = 1e3
    grad_clip: float | None = None  # off by default; clipping masks instability
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence_threshold must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("charbonnier", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")


def charbonnier_loss(pred, target, eps=1e-3):
    d = pred - target
    root = np.sqrt(d * d + eps * eps)
    return float(np.mean(root)), d / root / d.size


def l1_loss(pred, target):
    d = pred - target
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


class Optimizer:
    """Adam or momentum-SGD over the flat parameter dict."""

    def __init__(self, cfg: TrainConfig, params: dict):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        else:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        self.t += 1
        lr = cfg.learning_rate
        for name in params:
            g = grads.get(name)
            if g is None:
                continue
            if cfg.optimizer == "adam":
                m = self.m[name]
                v = self.v[name]
                m *= cfg.adam_beta1
                m += (1 - cfg.adam_beta1) * g
                v *= cfg.adam_beta2
                v += (1 - cfg.adam_beta2) * g * g
                mhat = m / (1 - cfg.adam_beta1**self.t)
                vhat = v / (1 - cfg.adam_beta2**self.t)
                params[name] -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            else:
                m = self.m[name]
                m *= cfg.sgd_momentum
                m += g
                params[name] -= lr * m

    def state_arrays(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, t: int, arrays: dict) -> None:
        self.t = t
        for k, v in arrays.items():
            kind, name = k.split(".", 1)
            target = self.m if kind == "m" else self.v
            target[name][...] = v


@dataclass
class DivergenceStatus:
    ok: bool
    reason: str | None = None


def detect_divergence(record: GradNormRecord, loss: float,
                      threshold: float) -> DivergenceStatus:
    """Diverged iff the global grad norm exceeds the threshold or anything
    went non-finite; the reason names the trigger and its value."""
    if not math.isfinite(loss):
        return DivergenceStatus(False, f"non-finite loss {loss}")
    if not record.finite or not math.isfinite(record.global_norm):
        return DivergenceStatus(False, "non-finite gradient")
    if record.global_norm > threshold:
        return DivergenceStatus(False, f"grad_norm {record.global_norm:g} > {threshold:g}")
    return DivergenceStatus(True)


@dataclass
class RunLog:
    run_id: str
    rows: list = field(default_factory=list)
    status: str = "completed"  # completed | diverged | halted
    divergence_reason: str | None = None
    divergence_epoch: int | None = None
    divergence_step: int | None = None

    def append(self, epoch, step, k, delta_t, loss, grad_norm_value, wall_ms,
               status="ok"):
        self.rows.append({
            "run_id": self.run_id, "epoch": epoch, "step": step, "k": k,
            "delta_t": delta_t, "loss": loss, "grad_norm": grad_norm_value,
            "wall_ms": wall_ms, "status": status,
        })

    def max_grad_norm(self) -> float:
        return max((r["grad_norm"] for r in self.rows), default=0.0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=RUNLOG_COLUMNS)
            wr.writeheader()
            wr.writerows(self.rows)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _stack(pairs, idx):
    blurred = np.stack([pairs[i].blurred for i in idx])
    sharp = np.stack([pairs[i].sharp for i in idx])
    return blurred, sharp


# ---------------------------------------------------------------------------
# checkpoints: JSON header line + flat little-endian f64 blob, atomic write


def save_checkpoint(path, model: toy_net.Model, opt: Optimizer | None,
                    epoch_next: int, config: TrainConfig | None,
                    run_id: str = "") -> None:
    arrays = dict(model.params)
    opt_names = []
    if opt is not None:
        state = opt.state_arrays()
        opt_names = sorted(state)
        for k in opt_names:
            arrays[f"opt.{k}"] = state[k]
    param_names = sorted(model.params)
    order = param_names + [f"opt.{k}" for k in opt_names]
    header = {
        "version": CHECKPOINT_VERSION,
        "run_id": run_id,
        "epoch_next": epoch_next,
        "seed": model.seed,
        "net_config": model.config.to_dict(),
        "optimizer_t": opt.t if opt is not None else 0,
        "train_config": _train_config_dict(config) if config is not None else None,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in order],
    }
    blob = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes()
                    for n in order)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, header, opt_arrays); the model carries loaded params."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: "
                         f"{header.get('version')} != {CHECKPOINT_VERSION}")
    expected = sum((int(np.prod(s["shape"])) if s["shape"] else 1) * 8
                   for s in header["arrays"])
    if expected != len(blob):
        raise ValueError(f"corrupt checkpoint blob: {len(blob)} bytes, expected {expected}")
    arrays = {}
    off = 0
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = np.frombuffer(
            blob, dtype="<f8", count=n, offset=off).reshape(spec["shape"]).copy()
        off += n * 8
    config = toy_net.NetConfig.from_dict(header["net_config"])
    model = toy_net.build(config, seed=header["seed"])
    opt_arrays = {}
    for name, arr in arrays.items():
        if name.startswith("opt."):
            opt_arrays[name[4:]] = arr
        else:
            if model.params[name].shape != arr.shape:
                raise ValueError(f"checkpoint array {name} has shape {arr.shape}, "
                                 f"expected {model.params[name].shape}")
            model.params[name][...] = arr
    return model, header, opt_arrays


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = {k: v for k, v in cfg.__dict__.items() if k != "schedule"}
    d["schedule"] = {
        "total_time": cfg.schedule.total_time,
        "phases": [{"start_epoch": p.start_epoch, "end_epoch": p.end_epoch,
                    "k": p.k, "delta_t": p.delta_t} for p in cfg.schedule.phases],
    }
    return d


# ---------------------------------------------------------------------------


def train(model: toy_net.Model, pairs: list, config: TrainConfig,
          run_id: str = "run", checkpoint_dir=None, grad_hook=None,
          start_epoch: int = 0, optimizer: Optimizer | None = None,
          log: RunLog | None = None) -> tuple:
    """Train in place; returns (params, RunLog).

    grad_hook, when given, maps the gradient dict to a replacement dict
    before monitoring; the divergence-injection test uses it to amplify
    gradients. The divergence check runs before the optimizer step, so a
    poisoned update is never applied.
    """
    log = log if log is not None else RunLog(run_id=run_id)
    opt = optimizer if optimizer is not None else Optimizer(config, model.params)
    prev_phase = None
    if config.epochs == 0 or not pairs:
        return model.params, log

    for epoch in range(start_epoch, config.epochs):
        phase = phase_for_epoch(config.schedule, epoch)
        model.set_discretization(pde_layer.Discretization(delta_t=phase.delta_t,
                                                          k=phase.k))
        if checkpoint_dir is not None and prev_phase is not None and phase is not prev_phase:
            save_checkpoint(os.path.join(checkpoint_dir, f"phase_epoch{epoch}.ckpt"),
                            model, opt, epoch, config, run_id)
        prev_phase = phase

        for step, idx in enumerate(_batches(len(pairs), config.batch_size,
                                            config.seed, epoch)):
            t0 = time.perf_counter()
            blurred, sharp = _stack(pairs, idx)
            pred = forward_graph(model.graph, model.params, {"image": blurred})
            if config.loss == "charbonnier":
                loss_val, dloss = charbonnier_loss(pred, sharp, config.charbonnier_eps)
            else:
                loss_val, dloss = l1_loss(pred, sharp)
            store = backward_graph(model.graph, model.params, dloss)
            grads = store.by_param
            if grad_hook is not None:
                grads = grad_hook(grads)
            record = metrics.grad_norm(grads, epoch, step)
            status = detect_divergence(record, loss_val, config.divergence_threshold)
            wall_ms = (time.perf_counter() - t0) * 1e3
            if not status.ok:
                log.append(epoch, step, phase.k, phase.delta_t, loss_val,
                           record.global_norm, wall_ms, status="diverged")
                log.status = "diverged"
                log.divergence_reason = status.reason
                log.divergence_epoch = epoch
                log.divergence_step = step
                if checkpoint_dir is not None:
                    save_checkpoint(os.path.join(checkpoint_dir, "diverged.ckpt"),
                                    model, opt, epoch, config, run_id)
                return model.params, log
            if config.grad_clip is not None and record.global_norm > config.grad_clip:
                factor = config.grad_clip / record.global_norm
                grads = {k: g * factor for k, g in grads.items()}
            opt.step(model.params, grads)
            log.append(epoch, step, phase.k, phase.delta_t, loss_val,
                       record.global_norm, wall_ms)

        if checkpoint_dir is not None:
            save_checkpoint(os.path.join(checkpoint_dir, "last.ckpt"),
                            model, opt, epoch + 1, config, run_id)
    return model.params, log


def resume(checkpoint_path, pairs: list, config: TrainConfig,
           run_id: str = "run", checkpoint_dir=None) -> tuple:
    """Continue a checkpointed run; bit-exact with the uninterrupted run."""
    model, header, opt_arrays = load_checkpoint(checkpoint_path)
    opt = Optimizer(config, model.params)
    opt.load_state(header["optimizer_t"], opt_arrays)
    params, log = train(model, pairs, config, run_id=run_id,
                        checkpoint_dir=checkpoint_dir,
                        start_epoch=header["epoch_next"], optimizer=opt)
    return model, log


def evaluate(model: toy_net.Model, pairs: list, disc: pde_layer.Discretization,
             ssim_mode: str = "block8") -> dict:
    """Mean val/test metrics of the restored images vs. the sharp targets."""
    model.set_discretization(disc)
    psnr_restored, psnr_blurred, ssim_restored = [], [], []
    for s in pairs:
        restored = toy_net.predict(model, s.blurred[None])[0]
        psnr_restored.append(metrics.psnr(restored, s.sharp))
        psnr_blurred.append(metrics.psnr(s.blurred, s.sharp))
        ssim_restored.append(metrics.ssim(restored, s.sharp, mode=ssim_mode))
    return {
        "psnr_restored": float(np.mean(psnr_restored)),
        "psnr_blurred": float(np.mean(psnr_blurred)),
        "ssim_restored": float(np.mean(ssim_restored)),
        "ssim_mode": ssim_mode,
        "count": len(pairs),
    }


@dataclass
class StabilityReport:
    """Side-by-side direct (fixed K) vs. progressive comparison.

    Divergence of the direct run is reported, never asserted: toy-scale
    dynamics need not reproduce full-scale behavior.
    """

    direct: RunLog
    progressive: RunLog
    direct_max_grad_norm: float
    progressive_max_grad_norm: float
    direct_final_psnr: float | None
    progressive_final_psnr: float | None

    def summary_lines(self):
        rows = [("strategy", "k", "status", "max_grad_norm", "final_val_psnr")]
        for name, log, mg, psnr_v, kdesc in (
            ("direct", self.direct, self.direct_max_grad_norm,
             self.direct_final_psnr, "5 (fixed)"),
            ("progressive", self.progressive, self.progressive_max_grad_norm,
             self.progressive_final_psnr, "1->3->5"),
        ):
            status = log.status
            if log.status == "diverged":
                status = f"diverged (epoch {log.divergence_epoch})"
            rows.append((name, kdesc, status, f"{mg:.6g}",
                         "-" if psnr_v is None else f"{psnr_v:.3f}"))
        return ["  ".join(f"{c:<22}" for c in r).rstrip() for r in rows]


def stability_experiment(train_pairs, val_pairs, net_config: toy_net.NetConfig,
                         base_config: TrainConfig, out_dir=None) -> StabilityReport:
    """Train (a) fixed K=5, dt=0.2 from scratch and (b) the progressive
    schedule, with identical seeds and data; optimizer moments carry across
    phase transitions in (b) (never reset)."""
    from .schedule import fixed_schedule

    results = {}
    for name, sched in (("direct", fixed_schedule(5, 0.2)),
                        ("progressive", base_config.schedule)):
        cfg = TrainConfig(**{**base_config.__dict__, "schedule": sched})
        model = toy_net.build(net_config, seed=base_config.seed)
        _, log = train(model, train_pairs, cfg, run_id=name)
        final_psnr = None
        if log.status == "completed" and val_pairs:
            phase = phase_for_epoch(sched, max(cfg.epochs - 1, 0))
            ev = evaluate(model, val_pairs,
                          pde_layer.Discretization(delta_t=phase.delta_t, k=phase.k))
            final_psnr = ev["psnr_restored"]
        results[name] = (log, final_psnr)

    report = StabilityReport(
        direct=results["direct"][0],
        progressive=results["progressive"][0],
        direct_max_grad_norm=results["direct"][0].max_grad_norm(),
        progressive_max_grad_norm=results["progressive"][0].max_grad_norm(),
        direct_final_psnr=results["direct"][1],
        progressive_final_psnr=results["progressive"][1],
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.direct.write_csv(os.path.join(out_dir, "direct.csv"))
        report.progressive.write_csv(os.path.join(out_dir, "progressive.csv"))
        with open(os.path.join(out_dir, "summary.txt"), "w") as f:
            f.write("\n".join(report.summary_lines()) + "\n")
    return report
