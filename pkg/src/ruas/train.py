"""Post-search weight training and evaluation.

End-to-end: one joint optimization of all weights on the task loss plus
lambda times the scene loss.  Hierarchical: unsupervised scene pre-training
first, then full fine-tuning on the task loss alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, backward
from .errors import ConfigError
from .scene import scene_loss
from .task import task_loss

STRATEGIES = ("end_to_end", "hierarchical")


@dataclass
class TrainConfig:
    lambda_weight: float = 1.0
    strategy: str = "end_to_end"
    epochs: int = 100
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 1e-3
    pretrain_epochs: int = 30
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive (or None)")


@dataclass
class TrainReport:
    curves: dict
    aborted: bool = False


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data = s.copy()


def _full_loss(model, y, lam):
    out = model.forward(y)
    lt = task_loss(out["x"], out["u"], out["theta"], tv_weight=model.tv_weight)
    if lam == 0:
        return lt
    ls = scene_loss(out["t"], y, model.scene_cfg)
    return ad.add(lt, ad.mul(ls, lam))


def _run_epochs(model, params, records, loss_fn, cfg, epochs, curve):
    """SGD sweeps; returns False if a non-finite loss forced an abort."""
    if not params:
        return True
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay, clip_norm=cfg.grad_clip)
    last_good = _snapshot(params)
    for _ in range(epochs):
        total = 0.0
        for rec in records:
            y = Tensor(rec.input())
            opt.zero_grad()
            loss = loss_fn(model, y)
            value = float(loss.data)
            if not np.isfinite(value):
                _restore(params, last_good)
                return False
            backward(loss)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            total += value
        curve.append(total / len(records))
        last_good = _snapshot(params)
    return True


def train_end_to_end(model, records, cfg):
    """Joint momentum-SGD over all weights on l_t + lambda * l_s."""
    curve = []
    ok = _run_epochs(
        model,
        model.parameters(),
        records,
        lambda m, y: _full_loss(m, y, cfg.lambda_weight),
        cfg,
        cfg.epochs,
        curve,
    )
    return TrainReport(curves={"joint": curve}, aborted=not ok)


def train_hierarchical(model, records, cfg):
    """Scene pre-training on the unsupervised loss, then task fine-tuning."""
    scene_curve = []

    def scene_only(m, y):
        _, t, _ = _scene_pass(m, y)
        return scene_loss(t, y, m.scene_cfg)

    ok = _run_epochs(
        model, model.omega_s(), records, scene_only, cfg, cfg.pretrain_epochs, scene_curve
    )
    fine_curve = []
    if ok:
        ok = _run_epochs(
            model,
            model.parameters(),
            records,
            lambda m, y: _full_loss(m, y, 0.0),
            cfg,
            cfg.epochs,
            fine_curve,
        )
    return TrainReport(curves={"scene": scene_curve, "fine": fine_curve}, aborted=not ok)


def _scene_pass(model, y):
    from .scene import scene_forward

    return scene_forward(y, model.scene_cfg, model.scene_cell.forward)


def train_noise_estimator(estimator, pairs, epochs=20, lr=3e-3, momentum=0.9):
    """Desk-scale supervised pre-training of the noise estimator.

    ``pairs`` holds (noisy, clean) image arrays; the regression target is the
    absolute residual between them.
    """
    params = estimator.parameters()
    opt = SGD(params, lr, momentum)
    curve = []
    for _ in range(epochs):
        total = 0.0
        for noisy, clean in pairs:
            target = np.abs(np.asarray(noisy) - np.asarray(clean))
            opt.zero_grad()
            pred = estimator.forward(Tensor(noisy))
            loss = ad.reduce_l2sq(ad.sub(pred, Tensor(target)))
            backward(loss)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            total += float(loss.data)
        curve.append(total / len(pairs))
    return curve


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, records):
    """Per-image PSNR/SSIM against references, plus means over scored rows."""
    from .io_metrics import psnr, ssim

    rows = []
    for rec in records:
        y = Tensor(rec.input())
        with ad.no_grad():
            x = model.enhance(y)
        ref = rec.reference()
        if ref is None:
            rows.append({"id": rec.id, "psnr": None, "ssim": None})
        else:
            rows.append(
                {
                    "id": rec.id,
                    "psnr": psnr(x.data, ref),
                    "ssim": ssim(x.data, ref),
                }
            )
    scored = [r for r in rows if r["psnr"] is not None]
    means = {
        "psnr": float(np.mean([r["psnr"] for r in scored])) if scored else None,
        "ssim": float(np.mean([r["ssim"] for r in scored])) if scored else None,
    }
    return rows, means


def metrics_csv(rows, means):
    lines = ["id,psnr_db,ssim"]
    for r in rows:
        p = "" if r["psnr"] is None else f"{r['psnr']:.4f}"
        s = "" if r["ssim"] is None else f"{r['ssim']:.6f}"
        lines.append(f"{r['id']},{p},{s}")
    if means["psnr"] is not None:
        lines.append(f"mean,{means['psnr']:.4f},{means['ssim']:.6f}")
    return "\n".join(lines) + "\n"
