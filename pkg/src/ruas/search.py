"""Cooperative differentiable architecture search, plus the independent and
global baseline strategies used for strategy comparisons.

The cooperative loop alternates: update the scene logits with a one-step
finite-difference hypergradient (including the coupling term through the
task validation loss), step the scene weights, then do the same for the
task side with the scene frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, backward
from .errors import ConfigError, NumericError
from .model import SearchModel
from .scene import scene_loss
from .search_space import DiscreteCell, op_registry
from .task import task_loss

STRATEGIES = ("cooperative", "independent", "global")


@dataclass
class SearchConfig:
    beta: float = 1.0
    lr_omega: float = 3e-4
    lr_alpha: float = 3e-4
    fd_step: float = 1e-2
    epochs: int = 20
    batch: int = 1
    strategy: str = "cooperative"
    inner_steps: int = 1
    warmup_epochs: int = 3
    weight_decay: float = 1e-3
    momentum: float | None = None  # sampled from (0.5, 0.999) when None
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if self.lr_omega < 0 or self.lr_alpha < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive (or None)")


# ---------------------------------------------------------------------------
# one-step finite-difference hypergradient


def _zero(params):
    for p in params:
        p.grad = None


def _grads_of(params):
    return [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True)
        for p in params
    ]


def _check_finite(arrays, context):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite gradient during {context}")


def hypergrad_onestep(alphas, omegas, loss_val_fn, loss_tr_fn, lr_omega, fd_step=1e-2):
    """Gradient of L_val(alpha; omega - lr * grad_omega L_tr) w.r.t. alpha.

    The second-order term is approximated by central finite differences of
    grad_alpha L_tr at omega +/- eps * grad_omega' L_val, with eps set to
    fd_step / ||grad_omega' L_val||.  Returns one array per alpha parameter.
    """
    everything = list(alphas) + list(omegas)

    if lr_omega == 0.0:
        _zero(everything)
        backward(loss_val_fn())
        g = _grads_of(alphas)
        _check_finite(g, "direct validation gradient")
        return g

    # gradient of the training loss at the current weights
    _zero(everything)
    backward(loss_tr_fn())
    g_tr = _grads_of(omegas)
    _check_finite(g_tr, "inner training gradient")

    saved = [w.data.copy() for w in omegas]
    try:
        # virtual inner step, then validation gradients at the stepped weights
        for w, g in zip(omegas, g_tr):
            w.data = w.data - lr_omega * g
        _zero(everything)
        backward(loss_val_fn())
        g_val_alpha = _grads_of(alphas)
        g_val_omega = _grads_of(omegas)
        _check_finite(g_val_alpha + g_val_omega, "validation gradient at virtual step")

        norm = np.sqrt(sum(float(np.sum(g * g)) for g in g_val_omega))
        if norm < 1e-12:
            return g_val_alpha
        eps = fd_step / norm

        for w, s, g in zip(omegas, saved, g_val_omega):
            w.data = s + eps * g
        _zero(everything)
        backward(loss_tr_fn())
        ga_plus = _grads_of(alphas)

        for w, s, g in zip(omegas, saved, g_val_omega):
            w.data = s - eps * g
        _zero(everything)
        backward(loss_tr_fn())
        ga_minus = _grads_of(alphas)
        _check_finite(ga_plus + ga_minus, "finite-difference probe")
    finally:
        for w, s in zip(omegas, saved):
            w.data = s

    return [
        gva - lr_omega * (gp - gm) / (2.0 * eps)
        for gva, gp, gm in zip(g_val_alpha, ga_plus, ga_minus)
    ]


def _apply_alpha_grads(alphas, grads, optimizer):
    for a, g in zip(alphas, grads):
        a.grad = g
    optimizer.step()


# ---------------------------------------------------------------------------
# loss closures over the supernet


def _scene_tr_loss(model, y):
    _, t, _ = model.scene_out(y)
    return scene_loss(t, y, model.scene_cfg)


def _scene_val_loss(model, y):
    return model.scene_val_loss(y)


def _task_val_loss(model, y):
    return model.task_val_loss(y)


def _task_tr_loss(model, y):
    u, _, _ = model.scene_out(y)
    x = model.task_out(u)
    return task_loss(x, u, tv_weight=model.tv_weight)


def _combined_val(model, y, beta):
    s = model.scene_val_loss(y)
    if beta == 0:
        return s
    return ad.add(s, ad.mul(model.task_val_loss(y), beta))


def _eval_val_losses(model, val_records, beta):
    with ad.no_grad():
        ls, lt = 0.0, 0.0
        for rec in val_records:
            y = Tensor(rec.input())
            ls += float(model.scene_val_loss(y).data)
            lt += float(model.task_val_loss(y).data)
        n = len(val_records)
        ls, lt = ls / n, lt / n
        return {"scene_val": ls, "task_val": lt, "combined": ls + beta * lt}


# ---------------------------------------------------------------------------
# search drivers


@dataclass
class SearchResult:
    scene_ops: list
    task_ops: list
    history: list
    momentum: float
    model: SearchModel

    def history_csv(self):
        lines = ["epoch,scene_val,task_val,combined"]
        for i, row in enumerate(self.history):
            lines.append(
                f"{i},{row['scene_val']:.8f},{row['task_val']:.8f},{row['combined']:.8f}"
            )
        return "\n".join(lines) + "\n"


def _make_optimizers(model, cfg, momentum):
    wd = cfg.weight_decay
    clip = cfg.grad_clip
    return {
        "alpha_s": SGD(model.alpha_s.parameters(), cfg.lr_alpha, momentum, clip_norm=clip),
        "alpha_t": SGD(model.alpha_t.parameters(), cfg.lr_alpha, momentum, clip_norm=clip),
        "omega_s": SGD(model.omega_s(), cfg.lr_omega, momentum, wd, clip_norm=clip),
        "omega_t": SGD(model.omega_t(), cfg.lr_omega, momentum, wd, clip_norm=clip),
    }


def _batches(data, epoch):
    """Pair train and validation records, cycling the shorter list."""
    n = len(data.train)
    out = []
    for i in range(n):
        tr = data.train[i]
        va = data.val[(i + epoch) % len(data.val)]
        out.append((tr, va))
    return out


def _omega_step(model, loss_fn, y, opt):
    opt.zero_grad()
    loss = loss_fn(model, y)
    backward(loss)
    _fill_missing_grads(opt.params)
    opt.step()


def _fill_missing_grads(params):
    # operators not on any gradient path this step (e.g. behind a dead ReLU)
    # take a pure weight-decay step
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def coop_search(model, data, cfg, rng):
    """Algorithm: alternate scene-side and task-side (alpha, omega) updates."""
    if cfg.strategy != "cooperative":
        raise ConfigError("coop_search requires strategy=cooperative")
    momentum = cfg.momentum if cfg.momentum is not None else float(rng.uniform(0.5, 0.999))
    opts = _make_optimizers(model, cfg, momentum)
    history = []
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup_epochs
        for tr_rec, val_rec in _batches(data, epoch):
            y_tr = Tensor(tr_rec.input())
            y_val = Tensor(val_rec.input())
            for _ in range(cfg.inner_steps):
                if not warm:
                    g = hypergrad_onestep(
                        model.alpha_s.parameters(),
                        model.omega_s(),
                        lambda: _combined_val(model, y_val, cfg.beta),
                        lambda: _scene_tr_loss(model, y_tr),
                        cfg.lr_omega,
                        cfg.fd_step,
                    )
                    _apply_alpha_grads(model.alpha_s.parameters(), g, opts["alpha_s"])
                _omega_step(model, _scene_tr_loss, y_tr, opts["omega_s"])
            for _ in range(cfg.inner_steps):
                if not warm:
                    g = hypergrad_onestep(
                        model.alpha_t.parameters(),
                        model.omega_t(),
                        lambda: _task_val_loss(model, y_val),
                        lambda: _task_tr_loss(model, y_tr),
                        cfg.lr_omega,
                        cfg.fd_step,
                    )
                    _apply_alpha_grads(model.alpha_t.parameters(), g, opts["alpha_t"])
                _omega_step(model, _task_tr_loss, y_tr, opts["omega_t"])
        history.append(_eval_val_losses(model, data.val, cfg.beta))
    from .search_space import discretize

    return SearchResult(
        scene_ops=discretize(model.alpha_s),
        task_ops=discretize(model.alpha_t),
        history=history,
        momentum=momentum,
        model=model,
    )


def baseline_search(model, data, cfg, rng):
    """Independent (scene first, then task) or global (one joint supernet)."""
    if cfg.strategy == "independent":
        return _independent_search(model, data, cfg, rng)
    if cfg.strategy == "global":
        return _global_search(model, data, cfg, rng)
    raise ConfigError(f"baseline_search got strategy {cfg.strategy!r}")


def _independent_search(model, data, cfg, rng):
    momentum = cfg.momentum if cfg.momentum is not None else float(rng.uniform(0.5, 0.999))
    opts = _make_optimizers(model, cfg, momentum)
    history = []
    # phase 1: scene only, no coupling
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup_epochs
        for tr_rec, val_rec in _batches(data, epoch):
            y_tr = Tensor(tr_rec.input())
            y_val = Tensor(val_rec.input())
            if not warm:
                g = hypergrad_onestep(
                    model.alpha_s.parameters(),
                    model.omega_s(),
                    lambda: _scene_val_loss(model, y_val),
                    lambda: _scene_tr_loss(model, y_tr),
                    cfg.lr_omega,
                    cfg.fd_step,
                )
                _apply_alpha_grads(model.alpha_s.parameters(), g, opts["alpha_s"])
            _omega_step(model, _scene_tr_loss, y_tr, opts["omega_s"])
        history.append(_eval_val_losses(model, data.val, cfg.beta))
    # phase 2: task side with the scene frozen
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup_epochs
        for tr_rec, val_rec in _batches(data, epoch):
            y_tr = Tensor(tr_rec.input())
            y_val = Tensor(val_rec.input())
            if not warm:
                g = hypergrad_onestep(
                    model.alpha_t.parameters(),
                    model.omega_t(),
                    lambda: _task_val_loss(model, y_val),
                    lambda: _task_tr_loss(model, y_tr),
                    cfg.lr_omega,
                    cfg.fd_step,
                )
                _apply_alpha_grads(model.alpha_t.parameters(), g, opts["alpha_t"])
            _omega_step(model, _task_tr_loss, y_tr, opts["omega_t"])
        history.append(_eval_val_losses(model, data.val, cfg.beta))
    from .search_space import discretize

    return SearchResult(
        scene_ops=discretize(model.alpha_s),
        task_ops=discretize(model.alpha_t),
        history=history,
        momentum=momentum,
        model=model,
    )


def _global_search(model, data, cfg, rng):
    momentum = cfg.momentum if cfg.momentum is not None else float(rng.uniform(0.5, 0.999))
    alphas = model.alpha_s.parameters() + model.alpha_t.parameters()
    omegas = model.omega_s() + model.omega_t()
    opt_alpha = SGD(alphas, cfg.lr_alpha, momentum, clip_norm=cfg.grad_clip)
    opt_omega = SGD(omegas, cfg.lr_omega, momentum, cfg.weight_decay, clip_norm=cfg.grad_clip)

    def joint_tr(y):
        return ad.add(_scene_tr_loss(model, y), _task_tr_loss(model, y))

    history = []
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup_epochs
        for tr_rec, val_rec in _batches(data, epoch):
            y_tr = Tensor(tr_rec.input())
            y_val = Tensor(val_rec.input())
            if not warm:
                g = hypergrad_onestep(
                    alphas,
                    omegas,
                    lambda: _combined_val(model, y_val, cfg.beta),
                    lambda: joint_tr(y_tr),
                    cfg.lr_omega,
                    cfg.fd_step,
                )
                _apply_alpha_grads(alphas, g, opt_alpha)
            opt_omega.zero_grad()
            backward(joint_tr(y_tr))
            _fill_missing_grads(omegas)
            opt_omega.step()
        history.append(_eval_val_losses(model, data.val, cfg.beta))
    from .search_space import discretize

    return SearchResult(
        scene_ops=discretize(model.alpha_s),
        task_ops=discretize(model.alpha_t),
        history=history,
        momentum=momentum,
        model=model,
    )


def run_search(data, cfg, seed, scene_cfg=None):
    """Build a fresh supernet and run the configured strategy."""
    rng = np.random.default_rng(seed)
    model = SearchModel(rng, scene_cfg=scene_cfg)
    if cfg.strategy == "cooperative":
        return coop_search(model, data, cfg, rng)
    return baseline_search(model, data, cfg, rng)


def uniform_cell_baseline(kind, width, rng):
    """A cell with every edge fixed to one operator kind; no search."""
    registry = op_registry("low_task")
    if kind not in registry:
        raise ConfigError(f"{kind} is not in the low-level registry")
    from .search_space import CellSpec

    spec = CellSpec(width=width)
    return DiscreteCell(spec, [kind] * len(spec.edges), rng)
