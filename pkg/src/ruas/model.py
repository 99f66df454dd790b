"""Model composition: the full enhancement pipeline in its continuous
(search-time) and discrete (train/deploy-time) forms."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .scene import SceneConfig, scene_forward, scene_loss
from .search_space import (
    ArchParams,
    CellSpec,
    DiscreteCell,
    MixedCell,
    OPS_BY_NAME,
    cell_flops,
    conv_flops,
    count_params,
)
from .task import NoiseEstimator, NoiseRemover, VARIANTS, noise_gate, task_loss

SCENE_WIDTH = 3
TASK_WIDTH = 6

# fallback derived architecture when no search result is supplied; 3x3-heavy,
# residual on the chain, distillation through plain convs
DEFAULT_SCENE_OPS = ("3-RC", "3-2-RDC", "3-RC", "3-C", "3-C", "3-2-DC", "3-C")
DEFAULT_TASK_OPS = ("3-RC", "3-2-RDC", "3-RC", "3-C", "3-C", "3-2-DC", "3-C")


class SearchModel:
    """Supernet: mixed cells for scene and task plus their logits."""

    def __init__(self, rng, scene_cfg=None, tv_weight=0.05):
        self.scene_cfg = scene_cfg or SceneConfig()
        self.tv_weight = tv_weight
        self.scene_spec = CellSpec(width=SCENE_WIDTH)
        self.task_spec = CellSpec(width=TASK_WIDTH)
        self.scene_cell = MixedCell(
            self.scene_spec, "scene", rng, name="sm.cell", fusion_init="zeros"
        )
        self.task_cell = MixedCell(
            self.task_spec, "low_task", rng, name="tm.cell", fusion_init="zeros"
        )
        self.alpha_s = ArchParams(self.scene_spec, "scene", rng, name="alpha_s")
        self.alpha_t = ArchParams(self.task_spec, "low_task", rng, name="alpha_t")
        self.remover = NoiseRemover(rng, width=TASK_WIDTH, name="tm.psi_r")

    def omega_s(self):
        return self.scene_cell.parameters()

    def omega_t(self):
        return self.task_cell.parameters() + self.remover.parameters()

    def scene_out(self, y):
        cell_fn = lambda t: self.scene_cell.forward(t, self.alpha_s)
        return scene_forward(y, self.scene_cfg, cell_fn)

    def task_out(self, u):
        theta = Tensor(np.zeros_like(u.data))
        cell_fn = lambda z: self.task_cell.forward(z, self.alpha_t)
        return self.remover.forward(u, theta, cell_fn)

    def scene_val_loss(self, y):
        _, t, _ = self.scene_out(y)
        return scene_loss(t, y, self.scene_cfg)

    def task_val_loss(self, y):
        u, _, _ = self.scene_out(y)
        x = self.task_out(u)
        return task_loss(x, u, tv_weight=self.tv_weight)


class RuasModel:
    """Discrete enhancement model for one of the three variants."""

    def __init__(
        self,
        rng,
        variant="ruas",
        scene_cfg=None,
        scene_ops=DEFAULT_SCENE_OPS,
        task_ops=DEFAULT_TASK_OPS,
        gate_eps=0.01,
        tv_weight=0.05,
    ):
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.scene_cfg = scene_cfg or SceneConfig()
        self.gate_eps = gate_eps
        self.tv_weight = tv_weight
        self.scene_ops = tuple(str(o) for o in scene_ops)
        self.task_ops = tuple(str(o) for o in task_ops)
        self.scene_spec = CellSpec(width=SCENE_WIDTH)
        self.task_spec = CellSpec(width=TASK_WIDTH)
        self.scene_cell = DiscreteCell(
            self.scene_spec,
            [OPS_BY_NAME[n] for n in self.scene_ops],
            rng,
            name="sm.cell",
            fusion_init="zeros",
        )
        self.task_cell = None
        self.remover = None
        self.estimator = None
        if variant in ("ruas", "ruas_a"):
            self.task_cell = DiscreteCell(
                self.task_spec,
                [OPS_BY_NAME[n] for n in self.task_ops],
                rng,
                name="tm.cell",
                fusion_init="zeros",
            )
            self.remover = NoiseRemover(rng, width=TASK_WIDTH, name="tm.psi_r")
        if variant == "ruas_a":
            self.estimator = NoiseEstimator(rng, name="tm.psi_e")

    # ------------------------------------------------------------------
    def omega_s(self):
        return self.scene_cell.parameters()

    def omega_t(self):
        params = []
        if self.task_cell is not None:
            params += self.task_cell.parameters() + self.remover.parameters()
        if self.estimator is not None:
            params += self.estimator.parameters()
        return params

    def parameters(self):
        return self.omega_s() + self.omega_t()

    def forward(self, y):
        """Full pipeline; returns a dict with every intermediate of interest."""
        u, t, trajectory = scene_forward(y, self.scene_cfg, self.scene_cell.forward)
        out = {
            "u": u,
            "t": t,
            "trajectory": trajectory,
            "theta": None,
            "gate_skip": None,
        }
        if self.variant == "ruas_s":
            out["x"] = ad.clamp(u, 0.0, 1.0)
            return out
        if self.variant == "ruas":
            theta = Tensor(np.zeros_like(u.data))
            out["x"] = self.remover.forward(u, theta, self.task_cell.forward)
            return out
        # ruas_a: estimate, gate, maybe remove
        theta = self.estimator.forward(u)
        out["theta"] = theta
        skip = noise_gate(theta, self.gate_eps)
        out["gate_skip"] = skip
        if skip:
            out["x"] = ad.clamp(u, 0.0, 1.0)
        else:
            out["x"] = self.remover.forward(u, theta, self.task_cell.forward)
        return out

    def enhance(self, y):
        return self.forward(y)["x"]

    # ------------------------------------------------------------------
    def scene_param_count(self):
        return count_params(self.omega_s())

    def param_count(self):
        return count_params(self.parameters())

    def flops(self, h, w):
        """Multiply-add count of one forward pass at resolution h x w."""
        total = self.scene_cfg.stages * cell_flops(self.scene_cell, h, w)
        if self.task_cell is not None:
            total += cell_flops(self.task_cell, h, w)
            total += conv_flops(TASK_WIDTH, 6, 1, h, w)  # proj in
            total += conv_flops(3, TASK_WIDTH, 1, h, w)  # proj out
        if self.estimator is not None:
            widths = (3, 6, 6, 6, 6, 3)
            for i in range(len(widths) - 1):
                total += conv_flops(widths[i + 1], widths[i], 3, h, w)
        return total

    # ------------------------------------------------------------------
    def config_dict(self):
        c = self.scene_cfg
        return {
            "variant": self.variant,
            "scene_ops": list(self.scene_ops),
            "task_ops": list(self.task_ops),
            "gate_eps": self.gate_eps,
            "tv_weight": self.tv_weight,
            "scene_cfg": {
                "stages": c.stages,
                "window": c.window,
                "gamma": c.gamma,
                "warm_start": c.warm_start,
                "t_floor": c.t_floor,
                "rtv_weight": c.rtv_weight,
                "rtv_sigma": c.rtv_sigma,
                "rtv_eps": c.rtv_eps,
            },
        }

    def config_hash(self):
        blob = json.dumps(self.config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 header length, JSON header, raw float64 blobs

_MAGIC = b"RUASCKPT"


def save_checkpoint(model, path):
    params = model.parameters()
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate parameter names; cannot checkpoint")
    header = {
        "config": model.config_dict(),
        "config_hash": model.config_hash(),
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Rebuild a RuasModel from a checkpoint file."""
    from .errors import DataIOError

    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataIOError(f"{path} is not a checkpoint file")
        hlen = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(hlen).decode())
        cfg = header["config"]
        rng = np.random.default_rng(0)
        model = RuasModel(
            rng,
            variant=cfg["variant"],
            scene_cfg=SceneConfig(**cfg["scene_cfg"]),
            scene_ops=cfg["scene_ops"],
            task_ops=cfg["task_ops"],
            gate_eps=cfg["gate_eps"],
            tv_weight=cfg["tv_weight"],
        )
        if model.config_hash() != header["config_hash"]:
            raise DataIOError(f"checkpoint config hash mismatch in {path}")
        by_name = {p.name: p for p in model.parameters()}
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * 8)
            if len(raw) != n * 8:
                raise DataIOError(f"truncated checkpoint {path}")
            p = by_name.get(meta["name"])
            if p is None:
                raise DataIOError(f"unknown parameter {meta['name']} in {path}")
            if p.data.shape != shape:
                raise DataIOError(
                    f"shape mismatch for {meta['name']}: {p.data.shape} vs {shape}"
                )
            p.data = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
    return model
