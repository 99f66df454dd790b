"""Candidate operator registry, the 5-node distillation cell, and its
continuous (softmax-mixed) and discrete forms.

The cell is a DAG: node 0 is the input, nodes 1..4 are produced by chain
edges (i, i+1), and nodes 0..2 additionally feed the output node through
distill edges (i, 4).  The output node concatenates the three distill
results with the chain input to node 4 and fuses them back to the cell
width with a fixed (non-searched) 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class OpKind:
    name: str
    kernel: int  # 0 for skip
    dilation: int
    residual: bool
    skip: bool = False

    def __str__(self):
        return self.name


def _conv(name, k, d=1, residual=False):
    return OpKind(name, k, d, residual)


SKIP = OpKind("SC", 0, 1, False, skip=True)

# full operator table, in table order
ALL_OPS = (
    _conv("1-C", 1),
    _conv("3-C", 3),
    _conv("5-C", 5),
    _conv("7-C", 7),
    _conv("1-RC", 1, residual=True),
    _conv("3-RC", 3, residual=True),
    _conv("3-2-DC", 3, 2),
    _conv("3-6-DC", 3, 6),
    _conv("3-12-DC", 3, 12),
    _conv("3-18-DC", 3, 18),
    _conv("5-2-DC", 5, 2),
    _conv("7-2-DC", 7, 2),
    _conv("3-2-RDC", 3, 2, residual=True),
    SKIP,
)

OPS_BY_NAME = {op.name: op for op in ALL_OPS}

_LOW_LEVEL_NAMES = ("1-C", "3-C", "1-RC", "3-RC", "3-2-DC", "3-2-RDC", "SC")


def op_registry(task_kind):
    """Ordered candidate operators for a task kind.

    ``scene`` and ``low_task`` share the compact 7-op set; ``high_task``
    uses the 10 non-residual, non-skip operators.
    """
    if task_kind in ("scene", "low_task"):
        return [OPS_BY_NAME[n] for n in _LOW_LEVEL_NAMES]
    if task_kind == "high_task":
        return [op for op in ALL_OPS if not op.residual and not op.skip]
    raise ConfigError(
        f"unknown task kind {task_kind!r}; expected scene, low_task or high_task"
    )


def init_conv_weights(c_out, c_in, k, rng, name):
    """Uniform +/- 1/sqrt(fan_in) weights, zero bias."""
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = Parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), f"{name}.weight")
    b = Parameter(np.zeros(c_out), f"{name}.bias")
    return w, b


def make_op_params(kind, width, rng, name):
    """Parameters for one candidate operator; skip connections have none."""
    if kind.skip:
        return {}
    w, b = init_conv_weights(width, width, kind.kernel, rng, name)
    return {"weight": w, "bias": b}


def apply_op(kind, x, params):
    """Run one candidate operator.

    Every convolutional candidate is followed by ReLU; residual variants add
    their input afterwards so the edge output is not sign-constrained.
    """
    if kind.skip:
        return x
    if "weight" not in params:
        raise ConfigError(f"operator {kind.name} requires conv weights")
    w = params["weight"]
    if w.data.shape[2] != kind.kernel:
        raise ConfigError(
            f"weights with kernel {w.data.shape[2]} do not match operator {kind.name}"
        )
    y = ad.relu(ad.conv2d(x, w, params.get("bias"), dilation=kind.dilation))
    if kind.residual:
        if x.data.shape[1] != w.data.shape[0]:
            raise ShapeError("residual operator requires c_in == c_out")
        y = ad.add(y, x)
    return y


def mixed_forward(x, edge_logits, edge_weights, registry):
    """Softmax-weighted sum of every candidate operator on one edge."""
    if edge_logits.data.shape != (len(registry),):
        raise ConfigError(
            f"expected {len(registry)} logits, got shape {edge_logits.data.shape}"
        )
    mix = ad.softmax(edge_logits)
    out = None
    for i, kind in enumerate(registry):
        wi = ad.mul(apply_op(kind, x, edge_weights[i]), mix_entry(mix, i))
        out = wi if out is None else ad.add(out, wi)
    return out


def mix_entry(mix, i):
    """Scalar slice of the softmax vector, with gradient routed back."""

    def bw(g):
        gv = np.zeros_like(mix.data)
        gv[i] = float(g)
        yield mix, gv

    return ad._make(mix.data[i], (mix,), bw)


@dataclass(frozen=True)
class CellSpec:
    width: int
    node_count: int = 5

    @property
    def chain_edges(self):
        return [(i, i + 1) for i in range(self.node_count - 1)]

    @property
    def distill_edges(self):
        return [(i, self.node_count - 1) for i in range(self.node_count - 2)]

    @property
    def edges(self):
        return self.chain_edges + self.distill_edges


class ArchParams:
    """Per-edge operator logits for one searchable cell."""

    def __init__(self, spec, task_kind, rng=None, init_scale=1e-3, name="alpha"):
        self.spec = spec
        self.task_kind = task_kind
        self.registry = op_registry(task_kind)
        n = len(self.registry)
        self.logits = []
        for e, (i, j) in enumerate(spec.edges):
            init = np.zeros(n) if rng is None else rng.normal(0.0, init_scale, n)
            self.logits.append(Parameter(init, f"{name}.edge{e}_{i}to{j}"))

    def parameters(self):
        return list(self.logits)

    def mixture_weights(self):
        return [np.asarray(ad.softmax(l).data) for l in self.logits]


def discretize(arch):
    """Argmax operator per edge; ties break toward the lowest registry index."""
    choices = []
    for logits in arch.logits:
        if not np.all(np.isfinite(logits.data)):
            raise ConfigError("cannot discretize non-finite logits")
        choices.append(arch.registry[int(np.argmax(logits.data))])
    return choices


class MixedCell:
    """The searchable cell: every edge holds weights for every candidate."""

    def __init__(self, spec, task_kind, rng, name="cell", fusion_init="random"):
        self.spec = spec
        self.task_kind = task_kind
        self.registry = op_registry(task_kind)
        self.edge_weights = []
        for e, (i, j) in enumerate(spec.edges):
            per_op = [
                make_op_params(kind, spec.width, rng, f"{name}.edge{e}.{kind.name}")
                for kind in self.registry
            ]
            self.edge_weights.append(per_op)
        self.fusion_w, self.fusion_b = init_conv_weights(
            spec.width, 4 * spec.width, 1, rng, f"{name}.fusion"
        )
        if fusion_init == "zeros":
            self.fusion_w.data = np.zeros_like(self.fusion_w.data)
        elif fusion_init != "random":
            raise ConfigError(f"unknown fusion_init {fusion_init!r}")

    def parameters(self):
        out = []
        for per_op in self.edge_weights:
            for params in per_op:
                out.extend(params.values())
        out.extend([self.fusion_w, self.fusion_b])
        return out

    def forward(self, x, arch):
        if x.data.shape[1] != self.spec.width:
            raise ShapeError(
                f"cell expects {self.spec.width} channels, got {x.data.shape[1]}"
            )
        nodes = [x]
        n_chain = len(self.spec.chain_edges)
        for e in range(n_chain):
            nodes.append(
                mixed_forward(nodes[e], arch.logits[e], self.edge_weights[e], self.registry)
            )
        distill = []
        for d, (i, _) in enumerate(self.spec.distill_edges):
            e = n_chain + d
            distill.append(
                mixed_forward(nodes[i], arch.logits[e], self.edge_weights[e], self.registry)
            )
        merged = ad.concat(distill + [nodes[-1]], axis=1)
        return ad.conv2d(merged, self.fusion_w, self.fusion_b)

    def discretize(self, arch):
        choices = discretize(arch)
        cell = DiscreteCell.__new__(DiscreteCell)
        cell.spec = self.spec
        cell.task_kind = self.task_kind
        cell.kinds = choices
        cell.edge_params = []
        for e, kind in enumerate(choices):
            src = self.edge_weights[e][self.registry.index(kind)]
            cell.edge_params.append(
                {k: Parameter(p.data.copy(), p.name) for k, p in src.items()}
            )
        cell.fusion_w = Parameter(self.fusion_w.data.copy(), self.fusion_w.name)
        cell.fusion_b = Parameter(self.fusion_b.data.copy(), self.fusion_b.name)
        return cell


class DiscreteCell:
    """A cell with one fixed operator per edge."""

    def __init__(self, spec, kinds, rng, name="cell", fusion_init="random"):
        if len(kinds) != len(spec.edges):
            raise ConfigError(
                f"need {len(spec.edges)} operator choices, got {len(kinds)}"
            )
        self.spec = spec
        self.task_kind = "scene"
        self.kinds = list(kinds)
        self.edge_params = [
            make_op_params(kind, spec.width, rng, f"{name}.edge{e}.{kind.name}")
            for e, kind in enumerate(kinds)
        ]
        self.fusion_w, self.fusion_b = init_conv_weights(
            spec.width, 4 * spec.width, 1, rng, f"{name}.fusion"
        )
        # a zeroed fusion makes the whole cell start as a zero correction, so
        # the unrolled illumination stays near its local-max warm start until
        # training moves it; a random fusion can knock t into the clamp floor
        # on the first forward pass, where the gradient is dead
        if fusion_init == "zeros":
            self.fusion_w.data = np.zeros_like(self.fusion_w.data)
        elif fusion_init != "random":
            raise ConfigError(f"unknown fusion_init {fusion_init!r}")

    def parameters(self):
        out = []
        for params in self.edge_params:
            out.extend(params.values())
        out.extend([self.fusion_w, self.fusion_b])
        return out

    def init_fusion_averaging(self):
        """Make the fusion conv average its four input blocks channel-wise."""
        w = np.zeros_like(self.fusion_w.data)
        width = self.spec.width
        for o in range(width):
            for m in range(4):
                w[o, o + m * width, 0, 0] = 0.25
        self.fusion_w.data = w
        self.fusion_b.data = np.zeros_like(self.fusion_b.data)

    def forward(self, x):
        if x.data.shape[1] != self.spec.width:
            raise ShapeError(
                f"cell expects {self.spec.width} channels, got {x.data.shape[1]}"
            )
        nodes = [x]
        n_chain = len(self.spec.chain_edges)
        for e in range(n_chain):
            nodes.append(apply_op(self.kinds[e], nodes[e], self.edge_params[e]))
        distill = []
        for d, (i, _) in enumerate(self.spec.distill_edges):
            e = n_chain + d
            distill.append(apply_op(self.kinds[e], nodes[i], self.edge_params[e]))
        merged = ad.concat(distill + [nodes[-1]], axis=1)
        return ad.conv2d(merged, self.fusion_w, self.fusion_b)


def count_params(parameters):
    return int(sum(p.data.size for p in parameters))


def conv_flops(c_out, c_in, k, h, w):
    """Multiply-adds of one stride-1 same-padding convolution."""
    return h * w * c_out * c_in * k * k


def cell_flops(cell, h, w):
    total = 0
    for kind in cell.kinds:
        if kind.skip:
            continue
        total += conv_flops(cell.spec.width, cell.spec.width, kind.kernel, h, w)
    total += conv_flops(cell.spec.width, 4 * cell.spec.width, 1, h, w)
    return total


def arch_dump(spec, kinds_or_arch):
    """DOT-style text, one line per edge, for reports and artifacts."""
    lines = []
    if isinstance(kinds_or_arch, ArchParams):
        arch = kinds_or_arch
        choices = discretize(arch)
        weights = arch.mixture_weights()
        for (i, j), kind, wvec in zip(spec.edges, choices, weights):
            wtxt = ",".join(f"{v:.4f}" for v in wvec)
            lines.append(f"edge {i}->{j} op={kind.name} w={wtxt}")
    else:
        for (i, j), kind in zip(spec.edges, kinds_or_arch):
            lines.append(f"edge {i}->{j} op={kind.name}")
    return "\n".join(lines) + "\n"
