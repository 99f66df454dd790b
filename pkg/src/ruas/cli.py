"""Command-line entry point.

Subcommands: search, train, enhance, eval, gradcheck, ablate-k,
compare-strategies, fixed-op.  Exit codes: 0 success, 2 configuration
error, 3 I/O error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, resolve_seed
from .diagnostics import TOLERANCE, run_all
from .errors import ConfigError, DataIOError, NumericError, RuasError
from .io_metrics import load_dataset, load_png, save_png, split_records
from .model import (
    DEFAULT_SCENE_OPS,
    DEFAULT_TASK_OPS,
    RuasModel,
    SCENE_WIDTH,
    TASK_WIDTH,
    SearchModel,
    load_checkpoint,
    save_checkpoint,
)
from .scene import scene_loss
from .search import SearchConfig, run_search, uniform_cell_baseline
from .search_space import (
    CellSpec,
    OPS_BY_NAME,
    arch_dump,
    cell_flops,
    count_params,
    op_registry,
)
from .task import VARIANTS
from .train import (
    evaluate,
    metrics_csv,
    train_end_to_end,
    train_hierarchical,
)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig()


def _records_from(cfg, data_flag, need_reference=False):
    data_dir = data_flag or cfg.sections["paths"]["data_dir"]
    if not data_dir:
        raise ConfigError("no data directory given (--data or paths.data_dir)")
    records = load_dataset(data_dir)
    if need_reference and any(r.reference_path is None for r in records):
        raise ConfigError(f"dataset {data_dir} lacks reference images")
    return records


def _model_from_config(cfg, rng, arch_path=None):
    task = cfg.sections["task"]
    scene_ops = task["scene_ops"] or list(DEFAULT_SCENE_OPS)
    task_ops = task["task_ops"] or list(DEFAULT_TASK_OPS)
    if arch_path:
        try:
            arch = json.loads(Path(arch_path).read_text())
        except OSError as exc:
            raise DataIOError(f"cannot read architecture file {arch_path}: {exc}") from exc
        scene_ops = arch["scene"]["ops"]
        task_ops = arch["task"]["ops"]
    return RuasModel(
        rng,
        variant=task["variant"],
        scene_cfg=cfg.scene_config(),
        scene_ops=scene_ops,
        task_ops=task_ops,
        gate_eps=task["gate_eps"],
        tv_weight=task["tv_weight"],
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_search(args):
    cfg = _load_config(args.config)
    seed = resolve_seed(args.seed, os.environ.get("RUAS_SEED"), cfg.seed)
    out = Path(args.out)
    cfg.echo(out, seed)
    records = _records_from(cfg, args.data)
    rng = np.random.default_rng(seed)
    data = split_records(records, rng=rng)
    scfg = cfg.search_config(strategy=args.strategy)
    result = run_search(data, scfg, seed, scene_cfg=cfg.scene_config())

    (out / "history.csv").write_text(result.history_csv())
    alpha = {
        "scene": {
            "ops": [k.name for k in result.scene_ops],
            "logits": [l.data.tolist() for l in result.model.alpha_s.logits],
        },
        "task": {
            "ops": [k.name for k in result.task_ops],
            "logits": [l.data.tolist() for l in result.model.alpha_t.logits],
        },
        "momentum": result.momentum,
        "seed": seed,
        "strategy": scfg.strategy,
    }
    (out / "alpha_final.json").write_text(json.dumps(alpha, indent=2) + "\n")
    dump = (
        "# scene cell\n"
        + arch_dump(result.model.scene_spec, result.model.alpha_s)
        + "# task cell\n"
        + arch_dump(result.model.task_spec, result.model.alpha_t)
    )
    (out / "arch.dot").write_text(dump)
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    seed = resolve_seed(args.seed, os.environ.get("RUAS_SEED"), cfg.seed)
    out = Path(args.out)
    cfg.echo(out, seed)
    records = _records_from(cfg, args.data)
    rng = np.random.default_rng(seed)
    model = _model_from_config(cfg, rng, arch_path=args.arch)
    tcfg = cfg.train_config(strategy=args.strategy)
    if tcfg.strategy == "hierarchical":
        report = train_hierarchical(model, records, tcfg)
    else:
        report = train_end_to_end(model, records, tcfg)
    if report.aborted:
        save_checkpoint(model, out / "model.ckpt")
        _write_curves(report, out / "curve.csv")
        raise NumericError("training aborted on non-finite loss; last-good checkpoint kept")
    save_checkpoint(model, out / "model.ckpt")
    _write_curves(report, out / "curve.csv")
    return 0


def _write_curves(report, path):
    lines = ["phase,epoch,loss"]
    for phase, curve in report.curves.items():
        for i, v in enumerate(curve):
            lines.append(f"{phase},{i},{v:.8f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _switch_variant(model, variant):
    if variant is None or variant == model.variant:
        return model
    needs_removal = variant in ("ruas", "ruas_a")
    needs_estimator = variant == "ruas_a"
    if (needs_removal and model.task_cell is None) or (
        needs_estimator and model.estimator is None
    ):
        want = RuasModel(
            np.random.default_rng(0),
            variant=variant,
            scene_cfg=model.scene_cfg,
            scene_ops=model.scene_ops,
            task_ops=model.task_ops,
            gate_eps=model.gate_eps,
            tv_weight=model.tv_weight,
        )
        raise ConfigError(
            f"checkpoint (hash {model.config_hash()}) lacks modules for variant "
            f"{variant!r} (requested hash {want.config_hash()})"
        )
    model.variant = variant
    return model


def cmd_enhance(args):
    model = load_checkpoint(args.model)
    model = _switch_variant(model, args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    in_path = Path(args.input)
    if in_path.is_dir():
        inputs = sorted(in_path.glob("*.png"))
    else:
        inputs = [in_path]
    if not inputs:
        raise ConfigError(f"no PNG inputs under {in_path}")
    single = len(inputs) == 1
    for p in inputs:
        y = Tensor(load_png(p))
        with ad.no_grad():
            result = model.forward(y)
        save_png(result["x"].data, out / f"{p.stem}.png")
        if args.dump_stages:
            prefix = "" if single else f"{p.stem}_"
            for k, (t, u) in enumerate(result["trajectory"], start=1):
                save_png(np.clip(t.data, 0, 1), out / f"{prefix}stage{k}_t.png")
                save_png(np.clip(u.data, 0, 1), out / f"{prefix}stage{k}_u.png")
            if result["theta"] is not None:
                theta = result["theta"].data
                peak = max(float(theta.max()), 1e-8)
                save_png(theta / peak, out / f"{prefix}noise_map.png")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    model = load_checkpoint(args.model)
    model = _switch_variant(model, args.variant)
    records = _records_from(cfg, args.data)
    rows, means = evaluate(model, records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(rows, means))
    return 0


def cmd_gradcheck(args):
    checks = run_all(seed=args.seed if args.seed is not None else 7)
    worst = max(err for _, err in checks)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["check,max_rel_error"] + [f"{n},{e:.3e}" for n, e in checks]
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    for name, err in checks:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{status:4s} {name}: {err:.3e}")
    if worst >= TOLERANCE:
        raise NumericError(f"gradient check exceeded tolerance: {worst:.3e}")
    return 0


def cmd_ablate_k(args):
    cfg = _load_config(args.config)
    seed = resolve_seed(args.seed, os.environ.get("RUAS_SEED"), cfg.seed)
    out = Path(args.out)
    cfg.echo(out, seed)
    records = _records_from(cfg, args.data, need_reference=True)
    k_list = [int(v) for v in args.k_list.split(",") if v.strip()]
    if not k_list or any(k < 1 for k in k_list):
        raise ConfigError(f"invalid k-list {args.k_list!r}")
    tcfg = cfg.train_config()
    lines = ["k,psnr_db,ssim"]
    for k in k_list:
        rng = np.random.default_rng(seed)
        scene_cfg = cfg.scene_config()
        scene_cfg.stages = k
        model = _model_from_config(cfg, rng)
        model.scene_cfg = scene_cfg
        if tcfg.strategy == "hierarchical":
            train_hierarchical(model, records, tcfg)
        else:
            train_end_to_end(model, records, tcfg)
        _, means = evaluate(model, records)
        lines.append(f"{k},{means['psnr']:.4f},{means['ssim']:.6f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_compare_strategies(args):
    cfg = _load_config(args.config)
    seed = resolve_seed(args.seed, os.environ.get("RUAS_SEED"), cfg.seed)
    out = Path(args.out)
    cfg.echo(out, seed)
    records = _records_from(cfg, args.data)
    lines = ["strategy,scene_val,task_val,combined,scene_params,task_params"]
    results = {}
    for strategy in ("global", "independent", "cooperative"):
        rng = np.random.default_rng(seed)
        data = split_records(records, rng=rng)
        scfg = cfg.search_config(strategy=strategy)
        result = run_search(data, scfg, seed, scene_cfg=cfg.scene_config())
        results[strategy] = result
        final = result.history[-1]
        rng2 = np.random.default_rng(seed)
        derived = RuasModel(
            rng2,
            variant="ruas",
            scene_cfg=cfg.scene_config(),
            scene_ops=[k.name for k in result.scene_ops],
            task_ops=[k.name for k in result.task_ops],
        )
        lines.append(
            f"{strategy},{final['scene_val']:.6f},{final['task_val']:.6f},"
            f"{final['combined']:.6f},{derived.scene_param_count()},"
            f"{count_params(derived.omega_t())}"
        )
        dump = (
            "# scene cell\n"
            + arch_dump(result.model.scene_spec, result.model.alpha_s)
            + "# task cell\n"
            + arch_dump(result.model.task_spec, result.model.alpha_t)
        )
        (out / f"{strategy}_arch.dot").write_text(dump)
        (out / f"{strategy}_history.csv").write_text(result.history_csv())
    (out / "strategies.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_fixed_op(args):
    cfg = _load_config(args.config)
    seed = resolve_seed(args.seed, os.environ.get("RUAS_SEED"), cfg.seed)
    out = Path(args.out)
    cfg.echo(out, seed)
    records = _records_from(cfg, args.data, need_reference=True)
    tcfg = cfg.train_config()
    h, w = records[0].input().shape[2:]
    lines = ["model,psnr_db,ssim,params,mult_adds"]
    for kind in op_registry("scene"):
        rng = np.random.default_rng(seed)
        model = RuasModel(
            rng,
            variant="ruas_s",
            scene_cfg=cfg.scene_config(),
            scene_ops=[kind.name] * 7,
        )
        train_hierarchical(model, records, tcfg)
        _, means = evaluate(model, records)
        lines.append(
            f"{kind.name},{means['psnr']:.4f},{means['ssim']:.6f},"
            f"{model.scene_param_count()},{model.flops(h, w)}"
        )
    # supernet row: the mixed scene cell at its current (uniform-ish) logits
    rng = np.random.default_rng(seed)
    supernet = SearchModel(rng, scene_cfg=cfg.scene_config())
    _train_supernet_scene(supernet, records, tcfg)
    rows = _evaluate_supernet_scene(supernet, records)
    sup_params = count_params(supernet.omega_s())
    sup_flops = _supernet_scene_flops(supernet, h, w)
    lines.append(
        f"supernet,{rows['psnr']:.4f},{rows['ssim']:.6f},{sup_params},{sup_flops}"
    )
    (out / "fixed_op.csv").write_text("\n".join(lines) + "\n")
    return 0


def _train_supernet_scene(supernet, records, tcfg):
    from .autodiff import SGD, backward

    opt = SGD(
        supernet.omega_s(),
        tcfg.lr,
        tcfg.momentum,
        tcfg.weight_decay,
        clip_norm=tcfg.grad_clip,
    )
    for _ in range(max(tcfg.pretrain_epochs, 1)):
        for rec in records:
            y = Tensor(rec.input())
            opt.zero_grad()
            _, t, _ = supernet.scene_out(y)
            loss = scene_loss(t, y, supernet.scene_cfg)
            backward(loss)
            for p in opt.params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()


def _evaluate_supernet_scene(supernet, records):
    from .io_metrics import psnr, ssim

    ps, ss = [], []
    for rec in records:
        y = Tensor(rec.input())
        with ad.no_grad():
            u, _, _ = supernet.scene_out(y)
        x = np.clip(u.data, 0, 1)
        ref = rec.reference()
        ps.append(psnr(x, ref))
        ss.append(ssim(x, ref))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def _supernet_scene_flops(supernet, h, w):
    from .search_space import conv_flops

    total = 0
    spec = supernet.scene_spec
    for kind in op_registry("scene"):
        if kind.skip:
            continue
        total += conv_flops(spec.width, spec.width, kind.kernel, h, w) * len(spec.edges)
    total += conv_flops(spec.width, 4 * spec.width, 1, h, w)
    return total * supernet.scene_cfg.stages


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ruas", description="Retinex-inspired unrolling with architecture search"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--data", help="dataset directory (input/ + reference/)")

    p = sub.add_parser("search", help="run architecture search")
    common(p)
    p.add_argument("--strategy", choices=("cooperative", "independent", "global"))
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train a discrete model")
    common(p)
    p.add_argument("--strategy", choices=("end_to_end", "hierarchical"))
    p.add_argument("--arch", help="alpha_final.json from a search run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance images with a trained model")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="input PNG file or directory")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--dump-stages", action="store_true")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="evaluate a model on a paired dataset")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate-k", help="stage-count ablation")
    common(p)
    p.add_argument("--k-list", default="1,2,3,4,5")
    p.set_defaults(func=cmd_ablate_k)

    p = sub.add_parser("compare-strategies", help="run all three search strategies")
    common(p)
    p.set_defaults(func=cmd_compare_strategies)

    p = sub.add_parser("fixed-op", help="uniform-operator baselines")
    common(p)
    p.set_defaults(func=cmd_fixed_op)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataIOError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
