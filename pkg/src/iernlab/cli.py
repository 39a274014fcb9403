"""Command-line experiment runner: gen, train, eval, compare, oracle, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import causal
from . import config as cfgmod
from . import evalkit, runner
from . import synthbench as sb
from .errors import CompatibilityError, ConfigurationError, ContractError, FormatError
from .iern import ArchConfig, LossWeights, OptimizerConfig, check_compatible

log = logging.getLogger("iernlab")

RESULT_VERSION = 1


# ---------------------------------------------------------------------------
# Data and model assembly


def _data_seed(cfg: cfgmod.ExperimentConfig, seed: int) -> int:
    return cfg.data.data_seed if cfg.data.data_seed is not None else seed


def build_data(cfg: cfgmod.ExperimentConfig, seed: int | None = None) -> dict[str, sb.ConfoundedDataset]:
    """Named datasets for a run: always ``train`` plus one or more test splits."""
    d = cfg.data
    seed = _data_seed(cfg, cfg.seed if seed is None else seed)
    if d.source == "toy":
        degs = (sb.Degradation("identity"), sb.Degradation("blur", sigma=d.blur), sb.Degradation("noise", sigma=d.noise))
        specs = sb.toy_specs(n_train=d.n_train, n_test=d.n_test, seed=seed, degradations=degs)
        specs["train"].validate_training()
        return {name: sb.build_split(spec, "train" if name == "train" else "test") for name, spec in specs.items()}
    if d.source == "mixed":
        degs = (sb.Degradation("tint", color=(d.tint,)), sb.Degradation("blur", sigma=d.blur),
                sb.Degradation("noise", sigma=d.noise))
        sources = sb.mixed_datasets(per_cell=d.per_cell, seed=seed, degradations=degs)
        plan = sb.FoldPlan(d.fold_plan) if d.fold_plan is not None else sb.FoldPlan()
        train, test = sb.make_threefold(sources, plan, d.fold)
        train, test = sb.move_fraction(train, test, d.move_fraction, np.random.default_rng([seed, 3]))
        return {"train": train, "test": test}
    if d.source == "spec":
        train_spec, test_spec = sb.SyntheticSpec.from_dict(d.spec), sb.SyntheticSpec.from_dict(d.test_spec)
        train_spec.validate_training()
        return {"train": sb.build_split(train_spec, "train"), "test": sb.build_split(test_spec, "test")}
    return {"train": sb.load_dataset(d.train_path), "test": sb.load_dataset(d.test_path)}


def arch_for(cfg: cfgmod.ExperimentConfig, train: sb.ConfoundedDataset, seed: int) -> ArchConfig:
    h, w, c = train.image_shape
    return ArchConfig(in_channels=c, width=cfg.arch.width, n_emotions=train.n_emotions,
                      n_confounders=train.n_confounders, image_hw=(h, w),
                      backbone_stride=cfg.arch.backbone_stride, seed=seed)


def train_config(cfg: cfgmod.ExperimentConfig, seed: int, lambda2: float | None = None) -> runner.TrainConfig:
    o, w = cfg.optimizer, cfg.weights
    return runner.TrainConfig(
        epochs=o.epochs,
        batch_size=o.batch_size,
        opt=OptimizerConfig(o.lr, o.beta1, o.beta2, o.epsilon, o.warmup_steps or 0),
        weights=LossWeights(w.lambda1, w.lambda2 if lambda2 is None else lambda2, w.lambda3),
        seed=seed,
        warmup_fraction=0.0 if o.warmup_steps is not None else o.warmup_fraction,
    )


def eval_splits(data: dict) -> list[str]:
    return [k for k in data if k != "train"]


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    return path


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(cfg: cfgmod.ExperimentConfig, out: Path) -> dict[str, Path]:
    data = build_data(cfg)
    paths = {}
    for name, ds in data.items():
        manifest, _ = sb.save_dataset(ds, out / "data" / name)
        paths[name] = manifest
        print(f"{name}: {len(ds)} samples -> {manifest}")
        for e, row in enumerate(ds.cell_counts()):
            print(f"  {sb.EMOTIONS[e] if e < len(sb.EMOTIONS) else e:>10} " + " ".join(f"{int(v):4d}" for v in row))
    return paths


def train_one(cfg: cfgmod.ExperimentConfig, method: str, train: sb.ConfoundedDataset, seed: int,
              lambda2: float | None = None):
    """Fit ``method`` and return (model, epoch records with train accuracy)."""
    arch = arch_for(cfg, train, seed)

    def on_epoch(model, phase):
        if phase == "trunk":
            return {}
        return {"train_acc": evalkit.confusion(runner.predict_dataset(model, train), train.y_e, arch.n_emotions).mean_acc}

    return runner.fit(method, train, arch, train_config(cfg, seed, lambda2), on_epoch=on_epoch)


def cmd_train(cfg: cfgmod.ExperimentConfig, out: Path) -> Path:
    data = build_data(cfg)
    model, records = train_one(cfg, cfg.method, data["train"], cfg.seed)
    with open(_ensure_dir(out) / "train_log.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    ckpt = model.save(out / "checkpoint", {"method": cfg.method, "config": cfg.model_dump()})
    last = records[-1]
    print(f"trained {cfg.method} for {cfg.optimizer.epochs} epochs; final train accuracy {last.get('train_acc', float('nan')):.3f}")
    print(f"checkpoint -> {ckpt}")
    return ckpt


def _ensure_dir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def evaluate(model, dataset: sb.ConfoundedDataset, split: str = "test", fold_id: int | None = None) -> evalkit.EvalReport:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    check_compatible(model, dataset)
    if dataset.n_confounders and dataset.n_confounders != model.arch.n_confounders:
        raise CompatibilityError(f"dataset has {dataset.n_confounders} strata, model {model.arch.n_confounders}")
    preds = runner.predict_dataset(model, dataset)
    return evalkit.confusion(preds, dataset.y_e, model.arch.n_emotions, fold_id=fold_id, split=split)


def cmd_eval(checkpoint: Path, data_path: Path, out: Path) -> Path:
    model = runner.load_model(checkpoint)
    dataset = sb.load_dataset(data_path)
    report = evaluate(model, dataset, split=dataset.split_tag)
    report.meta = {"checkpoint": str(checkpoint), "data": str(data_path), "kind": model.kind}
    path = report.save(out / "report.json")
    print(f"mean accuracy {report.mean_acc:.4f} over {len(dataset)} samples -> {path}")
    return path


def _data_key(cfg: cfgmod.ExperimentConfig) -> dict:
    return cfg.data.model_dump()


def format_table(rows: list[dict], n_classes: int) -> str:
    names = list(sb.EMOTIONS[:n_classes]) if n_classes <= len(sb.EMOTIONS) else [str(i) for i in range(n_classes)]
    head = f"{'method':<22}{'split':<10}" + "".join(f"{n[:8]:>10}" for n in names) + f"{'Average':>18}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = "".join(f"{100 * v:10.2f}" for v in r["per_class_mean"])
        lines.append(f"{r['label']:<22}{r['split']:<10}{cells}{100 * r['mean_acc']:10.2f} ±{100 * r['mean_acc_std']:5.2f}")
    return "\n".join(lines)


def cmd_compare(cfgs: list[cfgmod.ExperimentConfig], out: Path) -> Path:
    """Train and evaluate every (method, lambda2, seed); write per-seed reports and a summary table.

    With one config its ``methods`` list is compared; with several, each
    contributes its own ``method`` and weights and all must share data settings.
    """
    base = cfgs[0]
    if any(_data_key(c) != _data_key(base) for c in cfgs[1:]):
        raise ConfigurationError("configs to compare must share identical data settings")
    if len(cfgs) == 1:
        runs = [(m, base) for m in base.methods]
    else:
        runs = [(c.method, c) for c in cfgs]
    grid = base.lambda2_grid or [None]
    rows, n_classes = [], None
    for lambda2 in grid:
        for method, cfg in runs:
            label = method if lambda2 is None else f"{method} l2={lambda2:g}"
            per_split: dict[str, list] = {}
            for seed in base.seeds:
                data = build_data(cfg, seed)
                model, _ = train_one(cfg, method, data["train"], seed, lambda2)
                n_classes = model.arch.n_emotions
                for split in eval_splits(data):
                    rep = evaluate(model, data[split], split=split, fold_id=cfg.data.fold if cfg.data.source == "mixed" else None)
                    rep.meta = {"method": method, "seed": seed, "lambda2": lambda2}
                    rep.save(out / "reports" / label.replace(" ", "_") / f"seed{seed}_{split}.json")
                    per_split.setdefault(split, []).append(rep)
                print(f"{label} seed {seed}: " + ", ".join(f"{s} {per_split[s][-1].mean_acc:.3f}" for s in per_split), flush=True)
            for split, reps in per_split.items():
                rows.append({"label": label, "method": method, "lambda2": lambda2, "split": split, **evalkit.fold_average(reps)})
    table = format_table(rows, n_classes)
    _write_json(out / "compare.json", {"format": "iernlab-compare", "format_version": RESULT_VERSION,
                                       "seeds": base.seeds, "rows": rows})
    (out / "compare.txt").write_text(table + "\n")
    print(table)
    return out / "compare.json"


def oracle_checks(seed: int = 0, backdoor_fn=None, conditional_fn=None, n_random: int = 50, n_mc: int = 10**6) -> list[tuple[str, bool, str]]:
    """Causal-oracle fixtures as (name, passed, detail) triples.

    The functions under test are injectable so a deliberately mis-wired build
    can be shown to fail.
    """
    backdoor_fn = backdoor_fn or causal.backdoor
    conditional_fn = conditional_fn or causal.conditional
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(n_random):
        scm = causal.random_scm(rng, *rng.integers(2, 5, size=3))
        for x in range(scm.sizes[1]):
            worst = max(worst,
                        np.abs(conditional_fn(scm, x) - causal.enumerate_conditional(scm, x)).max(),
                        np.abs(backdoor_fn(scm, x) - causal.enumerate_backdoor(scm, x)).max())
    results.append(("enumeration", bool(worst <= 1e-12), f"max deviation {worst:.2e} over {n_random} random SCMs"))

    simpson = causal.simpson_fixture()
    c, b = conditional_fn(simpson, 0), backdoor_fn(simpson, 0)
    results.append(("simpson-reversal", int(np.argmax(c)) != int(np.argmax(b)),
                    f"argmax conditional {int(np.argmax(c))}, backdoor {int(np.argmax(b))}"))

    indep = causal.DiscreteSCM(simpson.p_d, np.tile(simpson.p_x_given_d[:1], (2, 1)), simpson.p_y_given_xd)
    gap = np.abs(conditional_fn(indep, 0) - backdoor_fn(indep, 0)).max()
    results.append(("no-confounding-equivalence", bool(gap <= 1e-12), f"X independent of D: gap {gap:.2e}"))

    emp = causal.sample_do(simpson, 0, n_mc, rng)
    exact = causal.backdoor(simpson, 0)
    sigma = np.sqrt(exact * (1 - exact) / n_mc)
    z = np.abs(emp - backdoor_fn(simpson, 0)) / np.maximum(sigma, 1e-300)
    results.append(("monte-carlo-do", bool((z <= 4).all()), f"max |z| {z.max():.2f} at n={n_mc}"))
    return results


def cmd_oracle(seed: int, out: Path | None) -> bool:
    results = oracle_checks(seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if out is not None:
        _write_json(out / "oracle.json", {"format": "iernlab-oracle", "format_version": RESULT_VERSION, "seed": seed,
                                          "results": [{"name": n, "passed": ok, "detail": d} for n, ok, d in results]})
    return all(ok for _, ok, _ in results)


def cmd_gradcheck(seed: int, out: Path | None) -> dict[str, float]:
    report = runner.gradcheck_report(seed)
    for name, err in report.items():
        print(f"{name:6s} max relative error {err:.3e}")
    print(f"worst {max(report.values()):.3e}")
    if out is not None:
        _write_json(out / "gradcheck.json", {"format": "iernlab-gradcheck", "format_version": RESULT_VERSION,
                                             "seed": seed, "terms": report})
    return report


# ---------------------------------------------------------------------------
# Entry point


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", help="JSON config file (repeatable for compare)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="iernlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate and save datasets")
    sub.add_parser("train", parents=[common], help="train one method and save a checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a saved dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    sub.add_parser("compare", parents=[common], help="train and evaluate several methods over seeds")
    sub.add_parser("oracle", parents=[common], help="run the causal-oracle fixtures")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss term")
    return p


def _resolve(args) -> list[cfgmod.ExperimentConfig]:
    overrides = {"seed": args.seed, "out": args.out}
    paths = args.config or [None]
    return [cfgmod.load(p, overrides) for p in paths]


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfgs = _resolve(args)
        if args.print_config:
            print(json.dumps(cfgs[0].model_dump(), indent=2))
            return 0
        cfg = cfgs[0]
        out = Path(cfg.out)
        if args.command == "gen":
            cmd_gen(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            cmd_eval(Path(args.checkpoint), Path(args.data), out)
        elif args.command == "compare":
            cmd_compare(cfgs, out)
        elif args.command == "oracle":
            return 0 if cmd_oracle(cfg.seed, Path(args.out) if args.out else None) else 1
        elif args.command == "gradcheck":
            report = cmd_gradcheck(cfg.seed, Path(args.out) if args.out else None)
            return 0 if max(report.values()) < 1e-4 else 1
    except (ConfigurationError, ContractError, CompatibilityError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
