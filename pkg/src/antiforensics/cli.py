"""Command-line entry point.

    antiforensics synth-data --out data/toy
    antiforensics train-supervisor --data data/toy --out runs/sup
    antiforensics train-sear --data data/toy --supervisor runs/sup/supervisor.pt --out runs/sear
    antiforensics evaluate --data data/toy --split-file runs/sup/split.json \\
        --setting whitebox --attack sear --target runs/sup/supervisor.pt \\
        --generator runs/sear/concealer.pt --out runs/eval
    antiforensics report --runs runs/eval --out runs/report

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import torch

from . import attacks, harness
from .config import ConfigError, RunConfig, echo_config, load_config, resolve_out
from .data import DatasetError, load_manifest, load_samples, split_dataset, stack_samples, synth_toy_forgery, write_dataset
from .harness import SettingError, SettingSpec
from .metrics import EvalReport
from .models import Concealer, Localizer, load_model, read_checkpoint, save_checkpoint
from .training import TrainingDivergence, export_models, mean_f1, pretrain_supervisor, seed_everything, train_loop

log = logging.getLogger("antiforensics")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REPORT_COLUMNS = ["attack", "model", "dataset", "attack_rate", "f1_reverse", "ssim", "psnr"]


class UsageError(ConfigError):
    pass


# --- helpers --------------------------------------------------------------------


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _prepare_out(args, must_be_empty=False) -> Path:
    out = resolve_out(args.out)
    if out.exists() and any(out.iterdir()):
        if args.force:
            shutil.rmtree(out)
        elif must_be_empty:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, default=str))


def _dataset(args, cfg: RunConfig):
    root = args.data or cfg.data.root
    _require_file(root, "--data (or data.root in the config)")
    return load_manifest(root)


def _splits(args, cfg):
    """(train, test) samples; a split file written by train-supervisor wins
    over recomputing the split, so every command sees the same partition."""
    manifest = _dataset(args, cfg)
    split_file = getattr(args, "split_file", None)
    if split_file:
        ids = json.loads(_require_file(split_file, "--split-file").read_text())
        train_m, test_m = manifest.subset(ids["train"], "train"), manifest.subset(ids["test"], "test")
        if len(train_m) != len(ids["train"]) or len(test_m) != len(ids["test"]):
            raise UsageError(f"{split_file} lists ids missing from the dataset")
    else:
        train_m, test_m = split_dataset(manifest, cfg.data.split)
    return load_samples(train_m, cfg.data.size), load_samples(test_m, cfg.data.size)


def _checkpoint(path, kind):
    path = _require_file(path, f"{kind} checkpoint")
    try:
        return load_model(path, expect_kind=kind)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _localizer(path):
    return _checkpoint(path, "localizer")


def _concealer(path):
    return _checkpoint(path, "concealer")


def _attack(name, cfg: RunConfig, generator=None, attack_config=None):
    if name == "identity":
        return harness.identity_attack()
    if name in attacks.GRADIENT_ATTACKS:
        acfg = attacks.AttackConfig(**{**asdict(cfg.attack), **(attack_config or {})}) if attack_config else cfg.attack
        return harness.gradient_attack(name, acfg)
    if name in harness.GENERATOR_ATTACKS:
        return harness.generator_attack(name, generator if isinstance(generator, Concealer) else _concealer(generator))
    raise UsageError(f"unknown attack {name!r}")


# --- commands -------------------------------------------------------------------


def cmd_synth_data(args, cfg: RunConfig):
    out = _prepare_out(args, must_be_empty=True)
    syn = cfg.data.synth
    seed = syn.seed if args.seed is None else args.seed
    count = syn.count if args.count is None else args.count
    size = syn.size if args.size is None else args.size
    manifest = write_dataset(synth_toy_forgery(seed, size, count), out)
    summary = {"n": len(manifest), "size": size, "seed": seed, "manifest": str(out / "manifest.jsonl")}
    _write_json(out / "summary.json", summary)
    return out, summary


def cmd_train_supervisor(args, cfg: RunConfig):
    train, test = _splits(args, cfg)
    out = _prepare_out(args)
    seed_everything(cfg.seed)
    model, history = pretrain_supervisor(Localizer(cfg.localizer), train, cfg.train)
    path = save_checkpoint(model, out / "supervisor.pt", {"train_ids": [s.id for s in train]})
    ti, tm = stack_samples(test)
    summary = {
        "checkpoint": str(path),
        "epochs": len(history),
        "best_val_f1": max(h["val_f1"] for h in history),
        "test_f1": mean_f1(model, ti, tm),
        "n_train": len(train),
        "n_test": len(test),
    }
    _write_json(out / "split.json", {"train": [s.id for s in train], "test": [s.id for s in test]})
    _write_json(out / "history.json", [{k: v for k, v in h.items() if k != "step_losses"} for h in history])
    _write_json(out / "summary.json", summary)
    return out, summary


def cmd_train_sear(args, cfg: RunConfig):
    train, _ = _splits(args, cfg)
    supervisor = _localizer(args.supervisor)
    out = _prepare_out(args)  # existing checkpoints are resumed unless --force
    train_cfg = replace(cfg.train, use_pretext=False) if args.no_pretext else cfg.train
    seed_everything(cfg.seed)
    concealer = Concealer(cfg.concealer)
    reports = train_loop(concealer, supervisor, train, train_cfg, run_dir=out / "run")
    con_path, sup_path = export_models(out / "run", out)
    last = reports[-1] if reports else None
    summary = {
        "concealer": str(con_path),
        "supervisor_joint": str(sup_path),
        "iterations": train_cfg.max_iters,
        "steps_this_call": len(reports),
        "final_losses": last.losses() if last else None,
        "use_pretext": train_cfg.use_pretext,
    }
    _write_json(out / "summary.json", summary)
    return out, summary


def _split_samples(args, cfg):
    train, test = _splits(args, cfg)
    return {"train": train, "test": test, "all": train + test}[args.split]


def cmd_attack(args, cfg: RunConfig):
    samples = _split_samples(args, cfg)
    out = _prepare_out(args)
    seed_everything(cfg.seed)
    target = _localizer(args.target) if args.target else None
    generator = args.generator
    if args.method == "advgan" and generator is None:
        if target is None:
            raise UsageError("advgan needs --generator or a --target to train against")
        train, _ = _splits(args, cfg)
        gen = attacks.advgan_pixel_train(train, target, cfg.train, cfg.concealer, run_dir=out / "generator_run")
        generator = save_checkpoint(gen, out / "generator.pt")
    if args.method in attacks.GRADIENT_ATTACKS and target is None:
        raise UsageError(f"{args.method} needs --target")
    attack = _attack(args.method, cfg, generator)
    images, masks = stack_samples(samples)
    antis = harness.run_attack(attack, target, images, masks)
    conf = {"method": args.method, "target": args.target, "generator": str(generator) if generator else None}
    if args.method in attacks.GRADIENT_ATTACKS:
        conf.update(attacks.attack_config_dict(cfg.attack))
    sidecar = attacks.write_attack_outputs(out / "images", [s.id for s in samples], images, antis, conf)
    summary = {"n": len(samples), "max_linf": max(r["linf"] for r in sidecar["images"]) if samples else 0.0}
    _write_json(out / "summary.json", summary)
    return out, summary


def cmd_distill(args, cfg: RunConfig):
    target = _localizer(args.target)
    manifest = _dataset(args, cfg)
    samples = load_samples(manifest, cfg.data.size)
    target_ids = read_checkpoint(args.target)["extra"].get("train_ids")  # _localizer validated it
    if args.exclude_split:
        target_ids = json.loads(_require_file(args.exclude_split, "--exclude-split").read_text())["train"]
    if target_ids is None:
        raise UsageError("cannot check disjointness: pass --exclude-split with the target's training ids")
    out = _prepare_out(args)
    seed_everything(cfg.seed)
    surrogate, history = harness.distill_local_model(
        target, samples, cfg.train, target_ids, config=cfg.surrogate, soft_labels=not args.hard_labels
    )
    path = save_checkpoint(surrogate, out / "surrogate.pt", {"distilled_from": str(args.target)})
    images, _ = stack_samples(samples)
    with torch.no_grad():
        teacher = (target(images) > 0.5).float()
    summary = {
        "checkpoint": str(path),
        "n_distill": len(samples),
        "agreement_f1": mean_f1(surrogate, images, teacher),
        "epochs": len(history),
    }
    _write_json(out / "summary.json", summary)
    return out, summary


def cmd_defend(args, cfg: RunConfig):
    train, test = _splits(args, cfg)
    target = _localizer(args.target)
    attack = _attack(args.method, cfg, args.generator)
    out = _prepare_out(args)
    seed_everything(cfg.seed)
    model, info = harness.retrain_defense(target, attack, train, cfg.train)
    extra = {"retrained_from": str(args.target), "attack": args.method, "train_ids": [s.id for s in train]}
    path = save_checkpoint(model, out / "retrained.pt", extra)
    # before/after F1 on the attacked held-out images
    images, masks = stack_samples(test)
    antis = harness.run_attack(attack, target, images, masks)
    summary = {
        "checkpoint": str(path),
        "n_train": info["n_train"],
        "n_original": info["n_original"],
        "f1_attacked_before": mean_f1(target, antis, masks),
        "f1_attacked_after": mean_f1(model, antis, masks),
        "f1_clean_before": mean_f1(target, images, masks),
        "f1_clean_after": mean_f1(model, images, masks),
    }
    _write_json(out / "summary.json", summary)
    return out, summary


def _settings_from_args(args, cfg: RunConfig):
    if args.matrix:
        raw = json.loads(_require_file(args.matrix, "--matrix").read_text())
        from .config import config_from_dict

        settings = config_from_dict({"eval": raw}).eval
    elif args.attack:
        settings = [
            SettingSpec(
                kind=args.setting,
                target=args.target,
                attack=args.attack,
                surrogate=args.surrogate,
                generator=args.generator,
                dataset=args.dataset_name or "",
            )
        ]
    else:
        settings = cfg.eval
    if not settings:
        raise UsageError("nothing to evaluate: pass --attack, --matrix, or an eval section in the config")
    for s in settings:
        for key in ("target", "surrogate", "generator"):
            if getattr(s, key):
                _require_file(getattr(s, key), f"{key} checkpoint")
        if s.kind == "retrained_defense" and "retrained_from" not in read_checkpoint(s.target)["extra"]:
            raise SettingError(f"{s.target} is not a retrained model; run `defend` first")
    return settings


def cmd_evaluate(args, cfg: RunConfig):
    settings = _settings_from_args(args, cfg)
    _, test = _splits(args, cfg)
    out = _prepare_out(args)
    dataset = args.dataset_name or Path(args.data or cfg.data.root).name
    results = []
    for spec in settings:
        seed_everything(cfg.seed)
        target = _localizer(spec.target)
        attack = _attack(spec.attack, cfg, spec.generator, spec.attack_config)
        model = Path(spec.target).stem
        ds = spec.dataset or dataset
        if spec.kind in ("whitebox", "retrained_defense"):
            report, antis = harness.whitebox_eval(attack, target, test, model=model, dataset=ds, return_antis=True)
            report.setting = spec.kind
        else:
            surrogate = _localizer(spec.surrogate) if spec.surrogate else None
            report, antis = harness.blackbox_eval(
                attack, surrogate, target, test, model=model, dataset=ds, return_antis=True
            )
        cell = out / spec.kind / spec.attack
        report.write(cell)
        harness.contact_sheet(target, test, antis, cell / "contact_sheet.png")
        results.append({"setting": spec.kind, "attack": spec.attack, "dir": str(cell), **report.aggregates})
    _write_json(out / "summary.json", results)
    return out, results


def cmd_bench(args, cfg: RunConfig):
    _, test = _splits(args, cfg)
    test = test[: args.n] if args.n else test
    target = _localizer(args.target)
    out = _prepare_out(args)
    timings = {}
    for name in args.methods.split(","):
        attack = _attack(name, cfg, args.generator)
        mean, per_image = harness.timing_benchmark(attack, target, test, warmup=args.warmup)
        timings[name] = {"mean_seconds": mean, "n": len(per_image), "per_image": per_image}
    summary = {"resolution": cfg.data.size, "timings": timings}
    _write_json(out / "timing.json", summary)
    return out, {k: v["mean_seconds"] for k, v in timings.items()}


def collect_reports(roots):
    reports = []
    for root in roots:
        for agg in sorted(Path(root).rglob("aggregates.json")):
            reports.append(EvalReport.read(agg.parent))
    return reports


def report_rows(reports):
    rows = []
    for r in reports:
        a = r.aggregates
        model = r.model if r.setting in ("", "whitebox") else f"{r.model} [{r.setting}]"
        rows.append(
            {
                "attack": r.attack,
                "model": model,
                "dataset": r.dataset,
                "attack_rate": a["attack_rate"],
                "f1_reverse": a["mean_f1_reverse"],
                "ssim": a["mean_ssim"],
                "psnr": a["mean_psnr"],
            }
        )
    return sorted(rows, key=lambda row: (row["dataset"], row["model"], row["attack"]))


def render_table(rows) -> str:
    header = REPORT_COLUMNS
    cells = [[f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in header] for row in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(header)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(c) for c in cells]) + "\n"


def cmd_report(args, cfg: RunConfig):
    for r in args.runs:
        _require_file(r, "--runs directory")
    reports = collect_reports(args.runs)
    if not reports:
        raise UsageError(f"no evaluation reports found under {args.runs}")
    out = _prepare_out(args)
    rows = report_rows(reports)
    with (out / "report.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        wr.writeheader()
        wr.writerows(rows)
    table = render_table(rows)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return out, {"rows": len(rows)}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-supervisor": cmd_train_supervisor,
    "train-sear": cmd_train_sear,
    "attack": cmd_attack,
    "distill": cmd_distill,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "report": cmd_report,
}


# --- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antiforensics", description="Pixel-level anti-forensics lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.max_iters=100")
        sp.add_argument("--out", required=True, help="output directory (relative to $ANTIFORENSICS_RUN_ROOT if set)")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            sp.add_argument("--data", help="dataset directory or manifest.jsonl")
            sp.add_argument("--split-file", help="split.json from train-supervisor")
        return sp

    sp = common(sub.add_parser("synth-data", help="generate a synthetic splice dataset"), data=False)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--count", type=int)

    common(sub.add_parser("train-supervisor", help="pretrain the supervisor localizer"))

    sp = common(sub.add_parser("train-sear", help="joint concealer/supervisor training"))
    sp.add_argument("--supervisor", required=True)
    sp.add_argument("--no-pretext", action="store_true", help="ablation: drop the pretext term")

    sp = common(sub.add_parser("attack", help="produce anti-forensic images"))
    sp.add_argument("--method", required=True, choices=harness.ATTACK_NAMES)
    sp.add_argument("--target")
    sp.add_argument("--generator")
    sp.add_argument("--split", choices=["train", "test", "all"], default="test")

    sp = common(sub.add_parser("distill", help="train a small surrogate on a target's outputs"))
    sp.add_argument("--target", required=True)
    sp.add_argument("--exclude-split", help="split.json holding the target's training ids")
    sp.add_argument("--hard-labels", action="store_true", help="fit ground truth instead of target outputs")

    sp = common(sub.add_parser("defend", help="fine-tune a target on clean + attacked images"))
    sp.add_argument("--target", required=True)
    sp.add_argument("--method", required=True, choices=harness.ATTACK_NAMES)
    sp.add_argument("--generator")

    sp = common(sub.add_parser("evaluate", help="score attacks under a threat setting"))
    sp.add_argument("--matrix", help="JSON list of settings")
    sp.add_argument("--setting", choices=harness.SETTING_KINDS, default="whitebox")
    sp.add_argument("--attack", choices=harness.ATTACK_NAMES)
    sp.add_argument("--target")
    sp.add_argument("--surrogate")
    sp.add_argument("--generator")
    sp.add_argument("--dataset-name")

    sp = common(sub.add_parser("bench", help="per-image attack timing"))
    sp.add_argument("--target", required=True)
    sp.add_argument("--generator")
    sp.add_argument("--methods", default="sear,bim")
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("-n", type=int, default=0, help="limit to the first n test images")

    sp = common(sub.add_parser("report", help="collate evaluation reports into tables"), data=False)
    sp.add_argument("--runs", nargs="+", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, _parse_overrides(args.set))
        out, summary = COMMANDS[args.command](args, cfg)
        echo_config(out, cfg, args.command, {k: v for k, v in vars(args).items() if k != "set"} | {"set": args.set})
    except (ConfigError, SettingError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything after validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, default=str) if not isinstance(summary, str) else summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
