"""Command-line entry point: ``pemb <subcommand> [flags]``.

Every RunConfig field is also a flag (``--total-steps 500``). Values are
resolved as defaults < ``--config`` file < explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config_file
from .data import default_family, gen_dataset, read_dataset, write_dataset
from .errors import CheckpointError, ConfigError, PembError

log = logging.getLogger("pemb")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file of RunConfig keys")
    g = p.add_argument_group("run config")
    for f in fields(RunConfig):
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        # all flags arrive as strings and are coerced by RunConfig.from_dict
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       metavar=kind.upper(), help=f"default {f.default!r}")


def _resolve(args) -> RunConfig:
    merged = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    return RunConfig.from_dict(merged)


def _sidecar(ckpt: str | Path) -> Path:
    return Path(str(ckpt) + ".config.json")


def _write_sidecar(ckpt, cfg: RunConfig) -> None:
    _sidecar(ckpt).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def _config_for_ckpt(args, ckpt) -> RunConfig:
    """Config stored beside a checkpoint, overridden by the command line."""
    side = _sidecar(ckpt)
    merged = {}
    if side.exists():
        merged.update(json.loads(side.read_text()))
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    return RunConfig.from_dict(merged)


def _data(args, cfg: RunConfig):
    if args.data:
        return read_dataset(args.data)
    return None


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    fam = default_family(cfg.n_tasks, cfg.per_class, cfg.vocab_size)
    write_dataset(args.out, gen_dataset(cfg.data_seed, fam, cfg.per_task))
    print(f"wrote {cfg.n_tasks * cfg.per_task} triplets to {args.out}")
    return 0


def _report(res) -> None:
    f = res.final
    print(json.dumps({"step": f["step"], "accuracy_at_1": f["accuracy_at_1"], "mrr": f["mrr"],
                      "steps_to_threshold": res.steps_to_threshold,
                      "trainable_params": res.n_trainable}))


def cmd_train(args) -> int:
    from .trainer import run_prompt_tuning_baseline, run_scratch

    cfg = _resolve(args)
    out = _out_dir(args)
    ckpt, metrics = out / "model.pemb", out / "metrics.jsonl"
    data = _data(args, cfg)
    if cfg.mode == "scratch":
        res = run_scratch(cfg, data, checkpoint_path=ckpt, metrics_path=metrics)
    elif cfg.mode == "prompt-tuning-baseline":
        res = run_prompt_tuning_baseline(cfg, data, checkpoint_path=ckpt, metrics_path=metrics)
    else:
        raise ConfigError(f"train does not run mode {cfg.mode!r}; use transfer or eval")
    _write_sidecar(ckpt, res.model.cfg)
    _report(res)
    return 0


def cmd_transfer(args) -> int:
    from .trainer import run_transfer

    side = _sidecar(args.source)
    base = json.loads(side.read_text()) if side.exists() else {}
    merged = {**base, **(load_config_file(args.config) if args.config else {})}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    merged["mode"] = "transfer"
    cfg = RunConfig.from_dict(merged)
    out = _out_dir(args)
    ckpt = out / "model.pemb"
    res = run_transfer(cfg, args.source, _data(args, cfg), checkpoint_path=ckpt,
                       metrics_path=out / "metrics.jsonl")
    _write_sidecar(ckpt, res.model.cfg)
    _report(res)
    return 0


def cmd_eval(args) -> int:
    from .evaluate import ModelEmbedder, eval_retrieval
    from .model import PromptEmbedder
    from .trainer import eval_items_for, load_model

    if args.ckpt:
        cfg = _config_for_ckpt(args, args.ckpt)
        model = load_model(args.ckpt, cfg)
    else:
        cfg = _resolve(args).replace(mode="vanilla-eval")
        model = PromptEmbedder.build(cfg)
    score = eval_retrieval(ModelEmbedder(model), eval_items_for(cfg))
    print(json.dumps({"mode": cfg.mode, "accuracy_at_1": score.accuracy, "mrr": score.mrr,
                      "n_queries": score["n_queries"], "corpus_size": score["corpus_size"],
                      "config_hash": cfg.hash().hex()}))
    return 0


def cmd_ablate_k(args) -> int:
    from .trainer import ablate_k, write_ablation_csv

    cfg = _resolve(args)
    try:
        ks = [int(k) for k in args.k_list.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"bad --k-list {args.k_list!r}") from None
    rows = ablate_k(cfg, ks, _data(args, cfg))
    write_ablation_csv(args.out, rows)
    for r in rows:
        print(f"k={r['k']} accuracy_at_1={r['accuracy_at_1']:.4f} mrr={r['mrr']:.4f} steps={r['steps']}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_pipeline

    rep = gradcheck_pipeline(seed=args.seed_gc, h=args.h)
    print(f"scalars={rep.n_scalars} max_rel_error={rep.max_rel_error:.3e} worst={rep.worst()} "
          f"seconds={rep.seconds:.1f} {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 4


def cmd_inspect_ckpt(args) -> int:
    ck = load_checkpoint(args.path)
    print(f"version {ck.version}  config hash {ck.config_hash.hex()}  tensors {len(ck.tensors)}")
    for name, arr in ck.tensors.items():
        print(f"  {name:40s} {'x'.join(map(str, arr.shape)) or 'scalar':>10s}  "
              f"mean {float(arr.mean()) if arr.size else 0.0:+.4e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pemb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic triplet file")
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="scratch or prompt-tuning training")
    s.add_argument("--data", help="triplet file (generated from the config if omitted)")
    s.add_argument("--out-dir", required=True)
    _add_config_flags(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("transfer", help="train W_adp onto a fresh backbone")
    s.add_argument("--source", required=True, help="scratch checkpoint")
    s.add_argument("--data")
    s.add_argument("--out-dir", required=True)
    _add_config_flags(s)
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("eval", help="retrieval accuracy of a checkpoint (or the untrained backbone)")
    s.add_argument("--ckpt")
    _add_config_flags(s)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate-k", help="scratch runs over a list of k, written as CSV")
    s.add_argument("--k-list", default="0,1,3,5")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(fn=cmd_ablate_k)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    s.add_argument("--seed-gc", type=int, default=0, help="seed of the micro system")
    s.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("inspect-ckpt", help="print a checkpoint's header and tensor table")
    s.add_argument("path")
    s.set_defaults(fn=cmd_inspect_ckpt)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except PembError as exc:
        code = getattr(exc, "code", None) if isinstance(exc, CheckpointError) else None
        print(f"error{f' [{code}]' if code else ''}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
