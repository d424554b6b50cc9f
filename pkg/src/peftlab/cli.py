"""Command-line entry point wiring data generation, training, evaluation,
and reporting into reproducible experiment runs.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
The output root named in an experiment config can be overridden with the
PEFTLAB_OUTPUT_ROOT environment variable.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import adapters as A
from . import checkpoint as CK
from . import data as D
from . import experiments as E
from . import gradcheck as G
from . import metrics as ME
from . import model as M
from . import training as TR

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
OUTPUT_ROOT_ENV = "PEFTLAB_OUTPUT_ROOT"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


# --- experiment configuration --------------------------------------------

_COHORT_DEFAULTS = {"train_n": 512, "test_n": 128, "note_n": 192, "format_n": 128,
                    "train_seed": 11, "test_seed": 12, "note_seed": 13}
_TRAIN_DEFAULTS = {"learning_rate": 5e-3, "batch_size": 16, "epochs": 20, "lam": 0.0}
_BASE_DEFAULTS = {"learning_rate": 3e-3, "note_epochs": 20, "format_epochs": 4}


def load_experiment(path: Path) -> dict:
    if not path.is_file():
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e}", EXIT_USAGE)
    cfg = {
        "task": raw.get("task", "sepsis"),
        "label": raw.get("label", ""),
        "output_dir": raw.get("output_dir", "out"),
        "seeds": raw.get("seeds", [3, 5, 6, 8, 9]),
        "shots_k": raw.get("shots_k", 16),
        "cohort": {**_COHORT_DEFAULTS, **raw.get("cohort", {})},
        "train": {**_TRAIN_DEFAULTS, **raw.get("train", {})},
        "base": {**_BASE_DEFAULTS, **raw.get("base", {})},
        "adapter": raw.get("adapter", {"method": "lora"}),
        "model": raw.get("model", {}),
    }
    seeds = cfg["seeds"]
    if not seeds or len(set(seeds)) != len(seeds):
        raise CliError("seeds must be non-empty and distinct", EXIT_USAGE)
    if cfg["task"] not in D.TASKS:
        raise CliError(f"unknown task {cfg['task']!r}", EXIT_USAGE)
    try:
        adapter_cfg = A.AdapterConfig(**{k: (tuple(v) if k == "target_sites" and v is not None else v)
                                         for k, v in cfg["adapter"].items()})
    except (TypeError, A.ConfigError) as e:
        raise CliError(f"bad adapter config: {e}", EXIT_USAGE)
    cfg["adapter_cfg"] = adapter_cfg
    if not cfg["label"]:
        cfg["label"] = adapter_cfg.label or adapter_cfg.method
    return cfg


def _output_root(cfg: dict) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, cfg["output_dir"]))


def _build_world(cfg: dict):
    """Cohorts, vocabulary, and model config shared by train and eval."""
    c = cfg["cohort"]
    train_ex = D.generate_cohort(cfg["task"], c["train_n"], c["train_seed"])
    test_ex = D.generate_cohort(cfg["task"], c["test_n"], c["test_seed"])
    note_ex = D.generate_cohort("note", c["note_n"], c["note_seed"])
    vocab = D.build_vocab(train_ex + test_ex + note_ex)
    model_cfg = M.ModelConfig(vocab_size=len(vocab), **cfg["model"])
    return train_ex, test_ex, note_ex, vocab, model_cfg


def _sep_config(cfg: dict) -> E.SeparationConfig:
    c, b = cfg["cohort"], cfg["base"]
    return E.SeparationConfig(
        task=cfg["task"], train_n=c["train_n"], test_n=c["test_n"],
        note_n=c["note_n"], format_n=c["format_n"], shots_k=cfg["shots_k"],
        train_seed=c["train_seed"], test_seed=c["test_seed"], note_seed=c["note_seed"],
        base_lr=b["learning_rate"], base_note_epochs=b["note_epochs"],
        base_format_epochs=b["format_epochs"])


def ensure_base(cfg: dict, seed: int, root: Path, vocab, model_cfg,
                note_ex, train_ex) -> M.ModelParams:
    """Load the per-seed frozen base checkpoint, building it on first use."""
    path = root / "base" / str(seed) / "model.json"
    if path.is_file():
        return CK.load_model(path)
    params = E.pretrain_base(model_cfg, vocab, note_ex, train_ex, seed, _sep_config(cfg))
    path.parent.mkdir(parents=True, exist_ok=True)
    CK.save_model(params, path)
    return params


# --- commands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError("--n must be >= 1", EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    examples = D.generate_cohort(args.task, args.n, args.seed)
    D.save_cohort(examples, out / f"{args.task}_{args.n}_{args.seed}.jsonl")
    D.build_vocab(examples).save(out / f"{args.task}_{args.n}_{args.seed}_vocab.json")
    print(f"wrote {len(examples)} records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_experiment(Path(args.config))
    root = _output_root(cfg)
    train_ex, test_ex, note_ex, vocab, model_cfg = _build_world(cfg)
    vocab_path = root / "vocab.json"
    vocab_path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(vocab_path)
    adapter_cfg = cfg["adapter_cfg"]
    for seed in cfg["seeds"]:
        params = ensure_base(cfg, seed, root, vocab, model_cfg, note_ex, train_ex)
        shots = D.select_shots(train_ex, cfg["shots_k"], seed)
        adapter_set = A.init_adapters(adapter_cfg, model_cfg, seed)
        train_cfg = TR.TrainConfig(seed=seed, **cfg["train"])
        try:
            adapter_set, report = TR.train(params, adapter_set, train_ex, train_cfg,
                                           vocab, shots=shots, k=cfg["shots_k"])
        except TR.TrainingError as e:
            raise CliError(f"training failed (seed {seed}): {e}", EXIT_RUNTIME)
        run_dir = root / adapter_cfg.method / cfg["label"] / str(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        CK.save_adapters(adapter_set, run_dir / "adapters.json")
        (run_dir / "train_report.json").write_text(json.dumps(report.to_dict(), indent=2))
        (run_dir / "run.json").write_text(json.dumps({
            "task": cfg["task"], "label": cfg["label"], "seed": seed,
            "shots_k": cfg["shots_k"], "cohort": cfg["cohort"],
            "model": cfg["model"], "adapter": cfg["adapter"],
            "base_checkpoint": str(root / "base" / str(seed) / "model.json"),
            "trainable_fraction": report.trainable_fraction,
        }, indent=2))
        print(f"seed {seed}: trained {adapter_cfg.method}/{cfg['label']} "
              f"({report.trainable_fraction * 100:.2f}% params) -> {run_dir}")
    return EXIT_OK


def _eval_run(run_dir: Path) -> dict:
    meta_path = run_dir / "run.json"
    if not meta_path.is_file():
        raise CliError(f"no run.json under {run_dir}", EXIT_RUNTIME)
    meta = json.loads(meta_path.read_text())
    base_path = Path(meta["base_checkpoint"])
    adapters_path = run_dir / "adapters.json"
    if not base_path.is_file() or not adapters_path.is_file():
        raise CliError(f"missing checkpoint for {run_dir}", EXIT_RUNTIME)
    params = CK.load_model(base_path)
    adapter_set = CK.load_adapters(adapters_path)
    cfg = {"task": meta["task"], "cohort": {**_COHORT_DEFAULTS, **meta["cohort"]},
           "model": meta.get("model", {})}
    train_ex, test_ex, note_ex, vocab, _ = _build_world(cfg)
    shots = D.select_shots(train_ex, meta["shots_k"], meta["seed"])
    k = meta["shots_k"]
    prefix = TR.shot_prefix_ids(shots, k, vocab) if k else None
    ctx = M.encode_context(params, adapter_set, prefix) if prefix is not None else None
    task = meta["task"]
    if task == "note":
        scores = []
        for ex in test_ex:
            out = M.greedy_generate(params, adapter_set, vocab.encode(ex.prompt_text),
                                    max_new=32, context=ctx)
            scores.append(ME.note_overlap_score(vocab.decode(out), ex.target_text))
        score_pct = float(np.mean(scores))
    else:
        acc = E.evaluate_accuracy(params, adapter_set, test_ex, task, shots, k, vocab)
        score_pct = 100.0 * acc
    metrics = {"method": adapter_set.config.method, "label": meta["label"],
               "task": task, "seed": meta["seed"], "score_pct": score_pct,
               "trainable_pct": 100.0 * meta["trainable_fraction"]}
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


def cmd_eval(args) -> int:
    metrics = _eval_run(Path(args.run_dir))
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    found = []
    for root in args.runs:
        found.extend(sorted(Path(root).glob("**/metrics.json")))
    if not found:
        raise CliError("no metrics.json files found under the given roots", EXIT_RUNTIME)
    groups: dict[tuple, dict] = {}
    for path in found:
        m = json.loads(path.read_text())
        g = groups.setdefault((m["method"], m["label"]),
                              {"tasks": {t: [] for t in D.TASKS}, "pct": []})
        g["tasks"][m["task"]].append((m["seed"], m["score_pct"]))
        g["pct"].append(m["trainable_pct"])
    rows = []
    for (method, label) in sorted(groups):
        g = groups[(method, label)]
        cells = {}
        for task in D.TASKS:
            scores = [s for _, s in sorted(g["tasks"][task])]
            cells[task] = (ME.aggregate(scores, task) if scores
                           else ME.MetricResult(0.0, 0.0, 0, task))
        rows.append(ME.RunRow(method, label, float(np.mean(g["pct"])),
                              cells["sepsis"], cells["mortality"], cells["note"]))
    print(ME.emit_report(rows, format=args.format), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops, adapter_params = G.run_suite(seed=args.seed)
    failures = []
    for r in ops:
        print(f"{r.name:24s} max rel error {r.max_rel_error:.3e}")
        if not r.passed:
            failures.append(r.name)
    for name, err in adapter_params.items():
        print(f"adapter {name:16s} max rel error {err:.3e}")
        if err > G.TOLERANCE:
            failures.append(f"adapter:{name}")
    if failures:
        print("FAILED: " + ", ".join(failures))
        return EXIT_RUNTIME
    print("all gradients within tolerance")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peftlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic cohort and vocabulary")
    g.add_argument("--task", required=True, choices=sorted(D.TASKS))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the experiment described by a JSON config")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run directory")
    e.add_argument("--run-dir", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="aggregate run metrics into a table")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--format", default="markdown", choices=("markdown", "csv"))
    r.set_defaults(fn=cmd_report)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (D.ConfigError, A.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
