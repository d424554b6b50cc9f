"""Release gate: ten end-to-end checks covering reporting arithmetic, adapter
transparency and merging, gradient correctness, base freezing, learning
separation between adapters and the frozen base, parameter budgets, pruning,
prompt fidelity, and seed aggregation.

The learning-separation check trains three adapter methods over five seeds on
a single CPU core and dominates the suite's runtime (roughly 35-45 minutes).
"""

import json
import math
import time

import numpy as np
import pytest

from peftlab import adapters as A
from peftlab import checkpoint as CK
from peftlab import data as D
from peftlab import experiments as E
from peftlab import gradcheck as G
from peftlab import metrics as ME
from peftlab import model as M
from peftlab import training as TR
from peftlab.adapters import AdapterConfig
from peftlab.cli import main as cli_main


def _report(name: str, ok: bool, detail: str = "") -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" — {detail}" if detail else ""))


# The eight adapter configurations of the published configuration grid.
GRID_CONFIGS = [
    AdapterConfig("lora", rank=4, label="r=4"),
    AdapterConfig("lora", rank=8, label="r=8"),
    AdapterConfig("lora", rank=16, dropout=0.1, label="r=16,drop=0.1"),
    AdapterConfig("adalora", rank=4, budget=0.5, label="b=0.5,r=4"),
    AdapterConfig("adalora", rank=8, budget=1.0, label="b=1.0,r=8"),
    AdapterConfig("adalora", rank=16, budget=1.5, label="b=1.5,r=16"),
    AdapterConfig("ia3", layer_scope="all", label="all-layers"),
    AdapterConfig("ia3", layer_scope=1, label="last-layers"),
]


@pytest.fixture(scope="module")
def toy_world():
    """Full-size toy model (d=64, 4 heads, 2+2 layers) over a real cohort vocabulary."""
    cohort = D.generate_cohort("sepsis", 64, 0) + D.generate_cohort("note", 32, 1)
    vocab = D.build_vocab(cohort)
    model_cfg = M.ModelConfig(vocab_size=len(vocab))
    params = M.init_params(model_cfg, seed=0)
    return cohort, vocab, model_cfg, params


def _random_prompts(vocab, n, seed, max_len=24):
    rng = np.random.default_rng(seed)
    prompts = []
    for _ in range(n):
        length = int(rng.integers(4, max_len))
        ids = rng.integers(4, len(vocab), size=length).tolist()
        tgt = rng.integers(4, len(vocab), size=int(rng.integers(1, 5))).tolist()
        prompts.append((ids, tgt))
    return prompts


def test_average_column_reproduces_published_rows():
    rows = [((79.4, 76.8, 23.9), 60.0),
            ((81.2, 78.5, 26.4), 62.0),
            ((83.1, 79.6, 28.3), 63.7),
            ((82.2, 78.4, 27.1), 62.6),
            ((83.5, 80.9, 29.8), 64.7),
            ((84.2, 80.3, 30.6), 65.0),
            ((85.6, 80.2, 32.1), 66.0),
            ((83.8, 78.7, 30.2), 64.2)]
    hits = sum(ME.avg_column(*inputs) == expected for inputs, expected in rows)
    _report("average-column reproduction", hits == 8, f"{hits}/8 exact")
    assert hits == 8


def test_fresh_adapters_are_transparent_on_every_grid_config(toy_world):
    _, vocab, model_cfg, params = toy_world
    prompts = _random_prompts(vocab, 20, seed=7)
    baseline = [M.forward_logits(params, None, ids, tgt).data for ids, tgt in prompts]
    worst = None
    for cfg in GRID_CONFIGS:
        adapters = A.init_adapters(cfg, model_cfg, seed=3)
        for (ids, tgt), base in zip(prompts, baseline):
            adapted = M.forward_logits(params, adapters, ids, tgt).data
            if not np.array_equal(adapted, base):
                worst = cfg.label
    _report("init transparency (8 configs x 20 prompts)", worst is None,
            "bit-identical logits" if worst is None else f"mismatch under {worst}")
    assert worst is None


def test_merge_equivalence_for_weight_space_methods(toy_world):
    _, vocab, model_cfg, params = toy_world
    prompts = _random_prompts(vocab, 10, seed=11)
    rng = np.random.default_rng(5)
    worst = 0.0
    for method in ("lora", "adalora"):
        adapters = A.init_adapters(AdapterConfig(method, rank=4), model_cfg, seed=4)
        for t in adapters.trainable_tensors():
            t.data[:] = rng.normal(0.0, 0.2, size=t.data.shape)
        merged = A.merge(adapters, params)
        for ids, tgt in prompts:
            live = M.forward_logits(params, adapters, ids, tgt).data
            folded = M.forward_logits(merged, None, ids, tgt).data
            worst = max(worst, float(np.abs(live - folded).max()))
    _report("merge equivalence (10 prompts)", worst <= 1e-9, f"max |diff| {worst:.2e}")
    assert worst <= 1e-9


def test_gradient_suite_passes_under_a_minute():
    start = time.time()
    ops, adapter_params = G.run_suite(seed=0, trials=20)
    elapsed = time.time() - start
    op_worst = max(r.max_rel_error for r in ops)
    param_worst = max(adapter_params.values())
    ok = (elapsed < 60.0 and op_worst <= G.TOLERANCE and param_worst <= G.TOLERANCE
          and set(adapter_params) == {"A", "B", "alpha", "gamma"})
    _report("gradient suite", ok,
            f"worst op {op_worst:.2e}, worst param {param_worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_base_checkpoint_unchanged_by_adapter_training(toy_world):
    cohort, vocab, model_cfg, params = toy_world
    before = CK.serialize_model(params)
    adapters = A.init_adapters(AdapterConfig("lora", rank=4), model_cfg, seed=1)
    TR.train(params, adapters, [ex for ex in cohort if ex.task == "sepsis"][:16],
             TR.TrainConfig(learning_rate=1e-3, batch_size=8, epochs=1), vocab)
    after = CK.serialize_model(params)
    _report("freeze invariant", before == after, "base serialization byte-identical")
    assert before == after


def test_adapters_learn_while_frozen_base_stays_at_chance():
    cfg = E.SeparationConfig()
    result = E.run_separation(cfg, E.default_methods())
    lines = []
    ok = True
    base_mean = result.mean_base_acc()
    if base_mean > 0.60:
        ok = False
    lines.append(f"base {base_mean:.3f} (limit <=0.60)")
    for label in ("lora", "adalora", "ia3"):
        mean = result.mean_acc(label)
        secs = result.method_seconds[label]
        if mean < 0.90 or secs > 600.0:
            ok = False
        lines.append(f"{label} {mean:.3f} in {secs:.0f}s (needs >=0.90, <=600s)")
    _report("learning separation (5 seeds)", ok, "; ".join(lines))
    assert ok, "; ".join(lines)


def test_parameter_budget_ordering(toy_world):
    _, _, model_cfg, params = toy_world

    def frac(cfg):
        return A.trainable_fraction(A.init_adapters(cfg, model_cfg), params)

    r4, r8, r16 = (frac(AdapterConfig("lora", rank=r)) for r in (4, 8, 16))
    ia3_all = frac(AdapterConfig("ia3", layer_scope="all"))
    ia3_last = frac(AdapterConfig("ia3", layer_scope=1))
    ok = r4 < r8 < r16 and ia3_all < r4 and ia3_last < ia3_all
    _report("parameter-budget ordering", ok,
            f"lora {100 * r4:.2f}<{100 * r8:.2f}<{100 * r16:.2f}%, "
            f"ia3 {100 * ia3_last:.2f}<{100 * ia3_all:.2f}%")
    assert ok


def test_pruning_count_mask_equivalence_and_persistence(toy_world):
    cohort, vocab, model_cfg, params = toy_world
    rng = np.random.default_rng(9)
    adapters = A.init_adapters(AdapterConfig("adalora", rank=8, budget=0.5), model_cfg, seed=2)
    reference = A.init_adapters(AdapterConfig("adalora", rank=8, budget=0.5), model_cfg, seed=2)
    for t, r in zip(adapters.trainable_tensors(), reference.trainable_tensors()):
        t.data[:] = rng.normal(0.0, 0.2, size=t.data.shape)
        r.data[:] = t.data

    r_total = sum(st.alpha.data.size for st in adapters.sites.values())
    A.prune_ranks(adapters)
    surviving = sum(int((~st.pruned_mask).sum()) for st in adapters.sites.values())
    count_ok = surviving == math.ceil(0.5 * r_total)

    for st, rt in zip(adapters.sites.values(), reference.sites.values()):
        rt.alpha.data[st.pruned_mask] = 0.0
    ids, tgt = ([5, 6, 7, 8], [9, 10])
    diff = float(np.abs(M.forward_logits(params, adapters, ids, tgt).data
                        - M.forward_logits(params, reference, ids, tgt).data).max())

    # Continue training for several epochs past the prune point.
    TR.train(params, adapters, [ex for ex in cohort if ex.task == "sepsis"][:16],
             TR.TrainConfig(learning_rate=1e-3, batch_size=8, epochs=3, prune_at=1), vocab)
    stay_zero = all(not st.alpha.data[st.pruned_mask].any()
                    for st in adapters.sites.values())

    ok = count_ok and diff <= 1e-9 and stay_zero
    _report("adaptive-rank pruning", ok,
            f"kept {surviving}/{r_total}, mask diff {diff:.2e}, zeros persist={stay_zero}")
    assert ok


def test_prompt_fidelity_and_default_shot_count():
    cohort = D.generate_cohort("sepsis", 20, 3)
    record = cohort[0].record
    checks = [
        "Does the patient have sepsis? Answer:" in D.render_prompt(record, "sepsis"),
        "Will the patient die during the hospital stay? Answer:" in D.render_prompt(record, "mortality"),
        "Task: Generate clinical note." in D.render_prompt(record, "note"),
    ]
    assembled = D.few_shot_assemble(cohort, "QUERY")
    # Each exemplar carries exactly one question suffix; the query placeholder has none.
    checks.append(assembled.count("Answer:") == 16 and assembled.endswith("\nQUERY"))
    ok = all(checks)
    _report("prompt fidelity", ok, f"{sum(checks)}/4 checks")
    assert ok


def test_report_aggregation_is_exact_and_order_invariant(tmp_path, capsys):
    scores = {"sepsis": [92.0, 94.0, 90.0, 93.0, 91.0],
              "mortality": [88.0, 86.0, 87.0, 89.0, 85.0],
              "note": [25.0, 27.0, 26.0, 24.0, 28.0]}
    # Lay out five seeded runs on disk and aggregate through the CLI.
    for task, vals in scores.items():
        for seed, score in enumerate(vals, start=1):
            run_dir = tmp_path / task / "lora" / "r=8" / str(seed)
            run_dir.mkdir(parents=True)
            (run_dir / "metrics.json").write_text(json.dumps(
                {"method": "lora", "label": "r=8", "task": task, "seed": seed,
                 "score_pct": score, "trainable_pct": 3.1}))
    roots = [str(tmp_path / t) for t in ("sepsis", "mortality", "note")]
    assert cli_main(["report", "--runs", *roots]) == 0
    forward = capsys.readouterr().out
    assert cli_main(["report", "--runs", *reversed(roots)]) == 0
    backward = capsys.readouterr().out

    sep = ME.aggregate(scores["sepsis"])
    expected_cell = f"{sep.mean:.1f} ±{sep.std:.1f}"
    sample_std = math.sqrt(sum((v - sep.mean) ** 2 for v in scores["sepsis"]) / 4)
    ok = (forward == backward and expected_cell in forward
          and abs(sep.std - sample_std) < 1e-12)
    _report("seed aggregation", ok, f"cell '{expected_cell}', order-invariant={forward == backward}")
    assert ok
