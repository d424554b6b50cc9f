"""Central finite-difference verification of every differentiable operation.

Each check builds small random inputs in [-2, 2], computes a scalar loss
through one operation (composed with fixed linear probes where the op alone
would have degenerate gradients), runs backward, and compares every input
element's analytic gradient against a central difference with step 1e-5.
"""

from dataclasses import dataclass

import numpy as np

from . import adapters as A
from . import data as D
from . import model as M
from . import tensor as T

STEP = 1e-5
TOLERANCE = 1e-3


@dataclass
class OpReport:
    name: str
    max_rel_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _rel_error(analytic: float, numeric: float) -> float:
    # The denominator floor keeps central-difference roundoff noise on
    # near-zero gradients from registering as a relative-error failure.
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)


def _probe(inputs: list[T.Tensor], forward) -> float:
    """Max relative error over every element of every input tensor."""
    loss = forward()
    T.backward(loss)
    grads = [np.array(t.grad) for t in inputs]
    worst = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            fp = float(forward().data)
            flat[i] = orig - STEP
            fm = float(forward().data)
            flat[i] = orig
            worst = max(worst, _rel_error(gflat[i], (fp - fm) / (2 * STEP)))
        t.grad = None
    return worst


def _rand(rng, *shape, away_from_zero: float = 0.0) -> T.Tensor:
    x = rng.uniform(-2.0, 2.0, shape)
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, away_from_zero * np.sign(x) + x, x)
    return T.Tensor(x, requires_grad=True)


def _const(rng, *shape) -> T.Tensor:
    return T.Tensor(rng.uniform(-1.0, 1.0, shape))


def _op_cases(rng):
    """name -> (inputs, scalar forward) pairs built freshly per trial."""
    w34, w33, w4, w24 = (_const(rng, 3, 4), _const(rng, 3, 3), _const(rng, 4),
                         _const(rng, 2, 4))

    def case_add():
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        return [a, b], lambda: T.tsum(T.mul(T.add(a, b), w34))

    def case_sub():
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        return [a, b], lambda: T.tsum(T.mul(T.sub(a, b), w34))

    def case_mul():
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        return [a, b], lambda: T.tsum(T.mul(T.mul(a, b), w34))

    def case_mul_vector():
        a, b = _rand(rng, 3, 4), _rand(rng, 4)
        return [a, b], lambda: T.tsum(T.mul(T.mul(a, b), w34))

    def case_scale():
        a = _rand(rng, 3, 4)
        return [a], lambda: T.tsum(T.mul(T.scale(a, -1.7), w34))

    def case_matmul():
        a, b = _rand(rng, 3, 3), _rand(rng, 3, 4)
        return [a, b], lambda: T.tsum(T.mul(T.matmul(a, b), w34))

    def case_matmul_t():
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        return [a, b], lambda: T.tsum(T.mul(T.matmul_t(a, b), w33))

    def case_relu():
        a = _rand(rng, 3, 4, away_from_zero=0.1)
        return [a], lambda: T.tsum(T.mul(T.relu(a), w34))

    def case_softmax():
        a = _rand(rng, 3, 4)
        return [a], lambda: T.tsum(T.mul(T.softmax(a, axis=1), w34))

    def case_rms_norm():
        a, gain = _rand(rng, 3, 4), _rand(rng, 4)
        return [a, gain], lambda: T.tsum(T.mul(T.rms_norm(a, gain), w34))

    def case_embedding_lookup():
        table = _rand(rng, 5, 4)
        ids = rng.integers(0, 5, 3)
        return [table], lambda: T.tsum(T.mul(T.embedding_lookup(table, ids), w34))

    def case_cross_entropy():
        logits = _rand(rng, 3, 4)
        targets = rng.integers(0, 4, 3).tolist()
        return [logits], lambda: T.cross_entropy(logits, targets)

    def case_tsum():
        a = _rand(rng, 3, 4)
        return [a], lambda: T.tsum(T.mul(a, w34))

    def case_l1_norm():
        a = _rand(rng, 3, 4, away_from_zero=0.1)
        return [a], lambda: T.l1_norm(a)

    def case_split_merge_heads():
        a = _rand(rng, 3, 4)
        return [a], lambda: T.tsum(T.mul(T.merge_heads(T.split_heads(a, 2)), w34))

    def case_concat_rows():
        a, b = _rand(rng, 2, 4), _rand(rng, 3, 4)
        top = T.Tensor(np.vstack([w24.data, w34.data[:3]]))
        return [a, b], lambda: T.tsum(T.mul(T.concat_rows(a, b), top))

    def case_attention():
        q, k, v = _rand(rng, 2, 3, 2), _rand(rng, 2, 3, 2), _rand(rng, 2, 3, 2)
        probe = _const(rng, 2, 3, 2)
        return [q, k, v], lambda: T.tsum(T.mul(T.attention(q, k, v), probe))

    def case_attention_masked():
        q, k, v = _rand(rng, 2, 3, 2), _rand(rng, 2, 3, 2), _rand(rng, 2, 3, 2)
        probe = _const(rng, 2, 3, 2)
        mask = np.triu(np.full((3, 3), -1e30), k=1)
        return [q, k, v], lambda: T.tsum(T.mul(T.attention(q, k, v, mask), probe))

    return {name[len("case_"):]: fn for name, fn in locals().items()
            if name.startswith("case_")}


def check_ops(seed: int = 0, trials: int = 20) -> list[OpReport]:
    """Finite-difference report for every tensor operation."""
    rng = np.random.default_rng(seed)
    names = sorted(_op_cases(rng))
    reports = []
    for name in names:
        worst = 0.0
        for _ in range(trials):
            inputs, forward = _op_cases(rng)[name]()
            worst = max(worst, _probe(inputs, forward))
        reports.append(OpReport(name, worst, trials))
    return reports


def _tiny_setup(seed: int):
    ex = D.generate_cohort("sepsis", 24, seed)
    vocab = D.build_vocab(ex)
    cfg = M.ModelConfig(vocab_size=len(vocab), d_model=8, n_heads=2,
                        n_enc_layers=1, n_dec_layers=1, d_ff=16, max_seq_len=128)
    params = M.init_params(cfg, seed)
    seq = (vocab.encode(ex[0].prompt_text), vocab.encode(ex[0].target_text) + [M.EOS_ID])
    return cfg, params, seq


def check_adapter_params(seed: int = 0, probes: int = 8) -> dict[str, float]:
    """Finite-difference check of the loss gradient w.r.t. each adapter
    parameter class: LoRA factors A and B, importance vector alpha, and
    activation scaling gamma."""
    cfg, params, (q_ids, t_ids) = _tiny_setup(seed)
    rng = np.random.default_rng(seed + 1)
    results = {}
    for method, names in (("adalora", ("A", "B", "alpha")), ("ia3", ("gamma",))):
        ad = A.init_adapters(A.AdapterConfig(method, rank=2, layer_scope="all"), cfg, seed)
        for st in ad.sites.values():
            for nm in names:
                tns = getattr(st, nm)
                tns.data[:] = rng.normal(0.0, 0.3, tns.data.shape) + (1.0 if nm in ("alpha", "gamma") else 0.0)

        def forward():
            return T.cross_entropy(M.forward_logits(params, ad, q_ids, t_ids), t_ids)

        loss = forward()
        T.backward(loss)
        for nm in names:
            worst = 0.0
            for st in ad.sites.values():
                tns = getattr(st, nm)
                flat = tns.data.reshape(-1)
                gflat = tns.grad.reshape(-1)
                idx = rng.permutation(flat.size)[:probes]
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + STEP
                    fp = float(forward().data)
                    flat[i] = orig - STEP
                    fm = float(forward().data)
                    flat[i] = orig
                    worst = max(worst, _rel_error(gflat[i], (fp - fm) / (2 * STEP)))
            results[nm] = worst
        for st in ad.sites.values():
            for nm in names:
                getattr(st, nm).grad = None
    return results


def run_suite(seed: int = 0, trials: int = 20) -> tuple[list[OpReport], dict[str, float]]:
    return check_ops(seed, trials), check_adapter_params(seed)
