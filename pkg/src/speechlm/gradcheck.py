"""Finite-difference suite: every kernel on random shapes, then the full losses.

Each case builds a program and float64 inputs; :func:`run_suite` reports the
worst relative error per case.  The model cases use a tiny configuration on
12-frame utterances so that every parameter coordinate can be probed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import model as M
from .losses import umlm_loss, uctc_loss
from .numerics import Tensor, finite_diff_check, ops
from .pipeline import SpeechItem, TextItem
from .training import speech_forward, text_forward

# largest allowed step: with the fourth-order stencil truncation stays far below
# rounding noise, which shrinks as 1/step and dominates on small gradients
STEP = 1e-4


def _readout(y: Tensor, rng_state: int = 7) -> Tensor:
    """Random linear functional, so every output coordinate gets its own weight."""
    w = np.random.default_rng(rng_state).normal(size=y.shape)
    return ops.sum(ops.mul(y, Tensor(w)))


@dataclass
class Case:
    name: str
    program: Callable
    inputs: dict
    seed: int | None = None


def _shape(rng, rank, lo=1, hi=4):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=rank))


def _kernel_cases(rng: np.random.Generator) -> Iterator[Case]:
    """One random instance of every kernel."""
    s = _shape(rng, int(rng.integers(1, 4)))
    yield Case("add", lambda t, r: _readout(ops.add(t["a"], t["b"])), {"a": rng.normal(size=s), "b": rng.normal(size=s[-1:])})
    yield Case("sub", lambda t, r: _readout(ops.sub(t["a"], t["b"])), {"a": rng.normal(size=s), "b": rng.normal(size=s)})
    yield Case("mul", lambda t, r: _readout(ops.mul(t["a"], t["b"])), {"a": rng.normal(size=s), "b": rng.normal(size=(1,) * len(s))})
    c = float(rng.normal())
    yield Case("scale", lambda t, r: _readout(ops.scale(t["a"], c)), {"a": rng.normal(size=s)})
    # keep gelu inputs where its slope is well above the differencing noise floor
    yield Case("gelu", lambda t, r: _readout(ops.gelu(t["a"])), {"a": rng.uniform(-3, 3, size=s)})
    b, n, k, m = _shape(rng, 4)
    yield Case(
        "matmul",
        lambda t, r: _readout(ops.matmul(t["a"], t["b"])),
        {"a": rng.normal(size=(b, n, k)), "b": rng.normal(size=(k, m))},
    )
    yield Case("reshape", lambda t, r: _readout(ops.reshape(t["a"], (-1,))), {"a": rng.normal(size=s)})
    perm = tuple(int(i) for i in rng.permutation(3))
    yield Case("transpose", lambda t, r: _readout(ops.transpose(t["a"], perm)), {"a": rng.normal(size=(b, n, k))})
    ax = int(rng.integers(0, 3))
    yield Case("sum", lambda t, r: _readout(ops.sum(t["a"], axis=ax, keepdims=True)), {"a": rng.normal(size=(b, n, k))})
    yield Case("softmax", lambda t, r: _readout(ops.softmax(t["a"])), {"a": rng.normal(size=(b, n, k + 1))})
    yield Case("log_softmax", lambda t, r: _readout(ops.log_softmax(t["a"])), {"a": rng.normal(size=(b, n, k + 1))})
    yield Case("logsumexp", lambda t, r: _readout(ops.logsumexp(t["a"], axis=-1)), {"a": rng.normal(size=(b, n, k + 1))})
    d = k + 1
    yield Case(
        "layer_norm",
        lambda t, r: _readout(ops.layer_norm(t["x"], t["g"], t["b"])),
        # width 2 is degenerate: every normalized row is (+-1, -+1)
        {"x": rng.normal(size=(b, n, d + 1)), "g": rng.normal(size=d + 1), "b": rng.normal(size=d + 1)},
    )
    v = m + 1
    targets = rng.integers(0, v, size=(b, n))
    weights = rng.integers(0, 2, size=(b, n)).astype(np.float64)
    yield Case(
        "cross_entropy",
        lambda t, r: ops.cross_entropy(t["logits"], targets, weights),
        {"logits": rng.normal(size=(b, n, v))},
    )
    ids = rng.integers(0, v, size=(b, n))
    yield Case("embedding", lambda t, r: _readout(ops.embedding(t["table"], ids)), {"table": rng.normal(size=(v, d))})
    yield Case(
        "cosine_similarity",
        lambda t, r: _readout(ops.cosine_similarity(t["rows"], t["table"])),
        {"rows": rng.normal(size=(b, n, d)), "table": rng.normal(size=(v, d))},
    )
    yield Case(
        "dropout",
        lambda t, r: _readout(ops.dropout(t["a"], 0.3, r)),
        {"a": rng.normal(size=(b, n, d))},
        seed=int(rng.integers(1 << 30)),
    )
    yield Case(
        "concat",
        lambda t, r: _readout(ops.concat([t["a"], t["b"]], axis=1)),
        {"a": rng.normal(size=(b, n, d)), "b": rng.normal(size=(b, k, d))},
    )
    lo = int(rng.integers(0, n))
    yield Case("slice_axis", lambda t, r: _readout(ops.slice_axis(t["a"], lo, n, axis=1)), {"a": rng.normal(size=(b, n, d))})
    rows = rng.integers(0, n, size=n + 2)
    yield Case("take_rows", lambda t, r: _readout(ops.take_rows(t["a"], rows)), {"a": rng.normal(size=(n, d))})
    where = rng.random((b, n)) < 0.5
    yield Case(
        "replace_rows",
        lambda t, r: _readout(ops.replace_rows(t["x"], where, t["src"])),
        {"x": rng.normal(size=(b, n, d)), "src": rng.normal(size=(b, n, d))},
    )
    yield Case(
        "replace_rows_broadcast",
        lambda t, r: _readout(ops.replace_rows(t["x"], where, t["src"])),
        {"x": rng.normal(size=(b, n, d)), "src": rng.normal(size=(d,))},
    )


def kernel_cases(n_instances: int = 20, seed: int = 0) -> list[Case]:
    out = []
    for i in range(n_instances):
        for case in _kernel_cases(np.random.default_rng([seed, i])):
            case.name = f"{case.name}#{i}"
            out.append(case)
    return out


# -- model-level cases ---------------------------------------------------------

TOY_FRAMES = 12


def toy_model_config() -> M.ModelConfig:
    return M.ModelConfig(
        n_units=5, n_chars=4, feat_dim=3, layers=2, d_model=8, heads=2, ffn=12,
        mask_prob=0.3, mask_len=3, swap_prob=0.3, n_buckets=4, max_distance=8,
    )


def toy_batch(cfg: M.ModelConfig, seed: int = 0) -> tuple[list[SpeechItem], list[TextItem]]:
    rng = np.random.default_rng(seed)
    speech = [
        SpeechItem(rng.normal(size=(n, cfg.feat_dim)), rng.integers(0, cfg.n_units, n), np.array([1, 2]), "", i)
        for i, n in enumerate((TOY_FRAMES, TOY_FRAMES - 3))
    ]
    text = [
        TextItem(rng.integers(0, cfg.n_units, n), rng.integers(1, cfg.n_chars, c), i)
        for i, (n, c) in enumerate(((TOY_FRAMES, 3), (TOY_FRAMES - 2, 2)))
    ]
    return speech, text


def _model_inputs(cfg: M.ModelConfig, seed: int) -> dict[str, np.ndarray]:
    params = M.init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 99])
    out = {}
    for k, v in params.items():
        # break the exact symmetries of a fresh init (unit gains, zero biases)
        out[k] = v.data + 0.1 * rng.normal(size=v.shape)
    return out


def model_cases(seed: int = 0, lam: float = 0.7) -> list[Case]:
    cfg = toy_model_config()
    speech, text = toy_batch(cfg, seed)
    inputs = _model_inputs(cfg, seed)

    def umlm(t, r):
        fwd = speech_forward(t, cfg, speech, r)
        half, full, _ = umlm_loss(t, cfg, fwd.h_half, fwd.h_full, fwd.units, fwd.masked)
        return ops.add(half, full)

    def uctc(t, r):
        return text_forward(t, cfg, text, r)

    def joint(t, r):
        return ops.add(umlm(t, r), ops.scale(uctc(t, r), lam))

    def ctc_only(t, r):
        logits = t["logits"]
        return uctc_loss(logits, [np.array([1, 2]), np.array([3])], np.array([6, 5]))

    ctc_in = {"logits": np.random.default_rng([seed, 5]).normal(size=(2, 6, 4))}
    return [
        Case("umlm", umlm, inputs, seed=seed + 11),
        Case("uctc", uctc, inputs, seed=seed + 12),
        Case("joint", joint, inputs, seed=seed + 13),
        Case("uctc_logits", ctc_only, ctc_in),
    ]


def run_case(case: Case, step: float = STEP, max_coords: int | None = None) -> float:
    errs = finite_diff_check(case.program, case.inputs, step=step, seed=case.seed, max_coords=max_coords)
    return max(errs.values())


def run_suite(
    n_instances: int = 20, seed: int = 0, step: float = STEP, progress: Callable[[str, float], None] | None = None
) -> dict[str, float]:
    """Worst relative error for every kernel family and every model-level loss."""
    worst: dict[str, float] = {}
    for case in kernel_cases(n_instances, seed) + model_cases(seed):
        err = run_case(case, step)
        family = case.name.split("#")[0]
        worst[family] = max(worst.get(family, 0.0), err)
        if progress:
            progress(case.name, err)
    return worst
