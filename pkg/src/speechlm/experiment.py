"""End-to-end runs and the ablation grid.

A run generates (or reuses) the toy language and corpus, fits the requested
tokenizer on the paired split, pre-trains, fine-tunes with best-dev-PER
selection, and reports metrics plus the alignment probe before and after
pre-training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .checkpoint import MetricsLog
from .config import RunConfig
from .corpus import Corpus, ToyLanguage, generate_corpora, generate_language
from .pipeline import PreparedData, fit_tokenizers, prepare_data
from .probe import alignment_probe
from .training import evaluate, finetune, masked_unit_accuracy, pretrain

PROBE_ITEMS = 32


@dataclass
class DataBundle:
    lang: ToyLanguage
    corpus: Corpus
    data: PreparedData


_DATA_CACHE: dict = {}


def build_data(cfg: RunConfig) -> DataBundle:
    """Language, corpus and tokenized splits; memoized on the settings that shape them."""
    key = (cfg.data.seed, cfg.lang, cfg.split, cfg.tok, cfg.ups, cfg.train.variant)
    if key not in _DATA_CACHE:
        lang = generate_language(cfg.data.seed, cfg.lang)
        corpus = generate_corpora(lang, cfg.split, cfg.data.seed)
        settings = cfg.tokenizer_settings()
        tok = fit_tokenizers(lang, corpus, cfg.train.variant, settings, cfg.data.seed)
        _DATA_CACHE[key] = DataBundle(lang, corpus, prepare_data(lang, corpus, tok, settings, cfg.data.seed))
    return _DATA_CACHE[key]


def clear_cache() -> None:
    _DATA_CACHE.clear()


@dataclass
class RunResult:
    dev: dict
    test: dict
    pretrain_acc: dict
    probe_init: list[float]
    probe_final: list[float]
    probe_layers: list[int]
    loss_trace: list[float] = field(default_factory=list)
    seconds: float = 0.0


def run_experiment(
    cfg: RunConfig,
    log: MetricsLog | None = None,
    params_hook: Callable[[str, dict, M.ModelConfig], None] | None = None,
) -> RunResult:
    """One full pipeline run; ``params_hook(stage, params, model_cfg)`` sees the
    parameters after ``"init"``, ``"pretrain"`` and ``"finetune"``."""
    start = time.perf_counter()
    bundle = build_data(cfg)
    data = bundle.data
    mcfg = cfg.model_config(data.n_units, bundle.lang.chars.size)
    tcfg = cfg.train_config()
    params = M.init_params(mcfg, tcfg.seed)
    probe_items = data.paired[:PROBE_ITEMS]
    init_probe = alignment_probe(params, mcfg, probe_items, seed=tcfg.seed)
    if params_hook:
        params_hook("init", params, mcfg)

    def on_step(step, br):
        if log is not None and (step % tcfg.eval_every == 0 or step == tcfg.pretrain_steps):
            log.log(step, "pretrain", {"umlm_half": br.umlm_half, "umlm_full": br.umlm_full, "uctc": br.uctc})

    _, trace = pretrain(params, mcfg, tcfg, data, on_step=on_step)
    acc = masked_unit_accuracy(params, mcfg, data.dev)
    final_probe = alignment_probe(params, mcfg, probe_items, seed=tcfg.seed)
    if log is not None:
        log.log(tcfg.pretrain_steps, "dev", acc)
    if params_hook:
        params_hook("pretrain", params, mcfg)

    def on_eval(step, metrics):
        if log is not None:
            log.log(tcfg.pretrain_steps + step, "dev", metrics)

    params, _, dev = finetune(params, mcfg, tcfg, data, bundle.lang.chars, on_eval=on_eval)
    test = evaluate(params, mcfg, data.test, bundle.lang.chars, with_units=False)
    if log is not None:
        log.log(tcfg.pretrain_steps + int(dev.get("step", 0)), "test", test)
    if params_hook:
        params_hook("finetune", params, mcfg)
    return RunResult(
        dev=dev,
        test=test,
        pretrain_acc=acc,
        probe_init=init_probe.emb_cosine,
        probe_final=final_probe.emb_cosine,
        probe_layers=final_probe.layers,
        loss_trace=[b.total for b in trace],
        seconds=time.perf_counter() - start,
    )


# -- ablation grid ----------------------------------------------------------

LAMBDAS = (0.01, 0.1, 1.0, 10.0)


@dataclass(frozen=True)
class Cell:
    name: str
    overrides: dict

    def config(self, base: RunConfig, seed: int) -> RunConfig:
        return base.with_values({**self.overrides, "data.train_seed": seed})


def default_grid() -> list[Cell]:
    cells = [
        Cell("full(P)", {"train.variant": "P"}),
        Cell("full(H)", {"train.variant": "H"}),
        Cell("no-swap(P)", {"train.variant": "P", "train.swap": False}),
        Cell("no-text(P)", {"train.variant": "P", "train.text": False}),
        Cell("no-text(H)", {"train.variant": "H", "train.text": False}),
    ]
    cells += [Cell(f"lam={lam:g}(P)", {"train.variant": "P", "train.lam": lam}) for lam in LAMBDAS]
    return cells


SUMMARY_HEADER = ("cell", "seed", "dev_PER", "dev_WER", "test_PER", "masked_unit_acc", "probe_init_L", "probe_L", "seconds")


def summary_row(name: str, seed: int, r: RunResult) -> tuple:
    return (
        name,
        seed,
        r.dev["PER"],
        r.dev["WER"],
        r.test["PER"],
        r.pretrain_acc["masked_unit_acc"],
        r.probe_init[-1],
        r.probe_final[-1],
        r.seconds,
    )


def format_rows(rows: Sequence[tuple]) -> str:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    lines = ["\t".join(SUMMARY_HEADER)]
    lines += ["\t".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def run_grid(
    base: RunConfig,
    cells: Sequence[Cell],
    seeds: Sequence[int],
    out: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> dict[tuple[str, int], RunResult]:
    """Run every (cell, seed).  Cells whose resolved config coincides with an
    earlier one reuse its result.  Writes the summary table to ``out`` as rows complete."""
    results: dict[tuple[str, int], RunResult] = {}
    by_config: dict[RunConfig, RunResult] = {}
    rows = []
    for cell in cells:
        for seed in seeds:
            cfg = cell.config(base, seed)
            if cfg not in by_config:
                by_config[cfg] = run_experiment(cfg)
            r = results[(cell.name, seed)] = by_config[cfg]
            rows.append(summary_row(cell.name, seed, r))
            if progress:
                progress(f"{cell.name} seed={seed} dev_PER={r.dev['PER']:.4f} ({r.seconds:.0f}s)")
            if out is not None:
                Path(out).write_text(format_rows(rows), encoding="utf-8")
    return results


def mean_dev_per(results: dict[tuple[str, int], RunResult], cell: str, seeds: Sequence[int]) -> float:
    return float(np.mean([results[(cell, s)].dev["PER"] for s in seeds]))
