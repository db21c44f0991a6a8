"""``speechlm`` command line.

Every command reads the run configuration (defaults < ``--config`` file <
``key=value`` overrides) and resolves all paths under ``--workdir``.
Failures print one line ``error: <kind>: <detail>`` to stderr and exit
nonzero: 2 for bad usage or configuration, 3 for missing or unreadable
inputs, 1 for everything else (including a failed gradient check).

Workdir files::

    corpus.bin, corpus.bin.manifest   gen-data
    lexicon.txt                       gen-data
    kmeans.bin                        fit-kmeans
    t2u.ckpt                          train-t2u
    units.<variant>.tsv               tokenize
    pretrain.ckpt, pretrain.trace.tsv pretrain
    finetune.ckpt                     finetune
    metrics.tsv                       pretrain, finetune, eval
    probe.tsv, probe.layers.tsv       probe-alignment
    ablation.tsv                      ablate
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .checkpoint import CheckpointError, MetricsLog, load_checkpoint, load_t2u, save_checkpoint, save_t2u
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusFormatError, generate_corpora, generate_language, read_corpus, write_corpus
from .experiment import default_grid, run_grid
from .gradcheck import run_suite
from .optim import OptimState
from .pipeline import Tokenizers, prepare_data, t2u_pairs
from .probe import alignment_probe
from .tokenizers import kmeans_fit, load_kmeans, save_kmeans, t2u_train
from .tokenizers.t2u import T2UConfig
from .training import evaluate, finetune, pretrain
from .units import UnitVocab

log = logging.getLogger("speechlm")

GRAD_TOL = 1e-5


class CliError(Exception):
    def __init__(self, kind: str, detail: str, status: int = 1):
        self.kind = kind
        self.status = status
        super().__init__(detail)


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.workdir = Path(args.workdir)
        self.cfg: RunConfig = load_config(args.config, _parse_overrides(args.overrides))

    def path(self, name: str) -> Path:
        return self.workdir / name

    def need(self, name: str, hint: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CliError("missing-input", f"{p} not found (run `speechlm {hint}` first)", 3)
        return p

    def output(self, name: str) -> Path:
        self.workdir.mkdir(parents=True, exist_ok=True)
        return self.path(name)

    def metrics(self) -> MetricsLog:
        return MetricsLog(self.output("metrics.tsv"))


def _parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        out[key.strip()] = value
    return out


# -- data and tokenizers ------------------------------------------------------


def _language(ctx: Context):
    return generate_language(ctx.cfg.data.seed, ctx.cfg.lang)


def _corpus(ctx: Context):
    lang = _language(ctx)
    corpus, chars = read_corpus(ctx.need("corpus.bin", "gen-data"))
    if chars != lang.chars:
        raise CliError("stale-input", "corpus.bin was generated with a different language config", 3)
    return lang, corpus


def _tokenizers(ctx: Context, lang, variant: str) -> Tokenizers:
    if variant == "P":
        return Tokenizers("P", lang.phonemes)
    km = load_kmeans(ctx.need("kmeans.bin", "fit-kmeans"))
    t2u = load_t2u(ctx.need("t2u.ckpt", "train-t2u"))
    if km.k != ctx.cfg.tok.kmeans_k or t2u.n_units != km.k:
        raise CliError("stale-input", f"tokenizer files do not match tok.kmeans_k={ctx.cfg.tok.kmeans_k}", 3)
    return Tokenizers("H", UnitVocab.hidden(km.k), km, t2u)


def _data(ctx: Context):
    lang, corpus = _corpus(ctx)
    settings = ctx.cfg.tokenizer_settings()
    tok = _tokenizers(ctx, lang, ctx.cfg.train.variant)
    return lang, prepare_data(lang, corpus, tok, settings, ctx.cfg.data.seed)


def _model(ctx: Context, lang, data) -> M.ModelConfig:
    return ctx.cfg.model_config(data.n_units, lang.chars.size)


def _load_params(ctx: Context, path: Path, mcfg: M.ModelConfig):
    ck = load_checkpoint(path, expect=M.init_params(mcfg, 0))
    if ck.model != mcfg:
        diff = [k for k, v in mcfg.as_dict().items() if ck.model.as_dict()[k] != v]
        raise CliError("config-mismatch", f"{path.name} was trained with different model.{diff[0]}", 2)
    return ck


# -- commands -----------------------------------------------------------------


def cmd_gen_data(ctx: Context) -> None:
    lang = _language(ctx)
    corpus = generate_corpora(lang, ctx.cfg.split, ctx.cfg.data.seed)
    write_corpus(corpus, lang.chars, ctx.output("corpus.bin"))
    lang.lexicon.save(ctx.output("lexicon.txt"))
    print("\n".join(f"{name}\t{len(corpus[name])}" for name in ctx.cfg.split.as_dict()))


def cmd_fit_kmeans(ctx: Context) -> None:
    _, corpus = _corpus(ctx)
    frames = np.concatenate([u.features for u in corpus["paired"]])
    km = kmeans_fit(frames, ctx.cfg.tok.kmeans_k, ctx.cfg.tok.kmeans_iters, ctx.cfg.data.seed)
    save_kmeans(km, ctx.output("kmeans.bin"))
    print(f"k\t{km.k}\nframes\t{len(frames)}\ninertia\t{km.inertia_trace[-1]:.6g}")


def cmd_train_t2u(ctx: Context) -> None:
    lang, corpus = _corpus(ctx)
    km = load_kmeans(ctx.need("kmeans.bin", "fit-kmeans"))
    tok = ctx.cfg.tok
    model = t2u_train(
        t2u_pairs(corpus["paired"], km), lang.phonemes.size, km.k, tok.t2u_epochs, ctx.cfg.data.seed, T2UConfig()
    )
    save_t2u(ctx.output("t2u.ckpt"), model)
    print(f"pairs\t{len(corpus['paired'])}\nepochs\t{tok.t2u_epochs}")


def cmd_tokenize(ctx: Context) -> None:
    lang, data = _data(ctx)
    variant = ctx.cfg.train.variant
    out = ctx.output(f"units.{variant}.tsv")
    lines = ["split\tuid\tmodality\tunits"]
    for split in ("paired", "pretrain_speech", "finetune", "dev", "test"):
        lines += [f"{split}\t{it.uid}\tspeech\t{' '.join(map(str, it.units))}" for it in getattr(data, split)]
    lines += [f"pretrain_text\t{it.uid}\ttext\t{' '.join(map(str, it.units))}" for it in data.pretrain_text]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"written\t{out}\nunits\t{data.n_units}\ndropped_text\t{data.dropped_text}")


def cmd_pretrain(ctx: Context) -> None:
    lang, data = _data(ctx)
    mcfg = _model(ctx, lang, data)
    tcfg = ctx.cfg.train_config()
    ckpt = ctx.output("pretrain.ckpt")
    trace_path = ctx.output("pretrain.trace.tsv")
    if ctx.args.resume:
        ck = _load_params(ctx, ctx.need("pretrain.ckpt", "pretrain"), mcfg)
        if ck.train != tcfg:
            raise CliError("config-mismatch", "pretrain.ckpt was written with a different train config", 2)
        params, state = ck.params, ck.state
        lines = trace_path.read_text(encoding="utf-8").splitlines()[: state.step + 1] if trace_path.exists() else []
    else:
        params, state = M.init_params(mcfg, tcfg.seed), OptimState()
        lines = []
    if not lines:
        lines = ["step\tumlm_half\tumlm_full\tuctc\ttotal"]
    metrics = ctx.metrics()

    def on_step(step, br):
        lines.append(f"{step}\t{br.umlm_half!r}\t{br.umlm_full!r}\t{br.uctc!r}\t{br.total!r}")
        if step % tcfg.eval_every == 0 or step == tcfg.pretrain_steps:
            metrics.log(step, "pretrain", {"umlm_half": br.umlm_half, "umlm_full": br.umlm_full, "uctc": br.uctc})
            log.info("step %d total %.4f", step, br.total)

    state, _ = pretrain(params, mcfg, tcfg, data, state=state, steps=ctx.args.steps, on_step=on_step)
    save_checkpoint(ckpt, mcfg, tcfg, params, state)
    trace_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"step\t{state.step}\ncheckpoint\t{ckpt}")


def cmd_finetune(ctx: Context) -> None:
    lang, data = _data(ctx)
    mcfg = _model(ctx, lang, data)
    tcfg = ctx.cfg.train_config()
    src = Path(ctx.args.init) if ctx.args.init else ctx.need("pretrain.ckpt", "pretrain")
    if not src.exists():
        raise CliError("missing-input", f"{src} not found", 3)
    ck = _load_params(ctx, src, mcfg)
    metrics = ctx.metrics()
    params, _, best = finetune(
        ck.params, mcfg, tcfg, data, lang.chars, on_eval=lambda s, m: metrics.log(s, "finetune-dev", m)
    )
    save_checkpoint(ctx.output("finetune.ckpt"), mcfg, tcfg, params, OptimState(step=int(best.get("step", 0))))
    print("\n".join(f"{k}\t{v}" for k, v in best.items()))


def cmd_eval(ctx: Context) -> None:
    lang, data = _data(ctx)
    mcfg = _model(ctx, lang, data)
    path = Path(ctx.args.ckpt) if ctx.args.ckpt else ctx.need("finetune.ckpt", "finetune")
    if not path.exists():
        raise CliError("missing-input", f"{path} not found", 3)
    params = _load_params(ctx, path, mcfg).params
    result = evaluate(params, mcfg, getattr(data, ctx.args.split), lang.chars)
    ctx.metrics().log(0, ctx.args.split, result)
    print("\n".join(f"{k}\t{v:.6f}" for k, v in result.items()))


def cmd_probe_alignment(ctx: Context) -> None:
    lang, data = _data(ctx)
    mcfg = _model(ctx, lang, data)
    path = Path(ctx.args.ckpt) if ctx.args.ckpt else ctx.need("pretrain.ckpt", "pretrain")
    if not path.exists():
        raise CliError("missing-input", f"{path} not found", 3)
    params = _load_params(ctx, path, mcfg).params
    res = alignment_probe(params, mcfg, data.paired[: ctx.args.items], n_points=ctx.args.points, seed=ctx.cfg.data.train_seed)
    res.write(ctx.output("probe.tsv"))
    rows = ["layer\temb_cosine\tpair_cosine"]
    rows += [f"{l}\t{e:.6f}\t{p:.6f}" for l, e, p in zip(res.layers, res.emb_cosine, res.pair_cosine)]
    ctx.output("probe.layers.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print("\n".join(rows))


def cmd_grad_check(ctx: Context) -> None:
    worst = run_suite(ctx.args.instances, ctx.cfg.data.seed)
    for family, err in worst.items():
        print(f"{family}\t{err:.3e}")
    top = max(worst.values())
    print(f"max_rel_error\t{top:.3e}")
    if not top < GRAD_TOL:
        raise CliError("grad-check", f"max relative error {top:.3e} >= {GRAD_TOL:g}", 1)


def cmd_ablate(ctx: Context) -> None:
    cells = default_grid()
    if ctx.args.cells:
        wanted = ctx.args.cells.split(",")
        unknown = sorted(set(wanted) - {c.name for c in cells})
        if unknown:
            raise CliError("usage", f"unknown cell {unknown[0]}", 2)
        cells = [c for c in cells if c.name in wanted]
    seeds = [int(s) for s in ctx.args.seeds.split(",")]
    out = ctx.output("ablation.tsv")
    run_grid(ctx.cfg, cells, seeds, out=out, progress=lambda line: print(line, flush=True))
    print(f"summary\t{out}")


def cmd_show_config(ctx: Context) -> None:
    sys.stdout.write(ctx.cfg.dumps(comments=True))


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the toy language corpus"),
    "fit-kmeans": (cmd_fit_kmeans, "fit k-means on the paired split"),
    "train-t2u": (cmd_train_t2u, "train the text-to-unit model on the paired split"),
    "tokenize": (cmd_tokenize, "dump unit sequences of every split for train.variant"),
    "pretrain": (cmd_pretrain, "joint UMLM + UCTC pre-training"),
    "finetune": (cmd_finetune, "CTC fine-tuning with best-dev selection"),
    "eval": (cmd_eval, "PER, WER and masked-unit accuracy on a split"),
    "probe-alignment": (cmd_probe_alignment, "layer-wise speech/unit alignment and PCA table"),
    "grad-check": (cmd_grad_check, "finite-difference gradient suite"),
    "ablate": (cmd_ablate, "run the ablation grid and write a summary table"),
    "show-config": (cmd_show_config, "print the effective configuration with key docs"),
}


class _Parser(argparse.ArgumentParser):
    # usage errors become one-line CliErrors instead of argparse's usage dump
    def error(self, message):
        raise CliError("usage", message, 2)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory for every input and output file")
    common.add_argument("--config", help="file of `key = value` lines")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    parser = _Parser(prog="speechlm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    subs = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}
    subs["pretrain"].add_argument("--steps", type=int, help="stop after this optimizer step")
    subs["pretrain"].add_argument("--resume", action="store_true", help="continue from pretrain.ckpt")
    subs["finetune"].add_argument("--init", help="checkpoint to start from (default pretrain.ckpt)")
    subs["eval"].add_argument("--ckpt", help="checkpoint to score (default finetune.ckpt)")
    subs["eval"].add_argument("--split", choices=("dev", "test"), default="dev")
    subs["probe-alignment"].add_argument("--ckpt", help="checkpoint to probe (default pretrain.ckpt)")
    subs["probe-alignment"].add_argument("--items", type=int, default=32, help="paired utterances to probe")
    subs["probe-alignment"].add_argument("--points", type=int, default=200, help="sampled frames per layer")
    subs["grad-check"].add_argument("--instances", type=int, default=20, help="random instances per kernel")
    subs["ablate"].add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    subs["ablate"].add_argument("--cells", help="comma-separated subset of grid cells")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.status)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        ctx = Context(args)
        COMMANDS[args.command][0](ctx)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.status)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except (CheckpointError, CorpusFormatError) as exc:
        return _fail("bad-input", str(exc), 3)
    except FileNotFoundError as exc:
        return _fail("missing-input", str(exc), 3)
    except ValueError as exc:
        return _fail("invalid", str(exc), 1)
    return 0


def _fail(kind: str, detail: str, status: int) -> int:
    print(f"error: {kind}: {' '.join(detail.split())}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
