import dataclasses
import hashlib

import numpy as np
import pytest

from speechlm import model as M
from speechlm.checkpoint import (
    CheckpointError,
    MetricsLog,
    load_checkpoint,
    read_blob,
    save_checkpoint,
    write_blob,
)
from speechlm.corpus import SplitSizes, generate_corpora, generate_language
from speechlm.metrics import cer, edit_distance, error_rate, wer
from speechlm.numerics import Tape, Tensor
from speechlm.optim import AdamConfig, NonFiniteGradient, OptimState, Schedule, adam_step, clip_by_global_norm, lr_at
from speechlm.pipeline import SpeechItem, TokenizerSettings, fit_tokenizers, prepare_data
from speechlm.probe import alignment_probe, pca_2d
from speechlm.training import (
    FROZEN_PREFIXES,
    TrainConfig,
    evaluate,
    finetune,
    finetune_step,
    finetune_trainable,
    pretrain,
    pretrain_loss,
    sample_batch,
)

TINY = SplitSizes(paired=12, pretrain_speech=24, pretrain_text=24, finetune=12, dev=6, test=6)


@pytest.fixture(scope="module")
def bundle():
    lang = generate_language(0)
    corpus = generate_corpora(lang, TINY, 0)
    settings = TokenizerSettings()
    tok = fit_tokenizers(lang, corpus, "P", settings, 0)
    return lang, prepare_data(lang, corpus, tok, settings, 0)


@pytest.fixture(scope="module")
def cfg(bundle):
    lang, data = bundle
    return M.ModelConfig(n_units=data.n_units, n_chars=lang.chars.size, feat_dim=16, d_model=16, heads=2, ffn=32)


TCFG = TrainConfig(speech_batch=3, text_batch=3, pretrain_steps=40, pretrain_warmup=4, finetune_steps=6,
                   finetune_warmup=2, finetune_batch=3, eval_every=3)


def _hash(params, names=None):
    h = hashlib.sha256()
    for k in sorted(names or params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


class TestSchedule:
    S = Schedule(peak_lr=1e-3, warmup=100, total=1000)

    def test_reference_points(self):
        assert lr_at(self.S, 50) == pytest.approx(5e-4)
        assert lr_at(self.S, 100) == 1e-3
        assert lr_at(self.S, 0) == 0.0
        assert lr_at(self.S, 1000) == 0.0
        assert lr_at(self.S, 5000) == 0.0
        assert lr_at(self.S, 550) == pytest.approx(5e-4)

    def test_continuous_piecewise_linear(self):
        lrs = np.array([lr_at(self.S, s) for s in range(1001)])
        assert np.max(np.abs(np.diff(lrs))) <= 1e-3 / 100 + 1e-15
        np.testing.assert_allclose(np.diff(lrs[:101]), 1e-5)
        np.testing.assert_allclose(np.diff(lrs[100:]), -1e-3 / 900)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Schedule(1e-3, 0, 10)
        with pytest.raises(ValueError):
            Schedule(1e-3, 10, 10)
        with pytest.raises(ValueError):
            lr_at(self.S, -1)


class TestAdam:
    @staticmethod
    def _params():
        return {"a": Tensor(np.ones((2, 3)), requires_grad=True), "b": Tensor(np.zeros(4), requires_grad=True)}

    def test_first_step_is_lr_times_sign(self):
        p = self._params()
        g = {"a": np.full((2, 3), 0.37), "b": np.array([-2.0, 3.0, -0.01, 0.5])}
        adam_step(p, g, OptimState(), lr=0.01, config=AdamConfig(clip_norm=None))
        np.testing.assert_allclose(p["a"].data, 1.0 - 0.01, rtol=1e-6)
        np.testing.assert_allclose(p["b"].data, -0.01 * np.sign(g["b"]), rtol=1e-5)

    def test_zero_gradient_keeps_params(self):
        p = self._params()
        state = OptimState()
        for _ in range(5):
            adam_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, state, lr=0.1)
        np.testing.assert_array_equal(p["a"].data, 1.0)
        np.testing.assert_array_equal(p["b"].data, 0.0)
        assert state.step == 5

    def test_non_finite_rejected_without_side_effects(self):
        p = self._params()
        state = OptimState()
        g = {"a": np.ones((2, 3)), "b": np.array([1.0, np.nan, 0.0, 0.0])}
        with pytest.raises(NonFiniteGradient) as err:
            adam_step(p, g, state, lr=0.1)
        assert err.value.param == "b" and "b" in str(err.value)
        assert state.step == 0 and not state.m
        np.testing.assert_array_equal(p["a"].data, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="a"):
            adam_step(self._params(), {"a": np.ones(3)}, OptimState(), lr=0.1)

    def test_deterministic_trajectory(self):
        runs = []
        for _ in range(2):
            p = self._params()
            state = OptimState()
            rng = np.random.default_rng(0)
            for _ in range(20):
                adam_step(p, {k: rng.normal(size=v.shape) for k, v in p.items()}, state, lr=0.05)
            runs.append(_hash(p))
        assert runs[0] == runs[1]

    def test_clip_by_global_norm(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(np.sqrt(sum((v**2).sum() for v in g.values())), 1.0)
        g = {"a": np.array([0.3])}
        clip_by_global_norm(g, 1.0)
        np.testing.assert_array_equal(g["a"], [0.3])


class TestPretrain:
    def test_loss_trace_deterministic(self, cfg, bundle):
        _, data = bundle
        traces, hashes = [], []
        for _ in range(2):
            params = M.init_params(cfg, 0)
            state, trace = pretrain(params, cfg, TCFG, data, steps=8)
            traces.append([b.total for b in trace])
            hashes.append(_hash(params))
        assert traces[0] == traces[1] and hashes[0] == hashes[1]
        assert state.step == 8

    def test_breakdown_consistent(self, cfg, bundle):
        _, data = bundle
        _, trace = pretrain(M.init_params(cfg, 0), cfg, TCFG, data, steps=3)
        for b in trace:
            assert b.umlm_half >= 0 and b.umlm_full >= 0 and b.uctc >= 0
            assert abs(b.total - (b.umlm_half + b.umlm_full + b.lam * b.uctc)) < 1e-5 * max(1.0, b.total)

    def test_lambda_zero_matches_speech_only(self, cfg, bundle):
        _, data = bundle
        params = M.init_params(cfg, 0)
        speech, text = data.pretrain_speech[:3], data.pretrain_text[:3]
        grads = {}
        for name, tcfg in (
            ("joint", dataclasses.replace(TCFG, lam=0.0, swap=False)),
            ("speech", dataclasses.replace(TCFG, lam=0.0, swap=False, text=False)),
        ):
            with Tape() as tape:
                total, parts = pretrain_loss(params, cfg, tcfg, speech, text, step=1)
            grads[name] = tape.gradient(total, params)
        for k in params:
            np.testing.assert_array_equal(grads["joint"][k], grads["speech"][k], err_msg=k)
        for k in params:
            if k.startswith("ctc."):
                np.testing.assert_array_equal(grads["joint"][k], 0.0)

    def test_text_loss_reaches_ctc_head(self, cfg, bundle):
        _, data = bundle
        params = M.init_params(cfg, 0)
        with Tape() as tape:
            total, parts = pretrain_loss(params, cfg, TCFG, data.pretrain_speech[:2], data.pretrain_text[:2], 1)
        g = tape.gradient(total, params)
        assert parts["uctc"] > 0 and np.any(g["ctc.out.w"] != 0)

    def test_swap_disabled(self, cfg, bundle):
        _, data = bundle
        params = M.init_params(cfg, 0)
        tcfg = dataclasses.replace(TCFG, swap=False)
        _, parts = pretrain_loss(params, cfg, tcfg, data.pretrain_speech[:3], None, step=2)
        fwd = parts["forward"]
        assert not fwd.swapped.any() and fwd.masked.any()
        np.testing.assert_array_equal(fwd.h_shared_in.data, fwd.h_half.data)

    def test_variant_mismatch(self, cfg, bundle):
        _, data = bundle
        with pytest.raises(ValueError, match="variant"):
            pretrain(M.init_params(cfg, 0), cfg, dataclasses.replace(TCFG, variant="H"), data, steps=1)
        wrong = dataclasses.replace(cfg, n_units=cfg.n_units + 1)
        with pytest.raises(ValueError, match="unit classes"):
            pretrain(M.init_params(wrong, 0), wrong, TCFG, data, steps=1)

    def test_sample_batch_without_replacement(self):
        out = sample_batch(list(range(5)), 10, np.random.default_rng(0))
        assert sorted(out) == list(range(5))


class TestFinetune:
    def test_frozen_parameters_unchanged(self, cfg, bundle):
        lang, data = bundle
        params = M.init_params(cfg, 0)
        frozen = [k for k in params if k.startswith(FROZEN_PREFIXES)]
        assert frozen and not set(frozen) & set(finetune_trainable(params))
        before = _hash(params, frozen)
        moving = _hash(params, list(finetune_trainable(params)))
        finetune(params, cfg, TCFG, data, lang.chars)
        assert _hash(params, frozen) == before
        assert _hash(params, list(finetune_trainable(params))) != moving

    def test_deterministic(self, cfg, bundle):
        lang, data = bundle
        out = []
        for _ in range(2):
            params = M.init_params(cfg, 0)
            _, trace, best = finetune(params, cfg, TCFG, data, lang.chars)
            out.append((trace, best, _hash(params)))
        assert out[0] == out[1]

    def test_selects_best_dev(self, cfg, bundle):
        lang, data = bundle
        seen = []
        params = M.init_params(cfg, 0)
        _, _, best = finetune(params, cfg, TCFG, data, lang.chars, on_eval=lambda s, m: seen.append((s, m["PER"])))
        assert [s for s, _ in seen] == [3, 6]
        assert best["PER"] == min(p for _, p in seen)
        assert evaluate(params, cfg, data.dev, lang.chars, with_units=False)["PER"] == best["PER"]

    def test_masking_forced_off(self, cfg, bundle, monkeypatch):
        from speechlm import training

        _, data = bundle
        seen = []
        orig = training.speech_forward

        def spy(*args, **kwargs):
            fwd = orig(*args, **kwargs)
            seen.append((fwd.masked.any(), fwd.swapped.any()))
            return fwd

        monkeypatch.setattr(training, "speech_forward", spy)
        params = M.init_params(cfg, 0)
        finetune_step(params, cfg, TCFG, data.finetune[:3], OptimState(), Schedule(1e-3, 1, 10))
        assert seen == [(False, False)]

    def test_too_short_items_skipped(self, cfg, bundle):
        _, data = bundle
        item = data.finetune[0]
        short = SpeechItem(item.features[:3], item.units[:3], item.chars, item.transcript, item.uid)
        params = M.init_params(cfg, 0)
        loss, skipped = finetune_step(params, cfg, TCFG, [short, data.finetune[1]], OptimState(), Schedule(1e-3, 1, 10))
        assert skipped == 1 and np.isfinite(loss)
        loss, skipped = finetune_step(params, cfg, TCFG, [short], OptimState(), Schedule(1e-3, 1, 10))
        assert skipped == 1 and np.isnan(loss)

    def test_overfits_one_batch(self):
        # tiny alphabet, short clean utterances: CTC loss per character must go below 0.05
        rng = np.random.default_rng(0)
        protos = rng.normal(0, 3, size=(3, 4))
        items = []
        for i, chars in enumerate(([1, 2], [2, 1, 2], [1, 1])):
            frames = np.repeat(protos[chars], 4, axis=0) + rng.normal(0, 0.1, size=(4 * len(chars), 4))
            items.append(SpeechItem(frames, np.zeros(len(frames), np.int64), np.array(chars), "", i))
        mcfg = M.ModelConfig(n_units=2, n_chars=3, feat_dim=4, layers=2, d_model=16, heads=2, ffn=32)
        params = M.init_params(mcfg, 0)
        state = OptimState()
        sched = Schedule(5e-3, 10, 400)
        for _ in range(300):
            loss, _ = finetune_step(params, mcfg, TCFG, items, state, sched)
        assert loss < 0.05


class TestMetrics:
    def test_wer_examples(self):
        assert wer(["ab c"], ["ab c"]) == 0.0
        assert wer(["ab c"], ["ab"]) == 0.5

    def test_cer_example(self):
        assert cer(["abc"], ["axc"]) == pytest.approx(1 / 3)

    def test_edit_distance(self):
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance("", "abc") == 3

    def test_corpus_level(self):
        assert error_rate([[1, 2], [3, 4, 5, 6]], [[1, 2], []]) == pytest.approx(4 / 6)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            error_rate([], [])
        with pytest.raises(ValueError):
            error_rate([[]], [[1]])

    def test_evaluate_pure_and_rejects_empty(self, cfg, bundle):
        lang, data = bundle
        params = M.init_params(cfg, 0)
        a = evaluate(params, cfg, data.dev, lang.chars)
        b = evaluate(params, cfg, data.dev, lang.chars)
        assert a == b and set(a) >= {"PER", "WER", "masked_unit_acc"}
        with pytest.raises(ValueError):
            evaluate(params, cfg, [], lang.chars)


class TestProbe:
    def test_random_init_near_orthogonal(self, bundle):
        lang, data = bundle
        cfg = M.ModelConfig(n_units=data.n_units, n_chars=lang.chars.size)
        res = alignment_probe(M.init_params(cfg, 0), cfg, data.paired[:8])
        assert res.layers == [2, 3, 4]
        assert np.all(np.abs(res.emb_cosine) < 0.1)

    def test_chance_threshold_monte_carlo(self):
        # cosine of independent random 64-d vectors concentrates well inside 0.1 when averaged
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 2000, 64))
        cos = (a * b).sum(-1) / np.linalg.norm(a, axis=-1) / np.linalg.norm(b, axis=-1)
        assert abs(cos.mean()) < 0.01 and cos.std() < 0.2

    def test_full_swap_probe_is_one(self, cfg, bundle):
        _, data = bundle
        res = alignment_probe(M.init_params(cfg, 0), cfg, data.paired[:4], swap_prob=1.0)
        assert res.emb_cosine[0] == pytest.approx(1.0, abs=1e-6)

    def test_projection_table(self, cfg, bundle, tmp_path):
        _, data = bundle
        res = alignment_probe(M.init_params(cfg, 0), cfg, data.paired[:4], n_points=30)
        assert len(res.projection) == 2 * 30 * len(res.layers)
        path = tmp_path / "probe.tsv"
        res.write(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer\tmodality\tx\ty" and len(lines) == 1 + len(res.projection)

    def test_pca_matches_svd_variance(self):
        pts = np.random.default_rng(0).normal(size=(50, 5)) * [5, 3, 1, 0.5, 0.1]
        xy = pca_2d(pts)
        sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
        np.testing.assert_allclose((xy**2).sum(0), sv[:2] ** 2, rtol=1e-10)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, cfg, bundle, tmp_path):
        _, data = bundle
        params = M.init_params(cfg, 0)
        state, _ = pretrain(params, cfg, TCFG, data, steps=2)
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, TCFG, params, state)
        ck = load_checkpoint(path, expect=M.init_params(cfg, 1))
        assert ck.model == cfg and ck.train == TCFG and ck.state.step == 2
        for k, v in params.items():
            assert ck.params[k].data.tobytes() == v.data.tobytes()
            assert ck.state.m[k].tobytes() == state.m[k].tobytes()
            assert ck.state.v[k].tobytes() == state.v[k].tobytes()
        again = tmp_path / "b.ckpt"
        save_checkpoint(again, ck.model, ck.train, ck.params, ck.state)
        assert again.read_bytes() == path.read_bytes()

    def test_resume_reproduces_trace(self, cfg, bundle, tmp_path):
        _, data = bundle
        params = M.init_params(cfg, 0)
        _, full = pretrain(params, cfg, TCFG, data, steps=14)
        params = M.init_params(cfg, 0)
        state, _ = pretrain(params, cfg, TCFG, data, steps=4)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(path, cfg, TCFG, params, state)
        ck = load_checkpoint(path)
        _, rest = pretrain(ck.params, ck.model, ck.train, data, state=ck.state, steps=14)
        assert [b.total for b in rest] == [b.total for b in full[4:]]

    def test_mismatched_config_names_parameter(self, cfg, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, TCFG, M.init_params(cfg, 0), OptimState())
        bigger = dataclasses.replace(cfg, n_units=cfg.n_units + 2)
        with pytest.raises(CheckpointError, match="unit_emb"):
            load_checkpoint(path, expect=M.init_params(bigger, 0))
        deeper = dataclasses.replace(cfg, layers=6)
        with pytest.raises(CheckpointError, match="speech.2"):
            load_checkpoint(path, expect=M.init_params(deeper, 0))

    def test_bad_magic_and_truncation(self, cfg, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, TCFG, M.init_params(cfg, 0), OptimState())
        raw = path.read_bytes()
        (tmp_path / "v2.ckpt").write_bytes(b"SPLM-CK2" + raw[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "v2.ckpt")
        (tmp_path / "cut.ckpt").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_header_layout(self, cfg, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, TCFG, M.init_params(cfg, 0), OptimState())
        raw = path.read_bytes()
        n = int(np.frombuffer(raw[8:12], "<u4")[0])
        block = raw[12 : 12 + n].decode()
        assert "model.d_model=16\n" in block and "train.variant='P'\n" in block and "state.step=0\n" in block

    def test_unknown_key_rejected(self, cfg, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, TCFG, M.init_params(cfg, 0), OptimState())
        text, arrays = read_blob(path)
        write_blob(path, text + "model.bogus=1\n", list(arrays.items()))
        with pytest.raises(CheckpointError, match="model.bogus"):
            load_checkpoint(path)


class TestMetricsLog:
    def test_format_and_read(self, tmp_path):
        path = tmp_path / "metrics.tsv"
        log = MetricsLog(path)
        log.log(25, "dev", {"PER": 0.25, "WER": 0.5})
        log.log(50, "test", {"PER": 0.125})
        assert path.read_text().splitlines()[0] == "25\tdev\tPER\t0.25"
        assert MetricsLog.read(path) == [(25, "dev", "PER", 0.25), (25, "dev", "WER", 0.5), (50, "test", "PER", 0.125)]
