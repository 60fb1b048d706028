"""Trainer: schedule, optimizer, checkpointing, determinism, loss trends."""

import numpy as np
import pytest

from anchorseg import tensor as T
from anchorseg.checkpoint import (
    CheckpointError, load_checkpoint, restore_params, save_checkpoint,
)
from anchorseg.instruct import CorpusSampler, MixerConfig
from anchorseg.synth import DatasetConfig, generate_dataset, load_manifest
from anchorseg.train import (
    AdamState, TrainConfig, build_model, build_vocabulary, config_from_kv,
    config_hash, config_to_kv, decay_excluded, lr_at, optimizer_step, train,
    train_step,
)


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


TINY = dict(total_iters=40, warmup_iters=5, train_per_category=12, eval_count=4,
            log_every=20)


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    cfg = TrainConfig(**TINY)
    from anchorseg.train import dataset_config
    generate_dataset(root, dataset_config(cfg))
    records = load_manifest(root / "manifest.tsv")
    vocab = build_vocabulary()
    return root, records, cfg, vocab


class TestSchedule:
    def test_zero_at_start(self):
        assert lr_at(0, TrainConfig()) == 0.0

    def test_peak_at_warmup_end(self):
        cfg = TrainConfig()
        assert lr_at(cfg.warmup_iters, cfg) == cfg.lr == 3e-4

    def test_half_at_midpoint_of_decay(self):
        cfg = TrainConfig(total_iters=2000)
        mid = (cfg.warmup_iters + cfg.total_iters) // 2
        assert abs(lr_at(mid, cfg) - cfg.lr / 2) < 1e-12

    def test_zero_after_total(self):
        cfg = TrainConfig(total_iters=500)
        assert lr_at(500, cfg) == 0.0
        assert lr_at(900, cfg) == 0.0

    def test_warmup_not_exceeding_total(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_iters=300, total_iters=200)


class TestOptimizer:
    def test_zero_grads_zero_decay_no_op(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = T.tensor([1.0, -2.0, 3.0], requires_grad=True)
        p.grad = np.zeros(3)
        state = AdamState({"p.weight": p})
        before = p.data.copy()
        optimizer_step({"p.weight": p}, state, lr=0.01, cfg=cfg)
        assert np.array_equal(p.data, before)

    def test_first_step_closed_form(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = T.tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0])
        state = AdamState({"p.weight": p})
        optimizer_step({"p.weight": p}, state, lr=0.01, cfg=cfg)
        # bias-corrected first step is lr * g / (|g| + eps) = lr to ~eps
        assert abs((1.0 - p.data[0]) - 0.01) < 1e-9

    def test_matches_reference_implementation(self):
        cfg = TrainConfig(weight_decay=0.01)
        rng = np.random.default_rng(0)
        p = T.tensor(rng.normal(size=(4, 3)), requires_grad=True)
        ref = p.data.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        state = AdamState({"w.weight": p})
        for t in range(1, 11):
            g = rng.normal(size=(4, 3))
            p.grad = g.copy()
            lr = 0.003 * t
            optimizer_step({"w.weight": p}, state, lr=lr, cfg=cfg)
            # hand-rolled AdamW oracle
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** t)
            vhat = v / (1 - cfg.beta2 ** t)
            ref = ref * (1 - lr * cfg.weight_decay)
            ref = ref - lr * mhat / (np.sqrt(vhat) + cfg.eps)
            assert np.max(np.abs(p.data - ref)) < 1e-12, t

    def test_nan_grad_hard_failure(self):
        from anchorseg.losses import NonFiniteLossError
        p = T.tensor([1.0], requires_grad=True)
        p.grad = np.array([float("nan")])
        with pytest.raises(NonFiniteLossError):
            optimizer_step({"p.weight": p}, AdamState({"p.weight": p}), 0.01, TrainConfig())

    def test_decay_exclusions(self):
        assert decay_excluded("lm.ln_f.bias")
        assert decay_excluded("lm.ln_f.gain")
        assert decay_excluded("decoder.queries")
        assert not decay_excluded("lm.head")
        assert not decay_excluded("spam.mha.q.weight")

    def test_decay_skipped_for_excluded_names(self):
        cfg = TrainConfig(weight_decay=0.5)
        w = T.tensor([1.0], requires_grad=True)
        b = T.tensor([1.0], requires_grad=True)
        w.grad = np.zeros(1)
        b.grad = np.zeros(1)
        params = {"x.weight": w, "x.bias": b}
        optimizer_step(params, AdamState(params), lr=0.1, cfg=cfg)
        assert w.data[0] == 1.0 - 0.1 * 0.5 * 1.0
        assert b.data[0] == 1.0


class TestConfigSerialization:
    def test_kv_round_trip(self):
        cfg = TrainConfig(lr=1e-3, total_iters=321, seen_categories=("mesh", "blobs"),
                          unseen_category="speckle", adapter_only=True)
        again = config_from_kv(config_to_kv(cfg))
        assert again == cfg

    def test_hash_distinguishes_configs(self):
        a = TrainConfig()
        b = TrainConfig(seed=1)
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(TrainConfig())


class TestCheckpoint:
    def test_save_load_bit_exact_forward(self, tiny_setup, tmp_path):
        root, records, cfg, vocab = tiny_setup
        model = build_model(cfg, vocab)
        rng = np.random.default_rng(1)
        image = rng.uniform(size=(64, 64))
        with T.no_grad():
            before = model.segment(image, "Please segment the anomalies in this image.")
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model.named_parameters(), 7, config_to_kv(cfg))
        # scramble, then restore
        for p in model.named_parameters().values():
            p.data += 0.123
        stored = load_checkpoint(path)
        assert stored["iteration"] == 7
        restore_params(model.named_parameters(), stored["params"])
        with T.no_grad():
            after = model.segment(image, "Please segment the anomalies in this image.")
        assert before.response == after.response
        assert np.array_equal(before.score_map(), after.score_map())

    def test_moment_round_trip(self, tiny_setup, tmp_path):
        root, records, cfg, vocab = tiny_setup
        model = build_model(cfg, vocab)
        params = model.trainable_parameters()
        state = AdamState(params)
        rng = np.random.default_rng(2)
        for p in params.values():
            p.grad = rng.normal(size=p.data.shape)
        optimizer_step(params, state, 1e-3, cfg)
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model.named_parameters(), 1, config_to_kv(cfg),
                        state.to_dict())
        stored = load_checkpoint(path)
        assert stored["opt_state"]["t"] == 1
        for name in params:
            assert np.array_equal(stored["opt_state"]["m"][name], state.m[name])
            assert np.array_equal(stored["opt_state"]["v"][name], state.v[name])

    def test_name_mismatch_rejected(self, tiny_setup, tmp_path):
        root, records, cfg, vocab = tiny_setup
        model = build_model(cfg, vocab)
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model.named_parameters(), 0, config_to_kv(cfg))
        stored = load_checkpoint(path)
        stored["params"].pop(next(iter(stored["params"])))
        with pytest.raises(CheckpointError):
            restore_params(model.named_parameters(), stored["params"])


class TestTrainStep:
    def test_vqa_only_batch_has_zero_seg_loss(self, tiny_setup):
        root, records, cfg, vocab = tiny_setup
        model = build_model(cfg, vocab)
        sampler = CorpusSampler(root, records, MixerConfig((0.0, 0.0, 0.0, 1.0), cfg.seed))
        params = model.trainable_parameters()
        state = AdamState(params)
        l_txt, l_seg, l_tot = train_step(model, sampler, 0, cfg, params, state)
        assert l_seg == 0.0
        assert l_tot == l_txt > 0.0

    def test_adapter_only_training_decreases_loss(self, tiny_setup):
        root, records, cfg, vocab = tiny_setup
        from dataclasses import replace
        acfg = replace(cfg, adapter_only=True, lr=3e-3)
        model = build_model(acfg, vocab)
        frozen_names = {k for k, p in model.named_parameters().items()
                        if not p.requires_grad}
        assert any(".attn." in n for n in frozen_names)
        params = model.trainable_parameters()
        assert any("lora" in n for n in params)
        frozen_before = {k: model.named_parameters()[k].data.copy() for k in frozen_names}
        sampler = CorpusSampler(root, records, MixerConfig(seed=acfg.seed))
        state = AdamState(params)
        losses = []
        for step in range(50):
            # fixed batch: always draw indices 0..batch-1
            l_txt, l_seg, l_tot = train_step(model, sampler, 0, acfg, params, state)
            losses.append(l_tot)
        assert losses[-1] < losses[0]
        for k in frozen_names:
            assert np.array_equal(model.named_parameters()[k].data, frozen_before[k]), k

    def test_loss_decreases_over_200_steps(self, tiny_setup):
        root, records, cfg, vocab = tiny_setup
        from dataclasses import replace
        tcfg = replace(cfg, total_iters=200, warmup_iters=20)
        model = build_model(tcfg, vocab)
        sampler = CorpusSampler(root, records, MixerConfig(seed=tcfg.seed))
        params = model.trainable_parameters()
        state = AdamState(params)
        losses = []
        for it in range(200):
            _, _, l_tot = train_step(model, sampler, it, tcfg, params, state)
            losses.append(l_tot)
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_identical_seeds_identical_trajectories(self, tiny_setup):
        root, records, cfg, vocab = tiny_setup

        def run():
            model = build_model(cfg, vocab)
            sampler = CorpusSampler(root, records, MixerConfig(seed=cfg.seed))
            params = model.trainable_parameters()
            state = AdamState(params)
            return [train_step(model, sampler, it, cfg, params, state) for it in range(5)]

        a = run()
        b = run()
        assert a == b  # bit-exact float triplets


class TestFullTrain:
    def test_run_dir_contains_artifacts(self, tiny_setup, tmp_path):
        root, records, cfg, vocab = tiny_setup
        run_dir = train(cfg, tmp_path / "runs", data_root=root, corpus_preview=20,
                        quiet=True)
        assert (run_dir / "checkpoint.bin").exists()
        assert (run_dir / "config.txt").exists()
        assert (run_dir / "vocab.txt").exists()
        assert (run_dir / "corpus.jsonl").exists()
        assert (run_dir / "train_log.txt").exists()
        assert config_hash(cfg) in run_dir.name
