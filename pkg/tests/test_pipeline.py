import json
import math
import os

import numpy as np
import pytest
import torch

import molm3d.pipeline as pipeline
from conftest import SPAN_PROMPT, micro_system_config
from molm3d.errors import (
    DigestMismatch,
    EmptyInput,
    FrozenViolation,
    InvalidSchedule,
    MissingCheckpoint,
    NoDatasets,
    VersionUnsupported,
)
from molm3d.evalsuite import QAPair, qa_report
from molm3d.pipeline import (
    Example,
    MixtureSampler,
    StageConfig,
    default_stage_config,
    fourth_root_probs,
    load_checkpoint,
    lr_at,
    pretrain_lm,
    read_manifest,
    run_stage1,
    run_stage2,
    run_stage3,
    save_checkpoint,
)
from molm3d.synthetic import random_molecules
from molm3d.system import MoLM
from molm3d.textlm import LoraConfig, base_state, trainable_fraction


def micro_pairs(n=6, seed=0):
    mols, texts = random_molecules(n, seed=seed, max_atoms=6, style="formula")
    return list(zip(mols, texts))


def micro_examples(n=4, seed=1):
    mols, _ = random_molecules(n, seed=seed, max_atoms=5)
    return [Example(m, "d?", f"r{i}") for i, m in enumerate(mols)]


def stage1_cfg(**kw):
    return StageConfig(**{"stage": 1, "max_steps": 4, "warmup_steps": 1, "batch_size": 4,
                          "peak_lr": 1e-3, **kw})


def stage2_cfg(**kw):
    return StageConfig(**{"stage": 2, "max_steps": 4, "warmup_steps": 1, "batch_size": 2,
                          "peak_lr": 1e-3, **kw})


class TestStageConfig:
    def test_defaults(self):
        cfg = StageConfig()
        assert (cfg.peak_lr, cfg.min_lr, cfg.weight_decay, cfg.warmup_steps) == (
            1e-4, 5e-6, 0.05, 1000)
        assert default_stage_config(2, finetune=True).warmup_steps == 200
        assert default_stage_config(1).warmup_steps == 1000

    def test_min_above_peak(self):
        with pytest.raises(InvalidSchedule):
            StageConfig(peak_lr=1e-5, min_lr=1e-4)

    def test_epoch_budget(self):
        cfg = StageConfig(epochs=3, batch_size=4, grad_accum=2)
        assert cfg.total_steps(17) == 3 * math.ceil(17 / 8)
        with pytest.raises(ValueError):
            StageConfig().total_steps(10)


class TestSchedule:
    cfg = StageConfig()

    def test_reference_points(self):
        assert lr_at(0, 10_000, self.cfg) == 0.0
        assert lr_at(1000, 10_000, self.cfg) == 1e-4
        assert lr_at(10_000, 10_000, self.cfg) == 5e-6

    def test_continuous_at_warmup(self):
        before = lr_at(999, 10_000, self.cfg)
        assert abs(lr_at(1000, 10_000, self.cfg) - before) < 1e-4 / 999

    def test_formula(self):
        rng = np.random.default_rng(0)
        for step in rng.integers(0, 10_001, 50):
            step = int(step)
            if step < 1000:
                expected = 1e-4 * step / 1000
            else:
                expected = 5e-6 + 0.5 * (1e-4 - 5e-6) * (
                    1 + math.cos(math.pi * (step - 1000) / 9000))
            assert lr_at(step, 10_000, self.cfg) == pytest.approx(expected, rel=1e-12, abs=1e-20)

    def test_monotone_decay(self):
        lrs = [lr_at(s, 5000, self.cfg) for s in range(1000, 5001, 50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_invalid(self):
        with pytest.raises(InvalidSchedule):
            lr_at(0, 1000, self.cfg)
        with pytest.raises(InvalidSchedule):
            lr_at(10_001, 10_000, self.cfg)
        with pytest.raises(InvalidSchedule):
            lr_at(-1, 10_000, self.cfg)


class TestFourthRoot:
    def test_examples(self):
        assert np.allclose(fourth_root_probs([10000, 625]), [2 / 3, 1 / 3], atol=1e-12)
        assert np.allclose(fourth_root_probs([7, 7, 7, 7]), [0.25] * 4, atol=1e-12)
        assert fourth_root_probs([42]).tolist() == [1.0]

    def test_sums_to_one_and_scale_covariant(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            sizes = rng.integers(1, 10_000, rng.integers(1, 6))
            p = fourth_root_probs(sizes)
            assert abs(p.sum() - 1) < 1e-12
            assert np.max(np.abs(fourth_root_probs(sizes * 37) - p)) < 1e-12

    def test_empty(self):
        with pytest.raises(EmptyInput):
            fourth_root_probs([])

    def test_sampler_frequencies(self):
        draws = MixtureSampler([16, 256], seed=0).draw(100_000)
        freq = np.bincount(draws, minlength=2) / len(draws)
        assert np.all(np.abs(freq - [1 / 3, 2 / 3]) < 0.02)

    def test_sampler_seeded(self):
        a = MixtureSampler([3, 5, 8], seed=4).draw(50)
        assert np.array_equal(a, MixtureSampler([3, 5, 8], seed=4).draw(50))


class TestStage1:
    def test_requires_frozen_encoder(self):
        system = MoLM(micro_system_config())
        for p in system.encoder.parameters():
            p.requires_grad_(True)
        system.encoder.frozen = False
        with pytest.raises(FrozenViolation):
            run_stage1(system, micro_pairs(), stage1_cfg())

    def test_deterministic(self):
        runs = [run_stage1(MoLM(micro_system_config(1)), micro_pairs(), stage1_cfg(seed=5))
                for _ in range(2)]
        assert runs[0].losses == runs[1].losses

    def test_trains_only_projector_and_heads(self):
        system = MoLM(micro_system_config())
        before = {k: v.clone() for k, v in system.state_dict().items()}
        run_stage1(system, micro_pairs(), stage1_cfg())
        after = system.state_dict()
        for k in before:
            changed = not torch.equal(before[k], after[k])
            if k.startswith(("encoder.", "lm.", "mol_adapter.")):
                assert not changed, k
        assert any(not torch.equal(before[k], after[k]) for k in before
                   if k.startswith("projector."))

    def test_frozen_violation_is_raised(self, monkeypatch):
        system = MoLM(micro_system_config())
        real = pipeline.stage1_losses

        def tampering(*args, **kw):
            with torch.no_grad():
                system.encoder.embed.weight[0, 0] += 1e-3
            return real(*args, **kw)

        monkeypatch.setattr(pipeline, "stage1_losses", tampering)
        with pytest.raises(FrozenViolation):
            run_stage1(system, micro_pairs(), stage1_cfg())

    def test_grad_accumulation(self):
        system = MoLM(micro_system_config())
        result = run_stage1(system, micro_pairs(), stage1_cfg(grad_accum=2))
        assert len(result.losses) == 4 and all(math.isfinite(v) for v in result.losses)

    def test_too_few_pairs(self):
        with pytest.raises(EmptyInput):
            run_stage1(MoLM(micro_system_config()), micro_pairs()[:1], stage1_cfg())

    def test_outputs(self, tmp_path):
        system = MoLM(micro_system_config())
        result = run_stage1(system, micro_pairs(), stage1_cfg(), out_dir=str(tmp_path))
        lines = (tmp_path / "loss_log.csv").read_text().splitlines()
        assert lines[0].startswith("step,lr,loss") and len(lines) == 5
        assert read_manifest(result.checkpoint)["stage"] == 1


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        system = MoLM(micro_system_config(2))
        system.ensure_lora(LoraConfig(r=2))
        system.freeze_base_lm()
        with torch.no_grad():
            for n, p in system.lm.named_parameters():
                if "lora_B" in n:
                    p.normal_()
        path = save_checkpoint(str(tmp_path / "ck"), system, stage=2, step=7, seed=3,
                               stage_cfg=stage2_cfg(), metrics={"final_loss": 0.5})
        return system, path

    def test_round_trip(self, saved):
        system, path = saved
        manifest, loaded = load_checkpoint(path)
        assert (manifest["stage"], manifest["step"], manifest["seed"]) == (2, 7, 3)
        assert manifest["format_version"] == 1
        assert sorted(manifest["blobs"]) == sorted(pipeline.BLOB_NAMES)
        own = system.state_dict()
        for k, v in loaded.state_dict().items():
            assert torch.equal(v, own[k]), k
        system.eval()
        m = micro_examples(1)[0].mol
        assert system.generate(m, "d?", max_new=6) == loaded.generate(m, "d?", max_new=6)

    def test_manifest_tamper(self, saved):
        _, path = saved
        fp = os.path.join(path, "manifest.json")
        manifest = json.load(open(fp, encoding="utf-8"))
        manifest["config"]["stage"]["peak_lr"] = 1.0
        json.dump(manifest, open(fp, "w", encoding="utf-8"))
        with pytest.raises(DigestMismatch):
            load_checkpoint(path)

    def test_blob_tamper(self, saved):
        _, path = saved
        with open(os.path.join(path, "lm.bin"), "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(DigestMismatch):
            load_checkpoint(path)

    def test_version(self, saved):
        _, path = saved
        fp = os.path.join(path, "manifest.json")
        manifest = json.load(open(fp, encoding="utf-8"))
        manifest["format_version"] = 2
        json.dump(manifest, open(fp, "w", encoding="utf-8"))
        with pytest.raises(VersionUnsupported):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingCheckpoint):
            load_checkpoint(str(tmp_path / "nowhere"))


class TestStage2:
    def test_freeze_and_fraction(self):
        system = MoLM(micro_system_config())
        enc = {k: v.clone() for k, v in system.encoder.state_dict().items()}
        lm = {k: v.clone() for k, v in base_state(system.lm).items()}
        result = run_stage2(system, micro_examples(), stage2_cfg(), LoraConfig(r=2))
        assert 0 < trainable_fraction(system.lm) < 1
        for k, v in system.encoder.state_dict().items():
            assert torch.equal(v, enc[k])
        for k, v in base_state(system.lm).items():
            assert torch.equal(v, lm[k])
        assert len(result.losses) == 4

    def test_deterministic(self):
        runs = [run_stage2(MoLM(micro_system_config(3)), micro_examples(),
                           stage2_cfg(seed=2), LoraConfig(r=2, dropout=0.1))
                for _ in range(2)]
        assert runs[0].losses == runs[1].losses

    def test_frozen_violation_is_raised(self, monkeypatch):
        system = MoLM(micro_system_config())
        real = pipeline.conditional_lm_loss

        def tampering(*args, **kw):
            # through .data so autograd does not notice; only the freeze audit can
            system.lm.lm_head.weight.data[0, 0] += 1e-3
            return real(*args, **kw)

        monkeypatch.setattr(pipeline, "conditional_lm_loss", tampering)
        with pytest.raises(FrozenViolation):
            run_stage2(system, micro_examples(), stage2_cfg(), LoraConfig(r=2))

    def test_pretrain_after_lora_rejected(self):
        system = MoLM(micro_system_config())
        system.ensure_lora(LoraConfig(r=2))
        with pytest.raises(FrozenViolation):
            pretrain_lm(system.lm, ["abc"], steps=2)


class TestStage3:
    def test_no_datasets(self):
        with pytest.raises(NoDatasets):
            run_stage3(MoLM(micro_system_config()), {}, stage2_cfg(stage=3))

    def test_generalist_mixing(self, tmp_path):
        system = MoLM(micro_system_config())
        small, large = micro_examples(1, seed=2), micro_examples(16, seed=3)
        cfg = stage2_cfg(stage=3, max_steps=60, batch_size=1)
        result = run_stage3(system, {"small": small, "large": large}, cfg,
                            out_dir=str(tmp_path))
        log = json.load(open(tmp_path / "sampling_log.json", encoding="utf-8"))
        assert log["probs"] == pytest.approx([1 / 3, 2 / 3], abs=1e-12)
        assert sum(log["counts"].values()) == 60 == len(result.sampling_log)
        ref = MixtureSampler([1, 16], cfg.seed + 1).draw(60)
        assert [["small", "large"][i] for i in ref] == result.sampling_log

    def test_specialist_uses_single_dataset(self):
        system = MoLM(micro_system_config())
        result = run_stage3(system, [micro_examples()], stage2_cfg(stage=3))
        assert set(result.sampling_log) == {"dataset0"}

    def test_validation_best_so_far(self, span_ablation):
        for run in span_ablation["runs"].values():
            log = run["result"].val_log
            assert [r["step"] for r in log] == list(range(100, 801, 100))
            best = [r["best_val_loss"] for r in log]
            assert all(a >= b for a, b in zip(best, best[1:]))
            assert best == list(np.minimum.accumulate([r["val_loss"] for r in log]))
            kept = min(log, key=lambda r: r["val_loss"])["step"]
            assert run["result"].best_step == kept

    def test_stage3_from_stage2_checkpoint(self, span_ablation):
        assert read_manifest(span_ablation["stage2_dir"])["stage"] == 2
        ck = span_ablation["runs"]["both"]["result"].checkpoint
        manifest = read_manifest(ck)
        assert manifest["stage"] == 3 and manifest["metrics"]["best_step"] >= 100

    def test_specialist_beats_stage2_on_held_out(self, span_ablation):
        held = span_ablation["held"]
        _, stage2 = load_checkpoint(span_ablation["stage2_dir"])
        _, special = load_checkpoint(span_ablation["runs"]["both"]["result"].checkpoint)

        def report(system):
            return qa_report([QAPair(s, system.generate(m, SPAN_PROMPT, max_new=40), "A")
                              for m, s in held])

        before, after = report(stage2), report(special)
        assert after["valid_rate"] == 100.0 and after["valid_rate"] > before["valid_rate"]
        assert after["mae"] < 1.0
        assert before["mae"] is None or after["mae"] < before["mae"]
