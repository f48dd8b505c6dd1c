import csv
import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from mrccs import checkpoint as ckpt
from mrccs.errors import ConfigError, DataError, NumericError
from mrccs.nn_core import param_store
from mrccs.reconstruction import ReconstructionOutput
from mrccs.train import (ABLATION_VARIANTS, FixedPatches, RandomCrops, TrainConfig, ablation_matrix, evaluate,
                         evaluate_checkpoint, load_model, loss_deep, loss_initial, loss_terms, loss_total,
                         ratio_label, reconstruct_image, train)

TINY = dict(ratio="1/4", channels=4, num_blocks=1, features=4, epochs=2, steps_per_epoch=2,
            batch_size=2, patch_size=16, checkpoint_every=1)


class Stub(nn.Module):
    """Returns fixed functions of x as (initial, refined)."""

    def __init__(self, initial, refined, multiple=1):
        super().__init__()
        self.initial_fn, self.refined_fn = initial, refined
        self.config = SimpleNamespace(size_multiple=multiple)

    def forward(self, x):
        return ReconstructionOutput(None, self.initial_fn(x), self.refined_fn(x))


def patches(n=4, size=16, seed=0):
    return torch.rand(n, 1, size, size, generator=torch.Generator().manual_seed(seed))


class TestLosses:
    def test_perfect_reconstruction_zero(self):
        x = patches()
        model = Stub(lambda v: v.clone(), lambda v: v.clone())
        assert loss_initial(model, x) == 0 and loss_deep(model, x) == 0 and loss_total(model, x) == 0

    def test_zero_initial_gives_squared_norm(self):
        x = torch.zeros(1, 1, 16, 16)
        x.view(-1)[:9] = 1.0
        model = Stub(torch.zeros_like, lambda v: v)
        assert float(loss_initial(model, x)) == 9.0

    def test_constant_offset(self):
        x = patches(3)
        c = 0.25
        model = Stub(lambda v: v, lambda v: v + c)
        assert float(loss_deep(model, x)) == pytest.approx(3 * c**2 * 16 * 16, rel=1e-6)

    def test_duplicated_batch_doubles(self):
        x = patches(2)
        model = Stub(torch.zeros_like, lambda v: 0.5 * v)
        single = float(loss_total(model, x))
        assert float(loss_total(model, torch.cat([x, x]))) == pytest.approx(2 * single, rel=1e-6)

    def test_components_add(self):
        x = torch.zeros(1, 1, 1, 4)
        model = Stub(lambda v: v + math.sqrt(1.5 / 4), lambda v: v + math.sqrt(2.5 / 4))
        l_int, l_deep = loss_terms(model, x)
        assert float(loss_total(model, x)) == pytest.approx(4.0, rel=1e-6)
        assert float(l_int) == pytest.approx(1.5, rel=1e-6) and float(l_deep) == pytest.approx(2.5, rel=1e-6)

    def test_total_is_bitwise_sum(self):
        from mrccs.reconstruction import build_model
        model = build_model(TrainConfig(**TINY).model_config(), 0)
        x = patches()
        l_int, l_deep = loss_terms(model, x)
        assert torch.equal(loss_total(model, x), l_deep + l_int)

    def test_every_group_gets_gradient(self):
        from mrccs.reconstruction import build_model
        model = build_model(TrainConfig(**TINY).model_config(), 0)
        loss_deep(model, patches()).backward()
        for group in ("sensor", "initial", "deep"):
            grads = [p.grad for n, p in model.named_parameters() if n.startswith(group)]
            assert all(g is not None for g in grads)
            assert any(torch.count_nonzero(g) > 0 for g in grads), group


class TestTrain:
    def test_deterministic(self, tmp_path):
        cfg = TrainConfig(**TINY)
        a = train(cfg, FixedPatches(patches(), 2), tmp_path / "a")
        b = train(cfg, FixedPatches(patches(), 2), tmp_path / "b")
        assert a.log[-1].loss == b.log[-1].loss
        assert (tmp_path / "a" / "final.mrcc").read_bytes() == (tmp_path / "b" / "final.mrcc").read_bytes()

    def test_outputs(self, tmp_path):
        result = train(TrainConfig(**TINY), FixedPatches(patches(), 2), tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["epoch_0001.mrcc", "epoch_0002.mrcc", "final.mrcc", "train_log.csv"]
        rows = list(csv.reader(open(tmp_path / "train_log.csv")))
        assert rows[0] == ["epoch", "step", "loss", "lr"] and len(rows) == 3
        assert [int(r[1]) for r in rows[1:]] == [2, 4]
        assert result.checkpoints[-1] == tmp_path / "final.mrcc"

    def test_loss_decreases(self):
        cfg = dataclasses.replace(TrainConfig(**TINY), epochs=1, steps_per_epoch=200)
        x = patches(2)
        from mrccs.reconstruction import build_model
        with torch.no_grad():
            before = loss_total(build_model(cfg.model_config(), cfg.seed), x).item()
        result = train(cfg, FixedPatches(x, 2))
        with torch.no_grad():
            assert loss_total(result.model, x).item() < before

    def test_lr_log_quarters(self):
        cfg = dataclasses.replace(TrainConfig(**TINY), epochs=200, steps_per_epoch=1, batch_size=1,
                                  patch_size=8, channels=4, ratio="1/2")
        result = train(cfg, FixedPatches(patches(1, 8), 1))
        lrs = [r.lr for r in result.log]
        changes = [e for e in range(1, 200) if lrs[e] != lrs[e - 1]]
        assert changes == [60, 90, 120, 150, 180]
        for e in changes:
            assert lrs[e] == lrs[e - 1] / 4

    def test_nan_aborts_with_checkpoint(self, tmp_path):
        cfg = dataclasses.replace(TrainConfig(**TINY), epochs=3)
        good = patches()

        def source(step):
            return good[:2] if step < 4 else torch.full((2, 1, 16, 16), math.nan)

        with pytest.raises(NumericError) as err:
            train(cfg, source, tmp_path)
        assert err.value.last_checkpoint == tmp_path / "epoch_0002.mrcc"

    def test_random_crops_pure(self):
        ims = [torch.rand(1, 40, 40)]
        src = RandomCrops(ims, 3, 2, 16)
        assert torch.equal(src(5), src(5)) and not torch.equal(src(5), src(6))

    def test_fixed_patches_cycle(self):
        x = patches(4)
        src = FixedPatches(x, 2)
        assert torch.equal(src(0), x[:2]) and torch.equal(src(1), x[2:]) and torch.equal(src(2), x[:2])
        with pytest.raises(ConfigError):
            FixedPatches(patches(3), 2)


class TestConfig:
    def test_ratio_normalized(self):
        assert TrainConfig(ratio="25%").ratio == "1/4"
        assert ratio_label("1/64") == "1.5625%"

    def test_round_trip(self):
        cfg = TrainConfig(**TINY)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("field", ["epochs", "batch_size", "steps_per_epoch"])
    def test_positive(self, field):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: 0})


class TestCheckpoint:
    def test_bit_identical_forward(self, tmp_path):
        result = train(TrainConfig(**TINY), FixedPatches(patches(), 2), tmp_path)
        model, cfg = load_model(tmp_path / "final.mrcc")
        assert cfg == TrainConfig(**TINY)
        probe = patches(1, 16, seed=9)
        with torch.no_grad():
            assert torch.equal(model(probe).refined, result.model(probe).refined)
        for (n1, p1), (n2, p2) in zip(param_store(model).items(), param_store(result.model).items()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_corruption_detected(self, tmp_path):
        result = train(TrainConfig(**TINY), FixedPatches(patches(), 2), tmp_path)
        data = bytearray(result.checkpoints[-1].read_bytes())
        data[100] ^= 0xFF
        with pytest.raises(DataError, match="checksum"):
            ckpt.decode_container(bytes(data), ckpt.CHECKPOINT_MAGIC)
        with pytest.raises(DataError, match="magic"):
            ckpt.decode_container(bytes(data), ckpt.MEASUREMENTS_MAGIC)

    def test_container_layout(self):
        blob = ckpt.encode_container(b"MRMS", {"a": 1}, {"w": torch.arange(6.0).reshape(2, 3)})
        assert blob[:4] == b"MRMS" and int.from_bytes(blob[4:6], "little") == 1
        header, records = ckpt.decode_container(blob, b"MRMS")
        assert header == {"a": 1}
        np.testing.assert_array_equal(records["w"], np.arange(6.0).reshape(2, 3))
        assert len(blob) == 4 + 2 + 4 + 7 + 4 + (2 + 1 + 1 + 8 + 24) + 32


class TestEvaluate:
    def test_identity_cheat(self, tmp_path):
        model = Stub(lambda v: v, lambda v: v.clone())
        images = [(f"im{i}.png", torch.rand(1, 24, 24)) for i in range(3)]
        report = evaluate(model, images, "Set5", "25%", "cheat", tmp_path)
        assert len(report.rows) == 3
        assert all(r.psnr == math.inf and r.ssim == 1.0 for r in report.rows)
        assert sorted(p.name for p in (tmp_path / "recon").iterdir()) == ["im0.png", "im1.png", "im2.png"]
        assert (tmp_path / "metrics.csv").read_text().startswith("dataset,image,ratio,variant,psnr_db,ssim\n")

    def test_mean_is_arithmetic(self):
        model = Stub(lambda v: v, lambda v: v * 0.9)
        images = [(f"im{i}", torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(i))) for i in range(4)]
        report = evaluate(model, images, "Set5", "25%", "v")
        assert abs(report.mean_psnr - sum(r.psnr for r in report.rows) / 4) <= 1e-9

    def test_ratio_mismatch(self, tmp_path):
        train(TrainConfig(**TINY), FixedPatches(patches(), 2), tmp_path)
        with pytest.raises(ConfigError, match="ratio"):
            evaluate_checkpoint(tmp_path / "final.mrcc", [("a", torch.rand(1, 16, 16))], "Set5", ratio="1/8")
        report = evaluate_checkpoint(tmp_path / "final.mrcc", [("a", torch.rand(1, 16, 16))], "Set5", ratio="25%")
        assert report.rows[0].ratio == "25%"

    def test_reconstruct_any_size(self):
        from mrccs.reconstruction import build_model
        model = build_model(TrainConfig(**TINY).model_config(), 0)
        assert reconstruct_image(model, torch.rand(1, 21, 19)).shape == (1, 21, 19)


def test_ablation_matrix(tmp_path):
    base = dataclasses.replace(TrainConfig(**TINY), epochs=1, steps_per_epoch=1)
    ims = [torch.rand(1, 32, 32, generator=torch.Generator().manual_seed(i)) for i in range(2)]
    tests = [("t.png", torch.rand(1, 16, 16))]
    cells = ablation_matrix(base, ims, tests, "Set5", tmp_path / "a")
    assert len(cells) == 4 * 6
    rows = list(csv.reader(open(tmp_path / "a" / "ablation.csv")))
    assert len(rows) == 1 + 4 and all(len(r) == 3 + 6 * 2 for r in rows)
    assert [r[0] for r in rows[1:]] == [v[0] for v in ABLATION_VARIANTS]
    assert rows[1][1:3] == ["0", "0"] and rows[4][1:3] == ["1", "1"]
    for c in cells:
        assert (tmp_path / "a" / c.checkpoint).is_file()
    ablation_matrix(base, ims, tests, "Set5", tmp_path / "b")
    for name in ("ablation.csv", "ablation_cells.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
