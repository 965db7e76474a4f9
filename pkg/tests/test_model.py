import json

import numpy as np
import pytest

from mls.checkpoint import CheckpointError, TrainState, load_checkpoint, save_checkpoint
from mls.bank import DictBank
from mls.config import TrainConfig
from mls.model import Encoder, ModelConfig, ModelPair, ema_update
from mls.numkit import ShapeError, numeric_grad, rel_error, sgd_step

TINY = ModelConfig(view_size=8, channels=(4, 6, 8), d_g=8, d_z=4, mlp_hidden=10)


def views(rng, b, s=8):
    return rng.random((b, 3, s, s))


@pytest.fixture(params=["conv", "mlp"])
def pair(request):
    cfg = ModelConfig(backbone=request.param, view_size=8, channels=(4, 6, 8), d_g=8, d_z=4, mlp_hidden=10)
    return ModelPair.create(cfg, seed=1)


class TestForward:
    def test_single_row_shapes(self, pair, rng):
        g, z, _ = pair.encoder.forward(pair.online, views(rng, 1), stats=pair.online_stats)
        assert g.shape == (1, 8) and z.shape == (1, 4)

    def test_wrong_shape(self, pair, rng):
        with pytest.raises(ShapeError):
            pair.forward_online(rng.random((2, 3, 9, 9)))
        with pytest.raises(ShapeError):
            pair.forward_online(rng.random((2, 8, 8)))

    @pytest.mark.parametrize("training", [False, True])
    def test_duplicated_rows(self, pair, rng, training):
        x = views(rng, 3)
        x = np.concatenate([x, x[[1]]])
        g, z, _ = pair.forward_online(x, keep_cache=False, training=training)
        np.testing.assert_allclose(g[3], g[1], atol=1e-12)
        np.testing.assert_allclose(z[3], z[1], atol=1e-12)

    def test_inference_rows_independent(self, pair, rng):
        x = views(rng, 5)
        _, z_all, _ = pair.forward_online(x, keep_cache=False, training=False)
        _, z_one, _ = pair.forward_online(x[2:3], keep_cache=False, training=False)
        np.testing.assert_allclose(z_all[2], z_one[0], atol=1e-12)

    def test_momentum_equals_online_after_init(self, pair, rng):
        x = views(rng, 4)
        g1, z1, _ = pair.forward_online(x)
        g2, z2 = pair.forward_momentum(x)
        assert np.array_equal(g1, g2) and np.array_equal(z1, z2)

    def test_finite(self, pair, rng):
        g, z = pair.forward_momentum(views(rng, 6) * 10 - 5)
        assert np.isfinite(g).all() and np.isfinite(z).all()

    def test_training_updates_running_stats(self, pair, rng):
        before = {k: v.copy() for k, v in pair.online_stats.items()}
        pair.forward_online(views(rng, 4), keep_cache=False, training=False)
        assert all(np.array_equal(before[k], pair.online_stats[k]) for k in before)
        pair.forward_online(views(rng, 4), keep_cache=False, training=True)
        assert not np.array_equal(before["projector.bn.mean"], pair.online_stats["projector.bn.mean"])
        assert all(np.array_equal(before[k], pair.momentum_stats[k]) for k in before)

    def test_training_needs_two_rows(self, pair, rng):
        with pytest.raises(ShapeError):
            pair.forward_online(views(rng, 1), training=True)

    def test_backward_matches_fd(self, pair, rng):
        x = views(rng, 3)
        wg, wz = rng.normal(size=(3, 8)), rng.normal(size=(3, 4))

        def f():
            g, z, _ = pair.encoder.forward(pair.online, x, training=True)
            return float(np.sum(wg * g) + np.sum(wz * z))

        _, _, cache = pair.encoder.forward(pair.online, x, keep_cache=True, training=True)
        grads = pair.encoder.backward(pair.online, cache, wg, wz)
        assert set(grads) == set(pair.online)
        # a representative slice of every parameter
        for name, p in pair.online.items():
            idx = list(range(min(p.size, 3)))
            num = numeric_grad(f, p, indices=idx).reshape(-1)[idx]
            ana = grads[name].reshape(-1)[idx]
            assert rel_error(ana, num) < 1e-6, name

    def test_no_bias_under_output_norm(self):
        shapes = Encoder(TINY).param_shapes()
        assert "projector.fc1.b" not in shapes
        assert "projector.fc1.b" in Encoder(ModelConfig(projector_norm="none")).param_shapes()


class TestInit:
    def test_fan_in_uniform_and_zero_bias(self):
        enc = Encoder(ModelConfig())
        p = enc.init_params(0)
        for name, v in p.items():
            if name.endswith(".b") or name.endswith(".beta"):
                assert not v.any()
            elif name.endswith(".gamma"):
                assert np.all(v == 1)
            else:
                assert np.abs(v).max() <= np.sqrt(6.0 / v.shape[0])
        p2 = enc.init_params(0)
        assert all(np.array_equal(p[k], p2[k]) for k in p)

    def test_projector_shape(self):
        s = Encoder(ModelConfig(d_g=64, d_z=16)).param_shapes()
        assert s["projector.fc0.w"] == (64, 32) and s["projector.fc1.w"] == (32, 16)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ModelConfig(backbone="resnet")
        with pytest.raises(ValueError):
            ModelConfig(channels=(16, 32, 48), d_g=64)


class TestEMA:
    def test_paper_coefficient(self):
        m = {"w": np.zeros(1)}
        ema_update(m, {"w": np.ones(1)}, 0.995)
        assert m["w"][0] == pytest.approx(0.005, abs=1e-15)

    def test_zero_copies(self, rng):
        on = {"w": rng.normal(size=5)}
        m = {"w": rng.normal(size=5)}
        ema_update(m, on, 0.0)
        assert np.array_equal(m["w"], on["w"])

    def test_fixed_point_bitwise(self, rng):
        on = {"w": rng.normal(size=50)}
        m = {"w": on["w"].copy()}
        for mm in (0.3, 0.99, 0.999):
            ema_update(m, on, mm)
        assert np.array_equal(m["w"], on["w"])

    def test_one_is_noop(self, rng):
        m = {"w": rng.normal(size=3)}
        before = m["w"].copy()
        ema_update(m, {"w": rng.normal(size=3)}, 1.0)
        assert np.array_equal(m["w"], before)

    def test_contraction(self, rng):
        on = {"w": rng.normal(size=20)}
        m = {"w": rng.normal(size=20)}
        for _ in range(5):
            d0 = np.linalg.norm(m["w"] - on["w"])
            ema_update(m, on, 0.9)
            assert np.linalg.norm(m["w"] - on["w"]) == pytest.approx(0.9 * d0, rel=1e-12)

    def test_optimizer_never_touches_momentum(self, pair, rng):
        before = {k: v.copy() for k, v in pair.momentum.items()}
        x = views(rng, 3)
        g, z, cache = pair.forward_online(x)
        grads = pair.encoder.backward(pair.online, cache, np.ones_like(g), np.ones_like(z))
        for _ in range(3):
            sgd_step(pair.online, grads, {}, lr=0.1)
        assert all(np.array_equal(before[k], pair.momentum[k]) for k in before)

    def test_invalid_m(self):
        with pytest.raises(ValueError):
            ModelPair.create(TINY, 0, m=1.5)


def _state(cfg, rng):
    pair = ModelPair.create(cfg.model, cfg.seed, cfg.ema_m)
    bank = DictBank(cfg.bank_size, cfg.model.d_g, cfg.model.d_z)
    bank.enqueue(rng.normal(size=(16, cfg.model.d_g)), rng.normal(size=(16, cfg.model.d_z)),
                 list(range(16)), [(0, 0, 8, 8)] * 16, 0)
    velocity = {k: rng.normal(size=v.shape) for k, v in pair.online.items()}
    return TrainState(cfg, pair, velocity, bank, 7, ['{"step":0}'])


class TestCheckpoint:
    cfg = TrainConfig(batch_size=8, bank_size=32, precision="f64").with_overrides(
        scene={"dataset_size": 16, "view_size": 8}, model={"view_size": 8, "channels": (4, 6, 8), "d_g": 8, "d_z": 4})

    def test_roundtrip_bytes(self, tmp_path, rng):
        st = _state(self.cfg, rng)
        save_checkpoint(tmp_path / "ck", st)
        back = load_checkpoint(tmp_path / "ck")
        assert back.step == 7 and back.metrics_lines == st.metrics_lines
        for src, dst in ((st.pair.online, back.pair.online), (st.pair.momentum, back.pair.momentum),
                         (st.velocity, back.velocity), (st.pair.online_stats, back.pair.online_stats)):
            assert set(src) == set(dst)
            assert all(src[k].tobytes() == dst[k].tobytes() for k in src)
        for k, v in st.bank.state_dict().items():
            assert back.bank.state_dict()[k].tobytes() == v.tobytes()
        assert back.config == self.cfg

    def test_manifest_contents(self, tmp_path, rng):
        save_checkpoint(tmp_path / "ck", _state(self.cfg, rng))
        man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert man["rng"] == {"seed": 0, "epoch": 3, "batch_in_epoch": 1}
        assert man["config_hash"] == self.cfg.hash()

    def test_wrong_d_g(self, tmp_path, rng):
        save_checkpoint(tmp_path / "ck", _state(self.cfg, rng))
        other = self.cfg.with_overrides(model={"d_g": 16, "channels": (4, 6, 16)})
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck", expect_config=other)

    def test_tampered_tensor_shape(self, tmp_path, rng):
        save_checkpoint(tmp_path / "ck", _state(self.cfg, rng))
        man_path = tmp_path / "ck" / "tensors.json"
        man = json.loads(man_path.read_text())
        for t in man["tensors"]:
            if t["name"] == "online.projector.fc1.w":
                t["shape"] = [t["shape"][1], t["shape"][0]]
        man_path.write_text(json.dumps(man))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_version_mismatch(self, tmp_path, rng):
        save_checkpoint(tmp_path / "ck", _state(self.cfg, rng))
        p = tmp_path / "ck" / "manifest.json"
        man = json.loads(p.read_text())
        man["version"] = "9.0.0"
        p.write_text(json.dumps(man))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nothing")
