"""Initialization constants, Adam behavior, checkpoints, the epoch loop."""

import numpy as np
import pytest

from evidseg.backbone_unet import BackboneConfig
from evidseg.trainer import (Model, TrainConfig, TrainingError, adam_init,
                             adam_step, init_es_params, load_checkpoint,
                             prepare_case, sample_patch, save_checkpoint,
                             train)
from evidseg.volume_io import generate_phantom


def tiny_config(**kw):
    defaults = dict(epochs=2, prototypes=3, patch_dims=(16, 16, 16),
                    batch_size=2, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def tiny_model(head="evidential", seed=0, config=None):
    return Model.create(BackboneConfig(channels=(2, 4)), head,
                        config or tiny_config(), seed)


def tiny_cases(n, start_seed=0):
    return [generate_phantom(start_seed + i, (16, 16, 16), (1, 2))
            for i in range(n)]


class TestConfig:
    def test_paper_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.epochs, c.lam, c.prototypes) == (1e-3, 50, 1e-5, 20)
        assert (c.alpha_init, c.gamma_init) == (0.5, 0.01)
        assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(epochs=0),
                                    dict(prototypes=0), dict(alpha_init=1.0),
                                    dict(gamma_init=-0.1),
                                    dict(dice_mode="bogus")])
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestInitEsParams:
    def test_alpha_squashes_to_half(self):
        es = init_es_params(TrainConfig(), feature_dim=4, seed=0)
        np.testing.assert_allclose(es.alphas, 0.5, atol=1e-7)

    def test_gamma_is_squared_root(self):
        es = init_es_params(TrainConfig(), feature_dim=4, seed=0)
        np.testing.assert_allclose(es.gammas, 0.01, atol=1e-7)

    def test_prototypes_in_unit_box(self):
        es = init_es_params(TrainConfig(), feature_dim=4, seed=0)
        assert np.all(np.abs(es.prototypes) <= 1.0)
        assert np.all(np.abs(es.membership_logits) <= 0.1)

    def test_determinism(self):
        a = init_es_params(TrainConfig(), 4, seed=5)
        b = init_es_params(TrainConfig(), 4, seed=5)
        np.testing.assert_array_equal(a.prototypes, b.prototypes)
        np.testing.assert_array_equal(a.membership_logits,
                                      b.membership_logits)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        config = tiny_config()
        params = {"w": np.ones(4)}
        state = adam_init(params)
        adam_step(params, {"w": np.zeros(4)}, state, 1, config)
        np.testing.assert_array_equal(params["w"], np.ones(4))

    def test_first_step_magnitude_near_lr(self):
        # bias correction makes the first step lr/(1+eps) for unit gradient
        config = tiny_config(lr=1e-3)
        params = {"w": np.array([1.0])}
        state = adam_init(params)
        adam_step(params, {"w": np.array([1.0])}, state, 1, config)
        assert params["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-8)

    def test_constant_gradient_step_approaches_lr_sign(self):
        config = tiny_config(lr=1e-3)
        params = {"w": np.array([0.0])}
        state = adam_init(params)
        g = {"w": np.array([-2.5])}
        prev = params["w"][0]
        for t in range(1, 1001):
            prev = params["w"][0]
            adam_step(params, g, state, t, config)
        last_step = params["w"][0] - prev
        assert last_step == pytest.approx(1e-3, rel=1e-3)

    def test_parameter_groups_independent(self):
        config = tiny_config()
        params = {"a": np.zeros(2), "b": np.zeros(3)}
        state = adam_init(params)
        adam_step(params, {"a": np.ones(2), "b": np.zeros(3)}, state, 1,
                  config)
        assert params["a"].any()
        assert not params["b"].any()

    def test_shape_mismatch_rejected(self):
        config = tiny_config()
        params = {"w": np.zeros(3)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(4)}, adam_init(params), 1,
                      config)

    def test_step_index_starts_at_one(self):
        config = tiny_config()
        params = {"w": np.zeros(3)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(3)}, adam_init(params), 0,
                      config)


class TestData:
    def test_prepare_case_shapes_and_channels(self):
        case = tiny_cases(1)[0]
        x, g = prepare_case(case)
        assert x.shape == (2, 16, 16, 16)
        assert g.shape == (16, 16, 16)
        np.testing.assert_allclose(x[0], case.pet.voxels * 0.1, atol=1e-6)

    def test_sample_patch_full_volume_passthrough(self):
        case = tiny_cases(1)[0]
        x, g = prepare_case(case)
        px, pg = sample_patch(x, g, (16, 16, 16),
                              np.random.default_rng(0), False)
        np.testing.assert_array_equal(px, x)
        np.testing.assert_array_equal(pg, g)

    def test_sample_patch_lesion_centered(self):
        case = generate_phantom(3, (32, 32, 32), (1, 1))
        x, g = prepare_case(case)
        rng = np.random.default_rng(0)
        for _ in range(10):
            _, pg = sample_patch(x, g, (16, 16, 16), rng, True)
            assert pg.shape == (16, 16, 16)
            assert pg.any()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model()
        config = tiny_config()
        path = tmp_path / "m.evckpt"
        save_checkpoint(path, model, config, epoch=7)
        back, back_config, epoch = load_checkpoint(path)
        assert epoch == 7
        assert back.head == model.head
        assert back_config == config
        assert back.params.keys() == model.params.keys()
        for k in model.params:
            np.testing.assert_array_equal(back.params[k], model.params[k])

    def test_truncated_blob_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "m.evckpt"
        save_checkpoint(path, model, tiny_config(), epoch=1)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated|length"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.evckpt"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_missing_tensor_named(self, tmp_path):
        model = tiny_model()
        del model.params["enc0.conv1.w"]
        path = tmp_path / "m.evckpt"
        save_checkpoint(path, model, tiny_config(), epoch=1)
        with pytest.raises(ValueError, match="enc0.conv1.w"):
            load_checkpoint(path)


class TestTrainLoop:
    def test_short_run_logs_and_improves_constraints(self):
        model = tiny_model()
        config = tiny_config()
        cases = tiny_cases(4)
        best, best_epoch, log = train(model, cases[:3], cases[3:], config,
                                      gradcheck_gate=False)
        assert len(log) == config.epochs
        assert 1 <= best_epoch <= config.epochs
        for record in log:
            assert set(record) >= {"epoch", "loss_d", "loss_u", "loss_reg",
                                   "total", "val_dice"}
        es = model.es_params()
        np.testing.assert_allclose(es.memberships.sum(axis=1), 1.0,
                                   atol=1e-5)
        assert np.all(es.alphas > 0) and np.all(es.alphas < 1)

    def test_fixed_seed_reproduces_epoch_log(self):
        cases = tiny_cases(4)
        logs = []
        for _ in range(2):
            model = tiny_model()
            _, _, log = train(model, cases[:3], cases[3:], tiny_config(),
                              gradcheck_gate=False)
            logs.append(log)
        assert logs[0] == logs[1]

    def test_softmax_head_trains(self):
        config = tiny_config(epochs=1)
        model = tiny_model(head="softmax", config=config)
        cases = tiny_cases(3)
        _, _, log = train(model, cases[:2], cases[2:], config,
                          gradcheck_gate=False)
        assert len(log) == 1
        assert log[0]["loss_u"] == 0.0

    def test_empty_split_rejected(self):
        with pytest.raises(TrainingError):
            train(tiny_model(), [], tiny_cases(1), tiny_config(),
                  gradcheck_gate=False)

    def test_softmax_masses_are_probability_like(self):
        model = tiny_model(head="softmax")
        x = np.random.default_rng(0).standard_normal((1, 2, 16, 16, 16))
        masses = model.predict_masses(x.astype(np.float32))
        np.testing.assert_allclose(masses.sum(axis=-1), 1.0, atol=1e-5)
        np.testing.assert_array_equal(masses[..., 2], 0.0)
