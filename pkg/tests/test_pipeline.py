import json

import numpy as np
import pytest

from lobeseg.autodiff import Tensor
from lobeseg.data import PhantomParams, VolumeSample, generate_dataset, generate_phantom
from lobeseg.errors import (
    CheckpointIncompatibleError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    NumericalError,
)
from lobeseg.metrics import format_table
from lobeseg.model import ModelConfig, build_model, forward
from lobeseg.pipeline import report
from lobeseg.pipeline import train as train_mod
from lobeseg.pipeline.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lobeseg.pipeline.config import TrainConfig, desk_config, load_config, parse_override, save_config
from lobeseg.pipeline.crossval import ABLATION_VARIANTS, cross_validate, run_ablation, variant_config
from lobeseg.pipeline.optim import Adam
from lobeseg.pipeline.train import BACKGROUND_VALUE, evaluate, normalize_intensity, preprocess, train


def tiny(**over):
    cfg = TrainConfig(
        model=ModelConfig(levels=2, channel_schedule=[4, 8], groupnorm_groups=2, input_shape=(8, 8, 8)),
        epochs=1,
    )
    return cfg.replace(**over) if over else cfg


@pytest.fixture(scope="module")
def cases():
    return generate_dataset(10, shape=(16, 16, 16), seed=4)


@pytest.fixture(scope="module")
def trained(cases):
    return train(tiny(epochs=2), cases[:2])


class TestPreprocess:
    def test_rescale_closed_form(self):
        assert normalize_intensity(np.array([-850.0]))[0] == pytest.approx(2 * 150 / 1400 - 1, abs=1e-15)
        assert normalize_intensity(np.array([-850.0]))[0] == pytest.approx(-0.7857, abs=1e-4)
        np.testing.assert_array_equal(normalize_intensity(np.array([-5000.0, -1000.0, 400.0, 900.0])),
                                      [-1.0, -1.0, 1.0, 1.0])

    def test_all_background(self):
        img = np.full((16, 16, 16), 40.0, dtype=np.float32)
        zeros = np.zeros(img.shape, dtype=np.uint8)
        out = preprocess(VolumeSample(img, zeros, zeros), tiny().model)
        assert out.image.shape == (1, 1, 8, 8, 8)
        assert np.all(out.image == BACKGROUND_VALUE)

    def test_fixed_point(self):
        s = generate_phantom(PhantomParams(shape=(16, 32, 32), seed=2))
        cfg = tiny().model
        first = preprocess(s, cfg, dtype=np.float64)
        mask = (first.image[0, 0] > BACKGROUND_VALUE).astype(np.uint8) | (first.labels > 0)
        hu = (first.image[0, 0] + 1.0) / 2.0 * 1400.0 - 1000.0
        again = preprocess(VolumeSample(hu, first.labels, mask.astype(np.uint8)), cfg, dtype=np.float64)
        np.testing.assert_allclose(again.image, first.image, atol=1e-12)
        assert np.array_equal(again.labels, first.labels)

    def test_values_inside_mask_are_rescaled(self):
        s = generate_phantom(PhantomParams(shape=(16, 16, 16), seed=1, noise_sigma=0.0))
        cfg = ModelConfig(levels=2, channel_schedule=[4, 8], groupnorm_groups=2, input_shape=(16, 16, 16))
        out = preprocess(s, cfg)
        inside = s.lung_mask == 1
        np.testing.assert_allclose(out.image[0, 0][inside], normalize_intensity(s.image)[inside], atol=1e-6)
        assert np.all(out.image[0, 0][~inside] == -1.0)

    def test_shape_mismatch(self):
        from lobeseg.errors import DataValidationError
        s = generate_phantom(PhantomParams(shape=(16, 16, 16), seed=1))
        s.lung_mask = np.zeros((16, 16, 17), dtype=np.uint8)
        with pytest.raises(DataValidationError):
            preprocess(s, tiny().model)


class TestConfig:
    def test_file_round_trip(self, tmp_path):
        cfg = desk_config(**{"optimizer.lr": 3e-3, "loss.lambda": 0.5})
        save_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    def test_overrides(self, tmp_path):
        save_config(TrainConfig(), tmp_path / "c.yaml")
        cfg = load_config(tmp_path / "c.yaml", ["epochs=3", "model.use_coordconv=false", "loss.lambda=0"])
        assert cfg.epochs == 3 and not cfg.model.use_coordconv and cfg.loss.lam == 0.0
        assert parse_override("optimizer.lr=1e-2") == ("optimizer.lr", 1e-2)

    @pytest.mark.parametrize("bad", ["epochs=0", "optimizer.lr=0", "nosuch.key=1", "model.levels=9"])
    def test_invalid_overrides(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig().replace(**dict([parse_override(bad)]))

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"epoch": 3})

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps) == (1e-3, 0.9, 0.999, 1e-8)
        assert cfg.loss.lam == 1.0 and cfg.loss.gamma == 1e-5 and cfg.epochs == 40


def test_adam_matches_closed_form():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    p = Tensor(w0.copy(), requires_grad=True)
    opt = Adam({"w": p}, lr=0.1)
    grads = [rng.standard_normal(5) for _ in range(3)]
    m = v = np.zeros(5)
    w = w0.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-12)
    p.grad = None
    opt.step()  # parameters without a gradient are left alone
    np.testing.assert_allclose(p.data, w, rtol=1e-12)


class TestTrain:
    def test_deterministic(self, cases, trained):
        again = train(tiny(epochs=2), cases[:2])
        assert again.history == trained.history
        for k, p in trained.model.parameters.items():
            assert np.array_equal(p.data, again.model.parameters[k].data)

    def test_history_fields(self, trained):
        assert len(trained.history) == 4
        assert [h["step"] for h in trained.history] == [0, 1, 2, 3]
        assert [h["epoch"] for h in trained.history] == [0, 0, 1, 1]
        for h in trained.history:
            assert h["d_total"] == h["d_lobes"] + h["d_boundary"]
            assert np.isfinite(h["d_total"])

    def test_lambda_zero(self, cases):
        ckpt = train(tiny(**{"loss.lambda": 0.0}), cases[:1])
        assert ckpt.model.config.boundary_head
        for h in ckpt.history:
            assert h["d_boundary"] < 0 and h["d_total"] == h["d_lobes"]

    def test_seed_changes_run(self, cases, trained):
        other = train(tiny(epochs=2, seed=1), cases[:2])
        assert other.history != trained.history

    def test_empty_cases(self):
        with pytest.raises(ConfigurationError):
            train(tiny(), [])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_guard(self, cases):
        cfg = variant_config(tiny(epochs=3), "baseline").replace(**{"optimizer.lr": 1e30})
        with pytest.raises(NumericalError, match=r"epoch \d+, step \d+"):
            train(cfg, cases[:2])

    def test_on_step_callback(self, cases):
        seen = []
        ckpt = train(tiny(), cases[:2], on_step=seen.append)
        assert seen == ckpt.history


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, cases, trained):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        back = load_checkpoint(path, expected_config=trained.config)
        assert back.history == trained.history and back.epoch == 2 and back.seed == 0
        assert back.train_config == trained.train_config
        assert back.optimizer_step == trained.optimizer_step
        for k, a in trained.optimizer_state.items():
            assert np.array_equal(a, back.optimizer_state[k])
        x = preprocess(cases[3], trained.config).image
        a, ab = forward(trained.model, Tensor(x))
        b, bb = forward(back.model, Tensor(x))
        assert np.array_equal(a.data, b.data) and np.array_equal(ab.data, bb.data)

    def test_tampered_block(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointIntegrityError, match="checksum"):
            load_checkpoint(path)

    def test_tampered_manifest(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        raw = path.read_bytes()
        path.write_bytes(raw.replace(b'"epoch": 2', b'"epoch": 3', 1))
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    @pytest.mark.parametrize("cut", [1, 100])
    def test_truncated(self, tmp_path, trained, cut):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-cut])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_version(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes().replace(b"LOBESEG-CKPT 1", b"LOBESEG-CKPT 2", 1))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_mismatched_config_names_field(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "m.ckpt")
        other = ModelConfig(levels=2, channel_schedule=[4, 16], groupnorm_groups=2, input_shape=(8, 8, 8))
        with pytest.raises(CheckpointIncompatibleError) as info:
            load_checkpoint(path, expected_config=other)
        assert info.value.parameter == "channel_schedule"

    def test_tensor_shape_disagreement_names_parameter(self, tmp_path):
        cfg = tiny().model
        model = build_model(cfg)
        wrong = ModelConfig(levels=2, channel_schedule=[4, 8], groupnorm_groups=2, input_shape=(8, 8, 8),
                            use_coordconv=False)
        model.config = wrong
        path = save_checkpoint(Checkpoint(model=model), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointIncompatibleError) as info:
            load_checkpoint(path)
        assert info.value.parameter == "dec0.conv0.weight"
        assert "dec0.conv0.weight" in str(info.value)

    def test_missing_parameter(self, tmp_path):
        model = build_model(tiny().model)
        del model.parameters["head.bias"]
        path = save_checkpoint(Checkpoint(model=model), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointIncompatibleError) as info:
            load_checkpoint(path)
        assert info.value.parameter == "head.bias"


class TestEvaluate:
    def test_deterministic_and_bounded(self, cases, trained):
        a = evaluate(trained, cases[2:5])
        b = evaluate(trained, cases[2:5])
        assert a == b and a.n_cases == 3
        assert 0.0 <= a.mean_dice <= 1.0
        assert a.case_ids == [c.case_id for c in cases[2:5]]

    def test_predictions_stay_inside_lung_mask(self, cases):
        model = build_model(tiny().model, seed=3)
        case = preprocess(cases[0], model.config)
        raw = train_mod.predict_labels(model, case.image)
        masked = train_mod.predict_labels(model, case.image, case.mask)
        assert raw[case.mask == 0].any()  # an untrained head labels background voxels as lobes
        assert not masked[case.mask == 0].any()
        np.testing.assert_array_equal(masked[case.mask > 0], raw[case.mask > 0])

    def test_score_ignores_out_of_lung_predictions(self, cases, monkeypatch):
        model = build_model(tiny().model, seed=3)
        case = preprocess(cases[0], model.config)
        # an oracle network: exact labels inside the lung, lobe 2 everywhere outside
        fake = np.where(case.mask > 0, case.labels, 2)
        monkeypatch.setattr(train_mod, "predict_probs",
                            lambda m, img: (np.moveaxis(np.eye(6)[fake], -1, 0)[None], None))
        assert evaluate(model, [case]).mean_dice == 1.0
        assert evaluate(model, [cases[0]], native_resolution=True).n_cases == 1

    def test_untrained_model(self, cases):
        rep = evaluate(build_model(tiny().model, seed=3), cases[:2])
        for m, s in rep.per_lobe.values():
            assert 0.0 <= m <= 1.0

    def test_native_resolution(self, cases, trained):
        rep = evaluate(trained, cases[:2], native_resolution=True)
        assert 0.0 <= rep.mean_dice <= 1.0


class TestCrossValidation:
    def test_partition_and_pooling(self, cases):
        result = cross_validate(tiny(), cases, k=5)
        assert len(result.folds) == 5
        pooled_ids = result.pooled.case_ids
        assert sorted(pooled_ids) == sorted(c.case_id for c in cases)
        assert len(pooled_ids) == len(set(pooled_ids)) == 10
        for f in result.folds:
            assert len(f.test_ids) == 2 and not set(f.test_ids) & set(f.train_ids)
            assert sorted(f.test_ids + f.train_ids) == sorted(c.case_id for c in cases)
        # pooled statistics recomputed from the per-fold per-case values
        values = [case for f in result.folds for case in f.report.per_case]
        for c in range(1, 6):
            col = np.array([v[c] for v in values])
            assert result.pooled.per_lobe[c][0] == pytest.approx(col.mean(), abs=1e-12)
            assert result.pooled.per_lobe[c][1] == pytest.approx(col.std(), abs=1e-12)

    def test_no_leakage_instrumented(self, cases, monkeypatch):
        log = []
        real_train, real_eval = train_mod.train, train_mod.evaluate

        def spy_train(config, train_cases, *a, **kw):
            ckpt = real_train(config, train_cases, *a, **kw)
            ckpt.trained_on = {c.case_id for c in train_cases}
            return ckpt

        def spy_eval(ckpt, test_cases, *a, **kw):
            log.append((ckpt.trained_on, [c.case_id for c in test_cases]))
            return real_eval(ckpt, test_cases, *a, **kw)

        monkeypatch.setattr(train_mod, "train", spy_train)
        monkeypatch.setattr(train_mod, "evaluate", spy_eval)
        cross_validate(tiny(), cases, k=5)
        assert len(log) == 5
        for trained_on, tested in log:
            assert not trained_on & set(tested)
        assert sorted(i for _, t in log for i in t) == sorted(c.case_id for c in cases)

    def test_k_larger_than_cases(self, cases):
        with pytest.raises(ConfigurationError):
            cross_validate(tiny(), cases[:3], k=5)

    def test_errors_annotated_with_fold(self, cases, monkeypatch):
        def boom(config, train_cases, *a, **kw):
            raise NumericalError("loss exploded")

        monkeypatch.setattr(train_mod, "train", boom)
        with pytest.raises(NumericalError, match="fold 0: loss exploded"):
            cross_validate(tiny(), cases, k=5)

    def test_parallel_matches_sequential(self, cases):
        seq = cross_validate(tiny(), cases, k=5)
        par = cross_validate(tiny(), cases, k=5, jobs=2)
        assert seq.pooled == par.pooled


class TestAblation:
    def test_variant_toggles(self):
        base = tiny()
        expect = {
            "baseline": (False, False, False, 0.0),
            "+coordmap": (True, False, False, 0.0),
            "+groupnorm": (True, True, False, 0.0),
            "proposed": (True, True, True, 1.0),
        }
        for v, (coord, gn, head, lam) in expect.items():
            m = variant_config(base, v)
            assert (m.model.use_coordconv, m.model.use_groupnorm, m.model.boundary_head, m.loss.lam) == \
                (coord, gn, head, lam)
        with pytest.raises(ConfigurationError):
            variant_config(base, "+dropout")

    def test_rows_and_table(self, cases):
        rows = run_ablation(tiny(), cases, k=5)
        assert [r.variant for r in rows] == list(ABLATION_VARIANTS)
        text = format_table([(r.variant, r.metrics) for r in rows]).splitlines()
        assert len(text) == 2 + 4 * 2
        assert [line.split()[0] for line in text[2::2]] == list(ABLATION_VARIANTS)
        for line in text[2::2]:
            assert len(line.split()) == 1 + 6

    def test_needs_two_k_cases(self, cases):
        with pytest.raises(ConfigurationError):
            run_ablation(tiny(), cases[:9], k=5)


class TestReport:
    def test_history_round_trip(self, tmp_path, trained):
        path = report.write_history(trained.history, tmp_path / "loss.tsv")
        assert path.read_text().splitlines()[0].split("\t") == list(report.HISTORY_FIELDS)
        assert report.read_history(path) == trained.history

    def test_figures(self, tmp_path, trained, cases):
        rep = evaluate(trained, cases[:2])
        for path in (report.plot_loss_curves(trained.history, tmp_path / "a.png"),
                     report.plot_ablation([("baseline", rep), ("proposed", rep)], tmp_path / "b.png"),
                     report.plot_label_slices(cases[0].image, cases[0].labels, tmp_path / "c.png")):
            assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_metrics_json(self, tmp_path, trained, cases):
        from lobeseg.metrics import MetricsReport, write_report
        rep = evaluate(trained, cases[:2])
        _, js, _ = write_report([("x", rep)], tmp_path)
        assert MetricsReport.from_dict(json.loads(js.read_text())["x"]) == rep
