import numpy as np
import pytest

from pacedseg.autodiff import Tape
from pacedseg.errors import FormatError, TrainingAbort
from pacedseg.grids import Volume
from pacedseg.network import (
    PARAM_NAMES,
    SGDState,
    ema_update,
    forward,
    forward_graph,
    init_params,
    load_checkpoint,
    make_dropout_mask,
    param_nodes,
    save_checkpoint,
    sgd_step,
)


def tiny_params(seed=0, dtype=np.float64, dropout=0.3):
    return init_params(
        n_classes=2, widths=(2, 3, 4, 3), embed_dim=5,
        dropout_rate=dropout, seed=seed, dtype=dtype,
    )


def tiny_image(seed=1, dims=(4, 4, 2)):
    return Volume(np.random.default_rng(seed).standard_normal(dims))


class TestForward:
    def test_zero_params_uniform_probs_zero_features(self):
        params = tiny_params()
        for name in PARAM_NAMES:
            params.tensors[name] = np.zeros_like(params.tensors[name])
        probs, feats = forward(params, tiny_image(), dropout_on=False, rng_seed=0)
        np.testing.assert_allclose(probs.data, 0.5, atol=0)
        np.testing.assert_array_equal(feats.data, 0.0)

    def test_dropout_off_is_seed_independent(self):
        params, image = tiny_params(), tiny_image()
        p1, f1 = forward(params, image, dropout_on=False, rng_seed=1)
        p2, f2 = forward(params, image, dropout_on=False, rng_seed=999)
        np.testing.assert_array_equal(p1.data, p2.data)
        np.testing.assert_array_equal(f1.data, f2.data)

    def test_dropout_on_deterministic_per_seed(self):
        params, image = tiny_params(), tiny_image()
        p1, _ = forward(params, image, dropout_on=True, rng_seed=42)
        p2, _ = forward(params, image, dropout_on=True, rng_seed=42)
        np.testing.assert_array_equal(p1.data, p2.data)
        p3, _ = forward(params, image, dropout_on=True, rng_seed=43)
        assert not np.array_equal(p1.data, p3.data)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            forward(tiny_params(), Volume(np.zeros((3, 4, 2))), False, 0)

    def test_graph_and_value_paths_agree_bitwise(self):
        params, image = tiny_params(), tiny_image()
        mask = make_dropout_mask((3, 4, 4, 2), params.dropout_rate, np.random.default_rng(5))
        tape = Tape(np.float64)
        probs_node, feats_node, _ = forward_graph(tape, param_nodes(tape, params), image.data, mask)

        hdec_probs, feats = forward(params, image, dropout_on=False, rng_seed=0)
        np.testing.assert_array_equal(feats_node.value, feats.data)

        from pacedseg.network import forward_parts, head_forward
        hdec, _ = forward_parts(params, image.data)
        np.testing.assert_array_equal(
            probs_node.value, head_forward(params, hdec, mask)
        )

    def test_feature_grid_is_half_resolution(self):
        probs, feats = forward(tiny_params(), tiny_image(dims=(8, 6, 4)), False, 0)
        assert probs.dims == (8, 6, 4)
        assert feats.dims == (4, 3, 2)
        assert feats.embed_dim == 5


class TestDropout:
    def test_zeroed_fraction_and_survivor_scale(self):
        rate = 0.3
        rng = np.random.default_rng(0)
        mask = make_dropout_mask((100, 100), rate, rng)
        zeroed = (mask == 0).mean()
        assert abs(zeroed - rate) < 0.02
        survivors = mask[mask > 0]
        np.testing.assert_allclose(survivors, 1.0 / (1.0 - rate))
        # inverted dropout preserves the layer expectation
        assert abs(mask.mean() - 1.0) < 0.05

    def test_rate_zero_identity(self):
        mask = make_dropout_mask((10, 10), 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(mask, 1.0)


class TestEMA:
    def test_scalar_case(self):
        teacher, student = tiny_params(seed=1), tiny_params(seed=2)
        teacher.tensors["seg_b"] = np.array([1.0, 1.0])
        student.tensors["seg_b"] = np.array([0.0, 0.0])
        ema_update(teacher, student, 0.99)
        np.testing.assert_allclose(teacher.tensors["seg_b"], 0.99)

    def test_decay_zero_copies_student(self):
        teacher, student = tiny_params(seed=1), tiny_params(seed=2)
        ema_update(teacher, student, 0.0)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(teacher.tensors[name], student.tensors[name])

    def test_three_updates_match_geometric_closed_form(self):
        teacher, student = tiny_params(seed=3), tiny_params(seed=4)
        theta0 = {k: v.copy() for k, v in teacher.tensors.items()}
        for _ in range(3):
            ema_update(teacher, student, 0.9)
        for name in PARAM_NAMES:
            expected = theta0[name] * 0.9**3 + student.tensors[name] * (1 - 0.9**3)
            np.testing.assert_allclose(teacher.tensors[name], expected, rtol=1e-12)

    def test_shape_mismatch_raises(self):
        teacher, student = tiny_params(), tiny_params()
        student.tensors["seg_b"] = np.zeros(3)
        with pytest.raises(ValueError):
            ema_update(teacher, student, 0.9)


class TestSGD:
    def test_plain_step(self):
        params = tiny_params()
        state = SGDState(params)
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["seg_b"] = np.ones_like(params.tensors["seg_b"])
        before = params.tensors["seg_b"].copy()
        sgd_step(params, grads, lr=0.1, momentum=0.0, state=state)
        np.testing.assert_allclose(params.tensors["seg_b"], before - 0.1)

    def test_two_momentum_steps_displacement(self):
        """Constant grad g for two steps moves the param by lr*g*(1 + 1.9)."""
        params = tiny_params()
        state = SGDState(params)
        g = 0.7
        grads = {k: np.full_like(v, g) for k, v in params.tensors.items()}
        before = params.tensors["enc1_w"].copy()
        sgd_step(params, grads, lr=0.1, momentum=0.9, state=state)
        sgd_step(params, grads, lr=0.1, momentum=0.9, state=state)
        np.testing.assert_allclose(
            before - params.tensors["enc1_w"], 0.1 * g * (1 + 1.9), rtol=1e-12
        )

    def test_zero_grads_leave_params(self):
        params = tiny_params()
        snapshot = {k: v.copy() for k, v in params.tensors.items()}
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        sgd_step(params, grads, lr=0.5, momentum=0.9, state=SGDState(params))
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(params.tensors[name], snapshot[name])

    def test_nonfinite_grad_aborts(self):
        params = tiny_params()
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["enc1_w"][0, 0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingAbort):
            sgd_step(params, grads, lr=0.1, momentum=0.0, state=SGDState(params))

    def test_teacher_untouched_by_optimizer(self):
        student, teacher = tiny_params(seed=0), tiny_params(seed=0)
        snapshot = {k: v.copy() for k, v in teacher.tensors.items()}
        state = SGDState(student)
        rng = np.random.default_rng(0)
        for _ in range(4):
            grads = {k: rng.standard_normal(v.shape) for k, v in student.tensors.items()}
            sgd_step(student, grads, lr=0.05, momentum=0.9, state=state)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(teacher.tensors[name], snapshot[name])
        assert student.finite()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        student, teacher = tiny_params(seed=5), tiny_params(seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"student": student, "teacher": teacher},
                        {"iteration": 42, "lambda": 0.123})
        sections, meta = load_checkpoint(path)
        assert set(sections) == {"student", "teacher"}
        assert meta["iteration"] == 42 and meta["lambda"] == pytest.approx(0.123)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(
                sections["student"].tensors[name], student.tensors[name]
            )
        assert sections["student"].widths == student.widths
        assert sections["student"].dropout_rate == student.dropout_rate

    def test_truncated_file_raises(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"student": tiny_params()}, {})
        path.write_bytes(path.read_bytes()[:50])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint" * 4)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_float32_roundtrip_dtype(self, tmp_path):
        params = tiny_params(dtype=np.float32)
        path = tmp_path / "f32.ckpt"
        save_checkpoint(path, {"student": params}, {})
        sections, _ = load_checkpoint(path)
        got = sections["student"]
        assert got.dtype == np.float32
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(got.tensors[name], params.tensors[name])


class TestModelGradients:
    def test_supervised_pipeline_matches_finite_differences(self):
        """End-to-end grads through conv/relu/upsample/softmax + Dice + CE."""
        from pacedseg.losses import dice_ce_node

        params = tiny_params(seed=7)
        image = tiny_image(seed=8)
        target = np.random.default_rng(9).integers(0, 2, size=(4, 4, 2))
        mask = make_dropout_mask((3, 4, 4, 2), 0.3, np.random.default_rng(10))

        def loss_value(p):
            tape = Tape(np.float64)
            nodes = param_nodes(tape, p)
            probs, _, _ = forward_graph(tape, nodes, image.data, mask)
            return float(dice_ce_node(tape, probs, target, 2).value)

        tape = Tape(np.float64)
        nodes = param_nodes(tape, params)
        probs, _, _ = forward_graph(tape, nodes, image.data, mask)
        tape.backward(dice_ce_node(tape, probs, target, 2))

        rng = np.random.default_rng(11)
        checked = 0
        for name in ("enc1_w", "enc2_w", "down_w", "dec_w", "seg_w", "seg_b", "down_b"):
            grad = nodes[name].grad
            flat = params.tensors[name].reshape(-1)
            for ci in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                bumped = params.copy()
                bumped.tensors[name].reshape(-1)[ci] += 1e-3
                hi = loss_value(bumped)
                bumped.tensors[name].reshape(-1)[ci] -= 2e-3
                lo = loss_value(bumped)
                numeric = (hi - lo) / 2e-3
                err = abs(grad.reshape(-1)[ci] - numeric) / max(1.0, abs(numeric))
                assert err < 1e-4, f"{name}[{ci}]"
                checked += 1
        assert checked >= 20
