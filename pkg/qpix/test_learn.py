"""Unit tests for the classifiers, the loss, Adam and the training loop."""

import hashlib
import math
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from qpix.errors import DomainError, NumericalError, ShapeError
from qpix.frqi import encode_frqi
from qpix.imaging import Dataset, PatchLayout
from qpix.learn import (
    AdamState,
    ClassifierMPS,
    EpochMetrics,
    TrainConfig,
    adam_step,
    batch_loss_and_gradients,
    best100_accuracy,
    build_model,
    circuit_inputs,
    compress_image_circuit,
    config_from_profile,
    evaluate,
    exact_state,
    fit,
    init_circuit_classifier,
    init_classifier_mps,
    load_model_checkpoint,
    loss,
    loss_and_score_gradient,
    mps_classifier_forward,
    mps_classifier_gradients,
    prepare_inputs,
    read_metrics_csv,
    save_model_checkpoint,
    train,
    write_metrics_csv,
)
from qpix.mps import from_statevector, random_mps, to_statevector
from qpix.seq_circuit import SequentialCircuit, apply_circuit, zero_state


def dense_classifier(clf):
    """Classifier as a dense ``(2**n, L)`` matrix, physical site 0 most significant."""
    acc = np.ones((1, 1, 1))
    for t in clf.tensors:
        if t.ndim == 3:
            acc = np.einsum("plA,AdB->pdlB", acc, t)
            acc = acc.reshape(-1, acc.shape[2], acc.shape[3])
        else:
            acc = np.einsum("pA,AdmB->pdmB", acc[:, 0, :], t)
            acc = acc.reshape(-1, acc.shape[2], acc.shape[3])
    return acc[:, :, 0]


def random_classifier(rng, n_sites, chi, num_labels):
    label_site = n_sites // 2
    bonds = [1] + [chi] * (n_sites - 1) + [1]
    tensors = []
    for k in range(n_sites):
        if k == label_site:
            tensors.append(rng.normal(size=(bonds[k], 2, num_labels, bonds[k + 1])))
        else:
            tensors.append(rng.normal(size=(bonds[k], 2, bonds[k + 1])))
    return ClassifierMPS(tensors, label_site, num_labels)


class TestLoss(unittest.TestCase):

    def test_uniform_scores(self):
        value = loss(np.zeros((2, 4)), [0, 3], logit_scale=1.0, l2=0.0)
        self.assertAlmostEqual(value, math.log(4.0))

    def test_l2_term(self):
        weights = [np.full(3, 2.0)]
        value = loss(np.zeros((4, 2)), [0, 1, 0, 1], logit_scale=1.0, l2=0.5, weights=weights)
        self.assertAlmostEqual(value, math.log(2.0) + 0.5 / 8.0 * 12.0)

    def test_large_scores_stay_finite(self):
        value = loss(np.array([[1e4, 0.0]]), [1], logit_scale=1.0, l2=0.0)
        self.assertAlmostEqual(value, 1e4)

    def test_shifting_all_scores_changes_nothing(self):
        scores = np.random.default_rng(13).normal(size=(3, 5))
        truth = [4, 0, 2]
        base, base_grad = loss_and_score_gradient(scores, truth, logit_scale=2.5, l2=0.0)
        shifted, shifted_grad = loss_and_score_gradient(scores + 7.0, truth, logit_scale=2.5, l2=0.0)
        self.assertAlmostEqual(base, shifted, places=10)
        np.testing.assert_allclose(base_grad, shifted_grad, atol=1e-12)

    def test_score_gradient(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(3, 5))
        truth = [1, 4, 0]
        _, grad = loss_and_score_gradient(scores, truth, 2.5, 0.0)
        eps = 1e-6
        for i, l in [(0, 1), (1, 2), (2, 4)]:
            plus, minus = scores.copy(), scores.copy()
            plus[i, l] += eps
            minus[i, l] -= eps
            numeric = (loss(plus, truth, 2.5, 0.0) - loss(minus, truth, 2.5, 0.0)) / (2 * eps)
            self.assertAlmostEqual(grad[i, l], numeric, places=7)

    def test_batch_mismatch(self):
        with self.assertRaises(ShapeError):
            loss(np.zeros((2, 3)), [0], 1.0, 0.0)


class TestAdam(unittest.TestCase):

    def test_first_step_moves_by_learning_rate(self):
        params = [np.array([1.0, -2.0, 3.0])]
        grads = [np.array([0.5, -4.0, 0.0])]
        state, (updated,) = adam_step(AdamState.zeros(params), params, grads, lr=0.1)
        self.assertEqual(state.step, 1)
        np.testing.assert_allclose(updated, [0.9, -1.9, 3.0], atol=1e-7)
        np.testing.assert_array_equal(params[0], [1.0, -2.0, 3.0])

    def test_moments_accumulate(self):
        params = [np.zeros(2)]
        state = AdamState.zeros(params)
        for _ in range(3):
            state, params = adam_step(state, params, [np.ones(2)], lr=0.01)
        self.assertEqual(state.step, 3)
        np.testing.assert_allclose(state.m[0], 1.0 - 0.9 ** 3)
        np.testing.assert_allclose(params[0], -0.03, atol=1e-6)

    def test_zero_learning_rate_keeps_parameters(self):
        rng = np.random.default_rng(12)
        params = [rng.normal(size=(2, 3)), rng.normal(size=4)]
        state = AdamState.zeros(params)
        for _ in range(2):
            grads = [rng.normal(size=p.shape) for p in params]
            state, updated = adam_step(state, params, grads, lr=0.0)
        for before, after in zip(params, updated):
            np.testing.assert_array_equal(before, after)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            adam_step(AdamState.zeros([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)], lr=0.1)


class TestBest100(unittest.TestCase):

    def test_short_history(self):
        self.assertAlmostEqual(best100_accuracy([0.2, 0.4, 0.6]), 0.4)

    def test_long_history(self):
        history = [i / 200.0 for i in range(200)]
        self.assertAlmostEqual(best100_accuracy(history), np.mean(history[100:]))

    def test_empty(self):
        with self.assertRaises(ValueError):
            best100_accuracy([])


class TestClassifierMPS(unittest.TestCase):

    def test_init_shapes(self):
        clf = init_classifier_mps(7, 4, 3, seed=0)
        self.assertEqual(clf.label_site, 3)
        self.assertEqual(clf.tensors[3].shape, (4, 2, 3, 4))
        self.assertEqual(clf.tensors[0].shape, (1, 2, 4))
        self.assertEqual(clf.tensors[6].shape, (4, 2, 1))

    def test_init_is_near_identity(self):
        clf = init_classifier_mps(3, 2, 2, seed=1, noise=0.0)
        np.testing.assert_allclose(clf.tensors[1][:, 0, 0, :], np.eye(2))
        np.testing.assert_allclose(clf.tensors[0][0, 1, :], [1.0, 0.0])

    def test_forward_matches_dense(self):
        rng = np.random.default_rng(2)
        clf = random_classifier(rng, 5, 3, 4)
        image = [random_mps(2, 2, rng), random_mps(3, 2, rng)]
        image[0].log_scale = 0.7
        image[1].phase = np.exp(0.4j)
        psi = np.kron(to_statevector(image[0]), to_statevector(image[1]))
        expected = np.real(psi @ dense_classifier(clf))
        np.testing.assert_allclose(mps_classifier_forward(clf, image), expected, atol=1e-10)

    def test_prediction_ignores_positive_rescaling(self):
        rng = np.random.default_rng(14)
        clf = random_classifier(rng, 4, 2, 5)
        image = [random_mps(4, 2, rng)]
        before = mps_classifier_forward(clf, image)
        image[0].log_scale += 3.0
        after = mps_classifier_forward(clf, image)
        self.assertEqual(int(np.argmax(before)), int(np.argmax(after)))
        np.testing.assert_allclose(after, np.exp(3.0) * before, rtol=1e-10)

    def test_length_mismatch(self):
        rng = np.random.default_rng(3)
        clf = random_classifier(rng, 4, 2, 2)
        with self.assertRaises(ShapeError):
            mps_classifier_forward(clf, [random_mps(3, 2, rng)])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        clf = random_classifier(rng, 4, 2, 3)
        images = [[random_mps(4, 2, rng)] for _ in range(3)]
        truths = [0, 2, 1]
        config = TrainConfig(seed=0, logit_scale=0.8, l2=0.3)
        value, grads = mps_classifier_gradients(clf, images, truths, config)
        eps = 1e-6
        for k, index in [(0, (0, 1, 1)), (2, (1, 0, 2, 0)), (3, (1, 1, 0)), (1, (0, 0, 1))]:
            plus = [t.copy() for t in clf.tensors]
            minus = [t.copy() for t in clf.tensors]
            plus[k][index] += eps
            minus[k][index] -= eps
            f_plus, _ = mps_classifier_gradients(clf.with_parameters(plus), images, truths, config)
            f_minus, _ = mps_classifier_gradients(clf.with_parameters(minus), images, truths, config)
            self.assertAlmostEqual(grads[k][index], (f_plus - f_minus) / (2 * eps), places=6)
        self.assertTrue(np.isfinite(value))

    def test_log_cap_rescales_scores(self):
        rng = np.random.default_rng(5)
        clf = random_classifier(rng, 4, 2, 3)
        image = [random_mps(4, 2, rng)]
        free = mps_classifier_forward(clf, image)
        capped = mps_classifier_forward(ClassifierMPS(clf.tensors, clf.label_site, 3, log_cap=-30.0), image)
        self.assertLess(np.max(np.abs(capped)), 1e-10)
        np.testing.assert_allclose(capped / np.linalg.norm(capped), free / np.linalg.norm(free), atol=1e-8)

    def test_overflow_raises_numerical_error(self):
        rng = np.random.default_rng(6)
        clf = random_classifier(rng, 3, 2, 2)
        image = [random_mps(3, 2, rng)]
        image[0].log_scale = 1000.0
        with self.assertRaises(NumericalError):
            mps_classifier_forward(clf, image)
        capped = ClassifierMPS(clf.tensors, clf.label_site, 2, log_cap=0.0)
        self.assertTrue(np.all(np.isfinite(mps_classifier_forward(capped, image))))


class TestCircuitClassifier(unittest.TestCase):

    def test_small_register_drops_tail(self):
        model = init_circuit_classifier(3, 1, 2, seed=0)
        self.assertFalse(model.circuit.readout_tail)
        self.assertEqual(model.label_qubits, [0, 1, 2])

    def test_too_few_label_qubits(self):
        with self.assertRaises(ShapeError):
            init_circuit_classifier(2, 1, 5, seed=0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        model = init_circuit_classifier(5, 1, 10, seed=1)
        model = model.with_parameters([rng.uniform(-0.5, 0.5, size=model.circuit.params.shape)])
        states = [encode_frqi(rng.uniform(size=16)) for _ in range(2)]
        truths = [3, 7]
        value, grads, scores = batch_loss_and_gradients(model, states, truths, 16.0, 0.0)
        self.assertEqual(scores.shape, (2, 10))
        eps = 1e-6
        for g, k in [(0, 0), (4, 9), (6, 14)]:
            plus = model.circuit.params.copy()
            minus = model.circuit.params.copy()
            plus[g, k] += eps
            minus[g, k] -= eps
            f_plus, _, _ = batch_loss_and_gradients(model.with_parameters([plus]), states, truths, 16.0, 0.0)
            f_minus, _, _ = batch_loss_and_gradients(model.with_parameters([minus]), states, truths, 16.0, 0.0)
            self.assertAlmostEqual(grads[0][g, k], (f_plus - f_minus) / (2 * eps), places=6)

    def test_scores_are_probabilities(self):
        model = init_circuit_classifier(4, 1, 10, seed=2)
        scores = model.scores(encode_frqi(np.full(8, 0.5)))
        self.assertEqual(scores.shape, (10,))
        self.assertLessEqual(scores.sum(), 1.0 + 1e-12)


class TestCompression(unittest.TestCase):

    def test_warm_start_is_exact_for_bond_dimension_two(self):
        target = encode_frqi(np.random.default_rng(8).uniform(size=4))
        _, fidelity = compress_image_circuit(target, 1, 0, 0.01, seed=0, warm_start=True)
        self.assertGreater(fidelity, 1.0 - 1e-8)

    def test_plant_and_recover(self):
        recovered = 0
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            planted = SequentialCircuit(9, 2, rng.uniform(-math.pi, math.pi, size=(16, 15)), role="img")
            target = apply_circuit(planted, zero_state(9))
            circuit, fidelity = compress_image_circuit(target, 2, 2000, 8e-4, seed=seed)
            self.assertEqual(circuit.params.shape, planted.params.shape)
            recovered += fidelity >= 0.99
        self.assertGreaterEqual(recovered, 4)

    def test_one_layer_target_is_reached(self):
        rng = np.random.default_rng(12)
        planted = SequentialCircuit(6, 1, rng.uniform(-math.pi, math.pi, size=(5, 15)), role="img")
        target = apply_circuit(planted, zero_state(6))
        circuit, fidelity = compress_image_circuit(target, 1, 200, 8e-4, seed=0)
        self.assertGreater(fidelity, 0.999)
        self.assertAlmostEqual(abs(np.vdot(target, apply_circuit(circuit, zero_state(6)))) ** 2, fidelity)

    def test_sweeps_beat_their_start(self):
        target = encode_frqi(np.random.default_rng(13).uniform(size=16))
        _, plain = compress_image_circuit(target, 1, 0, 0.0, seed=2, warm_start=False, sweeps=0)
        _, swept = compress_image_circuit(target, 1, 0, 0.0, seed=2, warm_start=False, sweeps=5)
        self.assertGreaterEqual(swept, plain)

    def test_invalid_restarts(self):
        target = encode_frqi(np.full(4, 0.5))
        with self.assertRaises(ValueError):
            compress_image_circuit(target, 1, 1, 0.1, seed=0, restarts=0)

    def test_training_improves_fidelity(self):
        target = encode_frqi(np.random.default_rng(9).uniform(size=8))
        _, start = compress_image_circuit(target, 2, 0, 0.05, seed=1, warm_start=False, sweeps=0)
        _, trained = compress_image_circuit(target, 2, 60, 0.05, seed=1, warm_start=False, sweeps=0)
        self.assertGreater(trained, start)

    def test_target_must_be_normalized(self):
        with self.assertRaises(DomainError):
            compress_image_circuit(np.ones(4), 1, 1, 0.1, seed=0)

    def test_exact_inputs_and_cache(self):
        images = np.random.default_rng(10).uniform(size=(2, 2, 2))
        config = TrainConfig(seed=0, model="circuit", m_img=1, compress_iterations=3, layout="1x1")
        exact, ones = circuit_inputs(images, TrainConfig(seed=0, model="circuit", m_img=0))
        np.testing.assert_allclose(ones, 1.0)
        np.testing.assert_allclose(exact[0], exact_state(images[0], PatchLayout()))
        with tempfile.TemporaryDirectory() as tmpdir:
            states, fidelities = circuit_inputs(images, config, tmpdir)
            self.assertEqual(len(os.listdir(tmpdir)), 1)
            cached, cached_fidelities = circuit_inputs(images, config, tmpdir)
        np.testing.assert_allclose(cached, states)
        np.testing.assert_allclose(cached_fidelities, fidelities)
        self.assertTrue(np.all(fidelities <= 1.0 + 1e-12))

    def test_cache_key_tracks_image_digest_and_settings(self):
        images = np.random.default_rng(12).uniform(size=(1, 2, 2))
        digest = hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()[:12]
        with tempfile.TemporaryDirectory() as tmpdir:
            for sweeps in (0, 2):
                config = TrainConfig(seed=0, model="circuit", m_img=1, compress_iterations=2,
                                     compress_sweeps=sweeps, compress_restarts=1, layout="1x1")
                circuit_inputs(images, config, tmpdir)
            names = sorted(os.listdir(tmpdir))
        self.assertEqual(len(names), 2)
        self.assertTrue(all(name.endswith(f"-{digest}.npz") for name in names))

    def test_exact_state_of_patches(self):
        img = np.random.default_rng(11).uniform(size=(2, 4))
        psi = exact_state(img, PatchLayout(1, 2))
        self.assertEqual(psi.size, 64)
        self.assertAlmostEqual(np.linalg.norm(psi), 1.0)


class TestConfig(unittest.TestCase):

    def test_circuit_defaults(self):
        config = config_from_profile(None, seed=3, model="circuit")
        self.assertIsNone(config.logit_scale)
        self.assertEqual(config.l2, 0.0)
        self.assertEqual(config.batch_size, 100)

    def test_profile_then_overrides(self):
        config = config_from_profile("desk3", seed=1, epochs=5, chi_img=None)
        self.assertEqual(config.epochs, 5)
        self.assertEqual(config.chi_img, 4)
        self.assertEqual(config.classes, (0, 1, 2))

    def test_invalid(self):
        with self.assertRaises(ValueError):
            config_from_profile("nope", seed=0)
        with self.assertRaises(ValueError):
            config_from_profile(None, seed=-1)
        with self.assertRaises(ValueError):
            config_from_profile(None, seed=0, batch_size=0)

    def test_dict_round_trip(self):
        config = config_from_profile("desk3", seed=4)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)


class TestTraining(unittest.TestCase):

    def _dataset(self, seed, count, size=4):
        rng = np.random.default_rng(seed)
        labels = np.arange(count) % 2
        images = rng.uniform(0.0, 0.3, size=(count, size, size))
        images[labels == 1, :, : size // 2] += 0.6
        return Dataset(images, labels, num_labels=2)

    def test_evaluate_confusion(self):
        class Fixed:
            def scores(self, x):
                return np.array([1.0, 0.0]) if x == 0 else np.array([0.0, 1.0])

        result = evaluate(Fixed(), [0, 1, 1, 0], [0, 1, 0, 0], num_labels=2)
        self.assertAlmostEqual(result.accuracy, 0.75)
        np.testing.assert_array_equal(result.confusion, [[2, 1], [0, 1]])

    def test_mps_training_run(self):
        config = config_from_profile(None, seed=0, model="mps", chi_img=2, chi_class=2, epochs=2,
                                     batch_size=4, learning_rate=1e-2, image_size=(4, 4))
        with tempfile.TemporaryDirectory() as tmpdir:
            result = train(config, self._dataset(0, 8), self._dataset(1, 4), output_dir=tmpdir)
            self.assertEqual(len(result.history), 2)
            for name in ("best.qpxc", "final.qpxc", "metrics.csv"):
                self.assertTrue(os.path.exists(os.path.join(tmpdir, name)))
            columns = read_metrics_csv(os.path.join(tmpdir, "metrics.csv"))
            self.assertEqual(columns["epoch"], [1.0, 2.0])
            model, manifest, adam = load_model_checkpoint(os.path.join(tmpdir, "final.qpxc"))
        self.assertEqual(manifest["epoch"], 2)
        self.assertEqual(adam.step, 4)
        for a, b in zip(model.tensors, result.model.tensors):
            np.testing.assert_array_equal(a, b)

    def test_circuit_training_run(self):
        config = config_from_profile(None, seed=0, model="circuit", m_img=0, m_class=1, epochs=1,
                                     batch_size=2, image_size=(2, 2))
        result = train(config, self._dataset(2, 4, size=2), self._dataset(3, 4, size=2))
        self.assertEqual(len(result.history), 1)
        self.assertEqual(result.model.circuit.n_qubits, 3)
        self.assertTrue(0.0 <= result.best100 <= 1.0)

    def _one_epoch_loss_drop(self, config, data, logit_scale):
        inputs = prepare_inputs(config, data.images)
        model = build_model(config, inputs[0], data.num_labels)
        before, _, _ = batch_loss_and_gradients(model, inputs, data.labels, logit_scale, config.l2)
        result = fit(config, model, inputs, data.labels, inputs, data.labels, data.num_labels, logit_scale)
        after, _, _ = batch_loss_and_gradients(result.model, inputs, data.labels, logit_scale, config.l2)
        self.assertLess(after, before)

    def test_one_epoch_lowers_mps_loss(self):
        config = config_from_profile(None, seed=0, model="mps", chi_img=2, chi_class=2, epochs=1,
                                     batch_size=2, learning_rate=1e-5, image_size=(4, 4))
        self._one_epoch_loss_drop(config, self._dataset(7, 2), 1.0)

    def test_one_epoch_lowers_circuit_loss(self):
        config = config_from_profile(None, seed=0, model="circuit", m_img=0, m_class=1, epochs=1,
                                     batch_size=2, learning_rate=1e-5, image_size=(2, 2))
        self._one_epoch_loss_drop(config, self._dataset(8, 2, size=2), 4.0)

    def test_training_is_deterministic(self):
        config = config_from_profile(None, seed=5, chi_img=2, chi_class=2, epochs=1, batch_size=3)
        first = train(config, self._dataset(4, 6), self._dataset(5, 2))
        second = train(config, self._dataset(4, 6), self._dataset(5, 2))
        for a, b in zip(first.model.tensors, second.model.tensors):
            np.testing.assert_array_equal(a, b)

    def test_empty_training_set(self):
        config = config_from_profile(None, seed=0, epochs=1)
        empty = Dataset(np.zeros((0, 4, 4)), np.zeros(0, dtype=np.int64), num_labels=2)
        with self.assertRaises(DomainError):
            train(config, empty, self._dataset(6, 2))

    def test_circuit_checkpoint_round_trip(self):
        model = init_circuit_classifier(4, 1, 10, seed=3)
        config = config_from_profile(None, seed=0, model="circuit")
        history = [EpochMetrics(1, 2.0, 0.5, 0.25)]
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_model_checkpoint(os.path.join(tmpdir, "c.qpxc"), model, config, 1, history)
            loaded, manifest, adam = load_model_checkpoint(path)
        self.assertIsNone(adam)
        self.assertEqual(manifest["metrics"]["best_test_accuracy"], 0.25)
        np.testing.assert_array_equal(loaded.circuit.params, model.circuit.params)
        self.assertEqual(loaded.label_qubits, model.label_qubits)

    def test_metrics_csv_round_trip(self):
        history = [EpochMetrics(1, 0.1, 0.5, 1.0 / 3.0)]
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_metrics_csv(os.path.join(tmpdir, "metrics.csv"), history)
            columns = read_metrics_csv(path)
        self.assertEqual(columns["test_acc"], [1.0 / 3.0])


def banded_dataset(seed, count, size=16, num_labels=3):
    """Class ``k`` lights up the ``k``-th horizontal band of the image."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % num_labels
    images = rng.uniform(0.0, 0.2, size=(count, size, size))
    band = size // num_labels
    for index, label in enumerate(labels):
        images[index, label * band:(label + 1) * band, :] += 0.7
    return Dataset(images, labels, num_labels=num_labels)


@unittest.skipUnless(os.getenv("QPIX_DESK_SCALE"), "set QPIX_DESK_SCALE=1 to run desk-scale training")
class TestDeskScale(unittest.TestCase):
    """desk3-sized runs on synthetic three-class 16x16 images; minutes, not seconds."""

    def _accuracies(self, **overrides):
        config = config_from_profile("desk3", seed=0, **overrides)
        result = train(config, banded_dataset(0, 300), banded_dataset(1, 150))
        return [m.test_acc for m in result.history]

    def test_mps_classifier(self):
        accuracies = self._accuracies(model="mps", epochs=15)
        self.assertGreaterEqual(max(accuracies), 0.9)

    def test_circuit_classifier(self):
        accuracies = self._accuracies(model="circuit", m_img=0, epochs=10)
        self.assertGreaterEqual(max(accuracies), 0.8)


if __name__ == '__main__':
    unittest.main()
