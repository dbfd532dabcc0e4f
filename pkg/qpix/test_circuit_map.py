"""Unit tests for the MPS <-> sequential circuit conversions."""

import json
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from qpix.circuit_map import (
    circuit_to_gate_list,
    gate_list_json,
    layered_circuit_to_mps,
    mps_to_staircase,
    peel_layers,
    staircase_to_layer,
    staircase_to_statevector,
)
from qpix.errors import PreconditionError, ShapeError
from qpix.frqi import encode_frqi
from qpix.mps import MPS, entanglement_entropy, from_statevector, random_mps, to_statevector
from qpix.seq_circuit import apply_circuit, init_circuit, zero_state
from qpix.tensors import unitarity_deviation


class TestStaircase(unittest.TestCase):

    def _assert_prepares(self, m):
        unitaries = mps_to_staircase(m)
        self.assertEqual(len(unitaries), len(m))
        for u in unitaries:
            self.assertLess(unitarity_deviation(u.matrix), 1e-10)
        psi = staircase_to_statevector(unitaries, len(m))
        np.testing.assert_allclose(psi, to_statevector(m), atol=1e-9)
        return unitaries

    def test_bond_dimension_two(self):
        unitaries = self._assert_prepares(random_mps(5, 2, np.random.default_rng(0)))
        self.assertTrue(all(u.span == 2 for u in unitaries))
        self.assertEqual([u.first_qubit for u in unitaries], [0, 1, 2, 3, 3])

    def test_bond_dimension_four(self):
        unitaries = self._assert_prepares(random_mps(6, 4, np.random.default_rng(1)))
        self.assertTrue(all(u.span == 3 for u in unitaries))

    def test_bond_dimension_not_a_power_of_two(self):
        self._assert_prepares(random_mps(6, 3, np.random.default_rng(2)))

    def test_frqi_image(self):
        pixels = np.random.default_rng(3).uniform(size=16)
        m, _ = from_statevector(encode_frqi(pixels), chi_max=4)
        self._assert_prepares(m)

    def test_rejects_non_canonical(self):
        rng = np.random.default_rng(4)
        m = MPS([rng.normal(size=(1, 2, 2)), rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 1))])
        with self.assertRaises(PreconditionError):
            mps_to_staircase(m)

    def test_rejects_qutrits(self):
        m = MPS([np.ones((1, 3, 1)) / np.sqrt(3.0)])
        with self.assertRaises(ShapeError):
            mps_to_staircase(m)

    def test_gate_list_json(self):
        unitaries = mps_to_staircase(random_mps(4, 2, np.random.default_rng(5)))
        doc = json.loads(gate_list_json(unitaries))
        self.assertEqual(doc["version"], 1)
        self.assertEqual(len(doc["gates"]), 4)
        first = doc["gates"][0]
        matrix = np.array(first["matrix"])
        np.testing.assert_allclose(matrix[..., 0] + 1j * matrix[..., 1], unitaries[0].matrix)


class TestLayer(unittest.TestCase):

    def test_staircase_to_layer_prepares_state(self):
        m = random_mps(5, 2, np.random.default_rng(6))
        c = staircase_to_layer(mps_to_staircase(m), 5)
        self.assertEqual((c.layers, c.n_gates, c.role), (1, 4, "img"))
        psi = apply_circuit(c, zero_state(5))
        self.assertAlmostEqual(abs(np.vdot(to_statevector(m), psi)) ** 2, 1.0, places=9)

    def test_wide_staircase_rejected(self):
        unitaries = mps_to_staircase(random_mps(5, 4, np.random.default_rng(7)))
        with self.assertRaises(PreconditionError):
            staircase_to_layer(unitaries, 5)


class TestLayeredCircuitToMps(unittest.TestCase):

    def test_matches_simulation(self):
        c = init_circuit(6, 2, np.random.default_rng(8), role="img", scale=1.0)
        m = layered_circuit_to_mps(c)
        self.assertLessEqual(m.chi, 4)
        np.testing.assert_allclose(to_statevector(m), apply_circuit(c, zero_state(6)), atol=1e-10)

    def test_readout_tail(self):
        c = init_circuit(5, 1, np.random.default_rng(9), readout_tail=True, scale=1.0)
        m = layered_circuit_to_mps(c)
        np.testing.assert_allclose(to_statevector(m), apply_circuit(c, zero_state(5)), atol=1e-10)

    def test_round_trip_through_staircase(self):
        c = init_circuit(4, 1, np.random.default_rng(10), role="img", scale=1.0)
        m = layered_circuit_to_mps(c)
        back = staircase_to_layer(mps_to_staircase(m), 4)
        fidelity = abs(np.vdot(apply_circuit(c, zero_state(4)), apply_circuit(back, zero_state(4)))) ** 2
        self.assertAlmostEqual(fidelity, 1.0, places=9)

    def test_circuit_gate_list(self):
        c = init_circuit(3, 1, np.random.default_rng(11))
        gates = circuit_to_gate_list(c)
        self.assertEqual([g.first_qubit for g in gates], [0, 1])
        psi = staircase_to_statevector(gates, 3)
        np.testing.assert_allclose(psi, apply_circuit(c, zero_state(3)), atol=1e-12)


class TestCircuitEntanglement(unittest.TestCase):

    def test_entropy_grows_at_most_ln2_per_layer(self):
        n = 7
        for layers in (1, 2, 3):
            c = init_circuit(n, layers, np.random.default_rng(20 + layers), role="img", scale=np.pi)
            psi = apply_circuit(c, zero_state(n))
            m, error = from_statevector(psi)
            self.assertLess(error, 1e-10)
            for cut in range(n - 1):
                s = np.linalg.svd(psi.reshape(2 ** (cut + 1), -1), compute_uv=False)
                self.assertLessEqual(int(np.count_nonzero(s > 1e-10 * s[0])), 2 ** layers)
                self.assertLessEqual(entanglement_entropy(m, cut), layers * np.log(2.0) + 1e-9)

    def test_single_layer_state_has_bond_dimension_two(self):
        c = init_circuit(6, 1, np.random.default_rng(30), role="img", scale=np.pi)
        psi = apply_circuit(c, zero_state(6))
        m, error = from_statevector(psi, chi_max=2)
        self.assertLess(error, 1e-10)
        self.assertLessEqual(m.chi, 2)


class TestPeelLayers(unittest.TestCase):

    def test_one_layer_circuit_is_recovered(self):
        planted = init_circuit(6, 1, np.random.default_rng(40), role="img", scale=np.pi)
        target = apply_circuit(planted, zero_state(6))
        c = peel_layers(target, 1)
        self.assertEqual((c.n_qubits, c.layers, c.role), (6, 1, "img"))
        self.assertAlmostEqual(abs(np.vdot(target, apply_circuit(c, zero_state(6)))) ** 2, 1.0, places=9)

    def test_extra_layers_stay_exact(self):
        m = random_mps(5, 2, np.random.default_rng(41))
        target = to_statevector(m)
        c = peel_layers(target, 3)
        self.assertEqual(c.params.shape, (12, 15))
        self.assertAlmostEqual(abs(np.vdot(target, apply_circuit(c, zero_state(5)))) ** 2, 1.0, places=9)


if __name__ == '__main__':
    unittest.main()
