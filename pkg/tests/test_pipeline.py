import json

import numpy as np  # noqa: F401  (used throughout)
import pytest
import torch

from ebmdmo.ebm import EnergyModel
from ebmdmo.encoder import EncoderConfig
from ebmdmo.errors import EmptyDataset
from ebmdmo.motion import Camera, Trajectory
from ebmdmo.optimizers import OptimizerSpec
from ebmdmo.pipeline import PredictionConfig, predict, retrieve_candidates
from ebmdmo.refiner import MotionRefiner

TINY = EncoderConfig(image_size=8, base_channels=4, feat_channels=8,
                     pose_hidden=8, pose_feat=8, d_model=16, layers=1,
                     heads=2, ffn=16, patch=4, horizon=3)
CAM = Camera(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)


class FixedEnergies:
    """Model stub with prescribed retrieval energies; refined motions score
    by their first-coordinate value (so tests can steer final ranking)."""

    def __init__(self, energies):
        self.energies = list(energies)
        self.feature_calls = 0

    def features(self, images):
        self.feature_calls += 1
        return torch.zeros(1, 1, 1, 1)

    def energy_batch(self, image, motions, cam):
        return list(self.energies[: len(motions)])

    def energies_from_features(self, feat, motions, cam):
        if motions.shape[1] == len(self.energies):
            return torch.tensor([self.energies], dtype=motions.dtype)
        return motions[..., 0, 0].clone()


def make_traj(seed=0, t1=4):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-0.2, 0.2, (t1, 11)).astype(np.float32)
    vals[:, 2] = rng.uniform(0.5, 0.9, t1)
    vals[:, 9] = rng.uniform(0.2, 0.8, t1)
    vals[:, 10] = np.arange(t1) / (t1 - 1)
    return Trajectory(vals)


def dummy_image():
    return np.zeros((8, 8, 4), dtype=np.float32)


class TestRetrieve:
    def test_tie_broken_by_lower_id(self):
        # scores (-E) = [-1, 3, 2, 2]  ->  E = [1, -3, -2, -2]
        model = FixedEnergies([1.0, -3.0, -2.0, -2.0])
        pool = [make_traj(s) for s in range(4)]
        out = retrieve_candidates(model, dummy_image(), pool, 2, CAM)
        assert [i for i, _ in out] == [1, 2]

    def test_full_pool_sorted(self):
        model = FixedEnergies([0.4, 0.1, 0.3, 0.2])
        pool = [make_traj(s) for s in range(4)]
        out = retrieve_candidates(model, dummy_image(), pool, 4, CAM)
        assert [i for i, _ in out] == [1, 3, 2, 0]

    def test_matches_bruteforce_sort_prefix(self):
        rng = np.random.default_rng(0)
        energies = rng.standard_normal(30).tolist()
        model = FixedEnergies(energies)
        pool = [make_traj(s) for s in range(30)]
        out = retrieve_candidates(model, dummy_image(), pool, 8, CAM)
        oracle = sorted(range(30), key=lambda i: (energies[i], i))[:8]
        assert [i for i, _ in out] == oracle

    def test_empty_pool(self):
        with pytest.raises(EmptyDataset):
            retrieve_candidates(FixedEnergies([]), dummy_image(), [], 1, CAM)

    def test_n_exceeds_pool(self):
        model = FixedEnergies([0.0, 1.0])
        with pytest.raises(ValueError):
            retrieve_candidates(model, dummy_image(),
                                [make_traj(0), make_traj(1)], 3, CAM)


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    ebm = EnergyModel(TINY).eval()
    refiner = MotionRefiner(TINY).eval()  # zero head: identity refiner
    return ebm, refiner


class TestPredictWithRealModels:
    def test_retrieval_only_returns_best_unmodified(self, models):
        ebm, _ = models
        pool = [make_traj(s) for s in range(6)]
        config = PredictionConfig(n=1, rounds=0)
        result = predict(ebm, dummy_image(), pool, config, CAM,
                         np.random.default_rng(0))
        energies = ebm.energy_batch(dummy_image(), pool, CAM)
        best = int(np.argmin(energies))
        assert result.candidates[0].source_id == best
        assert np.array_equal(result.best.values, pool[best].values)
        assert result.best_energy == result.candidates[0].final_energy

    def test_identity_refiner_matches_retrieval_only(self, models):
        ebm, refiner = models
        pool = [make_traj(s) for s in range(6)]
        rng = np.random.default_rng(1)
        with_ref = predict(ebm, dummy_image(), pool,
                           PredictionConfig(n=3, rounds=2), CAM, rng,
                           refiner=refiner)
        without = predict(ebm, dummy_image(), pool,
                          PredictionConfig(n=3, rounds=0), CAM,
                          np.random.default_rng(1))
        assert np.array_equal(with_ref.best.values, without.best.values)
        assert abs(with_ref.best_energy - without.best_energy) < 1e-6

    def test_feature_map_computed_once_per_model(self, models):
        ebm, refiner = models
        pool = [make_traj(s) for s in range(8)]
        e0, r0 = ebm.feature_calls, refiner.feature_calls
        predict(ebm, dummy_image(), pool, PredictionConfig(n=4, rounds=3),
                CAM, np.random.default_rng(2), refiner=refiner)
        assert ebm.feature_calls == e0 + 1
        assert refiner.feature_calls == r0 + 1

    def test_best_energy_is_min_of_candidates(self, models):
        ebm, refiner = models
        pool = [make_traj(s) for s in range(8)]
        result = predict(ebm, dummy_image(), pool, PredictionConfig(n=5, rounds=1),
                         CAM, np.random.default_rng(3), refiner=refiner)
        finals = [c.final_energy for c in result.candidates]
        assert result.best_energy == min(finals)

    def test_langevin_baseline_runs(self, models):
        ebm, _ = models
        pool = [make_traj(s) for s in range(5)]
        spec = OptimizerSpec(kind="langevin", step_size=1e-3, iterations=3)
        result = predict(ebm, dummy_image(), pool,
                         PredictionConfig(n=2, rounds=1, optimizer=spec),
                         CAM, np.random.default_rng(4))
        assert len(result.candidates) == 2
        assert np.isfinite(result.best_energy)

    def test_missing_refiner_rejected(self, models):
        ebm, _ = models
        pool = [make_traj(s) for s in range(3)]
        with pytest.raises(ValueError):
            predict(ebm, dummy_image(), pool, PredictionConfig(n=2, rounds=1),
                    CAM, np.random.default_rng(5))


class TestSelectionRules:
    def test_argmin_invariant_to_constant_shift(self):
        pool = [make_traj(s) for s in range(4)]
        base = [0.5, 0.1, 0.9, 0.4]
        picks = []
        for shift in (0.0, 100.0):
            model = FixedEnergies([e + shift for e in base])
            result = predict(model, dummy_image(), pool,
                             PredictionConfig(n=4, rounds=0), CAM,
                             np.random.default_rng(0))
            picks.append(result.candidates[0].source_id)
        assert picks[0] == picks[1] == 1

    def test_tie_resolves_to_lowest_candidate_index(self):
        pool = [make_traj(s) for s in range(4)]
        model = FixedEnergies([0.3, 0.3, 0.3, 0.3])
        result = predict(model, dummy_image(), pool,
                         PredictionConfig(n=4, rounds=0), CAM,
                         np.random.default_rng(0))
        assert result.candidates[0].source_id == 0
        assert np.array_equal(result.best.values, pool[0].values)

    def test_full_pool_retrieval_only_is_nearest_by_energy(self):
        pool = [make_traj(s) for s in range(5)]
        energies = [0.7, 0.2, 0.9, 0.1, 0.5]
        model = FixedEnergies(energies)
        result = predict(model, dummy_image(), pool,
                         PredictionConfig(n=5, rounds=0), CAM,
                         np.random.default_rng(0))
        assert result.candidates[0].source_id == int(np.argmin(energies))
        assert np.array_equal(result.best.values, pool[3].values)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PredictionConfig(n=0)
        with pytest.raises(ValueError):
            PredictionConfig(rounds=-1)


class TestSerialization:
    def test_result_json(self):
        torch.manual_seed(0)
        ebm = EnergyModel(TINY).eval()
        pool = [make_traj(s) for s in range(3)]
        result = predict(ebm, dummy_image(), pool, PredictionConfig(n=2, rounds=0),
                         CAM, np.random.default_rng(0))
        doc = json.loads(result.to_json())
        assert set(doc) == {"best_energy", "best", "candidates"}
        assert len(doc["candidates"]) == 2
        assert len(doc["best"]) == 4 and len(doc["best"][0]) == 11
