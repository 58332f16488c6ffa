"""Acceptance criteria, one test per criterion.

Each test prints one PASS/FAIL line (visible with `pytest -s` or in the
captured output of failures) before asserting. Training fixtures run the
real CLI commands at their default budgets; see conftest.py.
"""

import json
import time

import numpy as np
import pytest
import torch

from ebmdmo.cli import main
from ebmdmo.ebm import EnergyModel, contrastive_loss, rank_metric
from ebmdmo.encoder import (
    EncoderConfig,
    MotionImageEncoder,
    sample_bilinear,
)
from ebmdmo.evalharness import cost_report, evaluate, sweep
from ebmdmo.motion import Camera, distance
from ebmdmo.optimizers import OptimizerSpec
from ebmdmo.pipeline import PredictionConfig
from ebmdmo.refiner import MotionRefiner, refiner_loss
from ebmdmo.scenes import load_motions, load_split
from ebmdmo.vae import MotionVae, elbo_loss

from helpers import bilinear_oracle, check_param_grads

pytestmark = pytest.mark.acceptance

TINY = EncoderConfig(image_size=8, base_channels=4, feat_channels=8,
                     pose_hidden=8, pose_feat=8, d_model=16, layers=1,
                     heads=2, ffn=16, patch=4, horizon=3)
TINY_CAM = Camera(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)


def report(tag: str, ok: bool, detail: str) -> None:
    print(f"[{tag}] {'PASS' if ok else 'FAIL'} - {detail}")


def tiny_motions(b=1, m=1, t1=4, seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-0.2, 0.2, (b, m, t1, 11)).astype(np.float32)
    vals[..., 2] = rng.uniform(0.5, 0.9, (b, m, t1))
    vals[..., 9] = rng.uniform(0.2, 0.8, (b, m, t1))
    vals[..., 10] = np.arange(t1) / (t1 - 1)
    return torch.from_numpy(vals)


class TestA1Numerics:
    def test_a1(self):
        t0 = time.perf_counter()
        # bilinear sampling vs brute-force four-corner oracle
        rng = np.random.default_rng(0)
        grid = rng.standard_normal((8, 8, 3)).astype(np.float32)
        feat = torch.from_numpy(grid.transpose(2, 0, 1)).unsqueeze(0)
        max_err = 0.0
        for _ in range(200):
            x, y = rng.uniform(0, 7, 2)
            got = sample_bilinear(feat, torch.tensor([[[x, y]]], dtype=torch.float32))
            max_err = max(max_err, float(np.abs(
                got[0, 0].numpy() - bilinear_oracle(grid, x, y)).max()))
        assert max_err < 1e-6

        torch.manual_seed(0)
        # encoder end-to-end parameter gradients
        enc = MotionImageEncoder(TINY).double()
        head = torch.nn.Linear(16, 1).double()
        images = torch.rand(1, 4, 8, 8, dtype=torch.float64)
        motions = tiny_motions().double()

        def enc_loss():
            v = enc.pose_token_features(enc.features(images), motions, TINY_CAM)
            return head(v.mean(dim=2)).sum()

        check_param_grads(enc_loss, list(enc.parameters()), per_tensor=2)

        # energy-model loss gradient and input gradient
        torch.manual_seed(1)
        ebm = EnergyModel(TINY).double()
        batch = tiny_motions(b=2, m=3, seed=1).double()
        imgs2 = torch.rand(2, 4, 8, 8, dtype=torch.float64)

        def ebm_loss():
            e = ebm.energies_from_features(ebm.features(imgs2), batch, TINY_CAM)
            return contrastive_loss(e, "softmax_contrastive", 0.0)

        check_param_grads(ebm_loss, list(ebm.parameters()), per_tensor=2)

        motion = tiny_motions(seed=2).double().requires_grad_(True)
        feat2 = ebm.features(imgs2[:1])
        energy = ebm.energies_from_features(feat2, motion, TINY_CAM).sum()
        (grad,) = torch.autograd.grad(energy, motion)
        for idx in np.random.default_rng(2).choice(44, size=6, replace=False):
            h = 1e-6
            with torch.no_grad():
                mp = motion.detach().reshape(-1).clone(); mp[idx] += h
                mm = motion.detach().reshape(-1).clone(); mm[idx] -= h
                ep = ebm.energies_from_features(
                    feat2.detach(), mp.reshape(motion.shape), TINY_CAM).sum()
                em = ebm.energies_from_features(
                    feat2.detach(), mm.reshape(motion.shape), TINY_CAM).sum()
            fd = (ep - em).item() / (2 * h)
            an = grad.reshape(-1)[idx].item()
            assert abs(an - fd) <= 1e-2 * max(abs(an), abs(fd), 1e-6)

        # refiner loss gradient (full-backprop mode)
        torch.manual_seed(2)
        refiner = MotionRefiner(TINY).double()
        with torch.no_grad():
            for p in refiner.head.parameters():
                p.copy_(torch.randn(p.shape) * 0.05)
        targets = tiny_motions(b=2, m=1, seed=3)[:, 0].double()
        corrupted = targets + 0.01 * torch.randn(targets.shape).double()
        corrupted[..., 10] = targets[..., 10]
        imgs3 = torch.rand(2, 4, 8, 8, dtype=torch.float64)

        def dmo_loss():
            return refiner_loss(refiner, refiner.features(imgs3), corrupted,
                                targets, TINY_CAM, r_train=2,
                                detach_between_steps=False)

        check_param_grads(dmo_loss, list(refiner.parameters()), per_tensor=2)

        # VAE ELBO gradient
        torch.manual_seed(3)
        from ebmdmo.vae import VaeTrainConfig
        vae = MotionVae(horizon=3, cfg=VaeTrainConfig(
            latent_dim=4, d_model=16, layers=1, heads=2, ffn=16)).double()
        vmotions = tiny_motions(b=3, m=1, seed=4)[:, 0].double()
        eps = torch.randn(3, 4, dtype=torch.float64)

        def vae_loss():
            return elbo_loss(vae, vmotions, eps)[0]

        check_param_grads(vae_loss, list(vae.parameters()), per_tensor=2)

        elapsed = time.perf_counter() - t0
        ok = elapsed < 60.0
        report("A1", ok, f"bilinear oracle max err {max_err:.2e}; all gradient "
                         f"checks within 1e-2; runtime {elapsed:.1f}s < 60s")
        assert ok


class TestA2EbmRank:
    def test_a2(self, reach_data, reach_ebm):
        path, wall = reach_ebm
        model = EnergyModel.load(path)
        test = load_split(reach_data, "test")
        pool = load_motions(reach_data, "train")
        metric = rank_metric(model, test, pool, test[0].camera,
                             np.random.default_rng(202), n_mismatched=100,
                             beat_fraction=0.95)
        ok = metric >= 0.90 and wall <= 900
        report("A2", ok, f"held-out rank metric {metric:.3f} >= 0.90; "
                         f"training {wall:.0f}s <= 900s")
        assert ok


class TestA3DmoContraction:
    def test_a3(self, reach_data, reach_vae, reach_dmo):
        vae = MotionVae.load(reach_vae[0])
        path, wall = reach_dmo
        refiner = MotionRefiner.load(path)
        test = load_split(reach_data, "test")
        cam = test[0].camera
        rng = np.random.default_rng(303)
        before, after, improved = [], [], 0
        for ep in test:
            corrupted = vae.perturb(ep.expert, rng)
            refined = refiner.refine(ep.image, corrupted, cam)
            d0 = distance(ep.expert, corrupted)
            d1 = distance(ep.expert, refined)
            before.append(d0)
            after.append(d1)
            improved += d1 < d0
        reduction = 1.0 - np.mean(after) / np.mean(before)
        frac = improved / len(test)
        ok = reduction >= 0.30 and frac >= 0.80 and wall <= 900
        report("A3", ok, f"mean distance reduction {reduction:.1%} >= 30%; "
                         f"improved {frac:.0%} >= 80%; training {wall:.0f}s <= 900s")
        assert ok


class TestA4Pipeline:
    @pytest.fixture(scope="class")
    def results(self, reach_data, reach_ebm, reach_dmo, pp_data, pp_ebm, pp_dmo):
        out = {}
        langevin = OptimizerSpec(kind="langevin", step_size=0.001, iterations=100)
        for tag, data, ebm_path, dmo_path in (
            ("reach", reach_data, reach_ebm[0], reach_dmo[0]),
            ("pick_place", pp_data, pp_ebm[0], pp_dmo[0]),
        ):
            model = EnergyModel.load(ebm_path)
            refiner = MotionRefiner.load(dmo_path)
            episodes = load_split(data, "test")
            pool = load_motions(data, "train")
            dmo_rep = evaluate(episodes, pool, model,
                               PredictionConfig(n=8, rounds=1), "dmo", seed=44,
                               refiner=refiner)
            lv_rep = evaluate(episodes, pool, model,
                              PredictionConfig(n=8, rounds=1, optimizer=langevin),
                              "langevin", seed=44)
            out[tag] = (dmo_rep.rows[0].success_rate, lv_rep.rows[0].success_rate)
        return out

    def test_a4(self, results):
        reach_dmo_sr, reach_lv_sr = results["reach"]
        pp_dmo_sr, pp_lv_sr = results["pick_place"]
        ok = (
            reach_dmo_sr >= 0.80
            and pp_dmo_sr >= 0.50
            and reach_dmo_sr > reach_lv_sr
            and pp_dmo_sr > pp_lv_sr
        )
        report("A4", ok,
               f"reach: dmo {reach_dmo_sr:.2f} >= 0.80, langevin {reach_lv_sr:.2f}; "
               f"pick_place: dmo {pp_dmo_sr:.2f} >= 0.50, langevin {pp_lv_sr:.2f}; "
               f"dmo strictly better on both")
        assert ok


class TestA5Vae:
    def test_a5(self, reach_data, reach_vae):
        path, wall = reach_vae
        vae = MotionVae.load(path)
        pool = load_motions(reach_data, "train")
        recon = np.mean([distance(m, vae.decode(vae.encode(m).mu)) for m in pool])
        rng = np.random.default_rng(505)
        perturb = np.mean([distance(m, vae.perturb(m, rng)) for m in pool])
        xs = np.stack([m.values for m in pool])[:, :, 0:3]
        dmat = np.linalg.norm(xs[:, None] - xs[None], axis=-1).mean(-1)
        np.fill_diagonal(dmat, np.inf)
        limit = 0.5 * dmat.min(1).mean()
        ok = recon < 0.02 and perturb < limit and wall <= 600
        report("A5", ok, f"reconstruction {recon:.4f}m < 0.02m; perturbation "
                         f"{perturb:.4f}m < 0.5*NN {limit:.4f}m; "
                         f"training {wall:.0f}s <= 600s")
        assert ok


class TestA6EncoderAblation:
    def test_a6(self, reach_data, reach_ebm, reach_dmo, reach_ebm_gap,
                reach_dmo_gap):
        episodes = load_split(reach_data, "test")
        pool = load_motions(reach_data, "train")
        config = PredictionConfig(n=8, rounds=1)
        aligned = evaluate(
            episodes, pool, EnergyModel.load(reach_ebm[0]), config,
            "trajectory_aligned", seed=44,
            refiner=MotionRefiner.load(reach_dmo[0]),
        ).rows[0].success_rate
        gap = evaluate(
            episodes, pool, EnergyModel.load(reach_ebm_gap[0]), config,
            "gap", seed=44, refiner=MotionRefiner.load(reach_dmo_gap[0]),
        ).rows[0].success_rate
        ok = aligned - gap >= 0.20
        report("A6", ok, f"trajectory_aligned {aligned:.2f} vs gap {gap:.2f}; "
                         f"margin {aligned - gap:.2f} >= 0.20")
        assert ok


class TestA7NegativeAblation:
    def test_a7(self, reach_data, reach_ebm, reach_ebm_onlyvae):
        test = load_split(reach_data, "test")
        pool = load_motions(reach_data, "train")
        cam = test[0].camera
        default = rank_metric(EnergyModel.load(reach_ebm[0]), test, pool, cam,
                              np.random.default_rng(707), n_mismatched=100)
        onlyvae = rank_metric(EnergyModel.load(reach_ebm_onlyvae[0]), test, pool,
                              cam, np.random.default_rng(707), n_mismatched=100)
        ok = default - onlyvae >= 0.20
        report("A7", ok, f"default rank {default:.3f} vs only-VAE {onlyvae:.3f}; "
                         f"degradation {default - onlyvae:.3f} >= 0.20")
        assert ok


class TestA8FeatureReuse:
    def test_a8(self, reach_data, reach_ebm):
        model = EnergyModel.load(reach_ebm[0])
        episodes = load_split(reach_data, "test")
        pool = load_motions(reach_data, "train")[:50]
        cam = episodes[0].camera
        calls_before = model.feature_calls
        batch = model.energy_batch(episodes[0].image, pool, cam)
        counter_one = model.feature_calls == calls_before + 1
        singles = [model.energy(episodes[0].image, m, cam) for m in pool[:10]]
        batch_matches = np.allclose(batch[:10], singles, atol=1e-6)
        row = cost_report([reach_ebm[0]]).rows[0]
        macs_ok = row.per_candidate_macs < 0.25 * row.shared_macs
        ok = counter_one and batch_matches and macs_ok
        report("A8", ok,
               f"feature map computed once per batch: {counter_one}; "
               f"batch == mapped singles (1e-6): {batch_matches}; per-candidate "
               f"MACs {row.per_candidate_macs / row.shared_macs:.1%} of shared < 25%")
        assert ok


class TestA9Sweeps:
    def test_a9(self, pp_data, pp_ebm, pp_dmo):
        episodes = load_split(pp_data, "test")
        pool = load_motions(pp_data, "train")
        model = EnergyModel.load(pp_ebm[0])
        refiner = MotionRefiner.load(pp_dmo[0])
        n_values, r_values = [1, 8, 50], [0, 1, 5]
        rep = sweep(episodes, pool, model, refiner, n_values, r_values, seed=99)
        grid = {r.label: r.success_rate for r in rep.rows}
        full = len(rep.rows) == len(n_values) * len(r_values)
        n_trend = grid["n=8,R=1"] >= grid["n=1,R=1"]
        ok = full and n_trend
        report("A9", ok, f"grid rows {len(rep.rows)}/9; "
                         f"success(n=8,R=1)={grid['n=8,R=1']:.2f} >= "
                         f"success(n=1,R=1)={grid['n=1,R=1']:.2f}; "
                         f"R rows (no monotonicity asserted): "
                         + ", ".join(f"{k}={v:.2f}" for k, v in sorted(grid.items())))
        assert ok


class TestA10Determinism:
    def test_a10(self, tmp_path, reach_data, reach_ebm, reach_dmo):
        # gen-data: byte-identical dataset
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-data", "--task", "push_button", "--train", "6",
                         "--test", "2", "--seed", "21", "--out", str(out)]) == 0
        data_same = all(
            (b / p.relative_to(a)).read_bytes() == p.read_bytes()
            for p in sorted(a.rglob("*")) if p.is_file()
            and p.name != "run_config.json"
        )

        # evaluate: metrics bit-identical across reruns (langevin draws noise)
        reports = []
        for out in (tmp_path / "e1", tmp_path / "e2"):
            assert main(["evaluate", "--data", str(reach_data),
                         "--ebm", str(reach_ebm[0]),
                         "--optimizer", "langevin", "--n", "4", "--R", "1",
                         "--episodes", "6", "--seed", "5",
                         "--out", str(out)]) == 0
            doc = json.loads(next(out.glob("eval_*.json")).read_text())
            for row in doc["rows"]:
                row.pop("wall_time_s")
            reports.append(doc["rows"])
        eval_same = reports[0] == reports[1]

        # predict: identical result JSON
        preds = []
        for out in (tmp_path / "p1", tmp_path / "p2"):
            assert main(["predict", "--data", str(reach_data),
                         "--ebm", str(reach_ebm[0]), "--dmo", str(reach_dmo[0]),
                         "--episode", "3", "--n", "4", "--R", "2",
                         "--out", str(out)]) == 0
            preds.append((out / "prediction_0003.json").read_bytes())
        predict_same = preds[0] == preds[1]

        ok = data_same and eval_same and predict_same
        report("A10", ok, f"gen-data bytes identical: {data_same}; evaluate "
                          f"metrics identical: {eval_same}; predict JSON "
                          f"identical: {predict_same}")
        assert ok
