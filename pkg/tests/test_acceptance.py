"""End-to-end acceptance gates. Each test prints an explicit PASS line with
the measured values so a full run doubles as an acceptance report.

The closed-loop and five-seed comparison gates train at full fidelity
(500 epochs); expect roughly 60-90 minutes of wall clock for the module.
"""
import itertools
import math

import numpy as np
import pytest

from bica import alignment as al
from bica import gridworld as gw
from bica import harness as hn
from bica import metrics as mt
from bica import navigator as nav
from bica import protocol as pr
from bica import surrogate as su
from bica import trainer as tr
from bica.neural import finite_difference_grad, softmax

MAIN_SEEDS = (13, 42, 15213, 2025, 4096)


def ok(name: str, detail: str) -> None:
    print(f"PASS  {name}: {detail}")


# -- exact arithmetic gates ---------------------------------------------------

def test_reward_arithmetic_exact():
    cases = [
        (gw.StepEvents(True, False, False), 0, -1.0),
        (gw.StepEvents(False, True, False), 0, -6.0),
        (gw.StepEvents(True, False, True), 0, 49.0),
        (gw.StepEvents(True, False, False), 3, -1.15),
        (gw.StepEvents(False, True, True), 4, 43.8),
    ]
    for events, tokens, want in cases:
        got = gw.compute_reward(events, tokens)
        assert got == pytest.approx(want, abs=0.0), (events, tokens)
    ok("reward arithmetic", f"{len(cases)} exact cases")


def test_w2_brute_force_oracle():
    worst = 0.0
    for n in range(2, 7):
        rng = np.random.default_rng(n)
        for _ in range(4):
            A = rng.normal(size=(n, 3))
            B = rng.normal(size=(n, 3)) + 0.5
            diff = A[:, None, :] - B[None, :, :]
            cost = np.einsum("ijk,ijk->ij", diff, diff)
            best = min(cost[np.arange(n), p].sum()
                       for p in itertools.permutations(range(n))) / n
            got = al.wasserstein2_sq(A, B)
            worst = max(worst, abs(got - best) / max(abs(best), 1.0))
    assert worst < 1e-9
    ok("W2 brute-force oracle", f"n<=6 worst rel err {worst:.2e}")


def test_cca_linear_and_null():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 6))
    Y = X @ (rng.normal(size=(6, 6)) + 3 * np.eye(6))
    rho_lin = al.cca_corr(X, Y, ridge=0.0)
    assert abs(rho_lin - 1.0) < 1e-6
    rho_null = al.cca_corr(rng.normal(size=(2000, 5)),
                           rng.normal(size=(2000, 5)))
    assert rho_null < 0.2
    ok("CCA", f"linear rho={rho_lin:.8f}, null rho={rho_null:.3f}")


def test_gumbel_softmax_gradient():
    rng = np.random.default_rng(1)
    worst = 0.0
    for tau in (0.5, 1.0, 2.0):
        logits = rng.normal(size=6)
        g = pr.sample_gumbel(6, rng)
        w = rng.normal(size=6)
        relaxed = pr.gumbel_softmax(logits, tau, g)
        analytic = pr.gumbel_softmax_backward(relaxed, tau, w)
        numeric = finite_difference_grad(
            lambda lg: float(w @ pr.gumbel_softmax(lg, tau, g)), logits)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))))
    assert worst < 1e-4
    ok("Gumbel-Softmax gradient", f"worst abs err {worst:.2e}")


def test_hinge_and_dual_closed_form():
    assert tr.kl_budget_penalty(0.08, 0.05, 2.0) == pytest.approx(0.06)
    assert tr.kl_budget_penalty(0.03, 0.05, 2.0) == 0.0
    b = tr.BudgetState(lambda_a=0.0, lambda_h=0.3, eta_lambda=0.1)
    b = tr.dual_update(b, 0.02, -0.04)
    assert b.lambda_a == pytest.approx(0.002)
    assert b.lambda_h == pytest.approx(0.296)
    b = tr.dual_update(b, -1.0, -1.0)
    assert b.lambda_a == 0.0
    ok("hinge penalty + dual ascent", "closed-form sequences match")


def test_ib_equals_plug_in_mi():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        cond = softmax(rng.normal(size=(12, 9)) * 2)
        joint = cond / cond.shape[0]
        px = joint.sum(axis=1, keepdims=True)
        pm = joint.sum(axis=0, keepdims=True)
        mi = float(np.sum(joint * np.log(joint / (px @ pm))))
        worst = max(worst, abs(pr.ib_loss(cond) - mi))
    assert worst < 1e-9
    two_point = pr.ib_loss(np.eye(2))
    assert two_point == pytest.approx(math.log(2), abs=1e-12)
    ok("information bottleneck",
       f"plug-in MI worst err {worst:.2e}, two-point = ln 2")


# -- stochastic calibration gates ---------------------------------------------

def test_surrogate_noise_calibration():
    cfg = su.SurrogateConfig()
    n = 20000

    def flip_rate(mode, seed):
        rng = np.random.default_rng(seed)
        flips = 0
        for _ in range(n):
            msg = gw.Message("human", ("N", "J"))
            noisy = su.apply_noise(msg, cfg, mode, rng)
            flips += sum(a != b for a, b in zip(msg.tokens, noisy.tokens))
        return flips / (2 * n)

    nominal = flip_rate("nominal", 0)
    shifted = flip_rate("shifted_unguided", 1)
    assert abs(nominal - 0.05) < 0.01
    assert abs(shifted - 0.10) < 0.01

    rng = np.random.default_rng(2)
    state = su.make_human_state(cfg)
    view = gw.FullView(np.zeros((8, 8), dtype=bool), (4, 4), "N", (1, 6), 0)
    changed = 0
    trials = 5000
    for _ in range(trials):
        state, did = su.update_protocol_table(
            state, "protocol_hint", view, cfg, rng,
            payload="protocol:direction")
        changed += did
    mean = trials * cfg.p_update
    sigma = math.sqrt(trials * cfg.p_update * (1 - cfg.p_update))
    assert abs(changed - mean) <= 3 * sigma
    ok("surrogate noise calibration",
       f"nominal {nominal:.4f}, shifted {shifted:.4f}, "
       f"updates {changed}/{trials} within 3 sigma of {mean:.0f}")


# -- published-table replays --------------------------------------------------

def test_headline_statistics_replay():
    d = mt.cohens_d_from_summary(85.5, 4.5, 70.3, 5.7)
    assert abs(d - 2.97) < 0.02
    delta = mt.relative_delta_pct(85.5, 70.3)
    assert delta == pytest.approx(21.6, abs=0.05)
    _, p = mt.welch_from_summary(85.5, 4.5, 10, 70.3, 5.7, 10)
    assert p < 0.001
    ok("headline replay",
       f"d={d:.3f}, delta={delta:.2f}%, welch p={p:.2e}")


# -- full-fidelity training gates ---------------------------------------------

@pytest.fixture(scope="module")
def main_runs():
    """Both modes on the five main seeds at full fidelity (500 epochs)."""
    out = {"bica": {}, "baseline": {}}
    for seed in MAIN_SEEDS:
        for mode in ("bica", "baseline"):
            cfg = tr.TrainConfig()
            cfg.mode = mode
            res = tr.train(cfg, seed)
            out[mode][seed] = {
                "sr": float(np.mean([e["sr"] for e in res.log[-20:]])),
                "kl_a": res.log[-1]["kl_a"],
                "kl_h": res.log[-1]["kl_h"],
                "frozen": bool(np.array_equal(res.initial_surrogate_flat,
                                              res.final_surrogate_flat)),
            }
    return out


def test_seed42_closed_loop_respects_budgets(main_runs):
    cfg = tr.TrainConfig()
    row = main_runs["bica"][42]
    assert row["kl_a"] <= 1.1 * cfg.tau_a, row
    assert row["kl_h"] <= 1.1 * cfg.tau_h, row
    ok("seed-42 closed loop",
       f"final KL_A {row['kl_a']:.4f} <= {1.1 * cfg.tau_a:.4f}, "
       f"KL_H {row['kl_h']:.4f} <= {1.1 * cfg.tau_h:.4f}")


def test_main_result_five_seeds(main_runs):
    bica = [main_runs["bica"][s]["sr"] for s in MAIN_SEEDS]
    base = [main_runs["baseline"][s]["sr"] for s in MAIN_SEEDS]
    gap = 100 * (np.mean(bica) - np.mean(base))
    assert gap >= 5.0, (bica, base)
    cmp = mt.compare_runs(bica, base)
    # directional hypothesis: halve the two-sided Welch p
    p_one_sided = cmp.welch_p / 2 if cmp.mean_1 > cmp.mean_2 else 1.0
    assert p_one_sided < 0.1
    ok("main result",
       f"BiCA {np.mean(bica):.3f} vs baseline {np.mean(base):.3f} "
       f"(+{gap:.1f} pts), one-sided Welch p={p_one_sided:.4f}")


def test_baseline_surrogate_bitwise_frozen(main_runs):
    for seed in MAIN_SEEDS:
        assert main_runs["baseline"][seed]["frozen"], seed
    ok("baseline freeze", "surrogate parameters bitwise identical, 5 seeds")


# -- ablation structure -------------------------------------------------------

def test_ablation_emits_table_variants(tmp_path):
    cfg = hn.ExperimentConfig(name="ablation-accept")
    cfg.train.epochs = 2
    cfg.train.pretrain_epochs = 1
    cfg.train.episodes_per_epoch = 4
    cfg.eval_episodes = 4
    cfg.eval_episodes_ood = 4
    rows = hn.run_ablation(cfg, seeds=hn.SEED_PRESETS["ablation"],
                           out_dir=str(tmp_path))
    assert hn.SEED_PRESETS["ablation"] == [42, 2025, 15213]
    assert len(rows) == 16
    assert rows[0]["Variant"] == "default"
    for col in ("SR", "BAS", "CCM", "Avg Steps"):
        assert rows[0][f"delta_{col} [%]"] == 0.0
    assert [r["Variant"] for r in rows[1:]] == \
        [v.name for v in hn.ABLATION_VARIANTS]
    families = {f: sum(r["family"] == f for r in rows)
                for f in ("architecture", "hyperparameter", "co-alignment")}
    assert families == {"architecture": 5, "hyperparameter": 6,
                        "co-alignment": 4}
    ok("ablation grid",
       "default row (deltas 0) + 15 variants on seeds {42, 2025, 15213}")


# -- navigator gates ----------------------------------------------------------

def test_navigator_paired_ordering():
    eff_wins = disc_wins = 0
    details = []
    for seed in range(10):
        g = nav.run_session(seed, n_clicks=60, policy="greedy")
        r = nav.run_session(seed, n_clicks=60, policy="random")
        mg, mr = nav.session_metrics(g), nav.session_metrics(r)
        eff_wins += (mg["exploration_efficiency"]
                     > mr["exploration_efficiency"])
        disc_wins += mg["discovery_rate"] > mr["discovery_rate"]
        details.append((mg["exploration_efficiency"],
                        mr["exploration_efficiency"]))
    assert eff_wins >= 9, details
    assert disc_wins >= 9
    ok("navigator ordering",
       f"greedy wins {eff_wins}/10 efficiency, {disc_wins}/10 discovery")


def test_navigator_vae_objective():
    assert nav.vae_loss(1.0, 0.25) == pytest.approx(2.0)
    assert nav.BETA_VAE == 4.0
    ok("navigator objective", "vae_loss = recon + 4 * kl")
