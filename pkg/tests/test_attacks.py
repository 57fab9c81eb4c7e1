import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidsub import attacks, nn
from lidsub.attacks import AttackConfig

CW = AttackConfig(kappa=0.0, max_iterations=200, learning_rate=0.1)
EAD = AttackConfig(kappa=0.0, beta=0.1, max_iterations=200, learning_rate=0.01)


@pytest.mark.parametrize("logits, label, kappa, expected", [
    ([3.0, 1.0, 0.5], 0, 0.0, 2.0),
    ([1.0, 5.0], 0, 20.0, -4.0),
    ([1.0, 30.0], 0, 20.0, -20.0),
])
def test_margin_loss(logits, label, kappa, expected):
    assert attacks.margin_loss(logits, label, kappa) == expected


def test_margin_loss_needs_two_classes():
    with pytest.raises(ValueError):
        attacks.margin_loss([1.0], 0, 0.0)


def test_elastic_net_score_examples():
    assert attacks.elastic_net_score(np.zeros(4), 0.1) == 0.0
    assert attacks.elastic_net_score([0.3, -0.4], 0.1) == pytest.approx(0.32, abs=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20))
def test_elastic_net_reduces_to_squared_l2(values):
    d = np.array(values)
    assert attacks.elastic_net_score(d, 0.0) == float(np.sum(d * d))


def test_shrink_examples():
    np.testing.assert_allclose(attacks.shrink([0.58], [0.5], 0.05), [0.53], atol=1e-15)
    np.testing.assert_array_equal(attacks.shrink([0.52], [0.5], 0.05), [0.5])
    np.testing.assert_array_equal(attacks.shrink([1.3, -0.2, 0.4], [0.5, 0.5, 0.5], 0.0), [1.0, 0.0, 0.4])
    with pytest.raises(attacks.ShapeError):
        attacks.shrink([0.1, 0.2], [0.1], 0.1)


def test_cw_succeeds_on_blob_classifier(blob_net, blob_targets):
    x, y = blob_targets
    results = attacks.cw_l2_batch(blob_net, x, y, CW)
    assert np.mean([r.success for r in results]) >= 0.95
    assert all(r.achieved_margin >= 0 for r in results if r.success)


def test_higher_confidence_costs_more_distortion(blob_net, blob_targets):
    x, y = blob_targets
    low = attacks.cw_l2_batch(blob_net, x, y, CW)
    high = attacks.cw_l2_batch(blob_net, x, y, AttackConfig(kappa=10.0, max_iterations=200, learning_rate=0.1))
    both = [i for i in range(len(x)) if low[i].success and high[i].success]
    assert len(both) > len(x) // 2
    assert np.mean([high[i].l2 for i in both]) > np.mean([low[i].l2 for i in both])


def test_misclassified_input_returns_zero_perturbation(blob_net, blobs2d):
    wrong = 1 - nn.predict(blob_net, blobs2d.samples[0])  # any label other than the predicted one
    for fn, cfg in ((attacks.cw_l2_attack, CW), (attacks.ead_attack, EAD)):
        r = fn(blob_net, blobs2d.samples[0], int(wrong) % 3, cfg)
        assert r.success and r.l2 == 0.0 and r.iterations_used == 0


def test_ead_objective_equals_cw_at_zero_beta(blob_net, blobs2d):
    rng = np.random.default_rng(0)
    x, y = blobs2d.samples[3], int(blobs2d.labels[3])
    for _ in range(50):
        d = rng.normal(scale=0.2, size=2)
        c, k = rng.uniform(0.01, 100), rng.uniform(0, 40)
        assert attacks.ead_objective(blob_net, x, d, y, c, k, 0.0) == attacks.cw_objective(blob_net, x, d, y, c, k)


def test_ead_success_and_sparsity(blob_net, blob_targets):
    x, y = blob_targets
    ead = attacks.ead_batch(blob_net, x, y, EAD)
    cw = attacks.cw_l2_batch(blob_net, x, y, CW)
    assert np.mean([r.success for r in ead]) >= 0.95
    assert np.mean([r.l1 for r in ead]) <= np.mean([r.l1 for r in cw])


def test_decision_rules_on_recorded_candidates(blob_net, blob_targets):
    x, y = blob_targets
    cfg = AttackConfig(kappa=0.0, beta=0.1, max_iterations=50, binary_search_steps=5, learning_rate=0.01,
                       record_candidates=True)
    en = attacks.ead_batch(blob_net, x[:10], y[:10], cfg)
    l1 = attacks.ead_batch(blob_net, x[:10], y[:10], AttackConfig(**{**cfg.__dict__, "decision_rule": "L1"}))
    for a, b in zip(en, l1):
        assert len(a.candidates) == len(b.candidates) > 0
        i_en = attacks.select_candidate(a.candidates, a.original, "EN", 0.1)
        i_l1 = attacks.select_candidate(a.candidates, a.original, "L1", 0.1)
        np.testing.assert_array_equal(a.adversarial, a.candidates[i_en].adversarial)
        np.testing.assert_array_equal(b.adversarial, b.candidates[i_l1].adversarial)
        assert b.l1 <= a.l1


def test_result_invariants(blob_net, blob_targets):
    x, y = blob_targets
    for fn, cfg in ((attacks.cw_l2_batch, CW), (attacks.ead_batch, EAD)):
        cfg = AttackConfig(**{**cfg.__dict__, "kappa": 5.0})
        for r in fn(blob_net, x[:20], y[:20], cfg):
            assert np.all((r.adversarial >= 0) & (r.adversarial <= 1))
            assert r.success == (r.achieved_margin >= r.kappa)
            if r.success:
                z = nn.logits(blob_net, r.adversarial)
                assert np.argmax(z) != r.true_label
                recomputed = -attacks.margin_loss(z, r.true_label, np.inf)
                assert recomputed >= r.kappa - 1e-6
            d = r.adversarial - r.original
            assert abs(r.l1 - np.abs(d).sum()) < 1e-9
            assert abs(r.l2 - np.sqrt((d * d).sum())) < 1e-9
            assert abs(r.elastic_net_score - (r.beta * np.abs(d).sum() + (d * d).sum())) < 1e-9


def test_attacks_are_deterministic(blob_net, blob_targets):
    x, y = blob_targets
    for fn, cfg in ((attacks.cw_l2_batch, CW), (attacks.ead_batch, EAD)):
        a = fn(blob_net, x[:8], y[:8], cfg)
        b = fn(blob_net, x[:8], y[:8], cfg)
        for u, v in zip(a, b):
            assert u.adversarial.tobytes() == v.adversarial.tobytes()
            assert (u.success, u.achieved_margin, u.c_used) == (v.success, v.achieved_margin, v.c_used)


def test_failure_returns_best_effort(blob_net, blob_targets):
    x, y = blob_targets
    cfg = AttackConfig(kappa=0.0, max_iterations=1, binary_search_steps=1, c_init=1e-6, learning_rate=1e-4)
    r = attacks.cw_l2_attack(blob_net, x[0], int(y[0]), cfg)
    assert not r.success and r.achieved_margin < 0


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(kappa=-1)
    with pytest.raises(ValueError):
        AttackConfig(c_init=10, c_max=1)
    with pytest.raises(ValueError):
        AttackConfig(decision_rule="L3")
    with pytest.raises(ValueError):
        AttackConfig(box=(1.0, 1.0))


def test_results_csv_and_npz_round_trip(blob_net, blob_targets, tmp_path):
    x, y = blob_targets
    results = attacks.ead_batch(blob_net, x[:4], y[:4], EAD)
    attacks.write_results_csv(results, tmp_path / "a.csv", [10, 11, 12, 13])
    rows = attacks.read_results_csv(tmp_path / "a.csv")
    assert list(rows[0]) == attacks.CSV_COLUMNS
    assert [r["sample_id"] for r in rows] == [10, 11, 12, 13]
    assert rows[2]["l1"] == results[2].l1 and rows[2]["rule"] == "en"
    attacks.save_results_npz(results, tmp_path / "a.npz", [10, 11, 12, 13])
    ids, back = attacks.load_results_npz(tmp_path / "a.npz")
    assert list(ids) == [10, 11, 12, 13]
    for u, v in zip(results, back):
        np.testing.assert_array_equal(u.adversarial, v.adversarial)
        assert (u.success, u.attack, u.rule, u.kappa) == (v.success, v.attack, v.rule, v.kappa)
