"""The frozen constants must follow from their definitions at high precision."""

import pytest

import oracles

mp = pytest.importorskip("mpmath").mp


def _directional(rows, tau):
    total = mp.mpf(0)
    for i, row in enumerate(rows):
        logits = [mp.mpf(x) / tau for x in row]
        total += mp.log(mp.fsum(mp.exp(v) for v in logits)) - logits[i]
    return total / len(rows)


def test_oracles_rederive():
    mp.dps = 30
    sim = [[mp.mpf(str(x)) for x in row] for row in oracles.SIM_2X2]
    cols = [list(col) for col in zip(*sim)]
    t2v, v2t = _directional(sim, 1), _directional(cols, 1)
    assert abs(t2v - mp.mpf(str(oracles.T2V_2X2))) < 1e-15
    assert abs(v2t - mp.mpf(str(oracles.V2T_2X2))) < 1e-15
    assert abs((t2v + v2t) / 2 - mp.mpf(str(oracles.TOTAL_2X2))) < 1e-15
    assert abs(mp.e / (mp.e + 1) - oracles.SOFTMAX_1_0) < 1e-15
    assert abs(1 / mp.sqrt(2) - oracles.COS_11_10) < 1e-15
    assert abs(mp.log(4) - oracles.LN4) < 1e-15 and abs(mp.log(3) - oracles.LN3) < 1e-15


def test_quoted_constants_do_not_rederive():
    mp.dps = 30
    sim = [[mp.mpf(str(x)) for x in row] for row in oracles.SIM_2X2]
    t2v = _directional(sim, 1)
    assert abs(t2v - mp.mpf(str(oracles.T2V_2X2_QUOTED))) > 1e-3
