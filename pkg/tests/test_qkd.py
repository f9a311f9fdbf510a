import itertools

import numpy as np
import pytest

from fsgsim import apd
from fsgsim.fsg import ControlDiagram, DiagramKind, FsgParams, NotCalibrated
from fsgsim.qkd import (AliceEvent, AliceStream, ClickStream, EveMode, LinkConfig, SiftedKeys, UndefinedRate,
                        eve_knowledge, match_eve_coupling, qber, resolve_double_clicks, run_link, sift,
                        timestamp_unit)
from fsgsim.polarization import H
from fsgsim.rng import stream
from fsgsim.timeline import ns, us

D3 = ControlDiagram(DiagramKind.D3)


def quiet_bank(**kw):
    p = apd.DetectorParams(dark_rate=0.0, eta=1.0, jitter_sigma_geiger=0.0, jitter_sigma_linear=0.0, **kw)
    return apd.symmetric_bank(p)


def keys(a, b, e=None):
    a, b = np.asarray(a, np.int8), np.asarray(b, np.int8)
    return SiftedKeys(a, b, None if e is None else np.asarray(e, np.int8), np.zeros(len(a), bool),
                      np.arange(len(a)))


# -- key statistics --------------------------------------------------------------------

def test_qber_fixtures():
    a = stream(1).integers(0, 2, 1000)
    assert qber(keys(a, a)) == 0.0
    assert qber(keys(a, 1 - a)) == 1.0
    flipped = a.copy()
    flipped[[3, 50, 700]] ^= 1
    assert qber(keys(a, flipped)) == 3 / 1000
    with pytest.raises(UndefinedRate):
        qber(keys([], []))


def test_eve_knowledge_requires_eve():
    with pytest.raises(ValueError):
        eve_knowledge(keys([0, 1], [0, 1]))
    assert eve_knowledge(keys([0, 1], [0, 1], [0, 0])) == 0.5


def test_double_click_rule():
    rg = stream(2)
    assert resolve_double_clicks([0], rg) == (0, False)
    assert resolve_double_clicks([3], rg) == (1, False)
    n = 100_000
    bits = np.array([resolve_double_clicks([0, 1], rg) for _ in range(n)])
    assert bits[:, 1].all()
    # Alice sent 0 every time
    assert bits[:, 0].mean() == pytest.approx(0.5, abs=0.005)
    with pytest.raises(ValueError):
        resolve_double_clicks([0, 2], rg)


def test_alice_event_validation():
    AliceEvent(0, 0, 0, H)
    with pytest.raises(ValueError):
        AliceEvent(0, 1, 0, H)


def test_sift_examples():
    cfg = LinkConfig()
    T = cfg.period
    alice = AliceStream(np.arange(4) * T, np.array([0, 1, 0, 1], np.int8), np.array([0, 0, 1, 1], np.int8))
    # slot 0: correct; slot 1: wrong basis; slot 2: correct; slot 3: H+V double click (wrong basis)
    bob = ClickStream(np.array([0, T, 2 * T, 3 * T, 3 * T]), np.array([0, 2, 2, 0, 1], np.int8),
                      np.zeros(5, np.int8))
    k = sift(alice, bob, 0, cfg, stream(3))
    assert k.slots.tolist() == [0, 2]
    assert k.alice_bits.tolist() == k.bob_bits.tolist() == [0, 0]
    assert k.stats["basis_mismatch_dropped"] == 2
    assert k.stats["double_click_count"] == 1
    # a click outside every coincidence window is dropped and counted
    late = ClickStream(np.array([T // 2]), np.array([0], np.int8), np.zeros(1, np.int8))
    assert sift(alice, late, 0, cfg, stream(3)).stats["unmatched"] == 1


def test_timestamp_unit_latches_and_blocks():
    raw = ClickStream(np.array([0, 2000, ns(50), ns(200)]), np.array([0, 1, 2, 3], np.int8), np.zeros(4, np.int8))
    out = timestamp_unit(raw, ns(3), ns(80))
    assert out.times.tolist() == [0, 0, ns(200)]
    assert out.detectors.tolist() == [0, 1, 3]


# -- link runs -------------------------------------------------------------------------

def test_ideal_link_has_no_errors():
    cfg = LinkConfig(channel_transmittance=1.0)
    r = run_link(cfg, quiet_bank(), n_pulses=50_000, seed=1)
    assert len(r.keys) > 1000
    assert r.stats["qber"] == 0.0


def _dark_floor_oracle(T, eta, p_d):
    """Kept and error probability per slot, by enumerating photon routes and dark patterns."""
    kept = err = 0.0
    s = T * eta
    # Alice sends H (basis 0, bit 0); detectors are H, V, P45, M45
    routes = [(0.5 * s, {0}), (0.25 * s, {2}), (0.25 * s, {3}), (1 - s, set())]
    for pr, photon in routes:
        for darks in itertools.product([0, 1], repeat=4):
            pd = np.prod([p_d if x else 1 - p_d for x in darks])
            clicked = photon | {d for d in range(4) if darks[d]}
            hv, dg = clicked & {0, 1}, clicked & {2, 3}
            if not hv or dg:
                continue
            w = pr * pd
            kept += w
            err += w * (0.5 if len(hv) == 2 else float(hv == {1}))
    return kept, err


def test_dark_count_floor():
    rate = 5e4
    cfg = LinkConfig(channel_transmittance=0.1, timestamp_min_resolution_deadtime=1)
    bank = apd.symmetric_bank(apd.DetectorParams(dark_rate=rate, deadtime=0, jitter_sigma_geiger=0.0,
                                                 jitter_sigma_linear=0.0))
    r = run_link(cfg, bank, n_pulses=2_000_000, seed=4)
    p_d = -np.expm1(-rate * (2 * cfg.coincidence_window + 1) * 1e-12)
    kept, err = _dark_floor_oracle(cfg.channel_transmittance, bank[0].eta, p_d)
    q = err / kept
    n = len(r.keys)
    assert n == pytest.approx(0.5 * 2_000_000 * kept * 2, rel=0.05)
    assert r.stats["qber"] == pytest.approx(q, abs=4 * np.sqrt(q * (1 - q) / n))
    assert q > 0


def test_intercept_resend_quarter_errors():
    # a clock period above the deadtime keeps slots independent, as the 25% count assumes
    cfg = LinkConfig(pulse_rate=500e3, channel_transmittance=0.5, eve_present=True,
                     eve_mode=EveMode.INTERCEPT_RESEND)
    r = run_link(cfg, apd.default_bank(), n_pulses=400_000, seed=5)
    n = len(r.keys)
    assert r.stats["qber"] == pytest.approx(0.25, abs=4 * np.sqrt(0.25 * 0.75 / n))
    assert r.stats["eve_knowledge"] == pytest.approx(0.75, abs=4 * np.sqrt(0.25 * 0.75 / n))


def test_faked_state_needs_calibration():
    cfg = LinkConfig(eve_present=True)
    with pytest.raises(NotCalibrated):
        run_link(cfg, apd.default_bank(), FsgParams(), D3, n_pulses=1000)


def test_d3_attack_is_invisible_in_the_key(d3_fsg):
    cfg = LinkConfig(eve_present=True, eve_input_coupling=0.1)
    r = run_link(cfg, apd.default_bank(), d3_fsg, D3, n_pulses=200_000, seed=6)
    assert r.stats["double_click_count"] == 0
    assert r.stats["qber"] == 0.0
    assert r.stats["eve_knowledge"] == 1.0
    assert not r.keys.double_click_flags.any()


def test_bob_clicks_map_one_to_one_onto_faked_states(d3_fsg):
    cfg = LinkConfig(eve_present=True, eve_input_coupling=0.1)
    r = run_link(cfg, apd.default_bank(), d3_fsg, D3, n_pulses=100_000, seed=7)
    fire = np.sort(r.eve.fire_times)
    k = np.searchsorted(fire, r.bob.times - cfg.coincidence_window)
    k = np.minimum(k, len(fire) - 1)
    assert np.all(np.abs(r.bob.times - fire[k]) <= cfg.coincidence_window)
    assert len(np.unique(k)) == len(k)


def test_yield_scales_with_diagonal():
    # pulse puts the target mid-ramp; the neighbours stay far below silence
    bank = apd.symmetric_bank()
    p = bank[0]
    mid = 0.5 * (p.p_never + p.p_always)
    fsg = FsgParams.from_powers(1e-5, [0.0] * 4, [2 * (mid - 0.25e-5)] * 4)
    cfg = LinkConfig(eve_present=True, eve_input_coupling=0.1)
    r = run_link(cfg, bank, fsg, ControlDiagram(DiagramKind.D2), n_pulses=400_000, seed=8)
    n = r.stats["faked_states"]
    assert r.stats["bob_raw_clicks"] / n == pytest.approx(0.5, abs=4 * np.sqrt(0.25 / n))
    assert r.stats["qber"] == 0.0


def test_rate_matching_helper(d3_fsg):
    cfg = LinkConfig()
    coupling, ratio = match_eve_coupling(cfg, apd.default_bank(), d3_fsg, D3, 200_000, seed=9)
    assert abs(ratio - 1) <= 0.01
    base = run_link(cfg, apd.default_bank(), n_pulses=200_000, seed=9).stats["bob_click_rate_hz"]
    att = run_link(cfg.with_(eve_present=True, eve_input_coupling=coupling), apd.default_bank(), d3_fsg, D3,
                   n_pulses=200_000, seed=9).stats["bob_click_rate_hz"]
    assert att / base == pytest.approx(1.0, abs=0.01)


def test_runs_are_deterministic(d3_fsg):
    cfg = LinkConfig(eve_present=True, eve_input_coupling=0.1)
    a = run_link(cfg, apd.default_bank(), d3_fsg, D3, n_pulses=50_000, seed=10)
    b = run_link(cfg, apd.default_bank(), d3_fsg, D3, n_pulses=50_000, seed=10)
    assert a.stats == b.stats
    assert np.array_equal(a.bob.times, b.bob.times)
    c = run_link(cfg, apd.default_bank(), d3_fsg, D3, n_pulses=50_000, seed=11)
    assert not np.array_equal(a.bob.times[:100], c.bob.times[:100])


def test_attack_deadtimes(d3_fsg):
    cfg = LinkConfig(eve_present=True, eve_input_coupling=0.1)
    r = run_link(cfg, apd.default_bank(), d3_fsg, D3, n_pulses=300_000, seed=12)
    from fsgsim.metrics import interval_minima
    m = interval_minima(r.bob.times, r.bob.detectors)
    diag = np.diag(m)
    off = m[~np.eye(4, dtype=bool)]
    assert diag[diag >= 0].min() >= us(1)
    assert off[off >= 0].min() >= cfg.timestamp_cross_deadtime
