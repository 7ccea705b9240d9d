import math
import random

import numpy as np
import pytest

from cepshed import (
    Event,
    LoadMonitor,
    MonitorConfig,
    NoShedder,
    SamplingShedder,
    TableShedder,
    TypeHistory,
    UtilityHistogram,
    UtilityTable,
    ZobristKeys,
    aggregate_observations,
    estimate_rho,
    select_threshold,
    utility_map,
)
from cepshed.shedding import PositionShedder
from conftest import make_schema
from test_stats import table2_observations


def ev(seq, type_id=0, ts=None, v1=5.0):
    return Event(seq, float(seq if ts is None else ts), type_id, (v1,))


class TestHistogramThreshold:
    def test_cumulative_rule(self):
        hist = UtilityHistogram([0.2, 0.5, 0.9], [0.40, 0.35, 0.25])
        assert select_threshold(hist, 0.5) == 0.5
        assert select_threshold(hist, 0.40) == 0.2
        assert select_threshold(hist, 0.41) == 0.5

    def test_rho_zero_sentinel(self):
        hist = UtilityHistogram([0.2, 0.5], [0.5, 0.5])
        u_th = select_threshold(hist, 0.0)
        assert u_th == -math.inf
        assert not (0.2 <= u_th)

    def test_rho_one_max(self):
        hist = UtilityHistogram([0.2, 0.5, 0.9], [0.4, 0.35, 0.25])
        assert select_threshold(hist, 1.0) == 0.9

    def test_rho_bounds(self):
        hist = UtilityHistogram([0.2], [1.0])
        with pytest.raises(ValueError):
            select_threshold(hist, -0.1)
        with pytest.raises(ValueError):
            select_threshold(hist, 1.1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            UtilityHistogram([], [])
        with pytest.raises(ValueError):
            UtilityHistogram.from_pairs([], 1e-3)

    def test_quantum_pools_nearby_values(self):
        hist = UtilityHistogram.from_pairs([(0.1001, 1), (0.1004, 1), (0.5, 2)], quantum=1e-3)
        assert len(hist.values) == 2
        # the bucket keeps its max exact utility, so U <= threshold covers it fully
        assert hist.values[0] == 0.1004

    def test_threshold_law_on_training_population(self):
        rng = random.Random(5)
        utilities = [rng.choice([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]) for _ in range(500)]
        hist = UtilityHistogram.from_pairs([(u, 1.0) for u in utilities], 1e-3)
        arr = np.array(utilities)
        for rho in np.linspace(0, 1, 11):
            u_th = select_threshold(hist, float(rho))
            frac = float((arr <= u_th).mean())
            assert frac >= rho - 1e-12
            # minimality at histogram resolution
            below = [v for v in hist.values if v < u_th]
            if below:
                assert float((arr <= below[-1]).mean()) < rho

    def test_payload_round_trip(self):
        hist = UtilityHistogram([0.2, 0.5], [0.6, 0.4])
        back = UtilityHistogram.from_payload(hist.to_payload())
        assert back.values == hist.values
        assert back.cumulative == hist.cumulative


class TestRhoEstimator:
    def test_balanced_load(self):
        assert estimate_rho(10.0, 10.0, 0, 10.0) == 0.0

    def test_double_rate(self):
        assert estimate_rho(20.0, 10.0, 0, 10.0) == pytest.approx(0.5)

    def test_backlog_term(self):
        lam = 14.0
        rho = estimate_rho(lam, 10.0, int(0.1 * lam * 10.0), 10.0)
        assert rho == pytest.approx(1 - 1 / 1.4 + 0.1, abs=1e-9)

    def test_clamped(self):
        assert estimate_rho(100.0, 1.0, 1000, 1.0) == 0.95
        assert estimate_rho(5.0, 10.0, 0, 10.0) == 0.0

    def test_invalid_rates(self):
        with pytest.raises(ValueError):
            estimate_rho(0.0, 1.0, 0, 1.0)


class TestOverloadHysteresis:
    def make_monitor(self):
        return LoadMonitor(MonitorConfig(latency_bound=1.0, drop_interval=5.0))

    def test_engages_at_safety_bound(self):
        m = self.make_monitor()
        m.note_service(0.05)
        m.update(ev(0, ts=0.0), 0.80, 0.8, 4)
        assert m.active

    def test_off_at_zero(self):
        m = self.make_monitor()
        m.update(ev(0, ts=0.0), 0.0, 0.0, 0)
        assert not m.active

    def test_stays_on_inside_band(self):
        m = self.make_monitor()
        m.note_service(0.05)
        m.update(ev(0, ts=0.0), 0.85, 0.85, 4)
        assert m.active
        m.update(ev(1, ts=1.0), 0.60, 1.6, 3)
        assert m.active
        m.update(ev(2, ts=2.0), 0.50, 2.5, 2)
        assert not m.active

    def test_override_always_active(self):
        m = LoadMonitor(MonitorConfig(rho_override=0.3))
        assert m.active and m.rho == 0.3
        m.update(ev(0, ts=0.0), 0.0, 0.0, 0)
        assert m.active and m.rho == 0.3


def build_table_shedder(rho_override=None, default="mean"):
    schema = make_schema(2)
    agg = aggregate_observations(table2_observations())
    utilities = utility_map(agg)
    keys = ZobristKeys(2, 4, [10], seed=1)
    table = UtilityTable.from_stats(agg, utilities, keys, 2, default)
    hist = UtilityHistogram.from_stats(utilities, agg)
    monitor = LoadMonitor(MonitorConfig(latency_bound=1.0, drop_interval=5.0, rho_override=rho_override))
    history = TypeHistory(2, 3, keys=keys)
    return TableShedder(monitor, hist, table, history, schema), keys


class TestDropPath:
    def test_not_overloaded_never_drops(self):
        shedder, _ = build_table_shedder()
        for i in range(20):
            assert shedder.on_dequeue(ev(i, type_id=0, ts=i * 0.1), 0.0, i * 0.1, 0) is False

    def test_drop_at_threshold_inclusive(self):
        # rho = 3/8 -> threshold is the lowest utility (1/3); only U <= 1/3 drops
        shedder, _ = build_table_shedder(rho_override=3 / 8)
        assert shedder.u_th == pytest.approx(1 / 3)
        # craft history (2,1) and attr 8 -> utility 1/3 == threshold -> drop
        for t in (0, 0, 1):
            shedder.history.push(t)
        e = Event(99, 9.9, 0, (9.0,))  # value 9 bins to index 8
        assert shedder.on_dequeue(e, 0.9, 9.9, 1) is True

    def test_higher_utility_kept(self):
        shedder, _ = build_table_shedder(rho_override=3 / 8)
        for t in (0, 1, 1):
            shedder.history.push(t)
        e = Event(99, 9.9, 0, (5.0,))  # key (1,2),bin4 -> utility 2/3 > 1/3
        assert shedder.on_dequeue(e, 0.9, 9.9, 1) is False

    def test_history_advances_even_for_dropped(self):
        shedder, _ = build_table_shedder(rho_override=1.0)
        before = shedder.history.counts
        shedder.on_dequeue(ev(0, type_id=1, ts=0.0), 0.9, 0.0, 0)
        assert shedder.history.counts != before

    def test_drop_path_xor_budget(self):
        shedder, keys = build_table_shedder(rho_override=0.5)
        for i in range(10):
            shedder.on_dequeue(ev(i, type_id=i % 2, ts=i * 0.1), 0.9, i * 0.1, 1)
        before = keys.xor_count
        shedder.on_dequeue(ev(11, type_id=0, ts=1.1), 0.9, 1.1, 1)
        # K = K1 xor K2 costs |attrs|+1; the history shift costs at most 4
        assert keys.xor_count - before <= 4 + 1 + 1

    def test_all_above_threshold_drops_nothing(self):
        shedder, _ = build_table_shedder(rho_override=None)
        shedder.monitor.active = True
        shedder.u_th = -math.inf
        dropped = sum(
            shedder.on_dequeue(ev(i, type_id=i % 2, ts=i * 0.1), 0.9, i * 0.1, 1)
            for i in range(20)
        )
        assert dropped == 0


class TestPositionShedder:
    def test_position_bins(self):
        monitor = LoadMonitor(MonitorConfig(rho_override=0.5))
        hist = UtilityHistogram([0.1, 0.9], [0.5, 0.5])
        utilities = {(0, 0): 0.9, (0, 1): 0.1}
        shedder = PositionShedder(monitor, hist, utilities, [0.5], slide=10.0, position_bin_width=5)
        # window-relative index 7 with width 5 -> bin 1
        for i in range(7):
            shedder.on_dequeue(ev(i, ts=0.1 * i), 0.0, 0.1 * i, 0)
        assert shedder._position(ev(7, ts=0.7)) == 7
        assert shedder._utility(ev(7, ts=0.7)) == 0.1

    def test_counter_resets_each_slide(self):
        monitor = LoadMonitor(MonitorConfig(rho_override=0.0))
        hist = UtilityHistogram([0.5], [1.0])
        shedder = PositionShedder(monitor, hist, {}, [0.5], slide=10.0, position_bin_width=5)
        shedder.on_dequeue(ev(0, ts=9.5), 0.0, 9.5, 0)
        assert shedder._position(ev(1, ts=10.5)) == 0

    def test_uniform_when_no_signal(self):
        # single type, uniform utilities: every event scores the same, so the
        # threshold rule drops everything or nothing depending on rho
        monitor = LoadMonitor(MonitorConfig(rho_override=0.4))
        hist = UtilityHistogram([0.5], [1.0])
        shedder = PositionShedder(monitor, hist, {(0, 0): 0.5}, [0.5], 10.0, 5)
        drops = [shedder.on_dequeue(ev(i, ts=0.01 * i), 0.9, 0.01 * i, 1) for i in range(10)]
        assert all(drops)  # cumulative at the single utility is 1 >= rho


class TestSamplingShedder:
    def test_waterfill_targets_low_scores(self):
        monitor = LoadMonitor(MonitorConfig(rho_override=0.2))
        shedder = SamplingShedder(monitor, shares=[0.75, 0.25], scores=[3.0, 1.0], seed=7)
        probs = shedder.drop_probabilities(0.2)
        assert probs[1] == pytest.approx(0.8)  # 0.2 budget entirely from type B
        assert probs[0] == 0.0

    def test_simulation_drops_only_low_score_type(self):
        monitor = LoadMonitor(MonitorConfig(rho_override=0.2))
        shedder = SamplingShedder(monitor, shares=[0.75, 0.25], scores=[3.0, 1.0], seed=7)
        rng = random.Random(1)
        dropped_types = []
        for i in range(4000):
            t = 0 if rng.random() < 0.75 else 1
            if shedder.on_dequeue(ev(i, type_id=t, ts=0.01 * i), 0.9, 0.01 * i, 1):
                dropped_types.append(t)
        assert dropped_types and set(dropped_types) == {1}
        # overall drop ratio approximates rho
        assert 0.15 < len(dropped_types) / 4000 < 0.25

    def test_waterfill_spills_to_next_type(self):
        monitor = LoadMonitor(MonitorConfig(rho_override=0.5))
        shedder = SamplingShedder(monitor, shares=[0.5, 0.3, 0.2], scores=[5.0, 1.0, 2.0], seed=7)
        probs = shedder.drop_probabilities(0.5)
        assert probs[1] == 1.0  # lowest score fully dropped
        assert probs[2] == 1.0  # next lowest fully dropped
        assert probs[0] == 0.0

    def test_deterministic_given_seed(self):
        def run(seed):
            monitor = LoadMonitor(MonitorConfig(rho_override=0.3))
            s = SamplingShedder(monitor, [1.0], [1.0], seed=seed)
            return [s.on_dequeue(ev(i, ts=0.01 * i), 0.9, 0.01 * i, 1) for i in range(100)]

        assert run(3) == run(3)
        assert run(3) != run(4)


class TestNoShedder:
    def test_never_drops(self):
        s = NoShedder()
        assert not s.on_dequeue(ev(0), 5.0, 0.0, 100)
