import random

import pytest

from cepshed import (
    Event,
    Observation,
    ObservationCollector,
    TypeHistory,
    aggregate_observations,
    utility_map,
)
from cepshed.stats import dump_aggregates_csv
from conftest import make_schema


class TestTypeHistory:
    def test_fig1_counts(self):
        # push R C X R with capacity 4 -> counts (2, 1, 1)
        h = TypeHistory(3, 4)
        for t in (0, 1, 2, 0):
            h.push(t)
        assert h.counts == (2, 1, 1)

    def test_one_hot_on_first_push(self):
        h = TypeHistory(3, 4)
        h.push(2)
        assert h.counts == (0, 0, 1)

    def test_eviction(self):
        h = TypeHistory(2, 2)
        assert h.push(0) is None
        assert h.push(1) is None
        assert h.push(1) == 0
        assert h.counts == (0, 2)

    @pytest.mark.parametrize("length", [1, 10, 200])
    def test_recount_oracle(self, length):
        rng = random.Random(42 + length)
        h = TypeHistory(4, length)
        window = []
        for _ in range(3000):
            t = rng.randrange(4)
            h.push(t)
            window.append(t)
            window = window[-length:]
            expected = tuple(window.count(i) for i in range(4))
            assert h.counts == expected

    def test_count_bins(self):
        h = TypeHistory(2, 10, count_bin_size=3)
        for _ in range(5):
            h.push(0)
        assert h.counts == (5, 0)
        assert h.count_bins == (1, 0)


def obs(type_id, counts, attr_bin, credits):
    return Observation(0, type_id, tuple(counts), (attr_bin,), tuple(credits))


def table2_observations(weight=1.0):
    """The worked statistics example: eight observations of one event type."""
    rows = [
        ((1, 2), 5, [weight]),
        ((1, 2), 5, []),
        ((1, 2), 5, [weight]),
        ((2, 1), 7, []),
        ((2, 1), 7, [weight]),
        ((2, 1), 8, []),
        ((2, 1), 8, []),
        ((2, 1), 8, [weight]),
    ]
    return [
        Observation(i, 0, counts, (attr,), tuple(credits))
        for i, (counts, attr, credits) in enumerate(rows)
    ]


class TestAggregation:
    def test_worked_example_groups(self):
        agg = aggregate_observations(table2_observations())
        assert agg[(0, (1, 2), (5,))] == (2.0, 3)
        assert agg[(0, (2, 1), (7,))] == (1.0, 2)
        assert agg[(0, (2, 1), (8,))] == (1.0, 3)

    def test_worked_example_utilities(self):
        utilities = utility_map(aggregate_observations(table2_observations()))
        assert utilities[(0, (1, 2), (5,))] == pytest.approx(2 / 3)
        assert utilities[(0, (2, 1), (7,))] == pytest.approx(1 / 2)
        assert utilities[(0, (2, 1), (8,))] == pytest.approx(1 / 3)
        rounded = sorted(round(u, 2) for u in utilities.values())
        assert rounded == [0.33, 0.5, 0.67]

    def test_empty(self):
        assert aggregate_observations([]) == {}

    def test_weights_scale_mass_linearly(self):
        agg1 = aggregate_observations(table2_observations(1.0))
        agg2 = aggregate_observations(table2_observations(2.0))
        for key, (m, o) in agg1.items():
            m2, o2 = agg2[key]
            assert m2 == pytest.approx(2 * m)
            assert o2 == o

    def test_order_independent(self):
        rows = table2_observations()
        rng = random.Random(3)
        for _ in range(5):
            shuffled = rows[:]
            rng.shuffle(shuffled)
            assert aggregate_observations(shuffled) == aggregate_observations(rows)

    def test_occurrences_sum_to_observation_count(self):
        agg = aggregate_observations(table2_observations())
        assert sum(o for _, o in agg.values()) == 8

    def test_duplication_invariance(self):
        rows = table2_observations()
        u1 = utility_map(aggregate_observations(rows))
        u2 = utility_map(aggregate_observations(rows + rows))
        assert u1 == u2

    def test_zero_mass_group(self):
        utilities = utility_map({(0, (1,), (0,)): (0.0, 5)})
        assert utilities[(0, (1,), (0,))] == 0.0

    def test_multi_contribution_exceeds_one(self):
        rows = [obs(0, (1,), 0, [1.0, 1.0])] * 4
        utilities = utility_map(aggregate_observations(rows))
        assert utilities[(0, (1,), (0,))] == pytest.approx(2.0)


class TestCollector:
    def test_snapshot_excludes_event_and_credits_arrive_late(self):
        schema = make_schema(2)
        collector = ObservationCollector(schema, {"q": 1.5})
        history = TypeHistory(2, 4)
        events = [Event(i, float(i), i % 2, (float(i + 1),)) for i in range(4)]
        for e in events:
            collector.observe(e, history.count_bins)
            history.push(e.type_id)

        from cepshed.engine import ABANDON_NEGATION, ComplexEvent, Notification, ProcessResult

        result = ProcessResult(
            complex_events=[ComplexEvent("q", 0, (0, 2), 1.5)],
            notifications=[Notification(ABANDON_NEGATION, "q", 0, 9, (0,), cause_seq=1)],
        )
        collector.credit(result)
        rows = collector.finalize()
        assert rows[0].count_bins == (0, 0)  # before any push
        assert rows[1].count_bins == (1, 0)
        assert rows[0].credits == (1.5,)
        assert rows[1].credits == (1.5,)  # abandonment credit at pattern weight
        assert rows[3].credits == ()

    def test_limit(self):
        schema = make_schema(2)
        collector = ObservationCollector(schema, limit=2)
        history = TypeHistory(2, 4)
        for i in range(5):
            collector.observe(Event(i, float(i), 0, (1.0,)), history.count_bins)
        assert len(collector) == 2


class TestCsvDump(object):
    def test_dump(self, tmp_path):
        schema = make_schema(2)
        agg = aggregate_observations(table2_observations())
        path = tmp_path / "sg.csv"
        dump_aggregates_csv(str(path), agg, schema)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "type,count_bin_A,count_bin_B,bin_V1,M,O,U"
        assert len(lines) == 4
