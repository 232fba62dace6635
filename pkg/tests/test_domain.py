from rpmforecast.domain import (
    EVENT,
    SURVEY,
    WEARABLE,
    Observation,
    catalog_default,
    validate_record,
)


class TestCatalog:
    def test_thirty_entries(self):
        assert len(catalog_default()) == 30

    def test_first_entry(self):
        assert catalog_default().entries[0].name == "daily_max_hr"

    def test_category_counts(self):
        cat = catalog_default()
        assert (cat.count(WEARABLE), cat.count(SURVEY), cat.count(EVENT)) == (4, 18, 8)

    def test_dense_unique_ids(self):
        cat = catalog_default()
        assert [e.id for e in cat] == list(range(30))
        assert len(set(cat.names)) == 30

    def test_stable_across_calls(self):
        a, b = catalog_default(), catalog_default()
        assert a.to_json() == b.to_json()

    def test_json_round_trip(self):
        cat = catalog_default()
        assert type(cat).from_json(cat.to_json()) == cat

    def test_value_kinds(self):
        cat = catalog_default()
        assert cat.by_name("wellness_checkin").value_kind == "binary"
        assert cat.by_name("qor15_item_7").value_kind == "ordinal"
        assert cat.by_name("daily_total_steps").value_kind == "continuous"
        assert all(e.value_kind == "binary" for e in cat if e.category == EVENT)


class TestValidateRecord:
    def test_well_formed(self, record_factory):
        rec = record_factory(obs=[(1, "daily_max_hr", 90), (2, "wellness_checkin", 1)], events=[(5, "ae_visit")])
        assert validate_record(rec) == []

    def test_negative_time(self, record_factory):
        rec = record_factory(obs=[(1, "daily_max_hr", 90)])
        bad = Observation("A", -1.0, rec.observations[0].variable, 90.0)
        rec = type(rec)(rec.patient_id, rec.static, (bad,), (), 0.0, 70.0)
        problems = validate_record(rec)
        assert len(problems) == 1
        assert "t_days ≥ 0" in problems[0]

    def test_unsorted(self, record_factory):
        rec = record_factory(obs=[(1, "daily_max_hr", 90), (3, "daily_max_hr", 95)])
        swapped = type(rec)(rec.patient_id, rec.static, rec.observations[::-1], (), 0.0, 70.0)
        problems = validate_record(swapped)
        assert len(problems) == 1
        assert "sorted by t_days" in problems[0]

    def test_value_ranges(self, record_factory):
        rec = record_factory(obs=[(1, "wellness_checkin", 0.5), (2, "qor15_item_3", 11)])
        assert len(validate_record(rec)) == 1

    def test_outside_span(self, record_factory):
        rec = record_factory(obs=[(80, "daily_max_hr", 90)], end=70)
        assert any("monitoring span" in p for p in validate_record(rec))

    def test_unknown_adverse_kind(self, record_factory):
        rec = record_factory(events=[(3, "sunburn")])
        assert any("adverse_events.kind" in p for p in validate_record(rec))
