import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmt.geo_vocab import (
    RegionMeta, RegionVocabulary, assign_region, assign_regions, build_grid_vocab,
)


def test_two_by_two_grid_tokens():
    v = build_grid_vocab((0, 0, 1000, 1000), 500, seed=0)
    assert v.n_regions == 4
    assert [v.token_of[r.region_id] for r in v.regions] == [0, 1, 2, 3]
    assert v.missing_token == 4 and v.mask_token == 5 and v.size == 6
    np.testing.assert_array_equal(v.centroids(), [[250, 250], [750, 250], [250, 750], [750, 750]])


def test_point_assignment():
    v = build_grid_vocab((0, 0, 1000, 1000), 500, seed=0)
    assert assign_region((10, 10), v) == 0
    assert assign_region((510, 10), v) == 1
    assert assign_region((10, 510), v) == 2
    assert assign_region((-1, 10), v) is None
    assert assign_region((1000, 10), v) is None  # cells are half open
    np.testing.assert_array_equal(assign_regions([10, 999.9, 2000], [999.9, 10, 10], v), [2, 1, -1])


def test_build_is_deterministic_and_seeded():
    a = build_grid_vocab((0, 0, 3000, 2000), 500, seed=3)
    b = build_grid_vocab((0, 0, 3000, 2000), 500, seed=3)
    c = build_grid_vocab((0, 0, 3000, 2000), 500, seed=4)
    assert a == b
    assert not np.array_equal(a.populations(), c.populations())
    assert a.n_regions == 24
    pop = a.populations()
    assert pop.min() >= 600 and pop.max() <= 3000
    assert set(a.attribute_names()) == {"income", "bachelor_share", "minority_share"}
    labels = a.group_labels()
    share = a.attribute("minority_share")
    assert all((lab == "B") == (s > 0.5) for lab, s in zip(labels, share))


def test_csv_round_trip(tmp_path):
    v = build_grid_vocab((0, 0, 2000, 1500), 500, seed=1)
    path = tmp_path / "regions.csv"
    v.to_csv(path)
    w = RegionVocabulary.from_csv(path)
    assert w == v
    assert w.grid is not None and (w.grid.nx, w.grid.ny) == (4, 3)
    assert assign_region((1900, 1400), w) == assign_region((1900, 1400), v)


@pytest.mark.parametrize("bad", [
    dict(bbox=(0, 0, 0, 10), cell_size=1.0),
    dict(bbox=(0, 0, 10, 10), cell_size=0.0),
    dict(bbox=(0, 0, float("nan"), 10), cell_size=1.0),
])
def test_invalid_grid_rejected(bad):
    with pytest.raises(ValueError):
        build_grid_vocab(bad["bbox"], bad["cell_size"])


def test_duplicate_region_ids_rejected():
    r = RegionMeta("a", (0.0, 0.0), 1000.0)
    with pytest.raises(ValueError):
        RegionVocabulary([r, r])


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 2999.999), st.floats(0, 1999.999))
def test_assignment_matches_floor_division(x, y):
    v = build_grid_vocab((0, 0, 3000, 2000), 500, seed=0)
    assert assign_region((x, y), v) == int(y // 500) * 6 + int(x // 500)
