import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtate.domain import (DatasetError, OutcomeKind, SeedSpec, SiteDataset, covariate_means,
                            derive_seed, load_sites_csv, validate_dataset, write_sites_csv)

GOLDEN = Path(__file__).parent / "golden"


def test_valid_dataset_has_no_violations():
    ds = SiteDataset("a", [[0.0], [1.0], [2.0], [3.0]], [1, 0, 1, 0], [1.0, 2.0, 3.0, 4.0])
    assert validate_dataset(ds) == []


def test_all_treated_flags_positivity():
    ds = SiteDataset("a", [[0.0], [1.0], [2.0], [3.0]], [1, 1, 1, 1], [1.0, 2.0, 3.0, 4.0])
    assert validate_dataset(ds) == ["no control units"]


def test_nan_covariate_reported_with_position():
    X = np.zeros((4, 2))
    X[2, 1] = np.nan
    ds = SiteDataset("a", X, [1, 0, 1, 0], [1.0, 2.0, 3.0, 4.0])
    assert validate_dataset(ds) == ["non-finite entry at (2,1)"]


def test_binary_outcome_checked():
    ds = SiteDataset("a", [[0.0], [1.0]], [1, 0], [0.0, 0.5], OutcomeKind.BINARY)
    assert validate_dataset(ds) == ["binary outcome not in {0,1} at row 1"]


def test_bad_treatment_and_length():
    ds = SiteDataset("a", [[0.0], [1.0]], [2, 0], [0.0, 1.0])
    assert "treatment not in {0,1} at row 0" in validate_dataset(ds)
    ds = SiteDataset("a", [[0.0], [1.0]], [1, 0, 1], [0.0, 1.0])
    assert validate_dataset(ds)[0].startswith("length mismatch")


def test_empty_dataset():
    ds = SiteDataset("a", np.zeros((0, 2)), [], [])
    assert "empty dataset" in validate_dataset(ds)
    with pytest.raises(DatasetError):
        covariate_means(ds)


def test_datasets_are_read_only():
    ds = SiteDataset("a", [[0.0], [1.0]], [1, 0], [0.0, 1.0])
    with pytest.raises(ValueError):
        ds.outcome[0] = 5.0


def test_covariate_means_examples(rng):
    ds = SiteDataset("a", [[1, 2], [3, 4]], [1, 0], [0, 0])
    assert np.allclose(covariate_means(ds), [2, 3])
    ds = SiteDataset("a", np.full((3, 4), 7.5), [1, 0, 1], [0, 0, 0])
    assert np.all(covariate_means(ds) == 7.5)
    X = rng.normal(size=(5, 3))
    ds = SiteDataset("a", X, [1, 0, 1, 0, 1], np.zeros(5))
    manual = [sum(X[i, j] for i in range(5)) / 5 for j in range(3)]
    assert np.allclose(covariate_means(ds), manual, rtol=0, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_covariate_means_permutation_invariant(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    perm = rng.permutation(n)
    a = covariate_means(SiteDataset("a", X, np.zeros(n), np.zeros(n)))
    b = covariate_means(SiteDataset("a", X[perm], np.zeros(n), np.zeros(n)))
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 2**32 - 1),
       st.sampled_from(["none", "nan_x", "inf_y", "bad_a", "all_treated", "all_control"]))
def test_validation_detects_injected_violations(n, p, seed, kind):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    A = np.zeros(n)
    A[: max(1, n // 2)] = 1
    if n == 1:
        kind = "all_treated" if kind == "none" else kind
    Y = rng.normal(size=n)
    if kind == "nan_x":
        X[rng.integers(n), rng.integers(p)] = np.nan
    elif kind == "inf_y":
        Y[rng.integers(n)] = np.inf
    elif kind == "bad_a":
        A[rng.integers(n)] = 0.5
    elif kind == "all_treated":
        A[:] = 1
    elif kind == "all_control":
        A[:] = 0
    problems = validate_dataset(SiteDataset("s", X, A, Y))
    assert (problems == []) == (kind == "none")


def test_derive_seed_determinism_and_distinctness():
    s = SeedSpec(7, 3, "dgp")
    assert derive_seed(s) == derive_seed(SeedSpec(7, 3, "dgp"))
    assert derive_seed(SeedSpec(7, 0, "dgp")) != derive_seed(SeedSpec(7, 1, "dgp"))
    assert derive_seed(SeedSpec(7, 0, "dgp")) != derive_seed(SeedSpec(7, 0, "split"))
    seeds = {derive_seed(SeedSpec(1, r, lab)) for r in range(200) for lab in ("dgp", "split", "x")}
    assert len(seeds) == 600
    assert all(0 <= v < 2**64 for v in seeds)


def test_derive_seed_golden():
    g = json.loads((GOLDEN / "derive_seed.json").read_text())
    spec = SeedSpec(g["master_seed"], g["replication_index"], g["stream_label"])
    assert derive_seed(spec) == g["seed"]


def test_csv_roundtrip_preserves_site_order(tmp_path, rng):
    sites = [SiteDataset(sid, rng.normal(size=(n, 3)), rng.integers(0, 2, n), rng.normal(size=n))
             for sid, n in (("zeta", 4), ("alpha", 6), ("mid", 3))]
    path = tmp_path / "d.csv"
    write_sites_csv(path, sites)
    back = load_sites_csv(path)
    assert [d.site_id for d in back] == ["zeta", "alpha", "mid"]
    for a, b in zip(sites, back):
        assert np.array_equal(a.covariates, b.covariates)
        assert np.array_equal(a.treatment, b.treatment)
        assert np.array_equal(a.outcome, b.outcome)


def test_csv_groups_interleaved_rows(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("site_id,a,y,x1\nB,1,1.0,0.1\nA,0,2.0,0.2\nB,0,3.0,0.3\n")
    back = load_sites_csv(path)
    assert [d.site_id for d in back] == ["B", "A"]
    assert back[0].n == 2 and back[1].n == 1


@pytest.mark.parametrize("text", ["", "site,a,y,x1\n", "site_id,a,y,x2\nA,1,0,0\n",
                                  "site_id,a,y,x1\nA,1,0\n", "site_id,a,y,x1\nA,1,zz,0\n"])
def test_csv_malformed(tmp_path, text):
    path = tmp_path / "d.csv"
    path.write_text(text)
    with pytest.raises(DatasetError):
        load_sites_csv(path)
