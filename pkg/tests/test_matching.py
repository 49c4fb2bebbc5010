import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osld.errors import DegenerateInputError, FileFormatError, ShapeMismatchError
from osld.matching import (
    add_class,
    build_index,
    calibrate_threshold,
    confidence,
    label_detections,
    load_index,
    match_top_k,
    save_index,
    threshold_grid,
)


def random_index(rng, n_classes=4, per_class=3, dim=6):
    ents = [(c, f"c{c}_{i}", rng.normal(size=dim)) for c in range(n_classes) for i in range(per_class)]
    return build_index(ents)


def test_build_index_normalises():
    idx = build_index([(1, "a", [3.0, 4.0])])
    np.testing.assert_allclose(idx.matrix[0], [0.6, 0.8], atol=1e-7)
    assert idx.dim == 2 and len(idx) == 1 and idx.class_names == {1: "1"}


def test_build_index_rejects_bad_input():
    with pytest.raises(DegenerateInputError):
        build_index([(1, "a", [0.0, 0.0])])
    with pytest.raises(ShapeMismatchError):
        build_index([(1, "a", [1.0, 0.0]), (2, "b", [1.0, 0.0, 0.0])])
    with pytest.raises(ValueError):
        build_index([])


def test_query_errors():
    idx = build_index([(1, "a", [1.0, 0.0])])
    with pytest.raises(ShapeMismatchError):
        match_top_k(idx, [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        match_top_k(idx, [0.0, 0.0])
    with pytest.raises(ValueError):
        match_top_k(idx, [1.0, 0.0], k=0)


def test_orthogonal_and_self_match():
    idx = build_index([(1, "a", [1.0, 0.0]), (2, "b", [0.0, 1.0])])
    top = match_top_k(idx, [1.0, 0.0], k=2)
    assert [m.class_id for m in top] == [1, 2]
    assert top[0].similarity == pytest.approx(1.0, abs=1e-7) and top[0].confidence == 100
    assert top[1].similarity == pytest.approx(0.0, abs=1e-12) and top[1].confidence == 0


def test_duplicate_entry_tie_goes_to_lower_id():
    idx = build_index([(1, "a", [1.0, 1.0]), (1, "b", [2.0, 2.0]), (2, "c", [1.0, 0.0])])
    assert match_top_k(idx, [1.0, 1.0])[0].best_entry_id == 0


def test_match_top_k_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        idx = random_index(rng, n_classes=4, per_class=3)
        q = rng.normal(size=6)
        got = match_top_k(idx, q, 3)
        qn = q / np.linalg.norm(q)
        per_class = {}
        for i, e in enumerate(idx.entries):
            s = float(np.dot(e.embedding, qn))
            if e.class_id not in per_class or s > per_class[e.class_id][0]:
                per_class[e.class_id] = (s, i)
        want = sorted(per_class.items(), key=lambda kv: (-kv[1][0], kv[0]))[:3]
        assert [m.class_id for m in got] == [c for c, _ in want]
        assert [m.best_entry_id for m in got] == [i for _, (_, i) in want]
        np.testing.assert_allclose([m.similarity for m in got], [s for _, (s, _) in want], atol=1e-12)


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_scale_invariance(q, c):
    if np.linalg.norm(q) < 1e-3:
        return
    idx = random_index(np.random.default_rng(3))
    a, b = match_top_k(idx, q, 4), match_top_k(idx, c * q, 4)
    assert [m.class_id for m in a] == [m.class_id for m in b]
    np.testing.assert_allclose([m.similarity for m in a], [m.similarity for m in b], atol=1e-12)


def test_add_class_keeps_existing_similarities_bit_identical():
    rng = np.random.default_rng(4)
    idx = random_index(rng)
    queries = rng.normal(size=(10, 6))
    before = np.stack([idx.similarities(q) for q in queries])
    bigger = add_class(idx, [(99, "new_0", rng.normal(size=6)), (99, "new_1", rng.normal(size=6))], {99: "newco"})
    after = np.stack([bigger.similarities(q) for q in queries])
    assert np.array_equal(after[:, : len(idx)], before)
    assert bigger.class_names[99] == "newco" and len(idx) == 12 and len(bigger) == 14


def test_add_class_makes_new_class_matchable():
    idx = build_index([(1, "a", [1.0, 0.0, 0.0])])
    bigger = add_class(idx, [(2, "b", [0.0, 1.0, 0.0])])
    assert match_top_k(bigger, [0.1, 1.0, 0.0])[0].class_id == 2
    assert add_class(idx, []).entries == idx.entries
    with pytest.raises(ShapeMismatchError):
        add_class(idx, [(2, "b", [1.0, 0.0])])


def test_label_detections_threshold_extremes():
    rng = np.random.default_rng(5)
    idx = random_index(rng)
    embs = rng.normal(size=(7, 6))
    everything = label_detections(idx, embs, -1.0)
    assert [c.candidate for c in everything] == list(range(7))
    assert label_detections(idx, embs, 1.0 + 1e-9) == []


def test_label_detections_small_scene():
    idx = build_index([(1, "one", [1.0, 0.0, 0.0]), (2, "two", [0.0, 1.0, 0.0])])
    cands = [[0.9, 0.1, 0.1], [0.1, 0.95, 0.0], [0.0, 0.0, 1.0], [0.7, 0.7, 0.1]]
    out = label_detections(idx, cands, 0.5)
    assert [(c.candidate, c.match.class_id) for c in out] == [(0, 1), (1, 2), (3, 1)]
    assert all(c.match.similarity >= 0.5 for c in out)


def test_label_count_monotone_in_threshold():
    rng = np.random.default_rng(6)
    idx = random_index(rng)
    embs = rng.normal(size=(30, 6))
    counts = [len(label_detections(idx, embs, t)) for t in threshold_grid(21)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@pytest.mark.parametrize("s,want", [(-0.3, 0), (0.0, 0), (0.004, 0), (0.005, 1), (0.875, 88), (0.5, 50), (1.0, 100)])
def test_confidence(s, want):
    assert confidence(s) == want


def test_calibrate_threshold_prefers_largest_tie():
    t, s = calibrate_threshold(lambda t: 1.0 if t <= 0.3 else 0.2)
    assert t == pytest.approx(0.3) and s == 1.0
    t, _ = calibrate_threshold(lambda t: 0.7)
    assert t == 1.0
    assert len(threshold_grid()) == 101


def test_index_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    idx = add_class(random_index(rng), [(42, "héllo", rng.normal(size=6))], {42: "brand ü"})
    path = tmp_path / "index.bin"
    save_index(path, idx)
    back = load_index(path)
    assert back.class_names == idx.class_names
    assert [(e.class_id, e.image_id) for e in back.entries] == [(e.class_id, e.image_id) for e in idx.entries]
    assert np.array_equal(back.matrix, idx.matrix)
    q = rng.normal(size=6)
    assert match_top_k(back, q, 3) == match_top_k(idx, q, 3)


def test_index_file_errors(tmp_path):
    idx = build_index([(1, "a", [1.0, 0.0])])
    good = tmp_path / "i.bin"
    save_index(good, idx)
    raw = good.read_bytes()
    cases = {
        "magic": b"XXXXXXXX" + raw[8:],
        "truncated": raw[:-3],
        "trailing": raw + b"\0",
    }
    # scale the stored embedding so it is no longer unit norm
    emb_at = 8 + 8 + 8 + 2 + 1
    cases["norm"] = raw[:emb_at] + np.array([2.0, 0.0], dtype="<f4").tobytes() + raw[emb_at + 8:]
    for name, blob in cases.items():
        p = tmp_path / f"{name}.bin"
        p.write_bytes(blob)
        with pytest.raises(FileFormatError):
            load_index(p)
