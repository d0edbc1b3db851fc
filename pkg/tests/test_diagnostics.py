import csv
import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import coherence_all_pairs
from tokensurgeon.diagnostics import (
    CSV_HEADER,
    Decomposition,
    SynthSpec,
    bench_to_csv,
    bench_to_text,
    dictionary_coherence,
    explain_token,
    make_synthetic,
    numeric_scheme_report,
    render_table,
    synth_benchmark,
)
from tokensurgeon.omp import SolverConfig
from tokensurgeon.tensorio import Vocabulary
from tokensurgeon.transplant import transplant
from tokensurgeon.vocab_align import Dictionary


# --- explain --------------------------------------------------------------


@pytest.fixture
def explain_setup(rng):
    basis, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    anchors = basis.T[:10]
    tokens = ["the", " cat", "A", "B", "c", "d", "e", "f", "g", "h"]
    mixed = 0.6 * anchors[2] + 0.8 * anchors[3]
    donor_emb = np.vstack([anchors, mixed]).astype(np.float32)
    donor_vocab = Vocabulary({t: i for i, t in enumerate(tokens + ["AB"])})
    base_vocab = Vocabulary({t: i for i, t in enumerate(reversed(tokens))})
    return base_vocab, donor_vocab, donor_emb


def test_explain_shared_token(explain_setup):
    bv, dv, emb = explain_setup
    dec = explain_token("the", bv, dv, emb)
    assert dec.terms == (("the", 1.0),) and dec.relative_residual == 0 and dec.shared


def test_explain_recovers_construction(explain_setup):
    bv, dv, emb = explain_setup
    dec = explain_token("AB", bv, dv, emb, SolverConfig(k=8))
    (t0, c0), (t1, c1) = dec.terms[:2]
    assert (t0, t1) == ("B", "A")
    assert abs(c0 - 0.8) < 1e-5 and abs(c1 - 0.6) < 1e-5
    assert all(abs(c) < 1e-5 for _, c in dec.terms[2:])
    assert dec.relative_residual < 1e-5
    assert len(dec.terms) <= 8


def test_explain_matches_transplant_codes(explain_setup):
    bv, dv, emb = explain_setup
    cfg = SolverConfig(k=3)
    base_emb = np.ones((10, 4), dtype=np.float32)
    _, report = transplant(base_emb, bv, emb, dv, "omp", cfg, keep_codes=True)
    dec = explain_token("AB", bv, dv, emb, cfg)
    code = report.codes["AB"]
    assert sorted(c for _, c in dec.terms) == sorted(code.coeffs.tolist())


def test_explain_unknown_token(explain_setup):
    bv, dv, emb = explain_setup
    with pytest.raises(KeyError):
        explain_token("zzz", bv, dv, emb)


def test_render_format():
    dec = Decomposition("它是", (("它", 0.2451), ("这是", 0.154), ("cht", -0.0954)), 0.1)
    assert dec.render() == "它是 ≈ 0.245·'它' + 0.154·'这是' - 0.095·'cht'"
    table = render_table([dec, Decomposition(" várias", ((" varias", 0.208),), 0.2)])
    lines = table.splitlines()
    assert lines[1].startswith("Token") and "Sparse Linear Decomposition" in lines[1]
    assert lines[3] == "它是       ≈ 0.245·'它' + 0.154·'这是' - 0.095·'cht'"
    assert lines[4].startswith(" várias")


# --- coherence ------------------------------------------------------------


def test_coherence_orthonormal(rng):
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    assert dictionary_coherence(Dictionary.from_atoms(q.T)) <= 1e-6


def test_coherence_duplicate_atom(rng):
    atoms = rng.standard_normal((6, 5))
    atoms[4] = atoms[1] * 3.0
    assert dictionary_coherence(Dictionary.from_atoms(atoms)) == pytest.approx(1.0, abs=1e-12)


def test_coherence_matches_brute_force(rng):
    atoms = rng.standard_normal((100, 64))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    expect = coherence_all_pairs(atoms)
    assert dictionary_coherence(Dictionary.from_atoms(atoms)) == pytest.approx(expect, rel=1e-12)
    # a sample covering all pairs is exact too
    n_pairs = 100 * 99 // 2
    assert dictionary_coherence(Dictionary.from_atoms(atoms), sample=n_pairs) == pytest.approx(expect, rel=1e-12)


def test_coherence_sampled_is_lower_bound_and_seeded(rng):
    atoms = rng.standard_normal((300, 20))
    d = Dictionary.from_atoms(atoms)
    exact = dictionary_coherence(d)
    s1 = dictionary_coherence(d, sample=500, seed=4)
    assert 0 <= s1 <= exact
    assert s1 == dictionary_coherence(d, sample=500, seed=4)


def test_coherence_symmetry_and_rescaling(rng):
    atoms = rng.standard_normal((40, 10))
    mu = dictionary_coherence(Dictionary.from_atoms(atoms))
    scaled = atoms * rng.uniform(0.01, 100, size=(40, 1))
    assert dictionary_coherence(Dictionary.from_atoms(scaled)) == pytest.approx(mu, rel=1e-12)
    assert dictionary_coherence(Dictionary.from_atoms(atoms[::-1])) == pytest.approx(mu, rel=1e-12)


def test_coherence_needs_two_atoms():
    with pytest.raises(ValueError):
        dictionary_coherence(Dictionary.from_atoms([[1.0, 0.0]]))


# --- numeric schemes ------------------------------------------------------

SINGLE = [str(i) for i in range(10)]
TRIPLET = [str(i) for i in range(10)] + [f"{i:02d}" for i in range(100)] + [f"{i:03d}" for i in range(1000)]


def test_single_digit_scheme():
    rep = numeric_scheme_report(SINGLE + ["hello", " world", "x1"])
    assert rep.scheme == "single-digit" and rep.total == 10
    assert rep.counts == {"1": 10, "2": 0, "3": 0, "4+": 0}


def test_triplet_scheme():
    rep = numeric_scheme_report(TRIPLET + ["a"])
    assert rep.total == 1110 and rep.scheme == "multi-digit-chunking"
    assert rep.counts == {"1": 10, "2": 100, "3": 1000, "4+": 0}


def test_mismatch_flag():
    assert numeric_scheme_report(SINGLE, SINGLE[::-1]).mismatch is False
    rep = numeric_scheme_report(SINGLE, TRIPLET)
    assert rep.mismatch is True and rep.peer_scheme == "multi-digit-chunking"


def test_space_markers_and_non_ascii_digits():
    vocab = [" 1", "Ġ2", "▁3", "1", "  4", "٣", "１", "12a"]
    rep = numeric_scheme_report(vocab)
    # "  4" keeps one space after stripping, and non-ASCII digits are ignored
    assert rep.counts["1"] == 3 and rep.total == 3
    assert rep.scheme == "mixed"


def test_no_digits():
    assert numeric_scheme_report(["a", "b"]).scheme == "none"


@settings(max_examples=30, deadline=None)
@given(st.permutations(SINGLE + ["7", "42", "x", "▁99", "1000"]))
def test_scheme_report_permutation_invariant(tokens):
    rep = numeric_scheme_report(tokens)
    assert rep.counts == {"1": 10, "2": 2, "3": 0, "4+": 1}
    assert rep.scheme == "mixed"


# --- synthetic benchmark --------------------------------------------------


def small_spec(**kw):
    base = dict(dim=64, dict_size=512, targets=150, sparsity=4, base_only=64, seed=3)
    base.update(kw)
    return SynthSpec(**base)


def test_synthetic_problem_shape():
    p = make_synthetic(small_spec(base_dim=80))
    assert p.U.shape == (80, 64)
    np.testing.assert_allclose(p.U.T @ p.U, np.eye(64), atol=1e-6)
    assert p.base_emb.shape == (512 + 64, 80)
    assert p.donor_emb.shape == (512 + 150, 64)
    assert all(t not in p.base_vocab for t in p.unseen)


def test_synth_exact_and_baselines():
    rows = {(r.method, r.k): r for r in synth_benchmark(small_spec(), ks=(8,))}
    assert rows[("omp", 8)].mean_rel_err <= 1e-4
    assert (rows[("zero", None)].errors == 1.0).all()
    mean_row = rows[("mean", None)]
    assert mean_row.mean_rel_err > rows[("omp", 8)].mean_rel_err


def test_synth_mean_init_error_is_direct_computation():
    spec = small_spec()
    p = make_synthetic(spec)
    (row,) = synth_benchmark(spec, methods=("mean",), problem=p)
    mean = p.base_emb.astype(np.float64).mean(axis=0).astype(np.float32).astype(np.float64)
    expect = np.linalg.norm(mean - p.truth, axis=1) / np.linalg.norm(p.truth, axis=1)
    np.testing.assert_allclose(row.errors, expect, rtol=1e-12)


def test_synth_k_sweep_monotone():
    rows = synth_benchmark(small_spec(), methods=("omp",), ks=(1, 2, 4, 8))
    errs = [r.mean_rel_err for r in rows]
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


def test_synth_under_budget_is_reported():
    (row,) = synth_benchmark(small_spec(sparsity=6), methods=("omp",), ks=(2,))
    assert row.k == 2 and 0 < row.mean_rel_err < 1


def test_synth_deterministic():
    a = synth_benchmark(small_spec(noise=0.02), ks=(4,))
    b = synth_benchmark(small_spec(noise=0.02), ks=(4,))
    assert bench_to_csv(a, timings=False) == bench_to_csv(b, timings=False)


def test_csv_and_text_output():
    rows = synth_benchmark(small_spec(targets=20), ks=(2, 4))
    text = bench_to_csv(rows)
    parsed = list(csv.reader(io.StringIO(text)))
    assert tuple(parsed[0]) == CSV_HEADER
    assert [r[:2] for r in parsed[1:]] == [["omp", "2"], ["omp", "4"], ["zero", ""], ["mean", ""]]
    assert all(float(r[4]) >= 0 for r in parsed[1:])
    assert all(r[4] == "" for r in list(csv.reader(io.StringIO(bench_to_csv(rows, timings=False))))[1:])
    assert bench_to_text(rows).splitlines()[0].split() == list(CSV_HEADER)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(noise=-1)
    with pytest.raises(ValueError):
        SynthSpec(dim=64, base_dim=32)
