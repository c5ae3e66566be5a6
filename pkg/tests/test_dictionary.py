import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otfs_ge.channel import ChannelRealization, synthesize_observation
from otfs_ge.core import ConfigError, PilotConfig, table1_config
from otfs_ge.dictionary import (
    Grid,
    GridPoint,
    append_points,
    assemble,
    composite,
    exact_columns,
    make_uniform_grid,
    move_points,
)

CFG = table1_config()
PILOT = PilotConfig()


@pytest.fixture(scope="module")
def fine():
    g = make_uniform_grid(CFG, 0.25)
    return g, assemble(CFG, PILOT, g)


@pytest.fixture(scope="module")
def coarse():
    g = make_uniform_grid(CFG, 1.0)
    return g, assemble(CFG, PILOT, g)


def test_grid_counts():
    assert make_uniform_grid(CFG, 0.25).L == 33 * 17 == 561
    assert make_uniform_grid(CFG, 1.0).L == 9 * 5 == 45


def test_non_divisible_resolution_rejected():
    with pytest.raises(ConfigError):
        make_uniform_grid(CFG, 0.3)


def test_uniform_grid_layout(coarse):
    g, _ = coarse
    assert g.k.min() == -4 and g.k.max() == 4
    assert g.l.min() == 0 and g.l.max() == 4
    # Doppler fastest
    assert g.k[1] - g.k[0] == 1 and g.l[1] == g.l[0]
    assert np.all(g.r_nu_minus == 1) and np.all(g.r_tau_plus == 1)


def test_integer_point_is_indicator(coarse):
    g, d = coarse
    i = g.find(2.0, 3.0)
    col = d.phi_I[:, i]
    row = (2 + CFG.k_max) + CFG.N_T * 3
    psi = np.exp(-2j * np.pi * 6 / 1024)
    assert col[row] == pytest.approx(psi, abs=1e-13)
    assert np.sum(np.abs(col) > 1e-12) == 1


def test_column_norms(fine):
    g, d = fine
    norms = np.linalg.norm(d.phi_I, axis=0)
    assert np.all(norms <= 1 + 1e-12)
    integer = (g.k == np.round(g.k)) & (g.l == np.round(g.l))
    assert np.allclose(norms[integer], 1.0)


@pytest.mark.parametrize("i", [0, 17, 100, 280, 560])
def test_derivative_columns_match_finite_differences(fine, i):
    g, d = fine
    h = 1e-6
    for which, (dk, dl) in (("nu", (h, 0)), ("tau", (0, h))):
        fd = (exact_columns(CFG, g.k[i] + dk, g.l[i] + dl) - exact_columns(CFG, g.k[i] - dk, g.l[i] - dl))[:, 0] / (2 * h)
        col = d.phi_nu[:, i] if which == "nu" else d.phi_tau[:, i]
        assert np.linalg.norm(col - fd) / np.linalg.norm(fd) <= 1e-5


def test_noiseless_on_grid_observation(coarse):
    g, d = coarse
    # a path sitting on a fractional grid point of the fine grid
    gf = make_uniform_grid(CFG, 0.25)
    df = assemble(CFG, PILOT, gf)
    i = gf.find(1.25, 2.75)
    h = 0.4 - 0.9j
    ch = ChannelRealization.from_arrays([h], [1.25], [2.75])
    y = synthesize_observation(CFG, PILOT, ch, np.inf, 0).y
    # the column carries the path phase, so the coefficient is the raw gain
    assert np.max(np.abs(y - PILOT.x_p * h * df.phi_I[:, i])) < 1e-12


def test_composite_zero_offsets(coarse):
    _, d = coarse
    z = np.zeros(d.L)
    assert np.array_equal(composite(d, z, z), d.phi_I)


def test_composite_single_offset_is_local(coarse):
    _, d = coarse
    kappa = np.zeros(d.L)
    kappa[7] = 0.3
    phi = composite(d, kappa, np.zeros(d.L))
    diff = phi - d.phi_I
    assert np.allclose(np.delete(diff, 7, axis=1), 0)
    assert np.allclose(diff[:, 7], 0.3 * d.phi_nu[:, 7])


def test_composite_length_mismatch(coarse):
    _, d = coarse
    with pytest.raises(ValueError):
        composite(d, np.zeros(3), np.zeros(d.L))


def test_composite_error_is_second_order(coarse):
    g, d = coarse
    i = 22
    errs = []
    for s in (0.2, 0.1, 0.05, 0.025):
        kappa = np.zeros(d.L)
        iota = np.zeros(d.L)
        kappa[i], iota[i] = s, -0.7 * s
        approx = composite(d, kappa, iota)[:, i]
        exact = exact_columns(CFG, g.k[i] + s, g.l[i] - 0.7 * s)[:, 0]
        errs.append(np.linalg.norm(approx - exact))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > 3.5) and np.all(ratios < 4.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_composite_affine(a, seed):
    g = make_uniform_grid(CFG, 1.0)
    d = assemble(CFG, PILOT, g)
    rng = np.random.default_rng(seed)
    kappa, iota = rng.uniform(-0.5, 0.5, (2, d.L))
    lhs = composite(d, a * kappa, a * iota) - d.phi_I
    rhs = a * (composite(d, kappa, iota) - d.phi_I)
    assert np.allclose(lhs, rhs, atol=1e-12)


def _pt(k, l, r=0.5):
    return GridPoint(k, l, r, r, r, r, 1)


def test_append_matches_rebuild(coarse):
    g, d = coarse
    new = [_pt(0.5, 1.0), _pt(-2.0, 2.5), _pt(3.25, 0.75, 0.25)]
    g2, d2, dropped = append_points(g, d, new, CFG, PILOT)
    assert dropped == 0 and g2.L == g.L + 3
    full = assemble(CFG, PILOT, g2)
    for a, b in ((d2.phi_I, full.phi_I), (d2.phi_nu, full.phi_nu), (d2.phi_tau, full.phi_tau)):
        assert np.max(np.abs(a - b)) < 1e-12
    # existing columns untouched
    assert np.array_equal(d2.phi_I[:, : g.L], d.phi_I)


def test_append_empty_is_identity(coarse):
    g, d = coarse
    g2, d2, dropped = append_points(g, d, [], CFG, PILOT)
    assert g2 is g and d2 is d and dropped == 0


def test_append_duplicate_dropped(coarse):
    g, d = coarse
    p0 = g.points[0]
    g2, d2, dropped = append_points(g, d, [p0], CFG, PILOT)
    assert g2.L == g.L and dropped == 1
    g3, _, dropped = append_points(g, d, [_pt(0.5, 0.5), _pt(0.5, 0.5 + 1e-12)], CFG, PILOT)
    assert g3.L == g.L + 1 and dropped == 1


def test_move_points(coarse):
    g, d = coarse
    i = g.find(2.0, 1.0)
    kappa = np.zeros(g.L)
    iota = np.zeros(g.L)
    kappa[i], iota[i] = 0.1, -0.2
    g2, d2, clamped = move_points(g, [i], kappa, iota, CFG, PILOT, d)
    assert g2.k[i] == pytest.approx(2.1) and g2.l[i] == pytest.approx(0.8)
    assert clamped == 0
    full = assemble(CFG, PILOT, g2)
    assert np.max(np.abs(d2.phi_I - full.phi_I)) < 1e-12
    assert np.max(np.abs(d2.phi_nu - full.phi_nu)) < 1e-12
    assert np.max(np.abs(d2.phi_tau - full.phi_tau)) < 1e-12


def test_move_zero_offsets_identity(coarse):
    g, d = coarse
    z = np.zeros(g.L)
    g2, d2, _ = move_points(g, np.arange(g.L), z, z, CFG, PILOT, d)
    assert np.array_equal(g2.k, g.k) and np.array_equal(d2.phi_I, d.phi_I)


def test_move_clamps_into_region(coarse):
    g, d = coarse
    i = g.find(4.0, 0.0)
    kappa = np.zeros(g.L)
    iota = np.zeros(g.L)
    kappa[i], iota[i] = 0.3, -0.3
    g2, _, clamped = move_points(g, [i], kappa, iota, CFG, PILOT, d)
    assert (g2.k[i], g2.l[i]) == (4.0, 0.0)
    assert clamped == 1


def test_grid_csv_roundtrip(tmp_path, coarse):
    g, _ = coarse
    g.to_csv(tmp_path / "grid.csv")
    header = (tmp_path / "grid.csv").read_text().splitlines()[0]
    assert header == "k,l,r_nu_minus,r_nu_plus,r_tau_minus,r_tau_plus,generation"
    back = Grid.from_csv(tmp_path / "grid.csv")
    assert np.array_equal(back.k, g.k) and np.array_equal(back.generation, g.generation)


def test_grid_from_points_roundtrip(coarse):
    g, _ = coarse
    back = Grid.from_points(g.points)
    assert np.array_equal(back.l, g.l)
