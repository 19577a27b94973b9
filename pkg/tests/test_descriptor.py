import math

import numpy as np
import pytest

from conftest import smooth_random
from orient_learn import descriptor as D
from orient_learn.data.geometry import Homography
from orient_learn.data.synth import warp_image
from orient_learn.errors import IngestionError, ShapeError


@pytest.fixture
def ctx(rng):
    return D.PatchContext(smooth_random(rng, (160, 160)), 80.0, 80.0, 2.0, keypoint_id=7)


def test_constant_patch_is_zero():
    c = D.PatchContext(np.full((100, 100), 0.4), 50.0, 50.0, 2.0)
    assert np.all(D.extract(c, 0.7) == 0.0)


def test_periodic(ctx):
    for th in (0.0, 0.3, -2.0, 5.9):
        a, b = D.extract(ctx, th), D.extract(ctx, th + 2 * math.pi)
        assert np.max(np.abs(a - b)) < 1e-12


@pytest.mark.parametrize("phi", [0.3, -0.5, 1.0, 2.5])
def test_rotation_equivariance(ctx, phi):
    center = (ctx.x, ctx.y)
    rotated = warp_image(ctx.image, Homography.similarity(phi, center=center))
    a = D.extract(ctx, 0.2)
    b = D.extract(D.PatchContext(rotated, *center, ctx.sigma), 0.2 + phi)
    assert np.linalg.norm(a - b) < 0.15


def test_norm_and_clamp(ctx):
    t = D.build_table(ctx)
    norms = np.linalg.norm(t.values, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)
    assert np.all(t.values >= 0)
    # one clamp pass; renormalizing can lift clamped entries a little past 0.2
    assert np.all(t.values <= 0.35)


def test_table_grid_alignment(ctx):
    t = D.build_table(ctx)
    assert t.K == 72 and t.keypoint_id == 7
    assert np.array_equal(t.values[0], D.extract(ctx, 0.0))
    assert np.array_equal(t.values[18], D.extract(ctx, math.pi / 2))
    assert np.array_equal(D.build_table(ctx).values, t.values)


def test_out_of_bounds_context():
    c = D.PatchContext(np.zeros((40, 40)), 5.0, 5.0, 2.0)
    assert not c.is_valid()
    with pytest.raises(ValueError, match="leaves the 40x40 image"):
        D.extract(c, 0.0)
    with pytest.raises(ValueError, match="no image"):
        D.PatchContext(None, 5.0, 5.0, 2.0).check()


def test_lookup_on_grid_is_lossless(ctx):
    t = D.build_table(ctx)
    for k in range(t.K):
        assert np.max(np.abs(D.lookup(t, k * t.step) - t.values[k])) < 1e-15


def test_lookup_midpoint_identity(rng):
    vals = rng.uniform(size=(72, 128))
    vals /= np.linalg.norm(vals, axis=1, keepdims=True)
    vals[11] = vals[10]
    step = 2 * math.pi / 72
    assert np.allclose(D.lookup(vals, 10.5 * step), vals[10], atol=1e-15)


def test_lookup_between_neighbors(ctx, rng):
    t = D.build_table(ctx)
    for th in rng.uniform(-10, 10, 50):
        k0 = int(np.floor(np.mod(th, 2 * math.pi) / t.step)) % t.K
        g0, g1 = t.values[k0], t.values[(k0 + 1) % t.K]
        g = D.lookup(t, th)
        bound = np.linalg.norm(g0 - g1) + 1e-12
        assert np.linalg.norm(g - g0) <= bound and np.linalg.norm(g - g1) <= bound


def test_lookup_zero_stays_zero():
    assert np.all(D.lookup(np.zeros((72, 128)), 1.0) == 0.0)
    assert np.all(D.lookup_derivative(np.zeros((72, 128)), 1.0) == 0.0)


def test_jacobian_constant_table(rng):
    row = rng.uniform(size=128)
    vals = np.tile(row / np.linalg.norm(row), (72, 1))
    assert np.max(np.abs(D.jacobian(vals, 0.4))) < 1e-12


def manufactured_table(K=72):
    # columns 0 and 1 trace the unit circle, so renormalization leaves them alone
    ang = np.arange(K) * (2 * math.pi / K)
    vals = np.zeros((K, 128))
    vals[:, 0], vals[:, 1] = np.cos(ang), np.sin(ang)
    return vals


def test_jacobian_manufactured_cosine(rng):
    vals = manufactured_table()
    th = rng.uniform(0, 2 * math.pi, 500)
    jac = D.jacobian(vals, th)
    assert np.max(np.abs(jac[:, 0] + np.sin(th))) < 0.01
    assert np.max(np.abs(jac[:, 1] - np.cos(th))) < 0.01


def test_jacobian_antisymmetric_under_reversal(ctx, rng):
    t = D.build_table(ctx)
    rev = np.roll(t.values[::-1], 1, axis=0)  # entry k holds the original -k
    for th in rng.uniform(0, 2 * math.pi, 10):
        assert np.allclose(D.jacobian(rev, -th), -D.jacobian(t, th), atol=1e-12)


def test_lookup_derivative_matches_difference(ctx, rng):
    t = D.build_table(ctx)
    h = 1e-7
    for th in rng.uniform(0, 2 * math.pi, 20):
        pos = np.mod(th, t.step) / t.step
        if min(pos, 1 - pos) < 1e-3:
            continue
        numeric = (D.lookup(t, th + h) - D.lookup(t, th - h)) / (2 * h)
        assert np.allclose(D.lookup_derivative(t, th), numeric, atol=1e-6)


def test_lookup_batched(ctx, rng):
    t = D.build_table(ctx)
    stack = np.stack([t.values, t.values[::-1]])
    th = rng.uniform(0, 6, 2)
    out = D.lookup(stack, th)
    assert out.shape == (2, 128)
    assert np.array_equal(out[1], D.lookup(stack[1], th[1]))


def test_table_file_round_trip(tmp_path, ctx):
    tables = [D.build_table(ctx), D.build_table(D.PatchContext(ctx.image, 70.5, 90.25, 1.7, keypoint_id=3))]
    p = tmp_path / "t.bin"
    D.save_tables(p, tables)
    back = D.load_tables(p)
    assert len(back) == 2
    for a, b in zip(tables, back):
        assert np.array_equal(a.values, b.values)
        assert (a.keypoint_id, a.x, a.y, a.sigma) == (b.keypoint_id, b.x, b.y, b.sigma)


def test_table_file_truncated(tmp_path, ctx):
    p = tmp_path / "t.bin"
    D.save_tables(p, [D.build_table(ctx)] * 3)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(IngestionError) as err:
        D.load_tables(p)
    assert err.value.record == 2
    assert "record 2" in str(err.value)


def test_table_file_bad_magic_and_shape(tmp_path, ctx):
    p = tmp_path / "t.bin"
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(IngestionError, match="bad magic"):
        D.load_tables(p)
    odd = D.DescriptorTable(np.zeros((36, 128)))
    with pytest.raises(ShapeError):
        D.save_tables(p, [D.build_table(ctx), odd])
