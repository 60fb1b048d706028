"""Stub encoders: determinism, locality, shape contracts, projection grads."""

import numpy as np
import pytest

from anchorseg import tensor as T
from anchorseg.encoders import (
    ImageError, LinearProjection, PixelEncoder, SemanticEncoder, validate_image,
)
from anchorseg.gradcheck import check_gradients


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


def random_image(seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(64, 64))


class TestSemanticEncoder:
    def test_deterministic(self):
        enc = SemanticEncoder(seed=3)
        img = random_image(1)
        a = enc.encode(img).data.data
        b = enc.encode(img.copy()).data.data
        assert np.array_equal(a, b)

    def test_zero_image_constant_rows(self):
        enc = SemanticEncoder(seed=3)
        fmap = enc.encode(np.zeros((64, 64)))
        expected = np.zeros(3) @ enc.lift + enc.lift_bias
        assert np.allclose(fmap.data.data, expected[None, :], atol=0)
        assert np.ptp(fmap.data.data, axis=0).max() == 0.0

    def test_patch_locality(self):
        enc = SemanticEncoder(seed=3)
        img = random_image(2)
        changed = img.copy()
        changed[8:16, 16:24] = np.clip(changed[8:16, 16:24] + 0.3, 0, 1)  # patch (1, 2)
        diff = enc.encode(changed).data.data - enc.encode(img).data.data
        rows_hit = np.nonzero(np.abs(diff).sum(axis=1))[0]
        assert list(rows_hit) == [1 * 8 + 2]

    def test_grid_metadata(self):
        fmap = SemanticEncoder().encode(random_image())
        assert (fmap.grid, fmap.tokens, fmap.dim) == ((8, 8), 64, 48)

    def test_wrong_resolution(self):
        with pytest.raises(ImageError):
            SemanticEncoder().encode(np.zeros((32, 32)))
        with pytest.raises(ImageError):
            validate_image(np.full((64, 64), 1.5))


class TestPixelEncoder:
    def test_deterministic(self):
        enc = PixelEncoder(seed=5)
        img = random_image(4)
        assert np.array_equal(enc.encode(img).data.data, enc.encode(img).data.data)

    def test_grid_metadata(self):
        fmap = PixelEncoder().encode(random_image())
        assert (fmap.grid, fmap.tokens, fmap.dim) == ((16, 16), 256, 32)

    def test_block_locality(self):
        enc = PixelEncoder(seed=5)
        img = random_image(6)
        changed = img.copy()
        changed[20:24, 40:44] = 0.0  # exactly block (5, 10)
        diff = enc.encode(changed).data.data - enc.encode(img).data.data
        rows_hit = np.nonzero(np.abs(diff).sum(axis=1))[0]
        assert list(rows_hit) == [5 * 16 + 10]


class TestProjections:
    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(0)
        proj = LinearProjection(48, 64, rng)
        proj.weight.data[:] = 0.0
        out = proj(SemanticEncoder().encode(random_image()))
        assert np.all(out.data.data == 0.0)

    def test_output_dim(self):
        rng = np.random.default_rng(0)
        sem = LinearProjection(48, 64, rng)(SemanticEncoder().encode(random_image()))
        pix = LinearProjection(32, 64, rng)(PixelEncoder().encode(random_image()))
        assert sem.dim == pix.dim == 64
        assert sem.grid == (8, 8) and pix.grid == (16, 16)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(T.ShapeError):
            LinearProjection(48, 64, rng)(PixelEncoder().encode(random_image()))

    def test_projection_gradient(self):
        rng = np.random.default_rng(7)
        proj = LinearProjection(48, 64, rng)
        fmap = SemanticEncoder(seed=1).encode(random_image(8))
        w = rng.normal(size=(64, 64))

        def build():
            out = proj(fmap)
            return T.sum_all(T.mul(out.data, T.tensor(w)))

        errs = check_gradients(build, dict(proj.params("proj")))
        assert max(errs.values()) < 1e-4, errs
