import math

import numpy as np
import pytest

from derc.errors import UsageError
from derc.fusion import FusionParams, fuse
from derc.numerics import RngStream, Tensor
from derc.numerics.gradcheck import check_fusion


def ones_params(q, d, o):
    return FusionParams(*(Tensor(np.ones(s)) for s in [(q, d), (q, d), (o, d), (o,), (o, q), (o, q)]))


@pytest.fixture
def params():
    return FusionParams.init(RngStream(0), input_dim=6, rank=4, output_dim=3)


class TestFuse:
    def test_zero_inputs_give_bias(self, params):
        out = fuse(np.zeros(6), np.zeros(6), params).data
        np.testing.assert_array_equal(out, params.b.data)

    def test_zero_second_modality(self, params):
        e1 = RngStream(1).normal(size=6)
        out = fuse(e1, np.zeros(6), params).data
        np.testing.assert_allclose(out, params.b.data + params.V1.data @ e1, atol=1e-14)

    def test_hand_evaluated(self):
        p = ones_params(2, 1, 1)
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        c_star = math.tanh(1.0) ** 2 + 1.0
        assert c_star == pytest.approx(1.5800, abs=1e-4)
        out = fuse(e1, e2, p).data
        assert out.shape == (1,)
        assert out[0] == pytest.approx(c_star + 2.0, abs=1e-14)
        assert out[0] == pytest.approx(3.5800, abs=1e-4)

    def test_batched_matches_rows(self, params):
        r = RngStream(2)
        e1, e2 = r.normal(size=(2, 3, 6)), r.normal(size=(2, 3, 6))
        batched = fuse(e1, e2, params).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(batched[i, j], fuse(e1[i, j], e2[i, j], params).data, atol=1e-14)

    def test_bound(self, params):
        r = RngStream(3)
        P, b, V1, V2 = (params.P.data, params.b.data, params.V1.data, params.V2.data)
        for _ in range(200):
            e1, e2 = r.normal(scale=3.0, size=6), r.normal(scale=3.0, size=6)
            c = fuse(e1, e2, params).data
            bound = (np.abs(b) + np.abs(P).sum(axis=1)
                     + np.abs(V1).max() * np.abs(e1).max() * 6 + np.abs(V2).max() * np.abs(e2).max() * 6)
            assert np.all(np.abs(c) <= bound + 1e-12)

    def test_dimension_mismatch(self, params):
        with pytest.raises(UsageError):
            fuse(np.zeros(5), np.zeros(6), params)

    def test_bad_param_shapes(self):
        p = ones_params(2, 1, 1)
        with pytest.raises(UsageError):
            FusionParams(p.U1, p.U2, p.P, Tensor(np.ones(2)), p.V1, p.V2)


class TestInit:
    def test_full_scale_shapes(self):
        p = FusionParams.init(RngStream(0))
        assert (p.input_dim, p.rank, p.output_dim) == (768, 256, 256)
        assert np.abs(p.U1.data).max() <= 1 / math.sqrt(768)
        assert np.abs(p.P.data).max() <= 1 / math.sqrt(256)

    def test_deterministic(self):
        a = FusionParams.init(RngStream(4), 5, 3, 2)
        b = FusionParams.init(RngStream(4), 5, 3, 2)
        for k in a.named():
            assert np.array_equal(a.named()[k].data, b.named()[k].data)


def test_gradients_against_finite_differences():
    result = check_fusion(RngStream(8), instances=20)
    assert result.passed, result
