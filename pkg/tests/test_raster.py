import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from firesr.errors import DataError, FormatError
from firesr.raster import (
    ChannelStack,
    INPUT_ROLES,
    Raster,
    bicubic_matrix,
    bicubic_resample,
    bilinear_matrix,
    bilinear_resample,
    block_average_downsample,
    raster_from_csv,
    read_raster,
    scale_to_bytes,
    write_pgm,
    write_raster,
)


def make(values, **kw):
    return Raster(values=np.asarray(values, dtype=float), **kw)


class TestRasterType:
    def test_rejects_bad_dims(self):
        with pytest.raises(DataError):
            Raster(values=np.zeros(4))
        with pytest.raises(DataError):
            Raster(values=np.zeros((0, 3)))

    def test_rejects_nonpositive_pixel_size(self):
        with pytest.raises(DataError):
            make([[1.0]], pixel_size=0.0)

    def test_rejects_nonfinite_without_nodata(self):
        with pytest.raises(DataError):
            make([[1.0, np.nan]])

    def test_nan_nodata_sentinel_allowed(self):
        r = Raster(values=np.array([[1.0, np.nan]]), nodata=np.nan)
        assert r.width == 2

    def test_channel_stack_role_checks(self):
        a, b, c = make([[1.0]]), make([[2.0]]), make([[3.0]])
        stack = ChannelStack([a, b, c], INPUT_ROLES)
        assert stack.array().shape == (3, 1, 1)
        with pytest.raises(DataError):
            ChannelStack([a, b], ("fire", "fire"))
        with pytest.raises(DataError):
            ChannelStack([a, make([[1.0]], pixel_size=2.0), c], INPUT_ROLES)


class TestBilinear:
    def test_constant_preserved(self):
        r = make(np.full((3, 5), 2.5))
        out = bilinear_resample(r, 11, 7)
        np.testing.assert_array_equal(out.values, np.full((7, 11), 2.5))

    def test_hand_derived_1x2_to_1x4(self):
        # half-pixel centers with clamping: [0, 1] -> [0, 0.25, 0.75, 1]
        out = bilinear_resample(make([[0.0, 1.0]]), 4, 1)
        np.testing.assert_allclose(out.values, [[0.0, 0.25, 0.75, 1.0]], atol=1e-15)

    def test_identity_dims_unchanged(self):
        rng = np.random.default_rng(0)
        r = make(rng.random((5, 7)))
        out = bilinear_resample(r, 7, 5)
        np.testing.assert_array_equal(out.values, r.values)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        src = rng.random((5, 6))
        out = bilinear_resample(make(src), 9, 11)
        np.testing.assert_allclose(out.values, ref.bilinear_scalar(src, 11, 9), atol=1e-13)

    def test_output_within_input_range(self):
        rng = np.random.default_rng(2)
        src = rng.random((6, 6))
        out = bilinear_resample(make(src), 17, 3).values
        assert out.min() >= src.min() - 1e-12
        assert out.max() <= src.max() + 1e-12

    def test_nodata_replaced_with_zero(self, caplog):
        r = Raster(values=np.array([[5.0, -9.0]]), nodata=-9.0)
        out = bilinear_resample(r, 2, 1)
        expected = bilinear_resample(make([[5.0, 0.0]]), 2, 1)
        np.testing.assert_array_equal(out.values, expected.values)
        assert out.nodata is None

    def test_rejects_nonfinite(self):
        r = Raster(values=np.array([[1.0, np.inf]]), nodata=0.0)
        with pytest.raises(DataError):
            bilinear_resample(r, 4, 1)

    def test_geo_metadata_rescaled(self):
        r = make(np.zeros((4, 8)), origin_lon=10.0, origin_lat=20.0, pixel_size=0.4)
        out = bilinear_resample(r, 16, 8)
        assert out.pixel_size == pytest.approx(0.2)
        assert (out.origin_lon, out.origin_lat) == (10.0, 20.0)

    def test_matrix_rows_sum_to_one(self):
        m = bilinear_matrix(7, 19)
        np.testing.assert_allclose(np.asarray(m).sum(axis=1), 1.0, atol=1e-14)


class TestBicubic:
    def test_constant_preserved(self):
        out = bicubic_resample(make(np.full((4, 4), 3.25)), 9, 9)
        np.testing.assert_allclose(out.values, 3.25, atol=1e-12)

    def test_matches_scalar_oracle_pixel_for_pixel(self):
        rng = np.random.default_rng(3)
        src = rng.random((4, 4))
        out = bicubic_resample(make(src), 8, 8)
        np.testing.assert_allclose(out.values, ref.bicubic_scalar(src, 8, 8), atol=1e-13)

    def test_linear_ramp_exact_on_interior(self):
        # Keys a=-0.5 reproduces degree-1 polynomials wherever the 4-tap
        # stencil sees real data; clamped border pixels are excluded because
        # the clamped extension flattens the ramp there.
        h, w = 12, 16
        ramp = np.arange(h)[:, None] * 0.5 + np.arange(w)[None, :] * 2.0 + 3.0
        out = bicubic_resample(make(ramp), 2 * w, 2 * h).values
        xo = (np.arange(2 * w) + 0.5) * 0.5 - 0.5
        yo = (np.arange(2 * h) + 0.5) * 0.5 - 0.5
        expected = yo[:, None] * 0.5 + xo[None, :] * 2.0 + 3.0

        def interior(coords, n):
            f = np.floor(coords)
            return (f - 1 >= 0) & (f + 2 <= n - 1)

        mask = interior(yo, h)[:, None] & interior(xo, w)[None, :]
        assert mask.sum() > 0.5 * mask.size
        rel = np.abs(out - expected)[mask] / np.abs(expected)[mask]
        assert rel.max() < 1e-12

    def test_kernel_weights_sum_to_one(self):
        np.testing.assert_allclose(
            np.asarray(bicubic_matrix(6, 13)).sum(axis=1), 1.0, atol=1e-13
        )


class TestBlockAverage:
    def test_hand_derived_2x2(self):
        out = block_average_downsample(make([[1.0, 2.0], [3.0, 4.0]]), 2)
        np.testing.assert_array_equal(out.values, [[2.5]])

    def test_constant_preserved(self):
        out = block_average_downsample(make(np.full((8, 8), 7.0)), 4)
        np.testing.assert_array_equal(out.values, np.full((2, 2), 7.0))

    def test_global_mean_preserved(self):
        rng = np.random.default_rng(4)
        src = rng.random((8, 8))
        out = block_average_downsample(make(src), 4)
        assert abs(out.values.mean() - src.mean()) < 1e-12 * max(1.0, abs(src.mean()))

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        src = rng.random((8, 16))
        out = block_average_downsample(make(src), 2)
        np.testing.assert_allclose(out.values, ref.block_average_scalar(src, 2), atol=1e-14)

    def test_non_divisible_dims_error_mentions_crop(self):
        with pytest.raises(DataError, match="crop"):
            block_average_downsample(make(np.zeros((3, 4))), 2)

    def test_unsupported_factor(self):
        with pytest.raises(DataError):
            block_average_downsample(make(np.zeros((9, 9))), 3)

    def test_geo_metadata(self):
        r = make(np.zeros((8, 8)), pixel_size=0.1)
        assert block_average_downsample(r, 2).pixel_size == pytest.approx(0.2)


class TestCodec:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        values = rng.random((5, 7)).astype(np.float32).astype(np.float64)
        r = Raster(values=values, origin_lon=-120.5, origin_lat=42.25, pixel_size=0.1)
        path = tmp_path / "r.fsr"
        write_raster(r, path)
        back = read_raster(path)
        assert np.array_equal(back.values, r.values)
        assert back.geotransform() == r.geotransform()
        assert back.nodata is None

    def test_nodata_preserved(self, tmp_path):
        r = Raster(values=np.zeros((2, 2)), nodata=-9999.0)
        write_raster(r, tmp_path / "r.fsr")
        assert read_raster(tmp_path / "r.fsr").nodata == -9999.0

    def test_write_is_deterministic(self, tmp_path):
        r = make([[1.0, 2.0], [3.0, 4.0]], pixel_size=0.25)
        write_raster(r, tmp_path / "a.fsr")
        write_raster(r, tmp_path / "b.fsr")
        assert (tmp_path / "a.fsr").read_bytes() == (tmp_path / "b.fsr").read_bytes()

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "r.fsr"
        write_raster(make(np.ones((2, 2))), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError, match="payload"):
            read_raster(path)

    def test_header_payload_mismatch_rejected(self, tmp_path):
        path = tmp_path / "r.fsr"
        write_raster(make(np.ones((2, 2))), path)
        blob = path.read_bytes()
        path.write_bytes(blob + b"\x00\x00\x00\x00")  # 5 values for a 2x2 header
        with pytest.raises(FormatError, match="payload"):
            read_raster(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "r.fsr"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            read_raster(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "r.fsr"
        write_raster(make(np.ones((1, 1))), path)
        blob = bytearray(path.read_bytes())
        blob[3] = ord("9")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_raster(path)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(1, 6),
        st.integers(1, 6),
        st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, w, h, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        values = (rng.standard_normal((h, w)) * 100).astype(np.float32).astype(np.float64)
        r = Raster(values=values, pixel_size=0.5)
        path = tmp_path_factory.mktemp("fsr") / "r.fsr"
        write_raster(r, path)
        assert np.array_equal(read_raster(path).values, values)


class TestVisualizationFormats:
    def test_pgm_min_max_scaling(self, tmp_path):
        path = tmp_path / "x.pgm"
        write_pgm(np.array([[0.0, 1.0], [0.5, 1.0]]), path)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert list(blob[-4:]) == [0, 255, 128, 255]

    def test_pgm_flat_is_mid_gray(self):
        assert (scale_to_bytes(np.zeros((3, 3))) == 128).all()

    def test_csv_ingest(self, tmp_path):
        path = tmp_path / "cells.csv"
        path.write_text("row,col,value\n0,0,1.5\n1,2,-2.0\n")
        r = raster_from_csv(path, width=3, height=2)
        np.testing.assert_array_equal(r.values, [[1.5, 0.0, 0.0], [0.0, 0.0, -2.0]])

    def test_csv_out_of_range_cell(self, tmp_path):
        path = tmp_path / "cells.csv"
        path.write_text("5,5,1.0\n")
        with pytest.raises(FormatError, match="outside"):
            raster_from_csv(path, width=2, height=2)
