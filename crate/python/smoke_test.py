"""Smoke test for the ffasim extension module.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import os
import struct
import tempfile

import ffasim


def f32(rows):
    return [[struct.unpack("f", struct.pack("f", v))[0] for v in r] for r in rows]


def main():
    assert abs(ffasim.cosine([1.0, 0.0], [2.0, 0.0]) - 1.0) < 1e-6
    assert abs(ffasim.cosine([1.0, 0.0], [0.0, 3.0])) < 1e-6

    assert ffasim.average_precision([True, True, False, False]) == 1.0
    assert abs(ffasim.average_precision([True, False, True]) - 5 / 6) < 1e-12

    ari = ffasim.adjusted_rand_index([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 1, 1])
    assert abs(ari - 12 / 37) < 1e-9, ari

    points = [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]
    labels, inertia = ffasim.kmeans(points, 2, seed=7)
    assert labels[0] == labels[1] != labels[2] == labels[3], labels
    assert inertia >= 0.0

    assert ffasim.oddity([[1.0, 0.0], [1.0, 0.01], [0.0, 1.0], [1.0, 0.02]]) == 2

    model = [[0.1, 0.6, 0.9], [0.2, 0.7, 0.9]]
    external = [[0.5, 0.3, 0.9], [0.6, 0.2, 0.9]]
    assert ffasim.fuse(model, external, 0.0) == f32(external)
    assert ffasim.fuse(model, external, 1.0) == f32(model)
    fused = ffasim.fuse(model, external, 0.4)
    assert ffasim.cmc_topk(fused, [1, 2], [1, 2, 3], k=1) == 1.0
    assert ffasim.cmc_topk(external, [1, 2], [1, 2, 3], k=1) == 0.5

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ismx")
        ffasim.write_matrix(path, model)
        assert ffasim.read_matrix(path) == f32(model)
        try:
            ffasim.load_catalog(tmp)
        except ValueError as e:
            assert "no categories" in str(e)
        else:
            raise AssertionError("empty dataset accepted")

    alpha = [[1.0 if 84 <= x < 252 and 84 <= y < 252 else 0.0 for x in range(336)] for y in range(336)]
    mask = ffasim.downsample_mask(alpha)
    assert len(mask) == 24 and sum(map(sum, mask)) == 144

    patches = [[float(i), 1.0] for i in range(576)]
    one = [[False] * 24 for _ in range(24)]
    one[2][3] = True
    assert ffasim.ffa_crop_feat(patches, one) == [51.0, 1.0]

    print("ffasim", ffasim.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
