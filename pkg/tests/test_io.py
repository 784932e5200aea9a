import json
import struct

import numpy as np
import pytest

from panlin.branches import BranchConfig, branch_forward, build_branch, synthetic_features
from panlin.errors import UsageError
from panlin.io import (
    init_weight_dir,
    load_branch_weights,
    load_categories,
    load_lintention_params,
    read_pgm,
    read_tensor,
    save_branch_weights,
    save_lintention_params,
    tensor_from_bytes,
    tensor_to_bytes,
    write_pgm,
    write_tensor,
)
from panlin.lintention import init_layer_params
from panlin.rng import SplitMix64
from panlin.tensor import Tensor


class TestLtnt:
    def test_round_trip(self, tmp_path):
        t = Tensor(("n", "h", "w", "c"), SplitMix64(1).fill((2, 3, 4, 5), -1, 1))
        path = tmp_path / "x.ltnt"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.axes == t.axes
        assert np.array_equal(back.data, t.data)

    def test_header_layout(self):
        t = Tensor(("a", "b"), np.array([[1.0, 2.0], [3.0, 4.0]]))
        raw = tensor_to_bytes(t)
        assert raw[:4] == b"LTNT"
        assert struct.unpack_from("<I", raw, 4)[0] == 2
        assert struct.unpack_from("<2I", raw, 8) == (2, 2)
        assert np.frombuffer(raw[16:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_sidecar_carries_axes(self, tmp_path):
        t = Tensor(("h", "w"), np.zeros((2, 2)))
        path = tmp_path / "t.ltnt"
        write_tensor(path, t)
        sidecar = json.loads((tmp_path / "t.ltnt.axes.json").read_text())
        assert sidecar == {"axes": ["h", "w"]}

    def test_missing_sidecar_gets_default_names(self, tmp_path):
        t = Tensor(("h", "w"), np.ones((2, 3)))
        path = tmp_path / "t.ltnt"
        path.write_bytes(tensor_to_bytes(t))
        assert read_tensor(path).axes == ("d0", "d1")

    def test_bad_magic_rejected(self):
        with pytest.raises(UsageError):
            tensor_from_bytes(b"NOPE" + b"\x00" * 16)


class TestPgm:
    def test_round_trip_16bit(self, tmp_path):
        arr = np.array([[0, 12345], [300, 65535]], dtype=np.int64)
        path = tmp_path / "x.pgm"
        write_pgm(path, arr)
        assert np.array_equal(read_pgm(path), arr)

    def test_reads_ascii_p2(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_text("P2\n# comment\n3 2\n255\n1 2 3\n4 5 6\n")
        assert np.array_equal(read_pgm(path), [[1, 2, 3], [4, 5, 6]])

    def test_value_range_enforced(self, tmp_path):
        with pytest.raises(UsageError):
            write_pgm(tmp_path / "bad.pgm", np.array([[-1]]))

    def test_requires_2d(self, tmp_path):
        with pytest.raises(UsageError):
            write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2)))


def test_categories(tmp_path):
    path = tmp_path / "cats.json"
    path.write_text(json.dumps([
        {"id": 1, "name": "person", "isthing": True},
        {"id": 7, "name": "road", "isthing": False},
        {"id": 9, "name": "sky", "isthing": False},
    ]))
    things, stuff = load_categories(path)
    assert things == {1} and stuff == {7, 9}


def test_lintention_params_round_trip(tmp_path):
    params = init_layer_params(33, c=6, p=3)
    save_lintention_params(tmp_path / "attn", params)
    manifest = json.loads((tmp_path / "attn" / "manifest.json").read_text())
    assert manifest["c"] == 6 and manifest["p"] == 3
    back = load_lintention_params(tmp_path / "attn")
    assert np.array_equal(back.core.wq.data, params.core.wq.data)
    assert np.array_equal(back.core.wk.data, params.core.wk.data)
    assert back.eps == params.eps


@pytest.mark.parametrize("variant", ["baseline", "verconvsep", "lintention"])
def test_branch_weights_round_trip(tmp_path, variant):
    from panlin.branches import PyConvConfig

    cfg = BranchConfig(variant, 32, 32, num_classes=3, stage_channels=8, gn_groups=2,
                       se_reduction=2, attn_groups=2, seed=17,
                       pyconv=PyConvConfig(((3, 1, 4), (5, 2, 4))) if variant == "verconvsep" else None)
    w = build_branch(cfg)
    save_branch_weights(tmp_path / "w", w)
    back = load_branch_weights(tmp_path / "w")
    assert back.config == cfg
    f = synthetic_features(32, 32, seed=4)
    assert np.array_equal(branch_forward(f, w).data, branch_forward(f, back).data)


def test_init_weight_dir_writes_manifest(tmp_path):
    cfg = BranchConfig("baseline", 32, 32, num_classes=2, stage_channels=8, gn_groups=2)
    init_weight_dir(tmp_path / "w", cfg)
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    assert manifest["config"]["variant"] == "baseline"
    assert "p2.conv1" in manifest["stages"]


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(UsageError):
        load_branch_weights(tmp_path)
