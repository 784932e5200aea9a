import numpy as np
import pytest
from fastapi.testclient import TestClient

from panlin.branches import BranchConfig
from panlin.costmodel import branch_cost, lintention_cost
from panlin.io import init_weight_dir
from panlin.service import create_app
from panlin.service.schemas import LabelPlane, TensorPayload
from panlin.tensor import Tensor


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "ok"


class TestPayloadCodecs:
    def test_tensor_round_trip_exact(self):
        t = Tensor(("n", "c"), np.array([[0.1, -1.7e300], [3e-308, 42.0]]))
        back = TensorPayload.from_tensor(t).to_tensor()
        assert back.axes == t.axes
        assert np.array_equal(back.data, t.data)

    def test_label_plane_round_trip(self):
        arr = np.array([[1, 2], [3, 2**30]], dtype=np.int64)
        assert np.array_equal(LabelPlane.from_array(arr).to_array(), arr)


class TestCostEndpoints:
    def test_single_report_matches_library(self, client):
        body = client.post("/cost/branch", json={"variant": "baseline", "image": [960, 1280]}).json()
        report = branch_cost(BranchConfig("baseline", 960, 1280))
        assert body["reports"]["baseline"]["totals"]["flops"] == report.flops
        assert body["reports"]["baseline"]["totals"]["params"] == report.params

    def test_compare_has_all_variants_and_deltas(self, client):
        body = client.post(
            "/cost/branch", json={"variant": "lintention", "image": [960, 1280], "compare": True}
        ).json()
        assert set(body["reports"]) == {"baseline", "pyconv", "verconv", "verconvsep", "lintention"}
        assert body["deltas"]["lintention"]["flops_pct"] < 0

    def test_bad_geometry_is_400(self, client):
        resp = client.post("/cost/branch", json={"variant": "baseline", "image": [100, 100]})
        assert resp.status_code == 400
        assert "divisible by 32" in resp.json()["detail"]

    def test_module_cost_endpoint(self, client):
        body = client.post("/cost/lintention", json={"n": 1, "h": 2, "w": 2, "c": 4, "p": 2}).json()
        assert body["totals"]["flops"] == lintention_cost(1, 2, 2, 4, 2).flops

    def test_convention_override(self, client):
        body = client.post(
            "/cost/branch",
            json={"variant": "baseline", "image": [64, 64], "convention": {"conv_flops_per_mac": 2}},
        ).json()
        base = client.post("/cost/branch", json={"variant": "baseline", "image": [64, 64]}).json()
        assert body["reports"]["baseline"]["totals"]["flops"] == 2 * base["reports"]["baseline"]["totals"]["flops"]


class TestVerifyEndpoint:
    def test_passes_at_extent_two(self, client):
        body = client.post("/verify", json={"max_extent": 2, "gradcheck": False}).json()
        assert body["ok"] and body["passed"] == body["cases"] == 32

    def test_gradcheck_included(self, client):
        body = client.post("/verify", json={"max_extent": 1, "gradcheck": True}).json()
        assert body["ok"]
        assert set(body["gradcheck"]) >= {"contract", "conv2d", "lintention_forward"}

    def test_corrupted_convention_fails_naming_generator(self, client):
        body = client.post(
            "/verify",
            json={"max_extent": 1, "gradcheck": False, "convention": {"scale_flops": 3}},
        ).json()
        assert not body["ok"]
        assert body["failures"][0]["generator"] == "ASG"  # scaling lives in the score generator


class TestBenchEndpoint:
    def test_linear_slope(self, client):
        body = client.post(
            "/bench", json={"mechanism": "lintention", "sizes": [256, 1024, 4096]}
        ).json()
        assert abs(body["flop_slope"] - 1.0) < 0.05
        assert len(body["rows"]) == 3

    def test_quadratic_slope(self, client):
        body = client.post(
            "/bench", json={"mechanism": "selfatt", "sizes": [256, 1024, 4096]}
        ).json()
        assert abs(body["flop_slope"] - 2.0) < 0.05

    def test_single_size_no_fit(self, client):
        body = client.post("/bench", json={"mechanism": "lintention", "sizes": [256]}).json()
        assert body["flop_slope"] is None and len(body["rows"]) == 1

    def test_unknown_mechanism(self, client):
        resp = client.post("/bench", json={"mechanism": "flashattn", "sizes": [16]})
        assert resp.status_code == 400


class TestRunEndpoint:
    @pytest.fixture(scope="class")
    def weights_payload(self, tmp_path_factory):
        import json as _json

        d = tmp_path_factory.mktemp("weights") / "w"
        cfg = BranchConfig("lintention", 32, 32, num_classes=3, stage_channels=8,
                           gn_groups=2, attn_groups=2, seed=21)
        w = init_weight_dir(d, cfg)
        manifest = _json.loads((d / "manifest.json").read_text())
        from panlin.io import read_tensor

        tensors = {}
        for f in d.glob("*.ltnt"):
            tensors[f.name] = TensorPayload.from_tensor(read_tensor(f)).model_dump()
        return {"manifest": manifest, "tensors": tensors}

    def test_synthetic_run_shapes(self, client, weights_payload):
        body = client.post("/run", json={
            "weights_manifest": weights_payload["manifest"],
            "weights_tensors": weights_payload["tensors"],
            "features_seed": 5,
        }).json()
        logits = TensorPayload(**body["logits"]).to_tensor()
        assert logits.axes == ("c", "h", "w")
        assert logits.data.shape == (3, 32, 32)
        argmax = LabelPlane(**body["argmax"]).to_array()
        assert argmax.shape == (32, 32)
        assert np.array_equal(argmax, logits.data.argmax(axis=0))

    def test_deterministic(self, client, weights_payload):
        req = {
            "weights_manifest": weights_payload["manifest"],
            "weights_tensors": weights_payload["tensors"],
            "features_seed": 9,
        }
        a = client.post("/run", json=req).content
        b = client.post("/run", json=req).content
        assert a == b

    def test_geometry_retarget(self, client, weights_payload):
        body = client.post("/run", json={
            "weights_manifest": weights_payload["manifest"],
            "weights_tensors": weights_payload["tensors"],
            "features_seed": 1,
            "image": [64, 64],
        }).json()
        assert TensorPayload(**body["logits"]).to_tensor().data.shape == (3, 64, 64)

    def test_missing_tensor_is_400(self, client, weights_payload):
        resp = client.post("/run", json={
            "weights_manifest": weights_payload["manifest"],
            "weights_tensors": {},
            "features_seed": 1,
        })
        assert resp.status_code == 400


class TestPqEndpoint:
    @staticmethod
    def plane(arr):
        return LabelPlane.from_array(np.asarray(arr)).model_dump()

    def test_seven_elevenths_fixture(self, client):
        gt_c = np.zeros((8, 8), int)
        gt_i = np.zeros((8, 8), int)
        pr_c = np.zeros((8, 8), int)
        pr_i = np.zeros((8, 8), int)
        for y, x in [(0, i) for i in range(8)] + [(1, 0), (1, 1)]:
            gt_c[y, x] = 1
            gt_i[y, x] = 1
        for y, x in [(0, i) for i in range(1, 8)] + [(2, 5)]:
            pr_c[y, x] = 1
            pr_i[y, x] = 1
        body = client.post("/pq", json={
            "pred": {"class_ids": self.plane(pr_c), "instance_ids": self.plane(pr_i)},
            "gt": {"class_ids": self.plane(gt_c), "instance_ids": self.plane(gt_i)},
            "categories": [{"id": 1, "name": "road", "isthing": False}],
        }).json()
        assert abs(body["all"]["pq"] - 7 / 11) < 1e-4
        assert body["stuff"]["n"] == 1 and body["things"]["n"] == 0

    def test_perfect_prediction(self, client):
        c = np.ones((4, 4), int)
        i = np.ones((4, 4), int)
        m = {"class_ids": self.plane(c), "instance_ids": self.plane(i)}
        body = client.post("/pq", json={
            "pred": m, "gt": m, "categories": [{"id": 1, "name": "x", "isthing": True}],
        }).json()
        assert body["all"]["pq"] == body["all"]["sq"] == body["all"]["rq"] == 1.0

    def test_canvas_mismatch_is_400(self, client):
        small = {
            "class_ids": self.plane(np.ones((2, 2), int)),
            "instance_ids": self.plane(np.ones((2, 2), int)),
        }
        big = {
            "class_ids": self.plane(np.ones((4, 4), int)),
            "instance_ids": self.plane(np.ones((4, 4), int)),
        }
        resp = client.post("/pq", json={"pred": small, "gt": big, "categories": []})
        assert resp.status_code == 400
