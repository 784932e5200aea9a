"""Pydantic request/response models for the HTTP service.

Tensors travel as base64-encoded little-endian float64 payloads with their
axis names, so values round-trip exactly; integer label planes use int32.
"""

from __future__ import annotations

import base64

import numpy as np
from pydantic import BaseModel, Field

from ..costmodel import CostReport
from ..metrics import PanopticMap
from ..tensor import Tensor


class TensorPayload(BaseModel):
    axes: list[str]
    extents: list[int]
    data_b64: str

    @classmethod
    def from_tensor(cls, t: Tensor) -> "TensorPayload":
        return cls(
            axes=list(t.axes),
            extents=list(t.data.shape),
            data_b64=base64.b64encode(
                np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            ).decode("ascii"),
        )

    def to_tensor(self) -> Tensor:
        raw = base64.b64decode(self.data_b64)
        count = 1
        for e in self.extents:
            count *= e
        data = np.frombuffer(raw, dtype="<f8", count=count).reshape(self.extents)
        return Tensor(tuple(self.axes), data.astype(np.float64))


class LabelPlane(BaseModel):
    height: int
    width: int
    data_b64: str  # int32 little-endian, row-major

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LabelPlane":
        arr = np.asarray(arr)
        return cls(
            height=int(arr.shape[0]),
            width=int(arr.shape[1]),
            data_b64=base64.b64encode(
                np.ascontiguousarray(arr, dtype="<i4").tobytes()
            ).decode("ascii"),
        )

    def to_array(self) -> np.ndarray:
        raw = base64.b64decode(self.data_b64)
        return (
            np.frombuffer(raw, dtype="<i4", count=self.height * self.width)
            .reshape(self.height, self.width)
            .astype(np.int64)
        )


class PanopticMapPayload(BaseModel):
    class_ids: LabelPlane
    instance_ids: LabelPlane

    def to_map(self) -> PanopticMap:
        return PanopticMap(self.class_ids.to_array(), self.instance_ids.to_array())


class StageCostModel(BaseModel):
    name: str
    flops: int
    scalars: int
    params: int


class CostReportModel(BaseModel):
    variant: str
    image: list[int] | None = None
    dims: dict[str, int] | None = None
    convention: dict
    totals: dict[str, int]
    stages: list[StageCostModel]

    @classmethod
    def from_report(cls, r: CostReport) -> "CostReportModel":
        d = r.to_json_dict()
        return cls(
            variant=d["variant"],
            image=d["image"],
            dims=d.get("dims"),
            convention=d["convention"],
            totals=d["totals"],
            stages=[StageCostModel(**s) for s in d["stages"]],
        )


class BranchCostRequest(BaseModel):
    variant: str = "baseline"
    image: tuple[int, int] = (960, 1280)
    num_classes: int = 54
    stage_channels: int = 128
    attn_groups: int = 16
    se_reduction: int = 16
    gn_groups: int = 32
    pyconv: list[list[int]] | None = None  # [kernel, groups, share] per level
    compare: bool = False
    convention: dict = Field(default_factory=dict)


class BranchCostResponse(BaseModel):
    reports: dict[str, CostReportModel]
    deltas: dict[str, dict[str, float]] | None = None


class ModuleCostRequest(BaseModel):
    n: int = 1
    h: int
    w: int
    c: int
    p: int = 16


class VerifyRequest(BaseModel):
    max_extent: int = 3
    convention: dict = Field(default_factory=dict)
    gradcheck: bool = True


class ClosedFormFailureModel(BaseModel):
    generator: str
    dims: dict[str, int]
    quantity: str
    expected: int
    measured: int
    message: str


class VerifyResponse(BaseModel):
    cases: int
    passed: int
    failures: list[ClosedFormFailureModel]
    gradcheck: dict[str, dict] | None = None
    ok: bool


class BenchRequest(BaseModel):
    mechanism: str = "lintention"  # or "selfatt"
    sizes: list[int]
    channels: int = 16
    attn_groups: int = 4
    seed: int = 0


class BenchRow(BaseModel):
    hw: int
    counted_flops: int
    wall_ns: int
    peak_scalars: int


class BenchResponse(BaseModel):
    mechanism: str
    rows: list[BenchRow]
    flop_slope: float | None = None


class RunRequest(BaseModel):
    weights_manifest: dict
    weights_tensors: dict[str, TensorPayload]
    features_seed: int = 0
    image: tuple[int, int] | None = None
    input_tensor: TensorPayload | None = None


class RunResponse(BaseModel):
    logits: TensorPayload
    argmax: LabelPlane


class CategoryModel(BaseModel):
    id: int
    name: str = ""
    isthing: bool = False


class PqRequest(BaseModel):
    pred: PanopticMapPayload
    gt: PanopticMapPayload
    categories: list[CategoryModel]


class PqAggregateModel(BaseModel):
    pq: float
    sq: float
    rq: float
    n: int


class PqResponse(BaseModel):
    per_class: dict[str, dict[str, float]]
    all: PqAggregateModel
    things: PqAggregateModel
    stuff: PqAggregateModel
