"""FastAPI application wrapping the compute core.

The service is stateless: every request carries its full inputs (tensors
inline, base64-encoded) and responses are deterministic functions of them.
File handling stays in the clients; this process only computes.
"""

from __future__ import annotations

import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..branches import BranchConfig, branch_forward, features_from_image, synthetic_features
from ..costmodel import (
    DEFAULT_CONVENTION,
    branch_cost,
    compare_branches,
    lintention_cost,
    verify_closed_forms,
)
from ..errors import PanlinError
from ..lintention import init_params
from ..metrics import pq_stats
from ..rng import SplitMix64
from ..tensor import Tensor
from ..verification import (
    counted_run,
    init_self_attention_params,
    lintention_program,
    run_gradcheck_suite,
    self_attention_program,
)
from . import schemas as sc


def _convention(overrides: dict):
    return DEFAULT_CONVENTION.with_overrides(**overrides) if overrides else DEFAULT_CONVENTION


def _branch_config(req: sc.BranchCostRequest, variant: str) -> BranchConfig:
    from ..branches import PyConvConfig

    return BranchConfig(
        variant=variant,
        image_h=req.image[0],
        image_w=req.image[1],
        num_classes=req.num_classes,
        stage_channels=req.stage_channels,
        attn_groups=req.attn_groups,
        se_reduction=req.se_reduction,
        gn_groups=req.gn_groups,
        pyconv=PyConvConfig(tuple(tuple(lv) for lv in req.pyconv)) if req.pyconv else None,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="panlin", version=__version__)

    @app.exception_handler(PanlinError)
    async def domain_error(_: Request, exc: PanlinError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/cost/branch", response_model=sc.BranchCostResponse)
    def cost_branch(req: sc.BranchCostRequest):
        conv = _convention(req.convention)
        if req.compare:
            cmp = compare_branches(_branch_config(req, req.variant), conv)
            return sc.BranchCostResponse(
                reports={
                    v: sc.CostReportModel.from_report(r) for v, r in cmp["reports"].items()
                },
                deltas=cmp["deltas"],
            )
        report = branch_cost(_branch_config(req, req.variant), conv)
        return sc.BranchCostResponse(
            reports={req.variant: sc.CostReportModel.from_report(report)}
        )

    @app.post("/cost/lintention", response_model=sc.CostReportModel)
    def cost_module(req: sc.ModuleCostRequest):
        return sc.CostReportModel.from_report(
            lintention_cost(req.n, req.h, req.w, req.c, req.p)
        )

    @app.post("/verify", response_model=sc.VerifyResponse)
    def verify(req: sc.VerifyRequest):
        conv = _convention(req.convention)
        report = verify_closed_forms(req.max_extent, conv)
        grad = None
        ok = report.ok
        if req.gradcheck:
            grad = {name: res.to_json_dict() for name, res in run_gradcheck_suite().items()}
            ok = ok and all(v["passed"] for v in grad.values())
        return sc.VerifyResponse(
            cases=report.cases,
            passed=report.passed,
            failures=[
                sc.ClosedFormFailureModel(
                    generator=f.generator,
                    dims=f.dims,
                    quantity=f.quantity,
                    expected=f.expected,
                    measured=f.measured,
                    message=f.describe(),
                )
                for f in report.failures
            ],
            gradcheck=grad,
            ok=ok,
        )

    @app.post("/bench", response_model=sc.BenchResponse)
    def bench(req: sc.BenchRequest):
        rows = []
        stream = SplitMix64(req.seed)
        c, p = req.channels, req.attn_groups
        for hw in req.sizes:
            h = int(np.sqrt(hw))
            h = h if h * h == hw else 1
            w = hw // h
            x = Tensor(("n", "h", "w", "c"), stream.fill((1, h, w, c), -1.0, 1.0))
            if req.mechanism == "lintention":
                program = lintention_program(init_params(req.seed, c, p))
            elif req.mechanism == "selfatt":
                wq, wk, wv = init_self_attention_params(req.seed, c)
                program = self_attention_program(wq, wk, wv, c)
                x = Tensor(("n", "s", "c"), x.data.reshape(1, hw, c))
            else:
                return JSONResponse(status_code=400, content={"detail": f"unknown mechanism '{req.mechanism}'"})
            t0 = time.perf_counter_ns()
            run = counted_run(program, {"x": x})
            wall = time.perf_counter_ns() - t0
            rows.append(
                sc.BenchRow(
                    hw=hw, counted_flops=run.flops, wall_ns=wall, peak_scalars=run.peak_scalars
                )
            )
        slope = None
        if len(rows) > 1:
            xs = np.log([r.hw for r in rows])
            ys = np.log([r.counted_flops for r in rows])
            slope = float(np.polyfit(xs, ys, 1)[0])
        return sc.BenchResponse(mechanism=req.mechanism, rows=rows, flop_slope=slope)

    @app.post("/run", response_model=sc.RunResponse)
    def run_branch(req: sc.RunRequest):
        from ..io import weights_from_manifest

        def grab(rel: str) -> Tensor:
            if rel not in req.weights_tensors:
                raise PanlinError(f"weight payload missing tensor '{rel}'")
            return req.weights_tensors[rel].to_tensor()

        weights = weights_from_manifest(req.weights_manifest, grab)
        cfg = weights.config
        if req.input_tensor is not None:
            features = features_from_image(req.input_tensor.to_tensor(), req.features_seed)
        else:
            image = req.image or (cfg.image_h, cfg.image_w)
            features = synthetic_features(image[0], image[1], req.features_seed)
        # Weights are geometry-independent; retarget the plan to the feature size.
        img_h = features.p2.extent("h") * 4
        img_w = features.p2.extent("w") * 4
        if (img_h, img_w) != (cfg.image_h, cfg.image_w):
            from dataclasses import replace

            from ..branches import BranchWeights, build_plan

            cfg = replace(cfg, image_h=img_h, image_w=img_w)
            weights = BranchWeights(config=cfg, plan=build_plan(cfg), params=weights.params)
        logits = branch_forward(features, weights)
        argmax = logits.data.argmax(axis=0)
        return sc.RunResponse(
            logits=sc.TensorPayload.from_tensor(logits),
            argmax=sc.LabelPlane.from_array(argmax),
        )

    @app.post("/pq", response_model=sc.PqResponse)
    def pq(req: sc.PqRequest):
        pred = req.pred.to_map()
        gt = req.gt.to_map()
        things = {c.id for c in req.categories if c.isthing}
        stuff = {c.id for c in req.categories if not c.isthing}
        stats = pq_stats(pred, gt, things, stuff)
        d = stats.to_json_dict(things, stuff)
        return sc.PqResponse(
            per_class=d["per_class"],
            all=sc.PqAggregateModel(**d["all"]),
            things=sc.PqAggregateModel(**d["things"]),
            stuff=sc.PqAggregateModel(**d["stuff"]),
        )

    return app
