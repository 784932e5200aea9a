"""Command-line client for the compute service.

The CLI owns files and formatting; all numerics happen behind the service
API. By default the service runs in-process (no socket); pass --server to
talk to a remote instance started with `panlin serve`.

Exit codes: 0 success, 1 verification failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2


class ServiceClient:
    """Uniform POST interface over an in-process app or a remote server."""

    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict):
        resp = self._client.post(path, json=payload)
        try:
            body = resp.json()
        except ValueError:
            body = {"detail": resp.text}
        return resp.status_code, body


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _fail(message: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _log_context(command: str, seed, convention: dict | None):
    conv = json.dumps(convention, sort_keys=True) if convention else "default"
    print(f"panlin {command}: seed={seed if seed is not None else '-'} convention={conv}",
          file=sys.stderr)


def _parse_image(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"image size must look like 960x1280, got '{text}'")


def _parse_sizes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers, got '{text}'")


def _json_flag(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"not valid JSON: {e}")
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panlin",
        description="Cost reports, closed-form verification, scaling benchmarks, "
        "branch demos, and panoptic-quality evaluation.",
    )
    parser.add_argument("--server", help="base URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="branch or module cost report")
    p.add_argument("--variant", default="baseline",
                   choices=["baseline", "pyconv", "verconv", "verconvsep", "lintention"])
    p.add_argument("--image", type=_parse_image, default=(960, 1280), metavar="HxW")
    p.add_argument("--compare", action="store_true", help="report all five variants with deltas")
    p.add_argument("--num-classes", type=int, default=54)
    p.add_argument("--stage-channels", type=int, default=128)
    p.add_argument("--groups", type=int, default=16, help="semantic group count P")
    p.add_argument("--se-reduction", type=int, default=16)
    p.add_argument("--mac", type=int, choices=[1, 2], default=1,
                   help="FLOPs billed per convolution multiply-accumulate")
    p.add_argument("--config", help="JSON file overriding branch-config fields")
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = sub.add_parser("verify", help="closed-form and gradient verification")
    p.add_argument("--max-extent", type=int, default=3)
    p.add_argument("--skip-gradcheck", action="store_true")
    p.add_argument("--override-convention", type=_json_flag, default=None,
                   help="JSON object of convention overrides (testing hook)")
    p.add_argument("--out", help="write the JSON report here as well")

    p = sub.add_parser("bench", help="counted-FLOP scaling benchmark")
    p.add_argument("--mechanism", choices=["lintention", "selfatt"], default="lintention")
    p.add_argument("--sizes", type=_parse_sizes, required=True, metavar="HW,HW,...")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the CSV here instead of stdout")

    p = sub.add_parser("run", help="branch forward pass to logits + argmax map")
    p.add_argument("--variant", required=True,
                   choices=["baseline", "pyconv", "verconv", "verconvsep", "lintention"])
    p.add_argument("--weights", required=True, help="weight directory from init-weights")
    p.add_argument("--input", help="LTNT image tensor (axes n,h,w,c); omitted: noise features")
    p.add_argument("--image", type=_parse_image, default=None, metavar="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pq", help="panoptic quality of a prediction against ground truth")
    p.add_argument("--pred", nargs=2, required=True, metavar=("CLASS.pgm", "INSTANCE.pgm"))
    p.add_argument("--gt", nargs=2, required=True, metavar=("CLASS.pgm", "INSTANCE.pgm"))
    p.add_argument("--categories", required=True, help="JSON list of {id, name, isthing}")
    p.add_argument("--out", help="write the JSON stats here instead of stdout")

    p = sub.add_parser("init-weights", help="create a seeded weight directory")
    p.add_argument("--variant", required=True,
                   choices=["baseline", "pyconv", "verconv", "verconvsep", "lintention"])
    p.add_argument("--out", required=True)
    p.add_argument("--image", type=_parse_image, default=(64, 64), metavar="HxW")
    p.add_argument("--num-classes", type=int, default=54)
    p.add_argument("--stage-channels", type=int, default=128)
    p.add_argument("--groups", type=int, default=16)
    p.add_argument("--se-reduction", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _cmd_cost(args, client: ServiceClient) -> int:
    payload = {
        "variant": args.variant,
        "image": list(args.image),
        "num_classes": args.num_classes,
        "stage_channels": args.stage_channels,
        "attn_groups": args.groups,
        "se_reduction": args.se_reduction,
        "compare": args.compare,
        "convention": {"conv_flops_per_mac": args.mac},
    }
    if args.config:
        try:
            payload.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            return _fail(f"cannot read config file: {e}")
    _log_context("cost", None, payload["convention"])
    status, body = client.post("/cost/branch", payload)
    if status != 200:
        return _fail(str(body.get("detail", body)))
    _emit(json.dumps(body, indent=2) + "\n", args.out)
    return EXIT_OK


def _cmd_verify(args, client: ServiceClient) -> int:
    payload = {
        "max_extent": args.max_extent,
        "gradcheck": not args.skip_gradcheck,
        "convention": args.override_convention or {},
    }
    _log_context("verify", None, payload["convention"])
    status, body = client.post("/verify", payload)
    if status != 200:
        return _fail(str(body.get("detail", body)))
    print(f"{body['passed']}/{body['cases']} closed-form checks passed")
    for failure in body["failures"]:
        print(f"FAIL {failure['message']}")
    if body.get("gradcheck"):
        worst = max(v["max_rel_err"] for v in body["gradcheck"].values())
        bad = [k for k, v in body["gradcheck"].items() if not v["passed"]]
        print(f"gradcheck: {len(body['gradcheck'])} ops, max rel err {worst:.3e}"
              + (f", FAILED: {', '.join(bad)}" if bad else ", all passed"))
    if args.out:
        Path(args.out).write_text(json.dumps(body, indent=2) + "\n")
    return EXIT_OK if body["ok"] else EXIT_VERIFY_FAILED


def _cmd_bench(args, client: ServiceClient) -> int:
    payload = {
        "mechanism": args.mechanism,
        "sizes": args.sizes,
        "channels": args.channels,
        "attn_groups": args.groups,
        "seed": args.seed,
    }
    _log_context("bench", args.seed, None)
    status, body = client.post("/bench", payload)
    if status != 200:
        return _fail(str(body.get("detail", body)))
    lines = ["hw,counted_flops,wall_ns,peak_scalars"]
    for row in body["rows"]:
        lines.append(f"{row['hw']},{row['counted_flops']},{row['wall_ns']},{row['peak_scalars']}")
    if body.get("flop_slope") is not None:
        lines.append(f"# fitted_flop_slope={body['flop_slope']:.6f}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _collect_tensor_names(node) -> list[str]:
    names = []
    if isinstance(node, dict):
        for v in node.values():
            names.extend(_collect_tensor_names(v))
    elif isinstance(node, list):
        for v in node:
            names.extend(_collect_tensor_names(v))
    elif isinstance(node, str) and node.endswith(".ltnt"):
        names.append(node)
    return names


def _cmd_run(args, client: ServiceClient) -> int:
    from . import io as pio
    from .service.schemas import TensorPayload

    weights_dir = Path(args.weights)
    manifest_path = weights_dir / "manifest.json"
    if not manifest_path.exists():
        return _fail(f"weights directory '{weights_dir}' has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest["config"]["variant"] != args.variant:
        return _fail(
            f"weights were built for variant '{manifest['config']['variant']}', "
            f"not '{args.variant}'"
        )
    tensors = {}
    for rel in set(_collect_tensor_names(manifest["stages"])):
        fpath = weights_dir / rel
        if not fpath.exists():
            return _fail(f"weight tensor '{rel}' missing from {weights_dir}")
        tensors[rel] = TensorPayload.from_tensor(pio.read_tensor(fpath)).model_dump()

    payload = {
        "weights_manifest": manifest,
        "weights_tensors": tensors,
        "features_seed": args.seed,
        "image": list(args.image) if args.image else None,
        "input_tensor": None,
    }
    if args.input:
        in_path = Path(args.input)
        if not in_path.exists():
            return _fail(f"input tensor '{in_path}' does not exist")
        payload["input_tensor"] = TensorPayload.from_tensor(pio.read_tensor(in_path)).model_dump()
    _log_context("run", args.seed, None)
    status, body = client.post("/run", payload)
    if status != 200:
        return _fail(str(body.get("detail", body)))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .service.schemas import LabelPlane

    logits = TensorPayload(**body["logits"]).to_tensor()
    argmax = LabelPlane(**body["argmax"]).to_array()
    pio.write_tensor(out_dir / "logits.ltnt", logits)
    pio.write_pgm(out_dir / "argmax.pgm", argmax)
    print(f"wrote {out_dir / 'logits.ltnt'} and {out_dir / 'argmax.pgm'}")
    return EXIT_OK


def _cmd_pq(args, client: ServiceClient) -> int:
    from . import io as pio
    from .service.schemas import LabelPlane

    planes = {}
    for label, pair in (("pred", args.pred), ("gt", args.gt)):
        arrays = []
        for p in pair:
            path = Path(p)
            if not path.exists():
                return _fail(f"{label} plane '{path}' does not exist")
            arrays.append(pio.read_pgm(path))
        planes[label] = {
            "class_ids": LabelPlane.from_array(arrays[0]).model_dump(),
            "instance_ids": LabelPlane.from_array(arrays[1]).model_dump(),
        }
    cat_path = Path(args.categories)
    if not cat_path.exists():
        return _fail(f"categories file '{cat_path}' does not exist")
    categories = json.loads(cat_path.read_text())
    _log_context("pq", None, None)
    status, body = client.post(
        "/pq", {"pred": planes["pred"], "gt": planes["gt"], "categories": categories}
    )
    if status != 200:
        return _fail(str(body.get("detail", body)))
    _emit(json.dumps(body, indent=2) + "\n", args.out)
    return EXIT_OK


def _cmd_init_weights(args) -> int:
    from .branches import BranchConfig
    from .errors import PanlinError
    from .io import init_weight_dir

    try:
        cfg = BranchConfig(
            variant=args.variant,
            image_h=args.image[0],
            image_w=args.image[1],
            num_classes=args.num_classes,
            stage_channels=args.stage_channels,
            attn_groups=args.groups,
            se_reduction=args.se_reduction,
            seed=args.seed,
        )
        init_weight_dir(args.out, cfg)
    except PanlinError as e:
        return _fail(str(e))
    print(f"wrote weights for '{args.variant}' to {args.out}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "init-weights":
        return _cmd_init_weights(args)
    if args.command == "serve":
        return _cmd_serve(args)
    client = ServiceClient(args.server)
    handler = {
        "cost": _cmd_cost,
        "verify": _cmd_verify,
        "bench": _cmd_bench,
        "run": _cmd_run,
        "pq": _cmd_pq,
    }[args.command]
    return handler(args, client)


if __name__ == "__main__":
    sys.exit(main())
