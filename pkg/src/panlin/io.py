"""File formats: LTNT tensors, PGM label planes, weight manifests.

LTNT layout: magic b"LTNT", u32 little-endian rank, rank x u32 extents,
then the row-major float64 little-endian payload. Axis names travel in a
sidecar JSON ("<file>.axes.json", {"axes": [...]}); readers fall back to
generated names when the sidecar is absent.

Label planes are binary PGM (P5) with maxval 65535, two bytes per pixel,
big-endian, as the PGM specification requires for 16-bit data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .branches import BranchConfig, BranchWeights, PyConvConfig, build_branch
from .errors import UsageError
from .lintention import LintentionLayerParams, LintentionParams
from .tensor import Tensor

LTNT_MAGIC = b"LTNT"


def tensor_to_bytes(t: Tensor) -> bytes:
    head = LTNT_MAGIC + struct.pack("<I", len(t.axes))
    head += struct.pack(f"<{len(t.axes)}I", *t.data.shape)
    return head + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def tensor_from_bytes(raw: bytes, axes: tuple[str, ...] | None = None) -> Tensor:
    if raw[:4] != LTNT_MAGIC:
        raise UsageError("not an LTNT payload (bad magic)")
    (rank,) = struct.unpack_from("<I", raw, 4)
    extents = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = 1
    for e in extents:
        count *= e
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    if axes is None:
        axes = tuple(f"d{i}" for i in range(rank))
    return Tensor(tuple(axes), data.reshape(extents).astype(np.float64))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".axes.json")


def write_tensor(path: str | Path, t: Tensor):
    path = Path(path)
    path.write_bytes(tensor_to_bytes(t))
    _sidecar(path).write_text(json.dumps({"axes": list(t.axes)}) + "\n")


def read_tensor(path: str | Path) -> Tensor:
    path = Path(path)
    axes = None
    sidecar = _sidecar(path)
    if sidecar.exists():
        axes = tuple(json.loads(sidecar.read_text())["axes"])
    return tensor_from_bytes(path.read_bytes(), axes)


def write_pgm(path: str | Path, values: np.ndarray):
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise UsageError(f"PGM planes are 2-D, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise UsageError("PGM values must fit in [0, 65535]")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(">u2").tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic == b"P5":
        payload = raw[pos + 1 :]
        dtype = ">u2" if maxval > 255 else np.uint8
        return np.frombuffer(payload, dtype=dtype, count=h * w).reshape(h, w).astype(np.int64)
    if magic == b"P2":
        nums = raw[pos:].split()
        return np.array([int(v) for v in nums[: h * w]], dtype=np.int64).reshape(h, w)
    raise UsageError(f"unsupported PGM magic {magic!r}")


def load_categories(path: str | Path) -> tuple[set[int], set[int]]:
    """Category file: a JSON list of {id, name, isthing}; returns the thing
    and stuff class-id sets."""
    entries = json.loads(Path(path).read_text())
    things = {int(e["id"]) for e in entries if e.get("isthing")}
    stuff = {int(e["id"]) for e in entries if not e.get("isthing")}
    return things, stuff


# ---------------------------------------------------------------------------
# Attention parameter manifests.


def save_lintention_params(dirpath: str | Path, params: LintentionLayerParams):
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    c = params.core.channels
    names = {"wq": params.core.wq, "wk": params.core.wk, "wv": params.core.wv}
    for name, t in names.items():
        write_tensor(d / f"{name}.ltnt", t)
    write_tensor(d / "gamma.ltnt", Tensor(("c",), params.gamma))
    write_tensor(d / "beta.ltnt", Tensor(("c",), params.beta))
    manifest = {
        "c": c,
        "p": params.core.groups,
        "eps": params.eps,
        "tensors": {n: f"{n}.ltnt" for n in (*names, "gamma", "beta")},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_lintention_params(dirpath: str | Path) -> LintentionLayerParams:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    t = {name: read_tensor(d / rel) for name, rel in manifest["tensors"].items()}
    core = LintentionParams(wq=t["wq"], wk=t["wk"], wv=t["wv"])
    return LintentionLayerParams(
        core=core, gamma=t["gamma"].data, beta=t["beta"].data, eps=manifest["eps"]
    )


# ---------------------------------------------------------------------------
# Branch weight directories.


def _config_dict(cfg: BranchConfig) -> dict:
    return {
        "variant": cfg.variant,
        "image_h": cfg.image_h,
        "image_w": cfg.image_w,
        "num_classes": cfg.num_classes,
        "stage_channels": cfg.stage_channels,
        "attn_groups": cfg.attn_groups,
        "se_reduction": cfg.se_reduction,
        "gn_groups": cfg.gn_groups,
        "pyconv": [list(level) for level in cfg.pyconv.levels] if cfg.pyconv else None,
        "seed": cfg.seed,
    }


def config_from_dict(d: dict) -> BranchConfig:
    d = dict(d)
    py = d.pop("pyconv", None)
    return BranchConfig(
        pyconv=PyConvConfig(tuple(tuple(level) for level in py)) if py else None, **d
    )


def save_branch_weights(dirpath: str | Path, weights: BranchWeights):
    """One LTNT per array, flat in the directory, indexed by a manifest."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    index: dict[str, dict] = {}

    def put(name: str, t: Tensor):
        fname = name.replace(".", "_") + ".ltnt"
        write_tensor(d / fname, t)
        return fname

    for stage, p in weights.params.items():
        kind = type(p).__name__
        entry: dict = {"kind": kind}
        if kind == "ConvKernel":
            entry["w"] = put(f"{stage}.w", p.weights)
            entry["groups"] = p.groups
            if p.bias is not None:
                entry["bias"] = put(f"{stage}.bias", Tensor(("c",), p.bias))
        elif kind == "PyConvWeights":
            entry["levels"] = []
            for i, k in enumerate(p.kernels):
                lv = {"w": put(f"{stage}.l{i}.w", k.weights), "groups": k.groups}
                if p.se:
                    se = p.se[i]
                    lv["se"] = _save_se(put, f"{stage}.l{i}.se", se)
                entry["levels"].append(lv)
        elif kind == "SeParams":
            entry["se"] = _save_se(put, f"{stage}.se", p)
        elif kind == "GroupNormParams":
            entry["gamma"] = put(f"{stage}.gamma", Tensor(("c",), p.gamma))
            entry["beta"] = put(f"{stage}.beta", Tensor(("c",), p.beta))
            entry["groups"] = p.groups
            entry["eps"] = p.eps
        elif kind == "LintentionLayerParams":
            entry["wq"] = put(f"{stage}.wq", p.core.wq)
            entry["wk"] = put(f"{stage}.wk", p.core.wk)
            entry["wv"] = put(f"{stage}.wv", p.core.wv)
            entry["gamma"] = put(f"{stage}.gamma", Tensor(("c",), p.gamma))
            entry["beta"] = put(f"{stage}.beta", Tensor(("c",), p.beta))
            entry["eps"] = p.eps
        else:
            raise UsageError(f"cannot serialize stage parameters of type {kind}")
        index[stage] = entry

    manifest = {"config": _config_dict(weights.config), "stages": index}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _save_se(put, prefix: str, se) -> dict:
    return {
        "w_reduce": put(f"{prefix}.wr", Tensor(("c", "m"), se.w_reduce)),
        "b_reduce": put(f"{prefix}.br", Tensor(("m",), se.b_reduce)),
        "w_expand": put(f"{prefix}.we", Tensor(("m", "c"), se.w_expand)),
        "b_expand": put(f"{prefix}.be", Tensor(("c",), se.b_expand)),
    }


def weights_from_manifest(manifest: dict, grab) -> BranchWeights:
    """Rebuild branch weights from a manifest dict plus a tensor fetcher.

    `grab` maps a manifest-relative name to a Tensor; the file loader and the
    HTTP service both route through here.
    """
    from .branches import GroupNormParams, PyConvWeights, SeParams, build_plan
    from .tensor import ConvKernel

    cfg = config_from_dict(manifest["config"])

    def load_se(entry: dict) -> SeParams:
        return SeParams(
            w_reduce=grab(entry["w_reduce"]).data,
            b_reduce=grab(entry["b_reduce"]).data,
            w_expand=grab(entry["w_expand"]).data,
            b_expand=grab(entry["b_expand"]).data,
        )

    params: dict[str, object] = {}
    for stage, entry in manifest["stages"].items():
        kind = entry["kind"]
        if kind == "ConvKernel":
            params[stage] = ConvKernel(
                weights=grab(entry["w"]),
                groups=entry["groups"],
                bias=grab(entry["bias"]).data if "bias" in entry else None,
            )
        elif kind == "PyConvWeights":
            kernels = []
            ses = []
            for lv in entry["levels"]:
                kernels.append(ConvKernel(weights=grab(lv["w"]), groups=lv["groups"]))
                if "se" in lv:
                    ses.append(load_se(lv["se"]))
            params[stage] = PyConvWeights(kernels=tuple(kernels), se=tuple(ses))
        elif kind == "SeParams":
            params[stage] = load_se(entry["se"])
        elif kind == "GroupNormParams":
            params[stage] = GroupNormParams(
                gamma=grab(entry["gamma"]).data,
                beta=grab(entry["beta"]).data,
                groups=entry["groups"],
                eps=entry["eps"],
            )
        elif kind == "LintentionLayerParams":
            params[stage] = LintentionLayerParams(
                core=LintentionParams(
                    wq=grab(entry["wq"]), wk=grab(entry["wk"]), wv=grab(entry["wv"])
                ),
                gamma=grab(entry["gamma"]).data,
                beta=grab(entry["beta"]).data,
                eps=entry["eps"],
            )
        else:
            raise UsageError(f"unknown stage parameter kind '{kind}' in manifest")
    return BranchWeights(config=cfg, plan=build_plan(cfg), params=params)


def load_branch_weights(dirpath: str | Path) -> BranchWeights:
    d = Path(dirpath)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"no weight manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    return weights_from_manifest(manifest, lambda rel: read_tensor(d / rel))


def init_weight_dir(dirpath: str | Path, cfg: BranchConfig) -> BranchWeights:
    weights = build_branch(cfg)
    save_branch_weights(dirpath, weights)
    return weights
