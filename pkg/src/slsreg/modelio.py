"""Model file format.

Layout::

    b"SLSREG\\n"                 magic
    uint32 little-endian         format version
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON, sorted keys
    parameter buffers            little-endian float64, declaration order

The header records the frontier family, response dimension, component count,
the full frontier/quantile configs (layer dims and mode flags), the feature
scaler, union state (beta, frozen weights), the parameter names and shapes,
and free-form metadata (seed, config hash, artifact version).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .frontiers import FrontierConfig, UnionOfFlows, build_frontier
from .quantiles import QuantileConfig, QuantileNet
from .region import FeatureScaler, PredictionRegion

MAGIC = b"SLSREG\n"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _named_parameters(region: PredictionRegion):
    return region.frontier.named_parameters() + region.quantile_net.named_parameters()


def model_bytes(region: PredictionRegion, metadata: dict | None = None) -> bytes:
    frontier = region.frontier
    named = _named_parameters(region)
    header = {
        "artifact_version": __version__,
        "family": frontier.family,
        "d": frontier.d,
        "K": getattr(frontier, "K", 1),
        "frontier_config": asdict(frontier.config),
        "quantile_config": asdict(region.quantile_net.config),
        "tau": region.tau,
        "scale": region.scale,
        "scaler": {"mean": region.scaler.mean.tolist(), "std": region.scaler.std.tolist()},
        "beta": getattr(frontier, "beta", None),
        "weights_frozen": getattr(frontier, "weights_frozen", None),
        "params": [{"name": name, "shape": list(p.value.shape)} for name, p in named],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for _, p in named)
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + body


def save_model(path, region: PredictionRegion, metadata: dict | None = None) -> None:
    Path(path).write_bytes(model_bytes(region, metadata))


def read_header(data: bytes) -> tuple[dict, int]:
    if not data.startswith(MAGIC):
        raise ModelFormatError("not a model file (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    return header, off + hlen


def load_model(path) -> tuple[PredictionRegion, dict]:
    data = Path(path).read_bytes()
    header, off = read_header(data)
    fcfg = FrontierConfig(**header["frontier_config"])
    qcfg = QuantileConfig(**header["quantile_config"])
    rng = np.random.default_rng(0)
    frontier = build_frontier(fcfg, rng)
    qnet = QuantileNet(qcfg, rng)
    if isinstance(frontier, UnionOfFlows):
        frontier.beta = header["beta"]
        frontier.weights_frozen = header["weights_frozen"]
    scaler = FeatureScaler(np.array(header["scaler"]["mean"]), np.array(header["scaler"]["std"]))
    region = PredictionRegion(frontier, qnet, header["tau"], scaler, header["scale"])
    named = _named_parameters(region)
    if [n for n, _ in named] != [p["name"] for p in header["params"]]:
        raise ModelFormatError("parameter layout in file does not match the model config")
    for (name, param), spec in zip(named, header["params"]):
        shape = tuple(spec["shape"])
        if shape != param.value.shape:
            raise ModelFormatError(f"parameter {name}: file shape {shape} != model shape {param.value.shape}")
        size = int(np.prod(shape)) * 8
        param.value = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
        off += size
    if off != len(data):
        raise ModelFormatError("trailing bytes after parameter buffers")
    return region, header["metadata"]
