"""Plain-text model files.

Layout::

    cascadesim-model 1
    begin <component> <kind>
    scalar <name> <value>
    array <name> <ndim> <dim_1> ... <dim_ndim>
    <all values on one line, space separated, repr precision>
    json <name> <single-line JSON>
    end
    ...

Components are ``velocity``, ``denoiser``, ``pooler``, ``noise`` and
``config``.  Values are written with 17 significant digits so that a load
reproduces every float exactly.
"""
from __future__ import annotations

import json

import numpy as np

from .conditioning import PoolerParams
from .diffusion import DenoiserSpec, NoiseSchedule
from .flow import VelocityFieldSpec
from .pipeline import ModelBundle, TrainConfig

MAGIC = "cascadesim-model"
VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _section(lines, component, kind, scalars=None, arrays=None, blobs=None):
    lines.append(f"begin {component} {kind}")
    for name, v in (scalars or {}).items():
        lines.append(f"scalar {name} {_fmt(v)}")
    for name, arr in (arrays or {}).items():
        arr = np.asarray(arr, dtype=float)
        lines.append(f"array {name} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
        lines.append(" ".join(_fmt(v) for v in arr.reshape(-1)))
    for name, obj in (blobs or {}).items():
        lines.append(f"json {name} {json.dumps(obj, sort_keys=True)}")
    lines.append("end")


def dumps_bundle(mb: ModelBundle) -> str:
    lines = [f"{MAGIC} {VERSION}"]
    v = mb.velocity
    arrays = {k: val for k, val in v.params.items() if np.ndim(val) > 0}
    scalars = {k: val for k, val in v.params.items() if np.ndim(val) == 0}
    scalars["condition_dim"] = v.condition_dim
    _section(lines, "velocity", v.kind, scalars, arrays)
    d = mb.denoiser
    _section(lines, "denoiser", d.kind,
             {k: val for k, val in d.params.items() if np.ndim(val) == 0},
             {k: val for k, val in d.params.items() if np.ndim(val) > 0})
    p = mb.pooler
    _section(lines, "pooler", "attention", {"num_heads": p.num_heads, "stride": p.stride},
             {"query": p.query, "proj_in": p.proj_in, "proj_cond": p.proj_cond})
    _section(lines, "noise", "betas", arrays={"betas": np.asarray(mb.noise.betas)})
    _section(lines, "config", "train", blobs={"train": mb.config.to_dict()})
    return "\n".join(lines) + "\n"


def _parse(text: str) -> dict:
    rows = text.splitlines()
    if not rows or rows[0].split() != [MAGIC, str(VERSION)]:
        raise ValueError(f"not a {MAGIC} {VERSION} file")
    sections, i = {}, 1
    while i < len(rows):
        head = rows[i].split()
        i += 1
        if not head:
            continue
        if head[0] != "begin" or len(head) != 3:
            raise ValueError(f"line {i}: expected 'begin <component> <kind>'")
        comp = {"kind": head[2], "scalars": {}, "arrays": {}, "json": {}}
        while True:
            if i >= len(rows):
                raise ValueError(f"section {head[1]!r} is not terminated")
            line = rows[i]
            i += 1
            if line == "end":
                break
            tag, _, rest = line.partition(" ")
            if tag == "scalar":
                name, val = rest.split()
                comp["scalars"][name] = float(val)
            elif tag == "array":
                parts = rest.split()
                name, ndim = parts[0], int(parts[1])
                shape = tuple(int(s) for s in parts[2:2 + ndim])
                vals = np.array(rows[i].split(), dtype=float) if rows[i] else np.zeros(0)
                i += 1
                if vals.size != int(np.prod(shape)):
                    raise ValueError(f"array {name!r}: expected {int(np.prod(shape))} values")
                comp["arrays"][name] = vals.reshape(shape)
            elif tag == "json":
                name, _, blob = rest.partition(" ")
                comp["json"][name] = json.loads(blob)
            else:
                raise ValueError(f"line {i}: unknown entry {tag!r}")
        sections[head[1]] = comp
    missing = {"velocity", "denoiser", "pooler", "noise", "config"} - set(sections)
    if missing:
        raise ValueError(f"missing sections: {sorted(missing)}")
    return sections


def _as_int(v):
    return int(v) if float(v).is_integer() else v


def loads_bundle(text: str) -> ModelBundle:
    s = _parse(text)
    v = s["velocity"]
    params = dict(v["arrays"])
    scal = dict(v["scalars"])
    cdim = int(scal.pop("condition_dim", 0))
    params.update({k: _as_int(val) for k, val in scal.items()})
    if "latent_dims" in params:
        params["latent_dims"] = params["latent_dims"].astype(int)
    velocity = VelocityFieldSpec(v["kind"], params, cdim)
    d = s["denoiser"]
    dparams = dict(d["arrays"])
    dparams.update({k: _as_int(val) for k, val in d["scalars"].items()})
    denoiser = DenoiserSpec(d["kind"], dparams)
    p = s["pooler"]
    pooler = PoolerParams(p["arrays"]["query"], p["arrays"]["proj_in"], p["arrays"]["proj_cond"],
                          int(p["scalars"]["num_heads"]), int(p["scalars"]["stride"]))
    noise = NoiseSchedule(tuple(s["noise"]["arrays"]["betas"]))
    cfg = TrainConfig.from_dict(s["config"]["json"]["train"])
    return ModelBundle(velocity, denoiser, pooler, noise, cfg)
