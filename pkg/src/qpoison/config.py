"""Run configuration: a JSON document checked against a fixed schema.

Every section is optional; missing keys take the library defaults.
Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .geometry import ChipGeometry, make_geometry
from .materials import MaterialDB, load_materials
from .qpdynamics import PulseParams, QpModelParams
from .transport import GammaImpact, TransportConfig

CONFIG_ENV = "QPOISON_CONFIG"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_xy = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_xyz = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "name": {"type": "string"},
    "geometry": _obj({
        "layout": {"enum": ["six-qubit", "dense-grid"]},
        "grid_n": {"type": "integer", "minimum": 1},
        "electrode_pitch_um": _pos,
        "extent_um": _xy,
        "thickness_um": _pos,
        "electrode_patch_um": _pos,
        "electrode_thickness_nm": _pos,
        "wall_escape_probability": _prob,
        "injector_position_um": _xy,
        "islands": _obj({
            "enabled": {"type": "boolean"},
            "material": {"type": "string"},
            "thickness_um": _pos,
            "size_um": _pos,
            "gap_um": _nonneg,
        }),
        "groundplane": _obj({
            "material": {"type": ["string", "null"]},
            "thickness_nm": _pos,
        }),
    }),
    "materials": _obj({
        "path": {"type": "string"},
        "overrides": {"type": "object", "additionalProperties": {"type": "object"}},
    }),
    "transport": _obj({
        "n_particles": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "bin_width_ns": _pos,
        "t_max_ns": _pos,
        "anisotropic": {"type": "boolean"},
        "kill_subthreshold": {"type": "boolean"},
        "kill_threshold_meV": _pos,
        "bulk_scattering": {"type": "boolean"},
        "anharmonic_kernel": {"enum": ["standard", "uniform"]},
        "p_ltt": _prob,
        "crystal_rotation_deg": _num,
        "workers": {"type": "integer", "minimum": 1},
        "chunk_size": {"type": "integer", "minimum": 1},
        "max_boundary_events": {"type": "integer", "minimum": 0},
        "junction_gap_ueV": _pos,
        "injector_energy_meV": _pos,
    }),
    "gamma": _obj({
        "position_um": _xyz,
        "deposit_energy_keV": _pos,
    }),
    "qp": _obj({
        "r_per_us": _nonneg,
        "s_per_us": {"oneOf": [_nonneg, {"type": "array", "items": _nonneg}]},
        "volume_um3": _pos,
        "n_cp_per_um3": _pos,
        "area_scale": _pos,
        "dt_us": _pos,
        "f01_GHz": _pos,
        "threshold_t1_us": _pos,
        "delta_ueV": _pos,
    }),
    "pulse": _obj({
        "v_bias_mV": _pos,
        "r_n_kohm": _pos,
        "t_pulse_us": _nonneg,
        "yield_factor": _pos,
    }),
})


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in self.errors))


def validate(doc):
    """Raise ConfigError listing every schema violation with its JSON path."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errs:
        raise ConfigError(f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errs)
    return doc


@dataclass
class QpAnalysis:
    f01_GHz: float = 5.0
    threshold_t1_us: float = 10.0
    delta_ueV: float = 180.0
    dt_us: float | None = None


@dataclass
class RunConfig:
    doc: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None):
        """Read ``path``, else $QPOISON_CONFIG, else an empty (all-default) config."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls({})
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{p}: not valid JSON ({exc})"]) from exc
        return cls(validate(doc))

    @classmethod
    def from_dict(cls, doc):
        return cls(validate(copy.deepcopy(doc)))

    def section(self, name):
        return self.doc.get(name, {})

    def hash(self):
        return hashlib.sha256(json.dumps(self.doc, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, section, **values):
        doc = copy.deepcopy(self.doc)
        doc.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
        return RunConfig.from_dict(doc)

    def materials(self) -> MaterialDB:
        m = self.section("materials")
        return load_materials(m.get("path"), m.get("overrides"))

    def geometry(self) -> ChipGeometry:
        g = self.section("geometry")
        kw = {}
        if "extent_um" in g:
            kw["extent_x"], kw["extent_y"] = g["extent_um"]
        for key, attr in (("thickness_um", "thickness"), ("electrode_patch_um", "electrode_patch_size"),
                          ("electrode_thickness_nm", "electrode_thickness"),
                          ("wall_escape_probability", "wall_escape_probability")):
            if key in g:
                kw[attr] = g[key]
        isl = g.get("islands", {})
        if isl.get("enabled", "material" in isl):
            kw["island_material"] = isl.get("material", "Cu")
            kw["island_thickness"] = isl.get("thickness_um", 1.0)
            if "size_um" in isl:
                kw["island_size"] = isl["size_um"]
            if "gap_um" in isl:
                kw["island_gap"] = isl["gap_um"]
        gp = g.get("groundplane", {})
        if "material" in gp:
            kw["groundplane_material"] = gp["material"]
        if "thickness_nm" in gp:
            kw["groundplane_thickness"] = gp["thickness_nm"]
        inj = g.get("injector_position_um")
        geom = make_geometry(g.get("layout", "six-qubit"), grid_n=g.get("grid_n", 39),
                             electrode_pitch=g.get("electrode_pitch_um", 200.0),
                             injector_position=tuple(inj) if inj else None, **kw)
        geom.validate()
        return geom

    def transport(self) -> TransportConfig:
        t = dict(self.section("transport"))
        gam = self.section("gamma")
        if "position_um" in gam:
            t["gamma_position"] = tuple(gam["position_um"])
        if "deposit_energy_keV" in gam:
            t["gamma_energy_keV"] = gam["deposit_energy_keV"]
        cfg = TransportConfig(**t)
        cfg.validate()
        return cfg

    def impact(self) -> GammaImpact:
        t = self.transport()
        return GammaImpact(tuple(t.gamma_position), t.gamma_energy_keV)

    def qp_params(self) -> QpModelParams:
        q = self.section("qp")
        keys = ("r_per_us", "s_per_us", "volume_um3", "n_cp_per_um3", "area_scale")
        p = QpModelParams(**{k: q[k] for k in keys if k in q})
        p.validate()
        return p

    def analysis(self) -> QpAnalysis:
        q = self.section("qp")
        return QpAnalysis(**{k: q[k] for k in ("f01_GHz", "threshold_t1_us", "delta_ueV", "dt_us") if k in q})

    def pulse(self) -> PulseParams:
        p = PulseParams(**self.section("pulse"))
        p.validate()
        return p


def bundled_configs():
    """Names of the reference configurations shipped with the package."""
    root = resources.files("qpoison") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_config_path(name):
    path = resources.files("qpoison") / "configs" / f"{name}.json"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled config named {name!r}; choose from {bundled_configs()}")
    return Path(str(path))


def resolve_config(arg):
    """A config argument may be a file path or the name of a bundled config."""
    if arg and not Path(arg).exists() and not arg.endswith(".json"):
        return RunConfig.load(bundled_config_path(arg))
    return RunConfig.load(arg)
