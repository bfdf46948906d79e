"""Config files and CSV datasets.

Configs are YAML documents with ``design``, ``dgp``, ``model`` and
``power`` sections.  Errors name the offending key and its line.

Datasets use two CSV files.  The wide file has one row per participant:
``id``, covariates, ``z1..zk`` (+1/-1, empty when unassigned by design),
``r``, optional ``stage2_day``, ``y_star``.  The long file has one row per
person-period: ``id, t, c_t, a_t, y_prox``.  Reals are written with
round-trip precision and codes as integer literals.
"""
from __future__ import annotations

import io
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
import yaml

from .design import ALL, KINDS, MICRO, NONRESP, SINGLE, DesignSpec, FactorDef, validate_design
from .errors import ConfigError, DataIntegrityError
from .restructure import WRDataset
from .simulate import LONG_COLUMNS, DGPSpec, TrialDataset

_Z = re.compile(r"^z\d+$")

# ---------------------------------------------------------------------------
# config


@dataclass
class Config:
    design: DesignSpec
    dgp: DGPSpec | None = None
    model: dict = field(default_factory=dict)
    power: dict = field(default_factory=dict)
    path: str = ""


_DESIGN_KEYS = {"kind", "factors", "response_assessment", "micro_horizon_T", "stage2_day_K"}
_FACTOR_KEYS = {"name", "timescale", "decision_time", "prob_on", "eligibility", "first_level"}
_DGP_KEYS = {"theta_true", "gamma_beta_true", "response_prob", "nonresponse_hazards", "response_shift",
             "proximal_response_shift", "distal_noise_sd", "proximal_noise_sd", "proximal_subject_sd",
             "proximal_link", "baseline_covariate_spec", "effects_scale", "abar_center"}
_MODEL_KEYS = {"preset", "link", "covariates", "micro_center"}
_POWER_KEYS = {"n", "estimand", "alpha", "reps", "master_seed", "workers", "preset"}
_SECTIONS = {"design": _DESIGN_KEYS, "dgp": _DGP_KEYS, "model": _MODEL_KEYS, "power": _POWER_KEYS}


def _plain(node, lines: dict, path: tuple):
    """Convert a composed YAML node to Python values, recording key lines."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = str(k.value)
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _plain(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, lines, path + (i,)) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


class _Problems:
    def __init__(self, source: str, lines: dict):
        self.source, self.lines, self.items = source, lines, []

    def add(self, path: tuple, msg: str):
        p = path
        while p and p not in self.lines:
            p = p[:-1]
        line = self.lines.get(p, 1)
        key = ".".join(str(x) for x in path) or "<root>"
        self.items.append(f"{self.source}:{line}: {key}: {msg}")


def _num(probs, path, value, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        probs.add(path, f"expected a number, got {value!r}")
        return None
    if kind is int and (not isinstance(value, int)):
        if float(value).is_integer():
            value = int(value)
        else:
            probs.add(path, f"expected an integer, got {value!r}")
            return None
    if not math.isfinite(value):
        probs.add(path, "must be finite")
        return None
    if lo is not None and (value < lo or (lo_open and value == lo)):
        probs.add(path, f"value {value!r} out of range")
        return None
    if hi is not None and (value > hi or (hi_open and value == hi)):
        probs.add(path, f"value {value!r} out of range")
        return None
    return kind(value)


def _enum(probs, path, value, choices):
    if value not in choices:
        probs.add(path, f"invalid value {value!r}; expected one of {', '.join(map(str, choices))}")
        return None
    return value


def _design(probs: _Problems, d) -> DesignSpec | None:
    if not isinstance(d, dict):
        probs.add(("design",), "must be a mapping")
        return None
    for k in d:
        if k not in _DESIGN_KEYS:
            probs.add(("design", k), "unknown key")
    for k in ("kind", "factors"):
        if k not in d:
            probs.add(("design",), f"missing required key {k!r}")
    kind = _enum(probs, ("design", "kind"), d.get("kind"), KINDS) if "kind" in d else None
    factors = []
    raw = d.get("factors", [])
    if not isinstance(raw, list) or not raw:
        if "factors" in d:
            probs.add(("design", "factors"), "must be a non-empty list")
        raw = []
    for i, f in enumerate(raw):
        path = ("design", "factors", i)
        if not isinstance(f, dict):
            probs.add(path, "factor must be a mapping")
            continue
        for k in f:
            if k not in _FACTOR_KEYS:
                probs.add(path + (k,), "unknown key")
        if "name" not in f:
            probs.add(path, "missing required key 'name'")
            continue
        kw = {"name": str(f["name"])}
        if "timescale" in f:
            kw["timescale"] = _enum(probs, path + ("timescale",), f["timescale"], (SINGLE, MICRO))
        if "eligibility" in f:
            kw["eligibility"] = _enum(probs, path + ("eligibility",), f["eligibility"], (ALL, NONRESP))
        if "prob_on" in f:
            kw["prob_on"] = _num(probs, path + ("prob_on",), f["prob_on"], float, 0, 1, True, True)
        if "decision_time" in f:
            kw["decision_time"] = _num(probs, path + ("decision_time",), f["decision_time"], int, 0)
        if "first_level" in f:
            kw["first_level"] = _enum(probs, path + ("first_level",), f["first_level"], (1, -1))
        if any(v is None for v in kw.values()):
            continue
        factors.append(FactorDef(**kw))
    ra = d.get("response_assessment", [])
    if not isinstance(ra, list):
        probs.add(("design", "response_assessment"), "must be a list of days")
        ra = []
    ra = [_num(probs, ("design", "response_assessment", i), v, int, 1) for i, v in enumerate(ra)]
    T = _num(probs, ("design", "micro_horizon_T"), d.get("micro_horizon_T", 0), int, 0)
    K = d.get("stage2_day_K")
    if K is not None:
        K = _num(probs, ("design", "stage2_day_K"), K, int, 1)
    if kind is None or None in ra or T is None or len(factors) != len(raw) or probs.items:
        return None
    spec = DesignSpec(kind, tuple(factors), tuple(ra), T, K)
    for msg in validate_design(spec):
        probs.add(("design",), msg)
    return None if probs.items else spec


def _coef_map(probs, path, value):
    if not isinstance(value, dict):
        probs.add(path, "must be a mapping of term -> coefficient")
        return {}
    out = {}
    for k, v in value.items():
        x = _num(probs, path + (k,), v)
        if x is not None:
            out[str(k)] = x
    return out


def _dgp(probs: _Problems, d) -> DGPSpec | None:
    if not isinstance(d, dict):
        probs.add(("dgp",), "must be a mapping")
        return None
    for k in d:
        if k not in _DGP_KEYS:
            probs.add(("dgp", k), "unknown key")
    kw: dict[str, Any] = {}
    for k in ("theta_true", "gamma_beta_true"):
        if k in d:
            kw[k] = _coef_map(probs, ("dgp", k), d[k])
    if "response_prob" in d:
        v = d["response_prob"]
        kw["response_prob"] = _coef_map(probs, ("dgp", "response_prob"), v) if isinstance(v, dict) \
            else _num(probs, ("dgp", "response_prob"), v, float, 0, 1, False, True)
    if "nonresponse_hazards" in d:
        v = d["nonresponse_hazards"]
        if not isinstance(v, list):
            probs.add(("dgp", "nonresponse_hazards"), "must be a list")
        else:
            kw["nonresponse_hazards"] = tuple(_num(probs, ("dgp", "nonresponse_hazards", i), x, float, 0, 1)
                                              for i, x in enumerate(v))
    for k in ("response_shift", "proximal_response_shift"):
        if k in d:
            kw[k] = _num(probs, ("dgp", k), d[k])
    for k in ("distal_noise_sd", "proximal_noise_sd"):
        if k in d:
            kw[k] = _num(probs, ("dgp", k), d[k], float, 0, None, True)
    if "proximal_subject_sd" in d:
        kw["proximal_subject_sd"] = _num(probs, ("dgp", "proximal_subject_sd"), d["proximal_subject_sd"], float, 0)
    if "proximal_link" in d:
        kw["proximal_link"] = _enum(probs, ("dgp", "proximal_link"), d["proximal_link"], ("identity", "log"))
    if "effects_scale" in d:
        kw["effects_scale"] = _enum(probs, ("dgp", "effects_scale"), d["effects_scale"], ("marginal", "conditional"))
    if "abar_center" in d:
        v = d["abar_center"]
        kw["abar_center"] = v if v == "auto" else _num(probs, ("dgp", "abar_center"), v)
    if "baseline_covariate_spec" in d:
        v = d["baseline_covariate_spec"]
        if not isinstance(v, dict):
            probs.add(("dgp", "baseline_covariate_spec"), "must be a mapping of name -> distribution")
        else:
            kw["baseline_covariate_spec"] = tuple((str(k), str(x)) for k, x in v.items())
    if probs.items or any(v is None for v in kw.values()):
        return None
    if isinstance(kw.get("nonresponse_hazards"), tuple) and None in kw["nonresponse_hazards"]:
        return None
    dgp = DGPSpec(**kw)
    for msg in dgp.validate():
        probs.add(("dgp",), msg)
    return None if probs.items else dgp


def _section(probs, name, d):
    if not isinstance(d, dict):
        probs.add((name,), "must be a mapping")
        return {}
    for k in d:
        if k not in _SECTIONS[name]:
            probs.add((name, k), "unknown key")
    return dict(d)


def parse_config(text: str, source: str = "<config>") -> Config:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError([f"{source}:{line}: parse error: {getattr(exc, 'problem', exc)}"]) from None
    lines: dict = {}
    doc = _plain(node, lines, ()) if node is not None else None
    probs = _Problems(source, lines)
    if not isinstance(doc, dict):
        raise ConfigError([f"{source}:1: <root>: config must be a mapping"])
    for k in doc:
        if k not in _SECTIONS:
            probs.add((k,), "unknown section")
    if "design" not in doc:
        probs.add((), "missing required section 'design'")
        raise ConfigError(probs.items)
    design = _design(probs, doc["design"])
    dgp = _dgp(probs, doc["dgp"]) if "dgp" in doc else None
    model = _section(probs, "model", doc.get("model", {}))
    power = _section(probs, "power", doc.get("power", {}))
    if "link" in model:
        _enum(probs, ("model", "link"), model["link"], ("identity", "log"))
    if "covariates" in model and not isinstance(model["covariates"], list):
        probs.add(("model", "covariates"), "must be a list of column names")
    if "micro_center" in model and model["micro_center"] is not None:
        _num(probs, ("model", "micro_center"), model["micro_center"])
    if "alpha" in power:
        _num(probs, ("power", "alpha"), power["alpha"], float, 0, 1, True, False)
    for k, lo in (("n", 2), ("reps", 1), ("workers", 1), ("master_seed", 0)):
        if k in power:
            _num(probs, ("power", k), power[k], int, lo)
    if probs.items:
        raise ConfigError(probs.items)
    return Config(design, dgp, model, power, source)


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{path}: no such config file"])
    return parse_config(p.read_text(encoding="utf-8"), str(path))


def shipped_config(name: str) -> Path:
    """Path of a config bundled with the package, e.g. ``"fig1.cfg"``."""
    return Path(__file__).resolve().parent / "configs" / name


# ---------------------------------------------------------------------------
# CSV emission


def _fmt_real(x) -> str:
    if x is None or x is pd.NA:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _column_text(s: pd.Series) -> list[str]:
    if pd.api.types.is_bool_dtype(s):
        return ["1" if v else "0" for v in s]
    if pd.api.types.is_integer_dtype(s):
        return ["" if v is pd.NA else str(int(v)) for v in s.astype("Int64")]
    if pd.api.types.is_float_dtype(s):
        return [_fmt_real(v) for v in s.to_numpy(dtype=float, na_value=np.nan)]
    return ["" if (v is None or v is pd.NA) else str(v) for v in s]


def frame_to_csv(frame: pd.DataFrame) -> str:
    cols = [_column_text(frame[c]) for c in frame.columns]
    buf = io.StringIO()
    buf.write(",".join(map(str, frame.columns)) + "\n")
    for row in zip(*cols):
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def atomic_write(outputs: Mapping[str, str]) -> None:
    """Write several files so that either all appear or none do."""
    staged = []
    try:
        for path, text in outputs.items():
            d = os.path.dirname(os.path.abspath(path)) or "."
            fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def write_dataset(data: TrialDataset, wide_path, long_path=None) -> None:
    outputs = {str(wide_path): frame_to_csv(data.wide)}
    if long_path is not None:
        outputs[str(long_path)] = frame_to_csv(data.long)
    atomic_write(outputs)


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_text_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except FileNotFoundError:
        raise DataIntegrityError(f"{path}: file not found") from None
    except pd.errors.EmptyDataError:
        raise DataIntegrityError(f"{path}: empty file") from None


def _codes(raw: pd.Series, allowed: set, where: str) -> pd.Series:
    bad = ~raw.isin(allowed | {""})
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataIntegrityError(f"{where}: row {i + 2}: invalid code {raw.iloc[i]!r} in column {raw.name!r}")
    vals = [pd.NA if v == "" else int(v) for v in raw]
    return pd.array(vals, dtype="Int64")


def _reals(raw: pd.Series, where: str, required: bool = True) -> np.ndarray:
    out = np.empty(len(raw))
    for i, v in enumerate(raw):
        if v == "":
            if required:
                raise DataIntegrityError(f"{where}: row {i + 2}: missing value in column {raw.name!r}")
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except ValueError:
            raise DataIntegrityError(f"{where}: row {i + 2}: non-numeric {v!r} in column {raw.name!r}") from None
    return out


def _ints(raw: pd.Series, where: str) -> np.ndarray:
    try:
        return np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError:
        raise DataIntegrityError(f"{where}: non-integer value in column {raw.name!r}") from None


def parse_wide(raw: pd.DataFrame, where: str = "wide") -> pd.DataFrame:
    cols = list(raw.columns)
    for need in ("id", "r", "y_star"):
        if need not in cols:
            raise DataIntegrityError(f"{where}: missing column {need!r}")
    dup = raw["id"].duplicated()
    if dup.any():
        raise DataIntegrityError(f"{where}: duplicate id {raw['id'][dup].iloc[0]!r}")
    out = {"id": raw["id"].astype(object).to_numpy()}
    for c in cols[1:]:
        if _Z.match(c):
            out[c] = _codes(raw[c], {"1", "-1"}, where)
        elif c == "r":
            out[c] = _codes(raw[c], {"0", "1"}, where)
        elif c == "stage2_day":
            out[c] = pd.array([pd.NA if v == "" else int(v) for v in raw[c]], dtype="Int64")
        else:
            out[c] = _reals(raw[c], where, required=(c != "y_star"))
    return pd.DataFrame(out, columns=cols)


def _gate(raw: pd.Series, where: str) -> np.ndarray:
    codes = _codes(raw, {"0", "1"}, where)
    if codes.isna().any():
        raise DataIntegrityError(f"{where}: c_t must be 0 or 1 on every row")
    return codes.to_numpy(dtype=np.int64)


def parse_long(raw: pd.DataFrame, where: str = "long") -> pd.DataFrame:
    for need in LONG_COLUMNS:
        if need not in raw.columns:
            raise DataIntegrityError(f"{where}: missing column {need!r}")
    out = pd.DataFrame({
        "id": raw["id"].astype(object).to_numpy(),
        "t": _ints(raw["t"], where),
        "c_t": _gate(raw["c_t"], where),
        "a_t": _codes(raw["a_t"], {"1", "-1"}, where),
        "y_prox": _reals(raw["y_prox"], where),
    })
    for c in raw.columns:
        if c not in out:
            out[c] = raw[c].to_numpy()
    key = out[["id", "t"]].duplicated()
    if key.any():
        i = int(np.flatnonzero(key.to_numpy())[0])
        raise DataIntegrityError(f"{where}: row {i + 2}: duplicate (id, t) = ({out['id'][i]}, {out['t'][i]})")
    return out


def read_dataset(wide_path, long_path=None) -> TrialDataset:
    wide = parse_wide(_read_text_csv(wide_path), str(wide_path))
    if long_path is not None:
        long = parse_long(_read_text_csv(long_path), str(long_path))
        orphan = ~long["id"].isin(set(wide["id"]))
        if orphan.any():
            i = int(np.flatnonzero(orphan.to_numpy())[0])
            raise DataIntegrityError(f"{long_path}: row {i + 2}: orphan long row, id {long['id'][i]!r} "
                                     "is absent from the wide file")
    else:
        long = pd.DataFrame({"id": pd.Series([], dtype=object), "t": pd.Series([], dtype=np.int64),
                             "c_t": pd.Series([], dtype=np.int64), "a_t": pd.array([], dtype="Int64"),
                             "y_prox": pd.Series([], dtype=float)})
    zc = tuple(c for c in wide.columns if _Z.match(c))
    first_z = list(wide.columns).index(zc[0]) if zc else len(wide.columns)
    covs = tuple(c for c in list(wide.columns)[1:first_z])
    return TrialDataset(wide, long, covs, zc)


def check_codes_against_design(data: TrialDataset, spec: DesignSpec) -> None:
    """Empty stage-2 codes only where eligibility excludes assignment."""
    missing = [c for c in spec.z_columns if c not in data.wide]
    if missing:
        raise DataIntegrityError(f"wide file lacks columns {', '.join(missing)}")
    for f, col in zip(spec.coded_factors, spec.z_columns):
        unset = data.wide[col].isna()
        if not f.is_restricted and unset.any():
            raise DataIntegrityError(f"column {col} ({f.name}) has empty codes but every participant is eligible")
        if f.is_restricted:
            bad = unset & (data.wide["r"] == 0).fillna(False)
            if bad.any():
                raise DataIntegrityError(f"column {col}: non-responder {data.wide['id'][bad].iloc[0]} lacks a code")


# ---------------------------------------------------------------------------
# W&R frames


def write_wr(wr: WRDataset, path) -> None:
    atomic_write({str(path): frame_to_csv(wr.rows)})


def read_wr(path, scope: str | None = None) -> WRDataset:
    raw = _read_text_csv(path)
    for need in ("id", "weight", "cluster_id", "replicate_index"):
        if need not in raw.columns:
            raise DataIntegrityError(f"{path}: missing column {need!r}")
    if scope is None:
        scope = "proximal" if "t" in raw.columns else "distal"
    out = {}
    for c in raw.columns:
        s = raw[c]
        if c in ("id", "cluster_id"):
            out[c] = s.astype(object).to_numpy()
        elif _Z.match(c) or c in ("r", "a_t", "c_t", "stage2_day", "t", "replicate_index"):
            out[c] = pd.array([pd.NA if v == "" else int(v) for v in s], dtype="Int64")
        else:
            out[c] = _reals(s, str(path), required=False)
    rows = pd.DataFrame(out, columns=list(raw.columns))
    if not (rows["weight"] > 0).all():
        raise DataIntegrityError(f"{path}: weights must be > 0")
    zc = tuple(c for c in rows.columns if _Z.match(c))
    first_z = list(rows.columns).index(zc[0]) if zc else 1
    skip = {"t", "c_t", "a_t", "y_prox"}
    covs = tuple(c for c in list(rows.columns)[1:first_z] if c not in skip)
    return WRDataset(rows, scope, covs, zc)
