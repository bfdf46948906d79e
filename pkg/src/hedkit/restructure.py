"""Weight-and-Replicate restructuring with known inverse-probability weights.

Responders were never randomized to the restricted stage-2 factor, so each
responder row is duplicated with the stage-2 code set to +1 on one copy and
-1 on the other.  Weights are inverses of the design's assignment
probabilities (see :func:`hedkit.design.path_probability`).  Every replicate
keeps its source participant as ``cluster_id``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .design import DesignSpec, stage1_probability
from .errors import DataIntegrityError, UnsupportedScopeError
from .simulate import TrialDataset

DISTAL = "distal"
PROXIMAL = "proximal"


@dataclass(frozen=True)
class WRDataset:
    rows: pd.DataFrame
    scope: str
    covariates: tuple[str, ...] = ()
    z_columns: tuple[str, ...] = ()

    @property
    def n_clusters(self) -> int:
        return int(self.rows["cluster_id"].nunique())


def _stage1_weights(wide: pd.DataFrame, spec: DesignSpec) -> np.ndarray:
    cols = list(spec.stage1_columns)
    levels = wide[cols].to_numpy(dtype=np.int64)
    # few distinct level combinations: look each up once
    uniq, inv = np.unique(levels, axis=0, return_inverse=True)
    w = np.array([1.0 / stage1_probability(spec, row) for row in uniq])
    return w[inv.reshape(-1)]


def _replicate_index(reps: np.ndarray) -> np.ndarray:
    starts = np.repeat(np.cumsum(reps) - reps, reps)
    return np.arange(int(reps.sum()), dtype=np.int64) - starts


def _check_stage2(wide: pd.DataFrame, spec: DesignSpec) -> None:
    rcol = spec.restricted_column
    r = wide["r"]
    if r.isna().any():
        raise DataIntegrityError("response indicator r is missing for some participants")
    unset = wide[rcol].isna()
    bad = wide.loc[(r == 0) & unset, "id"]
    if len(bad):
        raise DataIntegrityError(f"non-responder(s) without a stage-2 code: {', '.join(map(str, bad[:5]))}")
    bad = wide.loc[(r == 1) & ~unset, "id"]
    if len(bad):
        raise DataIntegrityError(f"responder(s) carrying a stage-2 code: {', '.join(map(str, bad[:5]))}")


def weight_and_replicate_distal(data: TrialDataset, spec: DesignSpec) -> WRDataset:
    if not spec.is_restricted:
        raise UnsupportedScopeError("distal Weight-and-Replicate needs a response-restricted design")
    wide = data.wide.reset_index(drop=True)
    _check_stage2(wide, spec)
    rcol = spec.restricted_column
    f2 = spec.restricted_factor
    w1 = _stage1_weights(wide, spec)
    resp = wide["r"].to_numpy(dtype=np.int64) == 1

    # responder copies are emitted adjacent: replicate 0 gets +1, replicate 1 gets -1
    reps = np.where(resp, 2, 1)
    idx = np.repeat(np.arange(len(wide)), reps)
    rep_index = _replicate_index(reps)
    rows = wide.iloc[idx].reset_index(drop=True)
    z2 = rows[rcol].astype("Int64").to_numpy(dtype=np.float64, na_value=np.nan)
    is_resp = resp[idx]
    z2 = np.where(is_resp, np.where(rep_index == 0, 1.0, -1.0), z2)
    rows[rcol] = pd.array(z2.astype(np.int64), dtype="Int64")
    p2 = np.where(z2 == 1, f2.prob(1), f2.prob(-1))
    weight = np.where(is_resp, w1[idx], w1[idx] / p2)
    rows["weight"] = weight
    rows["cluster_id"] = rows["id"].to_numpy()
    rows["replicate_index"] = rep_index.astype(np.int64)
    return WRDataset(rows, DISTAL, data.covariates, data.z_columns)


def weight_and_replicate_proximal(data: TrialDataset, spec: DesignSpec) -> WRDataset:
    """Person-period W&R.

    Rows before stage-2 assignment (``c_t = 0``) stay single with the stage-2
    code stored as 0.  A responder's rows after assignment are duplicated
    with codes +1/-1, each copy carrying half the weight of a non-responder
    row at balanced randomization (``1/p1``).  A responder's unreplicated
    rows stand for both copies and carry their summed weight ``2/p1``.
    """
    if spec.micro_factor is None or data.long is None:
        raise UnsupportedScopeError("proximal Weight-and-Replicate needs a long person-period table")
    wide = data.wide.reset_index(drop=True)
    long = data.long.reset_index(drop=True)
    if not len(long) and len(wide) and spec.micro_horizon_T > 0:
        raise UnsupportedScopeError("long table is empty")
    merged = long.merge(wide.drop(columns=["y_star"], errors="ignore"), on="id", how="left",
                        validate="many_to_one", sort=False)
    if not spec.is_restricted:
        merged["weight"] = 1.0
        merged["cluster_id"] = merged["id"].to_numpy()
        merged["replicate_index"] = np.zeros(len(merged), dtype=np.int64)
        return WRDataset(merged, PROXIMAL, data.covariates, data.z_columns)

    _check_stage2(wide, spec)
    rcol = spec.restricted_column
    f2 = spec.restricted_factor
    pos = pd.Index(wide["id"]).get_indexer(merged["id"])
    w1 = _stage1_weights(wide, spec)[pos]
    resp = merged["r"].to_numpy(dtype=np.int64) == 1
    c = merged["c_t"].to_numpy(dtype=np.int64) == 1
    dup = resp & c
    reps = np.where(dup, 2, 1)
    idx = np.repeat(np.arange(len(merged)), reps)
    rep_index = _replicate_index(reps)
    rows = merged.iloc[idx].reset_index(drop=True)

    code = rows[rcol].astype("Int64").to_numpy(dtype=np.float64, na_value=np.nan)
    r_i, c_i, d_i = resp[idx], c[idx], dup[idx]
    code = np.where(d_i, np.where(rep_index == 0, 1.0, -1.0), code)
    code = np.where(c_i, code, 0.0)
    rows[rcol] = pd.array(code.astype(np.int64), dtype="Int64")

    nr_code = merged[rcol].astype("Int64").to_numpy(dtype=np.float64, na_value=0.0)[idx]
    p2 = np.where(nr_code == 1, f2.prob(1), f2.prob(-1))
    w = w1[idx]
    weight = np.where(~r_i, w / p2, np.where(d_i, w, 2.0 * w))
    rows["weight"] = weight
    rows["cluster_id"] = rows["id"].to_numpy()
    rows["replicate_index"] = rep_index.astype(np.int64)
    return WRDataset(rows, PROXIMAL, data.covariates, data.z_columns)


def undo_distal(wr: WRDataset, spec: DesignSpec) -> pd.DataFrame:
    """Drop second replicates and unset responders' stage-2 code."""
    rows = wr.rows[wr.rows["replicate_index"] == 0].drop(columns=["weight", "cluster_id", "replicate_index"])
    rows = rows.reset_index(drop=True)
    rcol = spec.restricted_column
    vals = rows[rcol].astype("Int64").copy()
    vals[rows["r"].to_numpy() == 1] = pd.NA
    rows[rcol] = vals
    return rows
