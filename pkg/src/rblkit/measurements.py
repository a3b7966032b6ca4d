"""Synthetic DoA, range, and RSSI observations from anchors to body nodes.

Each generator evaluates a deterministic forward model and adds Gaussian
noise plus an optional Bernoulli NLOS bias. Noise for entry ``(m, k)``
is drawn from an independent counter-based stream keyed by
``(seed, m, k)`` (see :mod:`rblkit.rng`), so an observation set is
bit-reproducible and independent of generation order.

Modalities and units:

- ``doa``: bearing from the horizontal axis, radians in ``(-pi, pi]``
  (2D only);
- ``range``: Euclidean distance, meters, clamped at zero;
- ``rssi``: received power under the log-distance path-loss model, dB.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    InvalidParameterError,
    SingularityError,
    UndefinedBearingError,
)
from .geometry import wrap_angle
from .rng import entry_rng

__all__ = [
    "AnchorSet",
    "NoiseSpec",
    "RssiModelParams",
    "ObservationSet",
    "gen_doa",
    "gen_range",
    "gen_rssi",
    "observations_to_dict",
    "observations_from_dict",
    "save_observations",
    "load_observations",
    "observations_to_csv",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class AnchorSet:
    """Known anchor (base-station) positions, one column per anchor.

    Attributes:
        positions: ``(d, M)`` array of coordinates in meters.
        label: Identifier string.
    """

    positions: np.ndarray
    label: str = "anchors"

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[0] not in (2, 3):
            raise DimensionMismatchError(
                f"anchor positions must have shape (d, M) with d in {{2,3}}, got {pos.shape}"
            )
        if pos.shape[1] < 1:
            raise InvalidParameterError("need at least one anchor")
        if not np.all(np.isfinite(pos)):
            raise InvalidParameterError("anchor positions must be finite")
        if pos.shape[1] >= 2:
            diffs = pos[:, :, None] - pos[:, None, :]
            dist = np.sqrt((diffs**2).sum(axis=0))
            np.fill_diagonal(dist, np.inf)
            if dist.min() == 0.0:
                raise InvalidParameterError("anchors must be pairwise distinct")
        object.__setattr__(self, "positions", _readonly(pos))

    @property
    def dim(self) -> int:
        return self.positions.shape[0]

    @property
    def num_anchors(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise description.

    Attributes:
        sigma: Gaussian standard deviation (meters for range, radians
            for DoA, dB for RSSI).
        nlos_prob: Per-measurement probability of an NLOS event.
        nlos_bias: Nonnegative NLOS bias magnitude (same units as the
            measurement). NLOS adds to ranges and bearings and
            attenuates RSSI (subtracts dB), matching the positive
            distance bias NLOS propagation causes.
        kind: Noise family; only ``"gaussian"`` is supported.
    """

    sigma: float = 0.0
    nlos_prob: float = 0.0
    nlos_bias: float = 0.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise InvalidParameterError(f"unsupported noise kind {self.kind!r}")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not (0.0 <= self.nlos_prob <= 1.0):
            raise InvalidParameterError(f"nlos_prob must be in [0, 1], got {self.nlos_prob}")
        if not (np.isfinite(self.nlos_bias) and self.nlos_bias >= 0):
            raise InvalidParameterError(f"nlos_bias must be >= 0, got {self.nlos_bias}")


@dataclass(frozen=True)
class RssiModelParams:
    """Log-distance path-loss parameters: ``p0 - 10 * eta * log10(d / d0)``.

    Attributes:
        p0: Reference received power at distance ``d0``, in dB.
        d0: Reference distance in meters, > 0.
        eta: Path-loss exponent, > 0.
    """

    p0: float = -40.0
    d0: float = 1.0
    eta: float = 2.0

    def __post_init__(self):
        if not (np.isfinite(self.d0) and self.d0 > 0):
            raise InvalidParameterError(f"d0 must be > 0, got {self.d0}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise InvalidParameterError(f"eta must be > 0, got {self.eta}")
        if not np.isfinite(self.p0):
            raise InvalidParameterError(f"p0 must be finite, got {self.p0}")


_MODALITIES = ("range", "doa", "rssi")


@dataclass(frozen=True)
class ObservationSet:
    """Per-anchor, per-node measurements of one modality.

    Attributes:
        modality: One of ``"range"``, ``"doa"``, ``"rssi"``.
        values: ``(M, K)`` array; row m holds anchor m's measurements.
        noise: The :class:`NoiseSpec` used for generation.
        rng_seed: 64-bit seed the noise streams were derived from.
        anchor_ref: Label of the generating :class:`AnchorSet`.
        nlos: ``(M, K)`` bool array flagging NLOS-biased entries.
        clamped: ``(M, K)`` bool array flagging ranges clamped at zero
            (all False for other modalities).
    """

    modality: str
    values: np.ndarray
    noise: NoiseSpec
    rng_seed: int
    anchor_ref: str = "anchors"
    nlos: np.ndarray = field(default=None)
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.modality not in _MODALITIES:
            raise InvalidParameterError(
                f"modality must be one of {_MODALITIES}, got {self.modality!r}"
            )
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DimensionMismatchError(f"values must be (M, K), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("observation values must be finite")
        if self.modality == "range" and np.any(values < 0):
            raise InvalidParameterError("range values must be nonnegative")
        if self.modality == "doa" and (
            np.any(values <= -np.pi) or np.any(values > np.pi)
        ):
            raise InvalidParameterError("DoA values must lie in (-pi, pi]")
        object.__setattr__(self, "values", _readonly(values))
        for name in ("nlos", "clamped"):
            mask = getattr(self, name)
            mask = (
                np.zeros(values.shape, dtype=bool)
                if mask is None
                else np.asarray(mask, dtype=bool)
            )
            if mask.shape != values.shape:
                raise DimensionMismatchError(f"{name} mask shape {mask.shape} != values shape")
            object.__setattr__(self, name, _readonly(mask))

    @property
    def num_anchors(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]


def _check_body(body: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    body = np.asarray(body, dtype=float)
    if body.ndim != 2 or body.shape[0] != anchors.dim:
        raise DimensionMismatchError(
            f"body must have shape ({anchors.dim}, K), got {body.shape}"
        )
    if not np.all(np.isfinite(body)):
        raise InvalidParameterError("body positions must be finite")
    return body


def _noise_draws(noise: NoiseSpec, seed: int, m: int, k: int) -> tuple[float, bool]:
    """One Gaussian draw and one NLOS flag from the (seed, m, k) stream."""
    rng = entry_rng(seed, m, k)
    gauss = rng.normal() * noise.sigma
    is_nlos = bool(noise.nlos_prob > 0.0 and rng.uniform() < noise.nlos_prob)
    return gauss, is_nlos


def gen_doa(
    body: np.ndarray, anchors: AnchorSet, noise: NoiseSpec, seed: int
) -> ObservationSet:
    """Generate bearing observations from each anchor to each node.

    The true bearing from anchor ``a`` to node ``s`` is
    ``atan2(s_y - a_y, s_x - a_x)``; Gaussian noise and any NLOS bias are
    added and the result wrapped to ``(-pi, pi]``.

    Raises:
        UndefinedBearingError: If a node coincides with an anchor.
        DimensionMismatchError: Bearings are defined for 2D bodies only.
    """
    body = _check_body(body, anchors)
    if anchors.dim != 2:
        raise DimensionMismatchError("DoA bearings are 2D only")
    m_count, k_count = anchors.num_anchors, body.shape[1]
    values = np.empty((m_count, k_count))
    nlos = np.zeros((m_count, k_count), dtype=bool)
    for m in range(m_count):
        for k in range(k_count):
            delta = body[:, k] - anchors.positions[:, m]
            if delta[0] == 0.0 and delta[1] == 0.0:
                raise UndefinedBearingError(
                    f"anchor {m} coincides with node {k}: bearing undefined",
                    anchor_index=m,
                    node_index=k,
                )
            truth = np.arctan2(delta[1], delta[0])
            gauss, is_nlos = _noise_draws(noise, seed, m, k)
            values[m, k] = truth + gauss + (noise.nlos_bias if is_nlos else 0.0)
            nlos[m, k] = is_nlos
    return ObservationSet(
        modality="doa",
        values=wrap_angle(values),
        noise=noise,
        rng_seed=int(seed),
        anchor_ref=anchors.label,
        nlos=nlos,
    )


def gen_range(
    body: np.ndarray, anchors: AnchorSet, noise: NoiseSpec, seed: int
) -> ObservationSet:
    """Generate range observations ``||s_k - a_m|| + noise``.

    Negative noisy ranges are clamped to zero and flagged in the
    ``clamped`` mask.
    """
    body = _check_body(body, anchors)
    m_count, k_count = anchors.num_anchors, body.shape[1]
    values = np.empty((m_count, k_count))
    nlos = np.zeros((m_count, k_count), dtype=bool)
    clamped = np.zeros((m_count, k_count), dtype=bool)
    for m in range(m_count):
        for k in range(k_count):
            truth = float(np.linalg.norm(body[:, k] - anchors.positions[:, m]))
            gauss, is_nlos = _noise_draws(noise, seed, m, k)
            value = truth + gauss + (noise.nlos_bias if is_nlos else 0.0)
            if value < 0.0:
                value = 0.0
                clamped[m, k] = True
            values[m, k] = value
            nlos[m, k] = is_nlos
    return ObservationSet(
        modality="range",
        values=values,
        noise=noise,
        rng_seed=int(seed),
        anchor_ref=anchors.label,
        nlos=nlos,
        clamped=clamped,
    )


def gen_rssi(
    body: np.ndarray,
    anchors: AnchorSet,
    model: RssiModelParams,
    noise: NoiseSpec,
    seed: int,
) -> ObservationSet:
    """Generate RSSI observations under the log-distance path-loss model.

    ``values[m, k] = p0 - 10 * eta * log10(||s_k - a_m|| / d0) + noise``;
    NLOS events subtract ``nlos_bias`` dB (extra attenuation).

    Raises:
        SingularityError: If a node-anchor distance is zero.
    """
    body = _check_body(body, anchors)
    m_count, k_count = anchors.num_anchors, body.shape[1]
    values = np.empty((m_count, k_count))
    nlos = np.zeros((m_count, k_count), dtype=bool)
    for m in range(m_count):
        for k in range(k_count):
            dist = float(np.linalg.norm(body[:, k] - anchors.positions[:, m]))
            if dist == 0.0:
                raise SingularityError(
                    f"anchor {m} coincides with node {k}: RSSI model is singular"
                )
            truth = model.p0 - 10.0 * model.eta * np.log10(dist / model.d0)
            gauss, is_nlos = _noise_draws(noise, seed, m, k)
            values[m, k] = truth + gauss - (noise.nlos_bias if is_nlos else 0.0)
            nlos[m, k] = is_nlos
    return ObservationSet(
        modality="rssi",
        values=values,
        noise=noise,
        rng_seed=int(seed),
        anchor_ref=anchors.label,
        nlos=nlos,
    )


def observations_to_dict(obs: ObservationSet, anchors: AnchorSet) -> dict:
    """JSON-ready dict: ``{"modality", "anchors", "values", "sigma", "seed"}``.

    Anchors are listed row-per-anchor, values row-per-anchor.
    """
    return {
        "modality": obs.modality,
        "anchors": anchors.positions.T.tolist(),
        "values": obs.values.tolist(),
        "sigma": obs.noise.sigma,
        "seed": obs.rng_seed,
    }


def observations_from_dict(doc: dict) -> tuple[ObservationSet, AnchorSet]:
    """Inverse of :func:`observations_to_dict` (NLOS metadata not retained)."""
    anchors = AnchorSet(positions=np.asarray(doc["anchors"], dtype=float).T)
    obs = ObservationSet(
        modality=doc["modality"],
        values=np.asarray(doc["values"], dtype=float),
        noise=NoiseSpec(sigma=float(doc["sigma"])),
        rng_seed=int(doc["seed"]),
        anchor_ref=anchors.label,
    )
    return obs, anchors


def save_observations(obs: ObservationSet, anchors: AnchorSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(observations_to_dict(obs, anchors), fh, indent=2)
        fh.write("\n")


def load_observations(path) -> tuple[ObservationSet, AnchorSet]:
    with open(path, "r", encoding="utf-8") as fh:
        return observations_from_dict(json.load(fh))


def observations_to_csv(obs: ObservationSet, path) -> None:
    """Write one row per measurement: ``anchor_id,node_id,value,is_nlos``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor_id", "node_id", "value", "is_nlos"])
        for m in range(obs.num_anchors):
            for k in range(obs.num_nodes):
                writer.writerow(
                    [m, k, repr(float(obs.values[m, k])), int(obs.nlos[m, k])]
                )
