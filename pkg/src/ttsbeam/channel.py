"""Statistical channel model for the IRS-aided MISO downlink.

Links are synthesized as narrowband clustered-delay-line channels: every
cluster contributes a complex Gaussian gain times the outer product of the
array responses at both ends.  The first cluster is the line-of-sight one;
its share of the expected link power is the LoS power ratio.

The conjugate convention follows the downlink model ``y_k = (h_r^H Theta G
+ h_d^H) x``, so the composite channel seen by the AP is
``h_eff_k = G^H Theta^H h_r_k + h_d_k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import j0

SPEED_OF_LIGHT = 299_792_458.0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(watts):
    return 10.0 * np.log10(np.asarray(watts, dtype=float)) + 30.0


@dataclass(frozen=True)
class SystemDims:
    M: int
    N_y: int
    N_z: int
    K: int

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ValueError(f"need M >= 1 and K >= 1, got M={self.M}, K={self.K}")
        if self.N_y < 0 or self.N_z < 0:
            raise ValueError("IRS grid dimensions must be non-negative")

    @property
    def N(self) -> int:
        return self.N_y * self.N_z


class Link(Enum):
    AU = "AU"  # AP -> user
    AI = "AI"  # AP -> IRS
    IU = "IU"  # IRS -> user


@dataclass(frozen=True)
class PathLossParams:
    """Large-scale propagation parameters.

    Positions are 3-D coordinates in meters, spacings are in carrier
    wavelengths.
    """

    C0_db: float = -30.0
    D0: float = 1.0
    alpha_Au: float = 3.6
    alpha_AI: float = 2.2
    alpha_Iu: float = 2.2
    ap_position: tuple = (2.0, 0.0, 0.0)
    irs_position: tuple = (0.0, 50.0, 3.0)
    user_positions: tuple = ()
    d_A: float = 0.5
    d_I: float = 0.125
    f_c: float = 5e9

    def __post_init__(self):
        for name in ("alpha_Au", "alpha_AI", "alpha_Iu", "d_A", "d_I", "f_c", "D0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        pts = [self.ap_position, self.irs_position, *self.user_positions]
        if not np.all(np.isfinite(np.asarray(pts, dtype=float))):
            raise ValueError("positions must be finite")

    def exponent(self, link: Link) -> float:
        return {Link.AU: self.alpha_Au, Link.AI: self.alpha_AI, Link.IU: self.alpha_Iu}[link]


def ula_response(M: int, d_A: float, aod: float) -> np.ndarray:
    """Steering vector of an ``M``-element ULA with spacing ``d_A`` wavelengths."""
    m = np.arange(M)
    return np.exp(-2j * np.pi * m * d_A * np.sin(aod))


def upa_response(N_y: int, N_z: int, d_I: float, azimuth: float, elevation: float) -> np.ndarray:
    """Steering vector of an ``N_y x N_z`` planar array in the y-z plane.

    Element ``n`` sits in column ``n mod N_y`` and row ``n // N_y``.
    """
    n = np.arange(N_y * N_z)
    row = n // N_y
    col = n - row * N_y
    phase = row * np.sin(elevation) * np.sin(azimuth) + col * np.sin(elevation) * np.cos(azimuth)
    return np.exp(-2j * np.pi * d_I * phase)


def path_loss_gain(params: PathLossParams, link: Link, distance: float) -> float:
    """Linear channel gain ``C0 (d / D0)^-alpha``."""
    if not distance > 0:
        raise ValueError(f"distance must be positive, got {distance}")
    return float(db_to_linear(params.C0_db) * (distance / params.D0) ** (-params.exponent(link)))


def default_cluster_profile(Q: int) -> np.ndarray:
    """Unnormalized NLoS cluster powers decaying exponentially with index."""
    return np.exp(-np.arange(Q - 1) / 2.0)


@dataclass(frozen=True)
class CdlLinkModel:
    """One link of the clustered channel model.

    ``rx`` and ``tx`` hold per-cluster steering vectors of shape ``(Q, n_rx)``
    and ``(Q, n_tx)``.  A vector link (single-antenna user) has ``n_rx = 1``.
    """

    cluster_powers: np.ndarray
    rx: np.ndarray
    tx: np.ndarray
    los_ratio: float
    link_gain: float
    calibrated: bool = False

    @property
    def Q(self) -> int:
        return len(self.cluster_powers)

    def realized_los_ratio(self) -> float:
        p = np.asarray(self.cluster_powers)
        return float(p[0] / p.sum())

    def sample_gains(self, rng: np.random.Generator, size=()) -> np.ndarray:
        shape = tuple(np.atleast_1d(size)) if size != () else ()
        z = rng.standard_normal(shape + (self.Q, 2))
        return np.sqrt(self.cluster_powers / 2.0) * (z[..., 0] + 1j * z[..., 1])

    def synthesize(self, gains: np.ndarray) -> np.ndarray:
        """Channel matrix ``sqrt(L) sum_q p_q rx_q tx_q^H`` for given cluster gains."""
        return np.sqrt(self.link_gain) * np.einsum("...q,qn,qm->...nm", gains, self.rx, self.tx.conj())


def calibrate_link(link: CdlLinkModel, los_ratio: float | None = None) -> CdlLinkModel:
    """Rescale cluster powers so the LoS cluster carries exactly ``los_ratio``."""
    beta = link.los_ratio if los_ratio is None else los_ratio
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"LoS ratio must lie in [0, 1], got {beta}")
    p = np.asarray(link.cluster_powers, dtype=float)
    if np.any(p < 0):
        raise ValueError("cluster powers must be non-negative")
    out = np.empty_like(p)
    out[0] = beta
    nlos = p[1:]
    if nlos.size == 0 or nlos.sum() == 0:
        if beta < 1.0:
            raise ValueError("a link without NLoS clusters needs LoS ratio 1")
        out[1:] = 0.0
    else:
        out[1:] = (1.0 - beta) * nlos / nlos.sum()
    return replace(link, cluster_powers=out, los_ratio=beta, calibrated=True)


@dataclass
class ChannelSample:
    """One realization of ``{G, h_r, h_d}`` plus per-user noise powers.

    Arrays may carry a leading batch axis; see :func:`stack_samples`.
    """

    G: np.ndarray  # (N, M)
    h_r: np.ndarray  # (K, N)
    h_d: np.ndarray  # (K, M)
    noise_vars: np.ndarray  # (K,)

    @property
    def dims(self) -> tuple[int, int, int]:
        N, M = self.G.shape[-2:]
        return M, N, self.h_d.shape[-2]

    def validate(self, dims: SystemDims | None = None) -> None:
        M, N, K = self.dims
        if self.h_r.shape[-2:] != (K, N) or self.h_d.shape[-1] != M:
            raise ValueError("inconsistent channel block shapes")
        if dims is not None and (M, N, K) != (dims.M, dims.N, dims.K):
            raise ValueError(f"sample dims {(M, N, K)} do not match {dims}")
        for a in (self.G, self.h_r, self.h_d):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite channel entries")


def stack_samples(samples: list[ChannelSample]) -> ChannelSample:
    return ChannelSample(
        G=np.stack([s.G for s in samples]),
        h_r=np.stack([s.h_r for s in samples]),
        h_d=np.stack([s.h_d for s in samples]),
        noise_vars=np.stack([s.noise_vars for s in samples]),
    )


def user_semicircle(K: int, rng: np.random.Generator, center=(2.0, 50.0, 0.0), radius=3.0):
    """Users at uniform random angles on a horizontal semicircle."""
    phi = np.sort(rng.uniform(0.0, np.pi, size=K))
    c = np.asarray(center, dtype=float)
    return tuple(tuple(c + radius * np.array([np.cos(p), np.sin(p), 0.0])) for p in phi)


@dataclass(frozen=True)
class ScsiModel:
    """Statistical CSI: everything needed to draw channel samples."""

    dims: SystemDims
    params: PathLossParams
    ap_irs: CdlLinkModel
    ap_user: tuple[CdlLinkModel, ...]
    irs_user: tuple[CdlLinkModel, ...]
    noise_vars: np.ndarray = field(default_factory=lambda: np.array([]))

    def links(self):
        yield self.ap_irs
        yield from self.ap_user
        yield from self.irs_user


def _random_link(rng, Q, rx_fn, tx_fn, beta, gain):
    az_rx = rng.uniform(0.0, 2 * np.pi, Q)
    el_rx = rng.uniform(0.0, np.pi, Q)
    az_tx = rng.uniform(0.0, 2 * np.pi, Q)
    el_tx = rng.uniform(0.0, np.pi, Q)
    rx = np.stack([rx_fn(a, e) for a, e in zip(az_rx, el_rx)])
    tx = np.stack([tx_fn(a, e) for a, e in zip(az_tx, el_tx)])
    prof = np.concatenate([[1.0], default_cluster_profile(Q)])
    return calibrate_link(CdlLinkModel(prof, rx, tx, beta, gain))


def build_scsi_model(
    dims: SystemDims,
    params: PathLossParams | None = None,
    *,
    beta_AI: float = 0.5,
    beta_Iu: float = 0.5,
    beta_Au: float = 0.0,
    n_clusters: int = 5,
    noise_dbm: float = -80.0,
    seed: int = 0,
) -> ScsiModel:
    """Draw geometry and cluster angles once from ``seed`` and calibrate all links.

    When ``params.user_positions`` is empty the users are placed on the
    default semicircle.
    """
    params = params or PathLossParams()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C51]))
    if not params.user_positions:
        params = replace(params, user_positions=user_semicircle(dims.K, rng))
    if len(params.user_positions) != dims.K:
        raise ValueError("need one position per user")

    ap = np.asarray(params.ap_position, dtype=float)
    irs = np.asarray(params.irs_position, dtype=float)
    users = np.asarray(params.user_positions, dtype=float)

    def ula(az, el):
        return ula_response(dims.M, params.d_A, az)

    def upa(az, el):
        return upa_response(dims.N_y, dims.N_z, params.d_I, az, el)

    def single(az, el):
        return np.ones(1, dtype=complex)

    Q = n_clusters
    ap_irs = _random_link(rng, Q, upa, ula, beta_AI,
                          path_loss_gain(params, Link.AI, np.linalg.norm(irs - ap)))
    ap_user = tuple(
        _random_link(rng, Q, single, ula, beta_Au,
                     path_loss_gain(params, Link.AU, np.linalg.norm(u - ap)))
        for u in users
    )
    irs_user = tuple(
        _random_link(rng, Q, single, upa, beta_Iu,
                     path_loss_gain(params, Link.IU, np.linalg.norm(u - irs)))
        for u in users
    )
    noise = np.full(dims.K, float(dbm_to_watts(noise_dbm)))
    return ScsiModel(dims, params, ap_irs, ap_user, irs_user, noise)


def sample_channel(model: ScsiModel, rng) -> ChannelSample:
    """Draw one channel realization; ``rng`` is a Generator or anything ``default_rng`` accepts."""
    if not all(link.calibrated for link in model.links()):
        raise ValueError("ScsiModel contains uncalibrated links")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    G = model.ap_irs.synthesize(model.ap_irs.sample_gains(rng))
    # user-side links are 1 x n matrices; conjugate so h^H reproduces the row
    h_r = np.stack([lk.synthesize(lk.sample_gains(rng))[0].conj() for lk in model.irs_user])
    h_d = np.stack([lk.synthesize(lk.sample_gains(rng))[0].conj() for lk in model.ap_user])
    return ChannelSample(G, h_r, h_d, model.noise_vars.copy())


def sample_batch(model: ScsiModel, seeds) -> ChannelSample:
    return stack_samples([sample_channel(model, np.random.default_rng(s)) for s in seeds])


def effective_channel(sample: ChannelSample, theta: np.ndarray) -> np.ndarray:
    """Composite channels ``G^H diag(e^{j theta})^H h_r_k + h_d_k``, shape ``(..., K, M)``."""
    theta = np.asarray(theta, dtype=float)
    N = sample.G.shape[-2]
    if theta.shape[-1] != N or sample.h_r.shape[-1] != N:
        raise ValueError(f"theta has {theta.shape[-1]} phases for an IRS with {N} elements")
    weighted = sample.h_r * np.exp(-1j * theta)[..., None, :]
    return np.einsum("...nm,...kn->...km", sample.G.conj(), weighted) + sample.h_d


def cascaded_rows(sample: ChannelSample) -> np.ndarray:
    """Per-element contributions ``V[k, n] = conj(G[n]) h_r[k, n]`` with ``h_eff_k = sum_n e^{-j theta_n} V[k, n] + h_d_k``."""
    return sample.G.conj()[..., None, :, :] * sample.h_r[..., :, :, None]


def doppler_hz(user_speed_kmh: float, f_c: float) -> float:
    return user_speed_kmh / 3.6 * f_c / SPEED_OF_LIGHT


def delay_correlation(delay_ms: float, user_speed_kmh: float, f_c: float) -> float:
    """Jakes correlation ``J0(2 pi f_d delay)``."""
    if delay_ms < 0:
        raise ValueError("delay must be non-negative")
    return float(j0(2 * np.pi * doppler_hz(user_speed_kmh, f_c) * delay_ms * 1e-3))


def apply_csi_delay(sample_old: ChannelSample, sample_innovation: ChannelSample,
                    delay: float, user_speed: float, f_c: float = 5e9) -> ChannelSample:
    """First-order autoregressive aging, applied to each channel block independently."""
    if delay < 0:
        raise ValueError("delay must be non-negative")
    if delay == 0:
        return sample_old
    rho = delay_correlation(delay, user_speed, f_c)
    s = np.sqrt(max(0.0, 1.0 - rho**2))
    return ChannelSample(
        G=rho * sample_old.G + s * sample_innovation.G,
        h_r=rho * sample_old.h_r + s * sample_innovation.h_r,
        h_d=rho * sample_old.h_d + s * sample_innovation.h_d,
        noise_vars=sample_old.noise_vars,
    )


def full_csi_delay_factor(M: int, N: int, K: int) -> float:
    """Ratio between full-channel and effective-channel estimation delays."""
    return (N * K + M * K + N * M) / (M * K)


def dump_sample(sample: ChannelSample, path) -> None:
    """Write ``G``, ``h_r``, ``h_d`` as little-endian interleaved re/im doubles plus a JSON sidecar."""
    path = Path(path)
    blocks = {"G": sample.G, "h_r": sample.h_r, "h_d": sample.h_d}
    with open(path, "wb") as fh:
        for a in blocks.values():
            fh.write(np.ascontiguousarray(a, dtype="<c16").tobytes(order="C"))
    meta = {
        "dtype": "complex128-le-interleaved",
        "order": "row-major",
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
        "noise_vars": np.asarray(sample.noise_vars).tolist(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_sample(path) -> ChannelSample:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<c16")
    out, pos = {}, 0
    for blk in meta["blocks"]:
        n = int(np.prod(blk["shape"]))
        out[blk["name"]] = raw[pos:pos + n].reshape(blk["shape"]).astype(complex)
        pos += n
    return ChannelSample(out["G"], out["h_r"], out["h_d"], np.asarray(meta["noise_vars"]))
