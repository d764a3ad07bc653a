"""Reverse-mode differentiation through ``J`` unrolled WMMSE sweeps.

The recorded forward pass is treated as a ``J``-layer network whose
parameters are the phases ``theta`` (entering through the composite
channels) and the multipliers ``lambda`` (entering through the WMMSE
weights).  Cotangents of complex intermediates follow the convention
``dL = Re(conj(g) * dz)``, i.e. ``g = dL/dRe(z) + 1j dL/dIm(z)``, so all
returned gradients are ordinary real gradients of real scalars.

Every reverse routine accepts cotangents with extra leading axes (one per
output scalar) and broadcasts them against the recorded arrays, so the
power and all rate gradients are obtained in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelSample, cascaded_rows, effective_channel
from .wmmse import (
    LN2,
    ShortTermProblem,
    ShortTermSolution,
    chol_solve,
    inner_products,
    matched_filter_init,
    rates_from_effective,
    sweep,
    total_power,
)

_LAYER_KEYS = {
    "u": ("w_in", "s", "S", "u"),
    "q": ("e", "q"),
    "w": ("c", "chol", "X", "b"),
}


@dataclass(frozen=True)
class WmmseTape:
    theta: np.ndarray
    lam: np.ndarray
    R: np.ndarray
    sigma2: np.ndarray
    h: np.ndarray
    V: np.ndarray  # d h / d e^{-j theta_n}, shape (..., K, N, M)
    w0: np.ndarray
    init_scale: np.ndarray | None  # None when w0 was supplied externally
    layers: tuple  # each layer: {"u": {...}, "q": {...}, "w": {...}}
    w_final: np.ndarray

    @property
    def J(self) -> int:
        return len(self.layers)

    @property
    def weights(self) -> np.ndarray:
        return self.lam / LN2

    def nbytes(self) -> int:
        total = sum(a.nbytes for a in (self.h, self.V, self.w0, self.w_final))
        for layer in self.layers:
            for sub in layer.values():
                total += sum(a.nbytes for a in sub.values())
        return total


@dataclass
class GradientBundle:
    d_theta: np.ndarray
    d_lambda: np.ndarray

    def __add__(self, other):
        return GradientBundle(self.d_theta + other.d_theta, self.d_lambda + other.d_lambda)

    def __rmul__(self, c):
        return GradientBundle(c * self.d_theta, c * self.d_lambda)


def _freeze(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def record_and_solve(theta, lam, sample: ChannelSample, J: int, R=None, w_init=None):
    """Solve the short-term problem at ``(theta, lam)`` and keep the computation tape."""
    if J < 1:
        raise ValueError("J must be at least 1")
    theta = np.asarray(theta, dtype=float)
    h = effective_channel(sample, theta)
    K = h.shape[-2]
    R = np.zeros(K) if R is None else R
    prob = ShortTermProblem(h, lam, R, sample.noise_vars)
    a = prob.weights
    if w_init is None:
        w0 = matched_filter_init(h)
        hp = np.sum(np.abs(h) ** 2, axis=(-2, -1))
        init_scale = np.sqrt(K / np.where(hp > 0, hp, 1.0)) * (hp > 0)
    else:
        w0 = np.asarray(w_init, dtype=complex)
        init_scale = None
    w = w0
    layers = []
    for _ in range(J):
        w, rec = sweep(h, a, prob.sigma2, w)
        layers.append({key: {n: _freeze(rec[n]) for n in names} for key, names in _LAYER_KEYS.items()})
    last = layers[-1]
    e, q, u = last["q"]["e"], last["q"]["q"], last["u"]["u"]
    rates = rates_from_effective(h, w, prob.sigma2)
    tape = WmmseTape(
        theta=_freeze(theta), lam=_freeze(prob.lam), R=_freeze(prob.R), sigma2=_freeze(prob.sigma2),
        h=_freeze(h), V=_freeze(cascaded_rows(sample)), w0=_freeze(w0),
        init_scale=None if init_scale is None else _freeze(init_scale),
        layers=tuple(layers), w_final=_freeze(w),
    )
    sol = ShortTermSolution(
        w=w, u=u, q=q, e=e, rates=rates, power=total_power(w),
        objective=total_power(w) + np.sum(prob.lam * (prob.R - rates), axis=-1), tape=tape,
    )
    return sol, tape


def replay(tape: WmmseTape) -> np.ndarray:
    """Re-run the forward pass from the tape inputs."""
    w = tape.w0
    for _ in range(tape.J):
        w, _ = sweep(tape.h, tape.weights, tape.sigma2, w)
    return w


# -- reverse pass ------------------------------------------------------------

def _layer_reverse(layer, h, a, g_w):
    """Pull ``g_w`` (cotangent of this layer's output) back to its input ``w``, ``h`` and ``a``."""
    u_rec, q_rec, w_rec = layer["u"], layer["q"], layer["w"]
    w_in, s, S, u = u_rec["w_in"], u_rec["s"], u_rec["S"], u_rec["u"]
    e, q = q_rec["e"], q_rec["q"]
    c, chol, X, b = w_rec["c"], w_rec["chol"], w_rec["X"], w_rec["b"]
    Xt = np.swapaxes(X, -1, -2)

    # w_k = b_k x_k,  x_k = A^{-1} h_k
    g_b = np.sum(Xt.conj() * g_w, axis=-1)
    g_x = b.conj()[..., None] * g_w
    Yt = np.swapaxes(chol_solve(chol, np.swapaxes(g_x, -1, -2)), -1, -2)
    g_h = Yt
    Z = np.einsum("...km,...kn->...mn", Xt, Yt.conj())
    g_c = -np.real(np.einsum("...im,...mn,...in->...i", h.conj(), Z, h))
    ZZ = Z + np.swapaxes(Z, -1, -2).conj()
    g_h = g_h - c[..., None] * np.einsum("...mn,...in->...im", ZZ, h)

    # c = a q |u|^2,  b = a q u
    u2 = np.abs(u) ** 2
    g_a = g_c * q * u2 + np.real(g_b.conj() * q * u)
    g_q = g_c * a * u2 + np.real(g_b.conj() * a * u)
    g_u = 2.0 * g_c * a * q * u + a * q * g_b

    # q = 1 / e,  e = |u|^2 S - 2 Re(conj(u) s_kk) + 1
    s_kk = np.diagonal(s, axis1=-2, axis2=-1)
    g_e = -g_q / e**2
    g_u = g_u + g_e * (2.0 * S * u - 2.0 * s_kk)
    g_S = g_e * u2
    g_skk = -2.0 * g_e * u

    # u = s_kk / S
    g_skk = g_skk + g_u / S
    g_S = g_S - np.real(g_u.conj() * s_kk) / S**2

    # S_k = sum_j |s_kj|^2 + sigma_k^2
    g_s = 2.0 * g_S[..., None] * s
    K = s.shape[-1]
    idx = np.arange(K)
    g_s[..., idx, idx] += g_skk

    # s_kj = h_k^H w_j
    g_w_in = np.einsum("...km,...kj->...jm", h, g_s)
    g_h = g_h + np.einsum("...kj,...jm->...km", g_s.conj(), w_in)
    return g_w_in, g_h, g_a


def backprop(tape: WmmseTape, g_w, g_h=None):
    """Cotangents of ``h`` and of the effective weights for output cotangent ``g_w``.

    ``g_h`` adds a direct cotangent on ``h`` (e.g. from a rate evaluated at
    the final beamformers).
    """
    h, a = tape.h, tape.weights
    g_w = np.asarray(g_w, dtype=complex)
    g_h_tot = np.zeros(np.broadcast_shapes(g_w.shape, h.shape), dtype=complex)
    if g_h is not None:
        g_h_tot = g_h_tot + g_h
    g_a_tot = np.zeros(g_h_tot.shape[:-1])
    for layer in reversed(tape.layers):
        g_w, gh, ga = _layer_reverse(layer, h, a, g_w)
        g_h_tot = g_h_tot + gh
        g_a_tot = g_a_tot + ga
    if tape.init_scale is not None:
        scale = tape.init_scale[..., None, None]
        g_scale = np.real(np.sum(g_w.conj() * h, axis=(-2, -1)))[..., None, None]
        hp = np.sum(np.abs(h) ** 2, axis=(-2, -1))[..., None, None]
        hp = np.where(hp > 0, hp, 1.0)
        g_h_tot = g_h_tot + scale * g_w - g_scale * scale / hp * h
    return g_h_tot, g_a_tot


def phase_gradient(theta, V, g_h):
    """Chain a cotangent on the composite channels back to the phases.

    ``V`` holds the per-element rows from :func:`cascaded_rows`.
    """
    rot = np.exp(-1j * np.asarray(theta))
    proj = np.einsum("...km,...knm->...n", g_h.conj(), V)
    return np.real(-1j * rot * proj)


def theta_from_h(tape: WmmseTape, g_h):
    return phase_gradient(tape.theta, tape.V, g_h)


def vjp(tape: WmmseTape, g_w, g_h=None) -> GradientBundle:
    g_h_tot, g_a = backprop(tape, g_w, g_h)
    return GradientBundle(theta_from_h(tape, g_h_tot), g_a / LN2)


def vjp_power(tape: WmmseTape) -> GradientBundle:
    """Gradient of ``sum_k ||w_k^J||^2`` with respect to ``theta`` and ``lambda``."""
    return vjp(tape, 2.0 * tape.w_final)


def rate_cotangents(h, w, sigma2, k):
    """Cotangents of ``r_k`` (bits/s/Hz) w.r.t. ``w`` and ``h`` at fixed arguments."""
    s = inner_products(h, w)
    p = np.abs(s) ** 2
    S = p.sum(axis=-1) + sigma2
    I = S - np.diagonal(p, axis1=-2, axis2=-1)
    K = h.shape[-2]
    row = s[..., k, :]
    coef = 1.0 / S[..., k, None] - (np.arange(K) != k) / I[..., k, None]
    g_s_row = 2.0 * row * coef / LN2  # (..., K) over j
    g_w = h[..., k, None, :] * g_s_row[..., :, None]
    g_h = np.zeros_like(h)
    g_h[..., k, :] = np.einsum("...j,...jm->...m", g_s_row.conj(), w)
    return g_w, g_h


def vjp_rate(tape: WmmseTape, k: int):
    """Through-solution gradient of ``r_k`` plus its direct partial in ``theta``.

    Returns ``(bundle, direct_theta)``; the total ``theta`` gradient of
    ``r_k(theta, w^J(theta, lambda))`` is ``bundle.d_theta + direct_theta``.
    """
    g_w, g_h = rate_cotangents(tape.h, tape.w_final, tape.sigma2, k)
    direct = theta_from_h(tape, g_h)
    return vjp(tape, g_w), direct


def vjp_all(tape: WmmseTape):
    """Power and all rate gradients in one batched reverse pass.

    Returns ``(through, direct_theta)`` where ``through.d_theta`` has shape
    ``(K + 1, ..., N)``: row 0 is the power, row ``k`` the rate of user
    ``k - 1``.  ``direct_theta`` has the same shape with row 0 zero.
    """
    h, w = tape.h, tape.w_final
    K = h.shape[-2]
    g_ws = [2.0 * w]
    g_hs = [np.zeros_like(h)]
    for k in range(K):
        gw, gh = rate_cotangents(h, w, tape.sigma2, k)
        g_ws.append(gw)
        g_hs.append(gh)
    g_w = np.stack(g_ws)
    g_h_direct = np.stack(g_hs)
    through = vjp(tape, g_w)
    direct = theta_from_h(tape, g_h_direct)
    return through, direct


def jacobian_w_theta(tape: WmmseTape) -> np.ndarray:
    """Dense ``d w^J / d theta`` (complex, shape ``(K, M, N)``), for tests on single samples."""
    K, M = tape.w_final.shape[-2:]
    N = tape.theta.shape[-1]
    eye = np.eye(K * M).reshape(K * M, K, M)
    # cotangent e gives grad of Re(conj(e) . w); imaginary unit gives Im part
    re = vjp(tape, eye.astype(complex)).d_theta.reshape(K, M, N)
    im = vjp(tape, 1j * eye).d_theta.reshape(K, M, N)
    return re + 1j * im
