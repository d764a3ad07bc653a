"""Short-term active beamforming by weighted MMSE block-coordinate descent.

For fixed phases and multipliers the per-slot problem is

    min_w  sum_k ||w_k||^2 + sum_k lambda_k (R_k - r_k(w)),

with rates ``r_k`` in bits/s/Hz.  Rewriting ``lambda_k r_k`` as
``(lambda_k / ln 2) ln(1 + SINR_k)`` gives the usual WMMSE form with
effective weights ``a_k = lambda_k / ln 2``; every update below uses ``a``.

All array routines broadcast over leading batch axes: channels are
``(..., K, M)``, per-user quantities ``(..., K)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSample, effective_channel

LN2 = np.log(2.0)


@dataclass
class ShortTermProblem:
    h_eff: np.ndarray  # (..., K, M)
    lam: np.ndarray  # (..., K)
    R: np.ndarray  # (K,)
    sigma2: np.ndarray  # (..., K)

    def __post_init__(self):
        self.h_eff = np.asarray(self.h_eff, dtype=complex)
        K = self.h_eff.shape[-2]
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), self.h_eff.shape[:-1])
        self.R = np.broadcast_to(np.asarray(self.R, dtype=float), (K,))
        self.sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=float), self.h_eff.shape[:-1])
        if np.any(self.lam < 0):
            raise ValueError("multipliers must be non-negative")
        if np.any(self.sigma2 <= 0):
            raise ValueError("noise powers must be positive")

    @property
    def weights(self) -> np.ndarray:
        return self.lam / LN2


@dataclass
class ShortTermSolution:
    w: np.ndarray
    u: np.ndarray
    q: np.ndarray
    e: np.ndarray
    rates: np.ndarray
    power: np.ndarray
    objective: np.ndarray
    history: list = field(default_factory=list)
    tape: object = None

    def to_dict(self) -> dict:
        def cplx(a):
            a = np.asarray(a)
            return {"re": a.real.tolist(), "im": a.imag.tolist()}

        return {
            "w": cplx(self.w),
            "u": cplx(self.u),
            "q": np.asarray(self.q).tolist(),
            "e": np.asarray(self.e).tolist(),
            "rates": np.asarray(self.rates).tolist(),
            "power": np.asarray(self.power).tolist(),
            "objective": np.asarray(self.objective).tolist(),
        }


def inner_products(h, w):
    """``s[..., k, j] = h_k^H w_j``."""
    return np.einsum("...km,...jm->...kj", h.conj(), w)


def sinr_from_effective(h, w, sigma2):
    s = inner_products(h, w)
    p = np.abs(s) ** 2
    sig = np.diagonal(p, axis1=-2, axis2=-1)
    interf = p.sum(axis=-1) - sig + sigma2
    return sig / interf


def rates_from_effective(h, w, sigma2):
    return np.log2(1.0 + sinr_from_effective(h, w, sigma2))


def sinr_and_rate(theta, w, sample: ChannelSample):
    """Per-user SINR and rate (bits/s/Hz) for phases ``theta`` and beamformers ``w``."""
    h = effective_channel(sample, theta)
    sinr = sinr_from_effective(h, w, sample.noise_vars)
    return sinr, np.log2(1.0 + sinr)


def total_power(w):
    return np.sum(np.abs(w) ** 2, axis=(-2, -1))


def matched_filter_init(h, K_power=None):
    """``w_k = c h_k`` with one common ``c`` so that the total power is ``K`` watts."""
    K = h.shape[-2]
    target = float(K if K_power is None else K_power)
    hp = np.sum(np.abs(h) ** 2, axis=(-2, -1))
    c = np.sqrt(target / np.where(hp > 0, hp, 1.0)) * (hp > 0)
    return c[..., None, None] * h


# -- block updates -----------------------------------------------------------

def _u_step(h, w, sigma2):
    s = inner_products(h, w)
    S = np.sum(np.abs(s) ** 2, axis=-1) + sigma2
    s_kk = np.diagonal(s, axis1=-2, axis2=-1)
    u = s_kk / S
    return u, s, S


def _mse(u, s, S):
    s_kk = np.diagonal(s, axis1=-2, axis2=-1)
    return np.abs(u) ** 2 * S - 2.0 * np.real(u.conj() * s_kk) + 1.0


def _w_step(h, a, u, q):
    M = h.shape[-1]
    c = a * q * np.abs(u) ** 2
    A = np.eye(M) + np.einsum("...k,...km,...kn->...mn", c, h, h.conj())
    L = np.linalg.cholesky(A)
    X = chol_solve(L, np.swapaxes(h, -1, -2))  # columns A^{-1} h_k
    b = a * q * u
    w = np.swapaxes(X, -1, -2) * b[..., None]
    return w, c, L, X, b


def chol_solve(L, B):
    """Solve ``L L^H X = B`` for a batch of lower-triangular factors."""
    y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2).conj(), y)


def update_u(prob: ShortTermProblem, w):
    return _u_step(prob.h_eff, w, prob.sigma2)[0]


def mse(prob: ShortTermProblem, u, w):
    s = inner_products(prob.h_eff, w)
    S = np.sum(np.abs(s) ** 2, axis=-1) + prob.sigma2
    return _mse(u, s, S)


def update_q(prob: ShortTermProblem, u, w):
    return 1.0 / mse(prob, u, w)


def update_w(prob: ShortTermProblem, u, q):
    return _w_step(prob.h_eff, prob.weights, u, q)[0]


# -- objectives --------------------------------------------------------------

def objective(prob: ShortTermProblem, w):
    """Value of the per-slot problem, constant ``sum lambda_k R_k`` included."""
    r = rates_from_effective(prob.h_eff, w, prob.sigma2)
    return total_power(w) + np.sum(prob.lam * (prob.R - r), axis=-1)


def equivalent_objective(prob: ShortTermProblem, u, q, w):
    """WMMSE objective shifted by constants so it equals :func:`objective` at MMSE-optimal ``u, q``."""
    e = mse(prob, u, w)
    a = prob.weights
    return total_power(w) + np.sum(a * (q * e - np.log(q) - 1.0) + prob.lam * prob.R, axis=-1)


def short_term_residual(prob: ShortTermProblem, w):
    """Norm of the gradient of :func:`objective` w.r.t. ``w`` (stacked over users)."""
    h, sigma2 = prob.h_eff, prob.sigma2
    s = inner_products(h, w)
    p = np.abs(s) ** 2
    S = p.sum(axis=-1) + sigma2
    I = S - np.diagonal(p, axis1=-2, axis2=-1)
    K = h.shape[-2]
    # coefficient of h_k h_k^H w_j in d r_k / d conj(w_j), times ln 2
    coef = 1.0 / S[..., :, None] - (1.0 - np.eye(K)) / I[..., :, None]
    coef = coef * (prob.lam / LN2)[..., :, None]
    # grad_j = w_j - sum_k coef[k, j] h_k s[k, j]
    grad = w - np.einsum("...kj,...km,...kj->...jm", coef, h, s)
    return np.sqrt(np.sum(np.abs(grad) ** 2, axis=(-2, -1)))


# -- solver ------------------------------------------------------------------

def sweep(h, a, sigma2, w):
    """One full (u, q, w) pass; returns the new iterate and every intermediate."""
    u, s, S = _u_step(h, w, sigma2)
    e = _mse(u, s, S)
    q = 1.0 / e
    w_new, c, L, X, b = _w_step(h, a, u, q)
    return w_new, dict(w_in=w, s=s, S=S, u=u, e=e, q=q, c=c, chol=L, X=X, b=b)


def solve_short_term(prob: ShortTermProblem, J: int, w_init=None, *, track_blocks=False,
                     record=None) -> ShortTermSolution:
    """Run exactly ``J`` WMMSE sweeps.

    ``track_blocks`` stores the equivalent objective after every block update
    (starting after the first q-update, where it is first defined).
    ``record`` is an optional callable receiving each sweep's intermediates.
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    h, a, sigma2 = prob.h_eff, prob.weights, prob.sigma2
    w = matched_filter_init(h) if w_init is None else np.asarray(w_init, dtype=complex)
    history = []
    u = q = e = None
    for _ in range(J):
        if track_blocks and q is not None:
            u_new = update_u(prob, w)
            history.append(equivalent_objective(prob, u_new, q, w))
        w_new, rec = sweep(h, a, sigma2, w)
        u, q, e = rec["u"], rec["q"], rec["e"]
        if track_blocks:
            history.append(equivalent_objective(prob, u, q, w))
            history.append(equivalent_objective(prob, u, q, w_new))
        if record is not None:
            record(rec)
        w = w_new
    rates = rates_from_effective(h, w, sigma2)
    return ShortTermSolution(
        w=w, u=u, q=q, e=e, rates=rates, power=total_power(w),
        objective=objective(prob, w), history=history,
    )
