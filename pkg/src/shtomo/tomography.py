"""Linear tomography map, singular-spectrum analysis and state reconstruction."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ArgumentError, DegenerateDataError, DimensionError
from .field import CoherenceMatrix, ModeBasis, fidelity
from .sensor import IntensityRecord, SensorGeometry, born_intensities, measurement_kets

log = logging.getLogger(__name__)

RANK_THRESHOLD = 1e-8
PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class HermitianBasis:
    """Orthonormal Hermitian matrices, ``Tr(G_k G_l) = delta_kl``.

    Ordering: identity, then for each pair j < k the symmetric and the
    antisymmetric element, then the traceless diagonal elements. For d = 2
    this is (I, sigma_x, sigma_y, sigma_z) / sqrt(2).
    """

    gammas: np.ndarray
    labels: tuple[str, ...]

    @property
    def d(self) -> int:
        return self.gammas.shape[1]

    def coordinates(self, h: np.ndarray) -> np.ndarray:
        return np.einsum("kmn,nm->k", self.gammas, np.asarray(h)).real

    def matrix(self, r: np.ndarray) -> np.ndarray:
        return np.einsum("k,kmn->mn", np.asarray(r, dtype=float), self.gammas)


def hermitian_basis(d: int) -> HermitianBasis:
    if d < 1:
        raise ArgumentError("dimension must be positive")
    mats = [np.eye(d, dtype=complex) / math.sqrt(d)]
    labels = ["I"]
    s = 1.0 / math.sqrt(2.0)
    for j in range(d):
        for k in range(j + 1, d):
            sym = np.zeros((d, d), dtype=complex)
            sym[j, k] = sym[k, j] = s
            asym = np.zeros((d, d), dtype=complex)
            asym[j, k], asym[k, j] = -1j * s, 1j * s
            mats += [sym, asym]
            labels += [f"sym({j},{k})", f"asym({j},{k})"]
    for l in range(1, d):
        diag = np.zeros(d)
        diag[:l] = 1.0
        diag[l] = -l
        mats.append(np.diag(diag / math.sqrt(l * (l + 1))).astype(complex))
        labels.append(f"diag({l})")
    if d == 2:
        labels = ["I", "sigma_x", "sigma_y", "sigma_z"]
    return HermitianBasis(np.array(mats), tuple(labels))


@dataclass(frozen=True, eq=False)
class TomographyMatrix:
    """Real matrix ``P[a, k] = Tr(Pi_a G_k)`` so that intensities are ``P @ r``."""

    P: np.ndarray
    row_index: list[tuple[int, int]]
    hbasis: HermitianBasis
    kets: np.ndarray = field(repr=False)

    def predict(self, rho: np.ndarray) -> np.ndarray:
        return self.P @ self.hbasis.coordinates(rho)


def build_tomography_matrix(geom: SensorGeometry, basis: ModeBasis,
                            hbasis: HermitianBasis | None = None,
                            kets: np.ndarray | None = None) -> TomographyMatrix:
    if hbasis is None:
        hbasis = hermitian_basis(basis.d)
    if hbasis.d != basis.d:
        raise DimensionError("Hermitian basis and mode basis differ in dimension")
    if kets is None:
        kets = measurement_kets(basis, geom)
    P = np.einsum("sam,kmn,san->ak", kets.conj(), hbasis.gammas, kets, optimize=True).real
    P /= kets.shape[0]
    return TomographyMatrix(P, geom.row_index(), hbasis, kets)


@dataclass(frozen=True, eq=False)
class SingularSpectrum:
    values: np.ndarray
    U: np.ndarray
    Vh: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        top = self.values[0] if self.values.size and self.values[0] > 0 else 1.0
        return self.values / top

    def rank(self, threshold: float = RANK_THRESHOLD) -> int:
        return int(np.sum(self.normalized >= threshold)) if self.values[0] > 0 else 0

    def null_directions(self, threshold: float = RANK_THRESHOLD) -> np.ndarray:
        """Parameter-space directions (rows) the measurement cannot see."""
        n = self.Vh.shape[0]
        r = self.rank(threshold)
        return self.Vh[r:n] if r < n else np.empty((0, n))


def singular_spectrum(P) -> SingularSpectrum:
    P = P.P if isinstance(P, TomographyMatrix) else np.asarray(P, dtype=float)
    if P.size == 0:
        raise ArgumentError("tomography matrix is empty")
    U, S, Vh = np.linalg.svd(P, full_matrices=False)
    # pad so that null directions are available even for short matrices
    if Vh.shape[0] < P.shape[1]:
        _, _, vfull = np.linalg.svd(P, full_matrices=True)
        Vh = vfull
    return SingularSpectrum(S, U, Vh)


def dynamical_range(spec: SingularSpectrum, threshold: float):
    """Count and Gamma-coordinate normal modes with ``S_k / S_max >= threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ArgumentError("threshold must lie in (0, 1]")
    keep = spec.normalized >= threshold * (1 - 1e-12)
    count = int(np.sum(keep))
    return count, spec.Vh[:count].T


# reconstruction ----------------------------------------------------------

@dataclass
class MLOptions:
    """Settings for :func:`ml_reconstruct`.

    ``method="rrr"`` runs the RrhoR fixed point only. ``"hybrid"`` (default)
    runs ``warm_start`` RrhoR steps and then maximises the same likelihood
    with L-BFGS over a factor ``rho ~ T T^dag``, which converges in far fewer
    iterations on ill-conditioned set-ups. Both keep every iterate a unit
    trace PSD matrix and never lower the likelihood.
    """

    tol: float = 1e-10
    max_iter: int = 5000
    dilution: float = 0.5
    floor: float = PROB_FLOOR
    keep_iterates: bool = False
    reference: CoherenceMatrix | None = None
    # fit a spatially flat incoherent background alongside rho
    background: bool = False
    method: str = "hybrid"
    warm_start: int = 200

    def __post_init__(self):
        if self.method not in ("rrr", "hybrid"):
            raise ArgumentError(f"unknown ML method {self.method!r}")
        if self.tol <= 0 or self.max_iter < 1 or self.dilution <= 0:
            raise ArgumentError("tol, max_iter and dilution must be positive")


@dataclass
class ReconstructionResult:
    rho_hat: CoherenceMatrix
    iterations: int
    loglik: float
    convergence_delta: float
    converged: bool
    loglik_trace: list[float]
    informationally_complete: bool
    rank: int
    fidelity: float | None = None
    iterates: list[np.ndarray] | None = None
    background_fraction: float = 0.0


def _frequencies(data) -> np.ndarray:
    f = np.asarray(data.flat() if isinstance(data, IntensityRecord) else data, dtype=float).ravel()
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise DegenerateDataError("intensities must be finite and nonnegative")
    total = f.sum()
    if not total > 0:
        raise DegenerateDataError("all intensities are zero")
    return f / total


def _inv_sqrt_support(g: np.ndarray):
    w, v = np.linalg.eigh(g)
    keep = w > 1e-12 * w[-1]
    if not np.all(keep):
        warnings.warn(f"{np.sum(~keep)} mode direction(s) produce no signal on the detector; "
                      "the estimate is restricted to the detected subspace", RuntimeWarning)
    v = v[:, keep]
    return v, w[keep]


class _Problem:
    """Multinomial likelihood in the frame where ``sum_a Pi_a = I``.

    The state is ``(sigma, beta)``: a unit-trace signal block plus the weight
    of a flat background spread evenly over all pixels.
    """

    def __init__(self, f, kets, floor):
        self.f, self.floor = f, floor
        self.mask = f > 0
        self.n_sub, self.n = kets.shape[0], kets.shape[1]
        G = np.einsum("sam,san->mn", kets, kets.conj()) / self.n_sub
        v, g = _inv_sqrt_support(G)
        self.g = g
        self.W = (v / np.sqrt(g)).conj().T
        self.kets = np.einsum("km,sam->sak", self.W, kets)
        self.dim = self.W.shape[0]

    def probs(self, sigma, beta=0.0):
        p = np.einsum("sam,mn,san->a", self.kets.conj(), sigma, self.kets).real / self.n_sub
        return p + beta / self.n

    def loglik(self, p):
        return float(np.sum(self.f[self.mask] * np.log(np.maximum(p[self.mask], self.floor))))

    def rho(self, sigma):
        rho = self.W.conj().T @ sigma @ self.W
        rho = 0.5 * (rho + rho.conj().T)
        return rho / np.trace(rho).real


def _rrr_phase(pb: _Problem, sigma, beta, n_iter, opts, record):
    p = pb.probs(sigma, beta)
    ll = pb.loglik(p)
    ident = np.eye(pb.dim)
    delta, it = math.inf, 0
    for it in range(1, n_iter + 1):
        weights = pb.f / np.maximum(p, opts.floor)
        R = np.einsum("a,sam,san->mn", weights, pb.kets, pb.kets.conj()) / pb.n_sub
        rb = float(np.sum(weights)) / pb.n
        lam = None
        while True:
            if lam is None:
                step, sb = R, rb
            else:
                step, sb = (ident + lam * R) / (1.0 + lam), (1.0 + lam * rb) / (1.0 + lam)
            cand = step @ sigma @ step.conj().T
            cand = 0.5 * (cand + cand.conj().T)
            cand_b = sb * sb * beta
            norm = np.trace(cand).real + cand_b
            cand, cand_b = cand / norm, cand_b / norm
            p_new = pb.probs(cand, cand_b)
            ll_new = pb.loglik(p_new)
            if ll_new >= ll - 1e-12 or (lam is not None and lam < 1e-6):
                break
            lam = opts.dilution if lam is None else lam / 2.0
        delta = record(cand, cand_b, ll_new)
        sigma, beta, p, ll = cand, cand_b, p_new, ll_new
        if delta <= opts.tol:
            break
    return sigma, beta, it, delta


def _lbfgs_phase(pb: _Problem, sigma, beta, n_iter, opts, record):
    """Quasi-Newton ascent over ``sigma = T T^dag / Tr``, ``beta = s^2 / Tr``."""
    dim = pb.dim
    fit_bg = opts.background
    w, v = np.linalg.eigh(sigma)
    # keep every direction reachable; the perturbation is far below tol
    w = np.maximum(w, 1e-12 * max(w[-1], 1e-300))
    T0 = v * np.sqrt(w)
    k = pb.kets
    x0 = np.concatenate([T0.real.ravel(), T0.imag.ravel(), [math.sqrt(beta)] if fit_bg else []])

    def unpack(x):
        T = (x[: dim * dim] + 1j * x[dim * dim: 2 * dim * dim]).reshape(dim, dim)
        return T, (x[-1] if fit_bg else 0.0)

    def negll(x):
        T, s = unpack(x)
        kt = np.einsum("sam,mj->saj", k.conj(), T)
        pt = np.sum(np.abs(kt) ** 2, axis=(0, 2)) / pb.n_sub + s * s / pb.n
        norm = float(np.sum(np.abs(T) ** 2)) + s * s
        pm = np.maximum(pt, pb.floor * norm)
        fw = np.where(pb.mask, pb.f / pm, 0.0)
        ll = float(np.sum(pb.f[pb.mask] * np.log(pm[pb.mask]))) - math.log(norm)
        grad_t = 2.0 * (np.einsum("a,sam,saj->mj", fw, k, kt) / pb.n_sub - T / norm)
        grad = [grad_t.real.ravel(), grad_t.imag.ravel()]
        if fit_bg:
            grad.append([2.0 * s * (fw.sum() / pb.n - 1.0 / norm)])
        return -ll, -np.concatenate(grad)

    def state(x):
        T, s = unpack(x)
        sig = T @ T.conj().T
        norm = np.trace(sig).real + s * s
        return 0.5 * (sig + sig.conj().T) / norm, s * s / norm

    history = {"delta": math.inf, "iters": 0, "x": x0}

    def callback(xk):
        sig, b = state(xk)
        history["delta"] = record(sig, b, pb.loglik(pb.probs(sig, b)))
        history["iters"] += 1
        history["x"] = xk.copy()

    # scipy warns about maxiter=0 only through its result; skip the call instead
    if n_iter > 0:
        minimize(negll, x0, jac=True, method="L-BFGS-B", callback=callback,
                 options={"maxiter": n_iter, "maxcor": 30, "ftol": 1e-16, "gtol": 1e-13})
    sig, b = state(history["x"])
    return sig, b, history["iters"], history["delta"]


def ml_reconstruct(data, geom: SensorGeometry, basis: ModeBasis,
                   opts: MLOptions | None = None,
                   tomo: TomographyMatrix | None = None) -> ReconstructionResult:
    """Maximum-likelihood coherence matrix from relative pixel intensities.

    The likelihood is multinomial over all pixels. The POVM is first
    whitened by ``G = sum_a Pi_a`` so the RrhoR fixed point applies; a step
    that would lower the likelihood is retried in diluted form.
    """
    opts = opts or MLOptions()
    f = _frequencies(data)
    if tomo is None:
        tomo = build_tomography_matrix(geom, basis)
    if f.size != tomo.kets.shape[1]:
        raise DimensionError(f"data has {f.size} samples, geometry expects {tomo.kets.shape[1]}")
    pb = _Problem(f, tomo.kets, opts.floor)

    # maximally mixed start, which is diag(g) in the whitened frame
    sigma = np.diag(pb.g / pb.g.sum()).astype(complex)
    beta = 0.0
    if opts.background:
        sigma *= pb.dim / (pb.dim + 1.0)
        beta = 1.0 / (pb.dim + 1.0)
    p0 = pb.probs(sigma, beta)
    if np.any((p0 < opts.floor) & (f > 0)):
        warnings.warn("zero predicted probability for a lit pixel; using floor", RuntimeWarning)

    current = {"rho": pb.rho(sigma), "ll": pb.loglik(p0), "beta": beta}
    trace = [current["ll"]]
    iterates = [current["rho"]] if opts.keep_iterates else None

    def record(sig, b, ll):
        rho = pb.rho(sig)
        delta = float(np.linalg.norm(rho - current["rho"]))
        current.update(rho=rho, ll=ll, beta=b)
        trace.append(ll)
        if iterates is not None:
            iterates.append(rho)
        return delta

    n_rrr = opts.max_iter if opts.method == "rrr" else min(opts.warm_start, opts.max_iter)
    sigma, beta, it, delta = _rrr_phase(pb, sigma, beta, n_rrr, opts, record)
    if opts.method == "hybrid" and delta > opts.tol and it < opts.max_iter:
        sigma, beta, it2, delta2 = _lbfgs_phase(pb, sigma, beta, opts.max_iter - it, opts, record)
        it += it2
        delta = delta2 if it2 else delta

    spec = singular_spectrum(tomo.P)
    rank = spec.rank()
    d = basis.d
    result = ReconstructionResult(
        rho_hat=CoherenceMatrix(current["rho"], basis),
        iterations=it,
        loglik=current["ll"],
        convergence_delta=delta,
        converged=delta <= opts.tol,
        loglik_trace=trace,
        informationally_complete=rank == d * d,
        rank=rank,
        iterates=iterates,
        background_fraction=current["beta"],
    )
    if not result.informationally_complete:
        log.warning("measurement is informationally incomplete: rank %d < %d", rank, d * d)
    if opts.reference is not None:
        result.fidelity = fidelity(result.rho_hat, opts.reference)
    return result


def project_to_states(h: np.ndarray) -> np.ndarray:
    """Nearest unit-trace PSD matrix in Frobenius norm (eigenvalue simplex projection)."""
    h = 0.5 * (h + h.conj().T)
    w, v = np.linalg.eigh(h)
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, u.size + 1)
    k = idx[u - css / idx > 0][-1]
    theta = css[k - 1] / k
    lam = np.clip(w - theta, 0.0, None)
    return (v * lam) @ v.conj().T


def linear_estimate(data, P, hbasis: HermitianBasis,
                    threshold: float = RANK_THRESHOLD) -> np.ndarray:
    """Minimum-norm pseudo-inverse solution of ``I = P r`` as a Hermitian matrix.

    The result is scaled to unit trace but not projected onto states.
    """
    P = P.P if isinstance(P, TomographyMatrix) else np.asarray(P, dtype=float)
    y = _frequencies(data)
    U, S, Vh = np.linalg.svd(P, full_matrices=False)
    keep = S >= threshold * S[0]
    r = Vh[keep].T @ ((U[:, keep].T @ y) / S[keep])
    h = hbasis.matrix(r)
    h = 0.5 * (h + h.conj().T)
    tr = np.trace(h).real
    return h / tr if tr > 0 else h


def linear_reconstruct(data, P, hbasis: HermitianBasis, basis: ModeBasis | None = None,
                       threshold: float = RANK_THRESHOLD) -> CoherenceMatrix:
    """Pseudo-inverse estimate projected onto the nearest unit-trace PSD matrix."""
    return CoherenceMatrix(project_to_states(linear_estimate(data, P, hbasis, threshold)), basis)


def predicted_intensities(rho: CoherenceMatrix, kets: np.ndarray) -> np.ndarray:
    return born_intensities(rho.rho, kets)
