"""
トーラス上のポアソン方程式 L₀h = f のスペクトル解法
係数ごとに ĥ(m) = f̂(m)/λ(m)（m ≠ 0）、ĥ(0) = zero_mode。
"""
import logging

import numpy as np

from app.models.errors import BandLimitError, NotCenteredError, ResonanceError
from app.models.torus import GeneratorSpec, TorusFunction, TorusGrid

logger = logging.getLogger(__name__)

CENTER_TOL = 1e-10
BAND_TOL = 1e-8
RESONANCE_TOL = 1e-10
# これより小さい係数は丸め誤差とみなす（共鳴判定用）
COEFF_FLOOR = 1e-13


def _to_values(f: TorusFunction, coeffs: np.ndarray) -> np.ndarray:
    values = np.fft.ifftn(coeffs * f.grid.size)
    return np.real(values) if f.is_real else values


def check_band_limit(f: TorusFunction, coeffs: np.ndarray | None = None) -> None:
    """
    格子で解像できているかを見る。ナイキスト線の係数と、上位 1/4 帯域（|m_i| > 3m/8）の
    エネルギーがどちらも先頭係数の BAND_TOL 倍以下であることを要求する。
    m/2 を超えるモードが低いモードへ折り返した分は 1 枚の格子からは区別できないので、
    ここでは検出しない（十分な m を選ぶのは呼び出し側）。
    """
    coeffs = f.coefficients() if coeffs is None else coeffs
    abs_coeffs = np.abs(coeffs)
    peak = float(np.max(abs_coeffs))
    if peak == 0.0:
        return
    tail = float(np.max(abs_coeffs[f.grid.nyquist_mask()], initial=0.0))
    if tail > BAND_TOL * peak:
        raise BandLimitError(
            f"function is not band-limited on a grid of m={f.grid.m}: "
            f"Nyquist coefficient {tail:.3g} vs leading {peak:.3g}",
            m=f.grid.m,
        )
    high = float(np.sqrt(np.sum(abs_coeffs[f.grid.high_band_mask()] ** 2)))
    if high > BAND_TOL * peak:
        raise BandLimitError(
            f"function is under-resolved on a grid of m={f.grid.m}: "
            f"top-quarter band energy {high:.3g} vs leading {peak:.3g}",
            m=f.grid.m,
        )


def solve_poisson(f: TorusFunction, gen: GeneratorSpec, *, zero_mode: float = 0.0) -> TorusFunction:
    """
    中心化された f について L₀h = f を解く。
    f が実数値なら実数値の h を返す。
    """
    coeffs = f.coefficients()
    mean = coeffs.flat[0]
    scale = max(1.0, float(np.max(np.abs(f.values))))
    if abs(mean) > CENTER_TOL * scale:
        raise NotCenteredError(f"Poisson right-hand side is not centered: mean={abs(mean):.3g}", mean=abs(mean))
    check_band_limit(f, coeffs)

    lam = gen.symbol(f.grid)
    mag = np.abs(lam)
    nonzero = np.ones(f.grid.shape, dtype=bool)
    nonzero.flat[0] = False
    peak_coeff = float(np.max(np.abs(coeffs)))
    active = nonzero & (np.abs(coeffs) > COEFF_FLOOR * max(peak_coeff, 1e-300))
    resonant = active & (mag < RESONANCE_TOL * float(mag.max()))
    if resonant.any():
        modes = f.grid.wavenumbers()[resonant][:5].astype(int).tolist()
        raise ResonanceError(f"generator symbol vanishes on forced modes {modes}", modes=modes)

    h_coeffs = np.zeros_like(coeffs)
    safe = np.where(nonzero, lam, 1.0)
    h_coeffs[nonzero] = coeffs[nonzero] / safe[nonzero]
    h_coeffs.flat[0] = zero_mode
    return f.with_values(_to_values(f, h_coeffs))


def apply_generator(h: TorusFunction, gen: GeneratorSpec) -> TorusFunction:
    """L₀h をスペクトル的に評価する（ナイキスト成分は落とす）。"""
    coeffs = h.coefficients() * gen.symbol(h.grid)
    coeffs[h.grid.nyquist_mask()] = 0.0
    return h.with_values(_to_values(h, coeffs))


def spectral_gradient(h: TorusFunction) -> np.ndarray:
    """∂h/∂θ_i を (n, *shape) で返す。"""
    coeffs = h.coefficients()
    modes = h.grid.wavenumbers()
    nyquist = h.grid.nyquist_mask()
    out = []
    for i in range(h.grid.n):
        d = 1j * modes[..., i] * coeffs
        d[nyquist] = 0.0
        out.append(_to_values(h, d))
    return np.stack(out)


def random_band_limited(grid: TorusGrid, rng: np.random.Generator, *, terms: int = 6, max_mode: int | None = None) -> TorusFunction:
    """|m_i| ≤ max_mode（既定 m/4）の非零モードだけを持つランダムな実三角多項式（平均 0）"""
    max_mode = max_mode or max(1, grid.m // 4)
    angles = grid.angles()
    values = np.zeros(grid.size)
    for _ in range(terms):
        mode = rng.integers(-max_mode, max_mode + 1, size=grid.n)
        if not mode.any():
            mode[0] = 1
        c, s = rng.standard_normal(2)
        phase = angles @ mode
        values += c * np.cos(phase) + s * np.sin(phase)
    return TorusFunction(grid=grid, values=values)
