"""
正準シンプレクティック演算
R^(2n) 上のハミルトンベクトル場 X_H = J∇H、ポアソン括弧、ω(X_H, K) ペアリングを計算する。
座標の並びは (q_1..q_n, p_1..p_n) に固定。
"""
import numpy as np

from app.models.errors import DimensionMismatchError, NonFiniteError
from app.models.phase import PhasePoint, ScalarFunction, SmoothField, as_coords


def _require_same_dimension(*objs) -> int:
    dims = {o.n for o in objs}
    if len(dims) != 1:
        raise DimensionMismatchError(f"dimension mismatch: {sorted(dims)}")
    return dims.pop()


def _split(grad: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    return grad[..., :n], grad[..., n:]


def symplectic_gradient(H: ScalarFunction, x: "PhasePoint | np.ndarray") -> np.ndarray:
    """X_H(x) = (∂H/∂p, −∂H/∂q)。ω = Σ dq_i∧dp_i の下で ι_{X_H}ω = dH を満たす。"""
    n = H.n
    coords = as_coords(x, n)
    dq, dp = _split(H.grad(coords), n)
    field = np.concatenate([dp, -dq], axis=-1)
    if not np.all(np.isfinite(field)):
        raise NonFiniteError(f"non-finite Hamiltonian vector field of {H.name or 'H'}")
    return field


def hamiltonian_field(H: ScalarFunction) -> SmoothField:
    """X_H を SmoothField として包む。"""
    return SmoothField(
        n=H.n,
        evaluator=lambda x: symplectic_gradient(H, x),
        domain=H.domain,
        name=f"X_{H.name or 'H'}",
    )


def poisson_bracket(
    F: ScalarFunction, G: ScalarFunction, x: "PhasePoint | np.ndarray"
) -> np.ndarray:
    """{F,G} = Σ(∂F/∂p_i ∂G/∂q_i − ∂F/∂q_i ∂G/∂p_i)。反対称。"""
    n = _require_same_dimension(F, G)
    coords = as_coords(x, n)
    fq, fp = _split(F.grad(coords), n)
    gq, gp = _split(G.grad(coords), n)
    return np.sum(fp * gq - fq * gp, axis=-1)


def omega_pairing(H: ScalarFunction, K: SmoothField, x: "PhasePoint | np.ndarray") -> np.ndarray:
    """ω(X_H, K)(x) = dH(x)(K(x))。K = X_k のとき poisson_bracket(k, H) と一致する。"""
    n = _require_same_dimension(H, K)
    coords = as_coords(x, n)
    value = np.sum(H.grad(coords) * K(coords), axis=-1)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite omega pairing")
    return value
