"""
モデルライブラリ
作用・角度チャートが既知の可積分系を組み立てる。
- harmonic: 調和振動子族 H₁ = ½Σa_i²q_i² + ½Σp_i², H_k = ½a_k q_k² + ½p_k²/a_k (k ≥ 2)
- r4: R⁴ の二振動子例（G₁, G₂）と摂動 K₁, K₂, K₃
- 1dof: H = ½(q²+p²), k = q の 1 自由度系（二次スケーリングの閉形式検証用）
"""
import logging
from typing import Any, Callable, Sequence

import numpy as np

from app.models.errors import ChartError, DomainError, LabError
from app.models.phase import ScalarFunction, SmoothField, zero_field
from app.models.system import IntegrableModel, Perturbation
from app.services.symplectic import hamiltonian_field

logger = logging.getLogger(__name__)

MODEL_NAMES = ("harmonic", "r4", "1dof")


def _harmonic_hamiltonians(a: np.ndarray) -> tuple[ScalarFunction, ...]:
    n = a.size

    def h1(x):
        q, p = x[..., :n], x[..., n:]
        return 0.5 * np.sum(a**2 * q**2, axis=-1) + 0.5 * np.sum(p**2, axis=-1)

    def h1_grad(x):
        q, p = x[..., :n], x[..., n:]
        return np.concatenate([a**2 * q, p], axis=-1)

    hams = [ScalarFunction(n=n, evaluator=h1, gradient=h1_grad, name="H1")]

    for k in range(1, n):

        def hk(x, k=k):
            return 0.5 * a[k] * x[..., k] ** 2 + 0.5 * x[..., n + k] ** 2 / a[k]

        def hk_grad(x, k=k):
            g = np.zeros_like(x)
            g[..., k] = a[k] * x[..., k]
            g[..., n + k] = x[..., n + k] / a[k]
            return g

        hams.append(ScalarFunction(n=n, evaluator=hk, gradient=hk_grad, name=f"H{k + 1}"))
    return tuple(hams)


def _harmonic_frequencies(a: np.ndarray) -> np.ndarray:
    """H̃₁ = Σ a_i I_i, H̃_k = I_k なので [k, i] = ∂H̃_k/∂I_i は定数行列。"""
    n = a.size
    M = np.eye(n)
    M[0, :] = a
    return M


def _default_radius(M: np.ndarray, I0: np.ndarray) -> float:
    """a₀ = M I₀ から臨界集合（いずれかの I_i = 0 の像）までの距離の半分。"""
    Minv = np.linalg.inv(M)
    distances = np.abs(I0) / np.linalg.norm(Minv, axis=1)
    return 0.5 * float(np.min(distances))


def build_harmonic_family(
    a: Sequence[float],
    *,
    drift: Sequence[float] | None = None,
    actions: Sequence[float] | None = None,
    radius: float | None = None,
    name: str = "harmonic",
) -> IntegrableModel:
    """
    調和振動子族を作る。チャートは
    q_i = √(2I_i/a_i) cos θ_i, p_i = √(2a_iI_i) sin θ_i。
    drift を与えると V = Σ c_k X_{H_k}（定数係数）を付ける。
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise LabError("a must be a non-empty vector")
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise LabError(f"all a_i must be positive, got {a.tolist()}")
    n = a.size
    sqrt_a = np.sqrt(a)
    M = _harmonic_frequencies(a)
    c = np.zeros(n) if drift is None else np.asarray(drift, dtype=float)
    if c.shape != (n,):
        raise LabError(f"drift coefficients must have length {n}")
    I0 = np.ones(n) if actions is None else np.asarray(actions, dtype=float)
    if I0.shape != (n,) or np.any(I0 <= 0):
        raise ChartError(f"chart actions must be {n} positive numbers, got {I0.tolist()}")

    hams = _harmonic_hamiltonians(a)

    def to_action_angle(x):
        q, p = x[..., :n], x[..., n:]
        u = sqrt_a * q
        v = p / sqrt_a
        I = 0.5 * (u**2 + v**2)
        theta = np.mod(np.arctan2(v, u), 2.0 * np.pi)
        return I, theta

    def from_action_angle(I, theta):
        r = np.sqrt(2.0 * np.asarray(I))
        return np.concatenate([r / sqrt_a * np.cos(theta), r * sqrt_a * np.sin(theta)], axis=-1)

    def jacobian(x):
        # dI_i = a_i q_i dq_i + (p_i/a_i) dp_i,  dθ_i = (q_i dp_i − p_i dq_i)/(2I_i)
        q, p = x[..., :n], x[..., n:]
        two_I = a * q**2 + p**2 / a
        jac = np.zeros(x.shape[:-1] + (2 * n, 2 * n))
        idx = np.arange(n)
        jac[..., idx, idx] = a * q
        jac[..., idx, n + idx] = p / a
        jac[..., n + idx, idx] = -p / two_I
        jac[..., n + idx, n + idx] = q / two_I
        return jac

    if np.any(c != 0):

        def drift_eval(x):
            q, p = x[..., :n], x[..., n:]
            out = np.zeros_like(x)
            # X_{H₁} = (p, −a²q)、X_{H_k} は第 k 平面のみ (p_k/a_k, −a_k q_k)
            out[..., :n] += c[0] * p
            out[..., n:] -= c[0] * a**2 * q
            for k in range(1, n):
                out[..., k] += c[k] * p[..., k] / a[k]
                out[..., n + k] -= c[k] * a[k] * q[..., k]
            return out

        drift_field = SmoothField(n=n, evaluator=drift_eval, name="V")
    else:
        drift_field = None

    omega0 = -M.T @ c

    return IntegrableModel(
        name=name,
        n=n,
        hamiltonians=hams,
        to_action_angle=to_action_angle,
        from_action_angle=from_action_angle,
        freq_matrix=lambda I: M.copy(),
        drift_freq=lambda I: omega0.copy(),
        chart_center=M @ I0,
        chart_radius=_default_radius(M, I0) if radius is None else float(radius),
        drift=drift_field,
        action_angle_jacobian=jacobian,
        constant_frequencies=True,
        spec={"name": name, "params": a.tolist(), "drift": c.tolist(), "actions": I0.tolist(),
              "radius": radius},
    )


# --- 摂動 ---


def hamiltonian_perturbation(k: ScalarFunction, name: str) -> Perturbation:
    return Perturbation(name=name, field=hamiltonian_field(k), hamiltonian_k=k)


def zero_perturbation(n: int) -> Perturbation:
    k = ScalarFunction(
        n=n,
        evaluator=lambda x: np.zeros(x.shape[:-1]),
        gradient=np.zeros_like,
        name="0",
    )
    return Perturbation(name="zero", field=zero_field(n), hamiltonian_k=k)


def constant_perturbation(n: int, c: float = 1.0) -> Perturbation:
    """k ≡ c、したがって K = X_c ≡ 0。"""
    k = ScalarFunction(
        n=n,
        evaluator=lambda x: np.full(x.shape[:-1], c),
        gradient=np.zeros_like,
        name=f"const({c})",
    )
    return Perturbation(name="constant", field=zero_field(n), hamiltonian_k=k)


def q1_perturbation(n: int) -> Perturbation:
    """k = q₁、K = X_{q₁} = −e_{p₁}。"""

    def grad(x):
        g = np.zeros_like(x)
        g[..., 0] = 1.0
        return g

    k = ScalarFunction(n=n, evaluator=lambda x: x[..., 0].copy(), gradient=grad, name="q1")
    return hamiltonian_perturbation(k, "q1")


def h1_squared_perturbation(model: IntegrableModel) -> Perturbation:
    """k = H₁²。{H_i, k} = 2H₁{H_i, H₁} = 0 なので平均も二次係数も消える。"""
    H1 = model.hamiltonians[0]
    k = ScalarFunction(
        n=model.n,
        evaluator=lambda x: H1(x) ** 2,
        gradient=lambda x: 2.0 * H1(x)[..., None] * H1.grad(x),
        name="H1^2",
    )
    return hamiltonian_perturbation(k, "h1_squared")


def _r4_perturbations() -> tuple[Perturbation, Perturbation, Perturbation]:
    """(x₁, x₂, x₃, x₄) = (q₁, q₂, p₁, p₂) の並びで記載どおりの K₁, K₂, K₃。"""

    def plane2_regular(x):
        return x[..., 1] ** 2 + x[..., 3] ** 2 > 0

    def plane1_regular(x):
        return x[..., 0] ** 2 + x[..., 2] ** 2 > 0

    def k1(x):
        out = np.zeros_like(x)
        out[..., 1] = x[..., 1] / (x[..., 1] ** 2 + x[..., 3] ** 2)
        return out

    def k2(x):
        rho2 = x[..., 0] ** 2 + x[..., 2] ** 2
        out = np.zeros_like(x)
        out[..., 0] = x[..., 2] / rho2**2
        out[..., 2] = x[..., 0] / rho2**2
        return out

    def k3(x):
        rho3 = (x[..., 0] ** 2 + x[..., 2] ** 2) ** 1.5
        out = np.zeros_like(x)
        out[..., 0] = x[..., 2] ** 2 / rho3
        out[..., 2] = -x[..., 0] / rho3
        return out

    return (
        Perturbation(name="K1", field=SmoothField(n=2, evaluator=k1, domain=plane2_regular, name="K1")),
        Perturbation(
            name="K2",
            field=SmoothField(n=2, evaluator=k2, domain=plane1_regular, name="K2"),
            unverified_hamiltonian=True,
        ),
        Perturbation(
            name="K3",
            field=SmoothField(n=2, evaluator=k3, domain=plane1_regular, name="K3"),
            unverified_hamiltonian=True,
        ),
    )


def build_r4_example(
    *, actions: Sequence[float] | None = None, radius: float | None = None
) -> tuple[IntegrableModel, tuple[Perturbation, Perturbation, Perturbation]]:
    """
    R⁴ の例。G₁ = ½(x₁²+x₃²) + ½(x₂²+x₄²)（B が駆動）, G₂ = ½(x₂²+x₄²)（W が駆動）。
    a = (1, 1) の調和振動子族と一致し、振動数行列は [[1,1],[0,1]]。
    """
    model = build_harmonic_family((1.0, 1.0), actions=actions, radius=radius, name="r4")
    return model, _r4_perturbations()


def build_1dof_case(
    *, actions: Sequence[float] | None = None, radius: float | None = None
) -> tuple[IntegrableModel, Perturbation]:
    """H = ½(q²+p²)、k = q（K = X_q = (0, −1)）。"""
    model = build_harmonic_family((1.0,), actions=actions, radius=radius, name="1dof")
    return model, q1_perturbation(1)


# --- レジストリ ---


def build_model(
    name: str,
    params: Sequence[float] = (),
    *,
    drift: Sequence[float] | None = None,
    actions: Sequence[float] | None = None,
    radius: float | None = None,
) -> IntegrableModel:
    """名前とパラメータからモデルを作る（CLI 設定・ワーカーでの再構築用）。"""
    if name == "harmonic":
        if not params:
            raise LabError("harmonic model needs its frequency vector a")
        return build_harmonic_family(params, drift=drift, actions=actions, radius=radius)
    if name in ("r4", "1dof"):
        if params:
            raise LabError(f"model {name} takes no parameters")
        dim = 2 if name == "r4" else 1
        return build_harmonic_family(
            (1.0,) * dim, drift=drift, actions=actions, radius=radius, name=name
        )
    raise LabError(f"unknown model {name!r}; available: {', '.join(MODEL_NAMES)}")


def rebuild_model(spec: dict[str, Any]) -> IntegrableModel:
    params = spec.get("params") if spec.get("name") == "harmonic" else ()
    drift = spec.get("drift")
    model = build_model(
        spec["name"],
        params or (),
        drift=drift if drift and any(drift) else None,
        actions=spec.get("actions"),
        radius=spec.get("radius"),
    )
    if spec.get("center") is not None:
        model = model.with_chart(center=spec["center"])
    return model


_PERTURBATIONS: dict[str, Callable[[IntegrableModel], Perturbation]] = {
    "zero": lambda m: zero_perturbation(m.n),
    "constant": lambda m: constant_perturbation(m.n),
    "q": lambda m: q1_perturbation(m.n),
    "q1": lambda m: q1_perturbation(m.n),
    "h1_squared": h1_squared_perturbation,
}


def build_perturbation(model: IntegrableModel, name: str) -> Perturbation:
    if name in ("K1", "K2", "K3"):
        if model.name != "r4":
            raise LabError(f"perturbation {name} is defined only for the r4 model")
        return _r4_perturbations()[int(name[1]) - 1]
    builder = _PERTURBATIONS.get(name)
    if builder is None:
        raise LabError(
            f"unknown perturbation {name!r}; available: K1, K2, K3, {', '.join(_PERTURBATIONS)}"
        )
    return builder(model)


def list_models() -> list[dict[str, Any]]:
    return [
        {
            "name": "harmonic",
            "params": "a_1..a_n > 0",
            "hamiltonians": "H1 = 1/2 sum a_i^2 q_i^2 + 1/2 sum p_i^2; H_k = 1/2 a_k q_k^2 + 1/2 p_k^2/a_k",
            "perturbations": sorted(_PERTURBATIONS),
        },
        {
            "name": "r4",
            "params": "none",
            "hamiltonians": "G1 = 1/2(x1^2+x3^2) + 1/2(x2^2+x4^2); G2 = 1/2(x2^2+x4^2)",
            "perturbations": ["K1", "K2", "K3"] + sorted(_PERTURBATIONS),
        },
        {
            "name": "1dof",
            "params": "none",
            "hamiltonians": "H = 1/2(q^2+p^2)",
            "perturbations": sorted(_PERTURBATIONS),
        },
    ]


def frequency_matrix_fd(model: IntegrableModel, I: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """ω_k^i = ∂(H_k∘φ)/∂I_i をチャート上の中心差分で求める（[k, i] の並び）。"""
    I = np.asarray(I, dtype=float)
    if np.any(I - h <= 0):
        raise DomainError("actions too close to the critical set for differencing")
    M = np.empty((model.n, model.n))
    for i in range(model.n):
        e = np.zeros(model.n)
        e[i] = h
        M[:, i] = (model.energy_of_actions(I + e) - model.energy_of_actions(I - e)) / (2.0 * h)
    return M
