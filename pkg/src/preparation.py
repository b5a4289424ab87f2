"""
态制备模块

Alice 的两个等价黑盒：
1. EPR 源 + 单分量/联合测量（虚拟纠缠）
2. 直接调制的压缩态/相干态

以及 μ ↔ T ↔ s 之间的换算。
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DomainError
from gaussian_core import (GaussianEnsemble, N0Like, SampleBatch, apply_linear, beamsplitter,
                           derive_rng, diagonal_ensemble, epr_ensemble, n0_value, sample,
                           vacuum_ensemble)

logger = logging.getLogger(__name__)

SINGLE_QUADRATURE = 'single_quadrature'
JOINT = 'joint'
MODES = (SINGLE_QUADRATURE, JOINT)
QUADRATURES = ("Q'", "P'")

PREPARED_LABELS = ("Q_A", "P_A", "Q", "P")

# 子流编号
STREAM_EPR = 1
STREAM_DIRECT = 2
STREAM_BASIS = 3


def mu_to_transmission(mu: float) -> float:
    """联合测量分束器透过率 T = 1/(1+μ)"""
    if mu < 0:
        raise DomainError(f"μ 不能为负: {mu}")
    return 1.0 / (1.0 + mu)


def squeezing_of(v: float, mu: float) -> float:
    """压缩因子 s = (μV+1)/(V+μ)，μ→∞ 时 s→V"""
    if v < 1:
        raise DomainError(f"调制方差不能小于 1: V={v}")
    if mu < 0:
        raise DomainError(f"μ 不能为负: {mu}")
    if math.isinf(mu):
        return float(v)
    return (mu * v + 1.0) / (v + mu)


def joint_estimator_coefficients(v: float, mu: float) -> Tuple[float, float]:
    """联合测量下的估计系数 (√(V²−1)/(V+μ), √(V²−1)/(V+1/μ))"""
    c = math.sqrt(v * v - 1.0)
    return c / (v + mu), c / (v + 1.0 / mu)


def check_squeezing(v: float, s: float) -> None:
    """Alice 的黑盒只能给出 1/V ≤ s ≤ V"""
    if not v >= 1:
        raise DomainError(f"调制方差不能小于 1: V={v}")
    tol = 1e-12 * v
    if not (1.0 / v - tol <= s <= v + tol):
        raise DomainError(f"压缩因子超出 [1/V, V]: s={s}, V={v}")


@dataclass
class PreparationConfig:
    """Alice 的制备参数

    Attributes:
        v: 调制方差 V ≥ 1
        mode: single_quadrature 或 joint
        mu: 联合测量的噪声比 μ > 0（仅 joint）
        measured_quadrature: "Q'" 或 "P'"（仅单分量模式；None 表示每次按 Bernoulli(1/2) 随机选择）
    """
    v: float
    mode: str = JOINT
    mu: Optional[float] = None
    measured_quadrature: Optional[str] = None

    def __post_init__(self):
        if not self.v >= 1:
            raise DomainError(f"调制方差不能小于 1: V={self.v}")
        if self.mode not in MODES:
            raise DomainError(f"未知的制备模式: {self.mode}")
        if self.mode == JOINT:
            if self.mu is None or not self.mu > 0 or math.isinf(self.mu):
                raise DomainError(f"联合测量模式需要有限的 μ > 0: {self.mu}")
            if self.measured_quadrature is not None:
                raise DomainError("联合测量模式不能指定单一测量分量")
        else:
            if self.mu is not None:
                raise DomainError("单分量模式不接受 μ 参数")
            if self.measured_quadrature not in (None,) + QUADRATURES:
                raise DomainError(f"未知的测量分量: {self.measured_quadrature}")

    @classmethod
    def coherent(cls, v: float) -> 'PreparationConfig':
        """相干态调制（μ=1, s=1）"""
        return cls(v=v, mode=JOINT, mu=1.0)

    @classmethod
    def squeezed(cls, v: float, quadrature: Optional[str] = None) -> 'PreparationConfig':
        """压缩态调制（单分量测量, s=1/V）"""
        return cls(v=v, mode=SINGLE_QUADRATURE, measured_quadrature=quadrature)

    @property
    def squeezing(self) -> float:
        """Q 分量的压缩因子（单分量模式按测量 Q' 计）"""
        if self.mode == JOINT:
            return squeezing_of(self.v, self.mu)
        if self.measured_quadrature == "P'":
            return float(self.v)
        return 1.0 / self.v

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {
            'v': self.v,
            'mode': self.mode,
            'mu': self.mu,
            'measured_quadrature': self.measured_quadrature,
        }

    @staticmethod
    def from_dict(data: Dict) -> 'PreparationConfig':
        """从字典创建"""
        return PreparationConfig(v=data['v'], mode=data.get('mode', JOINT), mu=data.get('mu'),
                                 measured_quadrature=data.get('measured_quadrature'))


@dataclass
class PreparedState:
    """单次制备的结果（单分量模式下未测量的估计量为 None）"""
    qa: Optional[float]
    pa: Optional[float]
    conditional_q: float
    conditional_p: float
    squeezing: float
    basis: Optional[str] = None


def conditional_variances(cfg: PreparationConfig, n0: N0Like = None,
                          basis: Optional[str] = None) -> Tuple[float, float]:
    """(V_{Q|Q_A}, V_{P|P_A})，单位 n0

    联合模式为 (s·n0, n0/s)；单分量模式下被测分量为 n0/V，另一分量没有任何信息，等于 V·n0。
    """
    unit = n0_value(n0)
    if cfg.mode == JOINT:
        s = cfg.squeezing
        return s * unit, unit / s
    basis = basis or cfg.measured_quadrature or "Q'"
    if basis == "Q'":
        return unit / cfg.v, cfg.v * unit
    return cfg.v * unit, unit / cfg.v


def estimator_coefficient(e: GaussianEnsemble, target: str = "Q", source: str = "Q'") -> float:
    """最优线性估计系数 α = ⟨target·source⟩/⟨source²⟩"""
    var_source = e.variance(source)
    if var_source <= 0:
        raise DomainError(f"{source} 的方差为 0，无法估计")
    return e.covariance(target, source) / var_source


def alice_estimator_single(e: GaussianEnsemble, sample_qprime, target: str = "Q",
                           source: str = "Q'"):
    """单分量测量后 Alice 的估计 Q_A = α·Q'（支持标量和数组）"""
    return estimator_coefficient(e, target, source) * sample_qprime


def ensemble_for_conditionals(v: float, cq: float, cp: float, n0: N0Like = None) -> GaussianEnsemble:
    """由条件方差 (cq, cp)（无量纲）构造 (Q_A, P_A, Q, P) 的协方差

    Var(Q_A) = Cov(Q_A, Q) = V − cq，Var(Q) = V，P 同理。
    """
    unit = n0_value(n0)
    known_q = max(v - cq, 0.0)
    known_p = max(v - cp, 0.0)
    cov = np.array([
        [known_q, 0.0, known_q, 0.0],
        [0.0, known_p, 0.0, known_p],
        [known_q, 0.0, v, 0.0],
        [0.0, known_p, 0.0, v],
    ])
    return GaussianEnsemble(PREPARED_LABELS, np.zeros(4), cov * unit)


def ensemble_for_squeezing(v: float, s: float, n0: N0Like = None) -> GaussianEnsemble:
    """压缩因子为 s 的制备（V_{Q|Q_A} = s·n0, V_{P|P_A} = n0/s）"""
    check_squeezing(v, s)
    return ensemble_for_conditionals(v, s, 1.0 / s, n0)


def prepared_ensemble(cfg: PreparationConfig, n0: N0Like = None,
                      basis: Optional[str] = None) -> GaussianEnsemble:
    """(Q_A, P_A, Q, P) 的解析协方差，单分量模式下未测量的估计量取恒 0"""
    if cfg.mode == SINGLE_QUADRATURE and basis is None and cfg.measured_quadrature is None:
        raise DomainError("随机基的单分量制备没有单一的高斯描述，请指定 basis")
    cq, cp = conditional_variances(cfg, 1.0, basis)
    return ensemble_for_conditionals(cfg.v, cq, cp, n0)


def joint_measurement_ensemble(v: float, mu: float, n0: N0Like = None) -> GaussianEnsemble:
    """联合测量的物理实现：EPR 的一半与真空经透过率 T=1/(1+μ) 的分束器混合，
    透射口测 Q、反射口测 P，再按估计系数缩放，返回 (Q_A, P_A, Q, P) 的协方差
    """
    if not (mu > 0 and math.isfinite(mu)):
        raise DomainError(f"μ 必须为有限正数: {mu}")
    t = mu_to_transmission(mu)
    alpha_q, alpha_p = joint_estimator_coefficients(v, mu)
    e = epr_ensemble(v, n0).direct_sum(vacuum_ensemble(("Q_vac", "P_vac"), n0))
    e = beamsplitter(e, "Q'", "Q_vac", t, out1="Q_t", out2="Q_r")
    e = beamsplitter(e, "P'", "P_vac", t, out1="P_t", out2="P_r")
    # 透射口 Q_t/√T = Q' + √μ·Q_vac；反射口 −P_r/√(1−T) = P' − P_vac/√μ
    scale = np.diag([alpha_q / math.sqrt(t), alpha_p / math.sqrt(1.0 - t)])
    e = apply_linear(e, ("Q_t", "P_r"), scale, outputs=("Q_A", "P_A"))
    return e.marginal(PREPARED_LABELS)


@dataclass
class PreparationResult:
    """一次批量制备的输出

    Attributes:
        config: 制备参数
        n0: 散粒噪声单位
        batch: (Q_A, P_A, Q, P) 样本，单分量模式下未测量的估计量为 NaN
        basis: 单分量模式的测量基（0 表示 Q'，1 表示 P'），联合模式为 None
    """
    config: PreparationConfig
    n0: float
    batch: SampleBatch
    basis: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.batch.n

    @property
    def transmitted(self) -> SampleBatch:
        """发送给 Bob 的 (Q, P)"""
        return self.batch.select(("Q", "P"))

    @property
    def states(self) -> List[PreparedState]:
        """逐个符号的 PreparedState 列表"""
        qa = self.batch.column("Q_A")
        pa = self.batch.column("P_A")
        states = []
        for i in range(self.n):
            basis = None
            if self.basis is not None:
                basis = QUADRATURES[int(self.basis[i])]
            cq, cp = conditional_variances(self.config, self.n0, basis)
            states.append(PreparedState(
                qa=None if math.isnan(qa[i]) else float(qa[i]),
                pa=None if math.isnan(pa[i]) else float(pa[i]),
                conditional_q=cq,
                conditional_p=cp,
                squeezing=cq / self.n0,
                basis=basis,
            ))
        return states


def _basis_choices(cfg: PreparationConfig, n: int, seed: int, stream: Sequence[int]) -> np.ndarray:
    """单分量模式的测量基：固定或 Bernoulli(1/2)"""
    if cfg.measured_quadrature is not None:
        return np.full(n, QUADRATURES.index(cfg.measured_quadrature), dtype=np.int8)
    rng = derive_rng(seed, *stream, STREAM_BASIS)
    return rng.integers(0, 2, size=n, dtype=np.int8)


def prepare_via_epr(cfg: PreparationConfig, n: int, seed: int, n0: N0Like = None,
                    workers: int = 1, stream: Sequence[int] = ()) -> PreparationResult:
    """黑盒一：采样 EPR 态，由 Alice 测量她那一半得到估计量

    联合模式下测量噪声方差为 (μ·n0, n0/μ)，Q_A = αq(Q'+N_Q)，P_A = −αp(P'+N_P)。
    """
    unit = n0_value(n0)
    stream = tuple(stream)
    if cfg.mode == JOINT:
        ensemble = epr_ensemble(cfg.v, unit).direct_sum(
            diagonal_ensemble(("N_Q", "N_P"), (cfg.mu, 1.0 / cfg.mu), unit))
        raw = sample(ensemble, n, seed, workers=workers, stream=stream + (STREAM_EPR,))
        alpha_q, alpha_p = joint_estimator_coefficients(cfg.v, cfg.mu)
        qa = alpha_q * (raw.column("Q'") + raw.column("N_Q"))
        pa = -alpha_p * (raw.column("P'") + raw.column("N_P"))
        basis = None
    else:
        raw = sample(epr_ensemble(cfg.v, unit), n, seed, workers=workers,
                     stream=stream + (STREAM_EPR,))
        basis = _basis_choices(cfg, n, seed, stream)
        alpha = math.sqrt(cfg.v * cfg.v - 1.0) / cfg.v
        qa = np.where(basis == 0, alpha * raw.column("Q'"), np.nan)
        pa = np.where(basis == 1, -alpha * raw.column("P'"), np.nan)
    data = np.column_stack([qa, pa, raw.column("Q"), raw.column("P")])
    logger.debug(f"EPR 制备完成: mode={cfg.mode}, V={cfg.v}, n={n}")
    return PreparationResult(cfg, unit, SampleBatch(PREPARED_LABELS, data, seed), basis)


def prepare_direct(cfg: PreparationConfig, n: int, seed: int, n0: N0Like = None,
                   workers: int = 1, stream: Sequence[int] = ()) -> PreparationResult:
    """黑盒二：随机数发生器给出 (Q_A, P_A)，再叠加压缩/相干态的量子噪声

    Var(Q_A) = (V−s)·n0，Q = Q_A + δ，δ ~ N(0, s·n0)；P 分量用 1/s。
    """
    unit = n0_value(n0)
    stream = tuple(stream)
    unit_normals = sample(vacuum_ensemble(("X_Q", "X_P", "D_Q", "D_P"), 1.0), n, seed,
                          workers=workers, stream=stream + (STREAM_DIRECT,))
    z = unit_normals.data
    basis = None
    if cfg.mode == JOINT:
        s = cfg.squeezing
        std = np.sqrt(np.array([max(cfg.v - s, 0.0), max(cfg.v - 1.0 / s, 0.0), s, 1.0 / s]) * unit)
        scaled = z * std
        qa, pa = scaled[:, 0], scaled[:, 1]
    else:
        basis = _basis_choices(cfg, n, seed, stream)
        squeezed = unit / cfg.v
        known = max(cfg.v - 1.0 / cfg.v, 0.0) * unit
        on_q = basis == 0
        # 被测分量：已知部分 + 压缩噪声；另一分量：方差 V 的未知噪声
        std_known_q = np.where(on_q, math.sqrt(known), 0.0)
        std_known_p = np.where(on_q, 0.0, math.sqrt(known))
        std_noise_q = np.where(on_q, math.sqrt(squeezed), math.sqrt(cfg.v * unit))
        std_noise_p = np.where(on_q, math.sqrt(cfg.v * unit), math.sqrt(squeezed))
        scaled = np.column_stack([z[:, 0] * std_known_q, z[:, 1] * std_known_p,
                                  z[:, 2] * std_noise_q, z[:, 3] * std_noise_p])
        qa = np.where(on_q, scaled[:, 0], np.nan)
        pa = np.where(on_q, np.nan, scaled[:, 1])
    q = scaled[:, 0] + scaled[:, 2]
    p = scaled[:, 1] + scaled[:, 3]
    data = np.column_stack([qa, pa, q, p])
    logger.debug(f"直接制备完成: mode={cfg.mode}, V={cfg.v}, n={n}")
    return PreparationResult(cfg, unit, SampleBatch(PREPARED_LABELS, data, seed), basis)
